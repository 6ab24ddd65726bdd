//! A small attention-gated convolutional classifier.
//!
//! `64×64×1` input → stem conv (8 ch, 32×32) → block 1 (32 ch, 16×16, fine
//! gate site) → block 2 (64 ch, 8×8, coarse gate site) → global average pool
//! → affine head. Each gate site holds a cascade of two attention gates whose
//! attended output replaces the feature map for everything downstream.

mod attribution;
mod checkpoint;
mod train;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::NORM_EPSILON;
use crate::consistency::{DualWitness, WitnessOrigin};
use crate::diff::{Graph, Tensor, Var};
use crate::error::{invalid, shape_err, Result};
use crate::grid::{build_neighborhood, NeighborhoodMap, ProbabilityMap};

pub use attribution::{attributions, projected_attributions, upsample};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use train::{evaluate, train, train_with, Adam, EpochMetrics, EvalSummary, MetricsLog, TrainOutcome};

pub const INPUT_SIDE: usize = 64;
pub const FINE_SIDE: usize = 16;
pub const COARSE_SIDE: usize = 8;
pub const STEM_CHANNELS: usize = 8;
pub const FINE_CHANNELS: usize = 32;
pub const COARSE_CHANNELS: usize = 64;
pub const CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No attention at all; used as the reference scorer.
    Baseline,
    TauK,
    TauL,
    Unconstrained,
    Dual,
    KlZeroLf,
    KlZeroFl,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::TauK,
        Variant::TauL,
        Variant::Unconstrained,
        Variant::Dual,
        Variant::KlZeroLf,
        Variant::KlZeroFl,
    ];

    pub fn has_gate(self, site: Site) -> bool {
        match (self, site) {
            (Variant::Baseline, _) => false,
            (Variant::TauK, Site::Coarse) | (Variant::TauL, Site::Fine) => false,
            _ => true,
        }
    }

    pub fn has_penalty(self) -> bool {
        matches!(self, Variant::Dual | Variant::KlZeroLf | Variant::KlZeroFl)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::TauK => "tau_k",
            Variant::TauL => "tau_l",
            Variant::Unconstrained => "unconstrained",
            Variant::Dual => "dual",
            Variant::KlZeroLf => "kl_zero_lf",
            Variant::KlZeroFl => "kl_zero_fl",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| invalid!("unknown variant {s:?}"))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the dual variant obtains its multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WitnessMode {
    /// One trainable multiplier per coarse cell, initialized at zero.
    Free,
    /// `λ_i = w1·ln τ^l_i + w2·ln T_i + b`, initialized at the closed form.
    Shallow,
    /// The closed form, recomputed per input and not trained.
    ClosedForm,
}

impl std::str::FromStr for WitnessMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free" => Ok(WitnessMode::Free),
            "shallow" => Ok(WitnessMode::Shallow),
            "closed_form" => Ok(WitnessMode::ClosedForm),
            _ => Err(invalid!("unknown witness mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Fine,
    Coarse,
}

impl std::str::FromStr for Site {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" | "k" => Ok(Site::Fine),
            "coarse" | "l" => Ok(Site::Coarse),
            _ => Err(invalid!("unknown site {s:?}")),
        }
    }
}

impl Site {
    pub fn side(self) -> usize {
        match self {
            Site::Fine => FINE_SIDE,
            Site::Coarse => COARSE_SIDE,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Site::Fine => FINE_CHANNELS,
            Site::Coarse => COARSE_CHANNELS,
        }
    }

    pub fn cells(self) -> usize {
        self.side() * self.side()
    }

    fn prefix(self) -> &'static str {
        match self {
            Site::Fine => "gate_k",
            Site::Coarse => "gate_l",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Penalty weight; only read by the penalized variants.
    pub alpha: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub witness: WitnessMode,
    /// Standard deviation of the initial gate keys.
    pub key_init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dual,
            alpha: 10.0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 30,
            batch_size: 16,
            seed: 1,
            witness: WitnessMode::Free,
            key_init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid!("alpha must be finite and nonnegative"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_epsilon > 0.0) {
            return Err(invalid!("adam parameters out of range"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        if !(self.key_init_scale >= 0.0 && self.key_init_scale.is_finite()) {
            return Err(invalid!("key_init_scale must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// The three-scalar witness map `λ_i = w1·ln τ^l_i + w2·ln T_i + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WitnessLayer {
    pub w1: f64,
    pub w2: f64,
    pub b: f64,
}

impl WitnessLayer {
    /// `(−½, ½, 0)`: reproduces the closed-form witness.
    pub fn closed_form() -> Self {
        Self { w1: -0.5, w2: 0.5, b: 0.0 }
    }

    pub fn apply(
        &self,
        tau_fine: &ProbabilityMap,
        tau_coarse: &ProbabilityMap,
        nmap: &NeighborhoodMap,
    ) -> Result<DualWitness> {
        if ![self.w1, self.w2, self.b].iter().all(|v| v.is_finite()) {
            return Err(invalid!("witness layer parameters must be finite"));
        }
        let t = nmap.aggregate(tau_fine.values())?;
        if t.len() != tau_coarse.len() {
            return Err(shape_err!("{} block sums for {} coarse cells", t.len(), tau_coarse.len()));
        }
        let lambda =
            tau_coarse.values().iter().zip(&t).map(|(l, t)| self.w1 * l.ln() + self.w2 * t.ln() + self.b).collect();
        DualWitness::new(lambda, WitnessOrigin::LearnedShallow)
    }
}

/// Multiplier applied after a gate cascade: two uniform gates scale features
/// by `1/n²`, which the gain undoes.
pub fn gate_gain(site: Site) -> f64 {
    let n = site.cells() as f64;
    n * n
}

/// Parameter names and shapes, in storage order.
pub fn param_layout(config: &TrainConfig) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("stem.w".into(), vec![STEM_CHANNELS, 1, 5, 5]),
        ("stem.b".into(), vec![STEM_CHANNELS]),
        ("block1.w".into(), vec![FINE_CHANNELS, STEM_CHANNELS, 3, 3]),
        ("block1.b".into(), vec![FINE_CHANNELS]),
        ("block2.w".into(), vec![COARSE_CHANNELS, FINE_CHANNELS, 3, 3]),
        ("block2.b".into(), vec![COARSE_CHANNELS]),
        ("head.w".into(), vec![CLASSES, COARSE_CHANNELS]),
        ("head.b".into(), vec![CLASSES]),
    ];
    for site in [Site::Fine, Site::Coarse] {
        if config.variant.has_gate(site) {
            let (c, n) = (site.channels(), site.cells());
            for stage in ["a", "b"] {
                out.push((format!("{}.{stage}.transform", site.prefix()), vec![c, c]));
                out.push((format!("{}.{stage}.keys", site.prefix()), vec![n, c]));
            }
        }
    }
    if config.variant == Variant::Dual {
        match config.witness {
            WitnessMode::Free => out.push(("witness.lambda".into(), vec![COARSE_SIDE * COARSE_SIDE])),
            WitnessMode::Shallow => out.push(("witness.map".into(), vec![3])),
            WitnessMode::ClosedForm => {}
        }
    }
    out
}

/// Tape handles of one gate site.
#[derive(Debug, Clone, Copy)]
pub struct SiteVars {
    /// `[B, cells]` attention of the second gate.
    pub tau: Var,
    pub log_tau: Var,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Recorded {
    /// Parameter leaves, aligned with [`ToyNet::params`].
    pub params: Vec<Var>,
    pub logits: Var,
    pub fine: Option<SiteVars>,
    pub coarse: Option<SiteVars>,
    /// `[B, coarse cells]`, dual variant only.
    pub lambda: Option<Var>,
    pub batch: usize,
}

/// Loss terms on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub penalty: Option<Var>,
}

/// Plain values of a forward pass, one entry per input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<[f64; CLASSES]>,
    pub tau_fine: Option<Vec<Vec<f64>>>,
    pub tau_coarse: Option<Vec<Vec<f64>>>,
    pub lambda: Option<Vec<Vec<f64>>>,
}

impl ForwardOutput {
    pub fn predictions(&self) -> Vec<usize> {
        self.logits.iter().map(|l| usize::from(l[1] > l[0])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    config: TrainConfig,
    params: Vec<(String, Tensor)>,
    parent: Arc<[usize]>,
}

/// Coarse cell covering fine cell `j`.
pub(crate) fn coarse_parent_of(j: usize) -> usize {
    let f = FINE_SIDE / COARSE_SIDE;
    (j / FINE_SIDE / f) * COARSE_SIDE + (j % FINE_SIDE) / f
}

fn coarse_parent() -> Arc<[usize]> {
    let nmap = build_neighborhood(FINE_SIDE, COARSE_SIDE).expect("16 is divisible by 8");
    (0..FINE_SIDE * FINE_SIDE).map(|j| nmap.parent(j)).collect()
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

fn near_identity(c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = normal(&[c, c], 0.01, rng);
    for i in 0..c {
        t.data_mut()[i * c + i] += 1.0;
    }
    t
}

impl ToyNet {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = param_layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = match name.rsplit('.').next().unwrap_or_default() {
                    "b" | "lambda" => Tensor::zeros(&shape),
                    "w" if name.starts_with("head") => normal(&shape, (1.0 / shape[1] as f64).sqrt(), &mut rng),
                    "w" => {
                        let fan_in: usize = shape[1..].iter().product();
                        normal(&shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
                    }
                    "transform" => near_identity(shape[0], &mut rng),
                    "keys" => normal(&shape, config.key_init_scale, &mut rng),
                    "map" => {
                        let w = WitnessLayer::closed_form();
                        Tensor::vector(vec![w.w1, w.w2, w.b])
                    }
                    other => unreachable!("no initializer for {other}"),
                };
                (name, t)
            })
            .collect();
        Ok(Self { config, params, parent: coarse_parent() })
    }

    /// Reassembles a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: TrainConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(invalid!("expected {} parameter tensors, found {}", layout.len(), params.len()));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&params) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(invalid!("parameter {got_name} {:?} does not match {name} {shape:?}", t.shape()));
            }
            if !t.is_finite() {
                return Err(invalid!("parameter {name} is not finite"));
            }
        }
        Ok(Self { config, params, parent: coarse_parent() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records the forward pass of a `[B, 1, 64, 64]` batch.
    pub fn record(&self, g: &mut Graph, images: Tensor) -> Result<Recorded> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != INPUT_SIDE || s[3] != INPUT_SIDE {
            return Err(shape_err!("expected [B, 1, {INPUT_SIDE}, {INPUT_SIDE}] images, got {s:?}"));
        }
        if !images.is_finite() {
            return Err(invalid!("images must be finite"));
        }
        let batch = s[0];
        let vars: Vec<Var> = self.params.iter().map(|(_, t)| g.param(t.clone())).collect();
        let p = |name: &str| -> Var {
            let i = self.params.iter().position(|(n, _)| n == name).expect("layout parameter");
            vars[i]
        };
        let x = g.constant(images);
        let h = g.conv2d(x, p("stem.w"), Some(p("stem.b")), 2, 2)?;
        let h = g.relu(h);
        let h = g.conv2d(h, p("block1.w"), Some(p("block1.b")), 2, 1)?;
        let h = g.relu(h);
        let (h, fine) = self.gate_site(g, h, Site::Fine, &p)?;
        let h = g.conv2d(h, p("block2.w"), Some(p("block2.b")), 2, 1)?;
        let h = g.relu(h);
        let (h, coarse) = self.gate_site(g, h, Site::Coarse, &p)?;
        let pooled = g.global_avg_pool(h)?;
        let logits = g.matmul_nt(pooled, p("head.w"))?;
        let logits = g.add_bias(logits, p("head.b"))?;

        let lambda = match (self.config.variant, fine, coarse) {
            (Variant::Dual, Some(f), Some(c)) => Some(self.record_lambda(g, f, c, batch, &p)?),
            _ => None,
        };
        Ok(Recorded { params: vars, logits, fine, coarse, lambda, batch })
    }

    fn gate_site(
        &self,
        g: &mut Graph,
        fm: Var,
        site: Site,
        p: &dyn Fn(&str) -> Var,
    ) -> Result<(Var, Option<SiteVars>)> {
        if !self.config.variant.has_gate(site) {
            return Ok((fm, None));
        }
        let pre = site.prefix();
        let phi = gate_potential(g, fm, p(&format!("{pre}.a.transform")), p(&format!("{pre}.a.keys")))?;
        let tau_a = g.softmax(phi);
        let first = g.scale_cells(fm, tau_a)?;
        let phi = gate_potential(g, first, p(&format!("{pre}.b.transform")), p(&format!("{pre}.b.keys")))?;
        let tau = g.softmax(phi);
        let log_tau = g.log_softmax(phi);
        let second = g.scale_cells(first, tau)?;
        let out = g.scale(second, gate_gain(site));
        Ok((out, Some(SiteVars { tau, log_tau })))
    }

    fn record_lambda(
        &self,
        g: &mut Graph,
        fine: SiteVars,
        coarse: SiteVars,
        batch: usize,
        p: &dyn Fn(&str) -> Var,
    ) -> Result<Var> {
        let n = COARSE_SIDE * COARSE_SIDE;
        let shape = [batch, n];
        match self.config.witness {
            WitnessMode::Free => {
                let index: Arc<[usize]> = (0..batch * n).map(|i| i % n).collect();
                let l = g.gather(p("witness.lambda"), index)?;
                g.reshape(l, &shape)
            }
            WitnessMode::Shallow => {
                let t = g.group_sum(fine.tau, self.parent.clone(), n)?;
                let log_t = g.log(t);
                let coef = |g: &mut Graph, k: usize| -> Result<Var> {
                    let c = g.gather(p("witness.map"), vec![k; batch * n].into())?;
                    g.reshape(c, &shape)
                };
                let (w1, w2, b) = (coef(g, 0)?, coef(g, 1)?, coef(g, 2)?);
                let a = g.mul(w1, coarse.log_tau)?;
                let c = g.mul(w2, log_t)?;
                let s = g.add(a, c)?;
                g.add(s, b)
            }
            WitnessMode::ClosedForm => {
                let tf = g.value(fine.tau).data().to_vec();
                let lc = g.value(coarse.log_tau).data().to_vec();
                let mut data = vec![0.0; batch * n];
                for (row, (fine_row, lc_row)) in data.chunks_mut(n).zip(tf.chunks(4 * n).zip(lc.chunks(n))) {
                    let mut t = vec![0.0; n];
                    for (v, &par) in fine_row.iter().zip(self.parent.iter()) {
                        t[par] += v;
                    }
                    for ((out, t), l) in row.iter_mut().zip(&t).zip(lc_row) {
                        *out = 0.5 * (t.ln() - l);
                    }
                }
                Ok(g.constant(Tensor::new(shape.to_vec(), data)?))
            }
        }
    }

    /// Cross-entropy plus the variant's penalty.
    pub fn loss(&self, g: &mut Graph, rec: &Recorded, labels: &[usize]) -> Result<LossVars> {
        if labels.len() != rec.batch {
            return Err(shape_err!("{} labels for a batch of {}", labels.len(), rec.batch));
        }
        let ce = g.cross_entropy_with_logits(rec.logits, labels)?;
        let penalty = self.penalty(g, rec)?;
        let total = match penalty {
            Some(pen) => {
                let weighted = g.scale(pen, self.config.alpha);
                g.add(ce, weighted)?
            }
            None => ce,
        };
        Ok(LossVars { total, ce, penalty })
    }

    fn penalty(&self, g: &mut Graph, rec: &Recorded) -> Result<Option<Var>> {
        let n = COARSE_SIDE * COARSE_SIDE;
        let variant = self.config.variant;
        if !variant.has_penalty() {
            return Ok(None);
        }
        let (fine, coarse) = match (rec.fine, rec.coarse) {
            (Some(f), Some(c)) => (f, c),
            _ => return Err(invalid!("variant {variant} needs both gate sites")),
        };
        let pen = match variant {
            Variant::Dual => {
                let lambda = rec.lambda.ok_or_else(|| invalid!("dual variant without multipliers"))?;
                let lc = g.add(coarse.log_tau, lambda)?;
                let mu_coarse = g.softmax(lc);
                let lp = g.gather(lambda, self.parent.clone())?;
                let lf = g.sub(fine.log_tau, lp)?;
                let mu_fine = g.softmax(lf);
                let marginal = g.group_sum(mu_fine, self.parent.clone(), n)?;
                g.kl_of_distributions(mu_coarse, marginal)?
            }
            Variant::KlZeroLf => {
                let marginal = g.group_sum(fine.tau, self.parent.clone(), n)?;
                g.kl_of_distributions(coarse.tau, marginal)?
            }
            Variant::KlZeroFl => {
                let marginal = g.group_sum(fine.tau, self.parent.clone(), n)?;
                g.kl_of_distributions(marginal, coarse.tau)?
            }
            _ => unreachable!("penalty-free variants returned above"),
        };
        Ok(Some(pen))
    }

    /// Forward pass without gradients.
    pub fn forward(&self, images: &[&[f32]]) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let rec = self.record(&mut g, images_tensor(images)?)?;
        let rows = |v: Option<Var>| -> Option<Vec<Vec<f64>>> {
            v.map(|v| {
                let t = g.value(v);
                let d = t.numel() / rec.batch;
                t.data().chunks(d).map(<[f64]>::to_vec).collect()
            })
        };
        Ok(ForwardOutput {
            logits: g.value(rec.logits).data().chunks(CLASSES).map(|c| [c[0], c[1]]).collect(),
            tau_fine: rows(rec.fine.map(|s| s.tau)),
            tau_coarse: rows(rec.coarse.map(|s| s.tau)),
            lambda: rows(rec.lambda),
        })
    }

    pub fn predict(&self, images: &[&[f32]]) -> Result<Vec<usize>> {
        Ok(self.forward(images)?.predictions())
    }

    /// Loss and gradients (aligned with [`ToyNet::params`]) on one batch.
    pub fn loss_and_grads(&self, images: &[&[f32]], labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let rec = self.record(&mut g, images_tensor(images)?)?;
        let loss = self.loss(&mut g, &rec, labels)?;
        let grads = g.backward(loss.total)?;
        let value = g.value(loss.total).item().expect("scalar loss");
        Ok((value, rec.params.iter().map(|&v| grads.wrt(v)).collect()))
    }
}

/// `φ_i = ⟨u_i, relu(U v_i / max(‖U v_i‖, ε))⟩` for every cell of `fm: [B,C,H,W]`.
fn gate_potential(g: &mut Graph, fm: Var, transform: Var, keys: Var) -> Result<Var> {
    let rows = g.cells_to_rows(fm)?;
    let s = g.value(rows).shape().to_vec();
    let flat = g.reshape(rows, &[s[0] * s[1], s[2]])?;
    let projected = g.matmul_nt(flat, transform)?;
    let unit = g.l2_normalize(projected, NORM_EPSILON);
    let active = g.relu(unit);
    let active = g.reshape(active, &s)?;
    g.row_dot(active, keys)
}

/// Stacks `64×64` images into a `[B, 1, 64, 64]` tensor.
pub fn images_tensor(images: &[&[f32]]) -> Result<Tensor> {
    let px = INPUT_SIDE * INPUT_SIDE;
    if images.is_empty() {
        return Err(invalid!("empty batch"));
    }
    if let Some(bad) = images.iter().find(|im| im.len() != px) {
        return Err(shape_err!("image has {} pixels, expected {px}", bad.len()));
    }
    let data = images.iter().flat_map(|im| im.iter().map(|&v| f64::from(v))).collect();
    Tensor::new(vec![images.len(), 1, INPUT_SIDE, INPUT_SIDE], data)
}
