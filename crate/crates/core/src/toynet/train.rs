use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{images_tensor, Site, ToyNet, TrainConfig, COARSE_SIDE};
use crate::diff::{Graph, Tensor};
use crate::error::{invalid, Error, Result};
use crate::synth::Dataset;

const EVAL_CHUNK: usize = 50;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_epsilon,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut Tensor>, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, p) in params.enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((x, g), m), v) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Model quality on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub ce: f64,
    /// `None` for variants without a penalty term.
    pub penalty: Option<f64>,
    /// Mean L1 distance between the coarse attention and the block sums of
    /// the fine attention; `None` unless both sites are gated.
    pub residual: Option<f64>,
    pub accuracy: f64,
}

/// One row of the training log. Epoch 0 is the initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean minibatch objective; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub eval: EvalSummary,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<EpochMetrics>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| x.to_string())
}

impl MetricsLog {
    pub const HEADER: &'static str = "epoch,train_loss,ce,penalty,residual,accuracy";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                cell(r.train_loss),
                r.eval.ce,
                cell(r.eval.penalty),
                cell(r.eval.residual),
                r.eval.accuracy
            )
            .expect("writing to a string");
        }
        out
    }

    pub fn first(&self) -> Option<&EpochMetrics> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.rows.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyNet,
    pub log: MetricsLog,
}

fn image_refs<'a>(ds: &'a Dataset, idx: &[usize]) -> Vec<&'a [f32]> {
    idx.iter().map(|&i| ds.samples[i].image.as_slice()).collect()
}

/// Cross-entropy, penalty, residual and accuracy of `model` on `ds`.
pub fn evaluate(model: &ToyNet, ds: &Dataset) -> Result<EvalSummary> {
    if ds.is_empty() {
        return Err(invalid!("cannot evaluate on an empty dataset"));
    }
    let n = COARSE_SIDE * COARSE_SIDE;
    let (mut ce, mut pen, mut res, mut correct) = (0.0, 0.0, 0.0, 0usize);
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.samples[i].label as usize).collect();
        let mut g = Graph::new();
        let rec = model.record(&mut g, images_tensor(&image_refs(ds, chunk))?)?;
        let loss = model.loss(&mut g, &rec, &labels)?;
        let b = chunk.len() as f64;
        ce += b * g.value(loss.ce).item().expect("scalar");
        if let Some(p) = loss.penalty {
            pen += b * g.value(p).item().expect("scalar");
        }
        if let (Some(f), Some(c)) = (rec.fine, rec.coarse) {
            let (tf, tc) = (g.value(f.tau).data(), g.value(c.tau).data());
            for (fine, coarse) in tf.chunks(4 * n).zip(tc.chunks(n)) {
                let mut t = vec![0.0; n];
                for (j, v) in fine.iter().enumerate() {
                    t[super::coarse_parent_of(j)] += v;
                }
                res += coarse.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>();
            }
        }
        let logits = g.value(rec.logits).data();
        correct += logits.chunks(2).zip(&labels).filter(|(l, &y)| usize::from(l[1] > l[0]) == y).count();
    }
    let total = ds.len() as f64;
    let variant = model.variant();
    Ok(EvalSummary {
        ce: ce / total,
        penalty: variant.has_penalty().then_some(pen / total),
        residual: (variant.has_gate(Site::Fine) && variant.has_gate(Site::Coarse)).then_some(res / total),
        accuracy: correct as f64 / total,
    })
}

/// Trains a fresh model; see [`train_with`].
pub fn train(data: &Dataset, monitor: Option<&Dataset>, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, monitor, config, |_| {})
}

/// Trains a fresh model from `config.seed`, logging an evaluation on
/// `monitor` (or the training data) at initialization and after every epoch.
pub fn train_with(
    data: &Dataset,
    monitor: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(invalid!("cannot train on an empty dataset"));
    }
    let mut model = ToyNet::new(config.clone())?;
    let monitor = monitor.unwrap_or(data);
    let mut adam = Adam::new(config, model.params().iter().map(|(_, t)| t.numel()));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = MetricsLog::default();

    let first = EpochMetrics { epoch: 0, train_loss: None, eval: evaluate(&model, monitor)? };
    on_epoch(&first);
    log.rows.push(first);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let labels: Vec<usize> = batch.iter().map(|&i| data.samples[i].label as usize).collect();
            let (loss, grads) = model.loss_and_grads(&image_refs(data, batch), &labels)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "training diverged at epoch {epoch}, batch {bi} (loss {loss})"
                )));
            }
            sum += loss * batch.len() as f64;
            adam.step(model.params_mut().iter_mut().map(|(_, t)| t), &grads);
        }
        let row = EpochMetrics { epoch, train_loss: Some(sum / data.len() as f64), eval: evaluate(&model, monitor)? };
        on_epoch(&row);
        log.rows.push(row);
    }
    Ok(TrainOutcome { model, log })
}
