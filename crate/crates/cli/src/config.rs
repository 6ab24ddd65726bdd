use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use consistent_attention::synth::DatasetSpec;
use consistent_attention::toynet::{Site, TrainConfig, Variant, WitnessMode};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Every setting of every command. Each key has exactly one flag with the
/// same name in kebab case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub count: usize,
    pub pos_frac: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    pub texture_amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,

    pub variant: Variant,
    pub alpha: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub witness: WitnessMode,
    pub key_init_scale: f64,

    /// Trailing samples of the dataset kept out of training and used for
    /// monitoring and evaluation.
    pub holdout: usize,
    pub site: Site,
    pub projected: bool,
    pub random_attribution: bool,
    pub oracle_tol: f64,
    pub fraction_step: f64,
    pub heatmaps: usize,
    pub fine: Option<usize>,
    pub coarse: Option<usize>,

    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub attributions: Option<PathBuf>,
    pub tau_fine: Option<PathBuf>,
    pub tau_coarse: Option<PathBuf>,
    pub runs: Vec<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DatasetSpec::default();
        let t = TrainConfig::default();
        Self {
            count: d.count,
            pos_frac: d.pos_frac,
            intensity_min: d.intensity_min,
            intensity_max: d.intensity_max,
            radius_min: d.radius_min,
            radius_max: d.radius_max,
            texture_amplitude: d.texture_amplitude,
            noise_std: d.noise_std,
            seed: d.seed,
            variant: t.variant,
            alpha: t.alpha,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_epsilon: t.adam_epsilon,
            epochs: t.epochs,
            batch_size: t.batch_size,
            witness: t.witness,
            key_init_scale: t.key_init_scale,
            holdout: 0,
            site: Site::Coarse,
            projected: false,
            random_attribution: false,
            oracle_tol: 1e-10,
            fraction_step: 0.05,
            heatmaps: 16,
            fine: None,
            coarse: None,
            data: None,
            out: None,
            checkpoint: None,
            attributions: None,
            tau_fine: None,
            tau_coarse: None,
            runs: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            count: self.count,
            pos_frac: self.pos_frac,
            intensity_min: self.intensity_min,
            intensity_max: self.intensity_max,
            radius_min: self.radius_min,
            radius_max: self.radius_max,
            texture_amplitude: self.texture_amplitude,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            variant: self.variant,
            alpha: self.alpha,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_epsilon: self.adam_epsilon,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            witness: self.witness,
            key_init_scale: self.key_init_scale,
        }
    }

    pub fn fractions(&self) -> Result<Vec<f64>, crate::Usage> {
        let steps = (1.0 / self.fraction_step).round();
        if !(self.fraction_step > 0.0 && steps >= 1.0 && (steps * self.fraction_step - 1.0).abs() < 1e-9) {
            return Err(crate::Usage(format!("fraction_step {} must divide 1", self.fraction_step)));
        }
        let n = steps as usize;
        Ok((0..=n).map(|k| k as f64 / n as f64).collect())
    }
}

/// Command-line overrides; unset flags leave the configuration untouched.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Overrides {
    /// Number of samples to synthesize
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Fraction of positive samples
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pos_frac: Option<f64>,
    /// Smallest blob peak intensity
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intensity_min: Option<f64>,
    /// Largest blob peak intensity
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intensity_max: Option<f64>,
    /// Smallest blob half-maximum radius in pixels
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius_min: Option<f64>,
    /// Largest blob half-maximum radius in pixels
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius_max: Option<f64>,
    /// Background texture amplitude
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub texture_amplitude: Option<f64>,
    /// Pixel noise standard deviation
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    /// Seed for synthesis, training and random attributions
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// baseline | tau_k | tau_l | unconstrained | dual | kl_zero_lf | kl_zero_fl
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    /// Penalty weight
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_epsilon: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// free | shallow | closed_form
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<WitnessMode>,
    /// Standard deviation of the initial gate keys
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_init_scale: Option<f64>,
    /// Trailing samples held out of training and used for evaluation
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout: Option<usize>,
    /// Gate site for attributions: fine | coarse
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub site: Option<Site>,
    /// Use the KL-projected attention pair instead of the raw maps
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projected: Option<bool>,
    /// Score random pixel rankings instead of stored attributions
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_attribution: Option<bool>,
    /// Optimality-gap tolerance of the projection oracle
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_tol: Option<f64>,
    /// Spacing of the perturbation fractions
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fraction_step: Option<f64>,
    /// Number of records exported as heatmaps
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmaps: Option<usize>,
    /// Fine grid side (or length of a single-row grid)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fine: Option<usize>,
    /// Coarse grid side (or length of a single-row grid)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarse: Option<usize>,
    /// Dataset file
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Output file (synth) or directory
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Model checkpoint (the scorer for perturb)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Directory written by attribute
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attributions: Option<PathBuf>,
    /// Fine attention map CSV
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_fine: Option<PathBuf>,
    /// Coarse attention map CSV
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_coarse: Option<PathBuf>,
    /// Run directories to aggregate
    #[arg(long, num_args = 1..)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<Vec<PathBuf>>,
}

/// Loads `path` (if any) and applies the flags on top.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str::<Value>(&text).map_err(|e| crate::Usage(format!("config {}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    let Value::Object(obj) = &mut base else {
        return Err(crate::Usage("config must be a JSON object".into()).into());
    };
    if let Value::Object(flags) = serde_json::to_value(overrides)? {
        obj.extend(flags);
    }
    Ok(serde_json::from_value(base).map_err(|e| crate::Usage(format!("config: {e}")))?)
}
