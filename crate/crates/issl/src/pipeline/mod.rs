//! Orchestration: run configuration, optimizer, checkpoints, the pretraining
//! loop with pseudo-label refinement, and the full probing experiment.

pub mod checkpoint;
pub mod experiment;
pub mod optim;
pub mod train;

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use experiment::{
    compute_iter1_labels, parse_experiment_config, probe_model, run_experiment, ExperimentConfig,
    ExperimentOutcome,
};
pub use optim::{lr_at, AdamConfig, AdamState};
pub use train::{refine_labels, train_iteration, TrainOutcome};

/// Which candidate set the masked loss ranks against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Policy {
    /// Score the target against the whole label vocabulary.
    Predictive,
    /// Score the target against sampled same-utterance negatives.
    Contrastive,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Predictive => "predictive",
            Policy::Contrastive => "contrastive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "predictive" => Ok(Policy::Predictive),
            "contrastive" => Ok(Policy::Contrastive),
            other => Err(Error::Config(format!(
                "unknown policy {other:?} (expected predictive|contrastive)"
            ))),
        }
    }
}

/// Where prediction targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LabelSource {
    /// Offline pseudo-labels (k-means over features or a previous model's
    /// activations), provided per utterance at the model frame rate.
    Kmeans,
    /// Jointly trained Gumbel-softmax product quantizer over the local
    /// (convolutional) features; no offline labels.
    OnlineQuantizer,
}

/// Everything one training run depends on. Hashing the serialized form
/// content-addresses the run's artifacts.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub corpus_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub policy: Policy,
    pub label_source: LabelSource,
    /// Cluster count per refinement iteration (iteration 1 clusters acoustic
    /// features, later iterations cluster model activations).
    pub k_per_iteration: Vec<usize>,
    /// Which activation stack entry feeds re-clustering before iteration
    /// i + 2 (entry 0 is the pre-transformer embedding). Entries are
    /// validated lazily, when an iteration actually uses them, so the
    /// defaults can describe deeper models than the current encoder.
    pub cluster_layers: Vec<usize>,
    pub total_updates: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    /// Batch budget in model frames; utterances are packed greedily and a
    /// batch always holds at least one utterance.
    pub batch_frames: usize,
    /// Negatives per masked frame under the contrastive policy.
    pub negatives: usize,
    /// Softmax temperature of the masked loss.
    pub temperature: f64,
    /// Weight of the codebook-diversity penalty (quantizer runs only).
    pub alpha_diversity: f64,
    pub quantizer_groups: usize,
    pub quantizer_entries: usize,
    /// Gumbel temperature annealed linearly (start, end) over the run.
    pub quantizer_temp: (f64, f64),
    pub seed: u64,
}

impl RunConfig {
    pub fn new(corpus_dir: PathBuf, policy: Policy, total_updates: usize, seed: u64) -> Self {
        RunConfig {
            corpus_dir,
            encoder: EncoderConfig::default(),
            policy,
            label_source: LabelSource::Kmeans,
            k_per_iteration: vec![100, 500, 500],
            cluster_layers: vec![6, 9],
            total_updates,
            peak_lr: 5e-4,
            warmup_frac: 0.08,
            batch_frames: 256,
            negatives: 100,
            temperature: 0.1,
            alpha_diversity: 0.1,
            quantizer_groups: 2,
            quantizer_entries: 10,
            quantizer_temp: (2.0, 0.5),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config(format!(
                "warmup fraction must be in (0,1), got {}",
                self.warmup_frac
            )));
        }
        if self.total_updates == 0 {
            return Err(Error::Config("total_updates must be positive".into()));
        }
        if self.peak_lr <= 0.0 || self.temperature <= 0.0 {
            return Err(Error::Config("peak_lr and temperature must be positive".into()));
        }
        if self.batch_frames == 0 {
            return Err(Error::Config("batch_frames must be positive".into()));
        }
        if self.negatives == 0 {
            return Err(Error::Config("need at least one negative".into()));
        }
        if self.k_per_iteration.is_empty() || self.k_per_iteration.iter().any(|&k| k < 2) {
            return Err(Error::Config("each iteration needs k >= 2".into()));
        }
        if self.alpha_diversity < 0.0 {
            return Err(Error::Config("alpha_diversity must be non-negative".into()));
        }
        if self.label_source == LabelSource::OnlineQuantizer {
            if self.quantizer_groups == 0 || self.quantizer_entries < 2 {
                return Err(Error::Config("quantizer needs groups >= 1 and entries >= 2".into()));
            }
            let (start, end) = self.quantizer_temp;
            if start <= 0.0 || end <= 0.0 {
                return Err(Error::Config("quantizer temperatures must be positive".into()));
            }
        }
        Ok(())
    }

    /// Activation index feeding the re-clustering before `iteration`
    /// (2-based: iteration 2 reads `cluster_layers[0]`).
    pub fn cluster_layer_for(&self, iteration: usize) -> Result<usize> {
        if iteration < 2 {
            return Err(Error::Contract(format!(
                "iteration {iteration} has no re-clustering stage"
            )));
        }
        let layer = *self.cluster_layers.get(iteration - 2).ok_or_else(|| {
            Error::Config(format!("no cluster layer configured for iteration {iteration}"))
        })?;
        if layer > self.encoder.num_layers {
            return Err(Error::Config(format!(
                "cluster layer {layer} outside activation stack 0..={}",
                self.encoder.num_layers
            )));
        }
        Ok(layer)
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        optim::lr_at(step, self.total_updates, self.peak_lr, self.warmup_frac)
    }

    /// Hex SHA-256 of the serialized config.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("RunConfig serializes");
        hex_digest(json.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable per-stage seed derivation: hash of the base seed and a stage tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
