//! Run configuration, training loops, evaluation, and metric emission —
//! the operational surface of the crate.

pub mod evaluate;
pub mod experiments;
pub mod metrics;
pub mod optim;
pub mod plot;
pub mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{SamplingStrategy, Strategy, WeightSource};
use crate::model::ModelConfig;
use crate::numerics::Rng;

pub use evaluate::{evaluate, greedy_rollouts, EvalReport};
pub use optim::{Adam, OptimConfig, Schedule};
pub use train::{distill, train_teacher, DistillOutcome, RunMetrics};

/// Explicit seeds for every stochastic subsystem; a config fully
/// determines a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub train: u64,
    pub eval: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub bias_fraction: f64,
    /// Minimum response length for bias-evaluation records.
    pub bias_min_response_len: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.8,
            val_fraction: 0.1,
            bias_fraction: 0.1,
            bias_min_response_len: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub data_path: PathBuf,
    #[serde(default)]
    pub split: SplitConfig,
    pub strategy: Strategy,
    pub optimizer: OptimConfig,
    /// Candidate tokens per response step.
    pub d: usize,
    pub sampling: SamplingStrategy,
    pub nucleus_p: f64,
    pub iva_source: WeightSource,
    /// Alignment layer; `None` selects by instruction-relevance score.
    pub iva_layer: Option<usize>,
    #[serde(default)]
    pub iva_uniform: bool,
    /// Pairs for the relevance-score estimate.
    pub irs_pairs: usize,
    /// Records sampled for layer selection.
    pub irs_records: usize,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
    /// Evaluate on the validation split every this many steps (0 = never).
    #[serde(default)]
    pub eval_every: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.optimizer.validate()?;
        if self.teacher.vocab_size != self.student.vocab_size {
            return Err(crate::error::Error::Config(format!(
                "teacher vocab {} != student vocab {}",
                self.teacher.vocab_size, self.student.vocab_size
            )));
        }
        if self.d == 0 {
            return Err(crate::error::Error::Config("d must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.nucleus_p) || self.nucleus_p == 0.0 {
            return Err(crate::error::Error::Config(format!(
                "nucleus_p {} outside (0, 1]",
                self.nucleus_p
            )));
        }
        let f = self.split.train_fraction + self.split.val_fraction + self.split.bias_fraction;
        if (f - 1.0).abs() > 1e-9 {
            return Err(crate::error::Error::Config(format!("split fractions sum to {f}")));
        }
        Ok(())
    }

    /// Model seeds derive from the init seed so that one config line
    /// determines both initializations.
    pub fn teacher_seed(&self) -> u64 {
        Rng::new(self.seeds.init).stream("teacher-init").next_u64()
    }

    pub fn student_seed(&self) -> u64 {
        Rng::new(self.seeds.init).stream("student-init").next_u64()
    }

    /// Desk-scale defaults: a 4-layer/128-wide teacher distilled into a
    /// 2-layer/64-wide student on the 4x4 grid task.
    pub fn default_desk(vocab_size: usize) -> RunConfig {
        RunConfig {
            teacher: ModelConfig {
                vocab_size,
                n_layers: 4,
                n_heads: 4,
                hidden_dim: 128,
                max_seq_len: 320,
                seed: 0,
                head_agg: Default::default(),
            },
            student: ModelConfig {
                vocab_size,
                n_layers: 2,
                n_heads: 2,
                hidden_dim: 64,
                max_seq_len: 320,
                seed: 0,
                head_agg: Default::default(),
            },
            data_path: PathBuf::from("data.jsonl"),
            split: SplitConfig::default(),
            strategy: Strategy::AlignTi,
            optimizer: OptimConfig {
                learning_rate: 3e-3,
                steps: 600,
                batch_size: 8,
                warmup_fraction: 0.05,
                schedule: Schedule::Cosine,
            },
            d: 4,
            sampling: SamplingStrategy::Nucleus,
            nucleus_p: 0.9,
            iva_source: WeightSource::Teacher,
            iva_layer: None,
            iva_uniform: false,
            irs_pairs: 256,
            irs_records: 48,
            seeds: Seeds { data: 1, init: 2, train: 3, eval: 4 },
            output_dir: PathBuf::from("runs/default"),
            eval_every: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_roundtrips() {
        let cfg = RunConfig::default_desk(64);
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&cfg).unwrap());
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let mut cfg = RunConfig::default_desk(64);
        cfg.student.vocab_size = 65;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_seeds_derived_deterministically() {
        let cfg = RunConfig::default_desk(64);
        assert_eq!(cfg.teacher_seed(), cfg.teacher_seed());
        assert_ne!(cfg.teacher_seed(), cfg.student_seed());
    }
}
