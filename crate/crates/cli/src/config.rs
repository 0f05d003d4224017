//! Run configuration: one JSON document, overridable from the command line.

use std::path::{Path, PathBuf};

use psilon::data::{
    load_csv, split_standardized, synth_task, Dataset, Schema, SplitSpec, SynthKind, Task,
};
use psilon::{LossKind, LrSchedule, NetSpec, Regularizer, TrainPlan};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        synth: SynthKind,
        n: usize,
        d: usize,
        #[serde(default)]
        noise: f64,
    },
    Csv {
        path: PathBuf,
        target: String,
        task: Task,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_n: usize,
    #[serde(default = "default_val_frac")]
    pub val_frac_of_rest: f64,
}

fn default_val_frac() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    #[serde(default = "default_batches")]
    pub batches_per_epoch: usize,
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default = "LrSchedule::warm_hold_decay_default")]
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_regularizer")]
    pub regularizer: Regularizer,
    /// Cross-entropy for classification and MSE for regression when unset.
    #[serde(default)]
    pub loss: Option<LossKind>,
    #[serde(default)]
    pub prune_window: Option<psilon::training::PruneWindow>,
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_batches() -> usize {
    10
}

fn default_regularizer() -> Regularizer {
    Regularizer::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives initialization, the data split, synthetic data and mini-batch order.
    #[serde(default)]
    pub seed: u64,
    pub network: NetSpec,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Train, validation and test splits, standardized on the training rows.
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn task(&self) -> Task {
        match &self.data {
            DataConfig::Synthetic { synth, .. } => match synth {
                SynthKind::SparseTeacher { .. } => Task::Regression,
                SynthKind::TwoGaussians | SynthKind::XorRings => Task::BinaryClass,
            },
            DataConfig::Csv { task, .. } => *task,
        }
    }

    pub fn loss(&self) -> LossKind {
        self.training.loss.unwrap_or(match self.task() {
            Task::Regression => LossKind::Mse,
            Task::BinaryClass | Task::MultiClass(_) => LossKind::CrossEntropy,
        })
    }

    pub fn plan(&self) -> TrainPlan {
        let t = &self.training;
        TrainPlan {
            steps: t.steps,
            batches_per_epoch: t.batches_per_epoch,
            batch_size: t.batch_size,
            lr_schedule: t.lr_schedule,
            regularizer: t.regularizer,
            loss: self.loss(),
            prune_window: t.prune_window,
            seed: self.seed,
            record_wall_time: t.record_wall_time,
        }
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> anyhow::Result<()> {
        let usage = |e: psilon::Error| UsageError(e.to_string());
        self.network.validate().map_err(usage)?;
        self.plan().validate().map_err(usage)?;
        if self.network.d_out != self.task().output_dim() {
            return Err(UsageError(format!(
                "network d_out {} does not match the task's output width {}",
                self.network.d_out,
                self.task().output_dim()
            ))
            .into());
        }
        if let DataConfig::Synthetic { n, d, .. } = &self.data {
            if self.network.d_in != *d {
                return Err(UsageError(format!(
                    "network d_in {} does not match data dimension {d}",
                    self.network.d_in
                ))
                .into());
            }
            if self.split.train_n > *n {
                return Err(
                    UsageError(format!("train_n {} exceeds n {n}", self.split.train_n)).into(),
                );
            }
        }
        if let Some(l) = &self.lambdas {
            if l.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(UsageError("lambdas must be non-negative numbers".into()).into());
            }
        }
        Ok(())
    }

    pub fn splits(&self) -> anyhow::Result<Splits> {
        let full = match &self.data {
            DataConfig::Synthetic { synth, n, d, noise } => {
                synth_task(*synth, *n, *d, *noise, self.seed)?
            }
            DataConfig::Csv { path, target, task } => load_csv(
                path,
                &Schema {
                    target: target.clone(),
                    task: *task,
                },
            )?,
        };
        if full.dim() != self.network.d_in {
            return Err(UsageError(format!(
                "network d_in {} does not match data dimension {}",
                self.network.d_in,
                full.dim()
            ))
            .into());
        }
        let spec = SplitSpec {
            train_n: self.split.train_n,
            val_frac_of_rest: self.split.val_frac_of_rest,
            seed: self.seed,
        };
        let (train, val, test) = split_standardized(&full, &spec)?;
        Ok(Splits { train, val, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "seed": 3,
        "network": {"kind": "mlp", "d_in": 4, "width": 8, "depth": 1, "d_out": 1, "mode": {"kind": "l1wn"}},
        "data": {"source": "synthetic", "synth": {"kind": "two_gaussians"}, "n": 60, "d": 4},
        "split": {"train_n": 30},
        "training": {"steps": 5}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.loss(), LossKind::CrossEntropy);
        assert_eq!(cfg.plan().seed, 3);
        let s = cfg.splits().unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (30, 15, 15));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replacen("\"seed\": 3,", "\"seed\": 3, \"sed\": 1,", 1);
        assert!(serde_json::from_str::<RunConfig>(&bad).is_err());
        let bad = MINIMAL.replacen("\"steps\": 5", "\"steps\": 5, \"epochs\": 2", 1);
        assert!(serde_json::from_str::<RunConfig>(&bad).is_err());
    }

    #[test]
    fn mismatched_dimensions_fail_validation() {
        let bad = MINIMAL.replacen("\"d_out\": 1", "\"d_out\": 2", 1);
        let cfg: RunConfig = serde_json::from_str(&bad).unwrap();
        assert!(cfg.validate().is_err());
    }
}
