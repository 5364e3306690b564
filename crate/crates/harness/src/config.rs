//! Experiment configuration: a flat JSON document layered over a preset.
//!
//! Resolution order is preset defaults, then the keys present in the config
//! file, then command-line overrides. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use eeml_core::cluster::EmbeddingSource;
use eeml_core::diffnet::{Activation, NetSpec, Order};
use eeml_core::ensemble::{ErrorBasis, EvalOptions};
use eeml_core::maml::{InnerCfg, OuterCfg};
use eeml_core::tasks::TaskConfig;

use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Published hyperparameters; hours of CPU.
    Paper,
    /// Reduced budgets that finish in minutes.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds initialization, pretraining, clustering and ensemble training.
    pub seed: u64,
    /// Seeds the held-out evaluation task stream.
    pub eval_seed: u64,

    pub layer_sizes: Vec<usize>,
    pub activation: Activation,

    /// Family weights: sinusoids, line, quadratic, cubic.
    pub mix: [f64; 4],
    pub k_shot: usize,
    pub q_query: usize,
    pub noise_sd: f64,
    pub x_min: f64,
    pub x_max: f64,

    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub order: Order,
    pub average_outer: bool,
    pub momentum: f64,

    pub k: usize,
    pub cluster_tasks: usize,
    pub kmeans_max_iter: usize,

    pub eval_tasks: usize,
    pub test_embedding: EmbeddingSource,
    pub error_basis: ErrorBasis,

    /// Artifact directory. Not part of the config hash.
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let paper = ExperimentConfig {
            seed: 1,
            eval_seed: 1_000_003,
            layer_sizes: vec![1, 40, 40, 1],
            activation: Activation::Relu,
            mix: [1.0; 4],
            k_shot: 10,
            q_query: 100,
            noise_sd: 0.0,
            x_min: -5.0,
            x_max: 5.0,
            inner_steps: 5,
            inner_lr: 0.001,
            outer_lr: 0.001,
            batch_size: 32,
            pretrain_epochs: 15_000,
            train_epochs: 5_000,
            order: Order::Second,
            average_outer: false,
            momentum: 0.0,
            k: 4,
            cluster_tasks: 2_000,
            kmeans_max_iter: 100,
            eval_tasks: 4_000,
            test_embedding: EmbeddingSource::SupportMetaGrad,
            error_basis: ErrorBasis::Adapted,
            out_dir: PathBuf::from("runs/paper"),
        };
        match preset {
            Preset::Paper => paper,
            Preset::Desk => ExperimentConfig {
                pretrain_epochs: 2_000,
                train_epochs: 1_000,
                eval_tasks: 500,
                out_dir: PathBuf::from("runs/desk"),
                ..paper
            },
        }
    }

    /// Overlay the keys of a JSON object onto this config.
    pub fn overlay_json(&self, text: &str) -> Result<Self, HarnessError> {
        let patch: Value =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(patch) = patch else {
            return Err(HarnessError::Config("config must be a JSON object".into()));
        };
        let mut base = serde_json::to_value(self).expect("config serializes");
        let obj = base.as_object_mut().expect("config is an object");
        for (key, value) in patch {
            if !obj.contains_key(&key) {
                return Err(HarnessError::Config(format!("unknown config key `{key}`")));
            }
            obj.insert(key, value);
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(base).map_err(|e| HarnessError::Config(format!("bad config value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: &ExperimentConfig) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        base.overlay_json(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |key: &str, why: &str| Err(HarnessError::Config(format!("`{key}`: {why}")));
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return bad("layer_sizes", "needs at least two positive widths");
        }
        if self.layer_sizes[0] != 1 || *self.layer_sizes.last().unwrap() != 1 {
            return bad("layer_sizes", "toy regression needs scalar input and output");
        }
        if self.cluster_tasks < self.k {
            return bad("cluster_tasks", "must be at least k");
        }
        if self.k == 0 {
            return bad("k", "must be positive");
        }
        if self.kmeans_max_iter == 0 {
            return bad("kmeans_max_iter", "must be positive");
        }
        if self.eval_tasks == 0 {
            return bad("eval_tasks", "must be positive");
        }
        if self.test_embedding == EmbeddingSource::QueryGrad {
            return bad("test_embedding", "query labels are not available at test time");
        }
        self.task_config()
            .validate()
            .map_err(|e| HarnessError::Config(format!("task settings: {e}")))?;
        self.inner()
            .validate()
            .map_err(|e| HarnessError::Config(format!("inner loop: {e}")))?;
        self.outer(0)
            .validate()
            .map_err(|e| HarnessError::Config(format!("outer loop: {e}")))?;
        Ok(())
    }

    pub fn net_spec(&self) -> NetSpec {
        NetSpec::new(self.layer_sizes.clone(), self.activation).expect("validated")
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            mix: self.mix,
            k_shot: self.k_shot,
            q_query: self.q_query,
            noise_sd: self.noise_sd,
            x_range: (self.x_min, self.x_max),
        }
    }

    pub fn inner(&self) -> InnerCfg {
        InnerCfg {
            steps: self.inner_steps,
            lr: self.inner_lr,
        }
    }

    pub fn outer(&self, epochs: usize) -> OuterCfg {
        OuterCfg {
            lr: self.outer_lr,
            batch_size: self.batch_size,
            epochs,
            order: self.order,
            average: self.average_outer,
            momentum: self.momentum,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            embedding: self.test_embedding,
            order: self.order,
            error_basis: self.error_basis,
        }
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, excluding `out_dir`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().unwrap().remove("out_dir");
        let bytes = serde_json::to_vec(&value).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
