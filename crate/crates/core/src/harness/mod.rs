//! Synthetic teacher-student experiments.
//!
//! Every sample is a single anchor at the origin with one ground-truth box.
//! Each of its four edge distances is a smooth function of a raw input
//! vector; on half of the input space an edge is ambiguous, and the observed
//! edge is drawn from a three-component mixture around the true value. Models
//! are linear heads over fixed random `tanh` features, trained by plain
//! gradient descent through the analytic gradients of [`crate::losses`].
//!
//! The teacher sees more random features and a larger training set, and it is
//! fitted to the exact mixture distribution of every edge. Students are
//! trained by one of the [`Scheme`]s in a [`SchemeRegistry`].

mod data;
mod eval;
mod model;
mod report;
mod scheme;
mod sweep;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::DistillConfig;

pub use data::{gen_dataset, read_jsonl, write_jsonl, Dataset, EdgeMixture, Split, SyntheticSample};
pub use eval::{evaluate, pearson, Metrics, METRIC_NAMES};
pub use model::{LinearLocalizer, RandomFeatures};
pub use report::{metrics_csv, summary_json, sweep_csv, trace_csv, Stat, Summary, TRACE_HEADER};
pub use scheme::{Objective, PresetScheme, Scheme, SchemeRegistry, SchemeWeights, Terms};
pub use sweep::{ambiguity_sweep, run_experiment, sweep, ExperimentResult, RunReport, SweepParam, SweepRow};
pub use train::{prepare_teacher, train, train_teacher, Teacher, TeacherView, TraceRow, TrainingSet};

/// Data generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dimension of the raw input vector.
    pub input_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Size of the teacher's own training split.
    pub n_teacher: usize,
    /// Mass moved from the true edge to the two side components on an
    /// ambiguous edge. 0 makes every edge unambiguous.
    pub ambiguity: f64,
    /// Offset of the side components from the true edge.
    pub spread: f64,
    /// True edges lie in `[edge_min, edge_max]`.
    pub edge_min: f64,
    pub edge_max: f64,
    /// Slope of the sigmoid mapping inputs to edges.
    pub edge_gain: f64,
    /// The anchor box is `[-h, -h, h, h]`.
    pub anchor_half: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            n_train: 256,
            n_test: 512,
            n_teacher: 1024,
            ambiguity: 0.8,
            spread: 1.0,
            edge_min: 1.5,
            edge_max: 6.5,
            edge_gain: 1.5,
            anchor_half: 3.0,
        }
    }
}

/// Model sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub teacher_features: usize,
    /// Students see the first `student_features` teacher features.
    pub student_features: usize,
    /// Width of the projected representation compared by feature imitation.
    pub hidden: usize,
    /// Standard deviation of the initial head weights.
    pub head_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            teacher_features: 128,
            student_features: 64,
            hidden: 32,
            head_init: 0.01,
        }
    }
}

/// Gradient-descent schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            lr: 0.15,
            teacher_epochs: 600,
            teacher_lr: 0.2,
        }
    }
}

/// Everything one experiment needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub distill: DistillConfig,
    pub scheme_weights: SchemeWeights,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schemes: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            distill: DistillConfig::default(),
            scheme_weights: SchemeWeights::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            schemes: ["baseline", "tbr", "ld_main", "selective", "feature_imitation"]
                .map(String::from)
                .to_vec(),
            seeds: (0..5).collect(),
        }
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be positive and finite, got {v}")))
    }
}

fn nonzero(name: &'static str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::param(name, "must be at least 1"))
    } else {
        Ok(())
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        self.scheme_weights.validate()?;
        let d = &self.data;
        for (name, v) in [
            ("data.input_dim", d.input_dim),
            ("data.n_train", d.n_train),
            ("data.n_test", d.n_test),
            ("data.n_teacher", d.n_teacher),
        ] {
            nonzero(name, v)?;
        }
        if !(0.0..=1.0).contains(&d.ambiguity) {
            return Err(Error::param("data.ambiguity", format!("must lie in [0, 1], got {}", d.ambiguity)));
        }
        positive("data.spread", d.spread)?;
        positive("data.edge_gain", d.edge_gain)?;
        positive("data.anchor_half", d.anchor_half)?;
        if !(d.edge_min < d.edge_max) {
            return Err(Error::param("data.edge_min", "must be below data.edge_max"));
        }
        let g = &self.distill.grid;
        if d.edge_min - d.spread < g.e_min || d.edge_max + d.spread > g.e_max {
            return Err(Error::OutOfRange {
                value: if d.edge_min - d.spread < g.e_min {
                    d.edge_min - d.spread
                } else {
                    d.edge_max + d.spread
                },
                lo: g.e_min,
                hi: g.e_max,
            });
        }
        let m = &self.model;
        nonzero("model.student_features", m.student_features)?;
        nonzero("model.hidden", m.hidden)?;
        if m.student_features > m.teacher_features {
            return Err(Error::param(
                "model.student_features",
                "cannot exceed model.teacher_features",
            ));
        }
        if !(m.head_init >= 0.0 && m.head_init.is_finite()) {
            return Err(Error::param("model.head_init", "must be finite and nonnegative"));
        }
        let t = &self.train;
        positive("train.lr", t.lr)?;
        positive("train.teacher_lr", t.teacher_lr)?;
        if self.schemes.is_empty() {
            return Err(Error::Empty("schemes"));
        }
        if self.seeds.is_empty() {
            return Err(Error::Empty("seeds"));
        }
        Ok(())
    }
}
