use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Magnitudes of the optional training terms. A scheme decides which of
/// them are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeWeights {
    pub ld: f64,
    pub kd: f64,
    pub tbr: f64,
    pub feature_imitation: f64,
}

impl Default for SchemeWeights {
    fn default() -> Self {
        Self {
            ld: 200.0,
            kd: 200.0,
            tbr: 1.0,
            feature_imitation: 2.0,
        }
    }
}

impl SchemeWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("scheme_weights.ld", self.ld),
            ("scheme_weights.kd", self.kd),
            ("scheme_weights.tbr", self.tbr),
            ("scheme_weights.feature_imitation", self.feature_imitation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Weights of every term the training loop can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub weights: LossWeights,
    /// Teacher-bounded GIoU regression on main positives.
    pub tbr: f64,
    /// Feature imitation over every training sample.
    pub feature_imitation: f64,
    /// Cross-entropy of box logits against exact soft targets; teacher only.
    pub soft_dfl: f64,
}

impl Objective {
    pub fn needs_teacher(&self) -> bool {
        self.weights.has_distillation() || self.tbr > 0.0 || self.feature_imitation > 0.0
    }

    /// Class CE plus soft-target CE on every box edge.
    pub fn teacher() -> Self {
        Self {
            weights: LossWeights {
                cls: 1.0,
                reg: 0.0,
                dfl: 0.0,
                ld_main: 0.0,
                ld_vlr: 0.0,
                kd_main: 0.0,
                kd_vlr: 0.0,
            },
            tbr: 0.0,
            feature_imitation: 0.0,
            soft_dfl: 1.0,
        }
    }
}

/// A student training recipe.
pub trait Scheme: Send + Sync {
    fn name(&self) -> &str;
    fn description(&self) -> &str;
    /// `supervised` carries the class, GIoU and DFL weights.
    fn objective(&self, supervised: &LossWeights, magnitudes: &SchemeWeights) -> Objective;

    fn needs_teacher(&self) -> bool {
        self.objective(&LossWeights::default(), &SchemeWeights::default())
            .needs_teacher()
    }
}

/// Which optional terms a [`PresetScheme`] enables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Terms {
    pub ld_main: bool,
    pub ld_vlr: bool,
    pub kd_main: bool,
    pub kd_vlr: bool,
    pub tbr: bool,
    pub feature_imitation: bool,
}

/// Supervised terms plus a fixed selection of optional terms.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetScheme {
    pub name: String,
    pub description: String,
    pub terms: Terms,
}

impl PresetScheme {
    pub fn new(name: &str, description: &str, terms: Terms) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            terms,
        }
    }
}

impl Scheme for PresetScheme {
    fn name(&self) -> &str {
        &self.name
    }

    fn description(&self) -> &str {
        &self.description
    }

    fn objective(&self, supervised: &LossWeights, m: &SchemeWeights) -> Objective {
        let on = |b: bool, w: f64| if b { w } else { 0.0 };
        let t = &self.terms;
        Objective {
            weights: LossWeights {
                ld_main: on(t.ld_main, m.ld),
                ld_vlr: on(t.ld_vlr, m.ld),
                kd_main: on(t.kd_main, m.kd),
                kd_vlr: on(t.kd_vlr, m.kd),
                ..supervised.supervised()
            },
            tbr: on(t.tbr, m.tbr),
            feature_imitation: on(t.feature_imitation, m.feature_imitation),
            soft_dfl: 0.0,
        }
    }
}

/// Schemes by name, in registration order.
#[derive(Clone)]
pub struct SchemeRegistry {
    schemes: Vec<Arc<dyn Scheme>>,
}

impl SchemeRegistry {
    pub fn empty() -> Self {
        Self { schemes: Vec::new() }
    }

    pub fn register(&mut self, scheme: Arc<dyn Scheme>) -> Result<()> {
        if self.schemes.iter().any(|s| s.name() == scheme.name()) {
            return Err(Error::param("scheme", format!("`{}` is already registered", scheme.name())));
        }
        self.schemes.push(scheme);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Scheme>> {
        self.schemes
            .iter()
            .find(|s| s.name() == name)
            .cloned()
            .ok_or_else(|| Error::UnknownScheme {
                name: name.into(),
                valid: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.schemes.iter().map(|s| s.name()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<dyn Scheme>> {
        self.schemes.iter()
    }
}

impl Default for SchemeRegistry {
    fn default() -> Self {
        let presets = [
            ("baseline", "class CE, GIoU and DFL only", Terms::default()),
            (
                "tbr",
                "baseline plus teacher-bounded regression",
                Terms { tbr: true, ..Terms::default() },
            ),
            (
                "kd_main",
                "baseline plus class KD on the main region",
                Terms { kd_main: true, ..Terms::default() },
            ),
            (
                "ld_main",
                "baseline plus LD on the main region",
                Terms { ld_main: true, ..Terms::default() },
            ),
            (
                "ld_main_vlr",
                "baseline plus LD on the main region and the VLR",
                Terms {
                    ld_main: true,
                    ld_vlr: true,
                    ..Terms::default()
                },
            ),
            (
                "selective",
                "baseline plus LD and KD on both regions",
                Terms {
                    ld_main: true,
                    ld_vlr: true,
                    kd_main: true,
                    kd_vlr: true,
                    ..Terms::default()
                },
            ),
            (
                "feature_imitation",
                "baseline plus feature imitation on every sample",
                Terms {
                    feature_imitation: true,
                    ..Terms::default()
                },
            ),
        ];
        let mut reg = Self::empty();
        for (name, desc, terms) in presets {
            reg.register(Arc::new(PresetScheme::new(name, desc, terms)))
                .expect("preset names are unique");
        }
        reg
    }
}
