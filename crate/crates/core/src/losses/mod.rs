//! Training and distillation losses. Every loss returns its value together
//! with the analytic gradient with respect to the student's logits (or the
//! student's box coordinates, for the box-space losses).
//!
//! Distillation terms follow the softened cross-entropy `H(q_τ, p_τ)` with the
//! plain `(1/τ)(p_τ - q_τ)` logit gradient; no `τ²` compensation is applied.

mod feature;
mod regression;
mod soft;
mod total;

use serde::{Deserialize, Serialize};

use crate::boxdist::{make_grid, BinGrid, GridSpec};
use crate::error::{Error, Result};

pub use feature::feature_imitation_loss;
pub use regression::{giou_regression_loss, tbr_gate, tbr_loss};
pub use soft::{ce_loss, dfl_loss, kd_loss, kd_loss_from_probs, ld_box_loss, ld_edge_loss};
pub use total::{total_loss, AnchorTarget, HeadOutput, LossBreakdown, TotalLoss};

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossResult {
    pub fn zero(len: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; len],
        }
    }
}

/// A soft-target distillation loss. `cross_entropy = H(q_τ, p_τ)`;
/// `kl = cross_entropy - H(q_τ)`. Both share `grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillResult {
    pub cross_entropy: f64,
    pub kl: f64,
    pub grad: Vec<f64>,
}

impl DistillResult {
    /// Cross-entropy view, the canonical loss value.
    pub fn as_loss(&self) -> LossResult {
        LossResult {
            value: self.cross_entropy,
            grad: self.grad.clone(),
        }
    }

    /// KL view; zero when teacher and student agree.
    pub fn as_kl_loss(&self) -> LossResult {
        LossResult {
            value: self.kl,
            grad: self.grad.clone(),
        }
    }
}

/// Weights `λ0..λ6` of the selective-region composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub dfl: f64,
    pub ld_main: f64,
    pub ld_vlr: f64,
    pub kd_main: f64,
    pub kd_vlr: f64,
}

impl LossWeights {
    /// LD terms follow the regression weight, KD terms the classification weight.
    pub fn tied(cls: f64, reg: f64, dfl: f64) -> Self {
        Self {
            cls,
            reg,
            dfl,
            ld_main: reg,
            ld_vlr: reg,
            kd_main: cls,
            kd_vlr: cls,
        }
    }

    /// Only the three supervised terms.
    pub fn supervised(&self) -> Self {
        Self {
            ld_main: 0.0,
            ld_vlr: 0.0,
            kd_main: 0.0,
            kd_vlr: 0.0,
            ..*self
        }
    }

    pub fn has_distillation(&self) -> bool {
        self.ld_main > 0.0 || self.ld_vlr > 0.0 || self.kd_main > 0.0 || self.kd_vlr > 0.0
    }

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.cls,
            self.reg,
            self.dfl,
            self.ld_main,
            self.ld_vlr,
            self.kd_main,
            self.kd_vlr,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param("weights", "loss weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::tied(1.0, 1.0, 1.0)
    }
}

/// Scalars governing distillation. Defaults: `τ = 10`, `γ = 0.25`,
/// `α_pos = 0.5`, `ε = 0.1`, grid `[0, 8]` with 8 bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub tau: f64,
    pub gamma_vlr: f64,
    pub alpha_pos: f64,
    pub weights: LossWeights,
    pub tbr_margin: f64,
    pub grid: GridSpec,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 10.0,
            gamma_vlr: 0.25,
            alpha_pos: 0.5,
            weights: LossWeights::default(),
            tbr_margin: 0.1,
            grid: GridSpec {
                e_min: 0.0,
                e_max: 8.0,
                n: 8,
            },
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::param("tau", format!("must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma_vlr) {
            return Err(Error::param(
                "gamma_vlr",
                format!("must lie in [0, 1], got {}", self.gamma_vlr),
            ));
        }
        if !(self.alpha_pos > 0.0 && self.alpha_pos <= 1.0) {
            return Err(Error::param(
                "alpha_pos",
                format!("must lie in (0, 1], got {}", self.alpha_pos),
            ));
        }
        if !(self.tbr_margin >= 0.0 && self.tbr_margin.is_finite()) {
            return Err(Error::param("tbr_margin", "must be finite and nonnegative"));
        }
        self.weights.validate()?;
        self.bin_grid().map(|_| ())
    }

    pub fn bin_grid(&self) -> Result<BinGrid> {
        make_grid(self.grid.e_min, self.grid.e_max, self.grid.n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_tied() {
        let cfg = DistillConfig::default();
        assert_eq!(cfg.tau, 10.0);
        assert_eq!(cfg.gamma_vlr, 0.25);
        assert_eq!(cfg.tbr_margin, 0.1);
        let w = cfg.weights;
        assert_eq!((w.ld_main, w.ld_vlr), (w.reg, w.reg));
        assert_eq!((w.kd_main, w.kd_vlr), (w.cls, w.cls));
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            DistillConfig { tau: 0.0, ..Default::default() },
            DistillConfig { gamma_vlr: 1.5, ..Default::default() },
            DistillConfig { alpha_pos: 0.0, ..Default::default() },
            DistillConfig { tbr_margin: -1.0, ..Default::default() },
            DistillConfig {
                weights: LossWeights { kd_vlr: -1.0, ..Default::default() },
                ..Default::default()
            },
            DistillConfig {
                grid: GridSpec { e_min: 1.0, e_max: 0.0, n: 4 },
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
