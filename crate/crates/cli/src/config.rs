use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ldistill::geometry::BoundingBox;
use ldistill::harness::{HarnessConfig, SweepParam};
use ldistill::regions::Anchor;
use ldistill::theory::CertifyConfig;
use serde::{Deserialize, Serialize};

/// Overrides `output_dir` from the config file; a `--output-dir` flag still wins.
pub const OUTPUT_DIR_ENV: &str = "LDISTILL_OUTPUT_DIR";

/// Whole-run configuration, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed for certificates and generated scenes.
    pub seed: u64,
    /// Not serialized, so resolved configs do not depend on where they are written.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    pub verify: VerifyConfig,
    pub experiment: HarnessConfig,
    pub assignment: AssignmentConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("ldistill-out"),
            verify: VerifyConfig::default(),
            experiment: HarnessConfig::default(),
            assignment: AssignmentConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub trials: usize,
    pub mc_trials: usize,
    pub eta_scale: f64,
    pub sizes: Vec<usize>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let c = CertifyConfig::default();
        Self {
            trials: c.trials,
            mc_trials: c.mc_trials,
            eta_scale: c.eta_scale,
            sizes: c.sizes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignmentConfig {
    pub alpha_pos: f64,
    pub gamma: f64,
    /// JSON scene file `{"anchors": [...], "gts": [...]}`. Takes precedence
    /// over inline anchors.
    pub scene: Option<PathBuf>,
    pub anchors: Vec<Anchor>,
    pub gts: Vec<BoundingBox>,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        Self {
            alpha_pos: 0.5,
            gamma: 0.25,
            scene: None,
            anchors: Vec::new(),
            gts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParam,
    /// Empty means the parameter's standard grid.
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            parameter: SweepParam::Ambiguity,
            values: Vec::new(),
        }
    }
}

impl SweepConfig {
    pub fn resolved_values(&self) -> Vec<f64> {
        if self.values.is_empty() {
            self.parameter.default_values()
        } else {
            self.values.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub anchors: Vec<Anchor>,
    #[serde(default)]
    pub gts: Vec<BoundingBox>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn certify_config(&self, perturb_gradient: f64) -> CertifyConfig {
        CertifyConfig {
            seed: self.seed,
            trials: self.verify.trials,
            mc_trials: self.verify.mc_trials,
            eta_scale: self.verify.eta_scale,
            sizes: self.verify.sizes.clone(),
            perturb_gradient,
        }
    }

    /// Field-level checks for every section, run before any computation.
    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            bail!("output_dir: must not be empty");
        }
        self.certify_config(0.0).validate().context("in [verify]")?;
        self.experiment.validate().context("in [experiment]")?;
        let a = &self.assignment;
        if !(a.alpha_pos > 0.0 && a.alpha_pos <= 1.0) {
            bail!("assignment.alpha_pos: must lie in (0, 1], got {}", a.alpha_pos);
        }
        if !(0.0..=1.0).contains(&a.gamma) {
            bail!("assignment.gamma: must lie in [0, 1], got {}", a.gamma);
        }
        for v in &self.sweep.values {
            let ok = match self.sweep.parameter {
                SweepParam::Ambiguity | SweepParam::Gamma => (0.0..=1.0).contains(v),
                SweepParam::Tau => *v > 0.0 && v.is_finite(),
            };
            if !ok {
                bail!("sweep.values: {v} is not a valid {}", self.sweep.parameter.name());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn nested_sections_parse() {
        let text = r#"
            seed = 7
            output_dir = "out"
            [verify]
            trials = 10
            [experiment]
            schemes = ["baseline", "ld_main"]
            seeds = [3]
            [experiment.distill]
            tau = 5.0
            [experiment.data]
            ambiguity = 0.5
            [assignment]
            gamma = 1.0
            gts = [[0.0, 0.0, 2.0, 2.0]]
            [[assignment.anchors]]
            box = [1.0, 0.0, 3.0, 2.0]
            level = 1
            [sweep]
            parameter = "tau"
            values = [1.0, 5.0]
        "#;
        let c: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.verify.trials, 10);
        assert_eq!(c.experiment.distill.tau, 5.0);
        assert_eq!(c.experiment.data.ambiguity, 0.5);
        assert_eq!(c.assignment.anchors[0].level, 1);
        assert_eq!(c.sweep.parameter, SweepParam::Tau);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[experiment.data]\nambiguty = 0.3").is_err());
    }

    #[test]
    fn validation_names_fields() {
        let mut c = RunConfig::default();
        c.experiment.distill.tau = -1.0;
        assert!(format!("{:#}", c.validate().unwrap_err()).contains("tau"));
        let mut c = RunConfig::default();
        c.assignment.gamma = 2.0;
        assert!(c.validate().unwrap_err().to_string().contains("assignment.gamma"));
        let mut c = RunConfig::default();
        c.sweep.values = vec![1.5];
        assert!(c.validate().unwrap_err().to_string().contains("sweep.values"));
        let mut c = RunConfig::default();
        c.verify.trials = 0;
        assert!(format!("{:#}", c.validate().unwrap_err()).contains("trials"));
    }
}
