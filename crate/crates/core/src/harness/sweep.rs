use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

use super::data::{gen_dataset, Dataset};
use super::eval::{evaluate, Metrics};
use super::model::{LinearLocalizer, RandomFeatures};
use super::scheme::{Scheme, SchemeRegistry};
use super::train::{prepare_teacher, train, train_teacher, Teacher, TeacherView, TraceRow, TrainingSet, CLASSES};
use super::HarnessConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scheme: String,
    pub seed: u64,
    pub metrics: Metrics,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    /// Scheme-major, then seed, in config order.
    pub runs: Vec<RunReport>,
    /// The teacher evaluated against itself, one entry per seed.
    pub teachers: Vec<RunReport>,
}

impl ExperimentResult {
    pub fn runs_for<'a>(&'a self, scheme: &'a str) -> impl Iterator<Item = &'a RunReport> + 'a {
        self.runs.iter().filter(move |r| r.scheme == scheme)
    }

    pub fn run(&self, scheme: &str, seed: u64) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.scheme == scheme && r.seed == seed)
    }
}

/// Everything shared by the runs of one seed.
struct SeedContext {
    seed: u64,
    dataset: Dataset,
    teacher: Teacher,
    student_features: RandomFeatures,
    train_set: TrainingSet,
    train_view: TeacherView,
    test_view: TeacherView,
}

fn prepare_seed(cfg: &HarnessConfig, seed: u64) -> Result<SeedContext> {
    let grid = cfg.distill.bin_grid()?;
    let dataset = gen_dataset(cfg, seed)?;
    let teacher = train_teacher(cfg, &dataset, seed)?;
    let student_features = teacher.features.truncated(cfg.model.student_features);
    let train_set = TrainingSet::from_samples(&dataset.train, &student_features, &dataset.anchor, &cfg.distill)?;
    let train_view = prepare_teacher(&teacher, &dataset.train, &dataset.anchor, &grid)?;
    let test_view = prepare_teacher(&teacher, &dataset.test, &dataset.anchor, &grid)?;
    Ok(SeedContext {
        seed,
        dataset,
        teacher,
        student_features,
        train_set,
        train_view,
        test_view,
    })
}

fn teacher_report(cfg: &HarnessConfig, ctx: &SeedContext) -> Result<RunReport> {
    let metrics = evaluate(
        &ctx.teacher.model,
        &ctx.teacher.features,
        &ctx.test_view,
        &ctx.dataset.test,
        &cfg.distill,
    )?;
    Ok(RunReport {
        scheme: "teacher".into(),
        seed: ctx.seed,
        metrics,
        trace: ctx.teacher.trace.clone(),
    })
}

fn run_cell(cfg: &HarnessConfig, ctx: &SeedContext, scheme: &dyn Scheme) -> Result<RunReport> {
    let grid = cfg.distill.bin_grid()?;
    // every scheme starts from the same student for a given seed
    let mut model = LinearLocalizer::new(
        cfg.model.student_features,
        cfg.model.hidden,
        grid.len(),
        CLASSES,
        cfg.model.head_init,
        true,
        &mut rng::stream(ctx.seed, "student-init"),
    );
    let objective = scheme.objective(&cfg.distill.weights, &cfg.scheme_weights);
    let teacher = objective.needs_teacher().then_some(&ctx.train_view);
    let trace = train(
        &mut model,
        &ctx.train_set,
        teacher,
        &objective,
        &cfg.distill,
        cfg.train.epochs,
        cfg.train.lr,
    )?;
    let metrics = evaluate(&model, &ctx.student_features, &ctx.test_view, &ctx.dataset.test, &cfg.distill)?;
    Ok(RunReport {
        scheme: scheme.name().to_string(),
        seed: ctx.seed,
        metrics,
        trace,
    })
}

/// Trains one teacher per seed, then every configured scheme on every seed.
/// Runs in the ambient rayon pool; results do not depend on its size.
pub fn run_experiment(cfg: &HarnessConfig, registry: &SchemeRegistry) -> Result<ExperimentResult> {
    cfg.validate()?;
    let schemes: Vec<Arc<dyn Scheme>> = cfg
        .schemes
        .iter()
        .map(|name| registry.get(name))
        .collect::<Result<_>>()?;
    let contexts: Vec<SeedContext> = cfg
        .seeds
        .par_iter()
        .map(|&seed| prepare_seed(cfg, seed))
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..schemes.len())
        .flat_map(|s| (0..contexts.len()).map(move |c| (s, c)))
        .collect();
    let runs = cells
        .par_iter()
        .map(|&(s, c)| run_cell(cfg, &contexts[c], schemes[s].as_ref()))
        .collect::<Result<_>>()?;
    let teachers = contexts
        .iter()
        .map(|ctx| teacher_report(cfg, ctx))
        .collect::<Result<_>>()?;
    Ok(ExperimentResult { runs, teachers })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Ambiguity,
    Gamma,
    Tau,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Ambiguity => "ambiguity",
            Self::Gamma => "gamma",
            Self::Tau => "tau",
        }
    }

    /// The grids used when none is configured.
    pub fn default_values(&self) -> Vec<f64> {
        match self {
            Self::Ambiguity => vec![0.0, 0.25, 0.5, 0.75, 1.0],
            Self::Gamma => vec![0.0, 0.25, 0.5, 0.75, 1.0],
            Self::Tau => vec![1.0, 5.0, 10.0, 15.0, 20.0],
        }
    }

    fn apply(&self, cfg: &mut HarnessConfig, value: f64) {
        match self {
            Self::Ambiguity => cfg.data.ambiguity = value,
            Self::Gamma => cfg.distill.gamma_vlr = value,
            Self::Tau => cfg.distill.tau = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: SweepParam,
    pub value: f64,
    pub scheme: String,
    pub seed: u64,
    pub metrics: Metrics,
}

/// Reruns the experiment for each value of `param`, in the given order.
pub fn sweep(cfg: &HarnessConfig, param: SweepParam, values: &[f64], registry: &SchemeRegistry) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Empty("sweep values"));
    }
    let mut rows = Vec::new();
    for &value in values {
        let mut c = cfg.clone();
        param.apply(&mut c, value);
        let result = run_experiment(&c, registry)?;
        rows.extend(result.runs.into_iter().map(|r| SweepRow {
            parameter: param,
            value,
            scheme: r.scheme,
            seed: r.seed,
            metrics: r.metrics,
        }));
    }
    Ok(rows)
}

pub fn ambiguity_sweep(cfg: &HarnessConfig, levels: &[f64], registry: &SchemeRegistry) -> Result<Vec<SweepRow>> {
    sweep(cfg, SweepParam::Ambiguity, levels, registry)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> HarnessConfig {
        let mut cfg = HarnessConfig::default();
        cfg.data.n_train = 40;
        cfg.data.n_test = 60;
        cfg.data.n_teacher = 80;
        cfg.train.epochs = 10;
        cfg.train.teacher_epochs = 20;
        cfg.seeds = vec![0, 1];
        cfg.schemes = vec!["baseline".into(), "ld_main".into()];
        cfg
    }

    #[test]
    fn two_rows_per_metric_and_reproducible() {
        let reg = SchemeRegistry::default();
        let a = run_experiment(&tiny(), &reg).unwrap();
        assert_eq!(a.runs.len(), 4);
        assert_eq!(a.runs_for("ld_main").count(), 2);
        assert_eq!(a.runs[0].trace.len(), 10);
        let b = run_experiment(&tiny(), &reg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn teacher_against_itself() {
        let a = run_experiment(&tiny(), &SchemeRegistry::default()).unwrap();
        for t in &a.teachers {
            assert!(t.metrics.box_kl.abs() < 1e-12);
            assert!(t.metrics.cls_kl.abs() < 1e-12);
            assert!((t.metrics.box_logit_pearson - 1.0).abs() < 1e-12);
            assert!((t.metrics.feature_pearson - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_scheme_lists_valid_ones() {
        let mut cfg = tiny();
        cfg.schemes.push("magic".into());
        let err = run_experiment(&cfg, &SchemeRegistry::default()).unwrap_err();
        assert!(matches!(err, Error::UnknownScheme { .. }));
        assert!(err.to_string().contains("baseline"));
    }

    #[test]
    fn empty_sweep_is_an_error() {
        let err = ambiguity_sweep(&tiny(), &[], &SchemeRegistry::default()).unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
    }

    #[test]
    fn sweep_rows_in_order() {
        let mut cfg = tiny();
        cfg.seeds = vec![0];
        let rows = sweep(&cfg, SweepParam::Tau, &[1.0, 5.0], &SchemeRegistry::default()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[0].value, rows[2].value), (1.0, 5.0));
        assert_eq!(rows[1].scheme, "ld_main");
    }
}
