use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::eval::METRIC_NAMES;
use super::sweep::{ExperimentResult, RunReport, SweepRow};
use super::train::TraceRow;

pub const TRACE_HEADER: &str = "step,L_cls,L_reg,L_DFL,LD_main,LD_vlr,KD_main,KD_vlr,L_TBR,L_FI,total";

/// Long format: one `scheme,seed,metric,value` row per metric and run.
pub fn metrics_csv(runs: &[RunReport]) -> String {
    let mut out = String::from("scheme,seed,metric,value\n");
    for r in runs {
        for (name, v) in r.metrics.named() {
            writeln!(out, "{},{},{name},{v}", r.scheme, r.seed).unwrap();
        }
    }
    out
}

/// Teacher training reports its soft-target CE in the `L_DFL` column.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for t in trace {
        let l = &t.losses;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            t.step,
            l.cls,
            l.reg,
            l.dfl + t.soft_dfl,
            l.ld_main,
            l.ld_vlr,
            l.kd_main,
            l.kd_vlr,
            t.tbr,
            t.feature_imitation,
            t.total
        )
        .unwrap();
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("parameter,parameter_value,scheme,seed,metric,value\n");
    for r in rows {
        for (name, v) in r.metrics.named() {
            writeln!(out, "{},{},{},{},{name},{v}", r.parameter.name(), r.value, r.scheme, r.seed).unwrap();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Seed statistics of every metric, per scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub schemes: BTreeMap<String, BTreeMap<String, Stat>>,
}

pub fn summary_json(result: &ExperimentResult) -> Summary {
    let mut seeds: Vec<u64> = result.runs.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut schemes = BTreeMap::new();
    for run in result.teachers.iter().chain(&result.runs) {
        schemes.entry(run.scheme.clone()).or_insert_with(|| {
            let runs: Vec<&RunReport> = result
                .teachers
                .iter()
                .chain(&result.runs)
                .filter(|r| r.scheme == run.scheme)
                .collect();
            METRIC_NAMES
                .iter()
                .enumerate()
                .map(|(i, name)| {
                    let v: Vec<f64> = runs.iter().map(|r| r.metrics.values()[i]).collect();
                    (name.to_string(), Stat::of(&v))
                })
                .collect()
        });
    }
    Summary { seeds, schemes }
}
