use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ldistill::geometry::BoundingBox;
use ldistill::harness::{
    gen_dataset, metrics_csv, run_experiment, summary_json, sweep, sweep_csv, trace_csv, write_jsonl, SchemeRegistry,
    Stat, Summary, SweepParam, SweepRow, METRIC_NAMES,
};
use ldistill::regions::{assignment_table, Anchor, AssignmentRow};
use ldistill::rng;
use ldistill::theory::certify;
use rand::Rng;
use serde::Serialize;

use crate::config::{RunConfig, Scene};

/// Returned when a certificate check exceeds its tolerance.
#[derive(Debug)]
pub struct CheckFailed(pub Vec<String>);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for CheckFailed {}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

#[derive(Serialize)]
struct CertificateFile<'a> {
    proposition1_max_err: f64,
    decomposition_max_residual: f64,
    rescaling_abs_err: f64,
    trials: usize,
    seed: u64,
    decomposition_rank_failures: usize,
    rescaling_mc_abs_err: f64,
    rescaling_mc_std_error: f64,
    incorrect_position_max_err: f64,
    checks: &'a [ldistill::theory::CheckOutcome],
    passed: bool,
}

pub fn verify(cfg: &RunConfig, perturb_gradient: f64) -> Result<()> {
    let cert = certify(&cfg.certify_config(perturb_gradient))?;
    let path = cfg.output_dir.join("certificate.json");
    write_file(
        &path,
        &to_json(&CertificateFile {
            proposition1_max_err: cert.proposition1_max_err,
            decomposition_max_residual: cert.decomposition_max_residual,
            rescaling_abs_err: cert.rescaling_abs_err,
            trials: cert.trials,
            seed: cert.seed,
            decomposition_rank_failures: cert.decomposition_rank_failures,
            rescaling_mc_abs_err: cert.rescaling_mc_abs_err,
            rescaling_mc_std_error: cert.rescaling_mc_std_error,
            incorrect_position_max_err: cert.incorrect_position_max_err,
            checks: &cert.checks,
            passed: cert.passed,
        })?,
    )?;
    for c in &cert.checks {
        println!(
            "{:<6} {:<28} {:.3e} (tol {:.3e})",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance
        );
    }
    println!("wrote {}", path.display());
    let failed: Vec<String> = cert.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CheckFailed(failed).into())
    }
}

/// Fails before any training if a scheme name is unknown.
fn check_schemes(names: &[String], registry: &SchemeRegistry) -> Result<()> {
    for name in names {
        registry.get(name)?;
    }
    Ok(())
}

pub fn experiment(cfg: &RunConfig, registry: &SchemeRegistry) -> Result<()> {
    let h = &cfg.experiment;
    check_schemes(&h.schemes, registry)?;
    let out = &cfg.output_dir;
    for &seed in &h.seeds {
        let dataset = gen_dataset(h, seed)?;
        let path = out.join("datasets").join(format!("seed{seed}.jsonl"));
        fs::create_dir_all(path.parent().unwrap())?;
        let file = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        write_jsonl(&dataset, BufWriter::new(file))?;
    }
    let result = run_experiment(h, registry)?;
    write_file(&out.join("metrics.csv"), &metrics_csv(&result.runs))?;
    let summary = summary_json(&result);
    write_file(&out.join("summary.json"), &to_json(&summary)?)?;
    for run in result.teachers.iter().chain(&result.runs) {
        let name = format!("{}_seed{}.csv", run.scheme, run.seed);
        write_file(&out.join("traces").join(name), &trace_csv(&run.trace))?;
    }
    write_file(&out.join("resolved_config.toml"), &toml::to_string(cfg)?)?;
    print!("{}", summary_table(&summary));
    println!("wrote {}", out.display());
    Ok(())
}

fn summary_table(summary: &Summary) -> String {
    let mut s = format!("{:<18}", "scheme");
    for m in METRIC_NAMES {
        write!(s, " {m:>17}").unwrap();
    }
    s.push('\n');
    for (scheme, stats) in &summary.schemes {
        write!(s, "{scheme:<18}").unwrap();
        for m in METRIC_NAMES {
            let st = &stats[m];
            write!(s, " {:>8.4}±{:<8.4}", st.mean, st.std).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Three pyramid levels over a 64×64 image and a few random ground truths.
fn random_scene(seed: u64) -> Result<Scene> {
    let mut r = rng::stream(seed, "scene");
    let size = 64.0;
    let mut anchors = Vec::new();
    for (level, stride) in [(0u32, 8.0), (1, 16.0), (2, 32.0)] {
        let cells = (size / stride) as usize;
        let half = stride;
        for gy in 0..cells {
            for gx in 0..cells {
                let cx = (gx as f64 + 0.5) * stride;
                let cy = (gy as f64 + 0.5) * stride;
                anchors.push(Anchor {
                    bbox: BoundingBox::new(cx - half, cy - half, cx + half, cy + half)?,
                    level,
                });
            }
        }
    }
    let count = r.random_range(1..=4);
    let mut gts = Vec::with_capacity(count);
    for _ in 0..count {
        let w = r.random_range(8.0..40.0);
        let h = r.random_range(8.0..40.0);
        let x1 = r.random_range(0.0..size - w);
        let y1 = r.random_range(0.0..size - h);
        gts.push(BoundingBox::new(x1, y1, x1 + w, y1 + h)?);
    }
    Ok(Scene { anchors, gts })
}

pub fn resolve_scene(cfg: &RunConfig) -> Result<Scene> {
    let a = &cfg.assignment;
    if let Some(path) = &a.scene {
        let text = fs::read_to_string(path).with_context(|| format!("reading scene {}", path.display()))?;
        return serde_json::from_str(&text).with_context(|| format!("parsing scene {}", path.display()));
    }
    if !a.anchors.is_empty() {
        return Ok(Scene {
            anchors: a.anchors.clone(),
            gts: a.gts.clone(),
        });
    }
    if !a.gts.is_empty() {
        bail!("assignment.gts: given without assignment.anchors");
    }
    random_scene(cfg.seed)
}

pub fn assignment_csv(rows: &[AssignmentRow]) -> String {
    let mut out = String::from("anchor_id,level,diou_to_nearest_gt,main,vlr\n");
    for r in rows {
        let d = r.max_diou.map_or(String::new(), |d| d.to_string());
        writeln!(out, "{},{},{d},{},{}", r.anchor_id, r.level, u8::from(r.main), u8::from(r.vlr)).unwrap();
    }
    out
}

pub fn dump_assignment(cfg: &RunConfig) -> Result<()> {
    let scene = resolve_scene(cfg)?;
    let a = &cfg.assignment;
    let rows = assignment_table(&scene.anchors, &scene.gts, a.alpha_pos, a.gamma)?;
    let out = &cfg.output_dir;
    write_file(&out.join("assignment.csv"), &assignment_csv(&rows))?;
    write_file(&out.join("scene.json"), &to_json(&scene)?)?;
    let main = rows.iter().filter(|r| r.main).count();
    let vlr = rows.iter().filter(|r| r.vlr).count();
    println!(
        "{} anchors, {} ground truths: {main} main, {vlr} vlr (alpha_pos {}, gamma {})",
        rows.len(),
        scene.gts.len(),
        a.alpha_pos,
        a.gamma
    );
    println!("wrote {}", out.join("assignment.csv").display());
    Ok(())
}

#[derive(Serialize)]
struct SweepSummaryRow<'a> {
    parameter: &'static str,
    value: f64,
    scheme: &'a str,
    metrics: BTreeMap<&'static str, Stat>,
}

fn sweep_summary(rows: &[SweepRow]) -> Vec<SweepSummaryRow<'_>> {
    let mut keys: Vec<(f64, &str)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(v, s)| v.to_bits() == r.value.to_bits() && s == r.scheme) {
            keys.push((r.value, &r.scheme));
        }
    }
    keys.into_iter()
        .map(|(value, scheme)| {
            let group: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.value.to_bits() == value.to_bits() && r.scheme == scheme)
                .collect();
            let metrics = METRIC_NAMES
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let v: Vec<f64> = group.iter().map(|r| r.metrics.values()[i]).collect();
                    (*m, Stat::of(&v))
                })
                .collect();
            SweepSummaryRow {
                parameter: group[0].parameter.name(),
                value,
                scheme,
                metrics,
            }
        })
        .collect()
}

pub fn run_sweep(cfg: &RunConfig, registry: &SchemeRegistry) -> Result<()> {
    check_schemes(&cfg.experiment.schemes, registry)?;
    let param: SweepParam = cfg.sweep.parameter;
    let values = cfg.sweep.resolved_values();
    let rows = sweep(&cfg.experiment, param, &values, registry)?;
    let out = &cfg.output_dir;
    let stem = format!("sweep_{}", param.name());
    write_file(&out.join(format!("{stem}.csv")), &sweep_csv(&rows))?;
    let summary = sweep_summary(&rows);
    write_file(&out.join(format!("{stem}_summary.json")), &to_json(&summary)?)?;
    for s in &summary {
        let mae = &s.metrics["edge_mae"];
        let kl = &s.metrics["box_kl"];
        println!(
            "{}={:<6} {:<18} edge_mae {:.4} box_kl {:.4} flatness {:.4}",
            s.parameter, s.value, s.scheme, mae.mean, kl.mean, s.metrics["flatness"].mean
        );
    }
    println!("wrote {}", out.join(format!("{stem}.csv")).display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_scene_is_seeded() {
        let a = random_scene(3).unwrap();
        assert_eq!(a, random_scene(3).unwrap());
        assert_ne!(a.gts, random_scene(4).unwrap().gts);
        assert_eq!(a.anchors.len(), 64 + 16 + 4);
        assert!(!a.gts.is_empty());
    }

    #[test]
    fn assignment_csv_layout() {
        let rows = vec![
            AssignmentRow {
                anchor_id: 0,
                level: 1,
                max_diou: Some(0.5),
                main: true,
                vlr: false,
            },
            AssignmentRow {
                anchor_id: 1,
                level: 0,
                max_diou: None,
                main: false,
                vlr: false,
            },
        ];
        assert_eq!(
            assignment_csv(&rows),
            "anchor_id,level,diou_to_nearest_gt,main,vlr\n0,1,0.5,1,0\n1,0,,0,0\n"
        );
    }
}
