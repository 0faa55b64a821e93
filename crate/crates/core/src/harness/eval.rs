use serde::{Deserialize, Serialize};

use crate::boxdist::{decode_expectation, flatness};
use crate::error::{Error, Result};
use crate::losses::{kd_loss, DistillConfig, HeadOutput};

use super::data::SyntheticSample;
use super::model::{LinearLocalizer, RandomFeatures};
use super::train::TeacherView;

pub const METRIC_NAMES: [&str; 6] = [
    "edge_mae",
    "box_kl",
    "cls_kl",
    "box_logit_pearson",
    "feature_pearson",
    "flatness",
];

/// Held-out diagnostics of one student against its teacher.
///
/// Box metrics use the held-out samples whose observed box is a main
/// positive; class and feature metrics use every held-out sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean `|decoded edge - true edge|`.
    pub edge_mae: f64,
    /// Mean over samples of the summed per-edge `KL(teacher ‖ student)` at
    /// the distillation temperature.
    pub box_kl: f64,
    pub cls_kl: f64,
    /// Per-coordinate Pearson correlation of box logits, averaged. Logits are
    /// centered within each edge first, since SoftMax ignores a shift.
    pub box_logit_pearson: f64,
    /// Per-coordinate Pearson correlation of the projected features, averaged.
    pub feature_pearson: f64,
    /// Mean entropy of the student's edge distributions.
    pub flatness: f64,
}

impl Metrics {
    pub fn values(&self) -> [f64; 6] {
        [
            self.edge_mae,
            self.box_kl,
            self.cls_kl,
            self.box_logit_pearson,
            self.feature_pearson,
            self.flatness,
        ]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, f64)> {
        METRIC_NAMES.into_iter().zip(self.values())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.named().find(|(n, _)| *n == name).map(|(_, v)| v)
    }
}

/// Sample Pearson correlation; `None` when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Average over coordinates of the Pearson correlation across rows.
/// Coordinates without variance are skipped; zero if none remain.
fn mean_coordinate_pearson(s: &[Vec<f64>], t: &[Vec<f64>]) -> f64 {
    let dim = s.first().map_or(0, Vec::len);
    let mut total = 0.0;
    let mut count = 0;
    for j in 0..dim {
        let a: Vec<f64> = s.iter().map(|r| r[j]).collect();
        let b: Vec<f64> = t.iter().map(|r| r[j]).collect();
        if let Some(r) = pearson(&a, &b) {
            total += r;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn centered_box_logits(out: &HeadOutput, bins: usize) -> Vec<f64> {
    out.box_logits
        .chunks(bins)
        .flat_map(|z| {
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            z.iter().map(move |v| v - mean)
        })
        .collect()
}

pub fn evaluate(
    model: &LinearLocalizer,
    features: &RandomFeatures,
    teacher: &TeacherView,
    samples: &[SyntheticSample],
    cfg: &DistillConfig,
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    if teacher.outputs.len() != samples.len() {
        return Err(Error::LengthMismatch {
            expected: samples.len(),
            got: teacher.outputs.len(),
        });
    }
    let grid = cfg.bin_grid()?;
    let bins = grid.len();

    let mut hidden = Vec::with_capacity(samples.len());
    let mut cls_kl = 0.0;
    let (mut mae, mut box_kl, mut flat) = (0.0, 0.0, 0.0);
    let (mut s_logits, mut t_logits) = (Vec::new(), Vec::new());
    let mut n_main = 0;
    for (s, t_out) in samples.iter().zip(&teacher.outputs) {
        let (h, out) = model.forward(&features.apply(&s.features)?)?;
        hidden.push(h);
        cls_kl += kd_loss(&out.cls_logits, &t_out.cls_logits, cfg.tau)?.kl;
        if s.class_label != 1 {
            continue;
        }
        n_main += 1;
        let probs = out.edge_probs(&grid, 1.0)?;
        for k in 0..4 {
            mae += (decode_expectation(&probs[k], &grid)? - s.true_edge_values[k]).abs();
            flat += flatness(&probs[k])?;
            let r = kd_loss(
                &out.box_logits[k * bins..(k + 1) * bins],
                &t_out.box_logits[k * bins..(k + 1) * bins],
                cfg.tau,
            )?;
            box_kl += r.kl;
        }
        s_logits.push(centered_box_logits(&out, bins));
        t_logits.push(centered_box_logits(t_out, bins));
    }
    if n_main == 0 {
        return Err(Error::Empty("held-out main positives"));
    }
    let n = samples.len() as f64;
    let nm = n_main as f64;
    let metrics = Metrics {
        edge_mae: mae / (4.0 * nm),
        box_kl: box_kl / nm,
        cls_kl: cls_kl / n,
        box_logit_pearson: mean_coordinate_pearson(&s_logits, &t_logits),
        feature_pearson: mean_coordinate_pearson(&hidden, &teacher.hidden),
        flatness: flat / (4.0 * nm),
    };
    if metrics.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("evaluation metrics"));
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_basics() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&a, &[-1.0, -2.0, -3.0, -4.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&a, &[1.0, 1.0, 1.0, 1.0]), None);
        assert_eq!(pearson(&a, &[1.0]), None);
        assert_eq!(pearson(&[1.0, -1.0, 1.0, -1.0], &[1.0, 1.0, -1.0, -1.0]), Some(0.0));
    }

    #[test]
    fn centering_removes_edge_shift() {
        let out = HeadOutput {
            cls_logits: vec![],
            box_logits: vec![1.0, 2.0, 3.0, 10.0, 10.0, 13.0],
        };
        assert_eq!(centered_box_logits(&out, 3), vec![-1.0, 0.0, 1.0, -1.0, -1.0, 2.0]);
    }
}
