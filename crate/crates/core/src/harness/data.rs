use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::boxdist::{encode_target, BinGrid};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::rng;

use super::HarnessConfig;

/// Finite mixture of point masses from which an observed edge is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeMixture {
    pub centers: Vec<f64>,
    pub weights: Vec<f64>,
}

impl EdgeMixture {
    pub fn new(centers: Vec<f64>, weights: Vec<f64>, grid: &BinGrid) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::Empty("mixture components"));
        }
        if centers.len() != weights.len() {
            return Err(Error::LengthMismatch {
                expected: centers.len(),
                got: weights.len(),
            });
        }
        if let Some(&c) = centers.iter().find(|c| !grid.contains(**c)) {
            return Err(Error::OutOfRange {
                value: c,
                lo: grid.e_min(),
                hi: grid.e_max(),
            });
        }
        crate::boxdist::check_simplex(&weights, "mixture weights")?;
        Ok(Self { centers, weights })
    }

    pub fn mean(&self) -> f64 {
        self.centers.iter().zip(&self.weights).map(|(c, w)| c * w).sum()
    }

    pub fn is_ambiguous(&self) -> bool {
        self.centers.len() > 1
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (c, w) in self.centers.iter().zip(&self.weights) {
            acc += w;
            if u < acc {
                return *c;
            }
        }
        *self.centers.last().unwrap()
    }

    /// Bayes-optimal bin distribution: the weighted sum of each center's
    /// two-hot encoding.
    pub fn bin_distribution(&self, grid: &BinGrid) -> Result<Vec<f64>> {
        let mut out = vec![0.0; grid.len()];
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let t = encode_target(*c, grid)?;
            for (o, v) in out.iter_mut().zip(t.weights(grid.len())?) {
                *o += w * v;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub split: Split,
    /// Raw input vector.
    pub features: Vec<f64>,
    /// Mixture means, as `l, t, r, b` distances from the anchor point.
    pub true_edge_values: [f64; 4],
    pub ambiguity: [EdgeMixture; 4],
    /// One draw from each mixture.
    pub observed_edges: [f64; 4],
    pub gt_box: BoundingBox,
    /// 1 when the observed box is a main positive for the anchor.
    pub class_label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub anchor: BoundingBox,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
    pub teacher: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn samples(&self) -> impl Iterator<Item = &SyntheticSample> {
        self.train.iter().chain(&self.test).chain(&self.teacher)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Generates the train, held-out and teacher splits for `seed`.
///
/// Edge `k` has true value `lo + (hi - lo)·σ(gain·a_k·x/√d)`. It is ambiguous
/// where `c_k·x > 0`; there the mixture puts `1 - ambiguity` on the true value
/// and `ambiguity/2` on each of `true ± spread`.
pub fn gen_dataset(cfg: &HarnessConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let d = &cfg.data;
    let grid = cfg.distill.bin_grid()?;
    let mut task = rng::stream(seed, "task");
    let edge_dirs: Vec<Vec<f64>> = (0..4).map(|_| normal_vec(&mut task, d.input_dim)).collect();
    let amb_dirs: Vec<Vec<f64>> = (0..4).map(|_| normal_vec(&mut task, d.input_dim)).collect();
    let anchor = BoundingBox::new(-d.anchor_half, -d.anchor_half, d.anchor_half, d.anchor_half)?;
    let norm = (d.input_dim as f64).sqrt();

    let make = |split: Split, n: usize, label: &str| -> Result<Vec<SyntheticSample>> {
        let mut r = rng::stream(seed, label);
        (0..n)
            .map(|_| {
                let x = normal_vec(&mut r, d.input_dim);
                let mut true_edges = [0.0; 4];
                let mut observed = [0.0; 4];
                let mut mixtures = Vec::with_capacity(4);
                for k in 0..4 {
                    let g = d.edge_min + (d.edge_max - d.edge_min) * sigmoid(d.edge_gain * dot(&edge_dirs[k], &x) / norm);
                    let ambiguous = d.ambiguity > 0.0 && dot(&amb_dirs[k], &x) > 0.0;
                    let mix = if !ambiguous {
                        EdgeMixture::new(vec![g], vec![1.0], &grid)?
                    } else if d.ambiguity == 1.0 {
                        EdgeMixture::new(vec![g - d.spread, g + d.spread], vec![0.5, 0.5], &grid)?
                    } else {
                        let side = d.ambiguity / 2.0;
                        EdgeMixture::new(
                            vec![g - d.spread, g, g + d.spread],
                            vec![side, 1.0 - d.ambiguity, side],
                            &grid,
                        )?
                    };
                    true_edges[k] = mix.mean();
                    observed[k] = mix.sample(&mut r);
                    mixtures.push(mix);
                }
                let gt_box = BoundingBox::from_ltrb(0.0, 0.0, observed)?;
                let class_label = (iou(&anchor, &gt_box)? >= cfg.distill.alpha_pos) as usize;
                Ok(SyntheticSample {
                    split,
                    features: x,
                    true_edge_values: true_edges,
                    ambiguity: mixtures.try_into().expect("four edges"),
                    observed_edges: observed,
                    gt_box,
                    class_label,
                })
            })
            .collect()
    };
    Ok(Dataset {
        anchor,
        train: make(Split::Train, d.n_train, "train")?,
        test: make(Split::Test, d.n_test, "test")?,
        teacher: make(Split::Teacher, d.n_teacher, "teacher-data")?,
    })
}

/// One JSON object per line, every split in order.
pub fn write_jsonl<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    for s in dataset.samples() {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> std::io::Result<Vec<SyntheticSample>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxdist::make_grid;
    use rand::SeedableRng;

    fn small() -> HarnessConfig {
        let mut cfg = HarnessConfig::default();
        cfg.data.n_train = 50;
        cfg.data.n_test = 30;
        cfg.data.n_teacher = 20;
        cfg
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let a = gen_dataset(&small(), 3).unwrap();
        let b = gen_dataset(&small(), 3).unwrap();
        assert_eq!(a, b);
        let mut ja = Vec::new();
        let mut jb = Vec::new();
        write_jsonl(&a, &mut ja).unwrap();
        write_jsonl(&b, &mut jb).unwrap();
        assert_eq!(ja, jb);
        assert_ne!(a, gen_dataset(&small(), 4).unwrap());
    }

    #[test]
    fn sample_invariants() {
        let cfg = small();
        let grid = cfg.distill.bin_grid().unwrap();
        let ds = gen_dataset(&cfg, 0).unwrap();
        assert_eq!((ds.train.len(), ds.test.len(), ds.teacher.len()), (50, 30, 20));
        let mut ambiguous = 0;
        for s in ds.samples() {
            for (k, m) in s.ambiguity.iter().enumerate() {
                assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(m.centers.iter().all(|c| grid.contains(*c)));
                assert!(m.centers.contains(&s.observed_edges[k]));
                assert!((m.mean() - s.true_edge_values[k]).abs() < 1e-12);
                ambiguous += m.is_ambiguous() as usize;
            }
            assert_eq!(s.gt_box.to_array(), [
                -s.observed_edges[0],
                -s.observed_edges[1],
                s.observed_edges[2],
                s.observed_edges[3]
            ]);
        }
        // roughly half of all edges
        assert!(ambiguous > 100 && ambiguous < 300, "{ambiguous}");
        let positives = ds.samples().filter(|s| s.class_label == 1).count();
        assert!(positives > 10 && positives < 90, "{positives}");
    }

    #[test]
    fn zero_ambiguity_is_single_component() {
        let mut cfg = small();
        cfg.data.ambiguity = 0.0;
        let grid = cfg.distill.bin_grid().unwrap();
        let ds = gen_dataset(&cfg, 1).unwrap();
        for s in ds.samples() {
            for (k, m) in s.ambiguity.iter().enumerate() {
                assert!(!m.is_ambiguous());
                assert_eq!(s.observed_edges[k], s.true_edge_values[k]);
                let bayes = m.bin_distribution(&grid).unwrap();
                assert!(bayes.iter().filter(|v| **v > 0.0).count() <= 2);
            }
        }
    }

    #[test]
    fn bimodal_mixture_histogram() {
        let grid = make_grid(0.0, 8.0, 8).unwrap();
        let m = EdgeMixture::new(vec![2.0, 5.0], vec![0.5, 0.5], &grid).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let low = (0..n).filter(|_| m.sample(&mut r) == 2.0).count() as f64 / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((low - 0.5).abs() <= 3.0 * sigma, "{low}");
        let bayes = m.bin_distribution(&grid).unwrap();
        assert_eq!(bayes[2], 0.5);
        assert_eq!(bayes[5], 0.5);
    }

    #[test]
    fn mixture_errors() {
        let grid = make_grid(0.0, 8.0, 8).unwrap();
        assert!(matches!(
            EdgeMixture::new(vec![9.0], vec![1.0], &grid),
            Err(Error::OutOfRange { .. })
        ));
        assert!(EdgeMixture::new(vec![1.0, 2.0], vec![0.5, 0.6], &grid).is_err());
        assert!(EdgeMixture::new(vec![1.0], vec![0.5, 0.5], &grid).is_err());
        assert!(EdgeMixture::new(vec![], vec![], &grid).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = gen_dataset(&small(), 2).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 100);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first["gt_box"].is_array());
        assert_eq!(first["split"], "train");
        let back = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back.len(), 100);
        assert_eq!(back[0], ds.train[0]);
    }
}
