use serde::{Deserialize, Serialize};

use crate::boxdist::{expectation_logit_grad, generalized_softmax, BinGrid, TwoHotTarget};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::regions::RegionMasks;

use super::{ce_loss, dfl_loss, giou_regression_loss, kd_loss, DistillConfig, LossResult, LossWeights};

/// Raw head outputs at one anchor: class logits and `4 × (n+1)` box logits
/// laid out edge by edge in `l, t, r, b` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadOutput {
    pub cls_logits: Vec<f64>,
    pub box_logits: Vec<f64>,
}

impl HeadOutput {
    pub fn zeros_like(other: &HeadOutput) -> Self {
        Self {
            cls_logits: vec![0.0; other.cls_logits.len()],
            box_logits: vec![0.0; other.box_logits.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.cls_logits.len() + self.box_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.cls_logits.iter().chain(&self.box_logits).copied()
    }

    /// Edge probabilities at temperature `tau`.
    pub fn edge_probs(&self, grid: &BinGrid, tau: f64) -> Result<Vec<Vec<f64>>> {
        self.box_logits
            .chunks(grid.len())
            .map(|z| generalized_softmax(z, tau))
            .collect()
    }

    /// Expectation-decoded `l, t, r, b` distances.
    pub fn decode_edges(&self, grid: &BinGrid) -> Result<[f64; 4]> {
        let probs = self.edge_probs(grid, 1.0)?;
        let mut out = [0.0; 4];
        for (o, p) in out.iter_mut().zip(&probs) {
            *o = p.iter().zip(grid.endpoints()).map(|(a, e)| a * e).sum();
        }
        Ok(out)
    }

    pub fn decode_box(&self, anchor_point: [f64; 2], grid: &BinGrid) -> Result<BoundingBox> {
        BoundingBox::from_ltrb(anchor_point[0], anchor_point[1], self.decode_edges(grid)?)
    }
}

/// Supervision at one anchor. The box is parameterized as distances from
/// `anchor_point` to the four ground-truth edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorTarget {
    pub class: usize,
    pub anchor_point: [f64; 2],
    pub gt_box: BoundingBox,
    pub edges: [TwoHotTarget; 4],
}

/// Unweighted components. Each term is the mean over the anchors it is
/// active on: all anchors for `cls`, the main region for `reg`, `dfl` and
/// the `*_main` terms, the VLR for the `*_vlr` terms. Distillation terms
/// are reported as KL divergences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub dfl: f64,
    pub ld_main: f64,
    pub ld_vlr: f64,
    pub kd_main: f64,
    pub kd_vlr: f64,
}

impl LossBreakdown {
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

    pub fn weighted(&self, w: &LossWeights) -> f64 {
        self.as_array()
            .iter()
            .zip(w.as_array())
            .map(|(c, l)| c * l)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub breakdown: LossBreakdown,
    /// Gradient per anchor, in the layout of [`HeadOutput`].
    pub grads: Vec<HeadOutput>,
}

impl TotalLoss {
    pub fn into_result(self) -> LossResult {
        LossResult {
            value: self.value,
            grad: self.grads.iter().flat_map(|g| g.flat().collect::<Vec<_>>()).collect(),
        }
    }
}

fn axpy(dst: &mut [f64], scale: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn mean_scale(mask: &[bool]) -> f64 {
    match mask.iter().filter(|&&b| b).count() {
        0 => 0.0,
        k => 1.0 / k as f64,
    }
}

/// Selective-region composite loss
/// `λ0 L_cls + λ1 L_reg + λ2 L_DFL + λ3 I_main L_LD + λ4 I_vl L_LD
///  + λ5 I_main L_KD + λ6 I_vl L_KD`.
///
/// Distillation components are evaluated only when a teacher is supplied;
/// nonzero distillation weights without a teacher are an error.
pub fn total_loss(
    student: &[HeadOutput],
    teacher: Option<&[HeadOutput]>,
    targets: &[AnchorTarget],
    masks: &RegionMasks,
    cfg: &DistillConfig,
) -> Result<TotalLoss> {
    let n = student.len();
    if n == 0 {
        return Err(Error::Empty("student outputs"));
    }
    for len in [targets.len(), masks.len()] {
        if len != n {
            return Err(Error::LengthMismatch { expected: n, got: len });
        }
    }
    if let Some(t) = teacher {
        if t.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: t.len() });
        }
    } else if cfg.weights.has_distillation() {
        return Err(Error::MissingTeacher("total_loss".into()));
    }
    let grid = cfg.bin_grid()?;
    let m = grid.len();
    let w = &cfg.weights;

    let s_all = 1.0 / n as f64;
    let s_main = mean_scale(masks.main());
    let s_vlr = mean_scale(masks.vlr());

    let mut bd = LossBreakdown::default();
    let mut grads: Vec<HeadOutput> = student.iter().map(HeadOutput::zeros_like).collect();

    for (a, out) in student.iter().enumerate() {
        if out.box_logits.len() != 4 * m {
            return Err(Error::LengthMismatch {
                expected: 4 * m,
                got: out.box_logits.len(),
            });
        }
        let tgt = &targets[a];
        let grad = &mut grads[a];

        let mut onehot = vec![0.0; out.cls_logits.len()];
        *onehot
            .get_mut(tgt.class)
            .ok_or_else(|| Error::param("class", format!("label {} out of range", tgt.class)))? = 1.0;
        let cls = ce_loss(&out.cls_logits, &onehot)?;
        bd.cls += s_all * cls.value;
        axpy(&mut grad.cls_logits, w.cls * s_all, &cls.grad);

        let in_main = masks.main()[a];
        let in_vlr = masks.vlr()[a];

        if in_main {
            let probs = out.edge_probs(&grid, 1.0)?;
            let mut edges = [0.0; 4];
            for (e, p) in edges.iter_mut().zip(&probs) {
                *e = p.iter().zip(grid.endpoints()).map(|(a, e)| a * e).sum();
            }
            let pred = BoundingBox::from_ltrb(tgt.anchor_point[0], tgt.anchor_point[1], edges)?;
            let reg = giou_regression_loss(&pred, &tgt.gt_box)?;
            bd.reg += s_main * reg.value;
            // x1 = cx - l, y1 = cy - t, x2 = cx + r, y2 = cy + b
            let d_edge = [-reg.grad[0], -reg.grad[1], reg.grad[2], reg.grad[3]];
            for k in 0..4 {
                let g = expectation_logit_grad(&probs[k], &grid, d_edge[k]);
                axpy(&mut grad.box_logits[k * m..(k + 1) * m], w.reg * s_main, &g);

                let dfl = dfl_loss(&out.box_logits[k * m..(k + 1) * m], &tgt.edges[k])?;
                bd.dfl += s_main * dfl.value;
                axpy(&mut grad.box_logits[k * m..(k + 1) * m], w.dfl * s_main, &dfl.grad);
            }
        }

        let Some(teacher) = teacher else { continue };
        let t_out = &teacher[a];
        for (active, scale, ld_w, kd_w, ld_slot, kd_slot) in [
            (in_main, s_main, w.ld_main, w.kd_main, &mut bd.ld_main, &mut bd.kd_main),
            (in_vlr, s_vlr, w.ld_vlr, w.kd_vlr, &mut bd.ld_vlr, &mut bd.kd_vlr),
        ] {
            if !active {
                continue;
            }
            if t_out.box_logits.len() != out.box_logits.len() {
                return Err(Error::GridMismatch);
            }
            for k in 0..4 {
                let r = kd_loss(
                    &out.box_logits[k * m..(k + 1) * m],
                    &t_out.box_logits[k * m..(k + 1) * m],
                    cfg.tau,
                )?;
                *ld_slot += scale * r.kl;
                axpy(&mut grad.box_logits[k * m..(k + 1) * m], ld_w * scale, &r.grad);
            }
            let r = kd_loss(&out.cls_logits, &t_out.cls_logits, cfg.tau)?;
            *kd_slot += scale * r.kl;
            axpy(&mut grad.cls_logits, kd_w * scale, &r.grad);
        }
    }

    Ok(TotalLoss {
        value: bd.weighted(w),
        breakdown: bd,
        grads,
    })
}
