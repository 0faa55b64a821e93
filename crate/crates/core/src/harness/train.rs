use serde::{Deserialize, Serialize};

use crate::boxdist::{encode_target, expectation_logit_grad, BinGrid};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::losses::{
    ce_loss, feature_imitation_loss, tbr_loss, total_loss, AnchorTarget, DistillConfig, HeadOutput, LossBreakdown,
};
use crate::regions::{assign_regions, RegionMasks};
use crate::rng;

use super::data::{Dataset, SyntheticSample};
use super::model::{LinearLocalizer, RandomFeatures};
use super::scheme::Objective;
use super::HarnessConfig;

/// Number of class logits: background and object.
pub(crate) const CLASSES: usize = 2;

/// Loss components at one gradient step, evaluated before the update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub losses: LossBreakdown,
    pub tbr: f64,
    pub feature_imitation: f64,
    /// Soft-target box CE (teacher training only).
    pub soft_dfl: f64,
    pub total: f64,
}

/// Precomputed inputs and supervision for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// Random-feature vector per sample.
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<AnchorTarget>,
    pub masks: RegionMasks,
    /// Exact per-edge bin distributions, when known.
    pub soft_edges: Option<Vec<[Vec<f64>; 4]>>,
}

impl TrainingSet {
    pub fn from_samples(
        samples: &[SyntheticSample],
        features: &RandomFeatures,
        anchor: &BoundingBox,
        cfg: &DistillConfig,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("training samples"));
        }
        let grid = cfg.bin_grid()?;
        let mut phis = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        let mut masks = Vec::with_capacity(samples.len());
        for s in samples {
            phis.push(features.apply(&s.features)?);
            let edges = [0, 1, 2, 3].map(|k| encode_target(s.observed_edges[k], &grid));
            let [l, t, r, b] = edges;
            let (cx, cy) = anchor.center();
            targets.push(AnchorTarget {
                class: s.class_label,
                anchor_point: [cx, cy],
                gt_box: s.gt_box,
                edges: [l?, t?, r?, b?],
            });
            masks.push(assign_regions(&[*anchor], &[s.gt_box], cfg.alpha_pos, cfg.gamma_vlr)?);
        }
        Ok(Self {
            features: phis,
            targets,
            masks: RegionMasks::concat(&masks),
            soft_edges: None,
        })
    }

    pub fn with_soft_targets(mut self, samples: &[SyntheticSample], grid: &BinGrid) -> Result<Self> {
        let soft = samples
            .iter()
            .map(|s| {
                let [a, b, c, d] = s.ambiguity.each_ref().map(|m| m.bin_distribution(grid));
                Ok([a?, b?, c?, d?])
            })
            .collect::<Result<Vec<_>>>()?;
        self.soft_edges = Some(soft);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// A trained teacher together with its feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub features: RandomFeatures,
    pub model: LinearLocalizer,
    pub trace: Vec<TraceRow>,
}

/// Frozen teacher outputs on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherView {
    pub hidden: Vec<Vec<f64>>,
    pub outputs: Vec<HeadOutput>,
    pub boxes: Vec<BoundingBox>,
}

pub fn prepare_teacher(teacher: &Teacher, samples: &[SyntheticSample], anchor: &BoundingBox, grid: &BinGrid) -> Result<TeacherView> {
    let (cx, cy) = anchor.center();
    let mut view = TeacherView {
        hidden: Vec::with_capacity(samples.len()),
        outputs: Vec::with_capacity(samples.len()),
        boxes: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        let (h, out) = teacher.model.forward(&teacher.features.apply(&s.features)?)?;
        view.boxes.push(out.decode_box([cx, cy], grid)?);
        view.hidden.push(h);
        view.outputs.push(out);
    }
    Ok(view)
}

/// Fits a teacher on the teacher split against the exact edge distributions.
/// Its projection is frozen, so the fit is convex in the head.
pub fn train_teacher(cfg: &HarnessConfig, dataset: &Dataset, seed: u64) -> Result<Teacher> {
    let grid = cfg.distill.bin_grid()?;
    let features = RandomFeatures::new(
        cfg.model.teacher_features,
        cfg.data.input_dim,
        &mut rng::stream(seed, "features"),
    );
    let mut model = LinearLocalizer::new(
        cfg.model.teacher_features,
        cfg.model.hidden,
        grid.len(),
        CLASSES,
        cfg.model.head_init,
        false,
        &mut rng::stream(seed, "teacher-init"),
    );
    let set = TrainingSet::from_samples(&dataset.teacher, &features, &dataset.anchor, &cfg.distill)?
        .with_soft_targets(&dataset.teacher, &grid)?;
    let trace = train(
        &mut model,
        &set,
        None,
        &Objective::teacher(),
        &cfg.distill,
        cfg.train.teacher_epochs,
        cfg.train.teacher_lr,
    )?;
    Ok(Teacher { features, model, trace })
}

fn axpy(dst: &mut [f64], scale: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn share(mask: &[bool]) -> f64 {
    match mask.iter().filter(|&&b| b).count() {
        0 => 0.0,
        k => 1.0 / k as f64,
    }
}

/// Full-batch gradient descent with a fixed step. Returns one trace row per
/// epoch, holding the loss before that epoch's update.
pub fn train(
    model: &mut LinearLocalizer,
    set: &TrainingSet,
    teacher: Option<&TeacherView>,
    objective: &Objective,
    cfg: &DistillConfig,
    epochs: usize,
    lr: f64,
) -> Result<Vec<TraceRow>> {
    if set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if objective.needs_teacher() && teacher.is_none() {
        return Err(Error::MissingTeacher("training objective uses teacher terms".into()));
    }
    if let Some(t) = teacher {
        if t.outputs.len() != set.len() {
            return Err(Error::LengthMismatch {
                expected: set.len(),
                got: t.outputs.len(),
            });
        }
    }
    let soft = match (&set.soft_edges, objective.soft_dfl > 0.0) {
        (Some(s), true) => Some(s),
        (None, true) => return Err(Error::param("soft_dfl", "training set has no soft targets")),
        _ => None,
    };
    let grid = cfg.bin_grid()?;
    let m = grid.len();
    let mut loss_cfg = cfg.clone();
    loss_cfg.weights = objective.weights;
    let n = set.len();
    let all: Vec<usize> = (0..n).collect();
    let s_main = share(set.masks.main());

    // a frozen projection gives the same hidden vectors every epoch
    let frozen: Option<Vec<Vec<f64>>> = if model.trainable {
        None
    } else {
        Some(set.features.iter().map(|phi| model.hidden(phi)).collect::<Result<_>>()?)
    };

    let mut trace = Vec::with_capacity(epochs);
    for step in 0..epochs {
        let hidden: Vec<Vec<f64>> = match &frozen {
            Some(h) => h.clone(),
            None => set.features.iter().map(|phi| model.hidden(phi)).collect::<Result<_>>()?,
        };
        let outputs: Vec<HeadOutput> = hidden.iter().map(|h| model.head_output(h)).collect();
        let t_out = teacher.map(|t| t.outputs.as_slice());
        let loss = total_loss(&outputs, t_out, &set.targets, &set.masks, &loss_cfg)?;
        let mut grads = loss.grads;
        let mut row = TraceRow {
            step,
            losses: loss.breakdown,
            ..TraceRow::default()
        };

        if objective.tbr > 0.0 {
            let t = teacher.expect("checked above");
            for a in (0..n).filter(|&a| set.masks.main()[a]) {
                let tgt = &set.targets[a];
                let pred = outputs[a].decode_box(tgt.anchor_point, &grid)?;
                let r = tbr_loss(&pred, &t.boxes[a], &tgt.gt_box, cfg.tbr_margin)?;
                row.tbr += s_main * r.value;
                if r.value == 0.0 && r.grad.iter().all(|g| *g == 0.0) {
                    continue;
                }
                let d_edge = [-r.grad[0], -r.grad[1], r.grad[2], r.grad[3]];
                let probs = outputs[a].edge_probs(&grid, 1.0)?;
                for k in 0..4 {
                    let g = expectation_logit_grad(&probs[k], &grid, d_edge[k]);
                    axpy(&mut grads[a].box_logits[k * m..(k + 1) * m], objective.tbr * s_main, &g);
                }
            }
        }

        if let Some(soft) = soft {
            let scale = 1.0 / n as f64;
            for (a, edges) in soft.iter().enumerate() {
                for (k, target) in edges.iter().enumerate() {
                    let r = ce_loss(&outputs[a].box_logits[k * m..(k + 1) * m], target)?;
                    row.soft_dfl += scale * r.value;
                    axpy(&mut grads[a].box_logits[k * m..(k + 1) * m], objective.soft_dfl * scale, &r.grad);
                }
            }
        }

        let mut d_hidden: Option<Vec<f64>> = None;
        if objective.feature_imitation > 0.0 {
            let t = teacher.expect("checked above");
            let r = feature_imitation_loss(&hidden, &t.hidden, &all)?;
            row.feature_imitation = r.value;
            d_hidden = Some(r.grad.iter().map(|g| objective.feature_imitation * g).collect());
        }

        row.total = loss.value
            + objective.tbr * row.tbr
            + objective.feature_imitation * row.feature_imitation
            + objective.soft_dfl * row.soft_dfl;
        if !row.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        trace.push(row);

        let dim = model.hidden_dim();
        let mut grad = model.zeros_like();
        for a in 0..n {
            let dh = d_hidden.as_ref().map(|d| &d[a * dim..(a + 1) * dim]);
            model.backward(&set.features[a], &hidden[a], &grads[a], dh, &mut grad);
        }
        model.step(&grad, lr);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::gen_dataset;
    use crate::losses::LossWeights;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> HarnessConfig {
        let mut cfg = HarnessConfig::default();
        cfg.data.n_train = 40;
        cfg.data.n_test = 20;
        cfg.data.n_teacher = 60;
        cfg.train.teacher_epochs = 30;
        cfg
    }

    fn student(cfg: &HarnessConfig, trainable: bool) -> (LinearLocalizer, RandomFeatures) {
        let f = RandomFeatures::new(cfg.model.student_features, cfg.data.input_dim, &mut ChaCha8Rng::seed_from_u64(1));
        let m = LinearLocalizer::new(
            cfg.model.student_features,
            cfg.model.hidden,
            9,
            CLASSES,
            0.01,
            trainable,
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        (m, f)
    }

    #[test]
    fn baseline_trace_matches_total_loss() {
        let cfg = small();
        let ds = gen_dataset(&cfg, 0).unwrap();
        let (mut m, f) = student(&cfg, true);
        let set = TrainingSet::from_samples(&ds.train, &f, &ds.anchor, &cfg.distill).unwrap();
        let obj = Objective {
            weights: cfg.distill.weights.supervised(),
            tbr: 0.0,
            feature_imitation: 0.0,
            soft_dfl: 0.0,
        };
        let init = m.clone();
        let trace = train(&mut m, &set, None, &obj, &cfg.distill, 3, 0.5).unwrap();
        let outs: Vec<_> = set.features.iter().map(|p| init.forward(p).unwrap().1).collect();
        let mut c = cfg.distill.clone();
        c.weights = obj.weights;
        let direct = total_loss(&outs, None, &set.targets, &set.masks, &c).unwrap();
        assert_eq!(trace[0].total, direct.value);
        assert_eq!(trace[0].losses, direct.breakdown);
    }

    #[test]
    fn convex_trace_is_non_increasing() {
        let cfg = small();
        let ds = gen_dataset(&cfg, 1).unwrap();
        let (mut m, f) = student(&cfg, false);
        let set = TrainingSet::from_samples(&ds.train, &f, &ds.anchor, &cfg.distill).unwrap();
        let obj = Objective {
            weights: LossWeights {
                cls: 1.0,
                reg: 0.0,
                dfl: 1.0,
                ..LossWeights::default().supervised()
            },
            tbr: 0.0,
            feature_imitation: 0.0,
            soft_dfl: 0.0,
        };
        let trace = train(&mut m, &set, None, &obj, &cfg.distill, 60, 0.1).unwrap();
        for w in trace.windows(2) {
            assert!(w[1].total <= w[0].total, "{} > {}", w[1].total, w[0].total);
        }
        assert!(trace.last().unwrap().total < trace[0].total);
    }

    #[test]
    fn ld_against_own_initialization_starts_at_zero() {
        let cfg = small();
        let ds = gen_dataset(&cfg, 2).unwrap();
        let (mut m, f) = student(&cfg, true);
        let set = TrainingSet::from_samples(&ds.train, &f, &ds.anchor, &cfg.distill).unwrap();
        let (hidden, outputs): (Vec<_>, Vec<HeadOutput>) = set.features.iter().map(|p| m.forward(p).unwrap()).unzip();
        let grid = cfg.distill.bin_grid().unwrap();
        let boxes = outputs.iter().map(|o| o.decode_box([0.0, 0.0], &grid).unwrap()).collect();
        let view = TeacherView { hidden, outputs, boxes };
        let mut w = cfg.distill.weights.supervised();
        w.ld_main = 1.0;
        w.ld_vlr = 1.0;
        let obj = Objective {
            weights: w,
            tbr: 0.0,
            feature_imitation: 1.0,
            soft_dfl: 0.0,
        };
        let trace = train(&mut m, &set, Some(&view), &obj, &cfg.distill, 1, 0.5).unwrap();
        assert!(trace[0].losses.ld_main.abs() < 1e-12);
        assert!(trace[0].losses.ld_vlr.abs() < 1e-12);
        assert_eq!(trace[0].feature_imitation, 0.0);
    }

    #[test]
    fn teacher_terms_need_a_teacher() {
        let cfg = small();
        let ds = gen_dataset(&cfg, 3).unwrap();
        let (mut m, f) = student(&cfg, true);
        let set = TrainingSet::from_samples(&ds.train, &f, &ds.anchor, &cfg.distill).unwrap();
        let obj = Objective {
            weights: cfg.distill.weights.supervised(),
            tbr: 1.0,
            feature_imitation: 0.0,
            soft_dfl: 0.0,
        };
        let err = train(&mut m, &set, None, &obj, &cfg.distill, 1, 0.5).unwrap_err();
        assert!(matches!(err, Error::MissingTeacher(_)));
        assert!(train(&mut m, &set, None, &Objective::teacher(), &cfg.distill, 1, 0.5).is_err());
    }

    #[test]
    fn teacher_training_reduces_loss() {
        let cfg = small();
        let ds = gen_dataset(&cfg, 4).unwrap();
        let t = train_teacher(&cfg, &ds, 4).unwrap();
        assert_eq!(t.trace.len(), 30);
        assert!(t.trace.last().unwrap().total < t.trace[0].total);
        assert!(t.trace.iter().all(|r| r.total.is_finite()));
    }
}
