//! Distillation-region assignment.
//!
//! The main region is the set of positive anchors under max-IoU label
//! assignment (`max_j IoU ≥ α_pos`). The valuable localization region (VLR)
//! holds the anchors whose DIoU with some ground truth lies in
//! `[γ·α_pos, α_pos]`, minus the main positives so that the two masks never
//! overlap.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::{diou, diou_matrix, iou, BoundingBox};

/// An anchor box tagged with the pyramid level it came from. The level is
/// only used for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default)]
    pub level: u32,
}

/// Per-anchor membership flags. Serializes each mask as an array of 0/1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskRepr", into = "MaskRepr")]
pub struct RegionMasks {
    main: Vec<bool>,
    vlr: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    #[serde(serialize_with = "as_bits", deserialize_with = "from_bits")]
    main: Vec<bool>,
    #[serde(serialize_with = "as_bits", deserialize_with = "from_bits")]
    vlr: Vec<bool>,
}

fn as_bits<S: Serializer>(v: &[bool], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|&b| b as u8))
}

fn from_bits<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<bool>, D::Error> {
    let bits = Vec::<u8>::deserialize(d)?;
    bits.into_iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("mask bit must be 0 or 1, got {other}"))),
        })
        .collect()
}

impl TryFrom<MaskRepr> for RegionMasks {
    type Error = Error;
    fn try_from(r: MaskRepr) -> Result<Self> {
        RegionMasks::new(r.main, r.vlr)
    }
}

impl From<RegionMasks> for MaskRepr {
    fn from(m: RegionMasks) -> Self {
        MaskRepr {
            main: m.main,
            vlr: m.vlr,
        }
    }
}

impl RegionMasks {
    pub fn new(main: Vec<bool>, vlr: Vec<bool>) -> Result<Self> {
        if main.len() != vlr.len() {
            return Err(Error::LengthMismatch {
                expected: main.len(),
                got: vlr.len(),
            });
        }
        if let Some(i) = main.iter().zip(&vlr).position(|(m, v)| *m && *v) {
            return Err(Error::param(
                "masks",
                format!("anchor {i} is in both the main region and the VLR"),
            ));
        }
        Ok(Self { main, vlr })
    }

    pub fn empty(len: usize) -> Self {
        Self {
            main: vec![false; len],
            vlr: vec![false; len],
        }
    }

    pub fn main(&self) -> &[bool] {
        &self.main
    }
    pub fn vlr(&self) -> &[bool] {
        &self.vlr
    }
    pub fn len(&self) -> usize {
        self.main.len()
    }
    pub fn is_empty(&self) -> bool {
        self.main.is_empty()
    }

    /// Same masks with the VLR cleared.
    pub fn without_vlr(&self) -> Self {
        Self {
            main: self.main.clone(),
            vlr: vec![false; self.vlr.len()],
        }
    }

    pub fn concat(parts: &[RegionMasks]) -> Self {
        Self {
            main: parts.iter().flat_map(|m| m.main.iter().copied()).collect(),
            vlr: parts.iter().flat_map(|m| m.vlr.iter().copied()).collect(),
        }
    }
}

fn check_alpha(alpha_pos: f64) -> Result<()> {
    if !(alpha_pos > 0.0 && alpha_pos <= 1.0) {
        return Err(Error::param("alpha_pos", format!("must lie in (0, 1], got {alpha_pos}")));
    }
    Ok(())
}

/// Positive anchors under max-IoU assignment. An image without ground
/// truth yields an all-false mask.
pub fn assign_main(anchors: &[BoundingBox], gts: &[BoundingBox], alpha_pos: f64) -> Result<Vec<bool>> {
    if anchors.is_empty() {
        return Err(Error::Empty("anchor list"));
    }
    check_alpha(alpha_pos)?;
    anchors
        .iter()
        .map(|a| {
            let mut best = f64::NEG_INFINITY;
            for g in gts {
                best = best.max(iou(a, g)?);
            }
            Ok(best >= alpha_pos)
        })
        .collect()
}

/// The `I×J` selection `V = {γ·α_pos ≤ DIoU ≤ α_pos}`, before positives are
/// removed.
pub fn vlr_matrix(
    anchors: &[BoundingBox],
    gts: &[BoundingBox],
    alpha_pos: f64,
    gamma: f64,
) -> Result<Vec<Vec<bool>>> {
    check_alpha(alpha_pos)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::param("gamma", format!("must lie in [0, 1], got {gamma}")));
    }
    let alpha_vl = gamma * alpha_pos;
    Ok(diou_matrix(anchors, gts)?
        .into_iter()
        .map(|row| row.into_iter().map(|x| alpha_vl <= x && x <= alpha_pos).collect())
        .collect())
}

/// VLR membership per anchor, excluding main positives.
pub fn assign_vlr(anchors: &[BoundingBox], gts: &[BoundingBox], alpha_pos: f64, gamma: f64) -> Result<Vec<bool>> {
    Ok(assign_regions(anchors, gts, alpha_pos, gamma)?.vlr)
}

pub fn assign_regions(
    anchors: &[BoundingBox],
    gts: &[BoundingBox],
    alpha_pos: f64,
    gamma: f64,
) -> Result<RegionMasks> {
    let main = assign_main(anchors, gts, alpha_pos)?;
    if gts.is_empty() {
        return Ok(RegionMasks::empty(anchors.len()));
    }
    let v = vlr_matrix(anchors, gts, alpha_pos, gamma)?;
    let vlr = v
        .iter()
        .zip(&main)
        .map(|(row, &pos)| !pos && row.iter().any(|&b| b))
        .collect();
    RegionMasks::new(main, vlr)
}

/// Anchors of several locations flattened into one list, remembering the
/// location of each flat entry.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedAnchors {
    pub anchors: Vec<BoundingBox>,
    pub location: Vec<usize>,
    pub per_location: usize,
}

pub fn unfold_anchors(per_location: &[Vec<BoundingBox>]) -> Result<UnfoldedAnchors> {
    let k = per_location.first().map(Vec::len).ok_or(Error::Empty("anchor locations"))?;
    if k == 0 {
        return Err(Error::Empty("anchors per location"));
    }
    if let Some(bad) = per_location.iter().find(|a| a.len() != k) {
        return Err(Error::LengthMismatch {
            expected: k,
            got: bad.len(),
        });
    }
    Ok(UnfoldedAnchors {
        anchors: per_location.iter().flatten().copied().collect(),
        location: (0..per_location.len()).flat_map(|l| std::iter::repeat_n(l, k)).collect(),
        per_location: k,
    })
}

impl UnfoldedAnchors {
    pub fn locations(&self) -> usize {
        self.anchors.len() / self.per_location
    }

    /// A location is selected if any of its anchors is.
    pub fn fold(&self, flat: &[bool]) -> Result<Vec<bool>> {
        if flat.len() != self.anchors.len() {
            return Err(Error::LengthMismatch {
                expected: self.anchors.len(),
                got: flat.len(),
            });
        }
        let mut out = vec![false; self.locations()];
        for (&loc, &b) in self.location.iter().zip(flat) {
            out[loc] |= b;
        }
        Ok(out)
    }
}

/// One row of the per-anchor attribution table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRow {
    pub anchor_id: usize,
    pub level: u32,
    /// Largest DIoU with any ground truth; `None` when the scene has none.
    pub max_diou: Option<f64>,
    pub main: bool,
    pub vlr: bool,
}

pub fn assignment_table(
    anchors: &[Anchor],
    gts: &[BoundingBox],
    alpha_pos: f64,
    gamma: f64,
) -> Result<Vec<AssignmentRow>> {
    let boxes: Vec<BoundingBox> = anchors.iter().map(|a| a.bbox).collect();
    let masks = assign_regions(&boxes, gts, alpha_pos, gamma)?;
    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut best: Option<f64> = None;
            for g in gts {
                let d = diou(&a.bbox, g)?;
                best = Some(best.map_or(d, |b| b.max(d)));
            }
            Ok(AssignmentRow {
                anchor_id: i,
                level: a.level,
                max_diou: best,
                main: masks.main[i],
                vlr: masks.vlr[i],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Exhaustive per-pair threshold check, written independently of
    /// `assign_regions`.
    fn brute_force(anchors: &[BoundingBox], gts: &[BoundingBox], alpha: f64, gamma: f64) -> (Vec<bool>, Vec<bool>) {
        let mut main = vec![false; anchors.len()];
        let mut vlr = vec![false; anchors.len()];
        for (i, a) in anchors.iter().enumerate() {
            for g in gts {
                if iou(a, g).unwrap() >= alpha {
                    main[i] = true;
                }
            }
            for g in gts {
                let d = diou(a, g).unwrap();
                if !main[i] && d >= gamma * alpha && d <= alpha {
                    vlr[i] = true;
                }
            }
        }
        (main, vlr)
    }

    #[test]
    fn main_examples() {
        let g = bx(0., 0., 2., 2.);
        assert_eq!(assign_main(&[g], &[g], 0.5).unwrap(), vec![true]);
        let far = [bx(10., 10., 11., 11.), bx(-5., -5., -4., -4.)];
        assert_eq!(assign_main(&far, &[g], 0.5).unwrap(), vec![false, false]);
        assert_eq!(assign_main(&far, &[], 0.5).unwrap(), vec![false, false]);
        assert!(assign_main(&[], &[g], 0.5).is_err());

        let anchors = [bx(0., 0., 2., 2.), bx(0.5, 0., 2.5, 2.), bx(1., 1., 3., 3.), bx(0., 0., 1., 1.)];
        // IoUs: 1, 3/5, 1/7, 1/4
        assert_eq!(assign_main(&anchors, &[g], 0.5).unwrap(), vec![true, true, false, false]);
    }

    #[test]
    fn vlr_gamma_extremes() {
        let g = bx(0., 0., 4., 4.);
        let anchors: Vec<_> = (0..8).map(|k| g.translate(0.4 * k as f64, 0.3 * k as f64)).collect();
        assert!(diou_matrix(&anchors, &[g]).unwrap().iter().all(|r| r[0] != 0.5));
        let vlr1 = assign_vlr(&anchors, &[g], 0.5, 1.0).unwrap();
        assert!(vlr1.iter().all(|v| !v));

        let vlr0 = assign_vlr(&anchors, &[g], 0.5, 0.0).unwrap();
        let main = assign_main(&anchors, &[g], 0.5).unwrap();
        for (i, a) in anchors.iter().enumerate() {
            let d = diou(a, &g).unwrap();
            assert_eq!(vlr0[i], !main[i] && (0.0..=0.5).contains(&d), "anchor {i}");
        }
    }

    #[test]
    fn vlr_hand_scene() {
        // anchor [1,0,3,2] vs gt [0,0,2,2]: IoU 1/3, centers 1 apart, hull diag² 13
        let g = bx(0., 0., 2., 2.);
        let a = bx(1., 0., 3., 2.);
        let d = diou(&a, &g).unwrap();
        assert!((d - (1. / 3. - 1. / 13.)).abs() < 1e-12);
        assert!(d > 0.125 && d < 0.5);
        assert_eq!(assign_vlr(&[a], &[g], 0.5, 0.25).unwrap(), vec![true]);
        assert_eq!(assign_vlr(&[a], &[g], 0.5, 0.6).unwrap(), vec![false]);
    }

    #[test]
    fn unfold_and_fold() {
        let a = bx(0., 0., 1., 1.);
        let one = unfold_anchors(&[vec![a], vec![a.translate(1., 0.)]]).unwrap();
        assert_eq!(one.anchors.len(), 2);
        assert_eq!(one.location, vec![0, 1]);

        let locs: Vec<Vec<BoundingBox>> = (0..2)
            .map(|l| (0..3).map(|k| a.translate(l as f64, k as f64)).collect())
            .collect();
        let u = unfold_anchors(&locs).unwrap();
        assert_eq!(u.anchors.len(), 6);
        assert_eq!(u.anchors[4], locs[1][1]);
        assert_eq!(u.fold(&[false, true, false, false, false, false]).unwrap(), vec![true, false]);
        assert_eq!(u.fold(&[false; 6]).unwrap(), vec![false, false]);
        assert!(u.fold(&[true; 5]).is_err());
        assert!(unfold_anchors(&[]).is_err());
        assert!(unfold_anchors(&[vec![a], vec![a, a]]).is_err());
    }

    #[test]
    fn masks_serialize_as_bits() {
        let m = RegionMasks::new(vec![true, false, false], vec![false, true, false]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"main":[1,0,0],"vlr":[0,1,0]}"#);
        assert_eq!(serde_json::from_str::<RegionMasks>(&s).unwrap(), m);
        assert!(serde_json::from_str::<RegionMasks>(r#"{"main":[1],"vlr":[1]}"#).is_err());
        assert!(serde_json::from_str::<RegionMasks>(r#"{"main":[2],"vlr":[0]}"#).is_err());
    }

    fn arb_box(span: f64) -> impl Strategy<Value = BoundingBox> {
        (0.0..span, 0.0..span, 0.5..6.0f64, 0.5..6.0f64).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    fn arb_scene() -> impl Strategy<Value = (Vec<BoundingBox>, Vec<BoundingBox>)> {
        (prop::collection::vec(arb_box(8.0), 1..=10), prop::collection::vec(arb_box(8.0), 1..=3))
    }

    proptest! {
        #[test]
        fn matches_brute_force((anchors, gts) in arb_scene(), gamma in 0.0..=1.0f64, alpha in 0.3..0.7f64) {
            let m = assign_regions(&anchors, &gts, alpha, gamma).unwrap();
            let (main, vlr) = brute_force(&anchors, &gts, alpha, gamma);
            prop_assert_eq!(m.main(), &main[..]);
            prop_assert_eq!(m.vlr(), &vlr[..]);
        }

        #[test]
        fn gamma_monotone((anchors, gts) in arb_scene(), g1 in 0.0..=1.0f64, g2 in 0.0..=1.0f64) {
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let wide = assign_vlr(&anchors, &gts, 0.5, lo).unwrap();
            let narrow = assign_vlr(&anchors, &gts, 0.5, hi).unwrap();
            for (n, w) in narrow.iter().zip(&wide) {
                prop_assert!(!n || *w);
            }
        }

        #[test]
        fn translation_invariant((anchors, gts) in arb_scene(), dx in -20.0..20.0f64, dy in -20.0..20.0f64) {
            let a2: Vec<_> = anchors.iter().map(|b| b.translate(dx, dy)).collect();
            let g2: Vec<_> = gts.iter().map(|b| b.translate(dx, dy)).collect();
            let m1 = assign_regions(&anchors, &gts, 0.5, 0.25).unwrap();
            let m2 = assign_regions(&a2, &g2, 0.5, 0.25).unwrap();
            // only anchors whose metrics sit exactly on a threshold could flip
            let on_edge = anchors.iter().any(|a| gts.iter().any(|g| {
                let (i, d) = (iou(a, g).unwrap(), diou(a, g).unwrap());
                (i - 0.5).abs() < 1e-9 || (d - 0.5).abs() < 1e-9 || (d - 0.125).abs() < 1e-9
            }));
            prop_assume!(!on_edge);
            prop_assert_eq!(m1, m2);
        }
    }
}
