use crate::error::{Error, Result};
use crate::geometry::{giou, BoundingBox};

use super::LossResult;

/// `1 - giou(student, gt)` with the gradient over the student's corners
/// `[x1, y1, x2, y2]`.
///
/// At ties between student and ground-truth coordinates the loss is not
/// differentiable; there the student coordinate is treated as inactive in
/// the `min`/`max` it ties in.
pub fn giou_regression_loss(student: &BoundingBox, gt: &BoundingBox) -> Result<LossResult> {
    let g = giou(student, gt)?;
    let (s, t) = (student, gt);
    let (w, h) = (s.width(), s.height());

    let iw_raw = s.x2.min(t.x2) - s.x1.max(t.x1);
    let ih_raw = s.y2.min(t.y2) - s.y1.max(t.y1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = s.area() + t.area() - inter;
    if union <= 0.0 {
        return Err(Error::Undefined("GIoU loss gradient with zero union area"));
    }
    let cw = s.x2.max(t.x2) - s.x1.min(t.x1);
    let ch = s.y2.max(t.y2) - s.y1.min(t.y1);
    let hull = cw * ch;

    let ind = |c: bool| if c { 1.0 } else { 0.0 };
    let d_area = [-h, -w, h, w];
    let d_iw = [
        -ind(iw_raw > 0.0 && s.x1 > t.x1),
        0.0,
        ind(iw_raw > 0.0 && s.x2 < t.x2),
        0.0,
    ];
    let d_ih = [
        0.0,
        -ind(ih_raw > 0.0 && s.y1 > t.y1),
        0.0,
        ind(ih_raw > 0.0 && s.y2 < t.y2),
    ];
    let d_cw = [-ind(s.x1 < t.x1), 0.0, ind(s.x2 > t.x2), 0.0];
    let d_ch = [0.0, -ind(s.y1 < t.y1), 0.0, ind(s.y2 > t.y2)];

    let grad = (0..4)
        .map(|k| {
            let d_inter = d_iw[k] * ih + iw * d_ih[k];
            let d_union = d_area[k] - d_inter;
            let d_hull = d_cw[k] * ch + cw * d_ch[k];
            let d_giou = d_inter / union - inter * d_union / (union * union) + d_union / hull
                - union * d_hull / (hull * hull);
            -d_giou
        })
        .collect();
    Ok(LossResult {
        value: 1.0 - g,
        grad,
    })
}

/// Whether the bounded-regression term is active: the student is not better
/// than the teacher by at least `margin` in corner-space ℓ2.
pub fn tbr_gate(student: &BoundingBox, teacher: &BoundingBox, gt: &BoundingBox, margin: f64) -> bool {
    student.corner_distance(gt) + margin > teacher.corner_distance(gt)
}

/// Teacher-bounded regression: the GIoU loss when [`tbr_gate`] is open,
/// zero otherwise.
pub fn tbr_loss(
    student: &BoundingBox,
    teacher: &BoundingBox,
    gt: &BoundingBox,
    margin: f64,
) -> Result<LossResult> {
    teacher.validate()?;
    if tbr_gate(student, teacher, gt, margin) {
        giou_regression_loss(student, gt)
    } else {
        student.validate()?;
        gt.validate()?;
        Ok(LossResult::zero(4))
    }
}
