use crate::error::{Error, Result};

use super::LossResult;

/// `(1/|R|) Σ_{r∈R} ‖M_s(r) - M_t(r)‖₂` over the locations listed in
/// `region`. Feature maps are given row-per-location; the gradient is
/// flattened in the same row-major order and is zero outside `region`.
///
/// Where `M_s(r) = M_t(r)` the norm is not differentiable and the zero
/// subgradient is used.
pub fn feature_imitation_loss(
    student: &[Vec<f64>],
    teacher: &[Vec<f64>],
    region: &[usize],
) -> Result<LossResult> {
    if region.is_empty() {
        return Err(Error::Empty("imitation region"));
    }
    if student.len() != teacher.len() {
        return Err(Error::LengthMismatch {
            expected: student.len(),
            got: teacher.len(),
        });
    }
    let dim = student.first().map_or(0, Vec::len);
    for (s, t) in student.iter().zip(teacher) {
        if s.len() != dim || t.len() != dim {
            return Err(Error::LengthMismatch {
                expected: dim,
                got: if s.len() != dim { s.len() } else { t.len() },
            });
        }
    }
    let scale = 1.0 / region.len() as f64;
    let mut grad = vec![0.0; student.len() * dim];
    let mut value = 0.0;
    for &r in region {
        if r >= student.len() {
            return Err(Error::param(
                "region",
                format!("location {r} outside feature map of {} rows", student.len()),
            ));
        }
        let diff: Vec<f64> = student[r].iter().zip(&teacher[r]).map(|(a, b)| a - b).collect();
        let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        value += scale * norm;
        if norm > 0.0 {
            for (g, d) in grad[r * dim..(r + 1) * dim].iter_mut().zip(&diff) {
                *g += scale * d / norm;
            }
        }
    }
    Ok(LossResult { value, grad })
}
