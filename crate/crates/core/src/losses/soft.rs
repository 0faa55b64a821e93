use crate::boxdist::{check_simplex, generalized_softmax, log_softmax, BoxDistribution, TwoHotTarget};
use crate::error::{Error, Result};

use super::{DistillResult, LossResult};

/// `H(g, softmax(z)) = -Σ g_i ln p_i`, gradient `p - g`.
pub fn ce_loss(z: &[f64], g: &[f64]) -> Result<LossResult> {
    if z.len() != g.len() {
        return Err(Error::LengthMismatch {
            expected: z.len(),
            got: g.len(),
        });
    }
    check_simplex(g, "cross-entropy target")?;
    let logp = log_softmax(z, 1.0)?;
    let value = -g
        .iter()
        .zip(&logp)
        .filter(|(gi, _)| **gi > 0.0)
        .map(|(gi, lp)| gi * lp)
        .sum::<f64>();
    let grad = logp.iter().zip(g).map(|(lp, gi)| lp.exp() - gi).collect();
    Ok(LossResult { value, grad })
}

/// Soft-target loss against already-softened teacher probabilities `q_τ`.
pub fn kd_loss_from_probs(z_s: &[f64], q_tau: &[f64], tau: f64) -> Result<DistillResult> {
    if z_s.len() != q_tau.len() {
        return Err(Error::LengthMismatch {
            expected: z_s.len(),
            got: q_tau.len(),
        });
    }
    check_simplex(q_tau, "teacher probabilities")?;
    let logp = log_softmax(z_s, tau)?;
    let mut cross_entropy = 0.0;
    let mut neg_entropy = 0.0;
    for (q, lp) in q_tau.iter().zip(&logp) {
        if *q > 0.0 {
            cross_entropy -= q * lp;
            neg_entropy += q * q.ln();
        }
    }
    let grad = logp
        .iter()
        .zip(q_tau)
        .map(|(lp, q)| (lp.exp() - q) / tau)
        .collect();
    Ok(DistillResult {
        cross_entropy,
        kl: (cross_entropy + neg_entropy).max(0.0),
        grad,
    })
}

/// `H(S(z_t, τ), S(z_s, τ))` with gradient `(1/τ)(p_τ - q_τ)`.
pub fn kd_loss(z_s: &[f64], z_t: &[f64], tau: f64) -> Result<DistillResult> {
    if z_s.len() != z_t.len() {
        return Err(Error::LengthMismatch {
            expected: z_s.len(),
            got: z_t.len(),
        });
    }
    let q = generalized_softmax(z_t, tau)?;
    kd_loss_from_probs(z_s, &q, tau)
}

/// LD on one edge: the KD contract applied to that edge's `n+1` logits.
pub fn ld_edge_loss(z_s: &[f64], z_t: &[f64], tau: f64) -> Result<DistillResult> {
    kd_loss(z_s, z_t, tau)
}

/// Sum of per-edge LD over all edges; gradient is the per-edge concatenation.
pub fn ld_box_loss(student: &BoxDistribution, teacher: &BoxDistribution, tau: f64) -> Result<DistillResult> {
    if student.len() != teacher.len() {
        return Err(Error::LengthMismatch {
            expected: student.len(),
            got: teacher.len(),
        });
    }
    let mut out = DistillResult {
        cross_entropy: 0.0,
        kl: 0.0,
        grad: Vec::new(),
    };
    for (s, t) in student.edges.iter().zip(&teacher.edges) {
        if s.grid() != t.grid() {
            return Err(Error::GridMismatch);
        }
        let r = ld_edge_loss(s.logits(), t.logits(), tau)?;
        out.cross_entropy += r.cross_entropy;
        out.kl += r.kl;
        out.grad.extend(r.grad);
    }
    Ok(out)
}

/// `u_i H(p, g^i) + u_j H(p, g^j)`; gradient `p_k - u_i[k=i] - u_j[k=j]`.
pub fn dfl_loss(z: &[f64], t: &TwoHotTarget) -> Result<LossResult> {
    let g = t.weights(z.len())?;
    ce_loss(z, &g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxdist::{make_grid, EdgeDistribution};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_check(f: impl Fn(&[f64]) -> f64, z: &[f64], grad: &[f64]) {
        let h = 1e-5;
        for k in 0..z.len() {
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[k] += h;
            zm[k] -= h;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3);
            assert!(err < 1e-6, "component {k}: fd {fd} vs analytic {}", grad[k]);
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn ce_zero_gradient_at_target() {
        let g = [0.2, 0.5, 0.3];
        let z: Vec<f64> = g.iter().map(|v: &f64| v.ln()).collect();
        let r = ce_loss(&z, &g).unwrap();
        assert!(r.grad.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn ce_uniform_prediction() {
        let r = ce_loss(&[0.0; 6], &[0., 0., 1., 0., 0., 0.]).unwrap();
        assert!((r.value - 6f64.ln()).abs() < 1e-14);
        assert!(ce_loss(&[0.0; 3], &[0.5, 0.6, 0.0]).is_err());
    }

    #[test]
    fn ce_and_kd_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let z = rand_vec(&mut rng, 7, 3.0);
            let t = rand_vec(&mut rng, 7, 3.0);
            let g = generalized_softmax(&t, 1.0).unwrap();
            let r = ce_loss(&z, &g).unwrap();
            fd_check(|z| ce_loss(z, &g).unwrap().value, &z, &r.grad);
            let tau = rng.random_range(0.5..12.0);
            let r = kd_loss(&z, &t, tau).unwrap();
            fd_check(|z| kd_loss(z, &t, tau).unwrap().cross_entropy, &z, &r.grad);
            fd_check(|z| kd_loss(z, &t, tau).unwrap().kl, &z, &r.grad);
        }
    }

    #[test]
    fn kd_identical_logits() {
        let z = [0.3, -1.2, 2.0, 0.0];
        let r = kd_loss(&z, &z, 4.0).unwrap();
        assert!(r.grad.iter().all(|v| *v == 0.0));
        assert!(r.kl.abs() < 1e-15);
        assert!(kd_loss(&z, &z[..3], 4.0).is_err());
    }

    #[test]
    fn kd_temperature_is_logit_scaling() {
        let (zs, zt, tau) = ([1.0, 2.0, -3.0], [0.5, 0.1, 4.0], 7.0);
        let scaled = |z: &[f64; 3]| z.map(|v| v / tau);
        let a = kd_loss(&zs, &zt, tau).unwrap();
        let b = kd_loss(&scaled(&zs), &scaled(&zt), 1.0).unwrap();
        assert!((a.cross_entropy - b.cross_entropy).abs() < 1e-12);
        let pa = generalized_softmax(&zs, tau).unwrap();
        let pb = generalized_softmax(&scaled(&zs), 1.0).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn ld_step_moves_student_toward_sharp_teacher() {
        let zt = [0.0, 0.0, 8.0, 0.0, 0.0];
        let mut zs = vec![0.0, 1.0, 0.0, 0.0, 0.5];
        let tau = 1.0;
        let r = ld_edge_loss(&zs, &zt, tau).unwrap();
        for (z, g) in zs.iter_mut().zip(&r.grad) {
            *z -= 5.0 * g;
        }
        let p = generalized_softmax(&zs, 1.0).unwrap();
        let argmax = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 2);
    }

    #[test]
    fn ld_gradient_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let zs = rand_vec(&mut rng, 17, 5.0);
            let zt = rand_vec(&mut rng, 17, 5.0);
            let r = ld_edge_loss(&zs, &zt, 10.0).unwrap();
            assert!(r.grad.iter().sum::<f64>().abs() < 1e-12);
            fd_check(|z| ld_edge_loss(z, &zt, 10.0).unwrap().cross_entropy, &zs, &r.grad);
        }
    }

    #[test]
    fn ld_box_is_sum_of_edges() {
        let grid = make_grid(-5.0, 5.0, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for edges in [4, 5] {
            let s = rand_vec(&mut rng, edges * 11, 2.0);
            let t = rand_vec(&mut rng, edges * 11, 2.0);
            let bs = BoxDistribution::from_flat(&s, &grid).unwrap();
            let bt = BoxDistribution::from_flat(&t, &grid).unwrap();
            let total = ld_box_loss(&bs, &bt, 10.0).unwrap();
            let mut sum = 0.0;
            let mut grad = Vec::new();
            for k in 0..edges {
                let r = ld_edge_loss(&s[k * 11..(k + 1) * 11], &t[k * 11..(k + 1) * 11], 10.0).unwrap();
                sum += r.cross_entropy;
                grad.extend(r.grad);
            }
            assert!((total.cross_entropy - sum).abs() < 1e-12);
            assert_eq!(total.grad, grad);
            assert!(ld_box_loss(&bs, &bs, 10.0).unwrap().kl.abs() < 1e-12);
        }
        let four = BoxDistribution::from_flat(&[0.0; 44], &grid).unwrap();
        let five = BoxDistribution::from_flat(&[0.0; 55], &grid).unwrap();
        assert!(ld_box_loss(&four, &five, 1.0).is_err());
    }

    #[test]
    fn ld_box_rejects_grid_mismatch() {
        let a = make_grid(0.0, 8.0, 8).unwrap();
        let b = make_grid(0.0, 16.0, 8).unwrap();
        let edge = |g: &crate::boxdist::BinGrid| EdgeDistribution::new(vec![0.0; 9], g.clone()).unwrap();
        let bs = BoxDistribution::new(vec![edge(&a); 4]).unwrap();
        let bt = BoxDistribution::new(vec![edge(&b); 4]).unwrap();
        assert_eq!(ld_box_loss(&bs, &bt, 1.0).unwrap_err(), Error::GridMismatch);
    }

    #[test]
    fn dfl_properties() {
        let t = TwoHotTarget::new(2, 0.7).unwrap();
        let mut p = [1e-300; 6];
        p[2] = 0.7;
        p[3] = 0.3;
        let z: Vec<f64> = p.iter().map(|v: &f64| v.ln()).collect();
        let r = dfl_loss(&z, &t).unwrap();
        assert!(r.grad.iter().all(|v| v.abs() < 1e-12));

        let z = [0.1, 0.4, -0.3, 1.0, 0.0, 0.2];
        let one = TwoHotTarget::new(3, 1.0).unwrap();
        let mut g = vec![0.0; 6];
        g[3] = 1.0;
        assert_eq!(dfl_loss(&z, &one).unwrap(), ce_loss(&z, &g).unwrap());

        let r = dfl_loss(&z, &t).unwrap();
        fd_check(|z| dfl_loss(z, &t).unwrap().value, &z, &r.grad);
        let p = generalized_softmax(&z, 1.0).unwrap();
        assert!((r.grad[2] - (p[2] - 0.7)).abs() < 1e-15);
        assert!(dfl_loss(&z, &TwoHotTarget::new(5, 0.5).unwrap()).is_err());
    }
}
