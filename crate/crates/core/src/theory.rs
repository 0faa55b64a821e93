//! Numerical certificates for the LD/KD relationship.
//!
//! * LD against a mixture `l = u1·p + u2·q` has the logit gradient
//!   `u1·∂KD(p) + u2·∂KD(q)`; [`verify_proposition1`] measures the gap.
//! * Any localization distribution `l` splits into two probability vectors
//!   with `u1·p + u2·q = l`; the affine system has rank `m + 1` for vectors of
//!   length `m`, so it is underdetermined for `m > 1`.
//!   [`decompose_localization`] returns the minimum-norm split.
//! * LD rescales the DFL logit gradient at the target position by
//!   `γ + (λ/τ)·c_i/(u_i - p_i)` when the teacher's softened probability is
//!   `q_τ,i = p_τ,i + c_i + η`; [`gradient_rescaling_ratio`] measures it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxdist::{check_simplex, generalized_softmax, TwoHotTarget};
use crate::error::{Error, Result};
use crate::losses::{dfl_loss, kd_loss_from_probs};
use crate::rng;

pub const PROPOSITION1_TOL: f64 = 1e-12;
pub const DECOMPOSITION_TOL: f64 = 1e-10;
pub const RESCALING_TOL: f64 = 1e-10;
pub const MONTE_CARLO_SIGMAS: f64 = 3.0;
pub const ZERO_SUM_TOL: f64 = 1e-12;
/// `|u_i - p_i|` below this makes the predicted rescaling ratio singular.
pub const SINGULAR_GUARD: f64 = 1e-9;

fn check_positive_simplex(v: &[f64], what: &'static str) -> Result<()> {
    check_simplex(v, what)?;
    if v.iter().any(|x| *x <= 0.0) {
        return Err(Error::NotSimplex(format!("{what} needs strictly positive entries")));
    }
    Ok(())
}

/// Logits whose `τ`-softened SoftMax is exactly `s` (up to rounding).
fn logits_for(s: &[f64], tau: f64) -> Vec<f64> {
    s.iter().map(|v| tau * v.ln()).collect()
}

/// Max elementwise gap between the LD gradient against `l = u1·p + u2·q` and
/// `u1·∂KD(p) + u2·∂KD(q)`, for a student whose softened prediction is `s`.
pub fn verify_proposition1(s: &[f64], p: &[f64], q: &[f64], u1: f64, tau: f64) -> Result<f64> {
    proposition1_gap(s, p, q, u1, tau, 0.0)
}

/// As [`verify_proposition1`], with `perturbation` added to every LD
/// gradient entry. Negative control for the certificate.
pub fn proposition1_gap(s: &[f64], p: &[f64], q: &[f64], u1: f64, tau: f64, perturbation: f64) -> Result<f64> {
    check_positive_simplex(s, "student probabilities")?;
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    for v in [p, q] {
        if v.len() != s.len() {
            return Err(Error::LengthMismatch {
                expected: s.len(),
                got: v.len(),
            });
        }
    }
    if !(0.0..=1.0).contains(&u1) {
        return Err(Error::param("u1", format!("must lie in [0, 1], got {u1}")));
    }
    let u2 = 1.0 - u1;
    let z = logits_for(s, tau);
    let l: Vec<f64> = p.iter().zip(q).map(|(a, b)| u1 * a + u2 * b).collect();
    let ld = kd_loss_from_probs(&z, &l, tau)?;
    let kd_p = kd_loss_from_probs(&z, p, tau)?;
    let kd_q = kd_loss_from_probs(&z, q, tau)?;
    Ok(ld
        .grad
        .iter()
        .zip(kd_p.grad.iter().zip(&kd_q.grad))
        .map(|(g, (gp, gq))| (g + perturbation - (u1 * gp + u2 * gq)).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Max violation over `u1·p + u2·q = l`, `Σp = 1`, `Σq = 1`.
    pub residual: f64,
    /// Both `p` and `q` are nonnegative.
    pub simplex_feasible: bool,
    /// The minimum-norm solution had negative entries and was moved toward
    /// the feasible point `p = q = l`.
    pub projected: bool,
}

/// Max violation of the decomposition constraints by `(p, q)`.
pub fn decomposition_residual(l: &[f64], u1: f64, p: &[f64], q: &[f64]) -> f64 {
    let u2 = 1.0 - u1;
    let affine = l
        .iter()
        .zip(p.iter().zip(q))
        .map(|(lk, (pk, qk))| (u1 * pk + u2 * qk - lk).abs())
        .fold(0.0, f64::max);
    let sp = (p.iter().sum::<f64>() - 1.0).abs();
    let sq = (q.iter().sum::<f64>() - 1.0).abs();
    affine.max(sp).max(sq)
}

/// Splits `l` into `u1·p + u2·q` with `Σp = Σq = 1`.
///
/// The system has infinitely many solutions; the one with the smallest
/// `‖p‖² + ‖q‖²` is
/// `p_k = (u1·l_k + (D - u1)/m) / D`, `q_k = (u2·l_k + (D - u2)/m) / D`
/// with `D = u1² + u2²`. If that has negative entries it is moved along the
/// segment toward `p = q = l` (which always solves the system) just far
/// enough to become nonnegative.
///
/// `i` and `j` are the two bins bracketing the continuous target; they are
/// validated but do not enter the minimum-norm solution.
pub fn decompose_localization(l: &[f64], u1: f64, i: usize, j: usize) -> Result<DecompositionResult> {
    check_simplex(l, "localization distribution")?;
    if !(u1 > 0.0 && u1 < 1.0) {
        return Err(Error::Singular(format!("u1 must lie strictly inside (0, 1), got {u1}")));
    }
    let m = l.len();
    if i == j || i >= m || j >= m {
        return Err(Error::param("i/j", format!("need distinct indices below {m}, got {i}, {j}")));
    }
    let u2 = 1.0 - u1;
    let d = u1 * u1 + u2 * u2;
    let mf = m as f64;
    let mut p: Vec<f64> = l.iter().map(|lk| (u1 * lk + (d - u1) / mf) / d).collect();
    let mut q: Vec<f64> = l.iter().map(|lk| (u2 * lk + (d - u2) / mf) / d).collect();

    let mut t: f64 = 0.0;
    for (v, lk) in p.iter().chain(&q).zip(l.iter().chain(l)) {
        if *v < 0.0 {
            t = t.max(-v / (lk - v));
        }
    }
    let projected = t > 0.0;
    if projected {
        for (v, lk) in p.iter_mut().chain(q.iter_mut()).zip(l.iter().chain(l)) {
            *v = (1.0 - t) * *v + t * lk;
            // rounding at the binding entry
            if *v < 0.0 && *v > -1e-15 {
                *v = 0.0;
            }
        }
    }
    let residual = decomposition_residual(l, u1, &p, &q);
    let simplex_feasible = p.iter().chain(&q).all(|v| *v >= 0.0);
    Ok(DecompositionResult {
        p,
        q,
        residual,
        simplex_feasible,
        projected,
    })
}

/// Coefficient matrix `A` of the decomposition system for vectors of
/// length `m`: rows `Σp`, `Σq`, then `u1·p_k + u2·q_k`; columns `p` then `q`.
pub fn coefficient_matrix(u1: f64, m: usize) -> Vec<Vec<f64>> {
    let u2 = 1.0 - u1;
    let mut a = vec![vec![0.0; 2 * m]; m + 2];
    for k in 0..m {
        a[0][k] = 1.0;
        a[1][m + k] = 1.0;
        a[2 + k][k] = u1;
        a[2 + k][m + k] = u2;
    }
    a
}

/// Rank by Gaussian elimination with partial pivoting.
pub fn matrix_rank(mut a: Vec<Vec<f64>>, tol: f64) -> usize {
    let rows = a.len();
    let cols = a.first().map_or(0, Vec::len);
    let mut rank = 0;
    for c in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows)
            .max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))
            .unwrap();
        if a[pivot][c].abs() <= tol {
            continue;
        }
        a.swap(rank, pivot);
        for r in 0..rows {
            if r != rank {
                let f = a[r][c] / a[rank][c];
                if f != 0.0 {
                    for k in c..cols {
                        a[r][k] -= f * a[rank][k];
                    }
                }
            }
        }
        rank += 1;
    }
    rank
}

/// Loss weights for the DFL + LD rescaling analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RescalingSetup {
    /// DFL weight.
    pub gamma: f64,
    /// LD weight.
    pub lambda: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescalingReport {
    pub measured_ratio: f64,
    pub predicted_ratio: f64,
    pub abs_error: f64,
    /// Standard error of the Monte-Carlo mean; zero without noise.
    pub std_error: f64,
    pub trials: usize,
    /// Trials whose teacher vector had to be clipped back onto the simplex.
    pub clipped_trials: usize,
    /// The confidence offset `c` itself had to be clipped.
    pub offset_clipped: bool,
}

/// Pushes `v` back onto the simplex by zeroing negatives and renormalizing.
/// Returns whether anything was clipped.
fn clip_to_simplex(v: &mut [f64]) -> bool {
    let clipped = v.iter().any(|x| *x < 0.0);
    if clipped {
        v.iter_mut().for_each(|x| *x = x.max(0.0));
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
    }
    clipped
}

/// Combined DFL + LD logit gradient `γ·∂DFL + λ·∂LD`.
fn combined_grad(z: &[f64], q_tau: &[f64], t: &TwoHotTarget, setup: &RescalingSetup) -> Result<(Vec<f64>, Vec<f64>)> {
    let dfl = dfl_loss(z, t)?;
    let ld = kd_loss_from_probs(z, q_tau, setup.tau)?;
    let combined = dfl
        .grad
        .iter()
        .zip(&ld.grad)
        .map(|(a, b)| setup.gamma * a + setup.lambda * b)
        .collect();
    Ok((combined, dfl.grad))
}

/// Measures `E_η[∂^LD_i / ∂_i]` at the target's lower bin `i = t.i`, where
/// `∂_i` is the DFL gradient and `∂^LD_i` the DFL+LD gradient, with the
/// teacher set to `q_τ = p_τ + c + η`. `η` is Gaussian with standard deviation
/// `eta_scale`, centered to sum to zero so `q_τ` stays normalized.
pub fn gradient_rescaling_ratio(
    p: &[f64],
    c: &[f64],
    eta_scale: f64,
    setup: &RescalingSetup,
    t: &TwoHotTarget,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RescalingReport> {
    check_positive_simplex(p, "student probabilities")?;
    if c.len() != p.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            got: c.len(),
        });
    }
    if !(setup.tau > 0.0) {
        return Err(Error::param("tau", "must be positive"));
    }
    if trials == 0 {
        return Err(Error::param("trials", "need at least one trial"));
    }
    if !(eta_scale >= 0.0 && eta_scale.is_finite()) {
        return Err(Error::param("eta_scale", "must be finite and nonnegative"));
    }
    t.check(p.len())?;
    let i = t.i;
    let dfl_i = p[i] - t.u1;
    if dfl_i.abs() < SINGULAR_GUARD {
        return Err(Error::Singular(format!("u_i = p_i = {} at index {i}", p[i])));
    }

    let z = logits_for(p, 1.0);
    let p_tau = generalized_softmax(&z, setup.tau)?;
    let c_sum: f64 = c.iter().sum();
    let mut base: Vec<f64> = p_tau.iter().zip(c).map(|(a, b)| a + b - c_sum / p.len() as f64).collect();
    let offset_clipped = clip_to_simplex(&mut base);
    let c_eff = base[i] - p_tau[i];
    let predicted = setup.gamma + setup.lambda / setup.tau * c_eff / (t.u1 - p[i]);

    let noise = Normal::new(0.0, eta_scale.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut clipped_trials = 0;
    let mut eta = vec![0.0; p.len()];
    for _ in 0..trials {
        let mut q = base.clone();
        if eta_scale > 0.0 {
            eta.iter_mut().for_each(|e| *e = noise.sample(rng));
            let mean = eta.iter().sum::<f64>() / eta.len() as f64;
            for (qk, e) in q.iter_mut().zip(&eta) {
                *qk += e - mean;
            }
            clipped_trials += clip_to_simplex(&mut q) as usize;
        }
        let (g, dfl) = combined_grad(&z, &q, t, setup)?;
        let ratio = g[i] / dfl[i];
        sum += ratio;
        sum_sq += ratio * ratio;
    }
    let n = trials as f64;
    let measured = sum / n;
    let std_error = if trials > 1 {
        ((sum_sq / n - measured * measured).max(0.0) * n / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(RescalingReport {
        measured_ratio: measured,
        predicted_ratio: predicted,
        abs_error: (measured - predicted).abs(),
        std_error,
        trials,
        clipped_trials,
        offset_clipped,
    })
}

/// `(Σ_{s≠i} ∂^LD_s, -∂^LD_i)` for the combined DFL + LD gradient against
/// teacher logits `z_t`. The two agree because the gradient sums to zero.
pub fn incorrect_position_gradient_sum(
    z: &[f64],
    z_t: &[f64],
    t: &TwoHotTarget,
    setup: &RescalingSetup,
) -> Result<(f64, f64)> {
    let q = generalized_softmax(z_t, setup.tau)?;
    let (g, _) = combined_grad(z, &q, t, setup)?;
    let i = t.i;
    let others: f64 = g.iter().enumerate().filter(|(s, _)| *s != i).map(|(_, v)| v).sum();
    Ok((others, -g[i]))
}

/// Parameters of the full certificate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyConfig {
    pub seed: u64,
    /// Random instances per exact check.
    pub trials: usize,
    /// Noise draws for the Monte-Carlo rescaling check.
    pub mc_trials: usize,
    pub eta_scale: f64,
    /// Probability-vector lengths exercised.
    pub sizes: Vec<usize>,
    /// Added to the LD gradient in the LD linearity check; nonzero values
    /// must make the certificate fail.
    pub perturb_gradient: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 1000,
            mc_trials: 100_000,
            eta_scale: 0.01,
            sizes: vec![5, 9, 17],
            perturb_gradient: 0.0,
        }
    }
}

impl CertifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.mc_trials < 2 {
            return Err(Error::param("trials", "need trials >= 1 and mc_trials >= 2"));
        }
        if self.sizes.is_empty() || self.sizes.iter().any(|&m| m < 2) {
            return Err(Error::param("sizes", "every vector length must be at least 2"));
        }
        if !(self.eta_scale >= 0.0 && self.eta_scale.is_finite()) {
            return Err(Error::param("eta_scale", "must be finite and nonnegative"));
        }
        if !self.perturb_gradient.is_finite() {
            return Err(Error::param("perturb_gradient", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub proposition1_max_err: f64,
    pub decomposition_max_residual: f64,
    pub decomposition_rank_failures: usize,
    pub rescaling_abs_err: f64,
    pub rescaling_mc_abs_err: f64,
    pub rescaling_mc_std_error: f64,
    pub incorrect_position_max_err: f64,
    pub trials: usize,
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
    pub passed: bool,
}

fn random_simplex(rng: &mut ChaCha8Rng, m: usize, spread: f64) -> Vec<f64> {
    let z: Vec<f64> = (0..m).map(|_| rng.random_range(-spread..spread)).collect();
    generalized_softmax(&z, 1.0).expect("finite logits")
}

/// Runs every check with `cfg.trials` seeded instances each.
pub fn certify(cfg: &CertifyConfig) -> Result<Certificate> {
    cfg.validate()?;
    let size = |k: usize| cfg.sizes[k % cfg.sizes.len()];

    let mut r = rng::stream(cfg.seed, "proposition1");
    let mut prop1: f64 = 0.0;
    for k in 0..cfg.trials {
        let m = size(k);
        let s = random_simplex(&mut r, m, 4.0);
        let p = random_simplex(&mut r, m, 4.0);
        let q = random_simplex(&mut r, m, 4.0);
        let u1 = r.random_range(0.0..=1.0);
        let tau = r.random_range(0.5..20.0);
        prop1 = prop1.max(proposition1_gap(&s, &p, &q, u1, tau, cfg.perturb_gradient)?);
    }

    let mut r = rng::stream(cfg.seed, "decomposition");
    let mut residual: f64 = 0.0;
    let mut rank_failures = 0;
    for k in 0..cfg.trials {
        let m = size(k);
        let l = random_simplex(&mut r, m, 3.0);
        let u1 = r.random_range(0.05..0.95);
        let i = r.random_range(0..m - 1);
        let d = decompose_localization(&l, u1, i, i + 1)?;
        residual = residual.max(d.residual);
        let a = coefficient_matrix(u1, m);
        let mut aug = a.clone();
        aug[0].push(1.0);
        aug[1].push(1.0);
        for (row, lk) in aug[2..].iter_mut().zip(&l) {
            row.push(*lk);
        }
        if matrix_rank(a, 1e-9) != m + 1 || matrix_rank(aug, 1e-9) != m + 1 {
            rank_failures += 1;
        }
    }

    let mut r = rng::stream(cfg.seed, "rescaling");
    let mut rescale: f64 = 0.0;
    let mut incorrect: f64 = 0.0;
    for k in 0..cfg.trials {
        let m = size(k);
        let (p, c, setup, t) = rescaling_instance(&mut r, m);
        let rep = gradient_rescaling_ratio(&p, &c, 0.0, &setup, &t, 1, &mut r)?;
        rescale = rescale.max(rep.abs_error);
        let zs: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let zt: Vec<f64> = (0..m).map(|_| r.random_range(-3.0..3.0)).collect();
        let (a, b) = incorrect_position_gradient_sum(&zs, &zt, &t, &setup)?;
        incorrect = incorrect.max((a - b).abs());
    }

    let mut r = rng::stream(cfg.seed, "rescaling-mc");
    let (p, c, setup, t) = rescaling_instance(&mut r, cfg.sizes[0]);
    let mc = gradient_rescaling_ratio(&p, &c, cfg.eta_scale, &setup, &t, cfg.mc_trials, &mut r)?;

    let mut checks = vec![
        check("proposition1_max_err", prop1, PROPOSITION1_TOL),
        check("decomposition_max_residual", residual, DECOMPOSITION_TOL),
        check("decomposition_rank_failures", rank_failures as f64, 0.0),
        check("rescaling_abs_err", rescale, RESCALING_TOL),
        check("incorrect_position_max_err", incorrect, ZERO_SUM_TOL),
    ];
    checks.push(check(
        "rescaling_mc_abs_err",
        mc.abs_error,
        MONTE_CARLO_SIGMAS * mc.std_error,
    ));
    let passed = checks.iter().all(|c| c.passed);
    Ok(Certificate {
        proposition1_max_err: prop1,
        decomposition_max_residual: residual,
        decomposition_rank_failures: rank_failures,
        rescaling_abs_err: rescale,
        rescaling_mc_abs_err: mc.abs_error,
        rescaling_mc_std_error: mc.std_error,
        incorrect_position_max_err: incorrect,
        trials: cfg.trials,
        seed: cfg.seed,
        checks,
        passed,
    })
}

fn check(name: &str, value: f64, tolerance: f64) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        value,
        tolerance,
        passed: value.is_finite() && value <= tolerance,
    }
}

/// A random rescaling setting with `|u_i - p_i| ≥ 0.05` and a zero-sum
/// offset `c` small enough that `p_τ + c` stays inside the simplex.
pub fn rescaling_instance(r: &mut ChaCha8Rng, m: usize) -> (Vec<f64>, Vec<f64>, RescalingSetup, TwoHotTarget) {
    loop {
        let p = random_simplex(r, m, 2.0);
        let i = r.random_range(0..m - 1);
        let u1 = r.random_range(0.0..=1.0);
        if (u1 - p[i]).abs() < 0.05 {
            continue;
        }
        let setup = RescalingSetup {
            gamma: r.random_range(0.0..2.0),
            lambda: r.random_range(0.0..2.0),
            tau: r.random_range(1.0..20.0),
        };
        let z: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let p_tau = generalized_softmax(&z, setup.tau).expect("finite");
        let floor = p_tau.iter().copied().fold(f64::INFINITY, f64::min);
        let mut c: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
        let mean = c.iter().sum::<f64>() / m as f64;
        let amp = 0.5 * floor;
        c.iter_mut().for_each(|v| *v = amp * (*v - mean) / 2.0);
        let t = TwoHotTarget::new(i, u1).expect("u1 in range");
        return (p, c, setup, t);
    }
}
