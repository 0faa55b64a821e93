//! Discretized edge distributions: the bin grid over a regression range,
//! temperature-softened SoftMax, two-hot target encoding and expectation
//! decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σp = 1` accepted by consumers of probability vectors.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Uniform discretization `e_0 = e_min < e_1 < ... < e_n = e_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct BinGrid {
    e_min: f64,
    e_max: f64,
    n: usize,
    endpoints: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub e_min: f64,
    pub e_max: f64,
    pub n: usize,
}

impl TryFrom<GridSpec> for BinGrid {
    type Error = Error;

    fn try_from(s: GridSpec) -> Result<Self> {
        make_grid(s.e_min, s.e_max, s.n)
    }
}

impl From<BinGrid> for GridSpec {
    fn from(g: BinGrid) -> Self {
        g.spec()
    }
}

pub fn make_grid(e_min: f64, e_max: f64, n: usize) -> Result<BinGrid> {
    if n == 0 {
        return Err(Error::param("n", "need at least one sub-interval"));
    }
    if !(e_min.is_finite() && e_max.is_finite()) || e_min >= e_max {
        return Err(Error::param(
            "e_min/e_max",
            format!("require finite e_min < e_max, got [{e_min}, {e_max}]"),
        ));
    }
    let step = (e_max - e_min) / n as f64;
    let mut endpoints: Vec<f64> = (0..=n).map(|i| e_min + step * i as f64).collect();
    endpoints[n] = e_max;
    Ok(BinGrid {
        e_min,
        e_max,
        n,
        endpoints,
    })
}

impl BinGrid {
    pub fn e_min(&self) -> f64 {
        self.e_min
    }
    pub fn e_max(&self) -> f64 {
        self.e_max
    }
    /// Number of sub-intervals.
    pub fn n(&self) -> usize {
        self.n
    }
    /// Number of endpoints (logits per edge), `n + 1`.
    pub fn len(&self) -> usize {
        self.n + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn step(&self) -> f64 {
        (self.e_max - self.e_min) / self.n as f64
    }
    pub fn endpoints(&self) -> &[f64] {
        &self.endpoints
    }
    pub fn spec(&self) -> GridSpec {
        GridSpec {
            e_min: self.e_min,
            e_max: self.e_max,
            n: self.n,
        }
    }
    pub fn contains(&self, y: f64) -> bool {
        y >= self.e_min && y <= self.e_max
    }
}

fn check_logits(z: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param("tau", format!("temperature must be positive, got {tau}")));
    }
    if z.is_empty() {
        return Err(Error::Empty("logit vector"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(z.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// `S(z, τ)_i = exp(z_i/τ) / Σ_j exp(z_j/τ)`, evaluated with a max shift.
pub fn generalized_softmax(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    let max = check_logits(z, tau)?;
    let mut p: Vec<f64> = z.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

/// `ln S(z, τ)`, computed without forming the probabilities.
pub fn log_softmax(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    let max = check_logits(z, tau)?;
    let lse = z.iter().map(|&v| ((v - max) / tau).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|&v| (v - max) / tau - lse).collect())
}

/// Checks that `p` is a probability vector (nonnegative, sums to one).
pub fn check_simplex(p: &[f64], what: &'static str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Empty(what));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NotSimplex(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::NotSimplex(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// Logits of one box edge over a [`BinGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDistribution {
    logits: Vec<f64>,
    grid: BinGrid,
}

impl EdgeDistribution {
    pub fn new(logits: Vec<f64>, grid: BinGrid) -> Result<Self> {
        if logits.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: logits.len(),
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("edge logits"));
        }
        Ok(Self { logits, grid })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
    pub fn grid(&self) -> &BinGrid {
        &self.grid
    }
    pub fn probs(&self, tau: f64) -> Result<Vec<f64>> {
        generalized_softmax(&self.logits, tau)
    }
    /// Expected edge value under the `τ = 1` distribution.
    pub fn decode(&self) -> Result<f64> {
        decode_expectation(&self.probs(1.0)?, &self.grid)
    }
}

#[derive(Serialize, Deserialize)]
struct EdgeDistributionRepr {
    logits: Vec<f64>,
    e_min: f64,
    e_max: f64,
    n: usize,
}

impl Serialize for EdgeDistribution {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EdgeDistributionRepr {
            logits: self.logits.clone(),
            e_min: self.grid.e_min,
            e_max: self.grid.e_max,
            n: self.grid.n,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EdgeDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = EdgeDistributionRepr::deserialize(d)?;
        let grid = make_grid(r.e_min, r.e_max, r.n).map_err(serde::de::Error::custom)?;
        EdgeDistribution::new(r.logits, grid).map_err(serde::de::Error::custom)
    }
}

/// Per-edge distributions of one box: 4 edges (`l, t, r, b`) for
/// horizontal boxes, 5 for rotated deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDistribution {
    pub edges: Vec<EdgeDistribution>,
}

impl BoxDistribution {
    pub fn new(edges: Vec<EdgeDistribution>) -> Result<Self> {
        if edges.len() != 4 && edges.len() != 5 {
            return Err(Error::param(
                "edges",
                format!("a box has 4 or 5 edge distributions, got {}", edges.len()),
            ));
        }
        Ok(Self { edges })
    }

    /// Splits a flat logit vector into edges of equal grid length.
    pub fn from_flat(logits: &[f64], grid: &BinGrid) -> Result<Self> {
        let m = grid.len();
        if !logits.len().is_multiple_of(m) {
            return Err(Error::LengthMismatch {
                expected: m * (logits.len() / m + 1),
                got: logits.len(),
            });
        }
        let edges = logits
            .chunks(m)
            .map(|c| EdgeDistribution::new(c.to_vec(), grid.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(edges)
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }
    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// `y = u1·e_i + u2·e_{i+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoHotTarget {
    pub i: usize,
    pub u1: f64,
    pub u2: f64,
}

impl TwoHotTarget {
    pub fn new(i: usize, u1: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&u1) {
            return Err(Error::param("u1", format!("must lie in [0, 1], got {u1}")));
        }
        Ok(Self { i, u1, u2: 1.0 - u1 })
    }

    /// Dense weight vector of length `len`.
    pub fn weights(&self, len: usize) -> Result<Vec<f64>> {
        self.check(len)?;
        let mut g = vec![0.0; len];
        g[self.i] += self.u1;
        if self.u2 > 0.0 {
            g[self.i + 1] += self.u2;
        }
        Ok(g)
    }

    pub fn check(&self, len: usize) -> Result<()> {
        let upper = if self.u2 > 0.0 { self.i + 1 } else { self.i };
        if upper >= len {
            return Err(Error::param(
                "i",
                format!("two-hot index {} out of range for {len} bins", self.i),
            ));
        }
        if self.u1 < 0.0 || self.u2 < 0.0 || (self.u1 + self.u2 - 1.0).abs() > 1e-12 {
            return Err(Error::param("u1/u2", "weights must be nonnegative and sum to 1"));
        }
        Ok(())
    }

    pub fn value(&self, grid: &BinGrid) -> f64 {
        let e = grid.endpoints();
        let hi = e.get(self.i + 1).copied().unwrap_or(e[self.i]);
        self.u1 * e[self.i] + self.u2 * hi
    }
}

pub fn encode_target(y: f64, grid: &BinGrid) -> Result<TwoHotTarget> {
    if !y.is_finite() || !grid.contains(y) {
        return Err(Error::OutOfRange {
            value: y,
            lo: grid.e_min,
            hi: grid.e_max,
        });
    }
    let step = grid.step();
    let i = (((y - grid.e_min) / step).floor() as usize).min(grid.n);
    if i == grid.n {
        return Ok(TwoHotTarget { i, u1: 1.0, u2: 0.0 });
    }
    let u2 = ((y - grid.endpoints[i]) / step).clamp(0.0, 1.0);
    Ok(TwoHotTarget { i, u1: 1.0 - u2, u2 })
}

/// `Σ p_i e_i`.
pub fn decode_expectation(p: &[f64], grid: &BinGrid) -> Result<f64> {
    if p.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            got: p.len(),
        });
    }
    check_simplex(p, "decode input")?;
    let v: f64 = p.iter().zip(&grid.endpoints).map(|(a, e)| a * e).sum();
    Ok(v.clamp(grid.e_min, grid.e_max))
}

/// Gradient of `Σ_k softmax(z)_k e_k` with respect to `z`, scaled by `upstream`:
/// `∂/∂z_k = p_k (e_k - E[e])`.
pub fn expectation_logit_grad(p: &[f64], grid: &BinGrid, upstream: f64) -> Vec<f64> {
    let mean: f64 = p.iter().zip(&grid.endpoints).map(|(a, e)| a * e).sum();
    p.iter()
        .zip(&grid.endpoints)
        .map(|(pk, ek)| upstream * pk * (ek - mean))
        .collect()
}

/// Shannon entropy in nats; a flat distribution signals an ambiguous edge.
pub fn flatness(p: &[f64]) -> Result<f64> {
    check_simplex(p, "flatness input")?;
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_examples() {
        let g = make_grid(0., 8., 8).unwrap();
        assert_eq!(g.endpoints(), &[0., 1., 2., 3., 4., 5., 6., 7., 8.]);
        let g = make_grid(-5., 5., 10).unwrap();
        assert_eq!(g.endpoints(), &(-5..=5).map(f64::from).collect::<Vec<_>>()[..]);
        assert_eq!(make_grid(0., 1., 1).unwrap().endpoints(), &[0., 1.]);
        assert!(make_grid(0., 1., 0).is_err());
        assert!(make_grid(1., 0., 4).is_err());
        assert!(make_grid(1., 1., 4).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = generalized_softmax(&[0.0; 5], 3.7).unwrap();
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let p = generalized_softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2. / 3.).abs() < 1e-15 && (p[1] - 1. / 3.).abs() < 1e-15);
        let p = generalized_softmax(&[3., 0., 0.], 1000.).unwrap();
        assert!(p.iter().all(|v| (v - 1. / 3.).abs() < 1e-3));
        assert!(generalized_softmax(&[1., 2.], 0.0).is_err());
        assert!(generalized_softmax(&[1., 2.], -1.0).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = generalized_softmax(&[1000., 999., -1000.], 1.0).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_examples() {
        let g = make_grid(0., 8., 8).unwrap();
        let t = encode_target(3.0, &g).unwrap();
        assert_eq!((t.i, t.u1, t.u2), (3, 1.0, 0.0));
        let t = encode_target(2.5, &g).unwrap();
        assert_eq!((t.i, t.u1, t.u2), (2, 0.5, 0.5));
        let t = encode_target(2.3, &g).unwrap();
        assert_eq!(t.i, 2);
        assert!((t.u1 - 0.7).abs() < 1e-12 && (t.u2 - 0.3).abs() < 1e-12);
        let t = encode_target(8.0, &g).unwrap();
        assert_eq!((t.i, t.u1, t.u2), (8, 1.0, 0.0));
        assert!(encode_target(-0.1, &g).is_err());
        assert!(encode_target(8.01, &g).is_err());
    }

    #[test]
    fn decode_examples() {
        let g = make_grid(0., 8., 8).unwrap();
        let mut p = vec![0.0; 9];
        p[5] = 1.0;
        assert_eq!(decode_expectation(&p, &g).unwrap(), 5.0);
        assert!((decode_expectation(&[1. / 9.; 9], &g).unwrap() - 4.0).abs() < 1e-12);
        let mut p = vec![0.0; 9];
        p[2] = 0.7;
        p[3] = 0.3;
        assert!((decode_expectation(&p, &g).unwrap() - 2.3).abs() < 1e-12);
        assert!(decode_expectation(&[0.5; 9], &g).is_err());
        assert!(decode_expectation(&[1.0], &g).is_err());
    }

    #[test]
    fn flatness_examples() {
        assert_eq!(flatness(&[0., 1., 0.]).unwrap(), 0.0);
        assert!((flatness(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((flatness(&[0.5, 0.5, 0., 0.]).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn edge_distribution_json_shape() {
        let g = make_grid(0., 8., 8).unwrap();
        let e = EdgeDistribution::new(vec![0.5; 9], g).unwrap();
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        assert_eq!(v["n"], 8);
        assert_eq!(v["e_max"], 8.0);
        let back: EdgeDistribution = serde_json::from_value(v).unwrap();
        assert_eq!(back, e);
        let bad = serde_json::json!({"logits": [0.0, 1.0], "e_min": 0.0, "e_max": 8.0, "n": 8});
        assert!(serde_json::from_value::<EdgeDistribution>(bad).is_err());
    }

    #[test]
    fn box_distribution_edge_count() {
        let g = make_grid(0., 1., 1).unwrap();
        assert!(BoxDistribution::from_flat(&[0.0; 8], &g).is_ok());
        assert!(BoxDistribution::from_flat(&[0.0; 10], &g).is_ok());
        assert!(BoxDistribution::from_flat(&[0.0; 6], &g).is_err());
        assert!(BoxDistribution::from_flat(&[0.0; 7], &g).is_err());
    }

    fn logits(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-30.0..30.0f64, len)
    }

    proptest! {
        #[test]
        fn softmax_on_simplex(z in logits(9), tau in 0.05..50.0f64) {
            let p = generalized_softmax(&z, tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0 || tau < 1.0));
        }

        #[test]
        fn softmax_shift_invariant(z in logits(9), c in -100.0..100.0f64, tau in 0.5..20.0f64) {
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let (a, b) = (generalized_softmax(&z, tau).unwrap(), generalized_softmax(&shifted, tau).unwrap());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn temperature_sharpens(z in logits(6), t1 in 0.1..10.0f64, dt in 0.01..10.0f64) {
            let k = z.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let cold = generalized_softmax(&z, t1).unwrap()[k];
            let warm = generalized_softmax(&z, t1 + dt).unwrap()[k];
            prop_assert!(cold >= warm - 1e-15);
        }

        #[test]
        fn two_hot_round_trip(y in 0.0..=8.0f64) {
            let g = make_grid(0., 8., 8).unwrap();
            let t = encode_target(y, &g).unwrap();
            let p = t.weights(g.len()).unwrap();
            prop_assert!((decode_expectation(&p, &g).unwrap() - y).abs() < 1e-12);
            prop_assert!((t.value(&g) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn hot_limit_is_uniform() {
        let z = [4., -1., 0.5, 2.];
        let dev = |tau: f64| {
            generalized_softmax(&z, tau)
                .unwrap()
                .iter()
                .map(|p| (p - 0.25).abs())
                .fold(0.0, f64::max)
        };
        assert!(dev(1e2) < dev(1e1) && dev(1e4) < 1e-3);
        let cold = generalized_softmax(&z, 1e-3).unwrap();
        assert!(cold[0] > 1.0 - 1e-12);
    }
}
