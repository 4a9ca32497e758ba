//! Truncated Poisson-Dirichlet samplers, finite Ruelle cascades and two
//! stochastically stable measures that are not cascades.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RostError};
use crate::rng::{std_normal, stream};
use crate::rost_core::{normalize_log_weights, AtomicMeasure, Coordinates};
use crate::stats::{Estimate, MomentEntry, MomentReport};

pub const MAX_CASCADE_ATOMS: usize = 100_000;
pub const DEFAULT_TRUNCATION: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcSpec {
    pub k: usize,
    pub x: Vec<f64>,
    /// `q_0 <= q_1 <= ... <= q_k`.
    pub q: Vec<f64>,
    #[serde(rename = "M")]
    pub m: usize,
}

impl RpcSpec {
    pub fn new(x: Vec<f64>, q: Vec<f64>, m: usize) -> Result<Self> {
        let s = RpcSpec { k: x.len(), x, q, m };
        s.validate()?;
        Ok(s)
    }

    /// One level: `q_0 = 0`, `q_1 = q`.
    pub fn one_level(x: f64, q: f64, m: usize) -> Result<Self> {
        Self::new(vec![x], vec![0.0, q], m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.x.len() != self.k {
            return invalid("need k >= 1 exponents");
        }
        if self.q.len() != self.k + 1 {
            return Err(RostError::LengthMismatch { expected: self.k + 1, got: self.q.len() });
        }
        if self.x.iter().any(|x| !(*x > 0.0 && *x < 1.0)) || self.x.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("exponents must be strictly increasing in (0, 1)");
        }
        if self.q.iter().any(|q| !(0.0..=1.0).contains(q)) || self.q.windows(2).any(|w| w[0] > w[1]) {
            return invalid("overlaps must be nondecreasing in [0, 1]");
        }
        if self.m < 2 {
            return invalid("truncation M must be at least 2");
        }
        Ok(())
    }

    pub fn atoms(&self) -> f64 {
        (self.m as f64).powi(self.k as i32)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: RpcSpec = serde_json::from_str(s).map_err(|e| RostError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Law of the two-replica overlap of the untruncated cascade:
    /// `P(q12 = q_l) = x_{l+1} - x_l` with `x_0 = 0`, `x_{k+1} = 1`.
    pub fn overlap_law(&self) -> Vec<(f64, f64)> {
        (0..=self.k)
            .map(|l| {
                let lo = if l == 0 { 0.0 } else { self.x[l - 1] };
                let hi = if l == self.k { 1.0 } else { self.x[l] };
                (self.q[l], hi - lo)
            })
            .collect()
    }

    /// `E q12^p` under [`RpcSpec::overlap_law`].
    pub fn overlap_moment(&self, p: u32) -> f64 {
        self.overlap_law().iter().map(|(q, m)| m * q.powi(p as i32)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdWeights {
    pub weights: Vec<f64>,
    pub x: f64,
}

impl PdWeights {
    pub fn moment(&self, m: i32) -> f64 {
        self.weights.iter().map(|w| w.powi(m)).sum()
    }
}

fn check_exponent(x: f64) -> Result<()> {
    if !(x > 0.0 && x < 1.0) {
        return invalid(format!("exponent {x} outside (0, 1)"));
    }
    Ok(())
}

/// Logs of the `m` largest points of a Poisson process with intensity
/// `x t^{-x-1} dt`, in decreasing order: `-ln(Gamma_i) / x`.
pub fn ppp_log_points<R: Rng + ?Sized>(x: f64, m: usize, rng: &mut R) -> Vec<f64> {
    let mut gamma = 0.0;
    (0..m)
        .map(|_| {
            let u: f64 = 1.0 - rng.random::<f64>();
            gamma -= u.ln();
            -gamma.ln() / x
        })
        .collect()
}

pub fn sample_poisson_dirichlet<R: Rng + ?Sized>(x: f64, m: usize, rng: &mut R) -> Result<PdWeights> {
    check_exponent(x)?;
    if m < 2 {
        return invalid("truncation M must be at least 2");
    }
    Ok(PdWeights { weights: normalize_log_weights(&ppp_log_points(x, m, rng)), x })
}

/// Compares normalized `(p_i e^{lambda g_i})` with a fresh `PD(x)` through
/// the power sums `sum w^m`, `m = 2..6`.
pub fn pd_invariance_check(x: f64, lambda: f64, m: usize, reps: usize, seed: u64) -> Result<MomentReport> {
    check_exponent(x)?;
    if reps < 2 || m < 2 {
        return invalid("need reps >= 2 and M >= 2");
    }
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, "pd-invariance", r as u64);
            let lp = ppp_log_points(x, m, &mut rng);
            let tilted: Vec<f64> = lp.iter().map(|l| l + lambda * std_normal(&mut rng)).collect();
            let mapped = normalize_log_weights(&tilted);
            let mut fresh_rng = stream(seed, "pd-fresh", r as u64);
            let fresh = normalize_log_weights(&ppp_log_points(x, m, &mut fresh_rng));
            let pw = |w: &[f64], k: i32| w.iter().map(|v| v.powi(k)).sum::<f64>();
            ((2..=6).map(|k| pw(&mapped, k)).collect(), (2..=6).map(|k| pw(&fresh, k)).collect())
        })
        .collect();
    let entries = (0..5)
        .map(|j| {
            let mapped: Vec<f64> = rows.iter().map(|r| r.0[j]).collect();
            let base: Vec<f64> = rows.iter().map(|r| r.1[j]).collect();
            let diff: Vec<f64> = mapped.iter().zip(&base).map(|(a, b)| a - b).collect();
            let mut e = MomentEntry::new(format!("S{}", j + 2), Estimate::from_samples(&diff), 0.0);
            e.baseline = Some(crate::stats::mean(&base));
            e.mapped = Some(crate::stats::mean(&mapped));
            e
        })
        .collect();
    Ok(MomentReport { entries, seed, samples: reps })
}

/// A `k`-level cascade truncated at `M` children per node. Leaf weights are
/// products of nested Poisson points normalized over all leaves; two leaves
/// whose deepest common ancestor sits at level `l` have overlap `q_l`.
pub fn build_rpc<R: Rng + ?Sized>(spec: &RpcSpec, rng: &mut R) -> Result<AtomicMeasure> {
    spec.validate()?;
    if spec.atoms() > MAX_CASCADE_ATOMS as f64 {
        return Err(RostError::Guard(format!("M^k = {} exceeds {MAX_CASCADE_ATOMS} atoms", spec.atoms())));
    }
    // (log weight, path of basis indices)
    let mut nodes: Vec<(f64, Vec<u32>)> = vec![(0.0, Vec::new())];
    let mut next_index: u32 = 1;
    for l in 0..spec.k {
        let mut children = Vec::with_capacity(nodes.len() * spec.m);
        for (lw, path) in &nodes {
            for p in ppp_log_points(spec.x[l], spec.m, rng) {
                let mut child_path = path.clone();
                child_path.push(next_index);
                next_index += 1;
                children.push((lw + p, child_path));
            }
        }
        nodes = children;
    }
    let incr: Vec<f64> = (1..=spec.k).map(|l| (spec.q[l] - spec.q[l - 1]).max(0.0)).collect();
    let mut var = vec![0.0; next_index as usize];
    var[0] = spec.q[0];
    let rows: Vec<Vec<u32>> = nodes
        .iter()
        .map(|(_, path)| {
            let mut row = Vec::with_capacity(spec.k + 1);
            if spec.q[0] > 0.0 {
                row.push(0);
            }
            for (idx, s) in path.iter().zip(&incr) {
                var[*idx as usize] = *s;
                if *s > 0.0 {
                    row.push(*idx);
                }
            }
            row
        })
        .collect();
    let lw: Vec<f64> = nodes.iter().map(|n| n.0).collect();
    let k = rows.len();
    AtomicMeasure::from_coordinates(
        format!("rpc-k{}", spec.k),
        normalize_log_weights(&lw),
        Coordinates::Sparse { var, rows },
        Some(vec![spec.q[spec.k]; k]),
    )
}

/// Solves `(1 - x1) q1 = (1 - x2) q2`, `q1 + q2 = 1`.
pub fn two_sphere_radii(x1: f64, x2: f64) -> Result<(f64, f64)> {
    check_exponent(x1)?;
    check_exponent(x2)?;
    if x1 == x2 {
        return invalid("the two exponents must differ");
    }
    let q1 = (1.0 - x2) / ((1.0 - x1) + (1.0 - x2));
    Ok((q1, 1.0 - q1))
}

/// Two families of mutually orthogonal atoms on spheres of squared radii
/// `q1 != q2`, weighted by two independent Poisson processes of exponents
/// `x1`, `x2` normalized jointly.
pub fn build_two_sphere_counterexample<R: Rng + ?Sized>(x1: f64, x2: f64, m: usize, rng: &mut R) -> Result<AtomicMeasure> {
    let (q1, q2) = two_sphere_radii(x1, x2)?;
    if m < 2 || 2 * m > MAX_CASCADE_ATOMS {
        return invalid("truncation M out of range");
    }
    let mut lw = ppp_log_points(x1, m, rng);
    lw.extend(ppp_log_points(x2, m, rng));
    let norms: Vec<f64> = (0..2 * m).map(|i| if i < m { q1 } else { q2 }).collect();
    let rows = (0..2 * m).map(|i| vec![i as u32]).collect();
    AtomicMeasure::from_coordinates(
        "two-sphere",
        normalize_log_weights(&lw),
        Coordinates::Sparse { var: norms.clone(), rows },
        Some(norms),
    )
}

/// Product of two independent `PD` vectors on atoms `(u_i + v_j)/sqrt 2`;
/// atom `(i, j)` sits at index `i * M + j`.
pub fn build_uncoupled_rem<R: Rng + ?Sized>(x1: f64, x2: f64, m: usize, rng: &mut R) -> Result<AtomicMeasure> {
    check_exponent(x1)?;
    check_exponent(x2)?;
    if m < 2 || m * m > MAX_CASCADE_ATOMS {
        return Err(RostError::Guard(format!("M^2 = {} exceeds {MAX_CASCADE_ATOMS} atoms", m * m)));
    }
    let p = sample_poisson_dirichlet(x1, m, rng)?.weights;
    let pp = sample_poisson_dirichlet(x2, m, rng)?.weights;
    let mut weights = Vec::with_capacity(m * m);
    let mut rows = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            weights.push(p[i] * pp[j]);
            rows.push(vec![i as u32, (m + j) as u32]);
        }
    }
    let s: f64 = weights.iter().sum();
    let weights = weights.into_iter().map(|w| w / s).collect();
    AtomicMeasure::from_coordinates(
        "uncoupled-rem",
        weights,
        Coordinates::Sparse { var: vec![0.5; 2 * m], rows },
        Some(vec![1.0; m * m]),
    )
}

/// Overlaps `(q(11,22), q(11,12), q(22,12))` of the witness triple in an
/// uncoupled-REM measure built with truncation `m`.
pub fn rem_witness_overlaps(rem: &AtomicMeasure, m: usize) -> (f64, f64, f64) {
    let (a, b, c) = (0, m + 1, 1);
    (rem.inner(a, b), rem.inner(a, c), rem.inner(b, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use crate::rost_core::{support_radii, triple_slack};
    use rand::SeedableRng;

    #[test]
    fn pd_weights_are_sorted_and_normalized() {
        let mut rng = StreamRng::seed_from_u64(1);
        let w = sample_poisson_dirichlet(0.4, 500, &mut rng).unwrap();
        assert!(w.weights.windows(2).all(|p| p[0] >= p[1]));
        assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(sample_poisson_dirichlet(1.0, 10, &mut rng).is_err());
        assert!(sample_poisson_dirichlet(0.5, 1, &mut rng).is_err());
    }

    #[test]
    fn pd_second_moment_matches_one_minus_x() {
        // Independent oracle: E sum w^2 = 1 - x for PD(x).
        let reps = 4000;
        let xs: Vec<f64> = (0..reps)
            .map(|r| {
                let mut rng = stream(11, "oracle", r);
                sample_poisson_dirichlet(0.5, 2000, &mut rng).unwrap().moment(2)
            })
            .collect();
        let e = Estimate::from_samples(&xs);
        assert!(e.z_against(0.5).abs() < 4.0, "{e:?}");
    }

    #[test]
    fn largest_weight_shrinks_with_x() {
        let medians: Vec<f64> = [0.3, 0.5, 0.7, 0.9]
            .iter()
            .map(|&x| {
                let mut v: Vec<f64> = (0..801)
                    .map(|r| {
                        let mut rng = stream(5, "median", r);
                        sample_poisson_dirichlet(x, 500, &mut rng).unwrap().weights[0]
                    })
                    .collect();
                v.sort_by(f64::total_cmp);
                v[400]
            })
            .collect();
        assert!(medians.windows(2).all(|w| w[0] > w[1]), "{medians:?}");
    }

    #[test]
    fn pd_invariance_at_zero_lambda_is_exact() {
        let r = pd_invariance_check(0.5, 0.0, 200, 50, 3).unwrap();
        for e in &r.entries {
            assert!(e.z.abs() < 4.0);
        }
    }

    #[test]
    fn rpc_spec_validation_and_json() {
        assert!(RpcSpec::new(vec![0.5, 0.4], vec![0.0, 0.3, 0.6], 10).is_err());
        assert!(RpcSpec::new(vec![0.3, 0.6], vec![0.0, 0.7, 0.6], 10).is_err());
        let s = RpcSpec::new(vec![0.3, 0.6], vec![0.1, 0.4, 0.9], 10).unwrap();
        assert_eq!(s.to_json(), r#"{"k":2,"x":[0.3,0.6],"q":[0.1,0.4,0.9],"M":10}"#);
        assert_eq!(RpcSpec::from_json(&s.to_json()).unwrap(), s);
        let big = RpcSpec::new(vec![0.5, 0.7], vec![0.0, 0.5, 1.0], 1000).unwrap();
        let mut rng = StreamRng::seed_from_u64(0);
        assert!(matches!(build_rpc(&big, &mut rng), Err(RostError::Guard(_))));
    }

    #[test]
    fn rpc_gram_follows_tree_depth() {
        let s = RpcSpec::new(vec![0.3, 0.6], vec![0.1, 0.4, 0.9], 3).unwrap();
        let mut rng = StreamRng::seed_from_u64(4);
        let m = build_rpc(&s, &mut rng).unwrap();
        assert_eq!(m.len(), 9);
        for a in 0..9 {
            for b in 0..9 {
                let want = if a == b {
                    0.9
                } else if a / 3 == b / 3 {
                    0.4
                } else {
                    0.1
                };
                assert!((m.inner(a, b) - want).abs() < 1e-14);
            }
        }
        for a in 0..9 {
            for b in 0..9 {
                for c in 0..9 {
                    assert!(triple_slack(m.inner(a, b), m.inner(a, c), m.inner(b, c)) > -1e-12);
                }
            }
        }
    }

    #[test]
    fn two_sphere_radii_solve_the_constraint() {
        let (q1, q2) = two_sphere_radii(0.25, 0.5).unwrap();
        assert!((q1 - 0.4).abs() < 1e-15 && (q2 - 0.6).abs() < 1e-15);
        assert!(((1.0 - 0.25) * q1 - (1.0 - 0.5) * q2).abs() < 1e-14);
        assert!(two_sphere_radii(0.5, 0.5).is_err());
        let mut rng = StreamRng::seed_from_u64(2);
        let m = build_two_sphere_counterexample(0.25, 0.5, 50, &mut rng).unwrap();
        let (lo, hi) = support_radii(&m).unwrap();
        assert!((lo - 0.4f64.sqrt()).abs() < 1e-15 && (hi - 0.6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rem_witness() {
        let mut rng = StreamRng::seed_from_u64(2);
        let m = build_uncoupled_rem(0.3, 0.6, 20, &mut rng).unwrap();
        assert_eq!(rem_witness_overlaps(&m, 20), (0.0, 0.5, 0.5));
        assert!(build_uncoupled_rem(0.3, 0.6, 400, &mut rng).is_err());
    }
}
