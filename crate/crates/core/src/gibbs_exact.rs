//! Exact Gibbs measures by full enumeration, quenched free energies and the
//! two-replica functionals that enter their derivatives.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RostError};
use crate::rng::derive_seed;
use crate::spin_models::{build_disorder, DisorderRealization, MixedCouplings, ModelDescriptor};
use crate::stats::{log_sum_exp, Estimate, Z_THRESHOLD};

/// Largest system size that is enumerated.
pub const MAX_ENUMERATION_SITES: usize = 24;
/// Incremental energies are re-synchronized against a full evaluation this often.
pub const RESYNC_INTERVAL: usize = 256;

#[inline]
pub fn gray(k: u64) -> u64 {
    k ^ (k >> 1)
}

#[inline]
pub fn gray_inverse(mut g: u64) -> u64 {
    let mut shift = 1;
    while shift < 64 {
        g ^= g >> shift;
        shift <<= 1;
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct GibbsTable {
    pub n: usize,
    /// `beta * H(sigma)` for the configuration `gray(k)` at position `k`.
    pub log_weights: Vec<f64>,
    pub log_partition: f64,
    pub beta_scale: f64,
    /// Largest relative gap seen between incremental and full energies.
    pub max_resync_drift: f64,
}

/// Pairwise part of the Hamiltonian (p = 2 and EA edges) as a symmetric
/// zero-diagonal matrix plus the constant diagonal contribution.
struct QuadraticPart {
    n: usize,
    w: Vec<f64>,
    constant: f64,
    linear: Vec<f64>,
}

impl QuadraticPart {
    fn from_disorder(d: &DisorderRealization) -> Self {
        let n = d.n;
        let mut w = vec![0.0; n * n];
        let mut constant = 0.0;
        let mut linear = vec![0.0; n];
        for t in &d.tensors {
            match t.p {
                1 => {
                    for (l, g) in linear.iter_mut().zip(&t.g) {
                        *l += t.beta * t.scale * g;
                    }
                }
                2 => {
                    let c = t.beta * t.scale;
                    for i in 0..n {
                        constant += c * t.g[i * n + i];
                        for j in 0..n {
                            if i != j {
                                w[i * n + j] += c * t.g[i * n + j];
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        if let Some(e) = &d.edges {
            for (&(i, j), g) in e.edges.iter().zip(&e.g) {
                w[i * n + j] += e.amplitude * g;
            }
        }
        // symmetrize: s^T W s only sees W + W^T
        for i in 0..n {
            for j in (i + 1)..n {
                let s = w[i * n + j] + w[j * n + i];
                w[i * n + j] = s;
                w[j * n + i] = s;
            }
        }
        QuadraticPart { n, w, constant, linear }
    }

    /// Energy of the p <= 2 part: constant + h.s + sum_{i<j} W_ij s_i s_j.
    fn energy(&self, s: &[f64]) -> f64 {
        let n = self.n;
        let mut e = self.constant;
        for i in 0..n {
            e += self.linear[i] * s[i];
            for j in (i + 1)..n {
                e += self.w[i * n + j] * s[i] * s[j];
            }
        }
        e
    }
}

fn higher_order_energy(d: &DisorderRealization, s: &[f64]) -> f64 {
    let higher = DisorderRealization {
        kind: d.kind,
        n: d.n,
        beta: d.beta.clone(),
        tensors: d.tensors.iter().filter(|t| t.p > 2).cloned().collect(),
        edges: None,
    };
    if higher.tensors.is_empty() {
        0.0
    } else {
        higher.hamiltonian_f64(s)
    }
}

/// Exact Gibbs table over all `2^N` configurations.
pub fn enumerate_gibbs(d: &DisorderRealization, beta: f64) -> Result<GibbsTable> {
    let n = d.n;
    if n > MAX_ENUMERATION_SITES {
        return Err(RostError::Guard(format!("N = {n} exceeds the enumeration cap {MAX_ENUMERATION_SITES}")));
    }
    if !beta.is_finite() || beta < 0.0 {
        return invalid(format!("beta = {beta} must be finite and nonnegative"));
    }
    let total = 1usize << n;
    let even = d.is_even();
    // Even models are enumerated on the half with the top spin up and mirrored,
    // which makes G(s) = G(-s) hold bit for bit.
    let steps = if even && n > 1 { total / 2 } else { total };
    let quad = QuadraticPart::from_disorder(d);
    let has_higher = d.tensors.iter().any(|t| t.p > 2);

    let mut s = vec![1.0f64; n];
    let mut field: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| quad.w[i * n + j] * s[j]).sum())
        .collect();
    let mut e2 = quad.energy(&s);
    let mut energies = vec![0.0f64; total];
    let mut drift: f64 = 0.0;
    for k in 0..steps {
        if k > 0 {
            let j = (k as u64).trailing_zeros() as usize;
            let old = s[j];
            e2 += -2.0 * old * (quad.linear[j] + field[j]);
            s[j] = -old;
            for (i, f) in field.iter_mut().enumerate() {
                if i != j {
                    *f -= 2.0 * quad.w[i * n + j] * old;
                }
            }
            if k % RESYNC_INTERVAL == 0 {
                let full = quad.energy(&s);
                drift = drift.max((e2 - full).abs() / full.abs().max(1.0));
                e2 = full;
            }
        }
        let h = e2 + if has_higher { higher_order_energy(d, &s) } else { 0.0 };
        if !h.is_finite() {
            return Err(RostError::NonFinite(format!("energy at configuration {}", gray(k as u64))));
        }
        energies[k] = beta * h;
    }
    if steps < total {
        let mask = (1u64 << n) - 1;
        for k in steps..total {
            let partner = gray_inverse(gray(k as u64) ^ mask) as usize;
            energies[k] = energies[partner];
        }
    }
    let log_partition = if energies.iter().all(|e| *e == 0.0) {
        n as f64 * std::f64::consts::LN_2
    } else {
        log_sum_exp(&energies)
    };
    Ok(GibbsTable { n, log_weights: energies, log_partition, beta_scale: beta, max_resync_drift: drift })
}

impl GibbsTable {
    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    /// Configuration bits at table position `k`.
    pub fn config(&self, k: usize) -> u64 {
        gray(k as u64)
    }

    /// Gibbs probabilities in table order.
    pub fn probabilities(&self) -> Vec<f64> {
        self.log_weights.iter().map(|lw| (lw - self.log_partition).exp()).collect()
    }

    /// Gibbs probabilities indexed by configuration bits.
    pub fn probabilities_by_config(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (k, lw) in self.log_weights.iter().enumerate() {
            out[gray(k as u64) as usize] = (lw - self.log_partition).exp();
        }
        out
    }

    pub fn free_energy(&self) -> f64 {
        if self.log_weights.iter().all(|e| *e == 0.0) {
            std::f64::consts::LN_2
        } else {
            self.log_partition / self.n as f64
        }
    }

    /// Law of the Hamming distance between two independent replicas,
    /// `P(d) = sum_{|t| = d} sum_s G(s) G(s xor t)`, by a Walsh-Hadamard
    /// autocorrelation in `O(N 2^N)`.
    pub fn hamming_distribution(&self) -> Vec<f64> {
        let mut f = self.probabilities_by_config();
        walsh_hadamard(&mut f);
        for x in f.iter_mut() {
            *x *= *x;
        }
        walsh_hadamard(&mut f);
        let scale = 1.0 / f.len() as f64;
        let mut dist = vec![0.0; self.n + 1];
        for (t, a) in f.iter().enumerate() {
            dist[(t as u64).count_ones() as usize] += a * scale;
        }
        dist
    }

    /// `E_{G x G} R(s, s')^p`.
    pub fn two_replica_moment(&self, p: u32) -> f64 {
        let n = self.n as f64;
        self.hamming_distribution()
            .iter()
            .enumerate()
            .map(|(d, w)| w * ((n - 2.0 * d as f64) / n).powi(p as i32))
            .sum()
    }
}

fn walsh_hadamard(a: &mut [f64]) {
    let mut h = 1;
    while h < a.len() {
        for chunk in a.chunks_exact_mut(2 * h) {
            let (lo, hi) = chunk.split_at_mut(h);
            for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*x, *y);
                *x = u + v;
                *y = u - v;
            }
        }
        h *= 2;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_disorder: usize,
}

impl From<Estimate> for FreeEnergyEstimate {
    fn from(e: Estimate) -> Self {
        FreeEnergyEstimate { mean: e.mean, stderr: e.stderr, n_disorder: e.n }
    }
}

/// Disorder seed of draw `i` in an ensemble rooted at `seed`.
pub fn disorder_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, "disorder", i as u64)
}

fn check_ensemble(desc: &ModelDescriptor, n_disorder: usize) -> Result<()> {
    desc.validate()?;
    if desc.n > MAX_ENUMERATION_SITES {
        return Err(RostError::Guard(format!("N = {} exceeds the enumeration cap", desc.n)));
    }
    if n_disorder < 2 {
        return invalid("need at least two disorder draws");
    }
    Ok(())
}

/// Per-draw values of `f(draw)` over `n_disorder` independent disorder draws.
/// Draws are evaluated in parallel and returned in index order.
pub fn per_draw<T, F>(desc: &ModelDescriptor, n_disorder: usize, seed: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &DisorderRealization) -> Result<T> + Sync,
{
    (0..n_disorder)
        .into_par_iter()
        .map(|i| {
            let d = build_disorder(&desc.with_seed(disorder_seed(seed, i)))?;
            f(i, &d)
        })
        .collect()
}

/// Quenched `(1/N) E log Z_N(beta)` over a seeded disorder ensemble.
pub fn free_energy_mc(desc: &ModelDescriptor, beta: f64, n_disorder: usize, seed: u64) -> Result<FreeEnergyEstimate> {
    check_ensemble(desc, n_disorder)?;
    if beta == 0.0 || desc.beta.is_zero() {
        return Ok(FreeEnergyEstimate { mean: std::f64::consts::LN_2, stderr: 0.0, n_disorder });
    }
    let values = per_draw(desc, n_disorder, seed, |_, d| Ok(enumerate_gibbs(d, beta)?.free_energy()))?;
    Ok(Estimate::from_samples(&values).into())
}

/// `D_p f_N = beta_p (1 - E G^{x2} R^p)` with the couplings taken as given
/// (no extra temperature factor).
pub fn free_energy_p_derivative(desc: &ModelDescriptor, p: usize, n_disorder: usize, seed: u64) -> Result<Estimate> {
    check_ensemble(desc, n_disorder)?;
    let beta_p = desc.beta.get(p);
    if beta_p == 0.0 {
        return Ok(Estimate { mean: 0.0, stderr: 0.0, n: n_disorder });
    }
    let values = per_draw(desc, n_disorder, seed, |_, d| {
        let t = enumerate_gibbs(d, 1.0)?;
        Ok(beta_p * (1.0 - t.two_replica_moment(p as u32)))
    })?;
    Ok(Estimate::from_samples(&values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// `f_N(beta) - f_N(beta')` on shared disorder.
    pub difference: Estimate,
    /// `(1/2) sum_p |beta_p^2 - beta'_p^2|`.
    pub bound: f64,
    pub holds: bool,
}

/// Checks `|f_N(beta) - f_N(beta')| <= (1/2) sum_p |beta_p^2 - beta'_p^2|` up
/// to `4` standard errors, using common disorder for both sides.
pub fn lipschitz_free_energy_check(
    desc: &ModelDescriptor,
    other: &MixedCouplings,
    n_disorder: usize,
    seed: u64,
) -> Result<LipschitzReport> {
    check_ensemble(desc, n_disorder)?;
    let other_desc = desc.with_beta(other.clone());
    other_desc.validate()?;
    let mut ps: Vec<usize> = desc.beta.terms().iter().chain(other.terms()).map(|(p, _)| *p).collect();
    ps.sort_unstable();
    ps.dedup();
    let bound = 0.5 * ps.iter().map(|&p| (desc.beta.get(p).powi(2) - other.get(p).powi(2)).abs()).sum::<f64>();
    let diffs = per_draw(desc, n_disorder, seed, |i, d| {
        let d2 = build_disorder(&other_desc.with_seed(disorder_seed(seed, i)))?;
        let a = enumerate_gibbs(d, 1.0)?.free_energy();
        let b = enumerate_gibbs(&d2, 1.0)?.free_energy();
        Ok(a - b)
    })?;
    let difference = Estimate::from_samples(&diffs);
    let holds = difference.mean.abs() <= bound + Z_THRESHOLD * difference.stderr;
    Ok(LipschitzReport { difference, bound, holds })
}

/// One CSV row `model,N,beta,quantity,mean,stderr,n_disorder,seed`.
pub fn csv_row(desc: &ModelDescriptor, beta: f64, quantity: &str, est: &FreeEnergyEstimate, seed: u64) -> String {
    let kind = serde_json::to_value(desc.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    format!("{},{},{},{},{},{},{},{}\n", kind, desc.n, beta, quantity, est.mean, est.stderr, est.n_disorder, seed)
}

pub const CSV_HEADER: &str = "model,N,beta,quantity,mean,stderr,n_disorder,seed\n";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin_models::{Lattice, MixedCouplings, SpinConfiguration};

    fn sk(n: usize, b: f64, seed: u64) -> DisorderRealization {
        build_disorder(&ModelDescriptor::sk(n, b, seed).unwrap()).unwrap()
    }

    #[test]
    fn gray_inverse_round_trips() {
        for k in 0..1024u64 {
            assert_eq!(gray_inverse(gray(k)), k);
        }
    }

    #[test]
    fn infinite_temperature_is_uniform() {
        let t = enumerate_gibbs(&sk(6, 1.0, 1), 0.0).unwrap();
        assert_eq!(t.log_partition, 6.0 * std::f64::consts::LN_2);
        for p in t.probabilities() {
            assert!((p - 1.0 / 64.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_site_probabilities_match_direct_sum() {
        let d = sk(2, 1.0, 3);
        let t = enumerate_gibbs(&d, 1.0).unwrap();
        let e: Vec<f64> = (0..4).map(|b| d.hamiltonian_bits(b)).collect();
        let z: f64 = e.iter().map(|x| x.exp()).sum();
        let probs = t.probabilities_by_config();
        for b in 0..4 {
            assert!((probs[b] - e[b].exp() / z).abs() < 1e-14);
        }
    }

    #[test]
    fn low_temperature_concentrates_on_ground_state() {
        let beta = MixedCouplings::new([(1, 0.3), (2, 1.0)]).unwrap();
        let d = build_disorder(&ModelDescriptor::mixed(6, beta, 17)).unwrap();
        let t = enumerate_gibbs(&d, 5000.0).unwrap();
        let probs = t.probabilities();
        let max = probs.iter().cloned().fold(0.0, f64::max);
        assert!(max > 1.0 - 1e-9);
    }

    #[test]
    fn incremental_energies_match_full_evaluation() {
        let beta = MixedCouplings::new([(1, 0.4), (2, 0.9), (4, 0.3)]).unwrap();
        let d = build_disorder(&ModelDescriptor::mixed(11, beta, 8)).unwrap();
        let t = enumerate_gibbs(&d, 1.0).unwrap();
        assert!(t.max_resync_drift < 1e-9);
        for k in (0..t.len()).step_by(97) {
            let full = d.hamiltonian_bits(t.config(k));
            assert!((t.log_weights[k] - full).abs() <= 1e-9 * full.abs().max(1.0));
        }
    }

    #[test]
    fn edwards_anderson_enumeration_matches_direct() {
        let lat = Lattice { rows: 3, cols: 3, periodic: false };
        let d = build_disorder(&ModelDescriptor::edwards_anderson(lat, 0.8, 4).unwrap()).unwrap();
        let t = enumerate_gibbs(&d, 1.0).unwrap();
        for k in 0..t.len() {
            let full = d.hamiltonian_bits(t.config(k));
            assert!((t.log_weights[k] - full).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_and_flip_symmetry() {
        let t = enumerate_gibbs(&sk(9, 1.3, 2), 1.0).unwrap();
        let p = t.probabilities_by_config();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mask = (1usize << 9) - 1;
        for c in 0..p.len() {
            assert_eq!(p[c], p[c ^ mask]);
        }
    }

    #[test]
    fn log_partition_is_convex_in_beta() {
        let d = sk(8, 1.0, 5);
        let grid: Vec<f64> = (0..12).map(|i| 0.25 * i as f64).collect();
        let lz: Vec<f64> = grid.iter().map(|b| enumerate_gibbs(&d, *b).unwrap().log_partition).collect();
        for w in lz.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-12);
        }
    }

    #[test]
    fn hamming_distribution_matches_double_loop() {
        let beta = MixedCouplings::new([(1, 0.5), (2, 0.8)]).unwrap();
        let d = build_disorder(&ModelDescriptor::mixed(7, beta, 6)).unwrap();
        let t = enumerate_gibbs(&d, 1.0).unwrap();
        let p = t.probabilities_by_config();
        for pow in 1..=4u32 {
            let mut brute = 0.0;
            for a in 0..p.len() {
                for b in 0..p.len() {
                    let r = crate::spin_models::overlap(
                        &SpinConfiguration::from_bits(a as u64, 7),
                        &SpinConfiguration::from_bits(b as u64, 7),
                    )
                    .unwrap();
                    brute += p[a] * p[b] * r.powi(pow as i32);
                }
            }
            assert!((t.two_replica_moment(pow) - brute).abs() < 1e-13, "p = {pow}");
        }
    }

    #[test]
    fn enumeration_guard() {
        let d = DisorderRealization {
            kind: crate::spin_models::ModelKind::MixedPSpin,
            n: 25,
            beta: MixedCouplings::zero(),
            tensors: vec![],
            edges: None,
        };
        assert!(matches!(enumerate_gibbs(&d, 1.0), Err(RostError::Guard(_))));
        assert!(enumerate_gibbs(&sk(3, 1.0, 1), -1.0).is_err());
    }

    #[test]
    fn free_energy_at_zero_beta_is_log_two() {
        let desc = ModelDescriptor::sk(6, 1.0, 1).unwrap();
        let f = free_energy_mc(&desc, 0.0, 10, 3).unwrap();
        assert_eq!(f.mean, std::f64::consts::LN_2);
        assert_eq!(f.stderr, 0.0);
    }

    #[test]
    fn free_energy_respects_annealed_bound() {
        let desc = ModelDescriptor::sk(8, 1.2, 1).unwrap();
        let f = free_energy_mc(&desc, 1.0, 40, 3).unwrap();
        let annealed = std::f64::consts::LN_2 + 0.5 * 1.2f64.powi(2);
        assert!(f.mean <= annealed + 4.0 * f.stderr);
    }

    #[test]
    fn p_derivative_edge_cases() {
        let desc = ModelDescriptor::mixed(6, MixedCouplings::new([(2, 0.7)]).unwrap(), 1);
        let zero = free_energy_p_derivative(&desc, 4, 5, 1).unwrap();
        assert_eq!(zero.mean, 0.0);
        let d = free_energy_p_derivative(&desc, 2, 20, 1).unwrap();
        assert!(d.mean >= 0.0);
    }

    #[test]
    fn uniform_measure_second_moment_is_one_over_n() {
        // Binomial oracle: under the uniform measure R is a mean of N iid signs.
        let t = enumerate_gibbs(&sk(8, 1.0, 1), 0.0).unwrap();
        assert!((t.two_replica_moment(2) - 1.0 / 8.0).abs() < 1e-14);
        assert!((t.two_replica_moment(4) - (3.0 * 8.0 * 8.0 - 2.0 * 8.0) / 8f64.powi(4)).abs() < 1e-14);
    }
}
