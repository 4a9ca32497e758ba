//! Gaussian spin-glass Hamiltonians: SK, mixed p-spin and Edwards-Anderson.
//!
//! The order-`p` term is
//! `beta_p * N^{-(p-1)/2} * sum_{i1..ip} g_{i1..ip} sigma_i1 ... sigma_ip`
//! over *ordered* index tuples, so that `E H(s) H(s') = N sum_p beta_p^2 R(s,s')^p`.
//! Couplings are keyed by `(seed, p, tuple)` rather than by a flat offset, so
//! the couplings among the first `N` sites are shared by every system size.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RostError};
use crate::rng::{derive_seed, keyed_normal, mix64};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpinConfiguration(Vec<i8>);

impl SpinConfiguration {
    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if spins.is_empty() {
            return invalid("empty spin configuration");
        }
        if let Some(s) = spins.iter().find(|s| **s != 1 && **s != -1) {
            return invalid(format!("spin value {s} is not +1 or -1"));
        }
        Ok(SpinConfiguration(spins))
    }

    /// Bit `i` set means `sigma_i = -1`.
    pub fn from_bits(bits: u64, n: usize) -> Self {
        SpinConfiguration((0..n).map(|i| if bits >> i & 1 == 1 { -1 } else { 1 }).collect())
    }

    pub fn bits(&self) -> u64 {
        self.0
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, s)| if *s < 0 { acc | 1 << i } else { acc })
    }

    pub fn spins(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flipped(&self) -> Self {
        SpinConfiguration(self.0.iter().map(|s| -s).collect())
    }
}

/// Normalized overlap `R = (1/N) sum_i sigma_i sigma'_i`.
pub fn overlap(a: &SpinConfiguration, b: &SpinConfiguration) -> Result<f64> {
    if a.len() != b.len() {
        return Err(RostError::LengthMismatch { expected: a.len(), got: b.len() });
    }
    let dot: i64 = a.0.iter().zip(&b.0).map(|(x, y)| (*x as i64) * (*y as i64)).sum();
    Ok(dot as f64 / a.len() as f64)
}

/// Overlap of two configurations encoded as bit patterns over `n` sites.
#[inline]
pub fn overlap_bits(a: u64, b: u64, n: usize) -> f64 {
    let d = (a ^ b).count_ones() as f64;
    (n as f64 - 2.0 * d) / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Sk,
    MixedPSpin,
    EdwardsAnderson,
}

/// Inverse-temperature weights `beta_p` for `p = 1` and even `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedCouplings {
    beta: Vec<(usize, f64)>,
    weighted_norm_sq: f64,
}

impl MixedCouplings {
    pub fn new(pairs: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut beta: Vec<(usize, f64)> = Vec::new();
        for (p, b) in pairs {
            if p == 0 {
                return invalid("p must be at least 1");
            }
            if !b.is_finite() || b < 0.0 {
                return invalid(format!("beta_{p} = {b} must be finite and nonnegative"));
            }
            if p > 1 && p % 2 == 1 && b > 0.0 {
                return invalid(format!("odd p = {p} > 1 is not supported"));
            }
            if beta.iter().any(|(q, _)| *q == p) {
                return invalid(format!("beta_{p} given twice"));
            }
            if b > 0.0 {
                beta.push((p, b));
            }
        }
        beta.sort_by_key(|(p, _)| *p);
        let weighted_norm_sq = beta.iter().map(|(p, b)| 2f64.powi(*p as i32) * b * b).sum();
        Ok(MixedCouplings { beta, weighted_norm_sq })
    }

    pub fn sk(beta2: f64) -> Result<Self> {
        Self::new([(2, beta2)])
    }

    pub fn zero() -> Self {
        MixedCouplings { beta: Vec::new(), weighted_norm_sq: 0.0 }
    }

    pub fn get(&self, p: usize) -> f64 {
        self.beta.iter().find(|(q, _)| *q == p).map_or(0.0, |(_, b)| *b)
    }

    /// Active `(p, beta_p)` pairs in increasing `p`.
    pub fn terms(&self) -> &[(usize, f64)] {
        &self.beta
    }

    pub fn is_zero(&self) -> bool {
        self.beta.is_empty()
    }

    /// `sum_p beta_p^2`, the per-site variance of the Hamiltonian.
    pub fn sum_sq(&self) -> f64 {
        self.beta.iter().map(|(_, b)| b * b).sum()
    }

    /// `sum_p 2^p beta_p^2`.
    pub fn weighted_norm_sq(&self) -> f64 {
        self.weighted_norm_sq
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.beta.iter().map(|(p, b)| (*p, b * factor)))
    }

    /// Covariance function `xi(R) = sum_p beta_p^2 R^p`.
    pub fn covariance_fn(&self, r: f64) -> f64 {
        self.beta.iter().map(|(p, b)| b * b * r.powi(*p as i32)).sum()
    }
}

impl Serialize for MixedCouplings {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let pairs: Vec<(usize, f64)> = self.beta.clone();
        pairs.serialize(s)
    }
}

impl<'de> Deserialize<'de> for MixedCouplings {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pairs: Vec<(usize, f64)> = Vec::deserialize(d)?;
        MixedCouplings::new(pairs).map_err(serde::de::Error::custom)
    }
}

/// Rectangular 2D lattice with free (default) or periodic boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub periodic: bool,
}

impl Lattice {
    pub fn sites(&self) -> usize {
        self.rows * self.cols
    }

    /// Nearest-neighbour edges `(i, j)` with `i < j`, sites numbered row-major.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let idx = |r: usize, c: usize| r * self.cols + c;
        for r in 0..self.rows {
            for c in 0..self.cols {
                if c + 1 < self.cols {
                    out.push((idx(r, c), idx(r, c + 1)));
                } else if self.periodic && self.cols > 2 {
                    out.push((idx(r, 0), idx(r, c)));
                }
                if r + 1 < self.rows {
                    out.push((idx(r, c), idx(r + 1, c)));
                } else if self.periodic && self.rows > 2 {
                    out.push((idx(0, c), idx(r, c)));
                }
            }
        }
        out
    }
}

/// Serializable model descriptor: `{kind, n, beta: [[p, value]...], lattice?, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub kind: ModelKind,
    pub n: usize,
    pub beta: MixedCouplings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<Lattice>,
    pub seed: u64,
}

impl ModelDescriptor {
    pub fn sk(n: usize, beta2: f64, seed: u64) -> Result<Self> {
        Ok(ModelDescriptor { kind: ModelKind::Sk, n, beta: MixedCouplings::sk(beta2)?, lattice: None, seed })
    }

    pub fn mixed(n: usize, beta: MixedCouplings, seed: u64) -> Self {
        ModelDescriptor { kind: ModelKind::MixedPSpin, n, beta, lattice: None, seed }
    }

    pub fn edwards_anderson(lattice: Lattice, beta: f64, seed: u64) -> Result<Self> {
        Ok(ModelDescriptor {
            kind: ModelKind::EdwardsAnderson,
            n: lattice.sites(),
            beta: MixedCouplings::sk(beta)?,
            lattice: Some(lattice),
            seed,
        })
    }

    pub fn with_n(&self, n: usize) -> Self {
        let mut d = self.clone();
        d.n = n;
        d
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut d = self.clone();
        d.seed = seed;
        d
    }

    pub fn with_beta(&self, beta: MixedCouplings) -> Self {
        let mut d = self.clone();
        d.beta = beta;
        d
    }

    /// Canonical JSON; field order is fixed by the struct definition.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("descriptor serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| RostError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return invalid("n must be at least 1");
        }
        match self.kind {
            ModelKind::Sk => {
                if self.beta.terms().iter().any(|(p, _)| *p != 2) {
                    return invalid("SK model only carries a p = 2 term");
                }
            }
            ModelKind::MixedPSpin => {
                if let Some((p, _)) = self.beta.terms().iter().find(|(p, _)| *p > 10) {
                    return invalid(format!("p = {p} exceeds the supported maximum of 10"));
                }
            }
            ModelKind::EdwardsAnderson => {
                let lat = self.lattice.ok_or_else(|| {
                    RostError::InvalidParameter("Edwards-Anderson model needs a lattice".into())
                })?;
                if lat.sites() != self.n {
                    return invalid(format!("lattice has {} sites but n = {}", lat.sites(), self.n));
                }
                if self.beta.terms().iter().any(|(p, _)| *p != 2) {
                    return invalid("Edwards-Anderson amplitude is given as the p = 2 entry");
                }
                if lat.edges().is_empty() {
                    return invalid("lattice has no edges");
                }
            }
        }
        Ok(())
    }
}

/// Coupling tensor of one order `p`, row-major over ordered tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingTensor {
    pub p: usize,
    pub beta: f64,
    /// `N^{-(p-1)/2}`.
    pub scale: f64,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCouplings {
    pub edges: Vec<(usize, usize)>,
    pub g: Vec<f64>,
    /// `beta * sqrt(N / |E|)`.
    pub amplitude: f64,
}

/// One draw of the disorder. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct DisorderRealization {
    pub kind: ModelKind,
    pub n: usize,
    pub beta: MixedCouplings,
    pub tensors: Vec<CouplingTensor>,
    pub edges: Option<EdgeCouplings>,
}

fn tuple_counter(tuple: &[usize]) -> u64 {
    tuple.iter().fold(tuple.len() as u64, |h, &i| mix64(h ^ (i as u64 + 1).wrapping_mul(0xd6e8_feb8_6659_fd93)))
}

/// Coupling `g_{i1..ip}` for the given seed; identical for every system size.
pub fn coupling(seed: u64, tuple: &[usize]) -> f64 {
    let key = derive_seed(seed, "coupling", tuple.len() as u64);
    keyed_normal(key, tuple_counter(tuple))
}

fn ea_coupling(seed: u64, edge: (usize, usize)) -> f64 {
    let key = derive_seed(seed, "ea-edge", 0);
    keyed_normal(key, tuple_counter(&[edge.0, edge.1]))
}

pub fn build_disorder(desc: &ModelDescriptor) -> Result<DisorderRealization> {
    desc.validate()?;
    let n = desc.n;
    match desc.kind {
        ModelKind::Sk | ModelKind::MixedPSpin => {
            let mut tensors = Vec::new();
            for &(p, beta) in desc.beta.terms() {
                let len = n.checked_pow(p as u32).filter(|l| *l <= 1 << 28).ok_or_else(|| {
                    RostError::Guard(format!("tensor of order {p} over {n} sites is too large"))
                })?;
                let mut g = Vec::with_capacity(len);
                let mut tuple = vec![0usize; p];
                for flat in 0..len {
                    let mut rem = flat;
                    for k in (0..p).rev() {
                        tuple[k] = rem % n;
                        rem /= n;
                    }
                    g.push(coupling(desc.seed, &tuple));
                }
                let scale = (n as f64).powf(-((p as f64) - 1.0) / 2.0);
                tensors.push(CouplingTensor { p, beta, scale, g });
            }
            Ok(DisorderRealization { kind: desc.kind, n, beta: desc.beta.clone(), tensors, edges: None })
        }
        ModelKind::EdwardsAnderson => {
            let lat = desc.lattice.expect("validated");
            let edges = lat.edges();
            let g = edges.iter().map(|e| ea_coupling(desc.seed, *e)).collect();
            let amplitude = desc.beta.get(2) * (n as f64 / edges.len() as f64).sqrt();
            Ok(DisorderRealization {
                kind: desc.kind,
                n,
                beta: desc.beta.clone(),
                tensors: Vec::new(),
                edges: Some(EdgeCouplings { edges, g, amplitude }),
            })
        }
    }
}

/// Contracts a row-major order-`p` tensor with `spins` along every index.
fn contract(g: &[f64], n: usize, p: usize, spins: &[f64]) -> f64 {
    if p == 1 {
        return g.iter().zip(spins).map(|(a, b)| a * b).sum();
    }
    let mut cur: Vec<f64> = g.chunks_exact(n).map(|row| row.iter().zip(spins).map(|(a, b)| a * b).sum()).collect();
    for _ in 1..p - 1 {
        cur = cur.chunks_exact(n).map(|row| row.iter().zip(spins).map(|(a, b)| a * b).sum()).collect();
    }
    cur.iter().zip(spins).map(|(a, b)| a * b).sum()
}

impl DisorderRealization {
    /// Exact `H_N(sigma)`.
    pub fn hamiltonian(&self, sigma: &SpinConfiguration) -> Result<f64> {
        if sigma.len() != self.n {
            return Err(RostError::LengthMismatch { expected: self.n, got: sigma.len() });
        }
        let s: Vec<f64> = sigma.spins().iter().map(|&x| x as f64).collect();
        Ok(self.hamiltonian_f64(&s))
    }

    pub(crate) fn hamiltonian_f64(&self, s: &[f64]) -> f64 {
        let mut h = 0.0;
        for t in &self.tensors {
            h += t.beta * t.scale * contract(&t.g, self.n, t.p, s);
        }
        if let Some(e) = &self.edges {
            let sum: f64 = e.edges.iter().zip(&e.g).map(|(&(i, j), g)| g * s[i] * s[j]).sum();
            h += e.amplitude * sum;
        }
        h
    }

    pub fn hamiltonian_bits(&self, bits: u64) -> f64 {
        let s: Vec<f64> = (0..self.n).map(|i| if bits >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
        self.hamiltonian_f64(&s)
    }

    /// Exact disorder covariance `E H(s) H(s')` implied by the model.
    pub fn covariance(&self, a: &SpinConfiguration, b: &SpinConfiguration) -> Result<f64> {
        let r = overlap(a, b)?;
        match &self.edges {
            None => Ok(self.n as f64 * self.beta.covariance_fn(r)),
            Some(e) => {
                let sum: f64 = e
                    .edges
                    .iter()
                    .map(|&(i, j)| (a.0[i] * a.0[j] * b.0[i] * b.0[j]) as f64)
                    .sum();
                Ok(e.amplitude * e.amplitude * sum)
            }
        }
    }

    pub fn max_order(&self) -> usize {
        self.tensors.iter().map(|t| t.p).max().unwrap_or(if self.edges.is_some() { 2 } else { 0 })
    }

    /// True when every active term has even order, so `H(-s) = H(s)`.
    pub fn is_even(&self) -> bool {
        self.tensors.iter().all(|t| t.p % 2 == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_examples() {
        let a = SpinConfiguration::new(vec![1, 1, -1, -1]).unwrap();
        let b = SpinConfiguration::new(vec![1, -1, 1, -1]).unwrap();
        assert_eq!(overlap(&a, &a).unwrap(), 1.0);
        assert_eq!(overlap(&a, &a.flipped()).unwrap(), -1.0);
        assert_eq!(overlap(&a, &b).unwrap(), 0.0);
        assert_eq!(overlap_bits(a.bits(), b.bits(), 4), 0.0);
        let c = SpinConfiguration::new(vec![1, 1, 1]).unwrap();
        assert!(matches!(overlap(&a, &c), Err(RostError::LengthMismatch { .. })));
    }

    #[test]
    fn rejects_bad_spins_and_couplings() {
        assert!(SpinConfiguration::new(vec![1, 0]).is_err());
        assert!(MixedCouplings::new([(3, 0.5)]).is_err());
        assert!(MixedCouplings::new([(2, -0.1)]).is_err());
        assert!(MixedCouplings::new([(3, 0.0)]).is_ok());
        let desc = ModelDescriptor { n: 0, ..ModelDescriptor::sk(4, 1.0, 1).unwrap() };
        assert!(build_disorder(&desc).is_err());
    }

    #[test]
    fn single_site_sk_energies_coincide() {
        let d = build_disorder(&ModelDescriptor::sk(1, 1.0, 11).unwrap()).unwrap();
        let up = d.hamiltonian_bits(0);
        let down = d.hamiltonian_bits(1);
        assert_eq!(up, down);
        assert_eq!(up, d.tensors[0].g[0]);
    }

    #[test]
    fn two_site_energy_matches_hand_expansion() {
        let d = build_disorder(&ModelDescriptor::sk(2, 0.7, 5).unwrap()).unwrap();
        let g = &d.tensors[0].g;
        for bits in 0..4u64 {
            let s = SpinConfiguration::from_bits(bits, 2);
            let (a, b) = (s.spins()[0] as f64, s.spins()[1] as f64);
            let hand = 0.7 / 2f64.sqrt() * (g[0] * a * a + g[1] * a * b + g[2] * b * a + g[3] * b * b);
            assert!((d.hamiltonian(&s).unwrap() - hand).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_couplings_give_zero_energy() {
        let d = build_disorder(&ModelDescriptor::mixed(5, MixedCouplings::zero(), 3)).unwrap();
        for bits in 0..32 {
            assert_eq!(d.hamiltonian_bits(bits), 0.0);
        }
    }

    #[test]
    fn even_models_are_flip_symmetric() {
        let beta = MixedCouplings::new([(2, 0.5), (4, 0.3)]).unwrap();
        let d = build_disorder(&ModelDescriptor::mixed(6, beta, 9)).unwrap();
        for bits in 0..64u64 {
            let h = d.hamiltonian_bits(bits);
            let hf = d.hamiltonian_bits(!bits & 63);
            assert!((h - hf).abs() < 1e-12 * (1.0 + h.abs()));
        }
    }

    #[test]
    fn couplings_are_shared_across_sizes() {
        let small = build_disorder(&ModelDescriptor::sk(3, 1.0, 21).unwrap()).unwrap();
        let big = build_disorder(&ModelDescriptor::sk(4, 1.0, 21).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(small.tensors[0].g[i * 3 + j], big.tensors[0].g[i * 4 + j]);
            }
        }
    }

    #[test]
    fn descriptor_json_is_byte_stable() {
        let beta = MixedCouplings::new([(2, 0.5), (1, 0.25)]).unwrap();
        let d = ModelDescriptor::mixed(8, beta, 42);
        let js = d.to_json();
        assert_eq!(js, r#"{"kind":"mixed-p-spin","n":8,"beta":[[1,0.25],[2,0.5]],"seed":42}"#);
        assert_eq!(ModelDescriptor::from_json(&js).unwrap(), d);
        let lat = Lattice { rows: 3, cols: 3, periodic: false };
        let ea = ModelDescriptor::edwards_anderson(lat, 1.0, 1).unwrap();
        assert_eq!(
            ea.to_json(),
            r#"{"kind":"edwards-anderson","n":9,"beta":[[2,1.0]],"lattice":{"rows":3,"cols":3,"periodic":false},"seed":1}"#
        );
    }

    #[test]
    fn free_boundary_lattice_edge_count() {
        let lat = Lattice { rows: 3, cols: 3, periodic: false };
        assert_eq!(lat.edges().len(), 12);
        let per = Lattice { rows: 3, cols: 3, periodic: true };
        assert_eq!(per.edges().len(), 18);
    }
}
