//! Finite atomic sampling measures, overlap sampling, moment functionals and
//! support-geometry diagnostics.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RostError};
use crate::gibbs_exact::{disorder_seed, enumerate_gibbs, GibbsTable};
use crate::rng::{stream, StreamRng};
use crate::spin_models::{build_disorder, Lattice, ModelDescriptor};
use crate::stats::{pooled_stderr, z_score, Estimate, MomentEntry, MomentReport};

pub const WEIGHT_TOL: f64 = 1e-12;
pub const PSD_JITTER: f64 = 1e-10;
/// Largest `K^s` summed in exact moment mode.
pub const EXACT_TUPLE_CAP: f64 = 1e7;
/// Atoms lighter than this are ignored by the support diagnostics.
pub const SUPPORT_WEIGHT_FLOOR: f64 = 1e-15;
const GRAM_CACHE_ATOMS: usize = 512;

/// Coordinates of the atoms in some orthonormal basis. Only inner products
/// carry meaning; the basis is an implementation detail.
#[derive(Debug, Clone, PartialEq)]
pub enum Coordinates {
    /// Row-major `K x dim`.
    Dense { dim: usize, data: Vec<f64> },
    /// Atom `i` is `sum_{b in rows[i]} sqrt(var[b]) e_b` for orthonormal
    /// `e_b`; indices sorted. Inner products are sums of shared `var`s.
    Sparse { var: Vec<f64>, rows: Vec<Vec<u32>> },
}

#[derive(Debug, Clone, Copy)]
pub enum FeatureRow<'a> {
    Dense(&'a [f64]),
    Sparse { indices: &'a [u32], var: &'a [f64] },
}

impl Coordinates {
    pub fn len(&self) -> usize {
        match self {
            Coordinates::Dense { dim, data } => {
                if *dim == 0 {
                    0
                } else {
                    data.len() / dim
                }
            }
            Coordinates::Sparse { rows, .. } => rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            Coordinates::Dense { dim, .. } => *dim,
            Coordinates::Sparse { var, .. } => var.len(),
        }
    }

    pub fn row(&self, i: usize) -> FeatureRow<'_> {
        match self {
            Coordinates::Dense { dim, data } => FeatureRow::Dense(&data[i * dim..(i + 1) * dim]),
            Coordinates::Sparse { var, rows } => FeatureRow::Sparse { indices: &rows[i], var },
        }
    }

    pub fn dot(&self, i: usize, j: usize) -> f64 {
        match self {
            Coordinates::Dense { dim, data } => {
                let a = &data[i * dim..(i + 1) * dim];
                let b = &data[j * dim..(j + 1) * dim];
                a.iter().zip(b).map(|(x, y)| x * y).sum()
            }
            Coordinates::Sparse { var, rows } => sparse_dot(&rows[i], &rows[j], var),
        }
    }
}

fn sparse_dot(a: &[u32], b: &[u32], var: &[f64]) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += var[a[i] as usize];
                i += 1;
                j += 1;
            }
        }
    }
    s
}

/// One realization of a sampling measure: weights on finitely many atoms of
/// the unit ball, known through their inner products.
#[derive(Debug, Clone)]
pub struct AtomicMeasure {
    pub label: String,
    weights: Vec<f64>,
    coords: Arc<Coordinates>,
    norms_sq: Arc<Vec<f64>>,
    gram_cache: Option<Arc<Vec<f64>>>,
}

impl PartialEq for AtomicMeasure {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label
            && self.weights == other.weights
            && self.norms_sq == other.norms_sq
            && self.coords == other.coords
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return invalid("a measure needs at least one atom");
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return invalid("weights must be finite and nonnegative");
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > WEIGHT_TOL {
        return invalid(format!("weights sum to {s}, not 1"));
    }
    Ok(())
}

/// Normalizes log-weights with a max shift.
pub fn normalize_log_weights(lw: &[f64]) -> Vec<f64> {
    let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = lw.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= s;
    }
    w
}

impl AtomicMeasure {
    /// Builds a measure from coordinates; `norms_sq` overrides the computed
    /// squared norms (used to pin diagonals that are exact by construction).
    pub fn from_coordinates(
        label: impl Into<String>,
        weights: Vec<f64>,
        coords: Coordinates,
        norms_sq: Option<Vec<f64>>,
    ) -> Result<Self> {
        check_weights(&weights)?;
        if coords.len() != weights.len() {
            return Err(RostError::LengthMismatch { expected: weights.len(), got: coords.len() });
        }
        let norms_sq = match norms_sq {
            Some(n) => {
                if n.len() != weights.len() {
                    return Err(RostError::LengthMismatch { expected: weights.len(), got: n.len() });
                }
                n
            }
            None => (0..weights.len()).map(|i| coords.dot(i, i)).collect(),
        };
        if norms_sq.iter().any(|d| !(-PSD_JITTER..=1.0 + 1e-9).contains(d)) {
            return invalid("atoms must lie in the unit ball");
        }
        let mut m = AtomicMeasure {
            label: label.into(),
            weights,
            coords: Arc::new(coords),
            norms_sq: Arc::new(norms_sq),
            gram_cache: None,
        };
        m.refresh_gram_cache();
        Ok(m)
    }

    /// Builds a measure from a Gram matrix (row-major, `K x K`).
    pub fn from_gram(label: impl Into<String>, weights: Vec<f64>, gram: &[f64]) -> Result<Self> {
        let k = weights.len();
        if gram.len() != k * k {
            return Err(RostError::LengthMismatch { expected: k * k, got: gram.len() });
        }
        for i in 0..k {
            let d = gram[i * k + i];
            if !(0.0..=1.0).contains(&d) {
                return invalid(format!("gram diagonal entry {d} outside [0, 1]"));
            }
            for j in 0..i {
                if (gram[i * k + j] - gram[j * k + i]).abs() > 1e-12 {
                    return invalid("gram matrix is not symmetric");
                }
            }
        }
        let coords = coordinates_from_gram(gram, k)?;
        let norms = (0..k).map(|i| gram[i * k + i]).collect();
        Self::from_coordinates(label, weights, coords, Some(norms))
    }

    pub fn single_atom(norm_sq: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&norm_sq) {
            return invalid("norm must lie in [0, 1]");
        }
        let coords = Coordinates::Dense { dim: 1, data: vec![norm_sq.sqrt()] };
        Self::from_coordinates("single-atom", vec![1.0], coords, Some(vec![norm_sq]))
    }

    /// Equal weights on `k` mutually orthogonal atoms of squared norm `norm_sq`.
    pub fn orthogonal(k: usize, norm_sq: f64) -> Result<Self> {
        if k == 0 {
            return invalid("need at least one atom");
        }
        let rows = (0..k).map(|i| vec![i as u32]).collect();
        let w = vec![1.0 / k as f64; k];
        Self::from_coordinates("orthogonal", w, Coordinates::Sparse { var: vec![norm_sq; k], rows }, Some(vec![norm_sq; k]))
    }

    fn refresh_gram_cache(&mut self) {
        let k = self.len();
        self.gram_cache = if k <= GRAM_CACHE_ATOMS {
            let mut g = vec![0.0; k * k];
            for i in 0..k {
                g[i * k + i] = self.norms_sq[i];
                for j in 0..i {
                    let v = self.coords.dot(i, j);
                    g[i * k + j] = v;
                    g[j * k + i] = v;
                }
            }
            Some(Arc::new(g))
        } else {
            None
        };
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn coordinates(&self) -> &Coordinates {
        &self.coords
    }

    pub fn norm_sq(&self, i: usize) -> f64 {
        self.norms_sq[i]
    }

    pub fn norms_sq(&self) -> &[f64] {
        &self.norms_sq
    }

    /// `v_i . v_j`.
    #[inline]
    pub fn inner(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.norms_sq[i];
        }
        match &self.gram_cache {
            Some(g) => g[i * self.len() + j],
            None => self.coords.dot(i, j),
        }
    }

    /// Dense Gram matrix, row-major.
    pub fn gram(&self) -> Vec<f64> {
        if let Some(g) = &self.gram_cache {
            return g.as_ref().clone();
        }
        let k = self.len();
        let mut g = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                g[i * k + j] = self.inner(i, j);
            }
        }
        g
    }

    /// Same atoms, new weights. Geometry is shared, not copied.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        check_weights(&weights)?;
        if weights.len() != self.len() {
            return Err(RostError::LengthMismatch { expected: self.len(), got: weights.len() });
        }
        Ok(AtomicMeasure {
            label: self.label.clone(),
            weights,
            coords: Arc::clone(&self.coords),
            norms_sq: Arc::clone(&self.norms_sq),
            gram_cache: self.gram_cache.clone(),
        })
    }

    /// Cumulative weights for inverse-CDF sampling.
    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect()
    }

    /// Merges atoms with bitwise identical coordinates, summing weights.
    pub fn merge_duplicates(&self) -> Result<Self> {
        let k = self.len();
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut keep: Vec<usize> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for i in 0..k {
            let mut key: Vec<u64> = match self.coords.row(i) {
                FeatureRow::Dense(r) => r.iter().map(|x| (x + 0.0).to_bits()).collect(),
                FeatureRow::Sparse { indices, .. } => indices.iter().map(|j| *j as u64).collect(),
            };
            key.push(self.norms_sq[i].to_bits());
            match seen.get(&key) {
                Some(&slot) => weights[slot] += self.weights[i],
                None => {
                    seen.insert(key, keep.len());
                    keep.push(i);
                    weights.push(self.weights[i]);
                }
            }
        }
        if keep.len() == k {
            return Ok(self.clone());
        }
        let coords = match self.coords.as_ref() {
            Coordinates::Dense { dim, data } => Coordinates::Dense {
                dim: *dim,
                data: keep.iter().flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied()).collect(),
            },
            Coordinates::Sparse { var, rows } => {
                Coordinates::Sparse { var: var.clone(), rows: keep.iter().map(|&i| rows[i].clone()).collect() }
            }
        };
        let norms = keep.iter().map(|&i| self.norms_sq[i]).collect();
        let s: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / s).collect();
        Self::from_coordinates(self.label.clone(), weights, coords, Some(norms))
    }

    /// JSON `{label, weights, gram}` with the Gram matrix as its row-major
    /// lower triangle.
    pub fn to_json(&self) -> String {
        let k = self.len();
        let mut tri = Vec::with_capacity(k * (k + 1) / 2);
        for i in 0..k {
            for j in 0..=i {
                tri.push(self.inner(i, j));
            }
        }
        let doc = MeasureFile { label: self.label.clone(), weights: self.weights.clone(), gram: tri };
        serde_json::to_string(&doc).expect("measure serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: MeasureFile = serde_json::from_str(s).map_err(|e| RostError::Parse(e.to_string()))?;
        let k = doc.weights.len();
        if doc.gram.len() != k * (k + 1) / 2 {
            return Err(RostError::LengthMismatch { expected: k * (k + 1) / 2, got: doc.gram.len() });
        }
        let mut g = vec![0.0; k * k];
        let mut t = 0;
        for i in 0..k {
            for j in 0..=i {
                g[i * k + j] = doc.gram[t];
                g[j * k + i] = doc.gram[t];
                t += 1;
            }
        }
        Self::from_gram(doc.label, doc.weights, &g)
    }
}

#[derive(Serialize, Deserialize)]
struct MeasureFile {
    label: String,
    weights: Vec<f64>,
    gram: Vec<f64>,
}

/// Low-rank coordinates reproducing a PSD Gram matrix, by pivoted Cholesky.
/// Residual pivots below `PSD_JITTER` are treated as zero.
pub fn coordinates_from_gram(gram: &[f64], k: usize) -> Result<Coordinates> {
    if gram.len() != k * k {
        return Err(RostError::LengthMismatch { expected: k * k, got: gram.len() });
    }
    if gram.iter().any(|x| !x.is_finite()) {
        return Err(RostError::NonFinite("gram entry".into()));
    }
    let mut diag: Vec<f64> = (0..k).map(|i| gram[i * k + i]).collect();
    let mut perm: Vec<usize> = (0..k).collect();
    // columns[c][i] = L[i, c] in original atom order
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for step in 0..k {
        let (piv_pos, piv_val) = perm[step..]
            .iter()
            .enumerate()
            .map(|(p, &i)| (p + step, diag[i]))
            .fold((step, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        if piv_val <= PSD_JITTER {
            break;
        }
        perm.swap(step, piv_pos);
        let p = perm[step];
        let root = piv_val.sqrt();
        let mut col = vec![0.0; k];
        col[p] = root;
        for &i in &perm[step + 1..] {
            let mut v = gram[i * k + p];
            for c in &columns {
                v -= c[i] * c[p];
            }
            col[i] = v / root;
            diag[i] -= col[i] * col[i];
        }
        diag[p] = 0.0;
        columns.push(col);
    }
    let r = columns.len();
    let mut data = vec![0.0; k * r.max(1)];
    let dim = r.max(1);
    for (c, col) in columns.iter().enumerate() {
        for i in 0..k {
            data[i * dim + c] = col[i];
        }
    }
    let coords = Coordinates::Dense { dim, data };
    let mut err: f64 = 0.0;
    for i in 0..k {
        for j in 0..=i {
            err = err.max((coords.dot(i, j) - gram[i * k + j]).abs());
        }
    }
    if err > 1e-8 * (k as f64).max(1.0) {
        return Err(RostError::NotPsd(format!("reconstruction error {err:e}")));
    }
    Ok(coords)
}

/// Overlap kernel for Gibbs-derived measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpinKernel {
    /// `R(s, s')`.
    R,
    /// `R(s, s')^2`.
    RSquared,
    /// Edge overlap `|E|^{-1} sum_e s_i s_j s'_i s'_j`.
    Ea,
}

/// The sampling measure of a Gibbs table: atoms are configurations with their
/// Gibbs weights and Gram `kernel(s, s')`, unit diagonal. Flip-invariant
/// kernels merge `s` with `-s`.
pub fn rost_from_gibbs(g: &GibbsTable, kernel: SpinKernel, lattice: Option<&Lattice>) -> Result<AtomicMeasure> {
    let n = g.n;
    let probs = g.probabilities();
    let k = probs.len();
    let (dim, edges) = match kernel {
        SpinKernel::R => (n, Vec::new()),
        SpinKernel::RSquared => (n * n, Vec::new()),
        SpinKernel::Ea => {
            let lat = lattice.ok_or_else(|| RostError::InvalidParameter("EA kernel needs a lattice".into()))?;
            if lat.sites() != n {
                return Err(RostError::LengthMismatch { expected: n, got: lat.sites() });
            }
            let e = lat.edges();
            (e.len(), e)
        }
    };
    if dim == 0 {
        return invalid("kernel has no features");
    }
    let mut data = vec![0.0; k * dim];
    let mut s = vec![0.0; n];
    for idx in 0..k {
        let bits = g.config(idx);
        for (i, x) in s.iter_mut().enumerate() {
            *x = if bits >> i & 1 == 1 { -1.0 } else { 1.0 };
        }
        let row = &mut data[idx * dim..(idx + 1) * dim];
        match kernel {
            SpinKernel::R => {
                let c = 1.0 / (n as f64).sqrt();
                for i in 0..n {
                    row[i] = s[i] * c;
                }
            }
            SpinKernel::RSquared => {
                let c = 1.0 / n as f64;
                for i in 0..n {
                    for j in 0..n {
                        row[i * n + j] = s[i] * s[j] * c;
                    }
                }
            }
            SpinKernel::Ea => {
                let c = 1.0 / (edges.len() as f64).sqrt();
                for (e, &(i, j)) in edges.iter().enumerate() {
                    row[e] = s[i] * s[j] * c;
                }
            }
        }
    }
    let label = match kernel {
        SpinKernel::R => "gibbs-r",
        SpinKernel::RSquared => "gibbs-r2",
        SpinKernel::Ea => "gibbs-ea",
    };
    let s: f64 = probs.iter().sum();
    let weights = probs.into_iter().map(|p| p / s).collect();
    let m = AtomicMeasure::from_coordinates(label, weights, Coordinates::Dense { dim, data }, Some(vec![1.0; k]))?;
    match kernel {
        SpinKernel::R => Ok(m),
        _ => m.merge_duplicates(),
    }
}

/// Draws `s` replicas iid from the weights and returns their `s x s` overlap
/// matrix (row-major) with unit diagonal.
pub fn sample_overlap_matrix<R: Rng + ?Sized>(m: &AtomicMeasure, s: usize, rng: &mut R) -> Result<Vec<f64>> {
    if s < 2 {
        return invalid("need at least two replicas");
    }
    let cdf = m.cdf();
    let idx: Vec<usize> = (0..s).map(|_| pick(&cdf, rng.random::<f64>())).collect();
    let mut out = vec![1.0; s * s];
    for a in 0..s {
        for b in 0..s {
            if a != b {
                out[a * s + b] = m.inner(idx[a], idx[b]);
            }
        }
    }
    Ok(out)
}

/// Inverse-CDF draw for a uniform `u` in `[0, 1)`.
#[inline]
pub fn pick(cdf: &[f64], u: f64) -> usize {
    let total = *cdf.last().expect("nonempty cdf");
    cdf.partition_point(|c| *c <= u * total).min(cdf.len() - 1)
}

/// A monomial `prod q_ab^k` in the overlaps of `s` replicas (0-based
/// replica indices, `a < b`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Monomial {
    pub factors: Vec<(usize, usize, u32)>,
}

impl Monomial {
    pub fn new(factors: Vec<(usize, usize, u32)>) -> Result<Self> {
        if factors.is_empty() {
            return invalid("empty monomial");
        }
        for &(a, b, k) in &factors {
            if a >= b || k == 0 {
                return invalid("factors need a < b and exponent >= 1");
            }
        }
        let m = Monomial { factors };
        if !(2..=4).contains(&m.replicas()) {
            return invalid("monomials live on 2 to 4 replicas");
        }
        Ok(m)
    }

    /// `q12^p`.
    pub fn power(p: u32) -> Self {
        Monomial { factors: vec![(0, 1, p)] }
    }

    pub fn replicas(&self) -> usize {
        self.factors.iter().map(|f| f.1 + 1).max().unwrap_or(0)
    }

    pub fn name(&self) -> String {
        self.factors
            .iter()
            .map(|&(a, b, k)| if k == 1 { format!("q{}{}", a + 1, b + 1) } else { format!("q{}{}^{}", a + 1, b + 1, k) })
            .collect::<Vec<_>>()
            .join("*")
    }

    pub fn parse(name: &str) -> Result<Self> {
        let bad = || RostError::Parse(format!("monomial {name:?}"));
        let mut factors = Vec::new();
        for part in name.split('*') {
            let part = part.trim();
            let rest = part.strip_prefix('q').ok_or_else(bad)?;
            let (pair, exp) = match rest.split_once('^') {
                Some((p, e)) => (p, e.parse::<u32>().map_err(|_| bad())?),
                None => (rest, 1),
            };
            let digits: Vec<usize> = pair.chars().map(|c| c.to_digit(10).map(|d| d as usize)).collect::<Option<_>>().ok_or_else(bad)?;
            if digits.len() != 2 || digits[0] == 0 || digits[1] == 0 {
                return Err(bad());
            }
            factors.push((digits[0] - 1, digits[1] - 1, exp));
        }
        Monomial::new(factors)
    }

    #[inline]
    pub fn eval(&self, q: impl Fn(usize, usize) -> f64) -> f64 {
        self.factors.iter().map(|&(a, b, k)| q(a, b).powi(k as i32)).product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCatalog {
    pub monomials: Vec<Monomial>,
}

impl Default for MomentCatalog {
    fn default() -> Self {
        let names = ["q12", "q12^2", "q12^3", "q12^4", "q12*q13", "q12*q13*q23", "q12^2*q13", "q12*q34", "q12^2*q34^2"];
        MomentCatalog { monomials: names.iter().map(|n| Monomial::parse(n).expect("default catalog")).collect() }
    }
}

impl MomentCatalog {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Ok(MomentCatalog { monomials: names.iter().map(|n| Monomial::parse(n.as_ref())).collect::<Result<_>>()? })
    }

    pub fn names(&self) -> Vec<String> {
        self.monomials.iter().map(|m| m.name()).collect()
    }

    pub fn max_replicas(&self) -> usize {
        self.monomials.iter().map(|m| m.replicas()).max().unwrap_or(2)
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentMode {
    Exact,
    Mc,
}

/// `mu^{x s}(F)` by summing over all `K^s` tuples.
pub fn exact_moment(m: &AtomicMeasure, f: &Monomial) -> Result<f64> {
    let s = f.replicas();
    let k = m.len();
    if (k as f64).powi(s as i32) > EXACT_TUPLE_CAP {
        return Err(RostError::Guard(format!("K^s = {k}^{s} exceeds the exact-mode cap")));
    }
    let w = m.weights();
    let mut idx = vec![0usize; s];
    let mut total = 0.0;
    fn rec(
        depth: usize,
        weight: f64,
        idx: &mut Vec<usize>,
        w: &[f64],
        m: &AtomicMeasure,
        f: &Monomial,
        total: &mut f64,
    ) {
        if depth == idx.len() {
            *total += weight * f.eval(|a, b| m.inner(idx[a], idx[b]));
            return;
        }
        for i in 0..w.len() {
            if w[i] == 0.0 {
                continue;
            }
            idx[depth] = i;
            rec(depth + 1, weight * w[i], idx, w, m, f, total);
        }
    }
    rec(0, 1.0, &mut idx, w, m, f, &mut total);
    Ok(total)
}

/// Shared uniforms for tuple sampling, so that two measures on the same atoms
/// are probed with common random numbers.
#[derive(Debug, Clone)]
pub struct TupleUniforms {
    pub s: usize,
    pub u: Vec<f64>,
}

impl TupleUniforms {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, tuples: usize, s: usize) -> Self {
        TupleUniforms { s, u: (0..tuples * s).map(|_| rng.random::<f64>()).collect() }
    }

    pub fn tuples(&self) -> usize {
        self.u.len() / self.s
    }
}

/// Monte Carlo `mu^{x s}(F)` for every monomial, one shared tuple stream.
pub fn mc_moments(m: &AtomicMeasure, cat: &MomentCatalog, u: &TupleUniforms) -> Vec<f64> {
    let cdf = m.cdf();
    let s = u.s;
    let n = u.tuples();
    let mut acc = vec![0.0; cat.len()];
    let mut idx = vec![0usize; s];
    for t in 0..n {
        for (r, slot) in idx.iter_mut().enumerate() {
            *slot = pick(&cdf, u.u[t * s + r]);
        }
        for (a, mono) in acc.iter_mut().zip(&cat.monomials) {
            *a += mono.eval(|x, y| m.inner(idx[x], idx[y]));
        }
    }
    acc.into_iter().map(|a| a / n as f64).collect()
}

/// Inner expectations for one measure in the requested mode.
pub fn inner_moments(m: &AtomicMeasure, cat: &MomentCatalog, mode: MomentMode, u: &TupleUniforms) -> Result<Vec<f64>> {
    match mode {
        MomentMode::Exact => cat.monomials.iter().map(|f| exact_moment(m, f)).collect(),
        MomentMode::Mc => Ok(mc_moments(m, cat, u)),
    }
}

/// Where ensemble draws come from.
#[derive(Debug, Clone, PartialEq)]
pub enum EnsembleSource {
    Gibbs { model: ModelDescriptor, beta: f64, kernel: SpinKernel },
    Rpc(crate::cascades::RpcSpec),
    TwoSphere { x1: f64, x2: f64, m: usize },
    UncoupledRem { x1: f64, x2: f64, m: usize },
    /// Fixed measures, cycled through.
    Fixed(Vec<AtomicMeasure>),
}

/// A seeded generator of independent sampling measures.
#[derive(Debug, Clone, PartialEq)]
pub struct RostEnsemble {
    pub source: EnsembleSource,
    pub seed: u64,
    pub size: usize,
}

impl RostEnsemble {
    pub fn new(source: EnsembleSource, seed: u64, size: usize) -> Result<Self> {
        if size == 0 {
            return invalid("ensemble size must be positive");
        }
        if let EnsembleSource::Fixed(v) = &source {
            if v.is_empty() {
                return invalid("fixed ensemble is empty");
            }
        }
        Ok(RostEnsemble { source, seed, size })
    }

    pub fn fixed(m: AtomicMeasure, size: usize) -> Self {
        RostEnsemble { source: EnsembleSource::Fixed(vec![m]), seed: 0, size }
    }

    pub fn with_size(&self, size: usize) -> Self {
        RostEnsemble { size, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RostEnsemble { seed, ..self.clone() }
    }

    /// Draw `i`; depends only on `(source, seed, i)`.
    pub fn draw(&self, i: usize) -> Result<AtomicMeasure> {
        use crate::cascades::{build_rpc, build_two_sphere_counterexample, build_uncoupled_rem};
        let mut rng = stream(self.seed, "ensemble", i as u64);
        match &self.source {
            EnsembleSource::Gibbs { model, beta, kernel } => {
                let desc = model.with_seed(disorder_seed(self.seed, i));
                let d = build_disorder(&desc)?;
                let t = enumerate_gibbs(&d, *beta)?;
                rost_from_gibbs(&t, *kernel, model.lattice.as_ref())
            }
            EnsembleSource::Rpc(spec) => build_rpc(spec, &mut rng),
            EnsembleSource::TwoSphere { x1, x2, m } => build_two_sphere_counterexample(*x1, *x2, *m, &mut rng),
            EnsembleSource::UncoupledRem { x1, x2, m } => build_uncoupled_rem(*x1, *x2, *m, &mut rng),
            EnsembleSource::Fixed(v) => Ok(v[i % v.len()].clone()),
        }
    }

    /// Evaluates `f` on every draw in parallel; results in draw order.
    pub fn map_draws<T, F>(&self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, &AtomicMeasure) -> Result<T> + Sync,
    {
        (0..self.size)
            .into_par_iter()
            .map(|i| {
                let m = self.draw(i)?;
                f(i, &m)
            })
            .collect()
    }
}

/// Per-draw inner moments, one row per draw.
pub fn moment_samples(
    e: &RostEnsemble,
    cat: &MomentCatalog,
    mode: MomentMode,
    budget: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if mode == MomentMode::Mc && budget == 0 {
        return invalid("Monte Carlo mode needs a positive tuple budget");
    }
    let s = cat.max_replicas();
    e.map_draws(|i, m| {
        let mut rng: StreamRng = stream(seed, "tuples", i as u64);
        let u = match mode {
            MomentMode::Mc => TupleUniforms::draw(&mut rng, budget, s),
            MomentMode::Exact => TupleUniforms { s, u: Vec::new() },
        };
        inner_moments(m, cat, mode, &u)
    })
}

fn column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j]).collect()
}

/// Ensemble means of the catalog's functionals, with stderr across draws and
/// z-scores against 0.
pub fn moment_vector(
    e: &RostEnsemble,
    cat: &MomentCatalog,
    mode: MomentMode,
    budget: usize,
    seed: u64,
) -> Result<MomentReport> {
    let rows = moment_samples(e, cat, mode, budget, seed)?;
    let entries = cat
        .monomials
        .iter()
        .enumerate()
        .map(|(j, mono)| MomentEntry::new(mono.name(), Estimate::from_samples(&column(&rows, j)), 0.0))
        .collect();
    Ok(MomentReport { entries, seed, samples: e.size })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UltrametricityScore {
    pub violation_rate: f64,
    /// Smallest `q_ab - min(q_ac, q_bc)` over all sampled triples and rotations.
    pub worst_slack: f64,
    pub triples: usize,
}

pub const ULTRAMETRIC_TOL: f64 = 1e-9;

/// `min` over the three rotations of `q_ab - min(q_ac, q_bc)`.
pub fn triple_slack(q12: f64, q13: f64, q23: f64) -> f64 {
    (q12 - q13.min(q23)).min(q13 - q12.min(q23)).min(q23 - q12.min(q13))
}

/// Samples `n_triples` replica triples per draw and counts violations of
/// the ultrametric inequality.
pub fn ultrametricity_score(e: &RostEnsemble, n_triples: usize, seed: u64) -> Result<UltrametricityScore> {
    if n_triples == 0 {
        return invalid("need at least one triple");
    }
    let per = e.map_draws(|i, m| {
        let mut rng = stream(seed, "triples", i as u64);
        let cdf = m.cdf();
        let mut bad = 0usize;
        let mut worst = f64::INFINITY;
        for _ in 0..n_triples {
            let a = pick(&cdf, rng.random());
            let b = pick(&cdf, rng.random());
            let c = pick(&cdf, rng.random());
            let slack = triple_slack(m.inner(a, b), m.inner(a, c), m.inner(b, c));
            if slack < -ULTRAMETRIC_TOL {
                bad += 1;
            }
            worst = worst.min(slack);
        }
        Ok((bad, worst))
    })?;
    let bad: usize = per.iter().map(|p| p.0).sum();
    let worst = per.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let triples = n_triples * e.size;
    Ok(UltrametricityScore { violation_rate: bad as f64 / triples as f64, worst_slack: worst, triples })
}

/// `(r_min, r_max)`: extreme atom norms among atoms of non-negligible weight.
pub fn support_radii(m: &AtomicMeasure) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, w) in m.weights().iter().enumerate() {
        if *w >= SUPPORT_WEIGHT_FLOOR {
            let r = m.norm_sq(i).max(0.0).sqrt();
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    if lo.is_infinite() {
        return Err(RostError::Degenerate("no atom carries weight".into()));
    }
    Ok((lo, hi))
}

/// Numerical rank of `W^{1/2} G W^{1/2}`, counting eigenvalues above
/// `1e-8 * trace`.
pub fn effective_dimension(m: &AtomicMeasure) -> Result<usize> {
    let support: Vec<usize> = (0..m.len()).filter(|&i| m.weights()[i] > 0.0).collect();
    let k = support.len();
    let dim = m.coordinates().dim();
    // Same nonzero spectrum as the weighted covariance operator in feature space.
    let eig = if k <= dim || k <= 512 {
        let sw: Vec<f64> = support.iter().map(|&i| m.weights()[i].sqrt()).collect();
        let a = DMatrix::from_fn(k, k, |r, c| sw[r] * sw[c] * m.inner(support[r], support[c]));
        a.symmetric_eigenvalues()
    } else {
        let mut c = DMatrix::<f64>::zeros(dim, dim);
        for &i in &support {
            let w = m.weights()[i];
            match m.coordinates().row(i) {
                FeatureRow::Dense(r) => {
                    for a in 0..dim {
                        if r[a] == 0.0 {
                            continue;
                        }
                        for b in 0..dim {
                            c[(a, b)] += w * r[a] * r[b];
                        }
                    }
                }
                FeatureRow::Sparse { indices, var } => {
                    for &a in indices {
                        for &b in indices {
                            c[(a as usize, b as usize)] += w * (var[a as usize] * var[b as usize]).sqrt();
                        }
                    }
                }
            }
        }
        c.symmetric_eigenvalues()
    };
    let trace: f64 = eig.iter().sum();
    if trace <= 0.0 {
        return Ok(0);
    }
    Ok(eig.iter().filter(|&&l| l > 1e-8 * trace).count())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RostDistance {
    pub max_abs_diff: f64,
    pub max_abs_z: f64,
}

/// Sup distance between two moment reports on the same catalog, with the
/// largest pooled z-score.
pub fn rost_distance(r1: &MomentReport, r2: &MomentReport) -> Result<RostDistance> {
    if r1.entries.len() != r2.entries.len() || r1.entries.iter().zip(&r2.entries).any(|(a, b)| a.name != b.name) {
        return Err(RostError::CatalogMismatch);
    }
    let mut d: f64 = 0.0;
    let mut z: f64 = 0.0;
    for (a, b) in r1.entries.iter().zip(&r2.entries) {
        let diff = a.estimate - b.estimate;
        d = d.max(diff.abs());
        z = z.max(z_score(diff, pooled_stderr(a.stderr, b.stderr)).abs());
    }
    Ok(RostDistance { max_abs_diff: d, max_abs_z: z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn two_orthogonal() -> AtomicMeasure {
        AtomicMeasure::orthogonal(2, 1.0).unwrap()
    }

    #[test]
    fn weights_must_sum_to_one() {
        let c = Coordinates::Dense { dim: 1, data: vec![1.0, 0.0] };
        assert!(AtomicMeasure::from_coordinates("x", vec![0.5, 0.6], c, None).is_err());
    }

    #[test]
    fn gram_round_trip_and_psd_rejection() {
        let g = vec![1.0, 0.3, 0.2, 0.3, 0.8, 0.1, 0.2, 0.1, 0.5];
        let m = AtomicMeasure::from_gram("g", vec![0.2, 0.3, 0.5], &g).unwrap();
        let back = m.gram();
        for (a, b) in g.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = vec![1.0, 0.9, 0.0, 0.9, 1.0, 0.9, 0.0, 0.9, 1.0];
        assert!(matches!(AtomicMeasure::from_gram("b", vec![0.2, 0.3, 0.5], &bad), Err(RostError::NotPsd(_))));
    }

    #[test]
    fn json_round_trip() {
        let g = vec![1.0, 0.5, 0.5, 0.25];
        let m = AtomicMeasure::from_gram("pair", vec![0.25, 0.75], &g).unwrap();
        let s = m.to_json();
        assert_eq!(s, r#"{"label":"pair","weights":[0.25,0.75],"gram":[1.0,0.5,0.25]}"#);
        let back = AtomicMeasure::from_json(&s).unwrap();
        assert_eq!(back.gram(), m.gram());
    }

    #[test]
    fn uniform_gibbs_measure_with_r_kernel() {
        let d = build_disorder(&ModelDescriptor::sk(2, 1.0, 0).unwrap()).unwrap();
        let t = enumerate_gibbs(&d, 0.0).unwrap();
        let m = rost_from_gibbs(&t, SpinKernel::R, None).unwrap();
        assert_eq!(m.weights(), &[0.25; 4]);
        let g = m.gram();
        for i in 0..4 {
            assert_eq!(g[i * 4 + i], 1.0);
            for j in 0..4 {
                let v = g[i * 4 + j];
                assert!([1.0, -1.0, 0.0].iter().any(|x| (v - x).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn squared_kernel_merges_flips_and_squares_gram() {
        let d = build_disorder(&ModelDescriptor::sk(4, 1.0, 2).unwrap()).unwrap();
        let t = enumerate_gibbs(&d, 1.0).unwrap();
        let r = rost_from_gibbs(&t, SpinKernel::R, None).unwrap();
        let r2 = rost_from_gibbs(&t, SpinKernel::RSquared, None).unwrap();
        assert_eq!(r2.len(), 8);
        // pairs (s, -s) carry equal weight for the even model
        let q_r: f64 = (0..16).flat_map(|i| (0..16).map(move |j| (i, j))).map(|(i, j)| r.weights()[i] * r.weights()[j] * r.inner(i, j).powi(2)).sum();
        let q_r2 = exact_moment(&r2, &Monomial::power(1)).unwrap();
        assert!((q_r - q_r2).abs() < 1e-12);
    }

    #[test]
    fn overlap_matrix_of_single_atom() {
        let m = AtomicMeasure::single_atom(0.36).unwrap();
        let mut rng = StreamRng::seed_from_u64(1);
        let q = sample_overlap_matrix(&m, 3, &mut rng).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(q[a * 3 + b], if a == b { 1.0 } else { 0.36 });
            }
        }
        assert!(sample_overlap_matrix(&m, 1, &mut rng).is_err());
    }

    #[test]
    fn overlap_frequencies_follow_weight_products() {
        let m = two_orthogonal();
        let mut rng = StreamRng::seed_from_u64(3);
        let n = 100_000;
        let hits = (0..n).filter(|_| sample_overlap_matrix(&m, 2, &mut rng).unwrap()[1] == 1.0).count();
        let p = hits as f64 / n as f64;
        assert!((p - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn monomial_names_round_trip() {
        for n in MomentCatalog::default().names() {
            assert_eq!(Monomial::parse(&n).unwrap().name(), n);
        }
        assert_eq!(MomentCatalog::default().len(), 9);
        assert!(Monomial::parse("q11").is_err());
        assert!(Monomial::parse("q15").is_err());
        assert!(Monomial::parse("x12").is_err());
    }

    #[test]
    fn exact_moments_of_simple_measures() {
        let one = AtomicMeasure::single_atom(0.49).unwrap();
        assert!((exact_moment(&one, &Monomial::power(1)).unwrap() - 0.49).abs() < 1e-15);
        assert!((exact_moment(&two_orthogonal(), &Monomial::power(1)).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exact_and_mc_agree() {
        let g: Vec<f64> = {
            let k = 6;
            let mut rng = StreamRng::seed_from_u64(9);
            let x: Vec<f64> = (0..k * 3).map(|_| crate::rng::std_normal(&mut rng) / 3.0).collect();
            let mut g = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    g[i * k + j] = (0..3).map(|d| x[i * 3 + d] * x[j * 3 + d]).sum();
                }
            }
            let m = (0..k).map(|i| g[i * k + i]).fold(0.0, f64::max);
            g.iter().map(|v| v / m).collect()
        };
        let w = vec![0.1, 0.2, 0.3, 0.15, 0.05, 0.2];
        let m = AtomicMeasure::from_gram("r", w, &g).unwrap();
        let e = RostEnsemble::fixed(m, 20);
        let cat = MomentCatalog::default();
        let ex = moment_vector(&e, &cat, MomentMode::Exact, 0, 1).unwrap();
        let mc = moment_vector(&e, &cat, MomentMode::Mc, 5000, 1).unwrap();
        for (a, b) in ex.entries.iter().zip(&mc.entries) {
            assert_eq!(a.stderr, 0.0);
            assert!(z_score(a.estimate - b.estimate, b.stderr).abs() < 4.0, "{}", a.name);
        }
        assert_eq!(rost_distance(&ex, &ex).unwrap().max_abs_diff, 0.0);
    }

    #[test]
    fn exact_mode_guard() {
        let m = AtomicMeasure::orthogonal(200, 1.0).unwrap();
        assert!(matches!(exact_moment(&m, &Monomial::parse("q12*q34").unwrap()), Err(RostError::Guard(_))));
    }

    #[test]
    fn distance_rejects_different_catalogs() {
        let e = RostEnsemble::fixed(two_orthogonal(), 3);
        let a = moment_vector(&e, &MomentCatalog::default(), MomentMode::Exact, 0, 1).unwrap();
        let b = moment_vector(&e, &MomentCatalog::from_names(&["q12"]).unwrap(), MomentMode::Exact, 0, 1).unwrap();
        assert_eq!(rost_distance(&a, &b), Err(RostError::CatalogMismatch));
    }

    #[test]
    fn radii_and_dimension() {
        assert_eq!(support_radii(&AtomicMeasure::single_atom(1.0).unwrap()).unwrap(), (1.0, 1.0));
        let m = AtomicMeasure::orthogonal(5, 0.25).unwrap();
        assert_eq!(support_radii(&m).unwrap(), (0.5, 0.5));
        assert_eq!(effective_dimension(&m).unwrap(), 5);
        assert_eq!(effective_dimension(&AtomicMeasure::single_atom(0.3).unwrap()).unwrap(), 1);
    }

    #[test]
    fn single_atom_is_ultrametric() {
        let e = RostEnsemble::fixed(AtomicMeasure::single_atom(0.7).unwrap(), 4);
        let u = ultrametricity_score(&e, 100, 5).unwrap();
        assert_eq!(u.violation_rate, 0.0);
        assert_eq!(triple_slack(0.0, 0.5, 0.5), -0.5);
    }

    #[test]
    fn duplicates_merge() {
        let c = Coordinates::Dense { dim: 1, data: vec![1.0, 1.0, 0.0] };
        let m = AtomicMeasure::from_coordinates("d", vec![0.25, 0.25, 0.5], c, None).unwrap();
        let merged = m.merge_duplicates().unwrap();
        assert_eq!(merged.weights(), &[0.5, 0.5]);
    }
}
