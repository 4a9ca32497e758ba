//! Cavity fields, the cavity map on sampling measures, and the testers for
//! stochastic stability, composition, Ghirlanda-Guerra identities and the
//! empirical linearization bound.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RostError};
use crate::rng::{fill_normals, keyed_normal, mix64, std_normal, stream, StreamRng};
use crate::rost_core::{
    exact_moment, inner_moments, normalize_log_weights, pick, AtomicMeasure, Coordinates, EnsembleSource, FeatureRow,
    MomentCatalog, MomentMode, Monomial, RostEnsemble, SpinKernel, TupleUniforms,
};
use crate::spin_models::ModelDescriptor;
use crate::stats::{linear_fit, log_cosh, mean, Estimate, LineFit, MomentEntry, MomentReport};

/// Dense coupling tensors up to this many entries are drawn outright; larger
/// ones are addressed through keyed normals.
const DENSE_TENSOR_CAP: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Psi {
    Linear,
    Logcosh,
}

impl Psi {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Psi::Linear => x,
            Psi::Logcosh => log_cosh(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavitySpec {
    pub psi: Psi,
    pub lambda: f64,
    /// `a_p` for `c(x) = sum_p a_p x^p`, indexed from `p = 0`.
    pub c_mix: Vec<f64>,
}

/// `sum_p a_p x^p`.
pub fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, a| acc * x + a)
}

impl CavitySpec {
    pub fn new(psi: Psi, lambda: f64, c_mix: Vec<f64>) -> Result<Self> {
        let s = CavitySpec { psi, lambda, c_mix };
        s.validate()?;
        Ok(s)
    }

    /// Linear `psi` with `c(x) = x`.
    pub fn linear(lambda: f64) -> Self {
        CavitySpec { psi: Psi::Linear, lambda, c_mix: vec![0.0, 1.0] }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return invalid("lambda must be finite and nonnegative");
        }
        if self.c_mix.is_empty() || self.c_mix.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return invalid("c mixture coefficients must be nonnegative");
        }
        let s: f64 = self.c_mix.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return invalid(format!("c mixture sums to {s}, not 1"));
        }
        Ok(())
    }

    pub fn c(&self, x: f64) -> f64 {
        poly(&self.c_mix, x)
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        CavitySpec { lambda, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavityFieldSample {
    pub values: Vec<f64>,
}

fn tuple_key(key: u64, p: usize, idx: &[u32]) -> u64 {
    let mut h = mix64(key ^ (p as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    for &i in idx {
        h = mix64(h ^ (i as u64 + 1));
    }
    h
}

/// Contracts a row-major `D^p` tensor against `phi` in every slot.
fn contract(t: &[f64], phi: &[f64], p: usize, scratch: &mut Vec<f64>) -> f64 {
    let d = phi.len();
    scratch.clear();
    scratch.extend_from_slice(t);
    for _ in 0..p {
        let n = scratch.len() / d;
        for r in 0..n {
            let s: f64 = scratch[r * d..(r + 1) * d].iter().zip(phi).map(|(a, b)| a * b).sum();
            scratch[r] = s;
        }
        scratch.truncate(n);
    }
    scratch[0]
}

/// Keyed contraction over all index tuples drawn from `idx` (with values).
fn keyed_term(key: u64, p: usize, idx: &[u32], val: &[f64]) -> f64 {
    let r = idx.len();
    if r == 0 {
        return 0.0;
    }
    let mut counter = vec![0usize; p];
    let mut tuple = vec![0u32; p];
    let mut total = 0.0;
    loop {
        let mut prod = 1.0;
        for (slot, &c) in counter.iter().enumerate() {
            tuple[slot] = idx[c];
            prod *= val[c];
        }
        total += prod * keyed_normal(tuple_key(key, p, &tuple), 0);
        let mut pos = p;
        loop {
            if pos == 0 {
                return total;
            }
            pos -= 1;
            counter[pos] += 1;
            if counter[pos] < r {
                break;
            }
            counter[pos] = 0;
        }
    }
}

/// Centered Gaussian field on the atoms with covariance
/// `sum_p coeffs[p] (v . v')^p`, realized as `sum_p sqrt(coeffs[p]) <G_p, v^{x p}>`
/// for independent standard Gaussian tensors `G_p`.
pub fn sample_field<R: Rng + ?Sized>(m: &AtomicMeasure, coeffs: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if coeffs.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return invalid("field covariance coefficients must be nonnegative");
    }
    let k = m.len();
    let coords = m.coordinates();
    let mut out = vec![0.0; k];
    for (p, &a) in coeffs.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let amp = a.sqrt();
        if p == 0 {
            let g = std_normal(rng);
            out.iter_mut().for_each(|o| *o += amp * g);
            continue;
        }
        match coords {
            Coordinates::Dense { dim, .. } if (*dim as f64).powi(p as i32) <= DENSE_TENSOR_CAP as f64 => {
                let mut t = vec![0.0; dim.pow(p as u32)];
                fill_normals(rng, &mut t);
                let mut scratch = Vec::with_capacity(t.len());
                for (i, o) in out.iter_mut().enumerate() {
                    if let FeatureRow::Dense(phi) = coords.row(i) {
                        *o += amp * contract(&t, phi, p, &mut scratch);
                    }
                }
            }
            Coordinates::Sparse { var, rows } if p == 1 && var.len() <= DENSE_TENSOR_CAP * 16 => {
                let mut g = vec![0.0; var.len()];
                fill_normals(rng, &mut g);
                for (gb, v) in g.iter_mut().zip(var) {
                    *gb *= v.sqrt();
                }
                for (o, row) in out.iter_mut().zip(rows) {
                    *o += amp * row.iter().map(|&b| g[b as usize]).sum::<f64>();
                }
            }
            _ => {
                let key: u64 = rng.random();
                for (i, o) in out.iter_mut().enumerate() {
                    let (idx, val): (Vec<u32>, Vec<f64>) = match coords.row(i) {
                        FeatureRow::Dense(phi) => {
                            phi.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(j, x)| (j as u32, *x)).unzip()
                        }
                        FeatureRow::Sparse { indices, var } => {
                            indices.iter().map(|&j| (j, var[j as usize].sqrt())).unzip()
                        }
                    };
                    *o += amp * keyed_term(key, p, &idx, &val);
                }
            }
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(RostError::NonFinite("cavity field".into()));
    }
    Ok(out)
}

pub fn sample_cavity_field<R: Rng + ?Sized>(m: &AtomicMeasure, spec: &CavitySpec, rng: &mut R) -> Result<CavityFieldSample> {
    spec.validate()?;
    Ok(CavityFieldSample { values: sample_field(m, &spec.c_mix, rng)? })
}

/// Per-atom log reweighting factor, z integrated out.
pub fn log_factors(m: &AtomicMeasure, spec: &CavitySpec, field: &[f64]) -> Vec<f64> {
    let l2 = 0.5 * spec.lambda * spec.lambda;
    field
        .iter()
        .zip(m.norms_sq())
        .map(|(l, n)| match spec.psi {
            Psi::Linear => spec.lambda * l - l2 * spec.c(*n),
            Psi::Logcosh => log_cosh(spec.lambda * l) + l2 * (1.0 - spec.c(*n)),
        })
        .collect()
}

/// Reweights `m` by `exp(log_factor)` and renormalizes. Positive weights stay
/// positive, zero weights stay zero.
pub fn reweight(m: &AtomicMeasure, log_factor: &[f64]) -> Result<AtomicMeasure> {
    if log_factor.len() != m.len() {
        return Err(RostError::LengthMismatch { expected: m.len(), got: log_factor.len() });
    }
    let lw: Vec<f64> =
        m.weights().iter().zip(log_factor).map(|(w, f)| if *w > 0.0 { w.ln() + f } else { f64::NEG_INFINITY }).collect();
    let mut w = normalize_log_weights(&lw);
    for (new, old) in w.iter_mut().zip(m.weights()) {
        if *old > 0.0 && *new == 0.0 {
            *new = f64::MIN_POSITIVE;
        }
    }
    m.with_weights(w)
}

/// The cavity map with a given field realization.
pub fn apply_cavity_map_with(m: &AtomicMeasure, spec: &CavitySpec, field: &[f64]) -> Result<AtomicMeasure> {
    if spec.lambda == 0.0 {
        return Ok(m.clone());
    }
    reweight(m, &log_factors(m, spec, field))
}

pub fn apply_cavity_map<R: Rng + ?Sized>(m: &AtomicMeasure, spec: &CavitySpec, rng: &mut R) -> Result<AtomicMeasure> {
    spec.validate()?;
    if spec.lambda == 0.0 {
        return Ok(m.clone());
    }
    let f = sample_field(m, &spec.c_mix, rng)?;
    apply_cavity_map_with(m, spec, &f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TesterBudget {
    pub fields_per_draw: usize,
    /// Replica tuples per inner expectation in Monte Carlo mode.
    pub tuples: usize,
    pub mode: MomentMode,
}

impl TesterBudget {
    pub fn mc(fields_per_draw: usize, tuples: usize) -> Self {
        TesterBudget { fields_per_draw, tuples, mode: MomentMode::Mc }
    }

    pub fn exact(fields_per_draw: usize) -> Self {
        TesterBudget { fields_per_draw, tuples: 0, mode: MomentMode::Exact }
    }

    fn validate(&self) -> Result<()> {
        if self.fields_per_draw == 0 || (self.mode == MomentMode::Mc && self.tuples == 0) {
            return invalid("tester budgets must be positive");
        }
        Ok(())
    }

    fn uniforms(&self, rng: &mut StreamRng, s: usize) -> TupleUniforms {
        match self.mode {
            MomentMode::Mc => TupleUniforms::draw(rng, self.tuples, s),
            MomentMode::Exact => TupleUniforms { s, u: Vec::new() },
        }
    }
}

/// Builds a report from per-draw `(baseline, mapped)` rows: the deficit is
/// `mapped - baseline`, tested against 0.
fn paired_report(names: Vec<String>, rows: &[(Vec<f64>, Vec<f64>)], seed: u64) -> MomentReport {
    let entries = names
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let base: Vec<f64> = rows.iter().map(|r| r.0[j]).collect();
            let mapped: Vec<f64> = rows.iter().map(|r| r.1[j]).collect();
            let diff: Vec<f64> = mapped.iter().zip(&base).map(|(a, b)| a - b).collect();
            let mut e = MomentEntry::new(name, Estimate::from_samples(&diff), 0.0);
            e.baseline = Some(mean(&base));
            e.mapped = Some(mean(&mapped));
            e
        })
        .collect();
    MomentReport { entries, seed, samples: rows.len() }
}

/// `E[(Phi mu)^{x s}(F)] - E[mu^{x s}(F)]` per monomial. Each draw is probed
/// before and after the map with the same replica uniforms.
pub fn stability_deficit(
    e: &RostEnsemble,
    spec: &CavitySpec,
    cat: &MomentCatalog,
    budget: TesterBudget,
    seed: u64,
) -> Result<MomentReport> {
    spec.validate()?;
    budget.validate()?;
    let s = cat.max_replicas();
    let rows = e.map_draws(|i, m| {
        let mut rng = stream(seed, "stability", i as u64);
        let u = budget.uniforms(&mut rng, s);
        let base = inner_moments(m, cat, budget.mode, &u)?;
        if spec.lambda == 0.0 {
            return Ok((base.clone(), base));
        }
        let mut acc = vec![0.0; cat.len()];
        for _ in 0..budget.fields_per_draw {
            let mapped = apply_cavity_map(m, spec, &mut rng)?;
            for (a, v) in acc.iter_mut().zip(inner_moments(&mapped, cat, budget.mode, &u)?) {
                *a += v;
            }
        }
        let f = budget.fields_per_draw as f64;
        Ok((base, acc.into_iter().map(|a| a / f).collect()))
    })?;
    Ok(paired_report(cat.names(), &rows, seed))
}

/// Largest gap between the log-weights of `Phi_{lambda2} o Phi_{lambda1}`
/// and of the single map at `sqrt(lambda1^2 + lambda2^2)` driven by the
/// combined field `(lambda1 l1 + lambda2 l2) / sqrt(lambda1^2 + lambda2^2)`.
pub fn compose_identity_gap<R: Rng + ?Sized>(
    m: &AtomicMeasure,
    lambda1: f64,
    lambda2: f64,
    c_mix: &[f64],
    rng: &mut R,
) -> Result<f64> {
    let s1 = CavitySpec::new(Psi::Linear, lambda1, c_mix.to_vec())?;
    let s2 = s1.with_lambda(lambda2);
    let big = (lambda1 * lambda1 + lambda2 * lambda2).sqrt();
    let sb = s1.with_lambda(big);
    let l1 = sample_field(m, c_mix, rng)?;
    let l2 = sample_field(m, c_mix, rng)?;
    let seq: Vec<f64> =
        log_factors(m, &s1, &l1).iter().zip(log_factors(m, &s2, &l2)).map(|(a, b)| a + b).collect();
    let combined: Vec<f64> = if big > 0.0 {
        l1.iter().zip(&l2).map(|(a, b)| (lambda1 * a + lambda2 * b) / big).collect()
    } else {
        vec![0.0; m.len()]
    };
    let single = log_factors(m, &sb, &combined);
    Ok(seq.iter().zip(&single).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Moments after `Phi_{lambda2} o Phi_{lambda1}` against moments after
/// `Phi_{sqrt(lambda1^2 + lambda2^2)}`, linear `psi`, fresh fields per branch.
pub fn compose_check(
    e: &RostEnsemble,
    lambda1: f64,
    lambda2: f64,
    c_mix: &[f64],
    cat: &MomentCatalog,
    budget: TesterBudget,
    seed: u64,
) -> Result<MomentReport> {
    budget.validate()?;
    let s1 = CavitySpec::new(Psi::Linear, lambda1, c_mix.to_vec())?;
    let s2 = s1.with_lambda(lambda2);
    let sb = s1.with_lambda((lambda1 * lambda1 + lambda2 * lambda2).sqrt());
    let s = cat.max_replicas();
    let rows = e.map_draws(|i, m| {
        let mut rng = stream(seed, "compose", i as u64);
        let u = budget.uniforms(&mut rng, s);
        let mut two = vec![0.0; cat.len()];
        let mut one = vec![0.0; cat.len()];
        for _ in 0..budget.fields_per_draw {
            let a = apply_cavity_map(&apply_cavity_map(m, &s1, &mut rng)?, &s2, &mut rng)?;
            let b = apply_cavity_map(m, &sb, &mut rng)?;
            for (acc, v) in two.iter_mut().zip(inner_moments(&a, cat, budget.mode, &u)?) {
                *acc += v;
            }
            for (acc, v) in one.iter_mut().zip(inner_moments(&b, cat, budget.mode, &u)?) {
                *acc += v;
            }
        }
        let f = budget.fields_per_draw as f64;
        Ok((one.into_iter().map(|x| x / f).collect(), two.into_iter().map(|x| x / f).collect()))
    })?;
    Ok(paired_report(cat.names(), &rows, seed))
}

fn times(f: &Monomial, a: usize, b: usize, k: u32) -> Monomial {
    let mut factors = f.factors.clone();
    match factors.iter_mut().find(|x| x.0 == a && x.1 == b) {
        Some(x) => x.2 += k,
        None => factors.push((a, b, k)),
    }
    Monomial { factors }
}

/// Ghirlanda-Guerra residuals with `q` replaced by `q^p`:
/// `E mu^{x s+1}(q_{1,s+1}^p F) - (1/s) E mu^{x2}(q^p) E mu^{x s}(F)
///  - (1/s) sum_{l=2}^s E mu^{x s}(q_{1l}^p F)` for every `F` of the
/// catalog living on at most `s` replicas. Stderrs by the delta method.
pub fn gg_deficit(
    e: &RostEnsemble,
    s: usize,
    p_power: u32,
    cat: &MomentCatalog,
    budget: TesterBudget,
    seed: u64,
) -> Result<MomentReport> {
    if !(2..=3).contains(&s) || p_power == 0 {
        return invalid("GG tester needs s in {2, 3} and p >= 1");
    }
    budget.validate()?;
    let fs: Vec<&Monomial> = cat.monomials.iter().filter(|f| f.replicas() <= s).collect();
    if fs.is_empty() {
        return invalid("no catalog entry lives on s replicas");
    }
    // evaluation catalog: q12^p, then per F: [F q_{1,s+1}^p, F, F q_{1l}^p for l = 2..s]
    let mut evals = vec![Monomial::power(p_power)];
    for f in &fs {
        evals.push(times(f, 0, s, p_power));
        evals.push((*f).clone());
        for l in 1..s {
            evals.push(times(f, 0, l, p_power));
        }
    }
    let big = MomentCatalog { monomials: evals };
    let width = s + 1;
    let rows = e.map_draws(|i, m| {
        let mut rng = stream(seed, "gg", i as u64);
        let u = budget.uniforms(&mut rng, s + 1);
        inner_moments(m, &big, budget.mode, &u)
    })?;
    let n = rows.len() as f64;
    let col_mean = |j: usize| rows.iter().map(|r| r[j]).sum::<f64>() / n;
    let b_bar = col_mean(0);
    let inv_s = 1.0 / s as f64;
    let entries = fs
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let base = 1 + t * width;
            let a_bar = col_mean(base);
            let c_bar = col_mean(base + 1);
            let d_bar: f64 = (0..s - 1).map(|l| col_mean(base + 2 + l)).sum();
            let lin: Vec<f64> = rows
                .iter()
                .map(|r| {
                    let d: f64 = (0..s - 1).map(|l| r[base + 2 + l]).sum();
                    r[base] - inv_s * (r[0] * c_bar + b_bar * r[base + 1]) - inv_s * d
                })
                .collect();
            let residual = a_bar - inv_s * b_bar * c_bar - inv_s * d_bar;
            let mut est = Estimate::from_samples(&lin);
            est.mean = residual;
            let mut e = MomentEntry::new(format!("gg[{};s={s};p={p_power}]", f.name()), est, 0.0);
            e.baseline = Some(a_bar);
            e.mapped = Some(inv_s * b_bar * c_bar + inv_s * d_bar);
            e
        })
        .collect();
    Ok(MomentReport { entries, seed, samples: e.size })
}

/// What is averaged in the empirical linearization check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearizationTarget {
    /// `G(v, z, l) = exp(psi(lambda (l(v) + z sqrt(1 - c(|v|^2)))))`.
    CavityFactor,
    Constant(f64),
    Monomial(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizationRow {
    pub n: usize,
    /// Root-mean-square error of the empirical average.
    pub rms_error: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizationTable {
    pub rows: Vec<LinearizationRow>,
    /// Fit of `log rms_error` against `log n`; absent for degenerate targets.
    pub fit: Option<LineFit>,
    pub degenerate: bool,
}

/// Measures how fast `(1/n) sum_r F(v^r, z^r, l)` approaches its
/// `(mu x E_z)^{x s}` mean, averaging the squared error over `reps` cavity
/// fields and samples, then fits the log-log slope of the RMS error.
pub fn empirical_linearization_check(
    m: &AtomicMeasure,
    spec: &CavitySpec,
    target: &LinearizationTarget,
    n_grid: &[usize],
    reps: usize,
    seed: u64,
) -> Result<LinearizationTable> {
    spec.validate()?;
    if n_grid.len() < 2 || n_grid.contains(&0) || reps < 2 {
        return invalid("need two or more positive n values and reps >= 2");
    }
    let mono = match target {
        LinearizationTarget::Monomial(name) => Some(Monomial::parse(name)?),
        _ => None,
    };
    let exact_mono = match &mono {
        Some(f) => Some(exact_moment(m, f)?),
        None => None,
    };
    let cdf = m.cdf();
    let lam = spec.lambda;
    let rows: Vec<LinearizationRow> = n_grid
        .iter()
        .enumerate()
        .map(|(gi, &n)| {
            let sq: Vec<f64> = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let mut rng = stream(seed, "linearization", (gi * reps + r) as u64);
                    match target {
                        LinearizationTarget::Constant(_) => Ok(0.0),
                        LinearizationTarget::Monomial(_) => {
                            let f = mono.as_ref().expect("parsed");
                            let s = f.replicas();
                            let mut acc = 0.0;
                            let mut idx = vec![0usize; s];
                            for _ in 0..n {
                                for slot in idx.iter_mut() {
                                    *slot = pick(&cdf, rng.random());
                                }
                                acc += f.eval(|a, b| m.inner(idx[a], idx[b]));
                            }
                            Ok((acc / n as f64 - exact_mono.expect("exact")).powi(2))
                        }
                        LinearizationTarget::CavityFactor => {
                            let l = sample_field(m, &spec.c_mix, &mut rng)?;
                            let sd: Vec<f64> =
                                m.norms_sq().iter().map(|q| (1.0 - spec.c(*q)).max(0.0).sqrt()).collect();
                            let exact: f64 = m
                                .weights()
                                .iter()
                                .enumerate()
                                .map(|(i, w)| {
                                    let v = 0.5 * lam * lam * sd[i] * sd[i];
                                    w * match spec.psi {
                                        Psi::Linear => (lam * l[i] + v).exp(),
                                        Psi::Logcosh => v.exp() * (lam * l[i]).cosh(),
                                    }
                                })
                                .sum();
                            let mut acc = 0.0;
                            for _ in 0..n {
                                let i = pick(&cdf, rng.random());
                                let z = std_normal(&mut rng);
                                acc += spec.psi.eval(lam * (l[i] + z * sd[i])).exp();
                            }
                            Ok((acc / n as f64 - exact).powi(2))
                        }
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            let mse = Estimate::from_samples(&sq);
            let rms = mse.mean.sqrt();
            let stderr = if rms > 0.0 { mse.stderr / (2.0 * rms) } else { 0.0 };
            Ok(LinearizationRow { n, rms_error: rms, stderr })
        })
        .collect::<Result<_>>()?;
    let degenerate = rows.iter().all(|r| r.rms_error == 0.0);
    let fit = if degenerate || rows.iter().any(|r| r.rms_error <= 0.0) {
        None
    } else {
        let x: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.rms_error.ln()).collect();
        Some(linear_fit(&x, &y)?)
    };
    Ok(LinearizationTable { rows, fit, degenerate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub n: usize,
    pub max_abs_deficit: f64,
    pub max_abs_z: f64,
    pub report: MomentReport,
}

/// Stability deficits of the Gibbs sampling measures along a sequence of
/// system sizes. Linear `psi`, field covariance `c(x) = x` on the kernel.
#[allow(clippy::too_many_arguments)]
pub fn sequence_stability_scan(
    model: &ModelDescriptor,
    beta: f64,
    kernel: SpinKernel,
    lambda: f64,
    n_list: &[usize],
    cat: &MomentCatalog,
    draws: usize,
    budget: TesterBudget,
    seed: u64,
) -> Result<Vec<ScanRow>> {
    if n_list.is_empty() {
        return invalid("empty size list");
    }
    let spec = CavitySpec::new(Psi::Linear, lambda, vec![0.0, 1.0])?;
    n_list
        .iter()
        .map(|&n| {
            let desc = model.with_n(n);
            desc.validate()?;
            let e = RostEnsemble::new(EnsembleSource::Gibbs { model: desc, beta, kernel }, seed, draws)?;
            let report = stability_deficit(&e, &spec, cat, budget, seed)?;
            let max_abs_deficit = report.entries.iter().map(|x| x.estimate.abs()).fold(0.0, f64::max);
            Ok(ScanRow { n, max_abs_deficit, max_abs_z: report.max_abs_z(), report })
        })
        .collect()
}
