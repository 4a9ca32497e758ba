//! Parisi functionals by cascade sampling and by backward recursion, the
//! Guerra right-hand side and its minimization over cascade parameters, the
//! one-site increment decomposition and a Lipschitz panel.

use std::f64::consts::{LN_2, PI};
use std::sync::Mutex;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use gauss_quad::GaussHermite;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascades::RpcSpec;
use crate::cavity_map::{sample_field, Psi};
use crate::error::{invalid, Result, RostError};
use crate::gibbs_exact::{disorder_seed, enumerate_gibbs, MAX_ENUMERATION_SITES};
use crate::rng::stream;
use crate::rost_core::{
    moment_samples, rost_from_gibbs, AtomicMeasure, EnsembleSource, MomentCatalog, MomentMode, Monomial, RostEnsemble,
    SpinKernel,
};
use crate::spin_models::{build_disorder, MixedCouplings, ModelDescriptor};
use crate::stats::{log_sum_exp, pooled_stderr, z_score, Estimate, Z_THRESHOLD};

pub const DEFAULT_QUAD_NODES: usize = 96;
/// Target y-grid spacing of the recursion; halved by the convergence check.
const GRID_SPACING: f64 = 0.04;
/// Largest change allowed when nodes and grid are doubled.
pub const RECURSION_TOL: f64 = 1e-6;
/// Lipschitz constant of the Parisi functional in `lambda`, estimated once on
/// a calibration panel of cascades, Gibbs measures and counterexamples with
/// `|lambda| <= 2`, then frozen.
pub const LIPSCHITZ_K_HAT: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParisiParams {
    /// `lambda_p`, indexed from `p = 0`.
    pub lambda: Vec<f64>,
    pub psi: Psi,
}

impl ParisiParams {
    pub fn new(lambda: Vec<f64>, psi: Psi) -> Result<Self> {
        if lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return invalid("lambda entries must be finite and nonnegative");
        }
        Ok(ParisiParams { lambda, psi })
    }

    /// `(lambda_beta)_{p-1} = sqrt(p) beta_p`.
    pub fn from_beta(beta: &MixedCouplings, psi: Psi) -> Self {
        let top = beta.terms().iter().map(|(p, _)| *p).max().unwrap_or(0);
        let mut lambda = vec![0.0; top.max(1)];
        for &(p, b) in beta.terms() {
            lambda[p - 1] = (p as f64).sqrt() * b;
        }
        ParisiParams { lambda, psi }
    }

    /// `lambda_p = sqrt(p - 1) beta_p`, the linear representation of the
    /// Guerra correction term.
    pub fn correction_params(beta: &MixedCouplings) -> Self {
        let top = beta.terms().iter().map(|(p, _)| *p).max().unwrap_or(0);
        let mut lambda = vec![0.0; top + 1];
        for &(p, b) in beta.terms() {
            lambda[p] = ((p - 1) as f64).sqrt() * b;
        }
        ParisiParams { lambda, psi: Psi::Linear }
    }

    pub fn coeffs(&self) -> Vec<f64> {
        self.lambda.iter().map(|l| l * l).collect()
    }

    /// `xi(q) = sum_p lambda_p^2 q^p`.
    pub fn xi(&self, q: f64) -> f64 {
        self.lambda.iter().enumerate().map(|(p, l)| l * l * q.powi(p as i32)).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.lambda.iter().map(|l| l * l).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.lambda.iter().all(|l| *l == 0.0)
    }
}

fn field_value(m: &AtomicMeasure, params: &ParisiParams, field: &[f64]) -> f64 {
    let terms: Vec<f64> = m
        .weights()
        .iter()
        .zip(field)
        .zip(m.norms_sq())
        .filter(|((w, _), _)| **w > 0.0)
        .map(|((w, l), n)| w.ln() + params.psi.eval(*l) - 0.5 * params.xi(*n))
        .collect();
    log_sum_exp(&terms)
}

/// Per-draw sample means of `log mu(exp(psi(L) - xi(|v|^2)/2))` over
/// `n_fields` independent fields, shifted by `lambda^2 / 2`.
fn functional_samples(e: &RostEnsemble, params: &ParisiParams, n_fields: usize, seed: u64) -> Result<Vec<f64>> {
    let coeffs = params.coeffs();
    let shift = 0.5 * params.norm_sq();
    e.map_draws(|i, m| {
        let mut rng = stream(seed, "parisi-fields", i as u64);
        let mut acc = 0.0;
        for _ in 0..n_fields {
            let l = sample_field(m, &coeffs, &mut rng)?;
            acc += field_value(m, params, &l);
        }
        Ok(shift + acc / n_fields as f64)
    })
}

/// Monte Carlo Parisi functional of an ensemble.
pub fn parisi_functional_mc(e: &RostEnsemble, params: &ParisiParams, n_fields: usize, seed: u64) -> Result<Estimate> {
    if n_fields == 0 {
        return invalid("need at least one field per draw");
    }
    if params.is_zero() {
        return Ok(Estimate { mean: 0.0, stderr: 0.0, n: e.size });
    }
    Ok(Estimate::from_samples(&functional_samples(e, params, n_fields, seed)?))
}

/// Natural cubic spline on a uniform grid, extended linearly outside it.
struct Spline {
    x0: f64,
    h: f64,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Spline {
    fn new(x0: f64, h: f64, y: Vec<f64>) -> Self {
        let n = y.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm for M_{i-1} + 4 M_i + M_{i+1} = 6 d2_i, M_0 = M_{n-1} = 0.
            let k = n - 2;
            let mut c = vec![0.0; k];
            let mut d = vec![0.0; k];
            for i in 0..k {
                let rhs = 6.0 * (y[i + 2] - 2.0 * y[i + 1] + y[i]) / (h * h);
                let denom = if i == 0 { 4.0 } else { 4.0 - c[i - 1] };
                c[i] = 1.0 / denom;
                d[i] = if i == 0 { rhs / denom } else { (rhs - d[i - 1]) / denom };
            }
            for i in (0..k).rev() {
                m[i + 1] = if i == k - 1 { d[i] } else { d[i] - c[i] * m[i + 2] };
            }
        }
        Spline { x0, h, y, m }
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.y.len() - 1;
        let (y, m, h) = (&self.y, &self.m, self.h);
        let t = (x - self.x0) / h;
        if t <= 0.0 {
            let slope = (y[1] - y[0]) / h - h * (2.0 * m[0] + m[1]) / 6.0;
            return y[0] + slope * (x - self.x0);
        }
        if t >= n as f64 {
            let slope = (y[n] - y[n - 1]) / h + h * (2.0 * m[n] + m[n - 1]) / 6.0;
            return y[n] + slope * (x - self.x0 - n as f64 * h);
        }
        let i = (t.floor() as usize).min(n - 1);
        let a = t - i as f64;
        let b = 1.0 - a;
        b * y[i] + a * y[i + 1] + ((b * b * b - b) * m[i] + (a * a * a - a) * m[i + 1]) * h * h / 6.0
    }
}

enum Level {
    Psi(Psi),
    Grid(Spline),
}

impl Level {
    fn eval(&self, y: f64) -> f64 {
        match self {
            Level::Psi(p) => p.eval(y),
            Level::Grid(s) => s.eval(y),
        }
    }
}

/// Standard-normal nodes and log weights.
fn normal_rule(nodes: usize) -> Result<Vec<(f64, f64)>> {
    let gh = GaussHermite::new(nodes).map_err(|e| RostError::Quadrature(e.to_string()))?;
    Ok(gh
        .as_node_weight_pairs()
        .into_iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(t, w)| (std::f64::consts::SQRT_2 * t, (w / PI.sqrt()).ln()))
        .collect())
}

fn level_variances(spec: &RpcSpec, params: &ParisiParams) -> Vec<f64> {
    let mut s2 = vec![params.xi(spec.q[0]).max(0.0)];
    s2.extend((1..=spec.k).map(|l| (params.xi(spec.q[l]) - params.xi(spec.q[l - 1])).max(0.0)));
    s2
}

fn recursion_once(spec: &RpcSpec, params: &ParisiParams, nodes: usize, refine: usize) -> Result<f64> {
    let rule = normal_rule(nodes)?;
    let s2 = level_variances(spec, params);
    let total = params.xi(spec.q[spec.k]);
    let half_width = 8.0 * total.sqrt() + 2.0;
    let grid = (2.0 * half_width * refine as f64 / GRID_SPACING).ceil() as usize + 1;
    let h = 2.0 * half_width / (grid - 1) as f64;
    let ys: Vec<f64> = (0..grid).map(|i| -half_width + i as f64 * h).collect();
    let mut level = Level::Psi(params.psi);
    for l in (1..=spec.k).rev() {
        if s2[l] == 0.0 {
            continue;
        }
        let s = s2[l].sqrt();
        let x = spec.x[l - 1];
        let vals: Vec<f64> = ys
            .iter()
            .map(|&y| {
                let terms: Vec<f64> = rule.iter().map(|(z, lw)| lw + x * level.eval(y + s * z)).collect();
                log_sum_exp(&terms) / x
            })
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(RostError::NonFinite("Parisi recursion".into()));
        }
        level = Level::Grid(Spline::new(-half_width, h, vals));
    }
    let root = if s2[0] == 0.0 {
        level.eval(0.0)
    } else {
        let s0 = s2[0].sqrt();
        rule.iter().map(|(z, lw)| lw.exp() * level.eval(s0 * z)).sum()
    };
    Ok(0.5 * params.norm_sq() - 0.5 * total + root)
}

/// Parisi functional of the untruncated cascade `spec` by backward recursion,
/// without the node-doubling check.
pub fn parisi_recursion_unchecked(spec: &RpcSpec, params: &ParisiParams, quad_nodes: usize) -> Result<f64> {
    spec.validate()?;
    if params.is_zero() {
        return Ok(0.0);
    }
    if params.psi == Psi::Linear {
        return Ok(linear_closed_form(spec, params));
    }
    recursion_once(spec, params, quad_nodes, 1)
}

/// `lambda^2/2 - xi(q_k)/2 + sum_l x_l (xi(q_l) - xi(q_{l-1}))/2` for `psi(y) = y`.
pub fn linear_closed_form(spec: &RpcSpec, params: &ParisiParams) -> f64 {
    let s2 = level_variances(spec, params);
    let tail: f64 = (1..=spec.k).map(|l| spec.x[l - 1] * s2[l]).sum();
    0.5 * params.norm_sq() - 0.5 * params.xi(spec.q[spec.k]) + 0.5 * tail
}

/// Recursion route with a convergence check: doubling the quadrature nodes
/// and the grid must move the value by at most [`RECURSION_TOL`].
pub fn parisi_recursion_rpc(spec: &RpcSpec, params: &ParisiParams, quad_nodes: usize) -> Result<f64> {
    spec.validate()?;
    if quad_nodes < 2 {
        return invalid("need at least two quadrature nodes");
    }
    if params.is_zero() {
        return Ok(0.0);
    }
    let coarse = recursion_once(spec, params, quad_nodes, 1)?;
    let fine = recursion_once(spec, params, 2 * quad_nodes, 2)?;
    if (coarse - fine).abs() > RECURSION_TOL {
        return Err(RostError::Quadrature(format!("node doubling moved the value by {:e}", (coarse - fine).abs())));
    }
    Ok(fine)
}

/// `sum_p ((p-1) beta_p^2 / 2) (1 - E q12^p)` given the moments `E q12^p`.
fn correction_from(beta: &MixedCouplings, moment: impl Fn(u32) -> f64) -> f64 {
    beta.terms().iter().map(|&(p, b)| 0.5 * (p as f64 - 1.0) * b * b * (1.0 - moment(p as u32))).sum()
}

/// Sampling budgets for the Monte Carlo side of [`guerra_rhs`]; `ensemble = 0`
/// keeps only the deterministic route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuerraBudget {
    pub ensemble: usize,
    pub fields: usize,
    pub tuples: usize,
    pub quad_nodes: usize,
    pub seed: u64,
}

impl Default for GuerraBudget {
    fn default() -> Self {
        GuerraBudget { ensemble: 0, fields: 50, tuples: 2000, quad_nodes: DEFAULT_QUAD_NODES, seed: 0 }
    }
}

/// Cross-check of the correction term on sampled cascades: direct moments vs
/// the linear Parisi functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionCheck {
    pub direct: Estimate,
    pub linear_functional: Estimate,
    /// Paired difference `direct - linear_functional`.
    pub difference: Estimate,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuerraEvaluation {
    pub spec: RpcSpec,
    pub beta: MixedCouplings,
    pub parisi_term: Estimate,
    pub correction_term: Estimate,
    pub rhs_total: Estimate,
    pub check: Option<CorrectionCheck>,
}

fn deterministic_rhs(spec: &RpcSpec, beta: &MixedCouplings, quad_nodes: usize, checked: bool) -> Result<(f64, f64)> {
    let params = ParisiParams::from_beta(beta, Psi::Logcosh);
    let parisi = if checked {
        parisi_recursion_rpc(spec, &params, quad_nodes)?
    } else {
        parisi_recursion_unchecked(spec, &params, quad_nodes)?
    };
    Ok((parisi, correction_from(beta, |p| spec.overlap_moment(p))))
}

/// `log 2 + P(lambda_beta, spec) - sum_p ((p-1) beta_p^2 / 2)(1 - E q12^p)`,
/// with the functional from the recursion and the moments from the cascade's
/// overlap law.
pub fn guerra_rhs(spec: &RpcSpec, beta: &MixedCouplings, budget: &GuerraBudget) -> Result<GuerraEvaluation> {
    spec.validate()?;
    let (parisi, correction) = deterministic_rhs(spec, beta, budget.quad_nodes, true)?;
    let rhs = if beta.is_zero() { LN_2 } else { LN_2 + parisi - correction };
    let check = if budget.ensemble > 0 && !beta.is_zero() { Some(correction_check(spec, beta, budget)?) } else { None };
    Ok(GuerraEvaluation {
        spec: spec.clone(),
        beta: beta.clone(),
        parisi_term: Estimate::exact(parisi),
        correction_term: Estimate::exact(correction),
        rhs_total: Estimate::exact(rhs),
        check,
    })
}

/// Correction term measured on sampled truncated cascades, once from overlap
/// moments and once as the linear Parisi functional.
pub fn correction_check(spec: &RpcSpec, beta: &MixedCouplings, budget: &GuerraBudget) -> Result<CorrectionCheck> {
    let e = RostEnsemble::new(EnsembleSource::Rpc(spec.clone()), budget.seed, budget.ensemble)?;
    let ps: Vec<u32> = beta.terms().iter().map(|(p, _)| *p as u32).collect();
    let cat = MomentCatalog { monomials: ps.iter().map(|&p| Monomial::power(p)).collect() };
    let rows = moment_samples(&e, &cat, MomentMode::Mc, budget.tuples, budget.seed)?;
    let direct: Vec<f64> = rows.iter().map(|r| correction_from(beta, |p| r[ps.iter().position(|q| *q == p).unwrap()])).collect();
    let lin = functional_samples(&e, &ParisiParams::correction_params(beta), budget.fields, budget.seed)?;
    let diff: Vec<f64> = direct.iter().zip(&lin).map(|(a, b)| a - b).collect();
    let difference = Estimate::from_samples(&diff);
    Ok(CorrectionCheck {
        direct: Estimate::from_samples(&direct),
        linear_functional: Estimate::from_samples(&lin),
        difference,
        z: difference.z_against(0.0),
    })
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Stick-breaking map from `2k + 1` reals to `(x, q)`.
fn decode(theta: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = Vec::with_capacity(k);
    let mut prev = 0.0;
    for u in &theta[..k] {
        prev += (1.0 - prev) * logistic(*u);
        x.push(prev.min(1.0 - 1e-15));
    }
    for i in 1..k {
        if x[i] <= x[i - 1] {
            x[i] = x[i - 1] + f64::EPSILON;
        }
    }
    let mut q = Vec::with_capacity(k + 1);
    let mut prev = 0.0;
    for v in &theta[k..] {
        prev += (1.0 - prev) * logistic(*v);
        q.push(prev.min(1.0));
    }
    (x, q)
}

fn encode(x: &[f64], q: &[f64]) -> Vec<f64> {
    let mut theta = Vec::with_capacity(x.len() + q.len());
    let mut prev = 0.0;
    for &xi in x {
        theta.push(logit((xi - prev) / (1.0 - prev)));
        prev = xi;
    }
    let mut prev = 0.0;
    for &qi in q {
        theta.push(if prev >= 1.0 { 0.0 } else { logit((qi - prev) / (1.0 - prev)) });
        prev = qi;
    }
    theta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub start: usize,
    pub iteration: usize,
    pub x: Vec<f64>,
    pub q: Vec<f64>,
    pub value: f64,
}

struct GuerraCost<'a> {
    beta: &'a MixedCouplings,
    k: usize,
    quad_nodes: usize,
    trace: Mutex<Vec<(Vec<f64>, Vec<f64>, f64)>>,
}

impl GuerraCost<'_> {
    fn value(&self, x: &[f64], q: &[f64]) -> f64 {
        let Ok(spec) = RpcSpec::new(x.to_vec(), q.to_vec(), 2) else { return f64::INFINITY };
        match deterministic_rhs(&spec, self.beta, self.quad_nodes, false) {
            Ok((p, c)) => LN_2 + p - c,
            Err(_) => f64::INFINITY,
        }
    }
}

impl CostFunction for GuerraCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, theta: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let (x, q) = decode(theta, self.k);
        let v = self.value(&x, &q);
        self.trace.lock().expect("trace lock").push((x, q, v));
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelOptimum {
    pub k: usize,
    pub spec: RpcSpec,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuerraMinimum {
    pub best: RpcSpec,
    pub evaluation: GuerraEvaluation,
    pub per_level: Vec<LevelOptimum>,
    pub trace: Vec<TraceRow>,
    /// Every start hit the iteration cap without meeting the simplex tolerance.
    pub converged: bool,
}

pub const MULTISTARTS: usize = 8;
const NM_MAX_ITERS: u64 = 600;

/// Minimizes the Guerra right-hand side over `k`-level cascades for
/// `k = 1..=k_max`, with [`MULTISTARTS`] Nelder-Mead starts per level. One
/// start of each level embeds the previous optimum, so the per-level values
/// never increase.
pub fn minimize_guerra(beta: &MixedCouplings, k_max: usize, budget: &GuerraBudget, seed: u64) -> Result<GuerraMinimum> {
    if !(1..=3).contains(&k_max) {
        return invalid("k_max must be 1, 2 or 3");
    }
    let mut per_level: Vec<LevelOptimum> = Vec::new();
    let mut trace = Vec::new();
    let mut converged = true;
    for k in 1..=k_max {
        let embedded = per_level.last().map(|prev| {
            let mut x = prev.spec.x.clone();
            x.push(0.5 * (x[k - 2] + 1.0));
            let mut q = prev.spec.q.clone();
            q.push(q[k - 1]);
            (x, q)
        });
        let starts: Vec<Vec<f64>> = (0..MULTISTARTS)
            .map(|j| match (&embedded, j) {
                (Some((x, q)), 0) => encode(x, q),
                _ => {
                    let mut rng = stream(seed, "guerra-start", (k * MULTISTARTS + j) as u64);
                    (0..2 * k + 1).map(|_| rng.random_range(-3.0..3.0)).collect()
                }
            })
            .collect();
        let runs: Vec<(Vec<f64>, f64, bool, Vec<(Vec<f64>, Vec<f64>, f64)>)> = starts
            .par_iter()
            .map(|theta0| {
                let cost = GuerraCost { beta, k, quad_nodes: budget.quad_nodes, trace: Mutex::new(Vec::new()) };
                let mut simplex = vec![theta0.clone()];
                for i in 0..theta0.len() {
                    let mut v = theta0.clone();
                    v[i] += 0.7;
                    simplex.push(v);
                }
                let solver = NelderMead::new(simplex)
                    .with_sd_tolerance(1e-11)
                    .map_err(|e| RostError::InvalidParameter(e.to_string()))?;
                let res = Executor::new(cost, solver)
                    .configure(|s| s.max_iters(NM_MAX_ITERS))
                    .run()
                    .map_err(|e| RostError::InvalidParameter(e.to_string()))?;
                let state = res.state();
                let best = state.get_best_param().cloned().unwrap_or_else(|| theta0.clone());
                let value = state.get_best_cost();
                let hit_cap = state.get_iter() >= NM_MAX_ITERS;
                let rows = res.problem.problem.map(|c| c.trace.into_inner().expect("trace lock")).unwrap_or_default();
                Ok((best, value, hit_cap, rows))
            })
            .collect::<Result<_>>()?;
        let mut best: Option<(RpcSpec, f64)> = None;
        for (j, (theta, value, hit_cap, rows)) in runs.into_iter().enumerate() {
            converged &= !hit_cap;
            for (it, (x, q, v)) in rows.into_iter().enumerate() {
                trace.push(TraceRow { k, start: j, iteration: it, x, q, value: v });
            }
            let (x, q) = decode(&theta, k);
            if let Ok(spec) = RpcSpec::new(x, q, budget_truncation(k)) {
                if value.is_finite() && best.as_ref().is_none_or(|(_, b)| value < *b) {
                    best = Some((spec, value));
                }
            }
        }
        if let Some((x, q)) = embedded {
            let prev = per_level.last().expect("previous level").value;
            if best.as_ref().is_none_or(|(_, b)| *b > prev) {
                best = Some((RpcSpec::new(x, q, budget_truncation(k))?, prev));
            }
        }
        let (spec, _) = best.ok_or_else(|| RostError::Degenerate("no finite Guerra value found".into()))?;
        let (p, c) = deterministic_rhs(&spec, beta, budget.quad_nodes, false)?;
        let value = if beta.is_zero() { LN_2 } else { LN_2 + p - c };
        let value = per_level.last().map_or(value, |prev| value.min(prev.value));
        per_level.push(LevelOptimum { k, spec, value });
    }
    let top = per_level.iter().min_by(|a, b| a.value.total_cmp(&b.value)).expect("at least one level");
    let best = top.spec.clone();
    let evaluation = guerra_rhs(&best, beta, budget)?;
    Ok(GuerraMinimum { best, evaluation, per_level, trace, converged })
}

/// Truncation used when a minimizing spec is sampled as a cascade.
fn budget_truncation(k: usize) -> usize {
    match k {
        1 => 1000,
        2 => 100,
        _ => 30,
    }
}

pub const TRACE_CSV_HEADER: &str = "k,start,iteration,x,q,value\n";

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let join = |v: &[f64]| v.iter().map(|a| format!("{a}")).collect::<Vec<_>>().join(";");
    let mut out = String::from(TRACE_CSV_HEADER);
    for r in trace {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.k, r.start, r.iteration, join(&r.x), join(&r.q), r.value));
    }
    out
}

/// `{beta, k, x, q, rhs, parisi_term, correction, stderrs}`.
pub fn minimum_json(min: &GuerraMinimum) -> String {
    let ev = &min.evaluation;
    serde_json::json!({
        "beta": ev.beta,
        "k": min.best.k,
        "x": min.best.x,
        "q": min.best.q,
        "rhs": ev.rhs_total.mean,
        "parisi_term": ev.parisi_term.mean,
        "correction": ev.correction_term.mean,
        "stderrs": {
            "rhs": ev.rhs_total.stderr,
            "parisi_term": ev.parisi_term.stderr,
            "correction": ev.correction_term.stderr,
        },
    })
    .to_string()
}

/// Decomposition of `log Z_{N+1} - log Z_N` into the cavity prediction and
/// the temperature shift, all on shared disorder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssReport {
    pub n: usize,
    /// (a) `E log Z_{N+1}(beta) / Z_N(beta)`.
    pub direct: Estimate,
    /// (b) `log 2 + P(lambda_beta, ROSt(G_N))` with the cavity couplings of each draw.
    pub cavity: Estimate,
    /// (b) with freshly sampled cavity fields.
    pub cavity_fresh: Estimate,
    /// (c) `E log Z_{N+1}(beta+) / Z_{N+1}(beta)`.
    pub shift: Estimate,
    /// `(a) - ((b) - (c))` per draw.
    pub discrepancy: Estimate,
    /// Mean square of the per-draw discrepancy, the variance of the
    /// remainder field.
    pub discrepancy_sq: Estimate,
    /// `sum_p 2^p beta_p^2 / N`.
    pub bound: f64,
    /// First-order value of (c): `sum_p (N+1) beta_p (1 - E R^p)(beta+_p - beta_p)` at size `N+1`.
    pub shift_target: Estimate,
    pub within_bound: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssBudget {
    pub n_disorder: usize,
    pub fields: usize,
}

/// `beta_p ((N+1)/N)^{(p-1)/2}`.
pub fn beta_plus(beta: &MixedCouplings, n: usize) -> Result<MixedCouplings> {
    let r = (n as f64 + 1.0) / n as f64;
    MixedCouplings::new(beta.terms().iter().map(|&(p, b)| (p, b * r.powf((p as f64 - 1.0) / 2.0))))
}

pub fn ass_increment(model: &ModelDescriptor, n: usize, budget: &AssBudget, seed: u64) -> Result<AssReport> {
    let desc = model.with_n(n);
    desc.validate()?;
    if model.lattice.is_some() {
        return invalid("the increment decomposition needs a mean-field model");
    }
    if n + 1 > MAX_ENUMERATION_SITES {
        return Err(RostError::Guard(format!("N + 1 = {} exceeds the enumeration cap", n + 1)));
    }
    if budget.n_disorder < 2 || budget.fields == 0 {
        return invalid("need at least two disorder draws and one field");
    }
    let beta = &model.beta;
    let bound = beta.weighted_norm_sq() / n as f64;
    if beta.is_zero() {
        let a = Estimate { mean: (n as f64 + 1.0) * LN_2 - n as f64 * LN_2, stderr: 0.0, n: budget.n_disorder };
        let zero = Estimate { mean: 0.0, stderr: 0.0, n: budget.n_disorder };
        let ln2 = Estimate { mean: LN_2, ..zero };
        return Ok(AssReport {
            n,
            direct: a,
            cavity: ln2,
            cavity_fresh: ln2,
            shift: zero,
            discrepancy: Estimate { mean: a.mean - LN_2, ..zero },
            discrepancy_sq: Estimate { mean: (a.mean - LN_2).powi(2), ..zero },
            bound,
            shift_target: zero,
            within_bound: true,
        });
    }
    let plus = beta_plus(beta, n)?;
    let params = ParisiParams::from_beta(beta, Psi::Logcosh);
    let coeffs = params.coeffs();
    let big = desc.with_n(n + 1);
    let big_plus = big.with_beta(plus.clone());
    let rows: Vec<[f64; 6]> = (0..budget.n_disorder)
        .into_par_iter()
        .map(|i| {
            let s = disorder_seed(seed, i);
            let d_n = build_disorder(&desc.with_seed(s))?;
            let d_big = build_disorder(&big.with_seed(s))?;
            let d_plus = build_disorder(&big_plus.with_seed(s))?;
            let t_n = enumerate_gibbs(&d_n, 1.0)?;
            let t_big = enumerate_gibbs(&d_big, 1.0)?;
            let t_plus = enumerate_gibbs(&d_plus, 1.0)?;
            let a = t_big.log_partition - t_n.log_partition;
            let c = t_plus.log_partition - t_big.log_partition;
            let probs = t_n.probabilities();
            let flip = 1u64 << n;
            let terms: Vec<f64> = (0..t_n.len())
                .filter(|&k| probs[k] > 0.0)
                .map(|k| {
                    let bits = t_n.config(k);
                    let field = 0.5 * (d_plus.hamiltonian_bits(bits) - d_plus.hamiltonian_bits(bits | flip));
                    probs[k].ln() + crate::stats::log_cosh(field)
                })
                .collect();
            let b = LN_2 + log_sum_exp(&terms);
            let m = rost_from_gibbs(&t_n, SpinKernel::R, None)?;
            let mut rng = stream(seed, "ass-fields", i as u64);
            let mut fresh = 0.0;
            for _ in 0..budget.fields {
                let l = sample_field(&m, &coeffs, &mut rng)?;
                fresh += field_value(&m, &params, &l);
            }
            let b_fresh = LN_2 + 0.5 * params.norm_sq() + fresh / budget.fields as f64;
            let target: f64 = beta
                .terms()
                .iter()
                .map(|&(p, bp)| (n as f64 + 1.0) * bp * (1.0 - t_big.two_replica_moment(p as u32)) * (plus.get(p) - bp))
                .sum();
            let d = a - (b - c);
            Ok([a, b, b_fresh, c, d, target])
        })
        .collect::<Result<_>>()?;
    let col = |j: usize| Estimate::from_samples(&rows.iter().map(|r| r[j]).collect::<Vec<_>>());
    let discrepancy_sq = Estimate::from_samples(&rows.iter().map(|r| r[4] * r[4]).collect::<Vec<_>>());
    Ok(AssReport {
        n,
        direct: col(0),
        cavity: col(1),
        cavity_fresh: col(2),
        shift: col(3),
        discrepancy: col(4),
        discrepancy_sq,
        bound,
        shift_target: col(5),
        within_bound: discrepancy_sq.mean <= bound + Z_THRESHOLD * discrepancy_sq.stderr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzRow {
    pub label: String,
    /// `P(lambda) - P(lambda')` on shared fields.
    pub difference: Estimate,
    pub ratio: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzPanel {
    pub rows: Vec<LipschitzRow>,
    pub distance: f64,
    pub k_hat: f64,
    pub max_ratio: f64,
    pub holds: bool,
}

/// Checks `|P(lambda) - P(lambda')| <= k_hat |lambda - lambda'| + 4 sigma` on
/// every ensemble, with both functionals driven by the same field draws.
pub fn parisi_lipschitz_check(
    lambda: &ParisiParams,
    lambda2: &ParisiParams,
    ensembles: &[(String, RostEnsemble)],
    n_fields: usize,
    k_hat: f64,
    seed: u64,
) -> Result<LipschitzPanel> {
    if lambda.psi != lambda2.psi {
        return invalid("both parameter sets need the same psi");
    }
    let len = lambda.lambda.len().max(lambda2.lambda.len());
    let get = |v: &[f64], p: usize| v.get(p).copied().unwrap_or(0.0);
    let distance = (0..len).map(|p| (get(&lambda.lambda, p) - get(&lambda2.lambda, p)).powi(2)).sum::<f64>().sqrt();
    if distance >= 1.0 {
        return invalid("parameter sets must lie within unit distance");
    }
    let mut rows = Vec::new();
    for (label, e) in ensembles {
        let a = functional_samples(e, lambda, n_fields, seed)?;
        let b = functional_samples(e, lambda2, n_fields, seed)?;
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let difference = Estimate::from_samples(&diff);
        let ratio = if distance > 0.0 { difference.mean.abs() / distance } else { 0.0 };
        let holds = difference.mean.abs() <= k_hat * distance + Z_THRESHOLD * difference.stderr;
        rows.push(LipschitzRow { label: label.clone(), difference, ratio, holds });
    }
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let holds = rows.iter().all(|r| r.holds);
    Ok(LipschitzPanel { rows, distance, k_hat, max_ratio, holds })
}

/// z-score of the recursion value against a Monte Carlo estimate, with the
/// recursion tolerance added to the stderr.
pub fn route_agreement_z(recursion: f64, mc: &Estimate) -> f64 {
    z_score(recursion - mc.mean, pooled_stderr(mc.stderr, 0.0) + RECURSION_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::log_cosh;

    fn sk(b: f64) -> MixedCouplings {
        MixedCouplings::sk(b).unwrap()
    }

    // E f(Z) by direct nested Gauss-Hermite, no grid.
    fn gauss<F: Fn(f64) -> f64>(f: F) -> f64 {
        let gh = GaussHermite::new(80).unwrap();
        gh.integrate(|t| f(std::f64::consts::SQRT_2 * t)) / PI.sqrt()
    }

    #[test]
    fn spline_reproduces_cubic_interior() {
        let h = 0.05;
        let y: Vec<f64> = (0..201).map(|i| ((-5.0 + i as f64 * h) as f64).sin()).collect();
        let s = Spline::new(-5.0, h, y);
        for x in [-1.234, 0.0, 0.77, 2.5] {
            assert!((s.eval(x) - f64::sin(x)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_lambda_is_zero() {
        let spec = RpcSpec::new(vec![0.3, 0.7], vec![0.1, 0.4, 0.9], 10).unwrap();
        let p = ParisiParams::new(vec![0.0, 0.0], Psi::Logcosh).unwrap();
        assert_eq!(parisi_recursion_rpc(&spec, &p, 32).unwrap(), 0.0);
    }

    #[test]
    fn one_level_matches_nested_quadrature() {
        let spec = RpcSpec::new(vec![0.4], vec![0.2, 0.7], 10).unwrap();
        let p = ParisiParams::new(vec![0.0, 1.3], Psi::Logcosh).unwrap();
        let xi = |q: f64| 1.69 * q;
        let (s0, s1) = (xi(0.2).sqrt(), (xi(0.7) - xi(0.2)).sqrt());
        let x = 0.4;
        let x0 = |y: f64| gauss(|z| (x * log_cosh(y + s1 * z)).exp()).ln() / x;
        let oracle = 0.5 * 1.69 - 0.5 * xi(0.7) + gauss(|z| x0(s0 * z));
        let got = parisi_recursion_rpc(&spec, &p, 64).unwrap();
        assert!((got - oracle).abs() < 1e-7, "{got} vs {oracle}");
    }

    #[test]
    fn two_level_matches_nested_quadrature() {
        let spec = RpcSpec::new(vec![0.3, 0.8], vec![0.0, 0.3, 0.8], 10).unwrap();
        let p = ParisiParams::new(vec![0.0, 1.0, 0.5], Psi::Logcosh).unwrap();
        let xi = |q: f64| q + 0.25 * q * q;
        let (s1, s2) = (xi(0.3).sqrt(), (xi(0.8) - xi(0.3)).sqrt());
        let x1 = |y: f64| gauss(|z| (0.8 * log_cosh(y + s2 * z)).exp()).ln() / 0.8;
        let x0 = |y: f64| gauss(|z| (0.3 * x1(y + s1 * z)).exp()).ln() / 0.3;
        let oracle = 0.5 * 1.25 - 0.5 * xi(0.8) + x0(0.0);
        let got = parisi_recursion_rpc(&spec, &p, 48).unwrap();
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
    }

    #[test]
    fn grid_recursion_reproduces_linear_closed_form() {
        let spec = RpcSpec::new(vec![0.2, 0.6], vec![0.1, 0.5, 0.9], 10).unwrap();
        let p = ParisiParams::new(vec![0.3, 1.1, 0.4], Psi::Linear).unwrap();
        let grid = recursion_once(&spec, &p, 64, 1).unwrap();
        assert!((grid - linear_closed_form(&spec, &p)).abs() < 1e-9);
    }

    #[test]
    fn replica_symmetric_limit() {
        let q = 0.6;
        let beta = 0.9;
        let p = ParisiParams::new(vec![0.0, beta], Psi::Logcosh).unwrap();
        let spec = RpcSpec::new(vec![1.0 - 1e-9], vec![q, q], 10).unwrap();
        let oracle = 0.5 * beta * beta * (1.0 - q) + gauss(|z| log_cosh(beta * q.sqrt() * z));
        assert!((parisi_recursion_rpc(&spec, &p, 64).unwrap() - oracle).abs() < 1e-8);
    }

    #[test]
    fn single_atom_mc() {
        let m = AtomicMeasure::single_atom(1.0).unwrap();
        let e = RostEnsemble::fixed(m, 400);
        let p = ParisiParams::new(vec![0.0, 1.2], Psi::Linear).unwrap();
        let est = parisi_functional_mc(&e, &p, 20, 3).unwrap();
        assert!(est.z_against(0.0).abs() < 4.0);

        let q = 0.5;
        let m = AtomicMeasure::single_atom(q).unwrap();
        let e = RostEnsemble::fixed(m, 400);
        let p = ParisiParams::new(vec![0.0, 1.2], Psi::Logcosh).unwrap();
        let est = parisi_functional_mc(&e, &p, 20, 4).unwrap();
        let oracle = 0.72 - 0.72 * q + gauss(|z| log_cosh(1.2 * q.sqrt() * z));
        assert!(est.z_against(oracle).abs() < 4.0, "{est:?} {oracle}");
        let zero = ParisiParams::new(vec![0.0; 3], Psi::Logcosh).unwrap();
        assert_eq!(parisi_functional_mc(&e, &zero, 5, 1).unwrap().mean, 0.0);
    }

    #[test]
    fn beta_zero_is_log2() {
        let spec = RpcSpec::one_level(0.5, 0.7, 50).unwrap();
        let ev = guerra_rhs(&spec, &MixedCouplings::zero(), &GuerraBudget::default()).unwrap();
        assert_eq!(ev.rhs_total.mean, LN_2);
    }

    #[test]
    fn high_temperature_matches_replica_symmetric_scan() {
        let b = 0.3;
        let beta = sk(b);
        // RS formula with beta_std = sqrt(2) b, minimized by a fine grid over q.
        let rs = |q: f64| LN_2 + 0.5 * b * b * (1.0 - q).powi(2) + gauss(|z| log_cosh((2.0 * q).sqrt() * b * z));
        let oracle = (0..=2000).map(|i| rs(i as f64 / 2000.0)).fold(f64::INFINITY, f64::min);
        let min = minimize_guerra(&beta, 1, &GuerraBudget::default(), 5).unwrap();
        assert!((min.per_level[0].value - oracle).abs() < 1e-6, "{} vs {oracle}", min.per_level[0].value);
        assert!((oracle - (LN_2 + b * b / 2.0)).abs() < 1e-9);
    }

    #[test]
    fn encode_decode_round_trip() {
        let (x, q) = (vec![0.2, 0.7], vec![0.1, 0.3, 0.95]);
        let (x2, q2) = decode(&encode(&x, &q), 2);
        for (a, b) in x.iter().zip(&x2).chain(q.iter().zip(&q2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ass_beta_zero() {
        let model = ModelDescriptor::mixed(6, MixedCouplings::zero(), 1);
        let r = ass_increment(&model, 6, &AssBudget { n_disorder: 4, fields: 2 }, 1).unwrap();
        assert!((r.direct.mean - LN_2).abs() < 1e-12);
        assert_eq!(r.cavity.mean, LN_2);
        assert_eq!(r.shift.mean, 0.0);
    }

    #[test]
    fn ass_sk_discrepancy_is_the_diagonal_coupling() {
        let model = ModelDescriptor::sk(6, 0.5, 9).unwrap();
        let r = ass_increment(&model, 6, &AssBudget { n_disorder: 200, fields: 20 }, 9).unwrap();
        // remainder is beta N^{-1/2} g_{N+1,N+1}: mean 0, mean square beta^2 / N
        assert!(r.discrepancy.z_against(0.0).abs() < 4.0);
        assert!(r.discrepancy_sq.z_against(0.25 / 6.0).abs() < 4.0);
        assert!(r.cavity.z_against(r.cavity_fresh.mean).abs() < 4.0 + 1.0);
    }

    #[test]
    fn lipschitz_equal_params() {
        let p = ParisiParams::new(vec![0.0, 1.0], Psi::Logcosh).unwrap();
        let e = RostEnsemble::new(EnsembleSource::Rpc(RpcSpec::one_level(0.5, 1.0, 50).unwrap()), 1, 10).unwrap();
        let r = parisi_lipschitz_check(&p, &p, &[("rpc".into(), e)], 5, LIPSCHITZ_K_HAT, 2).unwrap();
        assert_eq!(r.rows[0].difference.mean, 0.0);
        assert!(r.holds);
    }
}
