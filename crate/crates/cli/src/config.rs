//! TOML experiment configuration.

use std::path::PathBuf;

use rostlab::cascades::RpcSpec;
use rostlab::cavity_map::{LinearizationTarget, Psi, TesterBudget};
use rostlab::rost_core::{EnsembleSource, MomentCatalog, RostEnsemble, SpinKernel};
use rostlab::spin_models::{Lattice, MixedCouplings, ModelDescriptor, ModelKind};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    FreeEnergy,
    Stability,
    Gg,
    Ultrametricity,
    PdInvariance,
    Composition,
    Linearization,
    ParisiMin,
    AssIncrement,
    Counterexamples,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::FreeEnergy => "free-energy",
            ExperimentKind::Stability => "stability",
            ExperimentKind::Gg => "gg",
            ExperimentKind::Ultrametricity => "ultrametricity",
            ExperimentKind::PdInvariance => "pd-invariance",
            ExperimentKind::Composition => "composition",
            ExperimentKind::Linearization => "linearization",
            ExperimentKind::ParisiMin => "parisi-min",
            ExperimentKind::AssIncrement => "ass-increment",
            ExperimentKind::Counterexamples => "counterexamples",
        }
    }

    fn needs_model(self) -> bool {
        matches!(self, ExperimentKind::FreeEnergy | ExperimentKind::ParisiMin | ExperimentKind::AssIncrement)
    }

    fn needs_ensemble(self) -> bool {
        matches!(
            self,
            ExperimentKind::Stability
                | ExperimentKind::Gg
                | ExperimentKind::Ultrametricity
                | ExperimentKind::Composition
                | ExperimentKind::Linearization
        )
    }
}

fn default_model_kind() -> ModelKind {
    ModelKind::Sk
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_model_kind")]
    pub model: ModelKind,
    pub n: usize,
    /// `[[p, beta_p], ...]`.
    pub beta: Vec<(usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<Lattice>,
    /// Inverse-temperature factor applied on top of the couplings.
    #[serde(default = "one")]
    pub temperature: f64,
}

impl ModelConfig {
    pub fn couplings(&self) -> Result<MixedCouplings, CliError> {
        Ok(MixedCouplings::new(self.beta.iter().copied())?)
    }

    /// Descriptor with the temperature folded into the couplings.
    pub fn descriptor(&self, n: usize, seed: u64) -> Result<ModelDescriptor, CliError> {
        let beta = self.couplings()?.scaled(self.temperature)?;
        let d = ModelDescriptor { kind: self.model, n, beta, lattice: self.lattice, seed };
        d.validate()?;
        Ok(d)
    }
}

fn default_kernel() -> SpinKernel {
    SpinKernel::R
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnsembleConfig {
    Rpc {
        x: Vec<f64>,
        q: Vec<f64>,
        #[serde(rename = "M", alias = "m")]
        m: usize,
    },
    /// Gibbs measures of the `[model]` section.
    Gibbs {
        #[serde(default = "default_kernel")]
        kernel: SpinKernel,
    },
    TwoSphere {
        x1: f64,
        x2: f64,
        m: usize,
    },
    Rem {
        x1: f64,
        x2: f64,
        m: usize,
    },
    SingleAtom {
        norm_sq: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    /// Ensemble draws.
    pub ensemble: usize,
    /// Cavity fields per draw.
    pub fields: usize,
    /// Replica tuples per inner expectation.
    pub tuples: usize,
    /// Disorder draws for Gibbs quantities.
    pub disorder: usize,
    /// Repetitions (Poisson-Dirichlet and linearization testers).
    pub reps: usize,
    /// Replica triples per draw (ultrametricity).
    pub triples: usize,
    /// Exact inner expectations instead of sampled tuples.
    pub exact: bool,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig { ensemble: 200, fields: 50, tuples: 2000, disorder: 100, reps: 200, triples: 2000, exact: false }
    }
}

impl BudgetConfig {
    pub fn tester(&self) -> TesterBudget {
        if self.exact {
            TesterBudget::exact(self.fields)
        } else {
            TesterBudget::mc(self.fields, self.tuples)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamsConfig {
    pub psi: Psi,
    /// Cavity strengths; one tester run per entry.
    pub lambda: Vec<f64>,
    /// Second strength of the composition check.
    pub lambda2: f64,
    /// `a_p` of `c(x) = sum_p a_p x^p` from `p = 0`.
    pub c_mix: Vec<f64>,
    pub catalog: Option<Vec<String>>,
    /// Replicas conditioned on in the GG tester.
    pub s: usize,
    pub gg_powers: Vec<u32>,
    pub n_grid: Vec<usize>,
    pub target: LinearizationTarget,
    pub k_max: usize,
    /// System sizes for scans; empty means the model's own `n`.
    pub n_list: Vec<usize>,
    pub pd_x: f64,
    pub pd_m: usize,
    pub expect_ultrametric: Option<bool>,
    pub quad_nodes: usize,
    pub x1: f64,
    pub x2: f64,
    pub sphere_m: usize,
    pub rem_m: usize,
}

impl Default for ParamsConfig {
    fn default() -> Self {
        ParamsConfig {
            psi: Psi::Linear,
            lambda: vec![1.0],
            lambda2: 1.0,
            c_mix: vec![0.0, 1.0],
            catalog: None,
            s: 2,
            gg_powers: vec![1, 2],
            n_grid: vec![16, 64, 256, 1024, 4096],
            target: LinearizationTarget::CavityFactor,
            k_max: 2,
            n_list: Vec::new(),
            pd_x: 0.5,
            pd_m: 1000,
            expect_ultrametric: None,
            quad_nodes: rostlab::parisi::DEFAULT_QUAD_NODES,
            x1: 0.3,
            x2: 0.6,
            sphere_m: 1000,
            rem_m: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleConfig>,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub params: ParamsConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn kind(&self) -> Result<ExperimentKind, CliError> {
        self.kind.ok_or_else(|| CliError::Config("missing field `kind`".into()))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::Config("missing field `seed` (no default seed is used)".into()))
    }

    pub fn catalog(&self) -> Result<MomentCatalog, CliError> {
        match &self.params.catalog {
            Some(names) => Ok(MomentCatalog::from_names(names)?),
            None => Ok(MomentCatalog::default()),
        }
    }

    pub fn model(&self) -> Result<&ModelConfig, CliError> {
        self.model.as_ref().ok_or_else(|| CliError::Config("this experiment needs a [model] section".into()))
    }

    /// Sizes to scan: `params.n_list`, or the model's `n`.
    pub fn sizes(&self) -> Result<Vec<usize>, CliError> {
        if !self.params.n_list.is_empty() {
            return Ok(self.params.n_list.clone());
        }
        Ok(vec![self.model()?.n])
    }

    pub fn ensemble(&self, seed: u64) -> Result<RostEnsemble, CliError> {
        let cfg = self.ensemble.as_ref().ok_or_else(|| CliError::Config("this experiment needs an [ensemble] section".into()))?;
        self.ensemble_from(cfg, self.model.as_ref().map(|m| m.n), seed)
    }

    /// Ensemble of the `[ensemble]` section; Gibbs ensembles use size `n`.
    pub fn ensemble_from(&self, cfg: &EnsembleConfig, n: Option<usize>, seed: u64) -> Result<RostEnsemble, CliError> {
        let source = match cfg {
            EnsembleConfig::Rpc { x, q, m } => EnsembleSource::Rpc(RpcSpec::new(x.clone(), q.clone(), *m)?),
            EnsembleConfig::Gibbs { kernel } => {
                let model = self.model()?;
                let n = n.unwrap_or(model.n);
                let desc = ModelDescriptor {
                    kind: model.model,
                    n,
                    beta: model.couplings()?,
                    lattice: model.lattice,
                    seed,
                };
                desc.validate()?;
                EnsembleSource::Gibbs { model: desc, beta: model.temperature, kernel: *kernel }
            }
            EnsembleConfig::TwoSphere { x1, x2, m } => EnsembleSource::TwoSphere { x1: *x1, x2: *x2, m: *m },
            EnsembleConfig::Rem { x1, x2, m } => EnsembleSource::UncoupledRem { x1: *x1, x2: *x2, m: *m },
            EnsembleConfig::SingleAtom { norm_sq } => {
                EnsembleSource::Fixed(vec![rostlab::rost_core::AtomicMeasure::single_atom(*norm_sq)?])
            }
        };
        Ok(RostEnsemble::new(source, seed, self.budget.ensemble)?)
    }

    /// Structural checks that need no computation.
    pub fn validate(&self) -> Result<(), CliError> {
        let kind = self.kind()?;
        self.seed()?;
        let b = &self.budget;
        let positive = [
            ("budget.ensemble", b.ensemble),
            ("budget.fields", b.fields),
            ("budget.tuples", b.tuples),
            ("budget.disorder", b.disorder),
            ("budget.reps", b.reps),
            ("budget.triples", b.triples),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::Config(format!("`{name}` must be positive")));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("`threads` must be positive".into()));
        }
        if kind.needs_model() {
            let m = self.model()?;
            m.descriptor(m.n, 0)?;
        }
        if kind.needs_ensemble() && self.ensemble.is_none() {
            return Err(CliError::Config("this experiment needs an [ensemble] section".into()));
        }
        if matches!(self.ensemble, Some(EnsembleConfig::Gibbs { .. })) {
            self.model()?;
        }
        let p = &self.params;
        if p.lambda.is_empty() || p.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(CliError::Config("`params.lambda` needs finite nonnegative entries".into()));
        }
        if p.n_list.contains(&0) {
            return Err(CliError::Config("`params.n_list` entries must be positive".into()));
        }
        self.catalog()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
