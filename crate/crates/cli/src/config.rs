//! Strict declarative experiment configuration (TOML). Unknown keys are
//! rejected with the offending key named; the seed and every tolerance are
//! mandatory and tolerances must be strictly positive.

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use levy_bsde::levy::{JumpComponent, LevyModel};
use levy_bsde::bsde::SchemeParams;
use levy_bsde::regression::BasisSpec;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelCfg,
    pub scheme: SchemeCfg,
    pub output_dir: Option<String>,
    #[serde(default, rename = "experiment")]
    pub experiments: Vec<ExperimentCfg>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    pub gamma: f64,
    pub sigma: f64,
    pub horizon: f64,
    #[serde(default)]
    pub truncation_epsilon: f64,
    #[serde(default)]
    pub jumps: Vec<JumpCfg>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpCfg {
    pub intensity: f64,
    /// `(size, probability)` atoms of the jump-size law.
    pub sizes: Vec<(f64, f64)>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeCfg {
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub basis_degree: usize,
    pub picard_tol: f64,
    pub max_picard_iters: usize,
    #[serde(default)]
    pub z_as_m_channel: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentCfg {
    pub name: String,
    pub kind: String,
    #[serde(default = "empty_params")]
    pub params: toml::Value,
}

fn empty_params() -> toml::Value {
    toml::Value::Table(toml::map::Map::new())
}

// Per-kind parameter blocks; every tolerance is mandatory.

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportPathsParams {
    pub paths: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSolutionParams {
    pub paths: usize,
    pub steps: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpExactnessParams {
    pub paths: usize,
    pub steps: usize,
    pub tolerance_rel: f64,
}

fn default_kernels() -> Vec<String> {
    vec![
        "mark0_indicator".into(),
        "mark_linear".into(),
        "split_window".into(),
    ]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsometryParams {
    pub paths: usize,
    pub steps: usize,
    pub tolerance_se: f64,
    /// Kernel constructors: any of "mark0_indicator", "mark_linear",
    /// "split_window".
    #[serde(default = "default_kernels")]
    pub kernels: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GirsanovParams {
    pub paths: usize,
    pub steps: usize,
    pub tolerance_se: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MartingaleBsdeParams {
    #[serde(default)]
    pub paths: Option<usize>,
    #[serde(default)]
    pub steps: Option<usize>,
    pub tolerance_se: f64,
    pub tolerance_rel: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSweepParams {
    #[serde(default)]
    pub paths: Option<usize>,
    #[serde(default)]
    pub steps: Option<usize>,
    pub alpha: f64,
    /// Number of dt levels; level k coarsens the finest grid by `2^k`.
    pub levels: usize,
    pub tolerance_rel: f64,
    pub ratio_low: f64,
    pub ratio_high: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeEquivalenceParams {
    pub tree_steps: usize,
    pub alpha: f64,
    pub tolerance_abs: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivativeTriangleParams {
    #[serde(default)]
    pub paths: Option<usize>,
    #[serde(default)]
    pub steps: Option<usize>,
    pub n_r: usize,
    pub tolerance_rel: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainRuleParams {
    pub paths: usize,
    pub steps: usize,
    pub u0: f64,
    pub halvings: usize,
    pub ratio_low: f64,
    pub ratio_high: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepresentationParams {
    #[serde(default)]
    pub paths: Option<usize>,
    #[serde(default)]
    pub steps: Option<usize>,
    /// "tree" for exact conditional expectations, "monte_carlo" for the
    /// regression model.
    pub mode: String,
    pub n_r: usize,
    pub tolerance_rel: f64,
    #[serde(default)]
    pub tree_steps: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardGronwallParams {
    #[serde(default)]
    pub paths: Option<usize>,
    #[serde(default)]
    pub steps: Option<usize>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityParams {
    #[serde(default)]
    pub paths: Option<usize>,
    #[serde(default)]
    pub steps: Option<usize>,
    pub magnitudes: Vec<f64>,
    pub tolerance_factor: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityParams {
    #[serde(default)]
    pub paths: Option<usize>,
    #[serde(default)]
    pub steps: Option<usize>,
    pub alpha: f64,
    pub tolerance_rel: f64,
    pub bound_tolerance: f64,
}

pub const KNOWN_KINDS: &[&str] = &[
    "export_paths",
    "export_solution",
    "jump_exactness",
    "isometry",
    "girsanov",
    "martingale_bsde",
    "linear_sweep",
    "tree_equivalence",
    "derivative_triangle",
    "chain_rule",
    "representation",
    "picard_gronwall",
    "stability",
    "utility",
];

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).context("config rejected")?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.scheme.picard_tol <= 0.0 {
            bail!("scheme.picard_tol must be strictly positive");
        }
        let mut seen = std::collections::BTreeSet::new();
        for exp in &self.experiments {
            if !seen.insert(exp.name.clone()) {
                bail!("duplicate experiment name '{}'", exp.name);
            }
            if !KNOWN_KINDS.contains(&exp.kind.as_str()) {
                bail!(
                    "experiment '{}': unknown kind '{}' (known: {})",
                    exp.name,
                    exp.kind,
                    KNOWN_KINDS.join(", ")
                );
            }
            // parse params now so config errors surface before any run
            exp.parsed_tolerances()?;
        }
        Ok(())
    }

    pub fn model(&self) -> Result<LevyModel> {
        let mut model = LevyModel::new(
            self.model.gamma,
            self.model.sigma,
            self.model
                .jumps
                .iter()
                .map(|j| JumpComponent::new(j.intensity, j.sizes.clone()))
                .collect(),
            self.model.horizon,
        );
        model.truncation_epsilon = self.model.truncation_epsilon;
        model.validate()?;
        Ok(model)
    }

    pub fn scheme(&self) -> SchemeParams {
        SchemeParams {
            basis: BasisSpec::Polynomial {
                degree: self.scheme.basis_degree,
            },
            picard_tol: self.scheme.picard_tol,
            max_picard_iters: self.scheme.max_picard_iters,
            z_as_m_channel: self.scheme.z_as_m_channel,
        }
    }
}

impl ExperimentCfg {
    pub fn params_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        self.params
            .clone()
            .try_into()
            .with_context(|| format!("experiment '{}' ({}) params rejected", self.name, self.kind))
    }

    /// Parses the parameter block for this kind and returns its tolerances
    /// (empty when the kind emits no checks).
    pub fn parsed_tolerances(&self) -> Result<Vec<f64>> {
        let tols = match self.kind.as_str() {
            "export_paths" => {
                self.params_as::<ExportPathsParams>()?;
                vec![]
            }
            "export_solution" => {
                self.params_as::<ExportSolutionParams>()?;
                vec![]
            }
            "jump_exactness" => vec![self.params_as::<JumpExactnessParams>()?.tolerance_rel],
            "isometry" => vec![self.params_as::<IsometryParams>()?.tolerance_se],
            "girsanov" => vec![self.params_as::<GirsanovParams>()?.tolerance_se],
            "martingale_bsde" => {
                let p = self.params_as::<MartingaleBsdeParams>()?;
                vec![p.tolerance_se, p.tolerance_rel]
            }
            "linear_sweep" => {
                let p = self.params_as::<LinearSweepParams>()?;
                vec![p.tolerance_rel, p.ratio_low, p.ratio_high]
            }
            "tree_equivalence" => vec![self.params_as::<TreeEquivalenceParams>()?.tolerance_abs],
            "derivative_triangle" => {
                vec![self.params_as::<DerivativeTriangleParams>()?.tolerance_rel]
            }
            "chain_rule" => {
                let p = self.params_as::<ChainRuleParams>()?;
                vec![p.ratio_low, p.ratio_high]
            }
            "representation" => vec![self.params_as::<RepresentationParams>()?.tolerance_rel],
            "picard_gronwall" => {
                self.params_as::<PicardGronwallParams>()?;
                vec![]
            }
            "stability" => vec![self.params_as::<StabilityParams>()?.tolerance_factor],
            "utility" => {
                let p = self.params_as::<UtilityParams>()?;
                vec![p.tolerance_rel, p.bound_tolerance]
            }
            other => bail!("unknown experiment kind '{other}'"),
        };
        for &t in &tols {
            if t <= 0.0 {
                bail!(
                    "experiment '{}': tolerances must be strictly positive, got {t}",
                    self.name
                );
            }
        }
        Ok(tols)
    }
}

pub const SCHEMA: &str = r#"Config grammar (TOML, strict: unknown keys are rejected)

[model]                     # the Lévy triplet and horizon
gamma = <float>             # drift per unit time
sigma = <float >= 0>        # Brownian scale
horizon = <float > 0>       # T
truncation_epsilon = <float >= 0, default 0>
[[model.jumps]]             # zero or more compound-Poisson components
intensity = <float >= 0>
sizes = [[size, prob], ...] # finite jump-size law, probs sum to 1

[scheme]
steps = <int >= 1>          # time steps of the default grid
paths = <int >= 1>          # Monte Carlo batch size
seed = <u64>                # mandatory, no default
basis_degree = <int>        # polynomial regression basis degree
picard_tol = <float > 0>    # mandatory, no default
max_picard_iters = <int>
z_as_m_channel = <bool, default false>   # store Z as mark-0 channel (Z/sigma)

output_dir = "<dir>"        # optional; --out overrides

[[experiment]]
name = "<unique name>"
kind = "<one of the kinds below>"
[experiment.params]         # per-kind block, see below

kinds and their params (paths/steps fall back to the scheme block where
marked with ?):
  export_paths          paths, steps
  export_solution       paths, steps, alpha
  jump_exactness        paths, steps, tolerance_rel
  isometry              paths, steps, tolerance_se, kernels? (subset of
                        ["mark0_indicator", "mark_linear", "split_window"])
  girsanov              paths, steps, tolerance_se
  martingale_bsde       tolerance_se, tolerance_rel, paths?, steps?
  linear_sweep          alpha, levels, tolerance_rel, ratio_low, ratio_high, paths?, steps?
  tree_equivalence      tree_steps, alpha, tolerance_abs
  derivative_triangle   n_r, tolerance_rel, paths?, steps?
  chain_rule            paths, steps, u0, halvings, ratio_low, ratio_high
  representation        mode ("tree"|"monte_carlo"), n_r, tolerance_rel, tree_steps?, paths?, steps?
  picard_gronwall       iterations, paths?, steps?
  stability             magnitudes = [..], tolerance_factor, paths?, steps?
  utility               alpha, tolerance_rel, bound_tolerance, paths?, steps?

Statistical checks pass at |estimate - target| <= tolerance_se standard
errors; deterministic checks use the per-experiment absolute/relative
tolerances. Every number in summary.txt also appears in the experiment's CSV.
"#;
