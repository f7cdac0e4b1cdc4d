//! Flat key-value run configuration (TOML), validation and defaults.
//!
//! Every key can come from the config file or a command-line override;
//! unknown keys are rejected. Values spelled `"auto"` (schedules) or
//! `"estimate"` (problem constants) resolve against the generated problem
//! before the run, and the resolved numbers are echoed into the output
//! header.

use anyhow::{bail, Context, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    PcaDeterministic,
    PcaStochastic,
    BlockToy,
    Counterexample,
    UnconstrainedBaseline,
}

impl Experiment {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "pca-deterministic" => Self::PcaDeterministic,
            "pca-stochastic" => Self::PcaStochastic,
            "block-toy" => Self::BlockToy,
            "counterexample" => Self::Counterexample,
            "unconstrained-baseline" => Self::UnconstrainedBaseline,
            other => bail!("unknown experiment '{other}'"),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::PcaDeterministic => "pca-deterministic",
            Self::PcaStochastic => "pca-stochastic",
            Self::BlockToy => "block-toy",
            Self::Counterexample => "counterexample",
            Self::UnconstrainedBaseline => "unconstrained-baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    EfLanding,
    VanillaLanding,
    QrRetraction,
    Penalty,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ef-landing" => Self::EfLanding,
            "vanilla-landing" => Self::VanillaLanding,
            "qr-retraction" => Self::QrRetraction,
            "penalty" => Self::Penalty,
            other => bail!("unknown algorithm '{other}'"),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::EfLanding => "ef-landing",
            Self::VanillaLanding => "vanilla-landing",
            Self::QrRetraction => "qr-retraction",
            Self::Penalty => "penalty",
        }
    }
}

/// A number or the word `"auto"`/`"estimate"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AutoOr {
    Auto,
    Value(f64),
}

impl AutoOr {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "auto" | "estimate" => Ok(Self::Auto),
            other => other
                .parse::<f64>()
                .map(Self::Value)
                .with_context(|| format!("expected a number, 'auto' or 'estimate', got '{other}'")),
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Self::Auto => None,
            Self::Value(v) => Some(*v),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum RawAutoOr {
    Number(f64),
    Word(String),
}

impl RawAutoOr {
    fn into_auto_or(self, key: &str) -> Result<AutoOr> {
        match self {
            RawAutoOr::Number(v) => Ok(AutoOr::Value(v)),
            RawAutoOr::Word(w) if w == "auto" || w == "estimate" => Ok(AutoOr::Auto),
            RawAutoOr::Word(w) => bail!("key '{key}': expected a number, 'auto' or 'estimate', got '{w}'"),
        }
    }
}

/// Raw file keys; everything optional, defaults fill in later.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    experiment: Option<String>,
    algorithm: Option<String>,
    error_feedback: Option<bool>,
    compressor: Option<String>,
    compressor_k: Option<usize>,
    compressor_ratio: Option<f64>,
    compressor_s: Option<u32>,
    seed_policy: Option<String>,
    gamma: Option<RawAutoOr>,
    eta: Option<RawAutoOr>,
    lambda: Option<f64>,
    epsilon: Option<f64>,
    grad_bound: Option<RawAutoOr>,
    smooth_l: Option<RawAutoOr>,
    avg_smooth_l: Option<RawAutoOr>,
    merit_smooth_lm: Option<RawAutoOr>,
    mu: Option<RawAutoOr>,
    decay: Option<Vec<(usize, f64)>>,
    n: Option<usize>,
    p: Option<usize>,
    l: Option<usize>,
    nodes: Option<usize>,
    sigma_data: Option<f64>,
    sigma_noise: Option<f64>,
    noise: Option<String>,
    batch_size: Option<usize>,
    iters: Option<usize>,
    seed: Option<u64>,
    metrics_every: Option<usize>,
    diagnostics: Option<bool>,
    threads: Option<usize>,
    output: Option<String>,
    penalty_lambda: Option<f64>,
    blocks: Option<Vec<(usize, usize)>>,
    free_dim: Option<usize>,
}

/// Command-line overrides; any `Some` wins over the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub experiment: Option<String>,
    pub algorithm: Option<String>,
    pub error_feedback: Option<bool>,
    pub compressor: Option<String>,
    pub compressor_k: Option<usize>,
    pub compressor_ratio: Option<f64>,
    pub compressor_s: Option<u32>,
    pub seed_policy: Option<String>,
    pub gamma: Option<String>,
    pub eta: Option<String>,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub grad_bound: Option<String>,
    pub mu: Option<String>,
    pub n: Option<usize>,
    pub p: Option<usize>,
    pub l: Option<usize>,
    pub nodes: Option<usize>,
    pub sigma_data: Option<f64>,
    pub sigma_noise: Option<f64>,
    pub batch_size: Option<usize>,
    pub iters: Option<usize>,
    pub seed: Option<u64>,
    pub metrics_every: Option<usize>,
    pub diagnostics: Option<bool>,
    pub threads: Option<usize>,
    pub output: Option<String>,
    pub penalty_lambda: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressorChoice {
    Identity,
    TopK,
    RandK,
    Qsgd,
    QsgdScaled,
}

impl CompressorChoice {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => Self::Identity,
            "top-k" => Self::TopK,
            "rand-k" => Self::RandK,
            "qsgd" => Self::Qsgd,
            "qsgd-scaled" => Self::QsgdScaled,
            other => bail!("unknown compressor '{other}'"),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::TopK => "top-k",
            Self::RandK => "rand-k",
            Self::Qsgd => "qsgd",
            Self::QsgdScaled => "qsgd-scaled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseChoice {
    AdditiveGaussian,
    Minibatch,
}

/// Fully validated run configuration; schedule constants may still be
/// `Auto` until resolved against the generated problem.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub algorithm: Algorithm,
    pub error_feedback: bool,
    pub compressor: CompressorChoice,
    pub compressor_k: Option<usize>,
    pub compressor_ratio: Option<f64>,
    pub compressor_s: u32,
    pub seed_policy: ef_landing::compress::SeedPolicy,
    pub gamma: AutoOr,
    pub eta: AutoOr,
    pub lambda: f64,
    pub epsilon: f64,
    pub grad_bound: AutoOr,
    pub smooth_l: AutoOr,
    pub avg_smooth_l: AutoOr,
    pub merit_smooth_lm: AutoOr,
    pub mu: AutoOr,
    pub decay: Vec<(usize, f64)>,
    pub n: usize,
    pub p: usize,
    pub l: usize,
    pub nodes: usize,
    pub sigma_data: f64,
    pub sigma_noise: f64,
    pub noise: NoiseChoice,
    pub batch_size: usize,
    pub iters: usize,
    pub seed: u64,
    pub metrics_every: usize,
    pub diagnostics: bool,
    pub threads: usize,
    pub output: Option<String>,
    pub penalty_lambda: f64,
    pub blocks: Vec<(usize, usize)>,
    pub free_dim: usize,
}

/// Parses config text, applies overrides and validates. Unknown keys,
/// malformed values and constraint violations are reported with the
/// offending key.
pub fn parse_config(text: &str, overrides: &Overrides) -> Result<RunConfig> {
    let file: FileConfig = toml::from_str(text).context("parsing config")?;

    let experiment = overrides
        .experiment
        .clone()
        .or(file.experiment)
        .unwrap_or_else(|| "pca-deterministic".into());
    let experiment = Experiment::parse(&experiment)?;

    let algorithm = overrides
        .algorithm
        .clone()
        .or(file.algorithm)
        .unwrap_or_else(|| "ef-landing".into());
    let algorithm = Algorithm::parse(&algorithm)?;

    let compressor = overrides
        .compressor
        .clone()
        .or(file.compressor)
        .unwrap_or_else(|| "identity".into());
    let compressor = CompressorChoice::parse(&compressor)?;

    let seed_policy = match overrides
        .seed_policy
        .clone()
        .or(file.seed_policy)
        .unwrap_or_else(|| "shared-seed".into())
        .as_str()
    {
        "shared-seed" => ef_landing::compress::SeedPolicy::SharedSeed,
        "transmit-indices" => ef_landing::compress::SeedPolicy::TransmitIndices,
        other => bail!("unknown seed_policy '{other}'"),
    };

    let parse_auto = |ov: &Option<String>, raw: Option<RawAutoOr>, key: &str, default: AutoOr| {
        if let Some(s) = ov {
            AutoOr::parse(s)
        } else if let Some(raw) = raw {
            raw.into_auto_or(key)
        } else {
            Ok(default)
        }
    };

    // Experiment-dependent step-size defaults used when nothing was given.
    let gamma_default = match experiment {
        Experiment::Counterexample => AutoOr::Value(0.05),
        Experiment::BlockToy => AutoOr::Value(0.1),
        Experiment::UnconstrainedBaseline => AutoOr::Value(0.5),
        _ => AutoOr::Auto,
    };
    let gamma = parse_auto(&overrides.gamma, file.gamma, "gamma", gamma_default)?;
    let eta_default = match experiment {
        Experiment::PcaStochastic => AutoOr::Auto,
        _ => AutoOr::Value(1.0),
    };
    let eta = parse_auto(&overrides.eta, file.eta, "eta", eta_default)?;
    let grad_bound_default = match experiment {
        Experiment::PcaDeterministic | Experiment::PcaStochastic => AutoOr::Auto,
        _ => AutoOr::Value(1e8),
    };
    let grad_bound = parse_auto(
        &overrides.grad_bound,
        file.grad_bound,
        "grad_bound",
        grad_bound_default,
    )?;
    let smooth_l = file
        .smooth_l
        .map(|r| r.into_auto_or("smooth_l"))
        .transpose()?
        .unwrap_or(AutoOr::Auto);
    let avg_smooth_l = file
        .avg_smooth_l
        .map(|r| r.into_auto_or("avg_smooth_l"))
        .transpose()?
        .unwrap_or(AutoOr::Auto);
    let merit_smooth_lm = file
        .merit_smooth_lm
        .map(|r| r.into_auto_or("merit_smooth_lm"))
        .transpose()?
        .unwrap_or(AutoOr::Auto);
    let mu = parse_auto(&overrides.mu, file.mu, "mu", AutoOr::Auto)?;

    let noise = match file.noise.as_deref().unwrap_or("additive-gaussian") {
        "additive-gaussian" => NoiseChoice::AdditiveGaussian,
        "minibatch" => NoiseChoice::Minibatch,
        other => bail!("unknown noise '{other}'"),
    };

    let (n_default, p_default, l_default, nodes_default, iters_default) = match experiment {
        Experiment::Counterexample => (2, 1, 1, 1, 500),
        Experiment::UnconstrainedBaseline => (100, 1, 1, 1, 1000),
        Experiment::BlockToy => (30, 3, 1, 2, 3000),
        _ => (100, 5, 200, 4, 600),
    };

    let config = RunConfig {
        experiment,
        algorithm,
        error_feedback: overrides.error_feedback.or(file.error_feedback).unwrap_or(true),
        compressor,
        compressor_k: overrides.compressor_k.or(file.compressor_k),
        compressor_ratio: overrides.compressor_ratio.or(file.compressor_ratio),
        compressor_s: overrides.compressor_s.or(file.compressor_s).unwrap_or(16),
        seed_policy,
        gamma,
        eta,
        lambda: overrides.lambda.or(file.lambda).unwrap_or(1.0),
        epsilon: overrides.epsilon.or(file.epsilon).unwrap_or(0.5),
        grad_bound,
        smooth_l,
        avg_smooth_l,
        merit_smooth_lm,
        mu,
        decay: file.decay.unwrap_or_default(),
        n: overrides.n.or(file.n).unwrap_or(n_default),
        p: overrides.p.or(file.p).unwrap_or(p_default),
        l: overrides.l.or(file.l).unwrap_or(l_default),
        nodes: overrides.nodes.or(file.nodes).unwrap_or(nodes_default),
        sigma_data: overrides.sigma_data.or(file.sigma_data).unwrap_or(0.1),
        sigma_noise: overrides.sigma_noise.or(file.sigma_noise).unwrap_or(1.0),
        noise,
        batch_size: overrides.batch_size.or(file.batch_size).unwrap_or(32),
        iters: overrides.iters.or(file.iters).unwrap_or(iters_default),
        seed: overrides.seed.or(file.seed).unwrap_or(1),
        metrics_every: overrides.metrics_every.or(file.metrics_every).unwrap_or(1),
        diagnostics: overrides.diagnostics.or(file.diagnostics).unwrap_or(false),
        threads: overrides.threads.or(file.threads).unwrap_or(1),
        output: overrides.output.clone().or(file.output),
        penalty_lambda: overrides.penalty_lambda.or(file.penalty_lambda).unwrap_or(8.0),
        blocks: file.blocks.unwrap_or_else(|| vec![(30, 3), (30, 3)]),
        free_dim: file.free_dim.unwrap_or(10),
    };
    validate(&config)?;
    Ok(config)
}

fn validate(c: &RunConfig) -> Result<()> {
    if !(c.lambda > 0.0) {
        bail!("lambda must be positive, got {}", c.lambda);
    }
    if !(c.epsilon > 0.0 && c.epsilon < 0.75) {
        bail!("epsilon must lie in (0, 3/4), got {}", c.epsilon);
    }
    if c.p == 0 || c.p > c.n {
        bail!("need 1 <= p <= n, got p={}, n={}", c.p, c.n);
    }
    if c.nodes == 0 {
        bail!("nodes must be at least 1");
    }
    if c.sigma_data < 0.0 || c.sigma_noise < 0.0 {
        bail!("noise levels must be nonnegative");
    }
    if let Some(v) = c.gamma.value() {
        if !(v > 0.0) {
            bail!("gamma must be positive, got {v}");
        }
    }
    if let Some(v) = c.eta.value() {
        if !(v > 0.0 && v <= 1.0) {
            bail!("eta must lie in (0, 1], got {v}");
        }
    }
    let d = flat_len(c);
    if let Some(k) = c.compressor_k {
        if k == 0 || k > d {
            bail!("compressor_k = {k} out of range for {d} entries");
        }
    }
    if let Some(r) = c.compressor_ratio {
        if !(r > 0.0 && r <= 1.0) {
            bail!("compressor_ratio must lie in (0, 1], got {r}");
        }
    }
    if c.compressor_s == 0 {
        bail!("compressor_s must be at least 1");
    }
    if !(c.penalty_lambda > 0.0) {
        bail!("penalty_lambda must be positive, got {}", c.penalty_lambda);
    }
    match c.experiment {
        Experiment::BlockToy | Experiment::Counterexample | Experiment::UnconstrainedBaseline => {
            if c.algorithm != Algorithm::EfLanding {
                bail!(
                    "experiment '{}' only supports algorithm 'ef-landing'",
                    c.experiment.name()
                );
            }
            if c.gamma == AutoOr::Auto {
                bail!(
                    "experiment '{}' needs an explicit gamma",
                    c.experiment.name()
                );
            }
        }
        Experiment::PcaStochastic => {
            if matches!(c.algorithm, Algorithm::QrRetraction | Algorithm::Penalty) {
                bail!("stochastic runs support landing algorithms only");
            }
            if c.noise == NoiseChoice::Minibatch && c.batch_size == 0 {
                bail!("batch_size must be at least 1");
            }
        }
        Experiment::PcaDeterministic => {}
    }
    for &(n_j, p_j) in &c.blocks {
        if p_j == 0 || p_j > n_j {
            bail!("block dims must be tall or square, got {n_j}x{p_j}");
        }
    }
    Ok(())
}

/// Number of flat entries a compressor acts on for this experiment.
pub fn flat_len(c: &RunConfig) -> usize {
    match c.experiment {
        Experiment::BlockToy => {
            c.blocks.iter().map(|(n, p)| n * p).sum::<usize>() + c.free_dim
        }
        Experiment::UnconstrainedBaseline => c.n,
        Experiment::Counterexample => 2,
        _ => c.n * c.p,
    }
}

/// Resolves the compressor selection into a concrete spec over `d` entries
/// (ratio resolves as `max(1, ⌊ratio·d⌋)`).
pub fn build_compressor(c: &RunConfig, d: usize) -> Result<ef_landing::compress::CompressorSpec> {
    use ef_landing::compress::CompressorSpec as Spec;
    let k = match (c.compressor_k, c.compressor_ratio) {
        (Some(k), _) => k,
        (None, Some(r)) => Spec::k_from_ratio(r, d),
        (None, None) => Spec::k_from_ratio(0.1, d),
    };
    let spec = match c.compressor {
        CompressorChoice::Identity => Spec::identity(),
        CompressorChoice::TopK => Spec::top_k(k),
        CompressorChoice::RandK => Spec::rand_k(k, c.seed_policy),
        CompressorChoice::Qsgd => Spec::qsgd(c.compressor_s),
        CompressorChoice::QsgdScaled => Spec::qsgd_scaled(c.compressor_s),
    };
    spec.validate(d).map_err(anyhow::Error::from)?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config("", &Overrides::default()).unwrap();
        assert_eq!(c.experiment, Experiment::PcaDeterministic);
        assert_eq!((c.n, c.p, c.l, c.nodes), (100, 5, 200, 4));
        assert_eq!(c.lambda, 1.0);
        assert!(c.error_feedback);
        assert_eq!(c.gamma, AutoOr::Auto);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse_config("not_a_key = 1", &Overrides::default()).is_err());
    }

    #[test]
    fn negative_lambda_is_rejected() {
        assert!(parse_config("lambda = -1.0", &Overrides::default()).is_err());
    }

    #[test]
    fn ratio_resolves_k() {
        let c = parse_config(
            "compressor = \"top-k\"\ncompressor_ratio = 0.1\nn = 1000\np = 500",
            &Overrides::default(),
        )
        .unwrap();
        let spec = build_compressor(&c, flat_len(&c)).unwrap();
        assert_eq!(
            spec,
            ef_landing::compress::CompressorSpec::top_k(50_000)
        );
    }

    #[test]
    fn auto_words_parse() {
        let c = parse_config("gamma = \"auto\"\ngrad_bound = \"estimate\"", &Overrides::default())
            .unwrap();
        assert_eq!(c.gamma, AutoOr::Auto);
        assert_eq!(c.grad_bound, AutoOr::Auto);
        assert!(parse_config("gamma = \"fast\"", &Overrides::default()).is_err());
    }

    #[test]
    fn overrides_win() {
        let ov = Overrides {
            gamma: Some("0.25".into()),
            nodes: Some(8),
            ..Default::default()
        };
        let c = parse_config("gamma = 0.1\nnodes = 2", &ov).unwrap();
        assert_eq!(c.gamma, AutoOr::Value(0.25));
        assert_eq!(c.nodes, 8);
    }
}
