//! Experiment orchestration: builds the problem, resolves `"auto"` values
//! against it, runs the selected algorithm and renders the metrics stream.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ef_landing::baselines::{
    gaussian_start, run_baseline, unconstrained_vanilla_compression, BaselineKind,
    BaselineOptions,
};
use ef_landing::compress::{theta_beta, CompressorSpec};
use ef_landing::dataset;
use ef_landing::diagnostics::MetricsRecord;
use ef_landing::engine::{
    run_blockwise, run_ef_landing, schedule_deterministic, schedule_stochastic, BlockRunOptions,
    RunOptions, ScheduleParams,
};
use ef_landing::manifold::{
    merit_value, mu_lower_bound, random_orthonormal, safe_step_size, MeritParams,
    SafeRegionParams,
};
use ef_landing::problems::{
    estimate_merit_smoothness, BlockProblem, BlockToyProblem, LinearProblem, MatrixProblem,
    NoiseKind, NoisyOracle, PcaProblem,
};
use ef_landing::rng::{stream, StreamDomain};
use ef_landing::MatrixVar;

use crate::config::{
    build_compressor, flat_len, Algorithm, AutoOr, Experiment, NoiseChoice, RunConfig,
};
use crate::csv;

pub struct RunOutcome {
    pub csv: String,
    pub diverged: bool,
}

fn echo_push(echo: &mut Vec<(String, String)>, key: &str, value: impl ToString) {
    echo.push((key.to_string(), value.to_string()));
}

fn base_echo(config: &RunConfig, spec: &CompressorSpec, d: usize) -> Vec<(String, String)> {
    let mut echo = Vec::new();
    echo_push(&mut echo, "experiment", format!("\"{}\"", config.experiment.name()));
    echo_push(&mut echo, "algorithm", format!("\"{}\"", config.algorithm.name()));
    echo_push(&mut echo, "error_feedback", config.error_feedback);
    echo_push(&mut echo, "compressor", format!("\"{}\"", config.compressor.name()));
    echo_push(&mut echo, "compressor_spec", format!("\"{:?}\"", spec.kind));
    echo_push(&mut echo, "alpha", spec.contractive_factor(d));
    echo_push(&mut echo, "flat_entries", d);
    echo_push(&mut echo, "lambda", config.lambda);
    echo_push(&mut echo, "epsilon", config.epsilon);
    echo_push(&mut echo, "n", config.n);
    echo_push(&mut echo, "p", config.p);
    echo_push(&mut echo, "l", config.l);
    echo_push(&mut echo, "nodes", config.nodes);
    echo_push(&mut echo, "sigma_data", config.sigma_data);
    echo_push(&mut echo, "sigma_noise", config.sigma_noise);
    echo_push(&mut echo, "iters", config.iters);
    echo_push(&mut echo, "seed", config.seed);
    echo_push(&mut echo, "metrics_every", config.metrics_every);
    echo_push(&mut echo, "threads", config.threads);
    echo
}

struct ResolvedPca {
    schedule: ScheduleParams,
    grad_bound: f64,
    merit: Option<MeritParams>,
}

/// Resolves the clip bound, smoothness constants and the schedule for PCA
/// runs, estimating whatever was left as `"auto"`/`"estimate"`.
fn resolve_pca(
    config: &RunConfig,
    problem: &PcaProblem,
    spec: &CompressorSpec,
    echo: &mut Vec<(String, String)>,
) -> Result<ResolvedPca> {
    let eps = config.epsilon;
    let stochastic = config.experiment == Experiment::PcaStochastic;
    let sigma = if stochastic { config.sigma_noise } else { 0.0 };

    let grad_bound = match config.grad_bound {
        AutoOr::Value(v) => v,
        AutoOr::Auto => {
            // Exact-gradient bound plus headroom for truncated noise.
            problem.grad_bound_estimate(eps) + 6.0 * sigma
        }
    };
    let region = SafeRegionParams::new(eps, config.lambda, grad_bound)
        .map_err(anyhow::Error::from)?;
    let gamma_safe = safe_step_size(&region);

    let d = problem.rows() * problem.cols();
    let alpha = spec.contractive_factor(d);
    let (theta, beta) = theta_beta(alpha).map_err(anyhow::Error::from)?;

    let need_merit =
        config.gamma == AutoOr::Auto || (stochastic && config.eta == AutoOr::Auto) || config.diagnostics;
    let merit = if need_merit {
        let (l_est, lt_est) = problem.smoothness_estimates();
        let l = config.smooth_l.value().unwrap_or(l_est);
        let lt = config.avg_smooth_l.value().unwrap_or(lt_est);
        let mu_bound = mu_lower_bound(l, grad_bound, config.lambda, eps)
            .map_err(anyhow::Error::from)?;
        let mu = match config.mu {
            AutoOr::Auto => mu_bound,
            AutoOr::Value(v) => v,
        };
        let lm = match config.merit_smooth_lm {
            AutoOr::Value(v) => v,
            AutoOr::Auto => estimate_merit_smoothness(problem, mu, eps, 1000, config.seed)
                .context("merit smoothness estimator needs a problem with exact curvature")?,
        };
        Some(MeritParams::new(mu, l, lt, lm, &region).map_err(anyhow::Error::from)?)
    } else {
        None
    };

    let schedule = match (config.gamma, config.eta, stochastic) {
        (AutoOr::Value(g), AutoOr::Value(e), _) => {
            ScheduleParams::manual(g, e, config.lambda, alpha).map_err(anyhow::Error::from)?
        }
        (gamma, eta, false) => {
            let merit = merit.as_ref().expect("deterministic auto schedule needs merit");
            let mut s = schedule_deterministic(&region, merit, theta, beta);
            if let Some(g) = gamma.value() {
                s.gamma = g;
            }
            if let Some(e) = eta.value() {
                if e != 1.0 {
                    bail!("deterministic runs use eta = 1");
                }
            }
            s
        }
        (gamma, eta, true) => {
            let merit = merit.as_ref().expect("stochastic auto schedule needs merit");
            let x0 = random_orthonormal(
                problem.rows(),
                problem.cols(),
                &mut stream(config.seed, StreamDomain::Init, 0, 0),
            );
            let g0 = problem.global_gradient(&x0);
            let lyap0 = merit_value(&x0, &g0, problem.value(&x0), merit.mu)
                - problem.optimum_value().unwrap_or(0.0);
            let mut s = schedule_stochastic(
                &region,
                merit,
                theta,
                beta,
                problem.num_nodes(),
                config.iters.max(1),
                config.sigma_noise,
                lyap0.max(f64::MIN_POSITIVE),
            )
            .map_err(anyhow::Error::from)?;
            if let Some(g) = gamma.value() {
                s.gamma = g;
            }
            if let Some(e) = eta.value() {
                s.eta = e;
            }
            echo_push(echo, "lyapunov0", csv::format_float(lyap0));
            s
        }
    };
    let schedule = schedule.with_decay(config.decay.clone());
    if schedule.gamma > gamma_safe {
        log::warn!(
            "step size {} exceeds the uniform safe step size {gamma_safe}; feasibility is not guaranteed",
            schedule.gamma
        );
    }

    echo_push(echo, "gamma", csv::format_float(schedule.gamma));
    echo_push(echo, "eta", csv::format_float(schedule.eta));
    echo_push(echo, "gamma_safe", csv::format_float(gamma_safe));
    echo_push(echo, "grad_bound", csv::format_float(grad_bound));
    echo_push(echo, "theta", csv::format_float(theta));
    echo_push(echo, "beta", csv::format_float(beta));
    if let Some(m) = &merit {
        echo_push(echo, "mu", csv::format_float(m.mu));
        echo_push(echo, "smooth_l", csv::format_float(m.smooth_l));
        echo_push(echo, "avg_smooth_l", csv::format_float(m.avg_smooth_l));
        echo_push(echo, "merit_smooth_lm", csv::format_float(m.merit_smooth_lm));
    }
    if !config.decay.is_empty() {
        echo_push(echo, "decay", format!("{:?}", config.decay));
    }
    Ok(ResolvedPca {
        schedule,
        grad_bound,
        merit,
    })
}

/// Builds the PCA problem, either fresh from the seed or from a saved
/// dataset whose header must match the configuration.
fn pca_problem(config: &RunConfig, data: Option<&Path>) -> Result<PcaProblem> {
    match data {
        None => PcaProblem::generate(
            config.n,
            config.l,
            config.p,
            config.sigma_data,
            config.nodes,
            config.seed,
        )
        .map_err(anyhow::Error::from),
        Some(path) => {
            let (header, problem) = dataset::load(path)?;
            let expect = (
                config.n as u32,
                (config.l * config.nodes) as u32,
                config.nodes as u32,
                config.p as u32,
                config.seed,
            );
            let got = (header.n, header.l_total, header.nodes, header.p, header.seed);
            if expect != got {
                bail!(
                    "dataset header (n, l_total, nodes, p, seed) = {got:?} does not match config {expect:?}"
                );
            }
            Ok(problem)
        }
    }
}

pub fn execute(config: &RunConfig, data: Option<&Path>) -> Result<RunOutcome> {
    match config.experiment {
        Experiment::PcaDeterministic | Experiment::PcaStochastic => run_pca(config, data),
        Experiment::Counterexample => run_counterexample(config),
        Experiment::BlockToy => run_block_toy(config),
        Experiment::UnconstrainedBaseline => run_unconstrained(config),
    }
}

fn run_pca(config: &RunConfig, data: Option<&Path>) -> Result<RunOutcome> {
    let problem = pca_problem(config, data)?;
    let d = flat_len(config);
    let spec = build_compressor(config, d)?;
    if config.algorithm == Algorithm::VanillaLanding
        && spec != CompressorSpec::identity()
    {
        bail!("vanilla-landing is the uncompressed reference; use compressor = \"identity\"");
    }
    let mut echo = base_echo(config, &spec, d);
    let resolved = resolve_pca(config, &problem, &spec, &mut echo)?;
    if let Some(path) = data {
        echo_push(&mut echo, "data", format!("\"{}\"", path.display()));
    }

    let outcome = match config.algorithm {
        Algorithm::EfLanding | Algorithm::VanillaLanding => {
            let mut opts = RunOptions::new(
                spec,
                resolved.schedule.clone(),
                config.iters,
                config.seed,
                resolved.grad_bound,
            );
            opts.error_feedback = config.error_feedback;
            opts.metrics_every = config.metrics_every;
            opts.threads = config.threads;
            opts.with_error_terms = config.diagnostics;
            opts.with_cc_dist = config.diagnostics;
            opts.merit = if config.diagnostics {
                resolved.merit
            } else {
                None
            };
            let run = match config.experiment {
                Experiment::PcaStochastic => {
                    let kind = match config.noise {
                        NoiseChoice::AdditiveGaussian => NoiseKind::AdditiveGaussian,
                        NoiseChoice::Minibatch => NoiseKind::Minibatch {
                            batch_size: config.batch_size,
                        },
                    };
                    let oracle = NoisyOracle::new(problem, config.sigma_noise, kind);
                    run_ef_landing(&oracle, &opts)?
                }
                _ => run_ef_landing(&problem, &opts)?,
            };
            (run.metrics, run.diverged)
        }
        Algorithm::QrRetraction | Algorithm::Penalty => {
            let gamma = match config.gamma {
                AutoOr::Value(g) => g,
                AutoOr::Auto => bail!(
                    "algorithm '{}' needs an explicit gamma",
                    config.algorithm.name()
                ),
            };
            let kind = match config.algorithm {
                Algorithm::QrRetraction => BaselineKind::QrRetraction,
                _ => {
                    echo_push(&mut echo, "penalty_lambda", config.penalty_lambda);
                    BaselineKind::Penalty {
                        lambda_pen: config.penalty_lambda,
                    }
                }
            };
            let mut opts = BaselineOptions::new(
                gamma,
                config.lambda,
                resolved.grad_bound,
                config.iters,
                config.seed,
            );
            opts.metrics_every = config.metrics_every;
            let run = run_baseline(&problem, kind, &opts)?;
            (run.metrics, run.diverged)
        }
    };
    Ok(RunOutcome {
        csv: csv::render(&echo, &outcome.0, config.diagnostics),
        diverged: outcome.1,
    })
}

fn run_counterexample(config: &RunConfig) -> Result<RunOutcome> {
    if (config.n, config.p) != (2, 1) {
        bail!("the counterexample is two-dimensional; use n = 2, p = 1");
    }
    let problem = LinearProblem::stagnation_toy(config.nodes);
    let d = 2;
    let spec = build_compressor(config, d)?;
    let mut echo = base_echo(config, &spec, d);
    let gamma = config.gamma.value().expect("validated");
    let eta = config.eta.value().unwrap_or(1.0);
    let alpha = spec.contractive_factor(d);
    let schedule = ScheduleParams::manual(gamma, eta, config.lambda, alpha)
        .map_err(anyhow::Error::from)?
        .with_decay(config.decay.clone());
    echo_push(&mut echo, "gamma", csv::format_float(gamma));
    echo_push(&mut echo, "eta", csv::format_float(eta));
    let grad_bound = config.grad_bound.value().unwrap_or(1e8);
    echo_push(&mut echo, "grad_bound", csv::format_float(grad_bound));

    let mut opts = RunOptions::new(spec, schedule, config.iters, config.seed, grad_bound);
    opts.error_feedback = config.error_feedback;
    opts.metrics_every = config.metrics_every;
    opts.x0 = Some(MatrixVar::from_column_slice(2, 1, &[1.0, 0.0]));
    let run = run_ef_landing(&problem, &opts)?;
    Ok(RunOutcome {
        csv: csv::render(&echo, &run.metrics, false),
        diverged: run.diverged,
    })
}

fn run_block_toy(config: &RunConfig) -> Result<RunOutcome> {
    let problem = BlockToyProblem::generate(
        &config.blocks,
        config.free_dim,
        config.nodes,
        config.seed,
    )
    .map_err(anyhow::Error::from)?;
    let d = problem.layout().total_len();
    let spec = build_compressor(config, d)?;
    let mut echo = base_echo(config, &spec, d);
    echo_push(&mut echo, "blocks", format!("{:?}", config.blocks));
    echo_push(&mut echo, "free_dim", config.free_dim);
    let gamma = config.gamma.value().expect("validated");
    let eta = config.eta.value().unwrap_or(1.0);
    let alpha = spec.contractive_factor(d);
    let schedule = ScheduleParams::manual(gamma, eta, config.lambda, alpha)
        .map_err(anyhow::Error::from)?
        .with_decay(config.decay.clone());
    echo_push(&mut echo, "gamma", csv::format_float(gamma));
    echo_push(&mut echo, "eta", csv::format_float(eta));
    let grad_bound = config.grad_bound.value().unwrap_or(1e8);
    echo_push(&mut echo, "grad_bound", csv::format_float(grad_bound));

    let mut opts = BlockRunOptions::new(spec, schedule, config.iters, config.seed, grad_bound);
    opts.error_feedback = config.error_feedback;
    opts.metrics_every = config.metrics_every;
    opts.threads = config.threads;
    let run = run_blockwise(&problem, &opts)?;
    Ok(RunOutcome {
        csv: csv::render(&echo, &run.metrics, false),
        diverged: run.diverged,
    })
}

fn run_unconstrained(config: &RunConfig) -> Result<RunOutcome> {
    let d = config.n;
    let spec = build_compressor(config, d)?;
    let mut echo = base_echo(config, &spec, d);
    let gamma = config.gamma.value().expect("validated");
    echo_push(&mut echo, "gamma", csv::format_float(gamma));
    let x0 = gaussian_start(d, config.seed);
    let records = unconstrained_vanilla_compression(
        |x| 0.5 * x.norm_squared(),
        |x| x.clone(),
        x0,
        &spec,
        gamma,
        config.iters,
        config.seed,
    )?;
    let metrics: Vec<MetricsRecord> = records
        .iter()
        .map(|r| MetricsRecord {
            iter: r.iter,
            loss_gap: r.value,
            constraint_violation: 0.0,
            rgrad_norm_sq: r.grad_norm_sq,
            bytes_up_cum: r.bytes_up_cum,
            wall_ms: 0.0,
            lyapunov: None,
            err_g: None,
            err_p_tilde: None,
            err_p: None,
            cc_dist: None,
        })
        .collect();
    Ok(RunOutcome {
        csv: csv::render(&echo, &metrics, false),
        diverged: false,
    })
}

/// Generates and saves the configured dataset.
pub fn gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    if !matches!(
        config.experiment,
        Experiment::PcaDeterministic | Experiment::PcaStochastic
    ) {
        bail!("gen-data applies to the PCA experiments");
    }
    let problem = pca_problem(config, None)?;
    dataset::save(&problem, out)?;
    Ok(())
}

/// Prints the resolved constants and schedule for the configured problem.
pub fn estimate(config: &RunConfig) -> Result<String> {
    if !matches!(
        config.experiment,
        Experiment::PcaDeterministic | Experiment::PcaStochastic
    ) {
        bail!("estimate applies to the PCA experiments");
    }
    let problem = pca_problem(config, None)?;
    let d = flat_len(config);
    let spec = build_compressor(config, d)?;
    let mut echo = base_echo(config, &spec, d);
    // Force full resolution even when explicit values were given.
    let mut forced = config.clone();
    forced.diagnostics = true;
    let resolved = resolve_pca(&forced, &problem, &spec, &mut echo)?;
    let mut out = String::new();
    for (k, v) in &echo {
        out.push_str(&format!("{k} = {v}\n"));
    }
    let merit = resolved.merit.expect("estimate resolves merit constants");
    out.push_str(&format!(
        "mu_lower_bound = {}\n",
        csv::format_float(
            mu_lower_bound(
                merit.smooth_l,
                resolved.grad_bound,
                config.lambda,
                config.epsilon
            )
            .map_err(anyhow::Error::from)?
        )
    ));
    Ok(out)
}
