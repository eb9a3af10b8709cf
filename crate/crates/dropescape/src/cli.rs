//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 gate failure
//! (dp subcommands). The default seed comes from `--seed`, then the
//! `DROPESCAPE_SEED` environment variable, then 0.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::bench;
use crate::dp_glm::{self, PrivacyBudget, PrivateGlmOptions};
use crate::dp_simplex::{self, SimplexOutcome};
use crate::error::{Error, Result};
use crate::glm::GlmLoss;
use crate::netescape;
use crate::rng::SeededRng;
use crate::sgd::{dropout_sgd_train, SgdConfig};

#[derive(Parser, Debug)]
#[command(
    name = "dropescape",
    version,
    about = "Dropout training lab: escape trials, dropout SGD for GLMs, private learning, and stability benchmarks"
)]
struct Cli {
    /// Base seed; falls back to $DROPESCAPE_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel grids (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a GLM with dropout SGD and emit the risk trajectory as CSV.
    SgdTrain(SgdTrainArgs),
    /// Private learning over the simplex.
    DpSimplex {
        #[command(subcommand)]
        command: DpSimplexCommand,
    },
    /// Private GLM training via propose-test-release plus Gaussian release.
    DpGlm(DpGlmArgs),
    /// Dropout escape trial on a constructed one-hidden-layer instance.
    Escape(EscapeArgs),
    /// Leave-out stability benchmark over a method grid.
    Bench(BenchArgs),
    /// Exhaustive privacy audit of the masked argmin (alias of
    /// `dp-simplex audit`).
    Audit(AuditArgs),
}

#[derive(Subcommand, Debug)]
enum DpSimplexCommand {
    /// Gate on the noisy column statistic and release a vertex on pass.
    Run(DpSimplexRunArgs),
    /// Exact outcome-distribution audit of a neighboring pair.
    Audit(AuditArgs),
}

#[derive(Args, Debug)]
struct SgdTrainArgs {
    /// Labelled dataset path.
    #[arg(long)]
    data: PathBuf,
    /// csv or svmlight.
    #[arg(long, default_value = "csv")]
    format: String,
    /// squared or logistic.
    #[arg(long)]
    loss: String,
    /// Keep-rate alpha in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    rate: f64,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    /// l2:R, simplex, or box:LO:HI.
    #[arg(long, default_value = "l2:10")]
    constraint: String,
    /// Trajectory logging period in steps.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Output CSV path (columns step,dropout_risk).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DpSimplexRunArgs {
    /// Binary dataset path (0/1 rows, no labels).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    delta: f64,
    /// Output CSV manifest path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// Binary dataset path.
    #[arg(long)]
    data: PathBuf,
    /// Neighboring binary dataset path (differs in at most one row).
    #[arg(long)]
    data_prime: PathBuf,
    /// Output CSV path (columns outcome,prob_D,prob_Dprime,ratio).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DpGlmArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long)]
    loss: String,
    #[arg(long, default_value_t = 0.5)]
    rate: f64,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value = "l2:10")]
    constraint: String,
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    delta: f64,
    /// Accuracy level: cap on the Gaussian noise standard deviation.
    #[arg(long)]
    sigma_cap: f64,
    /// Project the released model back onto the constraint set.
    #[arg(long)]
    proper: bool,
    /// Calibration constant for the stability bound.
    #[arg(long, default_value_t = 1.0)]
    constant: f64,
    /// Output CSV manifest path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EscapeArgs {
    /// Hidden nodes m.
    #[arg(long, default_value_t = 8)]
    nodes: usize,
    /// Input dimension (must be >= nodes).
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Shared output weight of the instance.
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// Scale of the target's mirrored node directions, in [0, 1].
    #[arg(long, default_value_t = 0.9)]
    target_scale: f64,
    /// Dropout draws.
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    /// Shared evaluation samples.
    #[arg(long, default_value_t = 100_000)]
    mc_samples: usize,
    /// Output CSV path (columns draw_id,perturbed_error,success).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Experiment configuration file (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };

    let seed = cli.seed.or_else(env_seed).unwrap_or(0);
    let body = || match dispatch(cli.command, seed) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    };
    match cli.threads {
        Some(k) => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
            Ok(pool) => pool.install(body),
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        None => body(),
    }
}

fn env_seed() -> Option<u64> {
    std::env::var("DROPESCAPE_SEED")
        .ok()
        .and_then(|v| v.parse().ok())
}

fn parse_loss(s: &str) -> Result<GlmLoss> {
    match s {
        "squared" => Ok(GlmLoss::Squared),
        "logistic" => Ok(GlmLoss::Logistic),
        other => Err(Error::InvalidParameter(format!("unknown loss '{other}'"))),
    }
}

fn dispatch(command: Command, seed: u64) -> Result<i32> {
    match command {
        Command::SgdTrain(a) => sgd_train(a, seed),
        Command::DpSimplex {
            command: DpSimplexCommand::Run(a),
        } => dp_simplex_run(a, seed),
        Command::DpSimplex {
            command: DpSimplexCommand::Audit(a),
        }
        | Command::Audit(a) => audit(a),
        Command::DpGlm(a) => dp_glm_run(a, seed),
        Command::Escape(a) => escape(a, seed),
        Command::Bench(a) => bench_run(a, seed),
    }
}

fn load_glm_dataset(path: &std::path::Path, format: &str) -> Result<crate::glm::Dataset> {
    bench::load_dataset(path, bench::DataFormat::parse(format)?)
}

fn sgd_subcommand_config(
    iters: usize,
    rate: f64,
    constraint: &str,
    seed: u64,
    log_every: usize,
) -> Result<SgdConfig> {
    let constraint = bench::parse_constraint(constraint)?;
    let mut cfg = SgdConfig::new(iters, rate, constraint, seed);
    cfg.log_every = log_every;
    Ok(cfg)
}

fn sgd_train(a: SgdTrainArgs, seed: u64) -> Result<i32> {
    let data = load_glm_dataset(&a.data, &a.format)?;
    let loss = parse_loss(&a.loss)?;
    let cfg = sgd_subcommand_config(a.iters, a.rate, &a.constraint, seed, a.log_every)?;
    let model = dropout_sgd_train(&data, loss, &cfg)?;
    let mut csv = String::from("step,dropout_risk\n");
    for point in &model.trajectory {
        csv.push_str(&format!("{},{}\n", point.step, point.risk));
    }
    std::fs::write(&a.out, csv)?;
    let final_risk = bench::deterministic_dropout_risk(&model.theta, &data, loss, a.rate)?;
    println!(
        "final_theta={}",
        model
            .theta
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    println!("final_dropout_risk={final_risk}");
    Ok(0)
}

fn dp_simplex_run(a: DpSimplexRunArgs, seed: u64) -> Result<i32> {
    let data = bench::load_binary_dataset(&a.data)?;
    let mut rng = SeededRng::new(seed, 0);
    let r = dp_simplex::private_simplex_learn(&data, a.eps, a.delta, &mut rng)?;
    let outcome = match r.outcome {
        SimplexOutcome::Vertex(j) => j.to_string(),
        SimplexOutcome::Failure => "failure".to_string(),
    };
    std::fs::write(
        &a.out,
        format!(
            "lambda,lambda_hat,threshold,outcome,total_eps,total_delta\n{},{},{},{},{},{}\n",
            r.lambda, r.lambda_hat, r.threshold, outcome, r.total_eps, r.total_delta
        ),
    )?;
    println!(
        "outcome={outcome} lambda={} threshold={} privacy=({}, {})",
        r.lambda, r.threshold, r.total_eps, r.total_delta
    );
    Ok(if r.outcome == SimplexOutcome::Failure {
        3
    } else {
        0
    })
}

fn audit(a: AuditArgs) -> Result<i32> {
    let d = bench::load_binary_dataset(&a.data)?;
    let d_prime = bench::load_binary_dataset(&a.data_prime)?;
    let table = dp_simplex::audit_argmin_distribution(&d, &d_prime)?;
    std::fs::write(&a.out, table.to_csv())?;
    println!("max_ratio={}", table.max_ratio);
    Ok(0)
}

fn dp_glm_run(a: DpGlmArgs, seed: u64) -> Result<i32> {
    let data = load_glm_dataset(&a.data, &a.format)?;
    let loss = parse_loss(&a.loss)?;
    let cfg = sgd_subcommand_config(a.iters, a.rate, &a.constraint, seed, 0)?;
    let budget = PrivacyBudget::new(a.eps, a.delta)?;
    let mut opts = PrivateGlmOptions::new(budget, a.sigma_cap);
    opts.proper = a.proper;
    opts.constant = a.constant;
    let mut rng = SeededRng::new(seed, 0);
    let r = dp_glm::private_glm_train(&data, loss, &cfg, &opts, &mut rng)?;
    std::fs::write(&a.out, r.manifest.to_csv())?;
    if r.manifest.passed {
        let g = crate::glm::lipschitz_over_constraint(loss, &data, &cfg.constraint, 1.0 / a.rate)?;
        let inflation = dp_glm::risk_inflation_bound(
            g,
            data.norm_bound(),
            data.p(),
            r.manifest.noise_sigma,
            a.proper,
        );
        println!(
            "released model with sigma={} k={} predicted_risk_inflation={inflation}",
            r.manifest.noise_sigma, r.manifest.boost_runs
        );
        Ok(0)
    } else {
        println!(
            "gate failed: lambda_hat={} needed > zeta-adjusted threshold",
            r.manifest.lambda_hat
        );
        Ok(3)
    }
}

fn escape(a: EscapeArgs, seed: u64) -> Result<i32> {
    let (g, f) = netescape::orthonormal_escape_instance(a.nodes, a.dim, a.alpha, a.target_scale)?;
    let dist = netescape::SampleDistribution::StandardNormal { dim: a.dim };
    let report = netescape::escape_trial(&g, |x| f.eval(x), &dist, a.draws, a.mc_samples, seed)?;
    let mut csv = String::from("draw_id,perturbed_error,success\n");
    let cutoff = report.factor * report.initial_error;
    for (i, e) in report.perturbed_errors.iter().enumerate() {
        csv.push_str(&format!("{},{},{}\n", i, e, *e <= cutoff));
    }
    csv.push_str(&format!(
        "# frequency={} factor={} norm_precondition={} threshold_precondition={} initial_error={}\n",
        report.success_frequency,
        report.factor,
        report.norm_precondition_ok,
        report.threshold_precondition_ok,
        report.initial_error
    ));
    std::fs::write(&a.out, csv)?;
    println!(
        "frequency={} factor={} norm_ok={} threshold_ok={}",
        report.success_frequency,
        report.factor,
        report.norm_precondition_ok,
        report.threshold_precondition_ok
    );
    Ok(0)
}

fn bench_run(a: BenchArgs, seed_override: u64) -> Result<i32> {
    let text = std::fs::read_to_string(&a.config)?;
    let mut cfg = bench::parse_config(&text)?;
    // the CLI/env seed wins over the config file when explicitly nonzero
    if seed_override != 0 {
        cfg.seed = seed_override;
    }
    let rows = bench::run_stability_experiment(&cfg)?;
    std::fs::write(&a.out, bench::rows_to_csv(&rows))?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(0)
}
