//! `dpmobility` command-line tool.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dpmobility::data::{
    descriptive_stats, iqr_clean_with_report, load_csv, make_windows, parse_timestamp, split,
    write_csv, write_stats_csv, MobilitySeries, Scaler,
};
use dpmobility::forecast::{
    forecast_windows, run_baseline, run_gradient_perturbation, run_input_perturbation,
    run_nonprivate, utility_loss, write_report_rows, MetricsReport, RunArtifact, RunKind,
};
use dpmobility::neural::{ModelParams, ModelSpec};
use dpmobility::numeric::RngStream;
use dpmobility::privacy::{
    compute_epsilon, format_accountant, sanitize_series, BudgetLedger, DEFAULT_ORDERS,
};
use dpmobility::tune::{evaluate_pipeline, run_search, Campaign, SearchSpace};
use dpmobility::Error;

use config::{Loaded, RunChoice};
use manifest::Outputs;

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, config or input data (exit 2).
    Usage(String),
    /// The run itself failed (exit 1).
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_)
            | Error::ShapeMismatch(_)
            | Error::OutOfValidity(_)
            | Error::Parse { .. }
            | Error::Ordering(_)
            | Error::InsufficientData(_)
            | Error::BudgetRefused(_)
            | Error::Csv(_)
            | Error::Json(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "dpmobility", version, about = "Private forecasting of per-region mobility counts")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Base seed; overrides the configured seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for seeds and trials.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArg {
    /// Count CSV; overrides `dataset` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Per-region min, max, mean, std and median.
    Stats(DataArg),
    /// IQR cleaning of outliers and missing slots.
    Clean(DataArg),
    /// Gaussian-mechanism release of the whole series.
    Sanitize(DataArg),
    /// (ε, δ) of DP-SGD from the RDP accountant.
    Accountant(AccountantArgs),
    /// Train and evaluate the configured run kind over all seeds.
    Train(DataArg),
    /// Hyperparameter search for the configured run kind.
    Tune(DataArg),
    /// Score a saved model on the test split.
    Evaluate {
        #[command(flatten)]
        data: DataArg,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Compare run summaries against a non-private reference.
    Report {
        /// Directories written by `train`.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Non-private run used for utility loss.
        #[arg(long)]
        reference: PathBuf,
    },
}

#[derive(Args, Serialize)]
struct AccountantArgs {
    /// Sampling rate; alternatively give --batch and --samples.
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    noise_multiplier: f64,
    /// Optimizer steps; alternatively give --epochs with --batch and --samples.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long, default_value_t = 1e-7)]
    delta: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> CliResult {
    let loaded = Loaded::read(cli.config.as_deref())?;
    match &cli.command {
        Command::Stats(d) => cmd_stats(cli, &loaded, d),
        Command::Clean(d) => cmd_clean(cli, &loaded, d),
        Command::Sanitize(d) => cmd_sanitize(cli, &loaded, d),
        Command::Accountant(a) => cmd_accountant(a),
        Command::Train(d) => cmd_train(cli, &loaded, d),
        Command::Tune(d) => cmd_tune(cli, &loaded, d),
        Command::Evaluate { data, model } => cmd_evaluate(cli, &loaded, data, model),
        Command::Report { runs, reference } => cmd_report(cli, &loaded, runs, reference),
    }
}

/// Loads the dataset, keeps the configured period and cleans it unless
/// cleaning is disabled.
fn load_series(loaded: &Loaded, d: &DataArg) -> CliResult<(MobilitySeries, PathBuf)> {
    let path = loaded.dataset(d.data.as_deref())?;
    let raw = load_csv(&path).map_err(|e| match e {
        Error::Io(io) => CliError::Usage(format!("cannot read {}: {io}", path.display())),
        other => CliError::Usage(format!("{}: {other}", path.display())),
    })?;
    let bound = |s: &Option<String>| -> CliResult<Option<_>> {
        s.as_deref()
            .map(|v| parse_timestamp(v).ok_or_else(|| CliError::Usage(format!("bad timestamp `{v}` in [data]"))))
            .transpose()
    };
    let (start, end) = (bound(&loaded.config.data.start)?, bound(&loaded.config.data.end)?);
    let ts = raw.timestamps();
    let a = start.map_or(0, |s| ts.partition_point(|t| *t < s));
    let b = end.map_or(ts.len(), |e| ts.partition_point(|t| *t < e));
    let window = raw.slice(a..b.max(a));
    if window.is_empty() {
        return Err(CliError::Usage(format!("{} has no rows in the configured period", path.display())));
    }
    let series = if loaded.config.clean.enabled {
        let (s, report) = iqr_clean_with_report(&window)?;
        log::info!(
            "cleaned: {} slots inserted, {} missing filled, {} outliers replaced",
            report.inserted_slots,
            report.missing_filled,
            report.outliers_replaced
        );
        s
    } else {
        window
    };
    Ok((series, path))
}

fn json<T: Serialize>(v: &T) -> CliResult<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn cmd_stats(cli: &Cli, loaded: &Loaded, d: &DataArg) -> CliResult {
    let (series, path) = load_series(loaded, d)?;
    let stats = descriptive_stats(&series)?;
    let mut out = Outputs::new(&cli.out)?;
    write_stats_csv(&stats, out.create("stats.csv")?)?;
    write_stats_csv(&stats, std::io::stdout())?;
    out.finish("stats", loaded, &loaded.config, &[], &[path])
}

fn cmd_clean(cli: &Cli, loaded: &Loaded, d: &DataArg) -> CliResult {
    let path = loaded.dataset(d.data.as_deref())?;
    let raw = load_csv(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let (clean, report) = iqr_clean_with_report(&raw)?;
    let mut out = Outputs::new(&cli.out)?;
    write_csv(&clean, out.create("cleaned.csv")?)?;
    out.write("clean_report.json", &json(&report)?)?;
    out.finish("clean", loaded, &loaded.config, &[], &[path])
}

fn cmd_sanitize(cli: &Cli, loaded: &Loaded, d: &DataArg) -> CliResult {
    let params = loaded.config.privacy_params()?;
    // Check validity before touching the data.
    params.sigma()?;
    let clamp = loaded.config.privacy.as_ref().is_some_and(|p| p.clamp);
    let (series, path) = load_series(loaded, d)?;
    let seed = cli.seed.unwrap_or_else(|| loaded.config.seeds(None)[0]);
    let noisy = sanitize_series(&series, &params, &mut RngStream::new(seed, 0), clamp)?;
    let record = noisy.privacy().expect("sanitized").clone();
    let mut ledger = BudgetLedger::new(noisy.len());
    for ts in noisy.timestamps() {
        ledger.push(ts.to_string(), record.epsilon(), record.delta())?;
    }
    let mut out = Outputs::new(&cli.out)?;
    write_csv(&noisy, out.create("sanitized.csv")?)?;
    ledger.write_csv(out.create("ledger.csv")?)?;
    let (eps_total, delta_total) = ledger.totals();
    out.write(
        "privacy.json",
        &json(&serde_json::json!({
            "record": record,
            "epsilon_total": eps_total,
            "delta_total": delta_total,
        }))?,
    )?;
    println!(
        "sigma={:.6} releases={} eps_total={eps_total:.6}",
        record.sigma(),
        record.releases()
    );
    out.finish("sanitize", loaded, &loaded.config, &[seed], &[path])
}

fn cmd_accountant(a: &AccountantArgs) -> CliResult {
    let q = match (a.q, a.batch, a.samples) {
        (Some(q), _, _) => q,
        (None, Some(b), Some(n)) if n > 0 => b as f64 / n as f64,
        _ => return Err(CliError::Usage("give --q, or --batch with --samples".into())),
    };
    let steps = match (a.steps, a.epochs, a.batch, a.samples) {
        (Some(s), _, _, _) => s,
        (None, Some(e), Some(b), Some(n)) if b > 0 => e * (n / b) as u64,
        _ => return Err(CliError::Usage("give --steps, or --epochs with --batch and --samples".into())),
    };
    if !(a.delta > 0.0 && a.delta < 1.0) {
        return Err(CliError::Usage(format!("delta must lie in (0, 1), got {}", a.delta)));
    }
    if steps == 0 {
        eprintln!("warning: zero steps; epsilon is only the RDP-to-DP conversion term");
    }
    let (eps, order) = compute_epsilon(q, a.noise_multiplier, steps, a.delta, &DEFAULT_ORDERS)?;
    println!("{}", format_accountant(eps, order, a.delta));
    Ok(())
}

fn run_kind(loaded: &Loaded, series: &MobilitySeries, seeds: &[u64]) -> CliResult<RunArtifact> {
    let c = &loaded.config;
    let p = c.pipeline();
    Ok(match c.train.kind {
        RunChoice::Baseline => run_baseline(series, &p)?,
        RunChoice::Nonprivate => run_nonprivate(series, &p, seeds)?,
        RunChoice::GradientPerturbation => run_gradient_perturbation(series, &p, &c.gradient_perturbation()?, seeds)?,
        RunChoice::InputPerturbation => run_input_perturbation(series, &p, &c.privacy_params()?, seeds)?,
    })
}

fn cmd_train(cli: &Cli, loaded: &Loaded, d: &DataArg) -> CliResult {
    // Config problems surface before the data is read.
    match loaded.config.train.kind {
        RunChoice::GradientPerturbation => {
            loaded.config.gradient_perturbation()?;
        }
        RunChoice::InputPerturbation => {
            loaded.config.privacy_params()?.sigma()?;
        }
        _ => {}
    }
    let (series, path) = load_series(loaded, d)?;
    let seeds = loaded.config.seeds(cli.seed);
    let art = run_kind(loaded, &series, &seeds)?;
    let mut out = Outputs::new(&cli.out)?;
    art.write_report_csv(out.create("report.csv")?)?;
    art.write_predictions_csv(out.create("predictions.csv")?)?;
    out.write("summary.json", &summary_with_config(&art, loaded)?)?;
    if let (Some(spec), Some(params), Some(scaler)) = (&art.spec, &art.params, &art.scaler) {
        out.create("model.ntsr")?;
        params.save(out.path("model.ntsr"))?;
        out.write("spec.json", &json(spec)?)?;
        out.write("scaler.json", &json(scaler)?)?;
    }
    if let Some(log) = &art.train_log {
        log.write_csv(out.create("train_log.csv")?)?;
    }
    if let Some(p) = &art.privacy {
        let mut ledger = BudgetLedger::new(p.n_l);
        ledger.push_repeated("sample", p.epsilon, p.delta, p.n_l)?;
        ledger.write_csv(out.create("ledger.csv")?)?;
    }
    println!(
        "{}: mean RMSE {:.3}, mean MAE {:.3}{}",
        art.kind.as_str(),
        art.metrics.mean_rmse,
        art.metrics.mean_mae,
        art.privacy
            .as_ref()
            .map(|p| format!(", eps={:.4}, eps_total={:.3}", p.epsilon, p.epsilon_total))
            .unwrap_or_default()
    );
    out.finish("train", loaded, &loaded.config, &art.seeds, &[path])
}

/// The run summary with the experiment config echoed in both forms.
fn summary_with_config(art: &RunArtifact, loaded: &Loaded) -> CliResult<Vec<u8>> {
    let mut v: serde_json::Value =
        serde_json::from_str(&art.summary_json()?).map_err(|e| CliError::Runtime(e.to_string()))?;
    v["experiment"] = serde_json::json!({
        "config_text": loaded.text,
        "effective": loaded.config,
    });
    json(&v)
}

fn cmd_tune(cli: &Cli, loaded: &Loaded, d: &DataArg) -> CliResult {
    let c = &loaded.config;
    let (campaign, space) = match c.train.kind {
        RunChoice::Nonprivate => (Campaign::Nonprivate, SearchSpace::default()),
        RunChoice::GradientPerturbation => {
            let gp = c.gradient_perturbation()?;
            let space = SearchSpace {
                clip: c.tune.clip.clone(),
                ..SearchSpace::dp(gp.noise_multiplier)
            };
            (
                Campaign::GradientPerturbation {
                    num_microbatches: gp.num_microbatches,
                    delta: gp.delta,
                },
                space,
            )
        }
        RunChoice::InputPerturbation => {
            let p = c.privacy_params()?;
            p.sigma()?;
            (Campaign::InputPerturbation(p), SearchSpace::default())
        }
        RunChoice::Baseline => return Err(CliError::Usage("the baseline has no hyperparameters".into())),
    };
    let (series, path) = load_series(loaded, d)?;
    let base = c.pipeline();
    let seed = cli.seed.unwrap_or_else(|| c.seeds(None)[0]);
    let result = run_search(&space, c.tune.budget, c.tune.strategy, seed, |t, s| {
        evaluate_pipeline(&campaign, &series, &base, t, s)
    })?;
    let mut out = Outputs::new(&cli.out)?;
    result.write_csv(out.create("trials.csv")?)?;
    out.write("best.json", &json(result.best_trial())?)?;
    let best = result.best_trial();
    println!(
        "best trial {}: h1={} batch={} lr={:.6} objective={:.3}",
        best.id,
        best.config.hidden,
        best.config.batch_size,
        best.config.learning_rate,
        best.objective.unwrap_or(f64::NAN)
    );
    out.finish("tune", loaded, c, &[seed], &[path])
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn cmd_evaluate(cli: &Cli, loaded: &Loaded, d: &DataArg, model: &Path) -> CliResult {
    let spec: ModelSpec = read_json(&model.join("spec.json"))?;
    let scaler: Scaler = read_json(&model.join("scaler.json"))?;
    let params = ModelParams::load(model.join("model.ntsr"), &spec)
        .map_err(|e| CliError::Usage(format!("{}: {e}", model.join("model.ntsr").display())))?;
    let (series, path) = load_series(loaded, d)?;
    let cfg = loaded.config.pipeline();
    let (train, test) = split(&series, cfg.train_days, cfg.test_days)?;
    let windows = make_windows(&test, cfg.lag, Some(&train))?;
    let y_pred = forecast_windows(&spec, &params, &scaler, &scaler.apply(&windows)?)?;
    let y_true = windows.targets_tensor().into_values();
    let metrics = MetricsReport::compute(&y_true, &y_pred, series.regions(), cfg.rmse_form)?;
    let mut out = Outputs::new(&cli.out)?;
    let mut w = csv_writer(out.create("report.csv")?);
    write_report_rows(&mut w, RunKind::Nonprivate, &metrics, true)?;
    drop(w);
    out.write("metrics.json", &json(&metrics)?)?;
    println!("mean RMSE {:.3}, mean MAE {:.3}", metrics.mean_rmse, metrics.mean_mae);
    let inputs = [path, model.join("model.ntsr"), model.join("scaler.json")];
    out.finish("evaluate", loaded, &loaded.config, &[], &inputs)
}

fn csv_writer<W: std::io::Write>(w: W) -> csv::Writer<W> {
    csv::Writer::from_writer(w)
}

/// Only the fields of `summary.json` the comparison needs.
#[derive(serde::Deserialize)]
struct SummaryView {
    kind: String,
    metrics: MetricsReport,
    privacy: Option<PrivacyView>,
}

#[derive(serde::Deserialize)]
struct PrivacyView {
    epsilon: f64,
    epsilon_total: f64,
}

fn cmd_report(cli: &Cli, loaded: &Loaded, runs: &[PathBuf], reference: &Path) -> CliResult {
    let reference_summary: SummaryView = read_json(&reference.join("summary.json"))?;
    let e_np = (&reference_summary.metrics.mean_rmse, &reference_summary.metrics.mean_mae);
    let mut out = Outputs::new(&cli.out)?;
    let mut w = csv_writer(out.create("comparison.csv")?);
    let io = |e: csv::Error| CliError::Runtime(e.to_string());
    w.write_record([
        "run",
        "kind",
        "mean_rmse",
        "mean_mae",
        "epsilon",
        "epsilon_total",
        "utility_loss_rmse",
        "utility_loss_mae",
    ])
    .map_err(io)?;
    let mut inputs = vec![reference.join("summary.json")];
    for dir in runs {
        let s: SummaryView = read_json(&dir.join("summary.json"))?;
        let (eps, total) = s
            .privacy
            .as_ref()
            .map(|p| (p.epsilon.to_string(), p.epsilon_total.to_string()))
            .unwrap_or_default();
        w.write_record([
            dir.display().to_string(),
            s.kind,
            s.metrics.mean_rmse.to_string(),
            s.metrics.mean_mae.to_string(),
            eps,
            total,
            utility_loss(s.metrics.mean_rmse, *e_np.0)?.to_string(),
            utility_loss(s.metrics.mean_mae, *e_np.1)?.to_string(),
        ])
        .map_err(io)?;
        inputs.push(dir.join("summary.json"));
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    drop(w);
    out.finish("report", loaded, &loaded.config, &[], &inputs)
}
