//! Experiment pipelines: persistence baseline, non-private training, DP-SGD
//! (gradient perturbation) and Gaussian input perturbation, plus RMSE/MAE
//! reporting.

use std::cell::RefCell;
use std::io::Write;

use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    make_windows, split, CountSource, MobilitySeries, Scaler, WindowedDataset, CYCLICAL_FEATURES,
    SLOTS_PER_DAY, TIMESTAMP_FORMAT,
};
use crate::error::{invalid, shape, Error, Result};
use crate::neural::model::forward_with_fingerprint;
use crate::neural::{init_params, Activation, CellKind, ModelParams, ModelSpec};
use crate::numeric::RngStream;
use crate::optim::{train, DpSgdConfig, NonPrivateConfig, TrainConfig, TrainLog};
use crate::privacy::{
    compute_epsilon, delta_budget_check, sanitize_series, PrivacyParams, DEFAULT_ORDERS,
};

/// Stream id of the input-perturbation noise, drawn from the first seed.
const SANITIZE_STREAM: u64 = 0x5a17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    Baseline,
    Nonprivate,
    GradientPerturbation,
    InputPerturbation,
}

impl RunKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RunKind::Baseline => "baseline",
            RunKind::Nonprivate => "nonprivate",
            RunKind::GradientPerturbation => "gradient-perturbation",
            RunKind::InputPerturbation => "input-perturbation",
        }
    }
}

/// Placement of the `1/n` factor in RMSE.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RmseForm {
    /// `sqrt(Σ r² / n)`.
    #[default]
    Conventional,
    /// `sqrt(Σ r²) / n`, kept for auditing against the printed formula.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub regions: Vec<String>,
    pub rmse: Vec<f64>,
    pub mae: Vec<f64>,
    pub mean_rmse: f64,
    pub mean_mae: f64,
    /// Sample standard deviation of `rmse` across regions (0 for one region).
    pub std_rmse: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl MetricsReport {
    /// Per-region errors of row-major `n × R` matrices.
    pub fn compute(y_true: &[f64], y_pred: &[f64], regions: &[String], form: RmseForm) -> Result<Self> {
        let r = regions.len();
        if r == 0 || y_true.len() != y_pred.len() || y_true.len() % r != 0 || y_true.is_empty() {
            return Err(invalid(format!(
                "metrics need equal non-empty n × {r} matrices, got {} and {} values",
                y_true.len(),
                y_pred.len()
            )));
        }
        let n = (y_true.len() / r) as f64;
        let mut sq = vec![0.0; r];
        let mut abs = vec![0.0; r];
        for (i, (y, p)) in y_true.iter().zip(y_pred).enumerate() {
            let e = y - p;
            sq[i % r] += e * e;
            abs[i % r] += e.abs();
        }
        let rmse: Vec<f64> = sq
            .iter()
            .map(|s| match form {
                RmseForm::Conventional => (s / n).sqrt(),
                RmseForm::Literal => s.sqrt() / n,
            })
            .collect();
        let mae: Vec<f64> = abs.iter().map(|a| a / n).collect();
        Ok(Self {
            regions: regions.to_vec(),
            mean_rmse: mean(&rmse),
            mean_mae: mean(&mae),
            std_rmse: sample_std(&rmse),
            rmse,
            mae,
        })
    }
}

/// Next-slot forecast equal to the current slot, starting from the last
/// training snapshot. Returns row-major predictions aligned with `test`.
pub fn persistence_forecast(test: &impl CountSource, last_train: &[f64]) -> Result<Vec<f64>> {
    if test.is_empty() {
        return Err(invalid("test series is empty"));
    }
    let r = test.regions().len();
    if last_train.len() != r {
        return Err(shape(format!("last training row has {} values, test has {r} regions", last_train.len())));
    }
    let mut out = Vec::with_capacity(test.len() * r);
    out.extend_from_slice(last_train);
    for t in 0..test.len() - 1 {
        out.extend_from_slice(test.row(t));
    }
    Ok(out)
}

/// Relative degradation in percent of a private error versus the non-private one.
pub fn utility_loss(e_dp: f64, e_np: f64) -> Result<f64> {
    if !(e_np > 0.0) {
        return Err(invalid(format!("reference error must be positive, got {e_np}")));
    }
    Ok(100.0 * (e_dp - e_np) / e_np)
}

/// Everything a pipeline needs besides the data and privacy settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub train_days: usize,
    pub test_days: usize,
    pub lag: usize,
    pub cell: CellKind,
    pub bidirectional: bool,
    pub hidden: usize,
    pub activation: Activation,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub rmse_form: RmseForm,
}

impl Default for PipelineConfig {
    /// The tuned bidirectional GRU.
    fn default() -> Self {
        Self {
            train_days: 65,
            test_days: 7,
            lag: 6,
            cell: CellKind::Gru,
            bidirectional: true,
            hidden: 175,
            activation: Activation::Relu,
            batch_size: 5,
            learning_rate: 0.000289,
            epochs: 100,
            rmse_form: RmseForm::Conventional,
        }
    }
}

impl PipelineConfig {
    pub fn model_spec(&self, regions: usize) -> ModelSpec {
        ModelSpec {
            cell: self.cell,
            bidirectional: self.bidirectional,
            hidden: self.hidden,
            input: regions + CYCLICAL_FEATURES,
            output: regions,
            activation: self.activation,
        }
    }

    /// Snapshots in the training part.
    pub fn train_snapshots(&self) -> usize {
        self.train_days * SLOTS_PER_DAY
    }

    fn non_private(&self) -> TrainConfig {
        TrainConfig::NonPrivate(NonPrivateConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
        })
    }
}

/// DP-SGD settings on top of [`PipelineConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientPerturbation {
    pub l2_norm_clip: f64,
    pub noise_multiplier: f64,
    pub num_microbatches: usize,
    pub delta: f64,
}

/// Privacy bookkeeping of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySummary {
    pub mechanism: String,
    /// Guarantee per training sample.
    pub epsilon: f64,
    pub delta: f64,
    /// Training snapshots a single user may appear in.
    pub n_l: usize,
    /// `n_l · ε`, the worst case under sequential composition.
    pub epsilon_total: f64,
    pub delta_total: f64,
    pub sampling_rate: Option<f64>,
    pub noise_multiplier: Option<f64>,
    pub steps: Option<u64>,
    pub rdp_order: Option<u32>,
    pub sigma: Option<f64>,
    pub sensitivity: Option<f64>,
    /// Snapshots the mechanism released (input perturbation only).
    pub releases: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: Option<MetricsReport>,
    pub steps: u64,
    pub final_train_mae: Option<f64>,
    pub error: Option<String>,
}

/// Result of one pipeline over all seeds. Metrics, predictions and
/// parameters are those of the seed with the lowest mean RMSE.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub kind: RunKind,
    pub config: PipelineConfig,
    pub seeds: Vec<u64>,
    pub outcomes: Vec<SeedOutcome>,
    pub best_seed: Option<u64>,
    pub metrics: MetricsReport,
    pub spec: Option<ModelSpec>,
    pub params: Option<ModelParams>,
    pub scaler: Option<Scaler>,
    pub train_log: Option<TrainLog>,
    pub privacy: Option<PrivacySummary>,
    pub target_times: Vec<NaiveDateTime>,
    pub y_true: Vec<f64>,
    pub y_pred: Vec<f64>,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    kind: RunKind,
    version: &'static str,
    config: &'a PipelineConfig,
    seeds: &'a [u64],
    best_seed: Option<u64>,
    metrics: &'a MetricsReport,
    spec: Option<&'a ModelSpec>,
    privacy: Option<&'a PrivacySummary>,
    steps: Option<u64>,
    outcomes: &'a [SeedOutcome],
}

impl RunArtifact {
    /// Rows `run_kind,region,rmse,mae`, ending with a `Mean` row.
    pub fn write_report_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_report_rows(&mut csv::Writer::from_writer(writer), self.kind, &self.metrics, true)
    }

    /// Rows `datetime,region,y_true,y_pred`.
    pub fn write_predictions_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["datetime", "region", "y_true", "y_pred"])?;
        let r = self.metrics.regions.len();
        for (i, ts) in self.target_times.iter().enumerate() {
            let stamp = ts.format(TIMESTAMP_FORMAT).to_string();
            for (j, region) in self.metrics.regions.iter().enumerate() {
                w.write_record([
                    stamp.as_str(),
                    region.as_str(),
                    &self.y_true[i * r + j].to_string(),
                    &self.y_pred[i * r + j].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        let s = RunSummary {
            kind: self.kind,
            version: env!("CARGO_PKG_VERSION"),
            config: &self.config,
            seeds: &self.seeds,
            best_seed: self.best_seed,
            metrics: &self.metrics,
            spec: self.spec.as_ref(),
            privacy: self.privacy.as_ref(),
            steps: self.train_log.as_ref().map(|l| l.steps),
            outcomes: &self.outcomes,
        };
        Ok(serde_json::to_string_pretty(&s)?)
    }
}

/// Appends report rows for `kind`; writes the header when `header` is set.
pub fn write_report_rows<W: Write>(
    w: &mut csv::Writer<W>,
    kind: RunKind,
    m: &MetricsReport,
    header: bool,
) -> Result<()> {
    if header {
        w.write_record(["run_kind", "region", "rmse", "mae"])?;
    }
    for (i, region) in m.regions.iter().enumerate() {
        w.write_record([kind.as_str(), region, &m.rmse[i].to_string(), &m.mae[i].to_string()])?;
    }
    w.write_record([kind.as_str(), "Mean", &m.mean_rmse.to_string(), &m.mean_mae.to_string()])?;
    w.flush()?;
    Ok(())
}

/// Count source that logs every row index read, in order.
pub struct TrackedSeries<'a> {
    inner: &'a MobilitySeries,
    reads: RefCell<Vec<usize>>,
}

impl<'a> TrackedSeries<'a> {
    pub fn new(inner: &'a MobilitySeries) -> Self {
        Self {
            inner,
            reads: RefCell::new(Vec::new()),
        }
    }

    pub fn reads(&self) -> Vec<usize> {
        self.reads.borrow().clone()
    }
}

impl CountSource for TrackedSeries<'_> {
    fn timestamps(&self) -> &[NaiveDateTime] {
        self.inner.timestamps()
    }

    fn regions(&self) -> &[String] {
        self.inner.regions()
    }

    fn row(&self, t: usize) -> &[f64] {
        self.reads.borrow_mut().push(t);
        self.inner.row(t)
    }
}

fn require_clean(s: &MobilitySeries) -> Result<()> {
    if s.has_missing() || !s.is_regular() {
        return Err(invalid("series has gaps or missing values; run IQR cleaning first"));
    }
    Ok(())
}

/// Persistence model on the test part of the split.
pub fn run_baseline(series: &MobilitySeries, cfg: &PipelineConfig) -> Result<RunArtifact> {
    require_clean(series)?;
    let (train, test) = split(series, cfg.train_days, cfg.test_days)?;
    let y_pred = persistence_forecast(&test, train.row(train.len() - 1))?;
    let y_true = test.counts().to_vec();
    let metrics = MetricsReport::compute(&y_true, &y_pred, test.regions(), cfg.rmse_form)?;
    Ok(RunArtifact {
        kind: RunKind::Baseline,
        config: cfg.clone(),
        seeds: Vec::new(),
        outcomes: Vec::new(),
        best_seed: None,
        metrics,
        spec: None,
        params: None,
        scaler: None,
        train_log: None,
        privacy: None,
        target_times: test.timestamps().to_vec(),
        y_true,
        y_pred,
    })
}

/// Scaled train and test windows of one series, ready for training.
pub struct Prepared {
    pub train: WindowedDataset,
    pub test: WindowedDataset,
    pub scaler: Scaler,
    pub regions: Vec<String>,
    /// Unscaled test targets, row-major.
    pub test_targets: Vec<f64>,
}

/// Split, window (test windows take their context from the end of the
/// training part) and scale with a scaler fitted on the training windows.
pub fn prepare(series: &MobilitySeries, cfg: &PipelineConfig) -> Result<Prepared> {
    let (train, test) = split(series, cfg.train_days, cfg.test_days)?;
    let train_w = make_windows(&train, cfg.lag, None)?;
    let test_w = make_windows(&test, cfg.lag, Some(&train))?;
    let scaler = Scaler::fit(&train_w)?;
    let test_targets = test_w.targets_tensor().into_values();
    Ok(Prepared {
        train: scaler.apply(&train_w)?,
        test: scaler.apply(&test_w)?,
        scaler,
        regions: series.regions().to_vec(),
        test_targets,
    })
}

/// One-step-ahead predictions for every window of `scaled`, in counts.
pub fn forecast_windows(
    spec: &ModelSpec,
    params: &ModelParams,
    scaler: &Scaler,
    scaled: &WindowedDataset,
) -> Result<Vec<f64>> {
    params.check(spec)?;
    let mut out = Vec::with_capacity(scaled.len() * spec.output);
    for i in 0..scaled.len() {
        let tape = forward_with_fingerprint(spec, params, scaled.input(i), 0)?;
        out.extend(scaler.invert_regions(tape.prediction()));
    }
    Ok(out)
}

struct SeedRun {
    params: ModelParams,
    log: TrainLog,
    y_pred: Vec<f64>,
    metrics: MetricsReport,
}

fn run_seed(
    spec: &ModelSpec,
    prep: &Prepared,
    truth: &[f64],
    tcfg: &TrainConfig,
    form: RmseForm,
    seed: u64,
) -> Result<SeedRun> {
    let rng = RngStream::new(seed, 0);
    let params0 = init_params(spec, &mut rng.child(0))?;
    let (params, log) = train(spec, &params0, &prep.train, tcfg, &rng)?;
    let y_pred = forecast_windows(spec, &params, &prep.scaler, &prep.test)?;
    if y_pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("test predictions".into()));
    }
    let metrics = MetricsReport::compute(truth, &y_pred, &prep.regions, form)?;
    Ok(SeedRun {
        params,
        log,
        y_pred,
        metrics,
    })
}

/// Trains one model per seed (in parallel on the current rayon pool) and
/// keeps the seed with the lowest mean RMSE against `truth`.
fn run_seeds(
    kind: RunKind,
    cfg: &PipelineConfig,
    prep: Prepared,
    truth: Vec<f64>,
    tcfg: TrainConfig,
    seeds: &[u64],
) -> Result<RunArtifact> {
    if seeds.is_empty() {
        return Err(invalid("at least one seed is required"));
    }
    let spec = cfg.model_spec(prep.regions.len());
    let runs: Vec<Result<SeedRun>> = seeds
        .par_iter()
        .map(|&s| run_seed(&spec, &prep, &truth, &tcfg, cfg.rmse_form, s))
        .collect();
    let mut outcomes = Vec::with_capacity(seeds.len());
    let mut best: Option<(u64, SeedRun)> = None;
    let mut errors = Vec::new();
    for (&seed, run) in seeds.iter().zip(runs) {
        match run {
            Ok(r) => {
                outcomes.push(SeedOutcome {
                    seed,
                    metrics: Some(r.metrics.clone()),
                    steps: r.log.steps,
                    final_train_mae: r.log.epochs.last().map(|e| e.train_mae),
                    error: None,
                });
                if best
                    .as_ref()
                    .is_none_or(|(_, b)| r.metrics.mean_rmse < b.metrics.mean_rmse)
                {
                    best = Some((seed, r));
                }
            }
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                errors.push(format!("seed {seed}: {e}"));
                outcomes.push(SeedOutcome {
                    seed,
                    metrics: None,
                    steps: 0,
                    final_train_mae: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let (best_seed, b) = best.ok_or_else(|| Error::RunFailed(errors.join("; ")))?;
    Ok(RunArtifact {
        kind,
        config: cfg.clone(),
        seeds: seeds.to_vec(),
        outcomes,
        best_seed: Some(best_seed),
        metrics: b.metrics,
        spec: Some(spec),
        params: Some(b.params),
        scaler: Some(prep.scaler),
        train_log: Some(b.log),
        privacy: None,
        target_times: prep.test.target_times().to_vec(),
        y_true: truth,
        y_pred: b.y_pred,
    })
}

/// Plain Adam on the cleaned series, best of `seeds`.
pub fn run_nonprivate(series: &MobilitySeries, cfg: &PipelineConfig, seeds: &[u64]) -> Result<RunArtifact> {
    require_clean(series)?;
    let prep = prepare(series, cfg)?;
    let truth = prep.test_targets.clone();
    run_seeds(RunKind::Nonprivate, cfg, prep, truth, cfg.non_private(), seeds)
}

/// DP-SGD training on the cleaned series; attaches the accountant's ε for
/// the exact number of steps taken.
pub fn run_gradient_perturbation(
    series: &MobilitySeries,
    cfg: &PipelineConfig,
    gp: &GradientPerturbation,
    seeds: &[u64],
) -> Result<RunArtifact> {
    if !(gp.noise_multiplier > 0.0) {
        return Err(Error::BudgetRefused(
            "noise multiplier 0 has no finite epsilon; use a non-private run instead".into(),
        ));
    }
    if !(gp.delta > 0.0 && gp.delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {}", gp.delta)));
    }
    let n_l = cfg.train_snapshots();
    if !delta_budget_check(gp.delta, n_l as u64) {
        return Err(Error::BudgetRefused(format!(
            "delta {} fails n·delta < 1/n for n = {n_l}; delta must be below {:e}",
            gp.delta,
            1.0 / (n_l as f64 * n_l as f64)
        )));
    }
    require_clean(series)?;
    let prep = prepare(series, cfg)?;
    let truth = prep.test_targets.clone();
    let tcfg = TrainConfig::DpSgd(DpSgdConfig {
        l2_norm_clip: gp.l2_norm_clip,
        noise_multiplier: gp.noise_multiplier,
        num_microbatches: gp.num_microbatches,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
    });
    tcfg.validate()?;
    let mut art = run_seeds(RunKind::GradientPerturbation, cfg, prep, truth, tcfg, seeds)?;
    let log = art.train_log.as_ref().expect("trained runs keep their log");
    let q = log.sampling_rate();
    let (epsilon, order) = compute_epsilon(q, gp.noise_multiplier, log.steps, gp.delta, &DEFAULT_ORDERS)?;
    art.privacy = Some(PrivacySummary {
        mechanism: "dp-sgd".into(),
        epsilon,
        delta: gp.delta,
        n_l,
        epsilon_total: n_l as f64 * epsilon,
        delta_total: n_l as f64 * gp.delta,
        sampling_rate: Some(q),
        noise_multiplier: Some(gp.noise_multiplier),
        steps: Some(log.steps),
        rdp_order: Some(order),
        sigma: None,
        sensitivity: None,
        releases: None,
    });
    Ok(art)
}

/// Sanitizes the whole raw series once, then trains and forecasts on the
/// sanitized copy only. Test predictions are scored against the raw test
/// targets, which are the only raw rows read after sanitization.
pub fn run_input_perturbation<S: CountSource>(
    raw: &S,
    cfg: &PipelineConfig,
    privacy: &PrivacyParams,
    seeds: &[u64],
) -> Result<RunArtifact> {
    let first = *seeds.first().ok_or_else(|| invalid("at least one seed is required"))?;
    let mut noise = RngStream::new(first, SANITIZE_STREAM);
    let noisy = sanitize_series(raw, privacy, &mut noise, false)?;
    if !noisy.is_regular() {
        return Err(invalid("series has gaps; run IQR cleaning first"));
    }
    let record = noisy.privacy().expect("sanitized series carries its record").clone();
    let prep = prepare(&noisy, cfg)?;
    let n_test = cfg.test_days * SLOTS_PER_DAY;
    let mut truth = Vec::with_capacity(n_test * raw.regions().len());
    for t in raw.len() - n_test..raw.len() {
        truth.extend_from_slice(raw.row(t));
    }
    let mut art = run_seeds(RunKind::InputPerturbation, cfg, prep, truth, cfg.non_private(), seeds)?;
    let n_l = cfg.train_snapshots();
    art.privacy = Some(PrivacySummary {
        mechanism: record.mechanism().to_string(),
        epsilon: record.epsilon(),
        delta: record.delta(),
        n_l,
        epsilon_total: n_l as f64 * record.epsilon(),
        delta_total: n_l as f64 * record.delta(),
        sampling_rate: None,
        noise_multiplier: None,
        steps: None,
        rdp_order: None,
        sigma: Some(record.sigma()),
        sensitivity: Some(record.sensitivity()),
        releases: Some(record.releases()),
    });
    Ok(art)
}
