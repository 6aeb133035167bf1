//! Hyperparameter search over hidden size, batch size, learning rate and
//! (for DP-SGD campaigns) the clipping norm.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MobilitySeries;
use crate::error::{invalid, Error, Result};
use crate::forecast::{
    run_gradient_perturbation, run_input_perturbation, run_nonprivate, GradientPerturbation,
    MetricsReport, PipelineConfig,
};
use crate::numeric::RngStream;
use crate::privacy::PrivacyParams;

/// Inclusive integer range sampled on a fixed step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRange {
    pub min: usize,
    pub max: usize,
    pub step: usize,
}

impl StepRange {
    fn points(&self) -> usize {
        (self.max - self.min) / self.step + 1
    }

    fn sample(&self, rng: &mut RngStream) -> usize {
        self.min + self.step * rng.below(self.points())
    }

    fn contains(&self, v: usize) -> bool {
        v >= self.min && v <= self.max && (v - self.min) % self.step == 0
    }

    /// Moves `v` by `k` steps, staying on the grid.
    fn nudge(&self, v: usize, k: i64) -> usize {
        let i = ((v - self.min) / self.step) as i64 + k;
        self.min + self.step * i.clamp(0, self.points() as i64 - 1) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub hidden: StepRange,
    pub batch: StepRange,
    /// Sampled log-uniformly.
    pub lr_min: f64,
    pub lr_max: f64,
    /// Candidate clipping norms; empty for non-private campaigns.
    pub clip: Vec<f64>,
    /// Fixed for a whole DP-SGD campaign.
    pub noise_multiplier: Option<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            hidden: StepRange {
                min: 25,
                max: 500,
                step: 25,
            },
            batch: StepRange {
                min: 5,
                max: 40,
                step: 5,
            },
            lr_min: 1e-5,
            lr_max: 3e-3,
            clip: Vec::new(),
            noise_multiplier: None,
        }
    }
}

impl SearchSpace {
    /// Default ranges plus clip norms {1, 1.5, 2, 2.5} at a fixed noise multiplier.
    pub fn dp(noise_multiplier: f64) -> Self {
        Self {
            clip: vec![1.0, 1.5, 2.0, 2.5],
            noise_multiplier: Some(noise_multiplier),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("hidden", self.hidden), ("batch", self.batch)] {
            if r.step == 0 || r.min == 0 || r.min > r.max {
                return Err(invalid(format!("bad {name} range {r:?}")));
            }
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(invalid(format!("bad learning-rate range [{}, {}]", self.lr_min, self.lr_max)));
        }
        if self.noise_multiplier.is_some() && self.clip.is_empty() {
            return Err(invalid("a DP campaign needs at least one clip norm"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut RngStream) -> TrialConfig {
        let (lo, hi) = (self.lr_min.ln(), self.lr_max.ln());
        TrialConfig {
            hidden: self.hidden.sample(rng),
            batch_size: self.batch.sample(rng),
            learning_rate: (lo + (hi - lo) * rng.uniform()).exp(),
            l2_norm_clip: (!self.clip.is_empty()).then(|| self.clip[rng.below(self.clip.len())]),
            noise_multiplier: self.noise_multiplier,
        }
    }

    pub fn contains(&self, c: &TrialConfig) -> bool {
        self.hidden.contains(c.hidden)
            && self.batch.contains(c.batch_size)
            && c.learning_rate >= self.lr_min
            && c.learning_rate <= self.lr_max
            && match c.l2_norm_clip {
                Some(v) => self.clip.contains(&v),
                None => self.clip.is_empty(),
            }
    }

    /// Random neighbour of `c` on the grid.
    fn perturb(&self, c: &TrialConfig, rng: &mut RngStream) -> TrialConfig {
        let k = |rng: &mut RngStream, span: usize| rng.below(2 * span + 1) as i64 - span as i64;
        let lr = (c.learning_rate.ln() + 0.3 * rng.standard_normal())
            .exp()
            .clamp(self.lr_min, self.lr_max);
        TrialConfig {
            hidden: self.hidden.nudge(c.hidden, k(rng, 2)),
            batch_size: self.batch.nudge(c.batch_size, k(rng, 1)),
            learning_rate: lr,
            l2_norm_clip: c.l2_norm_clip.map(|v| {
                if rng.uniform() < 0.25 {
                    self.clip[rng.below(self.clip.len())]
                } else {
                    v
                }
            }),
            noise_multiplier: c.noise_multiplier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_norm_clip: Option<f64>,
    pub noise_multiplier: Option<f64>,
}

impl TrialConfig {
    pub fn apply_to(&self, base: &PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            hidden: self.hidden,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            ..base.clone()
        }
    }
}

/// What a pipeline reports back for one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialEval {
    pub metrics: MetricsReport,
    /// Present for DP-SGD trials; enters the objective as a penalty.
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    pub config: TrialConfig,
    pub seed: u64,
    pub objective: Option<f64>,
    pub metrics: Option<MetricsReport>,
    pub epsilon: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub trials: Vec<Trial>,
    pub best: usize,
}

impl TuneResult {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }

    /// Columns `trial_id,h1,batch,learning_rate,clip,noise_multiplier,
    /// epsilon,objective,mean_rmse,mean_mae`; failed trials leave the
    /// result columns empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "trial_id",
            "h1",
            "batch",
            "learning_rate",
            "clip",
            "noise_multiplier",
            "epsilon",
            "objective",
            "mean_rmse",
            "mean_mae",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in &self.trials {
            w.write_record([
                t.id.to_string(),
                t.config.hidden.to_string(),
                t.config.batch_size.to_string(),
                t.config.learning_rate.to_string(),
                opt(t.config.l2_norm_clip),
                opt(t.config.noise_multiplier),
                opt(t.epsilon),
                opt(t.objective),
                opt(t.metrics.as_ref().map(|m| m.mean_rmse)),
                opt(t.metrics.as_ref().map(|m| m.mean_mae)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean plus sample standard deviation of the per-region RMSE.
pub fn objective_nonprivate(m: &MetricsReport) -> Result<f64> {
    if m.rmse.len() < 2 {
        return Err(invalid("objective needs at least two regions for a standard deviation"));
    }
    Ok(m.mean_rmse + m.std_rmse)
}

/// Non-private objective scaled by `e^ε`.
pub fn objective_private(m: &MetricsReport, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(objective_nonprivate(m)? * epsilon.exp())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    Random,
    /// Random warm-up, then neighbours of the best quarter of trials.
    TpeLite,
}

const WARMUP: usize = 20;
const PHASE: usize = 10;

/// Runs `budget` trials and returns all of them plus the argmin.
///
/// Trial `i` trains with seed `seed + i`. Random search evaluates all trials
/// in parallel; tpe-lite evaluates in phases of ten, each sampled from the
/// results of the previous phases.
pub fn run_search<F>(space: &SearchSpace, budget: usize, strategy: Strategy, seed: u64, evaluate: F) -> Result<TuneResult>
where
    F: Fn(&TrialConfig, u64) -> Result<TrialEval> + Sync,
{
    if budget == 0 {
        return Err(invalid("search budget must be at least 1"));
    }
    space.validate()?;
    let mut rng = RngStream::new(seed, 0x7e5);
    let mut trials: Vec<Trial> = Vec::with_capacity(budget);
    let run_batch = |configs: Vec<TrialConfig>, first_id: usize| -> Vec<Trial> {
        configs
            .into_par_iter()
            .enumerate()
            .map(|(j, config)| run_trial(first_id + j, config, seed, &evaluate))
            .collect()
    };
    match strategy {
        Strategy::Random => {
            let configs = (0..budget).map(|_| space.sample(&mut rng)).collect();
            trials = run_batch(configs, 0);
        }
        Strategy::TpeLite => {
            let warm = budget.min(WARMUP);
            let configs = (0..warm).map(|_| space.sample(&mut rng)).collect();
            trials.extend(run_batch(configs, 0));
            while trials.len() < budget {
                let n = PHASE.min(budget - trials.len());
                let mut ok: Vec<&Trial> = trials.iter().filter(|t| t.objective.is_some()).collect();
                ok.sort_by(|a, b| a.objective.unwrap().total_cmp(&b.objective.unwrap()));
                let top = ok.len().div_ceil(4);
                let configs = (0..n)
                    .map(|_| {
                        if top == 0 {
                            space.sample(&mut rng)
                        } else {
                            space.perturb(&ok[rng.below(top)].config, &mut rng)
                        }
                    })
                    .collect();
                let id = trials.len();
                trials.extend(run_batch(configs, id));
            }
        }
    }
    let best = trials
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.objective.map(|o| (i, o)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    match best {
        Some(best) => Ok(TuneResult { trials, best }),
        None => Err(Error::SearchFailed(
            trials
                .iter()
                .map(|t| format!("trial {}: {}", t.id, t.error.as_deref().unwrap_or("no result")))
                .collect(),
        )),
    }
}

fn run_trial<F>(id: usize, config: TrialConfig, seed: u64, evaluate: &F) -> Trial
where
    F: Fn(&TrialConfig, u64) -> Result<TrialEval>,
{
    let trial_seed = seed.wrapping_add(id as u64);
    let result = evaluate(&config, trial_seed).and_then(|e| {
        let obj = match e.epsilon {
            Some(eps) => objective_private(&e.metrics, eps)?,
            None => objective_nonprivate(&e.metrics)?,
        };
        Ok((e, obj))
    });
    match result {
        Ok((e, obj)) => Trial {
            id,
            config,
            seed: trial_seed,
            objective: Some(obj),
            metrics: Some(e.metrics),
            epsilon: e.epsilon,
            error: None,
        },
        Err(err) => {
            log::warn!("trial {id} failed: {err}");
            Trial {
                id,
                config,
                seed: trial_seed,
                objective: None,
                metrics: None,
                epsilon: None,
                error: Some(err.to_string()),
            }
        }
    }
}

/// Which pipeline a campaign tunes.
#[derive(Debug, Clone)]
pub enum Campaign {
    Nonprivate,
    /// Clip norm and noise multiplier come from each trial.
    GradientPerturbation { num_microbatches: usize, delta: f64 },
    /// Selected like a non-private model, on the sanitized series.
    InputPerturbation(PrivacyParams),
}

/// Evaluates one trial of `campaign` on `series` with a single seed.
pub fn evaluate_pipeline(
    campaign: &Campaign,
    series: &MobilitySeries,
    base: &PipelineConfig,
    trial: &TrialConfig,
    seed: u64,
) -> Result<TrialEval> {
    let cfg = trial.apply_to(base);
    match campaign {
        Campaign::Nonprivate => Ok(TrialEval {
            metrics: run_nonprivate(series, &cfg, &[seed])?.metrics,
            epsilon: None,
        }),
        Campaign::GradientPerturbation {
            num_microbatches,
            delta,
        } => {
            let gp = GradientPerturbation {
                l2_norm_clip: trial
                    .l2_norm_clip
                    .ok_or_else(|| invalid("DP trial without a clip norm"))?,
                noise_multiplier: trial
                    .noise_multiplier
                    .ok_or_else(|| invalid("DP trial without a noise multiplier"))?,
                num_microbatches: *num_microbatches,
                delta: *delta,
            };
            let art = run_gradient_perturbation(series, &cfg, &gp, &[seed])?;
            Ok(TrialEval {
                epsilon: art.privacy.as_ref().map(|p| p.epsilon),
                metrics: art.metrics,
            })
        }
        Campaign::InputPerturbation(p) => Ok(TrialEval {
            metrics: run_input_perturbation(series, &cfg, p, &[seed])?.metrics,
            epsilon: None,
        }),
    }
}
