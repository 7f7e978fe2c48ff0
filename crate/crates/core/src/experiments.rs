//! Multi-trial harness: independent trials, r-sweeps, hyperparameter
//! sweeps, confidence intervals and the CSV files they produce.

use std::fmt;
use std::fs::File;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::baselines::{run_fermi, run_qlearning, BaselineConfig, FermiParams, QParams};
use crate::curriculum::{run_act, run_plain_ppo, ActConfig, LogRow, PhaseConfig, RunRecord, TrainerConfig};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Normal quantile used for 95% intervals.
pub const Z_95: f64 = 1.96;
pub const DEFAULT_WINDOW: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    PpoAct,
    Ppo,
    QLearning,
    Fermi,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::PpoAct,
        Algorithm::Ppo,
        Algorithm::QLearning,
        Algorithm::Fermi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::PpoAct => "ppo-act",
            Algorithm::Ppo => "ppo",
            Algorithm::QLearning => "qlearning",
            Algorithm::Fermi => "fermi",
        }
    }

    pub fn is_learned_policy(self) -> bool {
        matches!(self, Algorithm::PpoAct | Algorithm::Ppo)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid("algo", format!("unknown algorithm '{s}'")))
    }
}

/// Everything a trial needs apart from its algorithm, r and seed.
///
/// For the learned policies `r` replaces `phase2.r`. The baselines run for
/// `phase1.epochs + phase2.epochs` iterations from `phase2.init`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub side: usize,
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub trainer: TrainerConfig,
    pub qlearning: QParams,
    pub fermi: FermiParams,
    pub snapshots: Vec<u64>,
    /// Trailing iterations averaged into the final fraction.
    pub window: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            side: 200,
            phase1: PhaseConfig::phase1_default(),
            phase2: PhaseConfig::phase2_default(),
            trainer: TrainerConfig::default(),
            qlearning: QParams::default(),
            fermi: FermiParams::default(),
            snapshots: vec![0, 10, 100, 1000, 10000],
            window: DEFAULT_WINDOW,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::invalid("window", "must be positive"));
        }
        self.act_config(self.phase2.r, 0).validate()?;
        self.qlearning.validate()?;
        self.fermi.validate()
    }

    pub fn total_iterations(&self) -> u64 {
        self.phase1.epochs + self.phase2.epochs
    }

    pub fn act_config(&self, r: f64, seed: u64) -> ActConfig {
        ActConfig {
            side: self.side,
            phase1: self.phase1,
            phase2: PhaseConfig { r, ..self.phase2 },
            trainer: self.trainer,
            seed,
            snapshots: self.snapshots.clone(),
        }
    }

    pub fn baseline_config(&self, r: f64, seed: u64) -> BaselineConfig {
        BaselineConfig {
            side: self.side,
            r,
            iterations: self.total_iterations(),
            init: self.phase2.init,
            seed,
            snapshots: self.snapshots.clone(),
        }
    }
}

pub fn run_trial(algorithm: Algorithm, cfg: &ExperimentConfig, r: f64, seed: u64) -> Result<RunRecord> {
    match algorithm {
        Algorithm::PpoAct => run_act(&cfg.act_config(r, seed)),
        Algorithm::Ppo => run_plain_ppo(&cfg.act_config(r, seed)),
        Algorithm::QLearning => run_qlearning(&cfg.baseline_config(r, seed), &cfg.qlearning),
        Algorithm::Fermi => run_fermi(&cfg.baseline_config(r, seed), &cfg.fermi),
    }
}

/// Seed of trial `k`.
pub fn trial_seed(base_seed: u64, k: usize) -> u64 {
    base_seed ^ k as u64
}

/// Mean of the last `window` entries (all of them if the series is shorter).
pub fn final_fraction(series: &[f64], window: usize) -> f64 {
    let tail = &series[series.len().saturating_sub(window)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialKey {
    pub algorithm: Algorithm,
    pub r: f64,
    pub trial: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialSummary {
    pub key: TrialKey,
    pub final_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialFailure {
    pub key: TrialKey,
    pub message: String,
}

/// Outcome of a set of trials, in trial order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialBatch {
    pub summaries: Vec<TrialSummary>,
    pub failures: Vec<TrialFailure>,
}

impl TrialBatch {
    pub fn finals(&self) -> Vec<f64> {
        self.summaries.iter().map(|s| s.final_fraction).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs the trials of one (algorithm, r) cell on `jobs` worker threads.
///
/// `run` produces a record from a trial key; `sink` receives each record
/// (e.g. to persist it) before it is dropped. A failure in either is
/// recorded against its trial and the remaining trials still run.
pub fn execute_trials<F, S>(
    algorithm: Algorithm,
    r: f64,
    trials: usize,
    base_seed: u64,
    jobs: usize,
    window: usize,
    run: F,
    sink: S,
) -> Result<TrialBatch>
where
    F: Fn(&TrialKey) -> Result<RunRecord> + Sync,
    S: Fn(&TrialKey, &RunRecord) -> Result<()> + Sync,
{
    if trials == 0 {
        return Err(Error::invalid("trials", "need at least one trial"));
    }
    let pool = thread_pool(jobs)?;
    let results: Vec<(TrialKey, Result<f64>)> = pool.install(|| {
        (0..trials)
            .into_par_iter()
            .map(|trial| {
                let key = TrialKey {
                    algorithm,
                    r,
                    trial,
                    seed: trial_seed(base_seed, trial),
                };
                let out = run(&key).and_then(|rec| {
                    sink(&key, &rec)?;
                    Ok(final_fraction(&rec.series, window))
                });
                (key, out)
            })
            .collect()
    });
    let mut batch = TrialBatch::default();
    for (key, out) in results {
        match out {
            Ok(final_fraction) => batch.summaries.push(TrialSummary { key, final_fraction }),
            Err(e) => batch.failures.push(TrialFailure {
                key,
                message: e.to_string(),
            }),
        }
    }
    Ok(batch)
}

pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(Error::invalid("jobs", "need at least one worker"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid("jobs", e.to_string()))
}

pub fn run_trials<S>(
    algorithm: Algorithm,
    cfg: &ExperimentConfig,
    r: f64,
    trials: usize,
    base_seed: u64,
    jobs: usize,
    sink: S,
) -> Result<TrialBatch>
where
    S: Fn(&TrialKey, &RunRecord) -> Result<()> + Sync,
{
    cfg.validate()?;
    execute_trials(
        algorithm,
        r,
        trials,
        base_seed,
        jobs,
        cfg.window,
        |k| run_trial(algorithm, cfg, r, k.seed),
        sink,
    )
}

/// Arithmetic mean and sample standard deviation (`n - 1` denominator; 0 for
/// a single sample).
pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn all_identical(samples: &[f64]) -> bool {
    samples.windows(2).all(|w| w[0] == w[1])
}

/// 95% normal-approximation interval `mean +- 1.96 s / sqrt(n)`, clamped to
/// [0, 1]. Undefined for fewer than two samples or when they are identical.
pub fn confidence_interval(samples: &[f64]) -> Option<(f64, f64)> {
    if samples.len() < 2 || all_identical(samples) {
        return None;
    }
    let (mean, std) = mean_std(samples);
    let half = Z_95 * std / (samples.len() as f64).sqrt();
    Some(((mean - half).max(0.0), (mean + half).min(1.0)))
}

/// Percentile bootstrap of the mean, for checking the normal interval.
pub fn bootstrap_interval(samples: &[f64], resamples: usize, seed: u64) -> Option<(f64, f64)> {
    if samples.len() < 2 || all_identical(samples) || resamples == 0 {
        return None;
    }
    let mut rng = stream_rng(seed, Stream::Bootstrap, 0);
    let n = samples.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| samples[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Some((at(0.025), at(0.975)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub algorithm: Algorithm,
    pub r: f64,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub ci: Option<(f64, f64)>,
}

impl SweepRow {
    pub fn from_finals(algorithm: Algorithm, r: f64, finals: &[f64]) -> Self {
        let (mean, std) = mean_std(finals);
        SweepRow {
            algorithm,
            r,
            n: finals.len(),
            mean,
            std,
            ci: confidence_interval(finals),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// A sweep's table plus every trial behind it, in grid order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub table: SweepTable,
    pub batches: Vec<TrialBatch>,
}

impl SweepResult {
    pub fn summaries(&self) -> impl Iterator<Item = &TrialSummary> {
        self.batches.iter().flat_map(|b| &b.summaries)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TrialFailure> {
        self.batches.iter().flat_map(|b| &b.failures)
    }
}

/// `start, start + step, ...` up to `stop` inclusive, rounded to 10 decimals
/// so that grid points print cleanly.
pub fn r_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
        return Err(Error::invalid("r-grid", "need start <= stop and step > 0"));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|i| ((start + i as f64 * step) * 1e10).round() / 1e10)
        .collect())
}

/// Base seed of grid point `j`; keeps trial seeds distinct across the grid.
pub fn grid_seed(base_seed: u64, j: usize) -> u64 {
    base_seed ^ ((j as u64) << 32)
}

pub fn sweep_r<S>(
    algorithm: Algorithm,
    cfg: &ExperimentConfig,
    grid: &[f64],
    trials: usize,
    base_seed: u64,
    jobs: usize,
    sink: S,
) -> Result<SweepResult>
where
    S: Fn(&TrialKey, &RunRecord) -> Result<()> + Sync,
{
    if grid.is_empty() {
        return Err(Error::invalid("r-grid", "empty grid"));
    }
    let mut out = SweepResult::default();
    for (j, &r) in grid.iter().enumerate() {
        let batch = run_trials(algorithm, cfg, r, trials, grid_seed(base_seed, j), jobs, &sink)?;
        out.table.rows.push(SweepRow::from_finals(algorithm, r, &batch.finals()));
        out.batches.push(batch);
    }
    Ok(out)
}

/// Phase 2 hyperparameters that can be swept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HyperParam {
    Alpha,
    Gamma,
    Delta,
    Rho,
}

impl HyperParam {
    pub fn name(self) -> &'static str {
        match self {
            HyperParam::Alpha => "alpha",
            HyperParam::Gamma => "gamma",
            HyperParam::Delta => "delta",
            HyperParam::Rho => "rho",
        }
    }

    pub fn apply(self, phase: &mut PhaseConfig, value: f64) {
        match self {
            HyperParam::Alpha => phase.lr = value,
            HyperParam::Gamma => phase.gamma = value,
            HyperParam::Delta => phase.value_coef = value,
            HyperParam::Rho => phase.entropy_coef = value,
        }
    }
}

impl FromStr for HyperParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            HyperParam::Alpha,
            HyperParam::Gamma,
            HyperParam::Delta,
            HyperParam::Rho,
        ]
        .into_iter()
        .find(|h| h.name() == s)
        .ok_or_else(|| Error::invalid("name", format!("cannot sweep '{s}'; use alpha, gamma, delta or rho")))
    }
}

/// One r-sweep per value of `param`; only phase 2 is changed. The sink also
/// receives the value being tried.
#[allow(clippy::too_many_arguments)]
pub fn sweep_hyperparameter<S>(
    param: HyperParam,
    values: &[f64],
    algorithm: Algorithm,
    cfg: &ExperimentConfig,
    grid: &[f64],
    trials: usize,
    base_seed: u64,
    jobs: usize,
    sink: S,
) -> Result<Vec<(f64, SweepResult)>>
where
    S: Fn(f64, &TrialKey, &RunRecord) -> Result<()> + Sync,
{
    if !algorithm.is_learned_policy() {
        return Err(Error::invalid("algo", format!("{algorithm} has no phase 2 hyperparameters")));
    }
    if values.is_empty() {
        return Err(Error::invalid("values", "empty value list"));
    }
    values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            param.apply(&mut c.phase2, v);
            c.validate()?;
            let res = sweep_r(algorithm, &c, grid, trials, base_seed, jobs, |k, rec| sink(v, k, rec))?;
            Ok((v, res))
        })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, io::Error::from(e))
}

fn write_rows<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Formats a float for CSV; undefined values print as `nan`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x}")
    }
}

pub fn write_timeseries(path: &Path, series: &[f64]) -> Result<()> {
    write_rows(
        path,
        &["t", "frac_coop", "frac_defect"],
        series
            .iter()
            .enumerate()
            .map(|(t, &c)| vec![t.to_string(), fmt_f64(c), fmt_f64(1.0 - c)]),
    )
}

pub fn write_sweep(path: &Path, table: &SweepTable) -> Result<()> {
    write_rows(
        path,
        &["algorithm", "r", "n", "mean", "std", "ci_lo", "ci_hi"],
        table.rows.iter().map(|row| {
            let (lo, hi) = row.ci.unwrap_or((f64::NAN, f64::NAN));
            vec![
                row.algorithm.to_string(),
                fmt_f64(row.r),
                row.n.to_string(),
                fmt_f64(row.mean),
                fmt_f64(row.std),
                fmt_f64(lo),
                fmt_f64(hi),
            ]
        }),
    )
}

pub fn write_raw<'a, I>(path: &Path, summaries: I) -> Result<()>
where
    I: IntoIterator<Item = &'a TrialSummary>,
{
    write_rows(
        path,
        &["algorithm", "r", "trial", "seed", "final_fraction"],
        summaries.into_iter().map(|s| {
            vec![
                s.key.algorithm.to_string(),
                fmt_f64(s.key.r),
                s.key.trial.to_string(),
                s.key.seed.to_string(),
                fmt_f64(s.final_fraction),
            ]
        }),
    )
}

pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    write_rows(
        path,
        &[
            "iteration",
            "lr",
            "mean_ratio",
            "clip_fraction",
            "policy_loss",
            "value_loss",
            "entropy",
        ],
        log.iter().map(|l| {
            vec![
                l.iteration.to_string(),
                fmt_f64(l.lr),
                fmt_f64(l.mean_ratio),
                fmt_f64(l.clip_fraction),
                fmt_f64(l.policy_loss),
                fmt_f64(l.value_loss),
                fmt_f64(l.entropy),
            ]
        }),
    )
}
