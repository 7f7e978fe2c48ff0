//! Runs a resolved configuration and writes the artifact tree:
//!
//! ```text
//! <out>/manifest.txt
//! <out>/<algo>/summary.csv, raw.csv
//! <out>/<algo>/<r>/<trial>/timeseries.csv, log.csv, snapshots/t<time>.pgm,
//!                          checkpoint_phase1.bin, checkpoint_final.bin
//! ```
//!
//! Hyperparameter sweeps nest the same tree under `<out>/<name>_<value>/`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use pgg_act_core::curriculum::{run_phase1_only, run_phase2_only, RunRecord};
use pgg_act_core::experiments::{
    bootstrap_interval, execute_trials, grid_seed, run_trials, write_log, write_raw, write_sweep,
    write_timeseries, ExperimentConfig, SweepResult, SweepRow, TrialKey,
};
use pgg_act_core::nn::PolicyParams;
use pgg_act_core::{verify, Error};
use sha2::{Digest, Sha256};

use crate::config::{Mode, RunConfig};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.txt";

/// Collects the paths of every file written, for the manifest.
struct Artifacts {
    root: PathBuf,
    files: Mutex<Vec<PathBuf>>,
}

impl Artifacts {
    fn record(&self, path: PathBuf) {
        self.files.lock().expect("no panics while holding the lock").push(path);
    }

    fn create_dir(path: &Path) -> Result<(), Error> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))
    }
}

pub fn trial_dir(root: &Path, key: &TrialKey) -> PathBuf {
    root.join(key.algorithm.name())
        .join(format!("{}", key.r))
        .join(key.trial.to_string())
}

fn persist(art: &Artifacts, root: &Path, key: &TrialKey, rec: &RunRecord) -> Result<(), Error> {
    let dir = trial_dir(root, key);
    Artifacts::create_dir(&dir)?;
    let ts = dir.join("timeseries.csv");
    write_timeseries(&ts, &rec.series)?;
    art.record(ts);
    if !rec.log.is_empty() {
        let log = dir.join("log.csv");
        write_log(&log, &rec.log)?;
        art.record(log);
    }
    if !rec.snapshots.is_empty() {
        let snap_dir = dir.join("snapshots");
        Artifacts::create_dir(&snap_dir)?;
        let side = (rec.snapshots[0].1.len() as f64).sqrt().round() as usize;
        for (t, field) in &rec.snapshots {
            let p = snap_dir.join(format!("t{t}.pgm"));
            field.write_pgm(side, &p)?;
            art.record(p);
        }
    }
    let named: Vec<(&str, &PolicyParams)> = match rec.checkpoints.as_slice() {
        [] => vec![],
        [only] => vec![("checkpoint_final.bin", only)],
        [first, .., last] => vec![
            ("checkpoint_phase1.bin", first),
            ("checkpoint_final.bin", last),
        ],
    };
    for (name, params) in named {
        let p = dir.join(name);
        params.save(&p)?;
        art.record(p);
    }
    Ok(())
}

fn progress(key: &TrialKey, rec: &RunRecord, window: usize) {
    let f = pgg_act_core::experiments::final_fraction(&rec.series, window);
    eprintln!(
        "[{} r={} trial {} seed {}] final cooperation {:.4}",
        key.algorithm, key.r, key.trial, key.seed, f
    );
}

/// Trials for every r in the grid, phase2-only aware.
fn sweep(cfg: &RunConfig, exp: &ExperimentConfig, art: &Artifacts, root: &Path) -> Result<SweepResult, CliError> {
    let sink = |k: &TrialKey, rec: &RunRecord| {
        progress(k, rec, exp.window);
        persist(art, root, k, rec)
    };
    let fixed: Option<PolicyParams> = match (&cfg.mode, &cfg.checkpoint) {
        (Mode::Phase2Only, Some(p)) => Some(PolicyParams::load(p)?),
        _ => None,
    };
    let mut out = SweepResult::default();
    for (j, &r) in cfg.grid.iter().enumerate() {
        let base = grid_seed(cfg.seed, j);
        let batch = if cfg.mode == Mode::Phase2Only {
            let run = |k: &TrialKey| -> Result<RunRecord, Error> {
                let act = exp.act_config(r, k.seed);
                match &fixed {
                    Some(params) => run_phase2_only(&act, params),
                    None => {
                        let (params, _) = run_phase1_only(&ExperimentConfig {
                            snapshots: vec![],
                            ..exp.clone()
                        }
                        .act_config(r, k.seed))?;
                        let mut rec = run_phase2_only(&act, &params)?;
                        rec.checkpoints.insert(0, params);
                        Ok(rec)
                    }
                }
            };
            execute_trials(cfg.algorithm, r, cfg.trials, base, cfg.jobs, exp.window, run, sink)?
        } else {
            run_trials(cfg.algorithm, exp, r, cfg.trials, base, cfg.jobs, sink)?
        };
        out.table.rows.push(SweepRow::from_finals(cfg.algorithm, r, &batch.finals()));
        out.batches.push(batch);
    }
    let algo_dir = root.join(cfg.algorithm.name());
    Artifacts::create_dir(&algo_dir)?;
    let summary = algo_dir.join("summary.csv");
    write_sweep(&summary, &out.table)?;
    art.record(summary);
    let raw = algo_dir.join("raw.csv");
    write_raw(&raw, out.summaries())?;
    art.record(raw);
    if cfg.bootstrap > 0 {
        let path = algo_dir.join("bootstrap.csv");
        write_bootstrap(&path, cfg, &out)?;
        art.record(path);
    }
    for row in &out.table.rows {
        let ci = match row.ci {
            Some((lo, hi)) => format!("{lo:.4}..{hi:.4}"),
            None => "nan".to_string(),
        };
        println!(
            "{} r={} n={} mean={:.4} std={:.4} ci={}",
            row.algorithm, row.r, row.n, row.mean, row.std, ci
        );
    }
    Ok(out)
}

fn write_bootstrap(path: &Path, cfg: &RunConfig, res: &SweepResult) -> Result<(), Error> {
    let mut text = String::from("algorithm,r,n,boot_lo,boot_hi\n");
    for (row, batch) in res.table.rows.iter().zip(&res.batches) {
        let ci = bootstrap_interval(&batch.finals(), cfg.bootstrap, cfg.seed);
        let (lo, hi) = ci.unwrap_or((f64::NAN, f64::NAN));
        let f = pgg_act_core::experiments::fmt_f64;
        let _ = writeln!(text, "{},{},{},{},{}", row.algorithm, row.r, row.n, f(lo), f(hi));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sha256_hex(path: &Path) -> Result<String, Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn write_manifest(cfg: &RunConfig, art: &Artifacts, failed: &[String]) -> Result<PathBuf, Error> {
    let mut text = String::new();
    let _ = writeln!(text, "format=1");
    let _ = writeln!(text, "command={}", cfg.mode.name());
    for (k, v) in &cfg.resolved {
        let _ = writeln!(text, "{k}={v}");
    }
    let status = if failed.is_empty() { "ok" } else { "partial" };
    let _ = writeln!(text, "status={status}");
    if !failed.is_empty() {
        let _ = writeln!(text, "failed-trials={}", failed.join(","));
    }
    let mut files = art.files.lock().expect("no panics while holding the lock").clone();
    files.sort();
    for f in files {
        let rel = f.strip_prefix(&art.root).unwrap_or(&f);
        let _ = writeln!(text, "file.{}=sha256:{}", rel.display(), sha256_hex(&f)?);
    }
    let path = art.root.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn run_verify(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed;
    let mut checks = verify::run_all(seed);
    checks.push(verify::fermi_absorbing_check(seed, 20, 50));
    let mut failed = Vec::new();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}

pub fn execute(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.mode == Mode::Verify {
        return run_verify(cfg);
    }
    Artifacts::create_dir(&cfg.out)?;
    let art = Artifacts {
        root: cfg.out.clone(),
        files: Mutex::new(Vec::new()),
    };
    let mut results = Vec::new();
    match &cfg.hyper {
        Some((param, values)) => {
            for &v in values {
                let mut exp = cfg.experiment.clone();
                param.apply(&mut exp.phase2, v);
                exp.validate().map_err(|e| CliError::Usage(e.to_string()))?;
                let root = cfg.out.join(format!("{}_{}", param.name(), v));
                results.push(sweep(cfg, &exp, &art, &root)?);
            }
        }
        None => results.push(sweep(cfg, &cfg.experiment, &art, &cfg.out)?),
    }
    let failed: Vec<String> = results
        .iter()
        .flat_map(|r| r.failures())
        .map(|f| {
            eprintln!("trial failed: {} r={} trial {}: {}", f.key.algorithm, f.key.r, f.key.trial, f.message);
            format!("{}/{}/{}", f.key.algorithm, f.key.r, f.key.trial)
        })
        .collect();
    let manifest = write_manifest(cfg, &art, &failed)?;
    eprintln!("manifest: {}", manifest.display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::PartialFailure(format!("{} trial(s) failed", failed.len())))
    }
}
