//! Command-line and config-file parsing.
//!
//! Every option is a `key=value` setting. Defaults are overridden by the
//! config file, which is overridden by flags. The resolved settings are
//! echoed into the run manifest, which is itself a valid config file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgAction, Command};
use pgg_act_core::baselines::{FermiParams, QParams};
use pgg_act_core::curriculum::{PhaseConfig, TrainerConfig};
use pgg_act_core::experiments::{r_grid, Algorithm, ExperimentConfig, HyperParam};
use pgg_act_core::InitScheme;

use crate::error::CliError;

pub const OUT_ENV: &str = "PGG_ACT_OUT";

/// `(key, default, help)`. An empty default means unset.
const SETTINGS: &[(&str, &str, &str)] = &[
    ("algo", "ppo-act", "ppo-act, ppo, qlearning or fermi"),
    ("L", "200", "lattice side length"),
    ("init", "half-half", "half-half, bernoulli[:p], all-defect or all-cooperate"),
    ("r1", "5.0", "phase 1 enhancement factor"),
    ("r2", "4.0", "phase 2 (target) enhancement factor"),
    ("t1", "1000", "phase 1 iterations"),
    ("t2", "9000", "phase 2 iterations"),
    ("alpha", "0.001", "phase 2 learning rate"),
    ("gamma", "0.96", "phase 2 discount"),
    ("lambda", "0.95", "GAE lambda (both phases)"),
    ("eps-clip", "0.2", "PPO clip range (both phases)"),
    ("delta", "0.5", "value loss weight (both phases)"),
    ("rho", "0.001", "phase 2 entropy weight"),
    ("alpha1", "0.001", "phase 1 learning rate"),
    ("gamma1", "0.99", "phase 1 discount"),
    ("rho1", "0.01", "phase 1 entropy weight"),
    ("hidden", "64", "hidden layer width"),
    ("horizon", "8", "rolling advantage window, in steps"),
    ("update-epochs", "1", "passes over the window per iteration"),
    ("minibatch", "full", "samples per gradient step, or 'full'"),
    ("normalize-adv", "true", "normalize advantages per batch"),
    ("lr-step", "1000", "halve the learning rate every this many iterations"),
    ("q-alpha", "0.1", "Q-learning rate"),
    ("q-gamma", "0.9", "Q-learning discount"),
    ("q-epsilon", "0.02", "Q-learning exploration rate"),
    ("fermi-k", "0.5", "Fermi selection noise"),
    ("fermi-async", "false", "random single-site Fermi updates"),
    ("trials", "1", "independent trials per r"),
    ("seed", "", "base seed (default 0; required for sweeps)"),
    ("jobs", "1", "worker threads"),
    ("out", "", "output root (default $PGG_ACT_OUT or ./out)"),
    ("snapshots", "", "snapshot times, comma separated"),
    ("window", "100", "trailing iterations averaged into the final fraction"),
    ("r-grid", "3.0:6.0:0.1", "sweep grid start:stop:step or a comma list"),
    ("name", "", "hyperparameter to sweep: alpha, gamma, delta or rho"),
    ("values", "", "comma-separated hyperparameter values"),
    ("checkpoint", "", "phase 1 checkpoint for phase2-only"),
    ("bootstrap", "0", "bootstrap resamples for an extra interval table (0 = off)"),
];

/// Manifest entries that are not settings.
const MANIFEST_ONLY: &[&str] = &["command", "status", "failed-trials", "format"];

const RUN_SNAPSHOTS: &str = "0,10,100,1000,10000";
const PHASE2_SNAPSHOTS: &str = "0,1,10,100,1000";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Run,
    Sweep,
    HypSweep,
    Phase2Only,
    Verify,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Run => "run",
            Mode::Sweep => "sweep",
            Mode::HypSweep => "hypsweep",
            Mode::Phase2Only => "phase2-only",
            Mode::Verify => "verify",
        }
    }
}

/// Fully resolved and validated settings.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub mode: Mode,
    pub algorithm: Algorithm,
    pub experiment: ExperimentConfig,
    pub trials: usize,
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    pub grid: Vec<f64>,
    pub hyper: Option<(HyperParam, Vec<f64>)>,
    pub checkpoint: Option<PathBuf>,
    pub bootstrap: usize,
    /// Every setting with its final value, for the manifest.
    pub resolved: BTreeMap<String, String>,
}

fn command() -> Command {
    let mut settings: Vec<Arg> = SETTINGS
        .iter()
        .map(|&(key, _, help)| {
            Arg::new(key)
                .long(key)
                .value_name("VALUE")
                .help(help)
                .action(ArgAction::Set)
        })
        .collect();
    settings.push(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("flat key=value settings file"),
    );
    let sub = |name: &'static str, about: &'static str| {
        Command::new(name).about(about).args(settings.clone())
    };
    Command::new("pgg-act")
        .about("Spatial public goods game with PPO actor-critic agents and curriculum transfer")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .subcommand(sub("run", "train or simulate independent trials at r = r2"))
        .subcommand(sub("sweep", "trials over a grid of r values"))
        .subcommand(sub("hypsweep", "r-sweeps for each value of one phase 2 hyperparameter"))
        .subcommand(sub("phase2-only", "phase 2 from a phase 1 checkpoint"))
        .subcommand(sub("verify", "run the built-in correctness checks"))
}

/// Parses `key=value` lines; `#` starts a comment line.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
        let k = k.trim();
        if k.starts_with("file.") || MANIFEST_ONLY.contains(&k) {
            continue;
        }
        if !SETTINGS.iter().any(|s| s.0 == k) {
            return Err(CliError::Usage(format!("config line {}: unknown key '{k}'", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text)
}

fn value<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    let raw = &map[key];
    raw.parse()
        .map_err(|e| CliError::Usage(format!("--{key} {raw}: {e}")))
}

fn list(map: &BTreeMap<String, String>, key: &str) -> Result<Vec<f64>, CliError> {
    map[key]
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("--{key}: '{s}': {e}")))
        })
        .collect()
}

fn parse_grid(raw: &str) -> Result<Vec<f64>, CliError> {
    let bad = |e: String| CliError::Usage(format!("--r-grid {raw}: {e}"));
    let nums = |sep: char| -> Result<Vec<f64>, CliError> {
        raw.split(sep)
            .map(|s| s.trim().parse::<f64>().map_err(|e| bad(e.to_string())))
            .collect()
    };
    if raw.contains(':') {
        let p = nums(':')?;
        if p.len() != 3 {
            return Err(bad("expected start:stop:step".into()));
        }
        r_grid(p[0], p[1], p[2]).map_err(|e| bad(e.to_string()))
    } else {
        nums(',')
    }
}

/// Parses argv (including the program name).
pub fn parse_args<I, T>(args: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args).map_err(CliError::Clap)?;
    let (sub, m) = matches.subcommand().expect("subcommand required");
    let mode = match sub {
        "run" => Mode::Run,
        "sweep" => Mode::Sweep,
        "hypsweep" => Mode::HypSweep,
        "phase2-only" => Mode::Phase2Only,
        _ => Mode::Verify,
    };

    let mut map: BTreeMap<String, String> = SETTINGS
        .iter()
        .map(|&(k, d, _)| (k.to_string(), d.to_string()))
        .collect();
    map.insert(
        "snapshots".into(),
        if mode == Mode::Phase2Only { PHASE2_SNAPSHOTS } else { RUN_SNAPSHOTS }.into(),
    );
    map.insert(
        "out".into(),
        std::env::var(OUT_ENV).unwrap_or_else(|_| "out".to_string()),
    );
    if let Some(path) = m.get_one::<String>("config") {
        for (k, v) in read_config_file(Path::new(path))? {
            map.insert(k, v);
        }
    }
    for &(key, _, _) in SETTINGS {
        if let Some(v) = m.get_one::<String>(key) {
            map.insert(key.to_string(), v.clone());
        }
    }
    resolve(mode, map)
}

fn resolve(mode: Mode, mut map: BTreeMap<String, String>) -> Result<RunConfig, CliError> {
    let algorithm: Algorithm = value(&map, "algo")?;
    let init: InitScheme = value(&map, "init")?;
    let phase2 = PhaseConfig {
        r: value(&map, "r2")?,
        epochs: value(&map, "t2")?,
        lr: value(&map, "alpha")?,
        gamma: value(&map, "gamma")?,
        lambda: value(&map, "lambda")?,
        clip: value(&map, "eps-clip")?,
        value_coef: value(&map, "delta")?,
        entropy_coef: value(&map, "rho")?,
        init,
    };
    let phase1 = PhaseConfig {
        r: value(&map, "r1")?,
        epochs: value(&map, "t1")?,
        lr: value(&map, "alpha1")?,
        gamma: value(&map, "gamma1")?,
        entropy_coef: value(&map, "rho1")?,
        ..phase2
    };
    let minibatch = match map["minibatch"].as_str() {
        "full" => usize::MAX,
        _ => value(&map, "minibatch")?,
    };
    let trainer = TrainerConfig {
        hidden: value(&map, "hidden")?,
        horizon: value(&map, "horizon")?,
        update_epochs: value(&map, "update-epochs")?,
        minibatch,
        normalize_advantages: value(&map, "normalize-adv")?,
        lr_step: value(&map, "lr-step")?,
    };
    let total = phase1.epochs + phase2.epochs;
    let horizon_end = if mode == Mode::Phase2Only { phase2.epochs } else { total };
    let mut snapshots: Vec<u64> = list(&map, "snapshots")?
        .into_iter()
        .map(|t| t as u64)
        .filter(|&t| t <= horizon_end)
        .collect();
    snapshots.sort_unstable();
    snapshots.dedup();
    let experiment = ExperimentConfig {
        side: value(&map, "L")?,
        phase1,
        phase2,
        trainer,
        qlearning: QParams {
            alpha: value(&map, "q-alpha")?,
            gamma: value(&map, "q-gamma")?,
            epsilon: value(&map, "q-epsilon")?,
        },
        fermi: FermiParams {
            k: value(&map, "fermi-k")?,
            asynchronous: value(&map, "fermi-async")?,
        },
        snapshots,
        window: value(&map, "window")?,
    };
    if mode != Mode::Verify {
        experiment
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }

    let seed = match map["seed"].as_str() {
        "" if matches!(mode, Mode::Sweep | Mode::HypSweep) => {
            return Err(CliError::Usage(format!("{} requires --seed", mode.name())));
        }
        "" => {
            map.insert("seed".into(), "0".into());
            0
        }
        _ => value::<u64>(&map, "seed")?,
    };
    let trials: usize = value(&map, "trials")?;
    if trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let jobs: usize = value(&map, "jobs")?;
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let grid = match mode {
        Mode::Sweep | Mode::HypSweep => parse_grid(&map["r-grid"])?,
        _ => vec![phase2.r],
    };
    if grid.is_empty() {
        return Err(CliError::Usage("--r-grid is empty".into()));
    }
    let hyper = if mode == Mode::HypSweep {
        let name: HyperParam = value(&map, "name")?;
        let values = list(&map, "values")?;
        if values.is_empty() {
            return Err(CliError::Usage("hypsweep requires --values".into()));
        }
        Some((name, values))
    } else {
        None
    };
    if matches!(mode, Mode::HypSweep) && !algorithm.is_learned_policy() {
        return Err(CliError::Usage(format!("{algorithm} has no phase 2 hyperparameters")));
    }
    if mode == Mode::Phase2Only && algorithm != Algorithm::PpoAct {
        return Err(CliError::Usage("phase2-only needs --algo ppo-act".into()));
    }
    let checkpoint = match map["checkpoint"].as_str() {
        "" => None,
        p => Some(PathBuf::from(p)),
    };
    let bootstrap = value(&map, "bootstrap")?;
    let out = PathBuf::from(&map["out"]);
    let resolved = map.into_iter().filter(|(_, v)| !v.is_empty()).collect();
    Ok(RunConfig {
        mode,
        algorithm,
        experiment,
        trials,
        seed,
        jobs,
        out,
        grid,
        hyper,
        checkpoint,
        bootstrap,
        resolved,
    })
}
