//! Two-phase adversarial curriculum transfer.
//!
//! Phase 1 trains the shared actor-critic at a generous enhancement factor.
//! At the boundary the strategy field is re-initialized and the optimizer and
//! learning-rate schedule start over, but the network weights carry over.
//! Phase 2 then trains at the target enhancement factor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::game::{check_r, InitScheme, StrategyField};
use crate::lattice::Lattice;
use crate::nn::{Adam, LossCoefs, PolicyParams, StepLr, DEFAULT_HIDDEN};
use crate::ppo::{ppo_update, PggEnv, RolloutBuffer, UpdateConfig, STATE_DIM};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Hyperparameters of one curriculum phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseConfig {
    pub r: f64,
    /// Training iterations (one environment step plus one update each).
    pub epochs: u64,
    pub lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub init: InitScheme,
}

impl PhaseConfig {
    /// Cooperative pre-training: r = 5, alpha = 0.001, gamma = 0.99,
    /// rho = 0.01, the rest as in phase 2.
    pub fn phase1_default() -> Self {
        PhaseConfig {
            r: 5.0,
            epochs: 1000,
            lr: 0.001,
            gamma: 0.99,
            entropy_coef: 0.01,
            ..Self::phase2_default()
        }
    }

    pub fn phase2_default() -> Self {
        PhaseConfig {
            r: 4.0,
            epochs: 9000,
            lr: 0.001,
            gamma: 0.96,
            lambda: 0.95,
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.001,
            init: InitScheme::HalfHalf,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_r(self.r)?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "a phase needs at least one iteration"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("alpha", format!("{} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma", format!("{} not in [0,1)", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda", format!("{} not in [0,1)", self.lambda)));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::invalid("eps-clip", format!("{} must be positive", self.clip)));
        }
        if !(self.value_coef >= 0.0 && self.value_coef.is_finite()) {
            return Err(Error::invalid("delta", format!("{} must be >= 0", self.value_coef)));
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return Err(Error::invalid("rho", format!("{} must be >= 0", self.entropy_coef)));
        }
        self.init.validate()
    }

    pub fn coefs(&self) -> LossCoefs {
        LossCoefs {
            clip: self.clip,
            value: self.value_coef,
            entropy: self.entropy_coef,
        }
    }
}

/// Settings shared by both phases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainerConfig {
    pub hidden: usize,
    /// Steps in the rolling GAE window.
    pub horizon: usize,
    /// Passes over the window per iteration. One pass with a full batch means
    /// one gradient step per environment step.
    pub update_epochs: usize,
    /// Samples per gradient step; `usize::MAX` uses the whole window.
    pub minibatch: usize,
    pub normalize_advantages: bool,
    /// Learning rate is halved every this many iterations.
    pub lr_step: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            hidden: DEFAULT_HIDDEN,
            horizon: 8,
            update_epochs: 1,
            minibatch: usize::MAX,
            normalize_advantages: true,
            lr_step: 1000,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.horizon == 0 || self.update_epochs == 0 || self.minibatch == 0
        {
            return Err(Error::invalid(
                "trainer",
                "hidden, horizon, update epochs and minibatch must be positive",
            ));
        }
        if self.lr_step == 0 {
            return Err(Error::invalid("lr_step", "must be positive"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub lr: f64,
}

/// Everything a run produces.
#[derive(Clone, Debug, Default)]
pub struct RunRecord {
    /// Cooperation fraction at each time index, phases concatenated. Entry
    /// `t` describes the field before iteration `t` acts.
    pub series: Vec<f64>,
    /// `(time, field)` for every scheduled snapshot time reached.
    pub snapshots: Vec<(u64, StrategyField)>,
    pub final_field: Option<StrategyField>,
    pub log: Vec<LogRow>,
    /// Parameters at the end of each phase.
    pub checkpoints: Vec<PolicyParams>,
}

impl RunRecord {
    fn extend(&mut self, other: RunRecord) {
        self.series.extend(other.series);
        self.snapshots.extend(other.snapshots);
        self.log.extend(other.log);
        self.checkpoints.extend(other.checkpoints);
        self.final_field = other.final_field;
    }
}

/// Where a phase sits inside a run.
#[derive(Clone, Copy, Debug)]
pub struct PhaseContext<'a> {
    pub seed: u64,
    /// Distinguishes the random streams of different phases of one run.
    pub phase_index: u64,
    /// Global time index of this phase's first iteration.
    pub time_offset: u64,
    pub snapshots: &'a [u64],
    /// Whether the field after the last iteration is a recorded time.
    pub record_final: bool,
}

/// Runs `cfg.epochs` iterations of act -> advantages -> update from `field`.
pub fn run_phase(
    cfg: &PhaseConfig,
    trainer: &TrainerConfig,
    params: &mut PolicyParams,
    opt: &mut Adam,
    lat: &Lattice,
    field: StrategyField,
    ctx: PhaseContext<'_>,
) -> Result<RunRecord> {
    cfg.validate()?;
    trainer.validate()?;
    let schedule = StepLr {
        base_lr: cfg.lr,
        step_size: trainer.lr_step,
        gamma: 0.5,
    };
    schedule.apply(opt, 0);
    let update = UpdateConfig {
        coefs: cfg.coefs(),
        epochs: trainer.update_epochs,
        minibatch: trainer.minibatch,
    };
    let mut shuffle_rng = stream_rng(ctx.seed, Stream::Shuffle, ctx.phase_index);
    let mut env = PggEnv::new(field, lat, cfg.r)?;
    let mut buffer = RolloutBuffer::new(trainer.horizon)?;
    let mut record = RunRecord {
        series: Vec::with_capacity(cfg.epochs as usize),
        ..RunRecord::default()
    };

    for it in 0..cfg.epochs {
        let time = ctx.time_offset + it;
        record.series.push(env.field.cooperation_fraction());
        if ctx.snapshots.contains(&time) {
            record.snapshots.push((time, env.field.clone()));
        }
        let step_seed = derive_seed(ctx.seed, Stream::Actions, (ctx.phase_index << 40) | it);
        env.step(lat, params, step_seed, &mut buffer)?;
        buffer.relabel(params)?;
        buffer.compute_advantages(params, cfg.gamma, cfg.lambda)?;
        if trainer.normalize_advantages {
            buffer.normalize_advantages();
        }
        let lr = opt.lr;
        let report = ppo_update(params, opt, &buffer, &update, &mut shuffle_rng)?;
        schedule.apply(opt, it + 1);
        record.log.push(LogRow {
            iteration: time,
            mean_ratio: report.mean.mean_ratio,
            clip_fraction: report.mean.clip_fraction,
            policy_loss: report.mean.policy,
            value_loss: report.mean.value,
            entropy: report.mean.entropy,
            lr,
        });
    }
    let end = ctx.time_offset + cfg.epochs;
    if ctx.record_final && ctx.snapshots.contains(&end) {
        record.snapshots.push((end, env.field.clone()));
    }
    record.final_field = Some(env.field);
    record.checkpoints.push(params.clone());
    Ok(record)
}

/// Resets the field and the optimizer for phase 2; the weights are kept.
pub fn act_transition<R: Rng + ?Sized>(
    params: &PolicyParams,
    phase2: &PhaseConfig,
    lat: &Lattice,
    rng: &mut R,
) -> Result<(StrategyField, Adam)> {
    let field = StrategyField::init(phase2.init, lat, rng)?;
    Ok((field, Adam::new(params, phase2.lr)))
}

/// A complete curriculum run.
#[derive(Clone, Debug, PartialEq)]
pub struct ActConfig {
    pub side: usize,
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub trainer: TrainerConfig,
    pub seed: u64,
    pub snapshots: Vec<u64>,
}

impl ActConfig {
    pub fn validate(&self) -> Result<()> {
        self.phase1.validate()?;
        self.phase2.validate()?;
        self.trainer.validate()?;
        Lattice::new(self.side).map(|_| ())
    }

    pub fn initial_params(&self) -> Result<PolicyParams> {
        let mut rng = stream_rng(self.seed, Stream::Weights, 0);
        PolicyParams::init(STATE_DIM, self.trainer.hidden, &mut rng)
    }

    fn init_rng(&self, phase_index: u64) -> ChaCha8Rng {
        stream_rng(self.seed, Stream::Init, phase_index)
    }
}

/// Phase 1, transition, phase 2.
pub fn run_act(cfg: &ActConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let lat = Lattice::new(cfg.side)?;
    let mut params = cfg.initial_params()?;
    let mut opt = Adam::new(&params, cfg.phase1.lr);
    let field = StrategyField::init(cfg.phase1.init, &lat, &mut cfg.init_rng(0))?;
    let mut record = run_phase(
        &cfg.phase1,
        &cfg.trainer,
        &mut params,
        &mut opt,
        &lat,
        field,
        PhaseContext {
            seed: cfg.seed,
            phase_index: 0,
            time_offset: 0,
            snapshots: &cfg.snapshots,
            record_final: false,
        },
    )?;
    let (field, mut opt) = act_transition(&params, &cfg.phase2, &lat, &mut cfg.init_rng(1))?;
    let phase2 = run_phase(
        &cfg.phase2,
        &cfg.trainer,
        &mut params,
        &mut opt,
        &lat,
        field,
        PhaseContext {
            seed: cfg.seed,
            phase_index: 1,
            time_offset: cfg.phase1.epochs,
            snapshots: &cfg.snapshots,
            record_final: true,
        },
    )?;
    record.extend(phase2);
    Ok(record)
}

/// Phase 2 alone, starting from transferred `params`. Time restarts at 0.
pub fn run_phase2_only(cfg: &ActConfig, params: &PolicyParams) -> Result<RunRecord> {
    cfg.validate()?;
    let lat = Lattice::new(cfg.side)?;
    if params.state_dim() != STATE_DIM {
        return Err(Error::DimensionMismatch {
            expected: STATE_DIM,
            got: params.state_dim(),
        });
    }
    let mut params = params.clone();
    let (field, mut opt) = act_transition(&params, &cfg.phase2, &lat, &mut cfg.init_rng(1))?;
    run_phase(
        &cfg.phase2,
        &cfg.trainer,
        &mut params,
        &mut opt,
        &lat,
        field,
        PhaseContext {
            seed: cfg.seed,
            phase_index: 1,
            time_offset: 0,
            snapshots: &cfg.snapshots,
            record_final: true,
        },
    )
}

/// Phase 1 alone; returns the trained parameters as the transfer checkpoint.
pub fn run_phase1_only(cfg: &ActConfig) -> Result<(PolicyParams, RunRecord)> {
    cfg.validate()?;
    let lat = Lattice::new(cfg.side)?;
    let mut params = cfg.initial_params()?;
    let mut opt = Adam::new(&params, cfg.phase1.lr);
    let field = StrategyField::init(cfg.phase1.init, &lat, &mut cfg.init_rng(0))?;
    let record = run_phase(
        &cfg.phase1,
        &cfg.trainer,
        &mut params,
        &mut opt,
        &lat,
        field,
        PhaseContext {
            seed: cfg.seed,
            phase_index: 0,
            time_offset: 0,
            snapshots: &cfg.snapshots,
            record_final: true,
        },
    )?;
    Ok((params, record))
}

/// Plain PPO without curriculum: fresh weights trained with the phase 2
/// settings for `phase1.epochs + phase2.epochs` iterations.
pub fn run_plain_ppo(cfg: &ActConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let lat = Lattice::new(cfg.side)?;
    let mut params = cfg.initial_params()?;
    let mut opt = Adam::new(&params, cfg.phase2.lr);
    let single = PhaseConfig {
        epochs: cfg.phase1.epochs + cfg.phase2.epochs,
        ..cfg.phase2
    };
    let field = StrategyField::init(single.init, &lat, &mut cfg.init_rng(1))?;
    run_phase(
        &single,
        &cfg.trainer,
        &mut params,
        &mut opt,
        &lat,
        field,
        PhaseContext {
            seed: cfg.seed,
            phase_index: 1,
            time_offset: 0,
            snapshots: &cfg.snapshots,
            record_final: true,
        },
    )
}
