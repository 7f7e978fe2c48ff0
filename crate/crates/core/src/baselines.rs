//! Comparison dynamics: tabular Q-learning and the Fermi imitation rule.
//!
//! Both update synchronously by default and draw every random number from a
//! per-agent substream of the step seed, like the PPO loop.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::curriculum::RunRecord;
use crate::error::{Error, Result};
use crate::game::{agent_payoff, cumulative_payoffs, InitScheme, Strategy, StrategyField};
use crate::lattice::{Lattice, K};
use crate::rng::{agent_rng, derive_seed, stream_rng, Stream};

/// Own strategy times neighbor cooperator count (0..=4).
pub const Q_STATES: usize = 2 * (K + 1);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QParams {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for QParams {
    fn default() -> Self {
        QParams {
            alpha: 0.1,
            gamma: 0.9,
            epsilon: 0.02,
        }
    }
}

impl QParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("q_alpha", "must be in (0,1]"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid("q_gamma", "must be in [0,1)"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid("q_epsilon", "must be in [0,1]"));
        }
        Ok(())
    }
}

/// One agent's action values, `q[state][action]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct QTable {
    pub q: [[f64; 2]; Q_STATES],
}

impl QTable {
    /// Standard one-step update toward `reward + gamma * max Q(next)`.
    pub fn update(&mut self, p: &QParams, s: usize, a: usize, reward: f64, next: usize) {
        let best = self.q[next][0].max(self.q[next][1]);
        let q = &mut self.q[s][a];
        *q += p.alpha * (reward + p.gamma * best - *q);
    }

    /// Epsilon-greedy; ties between the two actions are broken uniformly.
    pub fn choose<R: Rng + ?Sized>(&self, s: usize, epsilon: f64, rng: &mut R) -> usize {
        let explore = rng.gen::<f64>() < epsilon;
        let [q0, q1] = self.q[s];
        if explore || q0 == q1 {
            rng.gen_range(0..2)
        } else {
            usize::from(q1 > q0)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().flatten().all(|v| v.is_finite())
    }
}

pub fn q_state(field: &StrategyField, lat: &Lattice, agent: usize) -> usize {
    let coop = lat.neighbors(agent).iter().filter(|&&j| field.get(j).is_cooperate()).count();
    field.get(agent) as usize * (K + 1) + coop
}

/// Everyone acts epsilon-greedily, the field flips at once, and each agent
/// updates the entry it used with its new cumulative payoff.
pub fn qlearning_iteration(
    field: &mut StrategyField,
    tables: &mut [QTable],
    lat: &Lattice,
    r: f64,
    params: &QParams,
    step_seed: u64,
) -> Result<()> {
    params.validate()?;
    if tables.len() != lat.len() || field.len() != lat.len() {
        return Err(Error::LengthMismatch {
            what: "q-tables vs lattice",
            left: tables.len(),
            right: lat.len(),
        });
    }
    let states: Vec<usize> = (0..lat.len()).map(|i| q_state(field, lat, i)).collect();
    let actions: Vec<usize> = (0..lat.len())
        .into_par_iter()
        .map(|i| tables[i].choose(states[i], params.epsilon, &mut agent_rng(step_seed, i)))
        .collect();
    let step = field.step + 1;
    *field = StrategyField::new(actions.iter().map(|&a| Strategy::from_action(a)).collect());
    field.step = step;
    let payoffs = cumulative_payoffs(field, lat, r)?;
    for (i, table) in tables.iter_mut().enumerate() {
        let next = q_state(field, lat, i);
        table.update(params, states[i], actions[i], payoffs.get(i), next);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FermiParams {
    /// Selection noise, in payoff units.
    pub k: f64,
    /// Random single-site updates instead of one synchronous sweep.
    pub asynchronous: bool,
}

impl Default for FermiParams {
    fn default() -> Self {
        FermiParams {
            k: 0.5,
            asynchronous: false,
        }
    }
}

impl FermiParams {
    pub fn validate(&self) -> Result<()> {
        if self.k.is_finite() && self.k > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid("fermi_k", "must be positive"))
        }
    }
}

/// Probability that an agent with payoff `pi_i` copies one with `pi_j`.
#[inline]
pub fn adoption_probability(pi_i: f64, pi_j: f64, k: f64) -> f64 {
    1.0 / (1.0 + ((pi_i - pi_j) / k).exp())
}

fn pick_neighbor(lat: &Lattice, i: usize, rng: &mut ChaCha8Rng) -> usize {
    *lat.neighbors(i).choose(rng).expect("four neighbors")
}

/// One Fermi update. Synchronous mode resolves every agent against the
/// payoffs at the start of the step; asynchronous mode performs `N` random
/// single-site updates with payoffs recomputed locally.
pub fn fermi_iteration(
    field: &mut StrategyField,
    lat: &Lattice,
    r: f64,
    params: &FermiParams,
    step_seed: u64,
) -> Result<()> {
    params.validate()?;
    let payoffs = cumulative_payoffs(field, lat, r)?;
    let step = field.step + 1;
    if params.asynchronous {
        let mut rng = agent_rng(step_seed, 0);
        for _ in 0..lat.len() {
            let i = rng.gen_range(0..lat.len());
            let j = pick_neighbor(lat, i, &mut rng);
            let u: f64 = rng.gen();
            if field.get(i) == field.get(j) {
                continue;
            }
            let p = adoption_probability(
                agent_payoff(field, lat, r, i),
                agent_payoff(field, lat, r, j),
                params.k,
            );
            if u < p {
                field.set(i, field.get(j));
            }
        }
    } else {
        let old = &*field;
        let next: Vec<Strategy> = (0..lat.len())
            .into_par_iter()
            .map(|i| {
                let mut rng = agent_rng(step_seed, i);
                let j = pick_neighbor(lat, i, &mut rng);
                let u: f64 = rng.gen();
                let p = adoption_probability(payoffs.get(i), payoffs.get(j), params.k);
                if u < p {
                    old.get(j)
                } else {
                    old.get(i)
                }
            })
            .collect();
        *field = StrategyField::new(next);
    }
    field.step = step;
    Ok(())
}

/// A single-phase baseline run.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub side: usize,
    pub r: f64,
    pub iterations: u64,
    pub init: InitScheme,
    pub seed: u64,
    pub snapshots: Vec<u64>,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        crate::game::check_r(self.r)?;
        self.init.validate()?;
        Lattice::new(self.side).map(|_| ())
    }
}

fn run_baseline<F>(cfg: &BaselineConfig, mut step: F) -> Result<RunRecord>
where
    F: FnMut(&mut StrategyField, &Lattice, u64) -> Result<()>,
{
    cfg.validate()?;
    let lat = Lattice::new(cfg.side)?;
    let mut field = StrategyField::init(cfg.init, &lat, &mut stream_rng(cfg.seed, Stream::Init, 1))?;
    let mut record = RunRecord {
        series: Vec::with_capacity(cfg.iterations as usize),
        ..RunRecord::default()
    };
    for t in 0..cfg.iterations {
        record.series.push(field.cooperation_fraction());
        if cfg.snapshots.contains(&t) {
            record.snapshots.push((t, field.clone()));
        }
        step(&mut field, &lat, derive_seed(cfg.seed, Stream::Baseline, t))?;
    }
    if cfg.snapshots.contains(&cfg.iterations) {
        record.snapshots.push((cfg.iterations, field.clone()));
    }
    record.final_field = Some(field);
    Ok(record)
}

pub fn run_fermi(cfg: &BaselineConfig, params: &FermiParams) -> Result<RunRecord> {
    params.validate()?;
    run_baseline(cfg, |field, lat, seed| fermi_iteration(field, lat, cfg.r, params, seed))
}

pub fn run_qlearning(cfg: &BaselineConfig, params: &QParams) -> Result<RunRecord> {
    params.validate()?;
    let mut tables = vec![QTable::default(); cfg.side * cfg.side];
    run_baseline(cfg, |field, lat, seed| {
        qlearning_iteration(field, &mut tables, lat, cfg.r, params, seed)
    })
}
