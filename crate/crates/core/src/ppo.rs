//! Rollout collection, generalized advantage estimation and clipped PPO
//! updates for one policy network shared by the whole population.
//!
//! Agents observe a three-component state: their own last strategy, the
//! share of cooperating neighbors, and their last payoff scaled by the
//! largest all-cooperator payoff `G * (r - 1)` (clamped to `[-1, 1]`).
//!
//! States are discrete in practice (a few hundred distinct rows at most), so
//! the buffer interns them in a [`StateTable`] and the network is evaluated
//! once per distinct row.

use std::collections::{HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::game::{check_r, cumulative_payoffs, PayoffField, Strategy, StrategyField};
use crate::lattice::{Lattice, G, K};
use crate::nn::{self, Adam, Forward, IndexedSample, LossCoefs, LossReport, PolicyParams};
use crate::rng::agent_rng;

pub const STATE_DIM: usize = 3;

/// Encoded observation of one agent.
pub type AgentState = [f64; STATE_DIM];

pub fn encode_state(
    field: &StrategyField,
    payoffs: &PayoffField,
    lat: &Lattice,
    agent: usize,
    r: f64,
) -> AgentState {
    let own = field.get(agent).as_f64();
    let coop_nb = lat
        .neighbors(agent)
        .iter()
        .filter(|&&j| field.get(j).is_cooperate())
        .count();
    let scale = G as f64 * (r - 1.0);
    let payoff = (payoffs.get(agent) / scale).clamp(-1.0, 1.0);
    [own, coop_nb as f64 / K as f64, payoff]
}

/// Interned distinct states.
#[derive(Clone, Debug, Default)]
pub struct StateTable {
    index: HashMap<[u64; STATE_DIM], u32>,
    rows: Vec<f64>,
}

impl StateTable {
    pub fn intern(&mut self, s: &AgentState) -> u32 {
        let key = s.map(f64::to_bits);
        let next = self.index.len() as u32;
        *self.index.entry(key).or_insert_with(|| {
            self.rows.extend_from_slice(s);
            next
        })
    }

    pub fn get(&self, id: u32) -> AgentState {
        let i = id as usize * STATE_DIM;
        [self.rows[i], self.rows[i + 1], self.rows[i + 2]]
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn clear(&mut self) {
        self.index.clear();
        self.rows.clear();
    }
}

/// One synchronous step of the whole population.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub state: Vec<u32>,
    pub action: Vec<u8>,
    pub log_prob: Vec<f64>,
    pub value: Vec<f64>,
    pub reward: Vec<f64>,
    pub advantage: Vec<f64>,
    pub value_target: Vec<f64>,
}

/// Rolling window of the most recent `horizon` steps.
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    horizon: usize,
    table: StateTable,
    steps: VecDeque<StepRecord>,
    /// States observed after the newest step (bootstrap states).
    next_state: Vec<u32>,
}

impl RolloutBuffer {
    pub fn new(horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("horizon", "must be at least 1"));
        }
        Ok(RolloutBuffer {
            horizon,
            table: StateTable::default(),
            steps: VecDeque::with_capacity(horizon),
            next_state: Vec::new(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn steps(&self) -> impl ExactSizeIterator<Item = &StepRecord> {
        self.steps.iter()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn num_samples(&self) -> usize {
        self.steps.iter().map(|s| s.state.len()).sum()
    }

    pub fn table(&self) -> &StateTable {
        &self.table
    }

    pub fn state(&self, step: usize, agent: usize) -> AgentState {
        self.table.get(self.steps[step].state[agent])
    }

    pub fn clear(&mut self) {
        self.steps.clear();
        self.table.clear();
        self.next_state.clear();
    }

    fn push(&mut self, record: StepRecord, next_state: Vec<u32>) {
        if self.steps.len() == self.horizon {
            self.steps.pop_front();
        }
        self.steps.push_back(record);
        self.next_state = next_state;
    }

    /// Re-evaluates log-probabilities and values of the whole window under
    /// `params`, which become the reference policy of the next update.
    pub fn relabel(&mut self, params: &PolicyParams) -> Result<()> {
        let outs = nn::forward_many(params, self.table.rows())?;
        for step in self.steps.iter_mut() {
            for i in 0..step.state.len() {
                let out = &outs[step.state[i] as usize];
                step.log_prob[i] = out.log_prob(step.action[i] as usize);
                step.value[i] = out.value;
            }
        }
        Ok(())
    }

    /// Fills advantages and value targets for every agent's series, using
    /// `params`' critic on the post-window state as bootstrap.
    pub fn compute_advantages(
        &mut self,
        params: &PolicyParams,
        gamma: f64,
        lambda: f64,
    ) -> Result<()> {
        let Some(first) = self.steps.front() else {
            return Err(Error::EmptyBatch);
        };
        let n = first.state.len();
        let t_len = self.steps.len();
        let mut rewards = vec![0.0; t_len];
        let mut values = vec![0.0; t_len];
        let mut cache: HashMap<u32, f64> = HashMap::new();
        for agent in 0..n {
            for (t, step) in self.steps.iter().enumerate() {
                rewards[t] = step.reward[agent];
                values[t] = step.value[agent];
            }
            let id = self.next_state[agent];
            let bootstrap = match cache.get(&id) {
                Some(&v) => v,
                None => {
                    let v = nn::forward(params, &self.table.get(id))?.value;
                    cache.insert(id, v);
                    v
                }
            };
            let (adv, targets) = compute_gae(&rewards, &values, bootstrap, gamma, lambda)?;
            for (t, step) in self.steps.iter_mut().enumerate() {
                step.advantage[agent] = adv[t];
                step.value_target[agent] = targets[t];
            }
        }
        Ok(())
    }

    /// Shifts and scales advantages over the whole window to mean 0, std 1.
    pub fn normalize_advantages(&mut self) {
        let n = self.num_samples() as f64;
        if n == 0.0 {
            return;
        }
        let mean = self.steps.iter().flat_map(|s| &s.advantage).sum::<f64>() / n;
        let var = self
            .steps
            .iter()
            .flat_map(|s| &s.advantage)
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / n;
        let scale = 1.0 / (var.sqrt() + 1e-8);
        for step in self.steps.iter_mut() {
            for a in step.advantage.iter_mut() {
                *a = (*a - mean) * scale;
            }
        }
    }

    fn samples(&self) -> Vec<IndexedSample> {
        self.steps
            .iter()
            .flat_map(|s| {
                (0..s.state.len()).map(move |i| IndexedSample {
                    state: s.state[i],
                    action: s.action[i],
                    old_log_prob: s.log_prob[i],
                    advantage: s.advantage[i],
                    value_target: s.value_target[i],
                })
            })
            .collect()
    }
}

/// The population: current strategies and the payoffs they produce.
#[derive(Clone, Debug)]
pub struct PggEnv {
    pub field: StrategyField,
    pub payoffs: PayoffField,
    pub r: f64,
}

impl PggEnv {
    pub fn new(field: StrategyField, lat: &Lattice, r: f64) -> Result<Self> {
        let payoffs = cumulative_payoffs(&field, lat, r)?;
        Ok(PggEnv { field, payoffs, r })
    }

    pub fn encode(&self, lat: &Lattice, agent: usize) -> AgentState {
        encode_state(&self.field, &self.payoffs, lat, agent, self.r)
    }

    fn intern_states(&self, lat: &Lattice, table: &mut StateTable) -> Vec<u32> {
        (0..lat.len())
            .map(|i| table.intern(&self.encode(lat, i)))
            .collect()
    }

    /// Every agent samples an action from the shared policy, then the field
    /// and payoffs update synchronously. Returns the new cooperation fraction.
    pub fn step(
        &mut self,
        lat: &Lattice,
        params: &PolicyParams,
        step_seed: u64,
        buffer: &mut RolloutBuffer,
    ) -> Result<f64> {
        if buffer.next_state.len() != lat.len() {
            buffer.next_state = self.intern_states(lat, &mut buffer.table);
        }
        let state = std::mem::take(&mut buffer.next_state);
        let outs: Vec<Forward> = nn::forward_many(params, buffer.table.rows())?;

        let action: Vec<u8> = state
            .par_iter()
            .enumerate()
            .map(|(i, &s)| {
                let p_coop = outs[s as usize].probs[1];
                let u: f64 = agent_rng(step_seed, i).gen();
                u8::from(u < p_coop)
            })
            .collect();
        let log_prob = state
            .iter()
            .zip(&action)
            .map(|(&s, &a)| outs[s as usize].log_prob(a as usize))
            .collect();
        let value = state.iter().map(|&s| outs[s as usize].value).collect();

        let strategies = action.iter().map(|&a| Strategy::from_action(a as usize)).collect();
        let step = self.field.step + 1;
        self.field = StrategyField::new(strategies);
        self.field.step = step;
        self.payoffs = cumulative_payoffs(&self.field, lat, self.r)?;
        let reward = self.payoffs.as_slice().to_vec();
        let next_state = self.intern_states(lat, &mut buffer.table);

        let n = lat.len();
        buffer.push(
            StepRecord {
                state,
                action,
                log_prob,
                value,
                reward,
                advantage: vec![0.0; n],
                value_target: vec![0.0; n],
            },
            next_state,
        );
        Ok(self.field.cooperation_fraction())
    }
}

/// Runs `horizon` steps from `field` under a fixed policy.
///
/// Returns the filled buffer (behavior log-probs and values, no advantages
/// yet), the final field, and the cooperation fraction after each step.
pub fn collect_rollout<R: Rng + ?Sized>(
    field: &StrategyField,
    lat: &Lattice,
    params: &PolicyParams,
    r: f64,
    horizon: usize,
    rng: &mut R,
) -> Result<(RolloutBuffer, StrategyField, Vec<f64>)> {
    check_r(r)?;
    let mut buffer = RolloutBuffer::new(horizon)?;
    let mut env = PggEnv::new(field.clone(), lat, r)?;
    let mut series = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        series.push(env.step(lat, params, rng.gen(), &mut buffer)?);
    }
    Ok((buffer, env.field, series))
}

/// Generalized advantage estimation over one truncated series.
///
/// `psi_t = r_t + gamma * V_{t+1} - V_t` with `V_T = bootstrap`, and
/// `A_t = psi_t + gamma * lambda * A_{t+1}`. Targets are `A_t + V_t`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::LengthMismatch {
            what: "rewards vs values",
            left: rewards.len(),
            right: values.len(),
        });
    }
    if rewards.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(0.0..1.0).contains(&gamma) || !(0.0..1.0).contains(&lambda) {
        return Err(Error::invalid("gae", "gamma and lambda must lie in [0, 1)"));
    }
    let t_len = rewards.len();
    let mut adv = vec![0.0; t_len];
    let mut next_value = bootstrap;
    let mut running = 0.0;
    for t in (0..t_len).rev() {
        let psi = rewards[t] + gamma * next_value - values[t];
        running = psi + gamma * lambda * running;
        adv[t] = running;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateConfig {
    pub coefs: LossCoefs,
    /// Passes over the buffer per update.
    pub epochs: usize,
    pub minibatch: usize,
}

/// Loss components seen during one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateReport {
    /// First minibatch of the first epoch (taken before any step).
    pub first: LossReport,
    /// Mean over all minibatches.
    pub mean: LossReport,
    pub minibatches: usize,
}

/// Shuffled-minibatch gradient steps on the negated PPO objective.
///
/// On any non-finite loss or gradient the parameters and optimizer are
/// restored to their state on entry and the error is returned.
pub fn ppo_update<R: Rng + ?Sized>(
    params: &mut PolicyParams,
    opt: &mut Adam,
    buffer: &RolloutBuffer,
    cfg: &UpdateConfig,
    rng: &mut R,
) -> Result<UpdateReport> {
    if cfg.epochs == 0 || cfg.minibatch == 0 {
        return Err(Error::invalid("update", "epochs and minibatch must be positive"));
    }
    let samples = buffer.samples();
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let saved = (params.clone(), opt.clone());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = UpdateReport::default();
    let mut mb = Vec::with_capacity(cfg.minibatch.min(samples.len()));
    let result = (|| {
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.minibatch) {
                mb.clear();
                mb.extend(chunk.iter().map(|&i| samples[i]));
                let (grads, loss) =
                    nn::backward_indexed(params, buffer.table.rows(), &mb, cfg.coefs)?;
                opt.step(params, &grads)?;
                if report.minibatches == 0 {
                    report.first = loss;
                }
                report.minibatches += 1;
                let m = &mut report.mean;
                m.policy += loss.policy;
                m.value += loss.value;
                m.entropy += loss.entropy;
                m.objective += loss.objective;
                m.mean_ratio += loss.mean_ratio;
                m.clip_fraction += loss.clip_fraction;
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        *params = saved.0;
        *opt = saved.1;
        return Err(e);
    }
    let k = report.minibatches as f64;
    let m = &mut report.mean;
    for x in [
        &mut m.policy,
        &mut m.value,
        &mut m.entropy,
        &mut m.objective,
        &mut m.mean_ratio,
        &mut m.clip_fraction,
    ] {
        *x /= k;
    }
    Ok(report)
}
