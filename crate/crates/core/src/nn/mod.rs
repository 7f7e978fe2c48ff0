//! Two-layer ReLU trunk shared by a softmax actor head and a scalar critic
//! head, with hand-written backpropagation of the clipped PPO objective.

mod adam;
mod checkpoint;

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

pub use adam::{Adam, StepLr};
pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const ACTIONS: usize = 2;
pub const DEFAULT_HIDDEN: usize = 64;

/// Network weights. Matrices are row-major `[out][in]`.
///
/// The same layout doubles as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    state_dim: usize,
    hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w_actor: Vec<f64>,
    pub b_actor: Vec<f64>,
    pub w_critic: Vec<f64>,
    pub b_critic: Vec<f64>,
}

pub type Gradients = PolicyParams;

impl PolicyParams {
    pub fn zeros(state_dim: usize, hidden: usize) -> Self {
        PolicyParams {
            state_dim,
            hidden,
            w1: vec![0.0; hidden * state_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * hidden],
            b2: vec![0.0; hidden],
            w_actor: vec![0.0; ACTIONS * hidden],
            b_actor: vec![0.0; ACTIONS],
            w_critic: vec![0.0; hidden],
            b_critic: vec![0.0; 1],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(state_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if state_dim == 0 || hidden == 0 {
            return Err(Error::invalid("network", "state_dim and hidden must be positive"));
        }
        let mut p = Self::zeros(state_dim, hidden);
        let mut fill = |v: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in v {
                *x = rng.gen_range(-bound..bound);
            }
        };
        fill(&mut p.w1, state_dim);
        fill(&mut p.b1, state_dim);
        fill(&mut p.w2, hidden);
        fill(&mut p.b2, hidden);
        fill(&mut p.w_actor, hidden);
        fill(&mut p.b_actor, hidden);
        fill(&mut p.w_critic, hidden);
        fill(&mut p.b_critic, hidden);
        Ok(p)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.state_dim == other.state_dim && self.hidden == other.hidden
    }

    pub fn tensor_names() -> [&'static str; 8] {
        [
            "w1", "b1", "w2", "b2", "w_actor", "b_actor", "w_critic", "b_critic",
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.w_actor,
            &self.b_actor,
            &self.w_critic,
            &self.b_critic,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w_actor,
            &mut self.b_actor,
            &mut self.w_critic,
            &mut self.b_critic,
        ]
    }

    /// `(rows, cols)` of each tensor, biases as `(n, 1)`.
    pub fn shapes(&self) -> [(usize, usize); 8] {
        let (d, h) = (self.state_dim, self.hidden);
        [
            (h, d),
            (h, 1),
            (h, h),
            (h, 1),
            (ACTIONS, h),
            (ACTIONS, 1),
            (1, h),
            (1, 1),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Output of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Forward {
    pub logits: [f64; ACTIONS],
    pub probs: [f64; ACTIONS],
    pub value: f64,
}

impl Forward {
    pub fn log_prob(&self, action: usize) -> f64 {
        log_softmax(&self.logits)[action]
    }

    pub fn entropy(&self) -> f64 {
        let lp = log_softmax(&self.logits);
        -(0..ACTIONS).map(|k| self.probs[k] * lp[k]).sum::<f64>()
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64; ACTIONS]) -> [f64; ACTIONS] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|z| (z - max).exp());
    let sum: f64 = e.iter().sum();
    e.map(|x| x / sum)
}

pub fn log_softmax(logits: &[f64; ACTIONS]) -> [f64; ACTIONS] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.map(|z| z - lse)
}

struct Activations {
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
    out: Forward,
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let n_in = x.len();
    out.clear();
    out.extend(b.iter().enumerate().map(|(o, &bias)| {
        let row = &w[o * n_in..(o + 1) * n_in];
        bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }));
}

fn forward_activations(params: &PolicyParams, state: &[f64]) -> Activations {
    let mut z1 = Vec::with_capacity(params.hidden);
    affine(&params.w1, &params.b1, state, &mut z1);
    let h1: Vec<f64> = z1.iter().map(|&z| relu(z)).collect();
    let mut z2 = Vec::with_capacity(params.hidden);
    affine(&params.w2, &params.b2, &h1, &mut z2);
    let h2: Vec<f64> = z2.iter().map(|&z| relu(z)).collect();
    let mut a = Vec::with_capacity(ACTIONS);
    affine(&params.w_actor, &params.b_actor, &h2, &mut a);
    let logits = [a[0], a[1]];
    let value = params.b_critic[0]
        + params
            .w_critic
            .iter()
            .zip(&h2)
            .map(|(w, h)| w * h)
            .sum::<f64>();
    let out = Forward {
        logits,
        probs: softmax(&logits),
        value,
    };
    Activations {
        z1,
        h1,
        z2,
        h2,
        out,
    }
}

pub fn forward(params: &PolicyParams, state: &[f64]) -> Result<Forward> {
    if state.len() != params.state_dim {
        return Err(Error::DimensionMismatch {
            expected: params.state_dim,
            got: state.len(),
        });
    }
    Ok(forward_activations(params, state).out)
}

/// Forward pass over `n` states stored contiguously in `states`.
pub fn forward_many(params: &PolicyParams, states: &[f64]) -> Result<Vec<Forward>> {
    let d = params.state_dim;
    if states.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: states.len() % d,
        });
    }
    Ok(states
        .chunks_exact(d)
        .map(|s| forward_activations(params, s).out)
        .collect())
}

/// Weights of the three terms of the PPO objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoefs {
    /// Clip range epsilon.
    pub clip: f64,
    /// Value-loss weight delta.
    pub value: f64,
    /// Entropy weight rho.
    pub entropy: f64,
}

/// One transition as seen by the loss.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub state: &'a [f64],
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub value_target: f64,
}

/// A transition whose state is an index into a table of distinct states.
#[derive(Clone, Copy, Debug)]
pub struct IndexedSample {
    pub state: u32,
    pub action: u8,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub value_target: f64,
}

/// Batch means of the objective's components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    /// Clipped surrogate, to be maximized.
    pub policy: f64,
    /// Mean squared value error.
    pub value: f64,
    /// Mean policy entropy.
    pub entropy: f64,
    /// `policy - delta * value + rho * entropy`.
    pub objective: f64,
    pub mean_ratio: f64,
    /// Share of samples whose ratio left `[1 - eps, 1 + eps]`.
    pub clip_fraction: f64,
}

/// Gradient of the negated PPO objective, averaged over `batch`.
///
/// Samples that share a state bit-for-bit are pushed through the network
/// once, with their output gradients summed.
pub fn backward(
    params: &PolicyParams,
    batch: &[Sample<'_>],
    coefs: LossCoefs,
) -> Result<(Gradients, LossReport)> {
    let d = params.state_dim;
    let mut index: HashMap<Vec<u64>, u32> = HashMap::new();
    let mut states = Vec::new();
    let mut indexed = Vec::with_capacity(batch.len());
    for s in batch {
        if s.state.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.state.len(),
            });
        }
        let key: Vec<u64> = s.state.iter().map(|x| x.to_bits()).collect();
        let next = index.len() as u32;
        let id = *index.entry(key).or_insert_with(|| {
            states.extend_from_slice(s.state);
            next
        });
        indexed.push(IndexedSample {
            state: id,
            action: s.action as u8,
            old_log_prob: s.old_log_prob,
            advantage: s.advantage,
            value_target: s.value_target,
        });
    }
    backward_indexed(params, &states, &indexed, coefs)
}

/// Like [`backward`], with states given as a flat table of distinct rows.
pub fn backward_indexed(
    params: &PolicyParams,
    states: &[f64],
    batch: &[IndexedSample],
    coefs: LossCoefs,
) -> Result<(Gradients, LossReport)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(coefs.clip > 0.0) {
        return Err(Error::invalid("clip", "epsilon must be positive"));
    }
    let d = params.state_dim;
    if states.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: states.len() % d,
        });
    }
    if !states.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("states"));
    }
    let n_states = states.len() / d;
    let mut acts: Vec<Option<Activations>> = (0..n_states).map(|_| None).collect();
    let mut d_logits = vec![[0.0f64; ACTIONS]; n_states];
    let mut d_value = vec![0.0f64; n_states];

    let inv_n = 1.0 / batch.len() as f64;
    let (lo, hi) = (1.0 - coefs.clip, 1.0 + coefs.clip);
    let mut report = LossReport::default();
    let mut clipped = 0usize;

    for s in batch {
        let idx = s.state as usize;
        let a = s.action as usize;
        if idx >= n_states || a >= ACTIONS {
            return Err(Error::invalid("sample", "state index or action out of range"));
        }
        if !(s.old_log_prob.is_finite() && s.advantage.is_finite() && s.value_target.is_finite())
        {
            return Err(Error::NonFinite("batch sample"));
        }
        let out = acts[idx]
            .get_or_insert_with(|| forward_activations(params, &states[idx * d..(idx + 1) * d]))
            .out;
        let logp = log_softmax(&out.logits);
        let ratio = (logp[a] - s.old_log_prob).exp();
        let adv = s.advantage;
        let unclipped = ratio * adv;
        let clipped_term = ratio.clamp(lo, hi) * adv;
        // d(surrogate)/d(log pi(a)); zero where the clipped branch is active
        let g_logp = if unclipped <= clipped_term {
            unclipped
        } else {
            0.0
        };
        if ratio < lo || ratio > hi {
            clipped += 1;
        }
        let entropy = -(0..ACTIONS).map(|k| out.probs[k] * logp[k]).sum::<f64>();
        let v_err = out.value - s.value_target;

        report.policy += unclipped.min(clipped_term);
        report.value += v_err * v_err;
        report.entropy += entropy;
        report.mean_ratio += ratio;

        // Descent on -(objective): signs flipped relative to ascent.
        let dl = &mut d_logits[idx];
        for k in 0..ACTIONS {
            let onehot = if k == a { 1.0 } else { 0.0 };
            let d_surr = g_logp * (onehot - out.probs[k]);
            let d_ent = -out.probs[k] * (logp[k] + entropy);
            dl[k] -= inv_n * (d_surr + coefs.entropy * d_ent);
        }
        d_value[idx] += inv_n * coefs.value * 2.0 * v_err;
    }

    report.policy *= inv_n;
    report.value *= inv_n;
    report.entropy *= inv_n;
    report.mean_ratio *= inv_n;
    report.clip_fraction = clipped as f64 * inv_n;
    report.objective = report.policy - coefs.value * report.value + coefs.entropy * report.entropy;
    if !(report.objective.is_finite() && report.mean_ratio.is_finite()) {
        return Err(Error::NonFinite("loss"));
    }

    let mut grads = PolicyParams::zeros(d, params.hidden);
    let h = params.hidden;
    let mut dh2 = vec![0.0; h];
    let mut dz2 = vec![0.0; h];
    let mut dz1 = vec![0.0; h];
    for (idx, act) in acts.iter().enumerate() {
        let Some(act) = act else { continue };
        let x = &states[idx * d..(idx + 1) * d];
        let dl = d_logits[idx];
        let dv = d_value[idx];

        for k in 0..ACTIONS {
            grads.b_actor[k] += dl[k];
            let row = &mut grads.w_actor[k * h..(k + 1) * h];
            for (g, &hj) in row.iter_mut().zip(&act.h2) {
                *g += dl[k] * hj;
            }
        }
        grads.b_critic[0] += dv;
        for (g, &hj) in grads.w_critic.iter_mut().zip(&act.h2) {
            *g += dv * hj;
        }

        for j in 0..h {
            dh2[j] = params.w_critic[j] * dv
                + (0..ACTIONS)
                    .map(|k| params.w_actor[k * h + j] * dl[k])
                    .sum::<f64>();
            dz2[j] = if act.z2[j] > 0.0 { dh2[j] } else { 0.0 };
        }
        dz1.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..h {
            let g = dz2[j];
            if g == 0.0 {
                continue;
            }
            grads.b2[j] += g;
            let w_row = &params.w2[j * h..(j + 1) * h];
            let g_row = &mut grads.w2[j * h..(j + 1) * h];
            for i in 0..h {
                g_row[i] += g * act.h1[i];
                dz1[i] += w_row[i] * g;
            }
        }
        for i in 0..h {
            let g = if act.z1[i] > 0.0 { dz1[i] } else { 0.0 };
            if g == 0.0 {
                continue;
            }
            grads.b1[i] += g;
            for (gw, &xm) in grads.w1[i * d..(i + 1) * d].iter_mut().zip(x) {
                *gw += g * xm;
            }
        }
    }
    Ok((grads, report))
}

/// Value of the PPO objective on `batch`, without gradients.
pub fn objective(params: &PolicyParams, batch: &[Sample<'_>], coefs: LossCoefs) -> Result<LossReport> {
    backward(params, batch, coefs).map(|(_, r)| r)
}
