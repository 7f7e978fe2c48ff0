//! Runtime self-checks behind the `verify` command.
//!
//! Each check compares a production routine with a slow, independent
//! computation of the same quantity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::game::{cumulative_payoffs, group_payoffs, Strategy, StrategyField};
use crate::lattice::{Lattice, G};
use crate::nn::{backward, forward, LossCoefs, PolicyParams, Sample};
use crate::ppo::compute_gae;
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Correctly rounded sum of `xs` (Shewchuk's exact partials).
pub fn exact_sum(xs: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &x in xs {
        let mut x = x;
        let mut kept = 0;
        for i in 0..partials.len() {
            let mut y = partials[i];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    // Round the partials, most significant first, with the half-way fix-up.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Payoffs by walking every group from grid coordinates, in exact integer
/// arithmetic for `r = quarters / 4`. Returns `Pi_i` correctly rounded.
pub fn brute_force_payoffs(bits: &[u8], side: usize, quarters: i64) -> Vec<f64> {
    let n = side * side;
    let mut numer = vec![0i64; n];
    let at = |row: usize, col: usize| (row % side) * side + col % side;
    for row in 0..side {
        for col in 0..side {
            let members = [
                at(row, col),
                at(row + side - 1, col),
                at(row + 1, col),
                at(row, col + side - 1),
                at(row, col + 1),
            ];
            let n_c: i64 = members.iter().map(|&m| bits[m] as i64).sum();
            // 20 * (r n_c / 5 - s) = quarters * n_c - 20 s
            for &m in &members {
                numer[m] += quarters * n_c - 20 * bits[m] as i64;
            }
        }
    }
    numer.into_iter().map(|x| x as f64 / 20.0).collect()
}

pub fn payoff_check(seed: u64, fields_per_side: usize) -> CheckResult {
    let mut rng = stream_rng(seed, Stream::Init, 77);
    let mut mismatches = 0usize;
    let mut fields = 0usize;
    for side in [3usize, 4, 5] {
        let lat = Lattice::new(side).expect("side >= 3");
        for _ in 0..fields_per_side {
            let bits: Vec<u8> = (0..side * side).map(|_| rng.gen_range(0..2)).collect();
            let quarters: i64 = rng.gen_range(5..=24);
            let field = StrategyField::from_bits(&bits).expect("bits are 0/1");
            let got = cumulative_payoffs(&field, &lat, quarters as f64 / 4.0).expect("r > 1");
            let want = brute_force_payoffs(&bits, side, quarters);
            if got.as_slice() != want.as_slice() {
                mismatches += 1;
            }
            fields += 1;
        }
    }
    let mut bad_groups = 0usize;
    for pattern in 0u8..32 {
        let bits: Vec<u8> = (0..G).map(|k| (pattern >> k) & 1).collect();
        let field = StrategyField::from_bits(&bits).expect("bits are 0/1");
        let n_c = bits.iter().map(|&b| b as u32).sum::<u32>() as f64;
        for r in [2.0, 3.0, 4.0, 5.0, 6.0] {
            let pay = group_payoffs(&field, &[0, 1, 2, 3, 4], r).expect("r > 1");
            if exact_sum(&pay) != n_c * (r - 1.0) {
                bad_groups += 1;
            }
        }
    }
    CheckResult {
        name: "payoffs",
        passed: mismatches == 0 && bad_groups == 0,
        detail: format!(
            "{mismatches}/{fields} fields differ from brute force, {bad_groups}/160 groups break conservation"
        ),
    }
}

/// `A_t = sum_l (gamma lambda)^l psi_{t+l}` evaluated term by term.
pub fn gae_double_sum(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let t_len = rewards.len();
    let v = |t: usize| if t < t_len { values[t] } else { bootstrap };
    (0..t_len)
        .map(|t| {
            (t..t_len)
                .map(|k| {
                    let psi = rewards[k] + gamma * v(k + 1) - values[k];
                    (gamma * lambda).powi((k - t) as i32) * psi
                })
                .sum()
        })
        .collect()
}

pub fn gae_check(seed: u64, series: usize) -> CheckResult {
    let grid = [0.0, 0.5, 0.95, 0.99];
    let mut rng = stream_rng(seed, Stream::Init, 78);
    let mut worst = 0.0f64;
    for _ in 0..series {
        let len = rng.gen_range(1..=8);
        let rewards: Vec<f64> = (0..len).map(|_| rng.gen_range(-5.0..20.0)).collect();
        let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let bootstrap = rng.gen_range(-10.0..10.0);
        for &gamma in &grid {
            for &lambda in &grid {
                let (adv, _) = compute_gae(&rewards, &values, bootstrap, gamma, lambda).expect("valid");
                let want = gae_double_sum(&rewards, &values, bootstrap, gamma, lambda);
                for (a, w) in adv.iter().zip(&want) {
                    worst = worst.max((a - w).abs());
                }
            }
        }
    }
    CheckResult {
        name: "gae",
        passed: worst <= 1e-12,
        detail: format!("max |recursion - double sum| = {worst:.3e} over {series} series"),
    }
}

/// Smallest |pre-activation| over both hidden layers.
fn kink_margin(p: &PolicyParams, state: &[f64]) -> f64 {
    let h = p.hidden();
    let d = p.state_dim();
    let z1: Vec<f64> = (0..h)
        .map(|o| p.b1[o] + (0..d).map(|i| p.w1[o * d + i] * state[i]).sum::<f64>())
        .collect();
    let a1: Vec<f64> = z1.iter().map(|z| z.max(0.0)).collect();
    let z2 = (0..h).map(|o| p.b2[o] + (0..h).map(|i| p.w2[o * h + i] * a1[i]).sum::<f64>());
    z1.iter().copied().chain(z2).fold(f64::INFINITY, |m, z| m.min(z.abs()))
}

/// A random batch kept away from ReLU kinks and clip boundaries, so that
/// finite differences see a smooth objective.
pub struct GradBatch {
    pub params: PolicyParams,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

impl GradBatch {
    pub fn random(rng: &mut ChaCha8Rng, coefs: LossCoefs, size: usize) -> Self {
        let params = loop {
            let p = PolicyParams::init(3, 6, rng).expect("valid shape");
            if p.b1.iter().all(|b| b.abs() > 1e-3) {
                break p;
            }
        };
        let mut b = GradBatch {
            params,
            states: vec![],
            actions: vec![],
            old_log_probs: vec![],
            advantages: vec![],
            targets: vec![],
        };
        while b.states.len() < size {
            let state: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if kink_margin(&b.params, &state) < 1e-3 {
                continue;
            }
            let out = forward(&b.params, &state).expect("dims match");
            let action = rng.gen_range(0..2);
            let ratio: f64 = rng.gen_range(0.5..1.5);
            if (ratio - 1.0 - coefs.clip).abs() < 1e-3 || (ratio - 1.0 + coefs.clip).abs() < 1e-3 {
                continue;
            }
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            b.states.push(state);
            b.actions.push(action);
            b.old_log_probs.push(out.log_prob(action) - ratio.ln());
            b.advantages.push(sign * rng.gen_range(0.1..2.0));
            b.targets.push(rng.gen_range(-3.0..3.0));
        }
        b
    }

    pub fn samples(&self) -> Vec<Sample<'_>> {
        (0..self.states.len())
            .map(|i| Sample {
                state: &self.states[i],
                action: self.actions[i],
                old_log_prob: self.old_log_probs[i],
                advantage: self.advantages[i],
                value_target: self.targets[i],
            })
            .collect()
    }

    /// Negated objective at `params`, the quantity the gradient descends.
    pub fn loss_at(&self, params: &PolicyParams, coefs: LossCoefs) -> f64 {
        let samples = self.samples();
        -crate::nn::objective(params, &samples, coefs).expect("valid batch").objective
    }
}

/// Largest relative error between analytic and central-difference
/// gradients, `|a - f| / max(|a|, |f|, floor)`.
pub fn gradient_relative_error(batch: &GradBatch, coefs: LossCoefs, step: f64) -> f64 {
    let (grads, _) = backward(&batch.params, &batch.samples(), coefs).expect("valid batch");
    let analytic = grads.flat();
    let base = batch.params.flat();
    let mut p = batch.params.clone();
    let mut worst = 0.0f64;
    for k in 0..base.len() {
        let mut x = base.clone();
        x[k] = base[k] + step;
        p.set_flat(&x).expect("same length");
        let up = batch.loss_at(&p, coefs);
        x[k] = base[k] - step;
        p.set_flat(&x).expect("same length");
        let down = batch.loss_at(&p, coefs);
        let fd = (up - down) / (2.0 * step);
        let denom = analytic[k].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((analytic[k] - fd).abs() / denom);
    }
    worst
}

pub fn gradient_check(seed: u64, batches: usize) -> CheckResult {
    let coefs = LossCoefs {
        clip: 0.2,
        value: 0.5,
        entropy: 0.01,
    };
    let mut rng = stream_rng(seed, Stream::Weights, 79);
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let b = GradBatch::random(&mut rng, coefs, 16);
        worst = worst.max(gradient_relative_error(&b, coefs, 1e-5));
    }
    CheckResult {
        name: "gradients",
        passed: worst <= 1e-4,
        detail: format!("max relative error {worst:.3e} over {batches} batches"),
    }
}

/// Whether a sample sits on the clipped branch of the surrogate.
pub fn is_clipped(ratio: f64, advantage: f64, clip: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0 + clip) || (advantage < 0.0 && ratio < 1.0 - clip)
}

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        payoff_check(seed, 200),
        gae_check(seed, 100),
        gradient_check(seed, 20),
    ]
}

/// Every strategy on an all-defector field stays put under Fermi updates.
pub fn fermi_absorbing_check(seed: u64, side: usize, steps: u64) -> CheckResult {
    let lat = Lattice::new(side).expect("side >= 3");
    let mut field = StrategyField::uniform(lat.len(), Strategy::Defect);
    let params = crate::baselines::FermiParams::default();
    let mut changed = 0;
    for t in 0..steps {
        crate::baselines::fermi_iteration(&mut field, &lat, 4.8, &params, seed ^ t).expect("valid");
        changed += field.cooperators();
    }
    CheckResult {
        name: "fermi-absorbing",
        passed: changed == 0,
        detail: format!("{changed} strategy changes from all-defect over {steps} steps"),
    }
}
