//! Production routines against slow reference implementations written here
//! from the definitions.

use pgg_act_core::game::{cumulative_payoffs, group_payoffs};
use pgg_act_core::nn::{backward, LossCoefs, PolicyParams, Sample};
use pgg_act_core::ppo::compute_gae;
use pgg_act_core::{Lattice, StrategyField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------- payoffs ----------

/// Exact payoffs as rationals `numer / 20` for `r = quarters / 4`, by
/// listing each agent's five groups from grid coordinates.
fn reference_payoffs(bits: &[u8], side: usize, quarters: i64) -> Vec<f64> {
    let cell = |r: isize, c: isize| {
        let s = side as isize;
        (r.rem_euclid(s) * s + c.rem_euclid(s)) as usize
    };
    let group = |r: isize, c: isize| [cell(r, c), cell(r - 1, c), cell(r + 1, c), cell(r, c - 1), cell(r, c + 1)];
    (0..side * side)
        .map(|i| {
            let (r, c) = ((i / side) as isize, (i % side) as isize);
            // Agent i belongs to the groups centered on itself and its neighbors.
            let centers = [(r, c), (r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)];
            let numer: i64 = centers
                .iter()
                .map(|&(gr, gc)| {
                    let n_c: i64 = group(gr, gc).iter().map(|&m| bits[m] as i64).sum();
                    quarters * n_c - 20 * bits[i] as i64
                })
                .sum();
            numer as f64 / 20.0
        })
        .collect()
}

#[test]
fn payoffs_match_group_enumeration_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for side in [3usize, 4, 5] {
        let lat = Lattice::new(side).unwrap();
        for _ in 0..200 {
            let bits: Vec<u8> = (0..side * side).map(|_| rng.gen_range(0..2)).collect();
            let quarters = rng.gen_range(5..=24);
            let field = StrategyField::from_bits(&bits).unwrap();
            let got = cumulative_payoffs(&field, &lat, quarters as f64 / 4.0).unwrap();
            assert_eq!(got.as_slice(), reference_payoffs(&bits, side, quarters).as_slice());
        }
    }
}

/// Correctly rounded sum: exact fixed-point accumulation, one final rounding.
fn rounded_exact_sum(xs: &[f64]) -> f64 {
    let scale = 2f64.powi(60);
    let total: i128 = xs
        .iter()
        .map(|&x| {
            let y = x * scale;
            assert_eq!(y.fract(), 0.0, "{x} has bits below 2^-60");
            y as i128
        })
        .sum();
    total as f64 / scale
}

#[test]
fn group_payoffs_conserve_total() {
    for pattern in 0u8..32 {
        let bits: Vec<u8> = (0..5).map(|k| (pattern >> k) & 1).collect();
        let n_c = bits.iter().filter(|&&b| b == 1).count() as f64;
        let field = StrategyField::from_bits(&bits).unwrap();
        for r in [2.0, 3.0, 4.0, 5.0, 6.0] {
            let pay = group_payoffs(&field, &[0, 1, 2, 3, 4], r).unwrap();
            assert_eq!(rounded_exact_sum(&pay), n_c * (r - 1.0), "pattern {pattern:05b} r={r}");
        }
    }
}

// ---------- GAE ----------

fn gae_by_definition(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut v = values.to_vec();
    v.push(bootstrap);
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            let mut weight = 1.0;
            for l in 0..n - t {
                let psi = rewards[t + l] + gamma * v[t + l + 1] - v[t + l];
                total += weight * psi;
                weight *= gamma * lambda;
            }
            total
        })
        .collect()
}

#[test]
fn gae_matches_double_sum() {
    let grid = [0.0, 0.5, 0.95, 0.99];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let n = rng.gen_range(1..=8);
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..20.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let boot = rng.gen_range(-10.0..10.0);
        for gamma in grid {
            for lambda in grid {
                let (adv, targets) = compute_gae(&rewards, &values, boot, gamma, lambda).unwrap();
                let want = gae_by_definition(&rewards, &values, boot, gamma, lambda);
                for t in 0..n {
                    assert!((adv[t] - want[t]).abs() <= 1e-12, "{} vs {}", adv[t], want[t]);
                    assert_eq!(targets[t], adv[t] + values[t]);
                }
            }
        }
    }
}

// ---------- gradients ----------

/// Straightforward forward pass on the documented layout.
fn reference_forward(p: &PolicyParams, x: &[f64]) -> ([f64; 2], f64) {
    let h = p.hidden();
    let d = p.state_dim();
    let h1: Vec<f64> = (0..h)
        .map(|o| (p.b1[o] + (0..d).map(|i| p.w1[o * d + i] * x[i]).sum::<f64>()).max(0.0))
        .collect();
    let h2: Vec<f64> = (0..h)
        .map(|o| (p.b2[o] + (0..h).map(|i| p.w2[o * h + i] * h1[i]).sum::<f64>()).max(0.0))
        .collect();
    let logit = |k: usize| p.b_actor[k] + (0..h).map(|i| p.w_actor[k * h + i] * h2[i]).sum::<f64>();
    let value = p.b_critic[0] + (0..h).map(|i| p.w_critic[i] * h2[i]).sum::<f64>();
    ([logit(0), logit(1)], value)
}

fn pre_activations(p: &PolicyParams, x: &[f64]) -> Vec<f64> {
    let h = p.hidden();
    let d = p.state_dim();
    let z1: Vec<f64> = (0..h)
        .map(|o| p.b1[o] + (0..d).map(|i| p.w1[o * d + i] * x[i]).sum::<f64>())
        .collect();
    let z2: Vec<f64> = (0..h)
        .map(|o| p.b2[o] + (0..h).map(|i| p.w2[o * h + i] * z1[i].max(0.0)).sum::<f64>())
        .collect();
    z1.into_iter().chain(z2).collect()
}

struct Batch {
    states: Vec<Vec<f64>>,
    actions: Vec<usize>,
    old_logp: Vec<f64>,
    adv: Vec<f64>,
    target: Vec<f64>,
}

/// Negated PPO objective: -(clip surrogate - c_v * MSE + c_e * entropy).
fn reference_loss(p: &PolicyParams, b: &Batch, c: LossCoefs) -> f64 {
    let n = b.states.len() as f64;
    let mut total = 0.0;
    for i in 0..b.states.len() {
        let (z, v) = reference_forward(p, &b.states[i]);
        let m = z[0].max(z[1]);
        let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
        let logp = [z[0] - lse, z[1] - lse];
        let ratio = (logp[b.actions[i]] - b.old_logp[i]).exp();
        let surr = (ratio * b.adv[i]).min(ratio.clamp(1.0 - c.clip, 1.0 + c.clip) * b.adv[i]);
        let ent = -(logp[0].exp() * logp[0] + logp[1].exp() * logp[1]);
        total += surr - c.value * (v - b.target[i]).powi(2) + c.entropy * ent;
    }
    -total / n
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let coefs = LossCoefs {
        clip: 0.2,
        value: 0.5,
        entropy: 0.01,
    };
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut clipped, mut unclipped, mut pos, mut neg) = (0, 0, 0, 0);
    for _ in 0..24 {
        let params = PolicyParams::init(3, 5, &mut rng).unwrap();
        let mut b = Batch {
            states: vec![],
            actions: vec![],
            old_logp: vec![],
            adv: vec![],
            target: vec![],
        };
        while b.states.len() < 12 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if pre_activations(&params, &x).iter().any(|z| z.abs() < 1e-3) {
                continue;
            }
            let ratio: f64 = rng.gen_range(0.6..1.4);
            if (ratio - 0.8).abs() < 1e-3 || (ratio - 1.2).abs() < 1e-3 {
                continue;
            }
            let a = rng.gen_range(0..2);
            let (z, _) = reference_forward(&params, &x);
            let m = z[0].max(z[1]);
            let logp = z[a] - m - ((z[0] - m).exp() + (z[1] - m).exp()).ln();
            let adv = if rng.gen() { rng.gen_range(0.2..2.0) } else { -rng.gen_range(0.2..2.0) };
            if adv > 0.0 { pos += 1 } else { neg += 1 }
            if (adv > 0.0 && ratio > 1.2) || (adv < 0.0 && ratio < 0.8) {
                clipped += 1;
            } else {
                unclipped += 1;
            }
            b.states.push(x);
            b.actions.push(a);
            b.old_logp.push(logp - ratio.ln());
            b.adv.push(adv);
            b.target.push(rng.gen_range(-2.0..2.0));
        }
        let samples: Vec<Sample> = (0..b.states.len())
            .map(|i| Sample {
                state: &b.states[i],
                action: b.actions[i],
                old_log_prob: b.old_logp[i],
                advantage: b.adv[i],
                value_target: b.target[i],
            })
            .collect();
        let (grads, _) = backward(&params, &samples, coefs).unwrap();
        let analytic = grads.flat();
        let theta = params.flat();
        let mut p = params.clone();
        for k in 0..theta.len() {
            let mut t = theta.clone();
            t[k] += h;
            p.set_flat(&t).unwrap();
            let up = reference_loss(&p, &b, coefs);
            t[k] = theta[k] - h;
            p.set_flat(&t).unwrap();
            let down = reference_loss(&p, &b, coefs);
            let fd = (up - down) / (2.0 * h);
            let rel = (analytic[k] - fd).abs() / analytic[k].abs().max(fd.abs()).max(1e-6);
            assert!(rel <= 1e-4, "param {k}: analytic {} fd {fd} rel {rel}", analytic[k]);
        }
    }
    assert!(clipped > 0 && unclipped > 0 && pos > 0 && neg > 0);
}
