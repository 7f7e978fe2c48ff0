//! Public goods game payoffs, strategy initialization, and snapshots.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::lattice::{Lattice, G};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Strategy {
    Defect = 0,
    Cooperate = 1,
}

impl Strategy {
    #[inline]
    pub fn is_cooperate(self) -> bool {
        self == Strategy::Cooperate
    }

    #[inline]
    pub fn from_action(action: usize) -> Self {
        if action == 1 {
            Strategy::Cooperate
        } else {
            Strategy::Defect
        }
    }

    #[inline]
    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }
}

/// How the strategy field is populated at the start of a phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// Defectors in the upper half (`ceil(L/2)` rows), cooperators below.
    HalfHalf,
    /// Each cell cooperates independently with probability `p`.
    Bernoulli(f64),
    AllDefect,
    AllCooperate,
}

impl InitScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InitScheme::Bernoulli(p) if !(0.0..=1.0).contains(&p) => {
                Err(Error::invalid("init", format!("bernoulli p={p} not in [0,1]")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitScheme::HalfHalf => write!(f, "half-half"),
            InitScheme::Bernoulli(p) => write!(f, "bernoulli:{p}"),
            InitScheme::AllDefect => write!(f, "all-defect"),
            InitScheme::AllCooperate => write!(f, "all-cooperate"),
        }
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let scheme = match s {
            "half-half" => InitScheme::HalfHalf,
            "bernoulli" => InitScheme::Bernoulli(0.5),
            "all-defect" => InitScheme::AllDefect,
            "all-cooperate" => InitScheme::AllCooperate,
            other => match other.strip_prefix("bernoulli:") {
                Some(p) => InitScheme::Bernoulli(
                    p.parse()
                        .map_err(|_| Error::invalid("init", format!("bad probability {p:?}")))?,
                ),
                None => return Err(Error::invalid("init", format!("unknown scheme {other:?}"))),
            },
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

/// Per-agent strategies at iteration `step`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StrategyField {
    strategies: Vec<Strategy>,
    pub step: u64,
}

impl StrategyField {
    pub fn new(strategies: Vec<Strategy>) -> Self {
        StrategyField {
            strategies,
            step: 0,
        }
    }

    pub fn uniform(n: usize, s: Strategy) -> Self {
        Self::new(vec![s; n])
    }

    /// Builds a field from 0/1 values; anything else is rejected.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .map(|&b| match b {
                0 => Ok(Strategy::Defect),
                1 => Ok(Strategy::Cooperate),
                _ => Err(Error::invalid("strategy", format!("value {b} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn init<R: Rng + ?Sized>(scheme: InitScheme, lat: &Lattice, rng: &mut R) -> Result<Self> {
        scheme.validate()?;
        let side = lat.side();
        let strategies = match scheme {
            InitScheme::AllDefect => vec![Strategy::Defect; lat.len()],
            InitScheme::AllCooperate => vec![Strategy::Cooperate; lat.len()],
            InitScheme::HalfHalf => {
                let defect_rows = side.div_ceil(2);
                (0..lat.len())
                    .map(|id| {
                        if id / side < defect_rows {
                            Strategy::Defect
                        } else {
                            Strategy::Cooperate
                        }
                    })
                    .collect()
            }
            InitScheme::Bernoulli(p) => (0..lat.len())
                .map(|_| {
                    if rng.gen::<f64>() < p {
                        Strategy::Cooperate
                    } else {
                        Strategy::Defect
                    }
                })
                .collect(),
        };
        Ok(Self::new(strategies))
    }

    pub fn len(&self) -> usize {
        self.strategies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }

    #[inline]
    pub fn get(&self, id: usize) -> Strategy {
        self.strategies[id]
    }

    pub fn set(&mut self, id: usize, s: Strategy) {
        self.strategies[id] = s;
    }

    pub fn as_slice(&self) -> &[Strategy] {
        &self.strategies
    }

    pub fn cooperators(&self) -> usize {
        self.strategies.iter().filter(|s| s.is_cooperate()).count()
    }

    pub fn cooperation_fraction(&self) -> f64 {
        if self.strategies.is_empty() {
            return 0.0;
        }
        self.cooperators() as f64 / self.strategies.len() as f64
    }

    pub fn is_homogeneous(&self) -> bool {
        self.strategies.windows(2).all(|w| w[0] == w[1])
    }

    /// Binary PGM (P5): one byte per cell, 255 = cooperator, 0 = defector.
    pub fn to_pgm(&self, side: usize) -> Result<Vec<u8>> {
        if side * side != self.len() {
            return Err(Error::LengthMismatch {
                what: "snapshot side^2 vs field",
                left: side * side,
                right: self.len(),
            });
        }
        let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
        out.extend(
            self.strategies
                .iter()
                .map(|s| if s.is_cooperate() { 255u8 } else { 0u8 }),
        );
        Ok(out)
    }

    pub fn write_pgm(&self, side: usize, path: &Path) -> Result<()> {
        let bytes = self.to_pgm(side)?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }
}

/// Cumulative payoff of every agent over its G groups.
#[derive(Clone, Debug, PartialEq)]
pub struct PayoffField {
    payoffs: Vec<f64>,
}

impl PayoffField {
    pub fn as_slice(&self) -> &[f64] {
        &self.payoffs
    }

    #[inline]
    pub fn get(&self, id: usize) -> f64 {
        self.payoffs[id]
    }

    pub fn len(&self) -> usize {
        self.payoffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payoffs.is_empty()
    }
}

pub(crate) fn check_r(r: f64) -> Result<()> {
    if r.is_finite() && r > 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("r", format!("enhancement factor {r} must be > 1")))
    }
}

/// Payoffs of the five members of one group, in the order given.
pub fn group_payoffs(field: &StrategyField, members: &[usize; G], r: f64) -> Result<[f64; G]> {
    check_r(r)?;
    let n_c = members.iter().filter(|&&m| field.get(m).is_cooperate()).count();
    let share = r * n_c as f64 / G as f64;
    Ok(members.map(|m| match field.get(m) {
        Strategy::Cooperate => share - 1.0,
        Strategy::Defect => share,
    }))
}

/// `Pi_i = r * S_i / G - G * s_i`, where `S_i` is the total number of
/// cooperators over the groups agent `i` plays in.
#[inline]
fn payoff_from_counts(r: f64, coop_sum: u32, s: Strategy) -> f64 {
    (r * coop_sum as f64 - (G * G) as f64 * s.as_f64()) / G as f64
}

pub fn cumulative_payoffs(field: &StrategyField, lat: &Lattice, r: f64) -> Result<PayoffField> {
    check_r(r)?;
    if field.len() != lat.len() {
        return Err(Error::LengthMismatch {
            what: "field vs lattice",
            left: field.len(),
            right: lat.len(),
        });
    }
    let group_counts: Vec<u32> = (0..lat.len())
        .map(|c| {
            lat.members_unchecked(c)
                .iter()
                .map(|&m| field.get(m) as u32)
                .sum()
        })
        .collect();
    let payoffs = (0..lat.len())
        .map(|i| {
            let coop_sum: u32 = lat.members_unchecked(i).iter().map(|&c| group_counts[c]).sum();
            payoff_from_counts(r, coop_sum, field.get(i))
        })
        .collect();
    Ok(PayoffField { payoffs })
}

/// Payoff of a single agent, computed from its 13-cell neighborhood only.
pub fn agent_payoff(field: &StrategyField, lat: &Lattice, r: f64, agent: usize) -> f64 {
    let coop_sum: u32 = lat
        .members_unchecked(agent)
        .iter()
        .map(|&c| {
            lat.members_unchecked(c)
                .iter()
                .map(|&m| field.get(m) as u32)
                .sum::<u32>()
        })
        .sum();
    payoff_from_counts(r, coop_sum, field.get(agent))
}
