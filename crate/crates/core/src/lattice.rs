//! Periodic square lattice with von Neumann neighborhoods.
//!
//! Agents are indexed row-major (`id = row * L + col`). Neighbor order is
//! always (up, down, left, right), and the group centered at agent `i` is
//! `[i, up, down, left, right]`.

use crate::error::{Error, Result};

/// Neighbors per agent.
pub const K: usize = 4;
/// Groups each agent belongs to, and members per group.
pub const G: usize = K + 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lattice {
    side: usize,
    neighbors: Vec<[usize; K]>,
}

impl Lattice {
    pub fn new(side: usize) -> Result<Self> {
        if side < 3 {
            return Err(Error::LatticeTooSmall(side));
        }
        let n = side * side;
        let neighbors = (0..n)
            .map(|id| {
                let (row, col) = (id / side, id % side);
                let up = (row + side - 1) % side;
                let down = (row + 1) % side;
                let left = (col + side - 1) % side;
                let right = (col + 1) % side;
                [
                    up * side + col,
                    down * side + col,
                    row * side + left,
                    row * side + right,
                ]
            })
            .collect();
        Ok(Lattice { side, neighbors })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn id(&self, row: usize, col: usize) -> usize {
        (row % self.side) * self.side + col % self.side
    }

    pub fn coords(&self, id: usize) -> (usize, usize) {
        (id / self.side, id % self.side)
    }

    #[inline]
    pub fn neighbors(&self, id: usize) -> &[usize; K] {
        &self.neighbors[id]
    }

    /// Members of the group centered at `center`: the center, then its
    /// neighbors in (up, down, left, right) order.
    pub fn group_members(&self, center: usize) -> Result<[usize; G]> {
        if center >= self.len() {
            return Err(Error::AgentOutOfRange {
                id: center,
                n: self.len(),
            });
        }
        Ok(self.members_unchecked(center))
    }

    #[inline]
    pub(crate) fn members_unchecked(&self, center: usize) -> [usize; G] {
        let [u, d, l, r] = self.neighbors[center];
        [center, u, d, l, r]
    }

    /// Centers of the G groups `agent` plays in: its own, then its
    /// neighbors'. On a von Neumann lattice this equals `group_members`.
    pub fn groups_of(&self, agent: usize) -> Result<[usize; G]> {
        self.group_members(agent)
    }
}
