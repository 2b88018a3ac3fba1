//! The (frame-set × block) lattice, its checkpoints and static cost table.
//!
//! Node `(n, m)` is block `m` applied to the frames of the frame-set at plan
//! position `n`. It depends on `(n, m - 1)` and, when the online shift is
//! active after block `m`, on `(n - 1, m)`. The head at checkpoint
//! `(i_k, j_k)` averages the block-`j_k` features of every frame-set
//! `0..=i_k`.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_rational::Ratio;

use crate::error::{config_err, Error, Result};
use crate::temporal::{ShiftSpec, PLAN_SETS};
use crate::tensor::{ConvBlockSpec, HeadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RouteKind {
    /// Every frame-set enters up front; checkpoints differ only in depth.
    DepthWise,
    /// Full depth per step; checkpoints differ only in frame-sets consumed.
    InputWise,
    /// Checkpoints move along both axes.
    Joint,
}

impl RouteKind {
    pub fn name(self) -> &'static str {
        match self {
            RouteKind::DepthWise => "depth",
            RouteKind::InputWise => "input",
            RouteKind::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "depth" | "depthwise" | "depth-wise" => Some(RouteKind::DepthWise),
            "input" | "inputwise" | "input-wise" => Some(RouteKind::InputWise),
            "joint" => Some(RouteKind::Joint),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointGrid {
    /// N: frame-sets (rows of the lattice in plan order).
    pub n_sets: usize,
    /// E: frames per set; every block runs once per frame.
    pub set_size: usize,
    /// `(C, H, W)` of one input frame.
    pub input: (usize, usize, usize),
    pub block_specs: Vec<ConvBlockSpec>,
    pub shift: ShiftSpec,
    /// `(i_k, j_k)`: frame-set and block index of each checkpoint.
    pub checkpoints: Vec<(usize, usize)>,
    pub heads: Vec<HeadSpec>,
    pub route_kind: RouteKind,
}

/// One violated grid invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GridViolation {
    EmptyLattice,
    Block { index: usize, reason: String },
    NoCheckpoints,
    HeadCount { heads: usize, checkpoints: usize },
    CheckpointOutOfRange { k: usize, at: (usize, usize) },
    SetsNotMonotone { k: usize },
    BlocksNotMonotone { k: usize },
    FinalNotFull { at: (usize, usize) },
    Route { k: usize, kind: RouteKind },
    HeadFeatures { k: usize, expected: usize, got: usize },
    HeadClasses { k: usize, reason: String },
    Shift(String),
}

impl fmt::Display for GridViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use GridViolation::*;
        match self {
            EmptyLattice => write!(f, "lattice needs at least one frame-set, one frame and one block"),
            Block { index, reason } => write!(f, "block {index}: {reason}"),
            NoCheckpoints => write!(f, "no checkpoints"),
            HeadCount { heads, checkpoints } => write!(f, "{heads} heads for {checkpoints} checkpoints"),
            CheckpointOutOfRange { k, at } => write!(f, "checkpoint {k} at {at:?} is outside the lattice"),
            SetsNotMonotone { k } => write!(f, "checkpoint {k}: frame-set index i_k not monotone"),
            BlocksNotMonotone { k } => write!(f, "checkpoint {k}: block index j_k not monotone"),
            FinalNotFull { at } => write!(
                f,
                "final checkpoint {at:?} must consume all frame-sets at the last block"
            ),
            Route { k, kind } => write!(f, "checkpoint {k} inconsistent with {} route", kind.name()),
            HeadFeatures { k, expected, got } => {
                write!(f, "head {k}: feature_dim {got}, block output has {expected} channels")
            }
            HeadClasses { k, reason } => write!(f, "head {k}: {reason}"),
            Shift(reason) => write!(f, "shift: {reason}"),
        }
    }
}

impl CheckpointGrid {
    pub fn n_blocks(&self) -> usize {
        self.block_specs.len()
    }

    pub fn n_checkpoints(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn num_classes(&self) -> usize {
        self.heads.first().map_or(0, |h| h.num_classes)
    }

    /// Every violated invariant; empty when the grid is valid.
    pub fn violations(&self) -> Vec<GridViolation> {
        use GridViolation::*;
        let mut out = Vec::new();
        let (n, m) = (self.n_sets, self.n_blocks());
        if n == 0 || m == 0 || self.set_size == 0 {
            out.push(EmptyLattice);
        }

        let (mut c, mut h, mut w) = self.input;
        for (index, b) in self.block_specs.iter().enumerate() {
            if b.in_channels != c {
                out.push(Block {
                    index,
                    reason: alloc::format!("in_channels {} but incoming features have {c}", b.in_channels),
                });
            }
            match b.output_dims(h, w) {
                Ok((oh, ow)) => {
                    h = oh;
                    w = ow;
                }
                Err(e) => {
                    out.push(Block { index, reason: alloc::format!("{e}") });
                    break;
                }
            }
            c = b.out_channels;
        }

        if self.checkpoints.is_empty() {
            out.push(NoCheckpoints);
        }
        if self.heads.len() != self.checkpoints.len() {
            out.push(HeadCount { heads: self.heads.len(), checkpoints: self.checkpoints.len() });
        }
        for (k, &(i, j)) in self.checkpoints.iter().enumerate() {
            if i >= n || j >= m {
                out.push(CheckpointOutOfRange { k, at: (i, j) });
            }
            if k > 0 {
                let (pi, pj) = self.checkpoints[k - 1];
                if i < pi {
                    out.push(SetsNotMonotone { k });
                }
                if j < pj {
                    out.push(BlocksNotMonotone { k });
                }
            }
            let route_ok = match self.route_kind {
                RouteKind::DepthWise => i + 1 == n,
                RouteKind::InputWise => j + 1 == m,
                RouteKind::Joint => true,
            };
            if !route_ok {
                out.push(Route { k, kind: self.route_kind });
            }
            if let (Some(head), Some(block)) = (self.heads.get(k), self.block_specs.get(j)) {
                if head.feature_dim != block.out_channels {
                    out.push(HeadFeatures { k, expected: block.out_channels, got: head.feature_dim });
                }
            }
        }
        if let Some(&last) = self.checkpoints.last() {
            if n > 0 && m > 0 && last != (n - 1, m - 1) {
                out.push(FinalNotFull { at: last });
            }
        }
        let classes = self.num_classes();
        for (k, head) in self.heads.iter().enumerate() {
            if let Err(e) = head.validate() {
                out.push(HeadClasses { k, reason: alloc::format!("{e}") });
            } else if head.num_classes != classes {
                out.push(HeadClasses {
                    k,
                    reason: alloc::format!("{} classes, head 0 has {classes}", head.num_classes),
                });
            }
        }
        if let Err(e) = self.shift.validate() {
            out.push(Shift(alloc::format!("{e}")));
        }
        if let Some(&b) = self.shift.enabled_blocks.iter().find(|&&b| b >= m) {
            out.push(Shift(alloc::format!("enabled block {b} outside 0..{m}")));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            return Ok(());
        }
        let msg = v.iter().map(|x| alloc::format!("{x}")).collect::<Vec<_>>().join("; ");
        Err(Error::Config(msg))
    }

    /// Input and output `(C, H, W)` of every block.
    pub fn block_shapes(&self) -> Result<Vec<((usize, usize, usize), (usize, usize, usize))>> {
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.n_blocks());
        for b in &self.block_specs {
            let (oh, ow) = b.output_dims(shape.1, shape.2)?;
            let next = (b.out_channels, oh, ow);
            out.push((shape, next));
            shape = next;
        }
        Ok(out)
    }

    /// Dependency closure of the head at checkpoint `k`.
    pub fn nodes_required(&self, k: usize) -> Result<BTreeSet<(usize, usize)>> {
        let &(i, j) = self
            .checkpoints
            .get(k)
            .ok_or_else(|| config_err!("checkpoint {k} out of range 0..{}", self.checkpoints.len()))?;
        let mut seen = BTreeSet::new();
        let mut stack: Vec<(usize, usize)> = (0..=i).map(|n| (n, j)).collect();
        while let Some(node) = stack.pop() {
            if !seen.insert(node) {
                continue;
            }
            let (n, m) = node;
            if m > 0 {
                stack.push((n, m - 1));
            }
            if n > 0 && self.shift.is_active(m) {
                stack.push((n - 1, m));
            }
        }
        Ok(seen)
    }

    /// FLOPs of one lattice node: `2 k_h k_w C_in C_out H' W'` per frame.
    pub fn node_flops(&self) -> Result<Vec<u64>> {
        let shapes = self.block_shapes()?;
        Ok(self
            .block_specs
            .iter()
            .zip(&shapes)
            .map(|(b, (_, (_, oh, ow)))| {
                2 * (b.kernel.0 * b.kernel.1 * b.in_channels * b.out_channels * oh * ow * self.set_size) as u64
            })
            .collect())
    }

    /// `G_k`: cost of exiting at checkpoint `k`, i.e. every node in the
    /// closure of checkpoints `0..=k` plus every head evaluated on the way.
    pub fn flops_table(&self) -> Result<Vec<u64>> {
        let node_cost = self.node_flops()?;
        let mut done = BTreeSet::new();
        let mut total = 0u64;
        let mut table = Vec::with_capacity(self.n_checkpoints());
        for k in 0..self.n_checkpoints() {
            for node in self.nodes_required(k)? {
                if done.insert(node) {
                    total += node_cost[node.1];
                }
            }
            total += self.heads[k].flops();
            table.push(total);
        }
        Ok(table)
    }
}

/// Default desk-scale backbone: five 3×3 blocks over a `channels`-plane
/// input.
pub fn default_blocks(channels: usize) -> Vec<ConvBlockSpec> {
    vec![
        ConvBlockSpec::square(channels, 8, 3, 2),
        ConvBlockSpec::square(8, 8, 3, 2),
        ConvBlockSpec::square(8, 16, 3, 1),
        ConvBlockSpec::square(16, 16, 3, 2),
        ConvBlockSpec::square(16, 16, 3, 1),
    ]
}

/// Default checkpoint placement for an `n_sets × n_blocks` lattice.
///
/// For the 8 × 5 joint lattice this is a six-point staircase whose fifth
/// checkpoint closes the first permutation group at full depth.
pub fn default_checkpoints(route: RouteKind, n_sets: usize, n_blocks: usize) -> Vec<(usize, usize)> {
    let (ln, lm) = (n_sets - 1, n_blocks - 1);
    match route {
        RouteKind::DepthWise => (0..n_blocks).map(|j| (ln, j)).collect(),
        RouteKind::InputWise => {
            let step = if n_sets >= 4 { 2 } else { 1 };
            let mut v: Vec<(usize, usize)> = (0..n_sets).rev().step_by(step).map(|i| (i, lm)).collect();
            v.reverse();
            v
        }
        RouteKind::Joint if n_sets == PLAN_SETS && n_blocks == 5 => {
            vec![(0, 1), (1, 2), (2, 3), (3, 3), (3, 4), (7, 4)]
        }
        RouteKind::Joint => {
            // Diagonal staircase towards the full corner.
            let steps = n_sets.max(n_blocks);
            let mut v: Vec<(usize, usize)> = (0..steps)
                .map(|s| (s * ln / (steps - 1).max(1), s * lm / (steps - 1).max(1)))
                .collect();
            v.dedup();
            v
        }
    }
}

/// Desk-scale grid builder used by the harness and tests.
pub fn build_grid(
    route: RouteKind,
    input: (usize, usize, usize),
    set_size: usize,
    blocks: Vec<ConvBlockSpec>,
    checkpoints: Option<Vec<(usize, usize)>>,
    shift_fraction: Ratio<usize>,
    num_classes: usize,
) -> Result<CheckpointGrid> {
    let n_blocks = blocks.len();
    if n_blocks == 0 {
        return Err(config_err!("no blocks"));
    }
    let checkpoints = checkpoints.unwrap_or_else(|| default_checkpoints(route, PLAN_SETS, n_blocks));
    let heads = checkpoints
        .iter()
        .map(|&(_, j)| HeadSpec { feature_dim: blocks.get(j).map_or(0, |b| b.out_channels), num_classes })
        .collect();
    let grid = CheckpointGrid {
        n_sets: PLAN_SETS,
        set_size,
        input,
        block_specs: blocks,
        shift: ShiftSpec::all_blocks(shift_fraction, n_blocks),
        checkpoints,
        heads,
        route_kind: route,
    };
    grid.validate()?;
    Ok(grid)
}
