//! Frame sampling, frame-set permutation and the causal online shift.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use num_rational::Ratio;

use crate::error::{config_err, precondition_err, Result};
use crate::tensor::Tensor;

/// Number of frame-sets the permutation is defined for.
pub const PLAN_SETS: usize = 8;

/// Processing order of the eight frame-sets: two interleaved groups whose
/// members stay in temporal order and contain strides 3, 2 and 1.
pub const PLAN_ORDER: [usize; PLAN_SETS] = [0, 3, 5, 6, 1, 2, 4, 7];

/// `l` evenly spaced frame indices, each at the centre of its segment:
/// `floor((i + 0.5) * video_length / l)`. Duplicates appear when the video is
/// shorter than `l`.
pub fn sample_frames(video_length: usize, l: usize) -> Vec<usize> {
    assert!(video_length >= 1 && l >= 1, "sample_frames needs positive lengths");
    (0..l).map(|i| ((2 * i + 1) * video_length) / (2 * l)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationPlan {
    pub n_sets: usize,
    pub set_size: usize,
    /// `order[p]` is the frame-set processed at plan position `p`.
    pub order: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
}

impl PermutationPlan {
    /// The eight-set permutation with two sequential groups.
    pub fn permuted(set_size: usize) -> Self {
        assert!(set_size >= 1);
        Self {
            n_sets: PLAN_SETS,
            set_size,
            order: PLAN_ORDER.to_vec(),
            groups: vec![PLAN_ORDER[..4].to_vec(), PLAN_ORDER[4..].to_vec()],
        }
    }

    /// Frame-sets in temporal order, one group.
    pub fn identity(n_sets: usize, set_size: usize) -> Self {
        assert!(n_sets >= 1 && set_size >= 1);
        Self { n_sets, set_size, order: (0..n_sets).collect(), groups: vec![(0..n_sets).collect()] }
    }

    pub fn frames_needed(&self) -> usize {
        self.n_sets * self.set_size
    }

    /// `inverse[s]` is the plan position of frame-set `s`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.n_sets];
        for (pos, &s) in self.order.iter().enumerate() {
            inv[s] = pos;
        }
        inv
    }

    /// Splits `frames` into consecutive sets of `set_size` and returns them in
    /// plan order.
    pub fn apply(&self, frames: Vec<Tensor>) -> Result<Vec<FrameSet>> {
        if frames.len() != self.frames_needed() {
            return Err(config_err!(
                "plan expects {} frames ({} sets of {}), got {}",
                self.frames_needed(),
                self.n_sets,
                self.set_size,
                frames.len()
            ));
        }
        let e = self.set_size;
        let mut sets: Vec<Option<FrameSet>> = Vec::with_capacity(self.n_sets);
        let mut it = frames.into_iter();
        for i in 0..self.n_sets {
            sets.push(Some(FrameSet {
                set_index: i,
                frames: it.by_ref().take(e).collect(),
                source_positions: (i * e..(i + 1) * e).collect(),
            }));
        }
        Ok(self.order.iter().map(|&s| sets[s].take().expect("order is a permutation")).collect())
    }

    /// Undoes [`apply`](Self::apply): frames back in their original order.
    pub fn restore(&self, sets: Vec<FrameSet>) -> Vec<Tensor> {
        let mut by_index: Vec<Option<FrameSet>> = (0..self.n_sets).map(|_| None).collect();
        for s in sets {
            let i = s.set_index;
            by_index[i] = Some(s);
        }
        by_index.into_iter().flat_map(|s| s.expect("missing frame-set").frames).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub set_index: usize,
    pub frames: Vec<Tensor>,
    /// Positions of the frames within the sampled sequence.
    pub source_positions: Vec<usize>,
}

/// Groups `l = 8 E` sampled frames into eight sets and reorders them by
/// [`PLAN_ORDER`].
pub fn permute(frames: Vec<Tensor>, set_size: usize) -> Result<Vec<FrameSet>> {
    if set_size == 0 || !frames.len().is_multiple_of(PLAN_SETS) || frames.len() / PLAN_SETS != set_size {
        return Err(config_err!(
            "frame permutation needs exactly {} x {} frames, got {}",
            PLAN_SETS,
            set_size,
            frames.len()
        ));
    }
    PermutationPlan::permuted(set_size).apply(frames)
}

/// Fraction of the `n` sampled positions spanned by `prefix`:
/// `(max - min + 1) / n`.
pub fn temporal_coverage(prefix: &[usize], n: usize) -> Result<Ratio<usize>> {
    let (lo, hi) = match (prefix.iter().min(), prefix.iter().max()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => return Err(precondition_err!("temporal coverage of an empty prefix")),
    };
    if n == 0 || hi >= n {
        return Err(precondition_err!("prefix index {hi} outside 0..{n}"));
    }
    Ok(Ratio::new(hi - lo + 1, n))
}

/// Consecutive differences of an ascending group, sorted (a multiset).
pub fn strides_of_group(group: &[usize]) -> Vec<usize> {
    let mut s: Vec<usize> = group.windows(2).map(|w| w[1] - w[0]).collect();
    s.sort_unstable();
    s
}

/// Forward-only channel shift between consecutive frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftSpec {
    pub fraction: Ratio<usize>,
    pub enabled_blocks: BTreeSet<usize>,
}

impl ShiftSpec {
    pub fn disabled() -> Self {
        Self { fraction: Ratio::from_integer(0), enabled_blocks: BTreeSet::new() }
    }

    /// Shift `fraction` of the channels after every block in `0..n_blocks`.
    pub fn all_blocks(fraction: Ratio<usize>, n_blocks: usize) -> Self {
        Self { fraction, enabled_blocks: (0..n_blocks).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fraction >= Ratio::from_integer(1) {
            return Err(config_err!("shift fraction {} must be below 1", self.fraction));
        }
        Ok(())
    }

    /// Number of channels taken from the previous frame: `floor(fraction C)`.
    pub fn shifted_channels(&self, channels: usize) -> usize {
        (self.fraction * channels).to_integer()
    }

    /// Whether the shift is active after block `m`.
    pub fn is_active(&self, m: usize) -> bool {
        *self.fraction.numer() != 0 && self.enabled_blocks.contains(&m)
    }
}

/// Output takes its first `floor(fraction C)` channels from `prev` (zeros
/// when there is no previous frame) and the rest from `cur`.
pub fn online_shift(prev: Option<&Tensor>, cur: &Tensor, spec: &ShiftSpec) -> Result<Tensor> {
    let (c, h, w) = cur.chw()?;
    shift_channels(prev, cur, spec.shifted_channels(c).min(c) * h * w)
}

pub(crate) fn shift_channels(prev: Option<&Tensor>, cur: &Tensor, split: usize) -> Result<Tensor> {
    if let Some(p) = prev {
        if p.shape() != cur.shape() {
            return Err(config_err!(
                "online shift shape mismatch: previous {:?}, current {:?}",
                p.shape(),
                cur.shape()
            ));
        }
    }
    let mut out = cur.clone();
    match prev {
        Some(p) => out.data_mut()[..split].copy_from_slice(&p.data()[..split]),
        None => out.data_mut()[..split].iter_mut().for_each(|v| *v = 0.0),
    }
    Ok(out)
}

/// Backward of [`online_shift`]: returns `(grad_prev, grad_cur)`. The
/// gradient for `prev` is non-zero only on the shifted channels.
pub fn online_shift_backward(grad_out: &Tensor, spec: &ShiftSpec) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = grad_out.chw()?;
    let split = spec.shifted_channels(c).min(c) * h * w;
    let mut grad_prev = Tensor::zeros(grad_out.shape());
    let mut grad_cur = grad_out.clone();
    grad_prev.data_mut()[..split].copy_from_slice(&grad_out.data()[..split]);
    grad_cur.data_mut()[..split].iter_mut().for_each(|v| *v = 0.0);
    Ok((grad_prev, grad_cur))
}
