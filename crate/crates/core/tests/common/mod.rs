#![allow(dead_code)]

use dyninfer_core::grid::{CheckpointGrid, RouteKind};
use dyninfer_core::model::Model;
use dyninfer_core::temporal::{FrameSet, ShiftSpec};
use dyninfer_core::tensor::{ConvBlockSpec, HeadSpec, Tensor};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Monotone checkpoints ending at the full corner and consistent with `route`.
pub fn random_checkpoints(route: RouteKind, n: usize, m: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let k = rng.random_range(1..=5);
    let mut is: Vec<usize> = (0..k - 1).map(|_| rng.random_range(0..n)).collect();
    let mut js: Vec<usize> = (0..k - 1).map(|_| rng.random_range(0..m)).collect();
    is.sort_unstable();
    js.sort_unstable();
    let mut cps: Vec<(usize, usize)> = is.into_iter().zip(js).collect();
    cps.push((n - 1, m - 1));
    match route {
        RouteKind::DepthWise => cps.iter_mut().for_each(|c| c.0 = n - 1),
        RouteKind::InputWise => cps.iter_mut().for_each(|c| c.1 = m - 1),
        RouteKind::Joint => {}
    }
    cps
}

pub struct GridOptions {
    pub route: RouteKind,
    pub shift: bool,
    pub relu: bool,
    pub max_sets: usize,
}

pub fn random_grid(opts: &GridOptions, rng: &mut impl Rng) -> CheckpointGrid {
    let n = rng.random_range(1..=opts.max_sets);
    let e = rng.random_range(1..=2);
    let c0 = rng.random_range(1..=3);
    let (h, w) = (rng.random_range(5..=9), rng.random_range(5..=9));
    let m = rng.random_range(1..=4);
    let mut blocks = Vec::new();
    let mut c = c0;
    let (mut hh, mut ww) = (h, w);
    for _ in 0..m {
        let k = rng.random_range(1..=3);
        let stride = if hh >= 4 && ww >= 4 { rng.random_range(1..=2) } else { 1 };
        let out = rng.random_range(2..=6);
        let b = ConvBlockSpec { in_channels: c, out_channels: out, kernel: (k, k), stride, padding: k / 2, has_relu: opts.relu && rng.random_bool(0.7) };
        let (oh, ow) = b.output_dims(hh, ww).unwrap();
        hh = oh;
        ww = ow;
        c = out;
        blocks.push(b);
    }
    let shift = if opts.shift {
        let fracs = [Ratio::new(1, 4), Ratio::new(1, 2), Ratio::new(1, 3), Ratio::new(2, 3)];
        let mut s = ShiftSpec::all_blocks(fracs[rng.random_range(0..fracs.len())], m);
        s.enabled_blocks.retain(|_| rng.random_bool(0.8));
        if s.enabled_blocks.is_empty() {
            s.enabled_blocks.insert(0);
        }
        s
    } else {
        ShiftSpec::disabled()
    };
    let checkpoints = random_checkpoints(opts.route, n, m, rng);
    let classes = rng.random_range(2..=4);
    let heads = checkpoints.iter().map(|&(_, j)| HeadSpec { feature_dim: blocks[j].out_channels, num_classes: classes }).collect();
    let g = CheckpointGrid { n_sets: n, set_size: e, input: (c0, h, w), block_specs: blocks, shift, checkpoints, heads, route_kind: opts.route };
    g.validate().unwrap();
    g
}

/// Model with random (not zero) biases so every parameter matters.
pub fn random_model(grid: CheckpointGrid, rng: &mut impl Rng) -> Model {
    let mut model = Model::init(grid, rng.random()).unwrap();
    for p in model.params.iter_mut() {
        if p.shape().len() == 1 {
            *p = random_tensor(p.shape(), rng);
            p.scale(0.3);
        }
    }
    model
}

pub fn random_video(grid: &CheckpointGrid, rng: &mut impl Rng) -> Vec<FrameSet> {
    let (c, h, w) = grid.input;
    (0..grid.n_sets)
        .map(|n| FrameSet {
            set_index: n,
            frames: (0..grid.set_size).map(|_| random_tensor(&[c, h, w], rng)).collect(),
            source_positions: (n * grid.set_size..(n + 1) * grid.set_size).collect(),
        })
        .collect()
}

pub const ROUTES: [RouteKind; 3] = [RouteKind::DepthWise, RouteKind::InputWise, RouteKind::Joint];
