//! Progressive execution over the checkpoint lattice: equivalence with the
//! monolithic pass, causality, caching and cost metering.

mod common;

use std::collections::BTreeSet;

use common::*;
use dyninfer_core::grid::RouteKind;
use dyninfer_core::model::{checkpoint_logits, run_full, run_full_all, run_progressive, Progressive};
use dyninfer_core::policy::ExitPolicy;
use dyninfer_core::temporal::ShiftSpec;
use num_rational::Ratio;
use rand::Rng;

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn progressive_matches_full_pass() {
    let mut rng = rng(21);
    let mut cases = 0;
    for route in ROUTES {
        for shift in [false, true] {
            for _ in 0..20 {
                let grid = random_grid(&GridOptions { route, shift, relu: true, max_sets: 8 }, &mut rng);
                let model = random_model(grid, &mut rng);
                let video = random_video(&model.grid, &mut rng);
                let progressive = checkpoint_logits(&model, &video).unwrap();
                let full = run_full_all(&model, &video).unwrap();
                for (p, f) in progressive.iter().zip(&full) {
                    assert!(max_abs(p.data(), f.data()) <= 1e-9);
                }
                let never = ExitPolicy::never_exit(model.grid.flops_table().unwrap());
                let d = run_progressive(&model, &video, &never).unwrap();
                assert_eq!(d.exit_checkpoint, model.grid.n_checkpoints() - 1);
                assert!(max_abs(d.logits.data(), run_full(&model, &video).unwrap().data()) <= 1e-9);
                cases += 1;
            }
        }
    }
    assert!(cases >= 100);
}

#[test]
fn earlier_sets_are_blind_to_later_sets() {
    let mut rng = rng(22);
    for case in 0..60 {
        let mut grid = random_grid(&GridOptions { route: ROUTES[case % 3], shift: true, relu: true, max_sets: 6 }, &mut rng);
        if grid.n_sets < 2 {
            grid.n_sets = 2;
            grid.checkpoints.last_mut().unwrap().0 = 1;
            if grid.route_kind == RouteKind::DepthWise {
                grid.checkpoints.iter_mut().for_each(|c| c.0 = 1);
            }
        }
        grid.shift = ShiftSpec::all_blocks(Ratio::new(1, 2), grid.n_blocks());
        grid.validate().unwrap();
        let model = random_model(grid, &mut rng);
        let video = random_video(&model.grid, &mut rng);
        let n = rng.random_range(0..model.grid.n_sets - 1);
        let mut perturbed = video.clone();
        for s in perturbed[n + 1..].iter_mut() {
            for f in s.frames.iter_mut() {
                f.data_mut().iter_mut().for_each(|v| *v = -*v + 0.25);
            }
        }
        let mut a = Progressive::new(&model, &video).unwrap();
        let mut b = Progressive::new(&model, &perturbed).unwrap();
        for _ in 0..model.grid.n_checkpoints() {
            a.step().unwrap();
            b.step().unwrap();
        }
        let mut later_differs = false;
        for set in 0..model.grid.n_sets {
            for m in 0..model.grid.n_blocks() {
                let (x, y) = (a.cache.get((set, m)).unwrap(), b.cache.get((set, m)).unwrap());
                if set <= n {
                    assert_eq!(x.raw, y.raw, "case {case}: raw ({set}, {m})");
                    assert_eq!(x.out(), y.out(), "case {case}: out ({set}, {m})");
                } else {
                    later_differs |= x.out() != y.out();
                }
            }
        }
        assert!(later_differs, "case {case}: perturbation had no effect");
    }
}

#[test]
fn closure_is_the_prefix_rectangle() {
    let mut rng = rng(23);
    for case in 0..60 {
        let grid = random_grid(&GridOptions { route: ROUTES[case % 3], shift: case % 2 == 0, relu: true, max_sets: 8 }, &mut rng);
        for (k, &(i, j)) in grid.checkpoints.iter().enumerate() {
            let brute: BTreeSet<(usize, usize)> = (0..=i).flat_map(|n| (0..=j).map(move |m| (n, m))).collect();
            assert_eq!(grid.nodes_required(k).unwrap(), brute);
        }
    }
}

#[test]
fn nodes_are_computed_once_and_metered_exactly() {
    let mut rng = rng(24);
    for case in 0..60 {
        let grid = random_grid(&GridOptions { route: ROUTES[case % 3], shift: case % 2 == 1, relu: true, max_sets: 8 }, &mut rng);
        let model = random_model(grid, &mut rng);
        let video = random_video(&model.grid, &mut rng);
        let table = model.grid.flops_table().unwrap();
        let mut union = BTreeSet::new();
        let mut run = Progressive::new(&model, &video).unwrap();
        for k in 0..model.grid.n_checkpoints() {
            run.step().unwrap();
            union.extend(model.grid.nodes_required(k).unwrap());
            assert_eq!(run.cache.evaluations, union.len());
            assert_eq!(run.cache.len(), union.len());
            assert_eq!(run.cache.flops_spent, table[k]);
        }
        assert!(run.step().is_err());
    }
}

#[test]
fn flops_table_from_first_principles() {
    let mut rng = rng(25);
    for case in 0..40 {
        let grid = random_grid(&GridOptions { route: ROUTES[case % 3], shift: false, relu: true, max_sets: 8 }, &mut rng);
        // spatial sizes by direct recurrence
        let (mut c, mut h, mut w) = grid.input;
        let mut per_node = Vec::new();
        for b in &grid.block_specs {
            assert_eq!(b.in_channels, c);
            h = (h + 2 * b.padding - b.kernel.0) / b.stride + 1;
            w = (w + 2 * b.padding - b.kernel.1) / b.stride + 1;
            c = b.out_channels;
            per_node.push((2 * b.kernel.0 * b.kernel.1 * b.in_channels * c * h * w * grid.set_size) as u64);
        }
        let mut expect = Vec::new();
        let (mut reach_i, mut reach_j) = (None::<usize>, None::<usize>);
        let mut heads = 0u64;
        for (k, &(i, j)) in grid.checkpoints.iter().enumerate() {
            reach_i = Some(reach_i.map_or(i, |r| r.max(i)));
            reach_j = Some(reach_j.map_or(j, |r| r.max(j)));
            heads += 2 * (grid.heads[k].feature_dim * grid.heads[k].num_classes) as u64;
            // monotone checkpoints: the union of rectangles is the largest one
            let nodes: u64 = (0..=reach_i.unwrap()).map(|_| per_node[..=reach_j.unwrap()].iter().sum::<u64>()).sum();
            expect.push(nodes + heads);
        }
        assert_eq!(grid.flops_table().unwrap(), expect);
    }
}

#[test]
fn frame_order_is_irrelevant_without_shift() {
    let mut rng = rng(26);
    for case in 0..20 {
        let grid = random_grid(&GridOptions { route: ROUTES[case % 3], shift: false, relu: true, max_sets: 8 }, &mut rng);
        let model = random_model(grid, &mut rng);
        let video = random_video(&model.grid, &mut rng);
        let mut reordered = video.clone();
        let last = reordered.len() - 1;
        for s in reordered.iter_mut() {
            s.frames.reverse();
        }
        reordered[..=last].reverse();
        let a = run_full(&model, &video).unwrap();
        let b = run_full(&model, &reordered).unwrap();
        assert!(max_abs(a.data(), b.data()) <= 1e-9);
    }
}
