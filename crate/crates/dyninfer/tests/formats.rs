use dyninfer::config::{Config, GridConfig};
use dyninfer::formats::{
    decode_dataset, decode_model, encode_dataset, encode_model, load_dataset, parse_policy, policy_text, read_manifest_only,
    save_dataset, PolicyFile,
};
use dyninfer::{Error, Network};
use dyninfer_core::data::{generate_dataset, DatasetManifest, Split};
use dyninfer_core::grid::RouteKind;
use dyninfer_core::policy::{solve_q, ExitPolicy};
use proptest::prelude::*;

fn tiny_manifest(seed: u64) -> DatasetManifest {
    DatasetManifest { seed, counts: [6, 4, 4], height: 16, width: 16, ..DatasetManifest::default() }
}

fn network(route: RouteKind, permute: bool, shift: bool, seed: u64) -> Network {
    let grid = GridConfig { route, permute, shift, ..GridConfig::default() }.build(&tiny_manifest(1)).unwrap();
    Network::init(grid, permute, seed).unwrap()
}

#[test]
fn dataset_round_trip_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    let ds = generate_dataset(&tiny_manifest(3)).unwrap();
    save_dataset(&path, &ds).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);
    assert_eq!(read_manifest_only(&path).unwrap(), ds.manifest);
}

#[test]
fn dataset_errors() {
    let ds = generate_dataset(&tiny_manifest(3)).unwrap();
    let bytes = encode_dataset(&ds);
    assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_dataset(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    assert!(matches!(decode_dataset(&magic), Err(Error::BadMagic { .. })));
    let mut version = bytes;
    version[8] = 9;
    assert!(matches!(decode_dataset(&version), Err(Error::Version { found: 9, .. })));
}

#[test]
fn model_errors() {
    let bytes = encode_model(&network(RouteKind::Joint, true, true, 1));
    assert!(matches!(decode_model(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
    assert!(matches!(decode_model(&bytes[..5]), Err(Error::Truncated { .. } | Error::BadMagic { .. })));
    let mut version = bytes;
    version[8] = 2;
    assert!(matches!(decode_model(&version), Err(Error::Version { found: 2, .. })));
}

#[test]
fn hashes_distinguish_configurations() {
    let mut seen = std::collections::BTreeSet::new();
    for route in [RouteKind::DepthWise, RouteKind::InputWise, RouteKind::Joint] {
        for permute in [false, true] {
            for shift in [false, true] {
                assert!(seen.insert(network(route, permute, shift, 1).hash()));
            }
        }
    }
    // weights do not enter the hash
    assert_eq!(network(RouteKind::Joint, true, true, 1).hash(), network(RouteKind::Joint, true, true, 2).hash());
}

#[test]
fn config_text_round_trip() {
    let mut cfg = Config::default();
    cfg.grid.route = RouteKind::InputWise;
    cfg.grid.checkpoints = vec![(1, 4), (3, 4), (7, 4)];
    cfg.train.loss_weights = vec![0.5, 1.0, 2.0];
    cfg.policy.budgets = vec![1.5e5, 3.0e6];
    let back: Config = cfg.to_text().parse().unwrap();
    assert_eq!(back, cfg);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn model_round_trip(route in 0usize..3, permute: bool, shift: bool, seed: u64) {
        let route = [RouteKind::DepthWise, RouteKind::InputWise, RouteKind::Joint][route];
        let net = network(route, permute, shift, seed);
        let back = decode_model(&encode_model(&net)).unwrap();
        prop_assert_eq!(back.hash(), net.hash());
        prop_assert_eq!(back, net);
    }

    #[test]
    fn policy_round_trip(frac in 0.0f64..1.2, seed: u64) {
        let net = network(RouteKind::Joint, true, true, seed);
        let costs = net.grid().flops_table().unwrap();
        let g: Vec<f64> = costs.iter().map(|&c| c as f64).collect();
        let budget = g[0] + frac * (g[g.len() - 1] - g[0]);
        let sol = solve_q(budget, &g).unwrap();
        let mut policy = ExitPolicy::never_exit(costs);
        policy.budget = budget;
        policy.q = sol.q;
        for (i, t) in policy.thresholds.iter_mut().enumerate().take(g.len() - 1) {
            *t = (seed % 1000) as f64 / 1000.0 + i as f64 * 1e-3;
        }
        let file = PolicyFile::new(net.hash(), policy, sol, Split::Val);
        let back = parse_policy(&policy_text(&file)).unwrap();
        prop_assert_eq!(back, file);
    }
}
