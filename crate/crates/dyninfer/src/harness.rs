//! Train, calibrate, evaluate and sweep, as library calls and as the file
//! based commands behind the CLI.

use std::path::Path;

use dyninfer_core::data::{generate_dataset, Dataset, DatasetManifest, Split, SyntheticVideo};
use dyninfer_core::model::{checkpoint_logits, run_progressive, Decision};
use dyninfer_core::policy::{even_budgets, ConfidenceMatrix, ExitPolicy};
use dyninfer_core::tensor::softmax;
use log::{info, warn};
use rayon::prelude::*;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::formats::{self, PolicyFile};
use crate::network::Network;
use crate::report::{EvaluationReport, ReportRow};
use crate::train::{train, TrainOutcome};

fn map_videos<T: Send>(
    videos: &[SyntheticVideo],
    parallel: bool,
    f: impl Fn(&SyntheticVideo) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    if parallel {
        videos.par_iter().map(f).collect()
    } else {
        videos.iter().map(f).collect()
    }
}

/// Per-video checkpoint confidences and predictions from never-exit runs.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointScores {
    pub confidences: ConfidenceMatrix,
    /// `predictions[v][k]`: argmax class of head `k` on video `v`.
    pub predictions: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl CheckpointScores {
    /// Fraction of videos classified correctly by head `k`.
    pub fn accuracy(&self, k: usize) -> f64 {
        let hits = self.predictions.iter().zip(&self.labels).filter(|(p, &y)| p[k] == y).count();
        hits as f64 / self.labels.len().max(1) as f64
    }
}

pub fn checkpoint_scores(net: &Network, videos: &[SyntheticVideo], parallel: bool) -> Result<CheckpointScores> {
    let per_video = map_videos(videos, parallel, |v| {
        let logits = checkpoint_logits(&net.model, &net.prepare(v)?)?;
        let conf: Vec<f64> = logits.iter().map(|z| softmax(z.data()).into_iter().fold(f64::NEG_INFINITY, f64::max)).collect();
        let pred: Vec<usize> = logits.iter().map(|z| z.argmax()).collect();
        Ok((conf, pred))
    })?;
    let k = net.grid().n_checkpoints();
    let data = per_video.iter().flat_map(|(c, _)| c.iter().copied()).collect();
    Ok(CheckpointScores {
        confidences: ConfidenceMatrix::new(videos.len(), k, data)?,
        predictions: per_video.into_iter().map(|(_, p)| p).collect(),
        labels: videos.iter().map(|v| v.label).collect(),
    })
}

/// Calibrates a policy for `budget` from precomputed confidences.
pub fn calibrate_from(net: &Network, conf: &ConfidenceMatrix, budget: f64, split: Split) -> Result<(PolicyFile, Vec<usize>)> {
    let costs = net.grid().flops_table()?;
    let (policy, solution, targets) = ExitPolicy::calibrate(budget, &costs, conf)?;
    if solution.warning() {
        warn!("budget {budget} is at or above G_K = {}; nearly every video runs to the last checkpoint", costs[costs.len() - 1]);
    }
    Ok((PolicyFile::new(net.hash(), policy, solution, split), targets))
}

pub fn calibrate(net: &Network, videos: &[SyntheticVideo], budget: f64, split: Split, parallel: bool) -> Result<PolicyFile> {
    let scores = checkpoint_scores(net, videos, parallel)?;
    Ok(calibrate_from(net, &scores.confidences, budget, split)?.0)
}

/// Outcome of running a policy over a split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub row: ReportRow,
    pub decisions: Vec<Decision>,
}

pub fn evaluate(net: &Network, policy: &PolicyFile, videos: &[SyntheticVideo], parallel: bool) -> Result<Evaluation> {
    let hash = net.hash();
    if policy.grid_hash != hash {
        return Err(Error::HashMismatch { policy: policy.grid_hash.clone(), model: hash });
    }
    evaluate_policy(net, &policy.policy, videos, parallel)
}

/// Runs every video progressively under `policy`.
pub fn evaluate_policy(net: &Network, policy: &ExitPolicy, videos: &[SyntheticVideo], parallel: bool) -> Result<Evaluation> {
    let decisions = map_videos(videos, parallel, |v| Ok(run_progressive(&net.model, &net.prepare(v)?, policy)?))?;
    let mut histogram = vec![0; policy.k()];
    let mut total_flops = 0u128;
    let mut correct = 0;
    for (d, v) in decisions.iter().zip(videos) {
        histogram[d.exit_checkpoint] += 1;
        total_flops += d.flops as u128;
        correct += usize::from(d.label == v.label);
    }
    let row = ReportRow { budget: policy.budget, q: policy.q, total_flops, correct, histogram };
    row.check(&policy.costs)?;
    Ok(Evaluation { row, decisions })
}

/// Budgets to sweep: the configured list, or evenly spaced ones over
/// `[G_1, G_K]`.
pub fn sweep_budget_list(cfg: &Config, costs: &[u64]) -> Vec<f64> {
    if cfg.policy.budgets.is_empty() {
        even_budgets(costs, cfg.policy.budget_count)
    } else {
        cfg.policy.budgets.clone()
    }
}

/// Calibrates on one split and evaluates on another for every budget.
/// Failing budgets are logged and skipped.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    net: &Network,
    dataset: &Dataset,
    calibrate_split: Split,
    eval_split: Split,
    budgets: &[f64],
    epsilon_points: f64,
    parallel: bool,
) -> Result<EvaluationReport> {
    if calibrate_split == eval_split {
        return Err(Error::Invalid(format!("calibration and evaluation both use the {} split", eval_split.name())));
    }
    let costs = net.grid().flops_table()?;
    let scores = checkpoint_scores(net, dataset.split(calibrate_split), parallel)?;
    let eval_videos = dataset.split(eval_split);
    let full = evaluate_policy(net, &ExitPolicy::never_exit(costs.clone()), eval_videos, parallel)?;
    let mut rows = Vec::with_capacity(budgets.len());
    for &q in budgets {
        let policy = match calibrate_from(net, &scores.confidences, q, calibrate_split) {
            Ok((p, _)) => p,
            Err(e) => {
                warn!("budget {q}: {e}; skipped");
                continue;
            }
        };
        let ev = evaluate(net, &policy, eval_videos, parallel)?;
        info!("Q={q:.0} avg_flops={:.0} top1={:.4} exits={:?}", ev.row.avg_flops(), ev.row.top1(), ev.row.histogram);
        rows.push(ev.row);
    }
    let mut report = EvaluationReport {
        rows,
        costs,
        grid_hash: net.hash(),
        dataset_seed: dataset.manifest.seed,
        calibrate_split,
        eval_split,
        full_top1: full.row.top1(),
        selected: None,
    };
    report.check()?;
    if let Some(i) = report.select(epsilon_points / 100.0) {
        info!("Q* = {} (avg_flops {:.0}, top1 {:.4})", report.rows[i].budget, report.rows[i].avg_flops(), report.rows[i].top1());
    }
    Ok(report)
}

// ------------------------------------------------------------- commands

pub fn cmd_gen_data(manifest: &DatasetManifest, out: &Path) -> Result<Dataset> {
    let ds = generate_dataset(manifest)?;
    formats::save_dataset(out, &ds)?;
    info!("wrote {} videos to {}", manifest.counts.iter().sum::<usize>(), out.display());
    Ok(ds)
}

/// Trains from a config and writes the model. On divergence the last good
/// model is still written and the error returned.
pub fn cmd_train(cfg: &Config, dataset_path: &Path, out: &Path) -> Result<TrainOutcome> {
    let ds = formats::load_dataset(dataset_path)?;
    let grid = cfg.grid.build(&ds.manifest)?;
    let net = Network::init(grid, cfg.grid.permute, cfg.train.seed)?;
    let outcome = train(net, &ds.train, &cfg.train, 200, |log| {
        let acc: Vec<String> = log.accuracy.iter().map(|a| format!("{a:.3}")).collect();
        info!("epoch {} loss {:.4} checkpoint accuracy [{}]", log.epoch, log.loss, acc.join(", "));
    })?;
    formats::save_model(out, &outcome.network)?;
    if let Some(epoch) = outcome.diverged {
        return Err(Error::Diverged { epoch });
    }
    Ok(outcome)
}

fn load_pair(model: &Path, dataset: &Path) -> Result<(Network, Dataset)> {
    Ok((formats::load_model(model)?, formats::load_dataset(dataset)?))
}

pub fn cmd_calibrate(model: &Path, dataset: &Path, split: Split, budget: f64, out: &Path, parallel: bool) -> Result<PolicyFile> {
    let (net, ds) = load_pair(model, dataset)?;
    let costs = net.grid().flops_table()?;
    let scores = checkpoint_scores(&net, ds.split(split), parallel)?;
    let (policy, targets) = calibrate_from(&net, &scores.confidences, budget, split)?;
    info!("calibrated Q={budget} on {}: q={} targets={targets:?} G={costs:?}", split.name(), policy.policy.q);
    formats::save_policy(out, &policy)?;
    Ok(policy)
}

pub fn cmd_eval(model: &Path, policy: &Path, dataset: &Path, split: Split, out: &Path, parallel: bool) -> Result<EvaluationReport> {
    let (net, ds) = load_pair(model, dataset)?;
    let pf = formats::load_policy(policy)?;
    if pf.calibrate_split == split {
        return Err(Error::Invalid(format!("policy was calibrated on {}, evaluate on another split", split.name())));
    }
    let ev = evaluate(&net, &pf, ds.split(split), parallel)?;
    let full = evaluate_policy(&net, &ExitPolicy::never_exit(pf.policy.costs.clone()), ds.split(split), parallel)?;
    let report = EvaluationReport {
        rows: vec![ev.row],
        costs: pf.policy.costs.clone(),
        grid_hash: pf.grid_hash.clone(),
        dataset_seed: ds.manifest.seed,
        calibrate_split: pf.calibrate_split,
        eval_split: split,
        full_top1: full.row.top1(),
        selected: None,
    };
    std::fs::write(out, report.to_csv()).map_err(|e| Error::io(out, e))?;
    Ok(report)
}

pub fn cmd_sweep(cfg: &Config, model: &Path, dataset: &Path, out: &Path) -> Result<EvaluationReport> {
    let (net, ds) = load_pair(model, dataset)?;
    let costs = net.grid().flops_table()?;
    let budgets = sweep_budget_list(cfg, &costs);
    let p = &cfg.policy;
    let report = sweep(&net, &ds, p.calibrate_split, p.eval_split, &budgets, p.epsilon, cfg.train.parallel)?;
    std::fs::write(out, report.to_csv()).map_err(|e| Error::io(out, e))?;
    Ok(report)
}
