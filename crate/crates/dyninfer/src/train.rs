//! Minibatch SGD on the summed per-checkpoint cross-entropy.

use dyninfer_core::data::SyntheticVideo;
use dyninfer_core::model::forward_loss;
use dyninfer_core::tensor::{Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::network::Network;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 0 is the untrained model.
    pub epoch: usize,
    /// Mean summed loss per video.
    pub loss: f64,
    /// Training accuracy of every checkpoint head during the epoch.
    pub accuracy: Vec<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub logs: Vec<EpochLog>,
    /// Epoch at which a non-finite loss stopped training.
    pub diverged: Option<usize>,
}

struct SampleResult {
    loss: f64,
    correct: Vec<bool>,
    grads: Vec<Tensor>,
}

fn loss_weights(net: &Network, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let k = net.grid().n_checkpoints();
    if cfg.loss_weights.is_empty() {
        return Ok(vec![1.0; k]);
    }
    if cfg.loss_weights.len() != k {
        return Err(Error::Invalid(format!("{} loss weights for {k} checkpoints", cfg.loss_weights.len())));
    }
    Ok(cfg.loss_weights.clone())
}

fn sample(net: &Network, video: &SyntheticVideo, weights: &[f64], with_grads: bool) -> Result<SampleResult> {
    let sets = net.prepare(video)?;
    let graph = forward_loss(&net.model, &sets, video.label, weights)?;
    let correct = graph.logits.iter().map(|z| z.argmax() == video.label).collect();
    let grads = if with_grads && graph.loss.is_finite() { graph.backward(&net.model)? } else { Vec::new() };
    Ok(SampleResult { loss: graph.loss, correct, grads })
}

/// Per-sample results in index order, computed in parallel when asked.
fn run_batch(net: &Network, videos: &[&SyntheticVideo], weights: &[f64], grads: bool, parallel: bool) -> Result<Vec<SampleResult>> {
    if parallel {
        videos.par_iter().map(|v| sample(net, v, weights, grads)).collect()
    } else {
        videos.iter().map(|v| sample(net, v, weights, grads)).collect()
    }
}

/// Mean loss and per-checkpoint accuracy of `net` over `videos`.
pub fn evaluate_loss(net: &Network, videos: &[SyntheticVideo], cfg: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    let weights = loss_weights(net, cfg)?;
    let refs: Vec<&SyntheticVideo> = videos.iter().collect();
    let results = run_batch(net, &refs, &weights, false, cfg.parallel)?;
    Ok(summarize(&results, net.grid().n_checkpoints()))
}

fn summarize(results: &[SampleResult], k: usize) -> (f64, Vec<f64>) {
    let n = results.len().max(1) as f64;
    let loss = results.iter().map(|r| r.loss).sum::<f64>() / n;
    let acc = (0..k).map(|c| results.iter().filter(|r| r.correct[c]).count() as f64 / n).collect();
    (loss, acc)
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        grads.iter_mut().for_each(|g| g.scale(max_norm / norm));
    }
}

/// Trains `net` in place. The epoch-0 log reports the untrained model on at
/// most `probe` videos. On a non-finite loss the parameters of the last
/// completed epoch are restored and `diverged` is set.
pub fn train(
    mut net: Network,
    videos: &[SyntheticVideo],
    cfg: &TrainConfig,
    probe: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let weights = loss_weights(&net, cfg)?;
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be positive".into()));
    }
    let k = net.grid().n_checkpoints();
    let mut logs = Vec::new();
    let (loss0, acc0) = evaluate_loss(&net, &videos[..probe.min(videos.len())], cfg)?;
    let log0 = EpochLog { epoch: 0, loss: loss0, accuracy: acc0 };
    on_epoch(&log0);
    logs.push(log0);

    let mut sgd = Sgd::new(cfg.sgd)?;
    let mut order: Vec<usize> = (0..videos.len()).collect();
    for epoch in 1..=cfg.epochs {
        let snapshot = net.model.params.clone();
        let drops = cfg.lr_decay_epochs.iter().filter(|&&e| e < epoch).count();
        sgd.config.lr = cfg.sgd.lr * 0.1f64.powi(drops as i32);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut seen: Vec<SampleResult> = Vec::with_capacity(videos.len());
        let mut diverged = false;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&SyntheticVideo> = batch.iter().map(|&i| &videos[i]).collect();
            let mut results = run_batch(&net, &refs, &weights, true, cfg.parallel)?;
            if results.iter().any(|r| !r.loss.is_finite()) {
                diverged = true;
                break;
            }
            let scale = 1.0 / results.len() as f64;
            let mut total: Vec<Tensor> = net.model.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            for r in results.iter_mut() {
                for (t, g) in total.iter_mut().zip(std::mem::take(&mut r.grads)) {
                    t.add_assign(&g);
                }
            }
            total.iter_mut().for_each(|t| t.scale(scale));
            clip(&mut total, cfg.grad_clip);
            if sgd.step(&mut net.model.params, &total).is_err() {
                diverged = true;
                break;
            }
            seen.extend(results);
        }
        if diverged {
            net.model.params = snapshot;
            return Ok(TrainOutcome { network: net, logs, diverged: Some(epoch) });
        }
        let (loss, accuracy) = summarize(&seen, k);
        let log = EpochLog { epoch, loss, accuracy };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(TrainOutcome { network: net, logs, diverged: None })
}
