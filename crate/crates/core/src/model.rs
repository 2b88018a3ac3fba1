//! Lattice model: parameters, progressive and monolithic execution, and the
//! summed per-checkpoint cross-entropy with its exact gradient.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, precondition_err, Error, Result};
use crate::grid::CheckpointGrid;
use crate::policy::{decide_exit, ExitPolicy};
use crate::temporal::{online_shift, online_shift_backward, FrameSet};
use crate::tensor::{
    conv2d, conv2d_backward, cross_entropy, global_avg_pool_backward, head_forward, linear, linear_backward,
    pooled_average, relu_backward_in_place, softmax, Tensor,
};

/// Grid plus its parameters. Parameter order: `(weight, bias)` of every
/// block, then `(weight, bias)` of every head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub grid: CheckpointGrid,
    pub params: Vec<Tensor>,
}

impl Model {
    /// Kaiming-normal conv weights (`std = sqrt(2 / fan_in)`), LeCun-normal
    /// head weights (`std = sqrt(1 / fan_in)`), zero biases.
    pub fn init(grid: CheckpointGrid, seed: u64) -> Result<Self> {
        grid.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let normal = |shape: &[usize], std: f64, rng: &mut ChaCha8Rng| {
            let d = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| d.sample(rng))
        };
        for b in &grid.block_specs {
            let fan_in = (b.in_channels * b.kernel.0 * b.kernel.1) as f64;
            params.push(normal(&b.weight_shape(), libm::sqrt(2.0 / fan_in), &mut rng));
            params.push(Tensor::zeros(&[b.out_channels]));
        }
        for h in &grid.heads {
            params.push(normal(&h.weight_shape(), libm::sqrt(1.0 / h.feature_dim as f64), &mut rng));
            params.push(Tensor::zeros(&[h.num_classes]));
        }
        Ok(Self { grid, params })
    }

    pub fn from_params(grid: CheckpointGrid, params: Vec<Tensor>) -> Result<Self> {
        grid.validate()?;
        let expected = Self::param_shapes(&grid);
        if params.len() != expected.len() {
            return Err(config_err!("model needs {} parameter tensors, got {}", expected.len(), params.len()));
        }
        for (i, (p, s)) in params.iter().zip(&expected).enumerate() {
            if p.shape() != s.as_slice() {
                return Err(config_err!("parameter {i} has shape {:?}, expected {:?}", p.shape(), s));
            }
        }
        Ok(Self { grid, params })
    }

    pub fn param_shapes(grid: &CheckpointGrid) -> Vec<Vec<usize>> {
        let mut v = Vec::new();
        for b in &grid.block_specs {
            v.push(b.weight_shape().to_vec());
            v.push(vec![b.out_channels]);
        }
        for h in &grid.heads {
            v.push(h.weight_shape().to_vec());
            v.push(vec![h.num_classes]);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn block_params(&self, m: usize) -> (&Tensor, &Tensor) {
        (&self.params[2 * m], &self.params[2 * m + 1])
    }

    pub fn head_params(&self, k: usize) -> (&Tensor, &Tensor) {
        let base = 2 * self.grid.n_blocks();
        (&self.params[base + 2 * k], &self.params[base + 2 * k + 1])
    }

    fn check_input(&self, sets: &[FrameSet]) -> Result<()> {
        let g = &self.grid;
        if sets.len() != g.n_sets {
            return Err(config_err!("grid has {} frame-sets, input has {}", g.n_sets, sets.len()));
        }
        let (c, h, w) = g.input;
        for s in sets {
            if s.frames.len() != g.set_size {
                return Err(config_err!("frame-set {} has {} frames, grid expects {}", s.set_index, s.frames.len(), g.set_size));
            }
            for f in &s.frames {
                if f.shape() != [c, h, w] {
                    return Err(config_err!("frame shape {:?}, grid expects {:?}", f.shape(), [c, h, w]));
                }
            }
        }
        Ok(())
    }

    /// Logits of head `k` over the given block-`j_k` feature maps.
    fn head_logits(&self, k: usize, features: &[&Tensor]) -> Result<Tensor> {
        let (w, b) = self.head_params(k);
        head_forward(features, &self.grid.heads[k], w, b)
    }
}

/// Features of one lattice node: the block output of every frame of the set
/// before (`raw`) and after (`out`) the online shift.
#[derive(Debug, Clone)]
pub struct NodeValue {
    pub raw: Vec<Tensor>,
    /// `None` when the shift is inactive at this block (`out == raw`).
    shifted: Option<Vec<Tensor>>,
}

impl NodeValue {
    pub fn out(&self) -> &[Tensor] {
        self.shifted.as_deref().unwrap_or(&self.raw)
    }
}

/// Per-video cache of computed lattice nodes with a FLOPs meter.
#[derive(Debug, Default)]
pub struct NodeCache {
    nodes: BTreeMap<(usize, usize), NodeValue>,
    pub flops_spent: u64,
    /// Node evaluations performed (each node at most once).
    pub evaluations: usize,
}

impl NodeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, node: (usize, usize)) -> Option<&NodeValue> {
        self.nodes.get(&node)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Computes node `(n, m)` from its already available dependencies.
fn eval_node(
    model: &Model,
    sets: &[FrameSet],
    n: usize,
    m: usize,
    below: Option<&NodeValue>,
    left: Option<&NodeValue>,
) -> Result<NodeValue> {
    let spec = &model.grid.block_specs[m];
    let (w, b) = model.block_params(m);
    let inputs: &[Tensor] = match below {
        Some(v) => v.out(),
        None => &sets[n].frames,
    };
    let raw = inputs.iter().map(|x| conv2d(x, spec, w, b)).collect::<Result<Vec<_>>>()?;
    let shifted = if model.grid.shift.is_active(m) {
        let mut out = Vec::with_capacity(raw.len());
        for e in 0..raw.len() {
            let prev = if e > 0 { Some(&raw[e - 1]) } else { left.and_then(|l| l.raw.last()) };
            out.push(online_shift(prev, &raw[e], &model.grid.shift)?);
        }
        Some(out)
    } else {
        None
    };
    Ok(NodeValue { raw, shifted })
}

/// Result of a progressive run.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub label: usize,
    pub exit_checkpoint: usize,
    pub scores: Vec<f64>,
    pub logits: Tensor,
    pub flops: u64,
}

/// Progressive executor for one video: evaluates checkpoints in order,
/// computing only the nodes not yet cached.
pub struct Progressive<'a> {
    model: &'a Model,
    sets: &'a [FrameSet],
    node_flops: Vec<u64>,
    pub cache: NodeCache,
    next: usize,
}

impl<'a> Progressive<'a> {
    pub fn new(model: &'a Model, sets: &'a [FrameSet]) -> Result<Self> {
        model.check_input(sets)?;
        Ok(Self { model, sets, node_flops: model.grid.node_flops()?, cache: NodeCache::new(), next: 0 })
    }

    pub fn next_checkpoint(&self) -> usize {
        self.next
    }

    /// Advances to the next checkpoint and returns its logits.
    pub fn step(&mut self) -> Result<Tensor> {
        let k = self.next;
        let grid = &self.model.grid;
        if k >= grid.n_checkpoints() {
            return Err(Error::State(alloc::format!("all {} checkpoints already evaluated", grid.n_checkpoints())));
        }
        // BTreeSet order is frame-major, which is topological for the lattice.
        for (n, m) in grid.nodes_required(k)? {
            if self.cache.nodes.contains_key(&(n, m)) {
                continue;
            }
            let below = if m > 0 { Some(self.cached(n, m - 1)?) } else { None };
            let left = if n > 0 && grid.shift.is_active(m) { Some(self.cached(n - 1, m)?) } else { None };
            let v = eval_node(self.model, self.sets, n, m, below, left)?;
            self.cache.nodes.insert((n, m), v);
            self.cache.flops_spent += self.node_flops[m];
            self.cache.evaluations += 1;
        }
        let (i, j) = grid.checkpoints[k];
        let feats: Vec<&Tensor> = (0..=i).flat_map(|n| self.cache.nodes[&(n, j)].out().iter()).collect();
        let logits = self.model.head_logits(k, &feats)?;
        self.cache.flops_spent += grid.heads[k].flops();
        self.next += 1;
        Ok(logits)
    }

    fn cached(&self, n: usize, m: usize) -> Result<&NodeValue> {
        self.cache
            .nodes
            .get(&(n, m))
            .ok_or_else(|| Error::State(alloc::format!("node ({n}, {m}) used before it was computed")))
    }
}

/// Walks the checkpoints until `policy` lets the video exit.
pub fn run_progressive(model: &Model, sets: &[FrameSet], policy: &ExitPolicy) -> Result<Decision> {
    if policy.k() != model.grid.n_checkpoints() {
        return Err(config_err!("policy has {} thresholds, grid {} checkpoints", policy.k(), model.grid.n_checkpoints()));
    }
    let mut run = Progressive::new(model, sets)?;
    loop {
        let k = run.next_checkpoint();
        let logits = run.step()?;
        let scores = softmax(logits.data());
        if decide_exit(&scores, k, policy) {
            return Ok(Decision {
                label: logits.argmax(),
                exit_checkpoint: k,
                scores,
                logits,
                flops: run.cache.flops_spent,
            });
        }
    }
}

/// Logits of every checkpoint from a never-exit progressive run.
pub fn checkpoint_logits(model: &Model, sets: &[FrameSet]) -> Result<Vec<Tensor>> {
    let mut run = Progressive::new(model, sets)?;
    (0..model.grid.n_checkpoints()).map(|_| run.step()).collect()
}

/// Monolithic pass over the whole lattice, block by block, returning the
/// logits of every checkpoint. No cache, no early exit.
pub fn run_full_all(model: &Model, sets: &[FrameSet]) -> Result<Vec<Tensor>> {
    model.check_input(sets)?;
    let grid = &model.grid;
    let (n_sets, m_blocks) = (grid.n_sets, grid.n_blocks());
    // features[n][e] holds the current block output for every frame
    let mut features: Vec<Vec<Tensor>> = sets.iter().map(|s| s.frames.clone()).collect();
    let mut per_block: Vec<Vec<Vec<Tensor>>> = Vec::with_capacity(m_blocks);
    for m in 0..m_blocks {
        let spec = &grid.block_specs[m];
        let (w, b) = model.block_params(m);
        let raw: Vec<Vec<Tensor>> = features
            .iter()
            .map(|fs| fs.iter().map(|x| conv2d(x, spec, w, b)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        features = if grid.shift.is_active(m) {
            // flatten frames in plan order; each frame takes channels from its predecessor
            let flat: Vec<&Tensor> = raw.iter().flatten().collect();
            let shifted = (0..flat.len())
                .map(|t| online_shift(if t == 0 { None } else { Some(flat[t - 1]) }, flat[t], &grid.shift))
                .collect::<Result<Vec<_>>>()?;
            let mut it = shifted.into_iter();
            (0..n_sets).map(|_| it.by_ref().take(grid.set_size).collect()).collect()
        } else {
            raw
        };
        per_block.push(features.clone());
    }
    grid.checkpoints
        .iter()
        .enumerate()
        .map(|(k, &(i, j))| {
            let feats: Vec<&Tensor> = per_block[j][..=i].iter().flatten().collect();
            model.head_logits(k, &feats)
        })
        .collect()
}

/// Logits of the final checkpoint from [`run_full_all`].
pub fn run_full(model: &Model, sets: &[FrameSet]) -> Result<Tensor> {
    Ok(run_full_all(model, sets)?.pop().expect("grid has checkpoints"))
}

/// Recorded forward pass of the summed multi-checkpoint loss.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub loss: f64,
    pub per_checkpoint: Vec<f64>,
    pub logits: Vec<Tensor>,
    label: usize,
    weights: Vec<f64>,
    /// `inputs[n][m][e]`: input of block `m` for frame `e` of set `n`.
    inputs: Vec<Vec<Vec<Tensor>>>,
    /// `raw[n][m][e]`: post-activation, pre-shift block output.
    raw: Vec<Vec<Vec<Tensor>>>,
    /// `pooled[k]`: averaged pooled features fed to head `k`.
    pooled: Vec<Vec<f64>>,
    /// `outs` for the head inputs: `(C, H, W)` of block `m`.
    out_shapes: Vec<(usize, usize, usize)>,
}

/// Forward pass recording everything [`LossGraph::backward`] needs.
/// `loss = Σ_k weights[k] · CE(logits_k, label)`.
pub fn forward_loss(model: &Model, sets: &[FrameSet], label: usize, weights: &[f64]) -> Result<LossGraph> {
    model.check_input(sets)?;
    let grid = &model.grid;
    let k_count = grid.n_checkpoints();
    if weights.len() != k_count {
        return Err(config_err!("{} loss weights for {k_count} checkpoints", weights.len()));
    }
    if label >= grid.num_classes() {
        return Err(precondition_err!("label {label} out of range for {} classes", grid.num_classes()));
    }
    let (n_sets, m_blocks, e_size) = (grid.n_sets, grid.n_blocks(), grid.set_size);
    let mut inputs = vec![vec![Vec::new(); m_blocks]; n_sets];
    let mut raw = vec![vec![Vec::new(); m_blocks]; n_sets];
    let mut outs: Vec<Vec<Vec<Tensor>>> = vec![vec![Vec::new(); m_blocks]; n_sets];
    for n in 0..n_sets {
        for m in 0..m_blocks {
            let spec = &grid.block_specs[m];
            let (w, b) = model.block_params(m);
            let ins: Vec<Tensor> = if m == 0 { sets[n].frames.clone() } else { outs[n][m - 1].clone() };
            let r = ins.iter().map(|x| conv2d(x, spec, w, b)).collect::<Result<Vec<_>>>()?;
            let o = if grid.shift.is_active(m) {
                (0..e_size)
                    .map(|e| {
                        let prev = if e > 0 {
                            Some(&r[e - 1])
                        } else if n > 0 {
                            raw[n - 1][m].last()
                        } else {
                            None
                        };
                        online_shift(prev, &r[e], &grid.shift)
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                r.clone()
            };
            inputs[n][m] = ins;
            raw[n][m] = r;
            outs[n][m] = o;
        }
    }
    let mut logits = Vec::with_capacity(k_count);
    let mut pooled = Vec::with_capacity(k_count);
    let mut per_checkpoint = Vec::with_capacity(k_count);
    let mut loss = 0.0;
    for (k, &(i, j)) in grid.checkpoints.iter().enumerate() {
        let feats: Vec<&Tensor> = outs[..=i].iter().flat_map(|row| row[j].iter()).collect();
        let p = pooled_average(&feats)?;
        let (w, b) = model.head_params(k);
        let z = linear(&p, w, b)?;
        let (l, _) = cross_entropy(z.data(), label)?;
        loss += weights[k] * l;
        per_checkpoint.push(l);
        pooled.push(p);
        logits.push(z);
    }
    let out_shapes = grid.block_shapes()?.into_iter().map(|(_, o)| o).collect();
    Ok(LossGraph { loss, per_checkpoint, logits, label, weights: weights.to_vec(), inputs, raw, pooled, out_shapes })
}

impl LossGraph {
    /// Recorded input of block `m` for frame `e` of set `n`.
    pub fn block_input(&self, n: usize, m: usize, e: usize) -> &Tensor {
        &self.inputs[n][m][e]
    }

    /// Exact reverse-mode gradients of the recorded loss, in parameter order.
    pub fn backward(&self, model: &Model) -> Result<Vec<Tensor>> {
        let grid = &model.grid;
        let (n_sets, m_blocks, e_size) = (grid.n_sets, grid.n_blocks(), grid.set_size);
        let mut grads: Vec<Tensor> = model.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let zero_map = |m: usize| {
            let (c, h, w) = self.out_shapes[m];
            Tensor::zeros(&[c, h, w])
        };
        // gradient w.r.t. the (shifted) output and the raw output of each node
        let mut g_out: Vec<Vec<Vec<Tensor>>> =
            (0..n_sets).map(|_| (0..m_blocks).map(|m| vec![zero_map(m); e_size]).collect()).collect();
        let mut g_raw = g_out.clone();

        let head_base = 2 * m_blocks;
        for (k, &(i, j)) in grid.checkpoints.iter().enumerate() {
            if self.weights[k] == 0.0 {
                continue;
            }
            let (_, mut dz) = cross_entropy(self.logits[k].data(), self.label)?;
            dz.iter_mut().for_each(|v| *v *= self.weights[k]);
            let (w, _) = model.head_params(k);
            let lg = linear_backward(&self.pooled[k], w, &dz);
            grads[head_base + 2 * k].add_assign(&lg.weights);
            grads[head_base + 2 * k + 1].add_assign(&lg.bias);
            let count = ((i + 1) * e_size) as f64;
            let dmap = global_avg_pool_backward(self.out_shapes[j], &lg.input, 1.0 / count);
            for row in g_out.iter_mut().take(i + 1) {
                for g in row[j].iter_mut() {
                    g.add_assign(&dmap);
                }
            }
        }

        for n in (0..n_sets).rev() {
            for m in (0..m_blocks).rev() {
                let spec = &grid.block_specs[m];
                let shifted = grid.shift.is_active(m);
                for e in (0..e_size).rev() {
                    if shifted {
                        let (gp, gc) = online_shift_backward(&g_out[n][m][e], &grid.shift)?;
                        g_raw[n][m][e].add_assign(&gc);
                        if e > 0 {
                            g_raw[n][m][e - 1].add_assign(&gp);
                        } else if n > 0 {
                            g_raw[n - 1][m][e_size - 1].add_assign(&gp);
                        }
                    } else {
                        let go = g_out[n][m][e].clone();
                        g_raw[n][m][e].add_assign(&go);
                    }
                    let mut g_pre = core::mem::replace(&mut g_raw[n][m][e], Tensor::zeros(&[1]));
                    if spec.has_relu {
                        relu_backward_in_place(&self.raw[n][m][e], &mut g_pre);
                    }
                    let (w, _) = model.block_params(m);
                    let cg = conv2d_backward(&self.inputs[n][m][e], spec, w, &g_pre)?;
                    grads[2 * m].add_assign(&cg.weights);
                    grads[2 * m + 1].add_assign(&cg.bias);
                    if m > 0 {
                        g_out[n][m - 1][e].add_assign(&cg.input);
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Forward/backward pairing with an explicit state check: `backward` needs a
/// preceding `forward` and consumes it.
#[derive(Debug, Default)]
pub struct GradientTape {
    recorded: Option<LossGraph>,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, model: &Model, sets: &[FrameSet], label: usize, weights: &[f64]) -> Result<f64> {
        let g = forward_loss(model, sets, label, weights)?;
        let loss = g.loss;
        self.recorded = Some(g);
        Ok(loss)
    }

    pub fn backward(&mut self, model: &Model) -> Result<Vec<Tensor>> {
        let g = self
            .recorded
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        g.backward(model)
    }
}
