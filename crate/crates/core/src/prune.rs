//! Feature-map ordering and pruning.
//!
//! The greedy ordering of a layer repeatedly masks the map whose removal
//! leaves the smallest estimated training loss. Layers are ordered bottom-up
//! and each layer is pruned to its keep-count before the next one is
//! ordered. Two baselines share the same loss bookkeeping: an L1-norm
//! ranking (map-level adaptation of magnitude pruning) and a seeded random
//! permutation.
//!
//! Loss evaluation has two routes. [`order_layer_reference`] re-runs the
//! masked network for every candidate. [`order_layer`] caches, per sample,
//! each map's contribution to the next stage's pre-activation and only
//! re-sums the kept contributions, in the same order the plain forward pass
//! adds them, so both routes produce bit-identical losses.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, PatchDataset};
use crate::error::{Error, Result};
use crate::net::{LayerId, Masks, Network};
use crate::tensor::{affine_group_partial, conv2d_channel_partial, xent_row, Tensor};

/// Partial-sum cache budget for the fast route; above it partials are
/// recomputed every greedy step.
const CACHE_BYTES: usize = 512 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Sparsity,
    Random,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Sparsity => "sparsity",
            Strategy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "greedy" => Some(Strategy::Greedy),
            "sparsity" => Some(Strategy::Sparsity),
            "random" => Some(Strategy::Random),
            _ => None,
        }
    }
}

/// How the training loss is estimated during ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEstimator {
    pub batch_count: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Add `λ‖W‖²` of the kept structure to the data loss.
    pub l2: Option<f64>,
}

impl Default for LossEstimator {
    fn default() -> Self {
        LossEstimator {
            batch_count: 8,
            batch_size: 256,
            seed: 0,
            l2: None,
        }
    }
}

impl LossEstimator {
    pub fn with_seed(&self, seed: u64) -> Self {
        LossEstimator { seed, ..self.clone() }
    }

    pub fn sample(&self, data: &PatchDataset) -> Result<LossSample> {
        if let Some(l) = self.l2 {
            if !(l >= 0.0) {
                return Err(Error::input(format!("l2 coefficient {l} must be >= 0")));
            }
        }
        Ok(LossSample {
            batches: data.sample_batches(self.batch_count, self.batch_size, self.seed)?,
            seed: self.seed,
            l2: self.l2,
        })
    }
}

/// A fixed set of mini-batches every loss in one ordering is measured on.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSample {
    pub batches: Vec<Batch>,
    pub seed: u64,
    pub l2: Option<f64>,
}

impl LossSample {
    pub fn from_batches(batches: Vec<Batch>, seed: u64) -> Self {
        LossSample {
            batches,
            seed,
            l2: None,
        }
    }

    /// Loss of `net` with `masks` substituted for its own.
    pub fn loss(&self, net: &Network, masks: &Masks) -> Result<f64> {
        let data = net.loss_masked(masks, &self.batches)?;
        Ok(match self.l2 {
            Some(l) => data + l * net.l2_norm_sq_masked(masks),
            None => data,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrderStep {
    pub feature: usize,
    /// Loss with this feature and every earlier one masked.
    pub loss: f64,
}

/// Discard order of one layer's maps, with the loss after each discard.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneOrdering {
    pub layer: LayerId,
    pub strategy: Strategy,
    /// Seed of the batches the losses were measured on.
    pub seed: u64,
    /// Loss before any feature of this ordering was masked.
    pub base_loss: f64,
    pub steps: Vec<OrderStep>,
}

impl PruneOrdering {
    pub fn features(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.feature).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,feature_index,cumulative_loss\n");
        for (i, st) in self.steps.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", i + 1, st.feature, st.loss);
        }
        s
    }
}

/// Per-layer keep-counts and how orderings are produced.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunePlan {
    pub keep: [usize; 4],
    pub strategy: Strategy,
    pub estimator: LossEstimator,
}

impl PrunePlan {
    pub fn validate(&self, net: &Network) -> Result<()> {
        for l in LayerId::ALL {
            let (k, n) = (self.keep[l.index()], net.config().maps[l.index()]);
            if k == 0 || k > n {
                return Err(Error::input(format!("{l}: keep {k} outside 1..={n}")));
            }
        }
        Ok(())
    }

    /// Batch seed used for `layer`.
    pub fn layer_seed(&self, layer: LayerId) -> u64 {
        self.estimator.seed.wrapping_add(layer.index() as u64)
    }
}

/// Split the layer's maps into already-masked ones and live ones.
fn partition(net: &Network, layer: LayerId) -> Result<(Vec<usize>, Vec<usize>)> {
    let (mut dead, mut live) = (Vec::new(), Vec::new());
    for (i, &k) in net.masks().layer(layer).iter().enumerate() {
        if k { live.push(i) } else { dead.push(i) }
    }
    if live.is_empty() {
        return Err(Error::input(format!("{layer} is already fully masked")));
    }
    Ok((dead, live))
}

/// Greedy driver shared by both evaluation routes. `eval(cur, cands)`
/// returns the loss of `cur` with each candidate additionally masked.
fn greedy(
    net: &Network,
    layer: LayerId,
    sample: &LossSample,
    mut eval: impl FnMut(&Masks, &[usize]) -> Result<Vec<f64>>,
) -> Result<PruneOrdering> {
    let (dead, mut live) = partition(net, layer)?;
    let mut cur = net.masks().clone();
    let base_loss = sample.loss(net, &cur)?;
    let mut steps: Vec<OrderStep> = dead.iter().map(|&f| OrderStep { feature: f, loss: base_loss }).collect();
    while !live.is_empty() {
        let losses = eval(&cur, &live)?;
        let mut best = 0;
        for (j, &l) in losses.iter().enumerate() {
            if l < losses[best] {
                best = j;
            }
        }
        let f = live.remove(best);
        cur.layer_mut(layer)[f] = false;
        steps.push(OrderStep {
            feature: f,
            loss: losses[best],
        });
    }
    Ok(PruneOrdering {
        layer,
        strategy: Strategy::Greedy,
        seed: sample.seed,
        base_loss,
        steps,
    })
}

/// Greedy ordering evaluated by re-running the masked network for every
/// candidate.
pub fn order_layer_reference(net: &Network, layer: LayerId, sample: &LossSample) -> Result<PruneOrdering> {
    greedy(net, layer, sample, |cur, cands| {
        cands
            .iter()
            .map(|&f| {
                let mut m = cur.clone();
                m.layer_mut(layer)[f] = false;
                sample.loss(net, &m)
            })
            .collect()
    })
}

/// Greedy ordering using cached per-map partial sums. Identical results to
/// [`order_layer_reference`].
pub fn order_layer(net: &Network, layer: LayerId, sample: &LossSample) -> Result<PruneOrdering> {
    partition(net, layer)?;
    let mut fast = FastEval::new(net, layer, sample, CACHE_BYTES)?;
    greedy(net, layer, sample, |cur, cands| fast.losses(cur, cands))
}

/// Evaluate the loss along a fixed discard order (already-masked maps
/// first, in index order).
fn fixed_order(
    net: &Network,
    layer: LayerId,
    sample: &LossSample,
    strategy: Strategy,
    order: Vec<usize>,
) -> Result<PruneOrdering> {
    let (dead, _) = partition(net, layer)?;
    let mut fast = FastEval::new(net, layer, sample, CACHE_BYTES)?;
    let mut cur = net.masks().clone();
    let base_loss = sample.loss(net, &cur)?;
    let mut steps: Vec<OrderStep> = dead.iter().map(|&f| OrderStep { feature: f, loss: base_loss }).collect();
    for f in order {
        let loss = fast.losses(&cur, &[f])?[0];
        cur.layer_mut(layer)[f] = false;
        steps.push(OrderStep { feature: f, loss });
    }
    Ok(PruneOrdering {
        layer,
        strategy,
        seed: sample.seed,
        base_loss,
        steps,
    })
}

/// L1 norm of each map's kernel slice plus its bias.
pub fn map_l1_norms(net: &Network, layer: LayerId) -> Vec<f64> {
    let p = net.layer(layer);
    let n = p.outputs();
    let row = p.weights.len() / n;
    (0..n)
        .map(|m| {
            p.weights.data()[m * row..(m + 1) * row].iter().map(|v| v.abs()).sum::<f64>() + p.bias.data()[m].abs()
        })
        .collect()
}

/// Ascending L1 norm, lowest index first among equal norms.
pub fn sparsity_order_layer(net: &Network, layer: LayerId, sample: &LossSample) -> Result<PruneOrdering> {
    let (_, mut live) = partition(net, layer)?;
    let norms = map_l1_norms(net, layer);
    live.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    fixed_order(net, layer, sample, Strategy::Sparsity, live)
}

/// Uniformly random discard order from `seed`.
pub fn random_order_layer(net: &Network, layer: LayerId, sample: &LossSample, seed: u64) -> Result<PruneOrdering> {
    let (_, mut live) = partition(net, layer)?;
    live.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    fixed_order(net, layer, sample, Strategy::Random, live)
}

/// Re-evaluate every prefix loss of `ordering` on `sample` through the
/// plain masked forward pass, starting from the network's own masks.
pub fn replay(net: &Network, ordering: &PruneOrdering, sample: &LossSample) -> Result<Vec<f64>> {
    let mut m = net.masks().clone();
    ordering
        .steps
        .iter()
        .map(|s| {
            m.layer_mut(ordering.layer)[s.feature] = false;
            sample.loss(net, &m)
        })
        .collect()
}

fn order_by(
    net: &Network,
    layer: LayerId,
    sample: &LossSample,
    strategy: Strategy,
    seed: u64,
) -> Result<PruneOrdering> {
    match strategy {
        Strategy::Greedy => order_layer(net, layer, sample),
        Strategy::Sparsity => sparsity_order_layer(net, layer, sample),
        Strategy::Random => random_order_layer(net, layer, sample, seed),
    }
}

/// Order c1, c2, c3 and fc4 in turn, pruning each to its keep-count before
/// ordering the next. `net` itself is left untouched.
pub fn order_network(net: &Network, plan: &PrunePlan, data: &PatchDataset) -> Result<Vec<PruneOrdering>> {
    Ok(order_plans(net, std::slice::from_ref(plan), data)?.remove(0))
}

/// [`order_network`] for several plans. A layer's ordering depends only on
/// the strategy, the estimator and the keep-counts of the layers below it,
/// so plans agreeing on those share the work.
pub fn order_plans(net: &Network, plans: &[PrunePlan], data: &PatchDataset) -> Result<Vec<Vec<PruneOrdering>>> {
    type Key = (Strategy, LossEstimator, Vec<usize>);
    let mut memo: Vec<(Key, PruneOrdering)> = Vec::new();
    let mut out = Vec::with_capacity(plans.len());
    for plan in plans {
        plan.validate(net)?;
        let mut work = net.clone();
        let mut orderings = Vec::with_capacity(4);
        for layer in LayerId::ALL {
            let key: Key = (plan.strategy, plan.estimator.clone(), plan.keep[..layer.index()].to_vec());
            let ordering = match memo.iter().find(|(k, o)| *k == key && o.layer == layer) {
                Some((_, o)) => o.clone(),
                None => {
                    let seed = plan.layer_seed(layer);
                    let sample = plan.estimator.with_seed(seed).sample(data)?;
                    let o = order_by(&work, layer, &sample, plan.strategy, seed)
                        .map_err(|e| e.context(format!("ordering {layer}")))?;
                    memo.push((key, o.clone()));
                    o
                }
            };
            let drop = net.config().maps[layer.index()] - plan.keep[layer.index()];
            work.discard(layer, &ordering.features()[..drop])?;
            orderings.push(ordering);
        }
        out.push(orderings);
    }
    Ok(out)
}

/// Mask the first `n - keep` features of each ordering and physically
/// remove them.
pub fn apply_plan(net: &Network, orderings: &[PruneOrdering], keep: [usize; 4]) -> Result<Network> {
    let mut work = net.clone();
    for layer in LayerId::ALL {
        let n = net.config().maps[layer.index()];
        let k = keep[layer.index()];
        if k == 0 || k > n {
            return Err(Error::input(format!("{layer}: keep {k} outside 1..={n}")));
        }
        if k == n {
            continue;
        }
        let o = orderings
            .iter()
            .find(|o| o.layer == layer)
            .ok_or_else(|| Error::input(format!("no ordering for {layer}")))?;
        if o.steps.len() != n {
            return Err(Error::input(format!("{layer} ordering covers {} of {n} maps", o.steps.len())));
        }
        work.discard(layer, &o.features()[..n - k])?;
    }
    work.shrink()
}

/// Cached evaluation of "mask one more map of `layer`".
struct FastEval<'a> {
    net: &'a Network,
    /// Index of the stage whose pre-activation the maps feed.
    next: usize,
    /// Per-sample input of stage `next` under the starting masks.
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    batch_sizes: Vec<usize>,
    /// Input geometry of stage `next`: channels and per-channel extent.
    in_dims: (usize, usize, usize),
    out_shape: Vec<usize>,
    cache: Option<Vec<Vec<Vec<f64>>>>,
    l2: Option<f64>,
}

impl<'a> FastEval<'a> {
    fn new(net: &'a Network, layer: LayerId, sample: &LossSample, budget: usize) -> Result<Self> {
        if sample.batches.is_empty() {
            return Err(Error::input("loss needs at least one batch"));
        }
        let masks = net.masks();
        let next = layer.index() + 1;
        let (mut inputs, mut labels, mut batch_sizes) = (Vec::new(), Vec::new(), Vec::new());
        let mut in_dims = (0, 0, 0);
        for b in &sample.batches {
            if b.is_empty() {
                return Err(Error::input("empty loss batch"));
            }
            let mut x = b.inputs.clone();
            for s in 0..next {
                let pre = net.stage_pre(s, &x)?;
                x = net.stage_post(masks, s, pre)?;
            }
            let per = x.len() / b.len();
            in_dims = match x.shape() {
                [_, c, h, w] => (*c, *h, *w),
                _ => (net.config().maps[layer.index()], per / net.config().maps[layer.index()], 1),
            };
            inputs.extend(x.data().chunks_exact(per).map(<[f64]>::to_vec));
            labels.extend_from_slice(&b.labels);
            batch_sizes.push(b.len());
        }
        let w = &net.layers()[next].weights;
        let out_shape = match next {
            1 | 2 => {
                let k = w.shape()[2];
                vec![1, w.shape()[0], in_dims.1 - k + 1, in_dims.2 - k + 1]
            }
            _ => vec![1, w.shape()[0]],
        };
        let out_len: usize = out_shape.iter().product();
        let kept = masks.kept(layer);
        let bytes = inputs.len() * kept * out_len * 8;
        let mut fe = FastEval {
            net,
            next,
            inputs,
            labels,
            batch_sizes,
            in_dims,
            out_shape,
            cache: None,
            l2: sample.l2,
        };
        if bytes <= budget {
            let live: Vec<bool> = masks.layer(layer).to_vec();
            let cache = (0..fe.inputs.len())
                .map(|i| fe.partials(i, &live))
                .collect::<Result<Vec<_>>>()?;
            fe.cache = Some(cache);
        }
        Ok(fe)
    }

    /// Contribution of every live channel of sample `i` to the next
    /// stage's pre-activation (empty for dead channels).
    fn partials(&self, i: usize, live: &[bool]) -> Result<Vec<Vec<f64>>> {
        let x = &self.inputs[i];
        let (c_n, h, w) = self.in_dims;
        let p = &self.net.layers()[self.next];
        (0..c_n)
            .map(|c| {
                if !live[c] {
                    return Ok(Vec::new());
                }
                match self.next {
                    1 | 2 => conv2d_channel_partial(&x[c * h * w..(c + 1) * h * w], h, w, &p.weights, c),
                    _ => {
                        let d = x.len();
                        let group = d / c_n;
                        Ok(p.weights
                            .data()
                            .chunks_exact(d)
                            .map(|row| affine_group_partial(x, row, c, group))
                            .collect())
                    }
                }
            })
            .collect()
    }

    fn bias_plane(&self) -> Vec<f64> {
        let bias = self.net.layers()[self.next].bias.data();
        let len: usize = self.out_shape.iter().product();
        let per = len / bias.len();
        bias.iter().flat_map(|&b| std::iter::repeat(b).take(per)).collect()
    }

    fn losses(&mut self, cur: &Masks, cands: &[usize]) -> Result<Vec<f64>> {
        let layer = LayerId::ALL[self.next - 1];
        let kept: Vec<usize> = (0..cur.layer(layer).len()).filter(|&c| cur.layer(layer)[c]).collect();
        let pos: Vec<usize> = cands
            .iter()
            .map(|f| kept.iter().position(|k| k == f).expect("candidate must be kept"))
            .collect();
        let base = self.bias_plane();
        let mut per_sample = vec![vec![0.0; self.inputs.len()]; cands.len()];
        let mut snapshot: Vec<Option<Vec<f64>>> = vec![None; kept.len()];
        for i in 0..self.inputs.len() {
            let fresh;
            let parts: &Vec<Vec<f64>> = match &self.cache {
                Some(c) => &c[i],
                None => {
                    fresh = self.partials(i, cur.layer(layer))?;
                    &fresh
                }
            };
            let mut acc = base.clone();
            for (j, &c) in kept.iter().enumerate() {
                if pos.contains(&j) {
                    snapshot[j] = Some(acc.clone());
                }
                add(&mut acc, &parts[c]);
            }
            for (ci, &j) in pos.iter().enumerate() {
                let mut pre = snapshot[j].clone().unwrap();
                for &c in &kept[j + 1..] {
                    add(&mut pre, &parts[c]);
                }
                let pre = Tensor::new(self.out_shape.clone(), pre)?;
                let logits = self.net.forward_from(cur, self.next, pre)?;
                per_sample[ci][i] = xent_row(logits.data(), self.labels[i]);
            }
        }
        cands
            .iter()
            .zip(&per_sample)
            .map(|(&f, rows)| {
                let mut total = 0.0;
                let mut at = 0;
                for &b in &self.batch_sizes {
                    let mut t = 0.0;
                    for v in &rows[at..at + b] {
                        t += v;
                    }
                    at += b;
                    total += t / b as f64;
                }
                let data = total / self.batch_sizes.len() as f64;
                if !data.is_finite() {
                    return Err(Error::numeric("non-finite cross-entropy"));
                }
                Ok(match self.l2 {
                    Some(l) => {
                        let mut m = cur.clone();
                        m.layer_mut(layer)[f] = false;
                        data + l * self.net.l2_norm_sq_masked(&m)
                    }
                    None => data,
                })
            })
            .collect()
    }
}

#[inline]
fn add(acc: &mut [f64], p: &[f64]) {
    for (a, v) in acc.iter_mut().zip(p) {
        *a += *v;
    }
}
