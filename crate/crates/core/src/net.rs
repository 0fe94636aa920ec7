//! The 8-layer patch classifier: three conv + max-pool stages followed by two
//! fully connected layers.
//!
//! ```text
//! input n×n ─ c1 (7×7) ─ p1 ─ c2 (5×5) ─ p2 ─ c3 (3×3) ─ p3 ─ fc4 ─ fc5 (2)
//! ```
//!
//! Each conv and fc4 is followed by a ReLU. The prunable layers (c1, c2, c3,
//! fc4) carry a keep-mask over their output maps. A masked map produces an
//! exactly-zero activation, so its downstream contribution vanishes; `shrink`
//! then removes the map and its fan-out for real.
//!
//! Pooling uses ceiling rounding (windows truncated at the bottom/right
//! edge). For 32×32 patches this yields the spatial chain
//! 32 → 26 → 13 → 9 → 4 → 2 → 1, so fc4 sees one value per c3 map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::{
    affine_backward, affine_forward, affine_forward_grouped, conv2d_backward_impl,
    conv2d_forward, maxpool_backward, maxpool_forward, mean_xent, pool_extent, softmax_rows,
    PoolIndices, Tensor,
};

pub const KERNEL_SIZES: [usize; 3] = [7, 5, 3];
pub const POOL_KERNEL: usize = 3;
pub const POOL_STRIDE: usize = 2;
pub const CLASSES: usize = 2;
pub const DEFAULT_PATCH_SIZE: usize = 32;

/// Map counts (c1, c2, c3, fc4) of the reference network and its pruned variants.
pub const TABLE1: [(&str, [usize; 4]); 8] = [
    ("N", [100, 75, 50, 200]),
    ("N1", [90, 75, 40, 150]),
    ("N2", [65, 75, 40, 150]),
    ("N3", [90, 60, 40, 150]),
    ("N4", [90, 75, 30, 150]),
    ("N5", [90, 75, 40, 110]),
    ("N6", [65, 60, 30, 110]),
    ("N7", [30, 20, 10, 10]),
];

/// A prunable layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    C1,
    C2,
    C3,
    Fc4,
}

impl LayerId {
    /// Bottom-up order.
    pub const ALL: [LayerId; 4] = [LayerId::C1, LayerId::C2, LayerId::C3, LayerId::Fc4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerId::C1 => "c1",
            LayerId::C2 => "c2",
            LayerId::C3 => "c3",
            LayerId::Fc4 => "fc4",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        LayerId::ALL.into_iter().find(|l| l.name() == name)
    }
}

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Output maps of c1, c2, c3 and units of fc4.
    pub maps: [usize; 4],
    pub patch_size: usize,
}

impl NetworkConfig {
    pub fn new(maps: [usize; 4]) -> Self {
        NetworkConfig {
            maps,
            patch_size: DEFAULT_PATCH_SIZE,
        }
    }

    /// The unpruned reference network.
    pub fn reference() -> Self {
        NetworkConfig::new(TABLE1[0].1)
    }

    /// Look up a named column (`N`, `N1` … `N7`).
    pub fn table1(name: &str) -> Option<Self> {
        TABLE1
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, maps)| NetworkConfig::new(*maps))
    }

    pub fn with_patch_size(mut self, n: usize) -> Self {
        self.patch_size = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.maps.iter().any(|&m| m == 0) {
            return Err(Error::input(format!(
                "every layer needs at least one map, got {:?}",
                self.maps
            )));
        }
        let mut s = self.patch_size;
        for k in KERNEL_SIZES {
            if s < k {
                return Err(Error::input(format!(
                    "patch size {} too small for the conv chain",
                    self.patch_size
                )));
            }
            s = pool_extent(s - k + 1, POOL_KERNEL, POOL_STRIDE);
        }
        Ok(())
    }

    /// `(conv output extent, pooled extent)` per conv stage.
    pub fn spatial(&self) -> [(usize, usize); 3] {
        let mut s = self.patch_size;
        let mut out = [(0, 0); 3];
        for (i, k) in KERNEL_SIZES.into_iter().enumerate() {
            let c = s - k + 1;
            s = pool_extent(c, POOL_KERNEL, POOL_STRIDE);
            out[i] = (c, s);
        }
        out
    }

    /// Number of fc4 inputs contributed by each c3 map.
    pub fn flatten_group(&self) -> usize {
        let p = self.spatial()[2].1;
        p * p
    }

    pub fn fc4_inputs(&self) -> usize {
        self.maps[2] * self.flatten_group()
    }

    /// Parameter count per layer (c1, c2, c3, fc4, fc5) for the given
    /// kept-map counts, kernels + weights + biases.
    pub fn param_count_for(&self, kept: [usize; 4]) -> ParamCount {
        let mut per_layer = [0usize; 5];
        let mut fan = 1;
        for (i, k) in KERNEL_SIZES.into_iter().enumerate() {
            per_layer[i] = kept[i] * fan * k * k + kept[i];
            fan = kept[i];
        }
        let d = kept[2] * self.flatten_group();
        per_layer[3] = kept[3] * d + kept[3];
        per_layer[4] = CLASSES * kept[3] + CLASSES;
        ParamCount {
            per_layer,
            total: per_layer.iter().sum(),
        }
    }

    pub fn param_count(&self) -> ParamCount {
        self.param_count_for(self.maps)
    }
}

/// Parameter counts for c1, c2, c3, fc4, fc5 and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub per_layer: [usize; 5],
    pub total: usize,
}

/// Weights (conv kernels or affine matrix) and bias of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    fn zeros_like(&self) -> Self {
        LayerParams {
            weights: Tensor::zeros(self.weights.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    /// Number of output maps / units.
    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }
}

/// Keep-masks of the four prunable layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Masks(pub [Vec<bool>; 4]);

impl Masks {
    pub fn all_kept(maps: [usize; 4]) -> Self {
        Masks(maps.map(|m| vec![true; m]))
    }

    pub fn layer(&self, layer: LayerId) -> &[bool] {
        &self.0[layer.index()]
    }

    pub fn layer_mut(&mut self, layer: LayerId) -> &mut Vec<bool> {
        &mut self.0[layer.index()]
    }

    pub fn kept(&self, layer: LayerId) -> usize {
        self.0[layer.index()].iter().filter(|&&k| k).count()
    }

    pub fn kept_counts(&self) -> [usize; 4] {
        LayerId::ALL.map(|l| self.kept(l))
    }

    pub fn is_all_kept(&self) -> bool {
        self.0.iter().all(|m| m.iter().all(|&k| k))
    }
}

/// Intermediate values recorded for backpropagation.
pub struct Trace {
    input: Tensor,
    /// Post-ReLU, post-mask conv outputs.
    conv: Vec<Tensor>,
    pool_idx: Vec<PoolIndices>,
    pooled: Vec<Tensor>,
    flat: Tensor,
    fc4: Tensor,
    logits: Tensor,
}

impl Trace {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    /// c1, c2, c3, fc4, fc5
    layers: Vec<LayerParams>,
    masks: Masks,
}

/// Conv / affine stages in order; stage 4 (fc5) emits logits.
pub(crate) const STAGES: usize = 5;

impl Network {
    /// Initialize with zero-mean Gaussian weights of standard deviation
    /// `1/sqrt(fan_in)` and zero biases.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(STAGES);
        let mut fan_channels = 1;
        for (i, k) in KERNEL_SIZES.into_iter().enumerate() {
            let shape = [config.maps[i], fan_channels, k, k];
            layers.push(init_layer(&shape, fan_channels * k * k, &mut rng));
            fan_channels = config.maps[i];
        }
        let d = config.fc4_inputs();
        layers.push(init_layer(&[config.maps[3], d], d, &mut rng));
        layers.push(init_layer(&[CLASSES, config.maps[3]], config.maps[3], &mut rng));
        Ok(Network {
            config,
            layers,
            masks: Masks::all_kept(config.maps),
        })
    }

    /// Assemble from explicit parameters (used by checkpoint loading).
    pub fn from_parts(config: NetworkConfig, layers: Vec<LayerParams>, masks: Masks) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        if layers.len() != STAGES {
            return Err(Error::shape(format!("expected {STAGES} layers, got {}", layers.len())));
        }
        for (i, (l, (ws, bs))) in layers.iter().zip(&expected).enumerate() {
            if l.weights.shape() != ws.as_slice() || l.bias.shape() != bs.as_slice() {
                return Err(Error::shape(format!(
                    "layer {i}: weights {:?} / bias {:?}, expected {ws:?} / {bs:?}",
                    l.weights.shape(),
                    l.bias.shape()
                )));
            }
        }
        for l in LayerId::ALL {
            if masks.layer(l).len() != config.maps[l.index()] {
                return Err(Error::shape(format!(
                    "{l} mask has {} entries for {} maps",
                    masks.layer(l).len(),
                    config.maps[l.index()]
                )));
            }
        }
        let mut net = Network {
            config,
            layers,
            masks: Masks::all_kept(config.maps),
        };
        for l in LayerId::ALL {
            net.set_mask(l, masks.layer(l).to_vec())?;
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn masks(&self) -> &Masks {
        &self.masks
    }

    /// Parameters of c1, c2, c3, fc4, fc5.
    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn layer(&self, layer: LayerId) -> &LayerParams {
        &self.layers[layer.index()]
    }

    /// Permanently discard the maps whose mask entry is `false`: their
    /// kernels/weights and biases are set to zero. Re-enabling a map leaves
    /// its (zeroed) parameters as they are.
    pub fn set_mask(&mut self, layer: LayerId, mask: Vec<bool>) -> Result<()> {
        let n = self.config.maps[layer.index()];
        if mask.len() != n {
            return Err(Error::shape(format!(
                "{layer} mask has {} entries for {n} maps",
                mask.len()
            )));
        }
        let params = &mut self.layers[layer.index()];
        let row = params.weights.len() / n;
        for (m, &keep) in mask.iter().enumerate() {
            if !keep {
                params.weights.data_mut()[m * row..(m + 1) * row].fill(0.0);
                params.bias.data_mut()[m] = 0.0;
            }
        }
        self.masks.0[layer.index()] = mask;
        Ok(())
    }

    /// Mask the given map indices of `layer` (in addition to any already masked).
    pub fn discard(&mut self, layer: LayerId, maps: &[usize]) -> Result<()> {
        let mut mask = self.masks.layer(layer).to_vec();
        for &m in maps {
            if m >= mask.len() {
                return Err(Error::input(format!("{layer} has no map {m}")));
            }
            mask[m] = false;
        }
        self.set_mask(layer, mask)
    }

    /// Parameter count of the kept structure (what `shrink` would leave).
    pub fn param_count(&self) -> ParamCount {
        self.config.param_count_for(self.masks.kept_counts())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let n = self.config.patch_size;
        if c != 1 || h != n || w != n {
            return Err(Error::shape(format!(
                "expected B×1×{n}×{n} patches, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Membrane/non-membrane probabilities, `B × 2`.
    pub fn forward(&self, patches: &Tensor) -> Result<Tensor> {
        softmax_rows(&self.logits(patches)?)
    }

    pub fn logits(&self, patches: &Tensor) -> Result<Tensor> {
        self.logits_masked(&self.masks, patches)
    }

    /// Logits with a substitute mask set; the network itself is untouched.
    pub fn logits_masked(&self, masks: &Masks, patches: &Tensor) -> Result<Tensor> {
        self.check_input(patches)?;
        self.check_masks(masks)?;
        let pre = self.stage_pre(0, patches)?;
        self.forward_from(masks, 0, pre)
    }

    pub(crate) fn check_masks(&self, masks: &Masks) -> Result<()> {
        for l in LayerId::ALL {
            if masks.layer(l).len() != self.config.maps[l.index()] {
                return Err(Error::shape(format!("{l} mask length mismatch")));
            }
        }
        Ok(())
    }

    /// Pre-activation of `stage` given that stage's input.
    pub(crate) fn stage_pre(&self, stage: usize, input: &Tensor) -> Result<Tensor> {
        let p = &self.layers[stage];
        match stage {
            0..=2 => conv2d_forward(input, &p.weights, &p.bias),
            3 => affine_forward_grouped(input, &p.weights, &p.bias, self.config.flatten_group()),
            _ => affine_forward(input, &p.weights, &p.bias),
        }
    }

    /// Activate stage `stage` (ReLU, mask and pooling where applicable) and
    /// return the input of the following stage.
    pub(crate) fn stage_post(&self, masks: &Masks, stage: usize, pre: Tensor) -> Result<Tensor> {
        let act = relu_mask(pre, &masks.0[stage]);
        match stage {
            0 | 1 => Ok(maxpool_forward(&act, POOL_KERNEL, POOL_STRIDE)?.0),
            2 => {
                let pooled = maxpool_forward(&act, POOL_KERNEL, POOL_STRIDE)?.0;
                let b = pooled.shape()[0];
                let d = pooled.len() / b;
                pooled.reshape(&[b, d])
            }
            _ => Ok(act),
        }
    }

    /// Run the network from the pre-activation of `stage` to the logits.
    pub(crate) fn forward_from(&self, masks: &Masks, stage: usize, pre: Tensor) -> Result<Tensor> {
        let mut pre = pre;
        for s in stage..STAGES - 1 {
            let next_in = self.stage_post(masks, s, pre)?;
            pre = self.stage_pre(s + 1, &next_in)?;
        }
        Ok(pre)
    }

    /// Forward pass keeping everything backpropagation needs.
    pub fn forward_trace(&self, patches: &Tensor) -> Result<Trace> {
        self.check_input(patches)?;
        let masks = &self.masks;
        let mut conv = Vec::with_capacity(3);
        let mut pool_idx = Vec::with_capacity(3);
        let mut pooled = Vec::with_capacity(3);
        let mut x = patches.clone();
        for s in 0..3 {
            let act = relu_mask(self.stage_pre(s, &x)?, &masks.0[s]);
            let (p, idx) = maxpool_forward(&act, POOL_KERNEL, POOL_STRIDE)?;
            conv.push(act);
            pool_idx.push(idx);
            pooled.push(p.clone());
            x = p;
        }
        let b = x.shape()[0];
        let d = x.len() / b;
        let flat = x.reshape(&[b, d])?;
        let fc4 = relu_mask(self.stage_pre(3, &flat)?, &masks.0[3]);
        let logits = self.stage_pre(4, &fc4)?;
        Ok(Trace {
            input: patches.clone(),
            conv,
            pool_idx,
            pooled,
            flat,
            fc4,
            logits,
        })
    }

    /// Parameter gradients given the gradient of the loss w.r.t. the logits.
    pub fn backward(&self, trace: &Trace, grad_logits: &Tensor) -> Result<Vec<LayerParams>> {
        let mut grads: Vec<LayerParams> = self.layers.iter().map(LayerParams::zeros_like).collect();

        let (g4, gw, gb) = affine_backward(grad_logits, &trace.fc4, &self.layers[4].weights)?;
        grads[4] = LayerParams { weights: gw, bias: gb };

        let g4 = relu_grad(g4, &trace.fc4);
        let (gflat, gw, gb) = affine_backward(&g4, &trace.flat, &self.layers[3].weights)?;
        grads[3] = LayerParams { weights: gw, bias: gb };

        let mut g = gflat.reshape(trace.pooled[2].shape())?;
        for s in (0..3).rev() {
            let gconv = relu_grad(maxpool_backward(&g, &trace.pool_idx[s])?, &trace.conv[s]);
            let input = if s == 0 { &trace.input } else { &trace.pooled[s - 1] };
            let (gi, gw, gb) = conv2d_backward_impl(&gconv, input, &self.layers[s].weights, s > 0)?;
            grads[s] = LayerParams { weights: gw, bias: gb };
            if let Some(gi) = gi {
                g = gi;
            }
        }
        Ok(grads)
    }

    /// Mean data loss (cross-entropy) over the given batches: each batch's
    /// mean, then the mean over batches.
    pub fn loss(&self, batches: &[Batch]) -> Result<f64> {
        self.loss_masked(&self.masks, batches)
    }

    pub fn loss_masked(&self, masks: &Masks, batches: &[Batch]) -> Result<f64> {
        if batches.is_empty() {
            return Err(Error::input("loss needs at least one batch"));
        }
        let mut total = 0.0;
        for b in batches {
            let logits = self.logits_masked(masks, &b.inputs)?;
            total += mean_xent(&logits, &b.labels)?;
        }
        Ok(total / batches.len() as f64)
    }

    /// `Σ w²` over every parameter of the kept structure.
    pub fn l2_norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.sum_squares() + l.bias.sum_squares()).sum()
    }

    /// `Σ w²` with the maps masked out by `masks` treated as zero.
    pub fn l2_norm_sq_masked(&self, masks: &Masks) -> f64 {
        let mut total = 0.0;
        for (i, l) in self.layers.iter().enumerate() {
            if i < 4 {
                let n = l.outputs();
                let row = l.weights.len() / n;
                for m in 0..n {
                    if masks.0[i][m] {
                        total += l.weights.data()[m * row..(m + 1) * row]
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            + l.bias.data()[m] * l.bias.data()[m];
                    }
                }
            } else {
                total += l.weights.sum_squares() + l.bias.sum_squares();
            }
        }
        total
    }

    /// Physically remove masked maps together with their downstream fan-in.
    /// The result has all-true masks and is forward-equivalent.
    pub fn shrink(&self) -> Result<Network> {
        let keep: Vec<Vec<usize>> = LayerId::ALL
            .iter()
            .map(|&l| {
                self.masks
                    .layer(l)
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &k)| k.then_some(i))
                    .collect::<Vec<_>>()
            })
            .collect();
        if let Some(l) = LayerId::ALL.iter().find(|l| keep[l.index()].is_empty()) {
            return Err(Error::Structural(format!("layer {l} would keep no maps")));
        }
        let maps = [keep[0].len(), keep[1].len(), keep[2].len(), keep[3].len()];
        let config = NetworkConfig { maps, ..self.config };
        let mut layers = Vec::with_capacity(STAGES);

        let all_inputs = [0usize];
        for s in 0..3 {
            let inputs: &[usize] = if s == 0 { &all_inputs } else { &keep[s - 1] };
            layers.push(select_conv(&self.layers[s], &keep[s], inputs));
        }
        let group = self.config.flatten_group();
        let cols: Vec<usize> = keep[2]
            .iter()
            .flat_map(|&c| c * group..(c + 1) * group)
            .collect();
        layers.push(select_affine(&self.layers[3], &keep[3], &cols));
        let all_classes: Vec<usize> = (0..CLASSES).collect();
        layers.push(select_affine(&self.layers[4], &all_classes, &keep[3]));

        Ok(Network {
            config,
            layers,
            masks: Masks::all_kept(maps),
        })
    }
}

fn expected_shapes(config: &NetworkConfig) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut out = Vec::with_capacity(STAGES);
    let mut fan = 1;
    for (i, k) in KERNEL_SIZES.into_iter().enumerate() {
        out.push((vec![config.maps[i], fan, k, k], vec![config.maps[i]]));
        fan = config.maps[i];
    }
    out.push((vec![config.maps[3], config.fc4_inputs()], vec![config.maps[3]]));
    out.push((vec![CLASSES, config.maps[3]], vec![CLASSES]));
    out
}

fn init_layer(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> LayerParams {
    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    LayerParams {
        weights: Tensor::from_parts(shape.to_vec(), data),
        bias: Tensor::zeros(&[shape[0]]),
    }
}

/// ReLU followed by the keep-mask along axis 1. Non-positive and masked
/// entries become exactly `+0.0`.
fn relu_mask(mut t: Tensor, mask: &[bool]) -> Tensor {
    let maps = t.shape()[1];
    let per_map = t.len() / (t.shape()[0] * maps);
    for (i, chunk) in t.data_mut().chunks_exact_mut(per_map).enumerate() {
        if mask[i % maps] {
            for v in chunk {
                if !(*v > 0.0) {
                    *v = 0.0;
                }
            }
        } else {
            chunk.fill(0.0);
        }
    }
    t
}

fn relu_grad(mut g: Tensor, activated: &Tensor) -> Tensor {
    for (gv, &a) in g.data_mut().iter_mut().zip(activated.data()) {
        if !(a > 0.0) {
            *gv = 0.0;
        }
    }
    g
}

fn select_conv(p: &LayerParams, outs: &[usize], ins: &[usize]) -> LayerParams {
    let [_, c, kh, kw] = p.weights.shape()[..] else {
        unreachable!()
    };
    let kk = kh * kw;
    let mut data = Vec::with_capacity(outs.len() * ins.len() * kk);
    for &m in outs {
        for &ci in ins {
            data.extend_from_slice(&p.weights.data()[(m * c + ci) * kk..][..kk]);
        }
    }
    LayerParams {
        weights: Tensor::from_parts(vec![outs.len(), ins.len(), kh, kw], data),
        bias: Tensor::from_parts(vec![outs.len()], outs.iter().map(|&m| p.bias.data()[m]).collect()),
    }
}

fn select_affine(p: &LayerParams, rows: &[usize], cols: &[usize]) -> LayerParams {
    let d = p.weights.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        let row = &p.weights.data()[r * d..(r + 1) * d];
        data.extend(cols.iter().map(|&c| row[c]));
    }
    LayerParams {
        weights: Tensor::from_parts(vec![rows.len(), cols.len()], data),
        bias: Tensor::from_parts(vec![rows.len()], rows.iter().map(|&r| p.bias.data()[r]).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_patches(b: usize, n: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![b, 1, n, n], (0..b * n * n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn reference_config_and_counts() {
        let n = NetworkConfig::table1("N").unwrap();
        assert_eq!(n.maps, [100, 75, 50, 200]);
        assert_eq!(n.flatten_group(), 1);
        assert_eq!(n.spatial(), [(26, 13), (9, 4), (2, 1)]);
        let pc = n.param_count();
        assert_eq!(pc.per_layer, [5000, 187_575, 33_800, 10_200, 402]);
        assert_eq!(pc.total, 236_977);
        assert_eq!(NetworkConfig::table1("N7").unwrap().param_count().total, 18_462);
        assert!(NetworkConfig::table1("N8").is_none());
    }

    #[test]
    fn build_shapes() {
        let net = Network::build(NetworkConfig::reference(), 1).unwrap();
        assert_eq!(net.layers()[0].weights.shape(), &[100, 1, 7, 7]);
        assert_eq!(net.layers()[3].weights.shape(), &[200, 50]);
        let n7 = Network::build(NetworkConfig::table1("N7").unwrap(), 1).unwrap();
        let shapes: Vec<&[usize]> = n7.layers().iter().map(|l| l.weights.shape()).collect();
        assert_eq!(
            shapes,
            vec![&[30, 1, 7, 7][..], &[20, 30, 5, 5], &[10, 20, 3, 3], &[10, 10], &[2, 10]]
        );
        assert!(n7.layers().iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = NetworkConfig::new([4, 3, 2, 5]);
        assert_eq!(Network::build(cfg, 9).unwrap(), Network::build(cfg, 9).unwrap());
        assert_ne!(Network::build(cfg, 9).unwrap(), Network::build(cfg, 10).unwrap());
    }

    #[test]
    fn invalid_configs() {
        assert!(Network::build(NetworkConfig::new([0, 3, 2, 5]), 0).is_err());
        assert!(Network::build(NetworkConfig::new([1, 1, 1, 1]).with_patch_size(25), 0).is_err());
        assert!(Network::build(NetworkConfig::new([1, 1, 1, 1]).with_patch_size(26), 0).is_ok());
    }

    #[test]
    fn probabilities_are_normalized() {
        let net = Network::build(NetworkConfig::new([6, 5, 4, 8]), 3).unwrap();
        let p = net.forward(&random_patches(5, 32, 0)).unwrap();
        assert_eq!(p.shape(), &[5, 2]);
        for row in p.data().chunks(2) {
            assert!(row.iter().all(|v| v.is_finite()));
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_patch_size_is_shape_error() {
        let net = Network::build(NetworkConfig::new([2, 2, 2, 2]), 0).unwrap();
        assert!(matches!(net.forward(&random_patches(1, 30, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn fully_masked_c3_equals_zeroed_parameters() {
        let mut net = Network::build(NetworkConfig::new([4, 4, 3, 6]), 5).unwrap();
        for b in net.layers_mut()[3].bias.data_mut() {
            *b = 0.3;
        }
        let x = random_patches(4, 32, 1);
        let mut masks = net.masks().clone();
        *masks.layer_mut(LayerId::C3) = vec![false; 3];
        let masked = net.logits_masked(&masks, &x).unwrap();

        let mut zeroed = net.clone();
        zeroed.layers_mut()[2].weights.data_mut().fill(0.0);
        zeroed.layers_mut()[2].bias.data_mut().fill(0.0);
        let z = zeroed.logits(&x).unwrap();
        assert_eq!(masked, z);
        // nothing upstream matters any more: every row is identical
        let first = &masked.data()[..2];
        assert!(masked.data().chunks(2).all(|r| r == first));
    }

    #[test]
    fn shrink_identity_when_nothing_masked() {
        let net = Network::build(NetworkConfig::new([3, 2, 2, 4]), 2).unwrap();
        assert_eq!(net.shrink().unwrap(), net);
    }

    #[test]
    fn shrink_matches_masked_forward() {
        let mut net = Network::build(NetworkConfig::new([6, 5, 4, 7]), 11).unwrap();
        net.discard(LayerId::C1, &[0, 3]).unwrap();
        net.discard(LayerId::C2, &[4]).unwrap();
        net.discard(LayerId::C3, &[1]).unwrap();
        net.discard(LayerId::Fc4, &[2, 5, 6]).unwrap();
        let small = net.shrink().unwrap();
        assert_eq!(small.config().maps, [4, 4, 3, 4]);
        assert!(small.masks().is_all_kept());
        assert_eq!(small.param_count(), net.param_count());
        let x = random_patches(8, 32, 4);
        let d = net.forward(&x).unwrap().max_abs_diff(&small.forward(&x).unwrap());
        assert!(d < 1e-10, "difference {d}");
    }

    #[test]
    fn shrink_rejects_empty_layer() {
        let mut net = Network::build(NetworkConfig::new([2, 2, 2, 2]), 0).unwrap();
        net.set_mask(LayerId::C2, vec![false, false]).unwrap();
        assert!(matches!(net.shrink(), Err(Error::Structural(_))));
    }

    #[test]
    fn set_mask_zeroes_parameters() {
        let mut net = Network::build(NetworkConfig::new([3, 2, 2, 2]), 0).unwrap();
        net.discard(LayerId::C1, &[1]).unwrap();
        let w = &net.layers()[0].weights.data()[49..98];
        assert!(w.iter().all(|&v| v == 0.0));
        assert!(net.discard(LayerId::C1, &[3]).is_err());
        assert!(net.set_mask(LayerId::C1, vec![true]).is_err());
    }

    #[test]
    fn empty_batch_list_is_input_error() {
        let net = Network::build(NetworkConfig::new([2, 2, 2, 2]), 0).unwrap();
        assert!(matches!(net.loss(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn masked_l2_ignores_discarded_maps() {
        let mut net = Network::build(NetworkConfig::new([3, 2, 2, 2]), 4).unwrap();
        let mut masks = net.masks().clone();
        masks.layer_mut(LayerId::C1)[2] = false;
        let expect = {
            net.discard(LayerId::C1, &[2]).unwrap();
            net.l2_norm_sq()
        };
        let fresh = Network::build(NetworkConfig::new([3, 2, 2, 2]), 4).unwrap();
        assert!((fresh.l2_norm_sq_masked(&masks) - expect).abs() < 1e-12);
    }
}
