#![allow(dead_code)]

use memprune::data::{extract_patches_in, synth_membranes, PatchDataset, Region, SynthParams, Split};
use memprune::net::{LayerParams, Masks};
use memprune::{LayerId, Network, NetworkConfig};

/// Straight-loop forward pass for one `n×n` patch, returning logits.
/// Valid cross-correlation, ReLU, 3×3 stride-2 max pooling with windows
/// clipped at the bottom/right edge, channel-major flattening.
pub fn naive_logits(net: &Network, patch: &[f64]) -> [f64; 2] {
    let n = net.config().patch_size;
    let masks = net.masks();
    let mut x = vec![patch.to_vec()];
    let mut side = n;
    for (s, layer) in net.layers()[..3].iter().enumerate() {
        let shape = layer.weights.shape();
        let (maps, chans, k) = (shape[0], shape[1], shape[2]);
        let out = side - k + 1;
        let mut y = Vec::with_capacity(maps);
        for m in 0..maps {
            let mut plane = vec![0.0; out * out];
            for (i, v) in plane.iter_mut().enumerate() {
                let (r, c) = (i / out, i % out);
                let mut acc = layer.bias.data()[m];
                for ch in 0..chans {
                    for dr in 0..k {
                        for dc in 0..k {
                            let w = layer.weights.data()[((m * chans + ch) * k + dr) * k + dc];
                            acc += w * x[ch][(r + dr) * side + c + dc];
                        }
                    }
                }
                *v = if masks.0[s][m] { acc.max(0.0) } else { 0.0 };
            }
            y.push(plane);
        }
        let pooled = if out >= 3 { (out - 3).div_ceil(2) + 1 } else { 1 };
        x = y
            .iter()
            .map(|plane| {
                let mut p = vec![f64::NEG_INFINITY; pooled * pooled];
                for pr in 0..pooled {
                    for pc in 0..pooled {
                        for r in 2 * pr..(2 * pr + 3).min(out) {
                            for c in 2 * pc..(2 * pc + 3).min(out) {
                                p[pr * pooled + pc] = p[pr * pooled + pc].max(plane[r * out + c]);
                            }
                        }
                    }
                }
                p
            })
            .collect();
        side = pooled;
    }
    let flat: Vec<f64> = x.concat();
    let dense = |l: &LayerParams, input: &[f64]| -> Vec<f64> {
        let outs = l.weights.shape()[0];
        (0..outs)
            .map(|o| {
                let row = &l.weights.data()[o * input.len()..(o + 1) * input.len()];
                l.bias.data()[o] + row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    };
    let h: Vec<f64> = dense(&net.layers()[3], &flat)
        .into_iter()
        .enumerate()
        .map(|(i, v)| if masks.0[3][i] { v.max(0.0) } else { 0.0 })
        .collect();
    let z = dense(&net.layers()[4], &h);
    [z[0], z[1]]
}

pub fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

/// Copy of `net` with the listed maps of `layer` removed by zeroing their
/// parameters directly.
pub fn zeroed(net: &Network, layer: LayerId, maps: &[usize]) -> Network {
    let mut layers = net.layers().to_vec();
    let l = &mut layers[layer.index()];
    let row = l.weights.len() / l.weights.shape()[0];
    for &m in maps {
        l.weights.data_mut()[m * row..(m + 1) * row].fill(0.0);
        l.bias.data_mut()[m] = 0.0;
    }
    Network::from_parts(*net.config(), layers, Masks::all_kept(net.config().maps)).unwrap()
}

/// Small synthetic train/val patch sets from two images.
pub fn datasets(per_class: usize, seed: u64) -> (PatchDataset, PatchDataset) {
    let mut tr = Vec::new();
    let mut va = Vec::new();
    for i in 0..2 {
        let img = synth_membranes(&SynthParams { width: 64, height: 64, seed: seed + i, ..Default::default() });
        let (top, bottom) = Region::split_rows(&img.image, 0.75);
        tr.push(extract_patches_in(&img, 32, per_class, seed + 10 + i, top, Split::Train).unwrap());
        va.push(extract_patches_in(&img, 32, per_class / 2, seed + 20 + i, bottom, Split::Val).unwrap());
    }
    (PatchDataset::concat(tr).unwrap(), PatchDataset::concat(va).unwrap())
}

pub fn random_net(maps: [usize; 4], seed: u64) -> Network {
    Network::build(NetworkConfig::new(maps), seed).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
