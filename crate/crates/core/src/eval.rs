//! Accuracy, timing, size accounting and sliding-window segmentation.

use std::time::Instant;

use crate::data::{extract_patch, GrayImage, PatchDataset};
use crate::error::{Error, Result};
use crate::net::{Network, ParamCount};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 64;

/// Fraction of patches whose arg-max class matches the label. An exact
/// 0.5/0.5 tie counts as class 0.
pub fn accuracy(net: &Network, val: &PatchDataset) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::input("accuracy needs a non-empty validation set"));
    }
    let mut correct = 0usize;
    for batch in val.chunks(EVAL_BATCH * 2)? {
        let p = net.forward(&batch.inputs)?;
        for (row, &label) in p.data().chunks_exact(2).zip(&batch.labels) {
            let predicted = usize::from(row[1] > row[0]);
            correct += usize::from(predicted == label);
        }
    }
    Ok(correct as f64 / val.len() as f64)
}

/// Membrane probability for every pixel, from the patch centred on it
/// (mirror-padded at the borders). With `stride > 1` only every
/// `stride`-th pixel in each direction is evaluated and its value fills
/// the `stride × stride` block it anchors.
pub fn probability_map(net: &Network, img: &GrayImage, stride: usize) -> Result<GrayImage> {
    if img.width == 0 || img.height == 0 || img.data.len() != img.width * img.height {
        return Err(Error::input("degenerate image extents"));
    }
    if stride == 0 {
        return Err(Error::input("stride must be positive"));
    }
    let n = net.config().patch_size;
    let anchors: Vec<(usize, usize)> = (0..img.height)
        .step_by(stride)
        .flat_map(|y| (0..img.width).step_by(stride).map(move |x| (x, y)))
        .collect();
    let mut out = GrayImage::filled(img.width, img.height, 0.0);
    let mut buf = Vec::with_capacity(EVAL_BATCH * n * n);
    for chunk in anchors.chunks(EVAL_BATCH) {
        buf.clear();
        buf.resize(chunk.len() * n * n, 0.0);
        for (slot, &(x, y)) in chunk.iter().enumerate() {
            extract_patch(img, x, y, n, &mut buf[slot * n * n..(slot + 1) * n * n]);
        }
        let batch = Tensor::new(vec![chunk.len(), 1, n, n], std::mem::take(&mut buf))?;
        let p = net.forward(&batch)?;
        for (&(x, y), row) in chunk.iter().zip(p.data().chunks_exact(2)) {
            for yy in y..(y + stride).min(img.height) {
                for xx in x..(x + stride).min(img.width) {
                    out.data[yy * img.width + xx] = row[1];
                }
            }
        }
        buf = batch.into_data();
    }
    Ok(out)
}

/// Binary segmentation: 1 where the probability is at least `t`.
pub fn threshold_map(map: &GrayImage, t: f64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::input(format!("threshold {t} outside [0,1]")));
    }
    Ok(map.data.iter().map(|&p| u8::from(p >= t)).collect())
}

/// Pixel F1 of a binary prediction against a binary truth mask.
pub fn f1_score(pred: &[u8], truth: &[u8]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// F1 at each threshold.
pub fn threshold_sweep(map: &GrayImage, truth: &[u8], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    thresholds
        .iter()
        .map(|&t| Ok((t, f1_score(&threshold_map(map, t)?, truth))))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    /// Median wall-clock seconds of one full probability map.
    pub median_seconds: f64,
    pub patches_per_second: f64,
    pub samples: Vec<f64>,
}

/// Median wall-clock time of [`probability_map`] over `repetitions` runs,
/// after one discarded warm-up run.
pub fn time_segmentation(net: &Network, img: &GrayImage, repetitions: usize) -> Result<Timing> {
    if repetitions < 3 {
        return Err(Error::input("timing needs at least 3 repetitions"));
    }
    probability_map(net, img, 1)?;
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        std::hint::black_box(probability_map(net, img, 1)?);
        samples.push(start.elapsed().as_secs_f64());
    }
    let median_seconds = median(&samples);
    Ok(Timing {
        median_seconds,
        patches_per_second: (img.width * img.height) as f64 / median_seconds,
        samples,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Parameter count of the kept structure: kernels, affine weights and biases.
pub fn count_params(net: &Network) -> ParamCount {
    net.param_count()
}

/// Fraction of the reference network's parameters removed in `net`.
pub fn delta_p(reference: &Network, net: &Network) -> f64 {
    1.0 - count_params(net).total as f64 / count_params(reference).total as f64
}

/// Bytes per stored value in the memory estimate (single precision, as a
/// deployment would use).
pub const MEMORY_BYTES_PER_VALUE: usize = 4;

/// Memory estimate for inference: all parameters plus the largest pair of
/// activations alive at once (a stage's input and its output), at
/// [`MEMORY_BYTES_PER_VALUE`] bytes per value.
pub fn estimate_memory(net: &Network, batch_size: usize) -> Result<usize> {
    if batch_size == 0 {
        return Err(Error::input("batch size must be positive"));
    }
    let cfg = net.config();
    let kept = net.masks().kept_counts();
    let sp = cfg.spatial();
    // value counts per sample along the pipeline
    let mut sizes = vec![cfg.patch_size * cfg.patch_size];
    for s in 0..3 {
        sizes.push(kept[s] * sp[s].0 * sp[s].0);
        sizes.push(kept[s] * sp[s].1 * sp[s].1);
    }
    sizes.push(kept[3]);
    sizes.push(crate::net::CLASSES);
    let peak = sizes.windows(2).map(|w| w[0] + w[1]).max().unwrap_or(0);
    Ok((net.param_count().total + peak * batch_size) * MEMORY_BYTES_PER_VALUE)
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub name: String,
    /// Patch accuracy in `[0,1]`.
    pub accuracy: f64,
    /// Seconds to segment the timing image.
    pub seconds: f64,
    /// Fraction of parameters pruned.
    pub delta_p: f64,
    pub memory_bytes: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "name,A,T_seconds,deltaP_percent,M_bytes";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.6},{:.2},{}",
            self.name,
            self.accuracy,
            self.seconds,
            100.0 * self.delta_p,
            self.memory_bytes
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::net::{LayerId, NetworkConfig};

    fn tiny() -> Network {
        Network::build(NetworkConfig::new([3, 3, 2, 4]), 1).unwrap()
    }

    #[test]
    fn constant_image_gives_constant_map() {
        let net = tiny();
        let img = GrayImage::filled(9, 7, 0.6);
        let map = probability_map(&net, &img, 1).unwrap();
        assert_eq!((map.width, map.height), (9, 7));
        let first = map.data[0];
        assert!(map.data.iter().all(|&v| v == first));
        assert!((0.0..=1.0).contains(&first));
    }

    #[test]
    fn strided_map_fills_blocks() {
        let net = tiny();
        let img = GrayImage::new(6, 5, (0..30).map(|i| i as f64 / 30.0).collect()).unwrap();
        let full = probability_map(&net, &img, 1).unwrap();
        let coarse = probability_map(&net, &img, 2).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                assert_eq!(coarse.get(x, y), full.get(x - x % 2, y - y % 2));
            }
        }
        assert!(probability_map(&net, &img, 0).is_err());
    }

    #[test]
    fn thresholds() {
        let map = GrayImage::new(2, 2, vec![0.0, 0.3, 0.7, 0.99]).unwrap();
        assert_eq!(threshold_map(&map, 0.0).unwrap(), vec![1, 1, 1, 1]);
        assert_eq!(threshold_map(&map, 1.0).unwrap(), vec![0, 0, 0, 0]);
        assert_eq!(threshold_map(&map, 0.5).unwrap(), vec![0, 0, 1, 1]);
        assert!(threshold_map(&map, 1.5).is_err());
    }

    #[test]
    fn f1_basics() {
        assert_eq!(f1_score(&[1, 0, 1], &[1, 0, 1]), 1.0);
        assert_eq!(f1_score(&[0, 0], &[1, 1]), 0.0);
        assert!((f1_score(&[1, 1, 0, 0], &[1, 0, 1, 0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn timing_requires_three_repetitions() {
        let img = GrayImage::filled(4, 4, 0.5);
        assert!(time_segmentation(&tiny(), &img, 2).is_err());
        let t = time_segmentation(&tiny(), &img, 3).unwrap();
        assert_eq!(t.samples.len(), 3);
        assert!(t.median_seconds > 0.0);
        assert_eq!(t.median_seconds, median(&t.samples));
    }

    #[test]
    fn parameter_counts_and_delta_p() {
        let n = Network::build(NetworkConfig::reference(), 0).unwrap();
        assert_eq!(count_params(&n).total, 236_977);
        let n7 = Network::build(NetworkConfig::table1("N7").unwrap(), 0).unwrap();
        assert_eq!(count_params(&n7).total, 18_462);
        assert!((100.0 * delta_p(&n, &n7) - 92.2).abs() < 0.05);
    }

    #[test]
    fn memory_estimate_ordering() {
        let n = Network::build(NetworkConfig::reference(), 0).unwrap();
        let n7 = Network::build(NetworkConfig::table1("N7").unwrap(), 0).unwrap();
        let (m, m7) = (estimate_memory(&n, 1).unwrap(), estimate_memory(&n7, 1).unwrap());
        assert!(m7 < m);
        assert!(estimate_memory(&n, 2).unwrap() >= m);
        assert!(estimate_memory(&n, 0).is_err());
        // masked structure is accounted like the shrunk one
        let mut masked = n.clone();
        masked.discard(LayerId::C1, &[0, 1, 2]).unwrap();
        assert_eq!(
            estimate_memory(&masked, 1).unwrap(),
            estimate_memory(&masked.shrink().unwrap(), 1).unwrap()
        );
    }

    #[test]
    fn accuracy_of_inverted_network() {
        // fc5 rows swapped flips every prediction
        let net = tiny();
        let mut patches = Vec::new();
        for i in 0..10 {
            patches.extend((0..32 * 32).map(|j| ((i * 31 + j) % 17) as f64 / 17.0));
        }
        let val = PatchDataset {
            patches: Tensor::new(vec![10, 1, 32, 32], patches).unwrap(),
            labels: vec![0, 1, 1, 0, 1, 0, 0, 1, 1, 1],
            split: Split::Val,
            mirrored: false,
        };
        let a = accuracy(&net, &val).unwrap();
        let mut inv = net.clone();
        let w = inv.layers()[4].weights.data().to_vec();
        let h = w.len() / 2;
        let swapped: Vec<f64> = w[h..].iter().chain(&w[..h]).copied().collect();
        inv.layers_mut()[4].weights.data_mut().copy_from_slice(&swapped);
        let b = accuracy(&inv, &val).unwrap();
        // ties would break the symmetry; random weights make them impossible here
        assert!((a + b - 1.0).abs() < 1e-12, "{a} + {b}");
    }
}
