//! Synthetic membrane images: dark, smooth curvilinear strokes of varying
//! thickness on a bright, slowly varying background with faint blob
//! distractors and additive Gaussian noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{GrayImage, LabeledImage};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub curve_count: usize,
    /// Stroke thickness range in pixels (diameter).
    pub thickness: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            width: 128,
            height: 128,
            curve_count: 6,
            thickness: (2.0, 6.0),
            noise_sigma: 0.08,
            seed: 0,
        }
    }
}

const STEP: f64 = 0.5;
const BACKGROUND: f64 = 0.72;
const STROKE_DEPTH: f64 = 0.45;

/// Centre-line of one stroke: a curvature random walk grown in both
/// directions from an interior point until it leaves the image, so the
/// in-bounds part is a single contiguous piece.
fn trace_curve(rng: &mut ChaCha8Rng, w: f64, h: f64, max_len: f64) -> Vec<(f64, f64)> {
    let start = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
    let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let bend = Normal::new(0.0, 0.015).unwrap();
    let inside = |p: (f64, f64)| p.0 >= -0.5 && p.1 >= -0.5 && p.0 <= w - 0.5 && p.1 <= h - 0.5;

    let mut grow = |mut theta: f64| {
        let mut pts = Vec::new();
        let mut p = start;
        let mut kappa = 0.0f64;
        let mut len = 0.0;
        while inside(p) && len < max_len / 2.0 {
            pts.push(p);
            kappa = (kappa + bend.sample(rng)).clamp(-0.08, 0.08);
            theta += kappa * STEP;
            p = (p.0 + STEP * theta.cos(), p.1 + STEP * theta.sin());
            len += STEP;
        }
        pts
    };
    let forward = grow(heading);
    let mut backward = grow(heading + std::f64::consts::PI);
    backward.reverse();
    backward.pop(); // shared start point
    backward.extend(forward);
    backward
}

pub fn synth_membranes(params: &SynthParams) -> LabeledImage {
    let (w, h) = (params.width, params.height);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    // low-frequency illumination and texture
    let mut image = vec![BACKGROUND; w * h];
    for _ in 0..3 {
        let fx = rng.gen_range(0.5..3.0) * std::f64::consts::TAU / w as f64;
        let fy = rng.gen_range(0.5..3.0) * std::f64::consts::TAU / h as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(0.02..0.05);
        for y in 0..h {
            for x in 0..w {
                image[y * w + x] += amp * (fx * x as f64 + fy * y as f64 + phase).sin();
            }
        }
    }
    // faint blobs that are not membranes
    let blobs = (w * h) / 2048;
    for _ in 0..blobs {
        let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let r: f64 = rng.gen_range(3.0..8.0);
        let depth = rng.gen_range(0.08..0.18);
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                if d < r {
                    image[y * w + x] -= depth * (1.0 - d / r);
                }
            }
        }
    }

    // strokes: hard label within the radius, soft one-pixel falloff in intensity
    let mut labels = vec![0u8; w * h];
    let mut darkness = vec![0.0f64; w * h];
    let max_len = 1.5 * (w + h) as f64;
    for _ in 0..params.curve_count {
        let (tmin, tmax) = params.thickness;
        let radius = if tmax > tmin {
            rng.gen_range(tmin..tmax) / 2.0
        } else {
            tmin / 2.0
        };
        let depth = STROKE_DEPTH * rng.gen_range(0.85..1.15);
        let pts = trace_curve(&mut rng, w as f64, h as f64, max_len);
        let reach = radius + 1.0;
        for &(px, py) in &pts {
            let x0 = (px - reach).floor().max(0.0) as usize;
            let y0 = (py - reach).floor().max(0.0) as usize;
            let x1 = ((px + reach).ceil() as usize).min(w - 1);
            let y1 = ((py + reach).ceil() as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
                    let i = y * w + x;
                    if d <= radius {
                        labels[i] = 1;
                        darkness[i] = darkness[i].max(depth);
                    } else if d < reach {
                        darkness[i] = darkness[i].max(depth * (reach - d));
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).unwrap();
    for (v, d) in image.iter_mut().zip(&darkness) {
        let n = if params.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        *v = (*v - d + n).clamp(0.0, 1.0);
    }

    LabeledImage {
        image: GrayImage {
            width: w,
            height: h,
            data: image,
        },
        labels,
    }
}

/// Number of 8-connected components of the label mask.
pub fn count_components(mask: &[u8], width: usize, height: usize) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if mask[j] != 0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_clean_curve_is_one_component() {
        for seed in 0..10 {
            let img = synth_membranes(&SynthParams {
                curve_count: 1,
                noise_sigma: 0.0,
                seed,
                ..SynthParams::default()
            });
            assert_eq!(count_components(&img.labels, 128, 128), 1, "seed {seed}");
        }
    }

    #[test]
    fn no_curves_no_labels() {
        let img = synth_membranes(&SynthParams {
            curve_count: 0,
            ..SynthParams::default()
        });
        assert!(img.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn deterministic_and_in_range() {
        let p = SynthParams {
            seed: 42,
            ..SynthParams::default()
        };
        let a = synth_membranes(&p);
        assert_eq!(a, synth_membranes(&p));
        assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let q = SynthParams { seed: 43, ..p };
        assert_ne!(a, synth_membranes(&q));
    }

    #[test]
    fn membranes_are_darker_than_background() {
        let img = synth_membranes(&SynthParams {
            seed: 3,
            ..SynthParams::default()
        });
        let mean = |want: u8| {
            let v: Vec<f64> = img
                .image
                .data
                .iter()
                .zip(&img.labels)
                .filter(|(_, &l)| l == want)
                .map(|(v, _)| *v)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(1) + 0.2 < mean(0));
    }
}
