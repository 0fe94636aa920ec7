//! Central finite differences against every hand-written backward pass.

mod common;

use common::*;
use memprune::data::Batch;
use memprune::net::LayerParams;
use memprune::tensor::{
    affine_backward, affine_forward, conv2d_backward, conv2d_forward, maxpool_backward, maxpool_forward,
    softmax_xent, Tensor,
};
use memprune::train::objective_gradient;
use memprune::{LayerId, Network, NetworkConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted_sum(t: &Tensor, r: &Tensor) -> f64 {
    t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn fd_error(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += H;
        let mut m = x.clone();
        m.data_mut()[i] -= H;
        let num = (f(&p) - f(&m)) / (2.0 * H);
        worst = worst.max(rel_err(analytic.data()[i], num));
    }
    worst
}

#[test]
fn conv2d() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, c, m, k) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let s = k + rng.gen_range(0..4);
        let x = random(&[b, c, s, s], &mut rng);
        let w = random(&[m, c, k, k], &mut rng);
        let bias = random(&[m], &mut rng);
        let r = random(conv2d_forward(&x, &w, &bias).unwrap().shape(), &mut rng);
        let (gx, gw, gb) = conv2d_backward(&r, &x, &w).unwrap();
        let e = [
            fd_error(&|x| weighted_sum(&conv2d_forward(x, &w, &bias).unwrap(), &r), &x, &gx),
            fd_error(&|w| weighted_sum(&conv2d_forward(&x, w, &bias).unwrap(), &r), &w, &gw),
            fd_error(&|bb| weighted_sum(&conv2d_forward(&x, &w, bb).unwrap(), &r), &bias, &gb),
        ];
        assert!(e.iter().all(|&e| e <= TOL), "seed {seed}: {e:?}");
    }
}

#[test]
fn affine() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (b, d, u) = (rng.gen_range(1..5), rng.gen_range(1..8), rng.gen_range(1..6));
        let x = random(&[b, d], &mut rng);
        let w = random(&[u, d], &mut rng);
        let bias = random(&[u], &mut rng);
        let r = random(&[b, u], &mut rng);
        let (gx, gw, gb) = affine_backward(&r, &x, &w).unwrap();
        let e = [
            fd_error(&|x| weighted_sum(&affine_forward(x, &w, &bias).unwrap(), &r), &x, &gx),
            fd_error(&|w| weighted_sum(&affine_forward(&x, w, &bias).unwrap(), &r), &w, &gw),
            fd_error(&|bb| weighted_sum(&affine_forward(&x, &w, bb).unwrap(), &r), &bias, &gb),
        ];
        assert!(e.iter().all(|&e| e <= TOL), "seed {seed}: {e:?}");
    }
}

#[test]
fn maxpool() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (b, c, s) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..10));
        let x = random(&[b, c, s, s], &mut rng);
        let (y, idx) = maxpool_forward(&x, 3, 2).unwrap();
        let r = random(y.shape(), &mut rng);
        let gx = maxpool_backward(&r, &idx).unwrap();
        let e = fd_error(&|x| weighted_sum(&maxpool_forward(x, 3, 2).unwrap().0, &r), &x, &gx);
        assert!(e <= TOL, "seed {seed}: {e}");
    }
}

#[test]
fn softmax_cross_entropy() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (b, k) = (rng.gen_range(1..6), rng.gen_range(2..5));
        let z = random(&[b, k], &mut rng);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let (_, g) = softmax_xent(&z, &labels).unwrap();
        let e = fd_error(&|z| softmax_xent(z, &labels).unwrap().0, &z, &g);
        assert!(e <= TOL, "seed {seed}: {e}");
    }
}

/// Whole network including ReLU, masking and the L2 term.
#[test]
fn network_objective() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let maps = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(1..5)];
        let patch = [28, 32, 36][rng.gen_range(0..3)];
        let cfg = NetworkConfig::new(maps).with_patch_size(patch);
        let mut net = Network::build(cfg, seed).unwrap();
        if maps[3] > 1 && rng.gen_bool(0.5) {
            net.discard(LayerId::Fc4, &[0]).unwrap();
        }
        // biases away from zero so some units are active
        let layers: Vec<LayerParams> = net
            .layers()
            .iter()
            .map(|l| LayerParams { weights: l.weights.clone(), bias: random(l.bias.shape(), &mut rng) })
            .collect();
        let net = Network::from_parts(cfg, layers, net.masks().clone()).unwrap();
        let b = rng.gen_range(1..4);
        let batch = Batch {
            inputs: random(&[b, 1, patch, patch], &mut rng),
            labels: (0..b).map(|_| rng.gen_range(0..2)).collect(),
        };
        let lambda = 0.01;
        let (_, grads) = objective_gradient(&net, &batch, lambda).unwrap();
        let masks = net.masks().clone();
        for li in 0..5 {
            // masked maps are frozen, so only kept rows are checked
            let kept = |row: usize| li == 4 || masks.0[li][row];
            let objective = |which: usize, t: &Tensor| {
                let mut layers = net.layers().to_vec();
                if which == 0 {
                    layers[li].weights = t.clone();
                } else {
                    layers[li].bias = t.clone();
                }
                let n = Network::from_parts(cfg, layers, masks.clone()).unwrap();
                objective_gradient(&n, &batch, lambda).unwrap().0
            };
            for (which, (x, g)) in [(&net.layers()[li].weights, &grads[li].weights), (&net.layers()[li].bias, &grads[li].bias)]
                .into_iter()
                .enumerate()
            {
                let row = x.len() / x.shape()[0];
                let mut worst: f64 = 0.0;
                for i in (0..x.len()).filter(|i| kept(i / row)) {
                    let mut p = x.clone();
                    p.data_mut()[i] += H;
                    let mut m = x.clone();
                    m.data_mut()[i] -= H;
                    let num = (objective(which, &p) - objective(which, &m)) / (2.0 * H);
                    worst = worst.max(rel_err(g.data()[i], num));
                }
                assert!(worst <= TOL, "seed {seed} layer {li} part {which}: {worst}");
            }
        }
    }
}
