mod common;

use std::sync::OnceLock;

use common::*;
use memprune::data::{synth_membranes, PatchDataset, SynthParams};
use memprune::eval::{accuracy, probability_map, threshold_sweep};
use memprune::prune::{
    apply_plan, order_layer, order_network, random_order_layer, LossEstimator, LossSample, PrunePlan, Strategy,
};
use memprune::train::{fit, retrain, RetrainConfig, TrainConfig};
use memprune::{LayerId, Network};

struct Fixture {
    net: Network,
    train: PatchDataset,
    val: PatchDataset,
    cfg: TrainConfig,
}

fn trained() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let (train, val) = datasets(250, 40);
        let cfg = TrainConfig { base_lr: 0.01, batch_size: 32, iterations: 300, eval_every: 100, seed: 3, ..Default::default() };
        let (net, _) = fit(random_net([8, 8, 6, 16], 5), &train, &val, &cfg).unwrap();
        Fixture { net, train, val, cfg }
    })
}

/// Loss with `maps` of `layer` removed by hand, on the sample's batches.
fn brute_loss(net: &Network, layer: LayerId, maps: &[usize], sample: &LossSample) -> f64 {
    zeroed(net, layer, maps).loss(&sample.batches).unwrap()
}

#[test]
fn first_two_greedy_picks_match_exhaustive_search() {
    let net = random_net([6, 4, 3, 5], 21);
    let (train, _) = datasets(40, 7);
    for layer in LayerId::ALL {
        let sample = LossSample::from_batches(train.sample_batches(2, 16, 9).unwrap(), 9);
        let o = order_layer(&net, layer, &sample).unwrap();
        let n = net.config().maps[layer.index()];

        let first: Vec<f64> = (0..n).map(|i| brute_loss(&net, layer, &[i], &sample)).collect();
        let best = (0..n).min_by(|&a, &b| first[a].total_cmp(&first[b])).unwrap();
        assert_eq!(o.steps[0].feature, best, "{layer}");
        assert_eq!(o.steps[0].loss, first[best], "{layer}");

        let second: Vec<(usize, f64)> =
            (0..n).filter(|&j| j != best).map(|j| (j, brute_loss(&net, layer, &[best, j], &sample))).collect();
        let (j, l) = second.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert_eq!((o.steps[1].feature, o.steps[1].loss), (j, l), "{layer}");
    }
}

#[test]
fn greedy_curve_lies_below_random_on_trained_net() {
    let f = trained();
    let sample = LossEstimator { batch_count: 2, batch_size: 64, seed: 1, l2: None }.sample(&f.train).unwrap();
    let (mut below, mut total) = (0, 0);
    for layer in LayerId::ALL {
        let g = order_layer(&f.net, layer, &sample).unwrap();
        let n = g.steps.len();
        let mut mean = vec![0.0; n];
        for s in 0..10 {
            let r = random_order_layer(&f.net, layer, &sample, 100 + s).unwrap();
            for (m, st) in mean.iter_mut().zip(&r.steps) {
                *m += st.loss / 10.0;
            }
        }
        below += g.steps.iter().zip(&mean).filter(|(s, m)| s.loss <= **m).count();
        total += n;
    }
    assert!(below as f64 >= 0.9 * total as f64, "{below}/{total}");
}

#[test]
fn retraining_recovers_and_is_deterministic() {
    let f = trained();
    let base = accuracy(&f.net, &f.val).unwrap();
    assert!(base >= 0.8, "fixture trained to {base}");
    let plan = PrunePlan {
        keep: [5, 5, 4, 8],
        strategy: Strategy::Greedy,
        estimator: LossEstimator { batch_count: 2, batch_size: 64, seed: 2, l2: None },
    };
    let ords = order_network(&f.net, &plan, &f.train).unwrap();
    let pruned = apply_plan(&f.net, &ords, plan.keep).unwrap();
    assert_eq!(pruned.config().maps, plan.keep);
    let a_pruned = accuracy(&pruned, &f.val).unwrap();

    let rcfg = RetrainConfig::default();
    let (re, hist) = retrain(pruned.clone(), &f.train, &f.val, &f.cfg, &rcfg).unwrap();
    let a_re = accuracy(&re, &f.val).unwrap();
    assert!(a_re >= a_pruned - 0.01, "retrain lost accuracy: {a_pruned} -> {a_re}");
    assert!(a_re >= base - 0.05, "{base} -> {a_re}");
    assert!(hist.rows.iter().all(|r| r.train_loss.is_finite()));
    assert_eq!(hist.rows.last().unwrap().iteration, 75);

    let (again, _) = retrain(pruned.clone(), &f.train, &f.val, &f.cfg, &rcfg).unwrap();
    assert_eq!(again, re);
    let frozen = RetrainConfig { lr_scale: 0.0, ..rcfg };
    assert_eq!(retrain(pruned.clone(), &f.train, &f.val, &f.cfg, &frozen).unwrap().0, pruned);
}

#[test]
fn half_threshold_is_near_the_best_f1() {
    let f = trained();
    let img = synth_membranes(&SynthParams { width: 48, height: 48, seed: 77, ..Default::default() });
    let map = probability_map(&f.net, &img.image, 1).unwrap();
    let ts: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
    let sweep = threshold_sweep(&map, &img.labels, &ts).unwrap();
    let best = sweep.iter().map(|s| s.1).fold(0.0, f64::max);
    let at_half = sweep.iter().find(|s| (s.0 - 0.5).abs() < 1e-9).unwrap().1;
    assert!(best > 0.3, "map carries signal: best F1 {best}");
    assert!(best - at_half <= 0.1, "F1 {at_half} at 0.5 vs best {best}");
}
