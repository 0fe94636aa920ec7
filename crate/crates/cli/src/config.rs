//! Declarative experiment configuration (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use memprune::data::SynthParams;
use memprune::prune::{LossEstimator, PrunePlan, Strategy};
use memprune::train::{RetrainConfig, TrainConfig};
use memprune::NetworkConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub network: NetworkSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub retrain: RetrainSection,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// A named configuration (N, N1 … N7) or `maps`.
    pub preset: Option<String>,
    pub maps: Option<[usize; 4]>,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
}

fn default_patch() -> usize {
    memprune::net::DEFAULT_PATCH_SIZE
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Existing dataset manifest; when unset `synth` writes one under the
    /// output directory.
    pub manifest: Option<PathBuf>,
    pub train_images: usize,
    pub val_images: usize,
    pub width: usize,
    pub height: usize,
    pub curve_count: usize,
    pub thickness: [f64; 2],
    pub noise_sigma: f64,
    /// Patches per class drawn from each training image.
    pub train_per_class: usize,
    pub val_per_class: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthParams::default();
        DataSection {
            manifest: None,
            train_images: 3,
            val_images: 1,
            width: s.width,
            height: s.height,
            curve_count: s.curve_count,
            thickness: [s.thickness.0, s.thickness.1],
            noise_sigma: s.noise_sigma,
            train_per_class: 500,
            val_per_class: 200,
        }
    }
}

impl DataSection {
    pub fn synth_params(&self, seed: u64, width: usize, height: usize) -> SynthParams {
        SynthParams {
            width,
            height,
            curve_count: self.curve_count,
            thickness: (self.thickness[0], self.thickness[1]),
            noise_sigma: self.noise_sigma,
            seed,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub base_lr: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub eval_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            base_lr: t.base_lr,
            momentum: t.momentum,
            lambda: t.lambda,
            batch_size: t.batch_size,
            iterations: t.iterations,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainSection {
    pub lr_scale: f64,
    pub iteration_fraction: f64,
}

impl Default for RetrainSection {
    fn default() -> Self {
        let r = RetrainConfig::default();
        RetrainSection {
            lr_scale: r.lr_scale,
            iteration_fraction: r.iteration_fraction,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub name: String,
    pub preset: Option<String>,
    pub keep: Option<[usize; 4]>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub strategies: Vec<String>,
    pub batch_count: usize,
    pub batch_size: usize,
    /// Include `lambda·‖W‖²` in the ordering loss.
    pub include_l2: bool,
    /// Random orderings averaged for the report's baseline curve.
    pub random_seeds: usize,
    pub plans: Vec<PlanSection>,
}

impl Default for PruneSection {
    fn default() -> Self {
        let e = LossEstimator::default();
        PruneSection {
            strategies: vec!["greedy".into(), "sparsity".into()],
            batch_count: e.batch_count,
            batch_size: e.batch_size,
            include_l2: false,
            random_seeds: 10,
            plans: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Side of the square synthetic image used for timing.
    pub timing_size: usize,
    pub repetitions: usize,
    /// Side of the synthetic image whose probability map is saved.
    pub map_size: usize,
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            timing_size: 32,
            repetitions: 3,
            map_size: 64,
            threshold: 0.5,
        }
    }
}

/// Seed offsets for the independent random streams of one experiment.
pub mod seeds {
    pub const INIT: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const ESTIMATOR: u64 = 2;
    pub const RANDOM_ORDER: u64 = 1000;
    pub const IMAGES: u64 = 10_000;
    pub const PATCHES: u64 = 20_000;
    pub const EVAL_IMAGES: u64 = 30_000;
}

/// A named pruning plan resolved against the network.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedPlan {
    pub name: String,
    pub plan: PrunePlan,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, text))
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return bad(format!("experiment name `{}` must be a non-empty identifier", self.name));
        }
        self.network_config()?;
        for s in &self.prune.strategies {
            if Strategy::parse(s).is_none() {
                return bad(format!("unknown strategy `{s}`"));
            }
        }
        let mut names: Vec<&str> = self.prune.plans.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate plan names".into());
        }
        self.plans(Strategy::Greedy)?;
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return bad(format!("threshold {} outside [0,1]", self.eval.threshold));
        }
        if self.data.train_images == 0 || self.data.val_images == 0 {
            return bad("need at least one training and one validation image".into());
        }
        Ok(())
    }

    pub fn network_config(&self) -> Result<NetworkConfig, CliError> {
        let n = &self.network;
        let cfg = match (&n.preset, n.maps) {
            (Some(p), None) => NetworkConfig::table1(p).ok_or_else(|| CliError::Config(format!("unknown preset `{p}`")))?,
            (None, Some(m)) => NetworkConfig::new(m),
            _ => return Err(CliError::Config("network needs exactly one of `preset` or `maps`".into())),
        };
        let cfg = cfg.with_patch_size(n.patch_size);
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Label for the unpruned network in tables.
    pub fn reference_name(&self) -> String {
        self.network.preset.clone().unwrap_or_else(|| "reference".into())
    }

    pub fn strategies(&self) -> Vec<Strategy> {
        self.prune.strategies.iter().filter_map(|s| Strategy::parse(s)).collect()
    }

    pub fn plans(&self, strategy: Strategy) -> Result<Vec<NamedPlan>, CliError> {
        let maps = self.network_config()?.maps;
        self.prune
            .plans
            .iter()
            .map(|p| {
                let keep = match (&p.preset, p.keep) {
                    (Some(name), None) => {
                        NetworkConfig::table1(name)
                            .ok_or_else(|| CliError::Config(format!("unknown preset `{name}`")))?
                            .maps
                    }
                    (None, Some(k)) => k,
                    _ => return Err(CliError::Config(format!("plan {} needs exactly one of `preset` or `keep`", p.name))),
                };
                if keep.iter().zip(maps).any(|(&k, n)| k == 0 || k > n) {
                    return Err(CliError::Config(format!("plan {} keep {keep:?} does not fit maps {maps:?}", p.name)));
                }
                Ok(NamedPlan {
                    name: p.name.clone(),
                    plan: PrunePlan {
                        keep,
                        strategy,
                        estimator: LossEstimator {
                            batch_count: self.prune.batch_count,
                            batch_size: self.prune.batch_size,
                            seed: self.seed.wrapping_add(seeds::ESTIMATOR),
                            l2: self.prune.include_l2.then_some(self.train.lambda),
                        },
                    },
                })
            })
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            base_lr: t.base_lr,
            momentum: t.momentum,
            lambda: t.lambda,
            batch_size: t.batch_size,
            iterations: t.iterations,
            seed: self.seed.wrapping_add(seeds::TRAIN),
            eval_every: t.eval_every,
        }
    }

    pub fn retrain_config(&self) -> RetrainConfig {
        RetrainConfig {
            lr_scale: self.retrain.lr_scale,
            iteration_fraction: self.retrain.iteration_fraction,
        }
    }

    /// SHA-256 of each section as normalized TOML, in file order.
    pub fn section_hashes(&self) -> Vec<(&'static str, String)> {
        fn h<T: Serialize>(v: &T) -> String {
            sha256_hex(toml::to_string(v).expect("config serializes").as_bytes())
        }
        vec![
            ("network", h(&self.network)),
            ("data", h(&self.data)),
            ("train", h(&self.train)),
            ("retrain", h(&self.retrain)),
            ("prune", h(&self.prune)),
            ("eval", h(&self.eval)),
        ]
    }

    /// Hash of the whole normalized configuration.
    pub fn hash(&self) -> String {
        sha256_hex(toml::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
seed = 3
[network]
preset = "N"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.network_config().unwrap().maps, [100, 75, 50, 200]);
        assert_eq!(c.train, TrainSection::default());
        assert_eq!(c.output_dir, PathBuf::from("out"));
        assert_eq!(c.strategies(), vec![Strategy::Greedy, Strategy::Sparsity]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::parse(&format!("{MINIMAL}\n[train]\nlearning_rate = 0.1\n")).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(ExperimentConfig::parse(&format!("bogus = 1\n{MINIMAL}")).is_err());
    }

    #[test]
    fn plans_resolve_presets_and_reject_oversize() {
        let text = format!("{MINIMAL}\n[[prune.plans]]\nname = \"a\"\npreset = \"N7\"\n[[prune.plans]]\nname = \"b\"\nkeep = [1, 2, 3, 4]\n");
        let c = ExperimentConfig::parse(&text).unwrap();
        let p = c.plans(Strategy::Sparsity).unwrap();
        assert_eq!(p[0].plan.keep, [30, 20, 10, 10]);
        assert_eq!(p[1].plan.keep, [1, 2, 3, 4]);
        assert_eq!(p[0].plan.strategy, Strategy::Sparsity);

        let bad = format!("{MINIMAL}\n[[prune.plans]]\nname = \"a\"\nkeep = [101, 1, 1, 1]\n");
        assert!(ExperimentConfig::parse(&bad).is_err());
    }

    #[test]
    fn network_needs_one_source() {
        let both = "name = \"t\"\nseed = 0\n[network]\npreset = \"N\"\nmaps = [1, 1, 1, 1]\n";
        assert!(ExperimentConfig::parse(both).is_err());
        let none = "name = \"t\"\nseed = 0\n[network]\n";
        assert!(ExperimentConfig::parse(none).is_err());
    }

    #[test]
    fn hashes_track_sections() {
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let mut b = a.clone();
        b.train.iterations += 1;
        let (ha, hb) = (a.section_hashes(), b.section_hashes());
        assert_eq!(ha[0], hb[0]);
        assert_ne!(ha[2], hb[2]);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
