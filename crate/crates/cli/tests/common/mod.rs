#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const SMALL: &str = r#"
name = "small"
seed = 11
[network]
maps = [8, 8, 6, 16]
[data]
train_images = 2
val_images = 1
width = 64
height = 64
train_per_class = 250
val_per_class = 100
[train]
base_lr = 0.01
batch_size = 32
iterations = 300
eval_every = 100
[prune]
strategies = ["greedy", "sparsity"]
batch_count = 2
batch_size = 32
random_seeds = 3
[[prune.plans]]
name = "half"
keep = [4, 4, 3, 8]
[[prune.plans]]
name = "all"
keep = [8, 8, 6, 16]
[eval]
timing_size = 16
repetitions = 3
map_size = 24
"#;

pub fn write_config(dir: &Path, config: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, config).unwrap();
    path
}

pub fn run(args: &[&str]) -> i32 {
    memprune_cli::run(std::iter::once("memprune").chain(args.iter().copied()))
}

pub fn run_stage(stage: &str, config: &Path, out: &Path) -> i32 {
    run(&[stage, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

pub fn run_pipeline(config: &Path, out: &Path) {
    for stage in ["synth", "train", "prune", "eval", "report"] {
        assert_eq!(run_stage(stage, config, out), 0, "stage {stage} failed");
    }
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Drop the timing column from an eval table.
pub fn strip_timing(table: &[u8]) -> String {
    String::from_utf8_lossy(table)
        .lines()
        .map(|l| {
            if l.starts_with('#') {
                return l.to_string();
            }
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(2);
            f.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Differences between two pipeline runs, ignoring measured timings.
pub fn diff_runs(a: &Path, b: &Path) -> Vec<String> {
    let (sa, sb) = (snapshot(a), snapshot(b));
    let mut diffs = Vec::new();
    if sa.keys().ne(sb.keys()) {
        diffs.push("file sets differ".to_string());
    }
    for (k, va) in &sa {
        let Some(vb) = sb.get(k) else { continue };
        let same = if k.ends_with("eval/table.csv") { strip_timing(va) == strip_timing(vb) } else { va == vb };
        if !same {
            diffs.push(k.display().to_string());
        }
    }
    diffs
}
