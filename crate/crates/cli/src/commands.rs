use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use memprune::checkpoint::{self, Checkpoint, TrainingState};
use memprune::data::{
    extract_patches_in, load_image, parse_manifest, save_image, synth_membranes, write_manifest, BitDepth, GrayImage,
    LabeledImage, ManifestEntry, PatchDataset, Region, Split,
};
use memprune::eval::{
    accuracy, delta_p, estimate_memory, probability_map, threshold_map, threshold_sweep, time_segmentation,
    EvalReport,
};
use memprune::prune::{apply_plan, order_plans, random_order_layer, OrderStep, PruneOrdering, Strategy};
use memprune::train::{continue_training, retrain, History};
use memprune::{LayerId, Network};

use crate::config::{seeds, ExperimentConfig, NamedPlan};
use crate::{CliError, Command, Common};

type Result<T> = std::result::Result<T, CliError>;

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(c) => synth(&Context::open(&c)?),
        Command::Train { common, resume, stop_at } => train(&Context::open(&common)?, resume, stop_at),
        Command::Prune(c) => prune(&Context::open(&c)?),
        Command::Eval(c) => eval(&Context::open(&c)?),
        Command::Report(c) => report(&Context::open(&c)?),
    }
}

/// A loaded experiment and where its artifacts go.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn open(c: &Common) -> Result<Self> {
        let (cfg, _) = ExperimentConfig::load(&c.config)?;
        let out = c.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok(Context { cfg, out })
    }

    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Self {
        Context { cfg, out }
    }

    fn dir(&self, parts: &[&str]) -> Result<PathBuf> {
        let mut p = self.out.clone();
        for s in parts {
            p.push(s);
        }
        fs::create_dir_all(&p).map_err(|e| memprune::Error::Io { path: p.clone(), source: e })?;
        Ok(p)
    }

    /// Comment header naming the experiment, the config hash and the seed.
    fn header(&self, what: &str) -> Vec<String> {
        vec![
            format!("{what} for experiment {}", self.cfg.name),
            format!("config_sha256={} seed={}", self.cfg.hash(), self.cfg.seed),
        ]
    }

    fn manifest_path(&self) -> PathBuf {
        self.cfg.data.manifest.clone().unwrap_or_else(|| self.out.join("data").join("manifest.csv"))
    }

    fn train_checkpoint(&self) -> PathBuf {
        self.out.join("train").join("checkpoint.bin")
    }

    fn plan_dir(&self, strategy: Strategy, plan: &str) -> PathBuf {
        self.out.join("prune").join(strategy.name()).join(plan)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| memprune::Error::Io { path: path.to_path_buf(), source: e }.into())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| memprune::Error::Io { path: path.to_path_buf(), source: e }.into())
}

fn commented(header: &[String], body: &str) -> String {
    let mut s = String::new();
    for h in header {
        let _ = writeln!(s, "# {h}");
    }
    s + body
}

pub fn synth(ctx: &Context) -> Result<()> {
    let d = &ctx.cfg.data;
    let dir = ctx.dir(&["data"])?;
    let mut entries = Vec::new();
    for i in 0..d.train_images + d.val_images {
        let seed = ctx.cfg.seed.wrapping_add(seeds::IMAGES + i as u64);
        let img = synth_membranes(&d.synth_params(seed, d.width, d.height));
        let (image, mask) = (format!("img_{i:03}.pgm"), format!("mask_{i:03}.pgm"));
        save_image(&img.image, dir.join(&image), BitDepth::Sixteen)?;
        save_image(&GrayImage::from_mask(d.width, d.height, &img.labels), dir.join(&mask), BitDepth::Eight)?;
        entries.push(ManifestEntry {
            image: image.into(),
            mask: mask.into(),
            split: if i < d.train_images { Split::Train } else { Split::Val },
            seed,
        });
    }
    let mut header = ctx.header("synthetic dataset");
    header.push(format!(
        "synth width={} height={} curves={} thickness={}..{} noise_sigma={}",
        d.width, d.height, d.curve_count, d.thickness[0], d.thickness[1], d.noise_sigma
    ));
    write(&dir.join("manifest.csv"), write_manifest(&entries, &header))?;
    info!("wrote {} images to {}", entries.len(), dir.display());
    Ok(())
}

/// Training and validation patches from the manifest.
pub fn load_datasets(ctx: &Context) -> Result<(PatchDataset, PatchDataset)> {
    let path = ctx.manifest_path();
    let text = read(&path).map_err(|_| {
        CliError::Missing(format!("no dataset manifest at {} (run `synth` first)", path.display()))
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let n = ctx.cfg.network.patch_size;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for e in parse_manifest(&text, base)? {
        let image = load_image(&e.image)?;
        let mask = load_image(&e.mask)?;
        let img = LabeledImage::from_mask_image(image, &mask)?;
        let (per_class, into) = match e.split {
            Split::Train => (ctx.cfg.data.train_per_class, &mut train),
            Split::Val => (ctx.cfg.data.val_per_class, &mut val),
        };
        let seed = e.seed.wrapping_add(seeds::PATCHES);
        let ds = extract_patches_in(&img, n, per_class, seed, Region::whole(&img.image), e.split)
            .map_err(|err| err.context(e.image.display()))?;
        into.push(ds);
    }
    if train.is_empty() || val.is_empty() {
        return Err(CliError::Missing("manifest needs both train and val images".into()));
    }
    Ok((PatchDataset::concat(train)?, PatchDataset::concat(val)?))
}

fn history_csv(header: &[String], h: &History) -> String {
    commented(header, &h.to_csv())
}

pub fn train(ctx: &Context, resume: bool, stop_at: Option<u64>) -> Result<()> {
    let (tr, va) = load_datasets(ctx)?;
    let cfg = ctx.cfg.network_config()?;
    let tcfg = ctx.cfg.train_config();
    tcfg.validate()?;
    let dir = ctx.dir(&["train"])?;
    let ck_path = ctx.train_checkpoint();
    let hist_path = dir.join("history.csv");
    let ck = if resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.network.config() != &cfg {
            return Err(CliError::Config("checkpoint network does not match the config".into()));
        }
        info!("resuming at iteration {}", ck.state.iteration);
        ck
    } else {
        Checkpoint {
            network: Network::build(cfg, ctx.cfg.seed.wrapping_add(seeds::INIT))?,
            state: TrainingState::untrained(tcfg.seed),
        }
    };
    let resumed = ck.state.iteration > 0;
    let (ck, history) = continue_training(ck, &tr, &va, &tcfg, stop_at)?;
    ck.save(&ck_path)?;
    let text = if resumed && hist_path.exists() {
        let mut old = read(&hist_path)?;
        for line in history.to_csv().lines().skip(1) {
            let _ = writeln!(old, "{line}");
        }
        old
    } else {
        history_csv(&ctx.header("training history"), &history)
    };
    write(&hist_path, text)?;
    if let Some(acc) = history.final_accuracy() {
        info!("iteration {}: validation accuracy {acc:.4}", ck.state.iteration);
    }
    Ok(())
}

fn load_reference(ctx: &Context) -> Result<Network> {
    let path = ctx.train_checkpoint();
    if !path.exists() {
        return Err(CliError::Missing(format!("no checkpoint at {} (run `train` first)", path.display())));
    }
    let ck = Checkpoint::load(&path)?;
    if ck.state.iteration < ck.state.total_iterations {
        warn!(
            "reference checkpoint stopped at iteration {} of {}",
            ck.state.iteration, ck.state.total_iterations
        );
    }
    Ok(ck.network)
}

fn all_plans(ctx: &Context) -> Result<Vec<NamedPlan>> {
    let mut out = Vec::new();
    for s in ctx.cfg.strategies() {
        out.extend(ctx.cfg.plans(s)?);
    }
    Ok(out)
}

fn ordering_csv(ctx: &Context, o: &PruneOrdering) -> String {
    let mut h = ctx.header("feature ordering");
    h.push(format!(
        "layer={} strategy={} seed={} base_loss={}",
        o.layer,
        o.strategy.name(),
        o.seed,
        o.base_loss
    ));
    commented(&h, &o.to_csv())
}

/// Inverse of [`ordering_csv`].
pub fn parse_ordering(text: &str) -> Result<PruneOrdering> {
    let bad = |m: &str| CliError::Core(memprune::Error::Format { offset: 0, message: m.into() });
    let (mut layer, mut strategy, mut seed, mut base_loss) = (None, None, None, None);
    let mut steps = Vec::new();
    for line in text.lines() {
        if let Some(c) = line.strip_prefix("# ") {
            for kv in c.split_whitespace() {
                match kv.split_once('=') {
                    Some(("layer", v)) => layer = LayerId::from_name(v),
                    Some(("strategy", v)) => strategy = Strategy::parse(v),
                    Some(("seed", v)) if layer.is_some() => seed = v.parse().ok(),
                    Some(("base_loss", v)) => base_loss = v.parse().ok(),
                    _ => {}
                }
            }
            continue;
        }
        if line.starts_with("step,") || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad("ordering row needs 3 fields"));
        }
        steps.push(OrderStep {
            feature: f[1].parse().map_err(|_| bad("bad feature index"))?,
            loss: f[2].parse().map_err(|_| bad("bad loss"))?,
        });
    }
    Ok(PruneOrdering {
        layer: layer.ok_or_else(|| bad("missing layer"))?,
        strategy: strategy.ok_or_else(|| bad("missing strategy"))?,
        seed: seed.ok_or_else(|| bad("missing seed"))?,
        base_loss: base_loss.ok_or_else(|| bad("missing base loss"))?,
        steps,
    })
}

pub fn load_orderings(ctx: &Context, strategy: Strategy, plan: &str) -> Result<Vec<PruneOrdering>> {
    let dir = ctx.plan_dir(strategy, plan);
    LayerId::ALL
        .iter()
        .map(|l| {
            let p = dir.join(format!("{l}.csv"));
            if !p.exists() {
                return Err(CliError::Missing(format!("no ordering at {} (run `prune` first)", p.display())));
            }
            parse_ordering(&read(&p)?)
        })
        .collect()
}

pub fn prune(ctx: &Context) -> Result<()> {
    let net = load_reference(ctx)?;
    let (tr, va) = load_datasets(ctx)?;
    let plans = all_plans(ctx)?;
    let raw: Vec<_> = plans.iter().map(|p| p.plan.clone()).collect();
    info!("ordering {} plan(s)", raw.len());
    let orderings = order_plans(&net, &raw, &tr)?;
    let tcfg = ctx.cfg.train_config();
    let rcfg = ctx.cfg.retrain_config();
    let mut summary = String::from("strategy,plan,c1,c2,c3,fc4,deltaP_percent,A_pruned,A_retrained\n");
    for (p, ords) in plans.iter().zip(&orderings) {
        let dir = ctx.dir(&["prune", p.plan.strategy.name(), &p.name])?;
        for o in ords {
            write(&dir.join(format!("{}.csv", o.layer)), ordering_csv(ctx, o))?;
        }
        let pruned = apply_plan(&net, ords, p.plan.keep)?;
        checkpoint::save(&pruned, dir.join("pruned.bin"))?;
        let a_pruned = accuracy(&pruned, &va)?;
        let (re, hist) = retrain(pruned, &tr, &va, &tcfg, &rcfg)?;
        checkpoint::save(&re, dir.join("retrained.bin"))?;
        write(&dir.join("retrain_history.csv"), history_csv(&ctx.header("retraining history"), &hist))?;
        let a_re = accuracy(&re, &va)?;
        let k = p.plan.keep;
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{:.2},{:.4},{:.4}",
            p.plan.strategy.name(),
            p.name,
            k[0],
            k[1],
            k[2],
            k[3],
            100.0 * delta_p(&net, &re),
            a_pruned,
            a_re
        );
        info!("{} {}: accuracy {a_pruned:.4} pruned, {a_re:.4} retrained", p.plan.strategy.name(), p.name);
    }
    let dir = ctx.dir(&["prune"])?;
    write(&dir.join("summary.csv"), commented(&ctx.header("pruning summary"), &summary))?;
    Ok(())
}

fn eval_image(ctx: &Context, offset: u64, side: usize) -> LabeledImage {
    let seed = ctx.cfg.seed.wrapping_add(seeds::EVAL_IMAGES + offset);
    synth_membranes(&ctx.cfg.data.synth_params(seed, side, side))
}

fn row_name(strategy: Strategy, plan: &str) -> String {
    match strategy {
        Strategy::Greedy => plan.to_string(),
        s => format!("{plan}_{}", s.name()),
    }
}

pub fn eval(ctx: &Context) -> Result<()> {
    let reference = load_reference(ctx)?;
    let (_, va) = load_datasets(ctx)?;
    let e = &ctx.cfg.eval;
    let timing_img = eval_image(ctx, 0, e.timing_size);
    let map_img = eval_image(ctx, 1, e.map_size);
    let dir = ctx.dir(&["eval"])?;

    let mut nets = vec![(ctx.cfg.reference_name(), reference.clone())];
    for p in all_plans(ctx)? {
        let path = ctx.plan_dir(p.plan.strategy, &p.name).join("retrained.bin");
        if !path.exists() {
            return Err(CliError::Missing(format!("no retrained network at {} (run `prune` first)", path.display())));
        }
        nets.push((row_name(p.plan.strategy, &p.name), checkpoint::load(&path)?));
    }

    let mut table = format!("{}\n", EvalReport::CSV_HEADER);
    let mut maps = String::from("name,mad_vs_reference,f1_at_threshold,best_threshold,best_f1\n");
    let mut ref_map: Option<GrayImage> = None;
    let sweep: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
    for (name, net) in &nets {
        let timing = time_segmentation(net, &timing_img.image, e.repetitions)?;
        let r = EvalReport {
            name: name.clone(),
            accuracy: accuracy(net, &va)?,
            seconds: timing.median_seconds,
            delta_p: delta_p(&reference, net),
            memory_bytes: estimate_memory(net, 1)?,
        };
        let _ = writeln!(table, "{}", r.csv_row());

        let prob = probability_map(net, &map_img.image, 1)?;
        let seg = threshold_map(&prob, e.threshold)?;
        save_image(&prob, dir.join(format!("{name}_prob.pgm")), BitDepth::Sixteen)?;
        save_image(
            &GrayImage::from_mask(prob.width, prob.height, &seg),
            dir.join(format!("{name}_seg.pgm")),
            BitDepth::Eight,
        )?;
        let f1 = memprune::eval::f1_score(&seg, &map_img.labels);
        let best = threshold_sweep(&prob, &map_img.labels, &sweep)?
            .into_iter()
            .fold((0.0, -1.0), |b, (t, f)| if f > b.1 { (t, f) } else { b });
        let mad = match &ref_map {
            None => 0.0,
            Some(r) => r.data.iter().zip(&prob.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / r.data.len() as f64,
        };
        let _ = writeln!(maps, "{name},{mad:.6},{f1:.4},{:.2},{:.4}", best.0, best.1);
        if ref_map.is_none() {
            ref_map = Some(prob);
        }
        info!("{name}: A={:.4} T={:.4}s", r.accuracy, r.seconds);
    }
    let mut th = ctx.header("results table");
    th.push(format!(
        "T = median seconds for a {0}x{0} image over {1} runs; M = bytes at {2} bytes/value, batch size 1",
        e.timing_size,
        e.repetitions,
        memprune::eval::MEMORY_BYTES_PER_VALUE
    ));
    write(&dir.join("table.csv"), commented(&th, &table))?;
    write(&dir.join("maps.csv"), commented(&ctx.header("probability maps"), &maps))?;

    // one accuracy column per strategy, rows per plan
    let strategies = ctx.cfg.strategies();
    let mut cmp = String::from("plan,c1,c2,c3,fc4,deltaP_percent");
    for s in &strategies {
        let _ = write!(cmp, ",A_{}", s.name());
    }
    cmp.push('\n');
    for p in ctx.cfg.plans(Strategy::Greedy)? {
        let k = p.plan.keep;
        let dp = 1.0 - reference.config().param_count_for(k).total as f64 / reference.param_count().total as f64;
        let _ = write!(cmp, "{},{},{},{},{},{:.2}", p.name, k[0], k[1], k[2], k[3], 100.0 * dp);
        for &s in &strategies {
            let name = row_name(s, &p.name);
            let net = &nets.iter().find(|(n, _)| *n == name).expect("evaluated above").1;
            let _ = write!(cmp, ",{:.4}", accuracy(net, &va)?);
        }
        cmp.push('\n');
    }
    write(&dir.join("comparison.csv"), commented(&ctx.header("strategy comparison"), &cmp))?;
    Ok(())
}

/// Mean cumulative loss over `seeds` random orderings of each layer, under
/// the upstream pruning of the given orderings.
pub fn random_baseline(
    net: &Network,
    plan: &NamedPlan,
    orderings: &[PruneOrdering],
    data: &PatchDataset,
    seeds: &[u64],
) -> Result<Vec<Vec<f64>>> {
    let mut work = net.clone();
    let mut out = Vec::with_capacity(4);
    for (layer, o) in LayerId::ALL.into_iter().zip(orderings) {
        let sample = plan.plan.estimator.with_seed(o.seed).sample(data)?;
        let n = o.steps.len();
        let mut mean = vec![0.0; n];
        for &s in seeds {
            let r = random_order_layer(&work, layer, &sample, s)?;
            for (m, st) in mean.iter_mut().zip(&r.steps) {
                *m += st.loss;
            }
        }
        for m in &mut mean {
            *m /= seeds.len() as f64;
        }
        out.push(mean);
        let drop = n - plan.plan.keep[layer.index()];
        work.discard(layer, &o.features()[..drop])?;
    }
    Ok(out)
}

pub fn report(ctx: &Context) -> Result<()> {
    let net = load_reference(ctx)?;
    let (tr, _) = load_datasets(ctx)?;
    let dir = ctx.dir(&["report"])?;
    let strategies = ctx.cfg.strategies();
    let rseeds: Vec<u64> = (0..ctx.cfg.prune.random_seeds as u64)
        .map(|r| ctx.cfg.seed.wrapping_add(seeds::RANDOM_ORDER + r))
        .collect();

    let mut md = String::new();
    let _ = writeln!(md, "# Experiment `{}`\n", ctx.cfg.name);
    let _ = writeln!(md, "config sha256: `{}`  ", ctx.cfg.hash());
    let _ = writeln!(md, "seed: {}\n", ctx.cfg.seed);
    let _ = writeln!(md, "| section | sha256 |\n|---|---|");
    for (s, h) in ctx.cfg.section_hashes() {
        let _ = writeln!(md, "| {s} | `{h}` |");
    }

    let _ = writeln!(md, "\n## Ordering curves\n");
    let _ = writeln!(md, "Fraction of steps where the greedy curve is at or below the mean of {} random orderings.\n", rseeds.len());
    let _ = writeln!(md, "| plan | c1 | c2 | c3 | fc4 |\n|---|---|---|---|---|");
    for p in ctx.cfg.plans(Strategy::Greedy)? {
        let greedy = load_orderings(ctx, Strategy::Greedy, &p.name).ok();
        let others: Vec<(Strategy, Vec<PruneOrdering>)> = strategies
            .iter()
            .filter(|&&s| s != Strategy::Greedy)
            .map(|&s| Ok((s, load_orderings(ctx, s, &p.name)?)))
            .collect::<Result<_>>()?;
        let random = match (&greedy, rseeds.is_empty()) {
            (Some(g), false) => Some(random_baseline(&net, &p, g, &tr, &rseeds)?),
            _ => None,
        };
        let mut fractions = Vec::new();
        for layer in LayerId::ALL {
            let i = layer.index();
            let mut csv = String::from("step");
            if greedy.is_some() {
                csv.push_str(",greedy");
            }
            if random.is_some() {
                csv.push_str(",random_mean");
            }
            for (s, _) in &others {
                let _ = write!(csv, ",{}", s.name());
            }
            csv.push('\n');
            let n = net.config().maps[i];
            let mut below = 0;
            for step in 0..n {
                let _ = write!(csv, "{}", step + 1);
                if let Some(g) = &greedy {
                    let _ = write!(csv, ",{}", g[i].steps[step].loss);
                }
                if let Some(r) = &random {
                    let _ = write!(csv, ",{}", r[i][step]);
                    if let Some(g) = &greedy {
                        below += usize::from(g[i].steps[step].loss <= r[i][step]);
                    }
                }
                for (_, o) in &others {
                    let _ = write!(csv, ",{}", o[i].steps[step].loss);
                }
                csv.push('\n');
            }
            fractions.push(below as f64 / n as f64);
            let mut h = ctx.header("ordering curves");
            h.push(format!("plan={} layer={layer} keep={}", p.name, p.plan.keep[i]));
            write(&dir.join(format!("curve_{}_{layer}.csv", p.name)), commented(&h, &csv))?;
        }
        if random.is_some() && greedy.is_some() {
            let _ = writeln!(
                md,
                "| {} | {:.2} | {:.2} | {:.2} | {:.2} |",
                p.name, fractions[0], fractions[1], fractions[2], fractions[3]
            );
        }
    }

    let eval_dir = ctx.out.join("eval");
    if let Ok(t) = read(&eval_dir.join("table.csv")) {
        let _ = writeln!(md, "\n## Results (timings in eval/table.csv)\n");
        let _ = writeln!(md, "| name | A | deltaP % | M bytes |\n|---|---|---|---|");
        for line in t.lines().filter(|l| !l.starts_with('#')).skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let _ = writeln!(md, "| {} | {} | {} | {} |", f[0], f[1], f[3], f[4]);
        }
    }
    if let Ok(c) = read(&eval_dir.join("comparison.csv")) {
        let _ = writeln!(md, "\n## Strategy comparison\n\n```");
        for line in c.lines().filter(|l| !l.starts_with('#')) {
            let _ = writeln!(md, "{line}");
        }
        let _ = writeln!(md, "```");
    }
    write(&dir.join("report.md"), md)?;
    info!("report written to {}", dir.display());
    Ok(())
}
