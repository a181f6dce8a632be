//! Command-line front end. Every option may also come from a flat
//! `key = value` config file (`--config`); command-line flags win. Each
//! command writes the settings it ran with to `<command>.config` next to its
//! outputs, in the same format.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::episodes::{generate_dataset, pnm, split_folds, Dataset, EpisodeSampler, Phase, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::experiments::{run_ablation, write_ablation, AblationConfig, Variant};
use crate::metrics::{evaluate, write_report, EvalReport, GroundTruth, ModelSegmenter, Segmenter};
use crate::model::{FeatureBank, Flags, Model, ModelConfig, ParamStore};
use crate::tensor::{flip_h, min_max_normalize, upsample_nearest, Tensor};
use crate::trainer::{self, BaseConfig, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "reflseg", version, about = "Few-shot segmentation with reflection invariance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset.
    GenData(Opts),
    /// Fit the base-class learner of one fold.
    TrainBase(Opts),
    /// Meta-train the few-shot model of one fold.
    TrainMeta(Opts),
    /// Score a checkpoint on test episodes.
    Eval(Opts),
    /// Compare reverse-mode and finite-difference gradients on a toy episode.
    Gradcheck(Opts),
    /// Train and score every ablation variant.
    Ablate(Opts),
    /// Write prior masks and predictions of one episode as images.
    Demo(Opts),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainBase(_) => "train-base",
            Command::TrainMeta(_) => "train-meta",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
            Command::Ablate(_) => "ablate",
            Command::Demo(_) => "demo",
        }
    }

    fn opts(&self) -> &Opts {
        match self {
            Command::GenData(o)
            | Command::TrainBase(o)
            | Command::TrainMeta(o)
            | Command::Eval(o)
            | Command::Gradcheck(o)
            | Command::Ablate(o)
            | Command::Demo(o) => o,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn get(self) -> bool {
        self == OnOff::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Oracle {
    /// Answer every episode with the query's ground truth.
    Gt,
}

#[derive(Args, Debug, Default, Clone)]
struct Opts {
    /// Flat `key = value` file with defaults for any option below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..4))]
    fold: Option<u64>,
    /// Shots per episode (1 or 5).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds, counted up from `--seed`.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    base_learner: Option<OnOff>,
    #[arg(long)]
    sri: Option<OnOff>,
    #[arg(long)]
    qri: Option<OnOff>,
    /// Reuse the original view's prior fusion conv for the mirrored view.
    #[arg(long)]
    share_prior_conv: bool,
    /// Mirror whole training episodes with probability 0.5.
    #[arg(long)]
    flip_aug: bool,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    #[arg(long)]
    n_episodes_eval: Option<usize>,
    /// Test episodes scored after each training epoch.
    #[arg(long)]
    val_episodes: Option<usize>,
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    base_checkpoint: Option<PathBuf>,
    #[arg(long)]
    oracle: Option<Oracle>,
}

/// Failure before any work starts; reported with exit code 2.
#[derive(Debug)]
struct Usage(String);

fn parse_on_off(key: &str, v: &str) -> std::result::Result<bool, Usage> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Usage(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, Usage> {
    v.parse().map_err(|_| Usage(format!("{key}: cannot parse {v:?}")))
}

/// Reads `key = value` lines; `#` starts a comment.
fn read_config_file(path: &Path) -> std::result::Result<BTreeMap<String, String>, Usage> {
    let text = fs::read_to_string(path).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Usage(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
        out.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(out)
}

/// Fills options not given on the command line from the config file.
fn merge_file(opts: &mut Opts, file: BTreeMap<String, String>) -> std::result::Result<(), Usage> {
    fn fill<T>(slot: &mut Option<T>, v: std::result::Result<T, Usage>) -> std::result::Result<(), Usage> {
        if slot.is_none() {
            *slot = Some(v?);
        }
        Ok(())
    }
    let onoff = |k: &str, v: &str| parse_on_off(k, v).map(|b| if b { OnOff::On } else { OnOff::Off });
    for (k, v) in &file {
        let v = v.as_str();
        match k.as_str() {
            "dataset-dir" => fill(&mut opts.dataset_dir, Ok(PathBuf::from(v)))?,
            "out-dir" => fill(&mut opts.out_dir, Ok(PathBuf::from(v)))?,
            "fold" => {
                let f: u64 = parse_value(k, v)?;
                if f > 3 {
                    return Err(Usage(format!("fold {f} out of range 0..=3")));
                }
                fill(&mut opts.fold, Ok(f))?
            }
            "k" => fill(&mut opts.k, parse_value(k, v))?,
            "seed" => fill(&mut opts.seed, parse_value(k, v))?,
            "seeds" => fill(&mut opts.seeds, parse_value(k, v))?,
            "epochs" => fill(&mut opts.epochs, parse_value(k, v))?,
            "lr" => fill(&mut opts.lr, parse_value(k, v))?,
            "batch" => fill(&mut opts.batch, parse_value(k, v))?,
            "momentum" => fill(&mut opts.momentum, parse_value(k, v))?,
            "base-learner" => fill(&mut opts.base_learner, onoff(k, v))?,
            "sri" => fill(&mut opts.sri, onoff(k, v))?,
            "qri" => fill(&mut opts.qri, onoff(k, v))?,
            "share-prior-conv" => opts.share_prior_conv |= parse_on_off(k, v)?,
            "flip-aug" => opts.flip_aug |= parse_on_off(k, v)?,
            "episodes-per-epoch" => fill(&mut opts.episodes_per_epoch, parse_value(k, v))?,
            "n-episodes-eval" => fill(&mut opts.n_episodes_eval, parse_value(k, v))?,
            "val-episodes" => fill(&mut opts.val_episodes, parse_value(k, v))?,
            "n-per-class" => fill(&mut opts.n_per_class, parse_value(k, v))?,
            "checkpoint" => fill(&mut opts.checkpoint, Ok(PathBuf::from(v)))?,
            "base-checkpoint" => fill(&mut opts.base_checkpoint, Ok(PathBuf::from(v)))?,
            "oracle" => {
                if v != "gt" {
                    return Err(Usage(format!("oracle: unknown value {v:?}")));
                }
                fill(&mut opts.oracle, Ok(Oracle::Gt))?
            }
            other => return Err(Usage(format!("unknown config key {other:?}"))),
        }
    }
    Ok(())
}

/// Fully resolved options of one command.
#[derive(Clone, Debug)]
struct Settings {
    command: &'static str,
    dataset_dir: PathBuf,
    out_dir: PathBuf,
    fold: Option<usize>,
    k: Option<usize>,
    seed: u64,
    seeds: u64,
    epochs: usize,
    lr: f64,
    batch: usize,
    momentum: f64,
    flags: Flags,
    flip_aug: bool,
    episodes_per_epoch: usize,
    n_episodes_eval: usize,
    val_episodes: usize,
    n_per_class: usize,
    checkpoint: Option<PathBuf>,
    base_checkpoint: Option<PathBuf>,
    oracle: bool,
}

impl Settings {
    fn resolve(command: &'static str, o: &Opts) -> std::result::Result<Settings, Usage> {
        let base = command == "train-base";
        let s = Settings {
            command,
            dataset_dir: o.dataset_dir.clone().unwrap_or_else(|| PathBuf::from("data")),
            out_dir: o.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs")),
            fold: o.fold.map(|f| f as usize),
            k: o.k,
            seed: o.seed.unwrap_or(0),
            seeds: o.seeds.unwrap_or(1),
            epochs: o.epochs.unwrap_or(if base { BaseConfig::default().epochs } else { 20 }),
            lr: o.lr.unwrap_or(if base { BaseConfig::default().lr } else { 5e-2 }),
            batch: o.batch.unwrap_or(8),
            momentum: o.momentum.unwrap_or(if base { BaseConfig::default().momentum } else { 0.0 }),
            flags: Flags {
                sri: o.sri.is_none_or(OnOff::get),
                qri: o.qri.is_none_or(OnOff::get),
                base_learner: o.base_learner.is_some_and(OnOff::get),
                share_prior_conv: o.share_prior_conv,
            },
            flip_aug: o.flip_aug,
            episodes_per_epoch: o.episodes_per_epoch.unwrap_or(400),
            n_episodes_eval: o.n_episodes_eval.unwrap_or(1000),
            val_episodes: o.val_episodes.unwrap_or(100),
            n_per_class: o.n_per_class.unwrap_or(50),
            checkpoint: o.checkpoint.clone(),
            base_checkpoint: o.base_checkpoint.clone(),
            oracle: o.oracle.is_some(),
        };
        if let Some(k) = s.k {
            if k == 0 {
                return Err(Usage("k must be at least 1".into()));
            }
        }
        if s.seeds == 0 || s.batch == 0 {
            return Err(Usage("seeds and batch must be at least 1".into()));
        }
        if !(s.lr >= 0.0 && s.lr.is_finite()) {
            return Err(Usage(format!("lr {} must be finite and non-negative", s.lr)));
        }
        Ok(s)
    }

    /// The settings in config-file form, readable back through `--config`.
    fn echo(&self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        let mut lines = vec![format!("# reflseg {}", self.command)];
        let mut kv = |k: &str, v: String| lines.push(format!("{k} = {v}"));
        kv("dataset-dir", self.dataset_dir.display().to_string());
        kv("out-dir", self.out_dir.display().to_string());
        if let Some(f) = self.fold {
            kv("fold", f.to_string());
        }
        if let Some(k) = self.k {
            kv("k", k.to_string());
        }
        kv("seed", self.seed.to_string());
        kv("seeds", self.seeds.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("batch", self.batch.to_string());
        kv("momentum", self.momentum.to_string());
        kv("base-learner", on(self.flags.base_learner).into());
        kv("sri", on(self.flags.sri).into());
        kv("qri", on(self.flags.qri).into());
        kv("share-prior-conv", on(self.flags.share_prior_conv).into());
        kv("flip-aug", on(self.flip_aug).into());
        kv("episodes-per-epoch", self.episodes_per_epoch.to_string());
        kv("n-episodes-eval", self.n_episodes_eval.to_string());
        kv("val-episodes", self.val_episodes.to_string());
        kv("n-per-class", self.n_per_class.to_string());
        if let Some(p) = &self.checkpoint {
            kv("checkpoint", p.display().to_string());
        }
        if let Some(p) = &self.base_checkpoint {
            kv("base-checkpoint", p.display().to_string());
        }
        if self.oracle {
            kv("oracle", "gt".into());
        }
        lines.join("\n") + "\n"
    }

    fn fold(&self) -> usize {
        self.fold.unwrap_or(0)
    }

    fn shots(&self) -> usize {
        self.k.unwrap_or(1)
    }

    fn write_echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::at(dir))?;
        let path = dir.join(format!("{}.config", self.command));
        fs::write(&path, self.echo()).map_err(Error::at(&path))
    }
}

/// Parses `args` (program name first), runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let mut opts = cli.command.opts().clone();
    if let Some(path) = opts.config.clone() {
        if let Err(Usage(msg)) = read_config_file(&path).and_then(|f| merge_file(&mut opts, f)) {
            eprintln!("error: {msg}");
            return 2;
        }
    }
    let settings = match Settings::resolve(cli.command.name(), &opts) {
        Ok(s) => s,
        Err(Usage(msg)) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    configure_threads();
    match dispatch(&settings) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Caps the worker pool at `REFLSEG_THREADS` when set.
fn configure_threads() {
    if let Some(n) = std::env::var("REFLSEG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().is_err() {
            log::debug!("thread pool already configured");
        }
    }
}

fn dispatch(s: &Settings) -> Result<()> {
    match s.command {
        "gen-data" => gen_data(s),
        "train-base" => train_base(s),
        "train-meta" => train_meta(s),
        "eval" => eval(s),
        "gradcheck" => gradcheck(s),
        "ablate" => ablate(s),
        "demo" => demo(s),
        other => unreachable!("unknown command {other}"),
    }
}

fn gen_data(s: &Settings) -> Result<()> {
    let rows = generate_dataset(s.n_per_class, s.seed, &s.dataset_dir)?;
    s.write_echo(&s.dataset_dir)?;
    println!("wrote {} samples to {}", rows.len(), s.dataset_dir.display());
    Ok(())
}

fn load_data(s: &Settings) -> Result<Dataset> {
    Dataset::load(&s.dataset_dir)
}

fn train_base(s: &Settings) -> Result<()> {
    let dataset = load_data(s)?;
    let split = split_folds(s.fold())?;
    let mut model = Model::new(ModelConfig::default(), Flags { base_learner: true, ..s.flags }, s.seed);
    let bank = FeatureBank::build(&dataset, &model.backbone)?;
    let cfg = BaseConfig { epochs: s.epochs, lr: s.lr, momentum: s.momentum, batch: s.batch, seed: s.seed };
    let losses = trainer::fit_base_learner(&mut model, &dataset, &bank, &split, &cfg)?;
    s.write_echo(&s.out_dir)?;
    let mut log = String::from("epoch,mean_loss\n");
    for (i, l) in losses.iter().enumerate() {
        log.push_str(&format!("{},{l}\n", i + 1));
    }
    let log_path = s.out_dir.join("base_log.csv");
    fs::write(&log_path, log).map_err(Error::at(&log_path))?;
    let data = trainer::base_training_set(&dataset, &bank, &split)?;
    let acc = trainer::base_accuracy(&data, model.params.get("base.weight")?, model.params.get("base.bias")?)?;
    let mut state = ParamStore::default();
    for (k, v) in model.full_state().iter() {
        if k.starts_with("base.") || k.starts_with("backbone.") {
            state.insert(k.clone(), v.clone());
        }
    }
    let path = s.out_dir.join("base.ckpt");
    checkpoint::save(&path, &state)?;
    println!(
        "base learner fold {}: final loss {:.4}, pixel accuracy {:.2}%, saved {}",
        split.fold,
        losses.last().copied().unwrap_or(f64::NAN),
        100.0 * acc,
        path.display()
    );
    Ok(())
}

fn train_meta(s: &Settings) -> Result<()> {
    let dataset = load_data(s)?;
    let mut model = Model::new(ModelConfig::default(), s.flags, s.seed);
    if s.flags.base_learner {
        let path = s.base_checkpoint.clone().unwrap_or_else(|| s.out_dir.join("base.ckpt"));
        let state = checkpoint::load(&path)?;
        for (i, layer) in model.backbone.layers.iter().enumerate() {
            if state.get(&format!("backbone.conv{}.weight", i + 1))? != &layer.weight {
                return Err(Error::InvalidArgument(format!("{} was trained on a different extractor", path.display())));
            }
        }
        model.params.insert("base.weight", state.get("base.weight")?.clone());
        model.params.insert("base.bias", state.get("base.bias")?.clone());
    }
    let bank = FeatureBank::build(&dataset, &model.backbone)?;
    let cfg = TrainConfig {
        fold: s.fold(),
        shots: s.shots(),
        seed: s.seed,
        epochs: s.epochs,
        episodes_per_epoch: s.episodes_per_epoch,
        batch: s.batch,
        lr: s.lr,
        momentum: s.momentum,
        flip_augment: s.flip_aug,
        val_episodes: s.val_episodes,
        out_dir: Some(s.out_dir.clone()),
    };
    s.write_echo(&s.out_dir)?;
    let summary = trainer::train_meta(&mut model, &dataset, &bank, &cfg)?;
    println!("epoch  mean_loss  miou_val");
    for (i, (l, m)) in summary.epoch_losses.iter().zip(&summary.val_miou).enumerate() {
        println!("{:>5}  {l:>9.5}  {}", i + 1, m.map_or("-".into(), |m| format!("{m:>8.2}")));
    }
    println!("saved {}", s.out_dir.join("meta.ckpt").display());
    Ok(())
}

fn print_reports(reports: &[EvalReport]) {
    println!("fold  shot    mIoU  FB-IoU  per-class IoU");
    for r in reports {
        let classes: Vec<String> =
            r.class_iou.iter().map(|(c, v)| format!("{c}:{}", v.map_or("-".into(), |v| format!("{v:.1}")))).collect();
        println!("{:>4}  {:>4}  {:>6.2}  {:>6.2}  {}", r.fold, r.shot, r.miou, r.fbiou, classes.join(" "));
    }
}

fn eval(s: &Settings) -> Result<()> {
    let dataset = load_data(s)?;
    let folds: Vec<usize> = s.fold.map_or_else(|| (0..4).collect(), |f| vec![f]);
    let shots: Vec<usize> = s.k.map_or_else(|| vec![1, 5], |k| vec![k]);
    let model = if s.oracle {
        None
    } else {
        let path = s.checkpoint.clone().unwrap_or_else(|| s.out_dir.join("meta.ckpt"));
        Some(Model::from_state(checkpoint::load(&path)?)?)
    };
    let bank = match &model {
        Some(m) => Some(FeatureBank::build(&dataset, &m.backbone)?),
        None => None,
    };
    let stride = model.as_ref().map_or(crate::episodes::DEFAULT_FEATURE_STRIDE, |m| m.backbone.stride());
    s.write_echo(&s.out_dir)?;
    let mut reports = Vec::new();
    for &fold in &folds {
        let split = split_folds(fold)?;
        for &k in &shots {
            let oracle;
            let model_seg;
            let seg: &dyn Segmenter = match (&model, &bank) {
                (Some(m), Some(b)) => {
                    model_seg = ModelSegmenter { model: m, bank: b };
                    &model_seg
                }
                _ => {
                    oracle = GroundTruth(&dataset);
                    &oracle
                }
            };
            let runs = (0..s.seeds)
                .map(|i| evaluate(seg, &dataset, &split, k, stride, s.n_episodes_eval, s.seed + i))
                .collect::<Result<Vec<_>>>()?;
            if runs.len() > 1 {
                let m: Vec<f64> = runs.iter().map(|r| r.miou).collect();
                let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                println!("fold {fold} {k}-shot: mIoU over {} seeds {:.2} (range {lo:.2} to {hi:.2})", runs.len(), m.iter().sum::<f64>() / m.len() as f64);
            }
            reports.extend(runs);
        }
    }
    print_reports(&reports);
    let path = s.out_dir.join("eval.csv");
    write_report(&path, &reports)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gradcheck(s: &Settings) -> Result<()> {
    let report = trainer::grad_check(s.seed, None)?;
    fs::create_dir_all(&s.out_dir).map_err(Error::at(&s.out_dir))?;
    s.write_echo(&s.out_dir)?;
    let path = s.out_dir.join("gradcheck.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["name", "index", "analytic", "numeric", "rel_err"])?;
    for e in &report.entries {
        w.write_record([e.name.clone(), e.index.to_string(), e.analytic.to_string(), e.numeric.to_string(), e.rel_err.to_string()])?;
    }
    w.flush()?;
    println!(
        "{} scalars checked, max relative error {:.3e} (tolerance {:.0e})",
        report.entries.len(),
        report.max_rel_err,
        report.tolerance
    );
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("gradient check failed for {}", report.failures.join(", "))))
    }
}

fn ablate(s: &Settings) -> Result<()> {
    let dataset = load_data(s)?;
    let cfg = AblationConfig {
        folds: s.fold.map_or_else(|| (0..4).collect(), |f| vec![f]),
        seeds: (s.seed..s.seed + s.seeds).collect(),
        shots: s.shots(),
        n_eval: s.n_episodes_eval,
        model: ModelConfig::default(),
        train: TrainConfig {
            epochs: s.epochs,
            episodes_per_epoch: s.episodes_per_epoch,
            batch: s.batch,
            lr: s.lr,
            momentum: s.momentum,
            ..TrainConfig::default()
        },
    };
    s.write_echo(&s.out_dir)?;
    let results = run_ablation(&dataset, &cfg, &Variant::ALL)?;
    let path = s.out_dir.join("ablation.csv");
    write_ablation(&path, &results)?;
    println!("variant    mean mIoU");
    for v in Variant::ALL {
        println!("{:<10} {:>9.2}", v.name(), crate::experiments::mean_miou(&results, v)?);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn to_gray(map: &Tensor, stride: usize) -> Result<Vec<u8>> {
    let up = upsample_nearest(map, stride)?;
    Ok(up.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect())
}

fn demo(s: &Settings) -> Result<()> {
    let dataset = load_data(s)?;
    let path = s.checkpoint.clone().unwrap_or_else(|| s.out_dir.join("meta.ckpt"));
    let model = Model::from_state(checkpoint::load(&path)?)?;
    let bank = FeatureBank::build(&dataset, &model.backbone)?;
    let split = split_folds(s.fold())?;
    let sampler = EpisodeSampler::new(&dataset, &split, Phase::Test, s.shots(), model.backbone.stride())?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(s.seed);
    let episode = sampler.sample(&mut rng)?;
    let (supports, query) = bank.episode(&episode, false)?;
    let inputs = model.prepare(&supports, &query)?;
    let out = model.outputs(&inputs)?;
    let stride = model.backbone.stride();

    let dir = &s.out_dir;
    s.write_echo(dir)?;
    let size = IMAGE_SIZE;
    let q = dataset.sample(episode.query);
    pnm::write_ppm(&dir.join("query.ppm"), size, size, &q.rgb_bytes())?;
    pnm::write_pgm(&dir.join("query_gt.pgm"), size, size, &q.mask_bytes())?;
    for (i, &si) in episode.supports.iter().enumerate() {
        let sup = dataset.sample(si);
        pnm::write_ppm(&dir.join(format!("support{i}.ppm")), size, size, &sup.rgb_bytes())?;
        pnm::write_pgm(&dir.join(format!("support{i}_mask.pgm")), size, size, &sup.mask_bytes())?;
    }
    let view = &inputs.views[0];
    let binary = |probs: &Tensor| crate::predict::foreground_mask(probs);
    let mut maps: Vec<(&str, Tensor)> = vec![
        ("prior_orig", min_max_normalize(&view.prior_o)),
        ("prior_refl", min_max_normalize(&view.prior_f)),
        ("prior_fused", out.priors[0].clone()),
        ("pred_orig", binary(&out.preds[0])?),
    ];
    if out.preds.len() > 1 {
        maps.push(("pred_refl", flip_h(&binary(&out.preds[1])?)?));
    }
    maps.push(("pred_fused", binary(&out.fused)?));
    for (name, map) in &maps {
        pnm::write_pgm(&dir.join(format!("{name}.pgm")), size, size, &to_gray(map, stride)?)?;
    }
    println!("episode class {} query {} supports {:?}", episode.class_id, episode.query, episode.supports);
    println!("wrote {} images to {}", maps.len() + 2 + 2 * episode.supports.len(), dir.display());
    Ok(())
}
