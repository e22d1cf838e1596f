//! `ssl-lab`: pretrain, fine-tune, probe and evaluate from a flat config file.

mod config;
mod curves;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use ssl_lab::backbones::{BackboneConfig, TokenPooling};
use ssl_lab::data::{
    load_cifar10, load_stl10, synth_gaussian, synth_shapes, AugmentationPolicy, CifarSplit, DatasetSource, Labels,
    ShapeLabels, StlSplit, STL_SIZE,
};
use ssl_lab::simsiam::SiameseModel;
use ssl_lab::train::{
    evaluate, load_checkpoint, train_pretrain, train_supervised, Classifier, EvalMetrics, MetricRow, MetricsLog,
    ModelKind, Regime,
};
use ssl_lab::Error;

use config::RunConfig;

/// How a command failed; each kind has a fixed exit code.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Collapse(String),
    Incompatible(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Internal(_) => 1,
            Failure::Input(_) => 2,
            Failure::Collapse(_) => 3,
            Failure::Incompatible(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Collapse(m) | Failure::Incompatible(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Collapse { .. } | Error::DegenerateVector { .. } => Failure::Collapse(msg),
            Error::Incompatible(_) => Failure::Incompatible(msg),
            Error::Config(_)
            | Error::Format { .. }
            | Error::CorruptRecord { .. }
            | Error::UnlabeledSplit
            | Error::Label(_)
            | Error::Io { .. }
            | Error::Corruption(_)
            | Error::UndefinedInput(_)
            | Error::NoComputableAuc => Failure::Input(msg),
            _ => Failure::Internal(msg),
        }
    }
}

#[derive(Parser)]
#[command(name = "ssl-lab", version, about = "Siamese self-supervised pretraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, env = "SSL_LAB_THREADS")]
    threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    Single,
    Multilabel,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining with the symmetric stop-gradient loss.
    Pretrain(RunArgs),
    /// Supervised training of every weight.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// `random` or a checkpoint whose backbone initializes the model.
        #[arg(long)]
        init: Option<String>,
    },
    /// Linear head on a frozen backbone.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        init: Option<String>,
    },
    /// Evaluate a classifier checkpoint on the configured test split.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Expected task; defaults to the checkpoint's.
        #[arg(long, value_enum)]
        task: Option<Task>,
    },
    /// Plot loss and representation-std curves from metrics CSVs.
    Curves {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Pretrain(run) => cmd_pretrain(&resolve(&run, None)?),
        Command::Finetune { run, init } => cmd_supervised(&resolve(&run, init)?, Regime::Finetune),
        Command::Probe { run, init } => cmd_supervised(&resolve(&run, init)?, Regime::Probe),
        Command::Eval { checkpoint, run, task } => {
            let cfg = resolve(&run, None)?;
            cmd_eval(&checkpoint, &cfg, task, run.out.as_deref())
        }
        Command::Curves { csv, out } => cmd_curves(&csv, &out),
    }
}

fn resolve(args: &RunArgs, init: Option<String>) -> Result<RunConfig, Failure> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Internal(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for pair in &args.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &args.out {
        cfg.set("out", &out.display().to_string())?;
    }
    if let Some(init) = init {
        cfg.set("init", &init)?;
    }
    Ok(cfg)
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

/// Fixes the input size for on-disk datasets and resolves `train_split`.
fn prepare_data_keys(cfg: &mut RunConfig, regime: Regime) -> Result<(), Failure> {
    match cfg.raw("data") {
        "cifar10" => cfg.set("input_size", "3x32x32")?,
        "stl10" => cfg.set("input_size", &format!("3x{STL_SIZE}x{STL_SIZE}"))?,
        "shapes" | "gaussian" => {}
        other => {
            return Err(Failure::Input(format!(
                "data must be shapes, gaussian, cifar10 or stl10, got `{other}`"
            )))
        }
    }
    let split = if regime == Regime::Pretrain && cfg.raw("data") == "stl10" { "unlabeled" } else { "train" };
    cfg.resolve("train_split", split);
    Ok(())
}

fn load_split(cfg: &RunConfig, key: &str) -> Result<DatasetSource, Failure> {
    let split = cfg.raw(key);
    let test = split == "test";
    let shape = cfg.input_size()?;
    let seed: u64 = cfg.get("data_seed")?;
    let synth_seed = if test { seed.wrapping_add(1) } else { seed };
    let items: usize = cfg.get(if test { "synth_test_items" } else { "synth_items" })?;
    let dir = PathBuf::from(cfg.raw("data_dir"));
    let on_disk = || -> Result<(), Failure> {
        if dir.as_os_str().is_empty() || !dir.is_dir() {
            return Err(Failure::Input(format!("data directory `{}` does not exist", dir.display())));
        }
        Ok(())
    };
    let bad_split = || Failure::Input(format!("{key} `{split}` is not a split of {}", cfg.raw("data")));
    let source = match cfg.raw("data") {
        "shapes" => {
            let attributes: usize = cfg.get("synth_attributes")?;
            let labels = if attributes > 0 {
                ShapeLabels::Attributes(attributes)
            } else {
                ShapeLabels::Classes(cfg.get("synth_classes")?)
            };
            synth_shapes(items, shape, labels, synth_seed)?
        }
        "gaussian" => synth_gaussian(items, shape, synth_seed)?,
        "cifar10" => {
            on_disk()?;
            let s = match split {
                "train" => CifarSplit::Train,
                "test" => CifarSplit::Test,
                _ => return Err(bad_split()),
            };
            load_cifar10(&dir, s, None)?
        }
        "stl10" => {
            on_disk()?;
            let s = match split {
                "unlabeled" => StlSplit::Unlabeled,
                "train" => StlSplit::Train,
                "test" => StlSplit::Test,
                _ => return Err(bad_split()),
            };
            load_stl10(&dir, s, None)?
        }
        other => return Err(Failure::Input(format!("unknown data `{other}`"))),
    };
    log::info!("loaded {} ({} items, shape {:?})", source.name(), source.len(), source.item_shape());
    Ok(source)
}

fn resolve_backbone(cfg: &mut RunConfig, b: &BackboneConfig) {
    cfg.resolve("embed_dim", b.embed_dim);
    cfg.resolve("depth", b.depth);
    cfg.resolve("heads", b.heads);
    cfg.resolve("patch_size", b.patch_size);
    cfg.resolve("width_multiplier", b.width_multiplier);
    cfg.resolve("stages", b.stages);
    cfg.resolve("mlp_ratio", b.mlp_ratio);
    cfg.resolve(
        "pooling",
        match b.pooling {
            TokenPooling::ClassToken => "class_token",
            TokenPooling::Mean => "mean",
        },
    );
}

fn resolve_policy(cfg: &mut RunConfig, regime: Regime, policy: Option<&AugmentationPolicy>) {
    let preset = match regime {
        Regime::Pretrain => "default",
        Regime::Finetune => "weak",
        Regime::Probe => "none",
    };
    cfg.resolve("augment", preset);
    for key in ["crop_min", "crop_max", "flip_p", "jitter_p", "grayscale_p", "blur_p"] {
        let v = match policy {
            Some(p) => match key {
                "crop_min" => p.crop_scale.0,
                "crop_max" => p.crop_scale.1,
                "flip_p" => p.flip_p,
                "jitter_p" => p.jitter_p,
                "grayscale_p" => p.grayscale_p,
                _ => p.blur_p,
            },
            None => 0.0,
        };
        cfg.resolve(key, v);
    }
}

/// Creates the output directory and writes the resolved config into it.
fn start_run(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let path = out.join("config.txt");
    fs::write(&path, cfg.render()).map_err(|e| io_err(&path, e))?;
    log::info!("resolved config written to {}", path.display());
    Ok(out)
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<(), Failure> {
    let mut cfg = cfg.clone();
    prepare_data_keys(&mut cfg, Regime::Pretrain)?;
    let shape = cfg.input_size()?;
    let backbone = cfg.backbone(shape)?;
    let siamese = cfg.siamese()?;
    let policy = cfg.augmentation(Regime::Pretrain, shape)?.expect("pretraining always augments");
    let train = cfg.train(Regime::Pretrain, false)?;
    resolve_backbone(&mut cfg, &backbone);
    resolve_policy(&mut cfg, Regime::Pretrain, Some(&policy));
    cfg.resolve("loss", "cosine");
    let out = start_run(&cfg)?;

    let data = load_split(&cfg, "train_split")?;
    let (model, mut store) = SiameseModel::build::<f32>(&backbone, &siamese, train.seed)?;
    let mut log = MetricsLog::create(&out.join("metrics.csv"))?;
    let report = train_pretrain(&model, &mut store, &data, &policy, &train, &mut log, Some(&out))?;
    println!(
        "pretrain finished: {} steps, final loss {:.5}, final representation std {:.5}, best epoch {}",
        report.steps,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        report.final_std(),
        report.best_epoch
    );
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn task_of(labels: &Labels) -> Result<(usize, bool), Failure> {
    match labels {
        Labels::Single { classes, .. } => Ok((*classes, false)),
        Labels::Multi { attributes, .. } => Ok((*attributes, true)),
        Labels::Unlabeled => Err(Error::UnlabeledSplit.into()),
    }
}

fn cmd_supervised(cfg: &RunConfig, regime: Regime) -> Result<(), Failure> {
    let mut cfg = cfg.clone();
    prepare_data_keys(&mut cfg, regime)?;
    let shape = cfg.input_size()?;
    let backbone = cfg.backbone(shape)?;
    let policy = cfg.augmentation(regime, shape)?;
    resolve_backbone(&mut cfg, &backbone);
    resolve_policy(&mut cfg, regime, policy.as_ref());

    let data = load_split(&cfg, "train_split")?;
    let (outputs, multi_label) = task_of(data.labels()?)?;
    let train = cfg.train(regime, multi_label)?;
    cfg.resolve("loss", if multi_label { "bce" } else { "ce" });
    let out = start_run(&cfg)?;

    let (clf, mut store) = Classifier::build::<f32>(&backbone, outputs, multi_label, train.seed)?;
    match cfg.raw("init") {
        "random" => log::info!("provenance: backbone randomly initialized (seed {})", train.seed),
        path => {
            let path = Path::new(path);
            let hash = sha256_file(path)?;
            let ck = load_checkpoint(path)?;
            let n = clf.init_backbone(&ck, &mut store)?;
            let line = format!("provenance: backbone initialized from {} sha256 {hash} ({n} tensors)", path.display());
            log::info!("{line}");
            let prov = out.join("provenance.txt");
            fs::write(&prov, format!("{line}\n")).map_err(|e| io_err(&prov, e))?;
        }
    }

    let mut test = load_split(&cfg, "test_split")?;
    test.set_normalization(data.normalization().clone())?;
    let metrics_path = out.join("metrics.csv");
    let mut log = MetricsLog::create(&metrics_path)?;
    let report = train_supervised(&clf, &mut store, &data, policy.as_ref(), &train, &mut log, Some(&out))?;
    let result = evaluate(&clf, &mut store, &test)?;
    for (name, value) in result.table() {
        log.push(MetricRow::new(report.best_epoch, report.steps, "test", name, value, 0.0));
    }
    log.flush()?;
    println!(
        "best epoch {} (val {} {:.4})",
        report.best_epoch,
        result.primary_name(),
        report.best_val
    );
    print_table(&result);
    Ok(())
}

fn print_table(m: &EvalMetrics) {
    for (name, value) in m.table() {
        println!("{name}\t{value}");
    }
}

fn cmd_eval(checkpoint: &Path, cfg: &RunConfig, task: Option<Task>, out: Option<&Path>) -> Result<(), Failure> {
    let ck = load_checkpoint(checkpoint)?;
    let (outputs, multi_label) = match ck.meta.model {
        ModelKind::Classifier { outputs, multi_label } => (outputs, multi_label),
        ModelKind::Siamese { .. } => {
            return Err(Failure::Incompatible(format!(
                "{} holds a siamese pretraining model; eval needs a classifier checkpoint",
                checkpoint.display()
            )))
        }
    };
    if let Some(t) = task {
        if (t == Task::Multilabel) != multi_label {
            return Err(Failure::Incompatible(format!(
                "--task {t:?} does not match the checkpoint's {} head",
                if multi_label { "multi-label" } else { "single-label" }
            )));
        }
    }
    let backbone = ck.meta.backbone.clone();
    let (clf, mut store) = Classifier::build::<f32>(&backbone, outputs, multi_label, 0)?;
    ck.restore_into(&mut store, "")?;

    let mut cfg = cfg.clone();
    prepare_data_keys(&mut cfg, Regime::Finetune)?;
    let mut data = load_split(&cfg, "test_split")?;
    if data.item_shape() != backbone.input_size {
        return Err(Failure::Incompatible(format!(
            "checkpoint expects {:?} inputs, dataset provides {:?}",
            backbone.input_size,
            data.item_shape()
        )));
    }
    if let Some(norm) = &ck.meta.normalization {
        data.set_normalization(norm.clone())?;
    }
    task_of(data.labels()?)?;
    let metrics = evaluate(&clf, &mut store, &data)?;
    print_table(&metrics);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join("eval.csv");
        let body: String = metrics.table().iter().map(|(k, v)| format!("{k},{v}\n")).collect();
        fs::write(&path, format!("metric,value\n{body}")).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

fn cmd_curves(paths: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let runs = curves::load_runs(paths)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let svg = out.join("curves.svg");
    fs::write(&svg, curves::render_svg(&runs)).map_err(|e| io_err(&svg, e))?;
    let csv = out.join("curves.csv");
    fs::write(&csv, curves::merged_csv(&runs)).map_err(|e| io_err(&csv, e))?;
    println!("wrote {} and {}", svg.display(), csv.display());
    Ok(())
}
