//! `fss`: generate synthetic data, train, evaluate, predict and run ablations.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use fss::ablation::{run_ablation, Grid};
use fss::episodes::netpbm::encode_ppm;
use fss::episodes::{
    generate_synthetic_dataset, load_dataset, read_image, read_sample, write_dataset, Dataset,
    Side, SyntheticConfig,
};
use fss::inference::{
    average_fuse, cgm_fuse, evaluate, segment_one_shot, write_mask_pgm, Fusion, ModelPredictor,
    Protocol,
};
use fss::network::{load_checkpoint, save_checkpoint, ArchConfig, Variant};
use fss::numerics::{Mask, Tensor};
use fss::training::{train_with, TrainConfig};

use config::ConfigFile;

#[derive(Debug)]
pub struct CliError(pub String);

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<fss::Error> for CliError {
    fn from(e: fss::Error) -> Self {
        CliError(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "fss",
    version,
    about = "Few-shot segmentation with self-guided support vectors"
)]
struct Cli {
    /// `key = value` file; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shape dataset directory.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint and training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint over random episodes.
    Eval(EvalArgs),
    /// Segment one query image from annotated support images.
    Predict(PredictArgs),
    /// Train and evaluate a grid of variants.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset directory to create.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Generator seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Number of shape classes [default: 6].
    #[arg(long)]
    classes: Option<usize>,
    /// Images per class [default: 40].
    #[arg(long)]
    samples_per_class: Option<usize>,
    /// Square image side in pixels [default: 64].
    #[arg(long)]
    image_size: Option<usize>,
    /// Held-out classes [default: classes / 3].
    #[arg(long)]
    test_classes: Option<usize>,
}

#[derive(Args)]
struct TrainFlags {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs [default: 40].
    #[arg(long)]
    epochs: Option<usize>,
    /// Training episodes per epoch [default: 200].
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    /// SGD learning rate [default: 0.001].
    #[arg(long)]
    learning_rate: Option<f64>,
    /// SGD momentum [default: 0.9].
    #[arg(long)]
    momentum: Option<f64>,
    /// L2 weight decay [default: 0.0001].
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Channels of the first two encoder convs [default: 32].
    #[arg(long)]
    stem_channels: Option<usize>,
    /// Feature and prototype width d [default: 64].
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Shared random hue rotation per training episode [default: true].
    #[arg(long)]
    hue_jitter: Option<bool>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    train: TrainFlags,
    /// `baseline`, `sgm`, or `vectors=... s1=... s2=...`.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct ProtocolFlags {
    /// Support shots per episode [default: 1].
    #[arg(long = "K")]
    k: Option<usize>,
    /// Episodes per seed [default: 200].
    #[arg(long)]
    episodes: Option<usize>,
    /// Comma-separated evaluation seeds [default: 0,1,2].
    #[arg(long)]
    seeds: Option<SeedList>,
    /// Query samples per episode [default: 1].
    #[arg(long)]
    queries: Option<usize>,
    /// `test` or `train` classes [default: test].
    #[arg(long)]
    side: Option<String>,
    /// Worker threads for evaluation [default: 1].
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory for `metrics.json`; the report is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
    /// K-shot fusion, `avg` or `cgm` [default: avg].
    #[arg(long)]
    fusion: Option<String>,
    #[command(flatten)]
    protocol: ProtocolFlags,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Support image (PPM); repeat for K shots.
    #[arg(long = "support-image")]
    support_images: Vec<PathBuf>,
    /// Support mask (PGM), in the same order as the images.
    #[arg(long = "support-mask")]
    support_masks: Vec<PathBuf>,
    /// Query image (PPM).
    #[arg(long)]
    query: Option<PathBuf>,
    /// Directory for `mask.pgm` and `overlay.ppm`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// K-shot fusion, `avg` or `cgm` [default: cgm].
    #[arg(long)]
    fusion: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    /// `vectors` or `losses` [default: vectors].
    #[arg(long)]
    grid: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    protocol: ProtocolFlags,
}

#[derive(Clone, Debug)]
struct SeedList(Vec<u64>);

impl FromStr for SeedList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let seeds = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u64>()
                    .map_err(|_| format!("bad seed `{t}`"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SeedList(seeds))
    }
}

fn required<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError(format!("missing required --{flag}")))
}

fn parse_value<T: FromStr<Err = fss::Error>>(value: Option<String>, default: &str) -> CliResult<T> {
    Ok(value.as_deref().unwrap_or(default).parse()?)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError(format!("{}: {e}", dir.display())))
}

fn ensure_exists(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError(format!(
            "{}: no such file or directory",
            path.display()
        )))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError(format!("{}: {e}", path.display())))
}

fn train_config(
    flags: TrainFlags,
    file: &mut ConfigFile,
    variant: Variant,
) -> CliResult<(TrainConfig, PathBuf, PathBuf)> {
    let d = TrainConfig::default();
    let arch = ArchConfig::default();
    let data = required(file.pick(flags.data, "data")?, "data")?;
    let out = required(file.pick(flags.out, "out")?, "out")?;
    let config = TrainConfig {
        epochs: file.pick(flags.epochs, "epochs")?.unwrap_or(d.epochs),
        episodes_per_epoch: file
            .pick(flags.episodes_per_epoch, "episodes-per-epoch")?
            .unwrap_or(d.episodes_per_epoch),
        shots: 1,
        learning_rate: file
            .pick(flags.learning_rate, "learning-rate")?
            .unwrap_or(d.learning_rate),
        momentum: file.pick(flags.momentum, "momentum")?.unwrap_or(d.momentum),
        weight_decay: file
            .pick(flags.weight_decay, "weight-decay")?
            .unwrap_or(d.weight_decay),
        seed: file.pick(flags.seed, "seed")?.unwrap_or(d.seed),
        hue_jitter: file
            .pick(flags.hue_jitter, "hue-jitter")?
            .unwrap_or(d.hue_jitter),
        arch: ArchConfig {
            stem_channels: file
                .pick(flags.stem_channels, "stem-channels")?
                .unwrap_or(arch.stem_channels),
            feature_dim: file
                .pick(flags.feature_dim, "feature-dim")?
                .unwrap_or(arch.feature_dim),
            head_kernel: arch.head_kernel,
        },
        variant,
    };
    config.validate()?;
    Ok((config, data, out))
}

fn protocol(flags: ProtocolFlags, file: &mut ConfigFile) -> CliResult<Protocol> {
    let side: Side = parse_value(file.pick(flags.side, "side")?, "test")?;
    let protocol = Protocol {
        side,
        shots: file.pick(flags.k, "K")?.unwrap_or(1),
        queries: file.pick(flags.queries, "queries")?.unwrap_or(1),
        episodes: file.pick(flags.episodes, "episodes")?.unwrap_or(200),
        seeds: file
            .pick(flags.seeds, "seeds")?
            .map_or_else(|| vec![0, 1, 2], |s| s.0),
        jobs: file.pick(flags.jobs, "jobs")?.unwrap_or(1),
    };
    if protocol.shots == 0 || protocol.queries == 0 || protocol.jobs == 0 {
        return Err(CliError(
            "--K, --queries and --jobs must be at least 1".into(),
        ));
    }
    Ok(protocol)
}

fn load_data(dir: &Path) -> CliResult<Dataset> {
    ensure_exists(dir)?;
    Ok(load_dataset(dir)?)
}

fn cmd_gen_data(args: GenDataArgs, mut file: ConfigFile) -> CliResult<()> {
    let out = required(file.pick(args.out, "out")?, "out")?;
    let mut config = SyntheticConfig::new(
        file.pick(args.classes, "classes")?.unwrap_or(6),
        file.pick(args.samples_per_class, "samples-per-class")?
            .unwrap_or(40),
        file.pick(args.image_size, "image-size")?.unwrap_or(64),
        file.pick(args.seed, "seed")?.unwrap_or(0),
    );
    if let Some(t) = file.pick(args.test_classes, "test-classes")? {
        config.test_classes = t;
    }
    file.finish()?;
    config.validate()?;
    ensure_dir(&out)?;
    let dataset = generate_synthetic_dataset(&config)?;
    write_dataset(&dataset, &out)?;
    let train: Vec<String> = dataset
        .split()
        .classes(Side::Train)
        .iter()
        .map(u32::to_string)
        .collect();
    let test: Vec<String> = dataset
        .split()
        .classes(Side::Test)
        .iter()
        .map(u32::to_string)
        .collect();
    println!(
        "wrote {} samples of {}x{} to {}: train classes [{}], test classes [{}]",
        dataset.samples().len(),
        config.image_size,
        config.image_size,
        out.display(),
        train.join(", "),
        test.join(", ")
    );
    Ok(())
}

fn cmd_train(args: TrainArgs, mut file: ConfigFile) -> CliResult<()> {
    let variant: Variant = parse_value(file.pick(args.variant, "variant")?, "sgm")?;
    let (config, data, out) = train_config(args.train, &mut file, variant)?;
    file.finish()?;
    let dataset = load_data(&data)?;
    ensure_dir(&out)?;
    let (model, log) = train_with(&dataset, &config, |r| {
        println!(
            "epoch {:>3}  loss {:.6}  L_s1 {:.6}  L_s2 {:.6}  L_q {:.6}",
            r.epoch, r.mean_loss, r.mean_support_initial, r.mean_support_refined, r.mean_query
        );
    })?;
    save_checkpoint(&model, &out.join("model.ckpt"))?;
    write_text(&out.join("train_log.txt"), &log.to_text())?;
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(args: EvalArgs, mut file: ConfigFile) -> CliResult<()> {
    let data = required(file.pick(args.data, "data")?, "data")?;
    let checkpoint = required(file.pick(args.checkpoint, "checkpoint")?, "checkpoint")?;
    let out = file.pick(args.out, "out")?;
    let fusion: Fusion = parse_value(file.pick(args.fusion, "fusion")?, "avg")?;
    let protocol = protocol(args.protocol, &mut file)?;
    file.finish()?;
    ensure_exists(&checkpoint)?;
    let dataset = load_data(&data)?;
    let model = load_checkpoint(&checkpoint)?;
    if let Some(out) = &out {
        ensure_dir(out)?;
    }
    let predictor = ModelPredictor {
        segmenter: &model,
        fusion,
    };
    let report = evaluate(&predictor, &dataset, &protocol)?;
    let json = report.to_json();
    if let Some(out) = &out {
        write_text(&out.join("metrics.json"), &format!("{json}\n"))?;
    }
    println!("{json}");
    Ok(())
}

/// Image with the mask's foreground tinted red.
fn overlay(image: &Tensor, mask: &Mask) -> CliResult<Tensor> {
    let (h, w, _) = image.dims3()?;
    let mut out = image.clone();
    for (i, px) in out.data_mut().chunks_exact_mut(3).enumerate() {
        if mask.get(i / w, i % w) {
            px[0] = 0.5 * px[0] + 0.5;
            px[1] *= 0.5;
            px[2] *= 0.5;
        }
    }
    debug_assert_eq!(out.len(), h * w * 3);
    Ok(out)
}

fn cmd_predict(args: PredictArgs, mut file: ConfigFile) -> CliResult<()> {
    let checkpoint = required(file.pick(args.checkpoint, "checkpoint")?, "checkpoint")?;
    let query_path = required(file.pick(args.query, "query")?, "query")?;
    let out = required(file.pick(args.out, "out")?, "out")?;
    let fusion: Fusion = parse_value(file.pick(args.fusion, "fusion")?, "cgm")?;
    file.finish()?;
    if args.support_images.is_empty() || args.support_images.len() != args.support_masks.len() {
        return Err(CliError(format!(
            "need matching --support-image and --support-mask lists, got {} images and {} masks",
            args.support_images.len(),
            args.support_masks.len()
        )));
    }
    for p in args
        .support_images
        .iter()
        .chain(&args.support_masks)
        .chain([&checkpoint, &query_path])
    {
        ensure_exists(p)?;
    }
    let model = load_checkpoint(&checkpoint)?;
    let supports = args
        .support_images
        .iter()
        .zip(&args.support_masks)
        .map(|(i, m)| read_sample(i, m, 0))
        .collect::<fss::Result<Vec<_>>>()?;
    let query = read_image(&query_path)?;
    ensure_dir(&out)?;
    let segmentation = if supports.len() == 1 {
        segment_one_shot(&model, &supports[0], &query)?
    } else {
        match fusion {
            Fusion::Average => average_fuse(&model, &supports, &query)?,
            Fusion::Cgm => {
                let (seg, u) = cgm_fuse(&model, &supports, &query)?;
                let u: Vec<String> = u.iter().map(|v| format!("{v:.6}")).collect();
                println!("support confidences: {}", u.join(" "));
                seg
            }
        }
    };
    write_mask_pgm(&segmentation.mask, &out.join("mask.pgm"))?;
    let ov = overlay(&query, &segmentation.mask)?;
    let ov_path = out.join("overlay.ppm");
    fs::write(&ov_path, encode_ppm(&ov))
        .map_err(|e| CliError(format!("{}: {e}", ov_path.display())))?;
    println!(
        "foreground {} of {} pixels; wrote {} and {}",
        segmentation.mask.count(),
        segmentation.mask.len(),
        out.join("mask.pgm").display(),
        ov_path.display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs, mut file: ConfigFile) -> CliResult<()> {
    let grid: Grid = parse_value(file.pick(args.grid, "grid")?, "vectors")?;
    let (base, data, out) = train_config(args.train, &mut file, Variant::sgm())?;
    let protocol = protocol(args.protocol, &mut file)?;
    file.finish()?;
    let dataset = load_data(&data)?;
    ensure_dir(&out)?;
    let table = run_ablation(grid, &dataset, &base, &protocol, |config| {
        eprintln!("training {}", config.variant);
        Ok(train_with(&dataset, config, |_| {})?.0)
    })?;
    write_text(
        &out.join(format!("ablation_{grid}.json")),
        &format!("{}\n", table.to_json()),
    )?;
    let text = table.to_text();
    write_text(&out.join(format!("ablation_{grid}.txt")), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a, file),
        Command::Train(a) => cmd_train(a, file),
        Command::Eval(a) => cmd_eval(a, file),
        Command::Predict(a) => cmd_predict(a, file),
        Command::Ablate(a) => cmd_ablate(a, file),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fss: error: {}", e.0.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
