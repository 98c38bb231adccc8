//! The `grfp` command line: dataset generation, training, evaluation and
//! gradient verification. Every subcommand is deterministic given `--seed`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use grfp::backbone::{BackboneArch, BackboneParams};
use grfp::checkpoint::Checkpoint;
use grfp::eval::{
    consistency_table, frames_ablation, label_frame_miou, write_overlay, AblationTable, ClassIouTable,
    ConsistencyTable,
};
use grfp::flowdata::{export_clip_images, make_dataset, Dataset, SceneTemplate, Split, SplitSizes};
use grfp::gradcheck::{standard_suite, CheckResult};
use grfp::io::write_atomic;
use grfp::pipeline::{predict_frame, prepare_clips, Predictor};
use grfp::stgru::{StgruParams, KERNEL_SIZE};
use grfp::train::{format_log, pretrain_backbone, train_grfp, PretrainConfig, TrainConfig, TrainOutcome};

pub const BACKBONE_DIR: &str = "backbone";
pub const FORWARD_DIR: &str = "stgru_forward";
pub const BACKWARD_DIR: &str = "stgru_backward";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const PRETRAIN_LOG: &str = "pretrain_log.tsv";
pub const CONFIG_FILE: &str = "config.txt";
pub const ABLATION_FILE: &str = "ablation.tsv";
pub const CLASS_IOU_FILE: &str = "class_iou.tsv";
pub const CONSISTENCY_FILE: &str = "consistency.tsv";

/// Seed offsets keep the random streams of different consumers apart.
const BACKBONE_INIT_STREAM: u64 = 1;
const STGRU_INIT_STREAM: u64 = 2;

#[derive(Parser, Debug)]
#[command(name = "grfp", version, about = "Gated recurrent flow propagation for video segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic video dataset.
    Generate(GenerateArgs),
    /// Pretrain the backbone and train the recurrent cell(s).
    Train(TrainArgs),
    /// Write the frames ablation, per-class IoU and consistency tables.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenerateArgs {
    /// Dataset directory to create; its parent must exist.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub train: usize,
    #[arg(long, default_value_t = 5)]
    pub val: usize,
    #[arg(long, default_value_t = 5)]
    pub test: usize,
    /// Classes including background.
    #[arg(long, default_value_t = SceneTemplate::default().n_classes)]
    pub classes: usize,
    /// Frames per clip up to and including the labelled one.
    #[arg(long, default_value_t = SceneTemplate::default().n_frames)]
    pub frames: usize,
    /// Unlabelled frames rendered after the labelled one.
    #[arg(long, default_value_t = 8)]
    pub frames_after_label: usize,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub overwrite: bool,
    /// Also write every clip as PPM/PGM images.
    #[arg(long)]
    pub images: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Chain length ending at the labelled frame.
    #[arg(long, default_value_t = TrainConfig::default().n_frames)]
    pub frames: usize,
    /// Chain positions nearest the loss that refine the backbone.
    #[arg(long, default_value_t = TrainConfig::default().backbone_truncation_depth)]
    pub truncation: usize,
    /// Also train a backward cell for bidirectional fusion.
    #[arg(long)]
    pub backward: bool,
    /// Gaussian flow noise in pixels.
    #[arg(long, default_value_t = TrainConfig::default().flow_noise)]
    pub flow_noise: f64,
    #[arg(long)]
    pub no_refine_backbone: bool,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().backward_steps)]
    pub backward_steps: usize,
    /// Adam learning rate of the recurrent cell.
    #[arg(long, default_value_t = TrainConfig::default().stgru_lr)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().backbone_lr)]
    pub backbone_lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().pretrain_epochs)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().eval_every)]
    pub eval_every: usize,
    /// Start from this backbone (a backbone checkpoint or a training output
    /// directory) and skip pretraining.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            n_frames: self.frames,
            backbone_truncation_depth: self.truncation,
            train_backward_chain: self.backward,
            refine_backbone: !self.no_refine_backbone,
            seed: self.seed,
            steps: self.steps,
            backward_steps: self.backward_steps,
            stgru_lr: self.lr,
            backbone_lr: self.backbone_lr,
            flow_noise: self.flow_noise,
            eval_every: self.eval_every,
            pretrain_epochs: if self.checkpoint.is_some() { 0 } else { self.pretrain_epochs },
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Training output directory; a missing recurrent cell is replaced by
    /// its untrained initialisation.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory for the tables.
    #[arg(long)]
    pub out: PathBuf,
    /// Longest chain evaluated; the ablation covers 1..=frames.
    #[arg(long, default_value_t = TrainConfig::default().n_frames)]
    pub frames: usize,
    /// Add the bidirectional fusion column.
    #[arg(long)]
    pub backward: bool,
    #[arg(long, default_value_t = TrainConfig::default().flow_noise)]
    pub flow_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// train, val or test.
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Trajectory seed spacing in pixels for the consistency table.
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
    /// Write label-frame overlays of every method.
    #[arg(long)]
    pub overlays: bool,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    configure_threads()?;
    match cli.command {
        Command::Generate(a) => cmd_generate(&a).map(drop),
        Command::Train(a) => cmd_train(&a).map(drop),
        Command::Eval(a) => cmd_eval(&a).map(drop),
        Command::Gradcheck(a) => cmd_gradcheck(&a).map(drop),
    }
}

/// Caps the worker pool at `GRFP_THREADS` when set.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("GRFP_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().with_context(|| format!("GRFP_THREADS={v:?} is not a count"))?;
    ensure!(n > 0, "GRFP_THREADS must be at least 1");
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<Dataset> {
    let parent = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    ensure!(
        parent.is_dir(),
        "parent directory {} of the dataset does not exist",
        parent.display()
    );
    let template = SceneTemplate {
        n_classes: a.classes,
        n_frames: a.frames,
        frames_after_label: a.frames_after_label,
        ..SceneTemplate::default()
    };
    println!("template: {template}");
    let sizes = SplitSizes {
        train: a.train,
        val: a.val,
        test: a.test,
    };
    let ds = make_dataset(&a.out, sizes, &template, a.seed, a.overwrite)
        .with_context(|| format!("generating {}", a.out.display()))?;
    if a.images {
        for entry in &ds.clips {
            let clip = ds.load(entry)?;
            export_clip_images(&ds.clip_dir(entry).join("images"), &clip)?;
        }
    }
    println!(
        "wrote {} clips ({} train, {} val, {} test) to {}",
        ds.clips.len(),
        a.train,
        a.val,
        a.test,
        a.out.display()
    );
    Ok(ds)
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    Dataset::open(path).with_context(|| format!("opening dataset {}", path.display()))
}

fn load_backbone(dir: &Path) -> Result<BackboneParams<f32>> {
    let dir = if dir.join(BACKBONE_DIR).is_dir() {
        dir.join(BACKBONE_DIR)
    } else {
        dir.to_path_buf()
    };
    let ck = Checkpoint::load(&dir).with_context(|| format!("loading backbone from {}", dir.display()))?;
    Ok(BackboneParams::from_checkpoint(&ck)?)
}

fn load_stgru(dir: &Path) -> Result<Option<StgruParams<f32>>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let ck = Checkpoint::load(dir).with_context(|| format!("loading recurrent cell from {}", dir.display()))?;
    Ok(Some(StgruParams::from_checkpoint(&ck)?))
}

fn fresh_stgru(n_classes: usize, cfg: &TrainConfig) -> Result<StgruParams<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(STGRU_INIT_STREAM));
    Ok(StgruParams::init(n_classes, cfg.reset_channels, KERNEL_SIZE, cfg.lambda_init, &mut rng)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutcome> {
    let cfg = a.config();
    cfg.validate()?;
    let ds = open_dataset(&a.dataset)?;
    let train = ds.load_split(Split::Train)?;
    let val = ds.load_split(Split::Val)?;
    ensure!(!train.is_empty(), "dataset {} has no training clips", a.dataset.display());
    let c = ds.template.n_classes;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let (backbone, pre_losses) = match &a.checkpoint {
        Some(dir) => {
            let b = load_backbone(dir)?;
            ensure!(
                b.n_classes() == c,
                "backbone predicts {} classes, dataset has {c}",
                b.n_classes()
            );
            (b, Vec::new())
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(BACKBONE_INIT_STREAM));
            let init = BackboneParams::init(BackboneArch::standard(c), &mut rng)?;
            let pcfg = PretrainConfig {
                epochs: cfg.pretrain_epochs,
                lr: cfg.pretrain_lr,
                seed: cfg.seed,
                ..PretrainConfig::default()
            };
            info!("pretraining the backbone for {} epochs", pcfg.epochs);
            let out = pretrain_backbone(&train, init, &pcfg)?;
            (out.backbone, out.losses)
        }
    };
    let mut pre_log = String::from("step\tloss\n");
    for (k, l) in pre_losses.iter().enumerate() {
        let _ = writeln!(pre_log, "{k}\t{l:.6}");
    }
    write_text(&a.out.join(PRETRAIN_LOG), &pre_log)?;

    let forward = fresh_stgru(c, &cfg)?;
    let outcome = train_grfp(&train, &val, &cfg, backbone, forward)?;

    outcome.backbone.to_checkpoint().save(&a.out.join(BACKBONE_DIR))?;
    outcome.forward.to_checkpoint().save(&a.out.join(FORWARD_DIR))?;
    if let Some(b) = &outcome.backward {
        b.to_checkpoint().save(&a.out.join(BACKWARD_DIR))?;
    }
    write_text(&a.out.join(TRAIN_LOG), &format!("step\tloss\tval_mIoU\n{}", format_log(&outcome.log)))?;
    write_text(&a.out.join(CONFIG_FILE), &cfg.to_kv())?;
    if let Some(last) = outcome.log.iter().rev().find_map(|e| e.val_miou) {
        println!("final val mIoU {last:.4}");
    }
    println!("wrote checkpoints to {}", a.out.display());
    Ok(outcome)
}

/// Tables written by [`cmd_eval`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTables {
    pub ablation: AblationTable,
    pub class_iou: ClassIouTable,
    pub consistency: ConsistencyTable,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalTables> {
    ensure!(a.frames >= 1, "--frames must be at least 1");
    ensure!(a.stride >= 1, "--stride must be at least 1");
    let ds = open_dataset(&a.dataset)?;
    let split = Split::parse(&a.split)?;
    let clips = ds.load_split(split)?;
    ensure!(!clips.is_empty(), "split {} of {} is empty", a.split, a.dataset.display());
    let c = ds.template.n_classes;

    let backbone = load_backbone(&a.checkpoint)?;
    if backbone.n_classes() != c {
        bail!(
            "checkpoint {} predicts {} classes but dataset {} has {c}",
            a.checkpoint.display(),
            backbone.n_classes(),
            a.dataset.display()
        );
    }
    let cfg = TrainConfig {
        seed: a.seed,
        ..TrainConfig::default()
    };
    let forward = match load_stgru(&a.checkpoint.join(FORWARD_DIR))? {
        Some(p) => p,
        None => {
            warn!("no trained forward cell in {}; using the initialisation", a.checkpoint.display());
            fresh_stgru(c, &cfg)?
        }
    };
    ensure!(forward.n_classes() == c, "recurrent cell has {} classes, dataset {c}", forward.n_classes());
    let backward = if a.backward {
        Some(match load_stgru(&a.checkpoint.join(BACKWARD_DIR))? {
            Some(p) => p,
            None => {
                warn!("no trained backward cell; reusing the forward one");
                forward.clone()
            }
        })
    } else {
        None
    };

    let prepared = prepare_clips(&clips, &backbone, a.flow_noise, a.seed)?;
    let n = a.frames;
    let mut predictors = vec![Predictor::Static, Predictor::Forward { params: &forward, n }];
    if let Some(b) = &backward {
        predictors.push(Predictor::Fused {
            forward: &forward,
            backward: b,
            n,
        });
    }

    let ablation = frames_ablation(&prepared, &forward, &(1..=n).collect::<Vec<_>>())?;
    let methods = predictors
        .iter()
        .map(|&p| Ok((p.name(), label_frame_miou(&prepared, p)?)))
        .collect::<Result<Vec<_>>>()?;
    let class_iou = ClassIouTable { methods };
    let names: Vec<String> = ds.split(split).iter().map(|e| e.id.clone()).collect();
    let consistency = consistency_table(&prepared, &names, &predictors, ds.template.label_frame_index(), a.stride)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_text(&a.out.join(ABLATION_FILE), &ablation.to_tsv())?;
    write_text(&a.out.join(CLASS_IOU_FILE), &class_iou.to_tsv())?;
    write_text(&a.out.join(CONSISTENCY_FILE), &consistency.to_tsv())?;
    if a.overlays {
        let dir = a.out.join("overlays");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (pc, name) in prepared.iter().zip(&names) {
            let t = pc.clip.label_index;
            write_overlay(&pc.clip.frames[t], &pc.clip.labels, &dir.join(format!("{name}_truth.ppm")))?;
            for &p in &predictors {
                let labels = predict_frame(pc, t, p)?.labels();
                write_overlay(&pc.clip.frames[t], &labels, &dir.join(format!("{name}_{}.ppm", file_stem(&p.name()))))?;
            }
        }
    }
    print!("{}\n{}\n{}", ablation.to_tsv(), class_iou.to_tsv(), consistency.to_tsv());
    Ok(EvalTables {
        ablation,
        class_iou,
        consistency,
    })
}

fn file_stem(method: &str) -> String {
    method.chars().filter(|c| c.is_ascii_alphanumeric() || *c == '-').collect()
}

/// Runs the gradient suite, printing every check; fails if any exceeds the threshold.
pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Vec<CheckResult>> {
    let results = standard_suite(a.seed)?;
    let mut failed = Vec::new();
    for r in &results {
        let ok = r.max_rel_error <= a.threshold;
        println!("{}\t{:.3e}\t{}", r.name, r.max_rel_error, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(r.name);
        }
    }
    ensure!(
        failed.is_empty(),
        "gradient check above {:e}: {}",
        a.threshold,
        failed.join(", ")
    );
    Ok(results)
}
