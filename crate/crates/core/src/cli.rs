//! The `lada` command line: every stage of the protocol as a subcommand.
//!
//! Outputs go to files; stdout carries one JSON line summarising the run.
//! Exit codes: 0 success, 1 usage or configuration error, 2 unreadable or
//! invalid data, 3 training or runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::dataset::{
    classify_domain, export_coco, load_manifest, sample_protocol, save_manifest, split_train_val,
    Domain, DomainRule, LabelStatus, Manifest, PROTOCOL_FRACTIONS, SOURCE_CAMERAS, SOURCE_SCENES,
};
use crate::detector::{load_checkpoint, save_checkpoint, DetectorConfig, DetectorParams};
use crate::error::Error;
use crate::imagery::DirImages;
use crate::metrics::{evaluate, ground_truth_from_manifest, load_detections, save_detections};
use crate::synth::generate_domain;
use crate::trainer::{predict, train_stage1, train_stage2, MetricsLog, Stage2Data, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "lada",
    version,
    about = "Semi-supervised domain-adaptive smoke detection at desk scale"
)]
pub struct Cli {
    /// Base directory for relative paths.
    #[arg(long, global = true, env = "LADA_DATA_DIR", default_value = ".")]
    pub data_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic source/target benchmark: PNGs plus a manifest.
    Synth(SynthArgs),
    /// Split a manifest into source, target-val, target-labeled and target-unlabeled parts.
    Split(SplitArgs),
    /// Collapse each image's boxes into one enclosing box per class.
    MergeLabels(MergeArgs),
    /// Supervised training on source labels.
    TrainStage1(Stage1Args),
    /// Teacher-student adaptation from a stage-1 checkpoint.
    TrainStage2(Stage2Args),
    /// COCO-style mAP of detections or of a checkpoint against a manifest.
    Eval(EvalArgs),
    /// Write a manifest's visible boxes as COCO JSON.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory; receives images/ and manifest.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n_source: usize,
    #[arg(long, default_value_t = 2000)]
    pub n_target: usize,
    /// Frames per synthetic scene directory.
    #[arg(long, default_value_t = 50)]
    pub per_scene: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the four manifests.
    #[arg(long)]
    pub out: PathBuf,
    /// Labeled share of target-train in percent: 0.5, 1.0 or 3.0.
    #[arg(long, default_value_t = 1.0)]
    pub protocol: f64,
    /// Share of target records held out for validation; 0 skips the hold-out.
    #[arg(long, default_value_t = 0.05)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated source scene names (camera names with --camera-mode).
    /// Without it and without --builtin-sources, each record keeps its domain.
    #[arg(long, value_delimiter = ',')]
    pub source_scenes: Vec<String>,
    /// Use the nine published source scenes (or cameras) as the source set.
    #[arg(long)]
    pub builtin_sources: bool,
    /// Assign domains by camera name instead of full scene name.
    #[arg(long)]
    pub camera_mode: bool,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DetectorPreset {
    Toy,
    Shallow,
    Standard,
}

impl DetectorPreset {
    fn config(self, num_classes: usize) -> DetectorConfig {
        let base = match self {
            DetectorPreset::Toy => DetectorConfig::toy(),
            DetectorPreset::Shallow => DetectorConfig::shallow(),
            DetectorPreset::Standard => DetectorConfig::default(),
        };
        DetectorConfig {
            num_classes,
            ..base
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainCommon {
    /// Directory holding `<image_id>.png`.
    #[arg(long)]
    pub images: PathBuf,
    /// Flat TOML file with training hyperparameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the configured step cap per epoch.
    #[arg(long)]
    pub max_steps_per_epoch: Option<usize>,
    /// Validation manifest evaluated after every epoch.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// JSON-lines metrics log.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Stage1Args {
    #[arg(long)]
    pub source: PathBuf,
    #[command(flatten)]
    pub common: TrainCommon,
    #[arg(long, value_enum, default_value = "toy")]
    pub detector: DetectorPreset,
    #[arg(long, default_value_t = 1)]
    pub num_classes: usize,
}

#[derive(Args, Debug)]
pub struct Stage2Args {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target_labeled: PathBuf,
    #[arg(long)]
    pub target_unlabeled: PathBuf,
    /// Stage-1 checkpoint used to initialise student and teacher.
    #[arg(long)]
    pub init: PathBuf,
    /// Also save the student; `--out` receives the teacher.
    #[arg(long)]
    pub student_out: Option<PathBuf>,
    #[command(flatten)]
    pub common: TrainCommon,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Manifest with the ground truth (visible or withheld boxes).
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON-lines detections to score.
    #[arg(long, conflicts_with = "checkpoint")]
    pub detections: Option<PathBuf>,
    /// Checkpoint to run on the manifest's images instead.
    #[arg(long, requires = "images")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Where to write the full report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to write the checkpoint's detections.
    #[arg(long, requires = "checkpoint")]
    pub save_detections: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Parse(_)
        | Error::EmptyManifest
        | Error::Schema { .. }
        | Error::Structure(_)
        | Error::NoGroundTruth
        | Error::Image { .. }
        | Error::Io { .. }
        | Error::Json(_) => EXIT_DATA,
        Error::Shape(_) | Error::Training(_) => EXIT_RUNTIME,
    }
}

struct Ctx {
    base: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn manifest(&self, p: &Path) -> crate::Result<Manifest> {
        load_manifest(self.path(p))
    }

    fn create_dir(&self, p: &Path) -> crate::Result<PathBuf> {
        let dir = self.path(p);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> crate::Result<Value> {
    let dir = ctx.create_dir(&a.out)?;
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::new();
    for (domain, n) in [(Domain::Source, a.n_source), (Domain::Target, a.n_target)] {
        let set = generate_domain(domain, n, a.per_scene, a.seed)?;
        for (id, img) in &set.images.images {
            let p = img_dir.join(format!("{id}.png"));
            img.save(&p).map_err(|e| Error::Image {
                path: p.clone(),
                message: e.to_string(),
            })?;
        }
        records.extend(set.manifest.records);
    }
    let manifest = Manifest::new(records, "synth", a.seed, None)?;
    let path = dir.join("manifest.jsonl");
    save_manifest(&manifest, &path)?;
    let c = manifest.counts();
    Ok(json!({
        "command": "synth", "seed": a.seed, "manifest": show(&path), "images": show(&img_dir),
        "total": c.total, "foreground": c.foreground, "background": c.background,
    }))
}

fn split(ctx: &Ctx, a: &SplitArgs) -> crate::Result<Value> {
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(Error::Config(format!(
            "--val-fraction must lie in [0, 1), got {}",
            a.val_fraction
        )));
    }
    let fraction = a.protocol / 100.0;
    if !PROTOCOL_FRACTIONS
        .iter()
        .any(|f| (f - fraction).abs() < 1e-12)
    {
        return Err(Error::Config(format!(
            "--protocol must be 0.5, 1.0 or 3.0, got {}",
            a.protocol
        )));
    }
    let input = ctx.manifest(&a.manifest)?;
    let rule = if !a.source_scenes.is_empty() {
        Some(if a.camera_mode {
            DomainRule::cameras(a.source_scenes.clone())
        } else {
            DomainRule::scenes(a.source_scenes.clone())
        })
    } else if a.builtin_sources {
        Some(if a.camera_mode {
            DomainRule::cameras(SOURCE_CAMERAS)
        } else {
            DomainRule::scenes(SOURCE_SCENES)
        })
    } else {
        None
    };
    let mut source = Vec::new();
    let mut target = Vec::new();
    for mut r in input.records {
        if let Some(rule) = &rule {
            r.domain = classify_domain(&r.scene, rule)?;
        }
        if r.label_status == LabelStatus::Unlabeled {
            r.boxes = r.hidden_gt.take().unwrap_or_default();
            r.label_status = LabelStatus::Labeled;
        }
        match r.domain {
            Domain::Source => source.push(r),
            Domain::Target => target.push(r),
        }
    }
    if target.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let (train, val) = if a.val_fraction > 0.0 {
        let (t, v) = split_train_val(&target, a.val_fraction, a.seed)?;
        (t, Some(v))
    } else {
        (Manifest::new(target, "train", a.seed, None)?, None)
    };
    let train = Manifest {
        split_name: "target_train".into(),
        ..train
    };
    let (labeled, unlabeled) = sample_protocol(&train, fraction, a.seed)?;
    let dir = ctx.create_dir(&a.out)?;
    let mut files = serde_json::Map::new();
    let mut write = |name: &str, m: &Manifest| -> crate::Result<()> {
        let p = dir.join(format!("{name}.jsonl"));
        save_manifest(m, &p)?;
        files.insert(
            name.to_string(),
            json!({"path": show(&p), "records": m.len()}),
        );
        Ok(())
    };
    let source = Manifest::new(source, "source", a.seed, None)?;
    write("source", &source)?;
    if let Some(v) = &val {
        write(
            "target_val",
            &Manifest {
                split_name: "target_val".into(),
                ..v.clone()
            },
        )?;
    }
    write("target_labeled", &labeled)?;
    write("target_unlabeled", &unlabeled)?;
    let lc = labeled.counts();
    Ok(json!({
        "command": "split", "seed": a.seed, "protocol": a.protocol, "val_fraction": a.val_fraction,
        "labeled": labeled.len(), "labeled_foreground": lc.foreground, "labeled_background": lc.background,
        "unlabeled": unlabeled.len(), "files": files,
    }))
}

fn merge(ctx: &Ctx, a: &MergeArgs) -> crate::Result<Value> {
    let m = ctx.manifest(&a.manifest)?;
    let before: usize = m.records.iter().map(|r| r.ground_truth().len()).sum();
    let merged = m.merged();
    let after: usize = merged.records.iter().map(|r| r.ground_truth().len()).sum();
    let out = ctx.path(&a.out);
    save_manifest(&merged, &out)?;
    Ok(
        json!({"command": "merge-labels", "out": show(&out), "records": merged.len(), "boxes_before": before, "boxes_after": after}),
    )
}

fn train_config(ctx: &Ctx, c: &TrainCommon) -> crate::Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(ctx.path(p))?,
        None => TrainConfig::toy(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(e) = c.epochs {
        cfg.epochs = e;
    }
    if let Some(m) = c.max_steps_per_epoch {
        cfg.max_steps_per_epoch = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn observer(ctx: &Ctx, c: &TrainCommon) -> crate::Result<MetricsLog> {
    match &c.metrics {
        Some(p) => MetricsLog::to_file(ctx.path(p)),
        None => Ok(MetricsLog::in_memory()),
    }
}

fn last_epoch(log: &MetricsLog) -> Value {
    log.epochs.last().map_or(Value::Null, |e| {
        serde_json::to_value(e).unwrap_or(Value::Null)
    })
}

fn stage1(ctx: &Ctx, a: &Stage1Args) -> crate::Result<Value> {
    let cfg = train_config(ctx, &a.common)?;
    let source = ctx.manifest(&a.source)?;
    let val = a.common.val.as_ref().map(|p| ctx.manifest(p)).transpose()?;
    let images = DirImages::new(ctx.path(&a.common.images));
    let init = DetectorParams::init(a.detector.config(a.num_classes), cfg.seed)?;
    let mut log = observer(ctx, &a.common)?;
    let params = train_stage1(&source, &images, init, &cfg, val.as_ref(), &mut log)?;
    let out = ctx.path(&a.common.out);
    save_checkpoint(&params, &out)?;
    Ok(json!({
        "command": "train-stage1", "seed": cfg.seed, "checkpoint": show(&out),
        "steps": log.steps.len(), "last_epoch": last_epoch(&log),
    }))
}

fn stage2(ctx: &Ctx, a: &Stage2Args) -> crate::Result<Value> {
    let cfg = train_config(ctx, &a.common)?;
    let source = ctx.manifest(&a.source)?;
    let target_labeled = ctx.manifest(&a.target_labeled)?;
    let target_unlabeled = ctx.manifest(&a.target_unlabeled)?;
    let val = a.common.val.as_ref().map(|p| ctx.manifest(p)).transpose()?;
    let init = load_checkpoint(ctx.path(&a.init))?;
    let images = DirImages::new(ctx.path(&a.common.images));
    let mut log = observer(ctx, &a.common)?;
    let data = Stage2Data {
        source_labeled: &source,
        target_labeled: &target_labeled,
        target_unlabeled: &target_unlabeled,
        target_val: val.as_ref(),
    };
    let outcome = train_stage2(data, &images, &init, &cfg, &mut log)?;
    let out = ctx.path(&a.common.out);
    save_checkpoint(&outcome.teacher, &out)?;
    if let Some(p) = &a.student_out {
        save_checkpoint(&outcome.student, ctx.path(p))?;
    }
    for w in &log.warnings {
        eprintln!("warning: {w}");
    }
    Ok(json!({
        "command": "train-stage2", "seed": cfg.seed, "checkpoint": show(&out),
        "steps": log.steps.len(), "warnings": log.warnings, "last_epoch": last_epoch(&log),
    }))
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> crate::Result<Value> {
    let manifest = ctx.manifest(&a.manifest)?;
    let dets = match (&a.detections, &a.checkpoint, &a.images) {
        (Some(d), _, _) => load_detections(ctx.path(d))?,
        (None, Some(c), Some(i)) => {
            let params = load_checkpoint(ctx.path(c))?;
            predict(&params, &manifest, &DirImages::new(ctx.path(i)), 16)?
        }
        _ => {
            return Err(Error::Config(
                "eval needs --detections or --checkpoint with --images".into(),
            ))
        }
    };
    if let Some(p) = &a.save_detections {
        save_detections(&dets, ctx.path(p))?;
    }
    let report = evaluate(&dets, &ground_truth_from_manifest(&manifest))?;
    if let Some(p) = &a.out {
        let p = ctx.path(p);
        fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(json!({
        "command": "eval", "images": manifest.len(), "detections": dets.len(),
        "map_50": report.map_50, "map_50_95": report.map_50_95,
    }))
}

fn export(ctx: &Ctx, a: &ExportArgs) -> crate::Result<Value> {
    let m = ctx.manifest(&a.manifest)?;
    let out = ctx.path(&a.out);
    export_coco(&m, &out)?;
    Ok(json!({"command": "export", "out": show(&out), "images": m.len()}))
}

/// Runs one already-parsed command and returns its summary.
pub fn execute(cli: &Cli) -> crate::Result<Value> {
    let ctx = Ctx {
        base: cli.data_dir.clone(),
    };
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Split(a) => split(&ctx, a),
        Command::MergeLabels(a) => merge(&ctx, a),
        Command::TrainStage1(a) => stage1(&ctx, a),
        Command::TrainStage2(a) => stage2(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Export(a) => export(&ctx, a),
    }
}

/// Parses `argv`, runs the command, prints the summary and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            println!(
                "{}",
                json!({"error": e.to_string(), "exit_code": exit_code(&e)})
            );
            exit_code(&e)
        }
    }
}
