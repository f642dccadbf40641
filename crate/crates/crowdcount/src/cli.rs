//! The `crowdcount` command line.
//!
//! Settings resolve in three layers: built-in defaults, then the `--config`
//! JSON file, then flags. The resolved configuration is printed to stderr as
//! one JSON line before any work starts. Exit codes: 0 on success, 2 for bad
//! flags, invalid configuration or missing input files, 1 for failures while
//! running.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use crowdcount_core::density::{self, DensityMap, KernelMode};
use crowdcount_core::eval::kfold;
use crowdcount_core::model::{Arch, CountMode, Model, ModelSpec};
use crowdcount_core::synth::synth_generate;
use serde_json::{json, Value};

use crate::annotation::read_annotation;
use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_dataset, load_dataset_lenient, FileDecoder, ImageDecoder};
use crate::error::{Error, Result};
use crate::manifest::{read_manifest, write_manifest, Split};
use crate::pipeline::{count_image, evaluate_dataset, train_to_dir};
use crate::provenance::{write_provenance, Provenance};
use crate::report::write_report;
use crate::synth_io::{encode_gray_png, write_synth};
use crate::tensor_file::write_tensor;

#[derive(Debug, Parser)]
#[command(
    name = "crowdcount",
    version,
    about = "Crowd counting with density maps and recursive residual networks"
)]
pub struct Cli {
    /// Seed for weight initialization, sampling, synthesis and fold shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run loading and evaluation sequentially.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// JSON file overriding the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ground-truth density maps from annotation files.
    Density(DensityArgs),
    /// Train a model and write checkpoints and the loss trace.
    Train(TrainArgs),
    /// MAE and root-mean-square count error of a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Estimated head counts for images.
    Count(CountArgs),
    /// Parameter counts of every architecture.
    Params(ParamsArgs),
    /// Write a synthetic dataset with train and test manifests.
    Synth(SynthArgs),
    /// Split a manifest into cross-validation folds.
    Kfold(KfoldArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Fixed,
    Adaptive,
}

#[derive(Debug, Args)]
pub struct KernelArgs {
    /// Gaussian kernel type.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Odd window side of the fixed kernel.
    #[arg(long)]
    pub window: Option<usize>,
    /// Standard deviation of the fixed kernel.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Adaptive kernels use beta times the mean neighbour distance.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Neighbours averaged by adaptive kernels.
    #[arg(long)]
    pub k_neighbors: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// resnet14, resnet20, resnet26, r_resnet or dr_resnet.
    #[arg(long, value_parser = parse_arch)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Applications of the recursive module.
    #[arg(long)]
    pub recursion_depth: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DensityArgs {
    /// Annotation JSON file; repeatable.
    #[arg(long = "annotation", value_name = "FILE")]
    pub annotations: Vec<PathBuf>,
    /// Take annotations from a manifest instead.
    #[arg(long, conflicts_with = "annotations")]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Sum-pool the map by this factor.
    #[arg(long, default_value_t = 1)]
    pub downsample: usize,
    /// Also write a grayscale PNG of every map.
    #[arg(long)]
    pub preview: bool,
    #[command(flatten)]
    pub kernel: KernelArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints and loss.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training crop as HEIGHTxWIDTH.
    #[arg(long, value_parser = parse_crop)]
    pub crop: Option<(usize, usize)>,
    #[arg(long)]
    pub flip_probability: Option<f64>,
    /// Periodic checkpoint interval; 0 keeps only the final one.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub kernel: KernelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Count every image of a manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub recursion_depth: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub test_count: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub min_heads: Option<usize>,
    #[arg(long)]
    pub max_heads: Option<usize>,
    #[arg(long)]
    pub blob_radius: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct KfoldArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of folds.
    #[arg(long)]
    pub k: Option<usize>,
    /// Write only this fold (0-based); all folds otherwise.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Output directory for the fold manifests.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    s.parse::<Arch>().map_err(|e| e.to_string())
}

fn parse_crop(s: &str) -> std::result::Result<(usize, usize), String> {
    let bad = || format!("expected HEIGHTxWIDTH, got `{s}`");
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        h.trim().parse().map_err(|_| bad())?,
        w.trim().parse().map_err(|_| bad())?,
    ))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl KernelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let k = &mut cfg.kernel;
        set(
            &mut k.mode,
            self.mode.map(|m| match m {
                ModeArg::Fixed => KernelMode::Fixed,
                ModeArg::Adaptive => KernelMode::Adaptive,
            }),
        );
        set(&mut k.fixed_window, self.window);
        set(&mut k.fixed_sigma, self.sigma);
        set(&mut k.beta, self.beta);
        set(&mut k.k_neighbors, self.k_neighbors);
    }
}

impl ModelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.model.arch, self.arch);
        set(&mut cfg.model.channels, self.channels);
        set(&mut cfg.model.recursion_depth, self.recursion_depth);
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Density(_) => "density",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Count(_) => "count",
            Command::Params(_) => "params",
            Command::Synth(_) => "synth",
            Command::Kfold(_) => "kfold",
        }
    }

    fn apply(&self, cfg: &mut RunConfig) {
        match self {
            Command::Density(a) => a.kernel.apply(cfg),
            Command::Train(a) => {
                let t = &mut cfg.train;
                set(&mut t.iterations, a.iterations);
                set(&mut t.learning_rate, a.learning_rate);
                set(&mut t.momentum, a.momentum);
                set(&mut t.weight_decay, a.weight_decay);
                set(&mut t.batch_size, a.batch_size);
                set(&mut t.crop, a.crop);
                set(&mut t.flip_probability, a.flip_probability);
                set(&mut t.checkpoint_every, a.checkpoint_every);
                a.model.apply(cfg);
                a.kernel.apply(cfg);
            }
            Command::Params(a) => {
                set(&mut cfg.model.channels, a.channels);
                set(&mut cfg.model.recursion_depth, a.recursion_depth);
            }
            Command::Synth(a) => {
                let s = &mut cfg.synth;
                set(&mut s.train_count, a.train_count);
                set(&mut s.test_count, a.test_count);
                set(&mut s.width, a.width);
                set(&mut s.height, a.height);
                set(&mut s.min_heads, a.min_heads);
                set(&mut s.max_heads, a.max_heads);
                set(&mut s.blob_radius, a.blob_radius);
                set(&mut s.noise, a.noise);
            }
            Command::Kfold(a) => set(&mut cfg.kfold.k, a.k),
            Command::Eval(_) | Command::Count(_) => {}
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.exit_code() == 0 {
                let _ = write!(out, "{text}");
                0
            } else {
                let _ = write!(err, "{text}");
                2
            };
        }
    };
    let recorded = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, recorded, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cli.command.apply(&mut cfg);
    set(&mut cfg.seed, cli.seed);
    cfg.deterministic |= cli.deterministic;
    cfg.propagate_seed();
    cfg.validate()?;
    Ok(cfg)
}

struct Ctx<'a> {
    cfg: RunConfig,
    provenance: Provenance,
    json: bool,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn parallel(&self) -> bool {
        !self.cfg.deterministic
    }

    fn emit(&mut self, value: Value, text: &str) -> Result<()> {
        let r = if self.json {
            writeln!(self.out, "{value}")
        } else {
            write!(self.out, "{text}")
        };
        r.map_err(|e| Error::io(Path::new("<stdout>"), e))
    }

    fn warn(&mut self, msg: &str) {
        let _ = writeln!(self.err, "warning: {msg}");
    }

    fn artifact(&self, path: &Path) -> Result<()> {
        write_provenance(path, &self.provenance).map(drop)
    }
}

fn execute(cli: &Cli, args: Vec<String>, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let line = serde_json::to_string(&cfg.to_json()).expect("config serializes");
    let _ = writeln!(err, "resolved config: {line}");
    let provenance = Provenance::new(cli.command.name(), args, cfg.to_json(), cfg.seed);
    let mut ctx = Ctx {
        cfg,
        provenance,
        json: cli.json,
        out,
        err,
    };
    match &cli.command {
        Command::Density(a) => density_cmd(&mut ctx, a),
        Command::Train(a) => train_cmd(&mut ctx, a),
        Command::Eval(a) => eval_cmd(&mut ctx, a),
        Command::Count(a) => count_cmd(&mut ctx, a),
        Command::Params(_) => params_cmd(&mut ctx),
        Command::Synth(a) => synth_cmd(&mut ctx, a),
        Command::Kfold(a) => kfold_cmd(&mut ctx, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn file_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Grayscale preview scaled so the largest value is white.
fn preview_png(map: &DensityMap) -> Vec<u8> {
    let max = map.data.iter().copied().fold(0.0_f64, f64::max);
    let pixels: Vec<u8> = map
        .data
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (v.max(0.0) / max * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    encode_gray_png(map.width, map.height, &pixels)
}

fn density_cmd(ctx: &mut Ctx, a: &DensityArgs) -> Result<()> {
    let inputs: Vec<(String, PathBuf)> = match &a.manifest {
        Some(m) => read_manifest(m)?
            .entries
            .into_iter()
            .map(|e| (e.id, e.annotation))
            .collect(),
        None => a.annotations.iter().map(|p| (file_id(p), p.clone())).collect(),
    };
    if inputs.is_empty() {
        return Err(Error::Usage("density needs --annotation or --manifest".into()));
    }
    if a.downsample == 0 {
        return Err(Error::Usage("--downsample must be at least 1".into()));
    }
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    let mut text = String::new();
    for (id, path) in &inputs {
        let (points, clamped) = read_annotation(path)?.point_set();
        if clamped > 0 {
            ctx.warn(&format!("{}: {clamped} points clamped into the image", path.display()));
        }
        let mut map = density::generate(&points, &ctx.cfg.kernel)?;
        if a.downsample > 1 {
            map = density::downsample_sum(&map, a.downsample)?;
        }
        let target = a.out.join(format!("{id}.drt4"));
        write_tensor(&target, &map.to_tensor())?;
        ctx.artifact(&target)?;
        if a.preview {
            let png = a.out.join(format!("{id}.png"));
            fs::write(&png, preview_png(&map)).map_err(|e| Error::io(&png, e))?;
            ctx.artifact(&png)?;
        }
        let sum = map.sum();
        text.push_str(&format!("{id}\t{}\t{sum:.6}\t{}\n", points.len(), target.display()));
        rows.push(json!({"id": id, "heads": points.len(), "sum": sum, "path": target}));
    }
    ctx.emit(Value::Array(rows), &text)
}

fn train_cmd(ctx: &mut Ctx, a: &TrainArgs) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    manifest.check_files()?;
    let data = load_dataset(&manifest, &FileDecoder, ctx.parallel())?;
    if data.clamped_points > 0 {
        ctx.warn(&format!(
            "{} annotation points clamped into their images",
            data.clamped_points
        ));
    }
    let mut model = Model::build(ctx.cfg.model, ctx.cfg.seed)?;
    let outcome = train_to_dir(
        &mut model, &data.samples, ctx.cfg.kernel, &ctx.cfg.train, ctx.cfg.seed, &a.out, &ctx.provenance,
    )?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    let mut text = format!(
        "trained {} iterations on {} images, final loss {last}\nloss trace: {}\n",
        outcome.losses.len(),
        data.samples.len(),
        outcome.loss_csv.display()
    );
    for c in &outcome.checkpoints {
        text.push_str(&format!("checkpoint: {}\n", c.display()));
    }
    let value = json!({
        "iterations": outcome.losses.len(),
        "final_loss": last,
        "loss_csv": outcome.loss_csv,
        "checkpoints": outcome.checkpoints,
    });
    ctx.emit(value, &text)
}

fn eval_cmd(ctx: &mut Ctx, a: &EvalArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let manifest = read_manifest(&a.manifest)?;
    let data = load_dataset_lenient(&manifest, &FileDecoder, ctx.parallel());
    for (id, reason) in data.skipped.clone() {
        ctx.warn(&format!("skipped {id}: {reason}"));
    }
    let report = evaluate_dataset(&model, &data, ctx.parallel())?;
    if let Some(path) = &a.out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_report(path, &report)?;
        ctx.artifact(path)?;
    }
    let text = format!(
        "images {}  MAE {:.4}  MSE {:.4}  skipped {}\n",
        report.n,
        report.mae,
        report.mse,
        report.skipped.len()
    );
    ctx.emit(serde_json::to_value(&report).expect("report serializes"), &text)
}

fn count_cmd(ctx: &mut Ctx, a: &CountArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let mut images: Vec<(String, PathBuf)> = a.images.iter().map(|p| (file_id(p), p.clone())).collect();
    if let Some(m) = &a.manifest {
        images.extend(read_manifest(m)?.entries.into_iter().map(|e| (e.id, e.image)));
    }
    if images.is_empty() {
        return Err(Error::Usage("count needs image paths or --manifest".into()));
    }
    let mut rows = Vec::new();
    let mut text = String::new();
    for (id, path) in &images {
        let image = FileDecoder.decode(path)?.to_tensor();
        let count = count_image(&model, &image)?;
        text.push_str(&format!("{id}\t{count:.3}\n"));
        rows.push(json!({"id": id, "count": count}));
    }
    ctx.emit(Value::Array(rows), &text)
}

fn params_cmd(ctx: &mut Ctx) -> Result<()> {
    let mut rows = Vec::new();
    let mut text = format!(
        "{:<10} {:>6} {:>13} {:>14} {:>8}\n",
        "arch", "depth", "conv_weights", "all_learnable", "PARAMS"
    );
    for arch in Arch::ALL {
        let spec = ModelSpec { arch, ..ctx.cfg.model };
        let model = Model::<f32>::build(spec, 0)?;
        let conv = model.count_parameters(CountMode::ConvWeights);
        let all = model.count_parameters(CountMode::AllLearnable);
        let millions = format!("{:.3}M", conv as f64 / 1e6);
        text.push_str(&format!(
            "{:<10} {:>6} {:>13} {:>14} {:>8}\n",
            arch.name(),
            spec.depth(),
            thousands(conv),
            thousands(all),
            millions
        ));
        rows.push(json!({
            "arch": arch.name(),
            "depth": spec.depth(),
            "conv_weights": conv,
            "all_learnable": all,
            "params": millions,
        }));
    }
    ctx.emit(Value::Array(rows), &text)
}

/// `28096` as `28,096`.
fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn synth_cmd(ctx: &mut Ctx, a: &SynthArgs) -> Result<()> {
    let data = synth_generate(&ctx.cfg.synth)?;
    create_dir(&a.out)?;
    let (train, test) = write_synth(&a.out, &data)?;
    ctx.artifact(&a.out)?;
    let (train_csv, test_csv) = (a.out.join("train.csv"), a.out.join("test.csv"));
    let text = format!(
        "wrote {} training and {} test images\n{}\n{}\n",
        train.entries.len(),
        test.entries.len(),
        train_csv.display(),
        test_csv.display()
    );
    let value = json!({
        "train": train.entries.len(),
        "test": test.entries.len(),
        "train_manifest": train_csv,
        "test_manifest": test_csv,
    });
    ctx.emit(value, &text)
}

fn kfold_cmd(ctx: &mut Ctx, a: &KfoldArgs) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let ids = manifest.ids();
    let k = ctx.cfg.kfold.k;
    let folds: Vec<usize> = match a.fold {
        Some(f) if f >= k => return Err(Error::Usage(format!("--fold {f} is out of range for {k} folds"))),
        Some(f) => vec![f],
        None => (0..k).collect(),
    };
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    let mut text = String::new();
    for fold in folds {
        let (train_ids, test_ids) = kfold(&ids, k, fold, ctx.cfg.seed)?;
        let train_path = a.out.join(format!("fold{fold}_train.csv"));
        let test_path = a.out.join(format!("fold{fold}_test.csv"));
        write_manifest(&train_path, &manifest.subset(&train_ids, Split::Train))?;
        write_manifest(&test_path, &manifest.subset(&test_ids, Split::Test))?;
        ctx.artifact(&train_path)?;
        ctx.artifact(&test_path)?;
        text.push_str(&format!(
            "fold {fold}: {} train, {} test\n",
            train_ids.len(),
            test_ids.len()
        ));
        rows.push(json!({
            "fold": fold,
            "train": train_ids,
            "test": test_ids,
            "train_manifest": train_path,
            "test_manifest": test_path,
        }));
    }
    ctx.emit(Value::Array(rows), &text)
}
