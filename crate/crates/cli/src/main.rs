mod annotate;

use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use sod_core::bench::{time_inference, DEFAULT_DISCARD, DEFAULT_RUNS};
use sod_core::error::{Error, Result};
use sod_core::metrics::{map_suite, pr_curve_svg, Detection, GroundTruth};
use sod_core::model::{count_flops, Model, ModelSpec, Variant};
use sod_core::nn::conv_flops;
use sod_core::sim::{generate_dataset, GenConfig, Manifest, RgbImage};
use sod_core::train::{load_checkpoint, load_split, predict, read_checkpoint_meta, save_checkpoint, Sample, TrainConfig, Trainer, LOG_HEADER};

#[derive(Parser)]
#[command(name = "sod", version, about = "Space-object detection: data generation, training, evaluation and benchmarking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic LEO dataset (PPM frames, YOLO labels, manifest.json)
    GenData(GenArgs),
    /// Train a detector on a generated dataset
    Train(TrainArgs),
    /// Score a checkpoint (or precomputed detections) on a dataset split
    Eval(EvalArgs),
    /// Time batch-1 inference and measure peak memory
    Bench(BenchArgs),
    /// Count forward-pass FLOPs
    Flops(FlopsArgs),
}

#[derive(Args)]
struct GenArgs {
    /// GenConfig JSON; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// ModelSpec JSON
    #[arg(long = "model")]
    model_config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
}

impl ModelArgs {
    fn spec(&self) -> Result<ModelSpec> {
        let mut spec = match &self.model_config {
            Some(p) => ModelSpec::from_json_file(p)?,
            None => ModelSpec::default(),
        };
        if let Some(v) = self.variant {
            spec.variant = v;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TrainConfig JSON; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset directory written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Train on the first N training frames only
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long, required_unless_present = "detections", conflicts_with = "detections")]
    checkpoint: Option<PathBuf>,
    /// JSON list (one entry per image of the split) of detection lists; `-` reads stdin
    #[arg(long)]
    detections: Option<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0.001)]
    conf: f64,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Confidence floor for drawing boxes on the annotated frames
    #[arg(long, default_value_t = 0.25)]
    draw_conf: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, conflicts_with_all = ["model_config", "variant"])]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    runs: usize,
    #[arg(long, default_value_t = DEFAULT_DISCARD)]
    discard: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    /// ModelSpec JSON, or `{"conv": {...}}` for a single convolution
    #[arg(long, conflicts_with = "variant")]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Print every layer, not only the total
    #[arg(long)]
    layers: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvSpec {
    c_in: usize,
    c_out: usize,
    kernel: usize,
    #[serde(default = "one")]
    stride: usize,
    /// Square input extent.
    size: usize,
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvFile {
    conv: ConvSpec,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn gen_data(a: GenArgs) -> Result<()> {
    let mut cfg: GenConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.train_count {
        cfg.train_count = n;
    }
    if let Some(n) = a.test_count {
        cfg.test_count = n;
    }
    cfg.validate()?;
    let manifest = generate_dataset(&cfg, &a.out)?;
    let boxes: usize = manifest.files.iter().map(|f| f.objects).sum();
    println!(
        "{} train / {} test frames, {boxes} boxes, seed {} -> {}",
        manifest.split("train").count(),
        manifest.split("test").count(),
        cfg.seed,
        a.out.display()
    );
    Ok(())
}

fn limited(mut samples: Vec<Sample>, limit: Option<usize>) -> Vec<Sample> {
    if let Some(n) = limit {
        samples.truncate(n);
    }
    samples
}

fn train(a: TrainArgs) -> Result<()> {
    create_dir(&a.out)?;
    let (mut model, mut trainer, seed) = match &a.resume {
        Some(ckpt) => {
            let (model, trainer) = load_checkpoint(ckpt)?;
            (model, trainer, read_checkpoint_meta(ckpt)?.weights_seed)
        }
        None => {
            let mut cfg: TrainConfig = match &a.config {
                Some(p) => TrainConfig::from_json_file(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(b) = a.batch_size {
                cfg.batch_size = b;
            }
            if let Some(lr) = a.lr {
                cfg.optimizer.lr = lr;
            }
            let model = Model::build(&a.model.spec()?, cfg.seed)?;
            let seed = cfg.seed;
            (model, Trainer::new(cfg)?, seed)
        }
    };
    if let Some(e) = a.epochs {
        trainer.cfg.epochs = e;
    }
    trainer.cfg.validate()?;
    let data = limited(load_split(&a.data, "train", &model.spec.strides)?, a.limit);
    if data.is_empty() {
        return Err(Error::Invalid(format!("no training frames under {}", a.data.display())));
    }
    println!(
        "training {} on {} frames from epoch {} to {}",
        model.spec.variant,
        data.len(),
        trainer.epoch,
        trainer.cfg.epochs
    );

    let log_path = a.out.join("train_log.csv");
    let fresh = a.resume.is_none() || !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
    if fresh {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
    }
    let ckpt = a.out.join("checkpoint.sodw");
    while trainer.epoch < trainer.cfg.epochs {
        let row = trainer.train_epoch(&mut model, &data)?;
        writeln!(log, "{}", row.csv_row()).map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
        let map = row.map50.map(|m| format!(" map50 {m:.4}")).unwrap_or_default();
        println!(
            "epoch {}/{} loss {:.4} (box {:.4} obj {:.4} cls {:.4}){map}",
            row.epoch, trainer.cfg.epochs, row.loss, row.box_loss, row.obj_loss, row.cls_loss
        );
    }
    save_checkpoint(&ckpt, &model, &trainer, seed)?;
    println!("checkpoint {} (epoch {})", ckpt.display(), trainer.epoch);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    for (name, v) in [("--conf", a.conf), ("--iou", a.iou), ("--draw-conf", a.draw_conf)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Invalid(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    let manifest = Manifest::load(&a.data)?;
    let entries: Vec<_> = manifest.split(&a.split).take(a.limit.unwrap_or(usize::MAX)).cloned().collect();
    if entries.is_empty() {
        return Err(Error::Invalid(format!("split {:?} of {} is empty", a.split, a.data.display())));
    }
    let strides = sod_core::model::STRIDES;
    let samples = limited(load_split(&a.data, &a.split, &strides)?, a.limit);
    let dets: Vec<Vec<Detection>> = match (&a.checkpoint, &a.detections) {
        (Some(ckpt), _) => {
            let (model, _) = load_checkpoint(ckpt)?;
            predict(&model, &samples, a.conf, a.iou)?
        }
        (None, Some(src)) => {
            let text = if src == "-" {
                let mut s = String::new();
                std::io::stdin()
                    .read_to_string(&mut s)
                    .map_err(|e| Error::Io { path: "<stdin>".into(), source: e })?;
                s
            } else {
                std::fs::read_to_string(src).map_err(|e| Error::Io { path: src.into(), source: e })?
            };
            let dets: Vec<Vec<Detection>> = serde_json::from_str(&text)?;
            if dets.len() != samples.len() {
                return Err(Error::Invalid(format!(
                    "{} detection lists for {} images in split {:?}",
                    dets.len(),
                    samples.len(),
                    a.split
                )));
            }
            dets
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let gts: Vec<Vec<GroundTruth>> = samples.iter().map(Sample::ground_truth).collect();
    let report = map_suite(&dets, &gts);

    create_dir(&a.out)?;
    let drawn = a.out.join("annotated");
    create_dir(&drawn)?;
    for (entry, d) in entries.iter().zip(&dets) {
        let mut img = RgbImage::load_ppm(&a.data.join(&entry.image))?;
        let shown: Vec<Detection> = d.iter().copied().filter(|x| x.confidence >= a.draw_conf).collect();
        annotate::annotate(&mut img, &shown);
        let name = Path::new(&entry.image).file_name().expect("manifest paths name files");
        img.save_ppm(&drawn.join(name))?;
    }
    write_file(&a.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write_file(&a.out.join("pr_curve.svg"), pr_curve_svg(&report.pr_curve, &format!("PR @ IoU 0.5 ({})", a.split)))?;
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    println!(
        "{} images, {} ground truths, {} detections: mAP50 {:.4} mAP50:95 {:.4}",
        report.images, report.ground_truths, report.detections, report.map50, report.map50_95
    );
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let model = match &a.checkpoint {
        Some(ckpt) => load_checkpoint(ckpt)?.0,
        None => Model::build(&a.model.spec()?, a.seed)?,
    };
    let report = time_inference(&model, a.runs, a.discard)?;
    println!("{} runs, {} discarded, {} retained samples, batch {}", report.runs_total, report.runs_discarded, report.retained().len(), report.batch_size);
    println!("{}", report.summary());
    if let Some(out) = &a.out {
        create_dir(out)?;
        report.save(&out.join("bench.json"))?;
    }
    Ok(())
}

fn flops(a: FlopsArgs) -> Result<()> {
    if let Some(path) = &a.config {
        let value: serde_json::Value = read_json(path)?;
        if value.get("conv").is_some() {
            let ConvFile { conv: c } = serde_json::from_value(value)?;
            if c.stride == 0 || c.kernel == 0 || c.size == 0 {
                return Err(Error::Invalid("conv kernel, stride and size must be positive".into()));
            }
            let out = (c.size + 2 * (c.kernel / 2) - c.kernel) / c.stride + 1;
            let f = conv_flops(c.c_out, c.c_in, c.kernel, out, out);
            println!("conv: {:.6} GFLOPs ({f} FLOPs)", f as f64 * 1e-9);
            return Ok(());
        }
    }
    let spec = ModelArgs { model_config: a.config, variant: a.variant }.spec()?;
    let model = Model::build(&spec, 0)?;
    let table = count_flops(&model);
    if a.layers {
        for (name, f) in &table.entries {
            println!("{name}\t{f}");
        }
    }
    println!("{}: {:.4} GFLOPs ({} FLOPs) at {}x{}", spec.variant, table.gflops(), table.total(), spec.input_size, spec.input_size);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Flops(a) => flops(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
