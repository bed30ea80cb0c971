//! Operator surface: generate datasets, train, evaluate, infer, sweep.
//!
//! Stdout carries machine-parseable results; diagnostics go to stderr.
//! Exit codes: 2 configuration, 3 I/O, 4 non-finite loss, 5 undefined
//! metrics.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avfm_core::checkpoint;
use avfm_core::datagen::{self, vocab::Vocabulary, DatagenConfig};
use avfm_core::error::Error;
use avfm_core::extract::extractor_by_name;
use avfm_core::metrics::{self, EvalSample, MetricsReport, ScoredSet, Scorer};
use avfm_core::model::{predict, ModelState};
use avfm_core::pngio;
use avfm_core::rng::derive_stream;
use avfm_core::tensor::{ops, GradTape, Tensor};
use avfm_core::trainer::{self, finetune_few_shot, train_zero_shot, TrainItem};
use avfm_core::Result;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "avfm", about = "Zero-shot anomaly detection lab", version)]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic triplet dataset.
    Gen(GenArgs),
    /// Train the zero-shot model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Score one image with a checkpoint.
    Infer(InferArgs),
    /// Re-run a pipeline stage over a knob grid.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Accepted samples to emit.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated object tags; default whole vocabulary.
    #[arg(long, value_delimiter = ',')]
    objects: Option<Vec<String>>,
    /// Acceptance threshold T.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    forced_fail: Option<f64>,
    /// raw_pixel or backbone.
    #[arg(long)]
    extractor: Option<String>,
    /// Checkpoint backing the backbone extractor; random frozen init
    /// otherwise.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Keep every sample (filtering ablation).
    #[arg(long)]
    no_filter: bool,
    /// Sample defect centers over the whole image (foreground ablation).
    #[arg(long)]
    full_image_fg: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Warm-up steps for the backbone before freezing.
    #[arg(long)]
    warmup: Option<usize>,
    /// Train backbone weights too.
    #[arg(long)]
    unfreeze: bool,
    /// Continue from this checkpoint with few-shot finetuning.
    #[arg(long)]
    finetune: Option<PathBuf>,
    /// Number of normal images for finetuning.
    #[arg(long)]
    shots: Option<usize>,
    /// Restrict finetuning shots to this object tag.
    #[arg(long)]
    shot_class: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    /// Write 16-bit anomaly-map PNGs per sample.
    #[arg(long)]
    save_maps: bool,
    /// Gaussian smoothing sigma in pixels; 0 disables.
    #[arg(long)]
    smooth: Option<f64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output 16-bit anomaly-map PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// threshold | rank | n_images | n_object_tags
    #[arg(long)]
    knob: String,
    /// Comma-separated grid values; sensible defaults per knob.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Image(_) | Error::Load(_) | Error::Json(_) => 3,
        Error::NonFiniteLoss { .. } => 4,
        Error::UndefinedMetric(_) => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Gen(args) => {
            overlay_gen(&mut cfg, args);
            if cli.print_config {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            cmd_gen(&cfg, &args.out, args.ckpt.as_deref())
        }
        Command::Train(args) => {
            overlay_train(&mut cfg, args);
            if cli.print_config {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            cmd_train(&cfg, args)
        }
        Command::Eval(args) => {
            if let Some(s) = args.smooth {
                cfg.eval.smooth_sigma = s;
            }
            if args.save_maps {
                cfg.eval.save_maps = true;
            }
            if cli.print_config {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            cmd_eval(&cfg, args)
        }
        Command::Infer(args) => {
            if cli.print_config {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            cmd_infer(args)
        }
        Command::Sweep(args) => {
            if cli.print_config {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            cmd_sweep(&cfg, args)
        }
    }
}

fn overlay_gen(cfg: &mut RunConfig, args: &GenArgs) {
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(t) = args.threshold {
        cfg.datagen.threshold = t;
    }
    if let Some(p) = args.forced_fail {
        cfg.datagen.forced_fail_prob = p;
    }
    if let Some(e) = &args.extractor {
        cfg.datagen.extractor = e.clone();
    }
    if let Some(o) = &args.objects {
        cfg.datagen.objects = Some(o.clone());
    }
    if let Some(w) = args.workers {
        cfg.datagen.workers = w;
    }
    if let Some(s) = args.image_size {
        cfg.datagen.image_size = s;
    }
    if args.no_filter {
        cfg.datagen.no_filter = true;
    }
    if args.full_image_fg {
        cfg.datagen.full_image_fg = true;
    }
}

fn overlay_train(cfg: &mut RunConfig, args: &TrainArgs) {
    cfg.train.seed = cfg.seed;
    if let Some(i) = args.iterations {
        cfg.train.iterations = i;
    }
    if let Some(b) = args.batch {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(w) = args.warmup {
        cfg.train.warmup_steps = w;
    }
    if args.unfreeze {
        cfg.train.freeze_backbone = false;
    }
}

/// Build the vocabulary for generation, restricted when requested.
fn gen_vocabulary(dg: &DatagenConfig) -> Result<Vocabulary> {
    let full = Vocabulary::builtin();
    match &dg.objects {
        Some(tags) => full.subset(tags),
        None => Ok(full.clone()),
    }
}

fn cmd_gen(cfg: &RunConfig, out: &Path, ckpt: Option<&Path>) -> Result<()> {
    let vocabulary = gen_vocabulary(&cfg.datagen)?;
    let loaded;
    let seeded;
    let model: Option<&ModelState> = if cfg.datagen.extractor == "backbone" {
        match ckpt {
            Some(path) => {
                loaded = checkpoint::load(path)?;
                Some(&loaded.model)
            }
            None => {
                let mut rng = derive_stream(cfg.seed, "gen-backbone", 0);
                seeded = ModelState::init(
                    cfg.backbone.clone(),
                    cfg.plan.clone(),
                    true,
                    &mut rng,
                )?;
                Some(&seeded)
            }
        }
    } else {
        None
    };
    let extractor = extractor_by_name(&cfg.datagen.extractor, model, cfg.datagen.extractor_patch)?;
    let samples = datagen::generate_triplets(cfg.n, &cfg.datagen, &vocabulary, extractor.as_ref(), cfg.seed)?;
    let stats = datagen::write_dataset(out, &samples, cfg.n)?;
    println!(
        "accepted {} of {} attempts (rejection rate {:.3}) mean_area {:.2}% -> {}",
        stats.accepted,
        stats.attempts,
        stats.rejection_rate,
        stats.anomalous_area.mean_pct,
        out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(base) = &args.finetune {
        let ckpt = checkpoint::load(base)?;
        let shots = args.shots.unwrap_or(4);
        let triplets = datagen::load_dataset(&args.data)?;
        let mut images: Vec<Tensor> = Vec::new();
        for t in &triplets {
            if let Some(class) = &args.shot_class {
                if &t.object != class {
                    continue;
                }
            }
            images.push(t.normal.clone());
            if images.len() == shots {
                break;
            }
        }
        if images.len() < shots {
            return Err(Error::Config(format!(
                "dataset provides only {} matching normal images for {} shots",
                images.len(),
                shots
            )));
        }
        let iterations = args
            .iterations
            .unwrap_or(trainer::DEFAULT_FINETUNE_ITERATIONS);
        let tuned = finetune_few_shot(&ckpt, &images, iterations)?;
        checkpoint::save(&tuned, &args.out)?;
        println!("finetuned {} iterations -> {}", iterations, args.out.display());
        return Ok(());
    }

    let triplets = datagen::load_dataset(&args.data)?;
    let items = TrainItem::from_loaded(&triplets);
    let log_path = args.out.with_extension("loss.csv");
    let mut log = fs::File::create(&log_path)?;
    let ckpt = train_zero_shot(
        &items,
        cfg.backbone.clone(),
        cfg.plan.clone(),
        &cfg.train,
        Some(&mut log),
    )?;
    checkpoint::save(&ckpt, &args.out)?;
    let census = ckpt.model.census();
    println!(
        "trained {} iterations on {} triplets ({} trainable / {} total params) -> {}",
        cfg.train.iterations,
        items.len(),
        census.trainable,
        census.total,
        args.out.display()
    );
    Ok(())
}

/// Separable Gaussian blur used by the optional eval smoothing flag.
fn gaussian_blur(map: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Ok(map.clone());
    }
    let (h, w) = map.dims2()?;
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let o = k as i64 - radius;
                    let (sy, sx) = if horizontal { (y, x + o) } else { (y + o, x) };
                    let sy = sy.clamp(0, h as i64 - 1) as usize;
                    let sx = sx.clamp(0, w as i64 - 1) as usize;
                    acc += kv * src[sy * w + sx];
                }
                dst[(y as usize) * w + x as usize] = acc / norm;
            }
        }
        dst
    };
    let tmp = pass(map.data(), true);
    Tensor::from_vec(&[h, w], pass(&tmp, false))
}

struct SmoothedScorer<'a> {
    model: &'a ModelState,
    sigma: f64,
}

impl Scorer for SmoothedScorer<'_> {
    fn score_sample(&self, sample: &EvalSample) -> Result<(Tensor, f64)> {
        let pred = predict(&sample.image, self.model)?;
        Ok((gaussian_blur(&pred.anomaly_map, self.sigma)?, pred.image_score))
    }
}

/// Both halves of every triplet as evaluation samples.
fn eval_samples(triplets: &[datagen::LoadedTriplet]) -> Vec<EvalSample> {
    let mut samples = Vec::with_capacity(triplets.len() * 2);
    for t in triplets {
        samples.push(EvalSample {
            id: format!("{}-normal", t.id),
            class_tag: t.object.clone(),
            image: t.normal.clone(),
            mask: Tensor::zeros(t.mask.shape()),
            label: false,
        });
        samples.push(EvalSample {
            id: format!("{}-anomalous", t.id),
            class_tag: t.object.clone(),
            image: t.anomalous.clone(),
            mask: t.mask.clone(),
            label: true,
        });
    }
    samples
}

fn write_roc_csv(path: &Path, image: &ScoredSet, pixel: &ScoredSet) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "set,fpr,tpr")?;
    for (fpr, tpr) in metrics::roc_points(image)? {
        writeln!(f, "image,{fpr},{tpr}")?;
    }
    for (fpr, tpr) in metrics::roc_points(pixel)? {
        writeln!(f, "pixel,{fpr},{tpr}")?;
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.ckpt)?;
    let triplets = datagen::load_dataset(&args.data)?;
    let samples = eval_samples(&triplets);
    let scorer = SmoothedScorer {
        model: &ckpt.model,
        sigma: cfg.eval.smooth_sigma,
    };
    let report = metrics::evaluate_dataset(&scorer, &samples)?;

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(args.out.join("report.txt"), report.to_table())?;

    let mut image_set = ScoredSet::new();
    let mut pixel_set = ScoredSet::new();
    for s in &samples {
        let (map, score) = scorer.score_sample(s)?;
        image_set.push(score, s.label);
        let labels: Vec<bool> = s.mask.data().iter().map(|&v| v > 0.5).collect();
        pixel_set.extend(map.data(), &labels);
        if cfg.eval.save_maps {
            let dir = args.out.join("maps");
            fs::create_dir_all(&dir)?;
            pngio::save_map16(&dir.join(format!("{}.png", s.id)), &map)?;
        }
    }
    write_roc_csv(&args.out.join("roc_points.csv"), &image_set, &pixel_set)?;

    println!(
        "img_auroc {:.4} img_f1 {:.4} px_auroc {:.4} px_f1 {:.4}",
        report.image_auroc, report.image_f1max, report.pixel_auroc, report.pixel_f1max
    );
    Ok(())
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.ckpt)?;
    let image = pngio::load_rgb(&args.image)?;
    let (_, in_h, in_w) = image.dims3()?;
    let size = ckpt.model.config.image_size;
    let mut tape = GradTape::inactive();
    let resized = if (in_h, in_w) == (size, size) {
        image
    } else {
        ops::bilinear_resize(&image, size, size, &mut tape)?
    };
    let pred = predict(&resized, &ckpt.model)?;
    let map = if (in_h, in_w) == (size, size) {
        pred.anomaly_map
    } else {
        let grid = ops::reshape(&pred.anomaly_map, &[1, size, size])?;
        let up = ops::bilinear_resize(&grid, in_h, in_w, &mut tape)?;
        ops::reshape(&up, &[in_h, in_w])?
    };
    pngio::save_map16(&args.out, &map)?;
    println!("{}", pred.image_score);
    Ok(())
}

fn default_grid(knob: &str) -> Result<Vec<f64>> {
    Ok(match knob {
        "threshold" => vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        "rank" => vec![32.0, 64.0, 128.0],
        "n_images" => vec![100.0, 500.0, 1000.0],
        "n_object_tags" => vec![5.0, 10.0, 20.0, 50.0, 96.0],
        other => return Err(Error::Config(format!("unknown sweep knob '{other}'"))),
    })
}

fn cmd_sweep(cfg: &RunConfig, args: &SweepArgs) -> Result<()> {
    let grid = match &args.grid {
        Some(g) => {
            default_grid(&args.knob)?;
            g.clone()
        }
        None => default_grid(&args.knob)?,
    };
    let vocabulary = Vocabulary::builtin();
    datagen::assert_disjoint_splits(&cfg.split.train_objects, &cfg.split.eval_objects)?;

    // fixed evaluation set at the default pipeline settings
    let eval_vocab = vocabulary.subset(&cfg.split.eval_objects)?;
    let eval_dg = DatagenConfig {
        objects: Some(cfg.split.eval_objects.clone()),
        ..cfg.datagen.clone()
    };
    let eval_extractor = extractor_by_name("raw_pixel", None, eval_dg.extractor_patch)?;
    let eval_n = (cfg.n / 2).max(8);
    let eval_samples_raw = datagen::generate_triplets(
        eval_n,
        &eval_dg,
        &eval_vocab,
        eval_extractor.as_ref(),
        avfm_core::rng::derive_seed(cfg.seed, "sweep-eval", 0),
    )?;
    let eval_items: Vec<datagen::LoadedTriplet> = eval_samples_raw
        .iter()
        .filter(|s| s.accepted)
        .map(|s| datagen::LoadedTriplet {
            id: datagen::sample_id(s.id),
            object: s.object.clone(),
            texture: s.texture.clone(),
            anomaly: s.anomaly.clone(),
            normal: s.normal.clone(),
            anomalous: s.anomalous.clone(),
            mask: s.mask.clone(),
        })
        .collect();
    let eval_set = eval_samples(&eval_items);

    let mut out = fs::File::create(&args.out)?;
    writeln!(out, "knob,value,rejection_rate,img_auroc,img_f1,px_auroc,px_f1")?;

    for &value in &grid {
        let mut dg = DatagenConfig {
            objects: Some(cfg.split.train_objects.clone()),
            ..cfg.datagen.clone()
        };
        let mut backbone = cfg.backbone.clone();
        let mut n = cfg.n;
        let mut train_vocab = vocabulary.subset(&cfg.split.train_objects)?;
        match args.knob.as_str() {
            "threshold" => dg.threshold = value,
            "rank" => backbone.adapter_rank = value as usize,
            "n_images" => n = value as usize,
            "n_object_tags" => {
                let k = (value as usize).min(vocabulary.objects.len());
                let tags: Vec<String> = vocabulary
                    .objects
                    .iter()
                    .filter(|t| !cfg.split.eval_objects.contains(t))
                    .take(k)
                    .cloned()
                    .collect();
                dg.objects = Some(tags.clone());
                train_vocab = vocabulary.subset(&tags)?;
            }
            other => return Err(Error::Config(format!("unknown sweep knob '{other}'"))),
        }

        let extractor = extractor_by_name("raw_pixel", None, dg.extractor_patch)?;
        let samples = datagen::generate_triplets(
            n,
            &dg,
            &train_vocab,
            extractor.as_ref(),
            avfm_core::rng::derive_seed(cfg.seed, "sweep-train", value.to_bits()),
        )?;
        let stats = datagen::compute_stats(&samples, n);
        let items = TrainItem::from_generated(&samples);
        let ckpt = train_zero_shot(&items, backbone, cfg.plan.clone(), &cfg.train, None)?;
        let report: MetricsReport = metrics::evaluate_dataset(&ckpt.model, &eval_set)?;
        writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            args.knob,
            value,
            stats.rejection_rate,
            report.image_auroc,
            report.image_f1max,
            report.pixel_auroc,
            report.pixel_f1max
        )?;
        eprintln!("sweep {}={} done", args.knob, value);
    }
    println!("{}", args.out.display());
    Ok(())
}
