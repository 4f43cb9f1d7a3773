//! Subcommand implementations. Diagnostics go to stderr; tables and data go
//! to stdout or files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;

use bionet_core::dataset::{generate_dataset, read_split, Split};
use bionet_core::domain::{ChoroidMask, Sample};
use bionet_core::metrics::{evaluate_dataset, MetricsReport};
use bionet_core::nn::checkpoint::save_bio;
use bionet_core::phantom::PhantomConfig;
use bionet_core::training::{
    evaluate_model, load_bundle, load_frozen_bio, save_bundle, train_bio_stage,
    train_cascade_stage, AblationMode, ChoroidPredictor, ModelBundle, TrainConfig, TrainLog,
};

use crate::render;

#[derive(Args)]
pub struct PhantomArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Training samples to generate.
    #[arg(long)]
    train: usize,
    /// Test samples to generate.
    #[arg(long)]
    test: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    num_layers: usize,
    #[arg(long, default_value_t = 9)]
    choroid_class: u8,
    /// Boundary smoothing window in columns.
    #[arg(long)]
    smoothness: Option<usize>,
    /// Minimum band thickness in pixels.
    #[arg(long)]
    min_band: Option<usize>,
    /// Bounds of the sampled mean choroid thickness, in pixels.
    #[arg(long)]
    choroid_min: Option<f64>,
    #[arg(long)]
    choroid_max: Option<f64>,
    /// Gaussian sigma of the choroid-sclera interface blur.
    #[arg(long)]
    csi_blur: Option<f64>,
    /// Multiplicative speckle amplitude in [0, 1].
    #[arg(long)]
    speckle: Option<f64>,
    /// Start from the full-scale preset (992x512) instead of desk scale.
    #[arg(long, default_value_t = false)]
    paper_scale: bool,
}

pub fn phantom(args: PhantomArgs) -> Result<()> {
    let base = if args.paper_scale {
        PhantomConfig::paper_scale()
    } else {
        PhantomConfig::default()
    };
    let mut config = PhantomConfig {
        seed: args.seed,
        height: args.height,
        width: args.width,
        num_layers: args.num_layers,
        choroid_class: args.choroid_class,
        ..base
    };
    if args.paper_scale {
        // Explicit -h/-w flags still win over the preset.
        config.height = if args.height == 128 { 992 } else { args.height };
        config.width = if args.width == 128 { 512 } else { args.width };
    }
    if let Some(v) = args.smoothness {
        config.boundary_smoothness = v;
    }
    if let Some(v) = args.min_band {
        config.min_band_thickness = v;
    }
    if let Some(v) = args.choroid_min {
        config.choroid_thickness_range.0 = v;
    }
    if let Some(v) = args.choroid_max {
        config.choroid_thickness_range.1 = v;
    }
    if let Some(v) = args.csi_blur {
        config.csi_blur_sigma = v;
    }
    if let Some(v) = args.speckle {
        config.speckle_strength = v;
    }
    config.validate()?;
    let manifest = generate_dataset(&config, args.train, args.test, &args.out)?;
    eprintln!(
        "wrote {} samples ({} train, {} test) to {}",
        manifest.samples.len(),
        args.train,
        args.test,
        args.out.display()
    );
    Ok(())
}

/// Flags shared by the training commands; any value set here overrides the
/// config file.
#[derive(Args, Clone)]
pub struct TrainOverrides {
    /// Training config TOML (defaults applied when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Learning-rate decay boundaries, comma separated.
    #[arg(long, value_delimiter = ',')]
    lr_decay_epochs: Option<Vec<usize>>,
}

impl TrainOverrides {
    fn build(&self, desk_default: bool) -> Result<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => TrainConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None if desk_default => TrainConfig::desk_scale(),
            None => TrainConfig::default(),
        };
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.base_width {
            config.base_width = v;
        }
        if let Some(v) = self.depth {
            config.depth = v;
        }
        if let Some(v) = self.lr {
            config.base_lr = v;
        }
        if let Some(v) = &self.lr_decay_epochs {
            config.lr_decay_epochs = v.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
pub struct TrainBioArgs {
    /// Dataset directory (from `phantom` or the same layout).
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path for the frozen regressor.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

pub fn train_bio(args: TrainBioArgs) -> Result<()> {
    let config = args.overrides.build(true)?;
    let train = read_split(&args.data, Split::Train)?;
    let test = read_split(&args.data, Split::Test)?;
    eprintln!(
        "stage 1: {} train / {} test samples, {} epochs",
        train.len(),
        test.len(),
        config.epochs
    );
    let (bio, log) = train_bio_stage(&train, &test, &config)?;
    report_progress(&log);
    save_bio(&args.out, &bio, "stage1-bio")?;
    write_logs_next_to(&args.out, &log)?;
    if let Some(mae) = log.final_thickness_mae() {
        eprintln!("final validation thickness MAE: {mae:.3} px");
    }
    eprintln!("frozen regressor written to {}", args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Frozen biomarker checkpoint (required for modes that use it).
    #[arg(long)]
    bio: Option<PathBuf>,
    /// Ablation mode: unet, gms, unet+gms, unet+bio or bionet.
    #[arg(long)]
    mode: AblationMode,
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut config = args.overrides.build(true)?;
    config.ablation_mode = args.mode;
    let bio = match (&args.bio, args.mode.uses_bio()) {
        (Some(path), _) => Some(
            load_frozen_bio(path)
                .with_context(|| format!("loading biomarker checkpoint {}", path.display()))?,
        ),
        (None, true) => bail!("mode {} requires --bio <checkpoint>", args.mode),
        (None, false) => None,
    };
    let train_set = read_split(&args.data, Split::Train)?;
    let test_set = read_split(&args.data, Split::Test)?;
    eprintln!(
        "stage 2 ({}): {} train / {} test samples, {} epochs",
        args.mode,
        train_set.len(),
        test_set.len(),
        config.epochs
    );
    let (bundle, log) = train_cascade_stage(&train_set, &test_set, bio.as_ref(), &config)?;
    report_progress(&log);
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    save_bundle(&args.out, &bundle)?;
    config.save(&args.out.join("config.toml"))?;
    log.write_csv(&args.out.join("trainlog.csv"))?;
    log.write_summary_json(&args.out.join("trainlog.json"))?;
    if let Some(val) = log.final_val() {
        eprintln!("final test metrics:\n{val}");
    }
    eprintln!("model written to {}", args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained model directory (from `train`).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Directory of predicted masks (from `predict`) instead of a model.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => bail!("unknown split {other:?} (expected train or test)"),
    }
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let split = parse_split(&args.split)?;
    let samples = read_split(&args.data, split)?;
    if samples.is_empty() {
        bail!("split {} of {} is empty", args.split, args.data.display());
    }
    let report = match (&args.model, &args.pred) {
        (Some(model_dir), None) => {
            let mut bundle = load_bundle(model_dir)?;
            evaluate_model(&mut bundle, &samples)?
        }
        (None, Some(pred_dir)) => {
            let preds = read_predicted_masks(pred_dir, &samples)?;
            let gts: Vec<ChoroidMask> = samples.iter().map(|s| s.choroid.clone()).collect();
            evaluate_dataset(&preds, &gts)?
        }
        _ => bail!("exactly one of --model or --pred is required"),
    };
    println!("{}", MetricsReport::table_header());
    println!("{}", report.table_row());
    eprintln!("{report}");
    if let Some(path) = args.json {
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn read_predicted_masks(dir: &Path, samples: &[Sample]) -> Result<Vec<ChoroidMask>> {
    samples
        .iter()
        .map(|sample| {
            let path = dir.join(format!("{}.png", sample.id));
            let img = image::open(&path)
                .with_context(|| format!("reading predicted mask {}", path.display()))?
                .into_luma8();
            if (img.height() as usize, img.width() as usize)
                != (sample.choroid.height, sample.choroid.width)
            {
                bail!(
                    "predicted mask {} is {}x{}, sample is {}x{}",
                    sample.id,
                    img.height(),
                    img.width(),
                    sample.choroid.height,
                    sample.choroid.width
                );
            }
            let grid = ndarray::Array2::from_shape_fn(
                (sample.choroid.height, sample.choroid.width),
                |(r, c)| u8::from(img.get_pixel(c as u32, r as u32).0[0] >= 128),
            );
            Ok(ChoroidMask::new(grid)?)
        })
        .collect()
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output directory for `<id>.png` binary masks.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let split = parse_split(&args.split)?;
    let samples = read_split(&args.data, split)?;
    if samples.is_empty() {
        bail!("split {} of {} is empty", args.split, args.data.display());
    }
    let mut bundle = load_bundle(&args.model)?;
    let masks = bundle.predict_masks(&samples)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for (sample, mask) in samples.iter().zip(masks.iter()) {
        let path = args.out.join(format!("{}.png", sample.id));
        render::write_mask_png(&path, mask)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("wrote {} masks to {}", masks.len(), args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    data: PathBuf,
    /// Frozen biomarker checkpoint; required when the mode list includes
    /// unet+bio or bionet.
    #[arg(long)]
    bio: Option<PathBuf>,
    /// Output report directory.
    #[arg(long)]
    out: PathBuf,
    /// Modes to train and tabulate, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = AblationMode::ALL)]
    modes: Vec<AblationMode>,
    /// Overlay images to render per mode.
    #[arg(long, default_value_t = 4)]
    overlays: usize,
    #[command(flatten)]
    overrides: TrainOverrides,
}

pub fn report(args: ReportArgs) -> Result<()> {
    let base_config = args.overrides.build(true)?;
    let needs_bio = args.modes.iter().any(|m| m.uses_bio());
    let bio = match (&args.bio, needs_bio) {
        (Some(path), _) => Some(load_frozen_bio(path)?),
        (None, true) => bail!("requested modes need --bio <checkpoint>"),
        (None, false) => None,
    };
    let train_set = read_split(&args.data, Split::Train)?;
    let test_set = read_split(&args.data, Split::Test)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut rows: Vec<(AblationMode, MetricsReport)> = Vec::new();
    let mut logs: BTreeMap<String, TrainLog> = BTreeMap::new();
    for &mode in &args.modes {
        let mut config = base_config.clone();
        config.ablation_mode = mode;
        eprintln!("training mode {mode} ({} epochs, seed {})", config.epochs, config.seed);
        let (mut bundle, log) = train_cascade_stage(&train_set, &test_set, bio.as_ref(), &config)?;
        let report = evaluate_model(&mut bundle, &test_set)?;
        eprintln!("  {mode}: {}", report.table_row());

        let model_dir = args.out.join("models").join(sanitize(&mode.to_string()));
        save_bundle(&model_dir, &bundle)?;
        log.write_csv(&args.out.join(format!("trainlog_{}.csv", sanitize(&mode.to_string()))))?;
        log.write_summary_json(
            &args.out.join(format!("trainlog_{}.json", sanitize(&mode.to_string()))),
        )?;
        render_mode_overlays(&args.out, mode, &mut bundle, &test_set, args.overlays)?;
        logs.insert(mode.to_string(), log);
        rows.push((mode, report));
    }

    // Comparison table, in the conventional column order with a units line.
    let mut table = String::from("mode,IOU,AUSDE,DI,Acc,Sen\n");
    for (mode, report) in &rows {
        table.push_str(&format!("{mode},{}\n", report.table_row()));
    }
    std::fs::write(args.out.join("report.csv"), &table)?;
    let mut pretty = String::new();
    pretty.push_str(&format!(
        "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "mode", "IOU", "AUSDE", "DI", "Acc", "Sen"
    ));
    for (mode, report) in &rows {
        let ausde = report
            .ausde_mean
            .map(|v| format!("{v:.2}"))
            .unwrap_or_else(|| "n/a".into());
        pretty.push_str(&format!(
            "{:<10} {:>8.2} {:>8} {:>8.2} {:>8.2} {:>8.2}\n",
            mode.to_string(),
            report.iou * 100.0,
            ausde,
            report.dice * 100.0,
            report.accuracy * 100.0,
            report.sensitivity * 100.0
        ));
    }
    pretty.push_str("units: IOU (%), AUSDE (pixels), DI (%), Acc (%), Sen (%)\n");
    std::fs::write(args.out.join("report.txt"), &pretty)?;
    print!("{pretty}");

    render::plot_loss_curves(&args.out.join("loss_curves.png"), &logs)?;
    base_config.save(&args.out.join("config.toml"))?;
    eprintln!("report written to {}", args.out.display());
    Ok(())
}

fn render_mode_overlays(
    out: &Path,
    mode: AblationMode,
    bundle: &mut ModelBundle,
    test_set: &[Sample],
    count: usize,
) -> Result<()> {
    if count == 0 || test_set.is_empty() {
        return Ok(());
    }
    let subset: Vec<Sample> = test_set.iter().take(count).cloned().collect();
    let masks = bundle.predict_masks(&subset)?;
    let dir = out.join("overlays").join(sanitize(&mode.to_string()));
    std::fs::create_dir_all(&dir)?;
    for (sample, mask) in subset.iter().zip(masks.iter()) {
        let path = dir.join(format!("{}.png", sample.id));
        render::write_overlay_png(&path, sample, mask)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn sanitize(mode: &str) -> String {
    mode.replace('+', "_")
}

fn report_progress(log: &TrainLog) {
    for record in &log.records {
        let val = match (&record.val, record.val_thickness_mae) {
            (Some(m), _) => format!(
                "DI {:.4} AUSDE {}",
                m.dice,
                m.ausde_mean
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_else(|| "n/a".into())
            ),
            (None, Some(mae)) => format!("val MAE {mae:.3}"),
            _ => String::new(),
        };
        eprintln!(
            "  epoch {:>3}  lr {:.2e}  loss {:.4}  {val}  ({:.1}s)",
            record.epoch, record.lr, record.loss_total, record.wall_secs
        );
    }
}

fn write_logs_next_to(out: &Path, log: &TrainLog) -> Result<()> {
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("trainlog");
    let parent = out.parent().unwrap_or(Path::new("."));
    log.write_csv(&parent.join(format!("{stem}.trainlog.csv")))?;
    log.write_summary_json(&parent.join(format!("{stem}.trainlog.json")))?;
    Ok(())
}
