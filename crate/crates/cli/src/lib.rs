//! `vigil` command-line interface. [`run`] takes the argument list and
//! output streams so it can be driven from tests.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use vigil_core::cnn::{evaluate, fit_with, AdamConfig, Architecture, CnnModel, EpochStats, TrainConfig};
use vigil_core::dataset::{list_images, load_dataset, read_image, split, Image, LabeledDataset};
use vigil_core::haar::{detect, train_cascade, CascadeConfig, IntegralImage, ScanConfig};
use vigil_core::model_io::{load_cascade_file, load_cnn_file, save_cascade_file, save_cnn_file};
use vigil_core::pipeline::{classify, two_stage_detect, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "vigil", version, about = "Haar-cascade region proposal and CNN classification")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the CNN classifier on a directory-per-class dataset.
    TrainCnn(TrainCnnArgs),
    /// Train a Haar cascade from positive crops and negative images.
    TrainCascade(TrainCascadeArgs),
    /// Classify whole images with a CNN model.
    Classify(ClassifyArgs),
    /// Detect regions with a cascade, optionally labelling them with a CNN.
    Detect(DetectArgs),
    /// Report accuracy and the confusion matrix of a CNN on a dataset.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct TrainCnnArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// `auto` takes the class count from the dataset; a number must match it.
    #[arg(long, default_value = "auto")]
    classes: String,
    /// Stratified fraction held out and reported as `test_acc`.
    #[arg(long, default_value_t = 0.0)]
    test_fraction: f64,
    /// Square input side the images are resized to.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Output channels of each conv block, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32, 64, 128])]
    conv: Vec<usize>,
    /// Hidden dense widths, comma separated (`none` for no hidden layer).
    #[arg(long, default_value = "128,64")]
    dense: String,
    #[arg(long, default_value_t = 0.25)]
    dropout: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct TrainCascadeArgs {
    #[arg(long)]
    pos: PathBuf,
    #[arg(long)]
    neg: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    stages: usize,
    #[arg(long, default_value_t = 0.995)]
    dmin: f64,
    #[arg(long, default_value_t = 0.5)]
    fmax: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Stop once the whole cascade's false-positive rate is this low.
    #[arg(long, default_value_t = 1e-3)]
    target_fpr: f64,
    #[arg(long, default_value_t = 1000)]
    negatives: usize,
    #[arg(long, default_value_t = 24)]
    window: usize,
    #[arg(long, default_value_t = 200)]
    max_rounds: usize,
    #[arg(long)]
    feature_fraction: Option<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// Image files or directories of images.
    #[arg(required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    cascade: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// TOML file with the same keys as the flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scale_factor: Option<f64>,
    #[arg(long)]
    min_side: Option<usize>,
    #[arg(long)]
    min_neighbors: Option<usize>,
    #[arg(long)]
    group_iou: Option<f64>,
    #[arg(long)]
    min_prob: Option<f32>,
    /// Image files or directories of images.
    #[arg(required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    json: bool,
}

/// Detect settings read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectFile {
    cascade: Option<PathBuf>,
    model: Option<PathBuf>,
    scale_factor: Option<f64>,
    min_side: Option<usize>,
    min_neighbors: Option<usize>,
    group_iou: Option<f64>,
    min_prob: Option<f32>,
}

enum CliError {
    Usage(String),
    Data(String),
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

type CliResult = Result<(), CliError>;

/// Runs the CLI; returns 0 on success, 1 on a usage error and 2 on a data
/// or model error.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::TrainCnn(a) => train_cnn(a, out),
        Command::TrainCascade(a) => train_cascade_cmd(a, out),
        Command::Classify(a) => classify_cmd(a, out),
        Command::Detect(a) => detect_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
        Err(CliError::Data(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult {
    out.write_all(text.as_bytes()).map_err(data)
}

fn emit_json<T: Serialize>(out: &mut dyn Write, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(data)?;
    emit(out, &format!("{text}\n"))
}

fn parse_widths(text: &str) -> Result<Vec<usize>, CliError> {
    if text == "none" || text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|t| t.trim().parse().map_err(|_| CliError::Usage(format!("bad width {t:?} in --dense"))))
        .collect()
}

#[derive(Serialize)]
struct EpochRecord {
    epoch: usize,
    loss: f64,
    acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_acc: Option<f64>,
}

fn epoch_line(s: &EpochStats) -> String {
    let mut line = format!("epoch={} loss={:.6} acc={:.6}", s.epoch, s.loss, s.accuracy);
    if let Some(t) = s.test_accuracy {
        line.push_str(&format!(" test_acc={t:.6}"));
    }
    line
}

fn train_cnn(a: TrainCnnArgs, out: &mut dyn Write) -> CliResult {
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(CliError::Usage(format!("--test-fraction {} outside [0, 1)", a.test_fraction)));
    }
    if a.size == 0 || a.epochs == 0 || a.batch == 0 {
        return Err(CliError::Usage("--size, --epochs and --batch must be positive".into()));
    }
    let expected = match a.classes.as_str() {
        "auto" => None,
        n => Some(
            n.parse::<usize>()
                .map_err(|_| CliError::Usage(format!("--classes must be `auto` or a number, got {n:?}")))?,
        ),
    };
    let dataset = load_dataset(&a.data, a.size).map_err(data)?;
    if let Some(k) = expected {
        if k != dataset.class_names.len() {
            return Err(CliError::Data(format!(
                "--classes {k} but {} has {} class directories",
                a.data.display(),
                dataset.class_names.len()
            )));
        }
    }
    let (train, test) = split(&dataset, a.test_fraction, a.seed).map_err(data)?;
    let arch = Architecture {
        conv_channels: a.conv.clone(),
        kernel: 3,
        dropout: a.dropout,
        dense_widths: parse_widths(&a.dense)?,
    };
    let k = dataset.class_names.len();
    let mut model = CnnModel::new(arch.layer_specs(k), [3, a.size, a.size], dataset.class_names.clone(), a.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        seed: a.seed,
    };
    let test = (!test.is_empty()).then_some(&test);
    let mut records = Vec::new();
    let mut io_error = None;
    fit_with(&mut model, &train, test, &config, |s| {
        if a.json {
            records.push(EpochRecord {
                epoch: s.epoch,
                loss: s.loss,
                acc: s.accuracy,
                test_acc: s.test_accuracy,
            });
        } else if let Err(e) = writeln!(out, "{}", epoch_line(s)).and_then(|_| out.flush()) {
            io_error.get_or_insert(e);
        }
    })
    .map_err(data)?;
    if let Some(e) = io_error {
        return Err(data(e));
    }
    save_cnn_file(&model, &a.out).map_err(data)?;
    if a.json {
        emit_json(out, &records)?;
    }
    Ok(())
}

fn gray_images(dir: &Path) -> Result<Vec<(PathBuf, Image)>, CliError> {
    let files = list_images(dir).map_err(data)?;
    if files.is_empty() {
        return Err(CliError::Data(format!("{} contains no images", dir.display())));
    }
    files
        .into_par_iter()
        .map(|f| read_image(&f).map(|img| (f, img.to_grayscale())).map_err(data))
        .collect()
}

#[derive(Serialize)]
struct StageRecord {
    stage: usize,
    features: usize,
    detection: f64,
    fpr: f64,
    negatives: usize,
    reached: bool,
}

fn train_cascade_cmd(a: TrainCascadeArgs, out: &mut dyn Write) -> CliResult {
    if a.stages == 0 {
        return Err(CliError::Usage("--stages must be at least 1".into()));
    }
    let w = a.window;
    let positives: Vec<IntegralImage> = gray_images(&a.pos)?
        .into_iter()
        .map(|(_, img)| {
            let img = img.resize_bilinear(w, w).map_err(data)?;
            IntegralImage::from_image(&img).map_err(data)
        })
        .collect::<Result<_, _>>()?;
    let negatives: Vec<IntegralImage> = gray_images(&a.neg)?
        .into_iter()
        .map(|(path, img)| {
            if img.width() < w || img.height() < w {
                return Err(CliError::Data(format!("{}: smaller than the {w}px window", path.display())));
            }
            IntegralImage::from_image(&img).map_err(data)
        })
        .collect::<Result<_, _>>()?;
    let config = CascadeConfig {
        window: w,
        d_min: a.dmin,
        f_max: a.fmax,
        target_fpr: a.target_fpr,
        max_stages: a.stages,
        max_rounds: a.max_rounds,
        negatives_per_stage: a.negatives,
        feature_fraction: a.feature_fraction,
        seed: a.seed,
    };
    let cascade = train_cascade(&positives, &negatives, &config).map_err(data)?;
    save_cascade_file(&cascade, &a.out).map_err(data)?;
    let records: Vec<StageRecord> = cascade
        .stages
        .iter()
        .zip(&cascade.reports)
        .enumerate()
        .map(|(i, (s, r))| StageRecord {
            stage: i + 1,
            features: s.classifiers.len(),
            detection: r.detection_rate,
            fpr: r.false_positive_rate,
            negatives: r.negatives,
            reached: r.reached_targets,
        })
        .collect();
    if a.json {
        return emit_json(out, &records);
    }
    let mut text = String::new();
    for r in &records {
        text.push_str(&format!(
            "stage={} features={} detection={:.6} fpr={:.6} negatives={}{}\n",
            r.stage,
            r.features,
            r.detection,
            r.fpr,
            r.negatives,
            if r.reached { "" } else { " warning=targets-not-met" }
        ));
    }
    if let Some(f) = cascade.achieved_fpr {
        text.push_str(&format!("achieved_fpr={f:.6}\n"));
    }
    emit(out, &text)
}

/// Expands directories into their sorted image files; files pass through.
fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(list_images(p).map_err(data)?);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

#[derive(Serialize)]
struct ClassRecord {
    path: String,
    class: String,
    probability: f32,
}

fn classify_cmd(a: ClassifyArgs, out: &mut dyn Write) -> CliResult {
    let model = load_cnn_file(&a.model).map_err(data)?;
    let files = expand_inputs(&a.images)?;
    let records: Vec<ClassRecord> = files
        .par_iter()
        .map(|f| {
            let img = read_image(f).map_err(data)?;
            let ranked = classify(&model, &img).map_err(data)?;
            Ok(ClassRecord {
                path: f.display().to_string(),
                class: ranked[0].0.clone(),
                probability: ranked[0].1,
            })
        })
        .collect::<Result<_, CliError>>()?;
    if a.json {
        return emit_json(out, &records);
    }
    let text: String = records
        .iter()
        .map(|r| format!("{} {} {:.6}\n", r.path, r.class, r.probability))
        .collect();
    emit(out, &text)
}

#[derive(Serialize)]
struct DetectRecord {
    path: String,
    x: usize,
    y: usize,
    side: usize,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    class: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    probability: Option<f32>,
}

fn detect_cmd(a: DetectArgs, out: &mut dyn Write) -> CliResult {
    let file: DetectFile = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => DetectFile::default(),
    };
    let cascade_path = a
        .cascade
        .or(file.cascade)
        .ok_or_else(|| CliError::Usage("detect needs --cascade (or `cascade` in --config)".into()))?;
    let model_path = a.model.or(file.model);
    let defaults = ScanConfig::default();
    let config = PipelineConfig {
        scan: ScanConfig {
            scale_factor: a.scale_factor.or(file.scale_factor).unwrap_or(defaults.scale_factor),
            min_side: a.min_side.or(file.min_side).unwrap_or(defaults.min_side),
            min_neighbors: a.min_neighbors.or(file.min_neighbors).unwrap_or(defaults.min_neighbors),
            group_iou: a.group_iou.or(file.group_iou).unwrap_or(defaults.group_iou),
        },
        min_probability: a.min_prob.or(file.min_prob).unwrap_or(PipelineConfig::default().min_probability),
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if !(config.scan.scale_factor > 1.0) {
        return Err(CliError::Usage("--scale-factor must exceed 1".into()));
    }

    let cascade = load_cascade_file(&cascade_path).map_err(data)?;
    if cascade.stages.is_empty() {
        return Err(CliError::Data(format!("{}: cascade has no stages", cascade_path.display())));
    }
    let model = model_path.map(|p| load_cnn_file(&p)).transpose().map_err(data)?;
    let files = expand_inputs(&a.images)?;
    let per_image: Vec<Vec<DetectRecord>> = files
        .par_iter()
        .map(|f| {
            let img = read_image(f).map_err(data)?;
            let path = f.display().to_string();
            let records = match &model {
                Some(cnn) => two_stage_detect(&img, &cascade, cnn, &config)
                    .map_err(data)?
                    .into_iter()
                    .map(|d| DetectRecord {
                        path: path.clone(),
                        x: d.x,
                        y: d.y,
                        side: d.side,
                        score: d.cascade_score,
                        class: Some(d.class_name),
                        probability: Some(d.probability),
                    })
                    .collect(),
                None => {
                    let ii = IntegralImage::from_image(&img).map_err(data)?;
                    detect(&cascade, &ii, &config.scan)
                        .map_err(data)?
                        .into_iter()
                        .map(|d| DetectRecord {
                            path: path.clone(),
                            x: d.x,
                            y: d.y,
                            side: d.side,
                            score: d.score,
                            class: None,
                            probability: None,
                        })
                        .collect()
                }
            };
            Ok(records)
        })
        .collect::<Result<_, CliError>>()?;
    let records: Vec<DetectRecord> = per_image.into_iter().flatten().collect();
    if a.json {
        return emit_json(out, &records);
    }
    let text: String = records
        .iter()
        .map(|r| match (&r.class, r.probability) {
            (Some(c), Some(p)) => format!("{} {} {} {} {} {:.6}\n", r.path, r.x, r.y, r.side, c, p),
            _ => format!("{} {} {} {}\n", r.path, r.x, r.y, r.side),
        })
        .collect();
    emit(out, &text)
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    accuracy: f64,
    loss: f64,
    class_names: &'a [String],
    confusion: &'a [Vec<usize>],
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let model = load_cnn_file(&a.model).map_err(data)?;
    let [_, h, w] = model.input_shape();
    if h != w {
        return Err(CliError::Data("model input is not square".into()));
    }
    let dataset: LabeledDataset = load_dataset(&a.data, h).map_err(data)?;
    if dataset.class_names != model.class_names() {
        return Err(CliError::Data(format!(
            "dataset classes {:?} do not match the model's {:?}",
            dataset.class_names,
            model.class_names()
        )));
    }
    let ev = evaluate(&model, &dataset).map_err(data)?;
    if a.json {
        return emit_json(
            out,
            &EvalRecord {
                accuracy: ev.accuracy,
                loss: ev.loss,
                class_names: &dataset.class_names,
                confusion: &ev.confusion,
            },
        );
    }
    let mut text = format!("accuracy={:.6}\n", ev.accuracy);
    text.push_str(&format!("confusion (rows true, columns predicted): {}\n", dataset.class_names.join(" ")));
    for (name, row) in dataset.class_names.iter().zip(&ev.confusion) {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        text.push_str(&format!("{name} {}\n", cells.join(" ")));
    }
    emit(out, &text)
}
