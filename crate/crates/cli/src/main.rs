//! Command-line front end: synthetic data generation, staged and joint
//! training, detection, and evaluation.
//!
//! Exit codes: 0 success, 1 partial or runtime failure, 2 usage errors
//! (bad flags, missing or unreadable input files), 3 training aborted
//! (divergence or missing pre-trained nets).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use cascadet::cascade::{detect, DetectConfig, DetectionResult};
use cascadet::dataset::{read_dataset, synth_dataset, write_dataset, SynthConfig};
use cascadet::eval::{evaluate, DetectionMetrics, SceneEval};
use cascadet::image::Image;
use cascadet::model::CascadeModel;
use cascadet::net::NetId;
use cascadet::sampler::{generate_proposals, AnnotatedImage, ClassCounts, Proposal};
use cascadet::trainer::{
    alternating_end_to_end, cls_accuracy, mine_pool, trace_csv, train_stage, Stage, TrainConfig,
};
use cascadet::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "cascadet", version, about = "Cascade face detector and landmark toolkit")]
struct Cli {
    /// Seed for every random number generator.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-image work.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Key = value settings file; explicit flags win over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic annotated dataset.
    Synth(SynthArgs),
    /// Train one net, or jointly fine-tune the whole cascade.
    Train(TrainArgs),
    /// Detect faces and landmarks in images, printing JSON per image.
    Detect(DetectArgs),
    /// Score a model against an annotated dataset.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for images plus annotations.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    faces_min: Option<usize>,
    #[arg(long)]
    faces_max: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Which part to train: 12net, 24net, 48net, or e2e.
    #[arg(long)]
    stage: Option<String>,
    /// Training annotations (JSONL) with images beside them.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Where the trained model is written.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Starting model; required for every stage after the first.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Validation annotations for an accuracy summary.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    keep_fraction: Option<f64>,
    /// Where the per-iteration loss trace CSV is written.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Joint fine-tuning also backpropagates the earlier nets' own heads.
    #[arg(long)]
    all_heads: bool,
    /// Per-image proposal budget per class.
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    positives: Option<usize>,
    #[arg(long)]
    part_faces: Option<usize>,
    #[arg(long)]
    landmark_faces: Option<usize>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Images to scan (PNG or binary PPM); repeatable.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Directory for annotated copies of the inputs.
    #[arg(long)]
    draw: Option<PathBuf>,
    /// Per-stage score thresholds, e.g. 0.6,0.6,0.7.
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    min_face: Option<f64>,
    #[arg(long)]
    scale_factor: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Annotated dataset (JSONL) to score against.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for metrics.csv, roc.csv, and summary.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    min_face: Option<f64>,
    #[arg(long)]
    scale_factor: Option<f64>,
}

/// Settings loaded from --config; lookups are typed and every key must
/// belong to the active subcommand's vocabulary.
struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)?;
            for (n, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "{}:{}: expected key = value",
                        path.display(),
                        n + 1
                    ))
                })?;
                let key = k.trim().to_string();
                if !allowed.contains(&key.as_str()) {
                    return Err(Error::Config(format!(
                        "{}:{}: unknown setting {key:?}",
                        path.display(),
                        n + 1
                    )));
                }
                map.insert(key, v.trim().to_string());
            }
        }
        Ok(Settings { map })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("setting {key}: {e}"))),
        }
    }
}

const SYNTH_KEYS: &[&str] = &[
    "seed", "jobs", "out", "count", "width", "height", "faces-min", "faces-max",
];
const TRAIN_KEYS: &[&str] = &[
    "seed",
    "jobs",
    "stage",
    "data",
    "out",
    "model",
    "val",
    "iterations",
    "learning-rate",
    "batch-size",
    "keep-fraction",
    "trace",
    "all-heads",
    "negatives",
    "positives",
    "part-faces",
    "landmark-faces",
];
const DETECT_KEYS: &[&str] = &[
    "seed", "jobs", "model", "draw", "thresholds", "min-face", "scale-factor",
];
const EVAL_KEYS: &[&str] = &[
    "seed", "jobs", "model", "data", "out", "thresholds", "min-face", "scale-factor",
];

fn pick<T>(flag: Option<T>, setting: Option<T>, default: T) -> T {
    flag.or(setting).unwrap_or(default)
}

fn need<T>(flag: Option<T>, setting: Option<T>, name: &str) -> Result<T> {
    flag.or(setting)
        .ok_or_else(|| Error::Config(format!("--{name} is required")))
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Config(_) | Error::Format(_) => 2,
        Error::Divergence(_) => 3,
        _ => 1,
    }
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("CASCADE_LOG", "error"),
    )
    .format_timestamp(None)
    .init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth(args) => run_synth(&cli, args),
        Command::Train(args) => run_train(&cli, args),
        Command::Detect(args) => run_detect(&cli, args),
        Command::Eval(args) => run_eval(&cli, args),
    }
}

fn run_synth(cli: &Cli, args: &SynthArgs) -> Result<i32> {
    let s = Settings::load(cli.config.as_deref(), SYNTH_KEYS)?;
    let out: PathBuf = need(args.out.clone(), s.get("out")?, "out")?;
    let cfg = SynthConfig {
        count: pick(args.count, s.get("count")?, 20),
        width: pick(args.width, s.get("width")?, 320),
        height: pick(args.height, s.get("height")?, 240),
        faces_min: pick(args.faces_min, s.get("faces-min")?, 0),
        faces_max: pick(args.faces_max, s.get("faces-max")?, 3),
        seed: pick(cli.seed, s.get("seed")?, 0),
    };
    let dataset = synth_dataset(&cfg)?;
    fs::create_dir_all(&out)?;
    let annotations = write_dataset(&out, &dataset)?;
    let faces: usize = dataset.iter().map(|d| d.faces.len()).sum();
    println!(
        "wrote {} images ({} faces) to {}; annotations at {}",
        dataset.len(),
        faces,
        out.display(),
        annotations.display()
    );
    Ok(0)
}

fn proposal_counts(args: &TrainArgs, s: &Settings) -> Result<ClassCounts> {
    Ok(ClassCounts {
        negatives: pick(args.negatives, s.get("negatives")?, 50),
        positives: pick(args.positives, s.get("positives")?, 15),
        part_faces: pick(args.part_faces, s.get("part-faces")?, 15),
        landmark_faces: pick(args.landmark_faces, s.get("landmark-faces")?, 15),
    })
}

fn generated_pool(
    corpus: &[AnnotatedImage],
    counts: &ClassCounts,
    patch_size: usize,
    seed: u64,
) -> Result<Vec<Proposal<f32>>> {
    let mut pool = Vec::new();
    for (id, scene) in corpus.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(id as u64));
        pool.extend(generate_proposals(id, scene, counts, patch_size, &mut rng)?);
    }
    Ok(pool)
}

fn write_trace(path: Option<&Path>, rows: &[cascadet::trainer::TraceRow]) -> Result<()> {
    if let Some(path) = path {
        fs::write(path, trace_csv(rows))?;
    }
    Ok(())
}

fn run_train(cli: &Cli, args: &TrainArgs) -> Result<i32> {
    let s = Settings::load(cli.config.as_deref(), TRAIN_KEYS)?;
    let stage = Stage::parse(&need::<String>(args.stage.clone(), s.get("stage")?, "stage")?)?;
    let data: PathBuf = need(args.data.clone(), s.get("data")?, "data")?;
    let out: PathBuf = need(args.out.clone(), s.get("out")?, "out")?;
    let model_path: Option<PathBuf> = args.model.clone().or(s.get("model")?);
    let val_path: Option<PathBuf> = args.val.clone().or(s.get("val")?);
    let trace_path: Option<PathBuf> = args.trace.clone().or(s.get("trace")?);
    let seed = pick(cli.seed, s.get("seed")?, 0);
    let cfg = TrainConfig {
        learning_rate: pick(args.learning_rate, s.get("learning-rate")?, 0.01),
        batch_size: pick(args.batch_size, s.get("batch-size")?, 64),
        keep_fraction: pick(args.keep_fraction, s.get("keep-fraction")?, 0.7),
        iterations: pick(args.iterations, s.get("iterations")?, 500),
        seed,
        stage,
        e2e_all_heads: args.all_heads || s.get("all-heads")?.unwrap_or(false),
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let counts = proposal_counts(args, &s)?;
    let corpus = read_dataset(&data)?;
    if corpus.is_empty() {
        return Err(Error::Config(format!("{} holds no scenes", data.display())));
    }
    let detect_cfg = DetectConfig::default();

    if stage != Stage::Net12 && model_path.is_none() {
        eprintln!(
            "error: stage {} fine-tunes earlier nets; pass a pre-trained model with --model",
            stage.as_str()
        );
        return Ok(3);
    }

    if stage == Stage::EndToEnd {
        let stagewise = CascadeModel::<f32>::load(model_path.as_deref().unwrap())?;
        if stagewise.bridged {
            return Err(Error::Config(
                "model is already jointly fine-tuned; start from a stage-wise model".into(),
            ));
        }
        let outcome = alternating_end_to_end(&stagewise, &corpus, &counts, &cfg, &detect_cfg)?;
        write_trace(trace_path.as_deref(), &outcome.trace)?;
        if let Some(why) = outcome.diverged {
            eprintln!("error: training diverged: {why}");
            return Ok(3);
        }
        outcome.model.save(&out)?;
        let last = outcome.trace.last().map(|r| r.hard_loss).unwrap_or(f64::NAN);
        println!(
            "stage e2e: {} iterations, final hard loss {:.6}",
            outcome.trace.len(),
            last
        );
        println!("wrote model to {}", out.display());
        return Ok(0);
    }

    let id = stage.net_id().expect("single-net stage");
    let mut model = match &model_path {
        Some(p) => CascadeModel::<f32>::load(p)?,
        None => CascadeModel::init(seed, false)?,
    };
    if model.bridged {
        return Err(Error::Config(
            "model is already jointly fine-tuned; its nets cannot be retrained stage-wise".into(),
        ));
    }
    let pool = if id == NetId::Net12 {
        generated_pool(&corpus, &counts, id.input_size(), seed)?
    } else {
        mine_pool(&model, id, &corpus, &counts, &detect_cfg, seed)?
    };
    info!("training pool holds {} proposals", pool.len());
    let spec = model.spec(id);
    let outcome = train_stage(&spec, model.params(id).clone(), &pool, &cfg, None)?;
    write_trace(trace_path.as_deref(), &outcome.trace)?;
    if let Some(why) = outcome.diverged {
        eprintln!("error: training diverged: {why}");
        return Ok(3);
    }
    let mut trained = outcome.params;
    trained.drop_grads();
    *model.params_mut(id) = trained;
    model.save(&out)?;
    let last = outcome.trace.last().map(|r| r.hard_loss).unwrap_or(f64::NAN);
    println!(
        "stage {}: {} iterations, final hard loss {:.6}",
        stage.as_str(),
        outcome.trace.len(),
        last
    );
    if let Some(val) = val_path {
        let val_corpus = read_dataset(&val)?;
        let val_pool = generated_pool(&val_corpus, &counts, id.input_size(), seed ^ 0x5eed)?;
        let acc = cls_accuracy(&spec, model.params(id), &val_pool)?;
        println!("validation accuracy {acc:.4}");
    }
    println!("wrote model to {}", out.display());
    Ok(0)
}

fn detect_config(
    thresholds: Option<&str>,
    min_face: Option<f64>,
    scale_factor: Option<f64>,
) -> Result<DetectConfig> {
    let mut cfg = DetectConfig::default();
    if let Some(spec) = thresholds {
        let parts: Vec<&str> = spec.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "--thresholds wants three comma-separated scores, got {spec:?}"
            )));
        }
        for (i, p) in parts.iter().enumerate() {
            let v: f64 = p
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("--thresholds: {e}")))?;
            if !v.is_finite() {
                return Err(Error::Config("--thresholds must be finite".into()));
            }
            cfg.thresholds[i] = v;
        }
    }
    if let Some(v) = min_face {
        cfg.min_face = v;
    }
    if let Some(v) = scale_factor {
        cfg.scale_factor = v;
    }
    Ok(cfg)
}

fn detection_json(image_path: &str, dets: &[DetectionResult]) -> String {
    let mut s = String::from("{\"image\":");
    s.push_str(&serde_json::to_string(image_path).expect("strings serialize"));
    s.push_str(",\"detections\":[");
    for (i, d) in dets.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(
            s,
            "{{\"box\":[{:.2},{:.2},{:.2},{:.2}],\"score\":{:.6},\"landmarks\":[",
            d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.score
        )
        .expect("string write");
        for k in 0..5 {
            if k > 0 {
                s.push(',');
            }
            write!(s, "[{:.2},{:.2}]", d.landmarks[2 * k], d.landmarks[2 * k + 1])
                .expect("string write");
        }
        s.push_str("]}");
    }
    s.push_str("]}");
    s
}

fn draw_detections(image: &Image, dets: &[DetectionResult]) -> Image {
    let mut copy = image.clone();
    for d in dets {
        copy.draw_box_outline(&d.bbox, [0, 255, 0]);
        for k in 0..5 {
            copy.draw_marker(d.landmarks[2 * k], d.landmarks[2 * k + 1], [255, 0, 0]);
        }
    }
    copy
}

struct PerImage {
    json: String,
    count: usize,
    millis: f64,
}

fn run_detect(cli: &Cli, args: &DetectArgs) -> Result<i32> {
    let s = Settings::load(cli.config.as_deref(), DETECT_KEYS)?;
    let model_path: PathBuf = need(args.model.clone(), s.get("model")?, "model")?;
    let model = CascadeModel::<f32>::load(&model_path)?;
    let thresholds: Option<String> = args.thresholds.clone().or(s.get("thresholds")?);
    let cfg = detect_config(
        thresholds.as_deref(),
        args.min_face.or(s.get("min-face")?),
        args.scale_factor.or(s.get("scale-factor")?),
    )?;
    let draw_dir: Option<PathBuf> = args.draw.clone().or(s.get("draw")?);
    if let Some(dir) = &draw_dir {
        fs::create_dir_all(dir)?;
    }
    let jobs = pick(cli.jobs, s.get("jobs")?, 1).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::State(format!("worker pool: {e}")))?;

    use rayon::prelude::*;
    let results: Vec<std::result::Result<PerImage, String>> = pool.install(|| {
        args.input
            .par_iter()
            .map(|path| {
                let started = Instant::now();
                let image = Image::load(path).map_err(|e| e.to_string())?;
                let dets = detect(&model, &image, &cfg).map_err(|e| e.to_string())?;
                if let Some(dir) = &draw_dir {
                    let stem = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "image".into());
                    draw_detections(&image, &dets)
                        .save(&dir.join(format!("{stem}.png")))
                        .map_err(|e| e.to_string())?;
                }
                Ok(PerImage {
                    json: detection_json(&path.to_string_lossy(), &dets),
                    count: dets.len(),
                    millis: started.elapsed().as_secs_f64() * 1e3,
                })
            })
            .collect()
    });

    let mut failures = 0usize;
    for (path, result) in args.input.iter().zip(results) {
        match result {
            Ok(r) => {
                println!("{}", r.json);
                eprintln!(
                    "{}: {} detection(s) in {:.1} ms",
                    path.display(),
                    r.count,
                    r.millis
                );
            }
            Err(msg) => {
                failures += 1;
                eprintln!("error: {}: {msg}", path.display());
            }
        }
    }
    Ok(if failures > 0 { 1 } else { 0 })
}

fn metrics_csv(m: &DetectionMetrics) -> String {
    let lme = m
        .mean_landmark_error
        .map(|v| format!("{v}"))
        .unwrap_or_default();
    format!(
        "total_truths,total_detections,true_positives,false_positives,false_negatives,recall,precision,mean_landmark_error\n{},{},{},{},{},{},{},{}\n",
        m.total_truths,
        m.total_detections,
        m.true_positives,
        m.false_positives,
        m.false_negatives,
        m.recall,
        m.precision,
        lme
    )
}

fn run_eval(cli: &Cli, args: &EvalArgs) -> Result<i32> {
    let s = Settings::load(cli.config.as_deref(), EVAL_KEYS)?;
    let model_path: PathBuf = need(args.model.clone(), s.get("model")?, "model")?;
    let data: PathBuf = need(args.data.clone(), s.get("data")?, "data")?;
    let model = CascadeModel::<f32>::load(&model_path)?;
    let thresholds: Option<String> = args.thresholds.clone().or(s.get("thresholds")?);
    let cfg = detect_config(
        thresholds.as_deref(),
        args.min_face.or(s.get("min-face")?),
        args.scale_factor.or(s.get("scale-factor")?),
    )?;
    let scenes = read_dataset(&data)?;
    if scenes.is_empty() {
        return Err(Error::Config(format!("{} holds no scenes", data.display())));
    }
    let jobs = pick(cli.jobs, s.get("jobs")?, 1).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::State(format!("worker pool: {e}")))?;

    use rayon::prelude::*;
    let all: Vec<Result<Vec<DetectionResult>>> = pool.install(|| {
        scenes
            .par_iter()
            .map(|scene| detect(&model, &scene.image, &cfg))
            .collect()
    });
    let mut per_scene = Vec::with_capacity(all.len());
    for dets in all {
        per_scene.push(dets?);
    }
    let evals: Vec<SceneEval> = scenes
        .iter()
        .zip(&per_scene)
        .map(|(truth, detections)| SceneEval {
            detections,
            truth,
        })
        .collect();
    let metrics = evaluate(&evals)?;
    print!("{}", metrics.summary());
    if let Some(dir) = args.out.clone().or(s.get("out")?) {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
        fs::write(dir.join("roc.csv"), metrics.roc_csv())?;
        fs::write(dir.join("summary.txt"), metrics.summary())?;
        info!("metrics written to {}", dir.display());
    }
    Ok(0)
}
