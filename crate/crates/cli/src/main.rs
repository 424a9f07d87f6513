use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use calibseg::distlambda::{boundary_distance, lambda_map, LambdaParams};
use calibseg::losses::loss_landscape;
use calibseg::metrics::{self, render_table, MetricsReport};
use calibseg::model::WeightSet;
use calibseg::synthdata::{make_dataset, prepare_output_dir, Dataset, SceneSpec, SplitCounts};
use calibseg::tensor::io as tnsr;
use calibseg::trainer::{self, Method, TrainConfig};
use calibseg::transforms::Range;
use calibseg::{rng, Error, LabelMap};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

/// Consistency-regularized segmentation training and calibration evaluation.
#[derive(Parser, Debug)]
#[command(name = "calibseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic segmentation dataset.
    Synth(SynthArgs),
    /// Train a U-Net with one of the supported objectives.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the generator's soft labels) on a dataset split.
    Eval(EvalArgs),
    /// Compute the boundary distance and consistency weight maps of a label map.
    LambdaMap(LambdaMapArgs),
    /// Tabulate the binary single-pixel loss landscape.
    Landscape(LandscapeArgs),
    /// Aggregate metrics of several runs and test pairs of methods.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 20)]
    n_val: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    /// TOML scene description; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Image side length in pixels [default: 64].
    #[arg(long)]
    size: Option<usize>,
    /// Boundary blur sigma in pixels [default: 2].
    #[arg(long)]
    blur_sigma: Option<f64>,
    /// Image noise sigma [default: 0.05].
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Annotator jitter amplitude in pixels [default: 2].
    #[arg(long)]
    jitter: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML training configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// baseline, da, cr, bwcr, svls or mls [default: bwcr].
    #[arg(long)]
    method: Option<Method>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 2000]
    #[arg(long)]
    iterations: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate [default: 1e-4].
    #[arg(long)]
    lr_start: Option<f64>,
    /// Final learning rate [default: 1e-7].
    #[arg(long)]
    lr_end: Option<f64>,
    /// Consistency weight for cr, typically one of 0, 0.01, 0.1, 1, 10 [default: 1].
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight far from boundaries for bwcr [default: 0.01].
    #[arg(long)]
    lambda_min: Option<f64>,
    /// Extra weight at the boundary for bwcr [default: 1.0].
    #[arg(long)]
    lambda_max: Option<f64>,
    /// Boundary band width in pixels for bwcr [default: 10].
    #[arg(long)]
    radius: Option<f64>,
    /// Use a constant weight map instead of the distance-based one (bwcr).
    #[arg(long)]
    lambda_constant: Option<f64>,
    /// SVLS kernel sigma; the kernel is 3×3 [default: 1.0].
    #[arg(long)]
    svls_sigma: Option<f64>,
    /// MLS margin [default: 10].
    #[arg(long)]
    mls_margin: Option<f64>,
    /// MLS penalty weight [default: 0.1].
    #[arg(long)]
    mls_weight: Option<f64>,
    /// U-Net width of the first level [default: 16].
    #[arg(long)]
    base_width: Option<usize>,
    /// Validation interval in iterations [default: 100].
    #[arg(long)]
    validation_interval: Option<usize>,
    /// Skip evaluating the selected checkpoint on the test split.
    #[arg(long)]
    no_eval: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Score the generator's latent soft labels instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Method name recorded in the metrics file.
    #[arg(long)]
    label: Option<String>,
    /// Seed recorded in the metrics file.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct LambdaMapArgs {
    /// Label map as a TNSR file of class indices (H×W).
    #[arg(long, required_unless_present = "data")]
    label: Option<PathBuf>,
    /// Number of classes including background, for --label.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Take the label map from a dataset instead.
    #[arg(long, conflicts_with = "label")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 0.01)]
    lambda_min: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_max: f64,
    #[arg(long, default_value_t = 10.0)]
    radius: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct LandscapeArgs {
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long = "zmin", default_value_t = -5.0, allow_hyphen_values = true)]
    z_min: f64,
    #[arg(long = "zmax", default_value_t = 5.0, allow_hyphen_values = true)]
    z_max: f64,
    /// Grid points per axis.
    #[arg(long, default_value_t = 201)]
    n: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories (each holding a metrics.csv).
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Method pairs to test, as `a:b`.
    #[arg(long)]
    pair: Vec<String>,
    /// Sign-flip resamples per test.
    #[arg(long, default_value_t = metrics::DEFAULT_RESAMPLES)]
    resamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

/// Failure after argument parsing: bad input data or an I/O problem.
struct Failure(String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = calibseg::configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::LambdaMap(a) => lambda_cmd(a),
        Command::Landscape(a) => landscape(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn write_provenance(dir: &Path, command: &str, seed: u64, config_hash: &str, extra: &[(&str, String)]) -> Outcome {
    let mut text = format!(
        "command={command}\nversion={}\nseed={seed}\nconfig_hash={config_hash}\nargv={}\n",
        env!("CARGO_PKG_VERSION"),
        std::env::args().collect::<Vec<_>>().join(" ")
    );
    for (k, v) in extra {
        text.push_str(&format!("{k}={v}\n"));
    }
    fs::write(dir.join("provenance.txt"), text)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Outcome {
    let mut spec = match &a.config {
        Some(p) => SceneSpec::from_toml(&fs::read_to_string(p)?).map_err(|e| Failure(format!("{}: {e}", p.display())))?,
        None => SceneSpec::default(),
    };
    if let Some(s) = a.size {
        spec.height = s;
        spec.width = s;
    }
    if let Some(v) = a.blur_sigma {
        spec.blur_sigma = Range::point(v);
    }
    if let Some(v) = a.noise_sigma {
        spec.noise_sigma = Range::point(v);
    }
    if let Some(v) = a.jitter {
        spec.jitter = v;
    }
    spec.validate()?;
    println!("seed = {}", a.seed);
    println!("{}", spec.to_toml());
    let counts = SplitCounts { train: a.n_train, val: a.n_val, test: a.n_test };
    make_dataset(&a.out.out, a.seed, counts, &spec, a.out.force)?;
    let hash = spec.hash();
    write_provenance(&a.out.out, "synth", a.seed, &hash, &[])?;
    println!("wrote {} samples to {}", a.n_train + a.n_val + a.n_test, a.out.out.display());
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident).+ <- $flag:ident) => {
            if let Some(v) = a.$flag.clone() {
                c.$($field).+ = v;
            }
        };
    }
    set!(method <- method);
    set!(data <- data);
    set!(seed <- seed);
    set!(iterations <- iterations);
    set!(batch_size <- batch_size);
    set!(lr_start <- lr_start);
    set!(lr_end <- lr_end);
    set!(lambda <- lambda);
    set!(lambda_map.lambda_min <- lambda_min);
    set!(lambda_map.lambda_max <- lambda_max);
    set!(lambda_map.radius <- radius);
    set!(svls_sigma <- svls_sigma);
    set!(mls_margin <- mls_margin);
    set!(mls_weight <- mls_weight);
    set!(model.base_width <- base_width);
    set!(validation_interval <- validation_interval);
    if a.lambda_constant.is_some() {
        c.lambda_constant = a.lambda_constant;
    }
    c.validate()?;
    Ok(c)
}

fn train(a: TrainArgs) -> Outcome {
    let config = resolve_train_config(&a)?;
    let dataset = Dataset::open(&config.data)?;
    if dataset.spec.num_classes() != config.model.num_classes {
        return Err(Failure(format!(
            "dataset has {} classes but the model is configured for {}",
            dataset.spec.num_classes(),
            config.model.num_classes
        )));
    }
    let out = &a.out.out;
    prepare_output_dir(out, a.out.force, &OWNED_RUN_FILES)?;
    let text = config.to_toml();
    println!("seed = {}", config.seed);
    println!("{text}");
    fs::write(out.join("config.toml"), &text)?;
    let outcome = trainer::train(&config)?;
    outcome.best.save(out.join("checkpoint.ckpt"))?;
    outcome.final_ema.save(out.join("final_ema.ckpt"))?;
    outcome.log.write_iterations(BufWriter::new(fs::File::create(out.join("train_log.csv"))?))?;
    outcome.log.write_validations(BufWriter::new(fs::File::create(out.join("val_log.csv"))?))?;
    let best = outcome.log.best.expect("training validates at least once");
    let mut extra = vec![("method", config.method.to_string()), ("best_iter", best.iter.to_string())];
    if !a.no_eval {
        let mut report = trainer::evaluate(&outcome.best, &dataset, "test")?;
        report.method = config.method.to_string();
        report.seed = config.seed;
        report.config_hash = config.hash();
        write_metrics(out, &report)?;
        extra.push(("eval_split", "test".into()));
    }
    write_provenance(out, "train", config.seed, &config.hash(), &extra)?;
    println!("best validation dice {:.4} at iteration {}", best.dice, best.iter);
    Ok(())
}

const OWNED_RUN_FILES: [&str; 8] = [
    "config.toml",
    "checkpoint.ckpt",
    "final_ema.ckpt",
    "train_log.csv",
    "val_log.csv",
    "metrics.csv",
    "summary.txt",
    "provenance.txt",
];

fn write_metrics(dir: &Path, report: &MetricsReport) -> Outcome {
    report.write_csv(BufWriter::new(fs::File::create(dir.join("metrics.csv"))?))?;
    let table = render_table(&[(report.method.clone(), report.aggregate())]);
    fs::write(dir.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let dataset = Dataset::open(&a.data)?;
    prepare_output_dir(&a.out.out, a.out.force, &["metrics.csv", "summary.txt", "provenance.txt"])?;
    println!("seed = {}", a.seed);
    let (mut report, hash) = match &a.checkpoint {
        Some(path) => {
            let weights = WeightSet::load(path)?;
            (trainer::evaluate(&weights, &dataset, &a.split)?, file_hash(path)?)
        }
        None => (trainer::evaluate_soft_oracle(&dataset.load_split(&a.split)?)?, dataset.spec.hash()),
    };
    report.method = a.label.clone().unwrap_or_else(|| if a.oracle { "oracle".into() } else { "model".into() });
    report.seed = a.seed;
    report.config_hash = hash.clone();
    write_metrics(&a.out.out, &report)?;
    write_provenance(&a.out.out, "eval", a.seed, &hash, &[("split", a.split.clone())])
}

fn file_hash(path: &Path) -> Result<String, Failure> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(hex::encode(&digest[..8]))
}

fn to_pgm(path: &Path, h: usize, w: usize, values: &[f64], max: f64) -> Outcome {
    let pixels: Vec<u8> = values
        .iter()
        .map(|&v| if v.is_finite() { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 255 })
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches size");
    img.save_with_format(path, image::ImageFormat::Pnm).map_err(|e| Failure(e.to_string()))
}

fn lambda_cmd(a: LambdaMapArgs) -> Outcome {
    let labels = match (&a.label, &a.data) {
        (Some(p), _) => LabelMap::from_tensor(&tnsr::load(p)?, a.classes)?,
        (None, Some(d)) => Dataset::open(d)?.load_sample(&a.split, a.index)?.hard_label,
        (None, None) => unreachable!("clap requires one source"),
    };
    let params = LambdaParams { lambda_min: a.lambda_min, lambda_max: a.lambda_max, radius: a.radius };
    params.validate()?;
    prepare_output_dir(&a.out.out, a.out.force, &["distance.tnsr", "lambda.tnsr", "label.pgm", "lambda.pgm", "provenance.txt"])?;
    let r = boundary_distance(&labels);
    let l = lambda_map(&r, &params)?;
    let dir = &a.out.out;
    tnsr::save(dir.join("distance.tnsr"), &r.to_tensor())?;
    tnsr::save(dir.join("lambda.tnsr"), &l.to_tensor())?;
    let (h, w) = (labels.height(), labels.width());
    let classes: Vec<f64> = labels.data().iter().map(|&v| v as f64).collect();
    to_pgm(&dir.join("label.pgm"), h, w, &classes, (labels.num_classes() - 1) as f64)?;
    to_pgm(&dir.join("lambda.pgm"), h, w, &l.data, params.lambda_min + params.lambda_max)?;
    let hash = format!("lambda_min={},lambda_max={},radius={}", a.lambda_min, a.lambda_max, a.radius);
    write_provenance(dir, "lambda-map", 0, &hash, &[])?;
    let near = l.data.iter().filter(|&&v| v > params.lambda_min).count();
    println!("{h}×{w} map, {near} pixels inside the boundary band");
    Ok(())
}

fn landscape(a: LandscapeArgs) -> Outcome {
    let l = loss_landscape(a.z_min, a.z_max, a.n, a.lambda)?;
    prepare_output_dir(
        &a.out.out,
        a.out.force,
        &["landscape.csv", "landscape_ls.tnsr", "landscape_lc.tnsr", "landscape_total.tnsr", "landscape_total.pgm", "provenance.txt"],
    )?;
    let dir = &a.out.out;
    l.write_csv(BufWriter::new(fs::File::create(dir.join("landscape.csv"))?))?;
    let [ls, lc, total] = l.tensors();
    tnsr::save(dir.join("landscape_ls.tnsr"), &ls)?;
    tnsr::save(dir.join("landscape_lc.tnsr"), &lc)?;
    tnsr::save(dir.join("landscape_total.tnsr"), &total)?;
    let max = l.total.iter().cloned().fold(0.0, f64::max);
    to_pgm(&dir.join("landscape_total.pgm"), a.n, a.n, &l.total, max)?;
    let (i, k) = l.argmin_total();
    let hash = format!("lambda={},z=[{},{}],n={}", a.lambda, a.z_min, a.z_max, a.n);
    write_provenance(dir, "landscape", 0, &hash, &[])?;
    println!("minimum of the total loss at z = {}, z' = {}", l.z[i], l.z[k]);
    Ok(())
}

fn report(a: ReportArgs) -> Outcome {
    let mut by_method: BTreeMap<String, Vec<MetricsReport>> = BTreeMap::new();
    for run in &a.runs {
        let path = if run.is_dir() { run.join("metrics.csv") } else { run.clone() };
        let file = fs::File::open(&path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
        let r = MetricsReport::read_csv(BufReader::new(file))?;
        by_method.entry(r.method.clone()).or_default().push(r);
    }
    let mut pairs = Vec::new();
    for p in &a.pair {
        let (x, y) = p
            .split_once(':')
            .ok_or_else(|| Failure(format!("pair `{p}` is not of the form a:b")))?;
        for m in [x, y] {
            if !by_method.contains_key(m) {
                return Err(Failure(format!("no run with method `{m}` among the given runs")));
            }
        }
        pairs.push((x.to_string(), y.to_string()));
    }
    prepare_output_dir(&a.out.out, a.out.force, &["table.txt", "aggregate.csv", "pvalues.csv", "provenance.txt"])?;
    let groups: Vec<(String, metrics::Aggregate)> = by_method
        .iter()
        .map(|(m, reports)| (m.clone(), metrics::aggregate(reports.iter().flat_map(|r| r.rows.iter()))))
        .collect();
    let table = render_table(&groups);
    print!("{table}");
    fs::write(a.out.out.join("table.txt"), &table)?;
    let mut csv = String::from("method,images,dice_mean,dice_std,ece_mean,ece_std,tace_mean,tace_std,tace_x10_mean\n");
    for (m, g) in &groups {
        csv.push_str(&format!(
            "{m},{},{},{},{},{},{},{},{}\n",
            g.images, g.dice.mean, g.dice.std, g.ece.mean, g.ece.std, g.tace.mean, g.tace.std, 10.0 * g.tace.mean
        ));
    }
    fs::write(a.out.out.join("aggregate.csv"), csv)?;

    let mut pv = String::from("a,b,metric,pairs,mean_a,mean_b,p_value\n");
    let mut r = rng::stream(a.seed, &[0x9e57]);
    for (x, y) in &pairs {
        let (va, vb) = paired_rows(&by_method[x], &by_method[y]);
        if va.is_empty() {
            return Err(Failure(format!("runs of `{x}` and `{y}` share no (seed, image) pairs")));
        }
        for (metric, pick) in [("dice", 0usize), ("ece", 1), ("tace", 2)] {
            let xa: Vec<f64> = va.iter().map(|v| v[pick]).collect();
            let xb: Vec<f64> = vb.iter().map(|v| v[pick]).collect();
            let p = metrics::paired_permutation_test(&xa, &xb, a.resamples, &mut r)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            pv.push_str(&format!("{x},{y},{metric},{},{},{},{p}\n", xa.len(), mean(&xa), mean(&xb)));
            println!("{x} vs {y} {metric}: p = {p:.5} over {} pairs", xa.len());
        }
    }
    fs::write(a.out.out.join("pvalues.csv"), pv)?;
    write_provenance(&a.out.out, "report", a.seed, "-", &[("runs", a.runs.len().to_string())])
}

/// Rows of two methods matched by (seed, image), as `[dice, ece, tace]`.
fn paired_rows(a: &[MetricsReport], b: &[MetricsReport]) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let key = |r: &MetricsReport| -> BTreeMap<(u64, String), [f64; 3]> {
        r.rows.iter().map(|m| ((r.seed, m.image.clone()), [m.mean_dice(), m.ece, m.tace])).collect()
    };
    let ma: BTreeMap<_, _> = a.iter().flat_map(key).collect();
    let mb: BTreeMap<_, _> = b.iter().flat_map(key).collect();
    ma.iter().filter_map(|(k, va)| mb.get(k).map(|vb| (*va, *vb))).unzip()
}
