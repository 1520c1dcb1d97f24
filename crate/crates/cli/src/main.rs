//! `tlt`: synthetic data, registration, training, tracking and evaluation.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime failure. Failures also
//! print one JSON object on standard error.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use tlt_core::gradcheck::{self, Module};
use tlt_core::pipeline::{
    evaluate, evaluate_predictions, load_checkpoint, merge, read_predictions, track, train,
    write_eval_outputs, Ablation, EvalOptions, RegistrationCache, TrainConfig,
};
use tlt_core::registration::{register_affine, RegistrationOptions};
use tlt_core::synth::{gen_dataset, SynthConfig, MANIFEST_NAME};
use tlt_core::volume::{read_manifest, read_volume, Lesion, Vec3};

#[derive(Parser)]
#[command(name = "tlt", version, about = "Transformer lesion tracker")]
struct Cli {
    /// Run everything sequentially on one thread for bit-reproducible output.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of volume pairs and its manifest.
    GenSynth(GenSynth),
    /// Affinely register a template volume onto a search volume.
    Register(Register),
    /// Train a tracker on a dataset directory.
    Train(Train),
    /// Track one lesion and print the result as JSON.
    Track(Track),
    /// Evaluate a checkpoint (or a predictions file) on a dataset.
    Eval(Eval),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(Gradcheck),
    /// Render a report or track result as an SVG image.
    Plot(Plot),
}

#[derive(Args)]
struct GenSynth {
    /// Number of volume pairs; each yields two directed records.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Volume size: `D` or `D,H,W`.
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "synth")]
    out: PathBuf,
}

#[derive(Args)]
struct Register {
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    search: PathBuf,
    /// JSON file with registration settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output transform JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    /// JSON training configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory holding `manifest.jsonl`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `toy` or `full`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Token selection threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Registration cache directory (default `<data>/registration_cache`).
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct Track {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    search: PathBuf,
    /// Lesion center in the template, `x,y,z` mm.
    #[arg(long, allow_hyphen_values = true)]
    center: String,
    /// Lesion radius, `r` or `x,y,z` mm.
    #[arg(long)]
    radius: String,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct Eval {
    /// Checkpoint to evaluate; not needed with `--predictions`.
    #[arg(long, required_unless_present = "predictions")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output report JSON; a `.txt` table and `_pairs.csv` are written beside it.
    #[arg(long)]
    report: PathBuf,
    /// Disable one module: `sss`, `raam` or `globalreg`.
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Score these predictions (JSON lines of pair_id, direction, predicted)
    /// instead of running a model.
    #[arg(long, conflicts_with_all = ["ckpt", "ablate", "threshold"])]
    predictions: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    /// `backbone`, `attention`, `predictor` or `all`.
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the results as a JSON array.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct Plot {
    /// Metrics report JSON or track result JSON.
    #[arg(long)]
    report: PathBuf,
    /// Output `.svg` file.
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its exit code and machine-readable identifier.
struct Failure {
    code: &'static str,
    message: String,
    exit: u8,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Failure {
            code: "invalid-argument",
            message: message.into(),
            exit: 1,
        }
    }

    fn runtime(code: &'static str, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
            exit: 2,
        }
    }
}

impl From<tlt_core::Error> for Failure {
    fn from(e: tlt_core::Error) -> Self {
        Failure {
            code: e.code(),
            message: e.to_string(),
            exit: if e.is_validation() { 1 } else { 2 },
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::invalid(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn parse_vec3(s: &str, what: &str) -> CliResult<Vec3> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::invalid(format!("{what} must be numbers separated by commas, got {s:?}")))?;
    match parts[..] {
        [v] => Ok([v; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err(Failure::invalid(format!("{what} needs 1 or 3 values, got {}", parts.len()))),
    }
}

fn parse_dims(s: &str) -> CliResult<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::invalid(format!("dims must be integers separated by commas, got {s:?}")))?;
    match parts[..] {
        [d] => Ok([d; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(Failure::invalid(format!("dims need 1 or 3 values, got {}", parts.len()))),
    }
}

fn read_json(path: &Path) -> CliResult<Value> {
    if !path.exists() {
        return Err(tlt_core::Error::MissingFile(path.to_path_buf()).into());
    }
    let text = fs::read_to_string(path).map_err(|e| tlt_core::Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

/// Defaults of `T` overlaid with an optional config file and then `flags`.
fn layered<T: serde::Serialize + serde::de::DeserializeOwned + Default>(
    config: Option<&Path>,
    flags: Value,
) -> CliResult<T> {
    let mut base = serde_json::to_value(T::default())?;
    if let Some(p) = config {
        merge(&mut base, &read_json(p)?);
    }
    merge(&mut base, &flags);
    Ok(serde_json::from_value(base)?)
}

fn write_echo(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| tlt_core::Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| tlt_core::Error::io(path, e))?;
    Ok(())
}

fn print_json(value: &impl serde::Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn manifest_in(data: &Path) -> PathBuf {
    data.join(MANIFEST_NAME)
}

fn cache_for(data: &Path, explicit: Option<PathBuf>) -> RegistrationCache {
    RegistrationCache::new(Some(explicit.unwrap_or_else(|| data.join("registration_cache"))))
}

fn gen_synth(a: GenSynth) -> CliResult<()> {
    let mut flags = json!({});
    if let Some(d) = &a.dims {
        flags["dims"] = json!(parse_dims(d)?);
    }
    if let Some(s) = a.seed {
        flags["seed"] = json!(s);
    }
    let cfg: SynthConfig = layered(a.config.as_deref(), flags)?;
    if a.n == 0 {
        return Err(Failure::invalid("--n must be at least 1"));
    }
    let manifest = gen_dataset(&cfg, a.n, &a.out)?;
    let records = read_manifest(&manifest)?.len();
    log::info!("wrote {records} records to {}", manifest.display());
    print_json(&json!({"manifest": manifest, "records": records}))
}

fn register(a: Register) -> CliResult<()> {
    let opts: RegistrationOptions = layered(a.config.as_deref(), json!({}))?;
    let template = read_volume(&a.template)?;
    let search = read_volume(&a.search)?;
    let reg = register_affine(&template, &search, &opts)?;
    reg.transform.write_json(&a.out)?;
    log::info!("cost {:.6} -> {:.6}", reg.initial_cost, reg.final_cost);
    print_json(&json!({
        "transform": a.out,
        "initial_cost": reg.initial_cost,
        "final_cost": reg.final_cost,
        "level_costs": reg.level_costs,
    }))
}

fn train_cmd(a: Train, deterministic: bool) -> CliResult<()> {
    let mut overrides = match &a.config {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    let mut flags = json!({});
    if let Some(p) = &a.preset {
        flags["preset"] = json!(p);
    }
    if let Some(v) = a.epochs {
        flags["epochs"] = json!(v);
    }
    if let Some(v) = a.lr {
        flags["lr"] = json!(v);
    }
    if let Some(v) = a.batch_size {
        flags["batch_size"] = json!(v);
    }
    if let Some(v) = a.seed {
        flags["seed"] = json!(v);
    }
    if let Some(v) = a.threshold {
        flags["model"] = json!({"threshold": v});
    }
    if deterministic {
        flags["deterministic"] = json!(true);
    }
    merge(&mut overrides, &flags);
    let cfg = TrainConfig::from_json(&overrides)?;
    let cache = cache_for(&a.data, a.cache);
    let out = train(&cfg, &manifest_in(&a.data), &a.out, &cache)?;
    let last = out.epochs.last().expect("at least one epoch");
    print_json(&json!({
        "checkpoint": out.checkpoint,
        "epochs": out.epochs.len(),
        "loss": last.mean_loss,
        "loss_regression": last.mean_loss_regression,
        "loss_focal": last.mean_loss_focal,
        "skipped": out.skipped,
    }))
}

fn track_cmd(a: Track, deterministic: bool) -> CliResult<()> {
    let center = parse_vec3(&a.center, "--center")?;
    let radius = parse_vec3(&a.radius, "--radius")?;
    let lesion = Lesion::new(center, radius)?;
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let template = read_volume(&a.template)?;
    let search = read_volume(&a.search)?;
    let opts = EvalOptions {
        threshold: a.threshold,
        deterministic,
        ..EvalOptions::default()
    };
    let result = track(&model, &template, &lesion, &search, &opts)?;
    print_json(&result)
}

fn eval_cmd(a: Eval, deterministic: bool) -> CliResult<()> {
    let manifest = manifest_in(&a.data);
    let (outcome, echo) = match &a.predictions {
        Some(p) => {
            let records = read_manifest(&manifest)?;
            let outcome = evaluate_predictions(&records, &read_predictions(p)?)?;
            (outcome, json!({"data": a.data, "predictions": p}))
        }
        None => {
            let ckpt = a.ckpt.as_ref().expect("clap requires --ckpt without --predictions");
            let ablation = match &a.ablate {
                Some(name) => Ablation::without(name)?,
                None => Ablation::default(),
            };
            let (model, info) = load_checkpoint(ckpt)?;
            let opts = EvalOptions {
                threshold: a.threshold,
                ablation,
                deterministic,
            };
            let outcome = evaluate(&model, &manifest, &cache_for(&a.data, a.cache.clone()), &opts)?;
            let echo = json!({
                "data": a.data,
                "checkpoint": ckpt,
                "checkpoint_info": info,
                "ablation": ablation,
                "threshold": a.threshold.unwrap_or(model.config.threshold),
                "deterministic": deterministic,
            });
            (outcome, echo)
        }
    };
    write_eval_outputs(&a.report, &outcome)?;
    let stem = a.report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    write_echo(&a.report.with_file_name(format!("{stem}_config.json")), &echo)?;
    print!("{}", outcome.report.table());
    Ok(())
}

fn gradcheck_cmd(a: Gradcheck) -> CliResult<()> {
    let modules: Vec<Module> = if a.module == "all" {
        Module::ALL.to_vec()
    } else {
        vec![a.module.parse()?]
    };
    let mut checks = Vec::new();
    for m in modules {
        checks.extend(gradcheck::run(m, a.seed)?);
    }
    if a.json {
        print_json(&checks)?;
    } else {
        for c in &checks {
            println!(
                "{} {:<10} {:<40} entries {:>4}  max rel error {:.3e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.module,
                c.group,
                c.entries,
                c.max_rel_error
            );
        }
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::runtime(
            "gradient-mismatch",
            format!("{failed} of {} parameter groups exceed relative error {}", checks.len(), gradcheck::TOLERANCE),
        ));
    }
    Ok(())
}

fn plot_cmd(a: Plot) -> CliResult<()> {
    if a.out.extension().and_then(|e| e.to_str()) != Some("svg") {
        return Err(Failure::invalid("--out must end in .svg"));
    }
    let value = read_json(&a.report)?;
    let svg = plot::render(&value).map_err(Failure::invalid)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| tlt_core::Error::io(parent, e))?;
    }
    fs::write(&a.out, svg).map_err(|e| tlt_core::Error::io(&a.out, e))?;
    Ok(())
}

fn configure_threads(deterministic: bool) -> CliResult<()> {
    let requested = match std::env::var("TLT_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| Failure::invalid(format!("TLT_THREADS must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let threads = if deterministic { Some(1) } else { requested };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::runtime("threads", e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads(cli.deterministic)?;
    let det = cli.deterministic;
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Register(a) => register(a),
        Command::Train(a) => train_cmd(a, det),
        Command::Track(a) => track_cmd(a, det),
        Command::Eval(a) => eval_cmd(a, det),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn report(f: &Failure) -> ExitCode {
    eprintln!("{}", json!({"error": f.code, "message": f.message, "exit_code": f.exit}));
    ExitCode::from(f.exit)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(&Failure::invalid(e.render().to_string().trim_end())),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}
