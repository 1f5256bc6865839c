use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use croze_core::benchmark::{load_benchmark, synth_benchmark, Planted};
use croze_core::eval::correlate;
use croze_core::scoring::{
    read_score_pairs, score_many, try_score_one, write_breakdowns, write_scores, ScoreSettings,
};
use croze_core::search::{hybrid_search, TruthSource};
use croze_core::space::{decode, enumerate_space, sample_uniform, SpaceKind};
use croze_core::{synthetic_batch, Batch, CellSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch_file::{decode_batch, encode_batch};
use crate::config::RunConfig;
use crate::output::{emit, io_error, read_file, sibling, write_atomic};
use crate::CliError;

#[derive(Parser, Debug)]
#[command(name = "croze", version, about = "Training-free robustness scoring for cell-based architectures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score one architecture and print its per-layer breakdown as JSON.
    Score(ScoreArgs),
    /// Score many architectures into a CSV table.
    Rank(RankArgs),
    /// Proxy-driven architecture search.
    Search(SearchArgs),
    /// Spearman correlation between scores and a benchmark table.
    Correlate(CorrelateArgs),
    /// Generate a synthetic batch file or benchmark table.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// List every architecture of a search space.
    Enumerate(EnumerateArgs),
}

/// Settings shared by scoring commands. Values are parsed by the config
/// layer so flags and config files accept the same syntax.
#[derive(Args, Debug, Default)]
struct Common {
    /// key = value file applied before any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    /// nb201 | darts-lite
    #[arg(long)]
    space: Option<String>,
    /// C,stages,cells,H,W,classes
    #[arg(long)]
    stack: Option<String>,
    /// croze | plain | grad_norm | synflow | naswot | num_params | flops
    #[arg(long)]
    proxy: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    epsilon: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    sigma: Option<String>,
    /// fgsm | gaussian
    #[arg(long)]
    perturb: Option<String>,
    /// Any non-empty subset of ZPG.
    #[arg(long)]
    components: Option<String>,
    /// Leave the linear head out of the layer sum.
    #[arg(long)]
    exclude_head: bool,
    /// min,max applied to perturbed inputs.
    #[arg(long, allow_hyphen_values = true)]
    clip: Option<String>,
    /// Global seed; falls back to CROZE_SEED, then 0.
    #[arg(long)]
    seed: Option<String>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<String>,
    /// Batch file to score on.
    #[arg(long, conflicts_with = "synthetic")]
    batch: Option<String>,
    /// Synthetic batch, e.g. "n=8 classes=10 seed=1".
    #[arg(long)]
    synthetic: Option<String>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    /// Architecture encoding.
    #[arg(long)]
    arch: String,
    /// Also write the JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["sample", "enumerate", "archs"])))]
struct RankArgs {
    #[command(flatten)]
    common: Common,
    /// Number of uniformly sampled architectures.
    #[arg(long)]
    sample: Option<usize>,
    /// Every architecture of the space (nb201 only).
    #[arg(long)]
    enumerate: bool,
    /// File with one encoding per line.
    #[arg(long)]
    archs: Option<PathBuf>,
    /// CSV destination (stdout if absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-layer breakdown JSON lines destination.
    #[arg(long)]
    breakdown: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    /// rand | ae
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    budget: Option<String>,
    /// pool_size,top_k
    #[arg(long)]
    warmup: Option<String>,
    /// radius,fan_out
    #[arg(long = "move")]
    moves: Option<String>,
    #[arg(long)]
    population: Option<String>,
    /// Aging-evolution tournament size.
    #[arg(long)]
    sample: Option<String>,
    /// Benchmark CSV for ground-truth tracking (never used for decisions).
    #[arg(long)]
    benchmark: Option<String>,
    /// Benchmark metric to track.
    #[arg(long)]
    metric: Option<String>,
    /// JSON-lines log destination (stdout if absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shortlist CSV destination; defaults to <out>.shortlist.csv.
    #[arg(long)]
    shortlist: Option<PathBuf>,
    /// Shortlist length.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args, Debug)]
struct CorrelateArgs {
    /// CSV with encoding and score columns.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    benchmark: PathBuf,
    /// Comma-separated metric names (default: every table column).
    #[arg(long)]
    metrics: Option<String>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Also write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum SynthCommand {
    /// Class-conditional Gaussian images.
    Batch(SynthBatchArgs),
    /// Accuracy table over NB201 with a planted quality landscape.
    Benchmark(SynthBenchmarkArgs),
}

#[derive(Args, Debug)]
struct SynthBatchArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// C,H,W
    #[arg(long, default_value = "3,16,16")]
    shape: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Landscape {
    Additive,
    Hamming,
}

#[derive(Args, Debug)]
struct SynthBenchmarkArgs {
    #[arg(long, value_enum, default_value = "additive")]
    landscape: Landscape,
    /// Target encoding for the hamming landscape (random if absent).
    #[arg(long)]
    target: Option<String>,
    /// Half-width of the uniform noise added to every metric.
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Write planted quality as an encoding,score CSV.
    #[arg(long)]
    planted: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EnumerateArgs {
    #[arg(long, default_value = "nb201")]
    space: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("CROZE_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("CROZE_SEED: bad value \"{v}\""))),
        Err(_) => Ok(None),
    }
}

fn resolve(common: &Common, extra: &[(&str, &Option<String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| io_error(path, e))?;
        cfg.apply_text(&text).map_err(|e| io_error(path, e))?;
    }
    let flags: [(&str, &Option<String>); 14] = [
        ("space", &common.space),
        ("stack", &common.stack),
        ("proxy", &common.proxy),
        ("beta", &common.beta),
        ("gamma", &common.gamma),
        ("epsilon", &common.epsilon),
        ("sigma", &common.sigma),
        ("perturb", &common.perturb),
        ("components", &common.components),
        ("clip", &common.clip),
        ("seed", &common.seed),
        ("jobs", &common.jobs),
        ("batch", &common.batch),
        ("synthetic", &common.synthetic),
    ];
    for (key, value) in flags.iter().chain(extra) {
        if let Some(v) = value {
            cfg.set(key, v).map_err(|e| CliError::Usage(format!("--{}", e)))?;
        }
    }
    // a batch flag replaces a synthetic spec from the file and vice versa
    if common.batch.is_some() {
        cfg.synthetic = None;
    }
    if common.synthetic.is_some() {
        cfg.batch = None;
    }
    if common.exclude_head {
        cfg.exclude_head = true;
    }
    if cfg.seed.is_none() {
        cfg.seed = Some(env_seed()?.unwrap_or(0));
    }
    if cfg.batch.is_some() && cfg.synthetic.is_some() {
        return Err(CliError::Usage("batch and synthetic are mutually exclusive".into()));
    }
    Ok(cfg)
}

fn load_batch(cfg: &RunConfig) -> Result<Option<Batch>, CliError> {
    let stack = &cfg.stack;
    let batch = if let Some(path) = &cfg.batch {
        let path = Path::new(path);
        let bytes = read_file(path)?;
        let b = decode_batch(&bytes).map_err(|e| io_error(path, e))?;
        let want = [stack.in_channels, stack.height, stack.width];
        if b.images().shape()[1..] != want {
            return Err(CliError::Input(format!(
                "{}: images are {:?} per sample but the stack expects {want:?}",
                path.display(),
                &b.images().shape()[1..]
            )));
        }
        Some(b)
    } else if let Some(spec) = cfg.synthetic {
        let classes = spec.classes.unwrap_or(stack.num_classes);
        if classes > stack.num_classes {
            return Err(CliError::Usage(format!(
                "synthetic classes {classes} exceed the network's {} outputs",
                stack.num_classes
            )));
        }
        let seed = spec.seed.unwrap_or(cfg.seed_or_default());
        Some(synthetic_batch(
            spec.n,
            [stack.in_channels, stack.height, stack.width],
            classes,
            seed,
        )?)
    } else {
        None
    };
    if batch.is_none() && cfg.proxy.needs_batch() {
        return Err(CliError::Usage(format!(
            "proxy {} needs --batch or --synthetic",
            cfg.proxy
        )));
    }
    Ok(batch)
}

fn settings(cfg: &RunConfig) -> Result<ScoreSettings, CliError> {
    let config = cfg.proxy_config();
    config.validate()?;
    cfg.stack.validate()?;
    Ok(ScoreSettings {
        proxy: cfg.proxy,
        config,
        stack: cfg.stack,
        jobs: cfg.jobs,
    })
}

fn json_line(value: &serde_json::Value) -> Result<String, CliError> {
    serde_json::to_string(value).map_err(|e| CliError::Compute(e.to_string()))
}

fn write_str(w: &mut dyn std::io::Write, s: &str) -> Result<(), CliError> {
    w.write_all(s.as_bytes())
        .map_err(|e| CliError::Input(format!("write: {e}")))
}

fn cmd_score(args: ScoreArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.common, &[])?;
    let settings = settings(&cfg)?;
    let batch = load_batch(&cfg)?;
    let row = try_score_one(&args.arch, &settings, batch.as_ref())?;
    let mut value = match &row.breakdown {
        Some(bd) => serde_json::to_value(bd).map_err(|e| CliError::Compute(e.to_string()))?,
        None => serde_json::json!({
            "encoding": row.encoding,
            "total": row.score,
            "M": row.num_layers,
            "seed": row.seed,
        }),
    };
    value["proxy"] = serde_json::Value::String(row.proxy.to_string());
    value["config"] = cfg.to_json();
    let text = json_line(&value)? + "\n";
    if let Some(out) = &args.out {
        write_atomic(out, |w| write_str(w, &text))?;
    }
    emit(None, |w| write_str(w, &text))
}

fn rank_encodings(args: &RankArgs, cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    if let Some(n) = args.sample {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_or_default());
        return Ok((0..n).map(|_| sample_uniform(cfg.space, &mut rng).encode()).collect());
    }
    if args.enumerate {
        return Ok(enumerate_checked(cfg.space)?.iter().map(CellSpec::encode).collect());
    }
    let path = args.archs.as_ref().expect("clap enforces one source");
    let text = String::from_utf8(read_file(path)?).map_err(|e| io_error(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn cmd_rank(args: RankArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.common, &[])?;
    let settings = settings(&cfg)?;
    let batch = load_batch(&cfg)?;
    let encodings = rank_encodings(&args, &cfg)?;

    let mut rows = Vec::with_capacity(encodings.len());
    for chunk in encodings.chunks(1000) {
        rows.extend(score_many(chunk, &settings, batch.as_ref())?);
        eprintln!("scored {}/{}", rows.len(), encodings.len());
    }
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        eprintln!("{failed} candidates failed");
    }

    emit(args.out.as_deref(), |w| Ok(write_scores(w, &rows)?))?;
    if let Some(path) = &args.breakdown {
        write_atomic(path, |w| Ok(write_breakdowns(w, &rows)?))?;
    }
    let config_text = cfg.to_text();
    match &args.out {
        Some(out) => write_atomic(&sibling(out, ".config"), |w| write_str(w, &config_text))?,
        None => eprint!("{config_text}"),
    }
    Ok(())
}

fn cmd_search(args: SearchArgs) -> Result<(), CliError> {
    let extra = [
        ("algo", &args.algo),
        ("budget", &args.budget),
        ("warmup", &args.warmup),
        ("move", &args.moves),
        ("population", &args.population),
        ("sample", &args.sample),
        ("benchmark", &args.benchmark),
        ("metric", &args.metric),
    ];
    let cfg = resolve(&args.common, &extra)?;
    let search = cfg.search_config(args.top);
    search.validate()?;
    let settings = settings(&cfg)?;
    let batch = load_batch(&cfg)?;
    let table = match &cfg.benchmark {
        Some(p) => Some(load_benchmark(Path::new(p), None).map_err(|e| prefix(p, e))?),
        None => None,
    };
    let truth = match &table {
        Some(t) => Some(TruthSource::new(t, &cfg.metric)?),
        None => None,
    };

    let proxy = |cell: &CellSpec| -> f64 {
        try_score_one(&cell.encode(), &settings, batch.as_ref())
            .ok()
            .and_then(|r| r.score)
            .unwrap_or(f64::NEG_INFINITY)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::Compute(e.to_string()))?;
    let log = pool.install(|| hybrid_search(&proxy, &search, truth))?;
    if let Some(note) = &log.truncated {
        eprintln!("note: {note}");
    }

    let header = serde_json::json!({ "config": cfg.to_json() });
    emit(args.out.as_deref(), |w| Ok(log.write_jsonl(w, Some(&header))?))?;
    let shortlist = args
        .shortlist
        .clone()
        .or_else(|| args.out.as_ref().map(|o| sibling(o, ".shortlist.csv")));
    if let Some(path) = shortlist {
        write_atomic(&path, |w| Ok(log.write_shortlist(w)?))?;
    }
    Ok(())
}

fn prefix(path: &str, e: croze_core::Error) -> CliError {
    match CliError::from(e) {
        CliError::Input(m) => CliError::Input(format!("{path}: {m}")),
        other => other,
    }
}

fn cmd_correlate(args: CorrelateArgs) -> Result<(), CliError> {
    let scores_bytes = read_file(&args.scores)?;
    let scores = read_score_pairs(&scores_bytes[..]).map_err(|e| prefix(&args.scores.display().to_string(), e))?;
    let table = load_benchmark(&args.benchmark, None)
        .map_err(|e| prefix(&args.benchmark.display().to_string(), e))?;
    let metrics: Vec<String> = match &args.metrics {
        Some(m) => m.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => table.metrics().to_vec(),
    };
    if metrics.is_empty() {
        return Err(CliError::Usage("no metrics to correlate".into()));
    }
    let report = correlate(&scores, &table, &metrics)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Compute(e.to_string()))? + "\n";
    if let Some(path) = &args.json {
        write_atomic(path, |w| write_str(w, &json))?;
    }
    match args.format {
        Format::Text => emit(None, |w| write_str(w, &report.to_text())),
        Format::Json => emit(None, |w| write_str(w, &json)),
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3], CliError> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| CliError::Usage(format!("--shape: bad entry \"{p}\""))))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(CliError::Usage("--shape expects C,H,W".into())),
    }
}

fn cmd_synth(cmd: SynthCommand) -> Result<(), CliError> {
    match cmd {
        SynthCommand::Batch(a) => {
            let seed = match a.seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            let batch = synthetic_batch(a.n, parse_shape(&a.shape)?, a.classes, seed)?;
            let bytes = encode_batch(&batch);
            write_atomic(&a.out, |w| w.write_all(&bytes).map_err(|e| io_error(&a.out, e)))
        }
        SynthCommand::Benchmark(a) => {
            let seed = match a.seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let planted = match a.landscape {
                Landscape::Additive => Planted::random_additive(&mut rng),
                Landscape::Hamming => {
                    let target = match &a.target {
                        Some(t) => decode(t).map_err(|e| CliError::Usage(format!("--target: {e}")))?,
                        None => sample_uniform(SpaceKind::Nb201, &mut rng),
                    };
                    if target.space() != SpaceKind::Nb201 {
                        return Err(CliError::Usage("--target must be an nb201 cell".into()));
                    }
                    Planted::Hamming { target }
                }
            };
            let table = synth_benchmark(SpaceKind::Nb201, &planted, a.noise, &mut rng)?;
            write_atomic(&a.out, |w| Ok(table.write_csv(w)?))?;
            if let Some(path) = &a.planted {
                write_atomic(path, |w| {
                    let mut csv = csv_writer(w);
                    csv.write_record(["encoding", "score"]).map_err(csv_err)?;
                    for (enc, _) in table.iter() {
                        let q = planted.quality(&decode(enc)?);
                        csv.write_record([enc.to_string(), q.to_string()]).map_err(csv_err)?;
                    }
                    csv.flush().map_err(|e| CliError::Input(e.to_string()))
                })?;
            }
            Ok(())
        }
    }
}

fn csv_writer(w: &mut dyn std::io::Write) -> csv::Writer<&mut dyn std::io::Write> {
    csv::Writer::from_writer(w)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Input(e.to_string())
}

/// Enumerating a space that cannot be enumerated is a flag error.
fn enumerate_checked(space: SpaceKind) -> Result<Vec<CellSpec>, CliError> {
    enumerate_space(space).map_err(|e| match e {
        croze_core::Error::Unsupported(m) => CliError::Usage(m),
        e => e.into(),
    })
}

fn cmd_enumerate(args: EnumerateArgs) -> Result<(), CliError> {
    let space: SpaceKind = args
        .space
        .parse()
        .map_err(|e: croze_core::Error| CliError::Usage(e.to_string()))?;
    let cells = enumerate_checked(space)?;
    let mut text = String::with_capacity(cells.len() * 64);
    for c in &cells {
        text.push_str(&c.encode());
        text.push('\n');
    }
    emit(args.out.as_deref(), |w| write_str(w, &text))
}

/// Parses `args` (program name first) and runs the selected command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::*;
            if matches!(e.kind(), DisplayHelp | DisplayVersion) {
                let _ = e.print();
                return Ok(());
            }
            return Err(CliError::Usage(e.render().to_string().trim_end().to_string()));
        }
    };
    match cli.command {
        Command::Score(a) => cmd_score(a),
        Command::Rank(a) => cmd_rank(a),
        Command::Search(a) => cmd_search(a),
        Command::Correlate(a) => cmd_correlate(a),
        Command::Synth(c) => cmd_synth(c),
        Command::Enumerate(a) => cmd_enumerate(a),
    }
}
