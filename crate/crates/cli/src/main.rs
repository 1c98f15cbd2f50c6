use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use fraudgraph::checkpoint::{load_model, save_model};
use fraudgraph::data::{load_csv, save_csv, KeyKind, Split};
use fraudgraph::eval::{inductive_eval, EvalReport, RankKey, ReportMeta, DEFAULT_FRACTIONS};
use fraudgraph::gnn::Aggregator;
use fraudgraph::pipeline::{
    grid_configs, labeled_embeddings, prepare_dataset, run_grid, run_label, run_pipeline, sweep_inspection,
    write_cells_csv, Grid,
};
use fraudgraph::synth::{generate, SynthConfig};
use fraudgraph::train::{digest_json, ExperimentConfig, Variant};
use fraudgraph::eval::write_embeddings_csv;
use serde::Serialize;
use sha1::{Digest, Sha1};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

/// Name of the effective config written next to a checkpoint.
const RUN_CONFIG: &str = "config.toml";

#[derive(Parser)]
#[command(name = "fraudgraph", version, about = "Customs fraud detection with tree cross features and graph message passing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic transaction CSV.
    Synth(SynthArgs),
    /// Train a model and report on the test split.
    Train(TrainArgs),
    /// Score a dataset with a saved model.
    Eval(EvalArgs),
    /// Inspection-rate sweep, or the graph-variant grid with `--grid graphs`.
    Sweep(SweepArgs),
    /// Run the ablation variants.
    Ablate(AblateArgs),
    /// Write final-layer transaction embeddings with their labels as CSV.
    ExportEmbeddings(ExportArgs),
}

/// Config file plus command-line overrides shared by the training commands.
#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.hidden=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    aggregator: Option<Aggregator>,
    #[arg(long)]
    inspection_rate: Option<f64>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML synth config; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_transactions: Option<usize>,
    #[arg(long)]
    base_illicit_rate: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Inspection budgets in percent.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 5.0, 10.0, 20.0])]
    at: Vec<f64>,
    #[arg(long)]
    ranking_key: Option<RankKey>,
    /// Restrict to test transactions whose key never appears in labeled train.
    #[arg(long)]
    unseen: Option<KeyKind>,
    /// Split config; the one saved with the checkpoint when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Inspection rates for the sweep.
    #[arg(long, value_delimiter = ',')]
    rates: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    /// Run a named grid instead of the rate sweep.
    #[arg(long)]
    grid: Option<Grid>,
    /// List the runs without executing them.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Export at most this many transactions.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

// --- failures ---------------------------------------------------------------

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

fn data_error(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_DATA, message: message.into() }
}

impl From<fraudgraph::Error> for Failure {
    fn from(e: fraudgraph::Error) -> Self {
        let code = if e.is_data_error() { EXIT_DATA } else { EXIT_USAGE };
        Failure { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, Failure>;

// --- manifest -----------------------------------------------------------

#[derive(Serialize)]
struct InputHash {
    path: String,
    /// Git blob hash of the file contents.
    git_sha1: String,
}

#[derive(Serialize)]
struct RunManifest<C: Serialize> {
    command: String,
    version: &'static str,
    config_digest: String,
    seed: u64,
    config: C,
    inputs: Vec<InputHash>,
    outputs: Vec<String>,
    started_unix: u64,
    finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn hash_inputs(paths: &[&Path]) -> CliResult<Vec<InputHash>> {
    let mut out = Vec::new();
    for p in paths {
        let mut files = Vec::new();
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| data_error(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file())
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.to_path_buf());
        }
        for f in files {
            let bytes = fs::read(&f).map_err(|e| data_error(format!("{}: {e}", f.display())))?;
            out.push(InputHash { path: f.display().to_string(), git_sha1: git_blob_hash(&bytes) });
        }
    }
    Ok(out)
}

struct Manifest {
    command: String,
    started: u64,
}

impl Manifest {
    fn start(command: &str) -> Self {
        Self { command: command.to_string(), started: unix_now() }
    }

    fn write<C: Serialize>(
        self,
        path: &Path,
        config: C,
        seed: u64,
        inputs: &[&Path],
        outputs: Vec<PathBuf>,
    ) -> CliResult<()> {
        let m = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            config_digest: digest_json(&config),
            seed,
            config,
            inputs: hash_inputs(inputs)?,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| Failure { code: EXIT_INTERNAL, message: e.to_string() })?;
        write_file(path, text.as_bytes())
    }
}

// --- config handling ------------------------------------------------------

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| data_error(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| data_error(format!("{}: {e}", path.display())))
}

fn create_file(path: &Path) -> CliResult<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| data_error(format!("{}: {e}", parent.display())))?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(|e| data_error(format!("{}: {e}", path.display())))
}

fn read_table(path: Option<&Path>) -> CliResult<toml::Table> {
    match path {
        None => Ok(toml::Table::new()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("config {}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| usage(format!("config {}: {e}", p.display())))
        }
    }
}

/// Parses the right-hand side of `--set` as a TOML value, falling back to a
/// bare string.
/// TOML literal when `raw` parses as one, else a plain string. Dates stay
/// strings since configs store them that way.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>().ok().and_then(|mut t| t.remove("v")) {
        Some(toml::Value::Datetime(_)) | None => toml::Value::String(raw.to_string()),
        Some(v) => v,
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("bad config key `{key}`")));
    }
    let mut at = table;
    for p in &parts[..parts.len() - 1] {
        let entry = at.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        at = entry.as_table_mut().ok_or_else(|| usage(format!("`{p}` in `{key}` is not a table")))?;
    }
    at.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn apply_sets(table: &mut toml::Table, sets: &[String]) -> CliResult<()> {
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("`--set {s}`: expected KEY=VALUE")))?;
        set_path(table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

fn experiment_config(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let mut table = read_table(args.config.as_deref())?;
    apply_sets(&mut table, &args.sets)?;
    let text = toml::to_string(&table).map_err(|e| usage(e.to_string()))?;
    let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| usage(format!("config: {e}")))?;
    let t = &mut cfg.train;
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.variant {
        t.variant = v;
    }
    if let Some(v) = args.aggregator {
        t.aggregator = v;
    }
    if let Some(v) = args.pretrain_epochs {
        t.pretrain_epochs = v;
    }
    if let Some(v) = args.finetune_epochs {
        t.finetune_epochs = v;
    }
    if let Some(v) = args.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.hidden {
        t.hidden = v;
    }
    if let Some(v) = args.inspection_rate {
        cfg.data.inspection_rate = v;
    }
    // round-trip through the validating loader
    Ok(ExperimentConfig::from_toml(&cfg.to_toml()?)?)
}

fn synth_config(args: &SynthArgs) -> CliResult<SynthConfig> {
    let mut table = read_table(args.config.as_deref())?;
    apply_sets(&mut table, &args.sets)?;
    if let Some(v) = args.seed {
        table.insert("seed".into(), toml::Value::Integer(v as i64));
    }
    if let Some(v) = args.n_transactions {
        table.insert("n_transactions".into(), toml::Value::Integer(v as i64));
    }
    if let Some(v) = args.base_illicit_rate {
        table.insert("base_illicit_rate".into(), toml::Value::Float(v));
    }
    let defaults = toml::Table::try_from(SynthConfig::default()).map_err(|e| usage(e.to_string()))?;
    for (k, v) in defaults {
        table.entry(k).or_insert(v);
    }
    let text = toml::to_string(&table).map_err(|e| usage(e.to_string()))?;
    let cfg: SynthConfig = toml::from_str(&text).map_err(|e| usage(format!("synth config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path) -> CliResult<fraudgraph::data::Dataset> {
    if !path.is_file() {
        return Err(usage(format!("data file {} does not exist", path.display())));
    }
    Ok(load_csv(path)?)
}

/// Split config stored with a checkpoint, or given explicitly.
fn split_config(checkpoint: &Path, explicit: Option<&Path>) -> CliResult<ExperimentConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint.join(RUN_CONFIG),
    };
    if !path.is_file() {
        return Err(usage(format!("no split config at {}", path.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(ExperimentConfig::from_toml(&text)?)
}

fn require_checkpoint(dir: &Path) -> CliResult<()> {
    if !dir.is_dir() {
        return Err(usage(format!("checkpoint directory {} does not exist", dir.display())));
    }
    Ok(())
}

// --- commands -------------------------------------------------------------

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let m = Manifest::start("synth");
    let cfg = synth_config(&args)?;
    let d = generate(&cfg)?;
    save_csv(&d, &args.out)?;
    let manifest = args.out.with_extension("manifest.json");
    let inputs: Vec<&Path> = args.config.iter().map(|p| p.as_path()).collect();
    m.write(&manifest, &cfg, cfg.seed, &inputs, vec![args.out.clone()])?;
    log::info!("wrote {} transactions to {}", d.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let m = Manifest::start("train");
    let exp = experiment_config(&args.cfg)?;
    let raw = load_data(&args.data)?;
    let d = prepare_dataset(&raw, &exp.data, exp.train.seed)?;
    let out = run_pipeline(&exp.train, &d, &exp.digest())?;
    let dir = &args.out_dir;
    let mut outputs = save_model(&out.model, dir)?;

    let cfg_path = dir.join(RUN_CONFIG);
    write_file(&cfg_path, exp.to_toml()?.as_bytes())?;
    outputs.push(cfg_path);

    let curves = dir.join("curves.csv");
    let mut w = csv::Writer::from_writer(create_file(&curves)?);
    let io = |e: csv::Error| data_error(format!("{}: {e}", curves.display()));
    w.write_record(["stage", "epoch", "loss", "valid_recall"]).map_err(io)?;
    for c in &out.curves {
        w.write_record([
            c.stage.clone(),
            c.epoch.to_string(),
            c.loss.to_string(),
            c.valid_recall.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| data_error(e.to_string()))?;
    outputs.push(curves.clone());

    let report = dir.join("report.json");
    write_file(&report, out.report.to_json()?.as_bytes())?;
    outputs.push(report);

    #[derive(Serialize)]
    struct TrainRecord<'a> {
        label: String,
        #[serde(flatten)]
        experiment: &'a ExperimentConfig,
    }
    let rec = TrainRecord { label: run_label(&exp.train), experiment: &exp };
    m.write(&dir.join("manifest.json"), &rec, exp.train.seed, &[args.data.as_path()], outputs)?;
    if let Some(at5) = out.report.at(0.05) {
        println!("{}: test Pre@5% {:.4} Rec@5% {:.4} Rev@5% {:.4}", run_label(&exp.train), at5.precision, at5.recall, at5.revenue);
    }
    Ok(())
}

fn fractions_from_percents(at: &[f64]) -> CliResult<Vec<f64>> {
    if at.is_empty() {
        return Ok(DEFAULT_FRACTIONS.to_vec());
    }
    at.iter()
        .map(|&p| {
            if p > 0.0 && p <= 100.0 {
                Ok(p / 100.0)
            } else {
                Err(usage(format!("inspection budget {p}% outside (0,100]")))
            }
        })
        .collect()
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let m = Manifest::start("eval");
    let fractions = fractions_from_percents(&args.at)?;
    require_checkpoint(&args.checkpoint)?;
    let exp = split_config(&args.checkpoint, args.config.as_deref())?;
    let raw = load_data(&args.data)?;
    let model = load_model(&args.checkpoint)?;
    let d = prepare_dataset(&raw, &exp.data, model.config.seed)?;
    let scored = model.score_split(&d, Split::Test)?;
    let meta = ReportMeta {
        variant: run_label(&model.config),
        seed: model.config.seed,
        config_digest: exp.digest(),
        ranking_key: args.ranking_key.unwrap_or(model.config.ranking_key),
    };
    let report = match args.unseen {
        Some(key) => inductive_eval(&d, &scored, key, &meta, &fractions)?,
        None => EvalReport::new(&meta, &scored, &fractions)?,
    };
    write_file(&args.out, report.to_json()?.as_bytes())?;

    #[derive(Serialize)]
    struct EvalRecord<'a> {
        fractions: &'a [f64],
        ranking_key: RankKey,
        unseen: Option<KeyKind>,
        experiment: &'a ExperimentConfig,
    }
    let rec = EvalRecord { fractions: &fractions, ranking_key: meta.ranking_key, unseen: args.unseen, experiment: &exp };
    m.write(
        &args.out.with_extension("manifest.json"),
        &rec,
        model.config.seed,
        &[args.data.as_path(), args.checkpoint.as_path()],
        vec![args.out.clone()],
    )?;
    for r in &report.metrics {
        println!("{:>5.1}%: Pre {:.4} Rec {:.4} Rev {:.4}", r.fraction * 100.0, r.precision, r.recall, r.revenue);
    }
    Ok(())
}

fn write_cells(out_dir: &Path, cells: &[fraudgraph::pipeline::SweepCell]) -> CliResult<PathBuf> {
    let path = out_dir.join("cells.csv");
    write_cells_csv(cells, create_file(&path)?)?;
    let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
    if failed > 0 {
        log::warn!("{failed} of {} cells failed", cells.len());
    }
    Ok(path)
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let m = Manifest::start("sweep");
    let exp = experiment_config(&args.cfg)?;
    if args.seeds.is_empty() {
        return Err(usage("sweep needs at least one seed"));
    }
    let planned: Vec<String> = match args.grid {
        Some(grid) => grid_configs(&exp.train, grid).iter().map(run_label).collect(),
        None => {
            if args.rates.is_empty() {
                return Err(usage("sweep needs --rates or --grid"));
            }
            args.rates.iter().map(|r| format!("rate={r}")).collect()
        }
    };
    if planned.is_empty() {
        return Err(usage("grid is empty"));
    }
    if args.dry_run {
        for label in &planned {
            for s in &args.seeds {
                println!("{label} seed={s}");
            }
        }
        return Ok(());
    }
    let raw = load_data(&args.data)?;
    let cells = match args.grid {
        Some(grid) => run_grid(&exp.data, &grid_configs(&exp.train, grid), &raw, &args.seeds)?,
        None => sweep_inspection(&exp, &raw, &args.rates, &args.seeds)?,
    };
    let out = write_cells(&args.out_dir, &cells)?;

    #[derive(Serialize)]
    struct SweepRecord<'a> {
        grid: Option<Grid>,
        rates: &'a [f64],
        seeds: &'a [u64],
        experiment: &'a ExperimentConfig,
    }
    let rec = SweepRecord { grid: args.grid, rates: &args.rates, seeds: &args.seeds, experiment: &exp };
    m.write(&args.out_dir.join("manifest.json"), &rec, exp.train.seed, &[args.data.as_path()], vec![out])
}

fn cmd_ablate(args: AblateArgs) -> CliResult<()> {
    let m = Manifest::start("ablate");
    let exp = experiment_config(&args.cfg)?;
    if args.seeds.is_empty() {
        return Err(usage("ablate needs at least one seed"));
    }
    let configs = grid_configs(&exp.train, Grid::Ablations);
    if args.dry_run {
        for c in &configs {
            for s in &args.seeds {
                println!("{} seed={s}", run_label(c));
            }
        }
        return Ok(());
    }
    let raw = load_data(&args.data)?;
    let cells = run_grid(&exp.data, &configs, &raw, &args.seeds)?;
    let out = write_cells(&args.out_dir, &cells)?;

    #[derive(Serialize)]
    struct AblateRecord<'a> {
        variants: Vec<&'static str>,
        seeds: &'a [u64],
        experiment: &'a ExperimentConfig,
    }
    let rec = AblateRecord { variants: Variant::ALL.iter().map(|v| v.name()).collect(), seeds: &args.seeds, experiment: &exp };
    m.write(&args.out_dir.join("manifest.json"), &rec, exp.train.seed, &[args.data.as_path()], vec![out])
}

fn cmd_export(args: ExportArgs) -> CliResult<()> {
    let m = Manifest::start("export-embeddings");
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "valid" => Split::Valid,
        "test" => Split::Test,
        other => return Err(usage(format!("unknown split `{other}` (train, valid or test)"))),
    };
    require_checkpoint(&args.checkpoint)?;
    let exp = split_config(&args.checkpoint, args.config.as_deref())?;
    let raw = load_data(&args.data)?;
    let model = load_model(&args.checkpoint)?;
    let d = prepare_dataset(&raw, &exp.data, model.config.seed)?;
    let g = model.inference_graph(&d)?;
    let mut records = d.indices_in(split);
    if let Some(n) = args.limit {
        records.truncate(n);
    }
    let rows = labeled_embeddings(&model, &g, &d, &records)?;
    write_embeddings_csv(&rows, create_file(&args.out)?)?;

    #[derive(Serialize)]
    struct ExportRecord<'a> {
        split: &'a str,
        limit: Option<usize>,
        experiment: &'a ExperimentConfig,
    }
    let rec = ExportRecord { split: &args.split, limit: args.limit, experiment: &exp };
    m.write(
        &args.out.with_extension("manifest.json"),
        &rec,
        model.config.seed,
        &[args.data.as_path(), args.checkpoint.as_path()],
        vec![args.out.clone()],
    )?;
    println!("wrote {} embeddings to {}", rows.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::ExportEmbeddings(a) => cmd_export(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
        Err(_) => {
            eprintln!("error: internal invariant violated");
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}
