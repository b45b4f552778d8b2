//! Command-line front end: data generation, graph building, training,
//! embedding export, evaluation, ablations and hyperparameter sweeps.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{dataset_digest, generate_synthetic_city, load_dataset, write_dataset, SynthSpec, UrbanDataset};
use crate::eval::{cross_validate, emit_report, markdown_table, split_evaluate, MetricsReport, TaskMetrics};
use crate::fusion::{read_embeddings_csv, write_channel_bundle, write_embeddings_csv};
use crate::graph::{load_graphs, save_graphs, GraphBundle};
use crate::objectives::write_train_log;
use crate::trainer::{
    build_graphs, embed_dataset, load_checkpoint, save_checkpoint, train, TrainConfig, ABLATION_VARIANTS,
};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const SEED_ENV: &str = "MTGRR_SEED";

#[derive(Parser, Debug)]
#[command(name = "mtgrr", version, about = "Multimodal urban region representation learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic city dataset.
    GenData(GenDataArgs),
    /// Build modality subgraphs, the heterogeneous graph and positional embeddings.
    BuildGraphs(BuildGraphsArgs),
    /// Train a model and export embeddings.
    Train(TrainArgs),
    /// Export embeddings from a checkpoint.
    Embed(EmbedArgs),
    /// Cross-validated Ridge evaluation of an embeddings file.
    Evaluate(EvaluateArgs),
    /// Train the full model and each ablation variant and compare them.
    Ablate(AblateArgs),
    /// Train and evaluate across values of one hyperparameter.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON config file, or `default`.
    #[arg(long, default_value = "default")]
    pub config: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub d_hid: Option<usize>,
    #[arg(long)]
    pub edge_top_k: Option<usize>,
    /// Any config key, as `key=value` (value parsed as JSON, else string).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// JSON synthetic-city spec, or `default`.
    #[arg(long, default_value = "default")]
    pub spec: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct BuildGraphsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Prebuilt graphs; rebuilt from the data when omitted.
    #[arg(long)]
    pub graphs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// `full` or one ablation variant.
    #[arg(long, default_value = "full")]
    pub variant: String,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    /// Checkpoint directory (or its checkpoint.json).
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub graphs: Option<PathBuf>,
    /// Output embeddings CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Use a single 60/20/20 split instead of k-fold.
    #[arg(long)]
    pub split: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training log to copy into losses.csv.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub graphs: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "no_moe,no_dlgnn,no_sv,no_samf,no_l_sv,no_l_f")]
    pub variants: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Number of consecutive seeds to average over.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Dataset directory; a default synthetic city is generated when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: Option<String>,
    pub config: serde_json::Value,
    pub dataset_hash: Option<String>,
    pub seed: Option<u64>,
    pub artifacts: Vec<String>,
    pub started_at: u64,
    pub finished_at: u64,
}

type CliResult<T> = Result<T, String>;

fn err<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> String + '_ {
    move |e| format!("{context}: {e}")
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).map_err(|e| format!("{SEED_ENV}={s}: {e}")),
        Err(_) => Ok(None),
    }
}

fn parse_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

/// Config file (or defaults), then `MTGRR_SEED` if the file sets no seed, then flags.
pub fn resolve_config(args: &ConfigArgs) -> CliResult<TrainConfig> {
    let mut value = if args.config == "default" {
        serde_json::json!({})
    } else {
        let text = fs::read_to_string(&args.config).map_err(err(&args.config))?;
        serde_json::from_str::<serde_json::Value>(&text).map_err(err(&args.config))?
    };
    let obj = value.as_object_mut().ok_or_else(|| format!("{}: config must be a JSON object", args.config))?;
    if !obj.contains_key("seed") {
        if let Some(seed) = env_seed()? {
            obj.insert("seed".into(), seed.into());
        }
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got {kv}"))?;
        obj.insert(k.to_string(), parse_value(v));
    }
    let mut cfg: TrainConfig = serde_json::from_value(value).map_err(err("config"))?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(d) = args.d_hid {
        cfg.d_hid = d;
    }
    if let Some(k) = args.edge_top_k {
        cfg.edge_top_k = k;
    }
    cfg.resolved().map_err(|e| e.to_string())
}

fn load_data(dir: &Path) -> CliResult<(UrbanDataset, String)> {
    let ds = load_dataset(dir).map_err(err(&dir.display().to_string()))?;
    let hash = dataset_digest(dir).map_err(err(&dir.display().to_string()))?;
    Ok((ds, hash))
}

fn graphs_for(ds: &UrbanDataset, dir: Option<&Path>, cfg: &TrainConfig) -> CliResult<GraphBundle> {
    match dir {
        Some(d) => load_graphs(d, ds).map_err(err(&d.display().to_string())),
        None => build_graphs(ds, cfg).map_err(|e| e.to_string()),
    }
}

struct ManifestWriter {
    command: &'static str,
    args: Vec<String>,
    started_at: u64,
}

impl ManifestWriter {
    fn write(
        &self,
        out_dir: &Path,
        config: Option<&TrainConfig>,
        extra: serde_json::Value,
        dataset_hash: Option<String>,
        seed: Option<u64>,
        artifacts: &[&str],
    ) -> CliResult<()> {
        let config_value = match config {
            Some(c) => {
                let mut v = serde_json::to_value(c).expect("config serializes");
                if let (Some(o), Some(e)) = (v.as_object_mut(), extra.as_object()) {
                    o.extend(e.clone());
                }
                v
            }
            None => extra,
        };
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: self.args.clone(),
            config_hash: config.map(|c| c.hash()),
            config: config_value,
            dataset_hash,
            seed,
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
            started_at: self.started_at,
            finished_at: now(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(out_dir.join(MANIFEST_FILE), text).map_err(err(MANIFEST_FILE))
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(err(&dir.display().to_string()))
}

fn gen_data(a: &GenDataArgs, m: &ManifestWriter) -> CliResult<()> {
    let mut spec = if a.spec == "default" {
        SynthSpec::grid(5, 5, 0)
    } else {
        let text = fs::read_to_string(&a.spec).map_err(err(&a.spec))?;
        serde_json::from_str(&text).map_err(err(&a.spec))?
    };
    if let Some(seed) = a.seed.map_or_else(env_seed, |s| Ok(Some(s)))? {
        spec.seed = seed;
    }
    let city = generate_synthetic_city(&spec).map_err(|e| e.to_string())?;
    write_dataset(&city.dataset, &a.out).map_err(|e| e.to_string())?;
    let hash = dataset_digest(&a.out).map_err(|e| e.to_string())?;
    m.write(
        &a.out,
        None,
        serde_json::to_value(&spec).expect("spec serializes"),
        Some(hash),
        Some(spec.seed),
        &["regions.jsonl", "adjacency.csv", "streetview.jsonl", "targets.csv", "manifest.json"],
    )
}

fn build_graphs_cmd(a: &BuildGraphsArgs, m: &ManifestWriter) -> CliResult<()> {
    let cfg = resolve_config(&a.cfg)?;
    let (ds, hash) = load_data(&a.data)?;
    let graphs = build_graphs(&ds, &cfg).map_err(|e| e.to_string())?;
    save_graphs(&graphs, &a.out).map_err(|e| e.to_string())?;
    m.write(&a.out, Some(&cfg), serde_json::json!({}), Some(hash), Some(cfg.seed), &["*.json", "positional.csv"])
}

fn train_cmd(a: &TrainArgs, m: &ManifestWriter) -> CliResult<()> {
    let cfg = resolve_config(&a.cfg)?.with_variant(&a.variant).map_err(|e| e.to_string())?;
    let (ds, hash) = load_data(&a.data)?;
    let graphs = graphs_for(&ds, a.graphs.as_deref(), &cfg)?;
    let (state, history) = train(&ds, &graphs, &cfg).map_err(|e| e.to_string())?;
    create_dir(&a.out)?;
    save_checkpoint(&state, &a.out).map_err(|e| e.to_string())?;
    write_train_log(&a.out.join("train_log.csv"), &history.losses).map_err(err("train_log.csv"))?;
    let table = embed_dataset(&state, &ds, &graphs).map_err(|e| e.to_string())?;
    write_embeddings_csv(&table.regions, &a.out.join("embeddings.csv")).map_err(|e| e.to_string())?;
    write_channel_bundle(&table, &a.out).map_err(|e| e.to_string())?;
    let last = history.losses.last().copied().unwrap_or_default();
    eprintln!("trained {} epochs, final loss {:.6}", history.losses.len(), last.l_total);
    m.write(
        &a.out,
        Some(&state.config),
        serde_json::json!({ "variant": a.variant }),
        Some(hash),
        Some(state.config.seed),
        &["checkpoint.bin", "checkpoint.json", "train_log.csv", "embeddings.csv", "channels.bin", "channels.json"],
    )
}

fn embed_cmd(a: &EmbedArgs, m: &ManifestWriter) -> CliResult<()> {
    let ckpt_dir =
        if a.ckpt.is_file() { a.ckpt.parent().unwrap_or(Path::new(".")).to_path_buf() } else { a.ckpt.clone() };
    let state = load_checkpoint(&ckpt_dir).map_err(err(&a.ckpt.display().to_string()))?;
    let (ds, hash) = load_data(&a.data)?;
    let graphs = graphs_for(&ds, a.graphs.as_deref(), &state.config)?;
    let table = embed_dataset(&state, &ds, &graphs).map_err(|e| e.to_string())?;
    let out_dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    create_dir(&out_dir)?;
    write_embeddings_csv(&table.regions, &a.out).map_err(|e| e.to_string())?;
    let name = a.out.file_name().map_or("embeddings.csv".into(), |n| n.to_string_lossy().into_owned());
    m.write(&out_dir, Some(&state.config), serde_json::json!({}), Some(hash), Some(state.config.seed), &[&name])
}

fn evaluate_cmd(a: &EvaluateArgs, m: &ManifestWriter) -> CliResult<()> {
    let emb = read_embeddings_csv(&a.embeddings).map_err(|e| e.to_string())?;
    let (ds, hash) = load_data(&a.data)?;
    if emb.nrows() != ds.n_regions() {
        return Err(format!("{} embedding rows for {} regions", emb.nrows(), ds.n_regions()));
    }
    let seed = a.seed.map_or_else(env_seed, |s| Ok(Some(s)))?.unwrap_or(0);
    let report = if a.split {
        split_evaluate(&emb, &ds.targets, &ds.task_names, a.lambda, seed)
    } else {
        cross_validate(&emb, &ds.targets, &ds.task_names, a.folds, a.lambda, seed)
    }
    .map_err(|e| e.to_string())?;
    let history = match &a.history {
        Some(p) => Some(read_train_log(p)?),
        None => None,
    };
    emit_report(&report, history.as_deref(), "model", &a.out).map_err(|e| e.to_string())?;
    for t in &report.tasks {
        println!("{}: MAE {:.4} RMSE {:.4} R2 {:.4}", t.name, t.mae, t.rmse, t.r2);
    }
    m.write(
        &a.out,
        None,
        report.config.clone(),
        Some(hash),
        Some(seed),
        &["metrics.json", "metrics.md", "scatter_*.csv"],
    )
}

fn read_train_log(path: &Path) -> CliResult<Vec<crate::objectives::LossReport>> {
    let label = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(err(&label))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(err(&label))?;
        let f = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| format!("{label}: bad row"));
        out.push(crate::objectives::LossReport::new(f(1)?, f(2)?, f(3)?));
    }
    Ok(out)
}

/// Averages per-task metrics of several reports (same task order).
fn average_reports(reports: &[MetricsReport]) -> MetricsReport {
    let k = reports.len() as f64;
    let tasks = reports[0]
        .tasks
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let avg = |f: &dyn Fn(&TaskMetrics) -> f64| reports.iter().map(|r| f(&r.tasks[j])).sum::<f64>() / k;
            TaskMetrics {
                name: t.name.clone(),
                mae: avg(&|t| t.mae),
                rmse: avg(&|t| t.rmse),
                r2: avg(&|t| t.r2),
                mae_std: avg(&|t| t.mae_std),
                rmse_std: avg(&|t| t.rmse_std),
                r2_std: avg(&|t| t.r2_std),
                folds: reports.iter().flat_map(|r| r.tasks[j].folds.clone()).collect(),
                predictions: Vec::new(),
                truths: Vec::new(),
            }
        })
        .collect();
    MetricsReport { tasks, config: serde_json::json!({ "seeds": reports.len() }) }
}

fn train_and_score(
    ds: &UrbanDataset,
    graphs: &GraphBundle,
    cfg: &TrainConfig,
    folds: usize,
    lambda: f64,
) -> CliResult<MetricsReport> {
    let (state, _) = train(ds, graphs, cfg).map_err(|e| e.to_string())?;
    let table = embed_dataset(&state, ds, graphs).map_err(|e| e.to_string())?;
    cross_validate(&table.regions, &ds.targets, &ds.task_names, folds, lambda, cfg.seed).map_err(|e| e.to_string())
}

pub fn variant_label(v: &str) -> String {
    match v {
        "full" => "full".into(),
        other => format!("w/o {}", other.trim_start_matches("no_")),
    }
}

fn ablate_cmd(a: &AblateArgs, m: &ManifestWriter) -> CliResult<()> {
    let base = resolve_config(&a.cfg)?;
    for v in &a.variants {
        if !ABLATION_VARIANTS.contains(&v.as_str()) {
            return Err(format!("unknown variant {v}; expected one of {}", ABLATION_VARIANTS.join(",")));
        }
    }
    let (ds, hash) = load_data(&a.data)?;
    let graphs = graphs_for(&ds, a.graphs.as_deref(), &base)?;
    let names: Vec<String> = std::iter::once("full".to_string()).chain(a.variants.iter().cloned()).collect();
    let mut rows = Vec::new();
    for v in &names {
        let mut reports = Vec::new();
        for s in 0..a.seeds.max(1) {
            let mut cfg = base.with_variant(v).map_err(|e| e.to_string())?;
            cfg.seed = base.seed + s;
            reports.push(train_and_score(&ds, &graphs, &cfg, a.folds, a.lambda)?);
        }
        let avg = average_reports(&reports);
        eprintln!("{v}: mean R2 {:.4}", avg.mean_r2());
        rows.push((v.clone(), avg));
    }
    create_dir(&a.out)?;
    let labelled: Vec<(String, &MetricsReport)> = rows.iter().map(|(v, r)| (variant_label(v), r)).collect();
    fs::write(a.out.join("ablation.md"), markdown_table(&labelled)).map_err(err("ablation.md"))?;
    let json: serde_json::Map<String, serde_json::Value> =
        rows.iter().map(|(v, r)| (v.clone(), serde_json::to_value(r).expect("report serializes"))).collect();
    fs::write(a.out.join("ablation.json"), serde_json::to_string_pretty(&json).expect("json"))
        .map_err(err("ablation.json"))?;
    m.write(
        &a.out,
        Some(&base),
        serde_json::json!({ "variants": a.variants, "seeds": a.seeds, "folds": a.folds, "lambda": a.lambda }),
        Some(hash),
        Some(base.seed),
        &["ablation.md", "ablation.json"],
    )
}

fn sweep_cmd(a: &SweepArgs, m: &ManifestWriter) -> CliResult<()> {
    let base = resolve_config(&a.cfg)?;
    let (ds, hash) = match &a.data {
        Some(d) => {
            let (ds, h) = load_data(d)?;
            (ds, Some(h))
        }
        None => {
            let spec = SynthSpec::grid(5, 5, base.seed);
            (generate_synthetic_city(&spec).map_err(|e| e.to_string())?.dataset, None)
        }
    };
    let mut rows = Vec::new();
    let mut csv_out = String::from("param,value,task,mae,rmse,r2\n");
    for raw in &a.values {
        let mut value = serde_json::to_value(&base).expect("config serializes");
        let obj = value.as_object_mut().expect("config is an object");
        let key = match a.param.as_str() {
            "C" => "global_layers",
            "L" => "expert_layers",
            "Z" => "sv_layers",
            k => k,
        };
        if !obj.contains_key(key) {
            return Err(format!("unknown parameter {}", a.param));
        }
        obj.insert(key.to_string(), parse_value(raw));
        let cfg: TrainConfig = serde_json::from_value(value).map_err(err(&format!("{}={raw}", a.param)))?;
        let cfg = cfg.resolved().map_err(|e| e.to_string())?;
        let graphs = build_graphs(&ds, &cfg).map_err(|e| e.to_string())?;
        let report = train_and_score(&ds, &graphs, &cfg, a.folds, a.lambda)?;
        for t in &report.tasks {
            csv_out.push_str(&format!("{},{raw},{},{},{},{}\n", a.param, t.name, t.mae, t.rmse, t.r2));
        }
        eprintln!("{}={raw}: mean R2 {:.4}", a.param, report.mean_r2());
        rows.push((format!("{}={raw}", a.param), report));
    }
    create_dir(&a.out)?;
    fs::write(a.out.join("sweep.csv"), csv_out).map_err(err("sweep.csv"))?;
    let labelled: Vec<(String, &MetricsReport)> = rows.iter().map(|(l, r)| (l.clone(), r)).collect();
    fs::write(a.out.join("sweep.md"), markdown_table(&labelled)).map_err(err("sweep.md"))?;
    m.write(
        &a.out,
        Some(&base),
        serde_json::json!({ "param": a.param, "values": a.values }),
        hash,
        Some(base.seed),
        &["sweep.csv", "sweep.md"],
    )
}

fn subcommand_help(argv: &[OsString]) -> String {
    let mut cmd = Cli::command();
    let name = argv.iter().skip(1).map(|a| a.to_string_lossy()).find(|a| !a.starts_with('-'));
    if let Some(name) = name {
        if let Some(sub) = cmd.find_subcommand_mut(name.as_ref()) {
            return sub.render_help().to_string();
        }
    }
    cmd.render_help().to_string()
}

/// Parses `argv` and runs the command: 0 on success, 1 on usage errors, 2 on runtime errors.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", e.render());
            eprintln!("{}", subcommand_help(&argv));
            return 1;
        }
    };
    let (command, result) = {
        let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
        let mk = |command| ManifestWriter { command, args: args.clone(), started_at: now() };
        match &cli.command {
            Command::GenData(a) => ("gen-data", gen_data(a, &mk("gen-data"))),
            Command::BuildGraphs(a) => ("build-graphs", build_graphs_cmd(a, &mk("build-graphs"))),
            Command::Train(a) => ("train", train_cmd(a, &mk("train"))),
            Command::Embed(a) => ("embed", embed_cmd(a, &mk("embed"))),
            Command::Evaluate(a) => ("evaluate", evaluate_cmd(a, &mk("evaluate"))),
            Command::Ablate(a) => ("ablate", ablate_cmd(a, &mk("ablate"))),
            Command::Sweep(a) => ("sweep", sweep_cmd(a, &mk("sweep"))),
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mtgrr {command}: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run_cli(["mtgrr", "train", "--bogus"]), 1);
        assert_eq!(run_cli(["mtgrr"]), 1);
    }

    #[test]
    fn missing_input_is_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nothing");
        let out = dir.path().join("out");
        let code = run_cli([
            "mtgrr".into(),
            "build-graphs".into(),
            "--data".into(),
            missing.into_os_string(),
            "--out".into(),
            out.into_os_string(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn set_overrides_config_keys() {
        let args = ConfigArgs {
            config: "default".into(),
            seed: Some(3),
            epochs: Some(7),
            lr: None,
            d_hid: None,
            edge_top_k: None,
            set: vec!["no_sv=true".into(), "d_in=12".into()],
        };
        let cfg = resolve_config(&args).unwrap();
        assert_eq!((cfg.seed, cfg.epochs, cfg.d_in), (3, 7, 12));
        assert!(cfg.no_sv && cfg.no_l_sv);
    }

    #[test]
    fn variant_labels() {
        assert_eq!(variant_label("full"), "full");
        assert_eq!(variant_label("no_l_f"), "w/o l_f");
    }
}
