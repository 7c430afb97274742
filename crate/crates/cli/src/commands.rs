use std::path::{Path, PathBuf};

use clap::CommandFactory;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use hybridrank::aggregator::{load_params, AggregatorConfig, AggregatorParams};
use hybridrank::evaluation::{evaluate, per_query_ap_csv, read_report, write_report, ReportFormat};
use hybridrank::fsutil;
use hybridrank::similarity::{rank, score_query, QueryMode};
use hybridrank::store::{load_database, load_query_bundles, DualSpaceDatabase, QueryBundle, QuerySelection};
use hybridrank::synthworld::{distributions_csv, generate_world, measure_similarity_distributions, save_world, SynthConfig};
use hybridrank::training::{load_train_store, train, TrainConfig};

use crate::args::{Cli, EvalArgs, ExportArgs, GenSynthArgs, QueryArgs, TrainArgs};
use crate::config::{merged, parse, require, take_keys, to_object, usage, with_suffix, CliResult, RunManifest};

/// Flag ids of a subcommand, i.e. the keys a config file may use.
fn known_keys(subcommand: &str) -> Vec<String> {
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(subcommand)
        .expect("subcommand registered");
    sub.get_arguments()
        .map(|a| a.get_id().as_str().to_string())
        .filter(|id| !matches!(id.as_str(), "config" | "threads" | "help" | "version"))
        .collect()
}

fn write_bytes(path: &Path, bytes: &[u8], manifest: &mut RunManifest) -> CliResult<()> {
    fsutil::write_atomic(path, bytes)?;
    manifest.output(path)
}

fn json_bytes(value: &impl Serialize) -> CliResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(anyhow::Error::from)?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[derive(Debug, Deserialize)]
struct GenSynthIo {
    out: Option<PathBuf>,
    manifest: Option<PathBuf>,
}

pub fn gen_synth(args: &GenSynthArgs) -> CliResult<()> {
    let mut map = merged(args, args.config.as_deref(), &known_keys("gen-synth"))?;
    let io: GenSynthIo = parse(take_keys(&mut map, &["out", "manifest"]), "gen-synth")?;
    let world_cfg: SynthConfig = parse(map, "gen-synth")?;
    let out = require(io.out, "out")?;
    world_cfg.validate()?;

    let mut resolved = to_object(&world_cfg);
    resolved.insert("out".into(), Value::String(out.display().to_string()));
    let mut manifest = RunManifest::new("gen-synth", resolved, Some(world_cfg.seed));

    let world = generate_world(&world_cfg)?;
    let paths = save_world(&world, &out)?;
    for p in [&paths.train, &paths.database, &paths.queries, &paths.real_queries] {
        manifest.output_manifest(p)?;
    }
    write_bytes(&out.join("world_config.json"), &json_bytes(&world_cfg)?, &mut manifest)?;
    let dists = measure_similarity_distributions(&world);
    write_bytes(&out.join("similarity_histograms.csv"), distributions_csv(&dists).as_bytes(), &mut manifest)?;
    write_bytes(&out.join("similarity_distributions.json"), &json_bytes(&dists)?, &mut manifest)?;
    manifest.write(&io.manifest.unwrap_or_else(|| out.join("run.json")))
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainIo {
    train: Option<PathBuf>,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
    manifest: Option<PathBuf>,
    #[serde(default = "yes")]
    renormalize: bool,
}

fn yes() -> bool {
    true
}

pub fn train_cmd(args: &TrainArgs) -> CliResult<()> {
    let mut map = merged(args, args.config.as_deref(), &known_keys("train"))?;
    let io: TrainIo = parse(take_keys(&mut map, &["train", "out", "log", "manifest", "renormalize"]), "train")?;
    let config: TrainConfig = parse(map, "train")?;
    let store_path = require(io.train.clone(), "train")?;
    let out = require(io.out.clone(), "out")?;
    let log_path = io.log.clone().unwrap_or_else(|| with_suffix(&out, "log.jsonl"));
    config.validate()?;

    let mut resolved = to_object(&config);
    resolved.insert("train".into(), Value::String(store_path.display().to_string()));
    resolved.insert("out".into(), Value::String(out.display().to_string()));
    resolved.insert("log".into(), Value::String(log_path.display().to_string()));
    resolved.insert("renormalize".into(), Value::Bool(io.renormalize));
    let mut manifest = RunManifest::new("train", resolved, Some(config.seed));
    manifest.input_manifest(&store_path)?;

    let store = load_train_store(&store_path, io.renormalize)?;
    let (params, log) = train(&store, &config)?;
    hybridrank::aggregator::save_params(&params, &out)?;
    manifest.output(&out)?;
    write_bytes(&log_path, &log.to_jsonl()?, &mut manifest)?;
    manifest.write(&io.manifest.unwrap_or_else(|| with_suffix(&out, "run.json")))
}

/// Resolved form of [`InferenceArgs`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Inference {
    db: Option<PathBuf>,
    queries: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    #[serde(default = "yes")]
    renormalize: bool,
    generators: Option<Vec<u8>>,
    k: Option<usize>,
    #[serde(default)]
    query_start: usize,
    #[serde(default = "yes")]
    repeat_inputs: bool,
    #[serde(default = "unit")]
    logit_temperature: f64,
    #[serde(default)]
    renormalize_output: bool,
}

fn unit() -> f64 {
    1.0
}

const INFERENCE_KEYS: [&str; 10] = [
    "db",
    "queries",
    "checkpoint",
    "renormalize",
    "generators",
    "k",
    "query_start",
    "repeat_inputs",
    "logit_temperature",
    "renormalize_output",
];

struct Loaded {
    db: DualSpaceDatabase,
    bundles: Vec<QueryBundle>,
    params: Option<AggregatorParams>,
    checkpoint_hash: Option<String>,
    agg: AggregatorConfig,
}

impl Inference {
    fn agg_config(&self) -> AggregatorConfig {
        AggregatorConfig {
            repeat_inputs: self.repeat_inputs,
            logit_temperature: self.logit_temperature,
            renormalize_output: self.renormalize_output,
        }
    }

    fn load(&self, manifest: &mut RunManifest) -> CliResult<Loaded> {
        let db_path = require(self.db.clone(), "db")?;
        let q_path = require(self.queries.clone(), "queries")?;
        manifest.input_manifest(&db_path)?;
        manifest.input_manifest(&q_path)?;
        let db = load_database(&db_path, self.renormalize)?;
        let selection = QuerySelection {
            generators: self.generators.clone(),
            per_generator: self.k,
            start: self.query_start,
        };
        let bundles: Vec<QueryBundle> = load_query_bundles(&q_path, self.renormalize)?
            .iter()
            .map(|b| b.select(&selection))
            .collect();
        for b in &bundles {
            b.check_dims(db.text_dim(), db.image_dim())?;
        }
        let (params, checkpoint_hash) = match &self.checkpoint {
            Some(p) => {
                manifest.input(p)?;
                let params = load_params(p)?;
                params.check_dim(db.image_dim())?;
                (Some(params), Some(fsutil::sha256_file(p)?))
            }
            None => (None, None),
        };
        Ok(Loaded {
            db,
            bundles,
            params,
            checkpoint_hash,
            agg: self.agg_config(),
        })
    }
}

fn check_modes(modes: &[QueryMode], have_params: bool) -> CliResult<()> {
    if let Some(m) = modes.iter().find(|m| m.needs_params() && !have_params) {
        return Err(usage(format!("mode {m} needs --checkpoint")));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalOptions {
    modes: Option<Vec<QueryMode>>,
    #[serde(default = "default_k_list")]
    k_list: Vec<usize>,
    out: Option<PathBuf>,
    #[serde(default = "json_format")]
    format: ReportFormat,
    per_query_csv: Option<PathBuf>,
    #[serde(default = "generated")]
    variant: String,
    seed: Option<u64>,
    manifest: Option<PathBuf>,
}

fn default_k_list() -> Vec<usize> {
    vec![1, 10, 100]
}

fn json_format() -> ReportFormat {
    ReportFormat::Json
}

fn generated() -> String {
    "generated".into()
}

pub fn eval_cmd(args: &EvalArgs) -> CliResult<()> {
    let mut map = merged(args, args.config.as_deref(), &known_keys("eval"))?;
    let inference: Inference = parse(take_keys(&mut map, &INFERENCE_KEYS), "eval")?;
    let opts: EvalOptions = parse(map, "eval")?;
    let out = require(opts.out.clone(), "out")?;

    let modes = opts.modes.clone().unwrap_or_else(|| {
        if inference.checkpoint.is_some() {
            QueryMode::ALL.to_vec()
        } else {
            QueryMode::ALL.into_iter().filter(|m| !m.needs_params()).collect()
        }
    });
    check_modes(&modes, inference.checkpoint.is_some())?;

    let mut resolved = to_object(&inference);
    resolved.extend(to_object(&opts));
    resolved.insert("modes".into(), serde_json::to_value(&modes).map_err(anyhow::Error::from)?);
    let mut manifest = RunManifest::new("eval", resolved.clone(), opts.seed);
    let loaded = inference.load(&mut manifest)?;

    let mut report = evaluate(
        &loaded.db,
        &loaded.bundles,
        loaded.params.as_ref(),
        &loaded.agg,
        &modes,
        &opts.k_list,
    )?;
    report.variant = opts.variant.clone();
    report.seed = opts.seed;
    report.checkpoint_hash = loaded.checkpoint_hash;
    report.config = Value::Object(resolved);

    write_report(&report, &out, opts.format)?;
    manifest.output(&out)?;
    if let Some(p) = &opts.per_query_csv {
        write_bytes(p, per_query_ap_csv(&report).as_bytes(), &mut manifest)?;
    }
    manifest.write(&opts.manifest.clone().unwrap_or_else(|| with_suffix(&out, "run.json")))
}

#[derive(Debug, Serialize, Deserialize)]
struct QueryOptions {
    query_id: Option<u64>,
    #[serde(default = "ours")]
    mode: QueryMode,
    #[serde(default = "ten")]
    top_k: usize,
    out: Option<PathBuf>,
    manifest: Option<PathBuf>,
}

fn ours() -> QueryMode {
    QueryMode::Ours
}

fn ten() -> usize {
    10
}

#[derive(Debug, Serialize)]
struct RankedItem {
    rank: usize,
    id: u64,
    label: u32,
    score: f64,
}

pub fn query_cmd(args: &QueryArgs) -> CliResult<()> {
    let mut map = merged(args, args.config.as_deref(), &known_keys("query"))?;
    let inference: Inference = parse(take_keys(&mut map, &INFERENCE_KEYS), "query")?;
    let opts: QueryOptions = parse(map, "query")?;
    let out = require(opts.out.clone(), "out")?;
    check_modes(&[opts.mode], inference.checkpoint.is_some())?;

    let mut resolved = to_object(&inference);
    resolved.extend(to_object(&opts));
    let mut manifest = RunManifest::new("query", resolved, None);
    let loaded = inference.load(&mut manifest)?;

    let bundle = match opts.query_id {
        Some(id) => loaded
            .bundles
            .iter()
            .find(|b| b.query_id == id)
            .ok_or_else(|| hybridrank::Error::InvalidArgument(format!("no query with id {id}")))?,
        None if loaded.bundles.len() == 1 => &loaded.bundles[0],
        None => {
            return Err(usage(format!(
                "the query file holds {} queries; pick one with --query-id",
                loaded.bundles.len()
            )))
        }
    };
    let scores = score_query(bundle, &loaded.db, loaded.params.as_ref(), &loaded.agg, opts.mode)?;
    let ranking = rank(&scores, Some(opts.top_k))?;
    let items: Vec<RankedItem> = ranking
        .order
        .iter()
        .enumerate()
        .map(|(r, &i)| RankedItem {
            rank: r + 1,
            id: loaded.db.ids()[i],
            label: loaded.db.labels()[i],
            score: scores.values[i],
        })
        .collect();
    write_bytes(&out, &json_bytes(&items)?, &mut manifest)?;
    manifest.write(&opts.manifest.clone().unwrap_or_else(|| with_suffix(&out, "run.json")))
}

#[derive(Debug, Serialize, Deserialize)]
struct ExportOptions {
    report: Option<PathBuf>,
    out: Option<PathBuf>,
    #[serde(default = "csv_format")]
    format: ReportFormat,
    per_query_csv: Option<PathBuf>,
    manifest: Option<PathBuf>,
}

fn csv_format() -> ReportFormat {
    ReportFormat::Csv
}

pub fn export_cmd(args: &ExportArgs) -> CliResult<()> {
    let map = merged(args, args.config.as_deref(), &known_keys("export-report"))?;
    let opts: ExportOptions = parse(map, "export-report")?;
    let report_path = require(opts.report.clone(), "report")?;
    let out = require(opts.out.clone(), "out")?;

    let mut manifest = RunManifest::new("export-report", to_object(&opts), None);
    manifest.input(&report_path)?;
    let report = read_report(&report_path)?;
    write_report(&report, &out, opts.format)?;
    manifest.output(&out)?;
    if let Some(p) = &opts.per_query_csv {
        write_bytes(p, per_query_ap_csv(&report).as_bytes(), &mut manifest)?;
    }
    manifest.write(&opts.manifest.clone().unwrap_or_else(|| with_suffix(&out, "run.json")))
}
