//! `ecechain`: prepare datasets, train, evaluate, and query chain-based
//! temporal knowledge graph models.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use ecechain_core::data::{
    augment_reciprocal, load_dataset, Dataset, DatasetManifest, FileFormat, Granularity, Query,
    SplitKind,
};
use ecechain_core::ece::{build_ece, NeighborIndex};
use ecechain_core::eval::{evaluate, FilterSets, MetricReport, Protocol};
use ecechain_core::model::{forward, BoundModel, ModelParams};
use ecechain_core::tensor::Graph;
use ecechain_core::train::{
    check_dataset_hash, file_sha256, fit, Checkpoint, EpochLog, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "ecechain",
    version,
    about = "Temporal knowledge graph link prediction over evolutionary event chains"
)]
struct Cli {
    /// Override the random seed everywhere (init, sampling, masking).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for batched computation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    device_threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset directory, build vocabularies, and write them with a
    /// statistics manifest.
    Prepare(PrepareArgs),
    /// Train a model and write the best checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Rank every query of a split under a checkpoint and write a report.
    Eval(EvalArgs),
    /// Score one query ("subj pred ? time" or "? pred obj time") and print
    /// the top entities.
    Predict(PredictArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// Dataset directory, or a name resolved under $ECECHAIN_DATA.
    #[arg(long)]
    dataset: Option<String>,

    /// Input id format: auto, ids, or names.
    #[arg(long, default_value = "auto")]
    format: String,

    /// Timestamp granularity label ("24 hours", "15 mins", "1 year",
    /// "index"); detected from the data when omitted.
    #[arg(long)]
    granularity: Option<String>,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    data: DatasetArgs,

    /// Output directory for vocabulary files and the manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DatasetArgs,

    /// Flat TOML config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory for the checkpoint, metrics log, and run manifest.
    #[arg(long)]
    out: PathBuf,

    /// Override the maximum number of epochs.
    #[arg(long)]
    max_epochs: Option<usize>,

    /// Override the evaluation protocol (raw|filtered).
    #[arg(long)]
    protocol: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DatasetArgs,

    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Split to evaluate: train, valid, or test.
    #[arg(long, default_value = "test")]
    split: String,

    /// Override the protocol (raw|filtered); defaults to the training
    /// configuration.
    #[arg(long)]
    protocol: Option<String>,

    /// Override the query-timestamp masking rate at evaluation; defaults to
    /// 1 for fully-masked-trained checkpoints and 0 otherwise.
    #[arg(long)]
    query_time_mask: Option<f64>,

    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Also write a per-query rank dump (TSV) next to the report.
    #[arg(long)]
    dump_ranks: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DatasetArgs,

    #[arg(long)]
    checkpoint: PathBuf,

    /// Number of candidates to print.
    #[arg(long, default_value_t = 10)]
    top_n: usize,

    /// Query of the form "subject predicate ? timestamp" or
    /// "? predicate object timestamp" (names or ids as in the dataset).
    query: Vec<String>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.device_threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.device_threads)
            .build_global()
            .context("initializing the worker pool")?;
    }
    match cli.command {
        Command::Prepare(args) => prepare(args),
        Command::Train(args) => train(args, cli.seed),
        Command::Eval(args) => eval(args, cli.seed),
        Command::Predict(args) => predict(args, cli.seed),
    }
}

// ----------------------------------------------------------------------
// Shared plumbing
// ----------------------------------------------------------------------

fn resolve_dataset_dir(name: &str) -> Result<PathBuf> {
    let direct = PathBuf::from(name);
    if direct.is_dir() {
        return Ok(direct);
    }
    if let Ok(root) = std::env::var("ECECHAIN_DATA") {
        let under_root = Path::new(&root).join(name);
        if under_root.is_dir() {
            return Ok(under_root);
        }
    }
    bail!("dataset directory {name:?} not found (checked the path and $ECECHAIN_DATA)")
}

fn load_from_args(args: &DatasetArgs) -> Result<(Dataset, String)> {
    let name = args
        .dataset
        .clone()
        .ok_or_else(|| anyhow!("--dataset is required"))?;
    let dir = resolve_dataset_dir(&name)?;
    let format = match args.format.to_lowercase().as_str() {
        "auto" => FileFormat::Auto,
        "ids" => FileFormat::Ids,
        "names" => FileFormat::Names,
        other => bail!("unknown format {other:?} (expected auto, ids, or names)"),
    };
    let granularity = args
        .granularity
        .as_deref()
        .map(Granularity::parse)
        .transpose()?;
    let dataset = load_dataset(&dir, format, granularity)
        .with_context(|| format!("loading {}", dir.display()))?;
    let label = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or(name);
    Ok((dataset, label))
}

// ----------------------------------------------------------------------
// prepare
// ----------------------------------------------------------------------

fn prepare(args: PrepareArgs) -> Result<()> {
    let (dataset, name) = load_from_args(&args.data)?;
    fs::create_dir_all(&args.out)?;
    dataset.vocabs.write_files(&args.out)?;
    let manifest = DatasetManifest::from_dataset(&name, &dataset);
    fs::write(args.out.join("manifest.toml"), manifest.to_toml())?;

    println!(
        "prepared {name}: {} entities, {} relations, {} timestamps ({}), splits {}/{}/{}",
        manifest.entity_count,
        manifest.relation_count,
        manifest.time_count,
        manifest.granularity,
        manifest.train_size,
        manifest.valid_size,
        manifest.test_size,
    );
    println!("wrote vocabularies and manifest to {}", args.out.display());
    Ok(())
}

// ----------------------------------------------------------------------
// train
// ----------------------------------------------------------------------

/// Flat TOML: recognized top-level keys `dataset` and `out` plus every
/// `TrainConfig` field; anything else is rejected.
fn load_run_config(path: &Path) -> Result<(TrainConfig, Option<String>, Option<PathBuf>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table: toml::Table = text
        .parse()
        .with_context(|| format!("parsing {}", path.display()))?;
    let dataset = match table.remove("dataset") {
        Some(toml::Value::String(s)) => Some(s),
        Some(other) => bail!("config key `dataset` must be a string, got {other}"),
        None => None,
    };
    let out = match table.remove("out") {
        Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
        Some(other) => bail!("config key `out` must be a string, got {other}"),
        None => None,
    };
    let config: TrainConfig = toml::Value::Table(table)
        .try_into()
        .with_context(|| format!("invalid training config in {}", path.display()))?;
    Ok((config, dataset, out))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    dataset: &'a str,
    dataset_hash: &'a str,
    granularity: String,
    history_only: bool,
    entity_count: usize,
    relation_count: usize,
    time_count: usize,
    train_queries: usize,
    best_epoch: usize,
    best_valid_mrr: f64,
    stopped_early: bool,
    #[serde(flatten)]
    config: &'a TrainConfig,
}

fn train(mut args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let (mut config, file_dataset, file_out) = match &args.config {
        Some(path) => load_run_config(path)?,
        None => (TrainConfig::default(), None, None),
    };
    if args.data.dataset.is_none() {
        args.data.dataset = file_dataset;
    }
    let out = if args.out.as_os_str().is_empty() {
        file_out.ok_or_else(|| anyhow!("--out is required"))?
    } else {
        args.out.clone()
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.max_epochs {
        config.max_epochs = epochs;
    }
    if let Some(protocol) = &args.protocol {
        config.protocol = protocol.parse::<Protocol>()?;
    }
    config.validate()?;

    let (dataset, name) = load_from_args(&args.data)?;
    fs::create_dir_all(&out)?;

    let mut log_lines = vec![EpochLog::tsv_header().to_string()];
    println!("{}", EpochLog::tsv_header());
    let outcome = fit(&config, &dataset, &mut |log| {
        let line = log.to_tsv();
        println!("{line}");
        log_lines.push(line);
    })?;
    log_lines.push(String::new());
    fs::write(out.join("metrics.tsv"), log_lines.join("\n"))?;

    let checkpoint_path = out.join("model.ckpt");
    outcome.checkpoint.save(&checkpoint_path)?;

    let manifest = RunManifest {
        dataset: &name,
        dataset_hash: &dataset.content_hash,
        granularity: dataset.splits.granularity.label(),
        history_only: outcome.checkpoint.history_only,
        entity_count: dataset.vocabs.entity_count(),
        relation_count: dataset.vocabs.relation_count(),
        time_count: dataset.vocabs.time_count(),
        train_queries: dataset.splits.train.len() * 2,
        best_epoch: outcome.checkpoint.best_epoch,
        best_valid_mrr: outcome.checkpoint.best_valid_mrr,
        stopped_early: outcome.stopped_early,
        config: &config,
    };
    fs::write(out.join("run.toml"), toml::to_string(&manifest)?)?;

    println!(
        "trained {} epochs (best epoch {}, valid MRR {:.4}); checkpoint at {}",
        outcome.epochs.len(),
        outcome.checkpoint.best_epoch,
        outcome.checkpoint.best_valid_mrr,
        checkpoint_path.display()
    );
    Ok(())
}

// ----------------------------------------------------------------------
// eval
// ----------------------------------------------------------------------

#[derive(Serialize)]
struct EvalReport {
    split: String,
    protocol: Protocol,
    query_time_mask_rate: f64,
    query_count: usize,
    checkpoint_sha256: String,
    dataset_hash: String,
    metrics: MetricReport,
    /// Mean time-prediction cross-entropy over masked queries, if any.
    time_loss: Option<f64>,
}

fn eval(args: EvalArgs, seed: Option<u64>) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let (dataset, _) = load_from_args(&args.data)?;
    check_dataset_hash(&checkpoint, &dataset.content_hash)?;

    let split: SplitKind = args.split.parse()?;
    let queries = augment_reciprocal(dataset.splits.split(split), &dataset.vocabs)?;
    if queries.is_empty() {
        bail!("split {:?} is empty", args.split);
    }

    let mut eval_config = checkpoint.config.eval_config();
    if let Some(protocol) = &args.protocol {
        eval_config.protocol = protocol.parse::<Protocol>()?;
    }
    if let Some(rate) = args.query_time_mask {
        if !(0.0..=1.0).contains(&rate) {
            bail!("--query-time-mask must lie in [0, 1]");
        }
        eval_config.time_mask_rate = rate;
    }
    if let Some(seed) = seed {
        eval_config.seed = seed;
    }

    let params: ModelParams<f32> = checkpoint.model_params()?;
    let index = NeighborIndex::build(&dataset.splits.train, &dataset.vocabs);
    let filters = FilterSets::build(&dataset.splits, &dataset.vocabs)?;
    let ece_config = checkpoint.config.ece_config(dataset.splits.granularity);

    let outcome = evaluate(
        &params,
        &queries,
        &index,
        &ece_config,
        &filters,
        dataset.vocabs.relation_count(),
        &eval_config,
    )?;

    let report = EvalReport {
        split: split.name().to_string(),
        protocol: eval_config.protocol,
        query_time_mask_rate: eval_config.time_mask_rate,
        query_count: queries.len(),
        checkpoint_sha256: file_sha256(&args.checkpoint)?,
        dataset_hash: dataset.content_hash.clone(),
        metrics: outcome.report,
        time_loss: outcome.time_loss,
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => {
            fs::write(path, &json)?;
            println!(
                "split {} {:?}: MRR {:.4}, Hits@1 {:.4}, Hits@3 {:.4}, Hits@10 {:.4} ({} queries); report at {}",
                report.split,
                report.protocol,
                report.metrics.all.mrr,
                report.metrics.all.hits1,
                report.metrics.all.hits3,
                report.metrics.all.hits10,
                report.query_count,
                path.display()
            );
        }
        None => println!("{json}"),
    }

    if let Some(path) = &args.dump_ranks {
        let mut lines = vec!["query_index\trank\tdirection\tsubject\tpredicate\tanswer".to_string()];
        for r in &outcome.ranks {
            let q = &queries[r.query_index];
            lines.push(format!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.query_index,
                r.rank,
                if r.reciprocal { "subject" } else { "object" },
                dataset.vocabs.entity_name(q.subject),
                dataset.vocabs.predicate_name(q.predicate),
                dataset.vocabs.entity_name(q.answer),
            ));
        }
        lines.push(String::new());
        fs::write(path, lines.join("\n"))?;
    }
    Ok(())
}

// ----------------------------------------------------------------------
// predict
// ----------------------------------------------------------------------

fn predict(args: PredictArgs, seed: Option<u64>) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let (dataset, _) = load_from_args(&args.data)?;
    check_dataset_hash(&checkpoint, &dataset.content_hash)?;
    let vocabs = &dataset.vocabs;

    let tokens: Vec<String> = if args.query.len() == 1 {
        args.query[0].split_whitespace().map(str::to_string).collect()
    } else {
        args.query.clone()
    };
    if tokens.len() != 4 {
        bail!(
            "query must have four fields: \"subject predicate ? timestamp\" or \"? predicate object timestamp\""
        );
    }

    let entity = |name: &str| -> Result<usize> {
        vocabs
            .entity_id(name)
            .ok_or_else(|| anyhow!("unknown entity {name:?}"))
    };
    let relation = vocabs
        .relation_id(&tokens[1])
        .ok_or_else(|| anyhow!("unknown relation {:?}", tokens[1]))?;
    let timestamp = vocabs
        .time_id(&tokens[3])
        .or_else(|| {
            tokens[3]
                .parse::<usize>()
                .ok()
                .filter(|&t| t < vocabs.time_count())
        })
        .ok_or_else(|| anyhow!("unknown timestamp {:?}", tokens[3]))?;

    let query = match (tokens[0].as_str(), tokens[2].as_str()) {
        ("?", obj) if obj != "?" => Query {
            subject: entity(obj)?,
            predicate: relation + vocabs.relation_count(),
            timestamp,
            answer: 0,
        },
        (subj, "?") if subj != "?" => Query {
            subject: entity(subj)?,
            predicate: relation,
            timestamp,
            answer: 0,
        },
        _ => bail!("exactly one of subject/object must be \"?\""),
    };

    let params: ModelParams<f32> = checkpoint.model_params()?;
    let index = NeighborIndex::build(&dataset.splits.train, vocabs);
    let ece_config = checkpoint.config.ece_config(dataset.splits.granularity);
    let eval_config = checkpoint.config.eval_config();
    let mask = eval_config.time_mask_rate >= 1.0;

    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(eval_config.seed));
    let ece = build_ece(&query, &index, &ece_config, mask, &mut rng);

    let mut g: Graph<f32> = Graph::new();
    let bound = BoundModel::bind(&mut g, &params);
    let scores = forward(&mut g, &bound, std::slice::from_ref(&ece))
        .map_err(|e| anyhow!("scoring failed: {e}"))?;
    let row = g.value(scores.link).row(0);

    let mut ranked: Vec<(usize, f32)> = row.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    println!(
        "query: {} {} {} {} (chain: {} neighbor branches{})",
        tokens[0],
        tokens[1],
        tokens[2],
        tokens[3],
        ece.neighbors.len(),
        if mask { ", timestamp masked" } else { "" },
    );
    for (i, (e, score)) in ranked.iter().take(args.top_n.max(1)).enumerate() {
        println!("{:>4}  {:>12.4}  {}", i + 1, score, vocabs.entity_name(*e));
    }
    Ok(())
}
