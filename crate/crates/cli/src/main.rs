//! `megagnn`: generate planted datasets, train and evaluate models, run the
//! property suites.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use megagnn::checks::{self, SuiteReport};
use megagnn::data::{generate_planted_task, load_node_labels, load_transactions, PlantedConfig, PlantedKind, Schema, SplitSpec};
use megagnn::model::Readout;
use megagnn::nn::{ClassWeights, Preset};
use megagnn::train::{
    evaluate_checkpoint, run_experiment, summarize_records, write_metrics_csv, Architecture, Checkpoint,
    ExperimentConfig, RunStatus, SplitName,
};
use megagnn::Error;

#[derive(Parser)]
#[command(name = "megagnn", version, about = "Two-stage message passing on transaction multigraphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted synthetic dataset (transactions + node labels).
    Gen(GenArgs),
    /// Train one model per seed and write records, summary and checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run property suites and print a JSON report.
    Check(CheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// max-of-sums or out-neighbor-count.
    #[arg(long, value_parser = parse_task)]
    task: PlantedKind,
    #[arg(long, default_value_t = 500)]
    nodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    senders: Option<usize>,
    #[arg(long)]
    payments: Option<usize>,
    #[arg(long)]
    positive_rate: Option<f64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn parse_task(s: &str) -> Result<PlantedKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct DataArgs {
    /// Transaction CSV.
    #[arg(long)]
    data: PathBuf,
    /// Node-label sidecar CSV (account,label).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Column layout: aml or eth. Defaults to eth when --labels is given.
    #[arg(long)]
    schema: Option<String>,
}

/// Every setting is optional here so that file values survive unless a flag
/// overrides them. Keys in a config file match the long flag names.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    model: Option<String>,
    /// edge or node classification.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    bidirectional: Option<String>,
    #[arg(long)]
    ego_ids: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    /// negative,positive
    #[arg(long)]
    class_weights: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    hops: Option<String>,
    #[arg(long)]
    per_hop: Option<String>,
    /// train,val,test fractions.
    #[arg(long)]
    split: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &String)> {
        [
            ("model", &self.model),
            ("task", &self.task),
            ("bidirectional", &self.bidirectional),
            ("ego-ids", &self.ego_ids),
            ("layers", &self.layers),
            ("hidden", &self.hidden),
            ("lr", &self.lr),
            ("batch-size", &self.batch_size),
            ("dropout", &self.dropout),
            ("class-weights", &self.class_weights),
            ("epochs", &self.epochs),
            ("patience", &self.patience),
            ("hops", &self.hops),
            ("per-hop", &self.per_hop),
            ("split", &self.split),
            ("seeds", &self.seeds),
            ("threshold", &self.threshold),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k, v)))
        .collect()
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Starting hyperparameters: gin-aml, gin-eth, pna-aml or pna-eth.
    #[arg(long, default_value = "gin-aml")]
    preset: String,
    /// key=value file applied over the preset and under the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Equivariance,
    NodeIds,
    PortWitness,
    Separation,
    Gradient,
    Complexity,
    All,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    /// Random graphs for the equivariance suite.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Random graphs for the node-ids and gradient suites.
    #[arg(long)]
    graphs: Option<usize>,
    /// Star orders for the port witness.
    #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [4usize, 5, 6, 7, 8, 9, 10])]
    n: Vec<usize>,
    /// Seeds per star order.
    #[arg(long, default_value_t = 10)]
    witness_seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Edge counts for the complexity suite.
    #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [1_000usize, 10_000, 100_000])]
    sizes: Vec<usize>,
}

/// A bad value in a flag or config file: exit code 2 like clap's own errors.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_preset(s: &str) -> anyhow::Result<Preset> {
    Ok(match s {
        "gin-aml" => Preset::GinAml,
        "gin-eth" => Preset::GinEth,
        "pna-aml" => Preset::PnaAml,
        "pna-eth" => Preset::PnaEth,
        other => return Err(usage(format!("unknown preset {other:?} (gin-aml, gin-eth, pna-aml, pna-eth)"))),
    })
}

fn parse_switch(s: &str) -> Option<bool> {
    match s {
        "on" | "true" | "yes" | "1" => Some(true),
        "off" | "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

/// Set one configuration key from its textual value.
fn apply_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> anyhow::Result<()> {
    let bad = || usage(format!("invalid value {value:?} for {key}"));
    let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
    let real = |v: &str| v.parse::<f64>().map_err(|_| bad());
    match key.replace('_', "-").as_str() {
        "model" => cfg.model = value.parse::<Architecture>().map_err(|e| usage(e.to_string()))?,
        "task" => {
            cfg.task = match value {
                "edge" => Readout::Edge,
                "node" => Readout::Node,
                _ => return Err(bad()),
            }
        }
        "bidirectional" => cfg.bidirectional = parse_switch(value).ok_or_else(bad)?,
        "ego-ids" => cfg.ego_ids = parse_switch(value).ok_or_else(bad)?,
        "layers" => cfg.num_layers = num(value)?,
        "hidden" => cfg.hidden_size = num(value)?,
        "lr" => cfg.learning_rate = real(value)?,
        "batch-size" => cfg.batch_size = num(value)?,
        "dropout" => cfg.dropout = real(value)?,
        "class-weights" => match parse_list::<f64>(value).as_deref() {
            Some(&[n, p]) => cfg.class_weights = ClassWeights::new(n, p),
            _ => return Err(bad()),
        },
        "epochs" => cfg.epochs = num(value)?,
        "patience" => cfg.patience = num(value)?,
        "hops" => cfg.hops = num(value)?,
        "per-hop" => cfg.per_hop = num(value)?,
        "split" => match parse_list::<f64>(value).as_deref() {
            Some(&[a, b, c]) => cfg.split = SplitSpec { train: a, val: b, test: c },
            _ => return Err(bad()),
        },
        "seeds" => cfg.seeds = parse_list(value).ok_or_else(bad)?,
        "threshold" => cfg.threshold = real(value)?,
        other => return Err(usage(format!("unknown configuration key {other:?}"))),
    }
    Ok(())
}

/// `key = value` lines; `#` starts a comment.
fn read_config_file(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(usage(format!("{}:{}: expected key=value", path.display(), i + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn effective_config(args: &TrainArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::preset(parse_preset(&args.preset)?);
    if let Some(path) = &args.config {
        for (k, v) in read_config_file(path)? {
            apply_key(&mut cfg, &k, &v)?;
        }
    }
    for (k, v) in args.overrides.pairs() {
        apply_key(&mut cfg, k, v)?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn load_table(d: &DataArgs) -> anyhow::Result<megagnn::data::TransactionTable> {
    let name = d.schema.clone().unwrap_or_else(|| if d.labels.is_some() { "eth" } else { "aml" }.into());
    let schema = Schema::preset(&name).map_err(|e| usage(e.to_string()))?;
    let mut table = load_transactions(&d.data, &schema)?;
    if let Some(l) = &d.labels {
        load_node_labels(l, &mut table)?;
    }
    Ok(table)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = PlantedConfig::new(a.task, a.nodes, a.seed);
    if let Some(k) = a.senders {
        cfg.senders_per_node = k;
    }
    if let Some(p) = a.payments {
        cfg.payments_per_sender = p;
    }
    if let Some(r) = a.positive_rate {
        cfg.positive_rate = r;
    }
    let table = generate_planted_task(&cfg).map_err(|e| match e {
        Error::Config(m) => usage(m),
        other => other.into(),
    })?;
    fs::create_dir_all(&a.out)?;
    let tx = a.out.join("transactions.csv");
    let labels = a.out.join("node_labels.csv");
    table.write_csv(&tx)?;
    table.write_node_labels(&labels)?;
    let positives = table.node_labels.as_ref().map_or(0, |l| l.iter().filter(|&&v| v == 1).count());
    println!("{}: {} transactions", tx.display(), table.num_edges());
    println!("{}: {} accounts, {} positive", labels.display(), table.num_nodes(), positives);
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let cfg = effective_config(&a)?;
    println!("{}", serde_json::to_string(&cfg)?);
    let table = load_table(&a.data)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let runs = run_experiment(&table, &cfg)?;
    let records: Vec<_> = runs.iter().map(|r| r.record.clone()).collect();
    for run in &runs {
        let s = run.record.seed;
        write_json(&a.out.join(format!("record_seed{s}.json")), &run.record)?;
        run.checkpoint.save(&a.out.join(format!("checkpoint_seed{s}.json")))?;
        match (&run.record.status, run.record.test) {
            (RunStatus::Diverged { epoch, message }, _) => eprintln!("seed {s}: diverged at epoch {epoch}: {message}"),
            (_, Some(m)) => println!(
                "seed {s}: test f1 {:.4} precision {:.4} recall {:.4} pr-auc {:.4}",
                m.f1, m.precision, m.recall, m.pr_auc
            ),
            _ => {}
        }
    }
    let summary = summarize_records(&cfg, &records);
    write_json(&a.out.join("summary.json"), &summary)?;
    write_metrics_csv(&a.out.join("metrics.csv"), &records)?;
    if let Some(t) = &summary.test {
        println!("test f1 {:.4} ± {:.4} over {} seeds", t.mean.f1, t.std.f1, records.len() - summary.diverged.len());
    }
    Ok(if summary.diverged.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let split: SplitName = a.split.parse().map_err(|e: Error| usage(e.to_string()))?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let table = load_table(&a.data)?;
    let m = evaluate_checkpoint(&ckpt, &table, split)?;
    let json = serde_json::to_string_pretty(&m)?;
    println!("{json}");
    if let Some(out) = &a.out {
        fs::write(out, json + "\n")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(a: CheckArgs) -> anyhow::Result<ExitCode> {
    let run = |s: Suite| -> anyhow::Result<SuiteReport> {
        Ok(match s {
            Suite::Equivariance => checks::equivariance_suite(a.trials, a.seed, 1e-5)?,
            Suite::NodeIds => checks::node_id_suite(a.graphs.unwrap_or(200), a.seed)?,
            Suite::PortWitness => checks::port_witness_suite(&a.n, a.witness_seeds, 50)?,
            Suite::Separation => checks::separation_suite()?,
            Suite::Gradient => checks::gradient_suite(a.graphs.unwrap_or(20), a.seed, 1e-4)?,
            Suite::Complexity => checks::complexity_suite(&a.sizes, a.seed, 0.05)?,
            Suite::All => unreachable!(),
        })
    };
    let suites = if a.suite == Suite::All {
        vec![
            Suite::Equivariance,
            Suite::NodeIds,
            Suite::PortWitness,
            Suite::Separation,
            Suite::Gradient,
            Suite::Complexity,
        ]
    } else {
        vec![a.suite]
    };
    let reports = suites.into_iter().map(run).collect::<anyhow::Result<Vec<_>>>()?;
    let passed = reports.iter().all(SuiteReport::passed);
    let mut out = BTreeMap::new();
    out.insert("passed", serde_json::Value::Bool(passed));
    out.insert("suites", serde_json::to_value(&reports)?);
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
