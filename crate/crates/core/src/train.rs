//! Training, evaluation and experiment records.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    node_temporal_split, sample_neighborhood, temporal_split, to_multigraph, NormStats, Seeds, SplitSpec,
    TransactionTable,
};
use crate::error::{Error, Result};
use crate::graph::{build_reverse_index, build_support_index, Multigraph, ReverseIndex, SupportIndex};
use crate::metrics::{evaluate_scores, Metrics};
use crate::model::{Family, Model, ModelConfig, PreparedGraph, Readout, Stages};
use crate::nn::{adam_step, sigmoid, weighted_bce_loss, AdamState, ClassWeights, Mode, Preset, TrainConfig};

/// Model families exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    MegaGin,
    MegaPna,
    SingleStageGin,
    SingleStagePna,
}

impl Architecture {
    pub fn family(self) -> Family {
        match self {
            Self::MegaGin | Self::SingleStageGin => Family::Gin,
            Self::MegaPna | Self::SingleStagePna => Family::Pna,
        }
    }

    pub fn stages(self) -> Stages {
        match self {
            Self::MegaGin | Self::MegaPna => Stages::TwoStage,
            Self::SingleStageGin | Self::SingleStagePna => Stages::SingleStage,
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mega-gin" => Ok(Self::MegaGin),
            "mega-pna" => Ok(Self::MegaPna),
            "single-stage-gin" | "gin" => Ok(Self::SingleStageGin),
            "single-stage-pna" | "pna" => Ok(Self::SingleStagePna),
            other => Err(Error::Config(format!(
                "unknown model {other:?} (mega-gin, mega-pna, single-stage-gin, single-stage-pna)"
            ))),
        }
    }
}

/// Everything that determines a training run except the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: Architecture,
    pub task: Readout,
    pub bidirectional: bool,
    pub ego_ids: bool,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub class_weights: ClassWeights,
    pub epochs: usize,
    pub patience: usize,
    pub hops: usize,
    pub per_hop: usize,
    pub split: SplitSpec,
    pub seeds: Vec<u64>,
    /// Probability above which an item is predicted positive.
    pub threshold: f64,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let t = TrainConfig::preset(p);
        let model = match p {
            Preset::GinAml | Preset::GinEth => Architecture::MegaGin,
            Preset::PnaAml | Preset::PnaEth => Architecture::MegaPna,
        };
        let task = match p {
            Preset::GinAml | Preset::PnaAml => Readout::Edge,
            Preset::GinEth | Preset::PnaEth => Readout::Node,
        };
        Self {
            model,
            task,
            bidirectional: true,
            ego_ids: task == Readout::Edge,
            num_layers: t.num_layers,
            hidden_size: t.hidden_size,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            dropout: t.dropout,
            class_weights: t.class_weights,
            epochs: 80,
            patience: 10,
            hops: 2,
            per_hop: 100,
            split: SplitSpec::default(),
            seeds: (0..5).collect(),
            threshold: 0.5,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            hidden_size: self.hidden_size,
            batch_size: self.batch_size,
            dropout: self.dropout,
            class_weights: self.class_weights,
            num_layers: self.num_layers,
            seed,
        }
    }

    pub fn model_config(&self, node_features: usize, edge_features: usize) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            hidden_size: self.hidden_size,
            stages: self.model.stages(),
            bidirectional: self.bidirectional,
            ego_ids: self.ego_ids,
            readout: self.task,
            dropout: self.dropout,
            ..ModelConfig::new(node_features, edge_features).with_family(self.model.family())
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(0).validate()?;
        self.split.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("at least one epoch is required".into()));
        }
        if self.per_hop == 0 {
            return Err(Error::Config("per_hop must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::GinAml)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged { epoch: usize, message: String },
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (best validation F1).
    pub best_epoch: Option<usize>,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
    #[serde(flatten)]
    pub status: RunStatus,
    pub wall_clock_secs: f64,
}

impl ExperimentRecord {
    /// Copy with wall-clock fields zeroed, for comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Metrics,
    /// Sample standard deviation (zero for a single seed).
    pub std: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub diverged: Vec<u64>,
    pub val: Option<MetricSummary>,
    pub test: Option<MetricSummary>,
}

/// Mean and sample standard deviation of each metric.
pub fn summarize(metrics: &[Metrics]) -> Option<MetricSummary> {
    if metrics.is_empty() {
        return None;
    }
    let n = metrics.len() as f64;
    let stat = |f: fn(&Metrics) -> f64| {
        let mean = metrics.iter().map(f).sum::<f64>() / n;
        let var = if metrics.len() > 1 {
            metrics.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    let (f1, f1s) = stat(|m| m.f1);
    let (p, ps) = stat(|m| m.precision);
    let (r, rs) = stat(|m| m.recall);
    let (a, as_) = stat(|m| m.pr_auc);
    Some(MetricSummary {
        mean: Metrics {
            f1,
            precision: p,
            recall: r,
            pr_auc: a,
        },
        std: Metrics {
            f1: f1s,
            precision: ps,
            recall: rs,
            pr_auc: as_,
        },
    })
}

pub fn summarize_records(config: &ExperimentConfig, records: &[ExperimentRecord]) -> ExperimentSummary {
    let ok: Vec<&ExperimentRecord> = records.iter().filter(|r| r.status == RunStatus::Ok).collect();
    ExperimentSummary {
        config: config.clone(),
        seeds: records.iter().map(|r| r.seed).collect(),
        diverged: records.iter().filter(|r| r.status != RunStatus::Ok).map(|r| r.seed).collect(),
        val: summarize(&ok.iter().filter_map(|r| r.val).collect::<Vec<_>>()),
        test: summarize(&ok.iter().filter_map(|r| r.test).collect::<Vec<_>>()),
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model with what is needed to rebuild its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub experiment: ExperimentConfig,
    pub seed: u64,
    pub norm_stats: NormStats,
    pub model: Model,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::Input {
            path: path.display().to_string(),
            message: e.to_string(),
        })?);
        let c: Self = serde_json::from_reader(f)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        let mc = &c.model.config;
        let ec = &c.experiment;
        if mc.readout != ec.task
            || mc.stages != ec.model.stages()
            || mc.bidirectional != ec.bidirectional
            || mc.ego_ids != ec.ego_ids
            || mc.num_layers != ec.num_layers
            || mc.hidden_size != ec.hidden_size
        {
            return Err(Error::Config("checkpoint model does not match its experiment config".into()));
        }
        Ok(c)
    }
}

/// One evaluation phase: a graph and the labelled items scored on it.
#[derive(Debug, Clone)]
struct Phase {
    graph: Multigraph,
    support: SupportIndex,
    reverse: ReverseIndex,
    items: Vec<usize>,
    labels: Vec<u8>,
}

impl Phase {
    fn new(graph: Multigraph, items: Vec<usize>, labels: Vec<u8>) -> Result<Self> {
        let support = build_support_index(&graph);
        let reverse = build_reverse_index(&graph, &support)?;
        Ok(Self {
            graph,
            support,
            reverse,
            items,
            labels,
        })
    }
}

/// Train / validation / test phases of a dataset.
#[derive(Debug, Clone)]
pub struct PreparedData {
    train: Phase,
    val: Phase,
    test: Phase,
    pub norm_stats: NormStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

impl PreparedData {
    fn phase(&self, s: SplitName) -> &Phase {
        match s {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn train_graph(&self) -> &Multigraph {
        &self.train.graph
    }
}

/// Build the phases. Edge tasks grow the graph with time (train edges;
/// train + val; everything) and score the newest block. Node tasks use the
/// whole graph and split nodes by first appearance. Normalisation uses the
/// training edges only, unless `stats` is given.
pub fn prepare_data(
    table: &TransactionTable,
    task: Readout,
    split: &SplitSpec,
    stats: Option<NormStats>,
) -> Result<PreparedData> {
    let edge_split = temporal_split(table, split)?;
    let norm_stats = stats.unwrap_or_else(|| NormStats::fit(table, &edge_split.train));
    let (full, labels) = to_multigraph(table, &norm_stats)?;
    let (train, val, test) = match task {
        Readout::Edge => {
            let el = labels
                .edge
                .ok_or_else(|| Error::Config("edge task needs per-transaction labels".into()))?;
            let phase = |keep: Vec<usize>, score_from: usize| -> Result<Phase> {
                let mut keep = keep;
                keep.sort_unstable();
                let graph = Multigraph::new(
                    full.num_nodes(),
                    full.node_features().to_owned(),
                    keep.iter().map(|&k| full.edges()[k]).collect(),
                    full.edge_features().select(ndarray::Axis(0), &keep),
                )?;
                let scored: std::collections::HashSet<usize> = match score_from {
                    0 => edge_split.train.iter().copied().collect(),
                    1 => edge_split.val.iter().copied().collect(),
                    _ => edge_split.test.iter().copied().collect(),
                };
                let items: Vec<usize> = (0..keep.len()).filter(|&i| scored.contains(&keep[i])).collect();
                let labs = items.iter().map(|&i| el[keep[i]]).collect();
                Phase::new(graph, items, labs)
            };
            let tv: Vec<usize> = edge_split.train.iter().chain(&edge_split.val).copied().collect();
            (
                phase(edge_split.train.clone(), 0)?,
                phase(tv, 1)?,
                phase((0..full.num_edges()).collect(), 2)?,
            )
        }
        Readout::Node => {
            let nl = labels
                .node
                .ok_or_else(|| Error::Config("node task needs node labels".into()))?;
            let ns = node_temporal_split(table, split)?;
            let phase = |items: Vec<usize>| {
                let labs = items.iter().map(|&v| nl[v]).collect();
                Phase::new(full.clone(), items, labs)
            };
            (phase(ns.train)?, phase(ns.val)?, phase(ns.test)?)
        }
    };
    Ok(PreparedData {
        train,
        val,
        test,
        norm_stats,
    })
}

fn mix(a: u64, b: u64) -> u64 {
    crate::nn::splitmix(a ^ crate::nn::splitmix(b))
}

/// Sampled batch ready for the model, with the positions of its seed items
/// in the model output.
fn make_batch(phase: &Phase, chunk: &[usize], cfg: &ExperimentConfig, rng_seed: u64) -> Result<(PreparedGraph, Vec<usize>, Vec<usize>)> {
    let seeds = match cfg.task {
        Readout::Edge => Seeds::Edges(chunk.to_vec()),
        Readout::Node => Seeds::Nodes(chunk.to_vec()),
    };
    let b = sample_neighborhood(&phase.graph, &phase.support, &phase.reverse, &seeds, cfg.hops, cfg.per_hop, rng_seed)?;
    let sub = b.subgraph(&phase.graph)?;
    Ok((PreparedGraph::new(sub), b.seed_local, b.roots))
}

/// Probability scores and mean weighted loss of `model` on a phase.
fn score_phase(model: &Model, phase: &Phase, cfg: &ExperimentConfig, salt: u64) -> Result<(Vec<f64>, f64)> {
    let weights = cfg.class_weights;
    let mut scores = vec![0.0; phase.items.len()];
    let mut loss = 0.0;
    let positions: Vec<usize> = (0..phase.items.len()).collect();
    for (b, chunk) in positions.chunks(cfg.batch_size).enumerate() {
        let items: Vec<usize> = chunk.iter().map(|&i| phase.items[i]).collect();
        let (pg, seed_local, roots) = make_batch(phase, &items, cfg, mix(salt, b as u64))?;
        let (out, _) = model.forward(&pg, &roots, Mode::Eval)?;
        let logits: Array1<f64> = seed_local.iter().map(|&i| out.logits[i]).collect();
        let labels: Vec<u8> = chunk.iter().map(|&i| phase.labels[i]).collect();
        let (l, _) = weighted_bce_loss(logits.view(), &labels, weights)?;
        loss += l * chunk.len() as f64;
        for (&i, &z) in chunk.iter().zip(logits.iter()) {
            scores[i] = sigmoid(z);
        }
    }
    Ok((scores, loss / phase.items.len().max(1) as f64))
}

/// Metrics of `model` on one split.
pub fn evaluate_model(model: &Model, data: &PreparedData, cfg: &ExperimentConfig, split: SplitName) -> Result<Metrics> {
    let phase = data.phase(split);
    let (scores, _) = score_phase(model, phase, cfg, 0xE7A1 + split as u64)?;
    evaluate_scores(&scores, &phase.labels, cfg.threshold)
}

/// Result of training one seed.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub record: ExperimentRecord,
    pub checkpoint: Checkpoint,
}

/// Train one seed with Adam, keeping the parameters of the epoch with the
/// best validation F1 and stopping after `patience` epochs without gain.
pub fn train_seed(data: &PreparedData, cfg: &ExperimentConfig, seed: u64) -> Result<TrainedRun> {
    let start = Instant::now();
    cfg.validate()?;
    let g = data.train_graph();
    let mut mcfg = cfg.model_config(g.node_dim(), g.edge_dim());
    mcfg.calibrate_degrees(g);
    let mut model = Model::new(mcfg, seed)?;
    let mut params = model.params.to_flat();
    let mut adam = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5EED));

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>, Metrics)> = None;
    let mut status = RunStatus::Ok;
    let mut stale = 0;
    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.items.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<usize> = chunk.iter().map(|&i| data.train.items[i]).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| data.train.labels[i]).collect();
            let batch_seed = mix(mix(seed, epoch as u64), b as u64);
            let (pg, seed_local, roots) = make_batch(&data.train, &items, cfg, batch_seed)?;
            let (out, cache) = model.forward(&pg, &roots, Mode::Train { seed: batch_seed })?;
            let logits: Array1<f64> = seed_local.iter().map(|&i| out.logits[i]).collect();
            let (loss, grad) = weighted_bce_loss(logits.view(), &labels, cfg.class_weights)?;
            if !loss.is_finite() {
                status = RunStatus::Diverged {
                    epoch,
                    message: format!("non-finite training loss in batch {b}"),
                };
                break 'outer;
            }
            let mut full = Array1::zeros(out.logits.len());
            for (&i, &gv) in seed_local.iter().zip(grad.iter()) {
                full[i] += gv;
            }
            let grads = model.backward(&pg, &cache, &full)?.to_flat();
            adam_step(&mut params, &grads, &mut adam, cfg.learning_rate)?;
            if params.iter().any(|v| !v.is_finite()) {
                status = RunStatus::Diverged {
                    epoch,
                    message: "non-finite parameters after update".into(),
                };
                break 'outer;
            }
            model.params.set_flat(&params)?;
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / data.train.items.len().max(1) as f64;
        let (scores, val_loss) = score_phase(&model, &data.val, cfg, 0xE7A1 + SplitName::Val as u64)?;
        let vm = evaluate_scores(&scores, &data.val.labels, cfg.threshold)?;
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_f1: vm.f1,
        });
        if !val_loss.is_finite() {
            status = RunStatus::Diverged {
                epoch,
                message: "non-finite validation loss".into(),
            };
            break;
        }
        if best.as_ref().is_none_or(|b| vm.f1 > b.0) {
            best = Some((vm.f1, epoch, params.clone(), vm));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, val, test) = match (&status, &best) {
        (RunStatus::Ok, Some((_, e, p, vm))) => {
            model.params.set_flat(p)?;
            (Some(*e), Some(*vm), Some(evaluate_model(&model, data, cfg, SplitName::Test)?))
        }
        _ => (best.as_ref().map(|b| b.1), best.as_ref().map(|b| b.3), None),
    };
    let record = ExperimentRecord {
        config: cfg.clone(),
        seed,
        epochs,
        best_epoch,
        val,
        test,
        status,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        experiment: cfg.clone(),
        seed,
        norm_stats: data.norm_stats,
        model,
    };
    Ok(TrainedRun { record, checkpoint })
}

/// Train every configured seed (concurrently) and return runs in seed order.
pub fn run_experiment(table: &TransactionTable, cfg: &ExperimentConfig) -> Result<Vec<TrainedRun>> {
    cfg.validate()?;
    let data = prepare_data(table, cfg.task, &cfg.split, None)?;
    cfg.seeds.par_iter().map(|&s| train_seed(&data, cfg, s)).collect()
}

/// Metrics of a checkpoint on a dataset, rebuilt with the checkpoint's
/// normalisation.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, table: &TransactionTable, split: SplitName) -> Result<Metrics> {
    let cfg = &ckpt.experiment;
    let data = prepare_data(table, cfg.task, &cfg.split, Some(ckpt.norm_stats))?;
    let g = data.train_graph();
    let mc = &ckpt.model.config;
    if mc.node_features != g.node_dim() || mc.edge_features != g.edge_dim() || mc.readout != cfg.task {
        return Err(Error::Config(format!(
            "checkpoint expects {} node / {} edge features for {:?} readout; dataset gives {} / {}",
            mc.node_features,
            mc.edge_features,
            mc.readout,
            g.node_dim(),
            g.edge_dim()
        )));
    }
    evaluate_model(&ckpt.model, &data, cfg, split)
}

/// `seed,split,f1,precision,recall,pr_auc` rows.
pub fn write_metrics_csv(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "split", "f1", "precision", "recall", "pr_auc"])?;
    for r in records {
        for (name, m) in [("val", r.val), ("test", r.test)] {
            if let Some(m) = m {
                w.write_record([
                    r.seed.to_string(),
                    name.to_string(),
                    m.f1.to_string(),
                    m.precision.to_string(),
                    m.recall.to_string(),
                    m.pr_auc.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_planted_task, PlantedConfig, PlantedKind, Transaction};

    #[test]
    fn presets_map_to_architectures_and_tasks() {
        let c = ExperimentConfig::preset(Preset::GinAml);
        assert_eq!((c.learning_rate, c.hidden_size, c.batch_size, c.dropout), (0.003, 64, 8192, 0.1));
        assert_eq!((c.class_weights.negative, c.class_weights.positive), (1.0, 6.27));
        assert_eq!(c.seeds.len(), 5);
        assert_eq!((c.hops, c.per_hop), (2, 100));
        assert_eq!(ExperimentConfig::default(), c);
        assert_eq!("single-stage-gin".parse::<Architecture>().unwrap(), Architecture::SingleStageGin);
    }

    fn small_cfg(task: Readout) -> ExperimentConfig {
        ExperimentConfig {
            task,
            hidden_size: 8,
            batch_size: 64,
            epochs: 3,
            seeds: vec![1, 2],
            learning_rate: 0.01,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn node_task_runs_and_is_deterministic() {
        let t = generate_planted_task(&PlantedConfig::new(PlantedKind::OutNeighborCount, 120, 0)).unwrap();
        let cfg = ExperimentConfig {
            ego_ids: false,
            ..small_cfg(Readout::Node)
        };
        let a = run_experiment(&t, &cfg).unwrap();
        let b = run_experiment(&t, &cfg).unwrap();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.record.without_timing(), y.record.without_timing());
            let m = x.record.test.unwrap();
            assert!((0.0..=1.0).contains(&m.f1));
        }
        let ck = &a[0].checkpoint;
        let m = evaluate_checkpoint(ck, &t, SplitName::Test).unwrap();
        assert_eq!(m, a[0].record.test.unwrap());
    }

    #[test]
    fn edge_task_runs() {
        let mut t = generate_planted_task(&PlantedConfig::new(PlantedKind::MaxOfSums, 60, 0)).unwrap();
        for (i, r) in t.rows.iter_mut().enumerate() {
            r.label = Some(u8::from(i % 7 == 0));
        }
        let runs = run_experiment(&t, &small_cfg(Readout::Edge)).unwrap();
        let summary = summarize_records(&runs[0].record.config, &runs.iter().map(|r| r.record.clone()).collect::<Vec<_>>());
        assert_eq!(summary.seeds, vec![1, 2]);
        assert!(summary.test.is_some());
    }

    #[test]
    fn missing_labels_are_config_errors() {
        let t = TransactionTable {
            accounts: vec!["a".into(), "b".into()],
            rows: (0..20)
                .map(|i| Transaction {
                    src: 0,
                    dst: 1,
                    timestamp: i,
                    amount: 1.0,
                    categorical: vec![],
                    label: None,
                })
                .collect(),
            categorical_names: vec![],
            categorical_levels: vec![],
            node_labels: None,
        };
        assert!(matches!(prepare_data(&t, Readout::Edge, &SplitSpec::default(), None), Err(Error::Config(_))));
        assert!(matches!(prepare_data(&t, Readout::Node, &SplitSpec::default(), None), Err(Error::Config(_))));
    }

    #[test]
    fn summary_statistics() {
        let m = |f1: f64| Metrics {
            f1,
            precision: f1,
            recall: f1,
            pr_auc: f1,
        };
        let s = summarize(&[m(0.2), m(0.4)]).unwrap();
        assert!((s.mean.f1 - 0.3).abs() < 1e-12);
        assert!((s.std.f1 - (0.02f64).sqrt()).abs() < 1e-12);
        assert_eq!(summarize(&[m(0.5)]).unwrap().std.f1, 0.0);
    }
}
