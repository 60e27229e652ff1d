//! Transaction tables, splits, neighbourhood sampling and synthetic tasks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Multigraph, ReverseIndex, SupportIndex};

/// One transaction; accounts are dense indices into [`TransactionTable::accounts`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub src: usize,
    pub dst: usize,
    pub timestamp: i64,
    pub amount: f64,
    /// Dictionary codes, one per categorical column.
    pub categorical: Vec<u32>,
    pub label: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionTable {
    pub accounts: Vec<String>,
    pub rows: Vec<Transaction>,
    pub categorical_names: Vec<String>,
    /// Levels of each categorical column, indexed by code.
    pub categorical_levels: Vec<Vec<String>>,
    pub node_labels: Option<Vec<u8>>,
}

impl TransactionTable {
    pub fn num_nodes(&self) -> usize {
        self.accounts.len()
    }

    pub fn num_edges(&self) -> usize {
        self.rows.len()
    }

    pub fn has_edge_labels(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.label.is_some())
    }

    /// Write in the generic (`eth`) layout, categoricals and edge labels
    /// appended when present.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["src".to_string(), "dst".into(), "timestamp".into(), "amount".into()];
        header.extend(self.categorical_names.iter().cloned());
        let labels = self.has_edge_labels();
        if labels {
            header.push("label".into());
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                self.accounts[r.src].clone(),
                self.accounts[r.dst].clone(),
                r.timestamp.to_string(),
                r.amount.to_string(),
            ];
            for (c, &code) in r.categorical.iter().enumerate() {
                rec.push(self.categorical_levels[c][code as usize].clone());
            }
            if labels {
                rec.push(r.label.unwrap_or(0).to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_node_labels(&self, path: &Path) -> Result<()> {
        let labels = self
            .node_labels
            .as_ref()
            .ok_or_else(|| Error::Config("table has no node labels".into()))?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["account", "label"])?;
        for (a, l) in self.accounts.iter().zip(labels) {
            w.write_record([a.as_str(), &l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TimestampFormat {
    Integer,
    /// chrono format string, read as UTC.
    DateTime { format: String },
}

/// Maps CSV columns to roles. Account keys join several columns with `/`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub src: Vec<String>,
    pub dst: Vec<String>,
    pub timestamp: String,
    pub timestamp_format: TimestampFormat,
    pub amount: String,
    pub categorical: Vec<String>,
    pub label: Option<String>,
}

impl Schema {
    /// Layout of the public synthetic AML release. The second `Account`
    /// header is addressed as `Account.1`.
    pub fn aml() -> Self {
        Self {
            src: vec!["From Bank".into(), "Account".into()],
            dst: vec!["To Bank".into(), "Account.1".into()],
            timestamp: "Timestamp".into(),
            timestamp_format: TimestampFormat::DateTime {
                format: "%Y/%m/%d %H:%M".into(),
            },
            amount: "Amount Received".into(),
            categorical: vec!["Receiving Currency".into(), "Payment Format".into()],
            label: Some("Is Laundering".into()),
        }
    }

    /// Plain `src,dst,timestamp,amount`, node labels in a sidecar file.
    pub fn eth() -> Self {
        Self {
            src: vec!["src".into()],
            dst: vec!["dst".into()],
            timestamp: "timestamp".into(),
            timestamp_format: TimestampFormat::Integer,
            amount: "amount".into(),
            categorical: Vec::new(),
            label: None,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "aml" => Ok(Self::aml()),
            "eth" => Ok(Self::eth()),
            other => Err(Error::Config(format!("unknown schema preset {other:?} (aml, eth)"))),
        }
    }
}

/// Suffix repeated header names with `.1`, `.2`, ….
fn dedup_headers(raw: &csv::StringRecord) -> Vec<String> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    raw.iter()
        .map(|h| {
            let n = seen.entry(h).or_insert(0);
            let name = if *n == 0 { h.to_string() } else { format!("{h}.{n}") };
            *n += 1;
            name
        })
        .collect()
}

fn parse_label(s: &str) -> Option<u8> {
    match s.trim() {
        "0" | "false" | "False" => Some(0),
        "1" | "true" | "True" => Some(1),
        _ => None,
    }
}

/// Read a transaction CSV. Accounts are numbered in order of first
/// appearance; categorical levels likewise.
pub fn load_transactions(path: &Path, schema: &Schema) -> Result<TransactionTable> {
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Input {
            path: shown.clone(),
            message: e.to_string(),
        })?;
    let headers = dedup_headers(reader.headers()?);
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Input {
            path: shown.clone(),
            message: format!("missing column {name:?}"),
        })
    };
    let src_cols = schema.src.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let dst_cols = schema.dst.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let ts_col = col(&schema.timestamp)?;
    let amount_col = col(&schema.amount)?;
    let cat_cols = schema.categorical.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let label_col = schema.label.as_deref().map(col).transpose()?;

    let mut accounts = Vec::new();
    let mut account_ix: HashMap<String, usize> = HashMap::new();
    let mut levels: Vec<Vec<String>> = vec![Vec::new(); cat_cols.len()];
    let mut level_ix: Vec<HashMap<String, u32>> = vec![HashMap::new(); cat_cols.len()];
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // Row numbers are 1-based data rows (header excluded).
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Ingest {
            path: shown.clone(),
            row,
            message: e.to_string(),
        })?;
        let bad = |message: String| Error::Ingest {
            path: shown.clone(),
            row,
            message,
        };
        let mut account = |cols: &[usize]| {
            let key = cols.iter().map(|&c| rec.get(c).unwrap_or("")).collect::<Vec<_>>().join("/");
            let next = accounts.len();
            *account_ix.entry(key.clone()).or_insert_with(|| {
                accounts.push(key);
                next
            })
        };
        let src = account(&src_cols);
        let dst = account(&dst_cols);
        let ts_raw = rec.get(ts_col).unwrap_or("");
        let timestamp = match &schema.timestamp_format {
            TimestampFormat::Integer => ts_raw
                .parse::<i64>()
                .map_err(|_| bad(format!("timestamp {ts_raw:?} is not an integer")))?,
            TimestampFormat::DateTime { format } => chrono::NaiveDateTime::parse_from_str(ts_raw, format)
                .map_err(|e| bad(format!("timestamp {ts_raw:?}: {e}")))?
                .and_utc()
                .timestamp(),
        };
        let amount_raw = rec.get(amount_col).unwrap_or("");
        let amount: f64 = amount_raw
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| bad(format!("amount {amount_raw:?} is not a finite number")))?;
        let categorical = cat_cols
            .iter()
            .enumerate()
            .map(|(c, &ci)| {
                let v = rec.get(ci).unwrap_or("").to_string();
                let next = levels[c].len() as u32;
                *level_ix[c].entry(v.clone()).or_insert_with(|| {
                    levels[c].push(v);
                    next
                })
            })
            .collect();
        let label = match label_col {
            Some(c) => {
                let raw = rec.get(c).unwrap_or("");
                Some(parse_label(raw).ok_or_else(|| bad(format!("label {raw:?} is not 0/1")))?)
            }
            None => None,
        };
        rows.push(Transaction {
            src,
            dst,
            timestamp,
            amount,
            categorical,
            label,
        });
    }
    if rows.is_empty() {
        return Err(Error::Input {
            path: shown,
            message: "no transactions".into(),
        });
    }
    Ok(TransactionTable {
        accounts,
        rows,
        categorical_names: schema.categorical.clone(),
        categorical_levels: levels,
        node_labels: None,
    })
}

/// Attach node labels from an `account,label` file. Accounts absent from the
/// transactions become isolated nodes; accounts without a row get label 0.
pub fn load_node_labels(path: &Path, table: &mut TransactionTable) -> Result<()> {
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Input {
            path: shown.clone(),
            message: e.to_string(),
        })?;
    let headers = dedup_headers(reader.headers()?);
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Input {
            path: shown.clone(),
            message: format!("missing column {name:?}"),
        })
    };
    let (acol, lcol) = (find("account")?, find("label")?);
    let mut index: HashMap<String, usize> = table
        .accounts
        .iter()
        .enumerate()
        .map(|(i, a)| (a.clone(), i))
        .collect();
    let mut labels = vec![0u8; table.accounts.len()];
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Ingest {
            path: shown.clone(),
            row,
            message: e.to_string(),
        })?;
        let account = rec.get(acol).unwrap_or("").to_string();
        let raw = rec.get(lcol).unwrap_or("");
        let label = parse_label(raw).ok_or_else(|| Error::Ingest {
            path: shown.clone(),
            row,
            message: format!("label {raw:?} is not 0/1"),
        })?;
        let ix = *index.entry(account.clone()).or_insert_with(|| {
            table.accounts.push(account);
            labels.push(0);
            labels.len() - 1
        });
        labels[ix] = label;
    }
    table.node_labels = Some(labels);
    Ok(())
}

/// Mean / standard deviation of timestamp and amount.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub timestamp_mean: f64,
    pub timestamp_std: f64,
    pub amount_mean: f64,
    pub amount_std: f64,
}

impl NormStats {
    /// Population statistics over the given rows (all rows when empty).
    pub fn fit(t: &TransactionTable, rows: &[usize]) -> Self {
        let all: Vec<usize>;
        let rows = if rows.is_empty() {
            all = (0..t.rows.len()).collect();
            &all
        } else {
            rows
        };
        let stats = |f: &dyn Fn(&Transaction) -> f64| {
            let n = rows.len() as f64;
            let mean = rows.iter().map(|&r| f(&t.rows[r])).sum::<f64>() / n;
            let var = rows.iter().map(|&r| (f(&t.rows[r]) - mean).powi(2)).sum::<f64>() / n;
            (mean, var.max(0.0).sqrt())
        };
        let (timestamp_mean, timestamp_std) = stats(&|r| r.timestamp as f64);
        let (amount_mean, amount_std) = stats(&|r| r.amount);
        Self {
            timestamp_mean,
            timestamp_std,
            amount_mean,
            amount_std,
        }
    }
}

fn zscore(v: f64, mean: f64, std: f64) -> f64 {
    if std > 0.0 {
        (v - mean) / std
    } else {
        0.0
    }
}

/// Edge and node labels carried alongside a graph.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub edge: Option<Vec<u8>>,
    pub node: Option<Vec<u8>>,
}

/// Edge features `[z(timestamp), z(amount), one-hot categoricals…]`; node
/// features a constant 1 column.
pub fn to_multigraph(t: &TransactionTable, stats: &NormStats) -> Result<(Multigraph, Labels)> {
    let widths: Vec<usize> = t.categorical_levels.iter().map(Vec::len).collect();
    let width = 2 + widths.iter().sum::<usize>();
    let mut ef = Array2::zeros((t.rows.len(), width));
    for (k, r) in t.rows.iter().enumerate() {
        ef[[k, 0]] = zscore(r.timestamp as f64, stats.timestamp_mean, stats.timestamp_std);
        ef[[k, 1]] = zscore(r.amount, stats.amount_mean, stats.amount_std);
        let mut offset = 2;
        for (c, &code) in r.categorical.iter().enumerate() {
            ef[[k, offset + code as usize]] = 1.0;
            offset += widths[c];
        }
    }
    let edges = t.rows.iter().map(|r| (r.src, r.dst)).collect();
    let g = Multigraph::with_unit_nodes(t.num_nodes(), edges, ef)?;
    let labels = Labels {
        edge: t
            .has_edge_labels()
            .then(|| t.rows.iter().map(|r| r.label.unwrap_or(0)).collect()),
        node: t.node_labels.clone(),
    };
    Ok((g, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let s = Self { train, val, test };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("split fractions must be positive, got {f:?}")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {f:?}")));
        }
        Ok(())
    }

    fn sizes(&self, total: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let train = (self.train * total as f64).round() as usize;
        let val = ((self.train + self.val) * total as f64).round() as usize - train;
        let test = total.saturating_sub(train + val);
        if train == 0 || val == 0 || test == 0 {
            return Err(Error::Infeasible(format!(
                "{total} items cannot fill three non-empty splits"
            )));
        }
        Ok([train, val, test])
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.65,
            val: 0.15,
            test: 0.20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Row indices in `(timestamp, row)` order.
pub fn time_order(t: &TransactionTable) -> Vec<usize> {
    let mut order: Vec<usize> = (0..t.rows.len()).collect();
    order.sort_by_key(|&k| (t.rows[k].timestamp, k));
    order
}

fn cut(order: Vec<usize>, sizes: [usize; 3]) -> Split {
    let mut it = order.into_iter();
    let train = it.by_ref().take(sizes[0]).collect();
    let val = it.by_ref().take(sizes[1]).collect();
    Split {
        train,
        val,
        test: it.collect(),
    }
}

/// Contiguous train / val / test blocks of the time-ordered edges.
pub fn temporal_split(t: &TransactionTable, s: &SplitSpec) -> Result<Split> {
    let sizes = s.sizes(t.rows.len())?;
    Ok(cut(time_order(t), sizes))
}

/// Nodes ordered by their first transaction (isolated nodes last, by index)
/// and cut like [`temporal_split`].
pub fn node_temporal_split(t: &TransactionTable, s: &SplitSpec) -> Result<Split> {
    let mut first = vec![None; t.num_nodes()];
    for k in time_order(t) {
        let r = &t.rows[k];
        for v in [r.src, r.dst] {
            first[v].get_or_insert(k);
        }
    }
    let mut seen = vec![false; t.num_nodes()];
    let mut order = Vec::with_capacity(t.num_nodes());
    for k in time_order(t) {
        let r = &t.rows[k];
        for v in [r.src, r.dst] {
            if !std::mem::replace(&mut seen[v], true) {
                order.push(v);
            }
        }
    }
    order.extend((0..t.num_nodes()).filter(|&v| first[v].is_none()));
    let sizes = s.sizes(order.len())?;
    Ok(cut(order, sizes))
}

/// What a batch is centred on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Seeds {
    Edges(Vec<usize>),
    Nodes(Vec<usize>),
}

/// A sampled subgraph with its maps into the parent graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSample {
    /// Parent index of each local node.
    pub nodes: Vec<usize>,
    /// Parent index of each local edge, ascending.
    pub edges: Vec<usize>,
    /// Local index of each seed item (edge or node).
    pub seed_local: Vec<usize>,
    /// Local nodes marked as egos: seed nodes, or seed edge endpoints.
    pub roots: Vec<usize>,
    /// Hop at which each local node was first reached.
    pub node_hop: Vec<usize>,
}

impl BatchSample {
    pub fn subgraph(&self, g: &Multigraph) -> Result<Multigraph> {
        let local: HashMap<usize, usize> = self.nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let edges = self
            .edges
            .iter()
            .map(|&k| {
                let (s, d) = g.edges()[k];
                (local[&s], local[&d])
            })
            .collect();
        Multigraph::new(
            self.nodes.len(),
            g.node_features().select(ndarray::Axis(0), &self.nodes),
            edges,
            g.edge_features().select(ndarray::Axis(0), &self.edges),
        )
    }
}

/// Breadth-limited expansion over both edge directions. Each node keeps at
/// most `per_hop` distinct neighbours (uniformly drawn); every pair between
/// a node and a kept neighbour contributes all of its parallel edges. Seed
/// edges always bring their whole parallel group.
pub fn sample_neighborhood(
    g: &Multigraph,
    supp: &SupportIndex,
    rev: &ReverseIndex,
    seeds: &Seeds,
    hops: usize,
    per_hop: usize,
    rng_seed: u64,
) -> Result<BatchSample> {
    if per_hop == 0 {
        return Err(Error::Config("per_hop must be at least 1".into()));
    }
    if supp.num_edges() != g.num_edges() || rev.support().num_edges() != g.num_edges() {
        return Err(Error::Precondition("indices do not belong to this graph".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut node_local: HashMap<usize, usize> = HashMap::new();
    let mut nodes = Vec::new();
    let mut node_hop = Vec::new();
    let mut add_node = |v: usize, hop: usize, nodes: &mut Vec<usize>, node_hop: &mut Vec<usize>| {
        *node_local.entry(v).or_insert_with(|| {
            nodes.push(v);
            node_hop.push(hop);
            nodes.len() - 1
        })
    };
    let mut pairs: BTreeSet<usize> = BTreeSet::new();
    let mut roots = Vec::new();
    match seeds {
        Seeds::Edges(es) => {
            for &k in es {
                if k >= g.num_edges() {
                    return Err(Error::Structural(format!("seed edge {k} out of range")));
                }
                let (s, d) = g.edges()[k];
                roots.push(add_node(s, 0, &mut nodes, &mut node_hop));
                roots.push(add_node(d, 0, &mut nodes, &mut node_hop));
                pairs.insert(supp.edge_to_pair()[k]);
            }
        }
        Seeds::Nodes(vs) => {
            for &v in vs {
                if v >= g.num_nodes() {
                    return Err(Error::Structural(format!("seed node {v} out of range")));
                }
                roots.push(add_node(v, 0, &mut nodes, &mut node_hop));
            }
        }
    }
    roots.sort_unstable();
    roots.dedup();

    let mut frontier: Vec<usize> = nodes.clone();
    for hop in 1..=hops {
        let mut next = Vec::new();
        for &v in &frontier {
            // Distinct neighbours with the pairs linking them to v.
            let mut nb: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &p in supp.out_pairs().group(v) {
                nb.entry(supp.pairs()[p].1).or_default().push(p);
            }
            for &p in supp.in_pairs().group(v) {
                nb.entry(supp.pairs()[p].0).or_default().push(p);
            }
            let nb: Vec<(usize, Vec<usize>)> = nb.into_iter().collect();
            let chosen: Vec<usize> = if nb.len() > per_hop {
                let mut ix = index::sample(&mut rng, nb.len(), per_hop).into_vec();
                ix.sort_unstable();
                ix
            } else {
                (0..nb.len()).collect()
            };
            for i in chosen {
                let (u, ps) = &nb[i];
                pairs.extend(ps.iter().copied());
                let before = nodes.len();
                add_node(*u, hop, &mut nodes, &mut node_hop);
                if nodes.len() > before {
                    next.push(*u);
                }
            }
        }
        frontier = next;
    }
    let mut edges: Vec<usize> = pairs.iter().flat_map(|&p| supp.group(p).iter().copied()).collect();
    edges.sort_unstable();
    let seed_local = match seeds {
        Seeds::Edges(es) => {
            let pos: HashMap<usize, usize> = edges.iter().enumerate().map(|(i, &k)| (k, i)).collect();
            es.iter().map(|k| pos[k]).collect()
        }
        Seeds::Nodes(vs) => vs.iter().map(|v| node_local[v]).collect(),
    };
    Ok(BatchSample {
        nodes,
        edges,
        seed_local,
        roots,
        node_hop,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantedKind {
    /// Positive iff the sender with the largest total is not the sender of
    /// the largest single payment.
    MaxOfSums,
    /// Positive iff the number of distinct receivers exceeds the threshold.
    OutNeighborCount,
}

impl std::str::FromStr for PlantedKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-of-sums" | "max_of_sums" => Ok(Self::MaxOfSums),
            "out-neighbor-count" | "out_neighbor_count" => Ok(Self::OutNeighborCount),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (max-of-sums, out-neighbor-count)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub num_nodes: usize,
    /// Distinct senders per receiver (max-of-sums), or the out-neighbour
    /// threshold (out-neighbor-count).
    pub senders_per_node: usize,
    /// Payments per sender (max-of-sums), or the largest multiplicity per
    /// pair (out-neighbor-count).
    pub payments_per_sender: usize,
    pub task: PlantedKind,
    pub seed: u64,
    /// Target share of positive nodes.
    pub positive_rate: f64,
    /// Smallest allowed gap between two sender totals, relative to the mean
    /// sender total (max-of-sums only).
    #[serde(default)]
    pub total_margin: f64,
}

impl PlantedConfig {
    pub fn new(task: PlantedKind, num_nodes: usize, seed: u64) -> Self {
        let (senders_per_node, payments_per_sender) = match task {
            PlantedKind::MaxOfSums => (2, 3),
            PlantedKind::OutNeighborCount => (3, 3),
        };
        Self {
            num_nodes,
            senders_per_node,
            payments_per_sender,
            task,
            seed,
            positive_rate: 0.25,
            total_margin: 0.15,
        }
    }
}

const MAX_DRAWS: usize = 10_000;

/// Label of one receiver from its per-sender payment lists.
pub fn max_of_sums_label(groups: &[Vec<f64>]) -> u8 {
    let total = |g: &Vec<f64>| g.iter().sum::<f64>();
    let peak = |g: &Vec<f64>| g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let by = |f: &dyn Fn(&Vec<f64>) -> f64| {
        (0..groups.len())
            .max_by(|&a, &b| f(&groups[a]).total_cmp(&f(&groups[b])))
            .expect("at least one sender")
    };
    u8::from(by(&total) != by(&peak))
}

/// Every way to deal `amounts` into `k` groups of `p`, up to group order,
/// with the label of each.
fn partition_labels(amounts: &[f64], k: usize, p: usize) -> Vec<(Vec<Vec<f64>>, u8)> {
    fn rec(left: Vec<f64>, k: usize, p: usize, acc: &mut Vec<Vec<f64>>, out: &mut Vec<Vec<Vec<f64>>>) {
        if left.is_empty() {
            out.push(acc.clone());
            return;
        }
        // The first remaining amount anchors the next group.
        let (head, rest) = (left[0], &left[1..]);
        let n = rest.len();
        let mut choose = |mask: &[usize]| {
            let mut g = vec![head];
            g.extend(mask.iter().map(|&i| rest[i]));
            let remaining = (0..n).filter(|i| !mask.contains(i)).map(|i| rest[i]).collect();
            acc.push(g);
            rec(remaining, k, p, acc, out);
            acc.pop();
        };
        for_each_combination(n, p - 1, &mut choose);
    }
    let mut out = Vec::new();
    rec(amounts.to_vec(), k, p, &mut Vec::new(), &mut out);
    out.into_iter()
        .map(|gs| {
            let l = max_of_sums_label(&gs);
            (gs, l)
        })
        .collect()
}

fn for_each_combination(n: usize, r: usize, f: &mut dyn FnMut(&[usize])) {
    fn go(start: usize, n: usize, r: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if cur.len() == r {
            f(cur);
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, r, cur, f);
            cur.pop();
        }
    }
    go(0, n, r, &mut Vec::new(), f);
}

fn distinct_others<R: Rng>(rng: &mut R, n: usize, exclude: usize, count: usize) -> Vec<usize> {
    index::sample(rng, n - 1, count)
        .into_iter()
        .map(|i| if i >= exclude { i + 1 } else { i })
        .collect()
}

/// Synthetic transaction table with planted node labels.
///
/// For `MaxOfSums` every node receives `p` payments from each of `k`
/// distinct senders. The multiset of incoming amounts is drawn first and
/// then dealt among senders so that the requested label holds; multisets
/// that cannot yield both labels are redrawn. The amounts alone therefore
/// carry no information about the label.
///
/// For `OutNeighborCount` a `positive_rate` share of nodes pay between
/// `τ + 1` and `2τ` distinct receivers, the rest between 1 and `τ`; each
/// pair carries 1 to `payments_per_sender` payments and receivers are
/// uniform, so incoming edges are uninformative.
pub fn generate_planted_task(cfg: &PlantedConfig) -> Result<TransactionTable> {
    let n = cfg.num_nodes;
    let k = cfg.senders_per_node;
    let p = cfg.payments_per_sender;
    if n < 2 || k == 0 || p == 0 {
        return Err(Error::Config("node, sender and payment counts must be at least 1 (2 nodes)".into()));
    }
    if !(0.0..=1.0).contains(&cfg.positive_rate) {
        return Err(Error::Config("positive rate must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    let mut labels = vec![0u8; n];
    let payment = |rng: &mut ChaCha8Rng, src: usize, dst: usize, amount: f64| Transaction {
        src,
        dst,
        timestamp: rng.random_range(0..1_000_000),
        amount,
        categorical: Vec::new(),
        label: None,
    };
    match cfg.task {
        PlantedKind::MaxOfSums => {
            if k < 2 {
                return Err(Error::Config("max-of-sums needs at least 2 senders per node".into()));
            }
            if k > n - 1 {
                return Err(Error::Config(format!("{k} senders need more than {n} nodes")));
            }
            if k * p > 12 {
                return Err(Error::Config("at most 12 incoming payments per node".into()));
            }
            for j in 0..n {
                let want = u8::from(rng.random_bool(cfg.positive_rate));
                let mut dealt = None;
                for _ in 0..MAX_DRAWS {
                    let amounts: Vec<f64> = (0..k * p)
                        .map(|_| (rng.random_range(1.0..100.0f64) * 100.0).round() / 100.0)
                        .collect();
                    let mut sorted = amounts.clone();
                    sorted.sort_by(f64::total_cmp);
                    if sorted.windows(2).any(|w| w[0] == w[1]) {
                        continue;
                    }
                    let options = partition_labels(&amounts, k, p);
                    // Totals must be distinct (by the margin) for the label
                    // to be well separated.
                    let gap = (cfg.total_margin * amounts.iter().sum::<f64>() / k as f64).max(1e-6);
                    let clean: Vec<_> = options
                        .into_iter()
                        .filter(|(gs, _)| {
                            let mut t: Vec<f64> = gs.iter().map(|g| g.iter().sum()).collect();
                            t.sort_by(f64::total_cmp);
                            t.windows(2).all(|w| w[1] - w[0] > gap)
                        })
                        .collect();
                    let has = |l: u8| clean.iter().any(|o| o.1 == l);
                    if !(has(0) && has(1)) {
                        continue;
                    }
                    let fitting: Vec<_> = clean.into_iter().filter(|o| o.1 == want).collect();
                    dealt = Some(fitting[rng.random_range(0..fitting.len())].0.clone());
                    break;
                }
                let groups = dealt.ok_or_else(|| Error::Infeasible("could not plant a label".into()))?;
                labels[j] = want;
                let senders = distinct_others(&mut rng, n, j, k);
                for (s, g) in senders.into_iter().zip(groups) {
                    for a in g {
                        rows.push(payment(&mut rng, s, j, a));
                    }
                }
            }
        }
        PlantedKind::OutNeighborCount => {
            let tau = k;
            if 2 * tau > n - 1 {
                return Err(Error::Config(format!("threshold {tau} needs more than {} nodes", 2 * tau)));
            }
            for (v, label) in labels.iter_mut().enumerate() {
                *label = u8::from(rng.random_bool(cfg.positive_rate));
                let count = if *label == 1 {
                    rng.random_range(tau + 1..=2 * tau)
                } else {
                    rng.random_range(1..=tau)
                };
                for u in distinct_others(&mut rng, n, v, count) {
                    for _ in 0..rng.random_range(1..=p) {
                        let a = (rng.random_range(1.0..100.0f64) * 100.0).round() / 100.0;
                        rows.push(payment(&mut rng, v, u, a));
                    }
                }
            }
        }
    }
    // Interleave receivers in time.
    rows.sort_by_key(|r| r.timestamp);
    Ok(TransactionTable {
        accounts: (0..n).map(|i| format!("acct{i:05}")).collect(),
        rows,
        categorical_names: Vec::new(),
        categorical_levels: Vec::new(),
        node_labels: Some(labels),
    })
}
