//! Multigraph message-passing layers and the full model.
//!
//! A two-stage layer first reduces each parallel-edge group into its
//! artificial node `h`, builds one message per distinct neighbour from
//! `[x_src ∥ h]`, and reduces those messages at the destination. Edges are
//! then updated from `[x_src ∥ e ∥ h]` using the node features from before
//! the update. The bi-directional variant runs the same machinery over the
//! reversed edge multiset with its own networks and feeds both aggregates to
//! the node update. The single-stage baseline treats every edge as its own
//! group and updates edges from `[x_src ∥ e ∥ x_dst]`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agg::{
    mean_log_degree, reduce_or_default, segment_reduce, segment_reduce_backward, AggSpec,
    GroupedFeatures, PnaSpec,
};
use crate::error::{Error, Result};
use crate::graph::{build_reverse_index, build_support_index, Multigraph, ReverseIndex, SupportIndex};
use crate::nn::{Activation, Mlp, MlpCache, MlpGrads, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stages {
    /// Parallel edges reduced at artificial nodes, then distinct neighbours.
    TwoStage,
    /// All incoming edges reduced at once.
    SingleStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Edge,
    Node,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub stages: Stages,
    pub bidirectional: bool,
    pub ego_ids: bool,
    pub edge_agg: AggSpec,
    pub node_agg: AggSpec,
    /// Apply an MLP to the reduced parallel edges (GIN / PNA multi-edge
    /// aggregators).
    pub edge_agg_mlp: bool,
    pub readout: Readout,
    pub dropout: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Raw node feature width, without the ego column.
    pub node_features: usize,
    pub edge_features: usize,
}

impl ModelConfig {
    /// Two-stage, unidirectional, sum/sum, two layers of width 16, edge
    /// readout, no dropout.
    pub fn new(node_features: usize, edge_features: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_size: 16,
            stages: Stages::TwoStage,
            bidirectional: false,
            ego_ids: false,
            edge_agg: AggSpec::Sum,
            node_agg: AggSpec::Sum,
            edge_agg_mlp: false,
            readout: Readout::Edge,
            dropout: 0.0,
            activation: Activation::Relu,
            node_features,
            edge_features,
        }
    }

    /// Aggregators and post-reduction MLP of a named family.
    pub fn with_family(mut self, family: Family) -> Self {
        self.edge_agg = family.edge_agg();
        self.node_agg = family.node_agg();
        self.edge_agg_mlp = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        if self.hidden_size == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        for spec in [&self.edge_agg, &self.node_agg] {
            if let AggSpec::Pna(p) = spec {
                p.validate()?;
            }
        }
        Ok(())
    }

    fn encoder_input(&self) -> usize {
        self.node_features + usize::from(self.ego_ids)
    }

    /// Width of the artificial-node features.
    fn h_width(&self) -> usize {
        match self.stages {
            Stages::SingleStage => self.hidden_size,
            Stages::TwoStage if self.edge_agg_mlp => self.hidden_size,
            Stages::TwoStage => self.edge_agg.output_width(self.hidden_size),
        }
    }

    fn a_width(&self) -> usize {
        self.node_agg.output_width(self.hidden_size)
    }

    /// Fill PNA mean log-degrees from a (training) graph: parallel-edge
    /// multiplicities for the edge stage, distinct in-neighbour counts for the
    /// node stage.
    pub fn calibrate_degrees(&mut self, g: &Multigraph) {
        let supp = build_support_index(g);
        let edge_deg = match self.stages {
            Stages::TwoStage => mean_log_degree(supp.multiplicities()),
            Stages::SingleStage => None,
        };
        let node_deg = match self.stages {
            Stages::TwoStage => mean_log_degree(supp.in_pairs().sizes()),
            Stages::SingleStage => {
                let mut deg = vec![0; g.num_nodes()];
                for &(_, d) in g.edges() {
                    deg[d] += 1;
                }
                mean_log_degree(deg)
            }
        };
        if let AggSpec::Pna(p) = &mut self.edge_agg {
            p.mean_log_degree = edge_deg.unwrap_or(2f64.ln());
        }
        if let AggSpec::Pna(p) = &mut self.node_agg {
            p.mean_log_degree = node_deg.unwrap_or(2f64.ln());
        }
    }
}

fn default_activation() -> Activation {
    Activation::Relu
}

/// Named aggregator families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Sum at both stages, MLP after the multi-edge sum.
    Gin,
    /// mean/min/max/std with degree scalers at both stages, MLP after the
    /// multi-edge aggregate.
    Pna,
}

impl Family {
    pub fn edge_agg(self) -> AggSpec {
        match self {
            Family::Gin => AggSpec::Sum,
            Family::Pna => AggSpec::Pna(PnaSpec::standard(2f64.ln())),
        }
    }

    pub fn node_agg(self) -> AggSpec {
        self.edge_agg()
    }
}

/// Networks of one message-passing layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// MLP applied after the multi-edge reduction.
    pub edge_post: Option<Mlp>,
    /// Message network `f`.
    pub msg: Mlp,
    /// Node update `g_v`.
    pub node_update: Mlp,
    /// Edge update `g_e`.
    pub edge_update: Mlp,
    pub rev_edge_post: Option<Mlp>,
    /// Reverse message network `f̂`.
    pub rev_msg: Option<Mlp>,
    /// Reverse edge update `ĝ_e`.
    pub rev_edge_update: Option<Mlp>,
}

impl LayerParams {
    fn mlps(&self) -> Vec<&Mlp> {
        let mut v = Vec::new();
        v.extend(self.edge_post.as_ref());
        v.extend([&self.msg, &self.node_update, &self.edge_update]);
        v.extend(self.rev_edge_post.as_ref());
        v.extend(self.rev_msg.as_ref());
        v.extend(self.rev_edge_update.as_ref());
        v
    }

    fn mlps_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = Vec::new();
        v.extend(self.edge_post.as_mut());
        v.extend([&mut self.msg, &mut self.node_update, &mut self.edge_update]);
        v.extend(self.rev_edge_post.as_mut());
        v.extend(self.rev_msg.as_mut());
        v.extend(self.rev_edge_update.as_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub node_encoder: Mlp,
    pub edge_encoder: Mlp,
    pub layers: Vec<LayerParams>,
    pub head: Mlp,
}

impl ModelParams {
    /// Every network in a fixed order (encoders, layers, head).
    pub fn mlps(&self) -> Vec<&Mlp> {
        let mut v = vec![&self.node_encoder, &self.edge_encoder];
        for l in &self.layers {
            v.extend(l.mlps());
        }
        v.push(&self.head);
        v
    }

    pub fn mlps_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = vec![&mut self.node_encoder, &mut self.edge_encoder];
        for l in &mut self.layers {
            v.extend(l.mlps_mut());
        }
        v.push(&mut self.head);
        v
    }

    pub fn num_params(&self) -> usize {
        self.mlps().iter().map(|m| m.num_params()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for m in self.mlps() {
            m.write_params(&mut out);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut it = flat.iter().copied();
        for m in self.mlps_mut() {
            m.read_params(&mut it)?;
        }
        Ok(())
    }
}

/// Gradients for every network, in [`ModelParams::mlps`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub mlps: Vec<MlpGrads>,
}

impl ModelGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.mlps {
            g.write_flat(&mut out);
        }
        out
    }
}

/// Index of one message direction: groups over this direction's edges plus
/// per-edge and per-pair endpoints.
#[derive(Debug, Clone)]
struct DirIndex {
    support: SupportIndex,
    edge_src: Vec<usize>,
    edge_dst: Vec<usize>,
    pair_src: Vec<usize>,
}

impl DirIndex {
    fn new(support: SupportIndex, edges: &[(usize, usize)]) -> Self {
        let pair_src = support.pair_sources();
        Self {
            support,
            edge_src: edges.iter().map(|e| e.0).collect(),
            edge_dst: edges.iter().map(|e| e.1).collect(),
            pair_src,
        }
    }
}

/// A graph with every index the model needs, built once and reused.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    graph: Multigraph,
    support: SupportIndex,
    reverse: Option<ReverseIndex>,
    fwd: DirIndex,
    rev: Option<DirIndex>,
    fwd_single: DirIndex,
    rev_single: DirIndex,
}

impl PreparedGraph {
    pub fn new(graph: Multigraph) -> Self {
        let support = build_support_index(&graph);
        let reverse = build_reverse_index(&graph, &support).expect("index built from this graph");
        Self::assemble(graph, support, Some(reverse))
    }

    /// Assemble from precomputed indices; `reverse` may be omitted for
    /// unidirectional models.
    pub fn from_parts(
        graph: Multigraph,
        support: SupportIndex,
        reverse: Option<ReverseIndex>,
    ) -> Result<Self> {
        if support != build_support_index(&graph) {
            return Err(Error::Structural("support index does not match graph".into()));
        }
        if let Some(r) = &reverse {
            if *r != build_reverse_index(&graph, &support)? {
                return Err(Error::Structural("reverse index does not match graph".into()));
            }
        }
        Ok(Self::assemble(graph, support, reverse))
    }

    fn assemble(graph: Multigraph, support: SupportIndex, reverse: Option<ReverseIndex>) -> Self {
        let fwd = DirIndex::new(support.clone(), graph.edges());
        let reversed = graph.reversed();
        let rev = reverse.as_ref().map(|r| {
            let edges: Vec<_> = (0..graph.num_edges())
                .map(|k| r.reverse_edge(&graph, k))
                .collect();
            DirIndex::new(r.support().clone(), &edges)
        });
        let fwd_single = DirIndex::new(SupportIndex::per_edge(&graph), graph.edges());
        let rev_single = DirIndex::new(SupportIndex::per_edge(&reversed), reversed.edges());
        Self {
            graph,
            support,
            reverse,
            fwd,
            rev,
            fwd_single,
            rev_single,
        }
    }

    pub fn graph(&self) -> &Multigraph {
        &self.graph
    }

    pub fn support(&self) -> &SupportIndex {
        &self.support
    }

    pub fn reverse(&self) -> Option<&ReverseIndex> {
        self.reverse.as_ref()
    }
}

/// Latent state between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub x: Array2<f64>,
    pub e: Array2<f64>,
    pub e_rev: Option<Array2<f64>>,
    /// Artificial-node features computed by the layer that produced this
    /// state (absent for the input state).
    pub h: Option<Array2<f64>>,
    pub h_rev: Option<Array2<f64>>,
}

/// Append a binary column marking `roots`.
pub fn add_ego_ids(features: ArrayView2<'_, f64>, roots: &[usize]) -> Result<Array2<f64>> {
    let (n, d) = features.dim();
    let mut out = Array2::zeros((n, d + 1));
    out.slice_mut(s![.., ..d]).assign(&features);
    for &r in roots {
        if r >= n {
            return Err(Error::Structural(format!("ego root {r} outside [0, {n})")));
        }
        out[[r, d]] = 1.0;
    }
    Ok(out)
}

struct Block<'a> {
    values: ArrayView2<'a, f64>,
    index: Option<&'a [usize]>,
}

fn block<'a>(values: &'a Array2<f64>, index: Option<&'a [usize]>) -> Block<'a> {
    Block {
        values: values.view(),
        index,
    }
}

/// Row-wise concatenation of column blocks, each optionally gathered.
fn concat_blocks(rows: usize, blocks: &[Block<'_>]) -> Array2<f64> {
    let width: usize = blocks.iter().map(|b| b.values.ncols()).sum();
    let mut out = Array2::zeros((rows, width));
    let mut offset = 0;
    for b in blocks {
        let w = b.values.ncols();
        let mut dst = out.slice_mut(s![.., offset..offset + w]);
        match b.index {
            Some(ix) => {
                for (r, &src) in ix.iter().enumerate() {
                    dst.row_mut(r).assign(&b.values.row(src));
                }
            }
            None => dst.assign(&b.values),
        }
        offset += w;
    }
    out
}

/// Add columns `[offset, offset + target width)` of `grad` into `target`,
/// scattering rows through `index`.
fn scatter_block(grad: &Array2<f64>, offset: usize, target: &mut Array2<f64>, index: Option<&[usize]>) {
    let w = target.ncols();
    let src = grad.slice(s![.., offset..offset + w]);
    match index {
        Some(ix) => {
            for (r, &t) in ix.iter().enumerate() {
                let mut row = target.row_mut(t);
                row += &src.row(r);
            }
        }
        None => *target += &src,
    }
}

fn mlp_forward(m: &Mlp, input: &Array2<f64>, mode: Mode, salt: u64) -> Result<(Array2<f64>, MlpCache)> {
    m.forward(input.view(), mode.derive(salt))
}

/// Artificial-node features for one direction: reduce each parallel-edge
/// group, then optionally apply the post-aggregation MLP.
pub fn edge_stage(
    e: ArrayView2<'_, f64>,
    supp: &SupportIndex,
    edge_agg: &AggSpec,
    post: Option<&Mlp>,
) -> Result<Array2<f64>> {
    let raw = segment_reduce(edge_agg, GroupedFeatures::new(e, supp.groups()), None)?;
    match post {
        Some(p) => Ok(p.forward(raw.view(), Mode::Eval)?.0),
        None => Ok(raw),
    }
}

/// Per-pair messages `f([x_src ∥ h])` reduced at destinations; returns the
/// aggregate `a` and `g_v([x ∥ a])`.
pub fn node_stage(
    x: &Array2<f64>,
    h: &Array2<f64>,
    supp: &SupportIndex,
    msg: &Mlp,
    node_agg: &AggSpec,
    node_update: &Mlp,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let src = supp.pair_sources();
    let input = concat_blocks(supp.num_pairs(), &[block(x, Some(&src)), block(h, None)]);
    let (m, _) = msg.forward(input.view(), Mode::Eval)?;
    let a = reduce_or_default(node_agg, GroupedFeatures::new(m.view(), supp.in_pairs()), None, None)?;
    let (x_next, _) = node_update.forward(concat_blocks(x.nrows(), &[block(x, None), block(&a, None)]).view(), Mode::Eval)?;
    Ok((a, x_next))
}

/// `g_e([x_src ∥ e ∥ h_pair])` for every edge, reading the pre-update `x`.
pub fn edge_update(
    x_prev: &Array2<f64>,
    e: &Array2<f64>,
    h: &Array2<f64>,
    g: &Multigraph,
    supp: &SupportIndex,
    update: &Mlp,
) -> Result<Array2<f64>> {
    let src: Vec<usize> = g.edges().iter().map(|e| e.0).collect();
    let input = concat_blocks(
        g.num_edges(),
        &[
            block(x_prev, Some(&src)),
            block(e, None),
            block(h, Some(supp.edge_to_pair())),
        ],
    );
    Ok(update.forward(input.view(), Mode::Eval)?.0)
}

/// Forward pass of one direction up to the node-level aggregate.
struct DirCache {
    h: Array2<f64>,
    post_cache: Option<MlpCache>,
    msg_cache: MlpCache,
    messages: Array2<f64>,
    a: Array2<f64>,
}

struct LayerCache {
    x: Array2<f64>,
    e: Array2<f64>,
    e_rev: Option<Array2<f64>>,
    fwd: DirCache,
    rev: Option<DirCache>,
    node_cache: MlpCache,
    edge_cache: MlpCache,
    rev_edge_cache: Option<MlpCache>,
}

/// Everything the backward pass needs.
pub struct ModelCache {
    num_nodes: usize,
    num_edges: usize,
    node_enc_cache: MlpCache,
    edge_enc_cache: MlpCache,
    layers: Vec<LayerCache>,
    head_cache: MlpCache,
    readout: Readout,
    edge_src: Vec<usize>,
    edge_dst: Vec<usize>,
    rev_edge_to_orig: Option<Vec<usize>>,
}

/// Outputs of a full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// One logit per node or per edge, depending on the readout.
    pub logits: Array1<f64>,
    /// Final-layer state.
    pub state: LayerState,
}

/// A configured model with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

const SALT_NODE_ENC: u64 = 1;
const SALT_EDGE_ENC: u64 = 2;
const SALT_HEAD: u64 = 3;

fn layer_salt(layer: usize, net: u64) -> u64 {
    1000 + 16 * layer as u64 + net
}

impl Model {
    /// Randomly initialised parameters for `config`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_size;
        let dropout = config.dropout;
        let act = config.activation;
        let mut mlp = |dims: &[usize]| Mlp::new(dims, act, dropout, &mut rng);
        let node_encoder = mlp(&[config.encoder_input(), h])?;
        let edge_encoder = mlp(&[config.edge_features, h])?;
        let raw_h = config.edge_agg.output_width(h);
        let hw = config.h_width();
        let aw = config.a_width();
        let two_stage = config.stages == Stages::TwoStage;
        let with_post = two_stage && config.edge_agg_mlp;
        let node_in = h + aw * if config.bidirectional { 2 } else { 1 };
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let edge_post = if with_post { Some(mlp(&[raw_h, h, h])?) } else { None };
            let msg = mlp(&[h + hw, h, h])?;
            let node_update = mlp(&[node_in, h, h])?;
            let edge_update = mlp(&[2 * h + hw, h, h])?;
            let (rev_edge_post, rev_msg, rev_edge_update) = if config.bidirectional {
                (
                    if with_post { Some(mlp(&[raw_h, h, h])?) } else { None },
                    Some(mlp(&[h + hw, h, h])?),
                    Some(mlp(&[2 * h + hw, h, h])?),
                )
            } else {
                (None, None, None)
            };
            layers.push(LayerParams {
                edge_post,
                msg,
                node_update,
                edge_update,
                rev_edge_post,
                rev_msg,
                rev_edge_update,
            });
        }
        let head_in = match config.readout {
            Readout::Edge => 3 * h,
            Readout::Node => h,
        };
        let head = mlp(&[head_in, h, 1])?;
        Ok(Self {
            config,
            params: ModelParams {
                node_encoder,
                edge_encoder,
                layers,
                head,
            },
        })
    }

    fn dirs<'a>(&self, pg: &'a PreparedGraph) -> Result<(&'a DirIndex, Option<&'a DirIndex>)> {
        match self.config.stages {
            Stages::TwoStage => {
                let rev = if self.config.bidirectional {
                    Some(pg.rev.as_ref().ok_or_else(|| {
                        Error::Config("bidirectional model needs a reverse index".into())
                    })?)
                } else {
                    None
                };
                Ok((&pg.fwd, rev))
            }
            Stages::SingleStage => Ok((
                &pg.fwd_single,
                self.config.bidirectional.then_some(&pg.rev_single),
            )),
        }
    }

    fn direction_forward(
        &self,
        dir: &DirIndex,
        x: &Array2<f64>,
        e: &Array2<f64>,
        post: Option<&Mlp>,
        msg: &Mlp,
        mode: Mode,
        salt: u64,
    ) -> Result<DirCache> {
        let (h, post_cache) = match self.config.stages {
            Stages::SingleStage => (e.clone(), None),
            Stages::TwoStage => {
                let raw = segment_reduce(
                    &self.config.edge_agg,
                    GroupedFeatures::new(e.view(), dir.support.groups()),
                    None,
                )?;
                match post {
                    Some(p) => {
                        let (h, c) = mlp_forward(p, &raw, mode, salt)?;
                        (h, Some(c))
                    }
                    None => (raw, None),
                }
            }
        };
        let input = concat_blocks(
            dir.support.num_pairs(),
            &[block(x, Some(&dir.pair_src)), block(&h, None)],
        );
        let (messages, msg_cache) = mlp_forward(msg, &input, mode, salt + 1)?;
        let a = reduce_or_default(
            &self.config.node_agg,
            GroupedFeatures::new(messages.view(), dir.support.in_pairs()),
            None,
            None,
        )?;
        Ok(DirCache {
            h,
            post_cache,
            msg_cache,
            messages,
            a,
        })
    }

    fn edge_update_input(&self, dir: &DirIndex, x: &Array2<f64>, e: &Array2<f64>, h: &Array2<f64>) -> Array2<f64> {
        let third = match self.config.stages {
            Stages::TwoStage => block(h, Some(dir.support.edge_to_pair())),
            Stages::SingleStage => block(x, Some(&dir.edge_dst)),
        };
        concat_blocks(
            dir.edge_src.len(),
            &[block(x, Some(&dir.edge_src)), block(e, None), third],
        )
    }

    fn layer_forward(
        &self,
        idx: usize,
        params: &LayerParams,
        fwd: &DirIndex,
        rev: Option<&DirIndex>,
        x: Array2<f64>,
        e: Array2<f64>,
        e_rev: Option<Array2<f64>>,
        mode: Mode,
    ) -> Result<(LayerState, LayerCache)> {
        let fc = self.direction_forward(fwd, &x, &e, params.edge_post.as_ref(), &params.msg, mode, layer_salt(idx, 0))?;
        let rc = match (rev, &e_rev) {
            (Some(rd), Some(er)) => Some(self.direction_forward(
                rd,
                &x,
                er,
                params.rev_edge_post.as_ref(),
                params.rev_msg.as_ref().ok_or_else(|| Error::Config("missing reverse message network".into()))?,
                mode,
                layer_salt(idx, 4),
            )?),
            _ => None,
        };
        let mut blocks = vec![block(&x, None), block(&fc.a, None)];
        if let Some(rc) = &rc {
            blocks.push(block(&rc.a, None));
        }
        let node_in = concat_blocks(x.nrows(), &blocks);
        let (x_next, node_cache) = mlp_forward(&params.node_update, &node_in, mode, layer_salt(idx, 2))?;

        let ein = self.edge_update_input(fwd, &x, &e, &fc.h);
        let (e_next, edge_cache) = mlp_forward(&params.edge_update, &ein, mode, layer_salt(idx, 3))?;

        let (e_rev_next, rev_edge_cache) = match (rev, &e_rev, &rc) {
            (Some(rd), Some(er), Some(rc)) => {
                let upd = params
                    .rev_edge_update
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing reverse edge update network".into()))?;
                let rin = self.edge_update_input(rd, &x, er, &rc.h);
                let (out, c) = mlp_forward(upd, &rin, mode, layer_salt(idx, 7))?;
                (Some(out), Some(c))
            }
            _ => (None, None),
        };
        let state = LayerState {
            x: x_next,
            e: e_next,
            e_rev: e_rev_next,
            h: Some(fc.h.clone()),
            h_rev: rc.as_ref().map(|c| c.h.clone()),
        };
        let cache = LayerCache {
            x,
            e,
            e_rev,
            fwd: fc,
            rev: rc,
            node_cache,
            edge_cache,
            rev_edge_cache,
        };
        Ok((state, cache))
    }

    /// One layer in evaluation mode, from an explicit state.
    pub fn layer(&self, idx: usize, pg: &PreparedGraph, state: &LayerState) -> Result<LayerState> {
        let (fwd, rev) = self.dirs(pg)?;
        let params = self
            .params
            .layers
            .get(idx)
            .ok_or_else(|| Error::Config(format!("no layer {idx}")))?;
        let e_rev = if rev.is_some() {
            Some(state.e_rev.clone().ok_or_else(|| {
                Error::Config("bidirectional layer needs reverse edge features".into())
            })?)
        } else {
            None
        };
        Ok(self
            .layer_forward(idx, params, fwd, rev, state.x.clone(), state.e.clone(), e_rev, Mode::Eval)?
            .0)
    }

    /// One two-stage bi-directional layer.
    pub fn bidirectional_layer(&self, idx: usize, pg: &PreparedGraph, state: &LayerState) -> Result<LayerState> {
        if !self.config.bidirectional || self.config.stages != Stages::TwoStage {
            return Err(Error::Config("model is not a two-stage bidirectional model".into()));
        }
        self.layer(idx, pg, state)
    }

    /// One single-stage (per-edge message) layer.
    pub fn single_stage_layer(&self, idx: usize, pg: &PreparedGraph, state: &LayerState) -> Result<LayerState> {
        if self.config.stages != Stages::SingleStage {
            return Err(Error::Config("model is not a single-stage model".into()));
        }
        self.layer(idx, pg, state)
    }

    /// Full forward pass. `roots` marks ego nodes when the model uses ego ids.
    pub fn forward(
        &self,
        pg: &PreparedGraph,
        roots: &[usize],
        mode: Mode,
    ) -> Result<(ForwardOutput, ModelCache)> {
        let g = pg.graph();
        let cfg = &self.config;
        if g.node_dim() != cfg.node_features || g.edge_dim() != cfg.edge_features {
            return Err(Error::Config(format!(
                "model expects {} node / {} edge features, graph has {} / {}",
                cfg.node_features,
                cfg.edge_features,
                g.node_dim(),
                g.edge_dim()
            )));
        }
        if self.params.layers.len() != cfg.num_layers {
            return Err(Error::Config("parameter layers do not match configuration".into()));
        }
        let (fwd, rev) = self.dirs(pg)?;
        let node_in = if cfg.ego_ids {
            add_ego_ids(g.node_features(), roots)?
        } else {
            g.node_features().to_owned()
        };
        let (mut x, node_enc_cache) = mlp_forward(&self.params.node_encoder, &node_in, mode, SALT_NODE_ENC)?;
        let (mut e, edge_enc_cache) =
            mlp_forward(&self.params.edge_encoder, &g.edge_features().to_owned(), mode, SALT_EDGE_ENC)?;
        let rev_map = match (rev, pg.reverse()) {
            (Some(_), Some(r)) => Some(r.rev_edge_to_orig().to_vec()),
            (Some(_), None) => Some((0..g.num_edges()).collect()),
            _ => None,
        };
        let mut e_rev = rev_map.as_ref().map(|m| e.select(Axis(0), m));

        let mut caches = Vec::with_capacity(cfg.num_layers);
        let mut last_state = None;
        for (idx, params) in self.params.layers.iter().enumerate() {
            let (state, cache) = self.layer_forward(idx, params, fwd, rev, x, e, e_rev, mode)?;
            caches.push(cache);
            x = state.x.clone();
            e = state.e.clone();
            e_rev = state.e_rev.clone();
            last_state = Some(state);
        }
        let state = last_state.expect("at least one layer");

        let head_in = match cfg.readout {
            Readout::Node => state.x.clone(),
            Readout::Edge => concat_blocks(
                g.num_edges(),
                &[
                    block(&state.x, Some(&pg.fwd.edge_src)),
                    block(&state.e, None),
                    block(&state.x, Some(&pg.fwd.edge_dst)),
                ],
            ),
        };
        let (out, head_cache) = mlp_forward(&self.params.head, &head_in, mode, SALT_HEAD)?;
        let logits = out.column(0).to_owned();
        let cache = ModelCache {
            num_nodes: g.num_nodes(),
            num_edges: g.num_edges(),
            node_enc_cache,
            edge_enc_cache,
            layers: caches,
            head_cache,
            readout: cfg.readout,
            edge_src: pg.fwd.edge_src.clone(),
            edge_dst: pg.fwd.edge_dst.clone(),
            rev_edge_to_orig: rev_map,
        };
        Ok((ForwardOutput { logits, state }, cache))
    }

    /// Reverse pass of one direction from the node-level aggregate gradient
    /// `da` and the artificial-node gradient `dh` collected from the edge
    /// update. Accumulates into `dx` and `de`.
    #[allow(clippy::too_many_arguments)]
    fn direction_backward(
        &self,
        dir: &DirIndex,
        e: &Array2<f64>,
        cache: &DirCache,
        da: &Array2<f64>,
        mut dh: Array2<f64>,
        post: Option<&Mlp>,
        msg: &Mlp,
        dx: &mut Array2<f64>,
        de: &mut Array2<f64>,
    ) -> Result<(Option<MlpGrads>, MlpGrads)> {
        let mut dm = Array2::zeros(cache.messages.raw_dim());
        segment_reduce_backward(
            &self.config.node_agg,
            GroupedFeatures::new(cache.messages.view(), dir.support.in_pairs()),
            None,
            da.view(),
            &mut dm,
        )?;
        let (dmsg_in, msg_grads) = msg.backward(&cache.msg_cache, dm.view())?;
        scatter_block(&dmsg_in, 0, dx, Some(&dir.pair_src));
        let hx = dx.ncols();
        dh += &dmsg_in.slice(s![.., hx..]);
        let post_grads = match self.config.stages {
            Stages::SingleStage => {
                *de += &dh;
                None
            }
            Stages::TwoStage => {
                let (draw, pg) = match (post, &cache.post_cache) {
                    (Some(p), Some(c)) => {
                        let (d, g) = p.backward(c, dh.view())?;
                        (d, Some(g))
                    }
                    _ => (dh, None),
                };
                segment_reduce_backward(
                    &self.config.edge_agg,
                    GroupedFeatures::new(e.view(), dir.support.groups()),
                    None,
                    draw.view(),
                    de,
                )?;
                pg
            }
        };
        Ok((post_grads, msg_grads))
    }

    /// Backward of an edge update; returns the gradient on `h` (zero-width
    /// handling for single-stage is folded into `dx`).
    fn edge_update_backward(
        &self,
        dir: &DirIndex,
        update: &Mlp,
        cache: &MlpCache,
        de_next: &Array2<f64>,
        h_dim: (usize, usize),
        dx: &mut Array2<f64>,
        de: &mut Array2<f64>,
    ) -> Result<(Array2<f64>, MlpGrads)> {
        let (din, grads) = update.backward(cache, de_next.view())?;
        let hx = dx.ncols();
        let he = de.ncols();
        scatter_block(&din, 0, dx, Some(&dir.edge_src));
        scatter_block(&din, hx, de, None);
        let mut dh = Array2::zeros(h_dim);
        match self.config.stages {
            Stages::TwoStage => scatter_block(&din, hx + he, &mut dh, Some(dir.support.edge_to_pair())),
            Stages::SingleStage => scatter_block(&din, hx + he, dx, Some(&dir.edge_dst)),
        }
        Ok((dh, grads))
    }

    /// Exact gradients of `Σ logit_grads ⊙ logits` with respect to every
    /// parameter.
    pub fn backward(&self, pg: &PreparedGraph, cache: &ModelCache, logit_grads: &Array1<f64>) -> Result<ModelGrads> {
        let expected = match cache.readout {
            Readout::Node => cache.num_nodes,
            Readout::Edge => cache.num_edges,
        };
        if logit_grads.len() != expected
            || cache.layers.len() != self.params.layers.len()
            || pg.graph().num_nodes() != cache.num_nodes
            || pg.graph().num_edges() != cache.num_edges
        {
            return Err(Error::Precondition(
                "cache does not belong to this model / graph".into(),
            ));
        }
        let (fwd, rev) = self.dirs(pg)?;
        let h = self.config.hidden_size;
        let upstream = logit_grads.view().insert_axis(Axis(1)).to_owned();
        let (dhead, head_grads) = self.params.head.backward(&cache.head_cache, upstream.view())?;
        let mut dx = Array2::zeros((cache.num_nodes, h));
        let mut de = Array2::zeros((cache.num_edges, h));
        let mut de_rev = cache.rev_edge_to_orig.as_ref().map(|_| Array2::zeros((cache.num_edges, h)));
        match cache.readout {
            Readout::Node => dx += &dhead,
            Readout::Edge => {
                scatter_block(&dhead, 0, &mut dx, Some(&cache.edge_src));
                scatter_block(&dhead, h, &mut de, None);
                scatter_block(&dhead, 2 * h, &mut dx, Some(&cache.edge_dst));
            }
        }

        let mut layer_grads: Vec<Vec<MlpGrads>> = Vec::with_capacity(cache.layers.len());
        for (idx, lc) in cache.layers.iter().enumerate().rev() {
            let params = &self.params.layers[idx];
            let mut dx_prev = Array2::zeros(lc.x.raw_dim());
            let mut de_prev = Array2::zeros(lc.e.raw_dim());
            let mut de_rev_prev = lc.e_rev.as_ref().map(|er| Array2::zeros(er.raw_dim()));

            let (dnode_in, node_grads) = params.node_update.backward(&lc.node_cache, dx.view())?;
            scatter_block(&dnode_in, 0, &mut dx_prev, None);
            let aw = lc.fwd.a.ncols();
            let da = dnode_in.slice(s![.., h..h + aw]).to_owned();
            let da_rev = lc.rev.as_ref().map(|_| dnode_in.slice(s![.., h + aw..]).to_owned());

            let (dh, edge_grads) = self.edge_update_backward(
                fwd,
                &params.edge_update,
                &lc.edge_cache,
                &de,
                lc.fwd.h.dim(),
                &mut dx_prev,
                &mut de_prev,
            )?;
            let rev_edge = match (rev, &lc.rev, &lc.rev_edge_cache, &de_rev, &mut de_rev_prev) {
                (Some(rd), Some(rc), Some(c), Some(der), Some(derp)) => {
                    let upd = params.rev_edge_update.as_ref().expect("reverse update present");
                    Some(self.edge_update_backward(rd, upd, c, der, rc.h.dim(), &mut dx_prev, derp)?)
                }
                _ => None,
            };

            let (post_grads, msg_grads) = self.direction_backward(
                fwd,
                &lc.e,
                &lc.fwd,
                &da,
                dh,
                params.edge_post.as_ref(),
                &params.msg,
                &mut dx_prev,
                &mut de_prev,
            )?;
            let mut rev_post_grads = None;
            let mut rev_msg_grads = None;
            let mut rev_edge_grads = None;
            if let (Some(rd), Some(rc), Some(er), Some(dar), Some((dhr, reg)), Some(derp)) =
                (rev, &lc.rev, &lc.e_rev, &da_rev, rev_edge, de_rev_prev.as_mut())
            {
                let (pg_, mg) = self.direction_backward(
                    rd,
                    er,
                    rc,
                    dar,
                    dhr,
                    params.rev_edge_post.as_ref(),
                    params.rev_msg.as_ref().expect("reverse message network present"),
                    &mut dx_prev,
                    derp,
                )?;
                rev_post_grads = pg_;
                rev_msg_grads = Some(mg);
                rev_edge_grads = Some(reg);
            }

            let mut grads = Vec::new();
            grads.extend(post_grads);
            grads.extend([msg_grads, node_grads, edge_grads]);
            grads.extend(rev_post_grads);
            grads.extend(rev_msg_grads);
            grads.extend(rev_edge_grads);
            layer_grads.push(grads);

            dx = dx_prev;
            de = de_prev;
            de_rev = de_rev_prev;
        }
        layer_grads.reverse();

        if let (Some(der), Some(map)) = (&de_rev, &cache.rev_edge_to_orig) {
            scatter_block(der, 0, &mut de, Some(map));
        }
        let (_, node_enc_grads) = self.params.node_encoder.backward(&cache.node_enc_cache, dx.view())?;
        let (_, edge_enc_grads) = self.params.edge_encoder.backward(&cache.edge_enc_cache, de.view())?;
        let mut mlps = vec![node_enc_grads, edge_enc_grads];
        for lg in layer_grads {
            mlps.extend(lg);
        }
        mlps.push(head_grads);
        Ok(ModelGrads { mlps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{apply_permutation, random_connected_multigraph, GraphPermutation};
    use crate::nn::{finite_difference_gradient, relative_error, Dense};
    use ndarray::array;

    fn two_edge_pair() -> Multigraph {
        Multigraph::new(
            2,
            Array2::zeros((2, 1)),
            vec![(0, 1), (0, 1)],
            array![[1.0, 0.0], [0.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn edge_stage_sums_parallel_edges() {
        let g = two_edge_pair();
        let supp = build_support_index(&g);
        let h = edge_stage(g.edge_features(), &supp, &AggSpec::Sum, None).unwrap();
        assert_eq!(h, array![[1.0, 1.0]]);
    }

    #[test]
    fn edge_stage_singletons_are_identity() {
        let g = random_connected_multigraph(6, 5, 3).unwrap();
        let supp = build_support_index(&g);
        assert_eq!(supp.num_pairs(), 5);
        for spec in [AggSpec::Sum, AggSpec::Mean, AggSpec::Max, AggSpec::Min] {
            let h = edge_stage(g.edge_features(), &supp, &spec, None).unwrap();
            for (p, grp) in supp.groups().iter().enumerate() {
                assert_eq!(h.row(p), g.edge_features().row(grp[0]));
            }
        }
        let h = edge_stage(g.edge_features(), &supp, &AggSpec::Std, None).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_stage_then_max_over_senders() {
        // Two senders into node 2 with payment groups {5,1} and {3,4}.
        let g = Multigraph::new(
            3,
            Array2::zeros((3, 1)),
            vec![(0, 2), (0, 2), (1, 2), (1, 2)],
            array![[5.0], [1.0], [3.0], [4.0]],
        )
        .unwrap();
        let supp = build_support_index(&g);
        let h = edge_stage(g.edge_features(), &supp, &AggSpec::Sum, None).unwrap();
        let a = reduce_or_default(&AggSpec::Max, GroupedFeatures::new(h.view(), supp.in_pairs()), None, None).unwrap();
        assert_eq!(a[[2, 0]], 7.0);
    }

    fn selector(rows: usize, cols: usize, offset: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(r, c)| if r == c + offset { 1.0 } else { 0.0 })
    }

    #[test]
    fn node_stage_defaults_and_linearity() {
        // Node 2 has two in-neighbours with identical (x, h); node 0 has none.
        let x = array![[1.0, 2.0], [1.0, 2.0], [0.5, -1.0]];
        let g = Multigraph::new(3, x.clone(), vec![(0, 2), (1, 2)], array![[3.0, 4.0], [3.0, 4.0]]).unwrap();
        let supp = build_support_index(&g);
        let h = edge_stage(g.edge_features(), &supp, &AggSpec::Sum, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let msg = Mlp::new(&[4, 3, 2], Activation::Relu, 0.0, &mut rng).unwrap();
        let upd = Mlp::identity(4);
        let (a, x_next) = node_stage(&x, &h, &supp, &msg, &AggSpec::Sum, &upd).unwrap();
        assert_eq!(a.row(0), Array1::<f64>::zeros(2));
        assert_eq!(x_next.row(0), array![1.0, 2.0, 0.0, 0.0]);
        let single = msg.forward(array![[1.0, 2.0, 3.0, 4.0]].view(), Mode::Eval).unwrap().0;
        for c in 0..2 {
            assert!((a[[2, c]] - 2.0 * single[[0, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn node_stage_ignores_neighbour_order() {
        let g = random_connected_multigraph(8, 20, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let msg = Mlp::new(&[2 + 3, 4, 4], Activation::Relu, 0.0, &mut rng).unwrap();
        let upd = Mlp::new(&[2 + 4, 4], Activation::Relu, 0.0, &mut rng).unwrap();
        let supp = build_support_index(&g);
        let h = edge_stage(g.edge_features(), &supp, &AggSpec::Mean, None).unwrap();
        let x = g.node_features().to_owned();
        let base = node_stage(&x, &h, &supp, &msg, &AggSpec::Sum, &upd).unwrap().0;
        // Reverse the edge list: pairs are discovered in another order.
        let mut ep: Vec<usize> = (0..g.num_edges()).collect();
        ep.reverse();
        let p = GraphPermutation::new((0..8).collect(), ep).unwrap();
        let g2 = apply_permutation(&g, &p).unwrap();
        let supp2 = build_support_index(&g2);
        let h2 = edge_stage(g2.edge_features(), &supp2, &AggSpec::Mean, None).unwrap();
        let other = node_stage(&x, &h2, &supp2, &msg, &AggSpec::Sum, &upd).unwrap().0;
        for (a, b) in base.iter().zip(other.iter()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0));
        }
    }

    #[test]
    fn edge_update_properties() {
        let x = array![[1.0], [2.0], [3.0]];
        let g = Multigraph::new(
            3,
            x.clone(),
            vec![(0, 1), (0, 1), (1, 2)],
            array![[0.5, 0.5], [0.5, 0.5], [1.0, -1.0]],
        )
        .unwrap();
        let supp = build_support_index(&g);
        let h = edge_stage(g.edge_features(), &supp, &AggSpec::Sum, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[5, 4, 3], Activation::Relu, 0.0, &mut rng).unwrap();
        let e = g.edge_features().to_owned();
        let out = edge_update(&x, &e, &h, &g, &supp, &net).unwrap();
        assert_eq!(out.row(0), out.row(1));

        let id = Mlp::linear(selector(5, 2, 1));
        assert_eq!(edge_update(&x, &e, &h, &g, &supp, &id).unwrap(), e);

        // Change the edge of another group.
        let mut e2 = e.clone();
        e2[[2, 0]] = 9.0;
        let g2 = Multigraph::new(3, x.clone(), g.edges().to_vec(), e2.clone()).unwrap();
        let h2 = edge_stage(g2.edge_features(), &supp, &AggSpec::Sum, None).unwrap();
        assert_eq!(h2.row(0), h.row(0));
        let out2 = edge_update(&x, &e2, &h2, &g2, &supp, &net).unwrap();
        assert_eq!(out2.slice(s![..2, ..]), out.slice(s![..2, ..]));
        assert_ne!(out2.row(2), out.row(2));
    }

    fn small_config(bidirectional: bool) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden_size: 4,
            bidirectional,
            ..ModelConfig::new(2, 3)
        }
    }

    #[test]
    fn bidirectional_single_edge_structure() {
        let g = Multigraph::new(2, array![[1.0], [2.0]], vec![(0, 1)], array![[1.0, 1.0]]).unwrap();
        let pg = PreparedGraph::new(g.clone());
        let rev = pg.reverse().unwrap();
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let msg = Mlp::from_layers(
            vec![Dense {
                weight: Array2::ones((4, 1)),
                bias: array![1.0],
            }],
            Activation::Identity,
            0.0,
        )
        .unwrap();
        let upd = Mlp::identity(3);
        let h = edge_stage(g.edge_features(), pg.support(), &AggSpec::Sum, None).unwrap();
        let (a, _) = node_stage(&x, &h, pg.support(), &msg, &AggSpec::Sum, &upd).unwrap();
        let hr = edge_stage(rev.initial_features(&g).view(), rev.support(), &AggSpec::Sum, None).unwrap();
        let (ar, _) = node_stage(&x, &hr, rev.support(), &msg, &AggSpec::Sum, &upd).unwrap();
        assert_eq!(a[[0, 0]], 0.0);
        assert!(a[[1, 0]] != 0.0);
        assert!(ar[[0, 0]] != 0.0);
        assert_eq!(ar[[1, 0]], 0.0);
    }

    #[test]
    fn reverse_aggregate_counts_out_neighbours() {
        let g = random_connected_multigraph(10, 30, 4).unwrap();
        let pg = PreparedGraph::new(g.clone());
        let rev = pg.reverse().unwrap();
        let x = g.node_features().to_owned();
        let unit = Mlp::from_layers(
            vec![Dense {
                weight: Array2::zeros((x.ncols() + g.edge_dim(), 1)),
                bias: array![1.0],
            }],
            Activation::Identity,
            0.0,
        )
        .unwrap();
        let hr = edge_stage(rev.initial_features(&g).view(), rev.support(), &AggSpec::Sum, None).unwrap();
        let (ar, _) = node_stage(&x, &hr, rev.support(), &unit, &AggSpec::Sum, &Mlp::identity(x.ncols() + 1)).unwrap();
        for j in 0..g.num_nodes() {
            let out: std::collections::BTreeSet<usize> =
                g.edges().iter().filter(|e| e.0 == j).map(|e| e.1).collect();
            assert_eq!(ar[[j, 0]], out.len() as f64);
        }
    }

    #[test]
    fn zero_reverse_messages_match_unidirectional() {
        let g = random_connected_multigraph(7, 15, 5).unwrap();
        let pg = PreparedGraph::new(g.clone());
        let mut bi = Model::new(small_config(true), 11).unwrap();
        let layer = &mut bi.params.layers[0];
        for d in layer.rev_msg.as_mut().unwrap().layers_mut() {
            d.weight.fill(0.0);
            d.bias.fill(0.0);
        }
        let mut uni = Model::new(small_config(false), 11).unwrap();
        uni.params.node_encoder = bi.params.node_encoder.clone();
        uni.params.edge_encoder = bi.params.edge_encoder.clone();
        let ul = &mut uni.params.layers[0];
        let bl = &bi.params.layers[0];
        ul.msg = bl.msg.clone();
        ul.edge_update = bl.edge_update.clone();
        let mut dense = bl.node_update.layers().to_vec();
        dense[0].weight = dense[0].weight.slice(s![..8, ..]).to_owned();
        ul.node_update = Mlp::from_layers(dense, Activation::Relu, 0.0).unwrap();
        let a = bi.forward(&pg, &[], Mode::Eval).unwrap().0.state;
        let b = uni.forward(&pg, &[], Mode::Eval).unwrap().0.state;
        for (p, q) in a.x.iter().zip(b.x.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert_eq!(a.e, b.e);
    }

    #[test]
    fn simple_graph_collapse_matches_single_stage() {
        // A path has no parallel edges.
        let g = Multigraph::new(
            4,
            array![[0.1], [0.2], [0.3], [0.4]],
            vec![(0, 1), (1, 2), (2, 3), (3, 0)],
            array![[1.0, 2.0], [0.5, -1.0], [0.0, 3.0], [2.0, 2.0]],
        )
        .unwrap();
        let pg = PreparedGraph::new(g.clone());
        for spec in [AggSpec::Sum, AggSpec::Mean, AggSpec::Max, AggSpec::Min] {
            let h = edge_stage(g.edge_features(), pg.support(), &spec, None).unwrap();
            assert_eq!(h, g.edge_features());
            let two = Model::new(
                ModelConfig {
                    edge_agg: spec.clone(),
                    node_features: 1,
                    edge_features: 2,
                    ..small_config(false)
                },
                3,
            )
            .unwrap();
            let one = Model {
                config: ModelConfig {
                    stages: Stages::SingleStage,
                    ..two.config.clone()
                },
                params: two.params.clone(),
            };
            let a = two.forward(&pg, &[], Mode::Eval).unwrap().0.state.x;
            let b = one.forward(&pg, &[], Mode::Eval).unwrap().0.state.x;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn single_stage_one_edge() {
        let g = Multigraph::new(2, array![[1.0], [2.0]], vec![(0, 1)], array![[3.0]]).unwrap();
        let pg = PreparedGraph::new(g);
        let cfg = ModelConfig {
            num_layers: 1,
            hidden_size: 1,
            stages: Stages::SingleStage,
            ..ModelConfig::new(1, 1)
        };
        let mut m = Model::new(cfg, 0).unwrap();
        m.params.node_encoder = Mlp::identity(1);
        m.params.edge_encoder = Mlp::identity(1);
        let l = &mut m.params.layers[0];
        l.msg = Mlp::linear(array![[1.0], [1.0]]);
        l.node_update = Mlp::linear(array![[0.0], [1.0]]);
        l.edge_update = Mlp::linear(array![[0.0], [1.0], [0.0]]);
        let state = LayerState {
            x: array![[1.0], [2.0]],
            e: array![[3.0]],
            e_rev: None,
            h: None,
            h_rev: None,
        };
        let next = m.single_stage_layer(0, &pg, &state).unwrap();
        assert_eq!(next.x, array![[0.0], [4.0]]);
        assert_eq!(next.e, array![[3.0]]);
        assert!(m.bidirectional_layer(0, &pg, &state).is_err());
    }

    #[test]
    fn ego_column() {
        let f = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let none = add_ego_ids(f.view(), &[]).unwrap();
        assert_eq!(none.ncols(), 3);
        assert!(none.column(2).iter().all(|&v| v == 0.0));
        let all = add_ego_ids(f.view(), &[0, 1, 2]).unwrap();
        assert!(all.column(2).iter().all(|&v| v == 1.0));
        assert_eq!(all.slice(s![.., ..2]), f);
        assert!(add_ego_ids(f.view(), &[3]).is_err());
    }

    #[test]
    fn identity_model_is_linear() {
        let g = random_connected_multigraph(5, 8, 1).unwrap();
        let pg = PreparedGraph::new(g.clone());
        let cfg = ModelConfig {
            activation: Activation::Identity,
            ..small_config(true)
        };
        let m = Model::new(cfg, 4).unwrap();
        let logits = |scale: f64| {
            let g2 = Multigraph::new(
                5,
                g.node_features().mapv(|v| v * scale),
                g.edges().to_vec(),
                g.edge_features().mapv(|v| v * scale),
            )
            .unwrap();
            m.forward(&PreparedGraph::new(g2), &[], Mode::Eval).unwrap().0.logits
        };
        // Affine in the inputs: f(2x) - f(x) == f(x) - f(0).
        let (l0, l1, l2) = (logits(0.0), logits(1.0), logits(2.0));
        for i in 0..l0.len() {
            assert!(((l2[i] - l1[i]) - (l1[i] - l0[i])).abs() < 1e-9);
        }
        let _ = pg;
    }

    #[test]
    fn unidirectional_ignores_reverse_index() {
        let g = random_connected_multigraph(9, 25, 8).unwrap();
        let m = Model::new(ModelConfig::new(2, 3).with_family(Family::Pna), 5).unwrap();
        let with = PreparedGraph::new(g.clone());
        let supp = build_support_index(&g);
        let without = PreparedGraph::from_parts(g, supp, None).unwrap();
        let a = m.forward(&with, &[], Mode::Eval).unwrap().0;
        let b = m.forward(&without, &[], Mode::Eval).unwrap().0;
        assert_eq!(a, b);
        let bi = Model::new(ModelConfig { bidirectional: true, ..ModelConfig::new(2, 3) }, 5).unwrap();
        assert!(bi.forward(&without, &[], Mode::Eval).is_err());
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let g = random_connected_multigraph(5, 8, 1).unwrap();
        let m = Model::new(ModelConfig::new(4, 3), 0).unwrap();
        assert!(matches!(
            m.forward(&PreparedGraph::new(g), &[], Mode::Eval),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let g = random_connected_multigraph(6, 10, 2).unwrap();
        let pg = PreparedGraph::new(g);
        let m = Model::new(ModelConfig { bidirectional: true, ..ModelConfig::new(2, 3) }.with_family(Family::Pna), 1).unwrap();
        let (out, cache) = m.forward(&pg, &[], Mode::Eval).unwrap();
        let grads = m.backward(&pg, &cache, &Array1::zeros(out.logits.len())).unwrap();
        let flat = grads.to_flat();
        assert_eq!(flat.len(), m.params.num_params());
        assert!(flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let g = random_connected_multigraph(6, 10, 2).unwrap();
        let other = PreparedGraph::new(random_connected_multigraph(7, 12, 2).unwrap());
        let pg = PreparedGraph::new(g);
        let m = Model::new(ModelConfig::new(2, 3), 1).unwrap();
        let (out, cache) = m.forward(&pg, &[], Mode::Eval).unwrap();
        assert!(m.backward(&other, &cache, &out.logits).is_err());
    }

    fn fd_check(cfg: ModelConfig, seed: u64, mode: Mode) -> f64 {
        let g = random_connected_multigraph(6, 10, seed).unwrap();
        let pg = PreparedGraph::new(g);
        let mut m = Model::new(cfg, seed).unwrap();
        m.config.calibrate_degrees(pg.graph());
        let roots = [0, 3];
        let (out, cache) = m.forward(&pg, &roots, mode).unwrap();
        let w = Array1::from_shape_fn(out.logits.len(), |i| ((i * 7 % 5) as f64) - 2.0);
        let analytic = m.backward(&pg, &cache, &w).unwrap().to_flat();
        let theta = m.params.to_flat();
        let mut probe = m.clone();
        let numeric = finite_difference_gradient(&theta, 1e-5, |t| {
            probe.params.set_flat(t).unwrap();
            probe.forward(&pg, &roots, mode).unwrap().0.logits.dot(&w)
        });
        relative_error(&analytic, &numeric)
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let base = ModelConfig {
            hidden_size: 5,
            activation: Activation::Gelu,
            ..ModelConfig::new(2, 3)
        };
        let configs = [
            base.clone(),
            ModelConfig { bidirectional: true, ego_ids: true, dropout: 0.2, ..base.clone() }.with_family(Family::Pna),
            ModelConfig { bidirectional: true, edge_agg: AggSpec::Max, node_agg: AggSpec::Min, readout: Readout::Node, ..base.clone() },
            ModelConfig { stages: Stages::SingleStage, bidirectional: true, node_agg: AggSpec::Mean, ..base.clone() },
            ModelConfig { edge_agg: AggSpec::Std, node_agg: AggSpec::Max, activation: Activation::Relu, ..base.clone() },
        ];
        for (i, cfg) in configs.into_iter().enumerate() {
            let err = fd_check(cfg, 40 + i as u64, Mode::Train { seed: 9 });
            assert!(err <= 1e-4, "config {i}: relative error {err}");
        }
    }

    #[test]
    fn permutation_equivariance_smoke() {
        let g = random_connected_multigraph(9, 30, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GraphPermutation::random(g.num_nodes(), g.num_edges(), &mut rng);
        let gp = apply_permutation(&g, &p).unwrap();
        let m = Model::new(ModelConfig { bidirectional: true, ..ModelConfig::new(2, 3) }.with_family(Family::Pna), 2).unwrap();
        let a = m.forward(&PreparedGraph::new(g), &[], Mode::Eval).unwrap().0;
        let b = m.forward(&PreparedGraph::new(gp), &[], Mode::Eval).unwrap().0;
        for (k, &nk) in p.edge_perm().iter().enumerate() {
            let (u, v) = (a.logits[k], b.logits[nk]);
            assert!((u - v).abs() <= 1e-5 * u.abs().max(v.abs()).max(1.0));
        }
    }
}
