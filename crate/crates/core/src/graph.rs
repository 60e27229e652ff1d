//! Directed multigraphs, the support-pair index that hosts the artificial
//! aggregation nodes, the reversed index used for bi-directional passing, and
//! node/edge permutations.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agg::Groups;
use crate::error::{Error, Result};

/// A directed, attributed multigraph.
///
/// Edges may repeat; row `k` of `edge_features` belongs to `edges[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multigraph {
    num_nodes: usize,
    node_features: Array2<f64>,
    edges: Vec<(usize, usize)>,
    edge_features: Array2<f64>,
}

impl Multigraph {
    pub fn new(
        num_nodes: usize,
        node_features: Array2<f64>,
        edges: Vec<(usize, usize)>,
        edge_features: Array2<f64>,
    ) -> Result<Self> {
        if node_features.nrows() != num_nodes {
            return Err(Error::Structural(format!(
                "{} node feature rows for {} nodes",
                node_features.nrows(),
                num_nodes
            )));
        }
        if edge_features.nrows() != edges.len() {
            return Err(Error::Structural(format!(
                "{} edge feature rows for {} edges",
                edge_features.nrows(),
                edges.len()
            )));
        }
        if let Some((k, &(s, d))) = edges
            .iter()
            .enumerate()
            .find(|(_, &(s, d))| s >= num_nodes || d >= num_nodes)
        {
            return Err(Error::Structural(format!(
                "edge {k} = ({s},{d}) has an endpoint outside [0, {num_nodes})"
            )));
        }
        if node_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Structural("non-finite node feature".into()));
        }
        if edge_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Structural("non-finite edge feature".into()));
        }
        Ok(Self {
            num_nodes,
            node_features,
            edges,
            edge_features,
        })
    }

    /// Graph with a constant-one node feature column.
    pub fn with_unit_nodes(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        edge_features: Array2<f64>,
    ) -> Result<Self> {
        Self::new(
            num_nodes,
            Array2::ones((num_nodes, 1)),
            edges,
            edge_features,
        )
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_features(&self) -> ArrayView2<'_, f64> {
        self.node_features.view()
    }

    pub fn edge_features(&self) -> ArrayView2<'_, f64> {
        self.edge_features.view()
    }

    pub fn node_dim(&self) -> usize {
        self.node_features.ncols()
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_features.ncols()
    }

    /// The same multigraph with every edge reversed; features are copied.
    pub fn reversed(&self) -> Multigraph {
        Multigraph {
            num_nodes: self.num_nodes,
            node_features: self.node_features.clone(),
            edges: self.edges.iter().map(|&(s, d)| (d, s)).collect(),
            edge_features: self.edge_features.clone(),
        }
    }

    /// Replace node features, keeping topology.
    pub fn with_node_features(&self, node_features: Array2<f64>) -> Result<Multigraph> {
        Multigraph::new(
            self.num_nodes,
            node_features,
            self.edges.clone(),
            self.edge_features.clone(),
        )
    }

    /// Weak connectivity via union-find. The empty graph counts as connected.
    pub fn is_weakly_connected(&self) -> bool {
        if self.num_nodes <= 1 {
            return true;
        }
        let mut parent: Vec<usize> = (0..self.num_nodes).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut components = self.num_nodes;
        for &(s, d) in &self.edges {
            let (a, b) = (find(&mut parent, s), find(&mut parent, d));
            if a != b {
                parent[a] = b;
                components -= 1;
            }
        }
        components == 1
    }
}

/// Unique `(src, dst)` pairs of a multigraph with their parallel-edge groups.
///
/// Each pair is the site of one artificial node. Pairs are numbered in order
/// of first occurrence in the edge list and every group lists its edges in
/// ascending index order.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportIndex {
    num_nodes: usize,
    pairs: Vec<(usize, usize)>,
    edge_to_pair: Vec<usize>,
    groups: Groups,
    in_pairs: Groups,
    out_pairs: Groups,
}

impl SupportIndex {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edge_to_pair.len()
    }

    pub fn edge_to_pair(&self) -> &[usize] {
        &self.edge_to_pair
    }

    /// Pair index -> member edge indices.
    pub fn groups(&self) -> &Groups {
        &self.groups
    }

    pub fn group(&self, pair: usize) -> &[usize] {
        self.groups.group(pair)
    }

    pub fn multiplicity(&self, pair: usize) -> usize {
        self.groups.group(pair).len()
    }

    pub fn multiplicities(&self) -> Vec<usize> {
        self.groups.sizes()
    }

    /// Node -> pairs whose destination is the node.
    pub fn in_pairs(&self) -> &Groups {
        &self.in_pairs
    }

    /// Node -> pairs whose source is the node.
    pub fn out_pairs(&self) -> &Groups {
        &self.out_pairs
    }

    /// Distinct in-neighbours of `node`, in pair order.
    pub fn in_neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.in_pairs.group(node).iter().map(|&p| self.pairs[p].0)
    }

    /// Distinct out-neighbours of `node`, in pair order.
    pub fn out_neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.out_pairs.group(node).iter().map(|&p| self.pairs[p].1)
    }

    /// Pair sources, one per pair.
    pub fn pair_sources(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    /// Pair destinations, one per pair.
    pub fn pair_targets(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    /// Index where every edge is its own group; used by single-stage layers.
    pub fn per_edge(g: &Multigraph) -> SupportIndex {
        let pairs = g.edges().to_vec();
        let edge_to_pair: Vec<usize> = (0..pairs.len()).collect();
        let groups = Groups::from_lists((0..pairs.len()).map(|k| vec![k]));
        let (in_pairs, out_pairs) = neighbor_groups(g.num_nodes(), &pairs);
        SupportIndex {
            num_nodes: g.num_nodes(),
            pairs,
            edge_to_pair,
            groups,
            in_pairs,
            out_pairs,
        }
    }
}

fn neighbor_groups(num_nodes: usize, pairs: &[(usize, usize)]) -> (Groups, Groups) {
    let mut ins = vec![Vec::new(); num_nodes];
    let mut outs = vec![Vec::new(); num_nodes];
    for (p, &(s, d)) in pairs.iter().enumerate() {
        outs[s].push(p);
        ins[d].push(p);
    }
    (Groups::from_lists(ins), Groups::from_lists(outs))
}

/// Build the support index of `g`.
pub fn build_support_index(g: &Multigraph) -> SupportIndex {
    build_from_edges(g.num_nodes(), g.edges())
}

fn build_from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> SupportIndex {
    let mut lookup: HashMap<(usize, usize), usize> = HashMap::with_capacity(edges.len());
    let mut pairs = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut edge_to_pair = Vec::with_capacity(edges.len());
    for (k, &e) in edges.iter().enumerate() {
        let p = *lookup.entry(e).or_insert_with(|| {
            pairs.push(e);
            members.push(Vec::new());
            pairs.len() - 1
        });
        members[p].push(k);
        edge_to_pair.push(p);
    }
    let (in_pairs, out_pairs) = neighbor_groups(num_nodes, &pairs);
    SupportIndex {
        num_nodes,
        pairs,
        edge_to_pair,
        groups: Groups::from_lists(members),
        in_pairs,
        out_pairs,
    }
}

/// Support index over the reversed edge multiset.
///
/// Reverse edge `k` is the mirror of original edge `k`; its initial features
/// are a copy of the original edge's features.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseIndex {
    support: SupportIndex,
    rev_edge_to_orig: Vec<usize>,
}

impl ReverseIndex {
    pub fn support(&self) -> &SupportIndex {
        &self.support
    }

    pub fn rev_edge_to_orig(&self) -> &[usize] {
        &self.rev_edge_to_orig
    }

    /// `(src, dst)` of reverse edge `k`.
    pub fn reverse_edge(&self, g: &Multigraph, k: usize) -> (usize, usize) {
        let (s, d) = g.edges()[self.rev_edge_to_orig[k]];
        (d, s)
    }

    /// Initial reverse-edge features, row `k` copied from the original edge.
    pub fn initial_features(&self, g: &Multigraph) -> Array2<f64> {
        let ef = g.edge_features();
        let mut out = Array2::zeros((self.rev_edge_to_orig.len(), g.edge_dim()));
        for (k, &o) in self.rev_edge_to_orig.iter().enumerate() {
            out.row_mut(k).assign(&ef.row(o));
        }
        out
    }
}

pub fn build_reverse_index(g: &Multigraph, s: &SupportIndex) -> Result<ReverseIndex> {
    if s.num_edges() != g.num_edges() || s.num_nodes() != g.num_nodes() {
        return Err(Error::Structural(
            "support index was built from a different graph".into(),
        ));
    }
    let reversed: Vec<(usize, usize)> = g.edges().iter().map(|&(a, b)| (b, a)).collect();
    Ok(ReverseIndex {
        support: build_from_edges(g.num_nodes(), &reversed),
        rev_edge_to_orig: (0..g.num_edges()).collect(),
    })
}

/// A relabelling of nodes together with a relabelling of edges.
///
/// `node_perm[old] = new` and `edge_perm[old] = new`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphPermutation {
    node_perm: Vec<usize>,
    edge_perm: Vec<usize>,
}

fn check_bijection(perm: &[usize], what: &str) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidPermutation(format!(
                "{what} permutation is not a bijection on [0, {})",
                perm.len()
            )));
        }
    }
    Ok(())
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (old, &new) in perm.iter().enumerate() {
        inv[new] = old;
    }
    inv
}

impl GraphPermutation {
    pub fn new(node_perm: Vec<usize>, edge_perm: Vec<usize>) -> Result<Self> {
        check_bijection(&node_perm, "node")?;
        check_bijection(&edge_perm, "edge")?;
        Ok(Self {
            node_perm,
            edge_perm,
        })
    }

    pub fn identity(num_nodes: usize, num_edges: usize) -> Self {
        Self {
            node_perm: (0..num_nodes).collect(),
            edge_perm: (0..num_edges).collect(),
        }
    }

    /// Uniformly random node and edge permutations.
    pub fn random<R: Rng + ?Sized>(num_nodes: usize, num_edges: usize, rng: &mut R) -> Self {
        let mut node_perm: Vec<usize> = (0..num_nodes).collect();
        let mut edge_perm: Vec<usize> = (0..num_edges).collect();
        node_perm.shuffle(rng);
        edge_perm.shuffle(rng);
        Self {
            node_perm,
            edge_perm,
        }
    }

    pub fn node_perm(&self) -> &[usize] {
        &self.node_perm
    }

    pub fn edge_perm(&self) -> &[usize] {
        &self.edge_perm
    }

    pub fn inverse(&self) -> Self {
        Self {
            node_perm: invert(&self.node_perm),
            edge_perm: invert(&self.edge_perm),
        }
    }

    /// Move row `old` of `m` to row `perm[old]`.
    pub fn permute_rows(perm: &[usize], m: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros(m.raw_dim());
        for (old, &new) in perm.iter().enumerate() {
            out.row_mut(new).assign(&m.row(old));
        }
        out
    }
}

/// Relabel `g` by `p`: node `v` becomes `node_perm[v]` and edge `k` becomes
/// `edge_perm[k]`, with feature rows moved accordingly.
pub fn apply_permutation(g: &Multigraph, p: &GraphPermutation) -> Result<Multigraph> {
    if p.node_perm.len() != g.num_nodes() || p.edge_perm.len() != g.num_edges() {
        return Err(Error::InvalidPermutation(format!(
            "permutation sized for {} nodes / {} edges, graph has {} / {}",
            p.node_perm.len(),
            p.edge_perm.len(),
            g.num_nodes(),
            g.num_edges()
        )));
    }
    let mut edges = vec![(0, 0); g.num_edges()];
    for (k, &(s, d)) in g.edges().iter().enumerate() {
        edges[p.edge_perm[k]] = (p.node_perm[s], p.node_perm[d]);
    }
    Ok(Multigraph {
        num_nodes: g.num_nodes(),
        node_features: GraphPermutation::permute_rows(&p.node_perm, g.node_features()),
        edges,
        edge_features: GraphPermutation::permute_rows(&p.edge_perm, g.edge_features()),
    })
}

pub const RANDOM_NODE_DIM: usize = 2;
pub const RANDOM_EDGE_DIM: usize = 3;

/// Weakly connected random multigraph with `m` edges on `n` nodes.
///
/// A random spanning tree with random edge directions forms the backbone;
/// the remaining edges either duplicate an existing pair (half the time) or
/// join a uniformly random pair, so parallel edges and self-loops occur.
/// Edge feature column 0 is a shuffled rank, so all edge rows are distinct.
pub fn random_connected_multigraph(n: usize, m: usize, seed: u64) -> Result<Multigraph> {
    random_connected_multigraph_with_dims(n, m, seed, RANDOM_NODE_DIM, RANDOM_EDGE_DIM)
}

pub fn random_connected_multigraph_with_dims(
    n: usize,
    m: usize,
    seed: u64,
    node_dim: usize,
    edge_dim: usize,
) -> Result<Multigraph> {
    if n == 0 {
        return Err(Error::Infeasible("a graph needs at least one node".into()));
    }
    if m + 1 < n {
        return Err(Error::Infeasible(format!(
            "{m} edges cannot connect {n} nodes"
        )));
    }
    if edge_dim == 0 {
        return Err(Error::Infeasible(
            "distinct edge features need at least one column".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::with_capacity(m);
    for v in 1..n {
        let u = rng.random_range(0..v);
        edges.push(if rng.random_bool(0.5) { (u, v) } else { (v, u) });
    }
    while edges.len() < m {
        if !edges.is_empty() && rng.random_bool(0.5) {
            let k = rng.random_range(0..edges.len());
            edges.push(edges[k]);
        } else {
            edges.push((rng.random_range(0..n), rng.random_range(0..n)));
        }
    }
    edges.shuffle(&mut rng);

    let node_features = Array2::from_shape_fn((n, node_dim), |_| rng.random_range(-1.0..1.0));
    let mut ranks: Vec<usize> = (0..m).collect();
    ranks.shuffle(&mut rng);
    let edge_features = Array2::from_shape_fn((m, edge_dim), |(k, c)| {
        if c == 0 {
            (ranks[k] as f64 + 0.5) / m as f64
        } else {
            rng.random_range(-1.0..1.0)
        }
    });
    Multigraph::new(n, node_features, edges, edge_features)
}
