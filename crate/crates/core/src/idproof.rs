//! Unique node identifiers from a strict edge order, and the port-numbering
//! counterexample.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Multigraph, ReverseIndex, SupportIndex};

/// 1-based edge labels forming a bijection onto `[1, m]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeLabeling {
    labels: Vec<usize>,
}

impl EdgeLabeling {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        let m = labels.len();
        let mut seen = vec![false; m];
        for &l in &labels {
            if l == 0 || l > m || std::mem::replace(&mut seen[l - 1], true) {
                return Err(Error::Precondition(format!(
                    "labels must be a permutation of 1..={m}"
                )));
            }
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Rank edges by lexicographic order of their feature rows.
pub fn label_edges_by_features(g: &Multigraph) -> Result<EdgeLabeling> {
    let feats = g.edge_features();
    let rows: Vec<Vec<f64>> = feats.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| cmp_rows(&rows[a], &rows[b]));
    for w in order.windows(2) {
        if cmp_rows(&rows[w[0]], &rows[w[1]]).is_eq() {
            let (a, b) = (w[0].min(w[1]), w[0].max(w[1]));
            return Err(Error::NoStrictOrder(a, b));
        }
    }
    let mut labels = vec![0; rows.len()];
    for (rank, &k) in order.iter().enumerate() {
        labels[k] = rank + 1;
    }
    Ok(EdgeLabeling { labels })
}

/// Identifiers and BFS bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdState {
    /// Digit sequence per node; empty when not (yet) reached.
    pub ids: Vec<Vec<usize>>,
    pub active: BTreeSet<usize>,
    pub finished: BTreeSet<usize>,
    /// Rounds actually executed.
    pub rounds: usize,
}

/// Synchronous BFS identifier assignment.
///
/// Every active node sends its id extended by the smallest label towards each
/// out-neighbour, and by `m +` the smallest label towards each in-neighbour,
/// then finishes. Nodes without an id adopt the lexicographically smallest
/// message they receive and become active. Runs at most `rounds` rounds
/// (`None`: the number of nodes) and stops early once nothing is active.
pub fn bfs_assign_ids(
    g: &Multigraph,
    supp: &SupportIndex,
    rev: &ReverseIndex,
    labels: &EdgeLabeling,
    root: usize,
    rounds: Option<usize>,
) -> Result<IdState> {
    let n = g.num_nodes();
    let m = g.num_edges();
    if root >= n {
        return Err(Error::Structural(format!("root {root} outside [0, {n})")));
    }
    if labels.len() != m || supp.num_edges() != m || rev.support().num_edges() != m {
        return Err(Error::Precondition(
            "labels / indices do not belong to this graph".into(),
        ));
    }
    let min_label = |grp: &[usize]| grp.iter().map(|&k| labels.labels[k]).min().expect("non-empty group");
    // Reverse groups hold reverse-edge indices; map them back to originals.
    let rev_map = rev.rev_edge_to_orig();
    let rev_min = |grp: &[usize]| {
        grp.iter()
            .map(|&k| labels.labels[rev_map[k]])
            .min()
            .expect("non-empty group")
    };

    let mut state = IdState {
        ids: vec![Vec::new(); n],
        active: BTreeSet::from([root]),
        finished: BTreeSet::new(),
        rounds: 0,
    };
    state.ids[root] = vec![1];
    let limit = rounds.unwrap_or(n);
    while state.rounds < limit && !state.active.is_empty() {
        state.rounds += 1;
        let mut inbox: Vec<Option<Vec<usize>>> = vec![None; n];
        let mut deliver = |to: usize, msg: Vec<usize>| {
            let slot = &mut inbox[to];
            if slot.as_ref().is_none_or(|cur| msg < *cur) {
                *slot = Some(msg);
            }
        };
        let senders = std::mem::take(&mut state.active);
        for &v in &senders {
            for &p in supp.out_pairs().group(v) {
                let mut msg = state.ids[v].clone();
                msg.push(min_label(supp.group(p)));
                deliver(supp.pairs()[p].1, msg);
            }
            // Reverse pairs leaving v are original pairs entering v.
            let rs = rev.support();
            for &p in rs.out_pairs().group(v) {
                let mut msg = state.ids[v].clone();
                msg.push(m + rev_min(rs.group(p)));
                deliver(rs.pairs()[p].1, msg);
            }
        }
        state.finished.extend(senders);
        for (u, msg) in inbox.into_iter().enumerate() {
            if let Some(msg) = msg {
                if state.ids[u].is_empty() && !state.finished.contains(&u) {
                    state.ids[u] = msg;
                    state.active.insert(u);
                }
            }
        }
    }
    let unreached: Vec<usize> = (0..n).filter(|&v| state.ids[v].is_empty()).collect();
    if !unreached.is_empty() {
        return Err(Error::Unreached(unreached));
    }
    Ok(state)
}

/// Undirected hop distance from `root` (`usize::MAX` when unreachable).
pub fn bfs_distances(g: &Multigraph, root: usize) -> Vec<usize> {
    let n = g.num_nodes();
    let mut adj = vec![Vec::new(); n];
    for &(s, d) in g.edges() {
        adj[s].push(d);
        adj[d].push(s);
    }
    let mut dist = vec![usize::MAX; n];
    dist[root] = 0;
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        for &u in &adj[v] {
            if dist[u] == usize::MAX {
                dist[u] = dist[v] + 1;
                queue.push_back(u);
            }
        }
    }
    dist
}

/// Port numbers: every node numbers its distinct neighbours (in and out
/// together) `1..=k`, and every ordered pair numbers its parallel edges
/// `1..=P`. The order is drawn from a seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortAssignment {
    /// `neighbor_ports[v]` lists `(neighbour, port)` sorted by neighbour.
    pub neighbor_ports: Vec<Vec<(usize, usize)>>,
    /// Port of each edge among its parallel edges.
    pub edge_ports: Vec<usize>,
}

impl PortAssignment {
    pub fn neighbor_port(&self, v: usize, u: usize) -> Option<usize> {
        let list = &self.neighbor_ports[v];
        list.binary_search_by_key(&u, |e| e.0).ok().map(|i| list[i].1)
    }
}

pub fn assign_ports(g: &Multigraph, supp: &SupportIndex, order_seed: u64) -> PortAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
    let n = g.num_nodes();
    let mut neighbors = vec![BTreeSet::new(); n];
    for &(s, d) in supp.pairs() {
        neighbors[s].insert(d);
        neighbors[d].insert(s);
    }
    let neighbor_ports = neighbors
        .into_iter()
        .map(|set| {
            let nb: Vec<usize> = set.into_iter().collect();
            let mut ports: Vec<usize> = (1..=nb.len()).collect();
            ports.shuffle(&mut rng);
            nb.into_iter().zip(ports).collect()
        })
        .collect();
    let mut edge_ports = vec![0; g.num_edges()];
    for grp in supp.groups().iter() {
        let mut ports: Vec<usize> = (1..=grp.len()).collect();
        ports.shuffle(&mut rng);
        for (&k, p) in grp.iter().zip(ports) {
            edge_ports[k] = p;
        }
    }
    PortAssignment {
        neighbor_ports,
        edge_ports,
    }
}

/// Node embeddings of the BFS identifier map driven by ports instead of
/// feature-derived labels: each newly reached node takes the minimum over
/// `id(sender) ∥ port(sender → node)`.
pub fn port_embeddings(g: &Multigraph, ports: &PortAssignment, root: usize) -> Vec<Vec<usize>> {
    let n = g.num_nodes();
    let mut adj = vec![BTreeSet::new(); n];
    for &(s, d) in g.edges() {
        adj[s].insert(d);
        adj[d].insert(s);
    }
    let mut ids = vec![Vec::new(); n];
    ids[root] = vec![1];
    let mut frontier = vec![root];
    while !frontier.is_empty() {
        let mut inbox: Vec<Option<Vec<usize>>> = vec![None; n];
        for &v in &frontier {
            for &u in &adj[v] {
                if !ids[u].is_empty() {
                    continue;
                }
                let mut msg = ids[v].clone();
                msg.push(ports.neighbor_port(v, u).expect("port of a neighbour"));
                if inbox[u].as_ref().is_none_or(|cur| msg < *cur) {
                    inbox[u] = Some(msg);
                }
            }
        }
        frontier.clear();
        for (u, msg) in inbox.into_iter().enumerate() {
            if let Some(msg) = msg {
                ids[u] = msg;
                frontier.push(u);
            }
        }
    }
    ids
}

/// Star of order `n`: centre 0 with an edge to each leaf; leaves carry
/// distinct features.
pub fn star_graph(n: usize) -> Result<Multigraph> {
    if n < 2 {
        return Err(Error::Infeasible("a star needs at least two nodes".into()));
    }
    let x = ndarray::Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
    let edges: Vec<(usize, usize)> = (1..n).map(|l| (0, l)).collect();
    Multigraph::new(n, x, edges, ndarray::Array2::zeros((n - 1, 1)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub n: usize,
    pub seed_a: u64,
    pub seed_b: u64,
    pub node: usize,
    pub embedding_a: Vec<usize>,
    pub embedding_b: Vec<usize>,
}

/// First node whose embedding differs between two port assignments.
pub fn compare_port_embeddings(g: &Multigraph, seed_a: u64, seed_b: u64) -> Option<Witness> {
    let supp = crate::graph::build_support_index(g);
    let a = port_embeddings(g, &assign_ports(g, &supp, seed_a), 0);
    let b = port_embeddings(g, &assign_ports(g, &supp, seed_b), 0);
    (0..g.num_nodes()).find(|&v| a[v] != b[v]).map(|v| Witness {
        n: g.num_nodes(),
        seed_a,
        seed_b,
        node: v,
        embedding_a: a[v].clone(),
        embedding_b: b[v].clone(),
    })
}

/// Search port orders of a star of order `n` for a node whose embedding
/// changes: compares seed `base_seed` against `base_seed + 1 ..= base_seed + trials`.
pub fn nonequivariance_witness(n: usize, trials: usize, base_seed: u64) -> Result<Witness> {
    if n <= 3 {
        return Err(Error::Precondition(format!("star order must exceed 3, got {n}")));
    }
    let g = star_graph(n)?;
    (1..=trials as u64)
        .find_map(|t| compare_port_embeddings(&g, base_seed, base_seed.wrapping_add(t)))
        .ok_or_else(|| Error::Infeasible(format!("no witness for n = {n} after {trials} trials")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_reverse_index, build_support_index, random_connected_multigraph};
    use ndarray::{array, Array2};

    fn ids_for(g: &Multigraph, labels: Vec<usize>, root: usize) -> Vec<Vec<usize>> {
        let supp = build_support_index(g);
        let rev = build_reverse_index(g, &supp).unwrap();
        let labels = EdgeLabeling::new(labels).unwrap();
        bfs_assign_ids(g, &supp, &rev, &labels, root, None).unwrap().ids
    }

    #[test]
    fn labels_are_ranks() {
        let g = Multigraph::new(2, Array2::zeros((2, 1)), vec![(0, 1); 3], array![[2.0], [1.0], [3.0]]).unwrap();
        assert_eq!(label_edges_by_features(&g).unwrap().labels(), &[2, 1, 3]);
        let g = Multigraph::new(2, Array2::zeros((2, 1)), vec![(0, 1); 3], array![[0.0, 1.0], [0.0, 2.0], [1.0, 0.0]]).unwrap();
        assert_eq!(label_edges_by_features(&g).unwrap().labels(), &[1, 2, 3]);
        let g = Multigraph::new(2, Array2::zeros((2, 1)), vec![(0, 1); 3], array![[1.0], [2.0], [1.0]]).unwrap();
        assert!(matches!(label_edges_by_features(&g), Err(Error::NoStrictOrder(0, 2))));
    }

    #[test]
    fn parallel_pair() {
        let g = Multigraph::new(2, Array2::zeros((2, 1)), vec![(0, 1), (0, 1)], array![[1.0], [2.0]]).unwrap();
        assert_eq!(ids_for(&g, vec![1, 2], 0), vec![vec![1], vec![1, 1]]);
    }

    #[test]
    fn out_star() {
        let g = Multigraph::new(4, Array2::zeros((4, 1)), vec![(0, 1), (0, 2), (0, 3)], Array2::zeros((3, 1))).unwrap();
        let ids = ids_for(&g, vec![1, 2, 3], 0);
        assert_eq!(&ids[1..], &[vec![1, 1], vec![1, 2], vec![1, 3]]);
    }

    #[test]
    fn in_star_uses_offset() {
        let g = Multigraph::new(4, Array2::zeros((4, 1)), vec![(1, 0), (2, 0), (3, 0)], Array2::zeros((3, 1))).unwrap();
        let ids = ids_for(&g, vec![1, 2, 3], 0);
        assert_eq!(&ids[1..], &[vec![1, 4], vec![1, 5], vec![1, 6]]);
    }

    #[test]
    fn disconnected_reports_unreached() {
        let g = Multigraph::new(4, Array2::zeros((4, 1)), vec![(0, 1), (2, 3)], array![[1.0], [2.0]]).unwrap();
        let supp = build_support_index(&g);
        let rev = build_reverse_index(&g, &supp).unwrap();
        let labels = label_edges_by_features(&g).unwrap();
        assert!(matches!(
            bfs_assign_ids(&g, &supp, &rev, &labels, 0, None),
            Err(Error::Unreached(v)) if v == vec![2, 3]
        ));
    }

    #[test]
    fn random_graphs_unique_and_digit_law() {
        for seed in 0..30 {
            let g = random_connected_multigraph(15, 40, seed).unwrap();
            let labels = label_edges_by_features(&g).unwrap();
            let ids = ids_for(&g, labels.labels().to_vec(), 0);
            let distinct: BTreeSet<_> = ids.iter().collect();
            assert_eq!(distinct.len(), ids.len());
            let dist = bfs_distances(&g, 0);
            for v in 0..g.num_nodes() {
                assert_eq!(ids[v].len(), dist[v] + 1);
            }
        }
    }

    #[test]
    fn ports_examples() {
        let g = Multigraph::new(2, Array2::zeros((2, 1)), vec![(0, 1), (0, 1)], array![[1.0], [2.0]]).unwrap();
        let supp = build_support_index(&g);
        let orders: BTreeSet<Vec<usize>> = (0..20).map(|s| assign_ports(&g, &supp, s).edge_ports).collect();
        assert_eq!(orders, BTreeSet::from([vec![1, 2], vec![2, 1]]));

        let path = Multigraph::new(3, Array2::zeros((3, 1)), vec![(0, 1), (1, 2)], array![[1.0], [2.0]]).unwrap();
        let p = assign_ports(&path, &build_support_index(&path), 7);
        assert_eq!(p.edge_ports, vec![1, 1]);

        let star = star_graph(6).unwrap();
        let ss = build_support_index(&star);
        let a = assign_ports(&star, &ss, 1);
        assert!((2..10).any(|s| assign_ports(&star, &ss, s) != a));
        let mut centre: Vec<usize> = a.neighbor_ports[0].iter().map(|e| e.1).collect();
        centre.sort();
        assert_eq!(centre, (1..=5).collect::<Vec<_>>());
    }

    #[test]
    fn witness_exists_and_is_deterministic() {
        let w = nonequivariance_witness(4, 10, 0).unwrap();
        assert_ne!(w.embedding_a, w.embedding_b);
        assert!(nonequivariance_witness(3, 10, 0).is_err());
        let g = star_graph(5).unwrap();
        assert!(compare_port_embeddings(&g, 3, 3).is_none());
    }
}
