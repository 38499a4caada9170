//! Trajectory-induced spatial graph.
//!
//! Nodes are the cells observed in the flow corpus, ordered by encoded cell
//! key. A node's neighborhood is the union of its observed successors
//! (weighted by transition count) and its in-corpus geometric hex neighbors
//! (weight 1 when unobserved). Row normalization yields the transition
//! operator `A`; adding self-loops, symmetrizing and degree-normalizing
//! yields the propagation operator `A_sym` used by the graph convolution.

use crate::error::{Error, Result};
use crate::flow::MobilityFlow;
use crate::hexgrid::{neighbors, CellId};
use crate::sparse::CsrMatrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

/// Observed successors and geometric neighbors per node, plus the raw,
/// row-normalized and symmetric-normalized adjacency matrices.
#[derive(Debug, Clone)]
pub struct TrajGraph {
    /// Observed cells, sorted by encoded key; the index is the node id.
    pub nodes: Vec<CellId>,
    pub node_index: HashMap<u64, usize>,
    /// Per node: successor node id -> transition count.
    pub n_obs: Vec<BTreeMap<usize, u64>>,
    /// Per node: geometric hex neighbors that are themselves nodes, sorted.
    pub n_geo: Vec<Vec<usize>>,
    pub raw: CsrMatrix,
    pub a: CsrMatrix,
    pub a_sym: CsrMatrix,
}

pub type NeighborSets = (Vec<CellId>, Vec<BTreeMap<usize, u64>>, Vec<Vec<usize>>);

/// Scans the corpus for nodes, observed-successor counts, and in-corpus
/// geometric neighbors.
pub fn build_neighbor_sets(flows: &[MobilityFlow]) -> Result<NeighborSets> {
    if flows.is_empty() {
        return Err(Error::EmptyCorpus("no flows to build a graph from".into()));
    }
    let mut keys: Vec<u64> = flows
        .iter()
        .flat_map(|f| f.cells.iter().map(|c| c.key()))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let nodes: Vec<CellId> = keys.iter().map(|&k| CellId::from_key(k)).collect();
    let node_index: HashMap<u64, usize> = keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();

    let mut n_obs: Vec<BTreeMap<usize, u64>> = vec![BTreeMap::new(); nodes.len()];
    for flow in flows {
        for w in flow.cells.windows(2) {
            let i = node_index[&w[0].key()];
            let j = node_index[&w[1].key()];
            *n_obs[i].entry(j).or_insert(0) += 1;
        }
    }

    let n_geo: Vec<Vec<usize>> = nodes
        .iter()
        .map(|c| {
            let mut ids: Vec<usize> = neighbors(*c)
                .iter()
                .filter_map(|n| node_index.get(&n.key()).copied())
                .collect();
            ids.sort_unstable();
            ids
        })
        .collect();

    Ok((nodes, n_obs, n_geo))
}

/// Raw weights: observed transition count where present, otherwise 1 for a
/// geometric neighbor, otherwise 0. No self-loops here; those enter once in
/// [`symmetric_normalize`].
pub fn raw_weights(nodes: &[CellId], n_obs: &[BTreeMap<usize, u64>], n_geo: &[Vec<usize>]) -> CsrMatrix {
    let n = nodes.len();
    let mut triplets = Vec::new();
    for i in 0..n {
        for (&j, &count) in &n_obs[i] {
            triplets.push((i, j, count as f64));
        }
        for &j in &n_geo[i] {
            if !n_obs[i].contains_key(&j) {
                triplets.push((i, j, 1.0));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, &triplets).expect("indices bounded by node count")
}

/// Divides each row by its sum; all-zero rows stay all-zero.
pub fn row_normalize(raw: &CsrMatrix) -> CsrMatrix {
    let sums = raw.row_sums();
    let triplets: Vec<(usize, usize, f64)> = raw
        .triplets()
        .into_iter()
        .map(|(i, j, v)| (i, j, if sums[i] > 0.0 { v / sums[i] } else { 0.0 }))
        .collect();
    CsrMatrix::from_triplets(raw.n_rows(), raw.n_cols(), &triplets).expect("same sparsity pattern")
}

/// `D^{-1/2} (A + I) D^{-1/2}` with the self-looped matrix symmetrized by
/// averaging first, so the result is exactly symmetric and its spectrum is
/// real with radius at most 1.
pub fn symmetric_normalize(a: &CsrMatrix) -> CsrMatrix {
    let n = a.n_rows();
    assert_eq!(n, a.n_cols(), "adjacency must be square");
    // B = (A + A^T)/2 + I
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * a.nnz() + n);
    for (i, j, v) in a.triplets() {
        triplets.push((i, j, v / 2.0));
        triplets.push((j, i, v / 2.0));
    }
    for i in 0..n {
        triplets.push((i, i, 1.0));
    }
    let b = CsrMatrix::from_triplets(n, n, &triplets).expect("square");
    // Diagonal of B is at least 1, so every degree is positive.
    let deg = b.row_sums();
    let scaled: Vec<(usize, usize, f64)> = b
        .triplets()
        .into_iter()
        .map(|(i, j, v)| (i, j, v / (deg[i].sqrt() * deg[j].sqrt())))
        .collect();
    CsrMatrix::from_triplets(n, n, &scaled).expect("square")
}

impl TrajGraph {
    pub fn build(flows: &[MobilityFlow]) -> Result<TrajGraph> {
        let (nodes, n_obs, n_geo) = build_neighbor_sets(flows)?;
        let raw = raw_weights(&nodes, &n_obs, &n_geo);
        let a = row_normalize(&raw);
        let a_sym = symmetric_normalize(&a);
        let node_index = nodes.iter().enumerate().map(|(i, c)| (c.key(), i)).collect();
        Ok(TrajGraph {
            nodes,
            node_index,
            n_obs,
            n_geo,
            raw,
            a,
            a_sym,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_of(&self, cell: CellId) -> Option<usize> {
        self.node_index.get(&cell.key()).copied()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let file = GraphFile::from(self);
        let f = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
        serde_json::to_writer_pretty(f, &file).map_err(|e| Error::Format {
            path: display,
            details: e.to_string(),
        })
    }
}

/// Serialized graph: node keys plus every entry where any of the three
/// matrices is nonzero, ordered by (i, j).
#[derive(Debug, Serialize, Deserialize)]
pub struct GraphFile {
    pub nodes: Vec<u64>,
    pub edges: Vec<GraphEdge>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    pub raw: f64,
    pub a: f64,
    pub a_sym: f64,
}

impl From<&TrajGraph> for GraphFile {
    fn from(g: &TrajGraph) -> GraphFile {
        let mut positions: Vec<(usize, usize)> = g
            .raw
            .triplets()
            .into_iter()
            .chain(g.a_sym.triplets())
            .map(|(i, j, _)| (i, j))
            .collect();
        positions.sort_unstable();
        positions.dedup();
        let edges = positions
            .into_iter()
            .map(|(i, j)| GraphEdge {
                i,
                j,
                raw: g.raw.get(i, j),
                a: g.a.get(i, j),
                a_sym: g.a_sym.get(i, j),
            })
            .collect();
        GraphFile {
            nodes: g.nodes.iter().map(|c| c.key()).collect(),
            edges,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::SourceKind;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flow(user: &str, idx: usize, cells: Vec<CellId>) -> MobilityFlow {
        MobilityFlow {
            trajectory_id: format!("{user}:{idx:04}"),
            user_id: user.into(),
            cells,
            source_kind: SourceKind::CheckinInterpolated,
        }
    }

    #[test]
    fn single_transition_counted() {
        let a = CellId::new(0, 0);
        let b = CellId::new(4, 4);
        let flows = vec![flow("u1", 0, vec![a, b])];
        let (nodes, n_obs, _) = build_neighbor_sets(&flows).unwrap();
        assert_eq!(nodes, vec![a, b]);
        assert_eq!(n_obs[0].get(&1), Some(&1));
        assert!(n_obs[1].is_empty());
    }

    #[test]
    fn repeated_transitions_accumulate() {
        let a = CellId::new(0, 0);
        let b = CellId::new(4, 4);
        let flows = vec![flow("u1", 0, vec![a, b]), flow("u2", 0, vec![a, b])];
        let (_, n_obs, _) = build_neighbor_sets(&flows).unwrap();
        assert_eq!(n_obs[0].get(&1), Some(&2));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            build_neighbor_sets(&[]),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn counts_match_bruteforce_pair_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let n_flows = rng.random_range(1..20);
            let flows: Vec<MobilityFlow> = (0..n_flows)
                .map(|i| {
                    let len = rng.random_range(1..15);
                    let cells = (0..len)
                        .map(|_| CellId::new(rng.random_range(-3..3), rng.random_range(-3..3)))
                        .collect();
                    flow("u", i, cells)
                })
                .collect();
            let (nodes, n_obs, _) = build_neighbor_sets(&flows).unwrap();

            // Brute force: scan every consecutive pair in every flow.
            let mut want: BTreeMap<(u64, u64), u64> = BTreeMap::new();
            for f in &flows {
                for w in f.cells.windows(2) {
                    *want.entry((w[0].key(), w[1].key())).or_insert(0) += 1;
                }
            }
            let mut got: BTreeMap<(u64, u64), u64> = BTreeMap::new();
            for (i, succ) in n_obs.iter().enumerate() {
                for (&j, &c) in succ {
                    got.insert((nodes[i].key(), nodes[j].key()), c);
                }
            }
            assert_eq!(got, want);
        }
    }

    /// One observed transition a->b with count 5, the other five neighbors of
    /// `a` present in the corpus but never transitioned into.
    fn hub_scenario() -> (Vec<MobilityFlow>, CellId, CellId) {
        let a = CellId::new(0, 0);
        let b = neighbors(a)[0];
        let mut flows: Vec<MobilityFlow> = (0..5).map(|i| flow("u1", i, vec![a, b])).collect();
        for (i, n) in neighbors(a).iter().enumerate() {
            if *n != b {
                flows.push(flow("geo", i, vec![*n]));
            }
        }
        (flows, a, b)
    }

    #[test]
    fn observed_weight_dominates_geometric() {
        let (flows, a, b) = hub_scenario();
        let g = TrajGraph::build(&flows).unwrap();
        let ia = g.node_of(a).unwrap();
        let ib = g.node_of(b).unwrap();
        assert_eq!(g.raw.get(ia, ib), 5.0);
        for n in neighbors(a) {
            if n != b {
                assert_eq!(g.raw.get(ia, g.node_of(n).unwrap()), 1.0);
            }
        }
        // Row-normalized: 5/10 to the observed successor, 1/10 to each of
        // the five unobserved geometric neighbors.
        assert!((g.a.get(ia, ib) - 0.5).abs() < 1e-12);
        for n in neighbors(a) {
            if n != b {
                assert!((g.a.get(ia, g.node_of(n).unwrap()) - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn observed_count_one_overrides_geometric_weight() {
        // j both observed (count 1) and geometric: the observed branch wins,
        // which happens to give the same value 1.
        let a = CellId::new(0, 0);
        let b = neighbors(a)[2];
        let flows = vec![flow("u1", 0, vec![a, b])];
        let g = TrajGraph::build(&flows).unwrap();
        let (ia, ib) = (g.node_of(a).unwrap(), g.node_of(b).unwrap());
        assert!(g.n_obs[ia].contains_key(&ib));
        assert!(g.n_geo[ia].contains(&ib));
        assert_eq!(g.raw.get(ia, ib), 1.0);
    }

    #[test]
    fn isolated_node_has_empty_row() {
        let a = CellId::new(0, 0);
        let far = CellId::new(50, 50);
        let flows = vec![flow("u1", 0, vec![a]), flow("u2", 0, vec![far])];
        let g = TrajGraph::build(&flows).unwrap();
        let i = g.node_of(far).unwrap();
        assert_eq!(g.raw.row(i).0.len(), 0);
        assert_eq!(g.a.row(i).0.len(), 0);
        // Self-loop only after symmetric normalization.
        assert_eq!(g.a_sym.get(i, i), 1.0);
    }

    #[test]
    fn row_normalize_single_neighbor() {
        let raw = CsrMatrix::from_triplets(2, 2, &[(0, 1, 7.0)]).unwrap();
        let a = row_normalize(&raw);
        assert_eq!(a.get(0, 1), 1.0);
    }

    #[test]
    fn row_normalize_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.random_range(1..20);
            let mut triplets = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if rng.random::<f64>() < 0.3 {
                        triplets.push((i, j, rng.random_range(0.0..10.0)));
                    }
                }
            }
            let raw = CsrMatrix::from_triplets(n, n, &triplets).unwrap();
            let a = row_normalize(&raw);
            for (i, s) in a.row_sums().iter().enumerate() {
                if raw.row(i).0.is_empty() {
                    assert_eq!(*s, 0.0);
                } else {
                    assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
                }
            }
        }
    }

    #[test]
    fn symmetric_normalize_isolated_node() {
        let a = CsrMatrix::from_triplets(1, 1, &[]).unwrap();
        let s = symmetric_normalize(&a);
        assert_eq!(s.get(0, 0), 1.0);
    }

    #[test]
    fn symmetric_normalize_two_node_example() {
        // A = [[0,1],[1,0]]: B = A + I has row sums 2, so every entry of
        // A_sym is 1/2.
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let s = symmetric_normalize(&a);
        for i in 0..2 {
            for j in 0..2 {
                assert!((s.get(i, j) - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_normalize_spectrum_bounded() {
        // Random directed row-stochastic-ish matrices; the normalized
        // operator must be symmetric with eigenvalues in [-1, 1]. Checked
        // against a dense eigensolver.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let n = rng.random_range(1..40);
            let mut triplets = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i != j && rng.random::<f64>() < 0.2 {
                        triplets.push((i, j, rng.random_range(0.0..5.0)));
                    }
                }
            }
            let raw = CsrMatrix::from_triplets(n, n, &triplets).unwrap();
            let a = row_normalize(&raw);
            let s = symmetric_normalize(&a);
            assert!(s.max_abs_asymmetry() < 1e-9);
            for i in 0..n {
                assert!(s.get(i, i) > 0.0, "diagonal must stay positive");
            }
            let dense = nalgebra::DMatrix::from_row_slice(n, n, &s.to_dense());
            let eigs = dense.symmetric_eigen().eigenvalues;
            for e in eigs.iter() {
                assert!(e.abs() <= 1.0 + 1e-6, "eigenvalue {e} out of range");
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let (flows, _, _) = hub_scenario();
        let g1 = TrajGraph::build(&flows).unwrap();
        let g2 = TrajGraph::build(&flows).unwrap();
        assert_eq!(g1.nodes, g2.nodes);
        assert_eq!(g1.raw, g2.raw);
        assert_eq!(g1.a, g2.a);
        assert_eq!(g1.a_sym, g2.a_sym);
        // Nodes are exactly the observed cells, sorted by key.
        let mut keys: Vec<u64> = g1.nodes.iter().map(|c| c.key()).collect();
        keys.dedup();
        assert_eq!(keys.len(), g1.nodes.len());
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn unobserved_cells_never_become_nodes() {
        let a = CellId::new(0, 0);
        let flows = vec![flow("u1", 0, vec![a])];
        let g = TrajGraph::build(&flows).unwrap();
        assert_eq!(g.n_nodes(), 1);
        assert!(g.n_geo[0].is_empty());
    }
}
