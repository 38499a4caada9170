//! Token vocabulary and the spatial-temporal embedding layer.
//!
//! Every observed cell gets a token id above the reserved specials. A token
//! sequence is embedded through up to four channels: identity rows from the
//! cell embedding table, spatial rows from a graph convolution over the
//! trajectory graph, optional POI rows, and an optional sinusoidal timestamp
//! encoding whose pairwise dot products depend only on time differences.

use crate::autodiff::{uniform_init, xavier_init, NodeId, ParamSet, Tape, Tensor2};
use crate::error::{Error, Result};
use crate::flow::MobilityFlow;
use crate::hexgrid::CellId;
use crate::model::ModelConfig;
use crate::sparse::CsrMatrix;
use rand::Rng;
use std::collections::HashMap;
use std::rc::Rc;

pub const PAD_TOKEN: usize = 0;
pub const MASK_TOKEN: usize = 1;
pub const CLS_TOKEN: usize = 2;
pub const NUM_SPECIAL_TOKENS: usize = 3;

pub const P_CELL_EMB: &str = "embed.w_g";
pub const P_POI_EMB: &str = "embed.w_p";
pub const P_TIME_FREQS: &str = "embed.time_freqs";
pub const P_GCN_NODE_EMB: &str = "gcn.node_emb";
pub const P_GCN_OUT_PROJ: &str = "gcn.out_proj";

pub fn gcn_layer_weight(layer: usize) -> String {
    format!("gcn.w{layer}")
}

/// Bijective map between observed cells and token ids. Cells are ordered by
/// encoded key, which also matches the trajectory graph's node order.
#[derive(Debug, Clone)]
pub struct Vocab {
    cells: Vec<CellId>,
    by_key: HashMap<u64, usize>,
}

impl Vocab {
    pub fn build(flows: &[MobilityFlow]) -> Result<Vocab> {
        if flows.is_empty() {
            return Err(Error::EmptyCorpus("no flows to build a vocabulary from".into()));
        }
        let mut keys: Vec<u64> = flows
            .iter()
            .flat_map(|f| f.cells.iter().map(|c| c.key()))
            .collect();
        keys.sort_unstable();
        keys.dedup();
        Ok(Vocab::from_keys(keys))
    }

    pub fn from_keys(mut keys: Vec<u64>) -> Vocab {
        keys.sort_unstable();
        keys.dedup();
        let by_key = keys
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, NUM_SPECIAL_TOKENS + i))
            .collect();
        Vocab {
            cells: keys.into_iter().map(CellId::from_key).collect(),
            by_key,
        }
    }

    pub fn size(&self) -> usize {
        self.cells.len() + NUM_SPECIAL_TOKENS
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn keys(&self) -> Vec<u64> {
        self.cells.iter().map(|c| c.key()).collect()
    }

    pub fn token_of_cell(&self, c: CellId) -> Option<usize> {
        self.by_key.get(&c.key()).copied()
    }

    pub fn cell_of_token(&self, token: usize) -> Option<CellId> {
        token
            .checked_sub(NUM_SPECIAL_TOKENS)
            .and_then(|i| self.cells.get(i).copied())
    }

    pub fn is_special(token: usize) -> bool {
        token < NUM_SPECIAL_TOKENS
    }

    /// Graph node index for a cell token; `None` for specials. Valid because
    /// vocabulary and graph share the key ordering, which the model asserts.
    pub fn node_of_token(&self, token: usize) -> Option<usize> {
        token
            .checked_sub(NUM_SPECIAL_TOKENS)
            .filter(|i| *i < self.cells.len())
    }

    /// Cell tokens of a flow, in order (no specials).
    pub fn encode_cells(&self, flow: &MobilityFlow) -> Result<Vec<usize>> {
        flow.cells
            .iter()
            .map(|c| {
                self.token_of_cell(*c).ok_or(Error::Vocab {
                    token: c.key() as usize,
                    vocab_size: self.size(),
                })
            })
            .collect()
    }
}

/// Inserts the embedding and GCN tables for `cfg` into `params`.
pub fn init_embedding_params(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut impl Rng) {
    params.insert(P_CELL_EMB, uniform_init(cfg.vocab_size, cfg.d_l, 0.1, rng));
    if let Some(n_poi) = cfg.n_poi {
        params.insert(P_POI_EMB, uniform_init(n_poi, cfg.d_l, 0.1, rng));
    }
    if cfg.use_time {
        params.insert(P_TIME_FREQS, geometric_frequencies(cfg.d_l));
    }
    params.insert(P_GCN_NODE_EMB, uniform_init(cfg.n_nodes, cfg.d_gcn, 0.1, rng));
    for l in 0..cfg.gcn_layers {
        params.insert(gcn_layer_weight(l), xavier_init(cfg.d_gcn, cfg.d_gcn, rng));
    }
    params.insert(P_GCN_OUT_PROJ, xavier_init(cfg.d_gcn, cfg.d_l, rng));
}

/// Paired frequency init `w_k = 1 / 10000^(2k / d_l)` for the sinusoidal
/// timestamp encoding; the pairs are learned afterwards.
pub fn geometric_frequencies(d_l: usize) -> Tensor2 {
    assert!(d_l % 2 == 0, "temporal encoding needs an even width");
    let half = d_l / 2;
    let data = (0..half)
        .map(|k| 1.0 / 10000f64.powf(2.0 * k as f64 / d_l as f64))
        .collect();
    Tensor2::from_vec(1, half, data).expect("consistent shape")
}

/// Graph convolution over the symmetric-normalized adjacency: starting from
/// the learned node table, each layer propagates neighbor embeddings and
/// applies a ReLU; a final projection maps to the token embedding width.
/// Runs on the tape, so every training step differentiates through it.
pub fn gcn_forward(tape: &mut Tape, params: &ParamSet, cfg: &ModelConfig, a_sym: &Rc<CsrMatrix>) -> Result<NodeId> {
    if a_sym.n_rows() != cfg.n_nodes {
        return Err(Error::Shape {
            op: "gcn_forward",
            details: format!("{} graph nodes, config says {}", a_sym.n_rows(), cfg.n_nodes),
        });
    }
    let mut h = tape.param(params, P_GCN_NODE_EMB)?;
    for l in 0..cfg.gcn_layers {
        let w = tape.param(params, &gcn_layer_weight(l))?;
        let propagated = tape.spmm(a_sym.clone(), h)?;
        let mixed = tape.matmul(propagated, w)?;
        h = tape.relu(mixed)?;
    }
    let proj = tape.param(params, P_GCN_OUT_PROJ)?;
    tape.matmul(h, proj)
}

/// Sinusoidal encoding of a timestamp sequence using the learned paired
/// frequencies.
pub fn temporal_encode(tape: &mut Tape, params: &ParamSet, times: &[f64]) -> Result<NodeId> {
    let freqs = tape.param(params, P_TIME_FREQS)?;
    tape.temporal_encode(freqs, Rc::new(times.to_vec()))
}

/// Per-token embedding channels for one sequence.
#[derive(Debug, Clone, Copy)]
pub struct TokenEmbeddings {
    /// Identity rows from the cell table; the only source of attention
    /// values downstream.
    pub r_id: NodeId,
    /// GCN rows for cell tokens, zero rows for specials.
    pub r_spatial: NodeId,
    pub r_poi: Option<NodeId>,
    pub r_time: Option<NodeId>,
}

impl TokenEmbeddings {
    /// Side channels in fixed order: spatial, then POI, then time.
    pub fn side_channels(&self) -> Vec<NodeId> {
        let mut out = vec![self.r_spatial];
        out.extend(self.r_poi);
        out.extend(self.r_time);
        out
    }
}

/// Looks up all embedding channels for a token sequence. `node_spatial` is
/// the output of [`gcn_forward`] for the model's graph.
pub fn embed_sequence(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    vocab: &Vocab,
    tokens: &[usize],
    pois: Option<&[usize]>,
    times: Option<&[f64]>,
    node_spatial: NodeId,
) -> Result<TokenEmbeddings> {
    for &t in tokens {
        if t >= vocab.size() {
            return Err(Error::Vocab {
                token: t,
                vocab_size: vocab.size(),
            });
        }
    }
    let w_g = tape.param(params, P_CELL_EMB)?;
    let id_idx: Vec<Option<usize>> = tokens.iter().map(|&t| Some(t)).collect();
    let r_id = tape.gather_rows(w_g, &id_idx)?;

    let spatial_idx: Vec<Option<usize>> = tokens.iter().map(|&t| vocab.node_of_token(t)).collect();
    let r_spatial = tape.gather_rows(node_spatial, &spatial_idx)?;

    let r_poi = match pois {
        Some(ids) => {
            let n_poi = cfg.n_poi.ok_or(Error::Channel("poi"))?;
            if ids.len() != tokens.len() {
                return Err(Error::Shape {
                    op: "embed_sequence",
                    details: format!("{} poi ids for {} tokens", ids.len(), tokens.len()),
                });
            }
            for &p in ids {
                if p >= n_poi {
                    return Err(Error::Vocab {
                        token: p,
                        vocab_size: n_poi,
                    });
                }
            }
            let w_p = tape.param(params, P_POI_EMB)?;
            let idx: Vec<Option<usize>> = ids.iter().map(|&p| Some(p)).collect();
            Some(tape.gather_rows(w_p, &idx)?)
        }
        None => None,
    };

    let r_time = match times {
        Some(ts) => {
            if !cfg.use_time {
                return Err(Error::Channel("time"));
            }
            if ts.len() != tokens.len() {
                return Err(Error::Shape {
                    op: "embed_sequence",
                    details: format!("{} timestamps for {} tokens", ts.len(), tokens.len()),
                });
            }
            Some(temporal_encode(tape, params, ts)?)
        }
        None => None,
    };

    Ok(TokenEmbeddings {
        r_id,
        r_spatial,
        r_poi,
        r_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::SourceKind;
    use crate::model::ModelConfig;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flow_of(cells: Vec<CellId>) -> MobilityFlow {
        MobilityFlow {
            trajectory_id: "t".into(),
            user_id: "u".into(),
            cells,
            source_kind: SourceKind::Continuous,
        }
    }

    fn small_cfg(n_nodes: usize) -> ModelConfig {
        ModelConfig {
            d_l: 8,
            d_gcn: 4,
            heads: 2,
            d_head: 4,
            gcn_layers: 1,
            encoder_layers: 1,
            vocab_size: n_nodes + NUM_SPECIAL_TOKENS,
            n_nodes,
            n_poi: None,
            use_time: true,
            use_skip: true,
            n_users: None,
        }
    }

    #[test]
    fn vocab_orders_cells_by_key() {
        let a = CellId::new(2, 0);
        let b = CellId::new(-1, 3);
        let v = Vocab::build(&[flow_of(vec![a, b, a])]).unwrap();
        assert_eq!(v.n_cells(), 2);
        assert_eq!(v.size(), 5);
        // Keys of negative coordinates sort above small positives.
        assert_eq!(v.token_of_cell(a), Some(NUM_SPECIAL_TOKENS));
        assert_eq!(v.token_of_cell(b), Some(NUM_SPECIAL_TOKENS + 1));
        assert_eq!(v.cell_of_token(NUM_SPECIAL_TOKENS), Some(a));
        assert_eq!(v.node_of_token(CLS_TOKEN), None);
        assert_eq!(v.node_of_token(NUM_SPECIAL_TOKENS + 1), Some(1));
    }

    #[test]
    fn encode_cells_rejects_unknown() {
        let v = Vocab::build(&[flow_of(vec![CellId::new(0, 0)])]).unwrap();
        let err = v.encode_cells(&flow_of(vec![CellId::new(9, 9)])).unwrap_err();
        assert!(matches!(err, Error::Vocab { .. }));
    }

    #[test]
    fn gcn_isolated_node_reduction() {
        // With a single self-loop node the propagation is a no-op, so the
        // output is ReLU(h0 W0) P.
        let cfg = small_cfg(1);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut params = ParamSet::new();
        init_embedding_params(&mut params, &cfg, &mut rng);
        let a_sym = Rc::new(CsrMatrix::identity(1));

        let mut tape = Tape::new();
        let out = gcn_forward(&mut tape, &params, &cfg, &a_sym).unwrap();

        let h0 = params.value(P_GCN_NODE_EMB);
        let w0 = params.value(&gcn_layer_weight(0));
        let proj = params.value(P_GCN_OUT_PROJ);
        let mut hidden = h0.matmul(w0);
        for v in hidden.data_mut() {
            *v = v.max(0.0);
        }
        let want = hidden.matmul(proj);
        assert!(tape.value(out).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn gcn_identity_adjacency_and_identity_weights_reduction() {
        let mut cfg = small_cfg(3);
        cfg.d_gcn = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = ParamSet::new();
        init_embedding_params(&mut params, &cfg, &mut rng);
        params.get_mut(&gcn_layer_weight(0)).value = Tensor2::eye(4);
        let a_sym = Rc::new(CsrMatrix::identity(3));

        let mut tape = Tape::new();
        let out = gcn_forward(&mut tape, &params, &cfg, &a_sym).unwrap();

        let mut relu_h0 = params.value(P_GCN_NODE_EMB).clone();
        for v in relu_h0.data_mut() {
            *v = v.max(0.0);
        }
        let want = relu_h0.matmul(params.value(P_GCN_OUT_PROJ));
        assert!(tape.value(out).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn gcn_matches_dense_reference_on_small_graph() {
        let cfg = {
            let mut c = small_cfg(5);
            c.gcn_layers = 2;
            c
        };
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut params = ParamSet::new();
        init_embedding_params(&mut params, &cfg, &mut rng);
        let mut triplets = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                if rng.random::<f64>() < 0.4 {
                    triplets.push((i, j, rng.random_range(0.0..1.0)));
                }
            }
        }
        let a_sym = Rc::new(CsrMatrix::from_triplets(5, 5, &triplets).unwrap());

        let mut tape = Tape::new();
        let out = gcn_forward(&mut tape, &params, &cfg, &a_sym).unwrap();

        // Dense hand computation.
        let dense = Tensor2::from_vec(5, 5, a_sym.to_dense()).unwrap();
        let mut h = params.value(P_GCN_NODE_EMB).clone();
        for l in 0..cfg.gcn_layers {
            let mut next = dense.matmul(&h).matmul(params.value(&gcn_layer_weight(l)));
            for v in next.data_mut() {
                *v = v.max(0.0);
            }
            h = next;
        }
        let want = h.matmul(params.value(P_GCN_OUT_PROJ));
        assert!(tape.value(out).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn gcn_identical_rows_give_identical_outputs() {
        let cfg = small_cfg(2);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut params = ParamSet::new();
        init_embedding_params(&mut params, &cfg, &mut rng);
        // Same initial embedding for both nodes, symmetric adjacency rows.
        let row: Vec<f64> = (0..cfg.d_gcn).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut emb = Tensor2::zeros(2, cfg.d_gcn);
        emb.row_mut(0).copy_from_slice(&row);
        emb.row_mut(1).copy_from_slice(&row);
        params.get_mut(P_GCN_NODE_EMB).value = emb;
        let a_sym = Rc::new(
            CsrMatrix::from_triplets(2, 2, &[(0, 0, 0.5), (0, 1, 0.5), (1, 0, 0.5), (1, 1, 0.5)]).unwrap(),
        );

        let mut tape = Tape::new();
        let out = gcn_forward(&mut tape, &params, &cfg, &a_sym).unwrap();
        assert_eq!(tape.value(out).row(0), tape.value(out).row(1));
    }

    #[test]
    fn temporal_dot_product_depends_on_time_difference_only() {
        let cfg = small_cfg(1);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut params = ParamSet::new();
        init_embedding_params(&mut params, &cfg, &mut rng);

        let mut tape = Tape::new();
        let probe = |tape: &mut Tape, t: f64| -> Vec<f64> {
            let z = temporal_encode(tape, &params, &[t]).unwrap();
            tape.value(z).row(0).to_vec()
        };
        let freqs = params.value(P_TIME_FREQS).row(0).to_vec();
        for _ in 0..200 {
            let t1: f64 = rng.random_range(0.0..1e4);
            let t2: f64 = rng.random_range(0.0..1e4);
            let delta: f64 = rng.random_range(-1e4..1e4);
            let z1 = probe(&mut tape, t1);
            let z2 = probe(&mut tape, t2);
            let dot: f64 = z1.iter().zip(&z2).map(|(a, b)| a * b).sum();
            let want: f64 = freqs.iter().map(|w| (w * (t2 - t1)).cos()).sum();
            assert!((dot - want).abs() < 1e-9, "dot {dot} vs {want}");

            let z1s = probe(&mut tape, t1 + delta);
            let z2s = probe(&mut tape, t2 + delta);
            let dot_shifted: f64 = z1s.iter().zip(&z2s).map(|(a, b)| a * b).sum();
            assert!((dot - dot_shifted).abs() < 1e-9);
        }
    }

    #[test]
    fn embed_sequence_basic_lookup() {
        let a = CellId::new(0, 0);
        let vocab = Vocab::build(&[flow_of(vec![a])]).unwrap();
        let cfg = small_cfg(vocab.n_cells());
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut params = ParamSet::new();
        init_embedding_params(&mut params, &cfg, &mut rng);
        let a_sym = Rc::new(CsrMatrix::identity(1));

        let mut tape = Tape::new();
        let spatial = gcn_forward(&mut tape, &params, &cfg, &a_sym).unwrap();
        let token = vocab.token_of_cell(a).unwrap();
        let emb = embed_sequence(&mut tape, &params, &cfg, &vocab, &[token], None, None, spatial).unwrap();

        assert_eq!(tape.value(emb.r_id).row(0), params.value(P_CELL_EMB).row(token));
        assert_eq!(tape.value(emb.r_spatial).row(0), tape.value(spatial).row(0));
        assert!(emb.r_poi.is_none() && emb.r_time.is_none());
    }

    #[test]
    fn embed_sequence_mask_token_has_zero_spatial_row() {
        let vocab = Vocab::build(&[flow_of(vec![CellId::new(0, 0)])]).unwrap();
        let cfg = small_cfg(vocab.n_cells());
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut params = ParamSet::new();
        init_embedding_params(&mut params, &cfg, &mut rng);
        let a_sym = Rc::new(CsrMatrix::identity(1));

        let mut tape = Tape::new();
        let spatial = gcn_forward(&mut tape, &params, &cfg, &a_sym).unwrap();
        let emb =
            embed_sequence(&mut tape, &params, &cfg, &vocab, &[MASK_TOKEN], None, None, spatial).unwrap();
        assert_eq!(tape.value(emb.r_id).row(0), params.value(P_CELL_EMB).row(MASK_TOKEN));
        assert!(tape.value(emb.r_spatial).row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_sequence_is_deterministic() {
        let vocab = Vocab::build(&[flow_of(vec![CellId::new(0, 0), CellId::new(1, 0)])]).unwrap();
        let cfg = small_cfg(vocab.n_cells());
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut params = ParamSet::new();
        init_embedding_params(&mut params, &cfg, &mut rng);
        let a_sym = Rc::new(CsrMatrix::identity(2));
        let tokens = [CLS_TOKEN, 3, 4, 3];
        let times = [0.0, 1.0, 2.0, 3.0];

        let run = || -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let spatial = gcn_forward(&mut tape, &params, &cfg, &a_sym).unwrap();
            let emb = embed_sequence(
                &mut tape,
                &params,
                &cfg,
                &vocab,
                &tokens,
                None,
                Some(&times),
                spatial,
            )
            .unwrap();
            (
                tape.value(emb.r_id).data().to_vec(),
                tape.value(emb.r_time.unwrap()).data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn embed_sequence_rejects_out_of_vocab_token() {
        let vocab = Vocab::build(&[flow_of(vec![CellId::new(0, 0)])]).unwrap();
        let cfg = small_cfg(vocab.n_cells());
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let mut params = ParamSet::new();
        init_embedding_params(&mut params, &cfg, &mut rng);
        let a_sym = Rc::new(CsrMatrix::identity(1));
        let mut tape = Tape::new();
        let spatial = gcn_forward(&mut tape, &params, &cfg, &a_sym).unwrap();
        let err = embed_sequence(&mut tape, &params, &cfg, &vocab, &[99], None, None, spatial).unwrap_err();
        assert!(matches!(err, Error::Vocab { .. }));
    }
}
