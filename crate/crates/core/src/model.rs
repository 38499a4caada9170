//! Model assembly: configuration, parameter construction, and the forward
//! passes for masked-token recovery and trajectory-user classification.

use crate::autodiff::{xavier_init, NodeId, ParamSet, Tape, Tensor2};
use crate::embedding::{
    embed_sequence, gcn_forward, init_embedding_params, TokenEmbeddings, Vocab, CLS_TOKEN,
};
use crate::encoder::{encoder_forward, init_encoder_params, AttentionMask};
use crate::error::{Error, Result};
use crate::graph::TrajGraph;
use crate::sparse::CsrMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

pub const P_MLM_W: &str = "head.mlm.w";
pub const P_MLM_B: &str = "head.mlm.b";
pub const P_CLS_W: &str = "head.cls.w";
pub const P_CLS_B: &str = "head.cls.b";

/// Architecture hyperparameters plus the corpus-derived sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_l: usize,
    pub d_gcn: usize,
    pub heads: usize,
    pub d_head: usize,
    pub gcn_layers: usize,
    pub encoder_layers: usize,
    pub vocab_size: usize,
    pub n_nodes: usize,
    /// POI vocabulary size when the POI channel is present.
    pub n_poi: Option<usize>,
    pub use_time: bool,
    /// Ablation switch for the GCN-to-prediction skip path.
    pub use_skip: bool,
    /// Classification head size; absent until fine-tuning.
    pub n_users: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(bool, &str); 7] = [
            (self.d_l >= 2 && self.d_l % 2 == 0, "d_l must be even and at least 2"),
            (self.d_gcn >= 1, "d_gcn must be positive"),
            (self.heads >= 1, "at least one attention head"),
            (self.d_head >= 1, "d_head must be positive"),
            (self.gcn_layers >= 1, "at least one gcn layer"),
            (self.encoder_layers >= 1, "at least one encoder layer"),
            (self.n_nodes >= 1, "graph must have nodes"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    /// Side channels feeding the fusion MLP: spatial always, POI and time
    /// when configured.
    pub fn n_side_channels(&self) -> usize {
        1 + usize::from(self.n_poi.is_some()) + usize::from(self.use_time)
    }
}

/// One sequence ready for the encoder: CLS-prefixed tokens, optional side
/// inputs, and the attendability mask (false = PAD).
#[derive(Debug, Clone)]
pub struct SequenceInput {
    pub tokens: Vec<usize>,
    pub pois: Option<Vec<usize>>,
    pub times: Option<Vec<f64>>,
    pub attendable: Vec<bool>,
}

impl SequenceInput {
    /// CLS + cell tokens, fully attendable.
    pub fn from_cell_tokens(cell_tokens: &[usize]) -> SequenceInput {
        let mut tokens = Vec::with_capacity(cell_tokens.len() + 1);
        tokens.push(CLS_TOKEN);
        tokens.extend_from_slice(cell_tokens);
        let attendable = vec![true; tokens.len()];
        SequenceInput {
            tokens,
            pois: None,
            times: None,
            attendable,
        }
    }
}

/// Intermediate nodes of one encoded sequence.
pub struct EncodedSequence {
    pub encoded: NodeId,
    pub embeddings: TokenEmbeddings,
}

/// The trajectory-user linking model: vocabulary, graph operator, and all
/// learnable parameters.
pub struct TulModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub a_sym: Rc<CsrMatrix>,
    pub params: ParamSet,
}

impl TulModel {
    /// Fresh model with seeded initialization. The vocabulary must index the
    /// same cells, in the same order, as the graph nodes.
    pub fn new(vocab: Vocab, graph: &TrajGraph, cfg: ModelConfig, seed: u64) -> Result<TulModel> {
        cfg.validate()?;
        check_alignment(&vocab, &graph.nodes.iter().map(|c| c.key()).collect::<Vec<_>>())?;
        if cfg.vocab_size != vocab.size() || cfg.n_nodes != graph.n_nodes() {
            return Err(Error::Config(format!(
                "config sized for vocab {} / {} nodes, corpus has {} / {}",
                cfg.vocab_size,
                cfg.n_nodes,
                vocab.size(),
                graph.n_nodes()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_embedding_params(&mut params, &cfg, &mut rng);
        init_encoder_params(&mut params, &cfg, &mut rng);
        params.insert(P_MLM_W, xavier_init(cfg.d_l, cfg.vocab_size, &mut rng));
        params.insert(P_MLM_B, Tensor2::zeros(1, cfg.vocab_size));
        if let Some(n_users) = cfg.n_users {
            insert_classifier_head(&mut params, &cfg, n_users, &mut rng);
        }
        Ok(TulModel {
            cfg,
            vocab,
            a_sym: Rc::new(graph.a_sym.clone()),
            params,
        })
    }

    /// Rebuilds a model around restored parameters.
    pub fn from_parts(vocab: Vocab, a_sym: Rc<CsrMatrix>, cfg: ModelConfig, params: ParamSet) -> Result<TulModel> {
        cfg.validate()?;
        if a_sym.n_rows() != cfg.n_nodes || vocab.size() != cfg.vocab_size {
            return Err(Error::Config("restored parts disagree with the model config".into()));
        }
        Ok(TulModel {
            cfg,
            vocab,
            a_sym,
            params,
        })
    }

    /// Adds the user classification head (fine-tuning entry point).
    pub fn add_classifier_head(&mut self, n_users: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        insert_classifier_head(&mut self.params, &self.cfg, n_users, &mut rng);
        self.cfg.n_users = Some(n_users);
    }

    /// Runs the graph convolution; shared by every sequence on a tape.
    pub fn spatial_table(&self, tape: &mut Tape) -> Result<NodeId> {
        gcn_forward(tape, &self.params, &self.cfg, &self.a_sym)
    }

    /// Embeds and encodes one sequence.
    pub fn encode(&self, tape: &mut Tape, spatial: NodeId, seq: &SequenceInput) -> Result<EncodedSequence> {
        let embeddings = embed_sequence(
            tape,
            &self.params,
            &self.cfg,
            &self.vocab,
            &seq.tokens,
            seq.pois.as_deref(),
            seq.times.as_deref(),
            spatial,
        )?;
        let mask = AttentionMask::new(seq.attendable.clone())?;
        let channels = embeddings.side_channels();
        let encoded = encoder_forward(tape, &self.params, &self.cfg, embeddings.r_id, &channels, &mask)?;
        Ok(EncodedSequence { encoded, embeddings })
    }

    /// Vocabulary logits at the given positions of an encoded sequence.
    pub fn mlm_logits(&self, tape: &mut Tape, encoded: NodeId, positions: &[usize]) -> Result<NodeId> {
        let idx: Vec<Option<usize>> = positions.iter().map(|&p| Some(p)).collect();
        let rows = tape.gather_rows(encoded, &idx)?;
        let w = tape.param(&self.params, P_MLM_W)?;
        let b = tape.param(&self.params, P_MLM_B)?;
        let logits = tape.matmul(rows, w)?;
        tape.add_bias(logits, b)
    }

    /// Per-user logits for one sequence: the encoder output at the CLS
    /// position concatenated with the skip path (the mean GCN spatial
    /// embedding over cell positions), through a linear head. Zeroing the
    /// skip (ablation) keeps shapes fixed but removes the spatial signal.
    pub fn classify_logits(&self, tape: &mut Tape, seq: &EncodedSequence, cell_positions: &[usize]) -> Result<NodeId> {
        if self.cfg.n_users.is_none() {
            return Err(Error::Config("classifier head not initialized".into()));
        }
        let pooled = tape.gather_rows(seq.encoded, &[Some(0)])?;
        let skip = if self.cfg.use_skip && !cell_positions.is_empty() {
            tape.mean_rows(seq.embeddings.r_spatial, cell_positions)?
        } else {
            tape.constant(Tensor2::zeros(1, self.cfg.d_l))?
        };
        let joined = tape.concat_cols(&[pooled, skip])?;
        let w = tape.param(&self.params, P_CLS_W)?;
        let b = tape.param(&self.params, P_CLS_B)?;
        let logits = tape.matmul(joined, w)?;
        tape.add_bias(logits, b)
    }

    /// Convenience single-sequence classification used by the evaluator:
    /// builds a fresh tape and returns the logits row.
    pub fn classify_forward(&self, seq: &SequenceInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let spatial = self.spatial_table(&mut tape)?;
        let encoded = self.encode(&mut tape, spatial, seq)?;
        let cell_positions = cell_positions(&seq.tokens);
        let logits = self.classify_logits(&mut tape, &encoded, &cell_positions)?;
        Ok(tape.value(logits).row(0).to_vec())
    }
}

fn insert_classifier_head(params: &mut ParamSet, cfg: &ModelConfig, n_users: usize, rng: &mut ChaCha8Rng) {
    params.insert(P_CLS_W, xavier_init(2 * cfg.d_l, n_users, rng));
    params.insert(P_CLS_B, Tensor2::zeros(1, n_users));
}

/// Positions of non-special tokens in a sequence.
pub fn cell_positions(tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| !Vocab::is_special(t))
        .map(|(i, _)| i)
        .collect()
}

fn check_alignment(vocab: &Vocab, node_keys: &[u64]) -> Result<()> {
    if vocab.keys() != node_keys {
        return Err(Error::Config(
            "vocabulary cells and graph nodes are not aligned".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{MobilityFlow, SourceKind};
    use crate::hexgrid::CellId;

    fn tiny_corpus() -> Vec<MobilityFlow> {
        let cells = [CellId::new(0, 0), CellId::new(1, 0), CellId::new(1, -1)];
        vec![
            MobilityFlow {
                trajectory_id: "u1:0000".into(),
                user_id: "u1".into(),
                cells: vec![cells[0], cells[1], cells[2]],
                source_kind: SourceKind::Continuous,
            },
            MobilityFlow {
                trajectory_id: "u2:0000".into(),
                user_id: "u2".into(),
                cells: vec![cells[2], cells[1]],
                source_kind: SourceKind::Continuous,
            },
        ]
    }

    fn tiny_cfg(vocab: &Vocab, graph: &TrajGraph) -> ModelConfig {
        ModelConfig {
            d_l: 8,
            d_gcn: 4,
            heads: 2,
            d_head: 4,
            gcn_layers: 1,
            encoder_layers: 1,
            vocab_size: vocab.size(),
            n_nodes: graph.n_nodes(),
            n_poi: None,
            use_time: false,
            use_skip: true,
            n_users: Some(2),
        }
    }

    #[test]
    fn model_builds_and_classifies() {
        let flows = tiny_corpus();
        let vocab = Vocab::build(&flows).unwrap();
        let graph = TrajGraph::build(&flows).unwrap();
        let cfg = tiny_cfg(&vocab, &graph);
        let model = TulModel::new(vocab, &graph, cfg, 7).unwrap();

        let tokens = model.vocab.encode_cells(&flows[0]).unwrap();
        let seq = SequenceInput::from_cell_tokens(&tokens);
        let logits = model.classify_forward(&seq).unwrap();
        assert_eq!(logits.len(), 2);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn skip_ablation_uses_only_the_cls_path() {
        // With the skip zeroed, logits must not depend on the spatial rows:
        // equivalently, only the first d_l columns of the head matter. Verify
        // by perturbing the skip half of the head weights.
        let flows = tiny_corpus();
        let vocab = Vocab::build(&flows).unwrap();
        let graph = TrajGraph::build(&flows).unwrap();
        let mut cfg = tiny_cfg(&vocab, &graph);
        cfg.use_skip = false;
        let mut model = TulModel::new(vocab, &graph, cfg, 7).unwrap();

        let tokens = model.vocab.encode_cells(&flows[0]).unwrap();
        let seq = SequenceInput::from_cell_tokens(&tokens);
        let before = model.classify_forward(&seq).unwrap();
        // Scribble on the rows of the head that multiply the skip vector.
        let d_l = model.cfg.d_l;
        {
            let head = &mut model.params.get_mut(P_CLS_W).value;
            for i in d_l..2 * d_l {
                for j in 0..head.cols() {
                    head.set(i, j, 99.0);
                }
            }
        }
        let after = model.classify_forward(&seq).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn permuted_head_permutes_logits() {
        let flows = tiny_corpus();
        let vocab = Vocab::build(&flows).unwrap();
        let graph = TrajGraph::build(&flows).unwrap();
        let cfg = tiny_cfg(&vocab, &graph);
        let mut model = TulModel::new(vocab, &graph, cfg, 9).unwrap();

        let tokens = model.vocab.encode_cells(&flows[1]).unwrap();
        let seq = SequenceInput::from_cell_tokens(&tokens);
        let before = model.classify_forward(&seq).unwrap();

        // Swap the two user columns of the head (weights and bias).
        {
            let w = &mut model.params.get_mut(P_CLS_W).value;
            for i in 0..w.rows() {
                let (a, b) = (w.get(i, 0), w.get(i, 1));
                w.set(i, 0, b);
                w.set(i, 1, a);
            }
        }
        {
            let b = &mut model.params.get_mut(P_CLS_B).value;
            let (x, y) = (b.get(0, 0), b.get(0, 1));
            b.set(0, 0, y);
            b.set(0, 1, x);
        }
        let after = model.classify_forward(&seq).unwrap();
        assert_eq!(before[0], after[1]);
        assert_eq!(before[1], after[0]);
    }

    #[test]
    fn misaligned_vocab_is_rejected() {
        let flows = tiny_corpus();
        let graph = TrajGraph::build(&flows).unwrap();
        let other_vocab = Vocab::from_keys(vec![CellId::new(9, 9).key()]);
        let cfg = ModelConfig {
            vocab_size: other_vocab.size(),
            n_nodes: graph.n_nodes(),
            ..tiny_cfg(&Vocab::build(&flows).unwrap(), &graph)
        };
        assert!(TulModel::new(other_vocab, &graph, cfg, 1).is_err());
    }
}
