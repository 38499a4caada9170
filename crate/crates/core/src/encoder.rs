//! Transformer-style encoder block with non-invasive self-attention.
//!
//! Standard self-attention projects queries, keys and values from the same
//! input. The non-invasive variant used here takes two inputs: token
//! identity embeddings and a set of side channels (spatial, POI, time). Side
//! information is fused with the identities through an MLP and steers the
//! queries and keys only; values are always projected from the identity
//! embeddings, so side channels shape who attends to whom but never leak
//! into the attended content.

use crate::autodiff::{xavier_init, NodeId, ParamSet, Tape, Tensor2};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use rand::Rng;

/// Additive pre-softmax penalty for masked key positions. Large enough that
/// the weight underflows to exactly zero after max subtraction.
const MASK_BIAS: f64 = -1e30;

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

pub fn enc_param(layer: usize, suffix: &str) -> String {
    format!("enc{layer}.{suffix}")
}

/// Per-position attendability; `false` marks PAD slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    attendable: Vec<bool>,
}

impl AttentionMask {
    pub fn new(attendable: Vec<bool>) -> Result<AttentionMask> {
        if attendable.is_empty() || !attendable.iter().any(|a| *a) {
            return Err(Error::Shape {
                op: "attention_mask",
                details: "at least one attendable position is required".into(),
            });
        }
        Ok(AttentionMask { attendable })
    }

    pub fn all(len: usize) -> AttentionMask {
        AttentionMask {
            attendable: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.attendable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attendable.is_empty()
    }

    pub fn is_attendable(&self, i: usize) -> bool {
        self.attendable[i]
    }

    fn bias_matrix(&self) -> Tensor2 {
        let m = self.attendable.len();
        let mut bias = Tensor2::zeros(m, m);
        for i in 0..m {
            for (j, &ok) in self.attendable.iter().enumerate() {
                if !ok {
                    bias.set(i, j, MASK_BIAS);
                }
            }
        }
        bias
    }
}

/// Inserts one encoder stack's parameters into `params`.
pub fn init_encoder_params(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut impl Rng) {
    let d = cfg.d_l;
    let fused_in = (1 + cfg.n_side_channels()) * d;
    let proj = cfg.heads * cfg.d_head;
    for l in 0..cfg.encoder_layers {
        params.insert(enc_param(l, "fusion.w1"), xavier_init(fused_in, d, rng));
        params.insert(enc_param(l, "fusion.b1"), Tensor2::zeros(1, d));
        params.insert(enc_param(l, "fusion.w2"), xavier_init(d, d, rng));
        params.insert(enc_param(l, "fusion.b2"), Tensor2::zeros(1, d));
        params.insert(enc_param(l, "attn.wq"), xavier_init(d, proj, rng));
        params.insert(enc_param(l, "attn.wk"), xavier_init(d, proj, rng));
        params.insert(enc_param(l, "attn.wv"), xavier_init(d, proj, rng));
        params.insert(enc_param(l, "attn.out"), xavier_init(proj, d, rng));
        params.insert(enc_param(l, "ffn.w1"), xavier_init(d, 4 * d, rng));
        params.insert(enc_param(l, "ffn.b1"), Tensor2::zeros(1, 4 * d));
        params.insert(enc_param(l, "ffn.w2"), xavier_init(4 * d, d, rng));
        params.insert(enc_param(l, "ffn.b2"), Tensor2::zeros(1, d));
        params.insert(enc_param(l, "ln1.gamma"), Tensor2::filled(1, d, 1.0));
        params.insert(enc_param(l, "ln1.beta"), Tensor2::zeros(1, d));
        params.insert(enc_param(l, "ln2.gamma"), Tensor2::filled(1, d, 1.0));
        params.insert(enc_param(l, "ln2.beta"), Tensor2::zeros(1, d));
    }
}

/// Scaled dot-product attention over pre-projected Q/K/V stacks, per head,
/// heads concatenated and projected back to `d_l`.
fn attention_core(
    tape: &mut Tape,
    cfg: &ModelConfig,
    q_all: NodeId,
    k_all: NodeId,
    v_all: NodeId,
    out_w: NodeId,
    mask: &AttentionMask,
    scale: f64,
) -> Result<NodeId> {
    let m = tape.value(q_all).rows();
    if mask.len() != m {
        return Err(Error::Shape {
            op: "attention",
            details: format!("mask of {} positions for {m} tokens", mask.len()),
        });
    }
    let bias = tape.constant(mask.bias_matrix())?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let offset = h * cfg.d_head;
        let q = tape.slice_cols(q_all, offset, cfg.d_head)?;
        let k = tape.slice_cols(k_all, offset, cfg.d_head)?;
        let v = tape.slice_cols(v_all, offset, cfg.d_head)?;
        let scores = tape.matmul_nt(q, k)?;
        let scaled = tape.scale(scores, scale)?;
        let masked = tape.add(scaled, bias)?;
        let weights = tape.softmax_rows(masked)?;
        heads.push(tape.matmul(weights, v)?);
    }
    let stacked = tape.concat_cols(&heads)?;
    tape.matmul(stacked, out_w)
}

/// Baseline self-attention: queries, keys and values all projected from `x`.
/// Scaled by `1/sqrt(d_head)` unless overridden.
pub fn standard_attention(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    layer: usize,
    x: NodeId,
    mask: &AttentionMask,
    scale_override: Option<f64>,
) -> Result<NodeId> {
    let wq = tape.param(params, &enc_param(layer, "attn.wq"))?;
    let wk = tape.param(params, &enc_param(layer, "attn.wk"))?;
    let wv = tape.param(params, &enc_param(layer, "attn.wv"))?;
    let out_w = tape.param(params, &enc_param(layer, "attn.out"))?;
    let q_all = tape.matmul(x, wq)?;
    let k_all = tape.matmul(x, wk)?;
    let v_all = tape.matmul(x, wv)?;
    let scale = scale_override.unwrap_or(1.0 / (cfg.d_head as f64).sqrt());
    attention_core(tape, cfg, q_all, k_all, v_all, out_w, mask, scale)
}

/// The fused representation `F = MLP(r_id || side channels)` that drives
/// queries and keys.
pub fn fuse_side_channels(
    tape: &mut Tape,
    params: &ParamSet,
    layer: usize,
    r_id: NodeId,
    channels: &[NodeId],
) -> Result<NodeId> {
    let mut parts = vec![r_id];
    parts.extend_from_slice(channels);
    let x = tape.concat_cols(&parts)?;
    let w1 = tape.param(params, &enc_param(layer, "fusion.w1"))?;
    let b1 = tape.param(params, &enc_param(layer, "fusion.b1"))?;
    let w2 = tape.param(params, &enc_param(layer, "fusion.w2"))?;
    let b2 = tape.param(params, &enc_param(layer, "fusion.b2"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, w2)?;
    tape.add_bias(h, b2)
}

/// Value projection of the identity embeddings. Deliberately independent of
/// the side channels; this is the non-invasiveness guarantee.
pub fn nova_value_projection(
    tape: &mut Tape,
    params: &ParamSet,
    layer: usize,
    r_id: NodeId,
) -> Result<NodeId> {
    let wv = tape.param(params, &enc_param(layer, "attn.wv"))?;
    tape.matmul(r_id, wv)
}

/// Non-invasive spatial-temporal attention: side channels steer similarity
/// through the fused Q/K, values come from `r_id` alone. Scaled by
/// `1/sqrt(d_l)` unless overridden.
pub fn st_nova(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    layer: usize,
    r_id: NodeId,
    channels: &[NodeId],
    mask: &AttentionMask,
    scale_override: Option<f64>,
) -> Result<NodeId> {
    if channels.is_empty() {
        return Err(Error::Channel("spatial"));
    }
    let fused = fuse_side_channels(tape, params, layer, r_id, channels)?;
    let wq = tape.param(params, &enc_param(layer, "attn.wq"))?;
    let wk = tape.param(params, &enc_param(layer, "attn.wk"))?;
    let out_w = tape.param(params, &enc_param(layer, "attn.out"))?;
    let q_all = tape.matmul(fused, wq)?;
    let k_all = tape.matmul(fused, wk)?;
    let v_all = nova_value_projection(tape, params, layer, r_id)?;
    let scale = scale_override.unwrap_or(1.0 / (cfg.d_l as f64).sqrt());
    attention_core(tape, cfg, q_all, k_all, v_all, out_w, mask, scale)
}

/// One post-norm encoder block: attention + residual + layer norm, then the
/// position-wise feed-forward + residual + layer norm.
pub fn encoder_block(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    layer: usize,
    r_id: NodeId,
    channels: &[NodeId],
    mask: &AttentionMask,
) -> Result<NodeId> {
    let attn = st_nova(tape, params, cfg, layer, r_id, channels, mask, None)?;
    let res1 = tape.add(r_id, attn)?;
    let g1 = tape.param(params, &enc_param(layer, "ln1.gamma"))?;
    let be1 = tape.param(params, &enc_param(layer, "ln1.beta"))?;
    let y1 = tape.layer_norm_rows(res1, g1, be1, LN_EPS)?;

    let w1 = tape.param(params, &enc_param(layer, "ffn.w1"))?;
    let b1 = tape.param(params, &enc_param(layer, "ffn.b1"))?;
    let w2 = tape.param(params, &enc_param(layer, "ffn.w2"))?;
    let b2 = tape.param(params, &enc_param(layer, "ffn.b2"))?;
    let f = tape.matmul(y1, w1)?;
    let f = tape.add_bias(f, b1)?;
    let f = tape.relu(f)?;
    let f = tape.matmul(f, w2)?;
    let f = tape.add_bias(f, b2)?;

    let res2 = tape.add(y1, f)?;
    let g2 = tape.param(params, &enc_param(layer, "ln2.gamma"))?;
    let be2 = tape.param(params, &enc_param(layer, "ln2.beta"))?;
    tape.layer_norm_rows(res2, g2, be2, LN_EPS)
}

/// Stacks the configured number of encoder blocks; block `l > 0` consumes the
/// previous block's output in place of the identity embeddings, with the same
/// side channels throughout.
pub fn encoder_forward(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    r_id: NodeId,
    channels: &[NodeId],
    mask: &AttentionMask,
) -> Result<NodeId> {
    let mut h = r_id;
    for l in 0..cfg.encoder_layers {
        h = encoder_block(tape, params, cfg, l, h, channels, mask)?;
    }
    Ok(h)
}
