//! Pre-norm ViT encoder blocks: multi-head self-attention, feed-forward, and
//! the CLS attention row that token scoring reads.

use crate::error::{Error, Result};
use crate::tensor::{gelu, layernorm, linear, matmul, matmul_bt, softmax_rows, Tensor};

pub const LN_EPS: f32 = 1e-6;

/// Projection weights of one attention layer, stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_q: Tensor,
    pub b_k: Tensor,
    pub b_v: Tensor,
    pub b_o: Tensor,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        AttentionWeights {
            w_q: Tensor::zeros(&[dim, dim]),
            w_k: Tensor::zeros(&[dim, dim]),
            w_v: Tensor::zeros(&[dim, dim]),
            w_o: Tensor::zeros(&[dim, dim]),
            b_q: Tensor::zeros(&[dim]),
            b_k: Tensor::zeros(&[dim]),
            b_v: Tensor::zeros(&[dim]),
            b_o: Tensor::zeros(&[dim]),
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub attn: AttentionWeights,
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
}

impl BlockWeights {
    /// All-zero parameters except unit layernorm gains.
    pub fn zeros(dim: usize, heads: usize, hidden: usize) -> Self {
        BlockWeights {
            attn: AttentionWeights::zeros(dim, heads),
            norm1_gamma: Tensor::full(&[dim], 1.0),
            norm1_beta: Tensor::zeros(&[dim]),
            ffn_w1: Tensor::zeros(&[dim, hidden]),
            ffn_b1: Tensor::zeros(&[hidden]),
            ffn_w2: Tensor::zeros(&[hidden, dim]),
            ffn_b2: Tensor::zeros(&[dim]),
            norm2_gamma: Tensor::full(&[dim], 1.0),
            norm2_beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.attn.dim()
    }
}

/// Attention probabilities kept from one MHSA call.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// `H × N`: each head's softmax row for the CLS query.
    pub cls_row: Tensor,
    /// `H × N × N`, present only when requested.
    pub full_map: Option<Tensor>,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.cls_row.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.cls_row.shape()[1]
    }
}

/// Multi-head self-attention over `x: N×D` (CLS at row 0).
pub fn mhsa(x: &Tensor, w: &AttentionWeights, record_full_map: bool) -> Result<(Tensor, AttentionRecord)> {
    let (n, d) = x.dims2()?;
    if d != w.dim() {
        return Err(Error::dim(
            "mhsa",
            format!("input width {} but attention weights expect {}", d, w.dim()),
        ));
    }
    if w.heads == 0 || d % w.heads != 0 {
        return Err(Error::dim(
            "mhsa",
            format!("{} heads do not divide width {}", w.heads, d),
        ));
    }
    if n < 2 {
        return Err(Error::dim("mhsa", format!("need at least 2 tokens, got {n}")));
    }
    let hd = w.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();

    let q = linear(x, &w.w_q, Some(&w.b_q))?;
    let k = linear(x, &w.w_k, Some(&w.b_k))?;
    let v = linear(x, &w.w_v, Some(&w.b_v))?;

    let mut concat = Tensor::zeros(&[n, d]);
    let mut cls_row = Tensor::zeros(&[w.heads, n]);
    let mut full = record_full_map.then(|| Tensor::zeros(&[w.heads, n, n]));
    for h in 0..w.heads {
        let (c0, c1) = (h * hd, (h + 1) * hd);
        let q_h = q.slice_cols(c0, c1)?;
        let k_h = k.slice_cols(c0, c1)?;
        let v_h = v.slice_cols(c0, c1)?;
        let probs = softmax_rows(&matmul_bt(&q_h, &k_h)?.scale(scale));
        let out_h = matmul(&probs, &v_h)?;
        for r in 0..n {
            concat.row_mut(r)[c0..c1].copy_from_slice(out_h.row(r));
        }
        cls_row.row_mut(h).copy_from_slice(probs.row(0));
        if let Some(full) = full.as_mut() {
            full.data_mut()[h * n * n..(h + 1) * n * n].copy_from_slice(probs.data());
        }
    }
    let out = linear(&concat, &w.w_o, Some(&w.b_o))?;
    Ok((
        out,
        AttentionRecord {
            cls_row,
            full_map: full,
        },
    ))
}

/// `Linear → GELU → Linear`.
pub fn ffn(x: &Tensor, w: &BlockWeights) -> Result<Tensor> {
    let hidden = gelu(&linear(x, &w.ffn_w1, Some(&w.ffn_b1))?);
    linear(&hidden, &w.ffn_w2, Some(&w.ffn_b2))
}

/// `x + MHSA(LN(x))`.
pub fn attention_sublayer(x: &Tensor, w: &BlockWeights, record_full_map: bool) -> Result<(Tensor, AttentionRecord)> {
    let normed = layernorm(x, &w.norm1_gamma, &w.norm1_beta, LN_EPS)?;
    let (attn, record) = mhsa(&normed, &w.attn, record_full_map)?;
    Ok((x.add(&attn)?, record))
}

/// `x + FFN(LN(x))`.
pub fn ffn_sublayer(x: &Tensor, w: &BlockWeights) -> Result<Tensor> {
    let normed = layernorm(x, &w.norm2_gamma, &w.norm2_beta, LN_EPS)?;
    x.add(&ffn(&normed, w)?)
}

/// One pre-norm encoder block.
pub fn encoder_block(x: &Tensor, w: &BlockWeights) -> Result<(Tensor, AttentionRecord)> {
    let (y, record) = attention_sublayer(x, w, false)?;
    Ok((ffn_sublayer(&y, w)?, record))
}
