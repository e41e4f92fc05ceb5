//! Dual-scale patch embedding, low-to-high fusion, and the pooled-attention
//! block used by the high-scale branch before fusion.

use crate::error::{Error, Result};
use crate::tensor::{
    avgpool2d, conv2d_depthwise, conv2d_pointwise, grid_to_tokens, linear, nearest_upsample, patchify,
    tokens_to_grid, Tensor,
};
use crate::transformer::{ffn_sublayer, mhsa, AttentionRecord, BlockWeights, LN_EPS};

/// Strided patch projection stored as `(3·p·p) × D` plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedWeights {
    pub patch: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Patch projection, CLS vector and position table for one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedWeights {
    pub proj: PatchEmbedWeights,
    pub cls: Tensor,
    /// `(1 + patches) × D`, row 0 belongs to CLS.
    pub pos: Tensor,
}

impl EmbedWeights {
    pub fn zeros(channels: usize, patch: usize, patches: usize, dim: usize) -> Self {
        EmbedWeights {
            proj: PatchEmbedWeights {
                patch,
                weight: Tensor::zeros(&[channels * patch * patch, dim]),
                bias: Tensor::zeros(&[dim]),
            },
            cls: Tensor::zeros(&[dim]),
            pos: Tensor::zeros(&[1 + patches, dim]),
        }
    }
}

/// `[CLS; patch tokens] + pos` for a single scale, with the patch grid size.
pub fn embed_single(image: &Tensor, w: &EmbedWeights) -> Result<(Tensor, (usize, usize))> {
    let (_, h, wd) = image.dims3()?;
    let p = w.proj.patch;
    let patches = patchify(image, p)?;
    let tokens = linear(&patches, &w.proj.weight, Some(&w.proj.bias))?;
    let cls = w.cls.clone().reshape(&[1, w.cls.numel()])?;
    let seq = cls.concat_rows(&tokens)?;
    if seq.shape() != w.pos.shape() {
        return Err(Error::dim(
            "embed",
            format!(
                "position table {:?} does not match sequence {:?} for {}x{} image, patch {}",
                w.pos.shape(),
                seq.shape(),
                h,
                wd,
                p
            ),
        ));
    }
    Ok((seq.add(&w.pos)?, (h / p, wd / p)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualScaleState {
    /// `(1 + Nh) × D`
    pub high: Tensor,
    /// `(1 + Nl) × D`
    pub low: Tensor,
    pub grid_high: (usize, usize),
    pub grid_low: (usize, usize),
}

impl DualScaleState {
    fn check(&self) -> Result<()> {
        let (gh, gl) = (self.grid_high, self.grid_low);
        if gh.0 != 2 * gl.0 || gh.1 != 2 * gl.1 {
            return Err(Error::dim(
                "dual-scale",
                format!("high grid {:?} must be twice the low grid {:?}", gh, gl),
            ));
        }
        if self.high.dims2()?.0 != 1 + gh.0 * gh.1 || self.low.dims2()?.0 != 1 + gl.0 * gl.1 {
            return Err(Error::dim(
                "dual-scale",
                format!(
                    "sequences {:?}/{:?} do not match grids {:?}/{:?}",
                    self.high.shape(),
                    self.low.shape(),
                    gh,
                    gl
                ),
            ));
        }
        Ok(())
    }
}

/// Embeds the image at both patch sizes; each branch gets its own CLS and positions.
pub fn embed_dual(image: &Tensor, high: &EmbedWeights, low: &EmbedWeights) -> Result<DualScaleState> {
    let (_, h, w) = image.dims3()?;
    let coarse = low.proj.patch;
    if coarse == 0 || h % coarse != 0 || w % coarse != 0 {
        return Err(Error::dim(
            "embed_dual",
            format!("image {}x{} not divisible by the coarse patch size {}", h, w, coarse),
        ));
    }
    let (high_seq, grid_high) = embed_single(image, high)?;
    let (low_seq, grid_low) = embed_single(image, low)?;
    let state = DualScaleState {
        high: high_seq,
        low: low_seq,
        grid_high,
        grid_low,
    };
    state.check()?;
    Ok(state)
}

/// Large-kernel attention: depthwise 5×5, depthwise 7×7 dilated by 3,
/// pointwise, then a gating multiply with the input.
#[derive(Clone, Debug, PartialEq)]
pub struct LkaWeights {
    pub dw5: Tensor,
    pub dw5_bias: Tensor,
    pub dwd7: Tensor,
    pub dwd7_bias: Tensor,
    pub pw: Tensor,
    pub pw_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    /// Pointwise conv applied right after nearest upsampling.
    pub up_conv: Tensor,
    pub up_conv_bias: Tensor,
    pub lka: LkaWeights,
    /// Depthwise 3×3 position generator, added residually.
    pub peg: Tensor,
    pub peg_bias: Tensor,
}

impl FusionWeights {
    pub fn zeros(dim: usize) -> Self {
        FusionWeights {
            up_conv: Tensor::zeros(&[dim, dim]),
            up_conv_bias: Tensor::zeros(&[dim]),
            lka: LkaWeights {
                dw5: Tensor::zeros(&[dim, 5, 5]),
                dw5_bias: Tensor::zeros(&[dim]),
                dwd7: Tensor::zeros(&[dim, 7, 7]),
                dwd7_bias: Tensor::zeros(&[dim]),
                pw: Tensor::zeros(&[dim, dim]),
                pw_bias: Tensor::zeros(&[dim]),
            },
            peg: Tensor::zeros(&[dim, 3, 3]),
            peg_bias: Tensor::zeros(&[dim]),
        }
    }
}

pub fn lka(x: &Tensor, w: &LkaWeights) -> Result<Tensor> {
    let a = conv2d_depthwise(x, &w.dw5, Some(&w.dw5_bias), 1)?;
    let a = conv2d_depthwise(&a, &w.dwd7, Some(&w.dwd7_bias), 3)?;
    let a = conv2d_pointwise(&a, &w.pw, Some(&w.pw_bias))?;
    x.mul(&a)
}

/// `PEG(X_h + LKA(conv(UP(X_l))))` on the spatial tokens; the low CLS is added
/// to the high CLS. Output has the high branch's length.
pub fn fuse_scales(state: &DualScaleState, w: &FusionWeights) -> Result<Tensor> {
    state.check()?;
    let ((hh, hw), (lh, lw)) = (state.grid_high, state.grid_low);
    let (n_high, _) = state.high.dims2()?;
    let (n_low, _) = state.low.dims2()?;

    let low_grid = tokens_to_grid(&state.low.slice_rows(1, n_low)?, lh, lw)?;
    let up = nearest_upsample(&low_grid, hh / lh)?;
    let up = conv2d_pointwise(&up, &w.up_conv, Some(&w.up_conv_bias))?;
    let gated = lka(&up, &w.lka)?;

    let high_grid = tokens_to_grid(&state.high.slice_rows(1, n_high)?, hh, hw)?;
    let summed = high_grid.add(&gated)?;
    let fused = summed.add(&conv2d_depthwise(&summed, &w.peg, Some(&w.peg_bias), 1)?)?;

    let cls = state.high.slice_rows(0, 1)?.add(&state.low.slice_rows(0, 1)?)?;
    cls.concat_rows(&grid_to_tokens(&fused)?)
}

/// `x + [cls'; UP(spatial')]` where `[cls'; spatial'] = MHSA([cls; DOWN(spatial)])`
/// and the sublayer input is layer-normed before pooling.
///
/// The returned record covers the pooled sequence of `1 + h·w/4` tokens.
pub fn downsampled_attention_sublayer(
    x: &Tensor,
    w: &BlockWeights,
    grid: (usize, usize),
) -> Result<(Tensor, AttentionRecord)> {
    let (n, _) = x.dims2()?;
    let (gh, gw) = grid;
    if gh % 2 != 0 || gw % 2 != 0 {
        return Err(Error::dim(
            "downsampled_mhsa_block",
            format!("grid {}x{} must have even sides", gh, gw),
        ));
    }
    if n != 1 + gh * gw {
        return Err(Error::dim(
            "downsampled_mhsa_block",
            format!("{} tokens do not match a {}x{} grid plus CLS", n, gh, gw),
        ));
    }
    let normed = crate::tensor::layernorm(x, &w.norm1_gamma, &w.norm1_beta, LN_EPS)?;
    let pooled = avgpool2d(&tokens_to_grid(&normed.slice_rows(1, n)?, gh, gw)?, 2)?;
    let short = normed.slice_rows(0, 1)?.concat_rows(&grid_to_tokens(&pooled)?)?;
    let (attn, record) = mhsa(&short, &w.attn, false)?;
    let (m, _) = attn.dims2()?;
    let spatial = tokens_to_grid(&attn.slice_rows(1, m)?, gh / 2, gw / 2)?;
    let restored = attn
        .slice_rows(0, 1)?
        .concat_rows(&grid_to_tokens(&nearest_upsample(&spatial, 2)?)?)?;
    Ok((x.add(&restored)?, record))
}

/// Pooled-attention sublayer followed by a full-length FFN sublayer.
pub fn downsampled_mhsa_block(x: &Tensor, w: &BlockWeights, grid: (usize, usize)) -> Result<(Tensor, AttentionRecord)> {
    let (y, record) = downsampled_attention_sublayer(x, w, grid)?;
    Ok((ffn_sublayer(&y, w)?, record))
}
