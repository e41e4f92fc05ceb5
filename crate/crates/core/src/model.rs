//! Model configuration, parameter sets, and the full forward pass.
//!
//! With `multiscale` on, the image is embedded at two patch sizes. For the
//! first `n_downsampled_blocks` layers the high-scale branch runs
//! pooled-attention blocks while the low-scale branch runs ordinary blocks;
//! the branches are then fused and the remaining layers run on the fused
//! sequence. A prune event sits between a block's attention and its FFN.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::flops::{self, Branch, BlockCost};
use crate::multiscale::{
    downsampled_mhsa_block, embed_dual, embed_single, fuse_scales, DualScaleState, EmbedWeights, FusionWeights,
};
use crate::pruning::{self, PruneOutcome, SimilarityMetric};
use crate::tensor::{layernorm, linear, Tensor};
use crate::transformer::{attention_sublayer, encoder_block, ffn_sublayer, BlockWeights, LN_EPS};

pub const PRESET_NAMES: [&str; 4] = ["deit-t", "deit-s", "deit-b", "lvvit-s"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based layer indices hosting a prune event.
    pub prune_layers: Vec<usize>,
    pub keep_rate: f64,
    pub n_downsampled_blocks: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_high: usize,
    pub patch_low: usize,
    pub metric: SimilarityMetric,
    pub multiscale: bool,
}

impl ModelConfig {
    fn base(name: &str, depth: usize, dim: usize, heads: usize, mlp_ratio: usize, prune_layers: Vec<usize>) -> Self {
        let n_downsampled_blocks = prune_layers[0] - 1;
        ModelConfig {
            name: name.to_string(),
            depth,
            dim,
            heads,
            mlp_ratio,
            prune_layers,
            keep_rate: 0.7,
            n_downsampled_blocks,
            num_classes: 1000,
            image_size: 224,
            in_channels: 3,
            patch_high: 16,
            patch_low: 32,
            metric: SimilarityMetric::COSINE,
            multiscale: true,
        }
    }

    /// One of [`PRESET_NAMES`], with keep rate 0.7 and multiscale on.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "deit-t" => Ok(Self::base(name, 12, 192, 3, 4, vec![4, 7, 10])),
            "deit-s" => Ok(Self::base(name, 12, 384, 6, 4, vec![4, 7, 10])),
            "deit-b" => Ok(Self::base(name, 12, 768, 12, 4, vec![4, 7, 10])),
            // Structural only: plain patch embedding instead of the conv stem.
            "lvvit-s" => Ok(Self::base(name, 16, 384, 6, 3, vec![5, 9, 13])),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    pub fn with_keep_rate(mut self, keep_rate: f64) -> Self {
        self.keep_rate = keep_rate;
        self
    }

    pub fn with_multiscale(mut self, on: bool) -> Self {
        self.multiscale = on;
        self
    }

    pub fn with_metric(mut self, metric: SimilarityMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.dim
    }

    pub fn grid_high(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_high;
        (g, g)
    }

    pub fn grid_low(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_low;
        (g, g)
    }

    pub fn patches_high(&self) -> usize {
        let (h, w) = self.grid_high();
        h * w
    }

    pub fn patches_low(&self) -> usize {
        let (h, w) = self.grid_low();
        h * w
    }

    /// Layers that run on the fused (or single-branch) sequence.
    pub fn main_layers(&self) -> std::ops::RangeInclusive<usize> {
        let first = if self.multiscale { self.n_downsampled_blocks + 1 } else { 1 };
        first..=self.depth
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("{}: {}", self.name, msg)));
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return fail("depth, dim, heads and mlp_ratio must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return fail(format!("{} heads do not divide dim {}", self.heads, self.dim));
        }
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return fail(format!("keep rate {} outside (0, 1]", self.keep_rate));
        }
        if self.prune_layers.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("prune layers {:?} not strictly increasing", self.prune_layers));
        }
        if self.prune_layers.iter().any(|&l| l == 0 || l > self.depth) {
            return fail(format!("prune layers {:?} must lie in 1..={}", self.prune_layers, self.depth));
        }
        if self.patch_high == 0 || !self.image_size.is_multiple_of(self.patch_high) {
            return fail(format!("image size {} not divisible by patch {}", self.image_size, self.patch_high));
        }
        if self.multiscale {
            if self.patch_low != 2 * self.patch_high {
                return fail(format!(
                    "coarse patch {} must be twice the fine patch {}",
                    self.patch_low, self.patch_high
                ));
            }
            if !self.image_size.is_multiple_of(self.patch_low) {
                return fail(format!("image size {} not divisible by patch {}", self.image_size, self.patch_low));
            }
            if self.n_downsampled_blocks >= self.depth {
                return fail(format!(
                    "{} pre-fusion blocks leave no room in depth {}",
                    self.n_downsampled_blocks, self.depth
                ));
            }
            if self.prune_layers.iter().any(|&l| l <= self.n_downsampled_blocks) {
                return fail(format!(
                    "prune layers {:?} must come after the {} pre-fusion blocks",
                    self.prune_layers, self.n_downsampled_blocks
                ));
            }
        }
        Ok(())
    }
}

/// Every learnable tensor of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub embed: EmbedWeights,
    pub embed_low: Option<EmbedWeights>,
    pub low_blocks: Vec<BlockWeights>,
    pub fusion: Option<FusionWeights>,
    pub blocks: Vec<BlockWeights>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

macro_rules! named_tensors {
    ($ty:ty, $by_ref:ident, $by_mut:ident, { $($name:literal => $($field:ident).+),* $(,)? }) => {
        fn $by_ref(x: &$ty) -> Vec<(&'static str, &Tensor)> {
            vec![$(($name, &x.$($field).+)),*]
        }
        fn $by_mut(x: &mut $ty) -> Vec<(&'static str, &mut Tensor)> {
            vec![$(($name, &mut x.$($field).+)),*]
        }
    };
}

named_tensors!(BlockWeights, block_tensors, block_tensors_mut, {
    "norm1.gamma" => norm1_gamma,
    "norm1.beta" => norm1_beta,
    "attn.q_weight" => attn.w_q,
    "attn.q_bias" => attn.b_q,
    "attn.k_weight" => attn.w_k,
    "attn.k_bias" => attn.b_k,
    "attn.v_weight" => attn.w_v,
    "attn.v_bias" => attn.b_v,
    "attn.out_weight" => attn.w_o,
    "attn.out_bias" => attn.b_o,
    "norm2.gamma" => norm2_gamma,
    "norm2.beta" => norm2_beta,
    "ffn.fc1_weight" => ffn_w1,
    "ffn.fc1_bias" => ffn_b1,
    "ffn.fc2_weight" => ffn_w2,
    "ffn.fc2_bias" => ffn_b2,
});

named_tensors!(EmbedWeights, embed_tensors, embed_tensors_mut, {
    "patch_weight" => proj.weight,
    "patch_bias" => proj.bias,
    "cls" => cls,
    "pos" => pos,
});

named_tensors!(FusionWeights, fusion_tensors, fusion_tensors_mut, {
    "up_conv.weight" => up_conv,
    "up_conv.bias" => up_conv_bias,
    "lka.dw5.weight" => lka.dw5,
    "lka.dw5.bias" => lka.dw5_bias,
    "lka.dwd7.weight" => lka.dwd7,
    "lka.dwd7.bias" => lka.dwd7_bias,
    "lka.pw.weight" => lka.pw,
    "lka.pw.bias" => lka.pw_bias,
    "peg.weight" => peg,
    "peg.bias" => peg_bias,
});

fn prefixed<T>(prefix: &str, items: Vec<(&'static str, T)>, out: &mut Vec<(String, T)>) {
    out.extend(items.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
}

impl ModelWeights {
    /// Correctly shaped parameters: zeros everywhere except unit layernorm gains.
    pub fn template(cfg: &ModelConfig) -> Self {
        let (d, h, hidden) = (cfg.dim, cfg.heads, cfg.hidden_dim());
        let block = || BlockWeights::zeros(d, h, hidden);
        let n_low = if cfg.multiscale { cfg.n_downsampled_blocks } else { 0 };
        ModelWeights {
            embed: EmbedWeights::zeros(cfg.in_channels, cfg.patch_high, cfg.patches_high(), d),
            embed_low: cfg
                .multiscale
                .then(|| EmbedWeights::zeros(cfg.in_channels, cfg.patch_low, cfg.patches_low(), d)),
            low_blocks: (0..n_low).map(|_| block()).collect(),
            fusion: cfg.multiscale.then(|| FusionWeights::zeros(d)),
            blocks: (0..cfg.depth).map(|_| block()).collect(),
            norm_gamma: Tensor::full(&[d], 1.0),
            norm_beta: Tensor::zeros(&[d]),
            head_weight: Tensor::zeros(&[d, cfg.num_classes]),
            head_bias: Tensor::zeros(&[cfg.num_classes]),
        }
    }

    /// All tensors with their stable names, in storage order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        prefixed("embed", embed_tensors(&self.embed), &mut out);
        if let Some(e) = &self.embed_low {
            prefixed("embed_low", embed_tensors(e), &mut out);
        }
        for (i, b) in self.low_blocks.iter().enumerate() {
            prefixed(&format!("low_blocks.{i}"), block_tensors(b), &mut out);
        }
        if let Some(f) = &self.fusion {
            prefixed("fusion", fusion_tensors(f), &mut out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            prefixed(&format!("blocks.{i}"), block_tensors(b), &mut out);
        }
        out.push(("norm.gamma".into(), &self.norm_gamma));
        out.push(("norm.beta".into(), &self.norm_beta));
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        prefixed("embed", embed_tensors_mut(&mut self.embed), &mut out);
        if let Some(e) = &mut self.embed_low {
            prefixed("embed_low", embed_tensors_mut(e), &mut out);
        }
        for (i, b) in self.low_blocks.iter_mut().enumerate() {
            prefixed(&format!("low_blocks.{i}"), block_tensors_mut(b), &mut out);
        }
        if let Some(f) = &mut self.fusion {
            prefixed("fusion", fusion_tensors_mut(f), &mut out);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            prefixed(&format!("blocks.{i}"), block_tensors_mut(b), &mut out);
        }
        out.push(("norm.gamma".into(), &mut self.norm_gamma));
        out.push(("norm.beta".into(), &mut self.norm_beta));
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Builds a parameter set from named tensors, requiring exactly the names
    /// and shapes `cfg` implies.
    pub fn from_named(cfg: &ModelConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let mut weights = Self::template(cfg);
        for (name, slot) in weights.tensors_mut() {
            let t = named.remove(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != slot.shape() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: slot.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *slot = t;
        }
        if let Some(extra) = named.into_keys().next() {
            return Err(Error::UnexpectedTensor(extra));
        }
        Ok(weights)
    }

    /// Checks names and shapes against `cfg`, naming the first offending tensor.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let template = Self::template(cfg);
        let want = template.tensors();
        let have = self.tensors();
        for (i, (name, t)) in want.iter().enumerate() {
            match have.get(i) {
                Some((n, h)) if n == name => {
                    if h.shape() != t.shape() {
                        return Err(Error::Config(format!(
                            "tensor `{name}` has shape {:?}, config `{}` expects {:?}",
                            h.shape(),
                            cfg.name,
                            t.shape()
                        )));
                    }
                }
                _ => {
                    return Err(Error::Config(format!(
                        "tensor `{name}` required by config `{}` is missing",
                        cfg.name
                    )))
                }
            }
        }
        if let Some((extra, _)) = have.get(want.len()) {
            return Err(Error::Config(format!(
                "tensor `{extra}` is not used by config `{}`",
                cfg.name
            )));
        }
        Ok(())
    }
}

/// Seeded initialization: truncated normal (σ = 0.02, cut at 2σ) for
/// projections, kernels, CLS and position tables; zeros for biases and
/// layernorm shifts; ones for layernorm gains.
pub fn random_init(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut weights = ModelWeights::template(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.02).expect("valid std");
    for (name, t) in weights.tensors_mut() {
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
            continue;
        }
        for v in t.data_mut() {
            *v = loop {
                let x = normal.sample(&mut rng);
                if x.abs() <= 0.04 {
                    break x;
                }
            };
        }
    }
    Ok(weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneEvent {
    pub layer: usize,
    pub tokens_before: usize,
    pub outcome: PruneOutcome,
}

/// Everything a forward pass leaves behind besides the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub prune_events: Vec<PruneEvent>,
    /// Sequence length (CLS included) leaving each layer of the high/main branch.
    pub token_counts: Vec<usize>,
    pub logits: Tensor,
    /// Original patch ids carried by each final token; CLS carries none.
    pub provenance: Vec<Vec<usize>>,
    /// Instrumented MACs per executed block.
    pub block_costs: Vec<BlockCost>,
    pub embed_macs: u64,
    pub fusion_macs: u64,
    pub prune_macs: u64,
    pub head_macs: u64,
}

impl ForwardTrace {
    pub fn block_macs(&self) -> u64 {
        self.block_costs.iter().map(|c| c.macs).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.block_macs() + self.embed_macs + self.fusion_macs + self.prune_macs + self.head_macs
    }

    /// Indices of the `k` largest logits, highest first (ties → lower index).
    pub fn top_k(&self, k: usize) -> Vec<(usize, f32)> {
        let l = self.logits.data();
        let mut idx: Vec<usize> = (0..l.len()).collect();
        idx.sort_by(|&a, &b| l[b].total_cmp(&l[a]).then(a.cmp(&b)));
        idx.into_iter().take(k).map(|i| (i, l[i])).collect()
    }
}

/// `[[], [0], [1], …]`: CLS followed by one token per original patch.
pub fn initial_provenance(patches: usize) -> Vec<Vec<usize>> {
    std::iter::once(Vec::new()).chain((0..patches).map(|p| vec![p])).collect()
}

struct Meter(u64);

impl Meter {
    fn start() -> Self {
        Meter(flops::macs_so_far())
    }

    fn lap(&mut self) -> u64 {
        let now = flops::macs_so_far();
        let d = now - self.0;
        self.0 = now;
        d
    }
}

fn rows(t: &Tensor) -> usize {
    t.shape()[0]
}

pub fn forward(image: &Tensor, weights: &ModelWeights, cfg: &ModelConfig) -> Result<ForwardTrace> {
    cfg.validate()?;
    weights.check(cfg)?;
    let want = [cfg.in_channels, cfg.image_size, cfg.image_size];
    if image.shape() != want {
        return Err(Error::Config(format!(
            "image shape {:?} does not match config `{}` ({:?})",
            image.shape(),
            cfg.name,
            want
        )));
    }

    let mut meter = Meter::start();
    let mut block_costs = Vec::with_capacity(cfg.depth + cfg.n_downsampled_blocks);
    let mut token_counts = Vec::with_capacity(cfg.depth);
    let mut fusion_macs = 0;

    let (mut x, embed_macs) = if cfg.multiscale {
        let embed_low = weights.embed_low.as_ref().expect("checked");
        let state = embed_dual(image, &weights.embed, embed_low)?;
        let embed_macs = meter.lap();
        let DualScaleState {
            mut high,
            mut low,
            grid_high,
            grid_low,
        } = state;
        for layer in 1..=cfg.n_downsampled_blocks {
            let (h, rec) = downsampled_mhsa_block(&high, &weights.blocks[layer - 1], grid_high)?;
            block_costs.push(BlockCost {
                layer,
                branch: Branch::High,
                attn_tokens: rec.tokens(),
                ffn_tokens: rows(&h),
                macs: meter.lap(),
            });
            let (l, _) = encoder_block(&low, &weights.low_blocks[layer - 1])?;
            block_costs.push(BlockCost {
                layer,
                branch: Branch::Low,
                attn_tokens: rows(&low),
                ffn_tokens: rows(&l),
                macs: meter.lap(),
            });
            token_counts.push(rows(&h));
            high = h;
            low = l;
        }
        let state = DualScaleState {
            high,
            low,
            grid_high,
            grid_low,
        };
        let fused = fuse_scales(&state, weights.fusion.as_ref().expect("checked"))?;
        fusion_macs = meter.lap();
        (fused, embed_macs)
    } else {
        let (seq, _) = embed_single(image, &weights.embed)?;
        (seq, meter.lap())
    };

    let mut provenance = initial_provenance(cfg.patches_high());
    let mut prune_events = Vec::with_capacity(cfg.prune_layers.len());
    let mut prune_macs = 0;
    for layer in cfg.main_layers() {
        let w = &weights.blocks[layer - 1];
        let n_in = rows(&x);
        let (out, macs) = if cfg.prune_layers.contains(&layer) {
            let (y, rec) = attention_sublayer(&x, w, cfg.metric.needs_attention_map())?;
            let attn_macs = meter.lap();
            let outcome = pruning::prune(&y, &rec, cfg.keep_rate, cfg.metric, &provenance)?;
            prune_macs += meter.lap();
            let out = ffn_sublayer(&outcome.merged_tokens, w)?;
            provenance = outcome.group_provenance.clone();
            prune_events.push(PruneEvent {
                layer,
                tokens_before: n_in,
                outcome,
            });
            (out, attn_macs + meter.lap())
        } else {
            let (out, _) = encoder_block(&x, w)?;
            (out, meter.lap())
        };
        block_costs.push(BlockCost {
            layer,
            branch: if cfg.multiscale { Branch::High } else { Branch::Main },
            attn_tokens: n_in,
            ffn_tokens: rows(&out),
            macs,
        });
        token_counts.push(rows(&out));
        x = out;
    }

    let cls = x.slice_rows(0, 1)?;
    let normed = layernorm(&cls, &weights.norm_gamma, &weights.norm_beta, LN_EPS)?;
    let logits = linear(&normed, &weights.head_weight, Some(&weights.head_bias))?;
    let head_macs = meter.lap();
    let logits = logits.reshape(&[cfg.num_classes])?;

    Ok(ForwardTrace {
        prune_events,
        token_counts,
        logits,
        provenance,
        block_costs,
        embed_macs,
        fusion_macs,
        prune_macs,
        head_macs,
    })
}
