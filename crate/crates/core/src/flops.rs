//! Multiply-accumulate accounting.
//!
//! Two independent routes: a closed-form model built from token-count
//! trajectories, and a per-thread counter that every matmul and convolution
//! in [`crate::tensor`] increments. Figures are in MACs; FLOPs are 2·MACs.
//! Published ViT "GFLOPs" columns follow the MAC convention.

use std::cell::Cell;
use std::fmt::{self, Write as _};

use crate::error::Result;
use crate::model::ModelConfig;
use crate::pruning::{kept_count, MetricKind};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

/// MACs recorded on this thread since the last reset.
pub fn macs_so_far() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset_counter() {
    MACS.with(|c| c.set(0));
}

/// Resets the counter, runs `f`, and returns its result with the MACs it executed.
pub fn instrumented_count<T>(f: impl FnOnce() -> T) -> (T, u64) {
    reset_counter();
    let out = f();
    (out, macs_so_far())
}

/// `12·N·D² + 2·N²·D`: one ViT block with a 4× MLP, in MACs.
pub fn analytic_block_flops(n: u64, d: u64) -> u64 {
    12 * n * d * d + 2 * n * n * d
}

/// Q/K/V/output projections plus the two attention products.
pub fn attention_macs(n: u64, d: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d
}

pub fn ffn_macs(n: u64, d: u64, mlp_ratio: u64) -> u64 {
    2 * mlp_ratio * n * d * d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    /// Single-branch model.
    Main,
    /// High-scale branch, and the fused sequence after fusion.
    High,
    Low,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Main => "main",
            Branch::High => "high",
            Branch::Low => "low",
        })
    }
}

/// Cost of one executed block. `attn_tokens` is the sequence length seen by
/// attention (pooled for downsampled blocks), `ffn_tokens` the length seen by
/// the FFN (post-merge at prune layers).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockCost {
    pub layer: usize,
    pub branch: Branch,
    pub attn_tokens: usize,
    pub ffn_tokens: usize,
    pub macs: u64,
}

/// Analytic cost of one model configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub preset: String,
    pub keep_rate: f64,
    pub multiscale: bool,
    pub per_block: Vec<BlockCost>,
    /// Closed-form sum over `per_block`.
    pub block_macs: u64,
    pub embed_macs: u64,
    pub fusion_macs: u64,
    pub prune_macs: u64,
    pub head_macs: u64,
    pub total_macs: u64,
    pub total_flops: u64,
    /// Block-only MACs of the same preset with keep rate 1 and no multiscale.
    pub baseline_block_macs: u64,
    /// Block-only reduction against the baseline, in percent.
    pub reduction_pct: f64,
}

/// Per-layer `(layer, attn_tokens, ffn_tokens)` on the main/high branch.
pub fn token_trajectory(cfg: &ModelConfig) -> Vec<(usize, usize, usize)> {
    let mut n = 1 + cfg.patches_high();
    let mut out = Vec::with_capacity(cfg.depth);
    if cfg.multiscale {
        let pooled = 1 + cfg.patches_high() / 4;
        for layer in 1..=cfg.n_downsampled_blocks {
            out.push((layer, pooled, n));
        }
    }
    for layer in cfg.main_layers() {
        let n_in = n;
        if cfg.prune_layers.contains(&layer) {
            n = 1 + kept_count(n, cfg.keep_rate);
        }
        out.push((layer, n_in, n));
    }
    out
}

fn block_only_macs(cfg: &ModelConfig) -> Vec<BlockCost> {
    let d = cfg.dim as u64;
    let r = cfg.mlp_ratio as u64;
    let cost = |layer, branch, a: usize, f: usize| BlockCost {
        layer,
        branch,
        attn_tokens: a,
        ffn_tokens: f,
        macs: attention_macs(a as u64, d) + ffn_macs(f as u64, d, r),
    };
    let mut out = Vec::new();
    let low_len = 1 + cfg.patches_low();
    for (layer, a, f) in token_trajectory(cfg) {
        if cfg.multiscale {
            out.push(cost(layer, Branch::High, a, f));
            if layer <= cfg.n_downsampled_blocks {
                out.push(cost(layer, Branch::Low, low_len, low_len));
            }
        } else {
            out.push(cost(layer, Branch::Main, a, f));
        }
    }
    out
}

pub fn model_flops(cfg: &ModelConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let d = cfg.dim as u64;
    let per_block = block_only_macs(cfg);
    let block_macs: u64 = per_block.iter().map(|b| b.macs).sum();

    let patch_in = |p: usize| (cfg.in_channels * p * p) as u64;
    let mut embed_macs = cfg.patches_high() as u64 * patch_in(cfg.patch_high) * d;
    let mut fusion_macs = 0;
    if cfg.multiscale {
        embed_macs += cfg.patches_low() as u64 * patch_in(cfg.patch_low) * d;
        let nh = cfg.patches_high() as u64;
        // up_conv + LKA pointwise, then the three depthwise kernels
        fusion_macs = 2 * nh * d * d + nh * d * (25 + 49 + 9);
    }

    let mut prune_macs = 0;
    if cfg.metric.kind == MetricKind::Cosine {
        for &(layer, n_in, n_out) in &token_trajectory(cfg) {
            if cfg.prune_layers.contains(&layer) {
                let kept = (n_out - 1) as u64;
                let dropped = (n_in - n_out) as u64;
                prune_macs += dropped * kept * d;
            }
        }
    }
    let head_macs = d * cfg.num_classes as u64;
    let total_macs = block_macs + embed_macs + fusion_macs + prune_macs + head_macs;

    let baseline = cfg.clone().with_keep_rate(1.0).with_multiscale(false);
    let baseline_block_macs: u64 = block_only_macs(&baseline).iter().map(|b| b.macs).sum();
    let reduction_pct = 100.0 * (1.0 - block_macs as f64 / baseline_block_macs as f64);

    Ok(FlopsReport {
        preset: cfg.name.clone(),
        keep_rate: cfg.keep_rate,
        multiscale: cfg.multiscale,
        per_block,
        block_macs,
        embed_macs,
        fusion_macs,
        prune_macs,
        head_macs,
        total_macs,
        total_flops: 2 * total_macs,
        baseline_block_macs,
        reduction_pct,
    })
}

impl FlopsReport {
    /// Total in billions of MACs, the unit of published "GFLOPs" tables.
    pub fn total_gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "preset {}  keep-rate {}  multiscale {}",
            self.preset, self.keep_rate, self.multiscale
        );
        let _ = writeln!(s, "{:>5}  {:<6} {:>11} {:>10} {:>14}", "layer", "branch", "attn_tokens", "ffn_tokens", "macs");
        for b in &self.per_block {
            let _ = writeln!(
                s,
                "{:>5}  {:<6} {:>11} {:>10} {:>14}",
                b.layer, b.branch, b.attn_tokens, b.ffn_tokens, b.macs
            );
        }
        let _ = writeln!(s, "block MACs      {:>14}", self.block_macs);
        let _ = writeln!(s, "embedding MACs  {:>14}", self.embed_macs);
        let _ = writeln!(s, "fusion MACs     {:>14}", self.fusion_macs);
        let _ = writeln!(s, "merge MACs      {:>14}", self.prune_macs);
        let _ = writeln!(s, "head MACs       {:>14}", self.head_macs);
        let _ = writeln!(s, "total MACs      {:>14}", self.total_macs);
        let _ = writeln!(s, "total FLOPs     {:>14}  (2 x MACs)", self.total_flops);
        let _ = writeln!(s, "GFLOPs          {:>14.3}  (MAC convention, as in ViT tables)", self.total_gmacs());
        let _ = writeln!(s, "block reduction {:>13.2}%  vs keep-rate 1, single scale", self.reduction_pct);
        s
    }

    /// One `key=value` per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset={}", self.preset);
        let _ = writeln!(s, "eta={}", self.keep_rate);
        let _ = writeln!(s, "multiscale={}", self.multiscale);
        let _ = writeln!(s, "total_macs={}", self.total_macs);
        let _ = writeln!(s, "total_flops={}", self.total_flops);
        let _ = writeln!(s, "gflops_mac_convention={:.4}", self.total_gmacs());
        let _ = writeln!(s, "block_macs={}", self.block_macs);
        let _ = writeln!(s, "embed_macs={}", self.embed_macs);
        let _ = writeln!(s, "fusion_macs={}", self.fusion_macs);
        let _ = writeln!(s, "prune_macs={}", self.prune_macs);
        let _ = writeln!(s, "head_macs={}", self.head_macs);
        let _ = writeln!(s, "baseline_block_macs={}", self.baseline_block_macs);
        let _ = writeln!(s, "reduction_pct={:.4}", self.reduction_pct);
        for b in &self.per_block {
            let _ = writeln!(
                s,
                "per_block.{}.{}={},{},{}",
                b.layer, b.branch, b.attn_tokens, b.ffn_tokens, b.macs
            );
        }
        s
    }
}
