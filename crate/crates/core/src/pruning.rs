//! Attention-scored token pruning with similarity-based mergence.
//!
//! A prune event runs four steps over the live token sequence:
//!
//! 1. [`importance_scores`]: head-averaged CLS attention row.
//! 2. [`select_topk`]: CLS plus the `k = max(1, ⌊η·(N−1)⌋)` highest-scoring
//!    tokens are crucial, the rest non-crucial.
//! 3. [`similarity_matrix`]: every non-crucial token against every crucial
//!    image token (CLS is never a merge target).
//! 4. [`merge_tokens`]: each non-crucial token joins its most similar crucial
//!    token and each group collapses to its importance-weighted mean.
//!
//! Ties are always broken toward the lower index.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul_bt, Tensor};
use crate::transformer::AttentionRecord;

/// Lower bound applied to merge weights and to vector norms.
pub const FLOOR: f32 = 1e-12;

/// Head-averaged CLS attention; index 0 is CLS itself.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores {
    scores: Tensor,
}

impl ImportanceScores {
    pub fn new(scores: Vec<f32>) -> Self {
        ImportanceScores {
            scores: Tensor::vector(scores),
        }
    }

    pub fn values(&self) -> &[f32] {
        self.scores.data()
    }

    pub fn len(&self) -> usize {
        self.scores.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn importance_scores(rec: &AttentionRecord) -> ImportanceScores {
    let (heads, n) = (rec.heads(), rec.tokens());
    let scores = (0..n)
        .map(|j| {
            let sum: f64 = (0..heads).map(|h| rec.cls_row.row(h)[j] as f64).sum();
            (sum / heads as f64) as f32
        })
        .collect();
    ImportanceScores::new(scores)
}

fn check_keep_rate(keep_rate: f64) -> Result<()> {
    if keep_rate > 0.0 && keep_rate <= 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("keep rate must lie in (0, 1], got {keep_rate}")))
    }
}

/// Non-CLS tokens kept out of `n_tokens` (CLS included in `n_tokens`).
///
/// The product gets a 1e-9 nudge before flooring so that rates like 0.29·100
/// are not undercounted by binary rounding.
pub fn kept_count(n_tokens: usize, keep_rate: f64) -> usize {
    let image_tokens = n_tokens.saturating_sub(1);
    (((keep_rate * image_tokens as f64) + 1e-9).floor() as usize).clamp(1, image_tokens.max(1))
}

/// Splits token indices into `(crucial, non_crucial)`.
///
/// `crucial` starts with CLS (0) and then lists the kept tokens in ascending
/// index order; `non_crucial` is ascending too.
pub fn select_topk(scores: &ImportanceScores, keep_rate: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    check_keep_rate(keep_rate)?;
    let n = scores.len();
    if n < 2 {
        return Err(Error::Parameter(format!("token selection needs at least 2 tokens, got {n}")));
    }
    let k = kept_count(n, keep_rate);
    let s = scores.values();
    let mut order: Vec<usize> = (1..n).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    let mut dropped = order[k..].to_vec();
    kept.sort_unstable();
    dropped.sort_unstable();
    let mut crucial = Vec::with_capacity(k + 1);
    crucial.push(0);
    crucial.extend(kept);
    Ok((crucial, dropped))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Cosine,
    L1,
    L2,
    AttentionCross,
    Random,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Cosine => "cosine",
            MetricKind::L1 => "l1",
            MetricKind::L2 => "l2",
            MetricKind::AttentionCross => "attn",
            MetricKind::Random => "random",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(MetricKind::Cosine),
            "l1" => Ok(MetricKind::L1),
            "l2" => Ok(MetricKind::L2),
            "attn" => Ok(MetricKind::AttentionCross),
            "random" => Ok(MetricKind::Random),
            other => Err(Error::Parameter(format!(
                "unknown similarity metric `{other}` (expected cosine, l1, l2, attn or random)"
            ))),
        }
    }
}

/// How non-crucial tokens pick their merge target. `seed` only matters for
/// [`MetricKind::Random`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimilarityMetric {
    pub kind: MetricKind,
    pub seed: u64,
}

impl SimilarityMetric {
    pub const COSINE: SimilarityMetric = SimilarityMetric {
        kind: MetricKind::Cosine,
        seed: 0,
    };

    pub fn new(kind: MetricKind, seed: u64) -> Self {
        SimilarityMetric { kind, seed }
    }

    pub fn needs_attention_map(&self) -> bool {
        self.kind == MetricKind::AttentionCross
    }
}

impl Default for SimilarityMetric {
    fn default() -> Self {
        Self::COSINE
    }
}

fn check_partition(n: usize, crucial: &[usize], non_crucial: &[usize]) -> Result<()> {
    if crucial.first() != Some(&0) {
        return Err(Error::Parameter("crucial list must start with the CLS index 0".into()));
    }
    let mut seen = vec![false; n];
    for &i in crucial.iter().chain(non_crucial) {
        if i >= n {
            return Err(Error::Parameter(format!("token index {i} out of range for {n} tokens")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Parameter(format!("token index {i} listed twice")));
        }
    }
    if non_crucial.contains(&0) {
        return Err(Error::Parameter("CLS cannot be non-crucial".into()));
    }
    Ok(())
}

fn unit_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let (rows, _) = t.dims2().expect("2-D");
    for r in 0..rows {
        let row = out.row_mut(r);
        let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(FLOOR as f64);
        for v in row {
            *v = (*v as f64 / norm) as f32;
        }
    }
    out
}

/// Similarity of each non-crucial token (rows) to each crucial token other
/// than CLS (columns, in `crucial[1..]` order). Larger means more similar for
/// every metric: distances are negated.
pub fn similarity_matrix(
    tokens: &Tensor,
    crucial: &[usize],
    non_crucial: &[usize],
    metric: SimilarityMetric,
    attn: Option<&Tensor>,
) -> Result<Tensor> {
    let (n, _) = tokens.dims2()?;
    check_partition(n, crucial, non_crucial)?;
    let targets = &crucial[1..];
    let (rows, cols) = (non_crucial.len(), targets.len());
    match metric.kind {
        MetricKind::Cosine => {
            let u = unit_rows(&tokens.select_rows(non_crucial)?);
            let v = unit_rows(&tokens.select_rows(targets)?);
            matmul_bt(&u, &v)
        }
        MetricKind::L1 | MetricKind::L2 => {
            let l1 = metric.kind == MetricKind::L1;
            Ok(Tensor::from_fn(&[rows, cols], |idx| {
                let a = tokens.row(non_crucial[idx / cols]);
                let b = tokens.row(targets[idx % cols]);
                let d = if l1 {
                    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>()
                } else {
                    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
                };
                -d as f32
            }))
        }
        MetricKind::AttentionCross => {
            let map = attn.ok_or_else(|| {
                Error::Config("the attn similarity metric needs a recorded attention map".into())
            })?;
            let shape = map.shape();
            if shape.len() != 3 || shape[1] != n || shape[2] != n {
                return Err(Error::dim(
                    "similarity_matrix",
                    format!("attention map {:?} does not match {} tokens", shape, n),
                ));
            }
            let heads = shape[0];
            Ok(Tensor::from_fn(&[rows, cols], |idx| {
                let (q, k) = (non_crucial[idx / cols], targets[idx % cols]);
                let sum: f64 = (0..heads).map(|h| map.data()[h * n * n + q * n + k] as f64).sum();
                (sum / heads as f64) as f32
            }))
        }
        MetricKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(metric.seed);
            Ok(Tensor::from_fn(&[rows, cols], |_| rng.random::<f32>()))
        }
    }
}

/// Result of one prune event. Positions in `merged_tokens` and
/// `group_provenance` follow `crucial_indices`.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub crucial_indices: Vec<usize>,
    /// Non-crucial token index → the crucial token index it merged into.
    pub merge_assignment: BTreeMap<usize, usize>,
    pub merged_tokens: Tensor,
    /// Original patch ids represented by each kept token (empty for CLS).
    pub group_provenance: Vec<Vec<usize>>,
}

impl PruneOutcome {
    pub fn kept(&self) -> usize {
        self.crucial_indices.len()
    }
}

/// Argmax assignment plus importance-weighted merge.
///
/// `provenance[i]` lists the original patch ids carried by token `i`.
pub fn merge_tokens(
    tokens: &Tensor,
    scores: &ImportanceScores,
    crucial: &[usize],
    non_crucial: &[usize],
    sim: &Tensor,
    provenance: &[Vec<usize>],
) -> Result<PruneOutcome> {
    let (n, d) = tokens.dims2()?;
    check_partition(n, crucial, non_crucial)?;
    if scores.len() != n || provenance.len() != n {
        return Err(Error::dim(
            "merge_tokens",
            format!(
                "{} tokens but {} scores and {} provenance sets",
                n,
                scores.len(),
                provenance.len()
            ),
        ));
    }
    let targets = &crucial[1..];
    if sim.shape() != [non_crucial.len(), targets.len()] {
        return Err(Error::dim(
            "merge_tokens",
            format!(
                "similarity {:?} does not match {} non-crucial x {} crucial tokens",
                sim.shape(),
                non_crucial.len(),
                targets.len()
            ),
        ));
    }

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); targets.len()];
    let mut assignment = BTreeMap::new();
    for (r, &u) in non_crucial.iter().enumerate() {
        let row = sim.row(r);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = c;
            }
        }
        groups[best].push(u);
        assignment.insert(u, targets[best]);
    }

    let weight = |i: usize| scores.values()[i].max(FLOOR) as f64;
    let mut merged = Tensor::zeros(&[crucial.len(), d]);
    merged.row_mut(0).copy_from_slice(tokens.row(0));
    let mut group_provenance = Vec::with_capacity(crucial.len());
    group_provenance.push(provenance[0].clone());
    for (p, (&j, members)) in targets.iter().zip(&groups).enumerate() {
        let out = merged.row_mut(p + 1);
        let mut ids = provenance[j].clone();
        if members.is_empty() {
            out.copy_from_slice(tokens.row(j));
        } else {
            let mut acc: Vec<f64> = tokens.row(j).iter().map(|&v| weight(j) * v as f64).collect();
            let mut total = weight(j);
            for &k in members {
                let wk = weight(k);
                total += wk;
                for (a, &v) in acc.iter_mut().zip(tokens.row(k)) {
                    *a += wk * v as f64;
                }
                ids.extend_from_slice(&provenance[k]);
            }
            for (o, a) in out.iter_mut().zip(acc) {
                *o = (a / total) as f32;
            }
            ids.sort_unstable();
        }
        group_provenance.push(ids);
    }

    Ok(PruneOutcome {
        crucial_indices: crucial.to_vec(),
        merge_assignment: assignment,
        merged_tokens: merged,
        group_provenance,
    })
}

/// Scores, selects, compares and merges in one call.
pub fn prune(
    tokens: &Tensor,
    record: &AttentionRecord,
    keep_rate: f64,
    metric: SimilarityMetric,
    provenance: &[Vec<usize>],
) -> Result<PruneOutcome> {
    let scores = importance_scores(record);
    let (crucial, non_crucial) = select_topk(&scores, keep_rate)?;
    let sim = similarity_matrix(tokens, &crucial, &non_crucial, metric, record.full_map.as_ref())?;
    merge_tokens(tokens, &scores, &crucial, &non_crucial, &sim, provenance)
}

/// Cosine warm-up of the keep rate from 1 down to `target` over `total_warmup` epochs.
pub fn keep_rate_schedule(target: f64, epoch: usize, total_warmup: usize) -> Result<f64> {
    check_keep_rate(target)?;
    if total_warmup == 0 {
        return Err(Error::Parameter("warm-up length must be >= 1".into()));
    }
    let progress = epoch.min(total_warmup) as f64 / total_warmup as f64;
    Ok(target + (1.0 - target) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0)
}
