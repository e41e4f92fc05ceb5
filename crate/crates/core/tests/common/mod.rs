#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitmerge::pruning::SimilarityMetric;
use vitmerge::transformer::BlockWeights;
use vitmerge::{ModelConfig, ModelWeights, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], amp: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-amp..amp))
}

pub fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor {
    random_tensor(&mut rng(seed), &[cfg.in_channels, cfg.image_size, cfg.image_size], 1.0)
}

/// Depth-4 single-scale model on a 4×4 patch grid.
pub fn tiny(keep_rate: f64, multiscale: bool) -> ModelConfig {
    ModelConfig {
        name: "tiny".into(),
        depth: 4,
        dim: 16,
        heads: 2,
        mlp_ratio: 4,
        prune_layers: vec![2, 3, 4],
        keep_rate,
        n_downsampled_blocks: 1,
        num_classes: 7,
        image_size: 32,
        in_channels: 3,
        patch_high: 8,
        patch_low: 16,
        metric: SimilarityMetric::COSINE,
        multiscale,
    }
}

/// Weights large enough that activations stay O(1): projections scaled by
/// fan-in, gains near one, nonzero shifts and biases.
pub fn lively_weights(cfg: &ModelConfig, seed: u64) -> ModelWeights {
    let mut w = ModelWeights::template(cfg);
    let mut r = rng(seed);
    for (name, t) in w.tensors_mut() {
        let shape = t.shape().to_vec();
        let (base, amp) = if name.ends_with("gamma") {
            (1.0, 0.2)
        } else if name.ends_with("beta") || name.ends_with("bias") {
            (0.0, 0.1)
        } else if name.ends_with("cls") || name.ends_with("pos") {
            (0.0, 0.5)
        } else {
            (0.0, (3.0 / shape[0] as f32).sqrt())
        };
        for v in t.data_mut() {
            *v = base + r.random_range(-amp..amp);
        }
    }
    w
}

fn erf(x: f64) -> f64 {
    let a = x.abs();
    let v = if a < 3.0 {
        // Maclaurin series
        let mut term = a;
        let mut sum = a;
        let mut n = 0.0;
        while term.abs() > 1e-17 * sum.abs() {
            n += 1.0;
            term *= -a * a / n;
            sum += term / (2.0 * n + 1.0);
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        // erfc continued fraction, evaluated bottom-up
        let mut f = 0.0;
        for k in (1..60).rev() {
            f = (k as f64 / 2.0) / (a + f);
        }
        1.0 - (-a * a).exp() / (std::f64::consts::PI.sqrt() * (a + f))
    };
    v.copysign(x)
}

pub fn gelu64(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

type M = Vec<Vec<f64>>;

fn vec64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// `x · W + b` with `W` stored in×out.
fn lin(x: &M, w: &Tensor, b: &Tensor) -> M {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let (w, b) = (vec64(w), vec64(b));
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| b[o] + (0..din).map(|i| row[i] * w[i * dout + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn ln(x: &M, g: &Tensor, b: &Tensor) -> M {
    let (g, b) = (vec64(g), vec64(b));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + 1e-6).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn attention(x: &M, blk: &BlockWeights) -> M {
    let a = &blk.attn;
    let (q, k, v) = (lin(x, &a.w_q, &a.b_q), lin(x, &a.w_k, &a.b_k), lin(x, &a.w_v, &a.b_v));
    let (n, d) = (x.len(), x[0].len());
    let hd = d / a.heads;
    let mut concat = vec![vec![0.0; d]; n];
    for h in 0..a.heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                concat[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    lin(&concat, &a.w_o, &a.b_o)
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Plain pre-norm ViT written directly from the definitions, in f64.
pub fn reference_logits(image: &Tensor, w: &ModelWeights, cfg: &ModelConfig) -> Vec<f64> {
    let (c, s, p) = (cfg.in_channels, cfg.image_size, cfg.patch_high);
    let g = s / p;
    let img = vec64(image);
    let mut patches: M = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let mut v = Vec::with_capacity(c * p * p);
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        v.push(img[ch * s * s + (gy * p + py) * s + gx * p + px]);
                    }
                }
            }
            patches.push(v);
        }
    }
    let mut x: M = vec![vec64(&w.embed.cls)];
    x.extend(lin(&patches, &w.embed.proj.weight, &w.embed.proj.bias));
    let d = cfg.dim;
    let pos = vec64(&w.embed.pos);
    for (i, row) in x.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += pos[i * d + j];
        }
    }
    for blk in &w.blocks {
        x = add(&x, &attention(&ln(&x, &blk.norm1_gamma, &blk.norm1_beta), blk));
        let h: M = lin(&ln(&x, &blk.norm2_gamma, &blk.norm2_beta), &blk.ffn_w1, &blk.ffn_b1)
            .into_iter()
            .map(|r| r.into_iter().map(gelu64).collect())
            .collect();
        x = add(&x, &lin(&h, &blk.ffn_w2, &blk.ffn_b2));
    }
    let cls = ln(&vec![x[0].clone()], &w.norm_gamma, &w.norm_beta);
    lin(&cls, &w.head_weight, &w.head_bias).remove(0)
}

/// Token count after each prune layer, CLS excluded.
pub fn floor_chain(patches: usize, keep_rate: f64, prune_events: usize) -> Vec<usize> {
    let mut n = patches;
    (0..prune_events)
        .map(|_| {
            n = ((keep_rate * n as f64 + 1e-9).floor() as usize).max(1);
            n
        })
        .collect()
}
