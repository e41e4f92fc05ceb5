//! Command-line surface. [`run`] returns the process exit status.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flops::{instrumented_count, model_flops};
use crate::io::ppm::{decode_ppm, encode_ppm, image_to_tensor, read_ppm};
use crate::io::weights::{decode_tensors, encode_tensors};
use crate::io::{load_weights, save_weights, Normalization, RgbImage};
use crate::model::{forward, random_init, ForwardTrace, ModelConfig, PRESET_NAMES};
use crate::pruning::{kept_count, merge_tokens, select_topk, similarity_matrix, ImportanceScores, MetricKind, SimilarityMetric};
use crate::tensor::{matmul, softmax_rows, Tensor};
use crate::viz::{merge_frames, render_merge_trace};

const METRIC_NAMES: [&str; 5] = ["cosine", "l1", "l2", "attn", "random"];

#[derive(Parser, Debug)]
#[command(name = "vitmerge", version, about = "ViT inference with token merging and dual-scale fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classify one image and print the top-5 logits.
    Infer(InferArgs),
    /// Run inference and write one merge-map PPM per prune layer.
    Viz(VizArgs),
    /// Report the analytic cost of a configuration.
    Flops(FlopsArgs),
    /// Write a seeded random weight file.
    GenWeights(GenArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESET_NAMES))]
    preset: String,
    /// Fraction of non-CLS tokens kept at each prune layer, in (0, 1].
    #[arg(long, value_parser = parse_keep_rate)]
    keep_rate: Option<f64>,
    #[arg(long, default_value = "cosine", value_parser = clap::builder::PossibleValuesParser::new(METRIC_NAMES))]
    metric: String,
    /// Seed for the `random` metric.
    #[arg(long, default_value_t = 0)]
    metric_seed: u64,
    #[arg(long)]
    no_multiscale: bool,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.preset)?.with_multiscale(!self.no_multiscale);
        if let Some(eta) = self.keep_rate {
            cfg = cfg.with_keep_rate(eta);
        }
        let kind: MetricKind = self.metric.parse()?;
        Ok(cfg.with_metric(SimilarityMetric::new(kind, self.metric_seed)))
    }
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    weights: PathBuf,
    /// Binary PPM (P6) input.
    #[arg(long)]
    image: PathBuf,
    /// Per-channel normalization mean.
    #[arg(long, default_value_t = 0.5)]
    mean: f32,
    #[arg(long, default_value_t = 0.5)]
    std: f32,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[command(flatten)]
    infer: InferArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    palette_seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Kv,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESET_NAMES))]
    preset: String,
    #[arg(long, value_parser = parse_keep_rate)]
    keep_rate: f64,
    #[arg(long)]
    no_multiscale: bool,
    #[arg(long, default_value = "cosine", value_parser = clap::builder::PossibleValuesParser::new(METRIC_NAMES))]
    metric: String,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESET_NAMES))]
    preset: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Omit the coarse-branch and fusion tensors.
    #[arg(long)]
    no_multiscale: bool,
}

fn parse_keep_rate(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1]"))
    }
}

/// Parses `args` (program name first) and runs the subcommand.
/// Exit status: 0 success, 1 runtime error, 2 usage error.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Infer(a) => infer(&a, out),
        Command::Viz(a) => viz(&a, out),
        Command::Flops(a) => flops(&a, out),
        Command::GenWeights(a) => gen_weights(&a, out),
        Command::Selftest => selftest(out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn load_and_forward(a: &InferArgs) -> Result<(ModelConfig, RgbImage, ForwardTrace)> {
    let cfg = a.model.config()?;
    let weights = load_weights(&a.weights, &cfg)?;
    let img = read_ppm(&a.image)?;
    let norm = Normalization {
        mean: [a.mean; 3],
        std: [a.std; 3],
    };
    let trace = forward(&image_to_tensor(&img, cfg.image_size, &norm), &weights, &cfg)?;
    Ok((cfg, img, trace))
}

fn print_trace(cfg: &ModelConfig, trace: &ForwardTrace, out: &mut dyn Write) -> Result<()> {
    let counts: Vec<String> = trace.token_counts.iter().map(ToString::to_string).collect();
    let lines = [
        format!(
            "preset {}  keep-rate {}  metric {}  multiscale {}",
            cfg.name, cfg.keep_rate, cfg.metric.kind, cfg.multiscale
        ),
        format!("tokens per layer: {}", counts.join(" ")),
        format!("instrumented MACs: {}", trace.total_macs()),
        "top-5:".to_string(),
    ];
    for l in lines {
        writeln!(out, "{l}").map_err(|e| Error::io("<stdout>", e))?;
    }
    for (rank, (class, logit)) in trace.top_k(5).into_iter().enumerate() {
        writeln!(out, "  {}  class {:>4}  logit {:.6}", rank + 1, class, logit).map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

fn infer(a: &InferArgs, out: &mut dyn Write) -> Result<i32> {
    let (cfg, _, trace) = load_and_forward(a)?;
    print_trace(&cfg, &trace, out)?;
    Ok(0)
}

fn viz(a: &VizArgs, out: &mut dyn Write) -> Result<i32> {
    let (cfg, img, trace) = load_and_forward(&a.infer)?;
    print_trace(&cfg, &trace, out)?;
    let paths = render_merge_trace(&trace, cfg.grid_high(), &a.out, a.palette_seed, Some(&img))?;
    let frames = merge_frames(&trace, cfg.grid_high())?;
    for (p, f) in paths.iter().zip(&frames) {
        writeln!(out, "layer {:>2}: {:>3} groups -> {}", f.layer, f.group_count(), p.display())
            .map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(0)
}

fn flops(a: &FlopsArgs, out: &mut dyn Write) -> Result<i32> {
    let kind: MetricKind = a.metric.parse()?;
    let cfg = ModelConfig::preset(&a.preset)?
        .with_keep_rate(a.keep_rate)
        .with_multiscale(!a.no_multiscale)
        .with_metric(SimilarityMetric::new(kind, 0));
    let report = model_flops(&cfg)?;
    let text = match a.format {
        Format::Text => report.to_text(),
        Format::Kv => report.to_kv(),
    };
    write!(out, "{text}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(0)
}

fn gen_weights(a: &GenArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = ModelConfig::preset(&a.preset)?.with_multiscale(!a.no_multiscale);
    let w = random_init(&cfg, a.seed)?;
    save_weights(&w, &a.out)?;
    writeln!(out, "wrote {} parameters to {}", w.param_count(), a.out.display()).map_err(|e| Error::io("<stdout>", e))?;
    Ok(0)
}

/// Small enough that every check finishes in milliseconds.
fn selftest_config(multiscale: bool, keep_rate: f64) -> ModelConfig {
    ModelConfig {
        name: "selftest".into(),
        depth: 6,
        dim: 16,
        heads: 2,
        mlp_ratio: 4,
        prune_layers: vec![3, 4, 5],
        keep_rate,
        n_downsampled_blocks: 2,
        num_classes: 10,
        image_size: 64,
        in_channels: 3,
        patch_high: 8,
        patch_low: 16,
        metric: SimilarityMetric::COSINE,
        multiscale,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

type Check = (&'static str, fn() -> std::result::Result<(), String>);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn check_matmul() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, k, n) = (7, 33, 5);
    let a = random_tensor(&mut rng, &[m, k]);
    let b = random_tensor(&mut rng, &[k, n]);
    let c = matmul(&a, &b).map_err(|e| e.to_string())?;
    for i in 0..m {
        for j in 0..n {
            let want: f64 = (0..k).map(|t| a.data()[i * k + t] as f64 * b.data()[t * n + j] as f64).sum();
            let got = c.data()[i * n + j] as f64;
            ensure((got - want).abs() < 1e-4, || format!("c[{i},{j}] = {got}, expected {want}"))?;
        }
    }
    Ok(())
}

fn check_softmax() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = softmax_rows(&random_tensor(&mut rng, &[4, 9]).scale(30.0));
    for r in 0..4 {
        let sum: f32 = s.row(r).iter().sum();
        ensure((sum - 1.0).abs() < 1e-5, || format!("row {r} sums to {sum}"))?;
    }
    Ok(())
}

fn check_topk() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(2..9);
        let eta = rng.random_range(0.05..=1.0);
        let scores: Vec<f32> = (0..n).map(|_| rng.random_range(0..4) as f32 / 4.0).collect();
        let (crucial, _) = select_topk(&ImportanceScores::new(scores.clone()), eta).map_err(|e| e.to_string())?;
        let mut order: Vec<usize> = (1..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut want: Vec<usize> = order[..kept_count(n, eta)].to_vec();
        want.sort_unstable();
        want.insert(0, 0);
        ensure(crucial == want, || format!("scores {scores:?} eta {eta}: {crucial:?} != {want:?}"))?;
    }
    Ok(())
}

fn check_merge_convexity() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, d) = (12, 6);
    let tokens = random_tensor(&mut rng, &[n, d]);
    let scores = ImportanceScores::new((0..n).map(|_| rng.random_range(0.0..1.0)).collect());
    let (crucial, nc) = select_topk(&scores, 0.4).map_err(|e| e.to_string())?;
    let sim = similarity_matrix(&tokens, &crucial, &nc, SimilarityMetric::COSINE, None).map_err(|e| e.to_string())?;
    let prov: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let out = merge_tokens(&tokens, &scores, &crucial, &nc, &sim, &prov).map_err(|e| e.to_string())?;
    for (g, &j) in crucial.iter().enumerate().skip(1) {
        let members: Vec<usize> = std::iter::once(j)
            .chain(out.merge_assignment.iter().filter(|&(_, &t)| t == j).map(|(&k, _)| k))
            .collect();
        for c in 0..d {
            let vals = members.iter().map(|&m| tokens.data()[m * d + c]);
            let lo = vals.clone().fold(f32::INFINITY, f32::min);
            let hi = vals.fold(f32::NEG_INFINITY, f32::max);
            let v = out.merged_tokens.data()[g * d + c];
            ensure(v >= lo - 1e-5 && v <= hi + 1e-5, || format!("group {j} dim {c}: {v} outside [{lo}, {hi}]"))?;
        }
    }
    Ok(())
}

fn check_forward_chain_and_costs() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for multiscale in [false, true] {
        for eta in [0.5, 0.7, 1.0] {
            let cfg = selftest_config(multiscale, eta);
            let w = random_init(&cfg, 11).map_err(|e| e.to_string())?;
            let img = random_tensor(&mut rng, &[3, 64, 64]);
            let (trace, counted) = instrumented_count(|| forward(&img, &w, &cfg));
            let trace = trace.map_err(|e| e.to_string())?;
            let mut n = cfg.patches_high();
            for ev in &trace.prune_events {
                n = kept_count(n + 1, eta);
                ensure(ev.outcome.kept() == n + 1, || format!("layer {}: {} kept, expected {}", ev.layer, ev.outcome.kept(), n + 1))?;
            }
            ensure(counted == trace.total_macs(), || format!("counter {counted} != trace total {}", trace.total_macs()))?;
            let analytic = model_flops(&cfg).map_err(|e| e.to_string())?.block_macs as f64;
            let rel = (trace.block_macs() as f64 - analytic).abs() / analytic;
            ensure(rel < 0.01, || format!("multiscale {multiscale} eta {eta}: block MACs off by {:.3}%", 100.0 * rel))?;
        }
    }
    Ok(())
}

fn check_weight_round_trip() -> std::result::Result<(), String> {
    let cfg = selftest_config(true, 0.7);
    let w = random_init(&cfg, 12).map_err(|e| e.to_string())?;
    let named = w.tensors();
    let bytes = encode_tensors(named.iter().map(|(n, t)| (n.as_str(), *t)));
    let back = decode_tensors(&bytes).map_err(|e| e.to_string())?;
    ensure(back.len() == named.len(), || "tensor count changed".into())?;
    for ((n0, t0), (n1, t1)) in named.iter().zip(&back) {
        let same = t0.shape() == t1.shape() && t0.data().iter().zip(t1.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(n0 == n1 && same, || format!("tensor `{n0}` changed"))?;
    }
    Ok(())
}

fn check_ppm_round_trip() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut img = RgbImage::new(5, 3);
    rng.fill(&mut img.pixels[..]);
    let back = decode_ppm(&encode_ppm(&img)).map_err(|e| e.to_string())?;
    ensure(back == img, || "pixels changed".into())
}

fn check_viz_coarsening() -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = selftest_config(true, 0.5);
    let w = random_init(&cfg, 13).map_err(|e| e.to_string())?;
    let trace = forward(&random_tensor(&mut rng, &[3, 64, 64]), &w, &cfg).map_err(|e| e.to_string())?;
    let frames = merge_frames(&trace, cfg.grid_high()).map_err(|e| e.to_string())?;
    for pair in frames.windows(2) {
        let (a, b) = (&pair[0].group_of_patch, &pair[1].group_of_patch);
        for p in 0..a.len() {
            for q in 0..a.len() {
                ensure(a[p] != a[q] || b[p] == b[q], || format!("layer {} splits a group", pair[1].layer))?;
            }
        }
    }
    let last = frames.last().expect("non-empty");
    let want = trace.prune_events.last().expect("non-empty").outcome.kept() - 1;
    let got = last.group_of_patch.iter().collect::<BTreeSet<_>>().len();
    ensure(got == want, || format!("final frame has {got} groups, expected {want}"))
}

const CHECKS: [Check; 8] = [
    ("matmul matches triple loop", check_matmul),
    ("softmax rows sum to one", check_softmax),
    ("top-k matches sort oracle", check_topk),
    ("merged tokens stay in member hull", check_merge_convexity),
    ("token floor-chain and MAC accounting", check_forward_chain_and_costs),
    ("weight file round trip", check_weight_round_trip),
    ("PPM round trip", check_ppm_round_trip),
    ("merge groups only coarsen", check_viz_coarsening),
];

fn selftest(out: &mut dyn Write) -> Result<i32> {
    let mut failed = 0;
    for (name, check) in CHECKS {
        let line = match check() {
            Ok(()) => format!("PASS  {name}"),
            Err(why) => {
                failed += 1;
                format!("FAIL  {name}: {why}")
            }
        };
        writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))?;
    }
    writeln!(out, "{} of {} checks passed", CHECKS.len() - failed, CHECKS.len()).map_err(|e| Error::io("<stdout>", e))?;
    Ok(if failed == 0 { 0 } else { 1 })
}
