//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{floor_chain, lively_weights, random_image, reference_logits, rng, tiny};
use proptest::prelude::*;
use rand::Rng;
use vitmerge::flops::{instrumented_count, model_flops};
use vitmerge::io::{load_weights, save_weights};
use vitmerge::model::PRESET_NAMES;
use vitmerge::pruning::{kept_count, merge_tokens, select_topk, similarity_matrix, ImportanceScores, MetricKind, SimilarityMetric};
use vitmerge::viz::merge_frames;
use vitmerge::{forward, random_init, ModelConfig, Tensor};

/// Verdict lines go straight to stderr so they show without `--nocapture`.
fn report(n: u32, name: &str, failures: &[String]) {
    let verdict = if failures.is_empty() { "PASS" } else { "FAIL" };
    let mut line = format!("criterion {n} {verdict}  {name}\n");
    for f in failures {
        line.push_str(&format!("    {f}\n"));
    }
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(failures.is_empty(), "criterion {n} failed: {failures:?}");
}

fn cli_stdout(args: &[&str]) -> String {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = vitmerge::cli::run(std::iter::once("vitmerge").chain(args.iter().copied()), &mut out, &mut err);
    assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
    String::from_utf8(out).unwrap()
}

fn kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn criterion_1_baseline_flops() {
    let start = Instant::now();
    let mut failures = Vec::new();
    for (preset, target, tol) in [("deit-s", 4.6, 0.03), ("deit-t", 1.3, 0.08), ("deit-b", 17.5, 0.03)] {
        let out = cli_stdout(&["flops", "--preset", preset, "--keep-rate", "1.0", "--no-multiscale", "--format", "kv"]);
        let g: f64 = kv(&out)["gflops_mac_convention"].parse().unwrap();
        let rel = (g - target) / target;
        if rel.abs() > tol {
            failures.push(format!("{preset}: {g:.4} G vs {target} (rel {:+.2}%, tol ±{}%)", 100.0 * rel, 100.0 * tol));
        } else {
            println!("    {preset}: {g:.4} G vs {target} ({:+.2}%)", 100.0 * rel);
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(1) {
        failures.push(format!("took {elapsed:?}"));
    }
    report(1, "baseline cost reproduction", &failures);
}

#[test]
fn criterion_2_pruned_flops() {
    let mut failures = Vec::new();
    let s = |eta: f64, ms: bool| model_flops(&ModelConfig::preset("deit-s").unwrap().with_keep_rate(eta).with_multiscale(ms)).unwrap();

    let plain = s(0.7, false);
    println!("    eta 0.7 single-scale block reduction {:.2}%", plain.reduction_pct);
    if !(34.0..=40.0).contains(&plain.reduction_pct) {
        failures.push(format!("block reduction {:.2}% outside [34, 40]", plain.reduction_pct));
    }
    for (eta, lo, hi) in [(0.7, 2.9, 3.3), (0.5, 2.2, 2.6)] {
        let g = s(eta, true).total_gmacs();
        println!("    eta {eta} dual-scale total {g:.4} G");
        if !(lo..=hi).contains(&g) {
            failures.push(format!("eta {eta} dual-scale total {g:.4} G outside [{lo}, {hi}]"));
        }
    }
    report(2, "pruned cost bands", &failures);
}

#[test]
fn criterion_3_instrumented_matches_analytic() {
    let start = Instant::now();
    let mut failures = Vec::new();
    for preset in PRESET_NAMES {
        let base = ModelConfig::preset(preset).unwrap();
        let weights = random_init(&base, 17).unwrap();
        let image = random_image(&base, 18);
        for eta in [0.5, 0.7, 1.0] {
            let cfg = base.clone().with_keep_rate(eta);
            let (trace, counted) = instrumented_count(|| forward(&image, &weights, &cfg));
            let trace = trace.unwrap();
            let analytic = model_flops(&cfg).unwrap();
            let rel = (trace.block_macs() as f64 - analytic.block_macs as f64) / analytic.block_macs as f64;
            println!(
                "    {preset} eta {eta}: instrumented {} analytic {} ({:+.4}%)",
                trace.block_macs(),
                analytic.block_macs,
                100.0 * rel
            );
            if rel.abs() > 0.01 {
                failures.push(format!("{preset} eta {eta}: block MACs differ by {:+.3}%", 100.0 * rel));
            }
            if counted != trace.total_macs() {
                failures.push(format!("{preset} eta {eta}: counter {counted} != trace {}", trace.total_macs()));
            }
        }
    }
    let elapsed = start.elapsed();
    println!("    elapsed {elapsed:?}");
    if elapsed >= Duration::from_secs(120) {
        failures.push(format!("took {elapsed:?}"));
    }
    report(3, "instrumented vs analytic block MACs", &failures);
}

const CASES: u32 = 1000;

fn run_property<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Option<String>
where
    S::Value: std::fmt::Debug,
{
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
        cases: CASES,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    match runner.run(&strategy, test) {
        Ok(()) => {
            println!("    {name}: {CASES} cases ok");
            None
        }
        Err(e) => Some(format!("{name}: {e}")),
    }
}

/// Tokens, positive scores and a keep rate that leaves at least one merge.
fn merge_case() -> impl Strategy<Value = (Tensor, Vec<f32>, f64)> {
    (3usize..12, 1usize..6).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-10.0f32..10.0, n * d).prop_map(move |v| Tensor::new(vec![n, d], v).unwrap()),
            prop::collection::vec(0.0f32..1.0, n),
            0.05f64..0.95,
        )
    })
}

fn singletons(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| vec![i]).collect()
}

fn merge_all(tokens: &Tensor, scores: &[f32], eta: f64) -> vitmerge::pruning::PruneOutcome {
    let s = ImportanceScores::new(scores.to_vec());
    let (c, nc) = select_topk(&s, eta).unwrap();
    let sim = similarity_matrix(tokens, &c, &nc, SimilarityMetric::COSINE, None).unwrap();
    merge_tokens(tokens, &s, &c, &nc, &sim, &singletons(tokens.shape()[0])).unwrap()
}

#[test]
fn criterion_4_merge_properties() {
    let mut failures = Vec::new();

    failures.extend(run_property("convexity bound", merge_case(), |(tokens, scores, eta)| {
        let out = merge_all(&tokens, &scores, eta);
        let d = tokens.shape()[1];
        for (g, &j) in out.crucial_indices.iter().enumerate() {
            let members: Vec<usize> = std::iter::once(j)
                .chain(out.merge_assignment.iter().filter(|&(_, &t)| t == j).map(|(&k, _)| k))
                .collect();
            for c in 0..d {
                let vals: Vec<f32> = members.iter().map(|&m| tokens.row(m)[c]).collect();
                let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let v = out.merged_tokens.row(g)[c];
                let slack = 1e-5 * (1.0 + lo.abs().max(hi.abs()));
                prop_assert!(v >= lo - slack && v <= hi + slack, "group {} dim {}: {} not in [{}, {}]", j, c, v, lo, hi);
            }
        }
        Ok(())
    }));

    failures.extend(run_property(
        "fixed-weight linearity",
        (merge_case(), -3.0f32..3.0, -3.0f32..3.0, any::<u64>()),
        |((x, scores, eta), a, b, seed)| {
            let n = x.shape()[0];
            let y = common::random_tensor(&mut rng(seed), x.shape(), 5.0);
            let s = ImportanceScores::new(scores);
            let (c, nc) = select_topk(&s, eta).unwrap();
            // one similarity matrix for all three merges keeps the assignment fixed
            let sim = similarity_matrix(&x, &c, &nc, SimilarityMetric::COSINE, None).unwrap();
            let m = |t: &Tensor| merge_tokens(t, &s, &c, &nc, &sim, &singletons(n)).unwrap().merged_tokens;
            let combo = x.scale(a).add(&y.scale(b)).unwrap();
            let lhs = m(&combo);
            let rhs = m(&x).scale(a).add(&m(&y).scale(b)).unwrap();
            let diff = lhs.max_abs_diff(&rhs);
            prop_assert!(diff <= 1e-4, "max diff {}", diff);
            Ok(())
        },
    ));

    failures.extend(run_property("no-merge identity", merge_case(), |(tokens, scores, _)| {
        let out = merge_all(&tokens, &scores, 1.0);
        prop_assert!(out.merge_assignment.is_empty());
        prop_assert_eq!(&out.merged_tokens, &tokens);
        Ok(())
    }));

    failures.extend(run_property(
        "token-count floor-chain",
        (0.05f64..=1.0, any::<bool>(), any::<u64>(), 0usize..4),
        |(eta, multiscale, seed, metric)| {
            let kind = [MetricKind::Cosine, MetricKind::L2, MetricKind::AttentionCross, MetricKind::Random][metric];
            let cfg = tiny(eta, multiscale).with_metric(SimilarityMetric::new(kind, seed));
            let w = random_init(&cfg, seed).unwrap();
            let trace = forward(&random_image(&cfg, seed ^ 1), &w, &cfg).unwrap();
            let got: Vec<usize> = trace.prune_events.iter().map(|e| e.outcome.kept() - 1).collect();
            prop_assert_eq!(got, floor_chain(cfg.patches_high(), eta, cfg.prune_layers.len()));
            prop_assert_eq!(trace.provenance.len(), *trace.token_counts.last().unwrap());
            Ok(())
        },
    ));

    failures.extend(run_property(
        "top-k equals exhaustive oracle",
        (2usize..=8).prop_flat_map(|n| (prop::collection::vec(0u8..5, n), 0.01f64..=1.0)),
        |(quarters, eta)| {
            let scores: Vec<f32> = quarters.iter().map(|&q| q as f32 / 4.0).collect();
            let n = scores.len();
            let k = kept_count(n, eta);
            // best subset of size k by score sum, ties to the lexicographically smallest
            let mut best: Option<(f32, Vec<usize>)> = None;
            for mask in 0u32..(1 << (n - 1)) {
                if mask.count_ones() as usize != k {
                    continue;
                }
                let set: Vec<usize> = (1..n).filter(|i| mask & (1 << (i - 1)) != 0).collect();
                let sum: f32 = set.iter().map(|&i| scores[i]).sum();
                let better = match &best {
                    None => true,
                    Some((s, b)) => sum > *s || (sum == *s && set < *b),
                };
                if better {
                    best = Some((sum, set));
                }
            }
            let mut want = vec![0];
            want.extend(best.unwrap().1);
            let (crucial, non_crucial) = select_topk(&ImportanceScores::new(scores), eta).unwrap();
            let rest: Vec<usize> = (1..n).filter(|i| !want.contains(i)).collect();
            prop_assert_eq!(crucial, want);
            prop_assert_eq!(non_crucial, rest);
            Ok(())
        },
    ));

    failures.extend(run_property(
        "assignment invariant under positive scaling",
        (merge_case(), 0.01f32..100.0),
        |((tokens, scores, eta), c)| {
            let n = tokens.shape()[0];
            let s = ImportanceScores::new(scores);
            let (cr, nc) = select_topk(&s, eta).unwrap();
            let sim = similarity_matrix(&tokens, &cr, &nc, SimilarityMetric::COSINE, None).unwrap();
            let a = merge_tokens(&tokens, &s, &cr, &nc, &sim, &singletons(n)).unwrap();
            let b = merge_tokens(&tokens, &s, &cr, &nc, &sim.scale(c), &singletons(n)).unwrap();
            prop_assert_eq!(a.merge_assignment, b.merge_assignment);
            Ok(())
        },
    ));

    report(4, "merge correctness properties", &failures);
}

type Oracle<'a> = Box<dyn Fn(usize, usize) -> f64 + 'a>;

#[test]
fn criterion_5_similarity_oracles() {
    let mut failures = Vec::new();
    let mut r = rng(5);
    let (n, d, heads) = (21, 24, 3);
    for batch in 0..5 {
        let tokens = common::random_tensor(&mut r, &[n, d], 2.0);
        let mut ids: Vec<usize> = (1..n).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, r.random_range(0..=i));
        }
        let mut crucial = vec![0];
        crucial.extend(&ids[..10]);
        let non_crucial = ids[10..].to_vec();
        let raw = common::random_tensor(&mut r, &[heads, n, n], 1.0).map(f32::exp);
        let map = vitmerge::tensor::softmax_rows(&raw.reshape(&[heads * n, n]).unwrap()).reshape(&[heads, n, n]).unwrap();

        let row = |i: usize| tokens.row(i).iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let oracles: [(MetricKind, Oracle); 4] = [
            (
                MetricKind::Cosine,
                Box::new(|a, b| {
                    let (u, v) = (row(a), row(b));
                    let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
                    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    dot / (nu * nv)
                }),
            ),
            (MetricKind::L1, Box::new(|a, b| -row(a).iter().zip(row(b)).map(|(x, y)| (x - y).abs()).sum::<f64>())),
            (
                MetricKind::L2,
                Box::new(|a, b| -row(a).iter().zip(row(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()),
            ),
            (
                MetricKind::AttentionCross,
                Box::new(|a, b| (0..heads).map(|h| map.data()[h * n * n + a * n + b] as f64).sum::<f64>() / heads as f64),
            ),
        ];
        for (kind, oracle) in &oracles {
            let sim = similarity_matrix(&tokens, &crucial, &non_crucial, SimilarityMetric::new(*kind, 0), Some(&map)).unwrap();
            assert_eq!(sim.shape(), &[10, 10]);
            let mut worst = 0.0f64;
            for (i, &a) in non_crucial.iter().enumerate() {
                for (j, &b) in crucial[1..].iter().enumerate() {
                    let want = oracle(a, b);
                    // distances grow with d, so compare them relatively
                    let err = (sim.row(i)[j] as f64 - want).abs() / want.abs().max(1.0);
                    worst = worst.max(err);
                }
            }
            if worst > 1e-5 {
                failures.push(format!("batch {batch} {kind}: worst error {worst:.3e}"));
            }
        }
        let rand = |seed| similarity_matrix(&tokens, &crucial, &non_crucial, SimilarityMetric::new(MetricKind::Random, seed), None).unwrap();
        if rand(9) != rand(9) {
            failures.push(format!("batch {batch}: random metric not reproducible"));
        }
        if rand(9) == rand(10) {
            failures.push(format!("batch {batch}: random metric ignores its seed"));
        }
    }
    println!("    5 batches x 100 pairs x 4 metrics checked");
    report(5, "similarity metrics vs direct formulas", &failures);
}

#[test]
fn criterion_6_plain_vit_equivalence() {
    let mut failures = Vec::new();
    let cfg = tiny(1.0, false);
    let mut worst = 0.0f64;
    for pair in 0..10 {
        let w = lively_weights(&cfg, 100 + pair);
        let image = random_image(&cfg, 200 + pair);
        let got = forward(&image, &w, &cfg).unwrap().logits;
        let want = reference_logits(&image, &w, &cfg);
        let spread = want.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
        for (c, (&g, &r)) in got.data().iter().zip(&want).enumerate() {
            let err = (g as f64 - r).abs();
            worst = worst.max(err);
            if err > 1e-5 {
                failures.push(format!("pair {pair} class {c}: {g} vs {r}"));
            }
        }
        if spread < 0.1 {
            failures.push(format!("pair {pair}: logits too small to be a meaningful comparison ({spread})"));
        }
    }
    println!("    worst logit error {worst:.3e}");
    report(6, "single-scale keep-rate 1 equals plain ViT", &failures);
}

#[test]
fn criterion_7_visualization_partition_law() {
    let mut failures = Vec::new();
    for i in 0..20u64 {
        let eta = if i % 2 == 0 { 0.5 } else { 0.7 };
        let cfg = ModelConfig::preset("deit-t").unwrap().with_keep_rate(eta).with_multiscale(i % 4 < 2);
        let w = random_init(&cfg, 300 + i).unwrap();
        let trace = forward(&random_image(&cfg, 400 + i), &w, &cfg).unwrap();
        let frames = merge_frames(&trace, cfg.grid_high()).unwrap();
        for f in &frames {
            if f.group_of_patch.len() != 196 {
                failures.push(format!("run {i} layer {}: covers {} patches", f.layer, f.group_of_patch.len()));
            }
        }
        for pair in frames.windows(2) {
            let (a, b) = (&pair[0].group_of_patch, &pair[1].group_of_patch);
            // a group at layer L must map into exactly one group at the next layer
            let mut image_of: BTreeMap<usize, usize> = BTreeMap::new();
            for p in 0..a.len() {
                if *image_of.entry(a[p]).or_insert(b[p]) != b[p] {
                    failures.push(format!("run {i}: layer {} splits group {}", pair[1].layer, a[p]));
                    break;
                }
            }
        }
        let counts: Vec<usize> = frames.iter().map(|f| f.group_count()).collect();
        let want = floor_chain(196, eta, cfg.prune_layers.len());
        if counts != want {
            failures.push(format!("run {i} eta {eta}: group counts {counts:?}, floor-chain {want:?}"));
        }
        if i < 2 {
            println!("    eta {eta}: group counts {counts:?}");
        }
    }
    report(7, "merge groups partition and coarsen", &failures);
}

fn bits(w: &vitmerge::ModelWeights) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    w.tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn bin(args: &[&str], dir: &std::path::Path) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_vitmerge")).args(args).current_dir(dir).output().unwrap();
    (out.status.code().unwrap_or(-1), out.stdout)
}

fn dir_contents(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn criterion_8_determinism_and_round_trip() {
    let mut failures = Vec::new();
    let tmp = tempfile::tempdir().unwrap();
    for preset in PRESET_NAMES {
        for multiscale in [true, false] {
            let cfg = ModelConfig::preset(preset).unwrap().with_multiscale(multiscale);
            let w = random_init(&cfg, 7).unwrap();
            let path = tmp.path().join("rt.tm");
            save_weights(&w, &path).unwrap();
            let back = load_weights(&path, &cfg).unwrap();
            if bits(&w) != bits(&back) {
                failures.push(format!("{preset} multiscale {multiscale}: round trip changed bits"));
            }
        }
    }
    println!("    weight round trip checked for {} presets", PRESET_NAMES.len());

    let dir = tmp.path();
    let mut img = Vec::from(&b"P6\n40 30\n255\n"[..]);
    let mut r = rng(8);
    img.extend((0..40 * 30 * 3).map(|_| r.random::<u8>()));
    fs::write(dir.join("in.ppm"), img).unwrap();

    let runs: [&[&str]; 4] = [
        &["gen-weights", "--preset", "deit-t", "--seed", "1", "--out", "w.tm"],
        &["infer", "--preset", "deit-t", "--weights", "w.tm", "--image", "in.ppm", "--keep-rate", "0.5"],
        &["flops", "--preset", "deit-s", "--keep-rate", "0.7", "--format", "kv"],
        &["selftest"],
    ];
    for args in runs {
        let first = bin(args, dir);
        let w1 = fs::read(dir.join("w.tm")).ok();
        let second = bin(args, dir);
        let w2 = fs::read(dir.join("w.tm")).ok();
        if first.0 != 0 || first != second || w1 != w2 {
            failures.push(format!("`{}` not reproducible (exit {} / {})", args.join(" "), first.0, second.0));
        }
    }
    let viz = |out: &str| {
        let code = bin(
            &["viz", "--preset", "deit-t", "--weights", "w.tm", "--image", "in.ppm", "--metric", "random", "--out", out],
            dir,
        );
        (code, dir_contents(&dir.join(out)))
    };
    let (a, fa) = viz("viz_a");
    let (b, fb) = viz("viz_b");
    let stdout_same = String::from_utf8_lossy(&a.1).replace("viz_a", "") == String::from_utf8_lossy(&b.1).replace("viz_b", "");
    if a.0 != 0 || !stdout_same || fa != fb || fa.len() != 3 {
        failures.push(format!("viz not reproducible ({} frames)", fa.len()));
    }
    let names: BTreeSet<_> = fa.keys().cloned().collect();
    println!("    cli runs byte-identical; viz frames {names:?}");
    report(8, "determinism and round trip", &failures);
}
