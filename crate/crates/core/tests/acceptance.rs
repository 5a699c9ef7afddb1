//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use vtd_core::checkpoint::{frozen_hash, tensors_hash};
use vtd_core::codebook::{masked_vote_scores, quantize, vote, Codebook, VoteRule};
use vtd_core::dataset::{generate, split_base_novel, AnchorSource, Dataset, SyntheticSpec};
use vtd_core::encoders::{EncoderConfig, FrozenEncoderWeights};
use vtd_core::eval::{evaluate, evaluate_base_novel, harmonic_mean, predict, EvalOptions};
use vtd_core::fusion::{confidence_fuse, Aggregation, FusionMode};
use vtd_core::training::{train, TrainConfig, TrainState, METRICS_HEADER};
use vtd_core::{Tape, Tensor};

use common::*;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn encoder() -> FrozenEncoderWeights {
    FrozenEncoderWeights::init(EncoderConfig::default(), 0).unwrap()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(", ")
}

/// K=5, d=32, T=8, pool 16, 60 videos per class (last 20 held out).
fn benchmark_spec(seed: u64, noise: f64) -> SyntheticSpec {
    SyntheticSpec {
        classes: 5,
        videos_per_class: 60,
        pool_size: 16,
        segments: 8,
        dim: 32,
        margin: 0.5,
        noise,
        seed,
        ..SyntheticSpec::default()
    }
}

fn benchmark_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

fn split_holdout(spec: &SyntheticSpec) -> (Dataset, Dataset) {
    generate(spec).unwrap().holdout(20).unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let per_op = per_op_suite();
    let (worst_name, worst) = per_op
        .iter()
        .copied()
        .fold(("", 0.0), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    let e2e = end_to_end_suite();
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        name: "gradient suite",
        pass: worst < PER_OP_TOL && e2e < END_TO_END_TOL && secs < 60.0,
        detail: format!(
            "{} ops x {INSTANCES} instances, worst per-op {worst:.2e} ({worst_name}) < {PER_OP_TOL:e}; \
             end-to-end worst {e2e:.2e} < {END_TO_END_TOL:e} over {INSTANCES} instances; {secs:.1}s < 60s",
            per_op.len()
        ),
    }
}

fn quantization_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let (mut mismatches, mut ties) = (0, 0);
    for i in 0..1000 {
        let d = r.random_range(1..=8);
        let k = r.random_range(1..=16);
        let mut x = randn(&mut r, &[d]).into_data();
        let mut rows: Vec<Vec<f64>> = (0..k).map(|_| randn(&mut r, &[d]).into_data()).collect();
        if i % 2 == 0 && k >= 2 && d >= 2 {
            // mirror a prototype across a coordinate plane that contains x:
            // both images are exactly equidistant from x
            let j = r.random_range(0..d);
            x[j] = 0.0;
            let (a, b) = (r.random_range(0..k), r.random_range(0..k));
            if a != b {
                let mut m = rows[a].clone();
                m[j] = -m[j];
                rows[b] = m;
                ties += 1;
            }
        }
        let labels = (0..k).map(|c| format!("c{c}")).collect();
        let cb = Codebook::from_directions(labels, &Tensor::from_rows(&rows).unwrap()).unwrap();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let dist: f64 = (0..d).map(|j| (x[j] - cb.row(c)[j]).powi(2)).sum();
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        if quantize(&x, &cb).unwrap() != best {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 2,
        name: "quantization oracle",
        pass: mismatches == 0 && secs < 5.0,
        detail: format!("1000 instances ({ties} mirrored ties), {mismatches} mismatches vs linear scan; {secs:.2}s < 5s"),
    }
}

fn vote_oracle() -> Outcome {
    let mut r = rng(3);
    let mut mismatches = 0;
    for _ in 0..500 {
        let t = r.random_range(1..=12);
        let k = r.random_range(1..=10);
        let s = Tensor::randn(&mut r, &[t, k], 1.0);
        let mut m = Tensor::zeros(&[t, k]);
        for row in 0..t {
            let c = r.random_range(0..k);
            m.data_mut()[row * k + c] = 1.0;
        }
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..k {
            let mut score = 0.0;
            for row in 0..t {
                score += m.get(row, c) * s.get(row, c);
            }
            if score > best.1 {
                best = (c, score);
            }
        }
        let scores = masked_vote_scores(&s, &m).unwrap();
        if vote(&s, &m, VoteRule::Summed).unwrap() != best.0 || scores.data()[best.0] != best.1 {
            mismatches += 1;
        }
    }
    Outcome {
        id: 3,
        name: "bag-of-prototypes vote oracle",
        pass: mismatches == 0,
        detail: format!("500 instances, {mismatches} mismatches vs exhaustive summed masked scores"),
    }
}

fn fusion_limits() -> Outcome {
    let mut r = rng(4);
    let (mut sharp, mut flat, mut sum_err) = (0.0f64, 0.0f64, 0.0f64);
    // First-order offset of the tau=1e6 result from the mean: sum_i (c_i - mean c) f_ij / (T tau).
    let mut first_order = 0.0f64;
    let mut done = 0;
    while done < 1000 {
        let t = r.random_range(1..=8);
        let d = r.random_range(1..=6);
        let f = Tensor::randn(&mut r, &[t, d], 1.0);
        let mut conf: Vec<f64> = (0..t).map(|_| r.random_range(-1.0..1.0)).collect();
        conf.shuffle(&mut r);
        let mut sorted = conf.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if t > 1 && sorted[0] - sorted[1] < 1e-3 {
            continue;
        }
        done += 1;
        let best = conf.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let c_mean = conf.iter().sum::<f64>() / t as f64;
        for j in 0..d {
            let lin: f64 = (0..t).map(|i| (conf[i] - c_mean) * f.get(i, j)).sum::<f64>() / (t as f64 * 1e6);
            first_order = first_order.max(lin.abs());
        }
        let tape = Tape::new();
        let (fv, cv) = (tape.constant(f.clone()), tape.constant(Tensor::vector(conf)));
        for (tau, slot) in [(1e-6, &mut sharp), (1e6, &mut flat)] {
            let out = confidence_fuse(fv, cv, tau, None).unwrap();
            sum_err = sum_err.max((out.weights.iter().sum::<f64>() - 1.0).abs());
            let v = out.v_hat.value();
            for j in 0..d {
                let target = if tau < 1.0 {
                    f.get(best, j)
                } else {
                    (0..t).map(|i| f.get(i, j)).sum::<f64>() / t as f64
                };
                *slot = slot.max((v.data()[j] - target).abs());
            }
        }
    }
    Outcome {
        id: 4,
        name: "fusion temperature limits",
        pass: sharp < 1e-6 && flat < 1e-6 && sum_err < 1e-9,
        detail: format!(
            "1000 instances: tau=1e-6 vs best frame {sharp:.1e} < 1e-6, tau=1e6 vs mean {flat:.1e} < 1e-6 \
             (first-order offset {first_order:.1e}), |sum(w) - 1| {sum_err:.1e} < 1e-9"
        ),
    }
}

fn scale_invariance() -> Outcome {
    let data = generate(&SyntheticSpec {
        videos_per_class: 20,
        noise: 0.3,
        seed: 5,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let state = TrainState::init(encoder(), 5);
    let opts = EvalOptions::default();
    let cb = state.codebook(&data.labels, None).unwrap();
    let base = predict(&data, &state, &cb, &opts).unwrap();
    let mut changed = 0;
    for lam in [0.1, 3.0, 100.0] {
        let mut scaled = data.clone();
        for v in &mut scaled.videos {
            for f in &mut v.frames {
                f.iter_mut().for_each(|x| *x *= lam);
            }
        }
        let p = predict(&scaled, &state, &cb, &opts).unwrap();
        for (a, b) in base.iter().zip(&p) {
            if a.assignments != b.assignments || a.k_max != b.k_max || a.ranking != b.ranking {
                changed += 1;
            }
        }
    }
    Outcome {
        id: 5,
        name: "argmax-level scale invariance",
        pass: changed == 0 && base.len() == 100,
        detail: format!(
            "{} videos x lambda in {{0.1, 3, 100}}: {changed} changed assignments, k_max or rankings",
            base.len()
        ),
    }
}

fn frozen_invariance() -> Outcome {
    let spec = SyntheticSpec {
        videos_per_class: 8,
        ..benchmark_spec(6, 0.0)
    };
    let data = generate(&spec).unwrap();
    let init = TrainState::init(encoder(), 6);
    let frozen_before = frozen_hash(&init.encoder);
    let trainable_before = tensors_hash(&init.params.named_tensors());
    let (after, history) = train(&data, &benchmark_config(6, 50), init).unwrap();
    let frozen_after = frozen_hash(&after.encoder);
    let trainable_after = tensors_hash(&after.params.named_tensors());
    Outcome {
        id: 6,
        name: "frozen-encoder invariance",
        pass: frozen_before == frozen_after && trainable_before != trainable_after && history.len() == 50,
        detail: format!(
            "50 epochs: frozen {}.. -> {}.. (identical: {}), trainable {}.. -> {}.. (differs: {})",
            &frozen_before[..12],
            &frozen_after[..12],
            frozen_before == frozen_after,
            &trainable_before[..12],
            &trainable_after[..12],
            trainable_before != trainable_after
        ),
    }
}

fn end_to_end_learning() -> Outcome {
    let start = Instant::now();
    let (train_set, eval_set) = split_holdout(&benchmark_spec(7, 0.0));
    let cfg = benchmark_config(7, 200);
    let (state, history) = train(&train_set, &cfg, TrainState::init(encoder(), 7)).unwrap();
    let report = evaluate(&eval_set, &state, &EvalOptions::from(&cfg)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 7,
        name: "synthetic end-to-end learning",
        pass: report.top1 >= 90.0 && secs < 300.0,
        detail: format!(
            "K=5 d=32 T=8, {}/{} train/eval videos, 200 epochs: eval top-1 {:.1}% >= 90% \
             (final train top-1 {:.1}%, loss {:.4}); {secs:.1}s < 300s",
            train_set.len(),
            eval_set.len(),
            report.top1,
            history.last().unwrap().train_top1,
            history.last().unwrap().loss
        ),
    }
}

/// Shared noisy benchmark for the fusion and aggregation ablations: per seed,
/// one default (fused, confidence) model, evaluated under each setting.
fn noisy_ablations() -> (Outcome, Outcome) {
    let mut conf = Vec::new();
    let mut pool = Vec::new();
    let (mut fused, mut frame, mut discrete) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5 {
        let (train_set, eval_set) = split_holdout(&benchmark_spec(seed, 0.5));
        let cfg = benchmark_config(seed, 100);
        let (state, _) = train(&train_set, &cfg, TrainState::init(encoder(), seed)).unwrap();
        let opts = EvalOptions::from(&cfg);
        let top1 = |f: &dyn Fn(&mut EvalOptions)| {
            let mut o = opts;
            f(&mut o);
            evaluate(&eval_set, &state, &o).unwrap().top1
        };
        conf.push(top1(&|_| {}));
        pool.push(top1(&|o| o.settings.fusion = FusionMode::Pool));
        fused.push(top1(&|o| o.settings.aggregation = Aggregation::Fused));
        frame.push(top1(&|o| o.settings.aggregation = Aggregation::FrameOnly));
        discrete.push(top1(&|o| o.settings.aggregation = Aggregation::DiscreteOnly));
    }
    let (mc, mp) = (mean(&conf), mean(&pool));
    let noise = Outcome {
        id: 8,
        name: "noise-robustness direction",
        pass: mc >= mp,
        detail: format!(
            "distractor fraction 0.5, 5 seeds: confidence {mc:.2} [{}] >= pool {mp:.2} [{}]; gap {:+.2}",
            fmt_list(&conf),
            fmt_list(&pool),
            mc - mp
        ),
    };
    let (mf, mr, md) = (mean(&fused), mean(&frame), mean(&discrete));
    let aggregation = Outcome {
        id: 9,
        name: "feature-aggregation ordering",
        pass: mf >= mr && mr >= md,
        detail: format!(
            "distractor fraction 0.5, 5 seeds: fused {mf:.2} [{}] >= frame_only {mr:.2} [{}] >= discrete_only {md:.2} [{}]",
            fmt_list(&fused),
            fmt_list(&frame),
            fmt_list(&discrete)
        ),
    };
    (noise, aggregation)
}

/// (method, dataset, base, novel, printed HM) from the zero-shot results table.
const TABLE_ONE: [(&str, &str, f64, f64, f64); 28] = [
    ("Vanilla CLIP", "HMDB-51", 53.3, 46.8, 49.8),
    ("Vanilla CLIP", "UCF-101", 78.5, 63.6, 70.3),
    ("Vanilla CLIP", "SSv2", 4.9, 5.3, 5.1),
    ("Vanilla CLIP", "K-400", 62.3, 53.4, 57.5),
    ("ActionCLIP", "HMDB-51", 69.1, 37.3, 48.4),
    ("ActionCLIP", "UCF-101", 90.1, 58.1, 70.6),
    ("ActionCLIP", "SSv2", 13.3, 10.1, 11.5),
    ("ActionCLIP", "K-400", 61.0, 46.2, 52.6),
    ("XCLIP", "HMDB-51", 69.4, 45.5, 55.0),
    ("XCLIP", "UCF-101", 89.9, 58.9, 71.2),
    ("XCLIP", "SSv2", 8.5, 6.6, 7.4),
    ("XCLIP", "K-400", 74.1, 56.4, 64.0),
    ("VideoPrompt", "HMDB-51", 46.2, 16.0, 23.8),
    ("VideoPrompt", "UCF-101", 90.5, 40.4, 55.9),
    ("VideoPrompt", "SSv2", 8.3, 5.3, 6.5),
    ("VideoPrompt", "K-400", 69.7, 37.6, 48.8),
    ("ViFi-CLIP", "HMDB-51", 73.8, 53.3, 61.9),
    ("ViFi-CLIP", "UCF-101", 92.9, 67.7, 78.3),
    ("ViFi-CLIP", "SSv2", 16.2, 12.1, 13.9),
    ("ViFi-CLIP", "K-400", 76.4, 61.1, 67.9),
    ("ViLT-CLIP", "HMDB-51", 76.7, 57.5, 65.7),
    ("ViLT-CLIP", "UCF-101", 95.2, 70.5, 81.0),
    ("ViLT-CLIP", "SSv2", 17.3, 12.8, 14.7),
    ("ViLT-CLIP", "K-400", 77.4, 63.0, 69.5),
    ("VTD-CLIP", "HMDB-51", 78.4, 63.5, 70.0),
    ("VTD-CLIP", "UCF-101", 95.5, 73.7, 83.2),
    ("VTD-CLIP", "SSv2", 17.8, 13.9, 15.4),
    ("VTD-CLIP", "K-400", 78.5, 63.5, 70.1),
];

fn harmonic_mean_table() -> Outcome {
    let mut misses = Vec::new();
    let mut worst: f64 = 0.0;
    for (method, data, base, novel, printed) in TABLE_ONE {
        let hm = harmonic_mean(base, novel).unwrap();
        let dev = (hm - printed).abs();
        worst = worst.max(dev);
        if dev > 0.2 + 1e-9 {
            misses.push(format!("{method} {data}: ({base}, {novel}) -> {hm:.2}, printed {printed}"));
        }
    }
    let detail = if misses.is_empty() {
        format!("28 pairs within 0.2 of the printed HM; worst deviation {worst:.3}")
    } else {
        format!(
            "{}/28 pairs within 0.2; worst deviation {worst:.3}; outside: {}",
            28 - misses.len(),
            misses.join("; ")
        )
    };
    Outcome {
        id: 10,
        name: "harmonic mean reproduction",
        pass: misses.is_empty(),
        detail,
    }
}

fn base_novel_transfer() -> Outcome {
    let mut novel = Vec::new();
    let mut novel_init = Vec::new();
    let mut base = Vec::new();
    let mut chance = 0.0;
    for seed in 0..5 {
        let spec = SyntheticSpec {
            classes: 10,
            videos_per_class: 40,
            margin: 0.3,
            anchors: AnchorSource::Text,
            seed,
            ..benchmark_spec(seed, 0.0)
        };
        let (train_set, eval_set) = split_holdout(&spec);
        let split = split_base_novel(10, 0.5, seed).unwrap();
        chance = 100.0 / split.novel.len() as f64;
        let cfg = benchmark_config(seed, 60);
        let opts = EvalOptions::from(&cfg);
        let init = TrainState::init(encoder(), seed);
        novel_init.push(evaluate_base_novel(&eval_set, &split, &init, &opts).unwrap().novel.unwrap());
        let base_only = train_set.restrict_classes(&split.base).unwrap();
        let (state, _) = train(&base_only, &cfg, init).unwrap();
        let r = evaluate_base_novel(&eval_set, &split, &state, &opts).unwrap();
        base.push(r.base.unwrap());
        novel.push(r.novel.unwrap());
    }
    Outcome {
        id: 11,
        name: "base/novel transfer sanity",
        pass: novel.iter().all(|&n| n > chance),
        detail: format!(
            "K=10 split 5/5, text-derived anchors, 5 seeds: novel top-1 [{}] (mean {:.1}) > chance {chance:.1} on every seed; \
             base [{}]; novel before training [{}]",
            fmt_list(&novel),
            mean(&novel),
            fmt_list(&base),
            fmt_list(&novel_init)
        ),
    }
}

fn determinism() -> Outcome {
    let spec = SyntheticSpec {
        videos_per_class: 8,
        ..benchmark_spec(12, 0.2)
    };
    let data = generate(&spec).unwrap();
    let run = || {
        let (state, history) = train(&data, &benchmark_config(12, 10), TrainState::init(encoder(), 12)).unwrap();
        let mut metrics = format!("{METRICS_HEADER}\n");
        for m in &history {
            metrics.push_str(&m.csv_line());
            metrics.push('\n');
        }
        (metrics.into_bytes(), state.to_checkpoint().to_bytes())
    };
    let (m1, c1) = run();
    let (m2, c2) = run();
    Outcome {
        id: 12,
        name: "training determinism",
        pass: m1 == m2 && c1 == c2,
        detail: format!(
            "two 10-epoch runs: metrics {} bytes identical: {}, checkpoint {} bytes identical: {}",
            m1.len(),
            m1 == m2,
            c1.len(),
            c1 == c2
        ),
    }
}

fn main() {
    let start = Instant::now();
    let mut outcomes = vec![
        gradient_suite(),
        quantization_oracle(),
        vote_oracle(),
        fusion_limits(),
        scale_invariance(),
        frozen_invariance(),
        end_to_end_learning(),
    ];
    let (noise, aggregation) = noisy_ablations();
    outcomes.push(noise);
    outcomes.push(aggregation);
    outcomes.push(harmonic_mean_table());
    outcomes.push(base_novel_transfer());
    outcomes.push(determinism());

    println!("acceptance criteria");
    for o in &outcomes {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {:>2} {}: {}", o.id, o.name, o.detail);
    }
    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!(
        "{} passed, {} failed{} ({:.0}s)",
        outcomes.len() - failed.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(": {failed:?}")
        },
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
