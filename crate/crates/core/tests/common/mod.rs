//! Shared oracles for the integration tests: central finite differences and a
//! tiny end-to-end world small enough to differentiate numerically.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtd_core::codebook::VoteRule;
use vtd_core::encoders::{EncoderConfig, FrameInput, FrozenEncoderWeights};
use vtd_core::fusion::{Aggregation, CrossAttentionParams, FusionMode, FusionSettings};
use vtd_core::training::{compute_loss, forward_video, CodebookOnTape, ParamVars};
use vtd_core::{Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-8;
pub const PER_OP_TOL: f64 = 1e-5;
pub const END_TO_END_TOL: f64 = 1e-3;
pub const INSTANCES: usize = 100;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(rng, shape, 1.0)
}

/// Relative error beyond the absolute floor: `(|a − n| − floor)⁺ / max(|a|, |n|)`.
///
/// Below `tol` exactly when `|a − n| ≤ floor + tol · max(|a|, |n|)`.
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let excess = (analytic - numeric).abs() - ABS_FLOOR;
    if excess <= 0.0 {
        0.0
    } else {
        excess / analytic.abs().max(numeric.abs())
    }
}

fn scalar_loss<'t>(tape: &'t Tape, out: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    Ok(out.mul(&tape.constant(weights.clone()))?.sum())
}

/// Largest derivative error of `sum(f(inputs) ⊙ R)` over every input element,
/// with `R` a fixed random tensor so that no output entry is ignored.
pub fn max_grad_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor], weights: Option<&Tensor>| -> (f64, Tensor) {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars).expect("forward");
        let shape_probe = (*out.value()).clone();
        let w = weights.cloned().unwrap_or_else(|| {
            let mut r = rng(0xFD);
            Tensor::randn(&mut r, shape_probe.shape(), 1.0)
        });
        let v = scalar_loss(&tape, out, &w).expect("loss").value().data()[0];
        (v, w)
    };
    let (_, weights) = eval(inputs, None);

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&tape, &vars).expect("forward");
    let loss = scalar_loss(&tape, out, &weights).expect("loss");
    let grads = tape.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i]);
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric =
                (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * FD_STEP);
            worst = worst.max(grad_error(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Encoder small enough that every parameter can be perturbed individually.
pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        width: 8,
        heads: 2,
        blocks: 1,
        mlp_hidden: 8,
        out_dim: 6,
        image_size: 4,
        patch: 2,
        visual_prompts: 2,
        text_prompts: 2,
        label_len: 16,
    }
}

pub struct TinyWorld {
    pub encoder: FrozenEncoderWeights,
    pub labels: Vec<String>,
    pub videos: Vec<(Vec<FrameInput>, usize)>,
    /// visual prompts, text prompts, wq, wk, wv, wo
    pub params: Vec<Tensor>,
    pub settings: FusionSettings,
}

impl TinyWorld {
    /// A seeded instance: three classes, two videos of three frames each.
    pub fn new(seed: u64, pixels: bool) -> Self {
        let cfg = tiny_encoder_config();
        let encoder = FrozenEncoderWeights::init(cfg.clone(), seed).unwrap();
        let mut r = rng(seed ^ 0xE2E);
        let labels = vec!["run".into(), "jump".into(), "swim".into()];
        let videos = (0..2)
            .map(|b| {
                let frames = (0..3)
                    .map(|_| {
                        if pixels {
                            FrameInput::Pixels(randn(&mut r, &[cfg.pixel_len()]).into_data())
                        } else {
                            FrameInput::Embedding(randn(&mut r, &[cfg.out_dim]).into_data())
                        }
                    })
                    .collect();
                (frames, b % 3)
            })
            .collect();
        let d = cfg.out_dim;
        let mut attn = CrossAttentionParams::init(d, seed);
        attn.wo = Tensor::randn(&mut r, &[d, d], 0.5);
        let params = vec![
            randn(&mut r, &[cfg.visual_prompts, cfg.width]),
            randn(&mut r, &[cfg.text_prompts, cfg.width]),
            attn.wq,
            attn.wk,
            attn.wv,
            attn.wo,
        ];
        let settings = FusionSettings {
            aggregation: Aggregation::Fused,
            fusion: FusionMode::Confidence,
            tau_fuse: r.random_range(0.3..1.0),
            top_k: None,
        };
        Self {
            encoder,
            labels,
            videos,
            params,
            settings,
        }
    }

    /// Full training objective as a function of the six trainable tensors.
    pub fn loss<'t>(&self, tape: &'t Tape, p: &[Var<'t>]) -> Result<Var<'t>> {
        let vars = ParamVars {
            visual: p[0],
            text: p[1],
            attn: vtd_core::fusion::CrossAttentionVars {
                wq: p[2],
                wk: p[3],
                wv: p[4],
                wo: p[5],
            },
        };
        let cb = CodebookOnTape::build(tape, &self.labels, vars.text, &self.encoder, None)?;
        let mut emb = Vec::new();
        let mut targets = Vec::new();
        for (frames, class) in &self.videos {
            let out = forward_video(
                tape,
                frames,
                &vars,
                &self.encoder,
                &cb,
                &self.settings,
                VoteRule::Summed,
            )?;
            emb.push(out.v_hat);
            targets.push(*class);
        }
        Ok(compute_loss(&emb, cb.matrix, &targets, 0.07)?.0)
    }
}

/// Per-op finite-difference cases: name and worst error over `INSTANCES` seeds.
pub fn per_op_suite() -> Vec<(&'static str, f64)> {
    type Case = (&'static str, fn(u64) -> f64);
    let cases: &[Case] = &[
        ("matmul", |s| {
            let mut r = rng(s);
            let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            max_grad_error(&[randn(&mut r, &[m, k]), randn(&mut r, &[k, n])], |_, v| {
                v[0].matmul(&v[1])
            })
        }),
        ("add", |s| {
            let mut r = rng(s);
            let sh = [r.random_range(1..4), r.random_range(1..4)];
            max_grad_error(&[randn(&mut r, &sh), randn(&mut r, &sh)], |_, v| v[0].add(&v[1]))
        }),
        ("sub", |s| {
            let mut r = rng(s);
            let sh = [r.random_range(1..4), r.random_range(1..4)];
            max_grad_error(&[randn(&mut r, &sh), randn(&mut r, &sh)], |_, v| v[0].sub(&v[1]))
        }),
        ("mul", |s| {
            let mut r = rng(s);
            let sh = [r.random_range(1..4), r.random_range(1..4)];
            max_grad_error(&[randn(&mut r, &sh), randn(&mut r, &sh)], |_, v| v[0].mul(&v[1]))
        }),
        ("scale", |s| {
            let mut r = rng(s);
            let c: f64 = r.random_range(-3.0..3.0);
            max_grad_error(&[randn(&mut r, &[3, 2])], move |_, v| Ok(v[0].scale(c)))
        }),
        ("add_row", |s| {
            let mut r = rng(s);
            let (m, n) = (r.random_range(1..4), r.random_range(1..4));
            max_grad_error(&[randn(&mut r, &[m, n]), randn(&mut r, &[n])], |_, v| {
                v[0].add_row(&v[1])
            })
        }),
        ("tanh", |s| {
            let mut r = rng(s);
            max_grad_error(&[randn(&mut r, &[2, 3])], |_, v| Ok(v[0].tanh()))
        }),
        ("softmax", |s| {
            let mut r = rng(s);
            let n = r.random_range(2..6);
            let tau: f64 = r.random_range(0.2..2.0);
            let shape: Vec<usize> = if r.random_bool(0.5) { vec![n] } else { vec![2, n] };
            max_grad_error(&[randn(&mut r, &shape)], move |_, v| v[0].softmax(tau))
        }),
        ("l2_normalize", |s| {
            let mut r = rng(s);
            let shape: Vec<usize> = if r.random_bool(0.5) { vec![4] } else { vec![3, 4] };
            max_grad_error(&[randn(&mut r, &shape)], |_, v| v[0].l2_normalize())
        }),
        ("layer_norm", |s| {
            let mut r = rng(s);
            let n = r.random_range(2..7);
            max_grad_error(&[randn(&mut r, &[2, n])], |_, v| Ok(v[0].layer_norm(1e-5)))
        }),
        ("concat", |s| {
            let mut r = rng(s);
            let axis = r.random_range(0..2);
            let (a, b) = if axis == 0 { ([2, 3], [1, 3]) } else { ([2, 3], [2, 1]) };
            max_grad_error(&[randn(&mut r, &a), randn(&mut r, &b)], move |_, v| {
                Var::concat(&[v[0], v[1]], axis)
            })
        }),
        ("mean", |s| {
            let mut r = rng(s);
            let axis = r.random_range(0..2);
            max_grad_error(&[randn(&mut r, &[3, 4])], move |_, v| v[0].mean(axis))
        }),
        ("sum", |s| {
            let mut r = rng(s);
            max_grad_error(&[randn(&mut r, &[3, 2])], |_, v| Ok(v[0].sum()))
        }),
        ("transpose", |s| {
            let mut r = rng(s);
            max_grad_error(&[randn(&mut r, &[2, 5])], |_, v| v[0].transpose())
        }),
        ("gather_row", |s| {
            let mut r = rng(s);
            let row = r.random_range(0..4);
            max_grad_error(&[randn(&mut r, &[4, 3])], move |_, v| v[0].gather_row(row))
        }),
        ("gather_rows", |s| {
            let mut r = rng(s);
            let rows: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
            max_grad_error(&[randn(&mut r, &[4, 2])], move |_, v| v[0].gather_rows(&rows))
        }),
        ("gather", |s| {
            let mut r = rng(s);
            let idx: Vec<usize> = (0..5).map(|_| r.random_range(0..6)).collect();
            max_grad_error(&[randn(&mut r, &[2, 3])], move |_, v| v[0].gather(&idx))
        }),
        ("reshape", |s| {
            let mut r = rng(s);
            max_grad_error(&[randn(&mut r, &[2, 3])], |_, v| v[0].reshape(&[3, 2]))
        }),
        ("slice_cols", |s| {
            let mut r = rng(s);
            let start = r.random_range(0..3);
            max_grad_error(&[randn(&mut r, &[2, 5])], move |_, v| v[0].slice_cols(start, 2))
        }),
        ("cosine", |s| {
            let mut r = rng(s);
            max_grad_error(&[randn(&mut r, &[4]), randn(&mut r, &[4])], |_, v| v[0].cosine(&v[1]))
        }),
        ("cosine_rows", |s| {
            let mut r = rng(s);
            max_grad_error(&[randn(&mut r, &[3, 4]), randn(&mut r, &[2, 4])], |_, v| {
                v[0].cosine_rows(&v[1])
            })
        }),
        ("cross_entropy", |s| {
            let mut r = rng(s);
            let (b, k) = (r.random_range(1..4), r.random_range(2..5));
            let targets: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
            let tau: f64 = r.random_range(0.07..2.0);
            max_grad_error(&[randn(&mut r, &[b, k])], move |_, v| {
                v[0].cross_entropy(&targets, tau)
            })
        }),
    ];
    cases
        .iter()
        .map(|(name, f)| {
            let worst = (0..INSTANCES as u64).map(f).fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}

/// Worst end-to-end error over `INSTANCES` seeded tiny worlds, half in pixel mode.
pub fn end_to_end_suite() -> f64 {
    (0..INSTANCES as u64)
        .map(|seed| {
            let world = TinyWorld::new(seed, seed % 2 == 1);
            max_grad_error(&world.params, |tape, p| world.loss(tape, p))
        })
        .fold(0.0, f64::max)
}
