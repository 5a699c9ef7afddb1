mod common;

use common::*;
use vtd_core::encoders::{encode_frame, encode_label, tokenize, FrameInput, FrozenEncoderWeights};
use vtd_core::fusion::{confidence_fuse, cross_attend, CrossAttentionVars};

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, worst) in per_op_suite() {
        assert!(worst < PER_OP_TOL, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn cross_attention_projections() {
    for seed in 0..INSTANCES as u64 {
        let mut r = rng(seed);
        let (t, d) = (3, 4);
        let inputs = [
            randn(&mut r, &[d]),
            randn(&mut r, &[t, d]),
            randn(&mut r, &[d, d]),
            randn(&mut r, &[d, d]),
            randn(&mut r, &[d, d]),
            randn(&mut r, &[d, d]),
        ];
        let worst = max_grad_error(&inputs, |_, v| {
            let p = CrossAttentionVars {
                wq: v[2],
                wk: v[3],
                wv: v[4],
                wo: v[5],
            };
            cross_attend(v[0], v[1], &p)
        });
        assert!(worst < PER_OP_TOL, "seed {seed}: {worst:e}");
    }
}

#[test]
fn confidence_fusion_with_and_without_top_k() {
    for seed in 0..INSTANCES as u64 {
        let mut r = rng(seed);
        let inputs = [randn(&mut r, &[4, 3]), randn(&mut r, &[4])];
        let top_k = if seed % 2 == 0 { None } else { Some(2) };
        let worst = max_grad_error(&inputs, move |_, v| {
            Ok(confidence_fuse(v[0], v[1], 0.5, top_k)?.v_hat)
        });
        assert!(worst < PER_OP_TOL, "seed {seed}: {worst:e}");
    }
}

#[test]
fn encoders_wrt_prompts() {
    let cfg = tiny_encoder_config();
    for seed in 0..20u64 {
        let w = FrozenEncoderWeights::init(cfg.clone(), seed).unwrap();
        let mut r = rng(seed);
        let px = FrameInput::Pixels(randn(&mut r, &[cfg.pixel_len()]).into_data());
        let vis = randn(&mut r, &[cfg.visual_prompts, cfg.width]);
        let worst = max_grad_error(&[vis], |tape, v| encode_frame(tape, &px, v[0], &w));
        assert!(worst < PER_OP_TOL, "image seed {seed}: {worst:e}");

        let label = tokenize("pick up").unwrap();
        let txt = randn(&mut r, &[cfg.text_prompts, cfg.width]);
        let worst = max_grad_error(&[txt], |tape, v| encode_label(tape, &label, v[0], &w));
        assert!(worst < PER_OP_TOL, "text seed {seed}: {worst:e}");
    }
}

#[test]
fn full_objective_wrt_all_trainable_tensors() {
    let worst = end_to_end_suite();
    assert!(worst < END_TO_END_TOL, "end-to-end worst {worst:e}");
}
