//! Confidence-aware fusion of the discrete video feature with frame features.
//!
//! Frames act as queries against the single discrete feature `v`, so each fused
//! frame is `f_t = W_o·W_v·v + x_t`. The fused frames are then averaged with
//! weights `softmax(S[t, k_max] / τ)`, optionally restricted to the top-k most
//! confident frames.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Single-head cross-attention projections, all `d × d`, applied to row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl CrossAttentionParams {
    /// Gaussian `N(0, 1/d)` projections with a zero output projection, so the
    /// module starts as the identity `f = x`.
    pub fn init(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (d as f64).powf(-0.5);
        Self {
            wq: Tensor::randn(&mut rng, &[d, d], s),
            wk: Tensor::randn(&mut rng, &[d, d], s),
            wv: Tensor::randn(&mut rng, &[d, d], s),
            wo: Tensor::zeros(&[d, d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for t in [&self.wq, &self.wk, &self.wv, &self.wo] {
            if t.shape() != [d, d] {
                return Err(Error::dim("cross attention", t.shape(), &[d, d]));
            }
            if !t.is_finite() {
                return Err(Error::validation("non-finite cross-attention weight"));
            }
        }
        Ok(())
    }

    /// Record the projections on `tape`, as trainable leaves or as constants.
    pub fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> CrossAttentionVars<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        CrossAttentionVars {
            wq: leaf(&self.wq),
            wk: leaf(&self.wk),
            wv: leaf(&self.wv),
            wo: leaf(&self.wo),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionVars<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub wo: Var<'t>,
}

/// `f = CrossAttn(query = frames, key = value = v) + frames`, shape `T × d`.
pub fn cross_attend<'t>(
    v: Var<'t>,
    frames: Var<'t>,
    params: &CrossAttentionVars<'t>,
) -> Result<Var<'t>> {
    let fshape = frames.shape();
    let d = params.wq.value().rows();
    if fshape.len() != 2 || fshape[1] != d || v.shape() != [d] {
        return Err(Error::dim("cross_attend", &fshape, &v.shape()));
    }
    let v_row = v.reshape(&[1, d])?;
    let q = frames.matmul(&params.wq)?;
    let k = v_row.matmul(&params.wk)?;
    let val = v_row.matmul(&params.wv)?;
    // one key: softmax over a single column is identically 1
    let attn = q.matmul(&k.transpose()?)?.softmax(1.0)?;
    let out = attn.matmul(&val)?.matmul(&params.wo)?;
    out.add(&frames)
}

/// Indices (ascending) of the `top_k` most confident frames; ties keep the earlier frame.
pub fn top_k_frames(confidence: &[f64], top_k: Option<usize>) -> Result<Vec<usize>> {
    let t = confidence.len();
    let Some(k) = top_k else {
        return Ok((0..t).collect());
    };
    if k == 0 || k > t {
        return Err(Error::validation(format!("top_k {k} must lie in 1..={t}")));
    }
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Output of [`confidence_fuse`] on a tape.
#[derive(Debug)]
pub struct FusedOnTape<'t> {
    pub v_hat: Var<'t>,
    /// Per-frame weights, zero for frames outside the top-k.
    pub weights: Vec<f64>,
}

/// `v̂ = Σ_t softmax(confidence / τ)_t · f_t` over the retained frames.
pub fn confidence_fuse<'t>(
    f: Var<'t>,
    confidence: Var<'t>,
    tau_fuse: f64,
    top_k: Option<usize>,
) -> Result<FusedOnTape<'t>> {
    let fshape = f.shape();
    let cvals = confidence.value();
    if fshape.len() != 2 || cvals.rank() != 1 || cvals.len() != fshape[0] {
        return Err(Error::dim("confidence_fuse", &fshape, cvals.shape()));
    }
    if !(tau_fuse > 0.0) {
        return Err(Error::Domain(format!("fusion temperature must be > 0, got {tau_fuse}")));
    }
    let retained = top_k_frames(cvals.data(), top_k)?;
    let w = confidence.gather(&retained)?.softmax(tau_fuse)?;
    let r = retained.len();
    let d = fshape[1];
    let v_hat = w
        .reshape(&[1, r])?
        .matmul(&f.gather_rows(&retained)?)?
        .reshape(&[d])?;
    let mut weights = vec![0.0; fshape[0]];
    for (&i, &wi) in retained.iter().zip(w.value().data()) {
        weights[i] = wi;
    }
    Ok(FusedOnTape { v_hat, weights })
}

/// Arithmetic mean over frames.
pub fn average_pool<'t>(frames: Var<'t>) -> Result<Var<'t>> {
    if frames.shape().len() != 2 {
        return Err(Error::Degenerate("average pooling needs T ≥ 1 frames".into()));
    }
    frames.mean(0)
}

/// Which features feed the video embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Confidence-weighted raw frame features `x_t`.
    FrameOnly,
    /// The discrete feature `v` alone.
    DiscreteOnly,
    /// Confidence-weighted fused features `f_t`.
    #[default]
    Fused,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame_only" => Ok(Self::FrameOnly),
            "discrete_only" => Ok(Self::DiscreteOnly),
            "fused" => Ok(Self::Fused),
            other => Err(Error::validation(format!(
                "unknown aggregation `{other}` (frame_only | discrete_only | fused)"
            ))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FrameOnly => "frame_only",
            Self::DiscreteOnly => "discrete_only",
            Self::Fused => "fused",
        })
    }
}

/// How per-frame features are pooled into one vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Confidence,
    /// Plain average pooling; ignores confidences and top-k.
    Pool,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confidence" => Ok(Self::Confidence),
            "pool" => Ok(Self::Pool),
            other => Err(Error::validation(format!(
                "unknown fusion `{other}` (confidence | pool)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Confidence => "confidence",
            Self::Pool => "pool",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionSettings {
    pub aggregation: Aggregation,
    pub fusion: FusionMode,
    pub tau_fuse: f64,
    pub top_k: Option<usize>,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Fused,
            fusion: FusionMode::Confidence,
            tau_fuse: 0.1,
            top_k: None,
        }
    }
}

/// Video embedding under the selected aggregation and fusion.
///
/// Returns the `[d]` embedding and the per-frame pooling weights.
pub fn aggregate<'t>(
    settings: &FusionSettings,
    frames: Var<'t>,
    v: Var<'t>,
    confidence: Var<'t>,
    params: &CrossAttentionVars<'t>,
) -> Result<(Var<'t>, Vec<f64>)> {
    let t = frames.shape()[0];
    let pool = |feats: Var<'t>| -> Result<(Var<'t>, Vec<f64>)> {
        match settings.fusion {
            FusionMode::Pool => Ok((average_pool(feats)?, vec![1.0 / t as f64; t])),
            FusionMode::Confidence => {
                let fused = confidence_fuse(feats, confidence, settings.tau_fuse, settings.top_k)?;
                Ok((fused.v_hat, fused.weights))
            }
        }
    };
    match settings.aggregation {
        Aggregation::DiscreteOnly => {
            let weights = match settings.fusion {
                FusionMode::Pool => vec![1.0 / t as f64; t],
                FusionMode::Confidence => {
                    confidence_fuse(frames, confidence, settings.tau_fuse, settings.top_k)?.weights
                }
            };
            Ok((v, weights))
        }
        Aggregation::FrameOnly => pool(frames),
        Aggregation::Fused => pool(cross_attend(v, frames, params)?),
    }
}

/// Value-level fusion result.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedVideoEmbedding {
    pub v_hat: Tensor,
    pub weights: Vec<f64>,
    /// `T × d` fused per-frame features.
    pub fused: Tensor,
}

/// Gradient-free cross-attention followed by confidence fusion.
pub fn fuse_values(
    v: &[f64],
    frames: &Tensor,
    confidence: &[f64],
    params: &CrossAttentionParams,
    tau_fuse: f64,
    top_k: Option<usize>,
) -> Result<FusedVideoEmbedding> {
    let tape = Tape::new();
    let vars = params.on_tape(&tape, false);
    let f = cross_attend(
        tape.constant(Tensor::vector(v.to_vec())),
        tape.constant(frames.clone()),
        &vars,
    )?;
    let conf = tape.constant(Tensor::vector(confidence.to_vec()));
    let out = confidence_fuse(f, conf, tau_fuse, top_k)?;
    let v_hat = (*out.v_hat.value()).clone();
    let fused = (*f.value()).clone();
    Ok(FusedVideoEmbedding {
        v_hat,
        weights: out.weights,
        fused,
    })
}
