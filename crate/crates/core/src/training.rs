//! Prompt and fusion-parameter training against the contrastive objective.
//!
//! Each step records one tape: the codebook is rebuilt from the current text
//! prompts, every video in the batch is encoded, discretized and fused, and the
//! batch of video embeddings is scored against all `K` codebook rows. The
//! frozen encoder only ever enters the tape as constants.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, FROZEN_SECTION, OPTIMIZER_SECTION, TRAINABLE_SECTION};
use crate::codebook::{build_codebook, build_codebook_on, discretize_affinity, Codebook};
use crate::codebook::{DiscretizationResult, VoteRule};
use crate::dataset::{derive_seed, few_shot_subset, sample_frames, Dataset, FrameMode};
use crate::dataset::{SampleMode, VideoSample};
use crate::encoders::{encode_frame, FrameInput, FrozenEncoderWeights};
use crate::encoders::{TextPromptTokens, VisualPromptTokens};
use crate::error::{Error, Result};
use crate::fusion::{aggregate, Aggregation, CrossAttentionParams, CrossAttentionVars};
use crate::fusion::{FusionMode, FusionSettings};
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// When the codebook used for discretization and scoring is recomputed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CodebookRefresh {
    /// Rebuilt on the tape every step; text prompts receive gradients.
    #[default]
    Step,
    /// Snapshot at the start of each epoch and held constant, so the text
    /// prompts stay fixed.
    Epoch,
}

impl std::str::FromStr for CodebookRefresh {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Self::Step),
            "epoch" => Ok(Self::Epoch),
            other => Err(Error::validation(format!("unknown codebook refresh `{other}`"))),
        }
    }
}

impl std::fmt::Display for CodebookRefresh {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Step => "step",
            Self::Epoch => "epoch",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub tau_loss: f64,
    pub tau_fuse: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Frames sampled per video (one per segment).
    pub segments: usize,
    pub top_k: Option<usize>,
    pub aggregation: Aggregation,
    pub fusion: FusionMode,
    pub vote: VoteRule,
    pub shots: Option<usize>,
    pub refresh: CodebookRefresh,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            weight_decay: 1e-3,
            tau_loss: 0.07,
            tau_fuse: 0.1,
            batch_size: 8,
            epochs: 200,
            seed: 7,
            segments: 8,
            top_k: None,
            aggregation: Aggregation::Fused,
            fusion: FusionMode::Confidence,
            vote: VoteRule::Summed,
            shots: None,
            refresh: CodebookRefresh::Step,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation("weight decay must be ≥ 0"));
        }
        for (name, tau) in [("tau_loss", self.tau_loss), ("tau_fuse", self.tau_fuse)] {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Domain(format!("{name} must be > 0, got {tau}")));
            }
        }
        if self.batch_size == 0 || self.segments == 0 {
            return Err(Error::validation("batch size and segments must be ≥ 1"));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > self.segments {
                return Err(Error::validation(format!(
                    "top_k {k} must lie in 1..={}",
                    self.segments
                )));
            }
        }
        if self.shots == Some(0) {
            return Err(Error::validation("shots must be ≥ 1"));
        }
        Ok(())
    }

    pub fn fusion_settings(&self) -> FusionSettings {
        FusionSettings {
            aggregation: self.aggregation,
            fusion: self.fusion,
            tau_fuse: self.tau_fuse,
            top_k: self.top_k,
        }
    }
}

/// Names of the trainable tensors, in registry order.
pub const PARAM_NAMES: [&str; 6] = [
    "visual_prompts",
    "text_prompts",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainableParams {
    pub visual: VisualPromptTokens,
    pub text: TextPromptTokens,
    pub attn: CrossAttentionParams,
}

impl TrainableParams {
    pub fn init(encoder: &FrozenEncoderWeights, seed: u64) -> Self {
        let cfg = &encoder.config;
        Self {
            visual: VisualPromptTokens::init(cfg, derive_seed(seed, 1)),
            text: TextPromptTokens::init(cfg, derive_seed(seed, 2)),
            attn: CrossAttentionParams::init(cfg.out_dim, derive_seed(seed, 3)),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.visual.0,
            &self.text.0,
            &self.attn.wq,
            &self.attn.wk,
            &self.attn.wv,
            &self.attn.wo,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.visual.0,
            &mut self.text.0,
            &mut self.attn.wq,
            &mut self.attn.wk,
            &mut self.attn.wv,
            &mut self.attn.wo,
        ]
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        PARAM_NAMES
            .iter()
            .zip(self.tensors())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Rebuild from named tensors, checking names and shapes against `like`.
    pub fn from_named_tensors(like: &TrainableParams, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut out = like.clone();
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::Format {
                kind: "checkpoint",
                msg: format!("expected {} trainable tensors, found {}", PARAM_NAMES.len(), tensors.len()),
            });
        }
        for ((slot, name), (got_name, t)) in out.tensors_mut().into_iter().zip(PARAM_NAMES).zip(tensors) {
            if got_name != name {
                return Err(Error::Format {
                    kind: "checkpoint",
                    msg: format!("expected trainable tensor `{name}`, found `{got_name}`"),
                });
            }
            if t.shape() != slot.shape() {
                return Err(Error::dim("trainable tensor", t.shape(), slot.shape()));
            }
            *slot = t.clone();
        }
        Ok(out)
    }

    pub fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> ParamVars<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ParamVars {
            visual: leaf(&self.visual.0),
            text: leaf(&self.text.0),
            attn: self.attn.on_tape(tape, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ParamVars<'t> {
    pub visual: Var<'t>,
    pub text: Var<'t>,
    pub attn: CrossAttentionVars<'t>,
}

impl<'t> ParamVars<'t> {
    pub fn all(&self) -> [Var<'t>; 6] {
        [
            self.visual,
            self.text,
            self.attn.wq,
            self.attn.wk,
            self.attn.wv,
            self.attn.wo,
        ]
    }

    /// Gradients in registry order; `None` where a parameter was unused.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.all().iter().map(|v| grads.get(*v).cloned()).collect()
    }
}

/// Adam moment buffers, one pair per registered parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    /// One AdamW update with decoupled weight decay.
    ///
    /// Parameters whose gradient is `None` are left untouched, as are their
    /// moments. A non-finite gradient aborts before anything is modified.
    pub fn update(
        &mut self,
        names: &[&str],
        params: &mut [&mut Tensor],
        grads: &[Option<Tensor>],
        learning_rate: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (name, g) in names.iter().zip(grads) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::Divergence {
                        param: name.to_string(),
                        what: "non-finite gradient",
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.shape() != p.shape() {
                return Err(Error::dim("adam", g.shape(), p.shape()));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (pj, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *pj -= learning_rate * weight_decay * *pj;
                *pj -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub encoder: FrozenEncoderWeights,
    pub params: TrainableParams,
    pub optimizer: AdamState,
    /// Completed epochs; with the config seed this fixes the shuffle RNG.
    pub epoch: u64,
}

impl TrainState {
    pub fn init(encoder: FrozenEncoderWeights, seed: u64) -> Self {
        let params = TrainableParams::init(&encoder, seed);
        let optimizer = AdamState::zeros_like(&params.tensors());
        Self {
            encoder,
            params,
            optimizer,
            epoch: 0,
        }
    }

    pub fn adam_step(&mut self, grads: &[Option<Tensor>], config: &TrainConfig) -> Result<()> {
        let mut params = self.params.tensors_mut();
        self.optimizer.update(
            &PARAM_NAMES,
            &mut params,
            grads,
            config.learning_rate,
            config.weight_decay,
        )
    }

    /// Gradient-free codebook from the current text prompts.
    pub fn codebook(
        &self,
        labels: &[String],
        overrides: Option<&BTreeMap<String, String>>,
    ) -> Result<Codebook> {
        build_codebook(labels, &self.params.text, &self.encoder, overrides)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut opt = Vec::new();
        for ((name, m), v) in PARAM_NAMES.iter().zip(&self.optimizer.m).zip(&self.optimizer.v) {
            opt.push((format!("adam.m.{name}"), m.clone()));
            opt.push((format!("adam.v.{name}"), v.clone()));
        }
        opt.push(("adam.step".into(), Tensor::scalar(self.optimizer.step as f64)));
        opt.push(("epoch".into(), Tensor::scalar(self.epoch as f64)));
        Checkpoint::new(self.encoder.config.clone(), self.encoder.seed)
            .with_section(FROZEN_SECTION, self.encoder.named_tensors())
            .with_section(TRAINABLE_SECTION, self.params.named_tensors())
            .with_section(OPTIMIZER_SECTION, opt)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let encoder = ck.frozen_weights()?;
        let like = TrainableParams::init(&encoder, 0);
        let trainable = ck.section(TRAINABLE_SECTION).ok_or_else(|| Error::Format {
            kind: "checkpoint",
            msg: "missing trainable section".into(),
        })?;
        let params = TrainableParams::from_named_tensors(&like, &trainable.tensors)?;
        let mut optimizer = AdamState::zeros_like(&params.tensors());
        let mut epoch = 0;
        if let Some(opt) = ck.section(OPTIMIZER_SECTION) {
            let lookup = |name: &str| -> Result<&Tensor> {
                opt.tensors
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| t)
                    .ok_or_else(|| Error::Format {
                        kind: "checkpoint",
                        msg: format!("optimizer section lacks `{name}`"),
                    })
            };
            for (i, name) in PARAM_NAMES.iter().enumerate() {
                let m = lookup(&format!("adam.m.{name}"))?;
                let v = lookup(&format!("adam.v.{name}"))?;
                if m.shape() != optimizer.m[i].shape() || v.shape() != optimizer.v[i].shape() {
                    return Err(Error::dim("adam moments", m.shape(), optimizer.m[i].shape()));
                }
                optimizer.m[i] = m.clone();
                optimizer.v[i] = v.clone();
            }
            optimizer.step = lookup("adam.step")?.data()[0] as u64;
            epoch = lookup("epoch")?.data()[0] as u64;
        }
        Ok(Self {
            encoder,
            params,
            optimizer,
            epoch,
        })
    }
}

/// Codebook value plus its `[K × d]` variable on the current tape.
pub struct CodebookOnTape<'t> {
    pub codebook: Codebook,
    pub matrix: Var<'t>,
}

impl<'t> CodebookOnTape<'t> {
    /// Rebuild from the text-prompt variable so gradients reach the prompts.
    pub fn build(
        tape: &'t Tape,
        labels: &[String],
        text_prompts: Var<'t>,
        encoder: &FrozenEncoderWeights,
        overrides: Option<&BTreeMap<String, String>>,
    ) -> Result<Self> {
        let (codebook, matrix) = build_codebook_on(tape, labels, text_prompts, encoder, overrides)?;
        Ok(Self { codebook, matrix })
    }

    /// A fixed codebook entered as a constant.
    pub fn constant(tape: &'t Tape, codebook: &Codebook) -> Self {
        Self {
            matrix: tape.constant(codebook.prototypes().clone()),
            codebook: codebook.clone(),
        }
    }
}

/// Per-video forward output.
pub struct VideoForward<'t> {
    pub v_hat: Var<'t>,
    pub discretization: DiscretizationResult,
    /// Pooling weight per frame.
    pub weights: Vec<f64>,
}

/// Frames of `video` at `indices`, in the form the encoder expects.
pub fn frame_inputs(video: &VideoSample, indices: &[usize]) -> Result<Vec<FrameInput>> {
    indices
        .iter()
        .map(|&i| {
            let f = video.frames.get(i).ok_or(Error::Index {
                index: i,
                len: video.frames.len(),
                context: "frame index",
            })?;
            Ok(match video.mode {
                FrameMode::Embed => FrameInput::Embedding(f.clone()),
                FrameMode::Pixel => FrameInput::Pixels(f.clone()),
            })
        })
        .collect()
}

/// Encode → discretize → cross-attend → fuse for one video.
///
/// Selection indices (assignments and `k_max`) are taken from tape values and
/// treated as constants; gradients flow through the selected codebook row,
/// the confidences and the frame features.
pub fn forward_video<'t>(
    tape: &'t Tape,
    frames: &[FrameInput],
    vars: &ParamVars<'t>,
    encoder: &FrozenEncoderWeights,
    codebook: &CodebookOnTape<'t>,
    settings: &FusionSettings,
    vote: VoteRule,
) -> Result<VideoForward<'t>> {
    if frames.is_empty() {
        return Err(Error::Degenerate("a video needs at least one frame".into()));
    }
    let d = encoder.config.out_dim;
    let mut rows = Vec::with_capacity(frames.len());
    for f in frames {
        rows.push(encode_frame(tape, f, vars.visual, encoder)?.reshape(&[1, d])?);
    }
    let x = Var::concat(&rows, 0)?;
    let s = x.cosine_rows(&codebook.matrix)?;
    let discretization = discretize_affinity((*s.value()).clone(), &codebook.codebook, vote)?;
    let k = codebook.codebook.len();
    let k_max = discretization.k_max;
    let v = codebook.matrix.gather_row(k_max)?;
    let col: Vec<usize> = (0..frames.len()).map(|t| t * k + k_max).collect();
    let confidence = s.gather(&col)?;
    let (v_hat, weights) = aggregate(settings, x, v, confidence, &vars.attn)?;
    Ok(VideoForward {
        v_hat,
        discretization,
        weights,
    })
}

/// Mean contrastive cross-entropy of `cos(v̂_i, c_j)` over all `K` classes.
///
/// Returns the scalar loss and the `[B × K]` similarity variable.
pub fn compute_loss<'t>(
    embeddings: &[Var<'t>],
    codebook: Var<'t>,
    targets: &[usize],
    tau_loss: f64,
) -> Result<(Var<'t>, Var<'t>)> {
    if embeddings.len() != targets.len() || embeddings.is_empty() {
        return Err(Error::dim("compute_loss", &[embeddings.len()], &[targets.len()]));
    }
    let rows = embeddings
        .iter()
        .map(|e| {
            let n = e.value().len();
            e.reshape(&[1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    let sim = Var::concat(&rows, 0)?.cosine_rows(&codebook)?;
    let loss = sim.cross_entropy(targets, tau_loss)?;
    Ok((loss, sim))
}

/// Value-level video embedding under deterministic eval-mode sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoEmbedding {
    pub v_hat: Tensor,
    pub discretization: DiscretizationResult,
    pub weights: Vec<f64>,
    pub frame_indices: Vec<usize>,
}

pub fn embed_video(
    state: &TrainState,
    video: &VideoSample,
    codebook: &Codebook,
    settings: &FusionSettings,
    vote: VoteRule,
    segments: usize,
) -> Result<VideoEmbedding> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let frame_indices = sample_frames(video.pool_size(), segments, SampleMode::Eval, &mut unused)?;
    let frames = frame_inputs(video, &frame_indices)?;
    let tape = Tape::new();
    let vars = state.params.on_tape(&tape, false);
    let cb = CodebookOnTape::constant(&tape, codebook);
    let out = forward_video(&tape, &frames, &vars, &state.encoder, &cb, settings, vote)?;
    let v_hat = (*out.v_hat.value()).clone();
    Ok(VideoEmbedding {
        v_hat,
        discretization: out.discretization,
        weights: out.weights,
        frame_indices,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    /// Percentage of training videos whose highest-similarity class was correct.
    pub train_top1: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss,train_top1";

impl EpochMetrics {
    /// Shortest round-trip float formatting, so identical runs give identical bytes.
    pub fn csv_line(&self) -> String {
        format!("{},{},{}", self.epoch, self.loss, self.train_top1)
    }
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}

/// Train for `config.epochs` further epochs.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    state: TrainState,
) -> Result<(TrainState, Vec<EpochMetrics>)> {
    let mut history = Vec::new();
    let state = train_with(dataset, config, state, |m| history.push(*m))?;
    Ok((state, history))
}

/// As [`train`], reporting each finished epoch to `on_epoch` as it completes,
/// so metrics survive a later divergence.
pub fn train_with(
    dataset: &Dataset,
    config: &TrainConfig,
    mut state: TrainState,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainState> {
    config.validate()?;
    dataset.validate()?;
    if dataset.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if let Some(k) = dataset.class_counts().iter().position(|&c| c == 0) {
        return Err(Error::validation(format!(
            "class `{}` has no training videos",
            dataset.labels[k]
        )));
    }
    let subset;
    let data = match config.shots {
        Some(shots) => {
            subset = few_shot_subset(dataset, shots, config.seed)?;
            &subset
        }
        None => dataset,
    };
    let overrides = (!data.descriptions.is_empty()).then_some(&data.descriptions);
    let settings = config.fusion_settings();

    for _ in 0..config.epochs {
        let epoch = state.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let snapshot = match config.refresh {
            CodebookRefresh::Epoch => Some(state.codebook(&data.labels, overrides)?),
            CodebookRefresh::Step => None,
        };

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let vars = state.params.on_tape(&tape, true);
            let cb = match &snapshot {
                Some(c) => CodebookOnTape::constant(&tape, c),
                None => CodebookOnTape::build(&tape, &data.labels, vars.text, &state.encoder, overrides)?,
            };
            let mut embeddings = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let video = &data.videos[i];
                let idx = sample_frames(video.pool_size(), config.segments, SampleMode::Train, &mut rng)?;
                let frames = frame_inputs(video, &idx)?;
                let out = forward_video(&tape, &frames, &vars, &state.encoder, &cb, &settings, config.vote)?;
                embeddings.push(out.v_hat);
                targets.push(video.class);
            }
            let (loss, sim) = compute_loss(&embeddings, cb.matrix, &targets, config.tau_loss)?;
            let loss_value = loss.value().data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    param: format!("loss at epoch {}", epoch + 1),
                    what: "non-finite loss",
                });
            }
            let sim = sim.value();
            correct += targets
                .iter()
                .enumerate()
                .filter(|(b, &t)| argmax_row(sim.row(*b)) == t)
                .count();
            loss_sum += loss_value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            state.adam_step(&vars.gradients(&grads), config)?;
        }
        state.epoch += 1;
        on_epoch(&EpochMetrics {
            epoch: state.epoch as usize,
            loss: loss_sum / data.len() as f64,
            train_top1: 100.0 * correct as f64 / data.len() as f64,
        });
    }
    Ok(state)
}
