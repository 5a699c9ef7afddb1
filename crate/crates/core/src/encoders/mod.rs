//! Frozen toy transformer encoders standing in for a pretrained image/text pair.
//!
//! Only the prompt tokens are trainable. The image tower prepends visual prompt
//! tokens to the patch embeddings and mean-pools its outputs; the text tower
//! prepends a frozen CLS slot and the text prompt tokens to the label tokens and
//! reads out the CLS position. Both towers end in a projection to the shared
//! dimension followed by L2 normalization.

mod tokenizer;
mod transformer;

pub use tokenizer::{tokenize, LabelTokenSequence, PAD_ID, VOCAB_SIZE};
pub use transformer::Block;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture of both towers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub out_dim: usize,
    pub image_size: usize,
    pub patch: usize,
    pub visual_prompts: usize,
    pub text_prompts: usize,
    pub label_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 2,
            blocks: 2,
            mlp_hidden: 64,
            out_dim: 32,
            image_size: 16,
            patch: 4,
            visual_prompts: 16,
            text_prompts: 16,
            label_len: tokenizer::LABEL_LEN,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("mlp_hidden", self.mlp_hidden),
            ("out_dim", self.out_dim),
            ("image_size", self.image_size),
            ("patch", self.patch),
            ("visual_prompts", self.visual_prompts),
            ("text_prompts", self.text_prompts),
            ("label_len", self.label_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("encoder `{name}` must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::validation(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::validation(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Flattened `h·w·3` pixel count of one frame.
    pub fn pixel_len(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    /// CLS + text prompts + label tokens.
    pub fn text_seq_len(&self) -> usize {
        1 + self.text_prompts + self.label_len
    }
}

/// One tower's frozen parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Tower {
    /// Patch or token embedding matrix.
    pub embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub proj: Tensor,
}

impl Tower {
    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.embed"), self.embed.clone()));
        out.push((format!("{prefix}.pos"), self.pos.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("{prefix}.block{i}"), out);
        }
        out.push((format!("{prefix}.proj"), self.proj.clone()));
    }

    fn from_named(
        prefix: &str,
        cfg: &EncoderConfig,
        take: &mut dyn FnMut(&str) -> Result<Tensor>,
    ) -> Result<Self> {
        let embed = take(&format!("{prefix}.embed"))?;
        let pos = take(&format!("{prefix}.pos"))?;
        let blocks = (0..cfg.blocks)
            .map(|i| Block::from_named(&format!("{prefix}.block{i}"), take))
            .collect::<Result<_>>()?;
        let proj = take(&format!("{prefix}.proj"))?;
        Ok(Self {
            embed,
            pos,
            blocks,
            proj,
        })
    }

    /// Run the blocks and final layer norm over `[seq × width]` input.
    fn trunk<'t>(&self, x: Var<'t>, heads: usize) -> Result<Var<'t>> {
        let tape = x.tape();
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(tape, h, heads)?;
        }
        Ok(h.layer_norm(transformer::LN_EPS))
    }
}

/// Frozen weights of both towers; never touched by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoderWeights {
    pub config: EncoderConfig,
    pub seed: u64,
    pub image: Tower,
    pub text: Tower,
    /// Learned-but-frozen CLS embedding at text position 0.
    pub cls: Tensor,
}

impl FrozenEncoderWeights {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let image = Tower {
            embed: Tensor::randn(&mut rng, &[config.patch_dim(), w], (config.patch_dim() as f64).powf(-0.5)),
            pos: Tensor::randn(&mut rng, &[config.num_patches(), w], 0.1),
            blocks: (0..config.blocks)
                .map(|_| Block::init(&mut rng, w, config.mlp_hidden))
                .collect(),
            proj: Tensor::randn(&mut rng, &[w, config.out_dim], (w as f64).powf(-0.5)),
        };
        let text = Tower {
            embed: Tensor::randn(&mut rng, &[VOCAB_SIZE, w], 1.0),
            pos: Tensor::randn(&mut rng, &[config.text_seq_len(), w], 0.1),
            blocks: (0..config.blocks)
                .map(|_| Block::init(&mut rng, w, config.mlp_hidden))
                .collect(),
            proj: Tensor::randn(&mut rng, &[w, config.out_dim], (w as f64).powf(-0.5)),
        };
        let cls = Tensor::randn(&mut rng, &[1, w], 1.0);
        Ok(Self {
            config,
            seed,
            image,
            text,
            cls,
        })
    }

    /// All tensors in a fixed order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.image.named("image", &mut out);
        self.text.named("text", &mut out);
        out.push(("text.cls".into(), self.cls.clone()));
        out
    }

    pub fn from_named_tensors(
        config: EncoderConfig,
        seed: u64,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        let mut map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name).ok_or_else(|| Error::Format {
                kind: "checkpoint",
                msg: format!("missing frozen tensor `{name}`"),
            })
        };
        let image = Tower::from_named("image", &config, &mut take)?;
        let text = Tower::from_named("text", &config, &mut take)?;
        let cls = take("text.cls")?;
        let weights = Self {
            config,
            seed,
            image,
            text,
            cls,
        };
        weights.check_shapes()?;
        Ok(weights)
    }

    fn check_shapes(&self) -> Result<()> {
        let reference = Self::init(self.config.clone(), 0)?;
        for ((name, a), (_, b)) in self.named_tensors().iter().zip(reference.named_tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Format {
                    kind: "checkpoint",
                    msg: format!("tensor `{name}` has shape {:?}, expected {:?}", a.shape(), b.shape()),
                });
            }
        }
        Ok(())
    }
}

/// `m` learnable tokens prepended to the patch sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPromptTokens(pub Tensor);

/// `n` learnable tokens prepended to the label tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPromptTokens(pub Tensor);

impl VisualPromptTokens {
    /// Standard-normal initialization, same as the text prompts.
    pub fn init(config: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self(Tensor::randn(&mut rng, &[config.visual_prompts, config.width], 1.0))
    }
}

impl TextPromptTokens {
    pub fn init(config: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self(Tensor::randn(&mut rng, &[config.text_prompts, config.width], 1.0))
    }
}

/// A frame as the encoder sees it.
#[derive(Clone, Debug, PartialEq)]
pub enum FrameInput {
    /// Flattened `h·w·3` pixels in row-major `(y, x, channel)` order.
    Pixels(Vec<f64>),
    /// A precomputed embedding of dimension `d`; only normalized.
    Embedding(Vec<f64>),
}

/// Encode one frame into a unit vector of dimension `out_dim`.
///
/// `prompts` must be a `[m × width]` variable on the same tape; it is ignored
/// in embedding mode.
pub fn encode_frame<'t>(
    tape: &'t Tape,
    frame: &FrameInput,
    prompts: Var<'t>,
    weights: &FrozenEncoderWeights,
) -> Result<Var<'t>> {
    let cfg = &weights.config;
    match frame {
        FrameInput::Embedding(e) => {
            if e.len() != cfg.out_dim {
                return Err(Error::dim("encode_frame", &[e.len()], &[cfg.out_dim]));
            }
            tape.constant(Tensor::vector(e.clone())).l2_normalize()
        }
        FrameInput::Pixels(px) => {
            if px.len() != cfg.pixel_len() {
                return Err(Error::dim(
                    "encode_frame",
                    &[px.len()],
                    &[cfg.image_size, cfg.image_size, 3],
                ));
            }
            check_prompts("visual prompts", &prompts, cfg.visual_prompts, cfg.width)?;
            let patches = tape.constant(patchify(px, cfg));
            let embed = tape.constant(weights.image.embed.clone());
            let pos = tape.constant(weights.image.pos.clone());
            let e = patches.matmul(&embed)?.add(&pos)?;
            let seq = Var::concat(&[prompts, e], 0)?;
            let h = weights.image.trunk(seq, cfg.heads)?;
            let pooled = h.mean(0)?.reshape(&[1, cfg.width])?;
            let proj = tape.constant(weights.image.proj.clone());
            pooled.matmul(&proj)?.l2_normalize()?.reshape(&[cfg.out_dim])
        }
    }
}

/// Encode a label token sequence into a unit vector of dimension `out_dim`.
pub fn encode_label<'t>(
    tape: &'t Tape,
    label: &LabelTokenSequence,
    prompts: Var<'t>,
    weights: &FrozenEncoderWeights,
) -> Result<Var<'t>> {
    let cfg = &weights.config;
    check_prompts("text prompts", &prompts, cfg.text_prompts, cfg.width)?;
    if label.ids().len() != cfg.label_len {
        return Err(Error::dim("encode_label", &[label.ids().len()], &[cfg.label_len]));
    }
    let mut rows = Vec::with_capacity(cfg.label_len * cfg.width);
    for &id in label.ids() {
        let id = id as usize;
        if id >= weights.text.embed.rows() {
            return Err(Error::Index {
                index: id,
                len: weights.text.embed.rows(),
                context: "token id",
            });
        }
        rows.extend_from_slice(weights.text.embed.row(id));
    }
    let tokens = tape.constant(Tensor::matrix(cfg.label_len, cfg.width, rows)?);
    let cls = tape.constant(weights.cls.clone());
    let seq = Var::concat(&[cls, prompts, tokens], 0)?;
    let pos = tape.constant(weights.text.pos.clone());
    let h = weights.text.trunk(seq.add(&pos)?, cfg.heads)?;
    let proj = tape.constant(weights.text.proj.clone());
    h.gather_rows(&[0])?
        .matmul(&proj)?
        .l2_normalize()?
        .reshape(&[cfg.out_dim])
}

fn check_prompts(op: &'static str, p: &Var<'_>, count: usize, width: usize) -> Result<()> {
    let shape = p.shape();
    if shape != [count, width] {
        return Err(Error::dim(op, &shape, &[count, width]));
    }
    Ok(())
}

/// Split `h·w·3` pixels into `(h/p)·(w/p)` rows of `p·p·3` values.
fn patchify(px: &[f64], cfg: &EncoderConfig) -> Tensor {
    let (s, p) = (cfg.image_size, cfg.patch);
    let side = s / p;
    let mut data = Vec::with_capacity(px.len());
    for py in 0..side {
        for pxi in 0..side {
            for dy in 0..p {
                for dx in 0..p {
                    let (y, x) = (py * p + dy, pxi * p + dx);
                    let base = (y * s + x) * 3;
                    data.extend_from_slice(&px[base..base + 3]);
                }
            }
        }
    }
    Tensor::matrix(side * side, p * p * 3, data).expect("patch layout is consistent")
}
