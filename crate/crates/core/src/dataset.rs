//! Synthetic videos and the sampling protocols used for training and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codebook::build_codebook;
use crate::encoders::{EncoderConfig, FrozenEncoderWeights, TextPromptTokens};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ACTION_NAMES: &[&str] = &[
    "run", "jump", "swim", "climb", "throw", "catch", "kick", "wave", "clap", "dance", "ride",
    "push", "pull", "sit down", "stand up", "walk", "punch", "hug", "drink", "eat", "smile",
    "laugh", "shoot ball", "golf swing", "pour", "brush hair", "cartwheel", "dive", "fencing",
    "handstand", "kiss", "pick up",
];

/// Deterministic, distinct label for class `k`.
pub fn synthetic_label(k: usize) -> String {
    match ACTION_NAMES.get(k) {
        Some(name) => name.to_string(),
        None => format!("action {k}"),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMode {
    #[default]
    Embed,
    Pixel,
}

impl std::str::FromStr for FrameMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed" => Ok(Self::Embed),
            "pixel" => Ok(Self::Pixel),
            other => Err(Error::validation(format!("unknown frame mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FrameMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Embed => "embed",
            Self::Pixel => "pixel",
        })
    }
}

/// What replaces a frame selected as a distractor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorKind {
    /// A uniformly random unit vector: irrelevant content.
    #[default]
    Uniform,
    /// A frame drawn from another class: inter-class confusion.
    OtherClass,
}

/// Where class anchor directions come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSource {
    /// Seeded random directions, orthonormal when `K ≤ d`.
    #[default]
    Random,
    /// The frozen text encoder's label embeddings under hidden teacher
    /// prompts, centered over the classes. Ties frame content to label text,
    /// which zero-shot transfer to unseen labels relies on.
    Text,
}

impl std::str::FromStr for AnchorSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "text" => Ok(Self::Text),
            other => Err(Error::validation(format!("unknown anchor source `{other}`"))),
        }
    }
}

impl std::fmt::Display for AnchorSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Text => "text",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub videos_per_class: usize,
    /// Frames per video before segment sampling.
    pub pool_size: usize,
    /// Number of temporal segments T.
    pub segments: usize,
    pub dim: usize,
    pub image_size: usize,
    /// Expected gap between intra-class and inter-class frame cosine.
    pub margin: f64,
    /// Per-frame probability of being a distractor, in `[0, 1)`.
    pub noise: f64,
    pub distractor: DistractorKind,
    pub mode: FrameMode,
    pub anchors: AnchorSource,
    /// Seed of the frozen encoder used for text anchors.
    pub encoder_seed: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            videos_per_class: 60,
            pool_size: 16,
            segments: 8,
            dim: 32,
            image_size: 16,
            margin: 0.5,
            noise: 0.0,
            distractor: DistractorKind::Uniform,
            mode: FrameMode::Embed,
            anchors: AnchorSource::Random,
            encoder_seed: 0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.videos_per_class == 0 || self.dim == 0 {
            return Err(Error::validation("classes, videos_per_class and dim must be positive"));
        }
        if self.segments == 0 || self.pool_size < self.segments {
            return Err(Error::validation(format!(
                "pool size {} must be at least the segment count {} (≥ 1)",
                self.pool_size, self.segments
            )));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::validation(format!("noise fraction {} not in [0, 1)", self.noise)));
        }
        if !(self.margin > 0.0) {
            return Err(Error::validation(format!("margin {} must be > 0", self.margin)));
        }
        Ok(())
    }
}

/// One video: an ordered pool of frames in a single mode.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub class: usize,
    pub mode: FrameMode,
    pub frames: Vec<Vec<f64>>,
    /// Which pool frames were replaced by distractors; only known for generated data.
    pub distractors: Vec<bool>,
}

impl VideoSample {
    pub fn pool_size(&self) -> usize {
        self.frames.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub labels: Vec<String>,
    /// Optional label → description overrides for codebook construction.
    pub descriptions: BTreeMap<String, String>,
    pub videos: Vec<VideoSample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for v in &self.videos {
            counts[v.class] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::validation("dataset has no classes"));
        }
        let mut width = None;
        for v in &self.videos {
            if v.class >= self.labels.len() {
                return Err(Error::validation(format!(
                    "video `{}` has class {} but only {} classes exist",
                    v.id,
                    v.class,
                    self.labels.len()
                )));
            }
            if v.frames.is_empty() {
                return Err(Error::validation(format!("video `{}` has no frames", v.id)));
            }
            for f in &v.frames {
                match width {
                    None => width = Some(f.len()),
                    Some(w) if w != f.len() => {
                        return Err(Error::validation(format!(
                            "video `{}` has a frame of width {}, expected {w}",
                            v.id,
                            f.len()
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Keep only `classes` (in that order) and renumber them `0..classes.len()`.
    pub fn restrict_classes(&self, classes: &[usize]) -> Result<Dataset> {
        let mut remap = vec![None; self.num_classes()];
        for (new, &old) in classes.iter().enumerate() {
            if old >= self.num_classes() {
                return Err(Error::Index {
                    index: old,
                    len: self.num_classes(),
                    context: "restrict_classes",
                });
            }
            remap[old] = Some(new);
        }
        let labels: Vec<String> = classes.iter().map(|&c| self.labels[c].clone()).collect();
        let descriptions = self
            .descriptions
            .iter()
            .filter(|(k, _)| labels.contains(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let videos = self
            .videos
            .iter()
            .filter_map(|v| {
                remap[v.class].map(|c| VideoSample {
                    class: c,
                    ..v.clone()
                })
            })
            .collect();
        Ok(Dataset {
            labels,
            descriptions,
            videos,
        })
    }

    /// Split off the last `eval_per_class` videos of every class as a held-out set.
    pub fn holdout(&self, eval_per_class: usize) -> Result<(Dataset, Dataset)> {
        let counts = self.class_counts();
        if let Some(k) = counts.iter().position(|&c| c <= eval_per_class) {
            return Err(Error::validation(format!(
                "class `{}` has {} videos, cannot hold out {eval_per_class} and still train",
                self.labels[k], counts[k]
            )));
        }
        let mut seen = vec![0; self.num_classes()];
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        for v in &self.videos {
            let idx = seen[v.class];
            seen[v.class] += 1;
            if idx < counts[v.class] - eval_per_class {
                train.push(v.clone());
            } else {
                eval.push(v.clone());
            }
        }
        let with = |videos| Dataset {
            labels: self.labels.clone(),
            descriptions: self.descriptions.clone(),
            videos,
        };
        Ok((with(train), with(eval)))
    }

    pub fn find(&self, id: &str) -> Option<&VideoSample> {
        self.videos.iter().find(|v| v.id == id)
    }
}

/// Disjoint base/novel partition of the class indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined input
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v {
        *x /= n;
    }
}

/// Class anchors: orthonormal when `K ≤ d`, otherwise independent random unit vectors.
pub fn random_anchors(classes: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut v = random_unit(&mut rng, dim);
        if classes <= dim {
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= dot * y;
                }
            }
            normalize(&mut v);
        }
        rows.push(v);
    }
    Tensor::from_rows(&rows).expect("anchors are rectangular")
}

/// Mean cosine between distinct anchors (0 for a single class).
fn mean_anchor_cosine(anchors: &Tensor) -> f64 {
    let k = anchors.rows();
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                total += anchors
                    .row(i)
                    .iter()
                    .zip(anchors.row(j))
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
        }
    }
    total / (k * (k - 1)) as f64
}

/// Per-coordinate jitter σ such that `E[cos_intra] − E[cos_inter] ≈ margin`.
///
/// With `x = normalize(a + σg)`, both expectations shrink by `1 / (1 + σ²d)`,
/// giving `σ² = ((1 − ρ)/margin − 1) / d` for mean anchor cosine `ρ`.
pub fn jitter_sigma(margin: f64, mean_anchor_cos: f64, dim: usize) -> Result<f64> {
    let gap = 1.0 - mean_anchor_cos;
    if !(margin > 0.0) || margin >= gap {
        return Err(Error::validation(format!(
            "margin {margin} infeasible: anchors allow at most {gap:.4}"
        )));
    }
    Ok(((gap / margin - 1.0) / dim as f64).sqrt())
}

/// Centered label embeddings from `encoder` under teacher prompts drawn from `teacher_seed`.
///
/// With a single class the uncentered embedding is returned.
pub fn text_anchors(
    labels: &[String],
    encoder: &FrozenEncoderWeights,
    teacher_seed: u64,
) -> Result<Tensor> {
    let teacher = TextPromptTokens::init(&encoder.config, teacher_seed);
    let protos = build_codebook(labels, &teacher, encoder, None)?.prototypes().clone();
    if protos.rows() < 2 {
        return Ok(protos);
    }
    let (k, d) = (protos.rows(), protos.cols());
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..k).map(|i| protos.get(i, j)).sum::<f64>() / k as f64)
        .collect();
    let rows: Vec<Vec<f64>> = protos
        .row_iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    Tensor::from_rows(&rows)
}

/// Generate a dataset around anchors chosen by `spec.anchors`.
///
/// Text anchors use the default encoder architecture with output size `dim`
/// and seed `encoder_seed`, so they match a model trained with that encoder.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let anchors = match spec.anchors {
        AnchorSource::Random => random_anchors(spec.classes, spec.dim, spec.seed),
        AnchorSource::Text => {
            let config = EncoderConfig {
                out_dim: spec.dim,
                ..EncoderConfig::default()
            };
            let encoder = FrozenEncoderWeights::init(config, spec.encoder_seed)?;
            let labels: Vec<String> = (0..spec.classes).map(synthetic_label).collect();
            text_anchors(&labels, &encoder, derive_seed(spec.seed, 0x7EAC))?
        }
    };
    generate_with_anchors(spec, &anchors)
}

/// Generate a dataset around the given `K × d` class anchors (rows are normalized).
pub fn generate_with_anchors(spec: &SyntheticSpec, anchors: &Tensor) -> Result<Dataset> {
    spec.validate()?;
    if anchors.rank() != 2 || anchors.rows() != spec.classes || anchors.cols() != spec.dim {
        return Err(Error::dim("anchors", anchors.shape(), &[spec.classes, spec.dim]));
    }
    let mut anchor_rows: Vec<Vec<f64>> = anchors.row_iter().map(|r| r.to_vec()).collect();
    for r in &mut anchor_rows {
        normalize(r);
    }
    let unit_anchors = Tensor::from_rows(&anchor_rows)?;
    let sigma = jitter_sigma(spec.margin, mean_anchor_cosine(&unit_anchors), spec.dim)?;
    if spec.mode == FrameMode::Pixel && !spec.image_size.is_multiple_of(4) {
        return Err(Error::validation("pixel mode needs an image size divisible by 4"));
    }

    let jittered = |rng: &mut ChaCha8Rng, class: usize| -> Vec<f64> {
        let mut v: Vec<f64> = anchor_rows[class]
            .iter()
            .map(|a| a + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        normalize(&mut v);
        v
    };

    let mut videos = Vec::with_capacity(spec.classes * spec.videos_per_class);
    for class in 0..spec.classes {
        for i in 0..spec.videos_per_class {
            let index = (class * spec.videos_per_class + i) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index));
            let mut frames = Vec::with_capacity(spec.pool_size);
            let mut distractors = Vec::with_capacity(spec.pool_size);
            for _ in 0..spec.pool_size {
                let is_noise = spec.noise > 0.0 && rng.random::<f64>() < spec.noise;
                let emb = if !is_noise {
                    jittered(&mut rng, class)
                } else {
                    match spec.distractor {
                        DistractorKind::OtherClass if spec.classes > 1 => {
                            let mut other = rng.random_range(0..spec.classes - 1);
                            if other >= class {
                                other += 1;
                            }
                            jittered(&mut rng, other)
                        }
                        _ => random_unit(&mut rng, spec.dim),
                    }
                };
                frames.push(match spec.mode {
                    FrameMode::Embed => emb,
                    FrameMode::Pixel => render_pixels(&emb, spec.image_size, &mut rng, is_noise),
                });
                distractors.push(is_noise);
            }
            videos.push(VideoSample {
                id: format!("c{class:03}_v{i:04}"),
                class,
                mode: spec.mode,
                frames,
                distractors,
            });
        }
    }
    Ok(Dataset {
        labels: (0..spec.classes).map(synthetic_label).collect(),
        descriptions: BTreeMap::new(),
        videos,
    })
}

/// Paint an embedding as a grid of colored 4×4 patches (`h·w·3`, row-major).
///
/// Patch `i` takes its three channels from embedding coordinates `3i..3i+3`
/// (wrapping), plus a little per-pixel noise. Distractors are pure noise.
fn render_pixels(emb: &[f64], size: usize, rng: &mut ChaCha8Rng, is_noise: bool) -> Vec<f64> {
    const PATCH: usize = 4;
    let d = emb.len();
    let side = size / PATCH;
    let gain = (d as f64).sqrt();
    let mut px = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let patch = (y / PATCH) * side + x / PATCH;
            for c in 0..3 {
                let base = if is_noise {
                    rng.sample::<f64, _>(StandardNormal)
                } else {
                    gain * emb[(3 * patch + c) % d]
                };
                px[(y * size + x) * 3 + c] = base + 0.05 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    px
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

/// Bounds of segment `i` when `pool` frames are cut into `t` contiguous segments.
pub fn segment_bounds(pool: usize, t: usize, i: usize) -> (usize, usize) {
    (i * pool / t, (i + 1) * pool / t)
}

/// One frame index per uniform segment: random in training, the midpoint in evaluation.
pub fn sample_frames<R: Rng + ?Sized>(
    pool: usize,
    t: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if t == 0 || pool < t {
        return Err(Error::validation(format!(
            "cannot sample {t} segments from a pool of {pool} frames"
        )));
    }
    Ok((0..t)
        .map(|i| {
            let (start, end) = segment_bounds(pool, t, i);
            match mode {
                SampleMode::Eval => start + (end - start) / 2,
                SampleMode::Train => rng.random_range(start..end),
            }
        })
        .collect())
}

/// Seeded choice of exactly `shots` videos per class, preserving dataset order.
pub fn few_shot_subset(dataset: &Dataset, shots: usize, seed: u64) -> Result<Dataset> {
    let counts = dataset.class_counts();
    if let Some(k) = counts.iter().position(|&c| c < shots) {
        return Err(Error::validation(format!(
            "class `{}` has {} videos, fewer than {shots} shots",
            dataset.labels[k], counts[k]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; dataset.len()];
    for class in 0..dataset.num_classes() {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.videos[i].class == class)
            .collect();
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(shots) {
            keep[i] = true;
        }
    }
    Ok(Dataset {
        labels: dataset.labels.clone(),
        descriptions: dataset.descriptions.clone(),
        videos: dataset
            .videos
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(v, _)| v.clone())
            .collect(),
    })
}

/// Seeded random base/novel partition with `round(K · fraction)` base classes.
pub fn split_base_novel(num_classes: usize, fraction: f64, seed: u64) -> Result<ClassSplit> {
    if num_classes < 2 {
        return Err(Error::validation("a base/novel split needs at least 2 classes"));
    }
    let n_base = (num_classes as f64 * fraction).round() as usize;
    if n_base == 0 || n_base >= num_classes || !(0.0..=1.0).contains(&fraction) {
        return Err(Error::validation(format!(
            "fraction {fraction} leaves one side of the split empty"
        )));
    }
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut base = order[..n_base].to_vec();
    let mut novel = order[n_base..].to_vec();
    base.sort_unstable();
    novel.sort_unstable();
    Ok(ClassSplit { base, novel })
}

#[derive(Serialize, Deserialize)]
struct VideoRecord {
    id: String,
    class: usize,
    mode: FrameMode,
    frames: Vec<Vec<f64>>,
    /// Ground-truth distractor flags; omitted when no frame is a distractor.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    distractors: Vec<bool>,
}

pub const CLASSES_FILE: &str = "classes.txt";
pub const DESCRIPTIONS_FILE: &str = "descriptions.txt";
pub const VIDEOS_FILE: &str = "videos.jsonl";

/// Write `classes.txt`, `descriptions.txt` (when non-empty) and `videos.jsonl`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut classes = String::new();
    for l in &dataset.labels {
        if l.contains('\n') || l.contains('\t') {
            return Err(Error::validation(format!("label {l:?} contains a tab or newline")));
        }
        classes.push_str(l);
        classes.push('\n');
    }
    fs::write(dir.join(CLASSES_FILE), classes)?;
    if !dataset.descriptions.is_empty() {
        let mut desc = String::new();
        for (label, d) in &dataset.descriptions {
            desc.push_str(&format!("{label}\t{d}\n"));
        }
        fs::write(dir.join(DESCRIPTIONS_FILE), desc)?;
    }
    let mut w = BufWriter::new(fs::File::create(dir.join(VIDEOS_FILE))?);
    for v in &dataset.videos {
        let rec = VideoRecord {
            id: v.id.clone(),
            class: v.class,
            mode: v.mode,
            frames: v.frames.clone(),
            distractors: if v.distractors.contains(&true) {
                v.distractors.clone()
            } else {
                Vec::new()
            },
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parse `label<TAB>description` lines; blank lines and `#` comments are skipped.
pub fn parse_descriptions(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (label, desc) = line.split_once('\t').ok_or_else(|| Error::Format {
            kind: "descriptions.txt",
            msg: format!("line {} has no tab separator", n + 1),
        })?;
        if desc.is_empty() {
            return Err(Error::Format {
                kind: "descriptions.txt",
                msg: format!("line {} has an empty description", n + 1),
            });
        }
        out.insert(label.to_string(), desc.to_string());
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let labels: Vec<String> = fs::read_to_string(dir.join(CLASSES_FILE))?
        .lines()
        .map(str::to_string)
        .collect();
    let desc_path = dir.join(DESCRIPTIONS_FILE);
    let descriptions = if desc_path.exists() {
        parse_descriptions(&fs::read_to_string(desc_path)?)?
    } else {
        BTreeMap::new()
    };
    let mut videos = Vec::new();
    let reader = BufReader::new(fs::File::open(dir.join(VIDEOS_FILE))?);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VideoRecord = serde_json::from_str(&line)?;
        let n = rec.frames.len();
        let distractors = match rec.distractors.len() {
            0 => vec![false; n],
            m if m == n => rec.distractors,
            m => {
                return Err(Error::Format {
                    kind: "videos.jsonl",
                    msg: format!("video `{}` has {n} frames but {m} distractor flags", rec.id),
                })
            }
        };
        videos.push(VideoSample {
            id: rec.id,
            class: rec.class,
            mode: rec.mode,
            frames: rec.frames,
            distractors,
        });
    }
    let ds = Dataset {
        labels,
        descriptions,
        videos,
    };
    ds.validate()?;
    Ok(ds)
}
