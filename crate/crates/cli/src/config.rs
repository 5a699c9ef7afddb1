//! Flat `key = value` run configuration: defaults < `VTD_SEED` < config file < flags.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use vtd_core::codebook::VoteRule;
use vtd_core::dataset::{AnchorSource, DistractorKind, FrameMode, SyntheticSpec};
use vtd_core::encoders::EncoderConfig;
use vtd_core::eval::EvalOptions;
use vtd_core::fusion::{Aggregation, FusionMode, FusionSettings};
use vtd_core::training::{CodebookRefresh, TrainConfig};

pub const SEED_ENV: &str = "VTD_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSide {
    Base,
    Novel,
    All,
}

impl FromStr for SplitSide {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "novel" => Ok(Self::Novel),
            "all" => Ok(Self::All),
            other => bail!("unknown split `{other}` (base | novel | all)"),
        }
    }
}

impl Display for SplitSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Base => "base",
            Self::Novel => "novel",
            Self::All => "all",
        })
    }
}

fn distractor_str(d: DistractorKind) -> &'static str {
    match d {
        DistractorKind::Uniform => "uniform",
        DistractorKind::OtherClass => "other_class",
    }
}

fn parse_distractor(s: &str) -> Result<DistractorKind> {
    match s {
        "uniform" => Ok(DistractorKind::Uniform),
        "other_class" => Ok(DistractorKind::OtherClass),
        other => bail!("unknown distractor `{other}` (uniform | other_class)"),
    }
}

fn vote_str(v: VoteRule) -> &'static str {
    match v {
        VoteRule::Summed => "summed",
        VoteRule::Count => "count",
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value `{value}` for `{key}`: {e}"))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt_str<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

macro_rules! run_config {
    ($( $key:ident : $ty:ty = $default:expr, $help:literal; )*) => {
        /// Every configurable key, one field each.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( pub $key: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $key: $default, )* }
            }
        }

        /// Command-line overrides; each flag is the `--kebab-case` form of a key.
        #[derive(clap::Args, Clone, Debug, Default)]
        pub struct ConfigFlags {
            $(
                #[arg(long, value_name = "VALUE", help = $help)]
                pub $key: Option<String>,
            )*
        }

        impl ConfigFlags {
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                let mut out = Vec::new();
                $( if let Some(v) = &self.$key { out.push((stringify!($key), v.clone())); } )*
                out
            }
        }

        pub const KEYS: &[&str] = &[$( stringify!($key), )*];
    };
}

run_config! {
    seed: u64 = 7, "RNG seed for data, initialization and shuffling";
    encoder_seed: u64 = 0, "seed of the frozen encoder weights";
    data: Option<PathBuf> = None, "dataset directory";
    checkpoint: Option<PathBuf> = None, "checkpoint file to evaluate or inspect";
    out: Option<PathBuf> = None, "output directory (default: run-<unix time>-seed<seed>)";
    classes: usize = 5, "number of classes";
    videos_per_class: usize = 60, "videos generated per class";
    pool_size: usize = 16, "frames per generated video";
    segments: usize = 8, "temporal segments T, one sampled frame each";
    dim: usize = 32, "embedding dimension d";
    image_size: usize = 16, "image side length in pixel mode";
    margin: f64 = 0.5, "intra- minus inter-class cosine gap";
    noise: f64 = 0.0, "fraction of distractor frames";
    distractor: DistractorKind = DistractorKind::Uniform, "distractor kind: uniform | other_class";
    mode: FrameMode = FrameMode::Embed, "frame mode: embed | pixel";
    anchors: AnchorSource = AnchorSource::Random, "class anchors: random | text";
    learning_rate: f64 = 4e-4, "Adam learning rate";
    weight_decay: f64 = 1e-3, "decoupled weight decay";
    tau_loss: f64 = 0.07, "contrastive loss temperature";
    tau_fuse: f64 = 0.1, "confidence softmax temperature";
    batch_size: usize = 8, "videos per optimization step";
    epochs: usize = 200, "training epochs";
    top_k: Option<usize> = None, "fuse only the k most confident frames";
    aggregation: Aggregation = Aggregation::Fused, "frame_only | discrete_only | fused";
    fusion: FusionMode = FusionMode::Confidence, "confidence | pool";
    vote: VoteRule = VoteRule::Summed, "video prototype vote: summed | count";
    shots: Option<usize> = None, "few-shot limit: training videos per class";
    codebook_refresh: CodebookRefresh = CodebookRefresh::Step, "step | epoch";
    eval_per_class: usize = 20, "videos per class held out for evaluation (0: none)";
    split: SplitSide = SplitSide::All, "class subset: base | novel | all";
    split_file: Option<PathBuf> = None, "base/novel split JSON written by `split`";
    base_fraction: f64 = 0.5, "fraction of classes in the base split";
    ids: Option<String> = None, "comma-separated video ids to inspect";
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "encoder_seed" => self.encoder_seed = parse(key, v)?,
            "data" => self.data = parse_opt(key, v)?,
            "checkpoint" => self.checkpoint = parse_opt(key, v)?,
            "out" => self.out = parse_opt(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "videos_per_class" => self.videos_per_class = parse(key, v)?,
            "pool_size" => self.pool_size = parse(key, v)?,
            "segments" => self.segments = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "margin" => self.margin = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "distractor" => self.distractor = parse_distractor(v)?,
            "mode" => self.mode = parse(key, v)?,
            "anchors" => self.anchors = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "tau_loss" => self.tau_loss = parse(key, v)?,
            "tau_fuse" => self.tau_fuse = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "top_k" => self.top_k = parse_opt(key, v)?,
            "aggregation" => self.aggregation = parse(key, v)?,
            "fusion" => self.fusion = parse(key, v)?,
            "vote" => self.vote = parse(key, v)?,
            "shots" => self.shots = parse_opt(key, v)?,
            "codebook_refresh" => self.codebook_refresh = parse(key, v)?,
            "eval_per_class" => self.eval_per_class = parse(key, v)?,
            "split" => self.split = parse(key, v)?,
            "split_file" => self.split_file = parse_opt(key, v)?,
            "base_fraction" => self.base_fraction = parse(key, v)?,
            "ids" => self.ids = parse_opt(key, v)?,
            other => bail!("unknown config key `{other}` (known: {})", KEYS.join(", ")),
        }
        Ok(())
    }

    /// Defaults, then `VTD_SEED`, then the config file, then flags.
    pub fn resolve(
        file: Option<&Path>,
        flags: &ConfigFlags,
        env_seed: Option<String>,
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(seed) = env_seed {
            cfg.set("seed", &seed).with_context(|| format!("from {SEED_ENV}"))?;
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            for (key, value) in parse_config_text(&text)
                .with_context(|| format!("in config file {}", path.display()))?
            {
                cfg.set(&key, &value)
                    .with_context(|| format!("in config file {}", path.display()))?;
            }
        }
        for (key, value) in flags.pairs() {
            cfg.set(key, &value).with_context(|| format!("flag --{}", key.replace('_', "-")))?;
        }
        Ok(cfg)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("encoder_seed", self.encoder_seed.to_string()),
            ("data", path_str(&self.data)),
            ("checkpoint", path_str(&self.checkpoint)),
            ("out", path_str(&self.out)),
            ("classes", self.classes.to_string()),
            ("videos_per_class", self.videos_per_class.to_string()),
            ("pool_size", self.pool_size.to_string()),
            ("segments", self.segments.to_string()),
            ("dim", self.dim.to_string()),
            ("image_size", self.image_size.to_string()),
            ("margin", self.margin.to_string()),
            ("noise", self.noise.to_string()),
            ("distractor", distractor_str(self.distractor).to_string()),
            ("mode", self.mode.to_string()),
            ("anchors", self.anchors.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("tau_loss", self.tau_loss.to_string()),
            ("tau_fuse", self.tau_fuse.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("top_k", opt_str(&self.top_k)),
            ("aggregation", self.aggregation.to_string()),
            ("fusion", self.fusion.to_string()),
            ("vote", vote_str(self.vote).to_string()),
            ("shots", opt_str(&self.shots)),
            ("codebook_refresh", self.codebook_refresh.to_string()),
            ("eval_per_class", self.eval_per_class.to_string()),
            ("split", self.split.to_string()),
            ("split_file", path_str(&self.split_file)),
            ("base_fraction", self.base_fraction.to_string()),
            ("ids", opt_str(&self.ids)),
        ]
    }

    /// The effective configuration in the same format the loader reads.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            videos_per_class: self.videos_per_class,
            pool_size: self.pool_size,
            segments: self.segments,
            dim: self.dim,
            image_size: self.image_size,
            margin: self.margin,
            noise: self.noise,
            distractor: self.distractor,
            mode: self.mode,
            anchors: self.anchors,
            encoder_seed: self.encoder_seed,
            seed: self.seed,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            out_dim: self.dim,
            image_size: self.image_size,
            ..EncoderConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            tau_loss: self.tau_loss,
            tau_fuse: self.tau_fuse,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            segments: self.segments,
            top_k: self.top_k,
            aggregation: self.aggregation,
            fusion: self.fusion,
            vote: self.vote,
            shots: self.shots,
            refresh: self.codebook_refresh,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            settings: FusionSettings {
                aggregation: self.aggregation,
                fusion: self.fusion,
                tau_fuse: self.tau_fuse,
                top_k: self.top_k,
            },
            vote: self.vote,
            segments: self.segments,
        }
    }
}

/// `key = value` lines; `#` starts a comment; blank lines are ignored.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
        let key = k.trim();
        if key.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
