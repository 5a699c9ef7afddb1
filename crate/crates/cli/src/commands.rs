use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use vtd_core::checkpoint::Checkpoint;
use vtd_core::codebook::format_inspect;
use vtd_core::dataset::{generate, read_dataset, split_base_novel, write_dataset, ClassSplit, Dataset};
use vtd_core::encoders::FrozenEncoderWeights;
use vtd_core::eval::{evaluate, evaluate_base_novel};
use vtd_core::training::{embed_video, train_with, TrainState, METRICS_HEADER};

use crate::config::{RunConfig, SplitSide};

pub const CHECKPOINT_FILE: &str = "checkpoint.vtdw";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const SPLIT_FILE: &str = "split.json";

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match &cfg.out {
        Some(p) => p.clone(),
        None => {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs();
            PathBuf::from(format!("run-{secs}-seed{}", cfg.seed))
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut echo = cfg.clone();
    echo.out = Some(dir.clone());
    fs::write(dir.join(CONFIG_ECHO_FILE), echo.to_text())?;
    Ok(dir)
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| anyhow!("missing required `{key}` (--{})", key.replace('_', "-")))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let dir = required(&cfg.data, "data")?;
    read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn load_split(cfg: &RunConfig) -> Result<Option<ClassSplit>> {
    let Some(path) = &cfg.split_file else {
        return Ok(None);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading split {}", path.display()))?;
    let split = serde_json::from_str(&text).with_context(|| format!("parsing split {}", path.display()))?;
    Ok(Some(split))
}

fn load_state(cfg: &RunConfig) -> Result<TrainState> {
    let path = required(&cfg.checkpoint, "checkpoint")?;
    let ck = Checkpoint::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(TrainState::from_checkpoint(&ck)?)
}

/// Restrict to one side of the split when `split` asks for it.
fn select_side(ds: &Dataset, split: Option<&ClassSplit>, side: SplitSide) -> Result<Dataset> {
    match (split, side) {
        (_, SplitSide::All) => Ok(ds.clone()),
        (None, side) => bail!("`split = {side}` needs a `split_file`"),
        (Some(s), SplitSide::Base) => Ok(ds.restrict_classes(&s.base)?),
        (Some(s), SplitSide::Novel) => Ok(ds.restrict_classes(&s.novel)?),
    }
}

fn train_part(ds: &Dataset, cfg: &RunConfig) -> Result<Dataset> {
    Ok(if cfg.eval_per_class == 0 {
        ds.clone()
    } else {
        ds.holdout(cfg.eval_per_class)?.0
    })
}

fn eval_part(ds: &Dataset, cfg: &RunConfig) -> Result<Dataset> {
    Ok(if cfg.eval_per_class == 0 {
        ds.clone()
    } else {
        ds.holdout(cfg.eval_per_class)?.1
    })
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.synthetic_spec();
    spec.validate().context("invalid dataset spec")?;
    let ds = generate(&spec)?;
    let dir = out_dir(cfg)?;
    write_dataset(&ds, &dir)?;
    eprintln!("wrote {} videos over {} classes to {}", ds.len(), ds.num_classes(), dir.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let tc = cfg.train_config();
    tc.validate().context("invalid training config")?;
    let ds = load_data(cfg)?;
    let split = load_split(cfg)?;
    let ds = train_part(&select_side(&ds, split.as_ref(), cfg.split)?, cfg)?;
    let state = match &cfg.checkpoint {
        Some(_) => load_state(cfg)?,
        None => {
            let encoder = FrozenEncoderWeights::init(cfg.encoder_config(), cfg.encoder_seed)?;
            TrainState::init(encoder, cfg.seed)
        }
    };

    let dir = out_dir(cfg)?;
    let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    metrics.flush()?;
    let mut io_error = None;
    let result = train_with(&ds, &tc, state, |m| {
        if io_error.is_none() {
            if let Err(e) = writeln!(metrics, "{}", m.csv_line()).and_then(|_| metrics.flush()) {
                io_error = Some(e);
            }
        }
        eprintln!("epoch {} loss {:.6} train top-1 {:.2}", m.epoch, m.loss, m.train_top1);
    });
    if let Some(e) = io_error {
        return Err(e).context("writing metrics");
    }
    let state = result.context("training stopped; metrics so far are kept")?;
    state.to_checkpoint().write(&dir.join(CHECKPOINT_FILE))?;
    eprintln!("wrote {}", dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let state = load_state(cfg)?;
    let ds = load_data(cfg)?;
    let split = load_split(cfg)?;
    let opts = cfg.eval_options();
    let report = match (&split, cfg.split) {
        (Some(s), SplitSide::All) => evaluate_base_novel(&eval_part(&ds, cfg)?, s, &state, &opts)?,
        _ => evaluate(&eval_part(&select_side(&ds, split.as_ref(), cfg.split)?, cfg)?, &state, &opts)?,
    };
    let dir = out_dir(cfg)?;
    let table = report.to_table();
    fs::write(dir.join(REPORT_JSON_FILE), report.to_json())?;
    fs::write(dir.join(REPORT_TEXT_FILE), &table)?;
    print!("{table}");
    Ok(())
}

pub fn inspect(cfg: &RunConfig) -> Result<()> {
    let ids = cfg
        .ids
        .as_deref()
        .ok_or_else(|| anyhow!("missing required `ids` (--ids)"))?;
    let state = load_state(cfg)?;
    let ds = load_data(cfg)?;
    let split = load_split(cfg)?;
    let ds = select_side(&ds, split.as_ref(), cfg.split)?;
    let overrides = (!ds.descriptions.is_empty()).then_some(&ds.descriptions);
    let codebook = state.codebook(&ds.labels, overrides)?;
    let opts = cfg.eval_options();

    let mut out = String::new();
    for id in ids.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let video = ds.find(id).ok_or_else(|| anyhow!("unknown video id `{id}`"))?;
        let emb = embed_video(&state, video, &codebook, &opts.settings, opts.vote, opts.segments)?;
        out.push_str(&format_inspect(
            &emb.discretization,
            &emb.weights,
            &codebook,
            &ds.labels[video.class],
        ));
    }
    print!("{out}");
    Ok(())
}

pub fn split(cfg: &RunConfig) -> Result<()> {
    let classes = match &cfg.data {
        Some(_) => load_data(cfg)?.num_classes(),
        None => cfg.classes,
    };
    let split = split_base_novel(classes, cfg.base_fraction, cfg.seed)?;
    let dir = out_dir(cfg)?;
    fs::write(dir.join(SPLIT_FILE), serde_json::to_string_pretty(&split)? + "\n")?;
    eprintln!(
        "{} base / {} novel classes written to {}",
        split.base.len(),
        split.novel.len(),
        dir.join(SPLIT_FILE).display()
    );
    Ok(())
}
