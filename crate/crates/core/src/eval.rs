//! Recognition metrics: ranking, top-1/top-5, per-class accuracy, confusion and
//! the base/novel harmonic mean.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::codebook::{Codebook, VoteRule};
use crate::dataset::{ClassSplit, Dataset};
use crate::error::{Error, Result};
use crate::fusion::FusionSettings;
use crate::tensor::cosine;
use crate::training::{embed_video, TrainConfig, TrainState};

/// Classes sorted by descending `cos(v̂, c_k)`; ties keep the lower index first.
pub fn classify(v_hat: &[f64], codebook: &Codebook) -> Result<Vec<usize>> {
    if codebook.is_empty() {
        return Err(Error::validation("cannot classify against an empty codebook"));
    }
    if v_hat.len() != codebook.dim() {
        return Err(Error::dim("classify", &[v_hat.len()], &[codebook.dim()]));
    }
    let sims = (0..codebook.len())
        .map(|k| cosine(v_hat, codebook.row(k)))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..codebook.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    Ok(order)
}

/// `2ab / (a + b)` for percentages `a, b > 0`.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    if !(base > 0.0 && novel > 0.0) || !base.is_finite() || !novel.is_finite() {
        return Err(Error::Domain(format!(
            "harmonic mean needs positive inputs, got ({base}, {novel})"
        )));
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// Evaluation-time pipeline settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub settings: FusionSettings,
    pub vote: VoteRule,
    pub segments: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self::from(&TrainConfig::default())
    }
}

impl From<&TrainConfig> for EvalOptions {
    fn from(c: &TrainConfig) -> Self {
        Self {
            settings: c.fusion_settings(),
            vote: c.vote,
            segments: c.segments,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoPrediction {
    pub id: String,
    pub class: usize,
    pub ranking: Vec<usize>,
    pub k_max: usize,
    pub assignments: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Eval-mode forward and ranking for every video, in dataset order.
pub fn predict(
    dataset: &Dataset,
    state: &TrainState,
    codebook: &Codebook,
    options: &EvalOptions,
) -> Result<Vec<VideoPrediction>> {
    dataset
        .videos
        .par_iter()
        .map(|video| {
            let out = embed_video(
                state,
                video,
                codebook,
                &options.settings,
                options.vote,
                options.segments,
            )?;
            Ok(VideoPrediction {
                id: video.id.clone(),
                class: video.class,
                ranking: classify(out.v_hat.data(), codebook)?,
                k_max: out.discretization.k_max,
                assignments: out.discretization.assignments,
                weights: out.weights,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub base: Option<f64>,
    pub novel: Option<f64>,
    pub hm: Option<f64>,
    /// Accuracy per class; `None` for classes without videos.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    #[serde(skip)]
    pub labels: Vec<String>,
}

impl EvalReport {
    pub fn from_predictions(labels: &[String], predictions: &[VideoPrediction]) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::validation("cannot evaluate an empty split"));
        }
        let k = labels.len();
        let mut confusion = vec![vec![0usize; k]; k];
        let (mut top1, mut top5) = (0usize, 0usize);
        for p in predictions {
            confusion[p.class][p.ranking[0]] += 1;
            top1 += (p.ranking[0] == p.class) as usize;
            top5 += p.ranking.iter().take(5).any(|&c| c == p.class) as usize;
        }
        let n = predictions.len() as f64;
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| 100.0 * row[c] as f64 / total as f64)
            })
            .collect();
        Ok(Self {
            top1: 100.0 * top1 as f64 / n,
            top5: 100.0 * top5 as f64 / n,
            base: None,
            novel: None,
            hm: None,
            per_class,
            confusion,
            labels: labels.to_vec(),
        })
    }

    pub fn num_videos(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "videos  {}", self.num_videos());
        let _ = writeln!(s, "top1    {:6.2}", self.top1);
        let _ = writeln!(s, "top5    {:6.2}", self.top5);
        for (name, v) in [("base", self.base), ("novel", self.novel), ("hm", self.hm)] {
            if let Some(v) = v {
                let _ = writeln!(s, "{name:<7} {v:6.2}");
            }
        }
        let width = self.labels.iter().map(String::len).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "\n{:<width$}  {:>6}  {:>5}", "class", "acc", "n");
        for (c, label) in self.labels.iter().enumerate() {
            let n: usize = self.confusion[c].iter().sum();
            let acc = self.per_class[c].map_or("-".to_string(), |a| format!("{a:.2}"));
            let _ = writeln!(s, "{label:<width$}  {acc:>6}  {n:>5}");
        }
        let _ = writeln!(s, "\nconfusion (rows: truth, columns: predicted)");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>4}")).collect();
            let _ = writeln!(s, "{}", cells.join(""));
        }
        s
    }
}

/// Evaluate every class of `dataset` against a codebook built for its labels.
pub fn evaluate(dataset: &Dataset, state: &TrainState, options: &EvalOptions) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::validation("cannot evaluate an empty split"));
    }
    dataset.validate()?;
    let overrides = (!dataset.descriptions.is_empty()).then_some(&dataset.descriptions);
    let codebook = state.codebook(&dataset.labels, overrides)?;
    let predictions = predict(dataset, state, &codebook, options)?;
    EvalReport::from_predictions(&dataset.labels, &predictions)
}

/// All-class report plus each side evaluated against its own classes' codebook.
///
/// A side scoring exactly 0 makes the harmonic mean 0 rather than an error.
pub fn evaluate_base_novel(
    dataset: &Dataset,
    split: &ClassSplit,
    state: &TrainState,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let mut report = evaluate(dataset, state, options)?;
    let base = evaluate(&dataset.restrict_classes(&split.base)?, state, options)?.top1;
    let novel = evaluate(&dataset.restrict_classes(&split.novel)?, state, options)?.top1;
    report.base = Some(base);
    report.novel = Some(novel);
    report.hm = Some(if base == 0.0 || novel == 0.0 {
        0.0
    } else {
        harmonic_mean(base, novel)?
    });
    Ok(report)
}
