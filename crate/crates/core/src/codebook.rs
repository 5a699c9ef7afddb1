//! Text-derived codebook and video-to-text discretization.
//!
//! Every class label is encoded by the frozen text tower (with the current text
//! prompts) into one prototype row. Frames are hard-assigned to their most
//! similar prototype, the assignments vote for a single video prototype, and
//! that prototype's row becomes the discrete video feature.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::encoders::{encode_label, tokenize, FrozenEncoderWeights, TextPromptTokens};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const UNIT_TOL: f64 = 1e-9;

/// `K × d` prototype matrix, one unit row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    prototypes: Tensor,
    labels: Vec<String>,
    overrides: BTreeMap<String, String>,
}

impl Codebook {
    /// Wrap existing unit-norm prototype rows.
    pub fn from_prototypes(labels: Vec<String>, prototypes: Tensor) -> Result<Self> {
        validate_labels(&labels)?;
        if prototypes.rank() != 2 || prototypes.rows() != labels.len() {
            return Err(Error::dim(
                "codebook",
                prototypes.shape(),
                &[labels.len(), prototypes.cols()],
            ));
        }
        for (k, row) in prototypes.row_iter().enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::validation(format!(
                    "prototype {k} has norm {n}, expected unit norm"
                )));
            }
        }
        Ok(Self {
            prototypes,
            labels,
            overrides: BTreeMap::new(),
        })
    }

    /// Normalize arbitrary nonzero direction rows into a codebook.
    pub fn from_directions(labels: Vec<String>, directions: &Tensor) -> Result<Self> {
        let tape = Tape::new();
        let rows = tape.constant(directions.clone()).l2_normalize()?;
        let protos = (*rows.value()).clone();
        Self::from_prototypes(labels, protos)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.prototypes.row(k)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, k: usize) -> &str {
        &self.labels[k]
    }

    pub fn overrides(&self) -> &BTreeMap<String, String> {
        &self.overrides
    }

    /// Smallest Euclidean distance between any two distinct rows.
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                best = best.min(sq_dist(self.row(i), self.row(j)).sqrt());
            }
        }
        best
    }
}

fn validate_labels(labels: &[String]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::validation("codebook needs at least one class label"));
    }
    let mut seen = HashSet::new();
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(Error::validation(format!("duplicate class label `{l}`")));
        }
    }
    Ok(())
}

/// Build the codebook on `tape`, keeping the rows differentiable w.r.t. `prompts`.
///
/// Returns the value-level codebook together with the `[K × d]` variable.
pub fn build_codebook_on<'t>(
    tape: &'t Tape,
    labels: &[String],
    prompts: Var<'t>,
    weights: &FrozenEncoderWeights,
    overrides: Option<&BTreeMap<String, String>>,
) -> Result<(Codebook, Var<'t>)> {
    validate_labels(labels)?;
    let d = weights.config.out_dim;
    let mut rows = Vec::with_capacity(labels.len());
    for label in labels {
        let text = overrides
            .and_then(|o| o.get(label))
            .map(String::as_str)
            .unwrap_or(label);
        let row = encode_label(tape, &tokenize(text)?, prompts, weights)?;
        rows.push(row.reshape(&[1, d])?);
    }
    let matrix = Var::concat(&rows, 0)?;
    let mut cb = Codebook::from_prototypes(labels.to_vec(), (*matrix.value()).clone())?;
    if let Some(o) = overrides {
        cb.overrides = o
            .iter()
            .filter(|(k, _)| labels.contains(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
    }
    Ok((cb, matrix))
}

/// Gradient-free codebook construction.
pub fn build_codebook(
    labels: &[String],
    text_prompts: &TextPromptTokens,
    weights: &FrozenEncoderWeights,
    overrides: Option<&BTreeMap<String, String>>,
) -> Result<Codebook> {
    let tape = Tape::new();
    let prompts = tape.constant(text_prompts.0.clone());
    build_codebook_on(&tape, labels, prompts, weights, overrides).map(|(cb, _)| cb)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest prototype by Euclidean distance; ties go to the lower index.
pub fn quantize(x: &[f64], codebook: &Codebook) -> Result<usize> {
    if codebook.is_empty() {
        return Err(Error::validation("cannot quantize against an empty codebook"));
    }
    if x.len() != codebook.dim() {
        return Err(Error::dim("quantize", &[x.len()], &[codebook.dim()]));
    }
    let mut best = 0;
    let mut best_d = sq_dist(x, codebook.row(0));
    for k in 1..codebook.len() {
        let d = sq_dist(x, codebook.row(k));
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    Ok(best)
}

/// How per-frame assignments are reduced into the video prototype.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteRule {
    /// `Σ_t M[t,k]·S[t,k]`: both how often and how strongly a prototype is chosen.
    #[default]
    Summed,
    /// `Σ_t M[t,k]`: pure majority; ties fall back to the summed score.
    Count,
}

impl std::str::FromStr for VoteRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "summed" | "sum" => Ok(Self::Summed),
            "count" => Ok(Self::Count),
            other => Err(Error::validation(format!("unknown vote rule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizationResult {
    /// `T × K` cosine affinities.
    pub affinity: Tensor,
    /// Hard assignment per frame.
    pub assignments: Vec<usize>,
    /// `T × K` one-hot rows.
    pub mask: Tensor,
    pub k_max: usize,
    /// Row `k_max` of the codebook.
    pub v: Vec<f64>,
    /// `S[t, k_max]` per frame.
    pub confidence: Vec<f64>,
}

/// `S[t,k] = cos(x_t, c_k)`, computed the same way as on the training tape.
pub fn affinity(frames: &Tensor, codebook: &Codebook) -> Result<Tensor> {
    if frames.cols() != codebook.dim() {
        return Err(Error::dim("affinity", frames.shape(), codebook.prototypes.shape()));
    }
    let tape = Tape::new();
    let x = tape.constant(frames.clone());
    let c = tape.constant(codebook.prototypes.clone());
    let s = x.cosine_rows(&c)?;
    let out = (*s.value()).clone();
    Ok(out)
}

fn argmax(xs: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in xs.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Per-frame argmax of the affinity rows, and the matching one-hot mask.
pub fn hard_assign(affinity: &Tensor) -> (Vec<usize>, Tensor) {
    let (t, k) = (affinity.rows(), affinity.cols());
    let assignments: Vec<usize> = affinity.row_iter().map(|r| argmax(r.iter().copied())).collect();
    let mut mask = Tensor::zeros(&[t, k]);
    for (i, &a) in assignments.iter().enumerate() {
        mask.data_mut()[i * k + a] = 1.0;
    }
    (assignments, mask)
}

/// `score_k = Σ_t M[t,k]·S[t,k]`; prototypes nobody picked score exactly 0.
pub fn masked_vote_scores(affinity: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if affinity.shape() != mask.shape() || affinity.rank() != 2 {
        return Err(Error::dim("masked_vote_scores", affinity.shape(), mask.shape()));
    }
    let k = affinity.cols();
    let mut scores = vec![0.0; k];
    for (s_row, m_row) in affinity.row_iter().zip(mask.row_iter()) {
        for j in 0..k {
            scores[j] += m_row[j] * s_row[j];
        }
    }
    Ok(Tensor::vector(scores))
}

/// Video prototype index from the affinities under `rule`.
pub fn vote(affinity: &Tensor, mask: &Tensor, rule: VoteRule) -> Result<usize> {
    let scores = masked_vote_scores(affinity, mask)?;
    Ok(match rule {
        VoteRule::Summed => argmax(scores.data().iter().copied()),
        VoteRule::Count => {
            let counts = masked_vote_scores(mask, mask)?;
            let mut best = 0;
            for k in 1..counts.len() {
                let (c, bc) = (counts.data()[k], counts.data()[best]);
                if c > bc || (c == bc && scores.data()[k] > scores.data()[best]) {
                    best = k;
                }
            }
            best
        }
    })
}

/// Discretize from a precomputed affinity matrix.
pub fn discretize_affinity(
    affinity: Tensor,
    codebook: &Codebook,
    rule: VoteRule,
) -> Result<DiscretizationResult> {
    if affinity.rank() != 2 || affinity.cols() != codebook.len() {
        return Err(Error::dim(
            "discretize",
            affinity.shape(),
            &[affinity.rows(), codebook.len()],
        ));
    }
    let (assignments, mask) = hard_assign(&affinity);
    let k_max = vote(&affinity, &mask, rule)?;
    let confidence = (0..affinity.rows()).map(|t| affinity.get(t, k_max)).collect();
    Ok(DiscretizationResult {
        v: codebook.row(k_max).to_vec(),
        affinity,
        assignments,
        mask,
        k_max,
        confidence,
    })
}

/// Assign every frame, vote a video prototype, and return its codebook row.
pub fn discretize_video(frames: &Tensor, codebook: &Codebook) -> Result<DiscretizationResult> {
    discretize_video_with(frames, codebook, VoteRule::default())
}

pub fn discretize_video_with(
    frames: &Tensor,
    codebook: &Codebook,
    rule: VoteRule,
) -> Result<DiscretizationResult> {
    if frames.rank() != 2 {
        return Err(Error::Degenerate(
            "a video needs a T×d frame matrix with T ≥ 1".into(),
        ));
    }
    discretize_affinity(affinity(frames, codebook)?, codebook, rule)
}

/// One `inspect` line per frame plus a trailer:
///
/// ```text
/// frame_index, assigned_class_label, assigned_similarity, confidence_weight
/// k_max, video_label, correct:{true|false}
/// ```
pub fn format_inspect(
    result: &DiscretizationResult,
    weights: &[f64],
    codebook: &Codebook,
    video_label: &str,
) -> String {
    let mut out = String::new();
    for (t, &k) in result.assignments.iter().enumerate() {
        out.push_str(&format!(
            "{t}, {}, {:.6}, {:.6}\n",
            codebook.label(k),
            result.affinity.get(t, k),
            weights.get(t).copied().unwrap_or(0.0)
        ));
    }
    out.push_str(&format!(
        "{}, {}, correct:{}\n",
        result.k_max,
        video_label,
        codebook.label(result.k_max) == video_label
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class{i}")).collect()
    }

    fn axis_codebook(k: usize, d: usize) -> Codebook {
        let mut t = Tensor::zeros(&[k, d]);
        for i in 0..k {
            t.data_mut()[i * d + i] = 1.0;
        }
        Codebook::from_prototypes(labels(k), t).unwrap()
    }

    #[test]
    fn rejects_duplicates_and_non_unit_rows() {
        let t = Tensor::eye(2);
        assert!(Codebook::from_prototypes(vec!["a".into(), "a".into()], t.clone()).is_err());
        assert!(Codebook::from_prototypes(labels(2), t.scale(2.0)).is_err());
        assert!(Codebook::from_prototypes(vec![], t).is_err());
    }

    #[test]
    fn quantize_identity_and_tie() {
        let cb = axis_codebook(3, 3);
        assert_eq!(quantize(cb.row(2), &cb).unwrap(), 2);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        // equidistant from c0 and c1
        assert_eq!(quantize(&[h, h, 0.0], &cb).unwrap(), 0);
    }

    #[test]
    fn single_frame_video() {
        let cb = axis_codebook(3, 4);
        let frames = Tensor::matrix(1, 4, vec![0.1, 0.9, 0.2, 0.0]).unwrap();
        let r = discretize_video(&frames, &cb).unwrap();
        assert_eq!(r.k_max, r.assignments[0]);
        assert_eq!(r.v, cb.row(r.assignments[0]));
    }

    #[test]
    fn perfectly_aligned_frames() {
        let cb = axis_codebook(3, 3);
        let frames = Tensor::from_rows(&[cb.row(1), cb.row(1), cb.row(1)]).unwrap();
        let r = discretize_video(&frames, &cb).unwrap();
        assert_eq!(r.k_max, 1);
        assert!(r.confidence.iter().all(|&c| (c - 1.0).abs() < 1e-15));
        assert_eq!(r.mask.row(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn vote_scores_empty_bag_and_singleton() {
        let s = Tensor::matrix(1, 3, vec![0.9, 0.2, -0.1]).unwrap();
        let m = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let scores = masked_vote_scores(&s, &m).unwrap();
        assert_eq!(scores.data(), &[0.9, 0.0, 0.0]);
        assert!(masked_vote_scores(&s, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn four_weak_frames_beat_one_strong_frame() {
        let s = Tensor::from_rows(&[
            vec![0.5, 0.1],
            vec![0.5, 0.1],
            vec![0.5, 0.1],
            vec![0.5, 0.1],
            vec![0.0, 0.9],
        ])
        .unwrap();
        let (_, m) = hard_assign(&s);
        assert_eq!(masked_vote_scores(&s, &m).unwrap().data(), &[2.0, 0.9]);
        assert_eq!(vote(&s, &m, VoteRule::Summed).unwrap(), 0);
    }

    #[test]
    fn count_rule_differs_from_summed() {
        // two frames at 0.3 for class 0, one at 0.95 for class 1
        let s = Tensor::from_rows(&[vec![0.3, 0.2], vec![0.3, 0.2], vec![0.1, 0.95]]).unwrap();
        let (_, m) = hard_assign(&s);
        assert_eq!(vote(&s, &m, VoteRule::Summed).unwrap(), 1);
        assert_eq!(vote(&s, &m, VoteRule::Count).unwrap(), 0);
    }

    #[test]
    fn empty_video_is_degenerate() {
        let cb = axis_codebook(2, 2);
        assert!(discretize_video(&Tensor::vector(vec![1.0, 0.0]), &cb).is_err());
    }

    #[test]
    fn inspect_format() {
        let cb = axis_codebook(2, 2);
        let frames = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.1]]).unwrap();
        let r = discretize_video(&frames, &cb).unwrap();
        let dump = format_inspect(&r, &[0.5, 0.2, 0.3], &cb, "class0");
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "0, class0, 1.000000, 0.500000");
        assert_eq!(lines[3], "0, class0, correct:true");
    }
}
