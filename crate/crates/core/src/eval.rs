//! Scoring with the Fake + Outlier merge rule, rank AUC and correction rate.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSet, Label};
use crate::error::{Error, Result};
use crate::trainer::{softmax, TriClassModel, CLASS_FAKE, CLASS_OUTLIER, CLASS_REAL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub label: Label,
    pub p_real: f64,
    pub p_fake: f64,
    /// Zero for two-way models.
    pub p_outlier: f64,
    pub merged_score: f64,
}

impl Scored {
    pub fn is_forged(&self) -> bool {
        self.merged_score > 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoredSet {
    pub samples: Vec<Scored>,
}

impl ScoredSet {
    pub fn scores(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.merged_score).collect()
    }

    /// `true` for any fake label.
    pub fn binary_labels(&self) -> Vec<bool> {
        self.samples.iter().map(|s| s.label.is_fake()).collect()
    }

    /// AUC of the merged score against the real/fake split; outliers and
    /// unlabeled records are skipped.
    pub fn auc(&self) -> Result<f64> {
        let (s, y): (Vec<f64>, Vec<bool>) = self
            .samples
            .iter()
            .filter(|s| s.label.is_real() || s.label.is_fake())
            .map(|s| (s.merged_score, s.label.is_fake()))
            .unzip();
        auc(&s, &y)
    }
}

/// Scores a record from the classifier probabilities.
pub fn score_probabilities(label: Label, probs: &[f64]) -> Scored {
    let p_real = probs[CLASS_REAL];
    let p_fake = probs[CLASS_FAKE];
    let p_outlier = probs.get(CLASS_OUTLIER).copied().unwrap_or(0.0);
    // 1 − p_real loses precision near saturation, so sum the forged classes
    Scored {
        label,
        p_real,
        p_fake,
        p_outlier,
        merged_score: p_fake + p_outlier,
    }
}

pub fn predict(model: &TriClassModel, set: &EmbeddingSet) -> Result<ScoredSet> {
    if set.dim() != model.dim() {
        return Err(Error::contract(format!(
            "set has dim {}, model expects {}",
            set.dim(),
            model.dim()
        )));
    }
    let samples = set
        .iter()
        .map(|(label, x)| {
            let p = softmax(&model.logits(x)?);
            Ok(score_probabilities(label, p.as_slice()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoredSet { samples })
}

/// Mann-Whitney AUC: the probability a positive outranks a negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Count in half-units so tie credit stays exact integer arithmetic.
    let mut twice_wins: u128 = 0;
    let mut negs_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (mut pos, mut neg) = (0u128, 0u128);
        for &k in &order[i..j] {
            if labels[k] {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        twice_wins += pos * (2 * negs_below + neg);
        negs_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CorrectionRate {
    Defined {
        rate: f64,
        corrected: usize,
        missed: usize,
    },
    /// The binary model misclassified no fakes.
    Undefined,
}

impl CorrectionRate {
    pub fn value(&self) -> Option<f64> {
        match self {
            CorrectionRate::Defined { rate, .. } => Some(*rate),
            CorrectionRate::Undefined => None,
        }
    }
}

/// Among fakes the binary model calls Real (`binary_forged` false), the
/// fraction the tri-class merge rule calls forged. Only entries with
/// `is_fake` set are considered.
pub fn correction_rate(
    binary_forged: &[bool],
    tri_forged: &[bool],
    is_fake: &[bool],
) -> Result<CorrectionRate> {
    if binary_forged.len() != tri_forged.len() || binary_forged.len() != is_fake.len() {
        return Err(Error::contract("prediction sets differ in length"));
    }
    let mut missed = 0;
    let mut corrected = 0;
    for i in 0..is_fake.len() {
        if is_fake[i] && !binary_forged[i] {
            missed += 1;
            if tri_forged[i] {
                corrected += 1;
            }
        }
    }
    if missed == 0 {
        return Ok(CorrectionRate::Undefined);
    }
    Ok(CorrectionRate::Defined {
        rate: corrected as f64 / missed as f64,
        corrected,
        missed,
    })
}

/// Correction rate between two scored views of the same records.
pub fn correction_rate_of(binary: &ScoredSet, tri: &ScoredSet) -> Result<CorrectionRate> {
    if binary.samples.len() != tri.samples.len()
        || binary
            .samples
            .iter()
            .zip(&tri.samples)
            .any(|(a, b)| a.label != b.label)
    {
        return Err(Error::contract("scored sets cover different records"));
    }
    let b: Vec<bool> = binary.samples.iter().map(Scored::is_forged).collect();
    let t: Vec<bool> = tri.samples.iter().map(Scored::is_forged).collect();
    correction_rate(&b, &t, &binary.binary_labels())
}

/// Correction rate within one three-way model: fakes its Real-vs-Fake
/// readout `p_fake / (p_real + p_fake)` misses, against the Fake + Outlier
/// merge rule.
pub fn self_correction_rate(tri: &ScoredSet) -> Result<CorrectionRate> {
    let b: Vec<bool> = tri.samples.iter().map(|s| s.p_fake > s.p_real).collect();
    let t: Vec<bool> = tri.samples.iter().map(Scored::is_forged).collect();
    correction_rate(&b, &t, &tri.binary_labels())
}

/// Writes `label,h_0..h_{p-1}` rows of projected, normalized features.
pub fn export_features<W: Write>(model: &TriClassModel, set: &EmbeddingSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { offset: 0, source },
        other => Error::Format(format!("{other:?}")),
    };
    let mut header = vec!["label".to_string()];
    header.extend((0..model.proj_dim()).map(|j| format!("h{j}")));
    w.write_record(&header).map_err(io)?;
    for (label, x) in set.iter() {
        let pr = model.project(x)?;
        let mut row = vec![label.code().to_string()];
        row.extend(pr.h.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()
        .map_err(|source| Error::Io { offset: 0, source })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_trivial_cases() {
        assert_eq!(
            auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(
            auc(&[0.5; 6], &[false, true, false, true, true, false]).unwrap(),
            0.5
        );
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn saturated_real_and_uniform_scores() {
        let p = softmax(&nalgebra::DVector::from_vec(vec![50.0, 0.0, 0.0]));
        let s = score_probabilities(Label::REAL, p.as_slice());
        assert!(s.merged_score < 1e-20);
        let p = softmax(&nalgebra::DVector::from_vec(vec![1.0, 1.0, 1.0]));
        let s = score_probabilities(Label::REAL, p.as_slice());
        assert!((s.merged_score - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.merged_score + s.p_real - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correction_rate_counting() {
        let fake = vec![true; 12];
        let mut binary = vec![false; 12];
        binary[10] = true;
        binary[11] = true;
        let mut tri = vec![false; 12];
        for t in tri.iter_mut().take(4) {
            *t = true;
        }
        let r = correction_rate(&binary, &tri, &fake).unwrap();
        assert_eq!(r.value(), Some(0.4));
        assert_eq!(
            correction_rate(&[true; 3], &[true; 3], &[true; 3]).unwrap(),
            CorrectionRate::Undefined
        );
    }
}
