//! Multi-label and multiclass evaluation metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Decision threshold on sigmoid probabilities for multi-label predictions.
pub const THRESHOLD: f64 = 0.5;

fn check_binary(t: &Tensor, what: &str) -> Result<()> {
    if let Some(bad) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!(
            "{what} entry {bad} is not 0 or 1"
        )));
    }
    Ok(())
}

fn column(t: &Tensor, c: usize) -> Vec<f64> {
    let (m, n) = t.dims2().expect("matrix");
    (0..m).map(|i| t.data()[i * n + c]).collect()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    a.dims2()
}

/// Average of the precision at the rank of every positive, ranking by
/// descending score with ties kept in input order. `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub map: f64,
    /// AP of every class; `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// Mean AP over the classes that have at least one positive.
pub fn mean_average_precision(scores: &Tensor, targets: &Tensor) -> Result<MapReport> {
    let (_, c) = same_shape("mean_average_precision", scores, targets)?;
    check_binary(targets, "target")?;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let pos: Vec<bool> = column(targets, k).iter().map(|&v| v == 1.0).collect();
            average_precision(&column(scores, k), &pos)
        })
        .collect();
    let skipped: Vec<usize> = (0..c).filter(|&k| per_class[k].is_none()).collect();
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(Error::Metric("no class has a positive target".into()));
    }
    Ok(MapReport {
        map: vals.iter().sum::<f64>() / vals.len() as f64,
        per_class,
        skipped,
    })
}

/// Ranks starting at 1 with tied values sharing their mid-rank.
fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUC; `None` unless both classes are present.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let np = positive.iter().filter(|&&p| p).count();
    let nn = positive.len() - np;
    if np == 0 || nn == 0 {
        return None;
    }
    let ranks = mid_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (np * (np + 1)) as f64 / 2.0;
    Some(u / (np * nn) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AucAverage {
    #[default]
    Macro,
    /// Pools every (sample, class) pair into one binary problem.
    Micro,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AucReport {
    pub auc: f64,
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

pub fn roc_auc(scores: &Tensor, targets: &Tensor, average: AucAverage) -> Result<AucReport> {
    let (_, c) = same_shape("roc_auc", scores, targets)?;
    check_binary(targets, "target")?;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let pos: Vec<bool> = column(targets, k).iter().map(|&v| v == 1.0).collect();
            binary_auc(&column(scores, k), &pos)
        })
        .collect();
    let skipped: Vec<usize> = (0..c).filter(|&k| per_class[k].is_none()).collect();
    let auc = match average {
        AucAverage::Macro => {
            let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
            if vals.is_empty() {
                return Err(Error::Metric(
                    "no class has both positives and negatives".into(),
                ));
            }
            vals.iter().sum::<f64>() / vals.len() as f64
        }
        AucAverage::Micro => {
            let pos: Vec<bool> = targets.data().iter().map(|&v| v == 1.0).collect();
            binary_auc(scores.data(), &pos)
                .ok_or_else(|| Error::Metric("targets are all positive or all negative".into()))?
        }
    };
    Ok(AucReport {
        auc,
        per_class,
        skipped,
    })
}

/// Fraction of mismatched label bits.
pub fn hamming_distance(pred: &Tensor, targets: &Tensor) -> Result<f64> {
    same_shape("hamming_distance", pred, targets)?;
    check_binary(pred, "prediction")?;
    check_binary(targets, "target")?;
    let wrong = pred
        .data()
        .iter()
        .zip(targets.data())
        .filter(|(a, b)| a != b)
        .count();
    Ok(wrong as f64 / pred.len() as f64)
}

/// 0/1 predictions from logits by thresholding the sigmoid.
pub fn binarize_logits(logits: &Tensor) -> Tensor {
    let data = logits
        .data()
        .iter()
        .map(|&x| {
            if math::sigmoid(x) > THRESHOLD {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(logits.shape().to_vec(), data).expect("same shape")
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim("accuracy", &[pred.len()], &[truth.len()]));
    }
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mcc {
    pub value: f64,
    /// The denominator vanished (a single predicted or true class); the value is 0.
    pub degenerate: bool,
}

/// Multiclass Matthews correlation from the `S × S` confusion matrix.
pub fn matthews_corrcoef(pred: &[usize], truth: &[usize], classes: usize) -> Result<Mcc> {
    if pred.len() != truth.len() {
        return Err(Error::dim(
            "matthews_corrcoef",
            &[pred.len()],
            &[truth.len()],
        ));
    }
    let mut conf = vec![0u64; classes * classes];
    for (&p, &t) in pred.iter().zip(truth) {
        for v in [p, t] {
            if v >= classes {
                return Err(Error::Index {
                    what: "class label",
                    index: v,
                    bound: classes,
                });
            }
        }
        conf[t * classes + p] += 1;
    }
    let s = pred.len() as f64;
    let correct: f64 = (0..classes).map(|k| conf[k * classes + k] as f64).sum();
    let t_k: Vec<f64> = (0..classes)
        .map(|k| (0..classes).map(|j| conf[k * classes + j] as f64).sum())
        .collect();
    let p_k: Vec<f64> = (0..classes)
        .map(|k| (0..classes).map(|i| conf[i * classes + k] as f64).sum())
        .collect();
    let tp: f64 = t_k.iter().zip(&p_k).map(|(a, b)| a * b).sum();
    let num = correct * s - tp;
    let den = (s * s - p_k.iter().map(|v| v * v).sum::<f64>())
        * (s * s - t_k.iter().map(|v| v * v).sum::<f64>());
    if den <= 0.0 {
        return Ok(Mcc {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Mcc {
        value: num / math::sqrt(den),
        degenerate: false,
    })
}

/// Index of the largest entry of every row (first one on ties).
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let (m, n) = t.dims2().expect("matrix");
    (0..m)
        .map(|i| {
            let row = &t.data()[i * n..(i + 1) * n];
            (0..n).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub auc: f64,
    pub hamming: f64,
    pub acc: f64,
    pub mcc: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
    pub mcc_degenerate: bool,
}

/// Semantic metrics from object logits plus biometric ACC/MCC from subject logits.
pub fn evaluate(
    subject_logits: &Tensor,
    subjects: &[usize],
    object_logits: &Tensor,
    labels: &Tensor,
    average: AucAverage,
) -> Result<EvalReport> {
    let s = subject_logits.dims2()?.1;
    let pred = argmax_rows(subject_logits);
    let map = mean_average_precision(object_logits, labels)?;
    let auc = roc_auc(object_logits, labels, average)?;
    let hamming = hamming_distance(&binarize_logits(object_logits), labels)?;
    let mcc = matthews_corrcoef(&pred, subjects, s)?;
    Ok(EvalReport {
        map: map.map,
        auc: auc.auc,
        hamming,
        acc: accuracy(&pred, subjects)?,
        mcc: mcc.value,
        per_class_ap: map.per_class,
        skipped_classes: map.skipped,
        mcc_degenerate: mcc.degenerate,
    })
}
