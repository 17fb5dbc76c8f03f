//! Saliency evaluation: maximum F-measure over 256 binarization thresholds
//! and mean absolute error, with the per-threshold PR curve.
//!
//! Conventions (also embedded in every report): predictions are resized to
//! the ground-truth resolution bilinearly; per-frame precision/recall are
//! averaged over the dataset *before* F is computed; frames with empty
//! ground truth are excluded from the PR averages (their count is reported)
//! but still contribute to MAE; precision is 0 when nothing is predicted
//! positive. Evaluation always runs in double precision.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, Tensor};

pub const NUM_THRESHOLDS: usize = 256;
pub const DEFAULT_BETA2: f64 = 0.3;

/// One threshold's dataset-averaged precision/recall/F triple.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalConventions {
    pub thresholds: usize,
    pub beta2: f64,
    pub averaging: &'static str,
    pub empty_gt_frames: &'static str,
    pub prediction_resize: &'static str,
}

impl Default for EvalConventions {
    fn default() -> Self {
        Self {
            thresholds: NUM_THRESHOLDS,
            beta2: DEFAULT_BETA2,
            averaging: "per-frame precision/recall averaged over the dataset before F",
            empty_gt_frames: "excluded from PR averages, counted, included in MAE",
            prediction_resize: "bilinear to ground-truth resolution",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub per_threshold: Vec<PrPoint>,
    pub f_max: f64,
    pub mae: f64,
    pub frame_count: usize,
    /// Frames whose ground truth had no foreground.
    pub empty_gt_excluded: usize,
    pub conventions: EvalConventions,
}

fn check_binary(gt: &Tensor<f64>) -> Result<()> {
    if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data("ground truth is not binary".into()));
    }
    Ok(())
}

fn align(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<Tensor<f64>> {
    if pred.shape().len() != 3 || gt.shape().len() != 3 {
        return Err(Error::Shape("maps must be 1xHxW".into()));
    }
    let p = if pred.height() != gt.height() || pred.width() != gt.width() {
        bilinear_resize(pred, gt.height(), gt.width())
    } else {
        pred.clone()
    };
    Ok(p)
}

fn threshold_level(threshold: usize) -> f64 {
    (threshold as f64 + 0.5) / NUM_THRESHOLDS as f64
}

/// Precision/recall for one frame at one of the 256 thresholds. The
/// prediction is binarized at `(threshold + 0.5)/256`; precision is 0 when
/// nothing is predicted positive, recall is 1 when the ground truth is empty.
pub fn pr_at_threshold(
    pred: &Tensor<f64>,
    gt: &Tensor<f64>,
    threshold: usize,
) -> Result<(f64, f64)> {
    if threshold >= NUM_THRESHOLDS {
        return Err(Error::Config(format!("threshold {threshold} out of 0..255")));
    }
    check_binary(gt)?;
    let pred = align(pred, gt)?;
    let level = threshold_level(threshold);
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fneg = 0u64;
    for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
        let pos = p > level;
        let truth = g == 1.0;
        match (pos, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fneg == 0 {
        1.0
    } else {
        tp as f64 / (tp + fneg) as f64
    };
    Ok((precision, recall))
}

fn f_measure(precision: f64, recall: f64, beta2: f64) -> f64 {
    let denom = beta2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / denom
    }
}

fn check_sets(preds: &[Tensor<f64>], gts: &[Tensor<f64>]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Data(format!(
            "unpaired evaluation sets: {} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    Ok(())
}

/// Full threshold sweep over an aligned set; also computes MAE.
pub fn evaluate(preds: &[Tensor<f64>], gts: &[Tensor<f64>], beta2: f64) -> Result<EvalResult> {
    check_sets(preds, gts)?;
    let mut sum_p = vec![0.0f64; NUM_THRESHOLDS];
    let mut sum_r = vec![0.0f64; NUM_THRESHOLDS];
    let mut counted = 0usize;
    let mut empty_gt = 0usize;
    let mut mae_sum = 0.0f64;
    for (pred, gt) in preds.iter().zip(gts.iter()) {
        check_binary(gt)?;
        let pred = align(pred, gt)?;
        mae_sum += frame_mae(&pred, gt);
        let foreground: f64 = gt.data().iter().sum();
        if foreground == 0.0 {
            empty_gt += 1;
            continue;
        }
        counted += 1;
        // one pass per frame: histogram of prediction levels split by truth
        let mut pos_hist = [0u64; NUM_THRESHOLDS + 1];
        let mut neg_hist = [0u64; NUM_THRESHOLDS + 1];
        for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
            // bucket b: prediction exceeds thresholds 0..b-1 exactly
            let b = (p * NUM_THRESHOLDS as f64 - 0.5).ceil().clamp(0.0, NUM_THRESHOLDS as f64)
                as usize;
            if g == 1.0 {
                pos_hist[b] += 1;
            } else {
                neg_hist[b] += 1;
            }
        }
        let total_pos: u64 = pos_hist.iter().sum();
        let mut tp: u64 = 0;
        let mut fp: u64 = 0;
        for t in (0..NUM_THRESHOLDS).rev() {
            tp += pos_hist[t + 1];
            fp += neg_hist[t + 1];
            let precision = if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let recall = tp as f64 / total_pos as f64;
            sum_p[t] += precision;
            sum_r[t] += recall;
        }
    }
    let per_threshold: Vec<PrPoint> = (0..NUM_THRESHOLDS)
        .map(|t| {
            let (p, r) = if counted == 0 {
                (0.0, 0.0)
            } else {
                (sum_p[t] / counted as f64, sum_r[t] / counted as f64)
            };
            PrPoint {
                precision: p,
                recall: r,
                f_measure: f_measure(p, r, beta2),
            }
        })
        .collect();
    let f_max = per_threshold
        .iter()
        .map(|pt| pt.f_measure)
        .fold(0.0f64, f64::max);
    Ok(EvalResult {
        per_threshold,
        f_max,
        mae: mae_sum / preds.len() as f64,
        frame_count: preds.len(),
        empty_gt_excluded: empty_gt,
        conventions: EvalConventions {
            beta2,
            ..EvalConventions::default()
        },
    })
}

/// Maximum F-measure fields of [`evaluate`].
pub fn max_f_measure(preds: &[Tensor<f64>], gts: &[Tensor<f64>], beta2: f64) -> Result<EvalResult> {
    evaluate(preds, gts, beta2)
}

fn frame_mae(pred: &Tensor<f64>, gt: &Tensor<f64>) -> f64 {
    let mut acc = 0.0;
    for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
        acc += (p - g).abs();
    }
    acc / pred.len() as f64
}

/// Mean over frames of the mean absolute pixel difference.
pub fn mae(preds: &[Tensor<f64>], gts: &[Tensor<f64>]) -> Result<f64> {
    check_sets(preds, gts)?;
    let mut acc = 0.0;
    for (pred, gt) in preds.iter().zip(gts.iter()) {
        let pred = align(pred, gt)?;
        acc += frame_mae(&pred, gt);
    }
    Ok(acc / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>, h: usize, w: usize) -> Tensor<f64> {
        Tensor::new(vec![1, h, w], values).unwrap()
    }

    #[test]
    fn perfect_prediction_is_perfect_everywhere() {
        let gt = map(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        for t in 0..NUM_THRESHOLDS {
            let (p, r) = pr_at_threshold(&gt, &gt, t).unwrap();
            assert_eq!((p, r), (1.0, 1.0), "threshold {t}");
        }
        let res = evaluate(&[gt.clone()], &[gt.clone()], DEFAULT_BETA2).unwrap();
        assert_eq!(res.f_max, 1.0);
        assert_eq!(res.mae, 0.0);
    }

    #[test]
    fn inverted_prediction_scores_zero() {
        let gt = map(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let inv = gt.map(|v| 1.0 - v);
        let (p, r) = pr_at_threshold(&inv, &gt, 128).unwrap();
        assert_eq!((p, r), (0.0, 0.0));
    }

    #[test]
    fn non_binary_gt_rejected() {
        let gt = map(vec![0.5, 0.0, 0.0, 1.0], 2, 2);
        let pred = map(vec![0.0; 4], 2, 2);
        assert!(pr_at_threshold(&pred, &gt, 10).is_err());
    }

    #[test]
    fn f_equals_p_when_p_equals_r() {
        // algebraic identity of the F formula
        let f = f_measure(0.5, 0.5, DEFAULT_BETA2);
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn all_zero_prediction_mae_is_foreground_fraction() {
        let gt = map(vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2, 4);
        let zero = map(vec![0.0; 8], 2, 4);
        assert_eq!(mae(&[zero], &[gt]).unwrap(), 0.25);
    }

    #[test]
    fn empty_gt_frame_excluded_but_counted() {
        let gt_fg = map(vec![1.0, 0.0, 0.0, 0.0], 2, 2);
        let gt_empty = map(vec![0.0; 4], 2, 2);
        let pred = map(vec![1.0, 0.0, 0.0, 0.0], 2, 2);
        let res = evaluate(
            &[pred.clone(), pred.clone()],
            &[gt_fg, gt_empty],
            DEFAULT_BETA2,
        )
        .unwrap();
        assert_eq!(res.empty_gt_excluded, 1);
        assert_eq!(res.frame_count, 2);
        assert_eq!(res.f_max, 1.0);
    }

    #[test]
    fn evaluate_matches_pr_at_threshold() {
        // cross-check the histogram sweep against the direct per-threshold op
        let pred = map(vec![0.1, 0.4, 0.6, 0.9, 0.2, 0.8, 0.0, 1.0, 0.5], 3, 3);
        let gt = map(vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0], 3, 3);
        let res = evaluate(&[pred.clone()], &[gt.clone()], DEFAULT_BETA2).unwrap();
        for t in (0..NUM_THRESHOLDS).step_by(17) {
            let (p, r) = pr_at_threshold(&pred, &gt, t).unwrap();
            assert!((res.per_threshold[t].precision - p).abs() < 1e-12, "t={t}");
            assert!((res.per_threshold[t].recall - r).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn unpaired_sets_rejected() {
        let m = map(vec![0.0; 4], 2, 2);
        assert!(evaluate(&[m.clone()], &[], DEFAULT_BETA2).is_err());
        assert!(mae(&[], &[]).is_err());
    }
}
