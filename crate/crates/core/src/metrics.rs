//! Training loss and segmentation quality metrics.

use std::fmt::Write as _;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Tensor};

/// Probability clamp used by [`ce_loss`].
pub const CE_EPS: f64 = 1e-7;

/// Default binarization threshold for predicted probabilities.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub(crate) fn check_binary(mask: &Tensor, what: &str) -> Result<()> {
    match mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::validation(format!("{what} must be binary, found {v}"))),
        None => Ok(()),
    }
}

/// Sum over `(prediction, ground truth)` pairs of the mean per-pixel binary
/// cross-entropy. Predictions are probabilities, clamped to `[ε, 1-ε]`.
pub fn ce_loss<'t>(pairs: &[(Var<'t>, &Tensor)]) -> Result<Var<'t>> {
    let (first, rest) = pairs
        .split_first()
        .ok_or_else(|| Error::validation("ce_loss needs at least one pair"))?;
    check_binary(first.1, "ground truth")?;
    let mut total = first.0.bce(first.1, CE_EPS)?;
    for (pred, gt) in rest {
        check_binary(gt, "ground truth")?;
        total = total.add(&pred.bce(gt, CE_EPS)?)?;
    }
    Ok(total)
}

/// `1` where `prob >= threshold`.
pub fn binarize(prob: &Tensor, threshold: f64) -> Tensor {
    prob.map(|p| if p >= threshold { 1.0 } else { 0.0 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameMetrics {
    pub dice: f64,
    pub iou: f64,
    pub recall: f64,
    pub mae: f64,
}

impl FrameMetrics {
    /// Arithmetic mean of each field; `None` for an empty input.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a FrameMetrics>) -> Option<FrameMetrics> {
        let mut n = 0usize;
        let mut acc = FrameMetrics::default();
        for m in items {
            n += 1;
            acc.dice += m.dice;
            acc.iou += m.iou;
            acc.recall += m.recall;
            acc.mae += m.mae;
        }
        (n > 0).then(|| FrameMetrics {
            dice: acc.dice / n as f64,
            iou: acc.iou / n as f64,
            recall: acc.recall / n as f64,
            mae: acc.mae / n as f64,
        })
    }
}

/// Overlap metrics of the thresholded prediction and MAE of the continuous
/// probability map, against a binary ground truth.
///
/// Empty-set conventions: if both masks are empty every overlap metric is 1;
/// if only the ground truth is empty, recall is 1 and dice and IoU are 0.
pub fn segmentation_metrics(prob: &Tensor, gt: &Tensor, threshold: f64) -> Result<FrameMetrics> {
    if prob.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {} vs ground truth {}",
            fmt_shape(prob.shape()),
            fmt_shape(gt.shape())
        )));
    }
    check_binary(gt, "ground truth")?;
    let (mut tp, mut sr, mut gtn) = (0usize, 0usize, 0usize);
    let mut abs_err = 0.0;
    for (&p, &g) in prob.data().iter().zip(gt.data()) {
        let s = p >= threshold;
        let t = g == 1.0;
        tp += usize::from(s && t);
        sr += usize::from(s);
        gtn += usize::from(t);
        abs_err += (p - g).abs();
    }
    let union = sr + gtn - tp;
    let (dice, iou) = if sr + gtn == 0 {
        (1.0, 1.0)
    } else {
        (2.0 * tp as f64 / (sr + gtn) as f64, tp as f64 / union as f64)
    };
    let recall = if gtn == 0 { 1.0 } else { tp as f64 / gtn as f64 };
    Ok(FrameMetrics {
        dice,
        iou,
        recall,
        mae: abs_err / prob.numel().max(1) as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMetrics {
    pub name: String,
    pub frames: usize,
    pub metrics: FrameMetrics,
}

/// Per-sequence metrics and their macro average.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub sequences: Vec<SequenceMetrics>,
    pub mean: FrameMetrics,
}

pub const TABLE_HEADER: &str = "Method\tDice\tIou\tRecall\tMAE";

impl MetricsReport {
    pub fn new(method: impl Into<String>, sequences: Vec<SequenceMetrics>) -> Self {
        let mean = FrameMetrics::mean(sequences.iter().map(|s| &s.metrics)).unwrap_or_default();
        Self {
            method: method.into(),
            sequences,
            mean,
        }
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frames).sum()
    }

    /// One table row: method name and the four macro metrics.
    pub fn table_row(&self) -> String {
        format_row(&self.method, &self.mean)
    }

    /// Header plus [`table_row`](Self::table_row).
    pub fn to_table(&self) -> String {
        format!("{TABLE_HEADER}\n{}\n", self.table_row())
    }

    /// Per-sequence rows at full precision.
    pub fn details(&self) -> String {
        let mut out = String::from("Sequence\tFrames\tDice\tIou\tRecall\tMAE\n");
        for s in &self.sequences {
            let m = &s.metrics;
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", s.name, s.frames, m.dice, m.iou, m.recall, m.mae);
        }
        out
    }
}

pub fn format_row(label: &str, m: &FrameMetrics) -> String {
    format!("{label}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", m.dice, m.iou, m.recall, m.mae)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn mask(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_loss_is_tiny() {
        let tape = Tape::no_grad();
        let gt = mask(&[1, 2, 2], &[1., 0., 0., 1.]);
        let loss = ce_loss(&[(tape.constant(gt.clone()), &gt)]).unwrap().value().item();
        assert!(loss <= -(1.0 - CE_EPS).ln() + 1e-18, "{loss}");
    }

    #[test]
    fn half_prediction_is_ln2_per_pair_and_pairs_add() {
        let tape = Tape::no_grad();
        let gt = mask(&[1, 2, 2], &[1., 0., 0., 1.]);
        let half = tape.constant(Tensor::full([1, 2, 2], 0.5));
        let one = ce_loss(&[(half, &gt)]).unwrap().value().item();
        assert!((one - std::f64::consts::LN_2).abs() < 1e-12);
        let other_gt = mask(&[1, 2, 2], &[1., 1., 1., 0.]);
        let p = tape.constant(mask(&[1, 2, 2], &[0.9, 0.2, 0.6, 0.3]));
        let a = ce_loss(&[(p, &other_gt)]).unwrap().value().item();
        let both = ce_loss(&[(half, &gt), (p, &other_gt)]).unwrap().value().item();
        assert!((both - (one + a)).abs() < 1e-15);
    }

    #[test]
    fn non_binary_ground_truth_rejected() {
        let tape = Tape::no_grad();
        let gt = mask(&[1, 1, 2], &[1., 0.5]);
        let p = tape.constant(Tensor::full([1, 1, 2], 0.5));
        assert!(matches!(ce_loss(&[(p, &gt)]), Err(Error::Validation(_))));
        assert!(matches!(segmentation_metrics(&p.value(), &gt, 0.5), Err(Error::Validation(_))));
    }

    #[test]
    fn identity_and_disjoint_cases() {
        let gt = mask(&[1, 2, 2], &[1., 1., 0., 0.]);
        let m = segmentation_metrics(&gt, &gt, 0.5).unwrap();
        assert_eq!((m.dice, m.iou, m.recall, m.mae), (1.0, 1.0, 1.0, 0.0));
        let other = mask(&[1, 2, 2], &[0., 0., 1., 1.]);
        let m = segmentation_metrics(&other, &gt, 0.5).unwrap();
        assert_eq!((m.dice, m.iou, m.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_counted_two_by_two() {
        // SR = {(0,0),(0,1)}, GT = {(0,1),(1,1)}
        let sr = mask(&[1, 2, 2], &[1., 1., 0., 0.]);
        let gt = mask(&[1, 2, 2], &[0., 1., 0., 1.]);
        let m = segmentation_metrics(&sr, &gt, 0.5).unwrap();
        assert_eq!(m.dice, 0.5);
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.mae, 0.5);
    }

    #[test]
    fn empty_set_conventions() {
        let empty = Tensor::zeros([1, 2, 2]);
        let m = segmentation_metrics(&empty, &empty, 0.5).unwrap();
        assert_eq!((m.dice, m.iou, m.recall), (1.0, 1.0, 1.0));
        let some = mask(&[1, 2, 2], &[1., 0., 0., 0.]);
        let m = segmentation_metrics(&some, &empty, 0.5).unwrap();
        assert_eq!((m.dice, m.iou, m.recall), (0.0, 0.0, 1.0));
    }

    #[test]
    fn mae_uses_continuous_map() {
        let gt = mask(&[1, 1, 2], &[1., 0.]);
        let prob = mask(&[1, 1, 2], &[0.8, 0.1]);
        let m = segmentation_metrics(&prob, &gt, 0.5).unwrap();
        assert_eq!(m.dice, 1.0);
        assert!((m.mae - 0.15).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::zeros([1, 2, 2]);
        let b = Tensor::zeros([1, 2, 3]);
        assert!(matches!(segmentation_metrics(&a, &b, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn report_macro_average_and_table() {
        let seq = |name: &str, dice: f64| SequenceMetrics {
            name: name.into(),
            frames: 2,
            metrics: FrameMetrics {
                dice,
                iou: dice / 2.0,
                recall: 1.0,
                mae: 0.1,
            },
        };
        let r = MetricsReport::new("full", vec![seq("a", 0.8), seq("b", 0.6)]);
        assert!((r.mean.dice - 0.7).abs() < 1e-12);
        assert_eq!(r.to_table(), "Method\tDice\tIou\tRecall\tMAE\nfull\t0.7000\t0.3500\t1.0000\t0.1000\n");
        assert_eq!(r.total_frames(), 4);
        assert!(r.details().lines().nth(1).unwrap().starts_with("a\t2\t0.8"));
    }
}
