//! Confusion-matrix accumulation and segmentation metrics.

use crate::data::IGNORE_LABEL;
use crate::error::{Error, Result};

/// How classes absent from both prediction and ground truth enter the mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AbsentClassPolicy {
    /// Drop absent classes from the mIoU mean (common VOC tooling behavior).
    #[default]
    Exclude,
    /// Count absent classes as IoU 0.
    CountAsZero,
}

/// Rows are ground truth, columns are prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
            ignored: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.ignored
    }

    /// Add one prediction/label map pair; ignore-label pixels are skipped.
    pub fn accumulate(&mut self, prediction: &[u8], labels: &[u8]) -> Result<()> {
        if prediction.len() != labels.len() {
            return Err(Error::shape(
                "metric maps",
                labels.len().to_string(),
                prediction.len().to_string(),
            ));
        }
        for (&p, &t) in prediction.iter().zip(labels) {
            if t == IGNORE_LABEL {
                self.ignored += 1;
                continue;
            }
            if (t as usize) >= self.classes {
                return Err(Error::Data(format!(
                    "ground-truth label {t} out of range for {} classes",
                    self.classes
                )));
            }
            if (p as usize) >= self.classes {
                return Err(Error::Logic(format!(
                    "prediction {p} out of range for {} classes (classifier contract breach)",
                    self.classes
                )));
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Entrywise sum, so per-worker matrices reduce associatively.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(
                "confusion matrix merge",
                self.classes.to_string(),
                other.classes.to_string(),
            ));
        }
        for (dst, src) in self.counts.iter_mut().zip(&other.counts) {
            *dst += src;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.counts.iter().all(|&c| c == 0) {
            return Err(Error::UndefinedMetric(
                "confusion matrix holds no non-ignored pixels".into(),
            ));
        }
        Ok(())
    }

    /// Per-class intersection over union; `None` for classes absent from
    /// both prediction and ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let diag = self.count(k, k);
                let row: u64 = (0..self.classes).map(|j| self.count(k, j)).sum();
                let col: u64 = (0..self.classes).map(|i| self.count(i, k)).sum();
                let union = row + col - diag;
                if union == 0 {
                    None
                } else {
                    Some(diag as f64 / union as f64)
                }
            })
            .collect()
    }

    pub fn miou_with(&self, policy: AbsentClassPolicy) -> Result<f64> {
        self.require_nonempty()?;
        let ious = self.per_class_iou();
        let (sum, n) = match policy {
            AbsentClassPolicy::Exclude => ious
                .iter()
                .flatten()
                .fold((0.0, 0usize), |(s, n), &iou| (s + iou, n + 1)),
            AbsentClassPolicy::CountAsZero => (
                ious.iter().map(|iou| iou.unwrap_or(0.0)).sum(),
                self.classes,
            ),
        };
        Ok(sum / n as f64)
    }

    pub fn miou(&self) -> Result<f64> {
        self.miou_with(AbsentClassPolicy::Exclude)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        self.require_nonempty()?;
        let trace: u64 = (0..self.classes).map(|k| self.count(k, k)).sum();
        let total: u64 = self.counts.iter().sum();
        Ok(trace as f64 / total as f64)
    }

    /// Arithmetic mean of pixel accuracy and mIoU. Benchmark organizers have
    /// published final scores that differ slightly from this plain mean; the
    /// exact combination is unspecified, so the mean is used as stated.
    pub fn final_score(&self) -> Result<f64> {
        Ok((self.pixel_accuracy()? + self.miou()?) / 2.0)
    }
}

/// Header for the metrics CSV: epoch, split, one IoU column per class, then
/// the three aggregates.
pub fn csv_header(classes: usize) -> String {
    let mut cols = vec!["epoch".to_string(), "split".to_string()];
    cols.extend((0..classes).map(|k| format!("iou_{k}")));
    cols.extend(["miou", "pix_acc", "final_score"].map(String::from));
    cols.join(",")
}

pub fn csv_row(epoch: usize, split: &str, cm: &ConfusionMatrix) -> Result<String> {
    let mut cols = vec![epoch.to_string(), split.to_string()];
    for iou in cm.per_class_iou() {
        cols.push(match iou {
            Some(v) => format!("{v:.6}"),
            None => String::new(),
        });
    }
    cols.push(format!("{:.6}", cm.miou()?));
    cols.push(format!("{:.6}", cm.pixel_accuracy()?));
    cols.push(format!("{:.6}", cm.final_score()?));
    Ok(cols.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;

    #[test]
    fn perfect_prediction_is_diagonal_with_unit_metrics() {
        let mut cm = ConfusionMatrix::new(3);
        let labels = vec![0u8, 1, 2, 1, 0, 2, 2, 1];
        cm.accumulate(&labels, &labels).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t != p {
                    assert_eq!(cm.count(t, p), 0);
                }
            }
        }
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert_eq!(cm.pixel_accuracy().unwrap(), 1.0);
        assert_eq!(cm.final_score().unwrap(), 1.0);
    }

    #[test]
    fn all_ignored_yields_zero_matrix_and_undefined_metrics() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2], &[255, 255, 255]).unwrap();
        assert_eq!(cm.ignored(), 3);
        assert!(cm.counts.iter().all(|&c| c == 0));
        assert!(matches!(cm.miou(), Err(Error::UndefinedMetric(_))));
    }

    /// Independent per-pixel counting oracle on a random 8x8 case.
    #[test]
    fn accumulate_matches_loop_count_oracle() {
        let mut rng = Rng64::new(31);
        let classes = 4usize;
        let labels: Vec<u8> = (0..64)
            .map(|_| {
                if rng.below(10) == 0 {
                    255
                } else {
                    rng.below(classes) as u8
                }
            })
            .collect();
        let preds: Vec<u8> = (0..64).map(|_| rng.below(classes) as u8).collect();

        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&preds, &labels).unwrap();

        let mut expected = vec![0u64; classes * classes];
        let mut ignored = 0u64;
        for (&p, &t) in preds.iter().zip(&labels) {
            if t == 255 {
                ignored += 1;
            } else {
                expected[t as usize * classes + p as usize] += 1;
            }
        }
        assert_eq!(cm.counts, expected);
        assert_eq!(cm.ignored(), ignored);
        assert_eq!(cm.total(), 64);
    }

    /// Two classes, constant class-0 prediction, labels half 0 half 1:
    /// IoU_0 = 0.5, IoU_1 = 0, mIoU = 0.25, pixAcc = 0.5.
    #[test]
    fn hand_counted_two_class_case() {
        let mut cm = ConfusionMatrix::new(2);
        let labels = vec![0u8, 0, 1, 1];
        let preds = vec![0u8, 0, 0, 0];
        cm.accumulate(&preds, &labels).unwrap();
        let ious = cm.per_class_iou();
        assert_eq!(ious[0], Some(0.5));
        assert_eq!(ious[1], Some(0.0));
        assert_eq!(cm.miou().unwrap(), 0.25);
        assert_eq!(cm.pixel_accuracy().unwrap(), 0.5);
        assert_eq!(cm.final_score().unwrap(), 0.375);
    }

    /// The plain-mean combination on a published metric triple: the stated
    /// final score differs, which is exactly why the mean is documented as
    /// an approximation.
    #[test]
    fn final_score_is_the_plain_mean() {
        let pix_acc = 0.7390f64;
        let miou = 0.3866f64;
        let mean = (pix_acc + miou) / 2.0;
        assert!((mean - 0.5628).abs() < 1e-4);
        assert!((mean - 0.5588).abs() > 1e-3);
    }

    #[test]
    fn absent_classes_excluded_or_zeroed_by_policy() {
        let mut cm = ConfusionMatrix::new(3);
        // Class 2 never appears.
        cm.accumulate(&[0, 1, 1], &[0, 1, 0]).unwrap();
        assert_eq!(cm.per_class_iou()[2], None);
        let excl = cm.miou_with(AbsentClassPolicy::Exclude).unwrap();
        let zeroed = cm.miou_with(AbsentClassPolicy::CountAsZero).unwrap();
        assert!(excl > zeroed);
        assert!((excl * 2.0 - zeroed * 3.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_permutation_equivariant() {
        let mut rng = Rng64::new(17);
        let classes = 4usize;
        let labels: Vec<u8> = (0..200).map(|_| rng.below(classes) as u8).collect();
        let preds: Vec<u8> = (0..200).map(|_| rng.below(classes) as u8).collect();
        let perm = [2u8, 0, 3, 1];

        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&preds, &labels).unwrap();
        let relabel = |v: &[u8]| -> Vec<u8> { v.iter().map(|&x| perm[x as usize]).collect() };
        let mut cm_perm = ConfusionMatrix::new(classes);
        cm_perm
            .accumulate(&relabel(&preds), &relabel(&labels))
            .unwrap();

        assert_eq!(cm.miou().unwrap(), cm_perm.miou().unwrap());
        assert_eq!(
            cm.pixel_accuracy().unwrap(),
            cm_perm.pixel_accuracy().unwrap()
        );
    }

    #[test]
    fn accumulate_is_order_independent_and_merge_matches() {
        let mut rng = Rng64::new(23);
        let labels: Vec<u8> = (0..100).map(|_| rng.below(3) as u8).collect();
        let preds: Vec<u8> = (0..100).map(|_| rng.below(3) as u8).collect();

        let mut whole = ConfusionMatrix::new(3);
        whole.accumulate(&preds, &labels).unwrap();

        let mut first = ConfusionMatrix::new(3);
        first.accumulate(&preds[..40], &labels[..40]).unwrap();
        let mut second = ConfusionMatrix::new(3);
        second.accumulate(&preds[40..], &labels[40..]).unwrap();
        second.merge(&first).unwrap();
        assert_eq!(whole, second);
    }

    #[test]
    fn metric_range_is_unit_interval() {
        let mut rng = Rng64::new(29);
        for seed in 0..10u64 {
            let mut r = Rng64::new(seed);
            let labels: Vec<u8> = (0..64).map(|_| r.below(3) as u8).collect();
            let preds: Vec<u8> = (0..64).map(|_| rng.below(3) as u8).collect();
            let mut cm = ConfusionMatrix::new(3);
            cm.accumulate(&preds, &labels).unwrap();
            for v in [
                cm.miou().unwrap(),
                cm.pixel_accuracy().unwrap(),
                cm.final_score().unwrap(),
            ] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn out_of_range_prediction_is_a_logic_error() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(
            cm.accumulate(&[5], &[1]),
            Err(Error::Logic(_))
        ));
    }

    #[test]
    fn csv_layout() {
        assert_eq!(
            csv_header(3),
            "epoch,split,iou_0,iou_1,iou_2,miou,pix_acc,final_score"
        );
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1], &[0, 1]).unwrap();
        let row = csv_row(7, "val", &cm).unwrap();
        assert_eq!(row, "7,val,1.000000,1.000000,1.000000,1.000000,1.000000");
    }
}
