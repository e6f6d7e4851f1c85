//! Confusion matrix, per-class IoU and accuracy.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Rows are ground truth, columns predictions. Points whose label equals the
/// ignore id are skipped; a prediction outside `0..k` counts as a miss for
/// the true class only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
    stray: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegMetrics {
    /// `None` for classes absent from both labels and predictions.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub accuracy: f64,
    pub n_points: u64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
            stray: vec![0; k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn add(&mut self, pred: &[u32], labels: &[u32], ignore: u32) -> Result<()> {
        if pred.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} labels",
                pred.len(),
                labels.len()
            )));
        }
        for (&p, &l) in pred.iter().zip(labels) {
            if l == ignore {
                continue;
            }
            let l = l as usize;
            if l >= self.k {
                return Err(Error::Data(format!(
                    "label {l} out of range for {} classes",
                    self.k
                )));
            }
            if (p as usize) < self.k {
                self.counts[l * self.k + p as usize] += 1;
            } else {
                self.stray[l] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(
            self.k, other.k,
            "merging confusion matrices of different size"
        );
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        self.stray
            .iter_mut()
            .zip(&other.stray)
            .for_each(|(a, b)| *a += b);
    }

    pub fn metrics(&self) -> SegMetrics {
        let k = self.k;
        let mut iou = Vec::with_capacity(k);
        let mut correct = 0u64;
        let mut total = 0u64;
        for c in 0..k {
            let tp = self.get(c, c);
            let row: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() + self.stray[c];
            let col: u64 = (0..k).map(|t| self.get(t, c)).sum();
            let union = row + col - tp;
            iou.push((union > 0).then(|| tp as f64 / union as f64));
            correct += tp;
            total += row;
        }
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let accuracy = if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        };
        SegMetrics {
            iou,
            miou,
            accuracy,
            n_points: total,
        }
    }
}

/// Confusion-matrix metrics for a single prediction.
pub fn confusion_and_miou(
    pred: &[u32],
    labels: &[u32],
    k: usize,
    ignore: u32,
) -> Result<SegMetrics> {
    let mut cm = ConfusionMatrix::new(k);
    cm.add(pred, labels, ignore)?;
    Ok(cm.metrics())
}

/// `epoch,split,iou_0,…,iou_{k-1},miou,acc,loss`
pub fn csv_header(k: usize) -> String {
    let mut s = String::from("epoch,split");
    for c in 0..k {
        let _ = write!(s, ",iou_{c}");
    }
    s.push_str(",miou,acc,loss");
    s
}

pub fn csv_row(epoch: usize, split: &str, m: &SegMetrics, loss: f64) -> String {
    let mut s = format!("{epoch},{split}");
    for v in &m.iou {
        match v {
            Some(v) => {
                let _ = write!(s, ",{v:.6}");
            }
            None => s.push_str(",nan"),
        }
    }
    let _ = write!(s, ",{:.6},{:.6},{loss:.6}", m.miou, m.accuracy);
    s
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn hand_case() {
        // class 0: tp 1, fp 1, fn 1; class 1: tp 2, fp 1, fn 1.
        let m = confusion_and_miou(&[0, 1, 1, 0, 1], &[0, 1, 0, 1, 1], 2, 255).unwrap();
        assert_eq!(m.iou, vec![Some(1.0 / 3.0), Some(0.5)]);
        assert!((m.miou - 5.0 / 12.0).abs() < 1e-15);
        assert!((m.accuracy - 0.6).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_excluded() {
        let m = confusion_and_miou(&[0, 0, 1, 0], &[0, 0, 1, 1], 3, 255).unwrap();
        assert_eq!(m.iou[2], None);
        assert!((m.iou[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.iou[1].unwrap() - 0.5).abs() < 1e-15);
        assert!((m.miou - 7.0 / 12.0).abs() < 1e-15);
        let m = confusion_and_miou(&[0, 0, 1, 2], &[0, 0, 1, 1], 3, 255).unwrap();
        assert_eq!(m.iou, vec![Some(1.0), Some(0.5), Some(0.0)]);
        assert!((m.miou - 0.5).abs() < 1e-15);
    }

    #[test]
    fn three_class_hand_cases() {
        // IoU 1/3, 2/3, 1/2.
        let m = confusion_and_miou(&[0, 1, 1, 1, 2, 0], &[0, 0, 1, 1, 2, 2], 3, 255).unwrap();
        assert_eq!(m.miou, 0.5);
        // A third point of class 2 lifts its IoU to 2/3.
        let m = confusion_and_miou(&[0, 1, 1, 1, 2, 2, 0], &[0, 0, 1, 1, 2, 2, 2], 3, 255).unwrap();
        assert_eq!(
            m.iou,
            vec![Some(1.0 / 3.0), Some(2.0 / 3.0), Some(2.0 / 3.0)]
        );
        assert!((m.miou - 5.0 / 9.0).abs() <= f64::EPSILON);
    }

    #[test]
    fn ignored_and_stray() {
        let m = confusion_and_miou(&[0, 1, 255], &[0, 255, 1], 2, 255).unwrap();
        assert_eq!(m.n_points, 2);
        assert_eq!(m.iou, vec![Some(1.0), Some(0.0)]);
        assert!(confusion_and_miou(&[0], &[4], 2, 255).is_err());
        assert!(confusion_and_miou(&[0, 1], &[0], 2, 255).is_err());
    }

    #[test]
    fn csv_shape() {
        assert_eq!(csv_header(2), "epoch,split,iou_0,iou_1,miou,acc,loss");
        let m = confusion_and_miou(&[0], &[0], 2, 255).unwrap();
        assert_eq!(
            csv_row(3, "val", &m, 0.25),
            "3,val,1.000000,nan,1.000000,1.000000,0.250000"
        );
    }

    proptest! {
        #[test]
        fn merge_equals_joint(
            a in proptest::collection::vec((0u32..4, 0u32..4), 0..50),
            b in proptest::collection::vec((0u32..4, 0u32..4), 0..50),
        ) {
            let split = |v: &[(u32, u32)]| -> (Vec<u32>, Vec<u32>) { v.iter().copied().unzip() };
            let (pa, la) = split(&a);
            let (pb, lb) = split(&b);
            let mut ca = ConfusionMatrix::new(4);
            ca.add(&pa, &la, 3).unwrap();
            let mut cb = ConfusionMatrix::new(4);
            cb.add(&pb, &lb, 3).unwrap();
            ca.merge(&cb);
            let mut joint = ConfusionMatrix::new(4);
            joint.add(&[pa, pb].concat(), &[la, lb].concat(), 3).unwrap();
            prop_assert_eq!(ca.metrics(), joint.metrics());
            let m = joint.metrics();
            prop_assert!((0.0..=1.0).contains(&m.miou) && (0.0..=1.0).contains(&m.accuracy));
        }
    }
}
