use crate::error::{Error, Result};
use crate::microtensor::{Shape4, Tensor4};

/// Accumulated `(gt, pred)` pixel counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    ignore_index: Option<u8>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore_index: Option<u8>) -> Self {
        Self {
            num_classes,
            ignore_index,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "miou",
                Shape4::new(1, 1, 1, pred.len()),
                Shape4::new(1, 1, 1, gt.len()),
            ));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) == self.ignore_index {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.num_classes || g >= self.num_classes {
                return Err(Error::invalid(format!(
                    "label {} outside {} classes",
                    p.max(g),
                    self.num_classes
                )));
            }
            self.counts[g * self.num_classes + p] += 1;
        }
        Ok(())
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Per-class IoU for classes present in the ground truth.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let gt: u64 = (0..k).map(|p| self.count(c, p)).sum();
                if gt == 0 {
                    return None;
                }
                let pred: u64 = (0..k).map(|g| self.count(g, c)).sum();
                let inter = self.count(c, c);
                Some(inter as f64 / (gt + pred - inter) as f64)
            })
            .collect()
    }

    /// Mean IoU over the classes present in the ground truth.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::invalid("no labelled pixels to score"));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return Err(Error::invalid("no labelled pixels to score"));
        }
        let correct: u64 = (0..self.num_classes).map(|c| self.count(c, c)).sum();
        Ok(correct as f64 / total as f64)
    }
}

pub fn miou(pred: &[u8], gt: &[u8], num_classes: usize, ignore_index: Option<u8>) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(num_classes, ignore_index);
    cm.add(pred, gt)?;
    cm.miou()
}

/// Per-pixel argmax over the class axis of `(N, K, H, W)` logits, first
/// maximum on ties; output is `N·H·W` labels in NHW order.
pub fn argmax_labels(logits: &Tensor4) -> Vec<u8> {
    let s = logits.shape();
    let plane = s.plane();
    let d = logits.data();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for i in 0..plane {
            let mut best = (0usize, f64::NEG_INFINITY);
            for c in 0..s.c {
                let v = d[(n * s.c + c) * plane + i];
                if v > best.1 {
                    best = (c, v);
                }
            }
            out.push(best.0 as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert_eq!(miou(&[0, 1, 2, 1], &[0, 1, 2, 1], 3, None).unwrap(), 1.0);
        assert_eq!(miou(&[1, 1, 0, 0], &[0, 0, 1, 1], 2, None).unwrap(), 0.0);
        // class 0: 1 shared of 2 pixels; class 1: 2 shared of 3
        let v = miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, None).unwrap();
        assert!((v - 7.0 / 12.0).abs() < 1e-15);
        // class 2 absent from gt: not averaged
        assert_eq!(miou(&[0, 0], &[0, 0], 3, None).unwrap(), 1.0);
        assert_eq!(miou(&[1, 0], &[255, 0], 2, Some(255)).unwrap(), 1.0);
        assert!(matches!(
            miou(&[0], &[0, 1], 2, None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn argmax_first_max() {
        let t = Tensor4::from_vec(Shape4::new(1, 2, 1, 2), vec![1.0, 0.0, 1.0, 3.0]).unwrap();
        assert_eq!(argmax_labels(&t), vec![0, 1]);
    }
}
