use serde::Serialize;

/// Square confusion matrix, rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, truth: &[u8], pred: &[u8]) {
        for (&t, &p) in truth.iter().zip(pred) {
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let hit: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    /// IoU per class; `None` when a class is absent from both truth and
    /// prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes that occur.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crafted_masks() {
        // truth: 0 0 1 1 2 2, pred: 0 1 1 1 2 0
        let mut c = Confusion::new(3);
        c.add(&[0, 0, 1, 1, 2, 2], &[0, 1, 1, 1, 2, 0]);
        // class 0: tp 1, union = {0,1,5} = 3; class 1: tp 2, union 3;
        // class 2: tp 1, union 2.
        let iou = c.iou();
        assert_eq!(iou, vec![Some(1.0 / 3.0), Some(2.0 / 3.0), Some(0.5)]);
        assert!((c.miou() - (1.0 / 3.0 + 2.0 / 3.0 + 0.5) / 3.0).abs() < 1e-15);
        assert!((c.pixel_accuracy() - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_skipped() {
        let mut c = Confusion::new(3);
        c.add(&[0, 1, 1], &[0, 1, 1]);
        assert_eq!(c.iou()[2], None);
        assert_eq!(c.miou(), 1.0);
    }
}
