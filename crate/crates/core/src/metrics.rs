//! Confusion matrices and macro-averaged classification metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `C x C` counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
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

    pub fn from_predictions(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut c = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            c.add(t, p)?;
        }
        Ok(c)
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(Self { classes, counts })
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::InvalidArgument(format!(
                "label pair ({truth}, {pred}) outside {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    /// (TP, FP, FN) for one class.
    pub fn class_counts(&self, class: usize) -> (u64, u64, u64) {
        let tp = self.get(class, class);
        (tp, self.col_sum(class) - tp, self.row_sum(class) - tp)
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn macro_avg(c: &Confusion, per_class: impl Fn(u64, u64, u64) -> f64) -> f64 {
    if c.classes == 0 {
        return 0.0;
    }
    (0..c.classes)
        .map(|k| {
            let (tp, fp, fn_) = c.class_counts(k);
            per_class(tp, fp, fn_)
        })
        .sum::<f64>()
        / c.classes as f64
}

/// Mean over classes of `2TP / (2TP + FP + FN)`; an empty class scores 0.
pub fn f1_macro(c: &Confusion) -> f64 {
    macro_avg(c, |tp, fp, fn_| ratio(2 * tp, 2 * tp + fp + fn_))
}

pub fn precision_macro(c: &Confusion) -> f64 {
    macro_avg(c, |tp, fp, _| ratio(tp, tp + fp))
}

pub fn recall_macro(c: &Confusion) -> f64 {
    macro_avg(c, |tp, _, fn_| ratio(tp, tp + fn_))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: Confusion,
    pub samples: u64,
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion) -> Self {
        Self {
            f1: f1_macro(&confusion),
            precision: precision_macro(&confusion),
            recall: recall_macro(&confusion),
            samples: confusion.total(),
            confusion,
        }
    }

    pub fn from_predictions(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        Ok(Self::from_confusion(Confusion::from_predictions(classes, truth, pred)?))
    }

    /// Summary line plus the confusion matrix as CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "f1_macro,{:.6}", self.f1);
        let _ = writeln!(s, "precision_macro,{:.6}", self.precision);
        let _ = writeln!(s, "recall_macro,{:.6}", self.recall);
        let _ = writeln!(s, "samples,{}", self.samples);
        s.push('\n');
        let k = self.confusion.classes();
        s.push_str("true\\pred");
        for p in 0..k {
            let _ = write!(s, ",{p}");
        }
        s.push('\n');
        for t in 0..k {
            let _ = write!(s, "{t}");
            for p in 0..k {
                let _ = write!(s, ",{}", self.confusion.get(t, p));
            }
            s.push('\n');
        }
        s
    }
}
