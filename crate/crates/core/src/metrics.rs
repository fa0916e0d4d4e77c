//! Confusion counts and the per-class segmentation metrics derived from them.

use std::fmt::Write as _;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Pixels of this class in the ground truth.
    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }
}

/// One-vs-rest counts for every class, accumulated over any number of images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
    /// Pixels whose predicted label equals the true label.
    pub correct: u64,
    pub pixels: u64,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            classes: vec![ClassCounts::default(); num_classes],
            correct: 0,
            pixels: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn update(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("confusion", &[pred.len()], &[truth.len()]));
        }
        let k = self.num_classes();
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= k || t >= k {
                return Err(Error::invalid(format!(
                    "label out of range for {k} classes: predicted {p}, true {t}"
                )));
            }
        }
        let mut tp = vec![0u64; k];
        let mut pred_n = vec![0u64; k];
        let mut true_n = vec![0u64; k];
        for (&p, &t) in pred.iter().zip(truth) {
            pred_n[p] += 1;
            true_n[t] += 1;
            if p == t {
                tp[p] += 1;
            }
        }
        let n = pred.len() as u64;
        for c in 0..k {
            let cc = &mut self.classes[c];
            cc.tp += tp[c];
            cc.fp += pred_n[c] - tp[c];
            cc.fn_ += true_n[c] - tp[c];
            cc.tn += n + tp[c] - pred_n[c] - true_n[c];
        }
        self.correct += tp.iter().sum::<u64>();
        self.pixels += n;
        Ok(())
    }
}

impl AddAssign<&ConfusionCounts> for ConfusionCounts {
    fn add_assign(&mut self, rhs: &ConfusionCounts) {
        assert_eq!(self.num_classes(), rhs.num_classes());
        for (a, b) in self.classes.iter_mut().zip(&rhs.classes) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.tn += b.tn;
        }
        self.correct += rhs.correct;
        self.pixels += rhs.pixels;
    }
}

pub fn confusion(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<ConfusionCounts> {
    if num_classes == 0 {
        return Err(Error::invalid("confusion needs at least one class"));
    }
    let mut c = ConfusionCounts::new(num_classes);
    c.update(pred, truth)?;
    Ok(c)
}

/// Hard labels from a probability map `[.., C]`: argmax for `C >= 2`, a 0.5
/// threshold for a single sigmoid channel.
pub fn labels_from_probs<T: Scalar>(probs: &Tensor<T>) -> Vec<usize> {
    let c = *probs.shape().last().expect("non-empty shape");
    if c == 1 {
        return probs
            .data()
            .iter()
            .map(|&p| usize::from(p >= T::from_f64(0.5)))
            .collect();
    }
    probs
        .data()
        .chunks_exact(c)
        .map(|px| {
            let mut best = 0;
            for (i, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// `num / den`. An empty denominator means the class (or its complement)
/// is missing from one side; the result is 1 when `other`, the matching
/// tally on the other side, is empty too and 0 otherwise.
fn ratio(num: u64, den: u64, other: u64) -> f64 {
    if den == 0 {
        if other == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// How empty denominators are reported; copied into every report.
pub const ZERO_DIVISION_RULE: &str = "0/0 -> 1.0 when the class is absent from both prediction and truth, \
0.0 when absent from exactly one; macro averages skip classes absent from truth";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dice: f64,
    pub iou: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub accuracy: f64,
}

impl ClassMetrics {
    pub fn from_counts(c: &ClassCounts) -> Self {
        Self {
            dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, 0),
            iou: ratio(c.tp, c.tp + c.fp + c.fn_, 0),
            sensitivity: ratio(c.tp, c.tp + c.fn_, c.fp),
            specificity: ratio(c.tn, c.tn + c.fp, c.fn_),
            precision: ratio(c.tp, c.tp + c.fp, c.fn_),
            accuracy: ratio(c.tp + c.tn, c.total(), 0),
        }
    }

    fn mean<'a>(items: impl Iterator<Item = &'a ClassMetrics>) -> Self {
        let mut sum = ClassMetrics::default();
        let mut n = 0usize;
        for m in items {
            sum.dice += m.dice;
            sum.iou += m.iou;
            sum.sensitivity += m.sensitivity;
            sum.specificity += m.specificity;
            sum.precision += m.precision;
            sum.accuracy += m.accuracy;
            n += 1;
        }
        if n == 0 {
            return sum;
        }
        let n = n as f64;
        Self {
            dice: sum.dice / n,
            iou: sum.iou / n,
            sensitivity: sum.sensitivity / n,
            specificity: sum.specificity / n,
            precision: sum.precision / n,
            accuracy: sum.accuracy / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    /// Per-class pixel support in the ground truth.
    pub support: Vec<u64>,
    /// Mean over classes present in the ground truth.
    pub macro_avg: ClassMetrics,
    /// Mean IoU over all classes.
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub counts: ConfusionCounts,
    pub zero_division: String,
}

/// Names of the binary and three-class mask schemes, else `class{i}`.
pub fn default_class_names(num_classes: usize) -> Vec<String> {
    match num_classes {
        2 => vec!["background".into(), "carcinoma".into()],
        3 => vec!["non-tissue".into(), "non-carcinoma".into(), "carcinoma".into()],
        k => (0..k).map(|i| format!("class{i}")).collect(),
    }
}

pub fn metrics(counts: &ConfusionCounts) -> MetricReport {
    let per_class: Vec<ClassMetrics> = counts.classes.iter().map(ClassMetrics::from_counts).collect();
    let support: Vec<u64> = counts.classes.iter().map(ClassCounts::support).collect();
    let present = per_class
        .iter()
        .zip(&support)
        .filter(|(_, &s)| s > 0)
        .map(|(m, _)| m);
    let macro_avg = ClassMetrics::mean(present);
    let miou = per_class.iter().map(|m| m.iou).sum::<f64>() / per_class.len().max(1) as f64;
    MetricReport {
        class_names: default_class_names(counts.num_classes()),
        per_class,
        support,
        macro_avg,
        miou,
        pixel_accuracy: ratio(counts.correct, counts.pixels, 0),
        zero_division: ZERO_DIVISION_RULE.to_string(),
        counts: counts.clone(),
    }
}

impl MetricReport {
    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.per_class.len() {
            return Err(Error::invalid(format!(
                "{} class names for {} classes",
                names.len(),
                self.per_class.len()
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    /// Dice of the foreground: class 1 for binary, macro average otherwise.
    pub fn headline_dice(&self) -> f64 {
        if self.per_class.len() == 2 {
            self.per_class[1].dice
        } else {
            self.macro_avg.dice
        }
    }

    pub fn to_table(&self) -> String {
        let width = self
            .class_names
            .iter()
            .map(String::len)
            .chain([5])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>10}",
            "class", "dice", "iou", "sens", "spec", "prec", "acc", "support"
        );
        let row = |out: &mut String, name: &str, m: &ClassMetrics, support: Option<u64>| {
            let _ = write!(
                out,
                "{:<width$}  {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                name, m.dice, m.iou, m.sensitivity, m.specificity, m.precision, m.accuracy
            );
            match support {
                Some(s) => {
                    let _ = writeln!(out, " {s:>10}");
                }
                None => out.push('\n'),
            }
        };
        for ((name, m), s) in self.class_names.iter().zip(&self.per_class).zip(&self.support) {
            row(&mut out, name, m, Some(*s));
        }
        row(&mut out, "macro", &self.macro_avg, None);
        let _ = writeln!(out, "# mIoU {:.4}  pixel accuracy {:.4}", self.miou, self.pixel_accuracy);
        let _ = writeln!(out, "# {}", self.zero_division);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }
}
