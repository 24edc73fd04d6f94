//! Confusion matrices, the ratio metrics derived from them, the Hausdorff
//! distance, and report aggregation.
//!
//! Zero-denominator convention: a class absent from both prediction and
//! ground truth scores 1 on Dice, IoU, precision and recall (0 on FNR) and is
//! marked [`Status::Absent`]. Any other zero denominator, and a Hausdorff
//! distance with an empty side, is [`Status::Undefined`] and left out of the
//! averages; the reports carry both counts.

mod hausdorff;

pub use hausdorff::{class_points, hausdorff, hausdorff_class, Point};

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClassMap;

/// JSON has no NaN: serde_json writes it as `null`, read back here.
fn nullable_f64<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}
use crate::error::{shape_err, Error, Result};

/// `counts[i][j]` = pixels of true class `i` predicted as class `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.counts[i][i]).sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    /// Predicted as `c` but belonging elsewhere.
    pub fn fp(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&i| i != c).map(|i| self.counts[i][c]).sum()
    }

    /// Belonging to `c` but predicted elsewhere.
    pub fn fn_(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&j| j != c).map(|j| self.counts[c][j]).sum()
    }

    pub fn tn(&self, c: usize) -> u64 {
        self.total() - self.tp(c) - self.fp(c) - self.fn_(c)
    }

    pub fn accumulate(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (v, o) in row.iter_mut().zip(orow) {
                *v += o;
            }
        }
    }

    /// Rows scaled to sum to one: entry `(i, j)` is the share of class-`i`
    /// pixels predicted as `j`. Empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&v| if s == 0 { 0.0 } else { v as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }
}

pub fn confusion_matrix(pred: &ClassMap, gt: &ClassMap, classes: usize) -> Result<ConfusionMatrix> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(shape_err((gt.height, gt.width), (pred.height, pred.width)));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (usize::from(p), usize::from(g));
        if p >= classes || g >= classes {
            return Err(Error::InvalidLabel {
                index: 0,
                value: p.max(g) as u8,
                classes,
            });
        }
        cm.counts[g][p] += 1;
    }
    Ok(cm)
}

pub fn pixel_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptySet);
    }
    Ok(cm.trace() as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Defined,
    /// Class absent from both maps; value set by convention.
    Absent,
    /// Zero denominator; excluded from averages.
    Undefined,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    #[serde(deserialize_with = "nullable_f64")]
    pub value: f64,
    pub status: Status,
}

impl Score {
    fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Self::undefined()
        } else {
            Self {
                value: num as f64 / den as f64,
                status: Status::Defined,
            }
        }
    }

    fn absent(value: f64) -> Self {
        Self {
            value,
            status: Status::Absent,
        }
    }

    pub fn undefined() -> Self {
        Self {
            value: f64::NAN,
            status: Status::Undefined,
        }
    }

    pub fn defined(value: f64) -> Self {
        Self {
            value,
            status: Status::Defined,
        }
    }

    pub fn get(&self) -> Option<f64> {
        (self.status != Status::Undefined).then_some(self.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dice: Score,
    pub iou: Score,
    pub precision: Score,
    pub recall: Score,
    pub fnr: Score,
    pub fpr: Score,
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.classes)
        .map(|c| {
            let (tp, fp, fn_, tn) = (cm.tp(c), cm.fp(c), cm.fn_(c), cm.tn(c));
            let fpr = Score::ratio(fp, fp + tn);
            if tp + fp + fn_ == 0 {
                return ClassMetrics {
                    dice: Score::absent(1.0),
                    iou: Score::absent(1.0),
                    precision: Score::absent(1.0),
                    recall: Score::absent(1.0),
                    fnr: Score::absent(0.0),
                    fpr,
                };
            }
            ClassMetrics {
                dice: Score::ratio(2 * tp, 2 * tp + fp + fn_),
                iou: Score::ratio(tp, tp + fp + fn_),
                precision: Score::ratio(tp, tp + fp),
                recall: Score::ratio(tp, tp + fn_),
                fnr: Score::ratio(fn_, tp + fn_),
                fpr,
            }
        })
        .collect()
}

/// All metrics of one predicted map against its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub classes: Vec<ClassMetrics>,
    pub hausdorff: Vec<Score>,
}

pub fn evaluate_sample(pred: &ClassMap, gt: &ClassMap, classes: usize) -> Result<SampleMetrics> {
    let cm = confusion_matrix(pred, gt, classes)?;
    let accuracy = pixel_accuracy(&cm)?;
    let hausdorff = (0..classes)
        .map(|c| match hausdorff_class(pred, gt, c as u8) {
            Some(d) => Score::defined(d),
            None => Score::undefined(),
        })
        .collect();
    Ok(SampleMetrics {
        accuracy,
        classes: per_class_metrics(&cm),
        confusion: cm,
        hausdorff,
    })
}

/// Per-sample evaluation, parallel across samples, results in input order.
pub fn evaluate_samples(pairs: &[(ClassMap, ClassMap)], classes: usize) -> Result<Vec<SampleMetrics>> {
    pairs
        .par_iter()
        .map(|(pred, gt)| evaluate_sample(pred, gt, classes))
        .collect()
}

/// Mean of the defined values of a metric with the number of excluded and
/// absent-convention entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mean {
    #[serde(deserialize_with = "nullable_f64")]
    pub value: f64,
    pub included: usize,
    pub excluded: usize,
    pub absent: usize,
}

impl Mean {
    fn of(scores: impl Iterator<Item = Score>) -> Self {
        let (mut sum, mut included, mut excluded, mut absent) = (0.0, 0, 0, 0);
        for s in scores {
            match s.status {
                Status::Undefined => excluded += 1,
                st => {
                    if st == Status::Absent {
                        absent += 1;
                    }
                    sum += s.value;
                    included += 1;
                }
            }
        }
        Self {
            value: if included == 0 { f64::NAN } else { sum / included as f64 },
            included,
            excluded,
            absent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    pub dice: Mean,
    pub iou: Mean,
    pub precision: Mean,
    pub recall: Mean,
    pub fnr: Mean,
    pub fpr: Mean,
    pub hausdorff: Mean,
}

/// The eight headline numbers, as fractions (Hausdorff in pixels).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(deserialize_with = "nullable_f64")]
    pub acc: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub dice: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub iou: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub recall: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub precision: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub fnr: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub fpr: f64,
    #[serde(deserialize_with = "nullable_f64")]
    pub hausdorff: f64,
}

impl Aggregate {
    pub const HEADER: [&'static str; 8] = ["Acc", "Dice", "IoU", "Recall", "Precision", "FNR", "FPR", "Hausdorff"];

    /// Row in table units: percentages, Hausdorff in pixels.
    pub fn table_row(&self) -> [f64; 8] {
        [
            self.acc * 100.0,
            self.dice * 100.0,
            self.iou * 100.0,
            self.recall * 100.0,
            self.precision * 100.0,
            self.fnr * 100.0,
            self.fpr * 100.0,
            self.hausdorff,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Macro mean over every class including background.
    AllClasses,
    /// Macro mean over classes 1..C.
    Foreground,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub accuracy: Mean,
    pub per_class: Vec<ClassSummary>,
    pub all_classes: Aggregate,
    pub foreground: Aggregate,
    /// Pixel counts summed over all samples.
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn aggregate(&self, mode: AggregationMode) -> &Aggregate {
        match mode {
            AggregationMode::AllClasses => &self.all_classes,
            AggregationMode::Foreground => &self.foreground,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Appends two CSV rows (all-class and foreground aggregates) labelled
    /// `method`; writes the header if the file is new.
    pub fn append_csv(&self, path: &Path, method: &str) -> Result<()> {
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "method,mode,{}", Aggregate::HEADER.join(","))?;
        }
        for (mode, agg) in [("all", &self.all_classes), ("foreground", &self.foreground)] {
            let row: Vec<String> = agg.table_row().iter().map(|v| format!("{v:.4}")).collect();
            writeln!(f, "{method},{mode},{}", row.join(","))?;
        }
        Ok(())
    }
}

fn macro_mean(summaries: &[&ClassSummary], pick: impl Fn(&ClassSummary) -> Mean) -> f64 {
    let vals: Vec<f64> = summaries
        .iter()
        .map(|s| pick(s))
        .filter(|m| m.included > 0)
        .map(|m| m.value)
        .collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Per-class means over samples, then macro means over classes (both over
/// all classes and over the foreground classes).
pub fn aggregate_report(samples: &[SampleMetrics]) -> Result<MetricsReport> {
    let first = samples.first().ok_or(Error::EmptySet)?;
    let classes = first.classes.len();
    let per_class: Vec<ClassSummary> = (0..classes)
        .map(|c| ClassSummary {
            class: c,
            dice: Mean::of(samples.iter().map(|s| s.classes[c].dice)),
            iou: Mean::of(samples.iter().map(|s| s.classes[c].iou)),
            precision: Mean::of(samples.iter().map(|s| s.classes[c].precision)),
            recall: Mean::of(samples.iter().map(|s| s.classes[c].recall)),
            fnr: Mean::of(samples.iter().map(|s| s.classes[c].fnr)),
            fpr: Mean::of(samples.iter().map(|s| s.classes[c].fpr)),
            hausdorff: Mean::of(samples.iter().map(|s| s.hausdorff[c])),
        })
        .collect();
    let accuracy = Mean::of(samples.iter().map(|s| Score::defined(s.accuracy)));
    let build = |subset: Vec<&ClassSummary>| Aggregate {
        acc: accuracy.value,
        dice: macro_mean(&subset, |s| s.dice),
        iou: macro_mean(&subset, |s| s.iou),
        recall: macro_mean(&subset, |s| s.recall),
        precision: macro_mean(&subset, |s| s.precision),
        fnr: macro_mean(&subset, |s| s.fnr),
        fpr: macro_mean(&subset, |s| s.fpr),
        hausdorff: macro_mean(&subset, |s| s.hausdorff),
    };
    let all_classes = build(per_class.iter().collect());
    let foreground = build(per_class.iter().skip(1).collect());
    let mut confusion = ConfusionMatrix::zeros(classes);
    for s in samples {
        confusion.accumulate(&s.confusion);
    }
    Ok(MetricsReport {
        samples: samples.len(),
        accuracy,
        per_class,
        all_classes,
        foreground,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand() -> (ClassMap, ClassMap) {
        let gt = ClassMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let pred = ClassMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        (pred, gt)
    }

    #[test]
    fn hand_confusion() {
        let (pred, gt) = hand();
        let cm = confusion_matrix(&pred, &gt, 2).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(cm.total(), 4);
        assert_eq!(pixel_accuracy(&cm).unwrap(), 0.75);
        let m = per_class_metrics(&cm)[0];
        assert_eq!((cm.tp(0), cm.fp(0), cm.fn_(0), cm.tn(0)), (1, 0, 1, 2));
        assert_eq!(m.dice.value, 2.0 / 3.0);
        assert_eq!(m.iou.value, 0.5);
        assert_eq!(m.precision.value, 1.0);
        assert_eq!(m.recall.value, 0.5);
        assert_eq!(m.fnr.value, 0.5);
        assert_eq!(m.fpr.value, 0.0);
    }

    #[test]
    fn identity_is_perfect() {
        let gt = ClassMap::new(2, 3, vec![0, 1, 2, 3, 0, 1]).unwrap();
        let cm = confusion_matrix(&gt, &gt, 4).unwrap();
        assert_eq!(cm.trace(), 6);
        for m in per_class_metrics(&cm) {
            assert_eq!((m.dice.value, m.iou.value, m.precision.value, m.recall.value), (1.0, 1.0, 1.0, 1.0));
            assert_eq!((m.fnr.value, m.fpr.value), (0.0, 0.0));
        }
        let r = aggregate_report(&[evaluate_sample(&gt, &gt, 4).unwrap()]).unwrap();
        assert_eq!(r.all_classes.acc, 1.0);
        assert_eq!(r.all_classes.dice, 1.0);
        assert_eq!(r.all_classes.hausdorff, 0.0);
        assert_eq!(r.foreground.fpr, 0.0);
    }

    #[test]
    fn absent_and_undefined_conventions() {
        let gt = ClassMap::filled(2, 2, 0);
        let mut pred = gt.clone();
        pred.set(0, 0, 1);
        let cm = confusion_matrix(&pred, &gt, 3).unwrap();
        let m = per_class_metrics(&cm);
        assert_eq!(m[2].dice.status, Status::Absent);
        assert_eq!(m[2].dice.value, 1.0);
        // Class 1 predicted but absent from the ground truth.
        assert_eq!(m[1].dice.value, 0.0);
        assert_eq!(m[1].precision.value, 0.0);
        assert_eq!(m[1].recall.status, Status::Undefined);
        let s = evaluate_sample(&pred, &gt, 3).unwrap();
        assert_eq!(s.hausdorff[1].status, Status::Undefined);
        let r = aggregate_report(&[s]).unwrap();
        assert_eq!(r.per_class[1].recall.excluded, 1);
        assert_eq!(r.per_class[2].dice.absent, 1);
    }

    #[test]
    fn means_over_samples() {
        let gt = ClassMap::new(1, 10, vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0]).unwrap();
        let mut pred = gt.clone();
        pred.set(0, 5, 1);
        let a = evaluate_sample(&pred, &gt, 2).unwrap();
        let b = evaluate_sample(&gt, &gt, 2).unwrap();
        let d0 = a.classes[1].dice.value;
        let r = aggregate_report(&[a, b]).unwrap();
        assert!((r.per_class[1].dice.value - (d0 + 1.0) / 2.0).abs() < 1e-15);
        assert!(aggregate_report(&[]).is_err());
    }

    #[test]
    fn row_normalization() {
        let (pred, gt) = hand();
        let cm = confusion_matrix(&pred, &gt, 3).unwrap();
        assert_eq!(cm.row_normalized(), vec![vec![0.5, 0.5, 0.0], vec![0.0, 1.0, 0.0], vec![0.0; 3]]);
    }

    #[test]
    fn shape_mismatch() {
        let a = ClassMap::filled(2, 2, 0);
        let b = ClassMap::filled(2, 3, 0);
        assert!(confusion_matrix(&a, &b, 2).is_err());
    }

    #[test]
    fn report_with_undefined_entries_survives_json() {
        let gt = ClassMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let pred = ClassMap::filled(2, 2, 0);
        let report = aggregate_report(&[evaluate_sample(&pred, &gt, 4).unwrap()]).unwrap();
        assert!(report.per_class[1].hausdorff.value.is_nan());
        let text = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&text).unwrap();
        assert!(back.per_class[1].hausdorff.value.is_nan());
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
