//! Confusion matrices, one-vs-rest classification metrics, class
//! collapsing, and grid-region accuracy maps.
//!
//! Orientation is fixed throughout: rows index the true class, columns
//! the predicted class.

use crate::error::{Error, Result};
use crate::imagegen::{QualityGrade, SetPointClass};

/// Row-major n x n count matrix; rows are true classes, columns
/// predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn empty(n_classes: usize) -> Result<ConfusionMatrix> {
        if n_classes < 2 {
            return Err(Error::domain("confusion matrix needs at least 2 classes"));
        }
        Ok(ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        })
    }

    pub fn from_counts(n_classes: usize, counts: Vec<u64>) -> Result<ConfusionMatrix> {
        if n_classes < 2 || counts.len() != n_classes * n_classes {
            return Err(Error::domain(format!(
                "count grid of {} values does not fit {n_classes} classes",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { n_classes, counts })
    }

    pub fn from_labels(
        true_labels: &[usize],
        predicted_labels: &[usize],
        n_classes: usize,
    ) -> Result<ConfusionMatrix> {
        if true_labels.len() != predicted_labels.len() {
            return Err(Error::domain(format!(
                "{} true labels vs {} predictions",
                true_labels.len(),
                predicted_labels.len()
            )));
        }
        let mut cm = ConfusionMatrix::empty(n_classes)?;
        for (&t, &p) in true_labels.iter().zip(predicted_labels) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, true_class: usize, predicted_class: usize) -> Result<()> {
        if true_class >= self.n_classes || predicted_class >= self.n_classes {
            return Err(Error::domain(format!(
                "label pair ({true_class}, {predicted_class}) out of range for {} classes",
                self.n_classes
            )));
        }
        self.counts[true_class * self.n_classes + predicted_class] += 1;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn count(&self, true_class: usize, predicted_class: usize) -> u64 {
        self.counts[true_class * self.n_classes + predicted_class]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class * self.n_classes..][..self.n_classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        (0..self.n_classes).map(|r| self.count(r, class)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|c| self.count(c, c)).sum()
    }

    pub fn total_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::domain("empty confusion matrix has no accuracy"));
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// CSV grid with a header row and column of class names; the corner
    /// cell reads `true\pred`.
    pub fn to_csv(&self, class_names: &[String]) -> Result<String> {
        if class_names.len() != self.n_classes {
            return Err(Error::domain(format!(
                "{} names for {} classes",
                class_names.len(),
                self.n_classes
            )));
        }
        let mut out = String::from("true\\pred");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (t, name) in class_names.iter().enumerate() {
            out.push_str(name);
            for p in 0..self.n_classes {
                out.push_str(&format!(",{}", self.count(t, p)));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// One-vs-rest reduction of class `c` against the rest of the matrix.
pub fn class_counts(cm: &ConfusionMatrix, c: usize) -> Result<ClassCounts> {
    if c >= cm.n_classes() {
        return Err(Error::domain(format!(
            "class {c} out of range for {} classes",
            cm.n_classes()
        )));
    }
    let tp = cm.count(c, c);
    let fp = cm.col_sum(c) - tp;
    let fn_ = cm.row_sum(c) - tp;
    let tn = cm.total() - tp - fp - fn_;
    Ok(ClassCounts { tp, fp, fn_, tn })
}

/// The five per-class metrics. A metric whose denominator is zero is
/// reported as 0 and named in `zero_denominators`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f_score: f64,
    pub accuracy: f64,
    pub zero_denominators: Vec<&'static str>,
}

impl ClassMetrics {
    pub fn values(&self) -> [f64; 5] {
        [
            self.precision,
            self.sensitivity,
            self.specificity,
            self.f_score,
            self.accuracy,
        ]
    }
}

pub fn class_metrics(counts: &ClassCounts) -> Result<ClassMetrics> {
    if counts.total() == 0 {
        return Err(Error::domain("class metrics need at least one sample"));
    }
    let mut zero_denominators = Vec::new();
    let mut ratio = |name: &'static str, num: u64, den: u64| -> f64 {
        if den == 0 {
            zero_denominators.push(name);
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio("precision", counts.tp, counts.tp + counts.fp);
    let sensitivity = ratio("sensitivity", counts.tp, counts.tp + counts.fn_);
    let specificity = ratio("specificity", counts.tn, counts.fp + counts.tn);
    let f_score = ratio("f_score", 2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn_);
    let accuracy = (counts.tp + counts.tn) as f64 / counts.total() as f64;
    Ok(ClassMetrics {
        precision,
        sensitivity,
        specificity,
        f_score,
        accuracy,
        zero_denominators,
    })
}

/// Unweighted means of the five metrics over classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Averages {
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f_score: f64,
    pub accuracy: f64,
}

fn average_metrics<F: Fn(usize) -> f64>(per_class: &[ClassMetrics], weight: F) -> Averages {
    let total_weight: f64 = (0..per_class.len()).map(&weight).sum();
    let mean = |pick: &dyn Fn(&ClassMetrics) -> f64| -> f64 {
        per_class
            .iter()
            .enumerate()
            .map(|(i, m)| weight(i) * pick(m))
            .sum::<f64>()
            / total_weight
    };
    Averages {
        precision: mean(&|m| m.precision),
        sensitivity: mean(&|m| m.sensitivity),
        specificity: mean(&|m| m.specificity),
        f_score: mean(&|m| m.f_score),
        accuracy: mean(&|m| m.accuracy),
    }
}

/// Per-class metrics plus their macro averages and the matrix's total
/// accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub total_accuracy: f64,
}

pub fn macro_report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total_accuracy = cm.total_accuracy()?;
    let per_class: Vec<ClassMetrics> = (0..cm.n_classes())
        .map(|c| class_metrics(&class_counts(cm, c)?))
        .collect::<Result<_>>()?;
    let macro_avg = average_metrics(&per_class, |_| 1.0);
    Ok(MetricsReport {
        per_class,
        macro_avg,
        total_accuracy,
    })
}

/// Support-weighted averages (weights are true-class sample counts);
/// macro averaging is the default reading everywhere else.
pub fn weighted_averages(cm: &ConfusionMatrix) -> Result<Averages> {
    cm.total_accuracy()?;
    let per_class: Vec<ClassMetrics> = (0..cm.n_classes())
        .map(|c| class_metrics(&class_counts(cm, c)?))
        .collect::<Result<_>>()?;
    Ok(average_metrics(&per_class, |c| cm.row_sum(c) as f64))
}

/// Report CSV: `class,precision,sensitivity,specificity,f_score,accuracy`
/// rows, one per class, closed by a `macro` row.
pub fn report_to_csv(report: &MetricsReport, class_names: &[String]) -> Result<String> {
    if class_names.len() != report.per_class.len() {
        return Err(Error::domain(format!(
            "{} names for {} classes",
            class_names.len(),
            report.per_class.len()
        )));
    }
    let mut out = String::from("class,precision,sensitivity,specificity,f_score,accuracy\n");
    for (name, m) in class_names.iter().zip(&report.per_class) {
        out.push_str(&format!(
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            m.precision, m.sensitivity, m.specificity, m.f_score, m.accuracy
        ));
    }
    let a = &report.macro_avg;
    out.push_str(&format!(
        "macro,{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        a.precision, a.sensitivity, a.specificity, a.f_score, a.accuracy
    ));
    Ok(out)
}

/// Merges classes of `cm` per `mapping` (source class -> target class).
/// Every source class must be mapped; targets must cover 0..=max
/// contiguously.
pub fn collapse_classes(cm: &ConfusionMatrix, mapping: &[usize]) -> Result<ConfusionMatrix> {
    if mapping.len() != cm.n_classes() {
        return Err(Error::domain(format!(
            "mapping covers {} classes, matrix has {}",
            mapping.len(),
            cm.n_classes()
        )));
    }
    let n_new = *mapping.iter().max().unwrap() + 1;
    for target in 0..n_new {
        if !mapping.contains(&target) {
            return Err(Error::domain(format!(
                "collapse target {target} has no source class"
            )));
        }
    }
    let mut merged = ConfusionMatrix::empty(n_new)?;
    for t in 0..cm.n_classes() {
        for p in 0..cm.n_classes() {
            merged.counts[mapping[t] * n_new + mapping[p]] += cm.count(t, p);
        }
    }
    Ok(merged)
}

/// Per-cell accuracy over the process grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCellAccuracy {
    pub set_point: SetPointClass,
    pub accuracy: f64,
    pub inside: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRegionReport {
    pub inside_mean: f64,
    pub outside_mean: f64,
    pub cells: Vec<GridCellAccuracy>,
}

impl GridRegionReport {
    /// CSV table: one row per cell plus the two region means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setpoint_class,speed_mms,temp_c,region,accuracy\n");
        for cell in &self.cells {
            let state = cell.set_point.state();
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                cell.set_point.name(),
                state.speed() as u32,
                state.temperature() as u32,
                if cell.inside { "inside" } else { "outside" },
                cell.accuracy
            ));
        }
        out.push_str(&format!("mean,,,inside,{:.6}\n", self.inside_mean));
        out.push_str(&format!("mean,,,outside,{:.6}\n", self.outside_mean));
        out
    }
}

/// The stock high-confidence region: the low-badness corner of the grid,
/// i.e. cells graded A or B.
pub fn default_high_confidence_region(cell: &SetPointClass) -> bool {
    matches!(cell.grade(), QualityGrade::A | QualityGrade::B)
}

/// Averages per-cell accuracies inside and outside a region mask.
/// Failure cells cannot appear (SetPointClass excludes them); both sides
/// of the mask must be nonempty.
pub fn grid_region_report<F>(
    per_cell: &[(SetPointClass, f64)],
    in_region: F,
) -> Result<GridRegionReport>
where
    F: Fn(&SetPointClass) -> bool,
{
    if per_cell.is_empty() {
        return Err(Error::domain("no per-cell accuracies supplied"));
    }
    let mut seen = Vec::new();
    let mut cells = Vec::with_capacity(per_cell.len());
    let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0, 0usize, 0.0, 0usize);
    for (cell, acc) in per_cell {
        if seen.contains(cell) {
            return Err(Error::domain(format!(
                "duplicate grid cell {}",
                cell.name()
            )));
        }
        seen.push(*cell);
        if !(0.0..=1.0).contains(acc) {
            return Err(Error::domain(format!(
                "cell {} accuracy {acc} outside [0,1]",
                cell.name()
            )));
        }
        let inside = in_region(cell);
        if inside {
            in_sum += acc;
            in_n += 1;
        } else {
            out_sum += acc;
            out_n += 1;
        }
        cells.push(GridCellAccuracy {
            set_point: *cell,
            accuracy: *acc,
            inside,
        });
    }
    if in_n == 0 || out_n == 0 {
        return Err(Error::domain(
            "region mask leaves one side of the grid empty",
        ));
    }
    Ok(GridRegionReport {
        inside_mean: in_sum / in_n as f64,
        outside_mean: out_sum / out_n as f64,
        cells,
    })
}

/// Fraction correct per grid cell, from parallel cell/correctness lists.
pub fn per_cell_accuracies(
    cells: &[SetPointClass],
    correct: &[bool],
) -> Result<Vec<(SetPointClass, f64)>> {
    if cells.len() != correct.len() || cells.is_empty() {
        return Err(Error::domain(
            "need matching nonempty cell and correctness lists",
        ));
    }
    let mut order: Vec<SetPointClass> = Vec::new();
    let mut hits: Vec<(u64, u64)> = Vec::new();
    for (cell, &ok) in cells.iter().zip(correct) {
        let idx = match order.iter().position(|c| c == cell) {
            Some(i) => i,
            None => {
                order.push(*cell);
                hits.push((0, 0));
                order.len() - 1
            }
        };
        hits[idx].1 += 1;
        if ok {
            hits[idx].0 += 1;
        }
    }
    Ok(order
        .into_iter()
        .zip(hits)
        .map(|(cell, (good, n))| (cell, good as f64 / n as f64))
        .collect())
}
