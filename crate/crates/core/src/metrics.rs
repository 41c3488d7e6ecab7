//! Ordinal and categorical evaluation over KL grades 0..=4.
//!
//! Precision and recall are 0 when their denominator is 0, and F1 is 0 when
//! both are 0. Mean rows are macro averages over the grades present in the
//! truth unless [`Averaging::Weighted`] is requested.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::GRADES;

/// `(1/n)·Σ(yᵢ − ŷᵢ)²`.
pub fn mse(truth: &[u8], pred: &[f64]) -> Result<f64> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(arg(format!(
            "mse needs equal non-zero lengths, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    let sum: f64 = truth.iter().zip(pred).map(|(&t, &p)| (t as f64 - p).powi(2)).sum();
    Ok(sum / truth.len() as f64)
}

/// Convenience for integer predictions.
pub fn mse_grades(truth: &[u8], pred: &[u8]) -> Result<f64> {
    let p: Vec<f64> = pred.iter().map(|&g| g as f64).collect();
    mse(truth, &p)
}

/// Rounds half away from zero, then clamps into 0..=4.
pub fn round_to_grade(pred: f64) -> Result<u8> {
    if !pred.is_finite() {
        return Err(arg(format!("cannot round non-finite prediction {pred}")));
    }
    Ok(pred.round().clamp(0.0, (GRADES - 1) as f64) as u8)
}

/// Rows are true grades, columns predicted grades.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; GRADES]; GRADES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..GRADES).map(|g| self.counts[g][g]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.correct() as f64 / total as f64
        }
    }

    /// Relabels both axes through `perm`, i.e. grade `g` becomes `perm[g]`.
    pub fn permuted(&self, perm: &[u8; GRADES]) -> Self {
        let mut out = Self::default();
        for t in 0..GRADES {
            for p in 0..GRADES {
                out.counts[perm[t] as usize][perm[p] as usize] = self.counts[t][p];
            }
        }
        out
    }
}

pub fn confusion(truth: &[u8], pred: &[u8]) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(arg(format!(
            "confusion needs equal lengths, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(pred) {
        if t as usize >= GRADES || p as usize >= GRADES {
            return Err(arg(format!("grade pair ({t}, {p}) outside 0..=4")));
        }
        cm.counts[t as usize][p as usize] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    /// Weighted by true-grade support.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradeMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub per_grade: [GradeMetrics; GRADES],
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub accuracy: f64,
    pub averaging: Averaging,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn class_report(cm: &ConfusionMatrix) -> ClassReport {
    class_report_with(cm, Averaging::Macro)
}

pub fn class_report_with(cm: &ConfusionMatrix, averaging: Averaging) -> ClassReport {
    let mut per_grade = [GradeMetrics::default(); GRADES];
    for (g, m) in per_grade.iter_mut().enumerate() {
        let tp = cm.counts[g][g];
        let predicted: u64 = (0..GRADES).map(|t| cm.counts[t][g]).sum();
        let support: u64 = cm.counts[g].iter().sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        *m = GradeMetrics {
            precision,
            recall,
            f1,
            support,
        };
    }
    let present: Vec<&GradeMetrics> = per_grade.iter().filter(|m| m.support > 0).collect();
    let mean = |f: fn(&GradeMetrics) -> f64| -> f64 {
        if present.is_empty() {
            return 0.0;
        }
        match averaging {
            Averaging::Macro => present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64,
            Averaging::Weighted => {
                let total: u64 = present.iter().map(|m| m.support).sum();
                present.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
            }
        }
    };
    ClassReport {
        per_grade,
        mean_precision: mean(|m| m.precision),
        mean_recall: mean(|m| m.recall),
        mean_f1: mean(|m| m.f1),
        accuracy: cm.accuracy(),
        averaging,
    }
}

impl ClassReport {
    /// CSV with header `grade,precision,recall,f1`; the last row is the mean.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("grade,precision,recall,f1\n");
        for (g, m) in self.per_grade.iter().enumerate() {
            writeln!(out, "{g},{:.4},{:.4},{:.4}", m.precision, m.recall, m.f1).unwrap();
        }
        writeln!(
            out,
            "mean,{:.4},{:.4},{:.4}",
            self.mean_precision, self.mean_recall, self.mean_f1
        )
        .unwrap();
        out
    }

    /// Aligned text table in the layout of a per-grade precision/recall/F1 summary.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<6} {:>9} {:>9} {:>9} {:>8}",
            "Grade", "Precision", "Recall", "F1", "Support"
        )
        .unwrap();
        for (g, m) in self.per_grade.iter().enumerate() {
            writeln!(
                out,
                "{:<6} {:>9.2} {:>9.2} {:>9.2} {:>8}",
                g, m.precision, m.recall, m.f1, m.support
            )
            .unwrap();
        }
        let label = match self.averaging {
            Averaging::Macro => "Mean",
            Averaging::Weighted => "WMean",
        };
        writeln!(
            out,
            "{:<6} {:>9.2} {:>9.2} {:>9.2}",
            label, self.mean_precision, self.mean_recall, self.mean_f1
        )
        .unwrap();
        writeln!(out, "accuracy {:.4}", self.accuracy).unwrap();
        writeln!(out, "zero-denominator precision/recall reported as 0").unwrap();
        out
    }
}

/// Most frequent grade, ties to the lowest.
pub fn most_frequent_grade(grades: &[u8]) -> u8 {
    let mut counts = [0usize; GRADES];
    for &g in grades {
        counts[g as usize] += 1;
    }
    let mut best = 0;
    for g in 1..GRADES {
        if counts[g] > counts[best] {
            best = g;
        }
    }
    best as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_formula() {
        assert_eq!(mse(&[0, 2], &[1.0, 4.0]).unwrap(), 2.5);
        assert_eq!(mse(&[3, 1], &[3.0, 1.0]).unwrap(), 0.0);
        assert!(mse(&[], &[]).is_err());
        assert!(mse(&[1], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_to_grade(2.5).unwrap(), 3);
        assert_eq!(round_to_grade(1.49).unwrap(), 1);
        assert_eq!(round_to_grade(-0.3).unwrap(), 0);
        assert_eq!(round_to_grade(-0.5).unwrap(), 0);
        assert_eq!(round_to_grade(4.7).unwrap(), 4);
        assert!(round_to_grade(f64::NAN).is_err());
        assert!(round_to_grade(f64::INFINITY).is_err());
    }

    #[test]
    fn confusion_cells() {
        let cm = confusion(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4]).unwrap();
        for t in 0..GRADES {
            for p in 0..GRADES {
                assert_eq!(cm.counts[t][p], (t == p) as u64);
            }
        }
        let one = confusion(&[0], &[4]).unwrap();
        assert_eq!(one.counts[0][4], 1);
        assert_eq!(one.total(), 1);
        assert_eq!(
            confusion(&[2, 0, 1], &[1, 0, 1]).unwrap(),
            confusion(&[1, 2, 0], &[1, 1, 0]).unwrap()
        );
        assert!(confusion(&[5], &[0]).is_err());
        assert!(confusion(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn diagonal_report_is_perfect() {
        let cm = confusion(&[0, 1, 1, 2, 3, 4], &[0, 1, 1, 2, 3, 4]).unwrap();
        let r = class_report(&cm);
        assert!(r
            .per_grade
            .iter()
            .all(|m| m.precision == 1.0 && m.recall == 1.0 && m.f1 == 1.0));
        assert_eq!(
            (r.mean_precision, r.mean_recall, r.mean_f1, r.accuracy),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn single_grade_direct_formulas() {
        // grade 1: TP=3, FP=1 (a grade-0 sample predicted 1), FN=1 (predicted 2)
        let truth = [1, 1, 1, 1, 0, 2];
        let pred = [1, 1, 1, 2, 1, 2];
        let r = class_report(&confusion(&truth, &pred).unwrap());
        let m = r.per_grade[1];
        assert_eq!((m.precision, m.recall, m.f1), (0.75, 0.75, 0.75));
    }

    #[test]
    fn absent_grades_excluded_from_macro_mean() {
        let cm = confusion(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap();
        let r = class_report(&cm);
        assert_eq!(r.mean_recall, 1.0);
        assert_eq!(r.per_grade[3], GradeMetrics::default());
    }

    #[test]
    fn baseline_grade() {
        assert_eq!(most_frequent_grade(&[2, 2, 1, 0, 0]), 0);
        assert_eq!(most_frequent_grade(&[3, 3, 1]), 3);
    }

    #[test]
    fn csv_layout() {
        let r = class_report(&confusion(&[0, 1], &[0, 1]).unwrap());
        let csv = r.to_csv();
        assert!(csv.starts_with("grade,precision,recall,f1\n0,1.0000,1.0000,1.0000\n"));
        assert_eq!(csv.lines().count(), 7);
    }
}
