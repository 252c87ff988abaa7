//! Test-set accuracy with percentile-bootstrap intervals, and side-by-side
//! comparison of several reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;

pub const DEFAULT_REPLICATES: usize = 2000;
pub const MIN_REPLICATES: usize = 1000;

/// Accuracy of one model on one test set. Accuracies are fractions in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub run_id: String,
    /// Content hash of the test set, so reports on different sets are never
    /// compared.
    pub test_set_id: String,
    pub test_size: usize,
    pub accuracy: f64,
    pub lower: f64,
    pub upper: f64,
    pub replicates: usize,
    /// `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    #[serde(default)]
    pub config_hash: String,
    pub seed: u64,
    /// Wall-clock seconds per stage that produced the model.
    #[serde(default)]
    pub durations: BTreeMap<String, f64>,
}

impl EvaluationReport {
    pub fn half_width(&self) -> f64 {
        (self.upper - self.lower) / 2.0
    }

    pub fn with_metadata(mut self, config_hash: &str, durations: BTreeMap<String, f64>) -> Self {
        self.config_hash = config_hash.to_string();
        self.durations = durations;
        self
    }
}

/// Percentile of sorted values with linear interpolation between order
/// statistics.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 95% percentile-bootstrap interval of the mean of `correct`.
pub fn bootstrap_interval(correct: &[bool], replicates: usize, seed: u64) -> Result<(f64, f64)> {
    if correct.is_empty() {
        return Err(Error::invalid("bootstrap over an empty test set"));
    }
    if replicates < MIN_REPLICATES {
        return Err(Error::invalid(format!(
            "{replicates} bootstrap replicates, at least {MIN_REPLICATES} required"
        )));
    }
    let n = correct.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats: Vec<f64> = (0..replicates)
        .map(|_| {
            let hits = (0..n).filter(|_| correct[rng.gen_range(0..n)]).count();
            hits as f64 / n as f64
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    Ok((percentile(&stats, 0.025), percentile(&stats, 0.975)))
}

/// Point accuracy on the whole test set with a bootstrap interval over
/// resampled test indices.
///
/// The interval is widened to include the point estimate in the rare case
/// the percentile interval misses it.
pub fn evaluate_bootstrap(
    model: &Model,
    test: &Dataset,
    replicates: usize,
    seed: u64,
    run_id: &str,
    test_set_id: &str,
) -> Result<EvaluationReport> {
    if test.is_empty() {
        return Err(Error::invalid("evaluation on an empty test set"));
    }
    let predicted = model.classify(test.features())?;
    let correct: Vec<bool> = predicted
        .iter()
        .zip(test.labels())
        .map(|(a, b)| a == b)
        .collect();
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    let (lower, upper) = bootstrap_interval(&correct, replicates, seed)?;

    let c = test.num_classes();
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for (&y, &ok) in test.labels().iter().zip(&correct) {
        totals[y] += 1;
        hits[y] += usize::from(ok);
    }
    let per_class_accuracy = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    Ok(EvaluationReport {
        run_id: run_id.to_string(),
        test_set_id: test_set_id.to_string(),
        test_size: test.len(),
        accuracy,
        lower: lower.min(accuracy),
        upper: upper.max(accuracy),
        replicates,
        per_class_accuracy,
        config_hash: String::new(),
        seed,
        durations: BTreeMap::new(),
    })
}

pub fn append_report(path: &Path, report: &EvaluationReport) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(report).expect("report serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Every report in a line-delimited file.
pub fn read_reports(path: &Path) -> Result<Vec<EvaluationReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                column: e.column(),
                detail: e.to_string(),
            })
        })
        .collect()
}

/// How two intervals relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    /// Same point estimate and same interval.
    Indistinguishable,
    Overlapping,
    /// The intervals do not overlap.
    Distinct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFlag {
    pub first: String,
    pub second: String,
    /// `second - first`, in accuracy fraction.
    pub difference: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub reports: Vec<EvaluationReport>,
    pub pairs: Vec<PairFlag>,
}

/// Line up reports on a shared test set and flag every pair of intervals.
pub fn compare_runs(reports: &[EvaluationReport]) -> Result<Comparison> {
    let Some(first) = reports.first() else {
        return Err(Error::invalid("nothing to compare"));
    };
    if let Some(r) = reports.iter().find(|r| r.test_set_id != first.test_set_id) {
        return Err(Error::invalid(format!(
            "run {} uses test set {}, run {} uses {}",
            first.run_id, first.test_set_id, r.run_id, r.test_set_id
        )));
    }
    let mut pairs = Vec::new();
    for (i, a) in reports.iter().enumerate() {
        for b in &reports[i + 1..] {
            let verdict = if a.accuracy == b.accuracy && a.lower == b.lower && a.upper == b.upper {
                Verdict::Indistinguishable
            } else if a.upper < b.lower || b.upper < a.lower {
                Verdict::Distinct
            } else {
                Verdict::Overlapping
            };
            pairs.push(PairFlag {
                first: a.run_id.clone(),
                second: b.run_id.clone(),
                difference: b.accuracy - a.accuracy,
                verdict,
            });
        }
    }
    Ok(Comparison {
        reports: reports.to_vec(),
        pairs,
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

impl Comparison {
    /// One column per run, as `accuracy ± half-width` in percent, followed by
    /// the pairwise flags.
    pub fn to_text(&self) -> String {
        let cells: Vec<(String, String)> = self
            .reports
            .iter()
            .map(|r| {
                (
                    r.run_id.clone(),
                    format!("{}±{}%", pct(r.accuracy), pct(r.half_width())),
                )
            })
            .collect();
        let widths: Vec<usize> = cells.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let mut out = String::new();
        for ((h, _), w) in cells.iter().zip(&widths) {
            let _ = write!(out, "{h:>w$}  ");
        }
        out = out.trim_end().to_string();
        out.push('\n');
        let mut line = String::new();
        for ((_, v), w) in cells.iter().zip(&widths) {
            let _ = write!(line, "{v:>w$}  ");
        }
        out.push_str(line.trim_end());
        out.push('\n');
        if !self.pairs.is_empty() {
            out.push('\n');
            let name_w = self
                .pairs
                .iter()
                .map(|p| p.first.len() + p.second.len() + 4)
                .max()
                .unwrap_or(0);
            for p in &self.pairs {
                let name = format!("{} vs {}", p.second, p.first);
                let verdict = match p.verdict {
                    Verdict::Indistinguishable => "indistinguishable",
                    Verdict::Overlapping => "overlapping",
                    Verdict::Distinct => "non-overlapping",
                };
                let _ = writeln!(
                    out,
                    "{name:<name_w$}  {:+.2}  {verdict}",
                    100.0 * p.difference
                );
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("run_id,accuracy,lower,upper,half_width,test_size,replicates\n");
        for r in &self.reports {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.run_id,
                r.accuracy,
                r.lower,
                r.upper,
                r.half_width(),
                r.test_size,
                r.replicates
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::models::{Mlp, MlpSpec};

    /// Predicts class 0 for a negative first feature and class 1 otherwise.
    fn sign_model() -> Model {
        let spec = MlpSpec::new(1, vec![2], 2).unwrap();
        let arrays = vec![
            vec![-1.0, 1.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
        ];
        Model::BlackBox(Mlp::from_arrays(spec, arrays).unwrap())
    }

    fn labelled(xs: &[f64], ys: &[usize]) -> Dataset {
        Dataset::new(
            Tensor::matrix(xs.len(), 1, xs.to_vec()).unwrap(),
            ys.to_vec(),
            2,
        )
        .unwrap()
    }

    #[test]
    fn all_correct_and_all_wrong_are_degenerate() {
        let xs = [-1.0, -2.0, 3.0, 0.5];
        let right = labelled(&xs, &[0, 0, 1, 1]);
        let r = evaluate_bootstrap(&sign_model(), &right, 1000, 0, "a", "t").unwrap();
        assert_eq!((r.accuracy, r.lower, r.upper), (1.0, 1.0, 1.0));
        assert_eq!(r.per_class_accuracy, vec![Some(1.0), Some(1.0)]);
        let wrong = labelled(&xs, &[1, 1, 0, 0]);
        let r = evaluate_bootstrap(&sign_model(), &wrong, 1000, 0, "a", "t").unwrap();
        assert_eq!((r.accuracy, r.lower, r.upper), (0.0, 0.0, 0.0));
    }

    #[test]
    fn half_correct_interval_matches_the_normal_approximation() {
        let correct: Vec<bool> = (0..10_000).map(|i| i % 2 == 0).collect();
        let (lo, hi) = bootstrap_interval(&correct, 2000, 1).unwrap();
        let oracle = 2.0 * 1.96 * (0.25f64 / 10_000.0).sqrt();
        assert!(
            ((hi - lo) - oracle).abs() < 0.005,
            "width {} vs {oracle}",
            hi - lo
        );
        assert!(lo < 0.5 && 0.5 < hi);
    }

    #[test]
    fn interval_shrinks_at_root_n() {
        let width = |n: usize| {
            let correct: Vec<bool> = (0..n).map(|i| i % 10 < 7).collect();
            let (lo, hi) = bootstrap_interval(&correct, 2000, 5).unwrap();
            hi - lo
        };
        let ratio = width(1000) / width(16_000);
        assert!((ratio / 4.0 - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn bootstrap_rejects_bad_input() {
        assert!(bootstrap_interval(&[], 2000, 0).is_err());
        assert!(bootstrap_interval(&[true], 999, 0).is_err());
        let empty = Dataset::new(Tensor::zeros(&[0, 1]), vec![], 2);
        if let Ok(empty) = empty {
            assert!(evaluate_bootstrap(&sign_model(), &empty, 1000, 0, "a", "t").is_err());
        }
    }

    #[test]
    fn reports_round_trip_through_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let data = labelled(&[-1.0, 2.0, 3.0], &[0, 0, 1]);
        let a = evaluate_bootstrap(&sign_model(), &data, 1000, 3, "a", "t").unwrap();
        let b = EvaluationReport {
            run_id: "b".into(),
            ..a.clone()
        };
        append_report(&path, &a).unwrap();
        append_report(&path, &b).unwrap();
        assert_eq!(read_reports(&path).unwrap(), vec![a, b]);
    }

    fn report(id: &str, acc: f64, lo: f64, hi: f64) -> EvaluationReport {
        EvaluationReport {
            run_id: id.into(),
            test_set_id: "t".into(),
            test_size: 100,
            accuracy: acc,
            lower: lo,
            upper: hi,
            replicates: 2000,
            per_class_accuracy: vec![],
            config_hash: String::new(),
            seed: 0,
            durations: BTreeMap::new(),
        }
    }

    #[test]
    fn identical_reports_are_indistinguishable() {
        let a = report("a", 0.9, 0.88, 0.92);
        let c = compare_runs(&[
            a.clone(),
            EvaluationReport {
                run_id: "b".into(),
                ..a
            },
        ])
        .unwrap();
        assert_eq!(c.pairs[0].difference, 0.0);
        assert_eq!(c.pairs[0].verdict, Verdict::Indistinguishable);
        assert!(c.to_text().contains("indistinguishable"));
    }

    #[test]
    fn three_column_layout() {
        let rs = [
            report("no-distill", 0.9332, 0.9283, 0.9381),
            report("kd", 0.9515, 0.9473, 0.9557),
            report("ked", 0.9687, 0.9653, 0.9721),
        ];
        let c = compare_runs(&rs).unwrap();
        let text = c.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0].split_whitespace().collect::<Vec<_>>(),
            ["no-distill", "kd", "ked"]
        );
        assert_eq!(
            lines[1].split_whitespace().collect::<Vec<_>>(),
            ["93.32±0.49%", "95.15±0.42%", "96.87±0.34%"]
        );
        assert_eq!(c.pairs.len(), 3);
        assert!(c.pairs.iter().all(|p| p.verdict == Verdict::Distinct));
        assert!(text.contains("ked vs kd") && text.contains("+1.72"));
        assert_eq!(c.to_csv().lines().count(), 4);
        let overlap =
            compare_runs(&[report("a", 0.5, 0.4, 0.6), report("b", 0.55, 0.45, 0.65)]).unwrap();
        assert_eq!(overlap.pairs[0].verdict, Verdict::Overlapping);
    }

    #[test]
    fn mismatched_test_sets_are_rejected() {
        let a = report("a", 0.9, 0.88, 0.92);
        let b = EvaluationReport {
            test_set_id: "other".into(),
            ..a.clone()
        };
        assert!(compare_runs(&[a, b]).is_err());
        assert!(compare_runs(&[]).is_err());
    }
}
