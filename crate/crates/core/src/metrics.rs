//! Binary detection metrics, per-category detection rates and comparison
//! tables between independently trained and federated models.
//!
//! The positive class is "vulnerable". A vulnerable category's detection rate
//! is the fraction of its vulnerable samples predicted vulnerable; the secure
//! category's rate is the fraction of secure samples predicted secure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedSample, SECURE};
use crate::error::{Error, Result};
use crate::federation::{local_train, FederationConfig};
use crate::refmodel::{predict_samples, ParamSet};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub n_samples: usize,
    /// Samples the rate is measured over (vulnerable samples for a CWE
    /// category, every sample for the secure category).
    pub n_relevant: usize,
    pub n_detected: usize,
    pub detection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_category: BTreeMap<String, CategoryStats>,
    pub confusion: Confusion,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Score binary predictions (1 = vulnerable) against labels, broken down by
/// category tag.
pub fn evaluate<S: AsRef<str>>(
    predictions: &[usize],
    labels: &[usize],
    categories: &[S],
) -> Result<EvaluationReport> {
    if predictions.len() != labels.len() || labels.len() != categories.len() {
        return Err(Error::Input(format!(
            "length mismatch: {} predictions, {} labels, {} categories",
            predictions.len(),
            labels.len(),
            categories.len()
        )));
    }
    if let Some(bad) = predictions.iter().chain(labels).find(|&&v| v > 1) {
        return Err(Error::Input(format!("non-binary class {bad}")));
    }
    let mut confusion = Confusion::default();
    let mut per_category: BTreeMap<String, CategoryStats> = BTreeMap::new();
    for ((&p, &y), cat) in predictions.iter().zip(labels).zip(categories) {
        match (p, y) {
            (1, 1) => confusion.tp += 1,
            (1, _) => confusion.fp += 1,
            (_, 1) => confusion.fn_ += 1,
            _ => confusion.tn += 1,
        }
        let cat = cat.as_ref();
        let stats = per_category
            .entry(cat.to_string())
            .or_insert(CategoryStats {
                n_samples: 0,
                n_relevant: 0,
                n_detected: 0,
                detection_rate: 0.0,
            });
        stats.n_samples += 1;
        if cat == SECURE {
            stats.n_relevant += 1;
            stats.n_detected += usize::from(p == 0);
        } else if y == 1 {
            stats.n_relevant += 1;
            stats.n_detected += usize::from(p == 1);
        }
    }
    for stats in per_category.values_mut() {
        stats.detection_rate = ratio(stats.n_detected, stats.n_relevant);
    }
    let c = confusion;
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EvaluationReport {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f1,
        per_category,
        confusion,
    })
}

/// Predict every sample with `params` (adapters folded in) and score it.
pub fn evaluate_model(params: &ParamSet, samples: &[EncodedSample]) -> Result<EvaluationReport> {
    let effective = crate::peft::effective_params(params)?;
    let predictions = predict_samples(&effective, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label.class()).collect();
    let categories: Vec<&str> = samples.iter().map(|s| s.category.as_str()).collect();
    evaluate(&predictions, &labels, &categories)
}

impl EvaluationReport {
    /// Report as CSV. Columns: `section,key,n_samples,value`. Global metrics
    /// come first, then the confusion counts, then one row per category in
    /// name order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let to_err = |e: csv::Error| Error::Input(format!("csv: {e}"));
        w.write_record(["section", "key", "n_samples", "value"])
            .map_err(to_err)?;
        let n = self.confusion.total().to_string();
        for (key, v) in [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
        ] {
            w.write_record(["global", key, &n, &format!("{v:.6}")])
                .map_err(to_err)?;
        }
        let c = &self.confusion;
        for (key, v) in [("tp", c.tp), ("fp", c.fp), ("tn", c.tn), ("fn", c.fn_)] {
            w.write_record(["confusion", key, "", &v.to_string()])
                .map_err(to_err)?;
        }
        for (cat, s) in &self.per_category {
            w.write_record([
                "category",
                cat.as_str(),
                &s.n_samples.to_string(),
                &format!("{:.6}", s.detection_rate),
            ])
            .map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::Input(format!("csv: {e}")))
    }

    /// One `key=value` record per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.confusion;
        let _ = writeln!(s, "accuracy={:.6}", self.accuracy);
        let _ = writeln!(s, "precision={:.6}", self.precision);
        let _ = writeln!(s, "recall={:.6}", self.recall);
        let _ = writeln!(s, "f1={:.6}", self.f1);
        let _ = writeln!(
            s,
            "confusion tp={} fp={} tn={} fn={}",
            c.tp, c.fp, c.tn, c.fn_
        );
        for (cat, st) in &self.per_category {
            let _ = writeln!(
                s,
                "category={cat} n_samples={} detection_rate={:.6}",
                st.n_samples, st.detection_rate
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub category: String,
    pub independent_rate: f64,
    pub federated_rate: f64,
}

impl ComparisonRow {
    pub fn improvement(&self) -> f64 {
        self.federated_rate - self.independent_rate
    }
}

/// Per-category rates of two reports, ordered by ascending improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

pub fn compare(
    independent: &EvaluationReport,
    federated: &EvaluationReport,
) -> Result<ComparisonTable> {
    let a: Vec<&String> = independent.per_category.keys().collect();
    let b: Vec<&String> = federated.per_category.keys().collect();
    if a != b {
        return Err(Error::Input(format!(
            "category mismatch: {a:?} versus {b:?}"
        )));
    }
    let mut rows: Vec<ComparisonRow> = independent
        .per_category
        .iter()
        .map(|(cat, s)| ComparisonRow {
            category: cat.clone(),
            independent_rate: s.detection_rate,
            federated_rate: federated.per_category[cat].detection_rate,
        })
        .collect();
    rows.sort_by(|x, y| {
        x.improvement()
            .total_cmp(&y.improvement())
            .then_with(|| x.category.cmp(&y.category))
    });
    Ok(ComparisonTable { rows })
}

impl ComparisonTable {
    pub fn row(&self, category: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.category == category)
    }

    /// Three rows (independent, federated, improvement) with one column per
    /// category, rates in percent with two decimals.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let to_err = |e: csv::Error| Error::Input(format!("csv: {e}"));
        let mut header = vec!["row".to_string()];
        header.extend(self.rows.iter().map(|r| r.category.clone()));
        w.write_record(&header).map_err(to_err)?;
        for (name, f) in Self::row_kinds() {
            let mut rec = vec![name.to_string()];
            rec.extend(self.rows.iter().map(|r| format!("{:.2}", 100.0 * f(r))));
            w.write_record(&rec).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::Input(format!("csv: {e}")))
    }

    pub fn to_text(&self) -> String {
        let label_width = 12;
        let widths: Vec<usize> = self.rows.iter().map(|r| r.category.len().max(8)).collect();
        let mut s = format!("{:<label_width$}", "");
        for (r, w) in self.rows.iter().zip(&widths) {
            let _ = write!(s, " {:>w$}", r.category);
        }
        s.push('\n');
        for (name, f) in Self::row_kinds() {
            let _ = write!(s, "{name:<label_width$}");
            for (r, w) in self.rows.iter().zip(&widths) {
                let _ = write!(s, " {:>w$}", format!("{:.2}%", 100.0 * f(r)));
            }
            s.push('\n');
        }
        s
    }

    #[allow(clippy::type_complexity)]
    fn row_kinds() -> [(&'static str, fn(&ComparisonRow) -> f64); 3] {
        [
            ("independent", |r| r.independent_rate),
            ("federated", |r| r.federated_rate),
            ("improvement", |r| r.improvement()),
        ]
    }
}

/// Train a fresh copy of `initial` on one client's data alone for
/// `rounds * local_epochs` epochs and evaluate it on the shared test set.
pub fn independent_baseline(
    client_id: usize,
    samples: &[EncodedSample],
    initial: &ParamSet,
    config: &FederationConfig,
    test: &[EncodedSample],
) -> Result<EvaluationReport> {
    if samples.is_empty() {
        return Err(Error::Input(format!("client {client_id} has no samples")));
    }
    let mut solo = config.clone();
    solo.local_epochs = config.rounds * config.local_epochs;
    let mut rng = crate::rng::stream(config.seed, &[crate::rng::TAG_BASELINE, client_id as u64]);
    let update = local_train(client_id, samples, initial, &solo, &[], &mut rng)?;
    let mut trained = initial.clone();
    trained.set_hot_vector(&update.hot_params)?;
    evaluate_model(&trained, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cats(n: usize, name: &str) -> Vec<String> {
        vec![name.to_string(); n]
    }

    #[test]
    fn all_correct() {
        let labels = [1, 0, 1, 1, 0];
        let r = evaluate(&labels, &labels, &cats(5, "CWE-20")).unwrap();
        assert_eq!(
            (r.accuracy, r.precision, r.recall, r.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn counting_example() {
        // tp=2, fp=1, fn=1, tn=6
        let preds = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
        let labels = [1, 1, 0, 1, 0, 0, 0, 0, 0, 0];
        let r = evaluate(&preds, &labels, &cats(10, "x")).unwrap();
        assert_eq!(
            r.confusion,
            Confusion {
                tp: 2,
                fp: 1,
                tn: 6,
                fn_: 1
            }
        );
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.accuracy - 0.8).abs() < 1e-15);
    }

    #[test]
    fn no_positive_predictions() {
        let r = evaluate(&[0, 0, 0], &[1, 0, 1], &cats(3, "x")).unwrap();
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(
            evaluate(&[0, 1], &[0], &cats(2, "x")),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            evaluate(&[2], &[0], &cats(1, "x")),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn category_rates() {
        let preds = [1, 0, 1, 0, 0, 1];
        let labels = [1, 1, 1, 0, 0, 0];
        let c = ["CWE-20", "CWE-20", "CWE-787", SECURE, SECURE, SECURE];
        let r = evaluate(&preds, &labels, &c).unwrap();
        assert_eq!(r.per_category["CWE-20"].detection_rate, 0.5);
        assert_eq!(r.per_category["CWE-787"].detection_rate, 1.0);
        assert!((r.per_category[SECURE].detection_rate - 2.0 / 3.0).abs() < 1e-15);
        let total: usize = r.per_category.values().map(|s| s.n_samples).sum();
        assert_eq!(total, 6);
    }

    fn report_with(rates: &[(&str, f64)]) -> EvaluationReport {
        let mut r = evaluate(&[0], &[0], &[SECURE]).unwrap();
        r.per_category = rates
            .iter()
            .map(|(c, v)| {
                let stats = CategoryStats {
                    n_samples: 1,
                    n_relevant: 1,
                    n_detected: 0,
                    detection_rate: *v,
                };
                (c.to_string(), stats)
            })
            .collect();
        r
    }

    #[test]
    fn comparison_examples() {
        let ind = report_with(&[("CWE-189", 0.0970), ("CWE-295", 0.0667)]);
        let fed = report_with(&[("CWE-189", 0.1152), ("CWE-295", 0.7000)]);
        let t = compare(&ind, &fed).unwrap();
        assert!((t.row("CWE-189").unwrap().improvement() - 0.0182).abs() < 1e-12);
        assert!((t.row("CWE-295").unwrap().improvement() - 0.6333).abs() < 1e-12);
        assert_eq!(t.rows[0].category, "CWE-189");
        let same = compare(&fed, &fed).unwrap();
        assert!(same.rows.iter().all(|r| r.improvement() == 0.0));
        let swapped = compare(&fed, &ind).unwrap();
        for r in &t.rows {
            assert_eq!(
                swapped.row(&r.category).unwrap().improvement(),
                -r.improvement()
            );
        }
        let other = report_with(&[("CWE-189", 0.1)]);
        assert!(matches!(compare(&ind, &other), Err(Error::Input(_))));

        let mut csv = Vec::new();
        t.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(
            csv,
            "row,CWE-189,CWE-295\nindependent,9.70,6.67\nfederated,11.52,70.00\nimprovement,1.82,63.33\n"
        );
        assert!(t.to_text().contains("63.33%"));
    }

    #[test]
    fn report_csv_layout() {
        let r = evaluate(&[1, 0], &[1, 1], &["CWE-20", "CWE-20"]).unwrap();
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "section,key,n_samples,value");
        assert_eq!(lines[1], "global,accuracy,2,0.500000");
        assert_eq!(lines[5], "confusion,tp,,1");
        assert_eq!(lines[9], "category,CWE-20,2,0.500000");
        assert!(r.to_text().starts_with("accuracy=0.500000\n"));
    }

    proptest! {
        #[test]
        fn matches_brute_force(cases in proptest::collection::vec((0usize..2, 0usize..2, 0usize..3), 1..60)) {
            let preds: Vec<usize> = cases.iter().map(|c| c.0).collect();
            let labels: Vec<usize> = cases.iter().map(|c| c.1).collect();
            let names = ["CWE-1", "CWE-2", SECURE];
            let c: Vec<&str> = cases.iter().map(|x| if x.1 == 0 { SECURE } else { names[x.2 % 2] }).collect();
            let r = evaluate(&preds, &labels, &c).unwrap();
            let count = |p, y| cases.iter().filter(|x| x.0 == p && x.1 == y).count();
            prop_assert_eq!(r.confusion, Confusion { tp: count(1, 1), fp: count(1, 0), tn: count(0, 0), fn_: count(0, 1) });
            // vulnerable categories' sample-weighted detection rates give recall
            let (mut hits, mut total) = (0.0, 0.0);
            for (cat, s) in &r.per_category {
                if cat != SECURE {
                    hits += s.detection_rate * s.n_relevant as f64;
                    total += s.n_relevant as f64;
                }
            }
            if total > 0.0 {
                prop_assert!((hits / total - r.recall).abs() < 1e-12);
            }
        }
    }
}
