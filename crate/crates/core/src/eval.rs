//! Accuracy evaluation, seed aggregation, paired t-tests and cross-task
//! transfer matrices.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::backend::{classify, Backend, ModelHandle};
use crate::config::{ClassSet, HypothesisTemplate};
use crate::datasets::{Corpus, Registry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset_id: String,
    /// e.g. `base`, `iter_2`, `masked`.
    pub model_tag: String,
    pub accuracy: f64,
    pub correct: usize,
    pub n_examples: usize,
    pub seed: u64,
}

/// Fraction of `evalset` whose top-scoring class equals the gold class.
pub fn evaluate_accuracy(
    backend: &dyn Backend,
    model: &ModelHandle,
    evalset: &Corpus,
    classes: &ClassSet,
    template: &HypothesisTemplate,
    model_tag: &str,
    seed: u64,
) -> Result<EvalResult> {
    let gold = evalset.gold_labels().ok_or_else(|| {
        Error::Validation(format!(
            "evaluation set `{}` has no gold labels",
            evalset.dataset_id()
        ))
    })?;
    if let Some(bad) = gold.iter().find(|g| !classes.contains(g)) {
        return Err(Error::Validation(format!(
            "gold label `{bad}` is not one of the classes of `{}`",
            classes.dataset_id()
        )));
    }
    if evalset.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    let hits: Vec<bool> = evalset
        .examples()
        .par_iter()
        .zip(gold.par_iter())
        .map(|(ex, g)| {
            classify(backend, model, &ex.text, classes, template)
                .map(|p| &p.top_class == g)
                .map_err(|e| Error::Scoring {
                    id: ex.id.clone(),
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    let correct = hits.iter().filter(|h| **h).count();
    Ok(EvalResult {
        dataset_id: evalset.dataset_id().to_string(),
        model_tag: model_tag.to_string(),
        accuracy: correct as f64 / hits.len() as f64,
        correct,
        n_examples: hits.len(),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub dataset_id: String,
    pub model_tag: String,
    pub mean: f64,
    /// Standard error of the mean (sample standard deviation / sqrt(n)).
    pub sem: f64,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub repetitions: usize,
    /// Set when only one repetition exists, so `sem` is 0 by convention.
    pub single_run: bool,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

pub fn sem(values: &[f64]) -> f64 {
    sample_std(values) / (values.len() as f64).sqrt()
}

pub fn aggregate_seeds(results: &[EvalResult]) -> Result<AggregateResult> {
    let first = results
        .first()
        .ok_or_else(|| Error::Validation("cannot aggregate zero results".into()))?;
    if let Some(other) = results
        .iter()
        .find(|r| r.dataset_id != first.dataset_id || r.model_tag != first.model_tag)
    {
        return Err(Error::Validation(format!(
            "cannot aggregate {}/{} with {}/{}",
            first.dataset_id, first.model_tag, other.dataset_id, other.model_tag
        )));
    }
    let values: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    Ok(AggregateResult {
        dataset_id: first.dataset_id.clone(),
        model_tag: first.model_tag.clone(),
        mean: mean(&values),
        sem: sem(&values),
        seeds: results.iter().map(|r| r.seed).collect(),
        repetitions: values.len(),
        single_run: values.len() == 1,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided p value.
    pub p: f64,
    pub df: usize,
    pub mean_difference: f64,
}

/// Two-sided paired t-test on `a[i] - b[i]`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Validation(
            "a paired t-test needs at least two pairs".into(),
        ));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let sd = sample_std(&diffs);
    if sd == 0.0 || !sd.is_finite() {
        return Err(Error::Degenerate(
            "paired differences have zero variance".into(),
        ));
    }
    let n = diffs.len();
    let md = mean(&diffs);
    let t = md / (sd / (n as f64).sqrt());
    let df = n - 1;
    let dist = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| Error::Degenerate(format!("t distribution: {e}")))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        t,
        p,
        df,
        mean_difference: md,
    })
}

/// Fraction of `trials` paired t-tests that reject at `alpha` when both arms
/// are drawn from the same normal distribution. A calibrated test rejects
/// close to `alpha` of the time.
pub fn null_rejection_rate(trials: usize, pairs: usize, alpha: f64, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Validation("need at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rejected = 0;
    for _ in 0..trials {
        let a: Vec<f64> = (0..pairs).map(|_| noise.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..pairs).map(|_| noise.sample(&mut rng)).collect();
        if paired_ttest(&a, &b)?.p < alpha {
            rejected += 1;
        }
    }
    Ok(rejected as f64 / trials as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossTaskCell {
    pub delta: f64,
    pub self_trained_accuracy: f64,
    pub base_accuracy: f64,
}

/// Sources (self-training datasets) by targets (evaluation datasets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTaskMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// `cells[i][j]` is `None` when source `i` could not be evaluated on target `j`.
    pub cells: Vec<Vec<Option<CrossTaskCell>>>,
}

impl CrossTaskMatrix {
    pub fn cell(&self, source: &str, target: &str) -> Option<&CrossTaskCell> {
        let i = self.sources.iter().position(|s| s == source)?;
        let j = self.targets.iter().position(|t| t == target)?;
        self.cells[i][j].as_ref()
    }

    /// Source rows, target columns, empty fields for absent cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source");
        for t in &self.targets {
            out.push(',');
            out.push_str(&csv_field(t));
        }
        out.push('\n');
        for (source, row) in self.sources.iter().zip(&self.cells) {
            out.push_str(&csv_field(source));
            for cell in row {
                out.push(',');
                if let Some(c) = cell {
                    let _ = write!(out, "{}", c.delta);
                }
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Evaluate each self-trained model on every evaluation set and subtract the
/// base model's accuracy on that set. A `None` run or a failed evaluation
/// leaves the cell absent. Each target is scored with its own class names.
pub fn cross_task_matrix(
    backend: &dyn Backend,
    base_model: &ModelHandle,
    runs: &BTreeMap<String, Option<ModelHandle>>,
    evalsets: &BTreeMap<String, Corpus>,
    registry: &Registry,
    template: &HypothesisTemplate,
) -> Result<CrossTaskMatrix> {
    let mut classes = BTreeMap::new();
    for target in evalsets.keys() {
        classes.insert(target.clone(), registry.get(target)?.clone());
    }
    let mut base = BTreeMap::new();
    for (target, corpus) in evalsets {
        let r = evaluate_accuracy(backend, base_model, corpus, &classes[target], template, "base", 0)?;
        base.insert(target.clone(), r.accuracy);
    }

    let mut cells = Vec::with_capacity(runs.len());
    for (source, model) in runs {
        let mut row = Vec::with_capacity(evalsets.len());
        for (target, corpus) in evalsets {
            let cell = match model {
                None => None,
                Some(m) => {
                    match evaluate_accuracy(backend, m, corpus, &classes[target], template, source, 0) {
                        Ok(r) => Some(CrossTaskCell {
                            delta: r.accuracy - base[target],
                            self_trained_accuracy: r.accuracy,
                            base_accuracy: base[target],
                        }),
                        Err(e) => {
                            log::warn!("cross-task cell {source} -> {target} absent: {e}");
                            None
                        }
                    }
                }
            };
            row.push(cell);
        }
        cells.push(row);
    }
    Ok(CrossTaskMatrix {
        sources: runs.keys().cloned().collect(),
        targets: evalsets.keys().cloned().collect(),
        cells,
    })
}

/// One row of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub model_tag: String,
    pub dataset: String,
    pub mean: f64,
    pub sem: f64,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
}

impl From<&AggregateResult> for ReportEntry {
    fn from(a: &AggregateResult) -> Self {
        ReportEntry {
            model_tag: a.model_tag.clone(),
            dataset: a.dataset_id.clone(),
            mean: a.mean,
            sem: a.sem,
            seeds: a.seeds.clone(),
            p_value: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One test over every (dataset, seed) pair.
    Pooled,
    PerDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub treatment: String,
    pub control: String,
    pub pooling: Pooling,
    pub alternative: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub n_pairs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<TTest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub entries: Vec<ReportEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comparisons: Vec<Comparison>,
}

/// Group results by (model tag, dataset) and aggregate each group.
pub fn aggregate_all(results: &[EvalResult]) -> Result<Vec<AggregateResult>> {
    let mut groups: BTreeMap<(String, String), Vec<EvalResult>> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.model_tag.clone(), r.dataset_id.clone()))
            .or_default()
            .push(r.clone());
    }
    groups.values().map(|g| aggregate_seeds(g)).collect()
}

/// Pair results of two model tags by (dataset, seed).
fn paired_values(
    results: &[EvalResult],
    treatment: &str,
    control: &str,
    dataset: Option<&str>,
) -> (Vec<f64>, Vec<f64>) {
    let index: BTreeMap<(&str, u64), f64> = results
        .iter()
        .filter(|r| r.model_tag == control)
        .map(|r| ((r.dataset_id.as_str(), r.seed), r.accuracy))
        .collect();
    let mut keyed: Vec<((&str, u64), f64, f64)> = results
        .iter()
        .filter(|r| r.model_tag == treatment)
        .filter(|r| dataset.is_none_or(|d| d == r.dataset_id))
        .filter_map(|r| {
            let key = (r.dataset_id.as_str(), r.seed);
            index.get(&key).map(|c| (key, r.accuracy, *c))
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    keyed.into_iter().map(|(_, t, c)| (t, c)).unzip()
}

/// Paired two-sided t-test of `treatment` against `control`.
pub fn compare(
    results: &[EvalResult],
    treatment: &str,
    control: &str,
    pooling: Pooling,
) -> Vec<Comparison> {
    let datasets: Vec<Option<String>> = match pooling {
        Pooling::Pooled => vec![None],
        Pooling::PerDataset => {
            let mut ds: Vec<String> = results.iter().map(|r| r.dataset_id.clone()).collect();
            ds.sort();
            ds.dedup();
            ds.into_iter().map(Some).collect()
        }
    };
    datasets
        .into_iter()
        .map(|dataset| {
            let (a, b) = paired_values(results, treatment, control, dataset.as_deref());
            let (test, note) = match paired_ttest(&a, &b) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Comparison {
                treatment: treatment.to_string(),
                control: control.to_string(),
                pooling,
                alternative: "two-sided".to_string(),
                dataset,
                n_pairs: a.len(),
                test,
                note,
            }
        })
        .collect()
}

/// Build a report: one entry per (tag, dataset), with the pooled p value of
/// `treatment` vs `control` attached to the treatment rows when both exist.
pub fn build_report(
    results: &[EvalResult],
    comparison: Option<(&str, &str)>,
    pooling: Pooling,
) -> Result<Report> {
    let aggregates = aggregate_all(results)?;
    let mut entries: Vec<ReportEntry> = aggregates.iter().map(ReportEntry::from).collect();
    let comparisons = match comparison {
        Some((treatment, control)) => compare(results, treatment, control, pooling),
        None => Vec::new(),
    };
    for c in &comparisons {
        let Some(test) = c.test else { continue };
        for e in entries.iter_mut().filter(|e| e.model_tag == c.treatment) {
            if c.dataset.as_deref().is_none_or(|d| d == e.dataset) {
                e.p_value = Some(test.p);
            }
        }
    }
    Ok(Report {
        entries,
        comparisons,
    })
}

impl Report {
    /// Markdown table: one row per model tag, one column per dataset, plus the average.
    pub fn to_markdown(&self) -> String {
        let mut datasets: Vec<&str> = self.entries.iter().map(|e| e.dataset.as_str()).collect();
        datasets.sort();
        datasets.dedup();
        let mut tags: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !tags.contains(&e.model_tag.as_str()) {
                tags.push(&e.model_tag);
            }
        }
        let mut out = String::from("| model |");
        for d in &datasets {
            let _ = write!(out, " {d} |");
        }
        out.push_str(" avg. |\n|---|");
        for _ in 0..=datasets.len() {
            out.push_str("---|");
        }
        out.push('\n');
        for tag in tags {
            let _ = write!(out, "| {tag} |");
            let mut means = Vec::new();
            for d in &datasets {
                match self.entries.iter().find(|e| e.model_tag == tag && e.dataset == *d) {
                    Some(e) => {
                        means.push(e.mean);
                        let _ = write!(out, " {:.1} ±{:.1} |", 100.0 * e.mean, 100.0 * e.sem);
                    }
                    None => out.push_str(" - |"),
                }
            }
            if means.len() == datasets.len() {
                let _ = writeln!(out, " {:.1} |", 100.0 * mean(&means));
            } else {
                out.push_str(" - |\n");
            }
        }
        for c in &self.comparisons {
            let scope = c.dataset.as_deref().unwrap_or("pooled");
            match c.test {
                Some(t) => {
                    let _ = writeln!(
                        out,
                        "\n{} vs {} ({scope}, {} pairs, paired {}): t = {:.3}, p = {:.3e}",
                        c.treatment, c.control, c.n_pairs, c.alternative, t.t, t.p
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        "\n{} vs {} ({scope}): no test ({})",
                        c.treatment,
                        c.control,
                        c.note.as_deref().unwrap_or("insufficient pairs")
                    );
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn result(tag: &str, ds: &str, seed: u64, acc: f64) -> EvalResult {
        EvalResult {
            dataset_id: ds.into(),
            model_tag: tag.into(),
            accuracy: acc,
            correct: 0,
            n_examples: 0,
            seed,
        }
    }

    #[test]
    fn aggregate_constant_values() {
        let rs: Vec<_> = (0..3).map(|s| result("st", "d", s, 0.6)).collect();
        let a = aggregate_seeds(&rs).unwrap();
        assert_relative_eq!(a.mean, 0.6, max_relative = 1e-12);
        assert_eq!(a.sem, 0.0);
        assert_eq!(a.repetitions, 3);
    }

    #[test]
    fn aggregate_two_values() {
        let a = aggregate_seeds(&[result("st", "d", 0, 0.5), result("st", "d", 1, 0.7)]).unwrap();
        assert_relative_eq!(a.mean, 0.6, max_relative = 1e-12);
        // sqrt(0.02) / sqrt(2)
        assert_relative_eq!(a.sem, 0.1, max_relative = 1e-12);
    }

    #[test]
    fn aggregate_edge_cases() {
        assert!(aggregate_seeds(&[]).is_err());
        let single = aggregate_seeds(&[result("st", "d", 0, 0.4)]).unwrap();
        assert!(single.single_run);
        assert_eq!(single.sem, 0.0);
        assert!(aggregate_seeds(&[result("a", "d", 0, 0.4), result("b", "d", 0, 0.4)]).is_err());
        let five: Vec<_> = (0..5).map(|s| result("st", "d", s, 0.5 + s as f64 / 100.0)).collect();
        assert_eq!(aggregate_seeds(&five).unwrap().repetitions, 5);
    }

    #[test]
    fn ttest_errors() {
        assert!(matches!(
            paired_ttest(&[1.0, 2.0], &[1.0]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            paired_ttest(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(paired_ttest(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn ttest_is_antisymmetric() {
        let a = [0.61, 0.65, 0.70, 0.58, 0.66];
        let b = [0.55, 0.60, 0.69, 0.50, 0.62];
        let ab = paired_ttest(&a, &b).unwrap();
        let ba = paired_ttest(&b, &a).unwrap();
        assert_relative_eq!(ab.t, -ba.t, max_relative = 1e-12);
        assert_relative_eq!(ab.p, ba.p, max_relative = 1e-12);
        assert_eq!(ab.df, 4);
    }

    #[test]
    fn csv_marks_absent_cells_empty() {
        let cell = |d| {
            Some(CrossTaskCell {
                delta: d,
                self_trained_accuracy: 0.0,
                base_accuracy: 0.0,
            })
        };
        let m = CrossTaskMatrix {
            sources: vec!["a".into(), "b".into()],
            targets: vec!["x".into(), "y".into(), "z".into()],
            cells: vec![vec![cell(0.5), None, cell(-0.25)], vec![None, None, None]],
        };
        assert_eq!(m.to_csv(), "source,x,y,z\na,0.5,,-0.25\nb,,,\n");
        assert_eq!(m.cell("a", "z").unwrap().delta, -0.25);
        assert!(m.cell("b", "x").is_none());
    }

    #[test]
    fn report_pairs_by_dataset_and_seed() {
        let mut rs = Vec::new();
        for (ds, base) in [("a", 0.5), ("b", 0.6)] {
            for seed in 0..3u64 {
                rs.push(result("base", ds, seed, base));
                rs.push(result("st", ds, seed, base + 0.05 + seed as f64 * 0.01));
            }
        }
        let report = build_report(&rs, Some(("st", "base")), Pooling::Pooled).unwrap();
        assert_eq!(report.entries.len(), 4);
        assert_eq!(report.comparisons.len(), 1);
        assert_eq!(report.comparisons[0].n_pairs, 6);
        let p = report.comparisons[0].test.unwrap().p;
        assert!(report
            .entries
            .iter()
            .filter(|e| e.model_tag == "st")
            .all(|e| e.p_value == Some(p)));
        assert!(report.entries.iter().filter(|e| e.model_tag == "base").all(|e| e.p_value.is_none()));
        let md = report.to_markdown();
        assert!(md.contains("| st |"));
        assert!(md.contains("pooled"));

        let per = compare(&rs, "st", "base", Pooling::PerDataset);
        assert_eq!(per.len(), 2);
        assert!(per.iter().all(|c| c.n_pairs == 3));
    }

    #[test]
    fn report_json_schema() {
        let report = build_report(&[result("st", "d", 7, 0.5)], None, Pooling::Pooled).unwrap();
        let v = serde_json::to_value(&report.entries[0]).unwrap();
        assert_eq!(v["model_tag"], "st");
        assert_eq!(v["dataset"], "d");
        assert_eq!(v["seeds"], serde_json::json!([7]));
        assert!(v.get("p_value").is_none());
    }
}
