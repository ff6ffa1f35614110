use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metric::{semantic_score, MetricTable};
use crate::corpus::{Answerability, Category};
use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 20;

/// One scored question: q_i, its reference y_i and the prediction a_i.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalItem {
    pub question: Vec<usize>,
    pub reference: Vec<usize>,
    pub prediction: Vec<usize>,
    pub category: Category,
    pub domain: String,
    pub answerability: Answerability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub n: usize,
    pub overall: f64,
    pub per_domain: BTreeMap<String, f64>,
    pub per_category: BTreeMap<String, f64>,
    pub per_answerability: BTreeMap<String, f64>,
    pub domain_counts: BTreeMap<String, usize>,
    pub category_counts: BTreeMap<String, usize>,
    pub answerability_counts: BTreeMap<String, usize>,
    /// Scores binned over [0, 1] in steps of 0.05; a score of 1 lands in the last bin.
    pub histogram: Vec<usize>,
}

#[derive(Default)]
struct Tally {
    hits: BTreeMap<String, usize>,
    counts: BTreeMap<String, usize>,
}

impl Tally {
    fn add(&mut self, key: &str, hit: bool) {
        *self.counts.entry(key.to_string()).or_default() += 1;
        *self.hits.entry(key.to_string()).or_default() += usize::from(hit);
    }

    fn rates(&self) -> BTreeMap<String, f64> {
        self.counts
            .iter()
            .map(|(k, &n)| (k.clone(), self.hits[k] as f64 / n as f64))
            .collect()
    }
}

/// Fraction of items whose score strictly exceeds `threshold`, overall and
/// broken down by domain, category and answerability.
pub fn accuracy_at(items: &[EvalItem], threshold: f64, table: &MetricTable) -> Result<EvalReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    if items.is_empty() {
        return Err(Error::Degenerate("no items to evaluate".into()));
    }
    let mut hits = 0usize;
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    let (mut dom, mut cat, mut ans) = (Tally::default(), Tally::default(), Tally::default());
    for it in items {
        let s = semantic_score(&it.prediction, &it.reference, table)?;
        let hit = s > threshold;
        hits += usize::from(hit);
        histogram[((s * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)] += 1;
        dom.add(&it.domain, hit);
        cat.add(it.category.name(), hit);
        ans.add(it.answerability.name(), hit);
    }
    Ok(EvalReport {
        threshold,
        n: items.len(),
        overall: hits as f64 / items.len() as f64,
        per_domain: dom.rates(),
        per_category: cat.rates(),
        per_answerability: ans.rates(),
        domain_counts: dom.counts,
        category_counts: cat.counts,
        answerability_counts: ans.counts,
        histogram,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
    }
}

/// Accuracy (in percent) per domain with a Total column, one row per method,
/// followed by the same rows broken down by question category.
pub fn render_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut domains: Vec<&String> = rows.iter().flat_map(|(_, r)| r.per_domain.keys()).collect();
    domains.sort();
    domains.dedup();
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let col = |s: &str| format!(" {s:>9}");
    let pct = |v: Option<&f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
    let mut out = String::new();
    if let Some((_, first)) = rows.first() {
        let _ = writeln!(out, "Accuracy (%) at T={}", first.threshold);
    }
    let _ = write!(out, "{:<name_w$}", "Method");
    for d in &domains {
        out.push_str(&col(d.strip_prefix("domain_").unwrap_or(d)));
    }
    out.push_str(&col("Total"));
    out.push('\n');
    for (name, r) in rows {
        let _ = write!(out, "{name:<name_w$}");
        for d in &domains {
            out.push_str(&col(&pct(r.per_domain.get(*d))));
        }
        out.push_str(&col(&pct(Some(&r.overall))));
        out.push('\n');
    }
    out.push('\n');
    let _ = write!(out, "{:<name_w$}", "Method");
    for c in Category::ALL {
        let _ = write!(out, " {:>22}", c.name());
    }
    out.push('\n');
    for (name, r) in rows {
        let _ = write!(out, "{name:<name_w$}");
        for c in Category::ALL {
            let _ = write!(out, " {:>22}", pct(r.per_category.get(c.name())));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::domain_label;
    use proptest::prelude::*;

    fn item(pred: Vec<usize>, reference: Vec<usize>, d: usize, c: Category) -> EvalItem {
        EvalItem {
            question: vec![1],
            reference,
            prediction: pred,
            category: c,
            domain: domain_label(d),
            answerability: Answerability::VisualOnly,
        }
    }

    #[test]
    fn half_correct_by_threshold() {
        // orthogonal table: [1,2] vs [1,2,3] scores 0.8; [1] vs [1,2,3,4] scores 0.4
        let t = MetricTable::orthogonal(8);
        let items = vec![
            item(vec![1, 2, 3], vec![1, 2, 3], 0, Category::InformationExtraction),
            item(vec![1], vec![1, 2, 3, 4], 1, Category::TemporalAwareness),
        ];
        let r = accuracy_at(&items, 0.8, &t).unwrap();
        assert_eq!(r.overall, 0.5);
        assert_eq!(r.n, 2);
        assert_eq!(r.histogram[19], 1);
        assert_eq!(r.histogram[8], 1);
        // exactly at T is a miss
        let tie = vec![item(vec![1, 2], vec![1, 2, 3], 0, Category::InformationExtraction)];
        let s = semantic_score(&tie[0].prediction, &tie[0].reference, &t).unwrap();
        assert!((s - 0.8).abs() < 1e-15);
        assert_eq!(accuracy_at(&tie, s, &t).unwrap().overall, 0.0);
    }

    #[test]
    fn errors_and_json() {
        let t = MetricTable::new(8);
        assert!(matches!(accuracy_at(&[], 0.8, &t), Err(Error::Degenerate(_))));
        let items = vec![item(vec![1], vec![1], 0, Category::ContentComprehension)];
        assert!(matches!(accuracy_at(&items, 1.0, &t), Err(Error::Config(_))));
        let r = accuracy_at(&items, 0.8, &t).unwrap();
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        let table = render_table(&[("full", &r)]);
        assert!(table.contains("Total") && table.contains("100.00"));
    }

    proptest! {
        #[test]
        fn partitions_and_monotone(
            raw in prop::collection::vec((prop::collection::vec(0usize..12, 0..4), prop::collection::vec(0usize..12, 1..4), 0usize..5, 0usize..3), 1..40)
        ) {
            let t = MetricTable::new(12);
            let items: Vec<EvalItem> = raw
                .into_iter()
                .map(|(p, r, d, c)| item(p, r, d, Category::ALL[c]))
                .collect();
            let mut last = f64::INFINITY;
            for th in [0.5, 0.6, 0.7, 0.8, 0.9] {
                let rep = accuracy_at(&items, th, &t).unwrap();
                prop_assert!(rep.overall <= last);
                last = rep.overall;
                for (map, counts) in [(&rep.per_domain, &rep.domain_counts), (&rep.per_category, &rep.category_counts)] {
                    let w: f64 = map.iter().map(|(k, a)| a * counts[k] as f64).sum::<f64>() / rep.n as f64;
                    prop_assert!((w - rep.overall).abs() < 1e-12);
                    prop_assert!(map.values().all(|a| (0.0..=1.0).contains(a)));
                }
                prop_assert_eq!(rep.histogram.iter().sum::<usize>(), rep.n);
            }
        }
    }
}
