//! Recall@k, mAP@k and subset Recall@k, plus table-shaped reports.
//!
//! AP@k for a ranking `r` and positive set `P`:
//!
//! ```text
//! AP@k = ( sum_{i=1..k} Precision@i * rel(i) ) / min(k, |P|)
//! ```
//!
//! Items past rank k contribute nothing. A record with an empty ranking (a
//! failed query) counts as a miss.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub ranking: Vec<String>,
    pub positives: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ranking: Option<Vec<String>>,
}

impl EvalRecord {
    pub fn new<R, P>(query_id: impl Into<String>, ranking: R, positives: P) -> Self
    where
        R: IntoIterator,
        R::Item: Into<String>,
        P: IntoIterator,
        P::Item: Into<String>,
    {
        Self {
            query_id: query_id.into(),
            ranking: ranking.into_iter().map(Into::into).collect(),
            positives: positives.into_iter().map(Into::into).collect(),
            subset_ranking: None,
        }
    }

    pub fn with_subset<S>(mut self, subset: S) -> Self
    where
        S: IntoIterator,
        S::Item: Into<String>,
    {
        self.subset_ranking = Some(subset.into_iter().map(Into::into).collect());
        self
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidK(k));
    }
    Ok(())
}

fn hit_at_k(ranking: &[String], positives: &BTreeSet<String>, k: usize) -> bool {
    ranking.iter().take(k).any(|id| positives.contains(id))
}

/// Fraction of records with at least one positive in the top `k`.
pub fn recall_at_k(records: &[EvalRecord], k: usize) -> Result<f64> {
    check_k(k)?;
    if records.is_empty() {
        return Err(Error::EmptyEval);
    }
    let hits = records
        .iter()
        .filter(|r| hit_at_k(&r.ranking, &r.positives, k))
        .count();
    Ok(hits as f64 / records.len() as f64)
}

pub fn average_precision_at_k<S: AsRef<str>>(
    ranking: &[S],
    positives: &HashSet<&str>,
    k: usize,
) -> Result<f64> {
    check_k(k)?;
    if positives.is_empty() {
        return Err(Error::InvalidInput("positives must be nonempty".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranking.iter().take(k).enumerate() {
        if positives.contains(id.as_ref()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / k.min(positives.len()) as f64)
}

fn record_ap(record: &EvalRecord, k: usize) -> Result<f64> {
    let positives: HashSet<&str> = record.positives.iter().map(String::as_str).collect();
    average_precision_at_k(&record.ranking, &positives, k)
}

/// Mean of AP@k over records.
pub fn map_at_k(records: &[EvalRecord], k: usize) -> Result<f64> {
    check_k(k)?;
    if records.is_empty() {
        return Err(Error::EmptyEval);
    }
    let total = records
        .iter()
        .map(|r| record_ap(r, k))
        .sum::<Result<f64>>()?;
    Ok(total / records.len() as f64)
}

/// Recall@k over each record's curated-subset ranking.
pub fn subset_recall_at_k(records: &[EvalRecord], k: usize) -> Result<f64> {
    check_k(k)?;
    if records.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut hits = 0usize;
    for r in records {
        let subset = r
            .subset_ranking
            .as_ref()
            .ok_or_else(|| Error::MissingSubset(r.query_id.clone()))?;
        if hit_at_k(subset, &r.positives, k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Map,
    Recall,
    SubsetRecall,
}

impl MetricKind {
    pub const NAMES: &'static [&'static str] = &["recall", "map", "subset-recall"];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Recall => "recall",
            MetricKind::Map => "map",
            MetricKind::SubsetRecall => "subset-recall",
        }
    }

    pub fn compute(self, records: &[EvalRecord], k: usize) -> Result<f64> {
        match self {
            MetricKind::Recall => recall_at_k(records, k),
            MetricKind::Map => map_at_k(records, k),
            MetricKind::SubsetRecall => subset_recall_at_k(records, k),
        }
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "recall" | "r" => Ok(MetricKind::Recall),
            "map" => Ok(MetricKind::Map),
            "subset-recall" | "r_s" | "rs" => Ok(MetricKind::SubsetRecall),
            other => Err(Error::InvalidInput(format!(
                "unknown metric `{other}` (valid: {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MetricSpec {
    pub metric: MetricKind,
    pub k: usize,
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.metric.name(), self.k)
    }
}

/// Parses `"recall@1,5,10 map@5,10 subset-recall@1,2,3"`. Groups may also be
/// separated by `;`.
pub fn parse_metric_specs(text: &str) -> Result<Vec<MetricSpec>> {
    let mut specs = Vec::new();
    for group in text.split(|c: char| c.is_whitespace() || c == ';').filter(|g| !g.is_empty()) {
        let (name, ks) = group.split_once('@').ok_or_else(|| {
            Error::InvalidInput(format!("metric `{group}` needs @k, e.g. recall@1,5"))
        })?;
        let metric: MetricKind = name.parse()?;
        for k in ks.split(',').filter(|k| !k.is_empty()) {
            let k: usize = k
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad k `{k}` in `{group}`")))?;
            check_k(k)?;
            specs.push(MetricSpec { metric, k });
        }
    }
    if specs.is_empty() {
        return Err(Error::InvalidInput("no metrics requested".into()));
    }
    Ok(specs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: MetricKind,
    pub k: usize,
    /// Raw value in [0, 1].
    pub value: f64,
    /// `value` x 100, rounded to two decimals.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub query_count: usize,
    pub k_values: Vec<usize>,
    pub metrics: Vec<MetricValue>,
}

impl MetricsReport {
    pub fn get(&self, metric: MetricKind, k: usize) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.metric == metric && m.k == k)
            .map(|m| m.value)
    }

    /// Aligned plain-text table, one row per (metric, k).
    pub fn to_table(&self) -> String {
        let labels: Vec<String> = self
            .metrics
            .iter()
            .map(|m| format!("{}@{}", m.metric.name(), m.k))
            .collect();
        let width = labels.iter().map(String::len).max().unwrap_or(0).max("metric".len());
        let mut out = format!("{:<width$}  {:>7}\n", "metric", "value");
        for (label, m) in labels.iter().zip(&self.metrics) {
            out.push_str(&format!("{label:<width$}  {:>7.2}\n", m.percent));
        }
        out.push_str(&format!("{} queries\n", self.query_count));
        out
    }
}

fn percent(value: f64) -> f64 {
    (value * 10_000.0).round() / 100.0
}

/// Computes every requested (metric, k), deduplicated, ordered by metric name then k.
pub fn build_report(records: &[EvalRecord], specs: &[MetricSpec]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::EmptyEval);
    }
    let unique: BTreeSet<(&str, usize, MetricKind)> =
        specs.iter().map(|s| (s.metric.name(), s.k, s.metric)).collect();
    let mut metrics = Vec::with_capacity(unique.len());
    for (_, k, metric) in unique {
        let value = metric.compute(records, k)?;
        metrics.push(MetricValue {
            metric,
            k,
            value,
            percent: percent(value),
        });
    }
    let k_values = metrics.iter().map(|m| m.k).collect::<BTreeSet<_>>().into_iter().collect();
    Ok(MetricsReport {
        query_count: records.len(),
        k_values,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pos<'a>(ids: &[&'a str]) -> HashSet<&'a str> {
        ids.iter().copied().collect()
    }

    fn rec_with_rank(q: &str, rank: usize) -> EvalRecord {
        let ranking: Vec<String> = (1..=10)
            .map(|i| if i == rank { "T".to_string() } else { format!("x{i}") })
            .collect();
        EvalRecord::new(q, ranking, ["T"])
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[rec_with_rank("q", 1)], 1).unwrap(), 1.0);
        let three = [rec_with_rank("a", 1), rec_with_rank("b", 3), rec_with_rank("c", 7)];
        assert!((recall_at_k(&three, 5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let short = EvalRecord::new("s", ["x", "T"], ["T"]);
        assert_eq!(recall_at_k(&[short], 50).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&[], 1), Err(Error::EmptyEval)));
        assert!(matches!(recall_at_k(&three, 0), Err(Error::InvalidK(0))));
        let failed = EvalRecord::new("f", Vec::<String>::new(), ["T"]);
        assert_eq!(recall_at_k(&[failed], 5).unwrap(), 0.0);
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision_at_k(&["A", "X", "B", "Y", "Z"], &pos(&["A", "B"]), 5).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((ap - 0.833_333_333_333).abs() < 1e-9);
        for k in [1, 2, 5, 50] {
            assert_eq!(average_precision_at_k(&["A", "X"], &pos(&["A"]), k).unwrap(), 1.0);
        }
        assert_eq!(
            average_precision_at_k(&["X", "Y", "A"], &pos(&["A"]), 2).unwrap(),
            0.0
        );
        assert!(matches!(
            average_precision_at_k(&["A"], &pos(&["A"]), 0),
            Err(Error::InvalidK(0))
        ));
        // More positives than k: normalized by k.
        let ap = average_precision_at_k(&["A", "B"], &pos(&["A", "B", "C"]), 2).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn map_examples() {
        let perfect = EvalRecord::new("p", ["A"], ["A"]);
        let miss = EvalRecord::new("m", ["X"], ["A"]);
        assert_eq!(map_at_k(&[perfect.clone(), miss], 5).unwrap(), 0.5);
        let hand = EvalRecord::new("h", ["A", "X", "B", "Y", "Z"], ["A", "B"]);
        assert!((map_at_k(&[hand], 5).unwrap() - 0.8333333333333334).abs() < 1e-12);
        assert_eq!(map_at_k(&[perfect.clone(), perfect], 3).unwrap(), 1.0);
        assert!(matches!(map_at_k(&[], 5), Err(Error::EmptyEval)));
    }

    #[test]
    fn subset_recall_examples() {
        let r = EvalRecord::new("q", ["T"], ["T"]).with_subset(["T", "a"]);
        assert_eq!(subset_recall_at_k(&[r], 1).unwrap(), 1.0);
        let six = EvalRecord::new("q", ["a"], ["T"]).with_subset(["a", "b", "c", "T", "d", "e"]);
        assert_eq!(subset_recall_at_k(std::slice::from_ref(&six), 3).unwrap(), 0.0);
        assert_eq!(subset_recall_at_k(&[six], 5).unwrap(), 1.0);
        let none = EvalRecord::new("bare", ["T"], ["T"]);
        assert!(matches!(subset_recall_at_k(&[none], 1), Err(Error::MissingSubset(q)) if q == "bare"));
    }

    #[test]
    fn spec_parsing() {
        let specs = parse_metric_specs("recall@1,5,10,50 map@5,10,25,50 subset-recall@1,2,3").unwrap();
        assert_eq!(specs.len(), 11);
        assert_eq!(specs[0], MetricSpec { metric: MetricKind::Recall, k: 1 });
        let err = parse_metric_specs("ndcg@5").unwrap_err().to_string();
        assert!(err.contains("recall") && err.contains("subset-recall"), "{err}");
        assert!(parse_metric_specs("recall").is_err());
        assert!(parse_metric_specs("recall@0").is_err());
        assert!(parse_metric_specs("   ").is_err());
    }

    #[test]
    fn report_shape() {
        let records = vec![
            EvalRecord::new("a", ["A", "X", "B", "Y", "Z"], ["A", "B"]).with_subset(["A", "B"]),
            EvalRecord::new("b", ["X", "A"], ["A"]).with_subset(["X", "A"]),
        ];
        let specs = parse_metric_specs("recall@1,5 map@5").unwrap();
        let report = build_report(&records, &specs).unwrap();
        assert_eq!(report.metrics.len(), 3);
        assert_eq!(report.k_values, vec![1, 5]);

        let table1 = parse_metric_specs(
            "map@5,10,25,50 recall@1,5,10,50 subset-recall@1,2,3 recall@1",
        )
        .unwrap();
        let report = build_report(&records, &table1).unwrap();
        assert_eq!(report.metrics.len(), 11);
        let order: Vec<String> = report
            .metrics
            .iter()
            .map(|m| format!("{}@{}", m.metric.name(), m.k))
            .collect();
        assert_eq!(order[..4], ["map@5", "map@10", "map@25", "map@50"]);
        assert_eq!(order[4], "recall@1");
        assert!(report.metrics.iter().all(|m| (0.0..=1.0).contains(&m.value)));

        let hand = build_report(&records[..1], &parse_metric_specs("map@5").unwrap()).unwrap();
        assert_eq!(hand.metrics[0].percent, 83.33);
        assert!(hand.to_table().contains("83.33"));
        assert!(matches!(build_report(&[], &specs), Err(Error::EmptyEval)));
    }
}
