//! Clustering quality against ground-truth identities, and ROC points for
//! the raw link scores.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::cluster::{ClusterPartition, LinkageSet};
use crate::error::{LinkError, Result};

/// Precision, recall and their harmonic mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl Prf {
    fn new(precision: f64, recall: f64) -> Self {
        let f = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f }
    }
}

/// Joint counts of predicted cluster and true class.
struct Contingency {
    n: u64,
    cells: BTreeMap<(usize, usize), u64>,
    pred_sizes: BTreeMap<usize, u64>,
    true_sizes: BTreeMap<usize, u64>,
}

impl Contingency {
    fn build(pred: &[usize], truth: &[usize]) -> Self {
        let mut cells = BTreeMap::new();
        let mut pred_sizes = BTreeMap::new();
        let mut true_sizes = BTreeMap::new();
        for (&p, &t) in pred.iter().zip(truth) {
            *cells.entry((p, t)).or_insert(0) += 1;
            *pred_sizes.entry(p).or_insert(0) += 1;
            *true_sizes.entry(t).or_insert(0) += 1;
        }
        Self {
            n: pred.len() as u64,
            cells,
            pred_sizes,
            true_sizes,
        }
    }
}

fn pairs(k: u64) -> u64 {
    k * k.saturating_sub(1) / 2
}

/// Restrict to labeled instances and canonicalize both sides.
fn aligned(pred: &ClusterPartition, truth: &[i64]) -> Result<(Vec<usize>, Vec<usize>)> {
    if pred.len() != truth.len() {
        return Err(LinkError::Usage(format!(
            "{} predicted assignments against {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let keep: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] >= 0).collect();
    let p: Vec<usize> = keep.iter().map(|&i| pred.assignment()[i]).collect();
    let t: Vec<i64> = keep.iter().map(|&i| truth[i]).collect();
    Ok((p, ClusterPartition::from_labels(&t).assignment().to_vec()))
}

fn pairwise_counts(c: &Contingency) -> Prf {
    let tp: u64 = c.cells.values().map(|&k| pairs(k)).sum();
    let pred_same: u64 = c.pred_sizes.values().map(|&k| pairs(k)).sum();
    let true_same: u64 = c.true_sizes.values().map(|&k| pairs(k)).sum();
    if pred_same == 0 && true_same == 0 {
        // both all singletons, hence identical
        return Prf::new(1.0, 1.0);
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Prf::new(ratio(tp, pred_same), ratio(tp, true_same))
}

fn bcubed_counts(c: &Contingency) -> Prf {
    if c.n == 0 {
        return Prf::new(0.0, 0.0);
    }
    let mut precision = 0.0;
    let mut recall = 0.0;
    for (&(p, t), &k) in &c.cells {
        let k = k as f64;
        precision += k * k / c.pred_sizes[&p] as f64;
        recall += k * k / c.true_sizes[&t] as f64;
    }
    Prf::new(precision / c.n as f64, recall / c.n as f64)
}

fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

fn entropy(sizes: &BTreeMap<usize, u64>, n: u64) -> f64 {
    let n = n as f64;
    sorted_sum(
        sizes
            .values()
            .map(|&k| {
                let p = k as f64 / n;
                -p * p.ln()
            })
            .collect(),
    )
}

fn nmi_counts(c: &Contingency) -> f64 {
    let n = c.n as f64;
    let (ha, hb) = (entropy(&c.pred_sizes, c.n), entropy(&c.true_sizes, c.n));
    match (ha == 0.0, hb == 0.0) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mi = sorted_sum(
        c.cells
            .iter()
            .map(|(&(p, t), &k)| {
                let k = k as f64;
                let outer = c.pred_sizes[&p] as f64 * c.true_sizes[&t] as f64;
                k / n * (n * k / outer).ln()
            })
            .collect(),
    );
    (mi / (ha * hb).sqrt()).clamp(0.0, 1.0)
}

/// Pair-counting precision and recall over all unordered instance pairs.
pub fn pairwise_f(pred: &ClusterPartition, truth: &[i64]) -> Result<Prf> {
    let (p, t) = aligned(pred, truth)?;
    Ok(pairwise_counts(&Contingency::build(&p, &t)))
}

/// Per-instance precision and recall averaged over instances.
pub fn bcubed_f(pred: &ClusterPartition, truth: &[i64]) -> Result<Prf> {
    let (p, t) = aligned(pred, truth)?;
    Ok(bcubed_counts(&Contingency::build(&p, &t)))
}

/// Mutual information normalized by the geometric mean of the entropies.
/// When either side has zero entropy the score is 1 if both do, else 0.
pub fn nmi(pred: &ClusterPartition, truth: &[i64]) -> Result<f64> {
    let (p, t) = aligned(pred, truth)?;
    if p.is_empty() {
        return Err(LinkError::Usage("NMI needs at least one labeled instance".into()));
    }
    Ok(nmi_counts(&Contingency::build(&p, &t)))
}

/// All clustering scores for one partition.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub pairwise_precision: f64,
    pub pairwise_recall: f64,
    pub pairwise_f: f64,
    pub bcubed_precision: f64,
    pub bcubed_recall: f64,
    pub bcubed_f: f64,
    pub nmi: f64,
    pub instances: usize,
    pub predicted_clusters: usize,
    pub true_clusters: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "pairwise_precision,pairwise_recall,pairwise_f,bcubed_precision,bcubed_recall,bcubed_f,nmi,instances,predicted_clusters,true_clusters";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.pairwise_precision,
            self.pairwise_recall,
            self.pairwise_f,
            self.bcubed_precision,
            self.bcubed_recall,
            self.bcubed_f,
            self.nmi,
            self.instances,
            self.predicted_clusters,
            self.true_clusters
        )
    }

    /// Flat `key: value` lines.
    pub fn to_text(&self) -> String {
        self.csv_row()
            .split(',')
            .zip(Self::CSV_HEADER.split(','))
            .map(|(v, k)| format!("{k}: {v}\n"))
            .collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        writeln!(w, "{}", self.csv_row())
    }
}

/// Score `pred` against `truth`. Instances with a negative label are left
/// out.
pub fn evaluate(pred: &ClusterPartition, truth: &[i64]) -> Result<MetricsReport> {
    let (p, t) = aligned(pred, truth)?;
    let c = Contingency::build(&p, &t);
    let pw = pairwise_counts(&c);
    let bc = bcubed_counts(&c);
    Ok(MetricsReport {
        pairwise_precision: pw.precision,
        pairwise_recall: pw.recall,
        pairwise_f: pw.f,
        bcubed_precision: bc.precision,
        bcubed_recall: bc.recall,
        bcubed_f: bc.f,
        nmi: if p.is_empty() { 0.0 } else { nmi_counts(&c) },
        instances: p.len(),
        predicted_clusters: c.pred_sizes.len(),
        true_clusters: c.true_sizes.len(),
    })
}

/// A point on the ROC curve: links with probability at or above
/// `threshold` are called positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC over each query's `top_k` most probable candidates. The first point
/// has an infinite threshold and sits at (0, 0); the last uses the smallest
/// probability and sits at (1, 1). Links touching an unlabeled node are
/// ignored.
pub fn roc_points(links: &LinkageSet, truth: &[i64], top_k: usize) -> Result<Vec<RocPoint>> {
    if top_k == 0 {
        return Err(LinkError::Config("top_k must be at least 1".into()));
    }
    if links.node_bound() > truth.len() {
        return Err(LinkError::Usage(format!(
            "links mention node {} but only {} labels were given",
            links.node_bound() - 1,
            truth.len()
        )));
    }
    let mut by_query: BTreeMap<usize, Vec<(f32, usize)>> = BTreeMap::new();
    for r in links.rows() {
        if truth[r.query] >= 0 && truth[r.candidate] >= 0 {
            by_query.entry(r.query).or_default().push((r.prob, r.candidate));
        }
    }
    let mut scored: Vec<(f32, bool)> = Vec::new();
    for (q, mut cands) in by_query {
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.extend(cands.into_iter().take(top_k).map(|(p, k)| (p, truth[k] == truth[q])));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = scored.iter().filter(|s| s.1).count() as f64;
    let negatives = scored.len() as f64 - positives;
    let rate = |k: f64, total: f64| if total == 0.0 { 0.0 } else { k / total };

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < scored.len() {
        let threshold = scored[i].0;
        while i < scored.len() && scored[i].0 == threshold {
            if scored[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: threshold as f64,
            fpr: rate(fp, negatives),
            tpr: rate(tp, positives),
        });
    }
    Ok(points)
}

/// Trapezoidal area under an ROC curve.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// CSV with a `threshold,fpr,tpr` header.
pub fn write_roc(mut w: impl Write, points: &[RocPoint]) -> std::io::Result<()> {
    writeln!(w, "threshold,fpr,tpr")?;
    for p in points {
        writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
    }
    Ok(())
}
