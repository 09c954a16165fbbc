//! Threshold the scored links and take connected components.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use crate::error::{LinkError, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::LinkRow;

/// Scored (query, candidate) pairs with the threshold they are cut at.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkageSet {
    rows: Vec<LinkRow>,
    pub threshold: f64,
}

impl LinkageSet {
    /// Checks that every probability lies in `[0, 1]` and no ordered pair
    /// repeats.
    pub fn new(rows: Vec<LinkRow>, threshold: f64) -> Result<Self> {
        check_threshold(threshold)?;
        let mut seen = HashSet::with_capacity(rows.len());
        for r in &rows {
            if !(0.0..=1.0).contains(&r.prob) {
                return Err(LinkError::Numeric(format!(
                    "probability {} for ({}, {}) outside [0, 1]",
                    r.prob, r.query, r.candidate
                )));
            }
            if !seen.insert((r.query, r.candidate)) {
                return Err(LinkError::Usage(format!(
                    "duplicate link ({}, {})",
                    r.query, r.candidate
                )));
            }
        }
        Ok(Self { rows, threshold })
    }

    pub fn rows(&self) -> &[LinkRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Largest node index mentioned, plus one.
    pub fn node_bound(&self) -> usize {
        self.rows
            .iter()
            .map(|r| r.query.max(r.candidate) + 1)
            .max()
            .unwrap_or(0)
    }

    /// CSV with a `q,k,p` header.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "q,k,p")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.query, r.candidate, r.prob)?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead, threshold: f64) -> Result<Self> {
        let mut rows = Vec::new();
        let mut offset = 0u64;
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| LinkError::format(offset, e.to_string()))?;
            let here = offset;
            offset += line.len() as u64 + 1;
            if i == 0 && line.trim() == "q,k,p" {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            let bad = || LinkError::format(here, format!("malformed link line {}: {line:?}", i + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            rows.push(LinkRow {
                query: fields[0].parse().map_err(|_| bad())?,
                candidate: fields[1].parse().map_err(|_| bad())?,
                prob: fields[2].parse().map_err(|_| bad())?,
            });
        }
        Self::new(rows, threshold)
    }
}

fn check_threshold(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(LinkError::Config(format!("threshold {tau} outside [0, 1]")));
    }
    Ok(())
}

/// Undirected edges `(lo, hi)` for links with probability strictly above
/// `tau`, sorted and without repeats. A pair counts if either direction
/// clears the threshold.
pub fn threshold_links(links: &LinkageSet, tau: f64) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = links
        .rows
        .iter()
        .filter(|r| r.prob as f64 > tau && r.query != r.candidate)
        .map(|r| (r.query.min(r.candidate), r.query.max(r.candidate)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Cluster id per instance; ids run `0..count` in order of each cluster's
/// smallest member.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterPartition {
    assignment: Vec<usize>,
    count: usize,
}

impl ClusterPartition {
    /// Canonical partition from arbitrary labels: equal labels share a
    /// cluster.
    pub fn from_labels<L: Eq + std::hash::Hash + Copy>(labels: &[L]) -> Self {
        let mut ids = std::collections::HashMap::new();
        let assignment = labels
            .iter()
            .map(|l| {
                let next = ids.len();
                *ids.entry(*l).or_insert(next)
            })
            .collect();
        Self {
            assignment,
            count: ids.len(),
        }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }

    /// Every cluster of `self` lies inside one cluster of `coarser`.
    pub fn refines(&self, coarser: &ClusterPartition) -> bool {
        let mut parent = vec![usize::MAX; self.count];
        self.assignment.iter().zip(&coarser.assignment).all(|(&a, &b)| {
            if parent[a] == usize::MAX {
                parent[a] = b;
            }
            parent[a] == b
        }) && self.len() == coarser.len()
    }

    /// One `index<TAB>cluster` line per instance.
    pub fn write_tsv(&self, mut w: impl Write) -> std::io::Result<()> {
        for (i, c) in self.assignment.iter().enumerate() {
            writeln!(w, "{i}\t{c}")?;
        }
        Ok(())
    }

    pub fn read_tsv(r: impl BufRead) -> Result<Self> {
        let mut labels = Vec::new();
        let mut offset = 0u64;
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| LinkError::format(offset, e.to_string()))?;
            let here = offset;
            offset += line.len() as u64 + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || LinkError::format(here, format!("malformed cluster line {}: {line:?}", i + 1));
            let (idx, cluster) = line.trim().split_once('\t').ok_or_else(bad)?;
            let idx: usize = idx.parse().map_err(|_| bad())?;
            if idx != labels.len() {
                return Err(LinkError::format(
                    here,
                    format!("expected index {}, found {idx}", labels.len()),
                ));
            }
            labels.push(cluster.parse::<u64>().map_err(|_| bad())?);
        }
        Ok(Self::from_labels(&labels))
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Connected components of `n` nodes joined by `edges`.
pub fn union_find_clusters(n: usize, edges: &[(usize, usize)]) -> Result<ClusterPartition> {
    if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= n || b >= n) {
        return Err(LinkError::Usage(format!("edge ({a}, {b}) outside {n} nodes")));
    }
    let mut uf = UnionFind::new(n);
    for &(a, b) in edges {
        uf.union(a, b);
    }
    let roots: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
    Ok(ClusterPartition::from_labels(&roots))
}

/// Threshold, then cluster `n` nodes.
pub fn cluster_links(n: usize, links: &LinkageSet, tau: f64) -> Result<ClusterPartition> {
    check_threshold(tau)?;
    union_find_clusters(n, &threshold_links(links, tau))
}

/// One row of a threshold sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Index of the row with the highest pairwise F; the first wins ties.
    pub best: usize,
}

impl SweepResult {
    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }

    /// CSV with one line per threshold.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "threshold,{}", MetricsReport::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(w, "{},{}", r.threshold, r.report.csv_row())?;
        }
        Ok(())
    }
}

/// Evaluate every threshold in `grid` against `truth`.
pub fn sweep_threshold(links: &LinkageSet, truth: &[i64], grid: &[f64]) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(LinkError::Config("empty threshold grid".into()));
    }
    let n = truth.len();
    if links.node_bound() > n {
        return Err(LinkError::Usage(format!(
            "links mention node {} but only {n} labels were given",
            links.node_bound() - 1
        )));
    }
    let rows = grid
        .iter()
        .map(|&tau| {
            let partition = cluster_links(n, links, tau)?;
            Ok(SweepRow {
                threshold: tau,
                report: evaluate(&partition, truth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.report.pairwise_f > rows[best].report.pairwise_f {
            best = i;
        }
    }
    Ok(SweepResult { rows, best })
}

/// `count` evenly spaced thresholds from `lo` to `hi` inclusive.
pub fn threshold_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| {
                let t = lo + (hi - lo) * i as f64 / (count - 1) as f64;
                (t * 1e9).round() / 1e9
            })
            .collect(),
    }
}
