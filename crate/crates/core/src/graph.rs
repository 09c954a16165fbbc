//! Feature storage and exact nearest-neighbor lists.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{LinkError, Result};

/// Rows whose norm deviates from 1 by more than this trigger a warning on
/// load before being renormalized.
pub const NORM_WARN_TOLERANCE: f64 = 1e-3;

/// `N` unit-normalized `D`-dimensional features plus optional identity labels
/// (`-1` marks an unlabeled instance).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    n: usize,
    d: usize,
    features: Vec<f32>,
    labels: Option<Vec<i64>>,
}

impl FeatureStore {
    /// Build a store, renormalizing every row to unit L2 norm. Returns the
    /// store and the largest observed `|norm - 1|` before renormalization.
    pub fn from_raw(n: usize, d: usize, mut features: Vec<f32>, labels: Option<Vec<i64>>) -> Result<(Self, f64)> {
        if d == 0 {
            return Err(LinkError::Config("feature dimension must be positive".into()));
        }
        let expected = n
            .checked_mul(d)
            .ok_or_else(|| LinkError::Config(format!("{n}×{d} features overflow")))?;
        if features.len() != expected {
            return Err(LinkError::dim("feature store", &[n, d], &[features.len()]));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(LinkError::dim("labels", &[n], &[l.len()]));
            }
        }
        let mut worst = 0.0f64;
        for (i, row) in features.chunks_mut(d).enumerate() {
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(LinkError::Numeric(format!("feature row {i} has norm {norm}")));
            }
            worst = worst.max((norm - 1.0).abs());
            row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        }
        Ok((Self { n, d, features, labels }, worst))
    }

    pub fn new(n: usize, d: usize, features: Vec<f32>, labels: Option<Vec<i64>>) -> Result<Self> {
        Self::from_raw(n, d, features, labels).map(|(s, _)| s)
    }

    pub fn from_rows(rows: &[Vec<f32>], labels: Option<Vec<i64>>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(LinkError::Config("feature rows differ in length".into()));
        }
        Self::new(rows.len(), d, rows.concat(), labels)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Vec<i64>) -> Result<()> {
        if labels.len() != self.n {
            return Err(LinkError::dim("labels", &[self.n], &[labels.len()]));
        }
        self.labels = Some(labels);
        Ok(())
    }

    /// Labels, or a usage error naming `purpose` when the store has none.
    pub fn require_labels(&self, purpose: &str) -> Result<&[i64]> {
        self.labels()
            .ok_or_else(|| LinkError::Usage(format!("{purpose} needs identity labels")))
    }

    /// Inner product of rows `i` and `j`, accumulated in f64.
    pub fn similarity(&self, i: usize, j: usize) -> f32 {
        dot(self.row(i), self.row(j))
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() as f32
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: u32,
    pub similarity: f32,
}

/// Similarity descending, then index ascending.
pub fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity.total_cmp(&a.similarity).then(a.index.cmp(&b.index))
}

/// Per-node hop1 candidate lists and hop2 context lists.
///
/// Both come from the same ranking, so each hop2 list is the prefix of
/// the node's hop1 list.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    n: usize,
    hop1: usize,
    hop2: usize,
    /// `n × hop1`, row-major.
    lists: Vec<Neighbor>,
}

impl NeighborGraph {
    pub fn from_lists(n: usize, hop1: usize, hop2: usize, lists: Vec<Neighbor>) -> Result<Self> {
        validate_sizes(n, hop1, hop2)?;
        if lists.len() != n * hop1 {
            return Err(LinkError::dim("neighbor graph", &[n, hop1], &[lists.len()]));
        }
        for (i, row) in lists.chunks(hop1).enumerate() {
            for (pos, nb) in row.iter().enumerate() {
                if nb.index as usize >= n || nb.index as usize == i {
                    return Err(LinkError::Config(format!(
                        "node {i} lists invalid neighbor {}",
                        nb.index
                    )));
                }
                if pos > 0 && neighbor_order(&row[pos - 1], nb) != Ordering::Less {
                    return Err(LinkError::Config(format!("node {i} neighbor list is not sorted")));
                }
            }
        }
        Ok(Self { n, hop1, hop2, lists })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn hop1_size(&self) -> usize {
        self.hop1
    }

    pub fn hop2_size(&self) -> usize {
        self.hop2
    }

    pub fn raw_lists(&self) -> &[Neighbor] {
        &self.lists
    }

    fn check(&self, node: usize) -> Result<()> {
        if node >= self.n {
            return Err(LinkError::Usage(format!(
                "node {node} out of range for {} nodes",
                self.n
            )));
        }
        Ok(())
    }

    pub fn hop1_list(&self, node: usize) -> Result<&[Neighbor]> {
        self.check(node)?;
        Ok(&self.lists[node * self.hop1..(node + 1) * self.hop1])
    }

    pub fn hop2_list(&self, node: usize) -> Result<&[Neighbor]> {
        Ok(&self.hop1_list(node)?[..self.hop2])
    }

    /// Indices of `node`'s hop2 context, most similar first.
    pub fn context_of(&self, node: usize) -> Result<Vec<usize>> {
        Ok(self.hop2_list(node)?.iter().map(|nb| nb.index as usize).collect())
    }

    /// Indices of `node`'s hop1 linkage candidates, most similar first.
    pub fn candidates_of(&self, node: usize) -> Result<Vec<usize>> {
        Ok(self.hop1_list(node)?.iter().map(|nb| nb.index as usize).collect())
    }
}

fn validate_sizes(n: usize, hop1: usize, hop2: usize) -> Result<()> {
    if hop2 == 0 || hop2 > hop1 || hop1 >= n {
        return Err(LinkError::Config(format!(
            "need 1 <= hop2 <= hop1 < N, got hop2={hop2} hop1={hop1} N={n}"
        )));
    }
    if n > u32::MAX as usize {
        return Err(LinkError::Config(format!("{n} nodes exceed the u32 index range")));
    }
    Ok(())
}

/// Exhaustive top-`hop1` neighbors of one node.
fn top_k(store: &FeatureStore, node: usize, k: usize) -> Vec<Neighbor> {
    let q = store.row(node);
    let mut all: Vec<Neighbor> = (0..store.len())
        .filter(|&j| j != node)
        .map(|j| Neighbor {
            index: j as u32,
            similarity: dot(q, store.row(j)),
        })
        .collect();
    if k < all.len() {
        all.select_nth_unstable_by(k, neighbor_order);
        all.truncate(k);
    }
    all.sort_by(neighbor_order);
    all
}

/// Exact cosine KNN lists. Work is spread over the current rayon pool;
/// each node's list depends only on the features, so the result is the
/// same for any worker count.
pub fn build_knn(store: &FeatureStore, hop1_size: usize, hop2_size: usize) -> Result<NeighborGraph> {
    validate_sizes(store.len(), hop1_size, hop2_size)?;
    let lists: Vec<Neighbor> = (0..store.len())
        .into_par_iter()
        .flat_map_iter(|i| top_k(store, i, hop1_size))
        .collect();
    Ok(NeighborGraph {
        n: store.len(),
        hop1: hop1_size,
        hop2: hop2_size,
        lists,
    })
}
