//! Inference over a whole graph.
//!
//! Every row is computed the same way whatever chunk it lands in, so the
//! output does not depend on the chunk size or the number of workers.

use rayon::prelude::*;

use super::{
    context_rows, distance_batch, encode_batch, feature_rows, link_batch, naive_probability, score_batch,
    ModelParameters, QueryBatch, Variant,
};
use crate::error::{LinkError, Result};
use crate::graph::{FeatureStore, NeighborGraph};
use crate::numcore::{Forward, Var};

/// Nodes encoded per tape when caching enhanced features.
const ENCODE_CHUNK: usize = 128;
/// Queries scored per tape.
const QUERY_CHUNK: usize = 64;

/// One scored (query, candidate) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkRow {
    pub query: usize,
    pub candidate: usize,
    pub prob: f32,
}

fn check_dims(model: &ModelParameters, store: &FeatureStore, graph: &NeighborGraph) -> Result<()> {
    if store.dim() != model.config.dim {
        return Err(LinkError::Config(format!(
            "features have dimension {}, model expects {}",
            store.dim(),
            model.config.dim
        )));
    }
    if store.len() != graph.len() {
        return Err(LinkError::Usage(format!(
            "graph covers {} nodes but {} features were given",
            graph.len(),
            store.len()
        )));
    }
    Ok(())
}

/// Enhanced features of all nodes, row-major `N×D`. Only meaningful for
/// variants with a relation encoder.
pub fn enhance_all(model: &ModelParameters, store: &FeatureStore, graph: &NeighborGraph) -> Result<Vec<f32>> {
    check_dims(model, store, graph)?;
    let re = model.encoder()?;
    let nodes: Vec<usize> = (0..store.len()).collect();
    let chunks = nodes
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| -> Result<Vec<f32>> {
            let mut fw = Forward::eval(&model.store);
            let f = feature_rows(&mut fw, store, chunk)?;
            let ctx = context_rows(&mut fw, store, graph, chunk)?;
            let g = encode_batch(&mut fw, re, f, ctx)?;
            Ok(fw.tape.value(g).to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.concat())
}

fn rows_var(fw: &mut Forward<'_, f32>, table: &[f32], dim: usize, nodes: &[usize]) -> Result<Var> {
    let mut data = Vec::with_capacity(nodes.len() * dim);
    for &n in nodes {
        data.extend_from_slice(&table[n * dim..(n + 1) * dim]);
    }
    fw.tape.constant(nodes.len(), dim, data)
}

fn score_chunk(
    model: &ModelParameters,
    store: &FeatureStore,
    graph: &NeighborGraph,
    enhanced: Option<&[f32]>,
    queries: &[usize],
) -> Result<Vec<LinkRow>> {
    let batch = QueryBatch::new(graph, queries)?;
    let probs: Vec<f32> = match (model.variant, enhanced) {
        (Variant::Naive, _) => batch
            .queries
            .iter()
            .zip(batch.candidates.chunks(batch.hop1))
            .flat_map(|(&q, cands)| {
                cands
                    .iter()
                    .map(move |&c| naive_probability(store.row(q), store.row(c)))
            })
            .collect(),
        (Variant::OnlyRe | Variant::Full, Some(table)) => {
            let dim = model.config.dim;
            let mut fw = Forward::eval(&model.store);
            let q = rows_var(&mut fw, table, dim, &batch.queries)?;
            let c = rows_var(&mut fw, table, dim, &batch.candidates)?;
            let p = if model.variant == Variant::OnlyRe {
                distance_batch(&mut fw, q, c)?
            } else {
                let (lp, cls) = model.predictor()?;
                link_batch(&mut fw, lp, cls, q, c, model.config.query_in_predictor)?.probs
            };
            fw.tape.value(p).to_vec()
        }
        _ => {
            let mut fw = Forward::eval(&model.store);
            let p = score_batch(&mut fw, model, store, graph, &batch)?;
            fw.tape.value(p).to_vec()
        }
    };
    if let Some(bad) = probs.iter().find(|p| !p.is_finite()) {
        return Err(LinkError::Numeric(format!("non-finite linkage probability {bad}")));
    }
    Ok(batch
        .queries
        .iter()
        .flat_map(|&q| std::iter::repeat_n(q, batch.hop1))
        .zip(&batch.candidates)
        .zip(probs)
        .map(|((query, &candidate), prob)| LinkRow { query, candidate, prob })
        .collect())
}

/// Linkage probabilities of one query against its hop1 candidates, in
/// candidate order.
pub fn predict_query(
    model: &ModelParameters,
    store: &FeatureStore,
    graph: &NeighborGraph,
    query: usize,
) -> Result<Vec<LinkRow>> {
    check_dims(model, store, graph)?;
    let batch = QueryBatch::new(graph, &[query])?;
    let probs = {
        let mut fw = Forward::eval(&model.store);
        let p = score_batch(&mut fw, model, store, graph, &batch)?;
        fw.tape.value(p).to_vec()
    };
    Ok(batch
        .candidates
        .iter()
        .zip(probs)
        .map(|(&candidate, prob)| LinkRow { query, candidate, prob })
        .collect())
}

/// Score every node as a query. Rows come out grouped by query in node
/// order, candidates in hop1 order.
pub fn predict_all(model: &ModelParameters, store: &FeatureStore, graph: &NeighborGraph) -> Result<Vec<LinkRow>> {
    check_dims(model, store, graph)?;
    let enhanced = if model.variant.uses_encoder() {
        Some(enhance_all(model, store, graph)?)
    } else {
        None
    };
    let nodes: Vec<usize> = (0..store.len()).collect();
    let chunks = nodes
        .par_chunks(QUERY_CHUNK)
        .map(|chunk| score_chunk(model, store, graph, enhanced.as_deref(), chunk))
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.concat())
}
