//! Relation encoder, linkage predictor and the distance head, composed
//! into per-query linkage probabilities.
//!
//! The relation encoder turns a node into an enhanced feature `g` using its
//! context neighbors: the context rows pass through `depth` self-attention
//! blocks (attention, dropout, residual add, layer norm), the node's own
//! feature then cross-attends over the refined context, and the result is
//! added back to the node feature and layer-normalized.
//!
//! The linkage predictor refines a query's candidate set with its own
//! self-attention blocks, concatenates each refined candidate with the
//! query's enhanced feature and classifies the pair with a two-layer PReLU
//! MLP followed by a two-way softmax. Column 0 of the softmax is the
//! probability that the pair shares an identity.

mod predict;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LinkError, Result};
use crate::graph::{FeatureStore, NeighborGraph};
use crate::numcore::nn::{glorot, PRELU_INIT_SLOPE};
use crate::numcore::{
    dropout, layer_norm, multi_head_attention, prelu, rng_stream, AttentionParams, AttentionShape, DropoutSpec,
    Forward, LayerNormParams, ParamId, ParamStore, RngStream, Scalar, Tensor, Var,
};

pub use predict::{enhance_all, predict_all, predict_query, LinkRow};

/// Parameter whose presence records that the predictor attends over the
/// query as well; it is never read or updated.
const QUERY_MARKER: &str = "lp.query_attention";

/// Which learned components a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No learning: clamped cosine similarity of raw features.
    Naive,
    /// Relation encoder scored by the distance head.
    OnlyRe,
    /// Linkage predictor fed raw features.
    OnlyLp,
    /// Relation encoder followed by the linkage predictor.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Naive, Variant::OnlyRe, Variant::OnlyLp, Variant::Full];

    pub fn code(self) -> u32 {
        match self {
            Variant::Full => 0,
            Variant::OnlyRe => 1,
            Variant::OnlyLp => 2,
            Variant::Naive => 3,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.code() == code)
            .ok_or_else(|| LinkError::format(8, format!("unknown model variant code {code}")))
    }

    pub fn uses_encoder(self) -> bool {
        matches!(self, Variant::Full | Variant::OnlyRe)
    }

    pub fn uses_predictor(self) -> bool {
        matches!(self, Variant::Full | Variant::OnlyLp)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::OnlyRe => "only_re",
            Variant::OnlyLp => "only_lp",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = LinkError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| LinkError::Usage(format!("unknown variant {s:?} (naive, only_re, only_lp, full)")))
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature dimension `D`; every attention block maps `D → D`.
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Self-attention blocks in each of the encoder and the predictor.
    pub depth: usize,
    /// Hidden width of the classifier MLP.
    pub hidden: usize,
    /// Let the predictor's self-attention see the query's own feature.
    pub query_in_predictor: bool,
}

impl ModelConfig {
    pub fn new(dim: usize, heads: usize, head_dim: usize, depth: usize) -> Self {
        Self {
            dim,
            heads,
            head_dim,
            depth,
            hidden: dim,
            query_in_predictor: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.head_dim == 0 || self.hidden == 0 {
            return Err(LinkError::Config(format!("degenerate model config {self:?}")));
        }
        if self.depth == 0 {
            return Err(LinkError::Config("encoder depth must be at least 1".into()));
        }
        Ok(())
    }

    fn attention(&self) -> AttentionShape {
        AttentionShape {
            heads: self.heads,
            d_q: self.dim,
            d_kv: self.dim,
            head_dim: self.head_dim,
            d_out: self.dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub attn: AttentionParams,
    pub norm: LayerNormParams,
}

/// Self-attention blocks, plus the cross attention and output norm that
/// only the relation encoder has.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub blocks: Vec<EncoderBlock>,
    pub cross: Option<AttentionParams>,
    pub final_norm: Option<LayerNormParams>,
}

impl EncoderParams {
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut rand_chacha::ChaCha8Rng,
        prefix: &str,
        cfg: &ModelConfig,
        with_cross: bool,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let attn = AttentionParams::init(store, rng, &format!("{prefix}.block{l}.attn"), cfg.attention())?;
            let norm = LayerNormParams::init(store, &format!("{prefix}.block{l}.norm"), cfg.dim);
            blocks.push(EncoderBlock { attn, norm });
        }
        let (cross, final_norm) = if with_cross {
            (
                Some(AttentionParams::init(
                    store,
                    rng,
                    &format!("{prefix}.cross"),
                    cfg.attention(),
                )?),
                Some(LayerNormParams::init(store, &format!("{prefix}.norm"), cfg.dim)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            blocks,
            cross,
            final_norm,
        })
    }

    fn locate<T: Scalar>(store: &ParamStore<T>, prefix: &str, with_cross: bool) -> Result<Self> {
        let mut blocks = Vec::new();
        while store
            .id_of(&format!("{prefix}.block{}.attn.w_o", blocks.len()))
            .is_some()
        {
            let l = blocks.len();
            blocks.push(EncoderBlock {
                attn: AttentionParams::locate(store, &format!("{prefix}.block{l}.attn"))?,
                norm: LayerNormParams::locate(store, &format!("{prefix}.block{l}.norm"))?,
            });
        }
        if blocks.is_empty() {
            return Err(LinkError::Config(format!("no self-attention blocks under {prefix}")));
        }
        let (cross, final_norm) = if with_cross {
            (
                Some(AttentionParams::locate(store, &format!("{prefix}.cross"))?),
                Some(LayerNormParams::locate(store, &format!("{prefix}.norm"))?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            blocks,
            cross,
            final_norm,
        })
    }
}

/// Two-layer PReLU MLP over a `2D` edge embedding, ending in two logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub slope: ParamId,
}

impl ClassifierParams {
    fn init<T: Scalar>(store: &mut ParamStore<T>, rng: &mut rand_chacha::ChaCha8Rng, cfg: &ModelConfig) -> Self {
        Self {
            w1: store.add("cls.w1", glorot(rng, 2 * cfg.dim, cfg.hidden), true),
            b1: store.add("cls.b1", Tensor::zeros(vec![cfg.hidden]), false),
            w2: store.add("cls.w2", glorot(rng, cfg.hidden, 2), true),
            b2: store.add("cls.b2", Tensor::zeros(vec![2]), false),
            slope: store.add("cls.slope", Tensor::scalar(T::of(PRELU_INIT_SLOPE)), false),
        }
    }

    fn locate<T: Scalar>(store: &ParamStore<T>) -> Result<Self> {
        let find = |name: &str| {
            store
                .id_of(name)
                .ok_or_else(|| LinkError::Config(format!("missing parameter {name}")))
        };
        Ok(Self {
            w1: find("cls.w1")?,
            b1: find("cls.b1")?,
            w2: find("cls.w2")?,
            b2: find("cls.b2")?,
            slope: find("cls.slope")?,
        })
    }
}

/// All learnable state of one model variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T: Scalar = f32> {
    pub variant: Variant,
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Option<EncoderParams>,
    pub predictor: Option<EncoderParams>,
    pub classifier: Option<ClassifierParams>,
}

impl<T: Scalar> ModelParameters<T> {
    /// Fresh parameters drawn from the init stream of `seed`.
    pub fn init(variant: Variant, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_stream(seed, RngStream::Init);
        let mut store = ParamStore::new();
        let encoder = if variant.uses_encoder() {
            Some(EncoderParams::init(&mut store, &mut rng, "re", &config, true)?)
        } else {
            None
        };
        let (predictor, classifier) = if variant.uses_predictor() {
            (
                Some(EncoderParams::init(&mut store, &mut rng, "lp", &config, false)?),
                Some(ClassifierParams::init(&mut store, &mut rng, &config)),
            )
        } else {
            (None, None)
        };
        if config.query_in_predictor && variant.uses_predictor() {
            store.add(QUERY_MARKER, Tensor::scalar(T::one()), false);
        }
        Ok(Self {
            variant,
            config,
            store,
            encoder,
            predictor,
            classifier,
        })
    }

    /// Rebuild the layout of a model from a parameter store, e.g. one read
    /// from a checkpoint. `dim` is needed only for the naive variant, which
    /// has no parameters to infer it from.
    pub fn from_store(variant: Variant, store: ParamStore<T>, dim: usize) -> Result<Self> {
        let encoder = if variant.uses_encoder() {
            Some(EncoderParams::locate(&store, "re", true)?)
        } else {
            None
        };
        let (predictor, classifier) = if variant.uses_predictor() {
            (
                Some(EncoderParams::locate(&store, "lp", false)?),
                Some(ClassifierParams::locate(&store)?),
            )
        } else {
            (None, None)
        };
        let reference = encoder.as_ref().or(predictor.as_ref()).map(|e| &e.blocks[0].attn);
        let hidden = match &classifier {
            Some(c) => store.get(c.w1).as_matrix_dims()?.1,
            None => reference.map_or(dim, |a| a.d_out),
        };
        let config = match reference {
            Some(a) => ModelConfig {
                dim: a.d_q,
                heads: a.heads,
                head_dim: a.head_dim,
                depth: encoder.as_ref().or(predictor.as_ref()).map_or(0, |e| e.blocks.len()),
                hidden,
                query_in_predictor: store.id_of(QUERY_MARKER).is_some(),
            },
            None => ModelConfig::new(dim, 1, 1, 1),
        };
        Ok(Self {
            variant,
            config,
            store,
            encoder,
            predictor,
            classifier,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        ModelParameters {
            variant: self.variant,
            config: self.config,
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            predictor: self.predictor.clone(),
            classifier: self.classifier.clone(),
        }
    }

    /// Zero the classifier's output layer so both logits agree and every
    /// linkage probability is exactly 0.5.
    pub fn zero_classifier_output(&mut self) {
        if let Some(c) = &self.classifier {
            for id in [c.w2, c.b2] {
                self.store
                    .get_mut(id)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = T::zero());
            }
        }
    }

    fn encoder(&self) -> Result<&EncoderParams> {
        self.encoder
            .as_ref()
            .ok_or_else(|| LinkError::Usage(format!("the {} variant has no relation encoder", self.variant)))
    }

    fn predictor(&self) -> Result<(&EncoderParams, &ClassifierParams)> {
        match (&self.predictor, &self.classifier) {
            (Some(p), Some(c)) => Ok((p, c)),
            _ => Err(LinkError::Usage(format!(
                "the {} variant has no linkage predictor",
                self.variant
            ))),
        }
    }
}

/// An enhanced node feature `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedFeature {
    pub values: Vec<f32>,
    pub node: Option<usize>,
}

/// Concatenation of a query's enhanced feature and one refined candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeEmbedding {
    pub query: usize,
    pub candidate: usize,
    pub values: Vec<f32>,
}

/// `depth` blocks of `x ← LayerNorm(dropout(attn(x, x, x)) + x)` with
/// attention confined to `groups` equal row blocks.
pub fn self_attention_stack<T: Scalar>(
    fw: &mut Forward<'_, T>,
    blocks: &[EncoderBlock],
    mut x: Var,
    groups: usize,
) -> Result<Var> {
    for block in blocks {
        let attended = multi_head_attention(fw, x, x, x, &block.attn, groups)?;
        let dropped = dropout(&mut fw.tape, attended, &mut fw.dropout)?;
        let residual = fw.tape.add(dropped, x)?;
        x = layer_norm(fw, residual, &block.norm)?;
    }
    Ok(x)
}

/// Relation encoder over a batch: `nodes` is `G×D` and `contexts` stacks
/// each node's context rows (`G·m × D`, node `g` owning block `g`).
/// Returns the `G×D` enhanced features.
pub fn encode_batch<T: Scalar>(fw: &mut Forward<'_, T>, re: &EncoderParams, nodes: Var, contexts: Var) -> Result<Var> {
    let groups = fw.tape.dims(nodes).0;
    let (cross, norm) = match (&re.cross, &re.final_norm) {
        (Some(c), Some(n)) => (c, n),
        _ => return Err(LinkError::Config("relation encoder lacks its cross attention".into())),
    };
    let ctx_rows = fw.tape.dims(contexts).0;
    if groups == 0 || ctx_rows == 0 || ctx_rows % groups != 0 {
        return Err(LinkError::Usage(format!(
            "{ctx_rows} context rows cannot be split over {groups} nodes"
        )));
    }
    let refined = self_attention_stack(fw, &re.blocks, contexts, groups)?;
    let context_summary = multi_head_attention(fw, nodes, refined, refined, cross, groups)?;
    let summed = fw.tape.add(context_summary, nodes)?;
    layer_norm(fw, summed, norm)
}

/// Tape handles produced by [`link_batch`].
#[derive(Clone, Copy, Debug)]
pub struct LinkOutput {
    /// `(Q·n)×1` probability that each pair is a link.
    pub probs: Var,
    /// `(Q·n)×2` softmax over the two classes.
    pub classes: Var,
    /// `(Q·n)×2D` edge embeddings.
    pub edges: Var,
}

/// Linkage predictor over `Q` queries with `n` candidates each:
/// `queries` is `Q×D`, `candidates` is `(Q·n)×D` grouped by query.
pub fn link_batch<T: Scalar>(
    fw: &mut Forward<'_, T>,
    lp: &EncoderParams,
    cls: &ClassifierParams,
    queries: Var,
    candidates: Var,
    query_in_set: bool,
) -> Result<LinkOutput> {
    let q = fw.tape.dims(queries).0;
    let rows = fw.tape.dims(candidates).0;
    if q == 0 || rows == 0 || rows % q != 0 {
        return Err(LinkError::Usage(format!(
            "{rows} candidate rows cannot be split over {q} queries"
        )));
    }
    let n = rows / q;
    let refined = if query_in_set {
        // group g becomes [query g; its candidates], and the query rows are
        // dropped again after attention
        let stacked = fw.tape.concat_rows(&[queries, candidates])?;
        let order: Vec<usize> = (0..q)
            .flat_map(|g| std::iter::once(g).chain((0..n).map(move |j| q + g * n + j)))
            .collect();
        let grouped = fw.tape.gather_rows(stacked, &order)?;
        let attended = self_attention_stack(fw, &lp.blocks, grouped, q)?;
        let keep: Vec<usize> = (0..q).flat_map(|g| (1..=n).map(move |j| g * (n + 1) + j)).collect();
        fw.tape.gather_rows(attended, &keep)?
    } else {
        self_attention_stack(fw, &lp.blocks, candidates, q)?
    };
    let query_rows = fw.tape.repeat_rows(queries, n);
    let edges = fw.tape.concat_cols(&[query_rows, refined])?;

    let w1 = fw.param(cls.w1)?;
    let b1 = fw.param(cls.b1)?;
    let w2 = fw.param(cls.w2)?;
    let b2 = fw.param(cls.b2)?;
    let hidden = fw.tape.matmul(edges, w1)?;
    let hidden = fw.tape.add_row(hidden, b1)?;
    let hidden = prelu(fw, hidden, cls.slope)?;
    let logits = fw.tape.matmul(hidden, w2)?;
    let logits = fw.tape.add_row(logits, b2)?;
    let classes = fw.tape.scaled_softmax(logits, 1)?;
    let probs = fw.tape.slice_cols(classes, 0, 1)?;
    Ok(LinkOutput { probs, classes, edges })
}

/// Distance head on the tape: for query rows `Q×D` and grouped candidates
/// `(Q·n)×D`, returns `(Q·n)×1` of `1 - ¼‖n(g_q) − n(g_k)‖²`.
pub fn distance_batch<T: Scalar>(fw: &mut Forward<'_, T>, queries: Var, candidates: Var) -> Result<Var> {
    let q = fw.tape.dims(queries).0;
    let rows = fw.tape.dims(candidates).0;
    if q == 0 || rows % q != 0 {
        return Err(LinkError::Usage(format!(
            "{rows} candidate rows cannot be split over {q} queries"
        )));
    }
    let qn = fw.tape.normalize_rows(queries)?;
    let kn = fw.tape.normalize_rows(candidates)?;
    let qn = fw.tape.repeat_rows(qn, rows / q);
    let diff = fw.tape.sub(qn, kn)?;
    let sq = fw.tape.row_sum_sq(diff);
    let e = fw.tape.scale(sq, T::of(0.25));
    let neg = fw.tape.scale(e, -T::one());
    Ok(fw.tape.offset(neg, T::one()))
}

/// `(1 − e, e)` with `e = ¼‖g_q/‖g_q‖ − g_k/‖g_k‖‖²`; the first entry is the
/// probability of a link.
pub fn distance_head(g_q: &[f32], g_k: &[f32]) -> Result<(f64, f64)> {
    if g_q.len() != g_k.len() {
        return Err(LinkError::dim("distance_head", &[g_q.len()], &[g_k.len()]));
    }
    let unit = |v: &[f32]| -> Result<Vec<f64>> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(LinkError::Numeric("non-finite feature in distance_head".into()));
        }
        let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(LinkError::Numeric("zero-norm feature in distance_head".into()));
        }
        Ok(v.iter().map(|&x| x as f64 / norm).collect())
    };
    let (a, b) = (unit(g_q)?, unit(g_k)?);
    // summed symmetrically so swapping the arguments is exact
    let e = 0.25 * a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let e = e.clamp(0.0, 1.0);
    Ok((1.0 - e, e))
}

fn rows_to_tape<T: Scalar>(fw: &mut Forward<'_, T>, rows: &[&[f32]], dim: usize) -> Result<Var> {
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(LinkError::Config(format!(
            "feature of length {} given to a model of dimension {dim}",
            bad.len()
        )));
    }
    let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::of(v as f64))).collect();
    fw.tape.constant(rows.len(), dim, data)
}

/// Enhanced feature of one node from its own feature and its context rows.
pub fn relation_encode(
    model: &ModelParameters,
    f_q: &[f32],
    context: &[&[f32]],
    dropout: DropoutSpec,
) -> Result<EnhancedFeature> {
    if context.is_empty() {
        return Err(LinkError::Usage("relation_encode needs a non-empty context".into()));
    }
    let re = model.encoder()?;
    let mut fw = Forward::new(&model.store, dropout);
    let node = rows_to_tape(&mut fw, &[f_q], model.config.dim)?;
    let ctx = rows_to_tape(&mut fw, context, model.config.dim)?;
    let g = encode_batch(&mut fw, re, node, ctx)?;
    Ok(EnhancedFeature {
        values: fw.tape.value(g).to_vec(),
        node: None,
    })
}

/// Linkage probabilities of one query against its candidates, in candidate
/// order.
pub fn linkage_forward(
    model: &ModelParameters,
    g_q: &EnhancedFeature,
    candidates: &[EnhancedFeature],
    dropout: DropoutSpec,
) -> Result<Vec<f32>> {
    Ok(linkage_with_edges(model, g_q, candidates, dropout)?.0)
}

/// [`linkage_forward`] that also returns the edge embeddings.
pub fn linkage_with_edges(
    model: &ModelParameters,
    g_q: &EnhancedFeature,
    candidates: &[EnhancedFeature],
    dropout: DropoutSpec,
) -> Result<(Vec<f32>, Vec<EdgeEmbedding>)> {
    if candidates.is_empty() {
        return Err(LinkError::Usage("linkage_forward needs at least one candidate".into()));
    }
    let (lp, cls) = model.predictor()?;
    let mut fw = Forward::new(&model.store, dropout);
    let dim = model.config.dim;
    let q = rows_to_tape(&mut fw, &[&g_q.values], dim)?;
    let cand_rows: Vec<&[f32]> = candidates.iter().map(|c| c.values.as_slice()).collect();
    let c = rows_to_tape(&mut fw, &cand_rows, dim)?;
    let out = link_batch(&mut fw, lp, cls, q, c, model.config.query_in_predictor)?;
    let edges = fw
        .tape
        .value(out.edges)
        .chunks(2 * dim)
        .zip(candidates)
        .map(|(row, cand)| EdgeEmbedding {
            query: g_q.node.unwrap_or(usize::MAX),
            candidate: cand.node.unwrap_or(usize::MAX),
            values: row.to_vec(),
        })
        .collect();
    Ok((fw.tape.value(out.probs).to_vec(), edges))
}

/// Clamped cosine similarity used as the naive linkage probability.
pub fn naive_probability(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    dot.clamp(0.0, 1.0) as f32
}

/// A batch of queries expanded into the rows the model needs.
///
/// `nodes` lists every distinct node whose enhanced feature is required
/// (queries and their candidates) in first-seen order; `query_rows` and
/// `candidate_rows` index into it.
#[derive(Clone, Debug)]
pub struct QueryBatch {
    pub queries: Vec<usize>,
    pub hop1: usize,
    pub nodes: Vec<usize>,
    pub query_rows: Vec<usize>,
    pub candidate_rows: Vec<usize>,
    pub candidates: Vec<usize>,
}

impl QueryBatch {
    pub fn new(graph: &NeighborGraph, queries: &[usize]) -> Result<Self> {
        let mut slot = std::collections::HashMap::new();
        let mut nodes = Vec::new();
        let mut intern = |n: usize| {
            *slot.entry(n).or_insert_with(|| {
                nodes.push(n);
                nodes.len() - 1
            })
        };
        let mut query_rows = Vec::with_capacity(queries.len());
        let mut candidate_rows = Vec::new();
        let mut candidates = Vec::new();
        for &q in queries {
            query_rows.push(intern(q));
            for c in graph.candidates_of(q)? {
                candidate_rows.push(intern(c));
                candidates.push(c);
            }
        }
        Ok(Self {
            queries: queries.to_vec(),
            hop1: graph.hop1_size(),
            nodes,
            query_rows,
            candidate_rows,
            candidates,
        })
    }
}

/// Raw features of `nodes` as a constant on the tape.
pub fn feature_rows<T: Scalar>(fw: &mut Forward<'_, T>, store: &FeatureStore, nodes: &[usize]) -> Result<Var> {
    let rows: Vec<&[f32]> = nodes.iter().map(|&n| store.row(n)).collect();
    rows_to_tape(fw, &rows, store.dim())
}

/// Context rows of `nodes`, stacked node by node.
pub fn context_rows<T: Scalar>(
    fw: &mut Forward<'_, T>,
    store: &FeatureStore,
    graph: &NeighborGraph,
    nodes: &[usize],
) -> Result<Var> {
    let mut rows = Vec::with_capacity(nodes.len() * graph.hop2_size());
    for &n in nodes {
        for c in graph.context_of(n)? {
            rows.push(store.row(c));
        }
    }
    rows_to_tape(fw, &rows, store.dim())
}

/// Linkage probabilities for every (query, candidate) pair of a batch as a
/// `(Q·hop1)×1` tape value, built the way the variant prescribes.
pub fn score_batch<T: Scalar>(
    fw: &mut Forward<'_, T>,
    model: &ModelParameters<T>,
    store: &FeatureStore,
    graph: &NeighborGraph,
    batch: &QueryBatch,
) -> Result<Var> {
    if store.dim() != model.config.dim {
        return Err(LinkError::Config(format!(
            "features have dimension {}, model expects {}",
            store.dim(),
            model.config.dim
        )));
    }
    match model.variant {
        Variant::Naive => {
            let probs = batch
                .queries
                .iter()
                .zip(batch.candidates.chunks(batch.hop1))
                .flat_map(|(&q, cands)| {
                    cands
                        .iter()
                        .map(move |&c| T::of(naive_probability(store.row(q), store.row(c)) as f64))
                })
                .collect::<Vec<_>>();
            fw.tape.constant(batch.candidates.len(), 1, probs)
        }
        Variant::OnlyLp => {
            let (lp, cls) = model.predictor()?;
            let q = feature_rows(fw, store, &batch.queries)?;
            let c = feature_rows(fw, store, &batch.candidates)?;
            Ok(link_batch(fw, lp, cls, q, c, model.config.query_in_predictor)?.probs)
        }
        Variant::OnlyRe | Variant::Full => {
            let re = model.encoder()?;
            let nodes = feature_rows(fw, store, &batch.nodes)?;
            let ctx = context_rows(fw, store, graph, &batch.nodes)?;
            let enhanced = encode_batch(fw, re, nodes, ctx)?;
            let q = fw.tape.gather_rows(enhanced, &batch.query_rows)?;
            let c = fw.tape.gather_rows(enhanced, &batch.candidate_rows)?;
            if model.variant == Variant::OnlyRe {
                distance_batch(fw, q, c)
            } else {
                let (lp, cls) = model.predictor()?;
                Ok(link_batch(fw, lp, cls, q, c, model.config.query_in_predictor)?.probs)
            }
        }
    }
}

#[cfg(test)]
mod tests;
