//! Neural building blocks composed on a [`Forward`] pass.

use rand::Rng;

use super::params::{DropoutSpec, Forward, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{LinkError, Result};

/// Layer-norm epsilon used everywhere in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Initial negative-side slope of every PReLU.
pub const PRELU_INIT_SLOPE: f64 = 0.25;

/// Glorot-uniform `fan_in × fan_out` matrix.
pub fn glorot<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches count")
}

/// Projection weights of one multi-head attention layer.
///
/// Per head `i`: `w_q[i]` is `d_q × head_dim`, `w_k[i]` is
/// `d_k × head_dim`, `w_v[i]` is `d_v × value_dim`. `w_o` maps the
/// concatenated heads (`heads · value_dim`) to `d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub d_q: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub head_dim: usize,
    pub value_dim: usize,
    pub d_out: usize,
    pub w_q: Vec<ParamId>,
    pub w_k: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
    pub w_o: ParamId,
}

/// Shape of an attention layer, without weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub heads: usize,
    pub d_q: usize,
    pub d_kv: usize,
    pub head_dim: usize,
    pub d_out: usize,
}

impl AttentionParams {
    pub fn init<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        shape: AttentionShape,
    ) -> Result<Self> {
        let AttentionShape {
            heads,
            d_q,
            d_kv,
            head_dim,
            d_out,
        } = shape;
        if heads == 0 || head_dim == 0 || d_q == 0 || d_kv == 0 || d_out == 0 {
            return Err(LinkError::Config(format!("degenerate attention shape {shape:?}")));
        }
        let mut w_q = Vec::with_capacity(heads);
        let mut w_k = Vec::with_capacity(heads);
        let mut w_v = Vec::with_capacity(heads);
        for h in 0..heads {
            w_q.push(store.add(format!("{prefix}.w_q.{h}"), glorot(rng, d_q, head_dim), true));
            w_k.push(store.add(format!("{prefix}.w_k.{h}"), glorot(rng, d_kv, head_dim), true));
            w_v.push(store.add(format!("{prefix}.w_v.{h}"), glorot(rng, d_kv, head_dim), true));
        }
        let w_o = store.add(format!("{prefix}.w_o"), glorot(rng, heads * head_dim, d_out), true);
        Ok(Self {
            heads,
            d_q,
            d_k: d_kv,
            d_v: d_kv,
            head_dim,
            value_dim: head_dim,
            d_out,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    /// Recover an attention layer from a store by name, inferring its shape
    /// from the stored matrices.
    pub fn locate<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let find = |name: String| {
            store
                .id_of(&name)
                .ok_or_else(|| LinkError::Config(format!("missing parameter {name}")))
        };
        let mut w_q = Vec::new();
        let mut w_k = Vec::new();
        let mut w_v = Vec::new();
        while let Some(id) = store.id_of(&format!("{prefix}.w_q.{}", w_q.len())) {
            let h = w_q.len();
            w_q.push(id);
            w_k.push(find(format!("{prefix}.w_k.{h}"))?);
            w_v.push(find(format!("{prefix}.w_v.{h}"))?);
        }
        if w_q.is_empty() {
            return Err(LinkError::Config(format!("no attention heads under {prefix}")));
        }
        let w_o = find(format!("{prefix}.w_o"))?;
        let dims = |id: ParamId| -> Result<(usize, usize)> { store.get(id).as_matrix_dims() };
        let (d_q, head_dim) = dims(w_q[0])?;
        let (d_k, _) = dims(w_k[0])?;
        let (d_v, value_dim) = dims(w_v[0])?;
        let (_, d_out) = dims(w_o)?;
        let params = Self {
            heads: w_q.len(),
            d_q,
            d_k,
            d_v,
            head_dim,
            value_dim,
            d_out,
            w_q,
            w_k,
            w_v,
            w_o,
        };
        params.validate(store)?;
        Ok(params)
    }

    /// Check every stored matrix against the declared dimensions.
    pub fn validate<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let expect = |id: ParamId, want: (usize, usize)| -> Result<()> {
            let got = store.get(id).as_matrix_dims()?;
            if got != want {
                return Err(LinkError::Config(format!(
                    "attention weight has shape {got:?}, expected {want:?}"
                )));
            }
            Ok(())
        };
        if self.w_q.len() != self.heads || self.w_k.len() != self.heads || self.w_v.len() != self.heads {
            return Err(LinkError::Config("head count does not match weight lists".into()));
        }
        for h in 0..self.heads {
            expect(self.w_q[h], (self.d_q, self.head_dim))?;
            expect(self.w_k[h], (self.d_k, self.head_dim))?;
            expect(self.w_v[h], (self.d_v, self.value_dim))?;
        }
        expect(self.w_o, (self.heads * self.value_dim, self.d_out))
    }
}

/// Multi-head scaled dot-product attention.
///
/// With `groups = G`, the rows of `q` and of `k`/`v` are split into `G`
/// equal consecutive blocks and block `g` of the queries attends only to
/// block `g` of the keys. `groups = 1` is ordinary attention.
pub fn multi_head_attention<T: Scalar>(
    fw: &mut Forward<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    params: &AttentionParams,
    groups: usize,
) -> Result<Var> {
    let (qr, qc) = fw.tape.dims(q);
    let (kr, kc) = fw.tape.dims(k);
    let (vr, vc) = fw.tape.dims(v);
    if qc != params.d_q || kc != params.d_k || vc != params.d_v || kr != vr {
        return Err(LinkError::Config(format!(
            "attention inputs q {qr}×{qc}, k {kr}×{kc}, v {vr}×{vc} do not fit \
             d_q={} d_k={} d_v={}",
            params.d_q, params.d_k, params.d_v
        )));
    }
    if kr == 0 || groups == 0 || qr % groups != 0 || kr % groups != 0 {
        return Err(LinkError::Config(format!(
            "cannot split {qr} queries and {kr} keys into {groups} groups"
        )));
    }
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let wq = fw.param(params.w_q[h])?;
        let wk = fw.param(params.w_k[h])?;
        let wv = fw.param(params.w_v[h])?;
        let qh = fw.tape.matmul(q, wq)?;
        let kh = fw.tape.matmul(k, wk)?;
        let vh = fw.tape.matmul(v, wv)?;
        let scores = fw.tape.group_matmul_nt(qh, kh, groups)?;
        let weights = fw.tape.scaled_softmax(scores, params.head_dim)?;
        heads.push(fw.tape.group_matmul(weights, vh, groups)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        fw.tape.concat_cols(&heads)?
    };
    let wo = fw.param(params.w_o)?;
    fw.tape.matmul(joined, wo)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::filled(vec![dim], T::one()), false),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(vec![dim]), false),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn locate<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let find = |name: String| {
            store
                .id_of(&name)
                .ok_or_else(|| LinkError::Config(format!("missing parameter {name}")))
        };
        Ok(Self {
            gamma: find(format!("{prefix}.gamma"))?,
            beta: find(format!("{prefix}.beta"))?,
            eps: LAYER_NORM_EPS,
        })
    }
}

pub fn layer_norm<T: Scalar>(fw: &mut Forward<'_, T>, x: Var, p: &LayerNormParams) -> Result<Var> {
    if p.eps <= 0.0 {
        return Err(LinkError::Config("layer norm epsilon must be positive".into()));
    }
    let gamma = fw.param(p.gamma)?;
    let beta = fw.param(p.beta)?;
    fw.tape.layer_norm(x, gamma, beta, p.eps)
}

/// Inverted dropout. Evaluation mode and a zero ratio return `x` itself.
pub fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: &mut DropoutSpec) -> Result<Var> {
    if !(0.0..1.0).contains(&spec.ratio) {
        return Err(LinkError::Config(format!(
            "dropout ratio {} outside [0, 1)",
            spec.ratio
        )));
    }
    if !spec.training || spec.ratio == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - spec.ratio));
    let mask = (0..tape.value(x).len())
        .map(|_| {
            if spec.rng.random::<f64>() < spec.ratio {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    tape.apply_mask(x, mask)
}

/// PReLU with a learnable scalar slope stored under `slope`.
pub fn prelu<T: Scalar>(fw: &mut Forward<'_, T>, x: Var, slope: ParamId) -> Result<Var> {
    let s = fw.param(slope)?;
    fw.tape.prelu(x, s)
}
