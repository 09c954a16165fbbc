use proptest::prelude::*;
use rand::Rng;

use super::nn::LAYER_NORM_EPS;
use super::*;

fn mat(rows: usize, cols: usize, data: &[f32]) -> Tensor<f32> {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn random_tensor<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut tape = Tape::new();
    let id = tape.leaf(&mat(2, 2, &[1., 0., 0., 1.])).unwrap();
    let m = tape.leaf(&mat(2, 2, &[3., -1., 0.5, 7.])).unwrap();
    let out = tape.matmul(id, m).unwrap();
    assert_eq!(tape.value(out), &[3., -1., 0.5, 7.]);

    let a = tape.leaf(&mat(2, 2, &[1., 2., 3., 4.])).unwrap();
    let ones = tape.leaf(&mat(2, 1, &[1., 1.])).unwrap();
    let out = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.dims(out), (2, 1));
    assert_eq!(tape.value(out), &[3., 7.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(3, 4, vec![0.; 12]).unwrap();
    let b = tape.constant(3, 2, vec![0.; 6]).unwrap();
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[3, 4]") && err.contains("[3, 2]"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = rng_stream(7, RngStream::Init);
    let a: Tensor<f32> = random_tensor(&mut rng, 3, 4);
    let b: Tensor<f32> = random_tensor(&mut rng, 4, 2);

    // analytic gradient of sum(a·b) w.r.t. a is b's row sums broadcast down
    let mut tape = Tape::new();
    let av = tape.leaf(&a.clone().with_grad()).unwrap();
    let bv = tape.leaf(&b).unwrap();
    let prod = tape.matmul(av, bv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let ga = grads.get(av).unwrap();
    for i in 0..3 {
        for p in 0..4 {
            let row_sum: f32 = b.row(p).iter().sum();
            assert!((ga[i * 4 + p] - row_sum).abs() < 1e-6);
        }
    }

    let b_for_check = b.clone();
    let err = grad_check(
        move |t, x| {
            let bv = t.leaf(&b_for_check)?;
            let p = t.matmul(x, bv)?;
            Ok(t.sum(p))
        },
        &a,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn softmax_equal_logits_are_uniform() {
    let mut tape = Tape::new();
    let x = tape.leaf(&mat(1, 5, &[2.5; 5])).unwrap();
    let y = tape.scaled_softmax(x, 17).unwrap();
    assert!(tape.value(y).iter().all(|&w| (w - 0.2).abs() < 1e-7));
}

#[test]
fn softmax_two_element_closed_form() {
    let (x, c) = (0.3f64, 1.7f64);
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(1, 2, vec![x, x + c]).unwrap();
    let y = tape.scaled_softmax(v, 1).unwrap();
    let want = [1.0 / (1.0 + c.exp()), c.exp() / (1.0 + c.exp())];
    for (got, want) in tape.value(y).iter().zip(want) {
        assert!((got - want).abs() < 1e-15);
    }
}

#[test]
fn softmax_matches_extended_precision_reference() {
    let mut rng = rng_stream(11, RngStream::Init);
    let logits: Vec<f32> = (0..12).map(|_| rng.random_range(-8.0..8.0)).collect();
    let mut tape = Tape::new();
    let v = tape.constant(1, 12, logits.clone()).unwrap();
    let y = tape.scaled_softmax(v, 64).unwrap();

    // f64 reference with the scaling applied explicitly
    let scaled: Vec<f64> = logits.iter().map(|&l| l as f64 / 8.0).collect();
    let max = scaled.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    for (got, e) in tape.value(y).iter().zip(&exps) {
        assert!((*got as f64 - e / total).abs() < 1e-6);
    }
}

#[test]
fn softmax_rejects_non_finite_logits() {
    let mut tape = Tape::new();
    let v = tape.constant(1, 2, vec![f32::NAN, 0.0]).unwrap();
    assert!(matches!(tape.scaled_softmax(v, 1), Err(crate::LinkError::Numeric(_))));
}

fn identity(n: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

fn single_head(store: &mut ParamStore<f32>, dim: usize) -> AttentionParams {
    let mut rng = rng_stream(0, RngStream::Init);
    let p = AttentionParams::init(
        store,
        &mut rng,
        "attn",
        AttentionShape {
            heads: 1,
            d_q: dim,
            d_kv: dim,
            head_dim: dim,
            d_out: dim,
        },
    )
    .unwrap();
    for id in [p.w_q[0], p.w_k[0], p.w_v[0], p.w_o] {
        *store.get_mut(id) = identity(dim).with_grad();
    }
    p
}

#[test]
fn attention_with_single_key_returns_projected_value() {
    let mut rng = rng_stream(3, RngStream::Init);
    let mut store = ParamStore::new();
    let params = AttentionParams::init(
        &mut store,
        &mut rng,
        "a",
        AttentionShape {
            heads: 2,
            d_q: 4,
            d_kv: 4,
            head_dim: 3,
            d_out: 4,
        },
    )
    .unwrap();
    let q: Tensor<f32> = random_tensor(&mut rng, 3, 4);
    let kv: Tensor<f32> = random_tensor(&mut rng, 1, 4);

    let mut fw = Forward::eval(&store);
    let qv = fw.tape.leaf(&q).unwrap();
    let kvv = fw.tape.leaf(&kv).unwrap();
    let out = multi_head_attention(&mut fw, qv, kvv, kvv, &params, 1).unwrap();

    // (v·W_v per head, concatenated) · W_o, the same for every query row
    let mut expected_tape = Tape::new();
    let v = expected_tape.leaf(&kv).unwrap();
    let mut heads = Vec::new();
    for h in 0..2 {
        let w = expected_tape.leaf(store.get(params.w_v[h])).unwrap();
        heads.push(expected_tape.matmul(v, w).unwrap());
    }
    let cat = expected_tape.concat_cols(&heads).unwrap();
    let wo = expected_tape.leaf(store.get(params.w_o)).unwrap();
    let want = expected_tape.matmul(cat, wo).unwrap();
    for row in fw.tape.value(out).chunks(4) {
        assert!(close(row, expected_tape.value(want), 1e-6));
    }
}

#[test]
fn attention_with_uniform_scores_averages_values() {
    let mut store = ParamStore::new();
    let params = single_head(&mut store, 3);
    // q orthogonal to every key gives identical scores
    let q = mat(1, 3, &[0., 0., 1.]);
    let kv = mat(4, 3, &[1., 2., 0., -3., 0.5, 0., 0., 4., 0., 2., 1.5, 0.]);
    let mut fw = Forward::eval(&store);
    let qv = fw.tape.leaf(&q).unwrap();
    let kvv = fw.tape.leaf(&kv).unwrap();
    let out = multi_head_attention(&mut fw, qv, kvv, kvv, &params, 1).unwrap();
    assert!(close(fw.tape.value(out), &[0., 2., 0.], 1e-6));
}

/// Attention written as plain loops in f64, independent of the tape.
pub(crate) fn naive_attention(
    q: &[Vec<f64>],
    kv: &[Vec<f64>],
    store: &ParamStore<f64>,
    params: &AttentionParams,
) -> Vec<Vec<f64>> {
    let project = |rows: &[Vec<f64>], w: &Tensor<f64>| -> Vec<Vec<f64>> {
        let (din, dout) = w.as_matrix_dims().unwrap();
        rows.iter()
            .map(|r| {
                (0..dout)
                    .map(|j| (0..din).map(|i| r[i] * w.data()[i * dout + j]).sum())
                    .collect()
            })
            .collect()
    };
    let mut concat: Vec<Vec<f64>> = vec![Vec::new(); q.len()];
    for h in 0..params.heads {
        let qh = project(q, store.get(params.w_q[h]));
        let kh = project(kv, store.get(params.w_k[h]));
        let vh = project(kv, store.get(params.w_v[h]));
        for (i, qi) in qh.iter().enumerate() {
            let scores: Vec<f64> = kh
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (params.head_dim as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in 0..params.value_dim {
                concat[i].push((0..kv.len()).map(|j| exps[j] / total * vh[j][c]).sum());
            }
        }
    }
    project(&concat, store.get(params.w_o))
}

#[test]
fn attention_matches_naive_loops() {
    let mut rng = rng_stream(5, RngStream::Init);
    let mut store = ParamStore::<f64>::new();
    let params = AttentionParams::init(
        &mut store,
        &mut rng,
        "a",
        AttentionShape {
            heads: 3,
            d_q: 5,
            d_kv: 5,
            head_dim: 2,
            d_out: 5,
        },
    )
    .unwrap();
    let q: Tensor<f64> = random_tensor(&mut rng, 2, 5);
    let kv: Tensor<f64> = random_tensor(&mut rng, 4, 5);
    let mut fw = Forward::eval(&store);
    let qv = fw.tape.leaf(&q).unwrap();
    let kvv = fw.tape.leaf(&kv).unwrap();
    let out = multi_head_attention(&mut fw, qv, kvv, kvv, &params, 1).unwrap();

    let rows = |t: &Tensor<f64>| (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
    let want = naive_attention(&rows(&q), &rows(&kv), &store, &params);
    for (got, want) in fw.tape.value(out).chunks(5).zip(&want) {
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-5);
        }
    }
}

#[test]
fn grouped_attention_equals_separate_calls() {
    let mut rng = rng_stream(8, RngStream::Init);
    let mut store = ParamStore::<f32>::new();
    let params = AttentionParams::init(
        &mut store,
        &mut rng,
        "a",
        AttentionShape {
            heads: 2,
            d_q: 4,
            d_kv: 4,
            head_dim: 2,
            d_out: 4,
        },
    )
    .unwrap();
    let q: Tensor<f32> = random_tensor(&mut rng, 6, 4);
    let kv: Tensor<f32> = random_tensor(&mut rng, 9, 4);
    let mut fw = Forward::eval(&store);
    let qv = fw.tape.leaf(&q).unwrap();
    let kvv = fw.tape.leaf(&kv).unwrap();
    let grouped = multi_head_attention(&mut fw, qv, kvv, kvv, &params, 3).unwrap();
    let grouped = fw.tape.value(grouped).to_vec();

    for g in 0..3 {
        let mut fw = Forward::eval(&store);
        let qg = fw.tape.constant(2, 4, q.data()[g * 8..(g + 1) * 8].to_vec()).unwrap();
        let kg = fw
            .tape
            .constant(3, 4, kv.data()[g * 12..(g + 1) * 12].to_vec())
            .unwrap();
        let out = multi_head_attention(&mut fw, qg, kg, kg, &params, 1).unwrap();
        assert_eq!(fw.tape.value(out), &grouped[g * 8..(g + 1) * 8]);
    }
}

#[test]
fn attention_rejects_mismatched_dims() {
    let mut store = ParamStore::new();
    let params = single_head(&mut store, 3);
    let mut fw = Forward::eval(&store);
    let q = fw.tape.constant(1, 4, vec![0.; 4]).unwrap();
    let kv = fw.tape.constant(2, 3, vec![0.; 6]).unwrap();
    assert!(matches!(
        multi_head_attention(&mut fw, q, kv, kv, &params, 1),
        Err(crate::LinkError::Config(_))
    ));
}

fn plain_norm(store: &mut ParamStore<f32>, dim: usize) -> LayerNormParams {
    LayerNormParams::init(store, "ln", dim)
}

#[test]
fn layer_norm_constant_row_collapses_to_beta() {
    let mut store = ParamStore::new();
    let p = plain_norm(&mut store, 4);
    let mut fw = Forward::eval(&store);
    let x = fw.tape.constant(1, 4, vec![3.7; 4]).unwrap();
    let y = layer_norm(&mut fw, x, &p).unwrap();
    assert!(fw.tape.value(y).iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = rng_stream(13, RngStream::Init);
    let x: Tensor<f64> = random_tensor(&mut rng, 2, 6);
    let weights: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let err = grad_check(
        move |t, x| {
            let gamma = t.constant(1, 6, vec![1.3, 0.7, 1.0, 0.2, -0.5, 2.0])?;
            let beta = t.constant(1, 6, vec![0.1; 6])?;
            let y = t.layer_norm(x, gamma, beta, 1e-5)?;
            let w = t.constant(2, 6, weights.clone())?;
            let yw = t.mul(y, w)?;
            Ok(t.sum(yw))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn dropout_eval_and_zero_ratio_are_identity() {
    let mut tape = Tape::new();
    let x = tape.constant(2, 3, vec![1., -2., 3., 0.5, 0., 9.]).unwrap();
    let mut eval = DropoutSpec::new(0.4, 1, false).unwrap();
    assert_eq!(dropout(&mut tape, x, &mut eval).unwrap(), x);
    let mut zero = DropoutSpec::new(0.0, 1, true).unwrap();
    assert_eq!(dropout(&mut tape, x, &mut zero).unwrap(), x);
}

#[test]
fn dropout_preserves_mean_in_expectation() {
    let mut tape = Tape::new();
    let x = tape.constant(1, 100_000, vec![1.0f32; 100_000]).unwrap();
    let mut spec = DropoutSpec::new(0.4, 2024, true).unwrap();
    let y = dropout(&mut tape, x, &mut spec).unwrap();
    let vals = tape.value(y);
    let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
    assert!((0.98..=1.02).contains(&mean), "mean {mean}");
    let kept = vals.iter().filter(|&&v| v != 0.0).count();
    assert!(vals
        .iter()
        .filter(|&&v| v != 0.0)
        .all(|&v| (v - 1.0 / 0.6).abs() < 1e-6));
    assert!((kept as f64 / 1e5 - 0.6).abs() < 0.01);
}

#[test]
fn dropout_rejects_bad_ratio() {
    assert!(DropoutSpec::new(1.0, 0, true).is_err());
    assert!(DropoutSpec::new(-0.1, 0, true).is_err());
}

#[test]
fn prelu_values_and_slope_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(1, 2, vec![1.0f32, -1.0]).unwrap();
    let slope = tape.variable(1, 1, vec![0.25]).unwrap();
    let y = tape.prelu(x, slope).unwrap();
    assert_eq!(tape.value(y), &[1.0, -0.25]);

    let one = tape.constant(1, 1, vec![1.0]).unwrap();
    let z = tape.constant(1, 3, vec![-4.0, 0.0, 2.5]).unwrap();
    let y = tape.prelu(z, one).unwrap();
    assert_eq!(tape.value(y), &[-4.0, 0.0, 2.5]);

    let x = tape.constant(1, 2, vec![-2.0, -3.0]).unwrap();
    let y = tape.prelu(x, slope).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(slope).unwrap(), &[-5.0]);
}

#[test]
fn backward_linear_and_quadratic() {
    let mut tape = Tape::new();
    let x = tape.variable(2, 3, vec![1., -2., 0.5, 3., 0., -1.]).unwrap();
    let s = tape.sum(x);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0f32; 6]);

    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2., -4., 1., 6., 0., -2.]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f32>::new();
    let x = tape.variable(1, 2, vec![1., 2.]).unwrap();
    assert!(matches!(tape.backward(x), Err(crate::LinkError::Usage(_))));
}

#[test]
fn repeated_backward_accumulates_into_parameters() {
    let mut store = ParamStore::new();
    let w = store.add("w", mat(1, 3, &[1., 2., 3.]), true);
    for _ in 0..2 {
        let mut fw = Forward::eval(&store);
        let wv = fw.param(w).unwrap();
        let sq = fw.tape.mul(wv, wv).unwrap();
        let loss = fw.tape.sum(sq);
        let (grads, bound) = fw.backward(loss).unwrap();
        store.absorb(&grads, &bound).unwrap();
    }
    assert_eq!(store.get(w).grad().unwrap(), &[4., 8., 12.]);
}

#[test]
fn grad_check_of_sum_is_exact() {
    let x = mat(2, 2, &[0.1, -0.4, 2.0, 0.7]);
    let err = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-3).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_softmax_sum_of_squares() {
    let mut rng = rng_stream(21, RngStream::Init);
    let x: Tensor<f64> = random_tensor(&mut rng, 3, 5);
    let err = grad_check(
        |t, x| {
            let y = t.scaled_softmax(x, 4)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn every_tape_op_passes_grad_check() {
    let mut rng = rng_stream(31, RngStream::Init);
    let x: Tensor<f64> = random_tensor(&mut rng, 4, 3);
    let other: Tensor<f64> = random_tensor(&mut rng, 4, 3);
    let err = grad_check(
        move |t, x| {
            let o = t.leaf(&other)?;
            let xt = t.transpose(x);
            let gram = t.matmul_nt(x, o)?; // 4×4
            let back = t.matmul(gram, x)?; // 4×3
            let grouped = t.group_matmul_nt(back, x, 2)?; // 4×2
            let mixed = t.group_matmul(grouped, o, 2)?; // 4×3
            let sum = t.add(mixed, x)?;
            let diff = t.sub(sum, o)?;
            let slope = t.constant(1, 1, vec![0.1])?;
            let act = t.prelu(diff, slope)?;
            let wide = t.concat_cols(&[act, x])?; // 4×6
            let sl = t.slice_cols(wide, 1, 4)?; // 4×3
            let bias = t.constant(1, 3, vec![0.3, -0.2, 0.1])?;
            let biased = t.add_row(sl, bias)?;
            let tall = t.concat_rows(&[biased, x])?; // 8×3
            let unit = t.normalize_rows(tall)?;
            let sq = t.row_sum_sq(unit); // 8×1
            let scaled = t.scale(sq, 0.5);
            let first = t.slice_cols(xt, 0, 2)?; // 3×2
            let rep = t.repeat_rows(first, 2); // 6×2
            let picked = t.gather_rows(rep, &[5, 0, 5, 2])?;
            let m1 = t.mean(picked);
            let shifted = t.offset(scaled, 0.25);
            let s1 = t.sum(shifted);
            let total = t.add(s1, m1)?;
            let sq_norm = t.mul(unit, unit)?;
            let s2 = t.mean(sq_norm);
            let both = t.add(total, s2)?;
            let probs = t.scaled_softmax(xt, 2)?;
            let p = t.slice_cols(probs, 0, 1)?;
            let bce = t.bce(p, &[1.0, 0.0, 1.0])?;
            t.add(both, bce)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = rng_stream(4, RngStream::Init);
    let mut store = ParamStore::<f32>::new();
    store.add("a.w", random_tensor(&mut rng, 3, 5), true);
    store.add("a.gamma", Tensor::filled(vec![5], 1.0), false);
    store.add("slope", Tensor::scalar(0.25), false);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, 2, &store).unwrap();
    assert_eq!(&buf[..4], b"FCTW");
    let (variant, back) = read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(variant, 2);
    assert_eq!(back.len(), 3);
    for (x, y) in store.entries().iter().zip(back.entries()) {
        assert_eq!(x.name, y.name);
        assert_eq!(x.decay, y.decay);
        assert_eq!(x.tensor.shape(), y.tensor.shape());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.tensor), bits(&y.tensor));
    }
    let mut again = Vec::new();
    write_checkpoint(&mut again, variant, &back).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn checkpoint_rejects_corruption() {
    let mut store = ParamStore::<f32>::new();
    store.add("w", Tensor::filled(vec![2, 2], 1.5), true);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, 0, &store).unwrap();

    let mut bad_magic = buf.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        read_checkpoint(&mut bad_magic.as_slice()),
        Err(crate::LinkError::Format { offset: 0, .. })
    ));
    let truncated = &buf[..buf.len() - 3];
    let err = read_checkpoint(&mut &truncated[..]).unwrap_err().to_string();
    assert!(err.contains("need 16 bytes, 13 remain"), "{err}");
    let mut bad_version = buf.clone();
    bad_version[4] = 9;
    assert!(read_checkpoint(&mut bad_version.as_slice()).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        vals in prop::collection::vec(-30.0f32..30.0, 1..40),
        cols in 1usize..8,
        d in 1usize..128,
    ) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let mut tape = Tape::new();
        let x = tape.constant(rows, cols, vals[..rows * cols].to_vec()).unwrap();
        let y = tape.scaled_softmax(x, d).unwrap();
        for row in tape.value(y).chunks(cols) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(
        vals in prop::collection::vec(-50.0f32..50.0, 2..64),
        cols in 2usize..9,
    ) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let data = &vals[..rows * cols];
        let mut store = ParamStore::new();
        let p = LayerNormParams::init(&mut store, "ln", cols);
        let mut fw = Forward::eval(&store);
        let x = fw.tape.constant(rows, cols, data.to_vec()).unwrap();
        let y = layer_norm(&mut fw, x, &p).unwrap();
        for (src, row) in data.chunks(cols).zip(fw.tape.value(y).chunks(cols)) {
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-6);
            // eps shrinks the variance below 1 by var_in / (var_in + eps)
            let m: f64 = src.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var_in: f64 = src.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / cols as f64;
            let expected = var_in / (var_in + LAYER_NORM_EPS);
            prop_assert!((var - expected).abs() < 1e-4, "var {} expected {}", var, expected);
        }
    }

    #[test]
    fn attention_is_invariant_to_key_order(seed in 0u64..500, n in 2usize..7) {
        let mut rng = rng_stream(seed, RngStream::Init);
        let mut store = ParamStore::<f32>::new();
        let params = AttentionParams::init(&mut store, &mut rng, "a", AttentionShape {
            heads: 2, d_q: 4, d_kv: 4, head_dim: 3, d_out: 4,
        }).unwrap();
        let q: Tensor<f32> = random_tensor(&mut rng, 2, 4);
        let kv: Tensor<f32> = random_tensor(&mut rng, n, 4);
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left(seed as usize % n);
        order.swap(0, n - 1);
        let permuted: Vec<f32> = order.iter().flat_map(|&i| kv.row(i).to_vec()).collect();

        let run = |kv_data: Vec<f32>| {
            let mut fw = Forward::eval(&store);
            let qv = fw.tape.leaf(&q).unwrap();
            let k = fw.tape.constant(n, 4, kv_data).unwrap();
            let out = multi_head_attention(&mut fw, qv, k, k, &params, 1).unwrap();
            fw.tape.value(out).to_vec()
        };
        let a = run(kv.data().to_vec());
        let b = run(permuted);
        prop_assert!(close(&a, &b, 1e-6));
    }

    #[test]
    fn eval_dropout_is_bit_identical(vals in prop::collection::vec(-1e6f32..1e6, 1..50)) {
        let mut tape = Tape::new();
        let x = tape.constant(1, vals.len(), vals.clone()).unwrap();
        let mut spec = DropoutSpec::new(0.4, 9, false).unwrap();
        let y = dropout(&mut tape, x, &mut spec).unwrap();
        prop_assert_eq!(tape.value(y), vals.as_slice());
    }
}
