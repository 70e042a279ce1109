use moeforge::ndcore::gradcheck;
use moeforge::ndcore::{AttnSegment, ParamId, ParamStore, Tape, Tensor, Var};
use moeforge::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts `x` with fixed random weights so every output entry gets a
/// distinct upstream gradient.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut rng(seed));
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn assert_check<F>(name: &str, params: &mut ParamStore, f: F)
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let r = gradcheck::check(params, H, TOL, f).unwrap();
    assert!(r.passed(), "{name}: {r:?}");
    assert!(r.checked > 0);
}

fn store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    for (n, sh) in shapes {
        s.add(*n, Tensor::randn(sh, 1.0, &mut r));
    }
    s
}

#[test]
fn softmax_values() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![1.0; 4]));
    let y = t.softmax(x);
    assert_eq!(t.data(y), &[0.25; 4]);

    let x = t.constant(Tensor::vector(vec![2.0, 1.0, 0.5, -1.0]));
    let y = t.softmax(x);
    // mpmath, 40 digits
    let want = [
        0.609_460_037_598_877_1,
        0.224_207_818_048_201_14,
        0.135_988_915_793_505_52,
        0.030_343_228_559_416_224,
    ];
    for (a, b) in t.data(y).iter().zip(want) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut r = rng(11);
    for _ in 0..200 {
        let rows = r.gen_range(1..6);
        let cols = r.gen_range(1..9);
        let scale = r.gen_range(0.1..30.0);
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[rows, cols], scale, &mut r));
        let y = t.softmax(x);
        for row in t.data(y).chunks(cols) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0 || scale > 20.0));
        }
    }
}

#[test]
fn sigmoid_at_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::scalar(0.0));
    let y = t.sigmoid(x);
    assert_eq!(t.value(y).item(), 0.5);
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let logits = t.constant(Tensor::new(vec![2, 4], vec![0.3; 8]).unwrap());
    for eps in [0.0, 0.1, 0.5] {
        let l = t.cross_entropy(logits, &[1, 3], eps).unwrap();
        assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-14);
    }

    let perfect = t.constant(Tensor::new(vec![1, 3], vec![800.0, 0.0, 0.0]).unwrap());
    let l = t.cross_entropy(perfect, &[0], 0.0).unwrap();
    assert_eq!(t.value(l).item(), 0.0);

    // mpmath: -(0.9·log p0 + 0.05·(log p1 + log p2)) for logits [2,0,0]
    let x = t.constant(Tensor::new(vec![1, 3], vec![2.0, 0.0, 0.0]).unwrap());
    let l = t.cross_entropy(x, &[0], 0.1).unwrap();
    assert!((t.value(l).item() - 0.439_544_766_221_884_5).abs() < 1e-15);

    // eps = 0 is plain cross entropy
    let l = t.cross_entropy(x, &[0], 0.0).unwrap();
    let want = -(2.0 - (2f64.exp() + 2.0).ln());
    assert!((t.value(l).item() - want).abs() < 1e-15);

    assert!(matches!(
        t.cross_entropy(x, &[3], 0.1),
        Err(Error::OutOfRange { index: 3, bound: 3, .. })
    ));
    assert!(t.cross_entropy(x, &[0], 1.0).is_err());
}

#[test]
fn backward_trivial_cases() {
    let mut s = ParamStore::new();
    let id = s.add("w", Tensor::vector(vec![1.0, -2.0, 3.0]));
    let mut t = Tape::new();
    let w = t.param(&s, id);
    let l = t.sum(w);
    t.backward(l).unwrap();
    assert_eq!(t.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let w = t.param(&s, id);
    let z = t.constant(Tensor::zeros(&[3]));
    let p = t.mul(w, z).unwrap();
    let l = t.sum(p);
    t.backward(l).unwrap();
    assert_eq!(t.grad(w).unwrap(), &[0.0, 0.0, 0.0]);

    let mut t = Tape::new();
    let w = t.param(&s, id);
    assert!(matches!(t.backward(w), Err(Error::NonScalarLoss(_))));
}

#[test]
fn fan_out_accumulates() {
    let mut s = ParamStore::new();
    let id = s.add("w", Tensor::vector(vec![2.0]));
    let mut t = Tape::new();
    let w = t.param(&s, id);
    let a = t.mul(w, w).unwrap();
    let b = t.add(a, w).unwrap();
    let l = t.sum(b);
    t.backward(l).unwrap();
    assert_eq!(t.grad(w).unwrap(), &[5.0]);
}

#[test]
fn shape_errors_name_dimensions() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 5]));
    let e = t.matmul(a, b).unwrap_err().to_string();
    assert!(e.contains("[2, 3]") && e.contains("[4, 5]"), "{e}");
    let e = t.add(a, b).unwrap_err().to_string();
    assert!(e.contains("[2, 3]") && e.contains("[4, 5]"), "{e}");
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut s = store(
        &[("w1", &[5, 7]), ("b1", &[7]), ("w2", &[7, 3]), ("b2", &[3])],
        21,
    );
    let x = Tensor::randn(&[4, 5], 1.0, &mut rng(22));
    assert_check("mlp", &mut s, |t, p| {
        let x = t.constant(x.clone());
        let w1 = t.param(p, ParamId(0));
        let b1 = t.param(p, ParamId(1));
        let w2 = t.param(p, ParamId(2));
        let b2 = t.param(p, ParamId(3));
        let h = t.matmul(x, w1)?;
        let h = t.add_row(h, b1)?;
        let h = t.gelu(h);
        let o = t.matmul(h, w2)?;
        let o = t.add_row(o, b2)?;
        t.cross_entropy(o, &[0, 2, 1, 2], 0.1)
    });
}

#[test]
fn matmul_variants() {
    let mut s = store(&[("a", &[3, 4]), ("b", &[4, 2]), ("c", &[5, 4])], 1);
    assert_check("matmul", &mut s, |t, p| {
        let a = t.param(p, ParamId(0));
        let b = t.param(p, ParamId(1));
        let c = t.param(p, ParamId(2));
        let ab = t.matmul(a, b)?;
        let act = t.matmul_t(a, c)?;
        let l1 = project(t, ab, 5)?;
        let l2 = project(t, act, 6)?;
        t.add(l1, l2)
    });
}

#[test]
fn elementwise_ops() {
    let mut s = store(&[("a", &[3, 4]), ("b", &[3, 4]), ("bias", &[4])], 2);
    let factors: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect();
    assert_check("elementwise", &mut s, |t, p| {
        let a = t.param(p, ParamId(0));
        let b = t.param(p, ParamId(1));
        let bias = t.param(p, ParamId(2));
        let x = t.add(a, b)?;
        let x = t.mul(x, a)?;
        let x = t.add_row(x, bias)?;
        let x = t.affine(x, 0.7, -0.2);
        let x = t.mul_const(x, factors.clone())?;
        let s1 = t.sigmoid(x);
        let g1 = t.gelu(b);
        let l1 = project(t, s1, 1)?;
        let l2 = project(t, g1, 2)?;
        t.add(l1, l2)
    });
}

#[test]
fn abs_away_from_kink() {
    let mut s = ParamStore::new();
    s.add("a", Tensor::vector(vec![0.3, -1.2, 2.0, -0.01]));
    assert_check("abs", &mut s, |t, p| {
        let a = t.param(p, ParamId(0));
        let y = t.abs(a);
        project(t, y, 3)
    });
}

#[test]
fn softmax_and_layer_norm() {
    let mut s = store(&[("x", &[3, 5]), ("g", &[5]), ("b", &[5])], 3);
    assert_check("softmax+ln", &mut s, |t, p| {
        let x = t.param(p, ParamId(0));
        let g = t.param(p, ParamId(1));
        let b = t.param(p, ParamId(2));
        let y = t.layer_norm(x, g, b)?;
        let z = t.softmax(y);
        project(t, z, 4)
    });
}

#[test]
fn indexing_ops() {
    let mut s = store(&[("table", &[6, 3]), ("x", &[4, 3]), ("s", &[4])], 4);
    assert_check("indexing", &mut s, |t, p| {
        let table = t.param(p, ParamId(0));
        let x = t.param(p, ParamId(1));
        let sc = t.param(p, ParamId(2));
        let e = t.embedding(table, &[5, 0, 5, 2])?;
        let c = t.concat_rows(&[e, x])?;
        let r = t.slice_rows(c, 1, 5)?;
        let cc = t.slice_cols(r, 1, 2)?;
        let g = t.gather_rows(x, &[3, 3, 0])?;
        let ia = t.index_add_rows(g, &[1, 0, 1], 2)?;
        let ge = t.gather_elems(c, &[(0, 0), (7, 2), (0, 0)])?;
        let sr = t.scale_rows(x, sc)?;
        let mr = t.mean_rows(sr)?;
        let parts = [cc, ia, ge, mr];
        let mut total = None;
        for (i, v) in parts.into_iter().enumerate() {
            let l = project(t, v, 10 + i as u64)?;
            total = Some(match total {
                None => l,
                Some(acc) => t.add(acc, l)?,
            });
        }
        Ok(total.unwrap())
    });
}

#[test]
fn masked_zero_blocks_gradient() {
    let mut s = store(&[("x", &[4, 3])], 5);
    assert_check("masked_zero", &mut s, |t, p| {
        let x = t.param(p, ParamId(0));
        let y = t.masked_zero(x, &[false, true, false, true])?;
        project(t, y, 7)
    });
    let mut t = Tape::new();
    let x = t.param(&s, ParamId(0));
    let y = t.masked_zero(x, &[false, true, false, true]).unwrap();
    let l = project(&mut t, y, 7).unwrap();
    t.backward(l).unwrap();
    let g = t.grad(x).unwrap();
    assert!(g[3..6].iter().chain(&g[9..12]).all(|v| *v == 0.0));
    assert!(g[0..3].iter().any(|v| *v != 0.0));
}

#[test]
fn renormalize_rows_gradient() {
    let mut s = ParamStore::new();
    s.add("x", Tensor::new(vec![3, 4], (0..12).map(|i| 0.1 + 0.05 * i as f64).collect()).unwrap());
    let keep = vec![
        true, true, false, false, //
        true, true, true, true, //
        false, false, true, true,
    ];
    let active = [true, false, true];
    assert_check("renormalize_rows", &mut s, |t, p| {
        let x = t.param(p, ParamId(0));
        let y = t.renormalize_rows(x, &keep, &active)?;
        project(t, y, 8)
    });
}

#[test]
fn attention_self_causal_and_cross() {
    let mut s = store(&[("q", &[7, 4]), ("k", &[7, 4]), ("v", &[7, 4]), ("m", &[5, 4])], 6);
    let self_segs = [
        AttnSegment { q_start: 0, q_len: 3, k_start: 0, k_len: 3 },
        AttnSegment { q_start: 3, q_len: 4, k_start: 3, k_len: 4 },
    ];
    let cross_segs = [
        AttnSegment { q_start: 0, q_len: 3, k_start: 0, k_len: 2 },
        AttnSegment { q_start: 3, q_len: 4, k_start: 2, k_len: 3 },
    ];
    assert_check("attention", &mut s, |t, p| {
        let q = t.param(p, ParamId(0));
        let k = t.param(p, ParamId(1));
        let v = t.param(p, ParamId(2));
        let m = t.param(p, ParamId(3));
        let a = t.attention(q, k, v, &self_segs, 2, true)?;
        let b = t.attention(a, m, m, &cross_segs, 2, false)?;
        let l1 = project(t, a, 1)?;
        let l2 = project(t, b, 2)?;
        t.add(l1, l2)
    });
}

#[test]
fn causal_attention_ignores_future() {
    let mut r = rng(9);
    let q = Tensor::randn(&[3, 2], 1.0, &mut r);
    let k = Tensor::randn(&[3, 2], 1.0, &mut r);
    let v = Tensor::randn(&[3, 2], 1.0, &mut r);
    let seg = [AttnSegment { q_start: 0, q_len: 3, k_start: 0, k_len: 3 }];
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let a = t.attention(qv, kv, vv, &seg, 1, true).unwrap();
    // first query sees only the first value
    assert_eq!(&t.data(a)[0..2], &v.data()[0..2]);
}

#[test]
fn cross_entropy_gradient() {
    let mut s = store(&[("z", &[3, 5])], 7);
    assert_check("cross_entropy", &mut s, |t, p| {
        let z = t.param(p, ParamId(0));
        t.cross_entropy(z, &[4, 0, 2], 0.1)
    });
}
