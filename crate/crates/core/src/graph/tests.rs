use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn relu_values() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn l2_norm_value() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[3.0, 4.0]));
    let n = g.l2_norm(x);
    assert_eq!(g.value(n).item(), 5.0);
}

#[test]
fn identity_kernel_conv_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[2, 5, 4], |_| rng.gen_range(-1.0..1.0)));
    let mut w = Tensor::zeros(&[2, 2, 1, 1]);
    w.data_mut()[0] = 1.0;
    w.data_mut()[3] = 1.0;
    let w = g.constant(w);
    let y = g.conv2d(x, w, None, (1, 1), (0, 0)).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..40 {
        let (c, o) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (kh, kw) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let (h, w) = (rng.gen_range(kh..kh + 7), rng.gen_range(kw..kw + 7));
        let (sh, sw) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (ph, pw) = (rng.gen_range(0..kh), rng.gen_range(0..kw));
        let x = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::from_fn(&[o, c, kh, kw], |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, None, (sh, sw), (ph, pw)).unwrap();
        let (ho, wo) = ((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1);
        assert_eq!(g.shape(y), &[o, ho, wo]);
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for a in 0..kh {
                            for b in 0..kw {
                                let (r, q) = ((i * sh + a) as isize - ph as isize, (j * sw + b) as isize - pw as isize);
                                if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < w {
                                    acc += x.data()[(ci * h + r as usize) * w + q as usize]
                                        * k.data()[((oc * c + ci) * kh + a) * kw + b];
                                }
                            }
                        }
                    }
                    let got = g.value(y).data()[(oc * ho + i) * wo + j];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);
}

#[test]
fn relu_gradient_is_zero_below_and_at_kink() {
    for (x0, expected) in [(-1.0, 0.0), (0.0, 0.0), (2.0, 1.0)] {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(x0));
        let y = g.relu(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), expected);
    }
}

#[test]
fn abs_subgradient_zero_at_zero() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[-2.0, 0.0, 2.0]));
    let y = g.abs(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
}

#[test]
fn fan_out_accumulates() {
    for k in 1..6 {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[0.5, -1.5]));
        let branches: Vec<Var> = (0..k).map(|_| g.scale(x, 2.0)).collect();
        let mut acc = branches[0];
        for &b in &branches[1..] {
            acc = g.add(acc, b).unwrap();
        }
        let s = g.sum(acc);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0 * k as f64, 2.0 * k as f64]);
    }
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    assert!(g.matmul(a, a).is_err());
    assert!(g.matmul(a, b).is_ok());
}

#[test]
fn scalar_broadcast_only() {
    let mut g = Graph::new();
    let a = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let s = g.param(Tensor::scalar(3.0));
    let y = g.mul(a, s).unwrap();
    let total = g.sum(y);
    g.backward(total).unwrap();
    assert_eq!(g.grad(s).unwrap().item(), 10.0);
    assert_eq!(g.grad(a).unwrap().data(), &[3.0; 4]);
    let v = g.constant(Tensor::zeros(&[2]));
    assert!(g.add(a, v).is_err());
}

#[test]
fn softmax_columns_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[3, 7], |_| rng.gen_range(-5.0..5.0)));
    let y = g.softmax(x, 0).unwrap();
    let d = g.value(y).data();
    for c in 0..7 {
        let s: f64 = (0..3).map(|k| d[k * 7 + c]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn straight_through_identity_matches_plain() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[0.3, -0.2, 1.1]));
    let y = g.straight_through(x, |v| Ok(v.clone())).unwrap();
    assert_eq!(g.value(y), g.value(x));
    let sq = g.mul(y, y).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.6, -0.4, 2.2]);
}

#[test]
fn straight_through_passes_upstream_gradient_unchanged() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[0.34, -0.26, 1.01]));
    let y = g
        .straight_through(x, |v| Ok(v.map(|a| (a * 10.0).round() / 10.0)))
        .unwrap();
    assert_eq!(g.value(y).data(), &[0.3, -0.3, 1.0]);
    let w = g.constant(t(&[3], &[1.5, -2.0, 0.25]));
    let p = g.mul(y, w).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.5, -2.0, 0.25]);
}

#[test]
fn straight_through_rejects_shape_change() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let err = g
        .straight_through(x, |v| Tensor::new(vec![2], v.data()[..2].to_vec()))
        .unwrap_err();
    assert!(err.to_string().contains("straight-through requires shape preservation"));
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[3, 4]));
    let l = g.cross_entropy(x, &[0, 1, 2, 0]).unwrap();
    assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
    assert!(matches!(
        g.cross_entropy(x, &[0, 1, 3, 0]),
        Err(Error::SymbolOutOfRange { .. })
    ));
}

#[test]
fn permute_round_trip() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
    let p = g.permute(x, &[1, 2, 0]).unwrap();
    assert_eq!(g.shape(p), &[3, 4, 2]);
    // element (a, b, c) of x lands at (b, c, a)
    assert_eq!(g.value(p).data()[(2 * 4 + 3) * 2 + 1], (1 * 3 * 4 + 2 * 4 + 3) as f64);
    let back = g.permute(p, &[2, 0, 1]).unwrap();
    assert_eq!(g.value(back), g.value(x));
}

#[test]
fn depends_on_tracks_inputs() {
    let mut g = Graph::new();
    let a = g.param(Tensor::scalar(1.0));
    let b = g.param(Tensor::scalar(2.0));
    let c = g.mul(a, a).unwrap();
    let d = g.add(b, b).unwrap();
    assert!(g.depends_on(c, a));
    assert!(!g.depends_on(c, b));
    assert!(g.depends_on(d, b));
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::new();
    let a = g.param(Tensor::scalar(2.0));
    let c = g.constant(Tensor::scalar(5.0));
    let y = g.mul(a, c).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(a).unwrap().item(), 5.0);
    assert!(g.grad(c).is_none());
}
