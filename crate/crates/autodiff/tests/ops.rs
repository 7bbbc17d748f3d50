use autodiff::{grad_check, GradCheck, Graph, Rng, Tensor, Var};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let dot = g.matmul(r, c).unwrap();
    assert_eq!(g.value(dot).data(), &[11.0]);

    let mut rng = Rng::seed_from(1);
    let z = g.constant(Tensor::zeros(&[2, 3]));
    let any = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
    let zz = g.matmul(z, any).unwrap();
    assert_eq!(g.shape(zz), &[2, 4]);
    assert!(g.value(zz).data().iter().all(|v| *v == 0.0));

    let bad = g.constant(Tensor::zeros(&[4, 4]));
    assert!(matches!(g.matmul(z, bad), Err(autodiff::Error::Dimension(_))));
}

#[test]
fn conv2d_examples() {
    let mut rng = Rng::seed_from(2);
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[2, 1, 5, 5], 1.0, &mut rng));
    let id = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = g.conv2d(x, id, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    let c = 0.7;
    let flat = g.constant(Tensor::full(&[1, 1, 6, 6], c));
    let ones = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(flat, ones, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 4]);
    close(g.value(y).data(), &[9.0 * c; 16], 1e-12);

    let k0 = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
    let y = g.conv2d(x, k0, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 3, 3]);
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let big = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
    assert!(g.conv2d(x, big, None, 1, 1).is_err());
}

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let [b, c, h, wd] = *x.shape() else { unreachable!() };
    let [o, _, kh, kw] = *w.shape() else { unreachable!() };
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for n in 0..b {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((n * c + ic) * h + y as usize) * wd + xx as usize]
                                    * w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((n * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_reference() {
    let mut rng = Rng::seed_from(3);
    let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut rng);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let w = Tensor::randn(&[5, 3, 3, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let reference = naive_conv(&x, &w, stride, pad);
        close(g.value(y).data(), &reference, 1e-12);
    }
}

#[test]
fn softmax_and_relu_examples() {
    let mut g = Graph::new();
    let z = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let s = g.softmax(z, 0).unwrap();
    close(g.value(s).data(), &[1.0 / 3.0; 3], 1e-15);
    let x = g.constant(t(&[2], &[1.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    close(g.value(s).data(), &[0.73106, 0.26894], 1e-5);
    let r = g.constant(t(&[2], &[-1.0, 2.0]));
    let r = g.relu(r);
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);
}

#[test]
fn cosine_examples() {
    let mut g = Graph::new();
    let u = g.constant(t(&[2], &[0.3, -2.0]));
    let same = g.cosine_similarity(u, u, 1e-8).unwrap();
    assert!((g.value(same).item() - 1.0).abs() < 1e-15);
    let e1 = g.constant(t(&[2], &[1.0, 0.0]));
    let e2 = g.constant(t(&[2], &[0.0, 1.0]));
    let orth = g.cosine_similarity(e1, e2, 1e-8).unwrap();
    assert_eq!(g.value(orth).item(), 0.0);
    let d = g.constant(t(&[2], &[1.0, 1.0]));
    let c = g.cosine_similarity(e1, d, 1e-8).unwrap();
    assert!((g.value(c).item() - 0.70711).abs() < 1e-5);
    let zero = g.constant(Tensor::zeros(&[2]));
    let c = g.cosine_similarity(zero, d, 1e-8).unwrap();
    assert_eq!(g.value(c).item(), 0.0);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let u = g.constant(Tensor::zeros(&[2, 4]));
    let l = g.cross_entropy(u, &[0, 3]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    let sharp = g.constant(t(&[1, 3], &[1e3, 0.0, 0.0]));
    let l = g.cross_entropy(sharp, &[0]).unwrap();
    assert!(g.value(l).item() < 1e-12);
    let two = g.constant(t(&[1, 2], &[1.0, 0.0]));
    let l = g.cross_entropy(two, &[0]).unwrap();
    assert!((g.value(l).item() - 0.31326).abs() < 1e-5);
    assert!(matches!(g.cross_entropy(two, &[2]), Err(autodiff::Error::Index { index: 2, len: 2 })));
}

#[test]
fn batch_norm_examples() {
    let mut rng = Rng::seed_from(4);
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[16, 3], 2.0, &mut rng));
    let gamma = g.constant(Tensor::ones(&[3]));
    let beta = g.constant(Tensor::zeros(&[3]));
    let (y, stats) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
    let yv = g.value(y).data();
    for c in 0..3 {
        let col: Vec<f64> = (0..16).map(|r| yv[r * 3 + c]).collect();
        let mean = col.iter().sum::<f64>() / 16.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        // The ε floor shrinks the variance by var/(var + ε).
        assert!((var - stats.var[c] / (stats.var[c] + 1e-5)).abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    let flat = g.constant(Tensor::full(&[4, 2], 3.0));
    let (g2, b2) = (g.constant(Tensor::ones(&[2])), g.constant(Tensor::zeros(&[2])));
    let (y, _) = g.batch_norm_train(flat, g2, b2, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9 && v.is_finite()));

    let gamma1 = g.constant(Tensor::ones(&[3]));
    let y = g.batch_norm_eval(x, gamma1, beta, &[0.0; 3], &[1.0; 3], 0.0).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    let one_row = g.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(g.batch_norm_train(one_row, gamma, beta, 1e-5), Err(autodiff::Error::DegenerateBatch(1))));
}

#[test]
fn batch_norm_train_is_invertible_given_stats() {
    let mut rng = Rng::seed_from(5);
    let x = Tensor::randn(&[8, 4, 3, 3], 1.5, &mut rng);
    let gamma = Tensor::uniform(&[4], 2.0, &mut rng);
    let beta = Tensor::randn(&[4], 1.0, &mut rng);
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let (y, stats) = g.batch_norm_train(xv, gv, bv, 1e-5).unwrap();
    let y = g.value(y).data();
    for (k, (&yv, &xv)) in y.iter().zip(x.data()).enumerate() {
        let c = (k / 9) % 4;
        let rec = (yv - beta.data()[c]) / gamma.data()[c] * (stats.var[c] + 1e-5).sqrt() + stats.mean[c];
        assert!((rec - xv).abs() < 1e-9);
    }
}

fn check(f: impl Fn(&mut Graph, Var) -> autodiff::Result<Var>, x: &Tensor, tol: f64) {
    let err = grad_check(f, x, GradCheck::default()).unwrap();
    assert!(err < tol, "relative error {err:e} exceeds {tol:e}");
}

#[test]
fn grad_check_examples() {
    check(|g, x| g.mul(x, x), &Tensor::scalar(3.0), 1e-8);
    let mut rng = Rng::seed_from(6);
    let logits = Tensor::randn(&[3, 5], 1.0, &mut rng);
    check(
        |g, x| {
            let s = g.softmax(x, 1)?;
            let l = g.log_softmax(s, 1)?;
            let r = g.reshape(l, &[3, 5])?;
            g.cross_entropy(r, &[0, 4, 2])
        },
        &logits,
        1e-6,
    );
    let pos = Tensor::new(&[4], vec![0.5, 1.0, 2.0, 3.0]).unwrap();
    let mut g = Graph::new();
    let x = g.constant(pos.with_requires_grad(true));
    let r = g.relu(x);
    let s = g.sum(r);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0; 4]);
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = Rng::seed_from(7);
    let tol = 1e-5;
    let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let weights = Tensor::randn(&[5, 3], 1.0, &mut rng);

    // Weighted sum keeps every output coordinate in play.
    let wsum = move |g: &mut Graph, y: Var| -> autodiff::Result<Var> {
        let n = g.value(y).numel();
        let mut r = Rng::seed_from(99);
        let c = g.constant(Tensor::randn(g.shape(y), 1.0, &mut r));
        let _ = n;
        let p = g.mul(y, c)?;
        Ok(g.sum(p))
    };

    let w2 = w.clone();
    check(move |g, x| { let wv = g.constant(w2.clone()); let y = g.matmul(x, wv)?; wsum(g, y) }, &x, tol);
    let x2 = x.clone();
    check(move |g, w| { let xv = g.constant(x2.clone()); let y = g.matmul(xv, w)?; wsum(g, y) }, &w, tol);
    let b = Tensor::randn(&[4], 1.0, &mut rng);
    let x3 = x.clone();
    check(move |g, b| { let xv = g.constant(x3.clone()); let y = g.add_bias(xv, b)?; wsum(g, y) }, &b, tol);
    let other = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let o2 = other.clone();
    check(move |g, a| { let o = g.constant(o2.clone()); let y = g.mul(a, o)?; let z = g.add(y, a)?; let z = g.scale(z, -1.7); wsum(g, z) }, &weights, tol);
    check(move |g, a| { let y = g.relu(a); wsum(g, y) }, &weights, tol);
    check(move |g, a| { let y = g.softmax(a, 0)?; wsum(g, y) }, &weights, tol);
    check(move |g, a| { let y = g.softmax(a, 1)?; wsum(g, y) }, &weights, tol);
    check(move |g, a| { let y = g.log_softmax(a, 1)?; wsum(g, y) }, &weights, tol);
    check(move |g, a| { let y = g.log_softmax(a, 0)?; wsum(g, y) }, &weights, tol);
    check(move |g, a| { let o = g.constant(other.clone()); let y = g.cosine_matrix(a, o, 1e-8)?; wsum(g, y) }, &Tensor::randn(&[5, 3], 1.0, &mut rng), tol);
    let anchor = Tensor::randn(&[2, 3], 1.0, &mut rng);
    check(move |g, b| { let a = g.constant(anchor.clone()); let y = g.cosine_matrix(a, b, 1e-8)?; wsum(g, y) }, &Tensor::randn(&[5, 3], 1.0, &mut rng), tol);
    check(|g, a| g.cross_entropy(a, &[1, 0, 2, 2, 1]), &Tensor::randn(&[5, 3], 1.0, &mut rng), tol);
    check(|g, a| g.cross_entropy_excluding_self(a, &[1, 0, 3, 2]), &Tensor::randn(&[4, 4], 2.0, &mut rng), tol);
    check(|g, a| Ok(g.mean(a)), &Tensor::randn(&[5, 3], 1.0, &mut rng), tol);

    // Batch norm, dense and spatial, against input and affine parameters.
    for shape in [vec![6, 3], vec![4, 3, 2, 2]] {
        let xs = Tensor::randn(&shape, 1.3, &mut rng);
        let gamma = Tensor::uniform(&[3], 2.0, &mut rng);
        let beta = Tensor::randn(&[3], 1.0, &mut rng);
        let (g2, b2) = (gamma.clone(), beta.clone());
        let sh = shape.clone();
        let wsum = move |g: &mut Graph, y: Var| -> autodiff::Result<Var> {
            let mut r = Rng::seed_from(5);
            let c = g.constant(Tensor::randn(&sh, 1.0, &mut r));
            let p = g.mul(y, c)?;
            Ok(g.sum(p))
        };
        let ws = wsum.clone();
        check(move |g, x| { let gv = g.constant(g2.clone()); let bv = g.constant(b2.clone()); let (y, _) = g.batch_norm_train(x, gv, bv, 1e-5)?; ws(g, y) }, &xs, tol);
        let (xs2, b3) = (xs.clone(), beta.clone());
        let ws = wsum.clone();
        check(move |g, gm| { let xv = g.constant(xs2.clone()); let bv = g.constant(b3.clone()); let (y, _) = g.batch_norm_train(xv, gm, bv, 1e-5)?; ws(g, y) }, &gamma, tol);
        let (xs3, g3) = (xs.clone(), gamma.clone());
        let ws = wsum.clone();
        check(move |g, bt| { let xv = g.constant(xs3.clone()); let gv = g.constant(g3.clone()); let (y, _) = g.batch_norm_train(xv, gv, bt, 1e-5)?; ws(g, y) }, &beta, tol);
        let (g4, b4) = (gamma.clone(), beta.clone());
        check(move |g, x| { let gv = g.constant(g4.clone()); let bv = g.constant(b4.clone()); let y = g.batch_norm_eval(x, gv, bv, &[0.3, -0.1, 0.0], &[2.0, 0.5, 1.0], 1e-5)?; wsum(g, y) }, &xs, tol);
    }

    // Convolution with bias, stride and padding; pooling and reshape.
    let img = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut rng);
    let kern = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
    let bias = Tensor::randn(&[3], 0.5, &mut rng);
    let conv_sum = |g: &mut Graph, y: Var| -> autodiff::Result<Var> {
        let mut r = Rng::seed_from(11);
        let c = g.constant(Tensor::randn(g.shape(y), 1.0, &mut r));
        let p = g.mul(y, c)?;
        Ok(g.sum(p))
    };
    for (stride, pad) in [(1, 1), (2, 0)] {
        let (k, b) = (kern.clone(), bias.clone());
        check(move |g, x| { let kv = g.constant(k.clone()); let bv = g.constant(b.clone()); let y = g.conv2d(x, kv, Some(bv), stride, pad)?; conv_sum(g, y) }, &img, tol);
        let (i2, b) = (img.clone(), bias.clone());
        check(move |g, k| { let xv = g.constant(i2.clone()); let bv = g.constant(b.clone()); let y = g.conv2d(xv, k, Some(bv), stride, pad)?; conv_sum(g, y) }, &kern, tol);
        let (i3, k) = (img.clone(), kern.clone());
        check(move |g, b| { let xv = g.constant(i3.clone()); let kv = g.constant(k.clone()); let y = g.conv2d(xv, kv, Some(b), stride, pad)?; conv_sum(g, y) }, &bias, tol);
    }
    check(move |g, x| { let y = g.max_pool2d(x, 2)?; let f = g.flatten(y)?; conv_sum(g, f) }, &img, tol);
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(xs in proptest::collection::vec(-50.0f64..50.0, 1..32)) {
        let mut g = Graph::new();
        let n = xs.len();
        let x = g.constant(Tensor::new(&[n], xs).unwrap());
        let s = g.softmax(x, 0).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!(g.value(s).data().iter().all(|p| *p >= 0.0));
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_agrees_with_log_of_softmax(xs in proptest::collection::vec(-50.0f64..50.0, 1..32)) {
        let mut g = Graph::new();
        let n = xs.len();
        let x = g.constant(Tensor::new(&[n], xs).unwrap());
        let s = g.softmax(x, 0).unwrap();
        let l = g.log_softmax(x, 0).unwrap();
        for (p, lp) in g.value(s).data().iter().zip(g.value(l).data()) {
            if *p > 0.0 {
                prop_assert!((p.ln() - lp).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn log_softmax_stays_finite_for_large_inputs(xs in proptest::collection::vec(-1e4f64..1e4, 2..16)) {
        let mut g = Graph::new();
        let n = xs.len();
        let x = g.constant(Tensor::new(&[n], xs).unwrap());
        let l = g.log_softmax(x, 0).unwrap();
        prop_assert!(g.value(l).is_finite());
    }

    #[test]
    fn random_ops_match_finite_differences(seed in 0u64..1000, d in 2usize..32) {
        let mut rng = Rng::seed_from(seed);
        let x = Tensor::randn(&[d], 1.0, &mut rng);
        let w = Tensor::randn(&[d, 3], 1.0, &mut rng);
        let err = grad_check(
            move |g, x| {
                let r = g.reshape(x, &[1, d])?;
                let wv = g.constant(w.clone());
                let h = g.matmul(r, wv)?;
                let s = g.softmax(h, 1)?;
                let o = g.constant(Tensor::ones(&[1, 3]));
                let c = g.cosine_matrix(s, o, 1e-8)?;
                let lg = g.log_softmax(h, 1)?;
                let t = g.sum(lg);
                let u = g.sum(c);
                let u = g.reshape(u, &[1])?;
                let t = g.reshape(t, &[1])?;
                let z = g.add(t, u)?;
                Ok(g.sum(z))
            },
            &x,
            GradCheck::default(),
        ).unwrap();
        prop_assert!(err < 1e-5, "err {err:e}");
    }
}
