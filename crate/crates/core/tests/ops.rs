mod common;

use common::{max_abs_diff, naive_conv3d, random};
use multitrain::autograd::{Conv3dSpec, Graph};
use multitrain::losses::{total_loss, LossTerms};
use multitrain::rng::Rng;
use multitrain::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn conv3d_all_ones_block_sums() {
    let mut rng = Rng::new(3, 0);
    let x = random(&mut rng, &[1, 4, 8, 8, 1]);
    let k = Tensor::full(&[2, 2, 2, 1, 1], 1.0);
    let mut g: Graph<f64> = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(k);
    let y = g.conv3d(xv, kv, Conv3dSpec::new([2, 2, 2], [0, 0, 0])).unwrap();
    assert_eq!(g.shape(y), [1, 2, 4, 4, 1]);
    let at = |t: usize, h: usize, w: usize| x.data()[(t * 8 + h) * 8 + w];
    for t in 0..2 {
        for h in 0..4 {
            for w in 0..4 {
                let mut s = 0.0;
                for (dt, dh, dw) in (0..8).map(|i| (i >> 2, (i >> 1) & 1, i & 1)) {
                    s += at(2 * t + dt, 2 * h + dh, 2 * w + dw);
                }
                let got = g.value(y).data()[(t * 4 + h) * 4 + w];
                assert!((got - s).abs() < 1e-12, "{got} vs {s}");
            }
        }
    }
}

#[test]
fn conv3d_matches_sliding_window_oracle() {
    let mut rng = Rng::new(5, 1);
    // x shape, kernel, stride, pad, cout, groups
    type Case = ([usize; 5], [usize; 3], [usize; 3], [usize; 3], usize, usize);
    let cases: &[Case] = &[
        ([2, 6, 8, 8, 3], [3, 3, 3], [1, 1, 1], [1, 1, 1], 4, 1),
        ([2, 6, 8, 8, 3], [2, 4, 4], [2, 4, 4], [0, 0, 0], 5, 1),
        ([1, 6, 8, 8, 3], [3, 3, 3], [2, 2, 2], [1, 1, 1], 3, 3),
        ([2, 5, 7, 6, 2], [2, 3, 2], [1, 2, 3], [0, 1, 1], 4, 2),
        ([1, 3, 4, 4, 2], [2, 2, 2], [1, 1, 1], [0, 0, 0], 3, 1),
    ];
    for &(xs, ks, stride, pad, cout, groups) in cases {
        let x = random(&mut rng, &xs);
        let w = random(&mut rng, &[ks[0], ks[1], ks[2], xs[4] / groups, cout]);
        let expect = naive_conv3d(&x, &w, stride, pad, groups);
        let mut g: Graph<f64> = Graph::new();
        let xv = g.constant(x);
        let wv = g.constant(w);
        let spec = Conv3dSpec {
            stride,
            padding: pad,
            groups,
        };
        let y = g.conv3d(xv, wv, spec).unwrap();
        assert_eq!(g.shape(y), expect.shape());
        let err = max_abs_diff(g.value(y).data(), expect.data());
        assert!(err < 1e-6, "{xs:?} {ks:?}: {err}");
    }
}

#[test]
fn conv3d_unit_kernel_is_identity() {
    let mut rng = Rng::new(8, 0);
    let x = random(&mut rng, &[1, 2, 3, 3, 1]);
    let mut g: Graph<f64> = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
    let y = g.conv3d(xv, kv, Conv3dSpec::new([1, 1, 1], [0, 0, 0])).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn mean_and_its_gradient() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.param(Tensor::from_f64(vec![2, 2], &[1.0, 3.0, 5.0, 7.0]).unwrap());
    let m = g.mean(x, &[0, 1]).unwrap();
    assert_eq!(g.item(m), 4.0);
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);
}

#[test]
fn gelu_at_three() {
    assert!((multitrain::autograd::gelu(3.0f64) - 2.99595).abs() < 1e-5);
}

fn row_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, len)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(rows in 1usize..4, data in row_vec(24), shift in -50.0f64..50.0) {
        let n = 24 / rows.max(1);
        let data = &data[..rows * n];
        let x = Tensor::from_f64(vec![rows, n], data).unwrap();
        let shifted = Tensor::from_f64(vec![rows, n], &data.iter().map(|v| v + shift).collect::<Vec<_>>()).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(x);
        let b = g.constant(shifted);
        let sa = g.softmax(a, 1).unwrap();
        let sb = g.softmax(b, 1).unwrap();
        for r in 0..rows {
            let s: f64 = g.value(sa).data()[r * n..(r + 1) * n].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        prop_assert!(max_abs_diff(g.value(sa).data(), g.value(sb).data()) < 1e-6);
    }

    #[test]
    fn layer_norm_standardizes(data in row_vec(12), rows in 1usize..4) {
        let d = 12 / rows;
        let data = &data[..rows * d];
        prop_assume!((0..rows).all(|r| {
            let row = &data[r * d..(r + 1) * d];
            row.iter().any(|v| (v - row[0]).abs() > 1e-3)
        }));
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::from_f64(vec![rows, d], data).unwrap());
        let gamma = g.constant(Tensor::full(&[d], 1.0));
        let beta = g.constant(Tensor::zeros(&[d]));
        let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
        for r in 0..rows {
            let row = &g.value(y).data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            prop_assert!(mu.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn sigma_gradient_closed_form(l in 0.01f64..20.0, sigma in 0.05f64..10.0) {
        let mut g: Graph<f64> = Graph::new();
        let lk = g.constant(Tensor::scalar(l));
        let ls = g.param(Tensor::from_f64(vec![1], &[sigma.ln()]).unwrap());
        let (t, _) = total_loss(&mut g, &LossTerms { variance: None, covariance: None, dataset: &[Some(lk)], counts: &[1] }, ls, false).unwrap();
        g.backward(t).unwrap();
        // autodiff differentiates w.r.t. log σ; divide by σ for ∂/∂σ
        let d_sigma = g.grad(ls).unwrap()[0] / sigma;
        let expect = -l / sigma.powi(3) + 1.0 / sigma;
        prop_assert!((d_sigma - expect).abs() < 1e-6 * expect.abs().max(1.0), "{d_sigma} vs {expect}");
    }
}

#[test]
fn sigma_gradient_vanishes_at_sqrt_l() {
    for l in [0.5, 1.0, 4.0, 9.0] {
        let mut g: Graph<f64> = Graph::new();
        let lk = g.constant(Tensor::scalar(l));
        let ls = g.param(Tensor::from_f64(vec![1], &[0.5 * f64::ln(l)]).unwrap());
        let (t, _) = total_loss(
            &mut g,
            &LossTerms {
                variance: None,
                covariance: None,
                dataset: &[Some(lk)],
                counts: &[1],
            },
            ls,
            false,
        )
        .unwrap();
        g.backward(t).unwrap();
        assert!(g.grad(ls).unwrap()[0].abs() < 1e-12);
    }
}
