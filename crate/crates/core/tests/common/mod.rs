//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use multitrain::autograd::Graph;
use multitrain::mvit::{identity_pool_kernel, pooled_attention, Activation, AttentionParams};
use multitrain::params::{Linear, ParamStore};
use multitrain::rng::Rng;
use multitrain::tensor::Tensor;

pub fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.normal()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Sliding-window convolution over `x: [B,T,H,W,Cin]` with
/// `w: [kt,kh,kw,Cin/groups,Cout]`, written as plain nested loops.
pub fn naive_conv3d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: [usize; 3],
    pad: [usize; 3],
    groups: usize,
) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let (b, cin, cout) = (xs[0], xs[4], ws[4]);
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let out: Vec<usize> = (0..3)
        .map(|a| (xs[1 + a] + 2 * pad[a] - ws[a]) / stride[a] + 1)
        .collect();
    let xi = |n: usize, t: usize, h: usize, ww: usize, c: usize| (((n * xs[1] + t) * xs[2] + h) * xs[3] + ww) * cin + c;
    let wi =
        |t: usize, h: usize, ww: usize, ci: usize, co: usize| (((t * ws[1] + h) * ws[2] + ww) * ws[3] + ci) * cout + co;
    let mut y = vec![0.0; b * out[0] * out[1] * out[2] * cout];
    let mut idx = 0;
    for n in 0..b {
        for ot in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    for co in 0..cout {
                        let grp = co / cout_g;
                        let mut acc = 0.0;
                        for kt in 0..ws[0] {
                            for kh in 0..ws[1] {
                                for kw in 0..ws[2] {
                                    let t = (ot * stride[0] + kt) as isize - pad[0] as isize;
                                    let h = (oh * stride[1] + kh) as isize - pad[1] as isize;
                                    let ww = (ow * stride[2] + kw) as isize - pad[2] as isize;
                                    if t < 0 || h < 0 || ww < 0 {
                                        continue;
                                    }
                                    let (t, h, ww) = (t as usize, h as usize, ww as usize);
                                    if t >= xs[1] || h >= xs[2] || ww >= xs[3] {
                                        continue;
                                    }
                                    for ci in 0..cin_g {
                                        let c = grp * cin_g + ci;
                                        acc += x.data()[xi(n, t, h, ww, c)] * w.data()[wi(kt, kh, kw, ci, co)];
                                    }
                                }
                            }
                        }
                        y[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, out[0], out[1], out[2], cout], y).unwrap()
}

/// `x·W + b` for row-major `x: [n, i]`, `W: [i, o]`.
pub fn affine(x: &[f64], n: usize, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            let mut acc = b.data()[c];
            for k in 0..i {
                acc += x[r * i + k] * w.data()[k * o + c];
            }
            y[r * o + c] = acc;
        }
    }
    y
}

pub struct AttentionWeights {
    pub q: (Tensor<f64>, Tensor<f64>),
    pub k: (Tensor<f64>, Tensor<f64>),
    pub v: (Tensor<f64>, Tensor<f64>),
    pub proj: (Tensor<f64>, Tensor<f64>),
}

/// O(L²) multi-head attention on one item `x: [L, d]`, plus the query
/// itself added to each head's output before the output projection.
pub fn naive_attention(x: &[f64], l: usize, heads: usize, wts: &AttentionWeights) -> Vec<f64> {
    let d = wts.q.0.shape()[0];
    let dh = d / heads;
    let q = affine(x, l, &wts.q.0, &wts.q.1);
    let k = affine(x, l, &wts.k.0, &wts.k.1);
    let v = affine(x, l, &wts.v.0, &wts.v.1);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut merged = vec![0.0; l * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..dh).map(|c| q[i * d + off + c] * k[j * d + off + c]).sum::<f64>() * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                let mut acc = q[i * d + off + c];
                for j in 0..l {
                    acc += e[j] / z * v[j * d + off + c];
                }
                merged[i * d + off + c] = acc;
            }
        }
    }
    affine(&merged, l, &wts.proj.0, &wts.proj.1)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn randomize(store: &mut ParamStore<f64>, lin: &Linear, rng: &mut Rng) -> (Tensor<f64>, Tensor<f64>) {
    let w = random(rng, &[lin.input, lin.output]);
    let b = random(rng, &[lin.output]);
    *store.get_mut(lin.weight) = w.clone();
    *store.get_mut(lin.bias.unwrap()) = b.clone();
    (w, b)
}

/// Unit-stride pooled attention with identity pooling on random weights
/// and inputs; returns the max deviation from [`naive_attention`].
pub fn attention_instance(seed: u64, grid: [usize; 3], dim: usize, heads: usize, batch: usize) -> f64 {
    let mut rng = Rng::new(seed, 40);
    let mut store = ParamStore::<f64>::new();
    let mk = |store: &mut ParamStore<f64>, rng: &mut Rng, n: &str| Linear::new(store, rng, n, dim, dim, true);
    let (q, k, v, proj) = (
        mk(&mut store, &mut rng, "q"),
        mk(&mut store, &mut rng, "k"),
        mk(&mut store, &mut rng, "v"),
        mk(&mut store, &mut rng, "proj"),
    );
    let wts = AttentionWeights {
        q: randomize(&mut store, &q, &mut rng),
        k: randomize(&mut store, &k, &mut rng),
        v: randomize(&mut store, &v, &mut rng),
        proj: randomize(&mut store, &proj, &mut rng),
    };
    let pool = |store: &mut ParamStore<f64>, n: &str| store.add(n, identity_pool_kernel([3, 3, 3], dim), false);
    let attn = AttentionParams {
        q,
        k,
        v,
        proj,
        pool_q: pool(&mut store, "pq"),
        pool_k: pool(&mut store, "pk"),
        pool_v: pool(&mut store, "pv"),
        heads,
    };
    let l: usize = grid.iter().product();
    let x = random(&mut rng, &[batch, l, dim]);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let out = pooled_attention(&mut g, &p, &attn, Activation { var: xv, grid }, [1, 1, 1], [1, 1, 1]).unwrap();
    assert_eq!(out.grid, grid);
    let got = g.value(out.var).data();
    let mut err: f64 = 0.0;
    for b in 0..batch {
        let item = &x.data()[b * l * dim..(b + 1) * l * dim];
        let expect = naive_attention(item, l, heads, &wts);
        err = err.max(max_abs_diff(&got[b * l * dim..(b + 1) * l * dim], &expect));
    }
    err
}
