mod common;

use common::{attention_instance, max_abs_diff, naive_conv3d, random};
use multitrain::autograd::Graph;
use multitrain::mvit::{pooled_attention, Activation, Backbone, BackboneConfig};
use multitrain::params::ParamStore;
use multitrain::rng::Rng;
use multitrain::tensor::Tensor;

#[test]
fn unit_stride_attention_matches_naive_oracle() {
    let shapes = [
        ([2, 2, 2], 8, 2),
        ([1, 3, 2], 6, 3),
        ([2, 2, 3], 8, 4),
        ([3, 1, 2], 4, 1),
    ];
    for i in 0..20 {
        let (grid, dim, heads) = shapes[i % shapes.len()];
        let err = attention_instance(i as u64, grid, dim, heads, 1 + i % 2);
        assert!(err < 1e-5, "instance {i}: {err}");
    }
}

#[test]
fn query_stride_halves_grid() {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f32>::new();
    let bb = Backbone::new(&mut store, &mut Rng::new(0, 0), &cfg).unwrap();
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(Tensor::zeros(&[1, 64, 16]));
    let attn = &bb.blocks[0].attn;
    let out = pooled_attention(
        &mut g,
        &p,
        attn,
        Activation {
            var: x,
            grid: [4, 4, 4],
        },
        [2, 2, 2],
        [1, 1, 1],
    )
    .unwrap();
    assert_eq!(out.grid, [2, 2, 2]);
    assert_eq!(g.shape(out.var), [1, 8, 16]);
}

fn tiny_f64(seed: u64) -> (ParamStore<f64>, Backbone) {
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &mut Rng::new(seed, 0), &BackboneConfig::tiny()).unwrap();
    (store, bb)
}

#[test]
fn block_with_zero_projections_is_identity() {
    let (mut store, bb) = tiny_f64(1);
    let block = bb.blocks[0];
    assert_eq!(block.plan.q_stride, [1, 1, 1]);
    for lin in [
        block.attn.q,
        block.attn.k,
        block.attn.v,
        block.attn.proj,
        block.fc1,
        block.fc2,
    ] {
        *store.get_mut(lin.weight) = Tensor::zeros(&[lin.input, lin.output]);
        *store.get_mut(lin.bias.unwrap()) = Tensor::zeros(&[lin.output]);
    }
    let grid = block.plan.in_grid;
    let l: usize = grid.iter().product();
    let x = random(&mut Rng::new(2, 0), &[2, l, block.plan.dim_in]);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let y = block.forward(&mut g, &p, Activation { var: xv, grid }).unwrap();
    assert_eq!(g.value(y.var), &x);
}

#[test]
fn strided_block_halves_pooled_axes() {
    let (store, bb) = tiny_f64(3);
    let block = bb.blocks[1];
    assert_eq!(block.plan.q_stride, [1, 2, 2]);
    let grid = block.plan.in_grid;
    let l: usize = grid.iter().product();
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(random(&mut Rng::new(4, 0), &[1, l, block.plan.dim_in]));
    let y = block.forward(&mut g, &p, Activation { var: x, grid }).unwrap();
    assert_eq!(y.grid, [grid[0], grid[1] / 2, grid[2] / 2]);
    assert_eq!(g.shape(y.var), [1, y.tokens(), block.plan.dim_out]);
}

fn clips(seed: u64, b: usize, cfg: &BackboneConfig) -> Tensor<f64> {
    let mut shape = vec![b];
    shape.extend(cfg.input);
    let mut rng = Rng::new(seed, 9);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform()).collect()).unwrap()
}

fn embed(store: &ParamStore<f64>, bb: &Backbone, x: Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let xv = g.constant(x);
    let z = bb.forward(&mut g, &p, xv).unwrap();
    g.value(z).clone()
}

#[test]
fn embeddings_have_batch_by_dim_shape() {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &mut Rng::new(5, 0), &cfg).unwrap();
    let z = embed(&store, &bb, clips(0, 2, &cfg));
    assert_eq!(z.shape(), [2, cfg.embed_dim()]);
}

#[test]
fn batch_permutation_permutes_rows() {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &mut Rng::new(6, 0), &cfg).unwrap();
    let x = clips(1, 3, &cfg);
    let per = x.len() / 3;
    let perm = [2, 0, 1];
    let mut shuffled = Vec::with_capacity(x.len());
    for &i in &perm {
        shuffled.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let xp = Tensor::new(x.shape().to_vec(), shuffled).unwrap();
    let z = embed(&store, &bb, x);
    let zp = embed(&store, &bb, xp);
    let d = cfg.embed_dim();
    for (row, &i) in perm.iter().enumerate() {
        assert_eq!(&zp.data()[row * d..(row + 1) * d], &z.data()[i * d..(i + 1) * d]);
    }
}

#[test]
fn identical_clips_give_identical_rows() {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &mut Rng::new(7, 0), &cfg).unwrap();
    let one = clips(2, 1, &cfg);
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let mut shape = one.shape().to_vec();
    shape[0] = 2;
    let z = embed(&store, &bb, Tensor::new(shape, data).unwrap());
    let d = cfg.embed_dim();
    assert_eq!(&z.data()[..d], &z.data()[d..]);
}

#[test]
fn patch_embed_matches_conv_oracle() {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &mut Rng::new(8, 0), &cfg).unwrap();
    let mut rng = Rng::new(8, 1);
    *store.get_mut(bb.patch_bias) = random(&mut rng, &[cfg.dims[0]]);
    let x = clips(3, 2, &cfg);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let act = bb.patch_embed(&mut g, &p, xv).unwrap();
    let conv = naive_conv3d(&x, store.get(bb.patch_kernel), cfg.patch, [0, 0, 0], 1);
    let (bias, pos) = (store.get(bb.patch_bias), store.get(bb.pos_embed));
    let d = cfg.dims[0];
    let l = act.tokens();
    let expect: Vec<f64> = conv
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + bias.data()[i % d] + pos.data()[i % (l * d)])
        .collect();
    assert!(max_abs_diff(g.value(act.var).data(), &expect) < 1e-12);
}
