//! A miniature multiscale video transformer.
//!
//! Clips are cut into non-overlapping 3D patches, then run through stages of
//! pooling-attention blocks. Each block computes
//!
//! ```text
//! X1    = MHPA(LN(X)) + Pool(X)
//! Block = MLP(LN(X1)) + X1
//! ```
//!
//! where MHPA pools queries, keys and values with depthwise 3D convolutions
//! and adds the pooled query back onto the attention output. `Pool(X)` on the
//! residual path reuses the query pooling kernel. The clip embedding is the
//! mean over all tokens of the last stage; there is no class token.

use serde::{Deserialize, Serialize};

use crate::autograd::{Conv3dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_std, Bound, Linear, Norm, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// One stage of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    /// Query stride of the first block of the stage.
    pub q_stride: [usize; 3],
    /// Key/value stride of every block of the stage.
    pub kv_stride: [usize; 3],
}

/// Backbone hyper-parameters. Per-stage settings are parallel arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Clip shape `(T, H, W, C)`.
    pub input: [usize; 4],
    pub patch: [usize; 3],
    pub pool_kernel: [usize; 3],
    pub mlp_ratio: usize,
    pub final_norm: bool,
    pub blocks: Vec<usize>,
    pub dims: Vec<usize>,
    pub heads: Vec<usize>,
    pub q_strides: Vec<[usize; 3]>,
    pub kv_strides: Vec<[usize; 3]>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input: [8, 16, 16, 1],
            patch: [2, 4, 4],
            pool_kernel: [3, 3, 3],
            mlp_ratio: 4,
            final_norm: true,
            blocks: vec![2, 2],
            dims: vec![16, 32],
            heads: vec![2, 4],
            q_strides: vec![[1, 1, 1], [2, 2, 2]],
            kv_strides: vec![[1, 2, 2], [1, 1, 1]],
        }
    }
}

impl BackboneConfig {
    /// A very small two-block configuration for gradient checks.
    pub fn tiny() -> Self {
        Self {
            input: [4, 4, 4, 1],
            patch: [2, 2, 2],
            pool_kernel: [3, 3, 3],
            mlp_ratio: 2,
            final_norm: true,
            blocks: vec![1, 1],
            dims: vec![8, 8],
            heads: vec![2, 2],
            q_strides: vec![[1, 1, 1], [1, 2, 2]],
            kv_strides: vec![[1, 2, 2], [1, 1, 1]],
        }
    }

    pub fn stages(&self) -> Result<Vec<StageConfig>> {
        let n = self.blocks.len();
        if n == 0 {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if [
            self.dims.len(),
            self.heads.len(),
            self.q_strides.len(),
            self.kv_strides.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(Error::Config(format!(
                "backbone stage arrays disagree in length: blocks {n}, dims {}, heads {}, q_strides {}, kv_strides {}",
                self.dims.len(),
                self.heads.len(),
                self.q_strides.len(),
                self.kv_strides.len()
            )));
        }
        Ok((0..n)
            .map(|i| StageConfig {
                blocks: self.blocks[i],
                dim: self.dims[i],
                heads: self.heads[i],
                q_stride: self.q_strides[i],
                kv_stride: self.kv_strides[i],
            })
            .collect())
    }

    /// Embedding width `d` of the final stage.
    pub fn embed_dim(&self) -> usize {
        self.dims.last().copied().unwrap_or(0)
    }

    pub fn token_grid(&self) -> [usize; 3] {
        [
            self.input[0] / self.patch[0].max(1),
            self.input[1] / self.patch[1].max(1),
            self.input[2] / self.patch[2].max(1),
        ]
    }

    /// Per-block layout, checking every stride and head constraint.
    pub fn plan(&self) -> Result<Vec<BlockPlan>> {
        let stages = self.stages()?;
        for a in 0..3 {
            if self.patch[a] == 0 || !self.input[a].is_multiple_of(self.patch[a]) {
                return Err(Error::Config(format!(
                    "clip extent {:?} not divisible by patch {:?}",
                    &self.input[..3],
                    self.patch
                )));
            }
            if self.pool_kernel[a].is_multiple_of(2) {
                return Err(Error::Config("pool kernel extents must be odd".into()));
            }
        }
        if self.input[3] == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("channels and mlp_ratio must be >= 1".into()));
        }
        let mut grid = self.token_grid();
        let mut plans = Vec::new();
        for (si, st) in stages.iter().enumerate() {
            if st.blocks == 0 || st.heads == 0 || st.dim % st.heads != 0 {
                return Err(Error::Config(format!(
                    "stage {si}: dim {} must be a positive multiple of heads {} with >= 1 block",
                    st.dim, st.heads
                )));
            }
            for bi in 0..st.blocks {
                let q_stride = if bi == 0 { st.q_stride } else { [1, 1, 1] };
                for a in 0..3 {
                    for (what, s) in [("query", q_stride[a]), ("key/value", st.kv_stride[a])] {
                        if s == 0 || !grid[a].is_multiple_of(s) {
                            return Err(Error::Config(format!(
                                "stage {si} block {bi}: {what} stride {s} does not divide grid extent {} (grid {grid:?})",
                                grid[a]
                            )));
                        }
                    }
                }
                let last_of_stage = bi + 1 == st.blocks;
                let dim_out = match stages.get(si + 1) {
                    Some(next) if last_of_stage => next.dim,
                    _ => st.dim,
                };
                let out_grid = [grid[0] / q_stride[0], grid[1] / q_stride[1], grid[2] / q_stride[2]];
                plans.push(BlockPlan {
                    stage: si,
                    block: bi,
                    dim_in: st.dim,
                    dim_out,
                    heads: st.heads,
                    q_stride,
                    kv_stride: st.kv_stride,
                    in_grid: grid,
                    out_grid,
                });
                grid = out_grid;
            }
        }
        Ok(plans)
    }
}

/// Resolved layout of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub stage: usize,
    pub block: usize,
    pub dim_in: usize,
    pub dim_out: usize,
    pub heads: usize,
    pub q_stride: [usize; 3],
    pub kv_stride: [usize; 3],
    pub in_grid: [usize; 3],
    pub out_grid: [usize; 3],
}

/// Token activations `(B, L, dim)` and their `(T', H', W')` factorization.
#[derive(Clone, Copy, Debug)]
pub struct Activation {
    pub var: Var,
    pub grid: [usize; 3],
}

impl Activation {
    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }
}

/// Parameters of a pooling-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub pool_q: ParamId,
    pub pool_k: ParamId,
    pub pool_v: ParamId,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub plan: BlockPlan,
    pub norm1: Norm,
    pub attn: AttentionParams,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub skip: Option<Linear>,
}

/// Depthwise kernel `[kt,kh,kw,1,C]` with a single 1 at the centre tap.
pub fn identity_pool_kernel<F: Real>(kernel: [usize; 3], channels: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(&[kernel[0], kernel[1], kernel[2], 1, channels]);
    let centre = ((kernel[0] / 2) * kernel[1] + kernel[1] / 2) * kernel[2] + kernel[2] / 2;
    for c in 0..channels {
        t.data_mut()[centre * channels + c] = F::one();
    }
    t
}

impl AttentionParams {
    fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        heads: usize,
        kernel: [usize; 3],
    ) -> Self {
        let q = Linear::new(store, rng, &format!("{name}.q"), dim, dim, true);
        let k = Linear::new(store, rng, &format!("{name}.k"), dim, dim, true);
        let v = Linear::new(store, rng, &format!("{name}.v"), dim, dim, true);
        let proj = Linear::new(store, rng, &format!("{name}.proj"), dim, dim, true);
        let mut pool =
            |which: &str| store.add(format!("{name}.pool_{which}"), identity_pool_kernel(kernel, dim), false);
        let pool_q = pool("q");
        let pool_k = pool("k");
        let pool_v = pool("v");
        Self {
            q,
            k,
            v,
            proj,
            pool_q,
            pool_k,
            pool_v,
            heads,
        }
    }
}

/// Depthwise strided pooling of token activations.
pub fn pool_tokens<F: Real>(g: &mut Graph<F>, x: Activation, kernel: Var, stride: [usize; 3]) -> Result<Activation> {
    let s = g.shape(x.var).to_vec();
    let (b, c) = (s[0], s[2]);
    let ks = g.shape(kernel).to_vec();
    let padding = [ks[0] / 2, ks[1] / 2, ks[2] / 2];
    let vol = g.reshape(x.var, &[b, x.grid[0], x.grid[1], x.grid[2], c])?;
    let pooled = g.conv3d(vol, kernel, Conv3dSpec::depthwise(stride, padding, c))?;
    let ps = g.shape(pooled).to_vec();
    let grid = [ps[1], ps[2], ps[3]];
    let var = g.reshape(pooled, &[b, grid.iter().product(), c])?;
    Ok(Activation { var, grid })
}

/// `[B, L, h·dh]` → `[B, h, L, dh]`, or `[B, h, dh, L]` when `transposed`.
fn split_heads<F: Real>(g: &mut Graph<F>, x: Var, heads: usize, transposed: bool) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    if transposed {
        g.permute(r, &[0, 2, 3, 1])
    } else {
        g.permute(r, &[0, 2, 1, 3])
    }
}

/// Multi-head pooling attention on (already normalized) tokens `x`.
pub fn pooled_attention<F: Real>(
    g: &mut Graph<F>,
    p: &Bound,
    attn: &AttentionParams,
    x: Activation,
    q_stride: [usize; 3],
    kv_stride: [usize; 3],
) -> Result<Activation> {
    let s = g.shape(x.var).to_vec();
    let (b, dim) = (s[0], s[2]);
    if dim % attn.heads != 0 {
        return Err(Error::Config(format!(
            "dim {dim} not divisible by {} heads",
            attn.heads
        )));
    }
    for a in 0..3 {
        if q_stride[a] == 0
            || kv_stride[a] == 0
            || !x.grid[a].is_multiple_of(q_stride[a])
            || !x.grid[a].is_multiple_of(kv_stride[a])
        {
            return Err(Error::Config(format!(
                "strides {q_stride:?}/{kv_stride:?} incompatible with grid {:?}",
                x.grid
            )));
        }
    }
    let dh = dim / attn.heads;
    let q = attn.q.forward(g, p, x.var)?;
    let k = attn.k.forward(g, p, x.var)?;
    let v = attn.v.forward(g, p, x.var)?;
    let q = pool_tokens(g, Activation { var: q, grid: x.grid }, p[attn.pool_q], q_stride)?;
    let k = pool_tokens(g, Activation { var: k, grid: x.grid }, p[attn.pool_k], kv_stride)?;
    let v = pool_tokens(g, Activation { var: v, grid: x.grid }, p[attn.pool_v], kv_stride)?;

    let qh = split_heads(g, q.var, attn.heads, false)?;
    let kt = split_heads(g, k.var, attn.heads, true)?;
    let vh = split_heads(g, v.var, attn.heads, false)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, F::one() / F::of(dh as f64).sqrt());
    let weights = g.softmax(scores, 3)?;
    let mixed = g.matmul(weights, vh)?;
    let mixed = g.add(mixed, qh)?;
    let merged = g.permute(mixed, &[0, 2, 1, 3])?;
    let merged = g.reshape(merged, &[b, q.tokens(), dim])?;
    let out = attn.proj.forward(g, p, merged)?;
    Ok(Activation { var: out, grid: q.grid })
}

impl BlockParams {
    fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        plan: BlockPlan,
        mlp_ratio: usize,
        kernel: [usize; 3],
    ) -> Self {
        let name = format!("stage{}.block{}", plan.stage, plan.block);
        let hidden = plan.dim_in * mlp_ratio;
        Self {
            plan,
            norm1: Norm::new(store, &format!("{name}.norm1"), plan.dim_in),
            attn: AttentionParams::new(store, rng, &format!("{name}.attn"), plan.dim_in, plan.heads, kernel),
            norm2: Norm::new(store, &format!("{name}.norm2"), plan.dim_in),
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), plan.dim_in, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, plan.dim_out, true),
            skip: (plan.dim_in != plan.dim_out)
                .then(|| Linear::new(store, rng, &format!("{name}.mlp.skip"), plan.dim_in, plan.dim_out, true)),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Activation) -> Result<Activation> {
        let normed = self.norm1.forward(g, p, x.var)?;
        let attn = pooled_attention(
            g,
            p,
            &self.attn,
            Activation {
                var: normed,
                grid: x.grid,
            },
            self.plan.q_stride,
            self.plan.kv_stride,
        )?;
        let residual = pool_tokens(g, x, p[self.attn.pool_q], self.plan.q_stride)?;
        let x1 = g.add(attn.var, residual.var)?;
        let h = self.norm2.forward(g, p, x1)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h)?;
        let skip = match &self.skip {
            Some(lin) => lin.forward(g, p, x1)?,
            None => x1,
        };
        Ok(Activation {
            var: g.add(h, skip)?,
            grid: attn.grid,
        })
    }
}

/// Backbone parameters registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_kernel: ParamId,
    pub patch_bias: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Option<Norm>,
}

impl Backbone {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut Rng, config: &BackboneConfig) -> Result<Self> {
        let plans = config.plan()?;
        let dim0 = config.dims[0];
        let [pt, ph, pw] = config.patch;
        let patch_kernel = store.add(
            "patch_embed.weight",
            rng.trunc_normal_tensor(
                &[pt, ph, pw, config.input[3], dim0],
                init_std(pt * ph * pw * config.input[3]),
            ),
            true,
        );
        let patch_bias = store.add("patch_embed.bias", Tensor::zeros(&[dim0]), false);
        let tokens: usize = config.token_grid().iter().product();
        let pos_embed = store.add("pos_embed", rng.trunc_normal_tensor(&[tokens, dim0], 0.02), false);
        let blocks = plans
            .into_iter()
            .map(|plan| BlockParams::new(store, rng, plan, config.mlp_ratio, config.pool_kernel))
            .collect();
        let final_norm = config.final_norm.then(|| Norm::new(store, "norm", config.embed_dim()));
        Ok(Self {
            config: config.clone(),
            patch_kernel,
            patch_bias,
            pos_embed,
            blocks,
            final_norm,
        })
    }

    fn check_clip(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1..] != self.config.input {
            return Err(Error::Config(format!(
                "clip batch {shape:?} does not match configured input (B, {:?})",
                self.config.input
            )));
        }
        Ok(())
    }

    /// Non-overlapping patch projection plus absolute positional embedding.
    pub fn patch_embed<F: Real>(&self, g: &mut Graph<F>, p: &Bound, clips: Var) -> Result<Activation> {
        self.check_clip(g.shape(clips))?;
        let b = g.shape(clips)[0];
        let patches = g.conv3d(
            clips,
            p[self.patch_kernel],
            Conv3dSpec::new(self.config.patch, [0, 0, 0]),
        )?;
        let grid = self.config.token_grid();
        let dim0 = self.config.dims[0];
        let tokens = g.reshape(patches, &[b, grid.iter().product(), dim0])?;
        let tokens = g.add_broadcast(tokens, p[self.patch_bias])?;
        let tokens = g.add_broadcast(tokens, p[self.pos_embed])?;
        Ok(Activation { var: tokens, grid })
    }

    /// Token activations after the last block (before the final norm).
    pub fn features<F: Real>(&self, g: &mut Graph<F>, p: &Bound, clips: Var) -> Result<Activation> {
        let mut x = self.patch_embed(g, p, clips)?;
        for block in &self.blocks {
            x = block.forward(g, p, x)?;
        }
        Ok(x)
    }

    /// Clip embeddings `Z ∈ R^{B×d}`: mean over the last stage's tokens.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, clips: Var) -> Result<Var> {
        let x = self.features(g, p, clips)?;
        let x = match &self.final_norm {
            Some(n) => n.forward(g, p, x.var)?,
            None => x.var,
        };
        g.mean(x, &[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_bookkeeping() {
        let cfg = BackboneConfig::default();
        let plans = cfg.plan().unwrap();
        assert_eq!(plans.len(), 4);
        assert_eq!(cfg.token_grid(), [4, 4, 4]);
        assert_eq!(plans[1].dim_out, 32);
        assert_eq!(plans[2].in_grid, [4, 4, 4]);
        assert_eq!(plans[2].out_grid, [2, 2, 2]);
        assert_eq!(cfg.embed_dim(), 32);
    }

    #[test]
    fn rejects_bad_strides_and_heads() {
        let mut cfg = BackboneConfig::default();
        cfg.q_strides[1] = [3, 1, 1];
        assert!(matches!(cfg.plan(), Err(Error::Config(_))));
        let mut cfg = BackboneConfig::default();
        cfg.heads[0] = 3;
        assert!(matches!(cfg.plan(), Err(Error::Config(_))));
        let cfg = BackboneConfig {
            patch: [3, 4, 4],
            ..Default::default()
        };
        assert!(matches!(cfg.plan(), Err(Error::Config(_))));
    }

    #[test]
    fn patch_embed_token_count() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, &mut Rng::new(0, 0), &cfg).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let clips = g.constant(Tensor::zeros(&[1, 8, 16, 16, 1]));
        let act = bb.patch_embed(&mut g, &p, clips).unwrap();
        assert_eq!(g.shape(act.var), &[1, 64, 16]);
        assert_eq!(act.tokens(), 64);
    }

    #[test]
    fn zero_clip_zero_pos_embed_gives_zero_tokens() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, &mut Rng::new(0, 0), &cfg).unwrap();
        *store.get_mut(bb.pos_embed) = Tensor::zeros(&[64, 16]);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let clips = g.constant(Tensor::zeros(&[2, 8, 16, 16, 1]));
        let act = bb.patch_embed(&mut g, &p, clips).unwrap();
        assert!(g.value(act.var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clip_shape_must_match() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, &mut Rng::new(0, 0), &cfg).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let clips = g.constant(Tensor::zeros(&[1, 8, 16, 12, 1]));
        assert!(matches!(bb.forward(&mut g, &p, clips), Err(Error::Config(_))));
    }
}
