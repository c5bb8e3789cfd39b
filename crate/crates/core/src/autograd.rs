//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Graph`] records every op in creation order, which is a valid
//! topological order. [`Graph::backward`] sweeps it once in reverse and then
//! refuses to run again.

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{strides, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride, padding and grouping of a 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl Conv3dSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn depthwise(stride: [usize; 3], padding: [usize; 3], channels: usize) -> Self {
        Self {
            stride,
            padding,
            groups: channels,
        }
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b`'s shape is a suffix of `a`'s shape.
    AddBroadcast(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Conv3d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Sum {
        x: Var,
        map: Vec<usize>,
        scale: F,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Pick {
        x: Var,
        labels: Vec<usize>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A single-use tape of tensor operations.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    consumed: bool,
    flops: u64,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            flops: 0,
        }
    }

    /// Floating point operations executed by forward ops so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is collected by `backward`.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: F) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> F {
        self.nodes[v.0].value.item()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Same value as `x`, cut from the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(format!(
                "{name}: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.flops += self.value(a).len() as u64;
        t
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias add).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err(format!("add_broadcast: {sb:?} is not a suffix of {sa:?}")));
        }
        let inner = tb.len();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (v, &bv) in chunk.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        let t = Tensor::new(sa.to_vec(), data)?;
        self.flops += t.len() as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.flops += t.len() as u64;
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v + c).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.flops += t.len() as u64;
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -F::one())
    }

    /// Batched matrix product. `a` is `[.., M, K]`; `b` is either `[K, N]`
    /// (shared across the batch) or `[.., K, N]` with the same leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let fail = || dim_err(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(fail());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(fail());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if !shared_b && lead_a != lead_b {
            return Err(fail());
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![F::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if shared_b {
            kernels::gemm_nn(batch * m, k, n, da, db, &mut out);
        } else {
            for bi in 0..batch {
                kernels::gemm_nn(
                    m,
                    k,
                    n,
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        self.flops += 2 * (batch * m * k * n) as u64;
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(dim_err(format!("permute: {perm:?} invalid for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value(x).data(), &shape, perm);
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(dim_err("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Channels-last 3D convolution. `x` is `[B,T,H,W,Cin]`, `w` is
    /// `[kt,kh,kw,Cin/groups,Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, spec: Conv3dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 {
            return Err(dim_err(format!(
                "conv3d: expected rank-5 input and kernel, got {sx:?} and {sw:?}"
            )));
        }
        let groups = spec.groups.max(1);
        let (cin, cout) = (sx[4], sw[4]);
        if cin % groups != 0 || cout % groups != 0 || sw[3] != cin / groups {
            return Err(dim_err(format!(
                "conv3d: kernel {sw:?} incompatible with {cin} input channels in {groups} groups"
            )));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = sx[1 + a] + 2 * spec.padding[a];
            if spec.stride[a] == 0 {
                return Err(Error::Config("conv3d: stride must be >= 1".into()));
            }
            if sw[a] > padded {
                return Err(Error::Config(format!(
                    "conv3d: kernel {:?} larger than padded input {:?}",
                    &sw[..3],
                    &sx[1..4]
                )));
            }
            output[a] = (padded - sw[a]) / spec.stride[a] + 1;
        }
        let geom = ConvGeometry {
            batch: sx[0],
            input: [sx[1], sx[2], sx[3]],
            output,
            kernel: [sw[0], sw[1], sw[2]],
            stride: spec.stride,
            padding: spec.padding,
            cin,
            cout,
            groups,
        };
        let mut out = vec![F::zero(); geom.batch * output.iter().product::<usize>() * cout];
        kernels::conv3d_forward(&geom, self.value(x).data(), self.value(w).data(), &mut out);
        self.flops += 2 * geom.macs();
        let t = Tensor::new(vec![sx[0], output[0], output[1], output[2], cout], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::Conv3d { x, w, geom }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| dim_err("layer_norm on a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{d}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / d;
        let mut xhat = vec![F::zero(); xd.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xd.len()];
        let inv_d = F::one() / F::of(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.flops += 8 * xd.len() as u64;
        let t = Tensor::new(sx, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    fn axis_split(&self, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(dim_err(format!("axis {axis} out of range for {s:?}")));
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        Ok((outer, s[axis], inner))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.axis_split(x, axis)?;
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..n {
                    mx = mx.max(xd[at(j)]);
                }
                let mut z = F::zero();
                for j in 0..n {
                    let e = (xd[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        self.flops += 5 * xd.len() as u64;
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, outer, n, inner }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.axis_split(x, axis)?;
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..n {
                    mx = mx.max(xd[at(j)]);
                }
                let mut z = F::zero();
                for j in 0..n {
                    z += (xd[at(j)] - mx).exp();
                }
                let lse = mx + z.ln();
                for j in 0..n {
                    out[at(j)] = xd[at(j)] - lse;
                }
            }
        }
        self.flops += 5 * xd.len() as u64;
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSoftmax { x, outer, n, inner }, rg))
    }

    fn unary(&mut self, x: Var, cost: u64, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.flops += cost * t.len() as u64;
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    /// Exact-erf GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, 8, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, 1, |v| v.max(F::zero()), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, 4, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, 4, |v| v.ln(), Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, 4, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, 1, |v| v * v, Op::Square(x))
    }

    fn reduce(&mut self, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut keep = vec![true; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(dim_err(format!("reduce: axis {a} out of range for {shape:?}")));
            }
            if !keep[a] {
                return Err(dim_err(format!("reduce: axis {a} listed twice")));
            }
            keep[a] = false;
        }
        let out_shape: Vec<usize> = (0..shape.len()).filter(|&a| keep[a]).map(|a| shape[a]).collect();
        let extent: usize = axes.iter().map(|&a| shape[a]).product();
        if extent == 0 {
            return Err(dim_err("reduce over an empty extent"));
        }
        let out_strides = strides(&out_shape);
        // output stride contributed by each input axis (0 for reduced axes)
        let mut contrib = vec![0; shape.len()];
        let mut o = 0;
        for a in 0..shape.len() {
            if keep[a] {
                contrib[a] = out_strides[o];
                o += 1;
            }
        }
        let total: usize = shape.iter().product();
        let mut map = vec![0; total];
        let mut idx = vec![0; shape.len()];
        let mut off = 0;
        for m in map.iter_mut() {
            *m = off;
            for a in (0..shape.len()).rev() {
                idx[a] += 1;
                off += contrib[a];
                if idx[a] < shape[a] {
                    break;
                }
                off -= contrib[a] * idx[a];
                idx[a] = 0;
            }
        }
        let scale = if mean {
            F::one() / F::of(extent as f64)
        } else {
            F::one()
        };
        let n_out = out_shape.iter().product::<usize>();
        let mut out = vec![F::zero(); n_out];
        for (&v, &m) in self.value(x).data().iter().zip(&map) {
            out[m] += v;
        }
        if mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        self.flops += total as u64;
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Sum { x, map, scale }, rg))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, false).expect("valid axes")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, true).expect("valid axes")
    }

    /// Gathers rows (indices along axis 0).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || rows.is_empty() {
            return Err(dim_err("select_rows needs rank >= 1 and at least one row"));
        }
        let width: usize = shape[1..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= shape[0] {
                return Err(dim_err(format!("select_rows: row {r} out of {}", shape[0])));
            }
            out.extend_from_slice(&xd[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    /// `out[b] = x[b, labels[b]]` for `x` of shape `[B, C]`.
    pub fn pick(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(dim_err(format!("pick: shape {shape:?} with {} labels", labels.len())));
        }
        let c = shape[1];
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(labels.len());
        for (b, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::Label { label: l, classes: c });
            }
            out.push(xd[b * c + l]);
        }
        let t = Tensor::new(vec![labels.len()], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Pick {
                x,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, filling gradients of every node
    /// that depends on a `param` leaf. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this tape; build a new graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        let val = |v: Var| nodes[v.0].value.data();
        let want = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.len()])
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        add_into(acc!(v), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    add_into(acc!(*a), g);
                }
                if want(*b) {
                    for (d, &gv) in acc!(*b).iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if want(a) {
                    let bd = val(b);
                    for ((d, &gv), &bv) in acc!(a).iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if want(b) {
                    let ad = val(a);
                    for ((d, &gv), &av) in acc!(b).iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if want(*a) {
                    add_into(acc!(*a), g);
                }
                if want(*b) {
                    let db = acc!(*b);
                    let inner = db.len();
                    for chunk in g.chunks(inner) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::Scale(x, c) => {
                if want(*x) {
                    for (d, &gv) in acc!(*x).iter_mut().zip(g) {
                        *d += gv * *c;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if want(*x) {
                    add_into(acc!(*x), g);
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                if want(a) {
                    let bd = val(b);
                    let da = acc!(a);
                    if *shared_b {
                        kernels::gemm_nt(batch * m, n, k, g, bd, da);
                    } else {
                        for bi in 0..batch {
                            kernels::gemm_nt(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bd[bi * k * n..(bi + 1) * k * n],
                                &mut da[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    }
                }
                if want(b) {
                    let ad = val(a);
                    let db = acc!(b);
                    if *shared_b {
                        kernels::gemm_tn(batch * m, k, n, ad, g, db);
                    } else {
                        for bi in 0..batch {
                            kernels::gemm_tn(
                                m,
                                k,
                                n,
                                &ad[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut db[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                if want(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let out_shape = nodes[i].value.shape();
                    let back = permute_data(g, out_shape, &inv);
                    add_into(acc!(*x), &back);
                }
            }
            Op::Conv3d { x, w, geom } => {
                let (x, w) = (*x, *w);
                let (xd, wd) = (val(x), val(w));
                let mut dx = want(x).then(|| vec![F::zero(); xd.len()]);
                let mut dw = want(w).then(|| vec![F::zero(); wd.len()]);
                kernels::conv3d_backward(geom, xd, wd, g, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    add_into(acc!(x), &dx);
                }
                if let Some(dw) = dw {
                    add_into(acc!(w), &dw);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[gamma.0].value.len();
                let rows = xhat.len() / d;
                if want(*gamma) {
                    let dg = acc!(*gamma);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if want(*beta) {
                    let db = acc!(*beta);
                    for chunk in g.chunks(d) {
                        add_into(db, chunk);
                    }
                }
                if want(*x) {
                    let gm = val(*gamma);
                    let inv_d = F::one() / F::of(d as f64);
                    let dx = acc!(*x);
                    for r in 0..rows {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gm[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        s1 *= inv_d;
                        s2 *= inv_d;
                        for j in 0..d {
                            let dh = g[r * d + j] * gm[j];
                            dx[r * d + j] += rstd[r] * (dh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                if want(*x) {
                    let dx = acc!(*x);
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let at = |j: usize| (o * n + j) * inner + ii;
                            let mut dot = F::zero();
                            for j in 0..*n {
                                dot += g[at(j)] * out[at(j)];
                            }
                            for j in 0..*n {
                                dx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, outer, n, inner } => {
                if want(*x) {
                    let dx = acc!(*x);
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let at = |j: usize| (o * n + j) * inner + ii;
                            let mut gs = F::zero();
                            for j in 0..*n {
                                gs += g[at(j)];
                            }
                            for j in 0..*n {
                                dx[at(j)] += g[at(j)] - out[at(j)].exp() * gs;
                            }
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if want(*x) {
                    let xd = val(*x);
                    for ((d, &gv), &xv) in acc!(*x).iter_mut().zip(g).zip(xd) {
                        *d += gv * gelu_grad(xv);
                    }
                }
            }
            Op::Relu(x) => {
                if want(*x) {
                    let xd = val(*x);
                    for ((d, &gv), &xv) in acc!(*x).iter_mut().zip(g).zip(xd) {
                        if xv > F::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if want(*x) {
                    for ((d, &gv), &y) in acc!(*x).iter_mut().zip(g).zip(out) {
                        *d += gv * y;
                    }
                }
            }
            Op::Ln(x) => {
                if want(*x) {
                    let xd = val(*x);
                    for ((d, &gv), &xv) in acc!(*x).iter_mut().zip(g).zip(xd) {
                        *d += gv / xv;
                    }
                }
            }
            Op::Sqrt(x) => {
                if want(*x) {
                    let half = F::of(0.5);
                    for ((d, &gv), &y) in acc!(*x).iter_mut().zip(g).zip(out) {
                        *d += gv * half / y;
                    }
                }
            }
            Op::Square(x) => {
                if want(*x) {
                    let xd = val(*x);
                    let two = F::of(2.0);
                    for ((d, &gv), &xv) in acc!(*x).iter_mut().zip(g).zip(xd) {
                        *d += gv * two * xv;
                    }
                }
            }
            Op::Sum { x, map, scale } => {
                if want(*x) {
                    for (d, &m) in acc!(*x).iter_mut().zip(map) {
                        *d += g[m] * *scale;
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if want(*x) {
                    let width = g.len() / rows.len();
                    let dx = acc!(*x);
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut dx[r * width..(r + 1) * width], &g[k * width..(k + 1) * width]);
                    }
                }
            }
            Op::Pick { x, labels } => {
                if want(*x) {
                    let c = nodes[x.0].value.shape()[1];
                    let dx = acc!(*x);
                    for (b, &l) in labels.iter().enumerate() {
                        dx[b * c + l] += g[b];
                    }
                }
            }
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn permute_data<F: Real>(data: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0; shape.len()];
    let mut off = 0;
    for _ in 0..data.len() {
        out.push(data[off]);
        for a in (0..out_shape.len()).rev() {
            idx[a] += 1;
            off += step[a];
            if idx[a] < out_shape[a] {
                break;
            }
            off -= step[a] * idx[a];
            idx[a] = 0;
        }
    }
    out
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu<F: Real>(x: F) -> F {
    let half = F::of(0.5);
    half * x * (F::one() + (x * F::of(FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let half = F::of(0.5);
    let cdf = half * (F::one() + (x * F::of(FRAC_1_SQRT_2)).erf());
    let pdf = F::of(FRAC_1_SQRT_2PI) * (-half * x * x).exp();
    cdf + x * pdf
}
