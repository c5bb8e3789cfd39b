//! Plain loop kernels behind the autograd ops. Single-threaded and
//! deterministic: every reduction runs in a fixed order.

use crate::tensor::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        let ai = &a[i * k..(i + 1) * k];
        for (p, &av) in ai.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed
/// order.
#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        let bi = &b[i * n..(i + 1) * n];
        for (p, &av) in ai.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let cp = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in cp.iter_mut().zip(bi) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a channels-last 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
}

impl ConvGeometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    pub fn macs(&self) -> u64 {
        let out: usize = self.output.iter().product();
        let taps: usize = self.kernel.iter().product();
        (self.batch * out * taps * self.cin_g() * self.cout) as u64
    }

    /// Calls `f(out_index, in_index, tap_index)` for every in-bounds
    /// (output voxel, kernel tap) pair. Indices are voxel indices, not
    /// channel offsets.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [it, ih, iw] = self.input;
        let [ot, oh, ow] = self.output;
        let [kt, kh, kw] = self.kernel;
        for b in 0..self.batch {
            for t in 0..ot {
                for y in 0..oh {
                    for x in 0..ow {
                        let o = ((b * ot + t) * oh + y) * ow + x;
                        for dt in 0..kt {
                            let st = (t * self.stride[0] + dt) as isize - self.padding[0] as isize;
                            if st < 0 || st >= it as isize {
                                continue;
                            }
                            for dy in 0..kh {
                                let sy = (y * self.stride[1] + dy) as isize - self.padding[1] as isize;
                                if sy < 0 || sy >= ih as isize {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let sx = (x * self.stride[2] + dx) as isize - self.padding[2] as isize;
                                    if sx < 0 || sx >= iw as isize {
                                        continue;
                                    }
                                    let i = ((b * it + st as usize) * ih + sy as usize) * iw + sx as usize;
                                    let tap = (dt * kh + dy) * kw + dx;
                                    f(o, i, tap);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<F: Real>(g: &ConvGeometry, x: &[F], w: &[F], out: &mut [F]) {
    let (cin, cout, cin_g, cout_g) = (g.cin, g.cout, g.cin_g(), g.cout_g());
    let tap_len = cin_g * cout;
    let depthwise = cin_g == 1 && cout_g == 1;
    g.for_each_tap(|o, i, tap| {
        let xv = &x[i * cin..(i + 1) * cin];
        let wt = &w[tap * tap_len..(tap + 1) * tap_len];
        let ov = &mut out[o * cout..(o + 1) * cout];
        if depthwise {
            for ((ov, &xv), &wv) in ov.iter_mut().zip(xv).zip(wt) {
                *ov += xv * wv;
            }
            return;
        }
        for grp in 0..g.groups {
            for ci in 0..cin_g {
                let xc = xv[grp * cin_g + ci];
                if xc == F::zero() {
                    continue;
                }
                let wrow = &wt[ci * cout + grp * cout_g..ci * cout + (grp + 1) * cout_g];
                let orow = &mut ov[grp * cout_g..(grp + 1) * cout_g];
                for (ov, &wv) in orow.iter_mut().zip(wrow) {
                    *ov += xc * wv;
                }
            }
        }
    });
}

/// Accumulates input and kernel gradients for `conv3d_forward`.
pub(crate) fn conv3d_backward<F: Real>(
    g: &ConvGeometry,
    x: &[F],
    w: &[F],
    dout: &[F],
    mut dx: Option<&mut [F]>,
    mut dw: Option<&mut [F]>,
) {
    let (cin, cout, cin_g, cout_g) = (g.cin, g.cout, g.cin_g(), g.cout_g());
    let tap_len = cin_g * cout;
    if cin_g == 1 && cout_g == 1 {
        g.for_each_tap(|o, i, tap| {
            let go = &dout[o * cout..(o + 1) * cout];
            let wt = &w[tap * cout..(tap + 1) * cout];
            if let Some(dx) = dx.as_deref_mut() {
                for ((d, &gv), &wv) in dx[i * cin..(i + 1) * cin].iter_mut().zip(go).zip(wt) {
                    *d += gv * wv;
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                let xv = &x[i * cin..(i + 1) * cin];
                for ((d, &gv), &xv) in dw[tap * cout..(tap + 1) * cout].iter_mut().zip(go).zip(xv) {
                    *d += xv * gv;
                }
            }
        });
        return;
    }
    g.for_each_tap(|o, i, tap| {
        let go = &dout[o * cout..(o + 1) * cout];
        for grp in 0..g.groups {
            for ci in 0..cin_g {
                let c_in = grp * cin_g + ci;
                let base = tap * tap_len + ci * cout + grp * cout_g;
                let gorow = &go[grp * cout_g..(grp + 1) * cout_g];
                if let Some(dx) = dx.as_deref_mut() {
                    dx[i * cin + c_in] += dot(gorow, &w[base..base + cout_g]);
                }
                if let Some(dw) = dw.as_deref_mut() {
                    let xc = x[i * cin + c_in];
                    for (dwv, &gv) in dw[base..base + cout_g].iter_mut().zip(gorow) {
                        *dwv += xc * gv;
                    }
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        gemm_nn(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // bᵀ laid out 2x3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0f64; 4];
        gemm_nt(2, 3, 2, &a, &bt, &mut c2);
        assert_eq!(c, c2);

        // aᵀ laid out 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0f64; 4];
        gemm_tn(3, 2, 2, &at, &b, &mut c3);
        assert_eq!(c, c3);
    }
}
