//! Raw loops shared by the forward and backward passes.

/// `c += op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// With `ta` the buffer `a` holds the `k x m` matrix, with `tb` the buffer `b`
/// holds the `n x k` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut c[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for (&av, &bv) in arow.iter().zip(brow) {
                        acc += av * bv;
                    }
                    c[i * n + j] += acc;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += acc;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Out-of-range taps read the nearest edge sample.
    Replicate,
}

/// Geometry of a 2-D convolution over NHWC input with HWIO weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    /// top, bottom, left, right
    pub pad: [usize; 4],
    pub mode: PadMode,
}

impl ConvSpec {
    pub fn output_len(&self, input: usize, kernel: usize, axis: usize) -> Option<usize> {
        let (pad, stride) = if axis == 0 {
            (self.pad[0] + self.pad[1], self.stride.0)
        } else {
            (self.pad[2] + self.pad[3], self.stride.1)
        };
        let padded = input + pad;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub co: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    /// Input coordinate for an output coordinate and kernel tap, or `None` for a zero tap.
    #[inline]
    fn source(&self, o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        if pos >= 0 && (pos as usize) < len {
            Some(pos as usize)
        } else {
            match self.spec.mode {
                PadMode::Zero => None,
                PadMode::Replicate => Some(pos.clamp(0, len as isize - 1) as usize),
            }
        }
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        // f(output pixel index, input pixel index, tap index)
        let (sh, sw) = self.spec.stride;
        for n in 0..self.n {
            for oh in 0..self.ho {
                for ow in 0..self.wo {
                    let opix = (n * self.ho + oh) * self.wo + ow;
                    for ky in 0..self.kh {
                        let Some(ih) = self.source(oh, ky, sh, self.spec.pad[0], self.h) else {
                            continue;
                        };
                        for kx in 0..self.kw {
                            let Some(iw) = self.source(ow, kx, sw, self.spec.pad[2], self.w) else {
                                continue;
                            };
                            let ipix = (n * self.h + ih) * self.w + iw;
                            f(opix, ipix, ky * self.kw + kx);
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], wt: &[f64], out: &mut [f64]) {
        let (c, co) = (self.c, self.co);
        self.for_each_tap(|opix, ipix, tap| {
            let xin = &x[ipix * c..(ipix + 1) * c];
            let wtap = &wt[tap * c * co..(tap + 1) * c * co];
            let orow = &mut out[opix * co..(opix + 1) * co];
            for (ci, &xv) in xin.iter().enumerate() {
                let wrow = &wtap[ci * co..(ci + 1) * co];
                for (ov, &wv) in orow.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        });
    }

    pub fn backward_input(&self, g: &[f64], wt: &[f64], dx: &mut [f64]) {
        let (c, co) = (self.c, self.co);
        self.for_each_tap(|opix, ipix, tap| {
            let grow = &g[opix * co..(opix + 1) * co];
            let wtap = &wt[tap * c * co..(tap + 1) * c * co];
            let dxin = &mut dx[ipix * c..(ipix + 1) * c];
            for (ci, dv) in dxin.iter_mut().enumerate() {
                let wrow = &wtap[ci * co..(ci + 1) * co];
                let mut acc = 0.0;
                for (&gv, &wv) in grow.iter().zip(wrow) {
                    acc += gv * wv;
                }
                *dv += acc;
            }
        });
    }

    pub fn backward_weight(&self, g: &[f64], x: &[f64], dw: &mut [f64]) {
        let (c, co) = (self.c, self.co);
        self.for_each_tap(|opix, ipix, tap| {
            let grow = &g[opix * co..(opix + 1) * co];
            let xin = &x[ipix * c..(ipix + 1) * c];
            let dwtap = &mut dw[tap * c * co..(tap + 1) * c * co];
            for (ci, &xv) in xin.iter().enumerate() {
                let dwrow = &mut dwtap[ci * co..(ci + 1) * co];
                for (dv, &gv) in dwrow.iter_mut().zip(grow) {
                    *dv += xv * gv;
                }
            }
        });
    }
}

/// Source indices and weights for 1-D linear resampling with half-pixel
/// centres (the `align_corners = false` convention).
pub fn linear_resample_weights(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output element of `permute(shape, axes)`, the flat source index.
pub(crate) fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let src: usize = idx.iter().zip(axes).map(|(&i, &a)| i * src_strides[a]).sum();
        map.push(src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, n, k) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.53).cos()).collect();
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    want[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let mut c = vec![0.0; m * n];
            gemm(ta, tb, m, n, k, if ta { &at } else { &a }, if tb { &bt } else { &b }, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb}");
            }
        }
    }

    #[test]
    fn resample_identity_when_lengths_match() {
        for (i, &(i0, _, w0, w1)) in linear_resample_weights(5, 5).iter().enumerate() {
            assert_eq!(i0, i);
            assert_eq!(w0, 1.0);
            assert_eq!(w1, 0.0);
        }
    }

    #[test]
    fn resample_doubles_with_half_pixel_centres() {
        let w = linear_resample_weights(2, 4);
        // positions -0.25 -> clamp 0, 0.25, 0.75, 1.25 -> i0 = 1 clamped
        assert_eq!(w[0], (0, 1, 1.0, 0.0));
        assert_eq!(w[1], (0, 1, 0.75, 0.25));
        assert_eq!(w[2], (0, 1, 0.25, 0.75));
        assert_eq!(w[3].0, 1);
        assert!((w[3].2 * 1.0 + w[3].3 * 1.0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn permute_transpose() {
        let map = permute_index(&[2, 3], &[1, 0]);
        assert_eq!(map, vec![0, 3, 1, 4, 2, 5]);
    }
}
