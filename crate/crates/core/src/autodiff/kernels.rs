use crate::tensor::Real;

/// Spatial geometry of a square-kernel convolution over an HWC map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(h: usize, w: usize, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvGeometry {
            h,
            w,
            c_in,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c_in
    }

    /// Input coordinate for output position `o` and kernel offset `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

/// Unfolds `x: [h,w,c_in]` into `[h_out*w_out, k*k*c_in]` patches.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.h_out * g.w_out * plen];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let row = &mut cols[(oy * g.w_out + ox) * plen..][..plen];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let src = &x[(iy * g.w + ix) * g.c_in..][..g.c_in];
                    row[(ky * g.k + kx) * g.c_in..][..g.c_in].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto `dx`.
pub fn col2im<T: Real>(dcols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let plen = g.patch_len();
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let row = &dcols[(oy * g.w_out + ox) * plen..][..plen];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let dst = &mut dx[(iy * g.w + ix) * g.c_in..][..g.c_in];
                    for (d, s) in dst.iter_mut().zip(&row[(ky * g.k + kx) * g.c_in..][..g.c_in]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Depthwise convolution, `w: [k,k,c]`, `c_in == c_out`.
pub fn depthwise_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    let c = g.c_in;
    let mut out = vec![T::zero(); g.h_out * g.w_out * c];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let o = &mut out[(oy * g.w_out + ox) * c..][..c];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xs = &x[(iy * g.w + ix) * c..][..c];
                    let ws = &w[(ky * g.k + kx) * c..][..c];
                    for ((o, &xv), &wv) in o.iter_mut().zip(xs).zip(ws) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeometry,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let c = g.c_in;
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let d = &dy[(oy * g.w_out + ox) * c..][..c];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xo = (iy * g.w + ix) * c;
                    let wo = (ky * g.k + kx) * c;
                    if let Some(dx) = dx.as_deref_mut() {
                        for ch in 0..c {
                            dx[xo + ch] += d[ch] * w[wo + ch];
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        for ch in 0..c {
                            dw[wo + ch] += d[ch] * x[xo + ch];
                        }
                    }
                }
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise normalization; returns `(xhat, rstd)`.
pub fn layer_norm_rows<T: Real>(x: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(LN_EPS);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..][..d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        for (o, &v) in xhat[r * d..][..d].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
