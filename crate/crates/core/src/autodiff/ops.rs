//! Forward definitions of all recorded operations.

use super::kernels::{self, ConvGeometry};
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl<T: Real> Tape<'_, T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("lhs {:?} vs rhs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(value, shape, op, needs)
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(value, shape, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn broadcast_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if !is_suffix(self.shape(a), self.shape(b)) {
            return Err(Error::dim(
                op_name,
                format!("{:?} is not a trailing shape of {:?}", self.shape(b), self.shape(a)),
            ));
        }
        let bv = self.value(b);
        let n = bv.len();
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % n]))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, shape, op, needs))
    }

    /// `a + b` with `b` repeated over the leading dims of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_with("add_broadcast", a, b, |x, y| x + y, Op::AddBroadcast(a, b))
    }

    /// `a * b` with `b` repeated over the leading dims of `a`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_with("mul_broadcast", a, b, |x, y| x * y, Op::MulBroadcast(a, b))
    }

    /// Adds a constant tensor (e.g. an attention mask) broadcast over leading dims.
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        if !is_suffix(self.shape(a), c.shape()) {
            return Err(Error::dim(
                "add_const",
                format!("{:?} is not a trailing shape of {:?}", c.shape(), self.shape(a)),
            ));
        }
        let cv = c.data();
        let n = cv.len();
        let value = self.value(a).iter().enumerate().map(|(i, &x)| x + cv[i % n]).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(value, shape, Op::AddConst(a), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.map_unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.map_unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.ln(), Op::Ln(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.recip(), Op::Recip(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        self.map_unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// `[..., k] × [k, n] → [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(Error::dim("matmul", format!("lhs {sa:?} vs rhs {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), false, T::zero(), &mut out);
        self.count(m * k * n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, shape, Op::MatMul { a, b, m, k, n }, needs))
    }

    /// `x · w (+ b)`, with `w: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    /// Batched matmul `[B,m,k] × [B,k,n]`, or `[B,m,k] × [B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::dim("bmm", format!("lhs {sa:?} vs rhs {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(err());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(err());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(err());
            }
            sb[2]
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..][..m * k],
                    false,
                    &bv[i * k * n..][..k * n],
                    trans_b,
                    T::zero(),
                    &mut out[i * m * n..][..m * n],
                );
            }
        }
        self.count(batch * m * k * n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            out,
            vec![batch, m, n],
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            needs,
        ))
    }

    /// Softmax over the last dim.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().unwrap();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            let inv = total.recip();
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(out, shape, Op::Softmax(x), needs)
    }

    /// Layer normalization over the last dim with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "input {:?} with gamma {:?} beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (xhat, rstd) = kernels::layer_norm_rows(self.value(x), d);
        let (g, b) = (self.value(gamma), self.value(beta));
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % d] + b[i % d])
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let needs = self.needs(x);
        self.push(vec![s], vec![1], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        let needs = self.needs(x);
        self.push(vec![s], vec![1], Op::Mean(x), needs)
    }

    fn reduce_leading(&mut self, x: Var, scale_by_rows: bool) -> Var {
        let d = *self.shape(x).last().unwrap();
        let v = self.value(x);
        let rows = v.len() / d;
        let mut out = vec![T::zero(); d];
        for row in v.chunks(d) {
            for (o, &r) in out.iter_mut().zip(row) {
                *o += r;
            }
        }
        let op = if scale_by_rows {
            let inv = T::from_f64(1.0 / rows as f64);
            out.iter_mut().for_each(|o| *o *= inv);
            Op::MeanLeading(x)
        } else {
            Op::SumLeading(x)
        };
        let needs = self.needs(x);
        self.push(out, vec![d], op, needs)
    }

    /// `[..., d] → [d]`, summing over all leading positions.
    pub fn sum_leading(&mut self, x: Var) -> Var {
        self.reduce_leading(x, false)
    }

    /// `[..., d] → [d]`, averaging over all leading positions.
    pub fn mean_leading(&mut self, x: Var) -> Var {
        self.reduce_leading(x, true)
    }

    fn hwc(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [h, w, c] => Ok((h, w, c)),
            ref s => Err(Error::dim(op, format!("expected [H,W,C] input, got {s:?}"))),
        }
    }

    /// Convolution of `x: [H,W,Cin]` with `w: [k,k,Cin,Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (h, wd, c) = self.hwc("conv2d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != ws[1] || ws[2] != c {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?} vs kernel {ws:?}", self.shape(x)),
            ));
        }
        let geom = ConvGeometry::new(h, wd, c, ws[3], ws[0], stride, pad)
            .ok_or_else(|| Error::dim("conv2d", format!("kernel {ws:?} larger than padded input {h}x{wd}")))?;
        let cols = kernels::im2col(self.value(x), &geom);
        let rows = geom.h_out * geom.w_out;
        let mut out = vec![T::zero(); rows * geom.c_out];
        T::gemm(rows, geom.patch_len(), geom.c_out, &cols, false, self.value(w), false, T::zero(), &mut out);
        self.count(rows * geom.patch_len() * geom.c_out);
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(
            out,
            vec![geom.h_out, geom.w_out, geom.c_out],
            Op::Conv2d { x, w, geom, cols },
            needs,
        ))
    }

    /// Per-channel convolution of `x: [H,W,C]` with `w: [k,k,C]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (h, wd, c) = self.hwc("depthwise_conv2d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] != ws[1] || ws[2] != c {
            return Err(Error::dim(
                "depthwise_conv2d",
                format!("input {:?} vs kernel {ws:?}", self.shape(x)),
            ));
        }
        let geom = ConvGeometry::new(h, wd, c, c, ws[0], stride, pad).ok_or_else(|| {
            Error::dim("depthwise_conv2d", format!("kernel {ws:?} larger than padded input {h}x{wd}"))
        })?;
        let out = kernels::depthwise_forward(self.value(x), self.value(w), &geom);
        self.count(geom.h_out * geom.w_out * geom.k * geom.k * c);
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(
            out,
            vec![geom.h_out, geom.w_out, c],
            Op::DepthwiseConv2d { x, w, geom },
            needs,
        ))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Indices may repeat.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::dim(
                "gather",
                format!("{} indices for output shape {shape:?}", index.len()),
            ));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather", format!("index {bad} out of range for {n} elements")));
        }
        let src = self.value(x);
        let out = index.iter().map(|&i| src[i]).collect();
        let needs = self.needs(x);
        Ok(self.push(out, shape.to_vec(), Op::Gather { x, index }, needs))
    }

    /// 2×2 max pooling with stride 2 over `[H,W,C]`.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.hwc("max_pool2d", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("max_pool2d", format!("odd spatial size {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let v = self.value(x);
        let mut index = Vec::with_capacity(ho * wo * c);
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = (2 * oy * w + 2 * ox) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if v[i] > v[best] {
                            best = i;
                        }
                    }
                    index.push(best);
                }
            }
        }
        self.gather(x, index, &[ho, wo, c])
    }

    /// Nearest-neighbour upsampling of `[H,W,C]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, c) = self.hwc("upsample_nearest", x)?;
        let (ho, wo) = (h * factor, w * factor);
        let mut index = Vec::with_capacity(ho * wo * c);
        for oy in 0..ho {
            for ox in 0..wo {
                let base = ((oy / factor) * w + ox / factor) * c;
                index.extend(base..base + c);
            }
        }
        self.gather(x, index, &[ho, wo, c])
    }

    /// Pads `[H,W,C]` by `p` on every side, repeating the border pixels.
    pub fn pad_replicate(&mut self, x: Var, p: usize) -> Result<Var> {
        let (h, w, c) = self.hwc("pad_replicate", x)?;
        let (ho, wo) = (h + 2 * p, w + 2 * p);
        let mut index = Vec::with_capacity(ho * wo * c);
        for oy in 0..ho {
            let iy = oy.saturating_sub(p).min(h - 1);
            for ox in 0..wo {
                let ix = ox.saturating_sub(p).min(w - 1);
                let base = (iy * w + ix) * c;
                index.extend(base..base + c);
            }
        }
        self.gather(x, index, &[ho, wo, c])
    }

    /// Reorders axes, e.g. `permute(x, &[1, 0])` is a 2-D transpose.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let mut strides = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let numel: usize = shape.iter().product();
        let mut index = Vec::with_capacity(numel);
        let mut pos = vec![0usize; shape.len()];
        for _ in 0..numel {
            index.push(pos.iter().zip(axes).map(|(&p, &a)| p * strides[a]).sum());
            for d in (0..pos.len()).rev() {
                pos[d] += 1;
                if pos[d] < out_shape[d] {
                    break;
                }
                pos[d] = 0;
            }
        }
        self.gather(x, index, &out_shape)
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::dim(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            index.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, index, &out_shape)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in inputs.iter().zip(&sizes) {
                out.extend_from_slice(&self.value(v)[o * sz * inner..][..sz * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            out,
            shape,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
                sizes,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let value = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(value, shape.to_vec(), Op::Reshape(x), needs))
    }

    /// Sparse linear recombination of rows. `x` is viewed as rows of the
    /// length of its trailing dims after the first; `terms` lists
    /// `(out_row, in_row, coefficient)`.
    pub fn combine_rows(&mut self, x: Var, out_rows: usize, terms: Vec<(usize, usize, f64)>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let in_rows = shape[0];
        let row_len: usize = shape[1..].iter().product();
        if let Some(t) = terms.iter().find(|t| t.0 >= out_rows || t.1 >= in_rows) {
            return Err(Error::dim("combine_rows", format!("term {t:?} outside {out_rows}x{in_rows}")));
        }
        let terms: Vec<(usize, usize, T)> = terms.into_iter().map(|(r, s, c)| (r, s, T::from_f64(c))).collect();
        let mut out = vec![T::zero(); out_rows * row_len];
        let src = self.value(x);
        for &(r, s, c) in &terms {
            for (o, &v) in out[r * row_len..][..row_len].iter_mut().zip(&src[s * row_len..][..row_len]) {
                *o += c * v;
            }
        }
        let mut out_shape = shape;
        out_shape[0] = out_rows;
        let needs = self.needs(x);
        Ok(self.push(out, out_shape, Op::CombineRows { x, row_len, terms }, needs))
    }
}
