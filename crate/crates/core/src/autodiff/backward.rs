use super::kernels;
use super::{Gradients, Node, Op, Tape, Var};
use crate::error::Result;
use crate::tensor::Real;

/// Gradient accumulator for `v`, or `None` when `v` needs no gradient.
fn slot<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(super) fn run<T: Real>(tape: Tape<'_, T>, loss: Var) -> Result<Gradients<T>> {
    let nodes = tape.nodes;
    let mut out = Gradients::default();
    if !nodes[loss.0].needs_grad {
        return Ok(out);
    }
    let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
    grads[loss.0] = Some(vec![T::one()]);

    for i in (0..=loss.0).rev() {
        let node = &nodes[i];
        if !node.needs_grad {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        let val = |v: Var| nodes[v.0].value.as_slice();

        match &node.op {
            Op::Input => {}
            Op::Leaf => {
                out.leaves.insert(Var(i), g);
            }
            Op::Param(id) => out.params.push((*id, g)),
            Op::Add(a, b) => {
                if let Some(d) = slot(&mut grads, &nodes, *a) {
                    add_into(d, &g);
                }
                if let Some(d) = slot(&mut grads, &nodes, *b) {
                    add_into(d, &g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = slot(&mut grads, &nodes, *a) {
                    add_into(d, &g);
                }
                if let Some(d) = slot(&mut grads, &nodes, *b) {
                    d.iter_mut().zip(&g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(d) = slot(&mut grads, &nodes, *a) {
                    for ((d, &g), &y) in d.iter_mut().zip(&g).zip(val(*b)) {
                        *d += g * y;
                    }
                }
                if let Some(d) = slot(&mut grads, &nodes, *b) {
                    for ((d, &g), &x) in d.iter_mut().zip(&g).zip(val(*a)) {
                        *d += g * x;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(d) = slot(&mut grads, &nodes, *a) {
                    add_into(d, &g);
                }
                if let Some(d) = slot(&mut grads, &nodes, *b) {
                    let n = d.len();
                    for chunk in g.chunks(n) {
                        add_into(d, chunk);
                    }
                }
            }
            Op::MulBroadcast(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = bv.len();
                if let Some(d) = slot(&mut grads, &nodes, *a) {
                    for (j, (d, &g)) in d.iter_mut().zip(&g).enumerate() {
                        *d += g * bv[j % n];
                    }
                }
                if let Some(d) = slot(&mut grads, &nodes, *b) {
                    for (j, (&g, &x)) in g.iter().zip(av).enumerate() {
                        d[j % n] += g * x;
                    }
                }
            }
            Op::AddConst(x) | Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(d) = slot(&mut grads, &nodes, *x) {
                    add_into(d, &g);
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = slot(&mut grads, &nodes, *x) {
                    d.iter_mut().zip(&g).for_each(|(d, &g)| *d += *c * g);
                }
            }
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(d) = slot(&mut grads, &nodes, a) {
                    T::gemm(m, n, k, &g, false, val(b), true, T::one(), d);
                }
                if let Some(d) = slot(&mut grads, &nodes, b) {
                    T::gemm(k, m, n, val(a), true, &g, false, T::one(), d);
                }
            }
            &Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                if let Some(d) = slot(&mut grads, &nodes, a) {
                    let bv = val(b);
                    for i in 0..batch {
                        let gi = &g[i * m * n..][..m * n];
                        let bi = &bv[i * k * n..][..k * n];
                        // dA = dC · op(B)ᵀ
                        T::gemm(m, n, k, gi, false, bi, !trans_b, T::one(), &mut d[i * m * k..][..m * k]);
                    }
                }
                if let Some(d) = slot(&mut grads, &nodes, b) {
                    let av = val(a);
                    for i in 0..batch {
                        let gi = &g[i * m * n..][..m * n];
                        let ai = &av[i * m * k..][..m * k];
                        let di = &mut d[i * k * n..][..k * n];
                        if trans_b {
                            T::gemm(n, m, k, gi, true, ai, false, T::one(), di);
                        } else {
                            T::gemm(k, m, n, ai, true, gi, false, T::one(), di);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(d) = slot(&mut grads, &nodes, *x) {
                    let dim = *node.shape.last().unwrap();
                    for ((dr, gr), yr) in d.chunks_mut(dim).zip(g.chunks(dim)).zip(node.value.chunks(dim)) {
                        let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let dim = *node.shape.last().unwrap();
                if let Some(d) = slot(&mut grads, &nodes, *gamma) {
                    for (gr, xr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for ((d, &g), &xh) in d.iter_mut().zip(gr).zip(xr) {
                            *d += g * xh;
                        }
                    }
                }
                if let Some(d) = slot(&mut grads, &nodes, *beta) {
                    for gr in g.chunks(dim) {
                        add_into(d, gr);
                    }
                }
                if let Some(d) = slot(&mut grads, &nodes, *x) {
                    let gm = val(*gamma);
                    let inv = T::from_f64(1.0 / dim as f64);
                    let mut dxhat = vec![T::zero(); dim];
                    for (r, ((dr, gr), xr)) in d.chunks_mut(dim).zip(g.chunks(dim)).zip(xhat.chunks(dim)).enumerate() {
                        for ((o, &g), &w) in dxhat.iter_mut().zip(gr).zip(gm) {
                            *o = g * w;
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() * inv;
                        let m2 = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() * inv;
                        for ((d, &dh), &xh) in dr.iter_mut().zip(&dxhat).zip(xr) {
                            *d += rstd[r] * (dh - m1 - xh * m2);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(d) = slot(&mut grads, &nodes, *x) {
                    for ((d, &g), &v) in d.iter_mut().zip(&g).zip(val(*x)) {
                        if v > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(d) = slot(&mut grads, &nodes, *x) {
                    for ((d, &g), &v) in d.iter_mut().zip(&g).zip(val(*x)) {
                        *d += g * kernels::gelu_grad(v);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = slot(&mut grads, &nodes, *x) {
                    for ((d, &g), &y) in d.iter_mut().zip(&g).zip(&node.value) {
                        *d += g * y * (T::one() - y);
                    }
                }
            }
            Op::Ln(x) => {
                if let Some(d) = slot(&mut grads, &nodes, *x) {
                    for ((d, &g), &v) in d.iter_mut().zip(&g).zip(val(*x)) {
                        *d += g / v;
                    }
                }
            }
            Op::Recip(x) => {
                if let Some(d) = slot(&mut grads, &nodes, *x) {
                    for ((d, &g), &y) in d.iter_mut().zip(&g).zip(&node.value) {
                        *d -= g * y * y;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if let Some(d) = slot(&mut grads, &nodes, *x) {
                    for ((d, &g), &v) in d.iter_mut().zip(&g).zip(val(*x)) {
                        if v >= *lo && v <= *hi {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = slot(&mut grads, &nodes, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = slot(&mut grads, &nodes, *x) {
                    let s = g[0] / T::from_f64(d.len() as f64);
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumLeading(x) | Op::MeanLeading(x) => {
                let dim = g.len();
                if let Some(d) = slot(&mut grads, &nodes, *x) {
                    let scale = match node.op {
                        Op::MeanLeading(_) => T::from_f64(dim as f64 / d.len() as f64),
                        _ => T::one(),
                    };
                    for chunk in d.chunks_mut(dim) {
                        for (d, &g) in chunk.iter_mut().zip(&g) {
                            *d += g * scale;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let rows = geom.h_out * geom.w_out;
                let plen = geom.patch_len();
                if let Some(d) = slot(&mut grads, &nodes, *w) {
                    T::gemm(plen, rows, geom.c_out, cols, true, &g, false, T::one(), d);
                }
                if nodes[x.0].needs_grad {
                    let mut dcols = vec![T::zero(); rows * plen];
                    T::gemm(rows, geom.c_out, plen, &g, false, val(*w), true, T::zero(), &mut dcols);
                    let d = slot(&mut grads, &nodes, *x).expect("checked needs_grad");
                    kernels::col2im(&dcols, geom, d);
                }
            }
            Op::DepthwiseConv2d { x, w, geom } => {
                let mut dx = nodes[x.0].needs_grad.then(|| vec![T::zero(); nodes[x.0].value.len()]);
                let mut dw = nodes[w.0].needs_grad.then(|| vec![T::zero(); nodes[w.0].value.len()]);
                kernels::depthwise_backward(val(*x), val(*w), &g, geom, dx.as_deref_mut(), dw.as_deref_mut());
                if let (Some(src), Some(d)) = (dx, slot(&mut grads, &nodes, *x)) {
                    add_into(d, &src);
                }
                if let (Some(src), Some(d)) = (dw, slot(&mut grads, &nodes, *w)) {
                    add_into(d, &src);
                }
            }
            Op::Concat {
                inputs,
                outer,
                inner,
                sizes,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&v, &sz) in inputs.iter().zip(sizes) {
                    if let Some(d) = slot(&mut grads, &nodes, v) {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..][..sz * inner];
                            add_into(&mut d[o * sz * inner..][..sz * inner], src);
                        }
                    }
                    offset += sz;
                }
            }
            Op::Gather { x, index } => {
                if let Some(d) = slot(&mut grads, &nodes, *x) {
                    for (&i, &g) in index.iter().zip(&g) {
                        d[i] += g;
                    }
                }
            }
            Op::CombineRows { x, row_len, terms } => {
                if let Some(d) = slot(&mut grads, &nodes, *x) {
                    for &(r, s, c) in terms {
                        for (d, &g) in d[s * row_len..][..*row_len].iter_mut().zip(&g[r * row_len..][..*row_len]) {
                            *d += c * g;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
