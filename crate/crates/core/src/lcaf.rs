//! Local cross-attention fusion of one edge stage with one body stage.
//!
//! Queries come from edge tokens, keys and values from body tokens, and
//! attention is confined to non-overlapping `(h_l, w_l)` windows.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::body::{partition_index, reverse_index, TokenGrid};
use crate::error::{Error, Result};
use crate::nn::{attention, Builder, Linear, Mlp};
use crate::tensor::Real;

/// Source of the residual added to the multi-head cross-attention output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Residual {
    #[default]
    Body,
    Edge,
    Sum,
}

impl fmt::Display for Residual {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Residual::Body => "body",
            Residual::Edge => "edge",
            Residual::Sum => "sum",
        })
    }
}

impl FromStr for Residual {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "body" => Ok(Residual::Body),
            "edge" => Ok(Residual::Edge),
            "sum" => Ok(Residual::Sum),
            other => Err(Error::config(format!("unknown residual `{other}` (expected body, edge or sum)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LcafConfig {
    /// `(h_l, w_l)`
    pub window: (usize, usize),
    pub heads: usize,
    pub residual: Residual,
    pub ffn_ratio: usize,
}

impl Default for LcafConfig {
    fn default() -> Self {
        LcafConfig {
            window: (2, 2),
            heads: 1,
            residual: Residual::Body,
            ffn_ratio: 4,
        }
    }
}

/// Closed-form multiply-add counts of global and local attention over an
/// `h × w` grid of `c` channels: `(gca, lca)`.
pub fn attention_cost(h: u64, w: u64, c: u64, hl: u64, wl: u64) -> (u64, u64) {
    let hw = h * w;
    let projections = 4 * hw * c * c;
    (projections + 2 * hw * hw * c, projections + 2 * hl * wl * hw * c)
}

/// Cross-attention output before the output projection.
#[derive(Clone, Copy, Debug)]
pub struct LocalAttention {
    /// Concatenated heads as a `[h, w, D]` map.
    pub heads: Var,
    /// `[heads · nW, h_l·w_l, h_l·w_l]`
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct Lcaf {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ffn: Mlp,
    pub cfg: LcafConfig,
}

impl Lcaf {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize, cfg: &LcafConfig) -> Result<Self> {
        if cfg.heads == 0 || !dim.is_multiple_of(cfg.heads) {
            return Err(Error::config(format!("dim {dim} not divisible by {} heads", cfg.heads)));
        }
        if cfg.window.0 == 0 || cfg.window.1 == 0 {
            return Err(Error::config("local window must be positive"));
        }
        Ok(Lcaf {
            wq: Linear::new(&mut b.scope("wq"), dim, dim, false)?,
            wk: Linear::new(&mut b.scope("wk"), dim, dim, false)?,
            wv: Linear::new(&mut b.scope("wv"), dim, dim, false)?,
            wo: Linear::new(&mut b.scope("wo"), dim, dim, false)?,
            ffn: Mlp::new(&mut b.scope("ffn"), dim, cfg.ffn_ratio)?,
            cfg: cfg.clone(),
        })
    }

    fn check(&self, edge: &TokenGrid, body: &TokenGrid) -> Result<()> {
        if (edge.h, edge.w, edge.dim) != (body.h, body.w, body.dim) {
            return Err(Error::dim(
                "lcaf",
                format!("edge grid {}x{}x{} vs body grid {}x{}x{}", edge.h, edge.w, edge.dim, body.h, body.w, body.dim),
            ));
        }
        let (hl, wl) = self.window_for(body);
        if !body.h.is_multiple_of(hl) || !body.w.is_multiple_of(wl) {
            return Err(Error::config(format!("grid {}x{} not divisible into {hl}x{wl} windows", body.h, body.w)));
        }
        Ok(())
    }

    /// Configured window clamped to the grid.
    pub fn window_for(&self, grid: &TokenGrid) -> (usize, usize) {
        (self.cfg.window.0.min(grid.h), self.cfg.window.1.min(grid.w))
    }

    /// Windowed `softmax(Q_edge K_bodyᵀ / √d_k) V_body` for every head.
    pub fn local_cross_attention<T: Real>(&self, tape: &mut Tape<'_, T>, edge: TokenGrid, body: TokenGrid) -> Result<LocalAttention> {
        self.check(&edge, &body)?;
        let TokenGrid { h, w, dim, .. } = body;
        let win = self.window_for(&body);
        let shape = [(h / win.0) * (w / win.1), win.0 * win.1, dim];
        let q = self.wq.forward(tape, edge.tokens)?;
        let k = self.wk.forward(tape, body.tokens)?;
        let v = self.wv.forward(tape, body.tokens)?;
        let part = partition_index(h, w, dim, win, 0);
        let q = tape.gather(q, part.clone(), &shape)?;
        let k = tape.gather(k, part.clone(), &shape)?;
        let v = tape.gather(v, part, &shape)?;
        let a = attention(tape, q, k, v, self.cfg.heads, None, None)?;
        let heads = tape.gather(a.out, reverse_index(h, w, dim, win, 0), &[h, w, dim])?;
        Ok(LocalAttention { heads, probs: a.probs })
    }

    /// Residual plus the output-projected multi-head cross-attention.
    pub fn m_lca<T: Real>(&self, tape: &mut Tape<'_, T>, edge: TokenGrid, body: TokenGrid) -> Result<Var> {
        let a = self.local_cross_attention(tape, edge, body)?;
        let projected = self.wo.forward(tape, a.heads)?;
        let residual = match self.cfg.residual {
            Residual::Body => body.tokens,
            Residual::Edge => edge.tokens,
            Residual::Sum => tape.add(body.tokens, edge.tokens)?,
        };
        tape.add(residual, projected)
    }

    /// `FFN(M) + M` with `M` the multi-head cross-attention output.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, edge: TokenGrid, body: TokenGrid) -> Result<TokenGrid> {
        let m = self.m_lca(tape, edge, body)?;
        let f = self.ffn.forward(tape, m)?;
        let tokens = tape.add(f, m)?;
        Ok(TokenGrid { tokens, ..body })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, DEFAULT_EPS, DEFAULT_TOL};
    use crate::params::{ParamId, ParamStore};
    use crate::rng::{seeded, uniform};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn module(dim: usize, cfg: LcafConfig) -> (ParamStore<f64>, Lcaf) {
        let mut store = ParamStore::new();
        let mut rng = seeded(41);
        let m = Lcaf::new(&mut Builder::new(&mut store, &mut rng), dim, &cfg).unwrap();
        let ids: Vec<_> = store.ids().collect();
        let mut noise = seeded(42);
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            let extra: Tensor<f64> = uniform(&mut noise, &shape, -0.2, 0.2);
            let vals: Vec<f64> = store.get(id).data().iter().zip(extra.data()).map(|(a, b)| a + b).collect();
            store.set_values(id, &vals).unwrap();
        }
        (store, m)
    }

    fn grids<'p>(tape: &mut Tape<'p, f64>, e: &Tensor<f64>, b: &Tensor<f64>) -> (TokenGrid, TokenGrid) {
        let ev = tape.input(e);
        let bv = tape.input(b);
        (TokenGrid::from_var(tape, ev).unwrap(), TokenGrid::from_var(tape, bv).unwrap())
    }

    fn mat(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
        store.get(id).data().to_vec()
    }

    /// `x · W` for row-major `x: [n, d_in]`, `W: [d_in, d_out]`.
    fn project(x: &[f64], w: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
        x.chunks(d_in)
            .flat_map(|row| (0..d_out).map(move |j| (0..d_in).map(|i| row[i] * w[i * d_out + j]).sum::<f64>()))
            .collect()
    }

    /// Global cross-attention over all `h·w` tokens where pairs in different
    /// windows get `-inf` scores; returns concatenated heads `[hw, D]`.
    fn masked_global_oracle(m: &Lcaf, store: &ParamStore<f64>, e: &[f64], b: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
        let q = project(e, &mat(store, m.wq.weight), d, d);
        let k = project(b, &mat(store, m.wk.weight), d, d);
        let v = project(b, &mat(store, m.wv.weight), d, d);
        let (hl, wl) = m.cfg.window;
        let heads = m.cfg.heads;
        let dh = d / heads;
        let n = h * w;
        let window_of = |t: usize| ((t / w) / hl, (t % w) / wl);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for hd in 0..heads {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        if window_of(i) != window_of(j) {
                            f64::NEG_INFINITY
                        } else {
                            (0..dh).map(|c| q[i * d + hd * dh + c] * k[j * d + hd * dh + c]).sum::<f64>() / (dh as f64).sqrt()
                        }
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    out[i * d + hd * dh + c] = (0..n).map(|j| e[j] / z * v[j * d + hd * dh + c]).sum();
                }
            }
        }
        out
    }

    fn rand(seed: u64, shape: &[usize]) -> Tensor<f64> {
        uniform(&mut seeded(seed), shape, -1.0, 1.0)
    }

    #[test]
    fn singleton_window_returns_projected_values() {
        let (store, m) = module(4, LcafConfig { window: (1, 1), heads: 2, ..LcafConfig::default() });
        let (e, b) = (rand(1, &[3, 2, 4]), rand(2, &[3, 2, 4]));
        let mut tape = Tape::with_params(&store);
        let (eg, bg) = grids(&mut tape, &e, &b);
        let a = m.local_cross_attention(&mut tape, eg, bg).unwrap();
        assert!(tape.value(a.probs).iter().all(|&p| p == 1.0));
        let expect = project(b.data(), &mat(&store, m.wv.weight), 4, 4);
        for (x, y) in tape.value(a.heads).iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn equals_masked_global_cross_attention() {
        for (h, w, d, heads, win) in [(4, 4, 4, 1, (2, 2)), (4, 6, 6, 3, (2, 2)), (6, 4, 4, 2, (3, 2)), (4, 4, 4, 2, (4, 4))] {
            let (store, m) = module(d, LcafConfig { window: win, heads, ..LcafConfig::default() });
            let (e, b) = (rand(3, &[h, w, d]), rand(4, &[h, w, d]));
            let mut tape = Tape::with_params(&store);
            let (eg, bg) = grids(&mut tape, &e, &b);
            let a = m.local_cross_attention(&mut tape, eg, bg).unwrap();
            let expect = masked_global_oracle(&m, &store, e.data(), b.data(), h, w, d);
            for (x, y) in tape.value(a.heads).iter().zip(&expect) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn self_attention_with_identity_projections() {
        let d = 3;
        let (mut store, m) = module(d, LcafConfig { window: (2, 2), heads: 1, ..LcafConfig::default() });
        let eye: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
        for id in [m.wq.weight, m.wk.weight, m.wv.weight] {
            store.set_values(id, &eye).unwrap();
        }
        let x = rand(5, &[2, 2, d]);
        let mut tape = Tape::with_params(&store);
        let (eg, bg) = grids(&mut tape, &x, &x);
        let a = m.local_cross_attention(&mut tape, eg, bg).unwrap();
        // One window holds all four tokens: softmax(x xᵀ/√d) x.
        let rows: Vec<&[f64]> = x.data().chunks(d).collect();
        for (i, ri) in rows.iter().enumerate() {
            let s: Vec<f64> = rows.iter().map(|rj| ri.iter().zip(*rj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for c in 0..d {
                let expect: f64 = rows.iter().zip(&s).map(|(rj, sj)| sj.exp() / z * rj[c]).sum();
                assert!((tape.value(a.heads)[i * d + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let (store, m) = module(4, LcafConfig { window: (2, 2), heads: 2, ..LcafConfig::default() });
        let (e, b) = (rand(6, &[4, 4, 4]).map(|v| 5.0 * v), rand(7, &[4, 4, 4]));
        let mut tape = Tape::with_params(&store);
        let (eg, bg) = grids(&mut tape, &e, &b);
        let a = m.local_cross_attention(&mut tape, eg, bg).unwrap();
        for row in tape.value(a.probs).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_head_m_lca_is_projection_plus_residual() {
        for residual in [Residual::Body, Residual::Edge, Residual::Sum] {
            let (store, m) = module(4, LcafConfig { window: (2, 2), heads: 1, residual, ..LcafConfig::default() });
            let (e, b) = (rand(8, &[4, 2, 4]), rand(9, &[4, 2, 4]));
            let mut tape = Tape::with_params(&store);
            let (eg, bg) = grids(&mut tape, &e, &b);
            let out = m.m_lca(&mut tape, eg, bg).unwrap();
            let heads = masked_global_oracle(&m, &store, e.data(), b.data(), 4, 2, 4);
            let proj = project(&heads, &mat(&store, m.wo.weight), 4, 4);
            for (i, x) in tape.value(out).iter().enumerate() {
                let res = match residual {
                    Residual::Body => b.data()[i],
                    Residual::Edge => e.data()[i],
                    Residual::Sum => b.data()[i] + e.data()[i],
                };
                assert!((x - res - proj[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_output_projection_leaves_residual() {
        let (mut store, m) = module(4, LcafConfig { window: (2, 2), heads: 2, ..LcafConfig::default() });
        store.set_values(m.wo.weight, &[0.0; 16]).unwrap();
        let (e, b) = (rand(10, &[2, 4, 4]), rand(11, &[2, 4, 4]));
        let mut tape = Tape::with_params(&store);
        let (eg, bg) = grids(&mut tape, &e, &b);
        let out = m.m_lca(&mut tape, eg, bg).unwrap();
        assert_eq!(tape.value(out), b.data());
    }

    #[test]
    fn zero_ffn_output_leaves_m_lca() {
        let (mut store, m) = module(4, LcafConfig { window: (2, 2), heads: 2, ..LcafConfig::default() });
        store.set_values(m.ffn.fc2.weight, &[0.0; 64]).unwrap();
        store.set_values(m.ffn.fc2.bias.unwrap(), &[0.0; 4]).unwrap();
        let (e, b) = (rand(12, &[2, 4, 4]), rand(13, &[2, 4, 4]));
        let mut tape = Tape::with_params(&store);
        let (eg, bg) = grids(&mut tape, &e, &b);
        let mid = m.m_lca(&mut tape, eg, bg).unwrap();
        let out = m.forward(&mut tape, eg, bg).unwrap();
        assert_eq!(tape.value(out.tokens), tape.value(mid));
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let (h, w, d) = (4, 4, 6);
        let (store, m) = module(d, LcafConfig { window: (2, 2), heads: 3, ..LcafConfig::default() });
        let (e, b) = (rand(14, &[h, w, d]), rand(15, &[h, w, d]));
        let mut tape = Tape::with_params(&store);
        let (eg, bg) = grids(&mut tape, &e, &b);
        let out = m.forward(&mut tape, eg, bg).unwrap();

        let heads = masked_global_oracle(&m, &store, e.data(), b.data(), h, w, d);
        let proj = project(&heads, &mat(&store, m.wo.weight), d, d);
        let mm: Vec<f64> = b.data().iter().zip(&proj).map(|(x, y)| x + y).collect();
        let gelu = |a: f64| 0.5 * a * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (a + 0.044715 * a.powi(3))).tanh());
        let (w1, b1) = (mat(&store, m.ffn.fc1.weight), mat(&store, m.ffn.fc1.bias.unwrap()));
        let (w2, b2) = (mat(&store, m.ffn.fc2.weight), mat(&store, m.ffn.fc2.bias.unwrap()));
        let hid: Vec<f64> = project(&mm, &w1, d, 4 * d).iter().enumerate().map(|(i, v)| gelu(v + b1[i % (4 * d)])).collect();
        let f = project(&hid, &w2, 4 * d, d);
        for (i, x) in tape.value(out.tokens).iter().enumerate() {
            assert!((x - (f[i] + b2[i % d] + mm[i])).abs() < 1e-8);
        }
    }

    #[test]
    fn gradcheck_all_parameters() {
        let (mut store, m) = module(4, LcafConfig { window: (2, 2), heads: 2, ..LcafConfig::default() });
        let (e, b) = (rand(16, &[4, 4, 4]), rand(17, &[4, 4, 4]));
        let report = check_params(&mut store, DEFAULT_EPS, Some(10), &mut seeded(0), |t| {
            let (eg, bg) = grids(t, &e, &b);
            let y = m.forward(t, eg, bg)?.tokens;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(report.passed(DEFAULT_TOL), "{report:?}");
    }

    #[test]
    fn output_shape_matches_body_for_all_stages() {
        for (h, d) in [(16, 16), (8, 32), (4, 64), (2, 128)] {
            let mut store = ParamStore::<f32>::new();
            let mut rng = seeded(43);
            let m = Lcaf::new(&mut Builder::new(&mut store, &mut rng), d, &LcafConfig::default()).unwrap();
            let x = Tensor::<f32>::full(&[h, h, d], 0.1);
            let mut tape = Tape::with_params(&store);
            let ev = tape.input(&x);
            let g = TokenGrid::from_var(&tape, ev).unwrap();
            let out = m.forward(&mut tape, g, g).unwrap();
            assert_eq!(tape.shape(out.tokens), &[h, h, d]);
        }
    }

    #[test]
    fn modality_mismatch_is_dimension_error() {
        let (store, m) = module(4, LcafConfig::default());
        let mut tape = Tape::with_params(&store);
        let (eg, bg) = grids(&mut tape, &rand(1, &[4, 4, 4]), &rand(2, &[2, 2, 4]));
        assert!(matches!(m.forward(&mut tape, eg, bg), Err(Error::Dimension { .. })));
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(44);
        let cfg = LcafConfig { heads: 3, ..LcafConfig::default() };
        assert!(matches!(Lcaf::new(&mut Builder::new(&mut store, &mut rng), 4, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn cost_closed_forms() {
        assert_eq!(attention_cost(14, 14, 96, 7, 7), (14_601_216, 9_069_312));
        let (g, l) = attention_cost(8, 6, 5, 8, 6);
        assert_eq!(g, l);
    }

    fn counted_m_lca(h: usize, w: usize, d: usize, win: (usize, usize)) -> u64 {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded(45);
        let cfg = LcafConfig { window: win, heads: 2, ..LcafConfig::default() };
        let m = Lcaf::new(&mut Builder::new(&mut store, &mut rng), d, &cfg).unwrap();
        let x = Tensor::<f32>::full(&[h, w, d], 0.1);
        let mut tape = Tape::with_params(&store);
        let v = tape.input(&x);
        let g = TokenGrid::from_var(&tape, v).unwrap();
        m.m_lca(&mut tape, g, g).unwrap();
        tape.counter().multiply_adds
    }

    #[test]
    fn measured_ops_equal_closed_form() {
        for (h, w, d, win) in [(8, 8, 4, (2, 2)), (6, 4, 6, (3, 2)), (4, 4, 8, (4, 4))] {
            let (_, lca) = attention_cost(h as u64, w as u64, d as u64, win.0 as u64, win.1 as u64);
            assert_eq!(counted_m_lca(h, w, d, win), lca);
        }
    }

    #[test]
    fn attention_path_scales_linearly_in_tokens() {
        let d = 4;
        let path = |h: usize, w: usize| counted_m_lca(h, w, d, (2, 2)) - 4 * (h * w * d * d) as u64;
        let (small, large) = (path(8, 8), path(16, 8));
        assert!(large as f64 <= 2.0 * 1.05 * small as f64);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn local_never_exceeds_global(h in 1u64..64, w in 1u64..64, c in 1u64..512, fy in 0.0f64..1.0, fx in 0.0f64..1.0) {
            let hl = 1 + ((h - 1) as f64 * fy) as u64;
            let wl = 1 + ((w - 1) as f64 * fx) as u64;
            let (g, l) = attention_cost(h, w, c, hl, wl);
            prop_assert!(l <= g);
        }
    }
}
