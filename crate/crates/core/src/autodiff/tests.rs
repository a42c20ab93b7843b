use rand::Rng;

use super::*;
use crate::gradcheck::{check_inputs, DEFAULT_EPS, DEFAULT_TOL};
use crate::rng::{seeded, uniform, SeededRng};

const TRIALS: u64 = 50;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn rand_t(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

/// Random values bounded away from zero, for ops with a kink at 0.
fn rand_away_from_zero(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let mut x = rand_t(rng, shape);
    for v in x.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    x
}

// Shape-first helpers so the shape can be drawn from the same generator.
fn rand_s<const N: usize>(shape: [usize; N], rng: &mut SeededRng) -> Tensor<f64> {
    rand_t(rng, &shape)
}

fn away_s<const N: usize>(shape: [usize; N], rng: &mut SeededRng) -> Tensor<f64> {
    rand_away_from_zero(rng, &shape)
}

fn uniform_s<const N: usize>(shape: [usize; N], rng: &mut SeededRng, lo: f64, hi: f64) -> Tensor<f64> {
    uniform(rng, &shape, lo, hi)
}

fn dim(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Projects an op's output onto a fixed random direction so every output
/// element contributes to the checked scalar.
fn project(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = seeded(seed ^ 0x5eed);
    let r = rand_t(&mut rng, tape.shape(out));
    let r = tape.input(&r);
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

fn gradcheck_op<G, F>(name: &str, gen: G, f: F)
where
    G: Fn(&mut SeededRng) -> Vec<Tensor<f64>>,
    F: Fn(&mut Tape<'_, f64>, &[Var], &mut SeededRng) -> Result<Var>,
{
    for trial in 0..TRIALS {
        let mut rng = seeded(1000 + trial);
        let inputs = gen(&mut rng);
        let op_seed = rng.random::<u64>();
        let report = check_inputs(&inputs, DEFAULT_EPS, |tape, vars| {
            let mut r = seeded(op_seed);
            let out = f(tape, vars, &mut r)?;
            project(tape, out, op_seed)
        })
        .unwrap();
        assert!(
            report.passed(DEFAULT_TOL),
            "{name} trial {trial}: max rel error {:.3e} at {}",
            report.max_rel_error,
            report.worst
        );
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
    let y = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn detached_graph_gives_no_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
    let c = tape.input(&t(&[2], &[3.0, 4.0]));
    let _unused = tape.scale(x, 2.0);
    let loss = tape.sum(c);
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(x).is_none());
}

#[test]
fn params_reach_store_gradients() {
    let mut store = ParamStore::<f64>::new();
    let w = store.register("w", t(&[2], &[3.0, -1.0])).unwrap();
    let mut tape = Tape::with_params(&store);
    let a = tape.param(w);
    let b = tape.param(w);
    assert_eq!(a, b, "a parameter is loaded onto the tape once");
    let sq = tape.mul(a, b).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    store.accumulate(&g, 1.0).unwrap();
    assert_eq!(store.get(w).grad().unwrap(), &[6.0, -2.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(&Tensor::zeros(&[3]));
    let y = tape.softmax(x);
    for &v in tape.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_are_stochastic() {
    let mut rng = seeded(3);
    for _ in 0..20 {
        let rows = dim(&mut rng, 1, 6);
        let cols = dim(&mut rng, 1, 9);
        let x: Tensor<f64> = uniform(&mut rng, &[rows, cols], -30.0, 30.0);
        let mut tape = Tape::new();
        let v = tape.input(&x);
        let y = tape.softmax(v);
        for row in tape.value(y).chunks(cols) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn layer_norm_normalizes_token() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(&t(&[1, 3], &[2.0, 4.0, 6.0]));
    let g = tape.input(&Tensor::full(&[3], 1.0));
    let b = tape.input(&Tensor::zeros(&[3]));
    let y = tape.layer_norm(x, g, b).unwrap();
    let v = tape.value(y);
    let mean = v.iter().sum::<f64>() / 3.0;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-5);
    assert!((var - 1.0).abs() < 1e-5);
}

#[test]
fn conv_of_constant_with_ones_kernel() {
    let c = 2.5;
    let mut tape = Tape::<f64>::new();
    let x = tape.input(&Tensor::full(&[5, 6, 1], c));
    let w = tape.input(&Tensor::full(&[3, 3, 1, 1], 1.0));
    let y = tape.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[3, 4, 1]);
    assert!(tape.value(y).iter().all(|&v| (v - 9.0 * c).abs() < 1e-12));
}

#[test]
fn shape_mismatch_names_operands() {
    let mut tape = Tape::<f64>::new();
    let a = tape.input(&Tensor::zeros(&[2, 3]));
    let b = tape.input(&Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    assert!(tape.add(a, b).is_err());
}

#[test]
fn matmul_counts_mnk_multiply_adds() {
    let mut rng = seeded(9);
    for _ in 0..10 {
        let (m, k, n) = (dim(&mut rng, 1, 9), dim(&mut rng, 1, 9), dim(&mut rng, 1, 9));
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&rand_t(&mut rng, &[m, k]));
        let b = tape.input(&rand_t(&mut rng, &[k, n]));
        let before = tape.counter().multiply_adds;
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.counter().multiply_adds - before, (m * n * k) as u64);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = seeded(77);
        let x = rand_t(&mut rng, &[4, 5]);
        let w = rand_t(&mut rng, &[5, 3]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let wv = tape.leaf(&w);
        let y = tape.matmul(xv, wv).unwrap();
        let y = tape.gelu(y);
        let y = tape.softmax(y);
        let loss = tape.sum(y);
        let loss = project(&mut tape, loss, 1).unwrap();
        let value = tape.item(loss);
        let g = tape.backward(loss).unwrap();
        (value.to_bits(), g.wrt(xv).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn gradcheck_elementwise_binary() {
    let gen = |r: &mut SeededRng| {
        let rank = dim(r, 1, 3);
        let shape: Vec<usize> = (0..rank).map(|_| dim(r, 1, 4)).collect();
        vec![rand_t(r, &shape), rand_t(r, &shape)]
    };
    gradcheck_op("add", gen, |t, v, _| t.add(v[0], v[1]));
    gradcheck_op("sub", gen, |t, v, _| t.sub(v[0], v[1]));
    gradcheck_op("mul", gen, |t, v, _| t.mul(v[0], v[1]));
}

#[test]
fn gradcheck_broadcast() {
    let gen = |r: &mut SeededRng| {
        let (rows, d) = (dim(r, 1, 5), dim(r, 1, 5));
        vec![rand_t(r, &[rows, 2, d]), rand_t(r, &[2, d])]
    };
    gradcheck_op("add_broadcast", gen, |t, v, _| t.add_broadcast(v[0], v[1]));
    gradcheck_op("mul_broadcast", gen, |t, v, _| t.mul_broadcast(v[0], v[1]));
    gradcheck_op(
        "add_const",
        |r| vec![rand_s([dim(r, 1, 4), 3], r)],
        |t, v, r| {
            let c = rand_t(r, &[3]);
            t.add_const(v[0], &c)
        },
    );
}

#[test]
fn gradcheck_scalar_ops() {
    let gen = |r: &mut SeededRng| vec![rand_s([dim(r, 1, 6), dim(r, 1, 4)], r)];
    gradcheck_op("scale", gen, |t, v, _| Ok(t.scale(v[0], -1.7)));
    gradcheck_op("add_scalar", gen, |t, v, _| Ok(t.add_scalar(v[0], 0.3)));
}

#[test]
fn gradcheck_matmul() {
    gradcheck_op(
        "matmul",
        |r| {
            let (b, m, k, n) = (dim(r, 1, 3), dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
            vec![rand_t(r, &[b, m, k]), rand_t(r, &[k, n])]
        },
        |t, v, _| t.matmul(v[0], v[1]),
    );
    gradcheck_op(
        "linear",
        |r| {
            let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
            vec![rand_t(r, &[m, k]), rand_t(r, &[k, n]), rand_t(r, &[n])]
        },
        |t, v, _| t.linear(v[0], v[1], Some(v[2])),
    );
}

#[test]
fn gradcheck_bmm() {
    for trans_b in [false, true] {
        gradcheck_op(
            "bmm",
            |r| {
                let (b, m, k, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
                let bshape = if trans_b { [b, n, k] } else { [b, k, n] };
                vec![rand_t(r, &[b, m, k]), rand_t(r, &bshape)]
            },
            |t, v, _| t.bmm(v[0], v[1], trans_b),
        );
    }
}

#[test]
fn gradcheck_softmax_and_layer_norm() {
    gradcheck_op(
        "softmax",
        |r| vec![uniform_s([dim(r, 1, 4), dim(r, 1, 6)], r, -3.0, 3.0)],
        |t, v, _| Ok(t.softmax(v[0])),
    );
    gradcheck_op(
        "layer_norm",
        |r| {
            let d = dim(r, 2, 6);
            vec![uniform_s([dim(r, 1, 4), d], r, -2.0, 2.0), rand_t(r, &[d]), rand_t(r, &[d])]
        },
        |t, v, _| t.layer_norm(v[0], v[1], v[2]),
    );
}

#[test]
fn gradcheck_activations() {
    let gen = |r: &mut SeededRng| vec![away_s([dim(r, 1, 5), dim(r, 1, 5)], r)];
    gradcheck_op("relu", gen, |t, v, _| Ok(t.relu(v[0])));
    gradcheck_op("gelu", gen, |t, v, _| Ok(t.gelu(v[0])));
    gradcheck_op("sigmoid", gen, |t, v, _| Ok(t.sigmoid(v[0])));
    gradcheck_op(
        "ln",
        |r| vec![uniform_s([dim(r, 1, 5)], r, 0.5, 2.0)],
        |t, v, _| Ok(t.ln(v[0])),
    );
    gradcheck_op(
        "recip",
        |r| vec![uniform_s([dim(r, 1, 5)], r, 0.5, 2.0)],
        |t, v, _| Ok(t.recip(v[0])),
    );
    // Values stay clear of the clamp bounds so the check never straddles a kink.
    gradcheck_op(
        "clamp",
        |r| {
            let mut x = rand_s([dim(r, 2, 8)], r);
            x.data_mut().iter_mut().for_each(|v| {
                if v.abs() > 0.45 && v.abs() < 0.55 {
                    *v *= 1.5;
                }
            });
            vec![x]
        },
        |t, v, _| Ok(t.clamp(v[0], -0.5, 0.5)),
    );
}

#[test]
fn gradcheck_reductions() {
    let gen = |r: &mut SeededRng| vec![rand_s([dim(r, 1, 4), dim(r, 1, 3), dim(r, 1, 4)], r)];
    gradcheck_op("sum", gen, |t, v, _| Ok(t.sum(v[0])));
    gradcheck_op("mean", gen, |t, v, _| Ok(t.mean(v[0])));
    gradcheck_op("sum_leading", gen, |t, v, _| Ok(t.sum_leading(v[0])));
    gradcheck_op("mean_leading", gen, |t, v, _| Ok(t.mean_leading(v[0])));
}

#[test]
fn gradcheck_convolutions() {
    gradcheck_op(
        "conv2d",
        |r| {
            let k = dim(r, 1, 3);
            let (h, w) = (dim(r, k, 6), dim(r, k, 6));
            let (ci, co) = (dim(r, 1, 3), dim(r, 1, 3));
            vec![rand_t(r, &[h, w, ci]), rand_t(r, &[k, k, ci, co])]
        },
        |t, v, r| {
            let stride = dim(r, 1, 2);
            let pad = dim(r, 0, 1);
            t.conv2d(v[0], v[1], stride, pad)
        },
    );
    gradcheck_op(
        "depthwise_conv2d",
        |r| {
            let k = [1, 3, 5][dim(r, 0, 2)];
            let (h, w) = (dim(r, k, 7), dim(r, k, 7));
            let c = dim(r, 1, 3);
            vec![rand_t(r, &[h, w, c]), rand_t(r, &[k, k, c])]
        },
        |t, v, r| {
            let stride = dim(r, 1, 2);
            let pad = dim(r, 0, 2);
            t.depthwise_conv2d(v[0], v[1], stride, pad)
        },
    );
}

#[test]
fn gradcheck_spatial_resampling() {
    gradcheck_op(
        "max_pool2d",
        |r| vec![rand_s([2 * dim(r, 1, 3), 2 * dim(r, 1, 3), dim(r, 1, 3)], r)],
        |t, v, _| t.max_pool2d(v[0]),
    );
    gradcheck_op(
        "upsample_nearest",
        |r| vec![rand_s([dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 2)], r)],
        |t, v, r| {
            let f = dim(r, 1, 4);
            t.upsample_nearest(v[0], f)
        },
    );
    gradcheck_op(
        "pad_replicate",
        |r| vec![rand_s([dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 2)], r)],
        |t, v, r| {
            let p = dim(r, 0, 2);
            t.pad_replicate(v[0], p)
        },
    );
}

#[test]
fn pad_replicate_repeats_border() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(&t(&[1, 2, 1], &[1.0, 2.0]));
    let y = tape.pad_replicate(x, 1).unwrap();
    assert_eq!(tape.shape(y), &[3, 4, 1]);
    assert_eq!(tape.value(y), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
}

#[test]
fn gradcheck_data_movement() {
    let gen3 = |r: &mut SeededRng| vec![rand_s([dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4)], r)];
    gradcheck_op("permute", gen3, |t, v, _| t.permute(v[0], &[2, 0, 1]));
    gradcheck_op("reshape", gen3, |t, v, _| {
        let n = t.value(v[0]).len();
        t.reshape(v[0], &[n])
    });
    gradcheck_op("slice", gen3, |t, v, r| {
        let axis = dim(r, 0, 2);
        let size = t.shape(v[0])[axis];
        let start = dim(r, 0, size - 1);
        let len = dim(r, 1, size - start);
        t.slice(v[0], axis, start, len)
    });
    gradcheck_op("gather", gen3, |t, v, r| {
        let n = t.value(v[0]).len();
        let idx: Vec<usize> = (0..7).map(|_| r.random_range(0..n)).collect();
        t.gather(v[0], idx, &[7])
    });
    gradcheck_op(
        "concat",
        |r| {
            let (a, b) = (dim(r, 1, 3), dim(r, 1, 3));
            vec![rand_t(r, &[2, a, 3]), rand_t(r, &[2, b, 3]), rand_t(r, &[2, 1, 3])]
        },
        |t, v, _| t.concat(v, 1),
    );
    gradcheck_op(
        "combine_rows",
        |r| vec![rand_s([4, dim(r, 1, 3)], r)],
        |t, v, r| {
            let terms: Vec<(usize, usize, f64)> =
                (0..6).map(|_| (r.random_range(0..3), r.random_range(0..4), r.random_range(-2.0..2.0))).collect();
            t.combine_rows(v[0], 3, terms)
        },
    );
}

#[test]
fn permute_transposes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = tape.permute(x, &[1, 0]).unwrap();
    assert_eq!(tape.shape(y), &[3, 2]);
    assert_eq!(tape.value(y), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
}
