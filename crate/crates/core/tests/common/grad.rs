//! Finite-difference gradient checks for tape primitives and the codec
//! objective.

use holomotion::codec::{Codec, CodecConfig, Variant};
use holomotion::gradcore::nn::{causal_mask, Transformer};
use holomotion::gradcore::{Array, ParamStore, Tape, Var};
use holomotion::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const CODEC_TOLERANCE: f64 = 1e-3;
pub const SHAPES_PER_PRIMITIVE: usize = 5;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub inputs: Vec<Array>,
    pub build: Build,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::randn(shape, 1.0, rng)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

/// `Σ out ⊙ w` for a fixed weighting, so non-scalar outputs reduce to a
/// scalar whose gradient exercises every output element.
fn weighted(out: &Array, w: &Array) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn evaluate(case: &Case, inputs: &[Array]) -> Result<Array> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.variable(a.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` for every input,
/// maximized over inputs.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn check(case: &Case, rng: &mut ChaCha8Rng) -> Result<f64> {
    let base = evaluate(case, &case.inputs)?;
    let w = randn(rng, base.shape());
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|a| tape.variable(a.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod);
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Array::zeros(case.inputs[k].shape()));
        let mut numeric = vec![0.0; case.inputs[k].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = case.inputs.to_vec();
            plus[k].data_mut()[j] += STEP;
            let mut minus = case.inputs.to_vec();
            minus[k].data_mut()[j] -= STEP;
            *slot = (weighted(&evaluate(case, &plus)?, &w) - weighted(&evaluate(case, &minus)?, &w)) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

fn case(inputs: Vec<Array>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { inputs, build: Box::new(build) }
}

/// Random instances of one primitive.
pub fn cases(name: &str, rng: &mut ChaCha8Rng) -> Vec<Case> {
    (0..SHAPES_PER_PRIMITIVE).map(|i| instance(name, i, rng)).collect()
}

fn instance(name: &str, i: usize, rng: &mut ChaCha8Rng) -> Case {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng) + 1);
    match name {
        "matmul" => match i % 3 {
            0 => case(vec![randn(rng, &[m, k]), randn(rng, &[k, n])], |t, v| t.matmul(v[0], v[1])),
            1 => case(vec![randn(rng, &[2, m, k]), randn(rng, &[2, k, n])], |t, v| t.matmul(v[0], v[1])),
            _ => case(vec![randn(rng, &[2, m, k]), randn(rng, &[k, n])], |t, v| t.matmul(v[0], v[1])),
        },
        "add" => case(vec![randn(rng, &[m, n]), randn(rng, &[m, n])], |t, v| t.add(v[0], v[1])),
        "sub" => case(vec![randn(rng, &[m, k, n]), randn(rng, &[m, k, n])], |t, v| t.sub(v[0], v[1])),
        "mul" => case(vec![randn(rng, &[m, n]), randn(rng, &[m, n])], |t, v| t.mul(v[0], v[1])),
        "scale" => {
            let s: f64 = rng.gen_range(-2.0..2.0);
            case(vec![randn(rng, &[m, n])], move |t, v| Ok(t.scale(v[0], s)))
        }
        "add_scalar" => {
            let s: f64 = rng.gen_range(-2.0..2.0);
            case(vec![randn(rng, &[m, n])], move |t, v| Ok(t.add_scalar(v[0], s)))
        }
        "add_bias" => case(vec![randn(rng, &[m, k, n]), randn(rng, &[n])], |t, v| t.add_bias(v[0], v[1])),
        "concat" => {
            let axis = i % 3;
            let mut s1 = vec![m, k, n];
            let mut s2 = s1.clone();
            s1[axis] = dim(rng);
            s2[axis] = dim(rng);
            case(vec![randn(rng, &[m, k, n]), randn(rng, &s1), randn(rng, &s2)], move |t, v| t.concat(&[v[0], v[1], v[2]], axis))
        }
        "slice" => {
            let axis = i % 3;
            let shape = [m + 1, k + 1, n];
            let len = rng.gen_range(1..=shape[axis]);
            let start = rng.gen_range(0..=shape[axis] - len);
            case(vec![randn(rng, &shape)], move |t, v| t.slice(v[0], axis, start, len))
        }
        "reshape" => case(vec![randn(rng, &[m, k, n])], move |t, v| t.reshape(v[0], &[m * k, n])),
        "permute" => {
            let perms = [[1, 0, 2], [2, 1, 0], [0, 2, 1], [1, 2, 0], [2, 0, 1]];
            let p = perms[i % 5];
            case(vec![randn(rng, &[m, k, n])], move |t, v| t.permute(v[0], &p))
        }
        "transpose" => case(vec![randn(rng, &[m, k, n])], |t, v| t.transpose(v[0])),
        "sum" => case(vec![randn(rng, &[m, k, n])], |t, v| Ok(t.sum(v[0]))),
        "mean" => case(vec![randn(rng, &[m, k, n])], |t, v| Ok(t.mean(v[0]))),
        "sum_axis" => {
            let axis = i % 3;
            case(vec![randn(rng, &[m, k, n])], move |t, v| t.sum_axis(v[0], axis))
        }
        "relu" => case(vec![randn(rng, &[m, k, n])], |t, v| Ok(t.relu(v[0]))),
        "gelu" => case(vec![randn(rng, &[m, k, n])], |t, v| Ok(t.gelu(v[0]))),
        "sigmoid" => case(vec![randn(rng, &[m, k, n])], |t, v| Ok(t.sigmoid(v[0]))),
        "exp" => case(vec![randn(rng, &[m, k, n])], |t, v| Ok(t.exp(v[0]))),
        "softmax" => {
            let axis = i % 3;
            case(vec![randn(rng, &[m, k, n])], move |t, v| t.softmax(v[0], axis))
        }
        "layer_norm" => case(vec![randn(rng, &[m, k, n + 1]), randn(rng, &[n + 1]), randn(rng, &[n + 1])], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        "embedding" => {
            let rows = dim(rng) + 1;
            let idx: Vec<usize> = (0..m + k).map(|_| rng.gen_range(0..rows)).collect();
            case(vec![randn(rng, &[rows, n])], move |t, v| t.embedding(v[0], &idx))
        }
        "conv1d" => {
            let kernel = 1 + i % 3;
            let stride = 1 + i % 2;
            let pad = i % 2;
            let t_in = kernel + dim(rng) + 1;
            case(vec![randn(rng, &[m, t_in, k]), randn(rng, &[kernel * k, n]), randn(rng, &[n])], move |t, v| {
                t.conv1d(v[0], v[1], v[2], kernel, stride, pad)
            })
        }
        "upsample2" => case(vec![randn(rng, &[m, k, n])], |t, v| t.upsample2(v[0])),
        "add_mask" => {
            let mask = randn(rng, &[k, n]);
            case(vec![randn(rng, &[m, k, n])], move |t, v| t.add_mask(v[0], &mask))
        }
        "mse" => case(vec![randn(rng, &[m, k, n]), randn(rng, &[m, k, n])], |t, v| t.mse(v[0], v[1])),
        "smooth_l1" => case(vec![randn(rng, &[m, k, n]), randn(rng, &[m, k, n])], |t, v| t.smooth_l1(v[0], v[1])),
        "cross_entropy" => {
            let rows = m + k;
            let targets: Vec<Option<usize>> = (0..rows).map(|r| (r % 3 != 2).then(|| rng.gen_range(0..n))).collect();
            // one masked class per row, never the target
            let mut mask = vec![0.0; rows * n];
            for (r, t) in targets.iter().enumerate() {
                let c = (t.unwrap_or(0) + 1) % n;
                mask[r * n + c] = f64::NEG_INFINITY;
            }
            let mask = Array::new(&[rows, n], mask).unwrap();
            case(vec![randn(rng, &[rows, n])], move |t, v| {
                let x = t.add_mask(v[0], &mask)?;
                t.cross_entropy(x, &targets)
            })
        }
        "kl_diag" => case(
            vec![randn(rng, &[m, n]), randn(rng, &[m, n]), randn(rng, &[m, n]), randn(rng, &[m, n])],
            |t, v| t.kl_diag(v[0], v[1], v[2], v[3]),
        ),
        "info_nce" => {
            let rows = m + 2;
            let mask: Vec<bool> = (0..rows * rows).map(|_| rng.gen_bool(0.8)).collect();
            let tau = rng.gen_range(0.05..1.0);
            case(vec![randn(rng, &[rows, n]), randn(rng, &[rows, n])], move |t, v| t.info_nce(v[0], v[1], tau, &mask))
        }
        "attention" => {
            let heads = 1 + i % 2;
            let width = 2 * heads;
            let mut store = ParamStore::new();
            let tf = Transformer::new(&mut store, "tf", 1, width, heads, rng);
            let len = k + 1;
            let mask = causal_mask(len);
            let use_mask = i % 2 == 0;
            case(vec![randn(rng, &[m, len, width])], move |t, v| tf.forward(t, &store, v[0], use_mask.then_some(&mask)))
        }
        other => panic!("no gradient case for {other}"),
    }
}

pub const PRIMITIVES: [&str; 31] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "add_bias",
    "concat",
    "slice",
    "reshape",
    "permute",
    "transpose",
    "sum",
    "mean",
    "sum_axis",
    "relu",
    "gelu",
    "sigmoid",
    "exp",
    "softmax",
    "layer_norm",
    "embedding",
    "conv1d",
    "upsample2",
    "add_mask",
    "mse",
    "smooth_l1",
    "cross_entropy",
    "kl_diag",
    "info_nce",
    "attention",
];

/// Worst relative error over all instances of `name`.
pub fn check_primitive(name: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases(name, &mut rng)
        .iter()
        .map(|c| check(c, &mut rng).unwrap_or_else(|e| panic!("{name}: {e}")))
        .fold(0.0, f64::max)
}

pub fn tiny_codec(variant: Variant) -> Codec {
    let cfg = CodecConfig {
        variant,
        width: 6,
        code_dim: 3,
        res_blocks: 1,
        codebook_size: 8,
        hand_codebook_size: 8,
        window: 8,
        ..Default::default()
    };
    Codec::new(cfg, 4, 5).unwrap()
}

/// Outcome of the codec gradient check.
#[derive(Debug)]
pub struct CodecCheck {
    pub worst: f64,
    pub entries: usize,
    /// Entries whose ±h evaluations straddle a ReLU kink.
    pub kinks: usize,
}

/// Relative error of the codec objective's parameter gradients against
/// finite differences of the straight-through surrogate. Where the two
/// one-sided slopes disagree, an activation changed sign within ±h; the
/// numeric estimate there is the one-sided slope that stays on one side.
pub fn check_codec(variant: Variant, seed: u64) -> CodecCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codec = tiny_codec(variant);
    let body = randn(&mut rng, &[2, 8, 4]);
    let hand = randn(&mut rng, &[2, 8, 5]);
    let mut tape = Tape::new();
    let fwd = codec.forward(&mut tape, &body, &hand).unwrap();
    let base = fwd.assignments.clone();
    let grads = tape.backward(fwd.total).unwrap().params();
    let surrogate = |c: &Codec| {
        let mut t = Tape::new();
        let f = c.straight_through_surrogate(&mut t, &body, &hand, &base).unwrap();
        t.value(f.total).item()
    };
    let centre = surrogate(&codec);
    let mut out = CodecCheck { worst: 0.0, entries: 0, kinks: 0 };
    let ids: Vec<_> = codec.store.ids().collect();
    for id in ids {
        let analytic = grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Array::zeros(codec.store.value(id).shape()));
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = codec.store.value(id).data()[j];
            codec.store.get_mut(id).value.data_mut()[j] = orig + STEP;
            let plus = surrogate(&codec);
            codec.store.get_mut(id).value.data_mut()[j] = orig - STEP;
            let minus = surrogate(&codec);
            codec.store.get_mut(id).value.data_mut()[j] = orig;
            let (right, left) = ((plus - centre) / STEP, (centre - minus) / STEP);
            *slot = if (right - left).abs() > 0.01 * right.abs().max(left.abs()) + 1e-12 {
                out.kinks += 1;
                let a = analytic.data()[j];
                if (a - right).abs() < (a - left).abs() {
                    right
                } else {
                    left
                }
            } else {
                (plus - minus) / (2.0 * STEP)
            };
        }
        out.entries += numeric.len();
        out.worst = out.worst.max(relative_error(analytic.data(), &numeric));
    }
    out
}
