//! Central finite-difference oracle for every primitive op.
//!
//! Each case draws random small inputs (every extent ≤ 4), reduces the op's
//! output to a scalar with a fixed random weighting `sum(out ⊙ R)`, and
//! compares the tape's gradient with `(f(x+h) - f(x-h)) / 2h` element by
//! element. The forward re-evaluations only use `Graph` values, never the
//! backward pass.

use choreo_tensor::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

pub struct OpSpec {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> Case,
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

fn dim2(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(2..=4)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Values bounded away from zero so ReLU's kink is not straddled by ±h.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.05..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn unary(inputs: Vec<Tensor>, f: fn(&mut Graph, Var) -> Result<Var>) -> Case {
    Case {
        inputs,
        build: Box::new(move |g, v| f(g, v[0])),
    }
}

fn binary(inputs: Vec<Tensor>, f: fn(&mut Graph, Var, Var) -> Result<Var>) -> Case {
    Case {
        inputs,
        build: Box::new(move |g, v| f(g, v[0], v[1])),
    }
}

pub fn ops() -> Vec<OpSpec> {
    vec![
        OpSpec {
            name: "matmul",
            make: |r| {
                let (m, k, n) = (dim(r), dim(r), dim(r));
                let lead = if r.gen_bool(0.5) { vec![dim(r), m, k] } else { vec![m, k] };
                binary(vec![randn(&lead, r), randn(&[k, n], r)], Graph::matmul)
            },
        },
        OpSpec {
            name: "bmm",
            make: |r| {
                let (b, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
                binary(vec![randn(&[b, m, k], r), randn(&[b, k, n], r)], Graph::bmm)
            },
        },
        OpSpec {
            name: "transpose_last",
            make: |r| unary(vec![randn(&[dim(r), dim(r), dim(r)], r)], Graph::transpose_last),
        },
        OpSpec {
            name: "add",
            make: |r| {
                let s = [dim(r), dim(r), dim(r)];
                binary(vec![randn(&s, r), randn(&s, r)], Graph::add)
            },
        },
        OpSpec {
            name: "sub",
            make: |r| {
                let s = [dim(r), dim(r)];
                binary(vec![randn(&s, r), randn(&s, r)], Graph::sub)
            },
        },
        OpSpec {
            name: "mul",
            make: |r| {
                let s = [dim(r), dim(r), dim(r)];
                binary(vec![randn(&s, r), randn(&s, r)], Graph::mul)
            },
        },
        OpSpec {
            name: "add_row",
            make: |r| {
                let c = dim(r);
                binary(vec![randn(&[dim(r), dim(r), c], r), randn(&[c], r)], Graph::add_row)
            },
        },
        OpSpec {
            name: "mul_row",
            make: |r| {
                let c = dim(r);
                binary(vec![randn(&[dim(r), c], r), randn(&[c], r)], Graph::mul_row)
            },
        },
        OpSpec {
            name: "scale",
            make: |r| {
                let c = r.gen_range(-2.0..2.0);
                Case {
                    inputs: vec![randn(&[dim(r), dim(r)], r)],
                    build: Box::new(move |g, v| g.scale(v[0], c)),
                }
            },
        },
        OpSpec {
            name: "add_scalar",
            make: |r| {
                let c = r.gen_range(-2.0..2.0);
                Case {
                    inputs: vec![randn(&[dim(r), dim(r)], r)],
                    build: Box::new(move |g, v| g.add_scalar(v[0], c)),
                }
            },
        },
        OpSpec {
            name: "relu",
            make: |r| unary(vec![away_from_zero(&[dim(r), dim(r), dim(r)], r)], Graph::relu),
        },
        OpSpec {
            name: "gelu",
            make: |r| unary(vec![randn(&[dim(r), dim(r), dim(r)], r)], Graph::gelu),
        },
        OpSpec {
            name: "sigmoid",
            make: |r| unary(vec![randn(&[dim(r), dim(r), dim(r)], r)], Graph::sigmoid),
        },
        OpSpec {
            name: "softmax",
            make: |r| unary(vec![randn(&[dim(r), dim(r), dim2(r)], r)], Graph::softmax),
        },
        OpSpec {
            name: "layer_norm",
            make: |r| Case {
                inputs: vec![randn(&[dim(r), dim(r), r.gen_range(3..=4)], r)],
                build: Box::new(|g, v| g.layer_norm(v[0], 1e-5)),
            },
        },
        OpSpec {
            name: "mse",
            make: |r| {
                let s = [dim(r), dim(r)];
                binary(vec![randn(&s, r), randn(&s, r)], Graph::mse)
            },
        },
        OpSpec {
            name: "concat",
            make: |r| {
                let axis = r.gen_range(0..3);
                let mut s1 = vec![dim(r), dim(r), dim(r)];
                let mut s2 = s1.clone();
                s1[axis] = dim(r);
                s2[axis] = dim(r);
                let inputs = vec![randn(&s1, r), randn(&s2, r)];
                Case {
                    inputs,
                    build: Box::new(move |g, v| g.concat(v, axis)),
                }
            },
        },
        OpSpec {
            name: "slice_axis",
            make: |r| {
                let s = [dim2(r), dim2(r), dim2(r)];
                let axis = r.gen_range(0..3);
                let start = r.gen_range(0..s[axis] - 1);
                let end = r.gen_range(start + 1..=s[axis]);
                Case {
                    inputs: vec![randn(&s, r)],
                    build: Box::new(move |g, v| g.slice_axis(v[0], axis, start, end)),
                }
            },
        },
        OpSpec {
            name: "conv1d",
            make: |r| {
                let k = if r.gen_bool(0.5) { 1 } else { 3 };
                let (b, t, ci, co) = (dim(r), dim(r), dim(r), dim(r));
                Case {
                    inputs: vec![randn(&[b, t, ci], r), randn(&[k, ci, co], r), randn(&[co], r)],
                    build: Box::new(|g, v| g.conv1d(v[0], v[1], v[2])),
                }
            },
        },
        OpSpec {
            name: "mean_axis",
            make: |r| {
                let axis = r.gen_range(0..3);
                Case {
                    inputs: vec![randn(&[dim(r), dim(r), dim(r)], r)],
                    build: Box::new(move |g, v| g.mean_axis(v[0], axis)),
                }
            },
        },
        OpSpec {
            name: "reshape",
            make: |r| {
                let (a, b) = (dim(r), dim(r));
                Case {
                    inputs: vec![randn(&[a, b], r)],
                    build: Box::new(move |g, v| g.reshape(v[0], &[b, a])),
                }
            },
        },
        OpSpec {
            name: "sum",
            make: |r| unary(vec![randn(&[dim(r), dim(r)], r)], Graph::sum),
        },
        OpSpec {
            name: "mean",
            make: |r| unary(vec![randn(&[dim(r), dim(r), dim(r)], r)], Graph::mean),
        },
        OpSpec {
            name: "cosine_rows",
            make: |r| {
                let s = [dim(r), dim2(r)];
                binary(vec![randn(&s, r), randn(&s, r)], Graph::cosine_rows)
            },
        },
        OpSpec {
            name: "cross_entropy",
            make: |r| {
                let (b, c) = (dim(r), dim2(r));
                let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..c)).collect();
                Case {
                    inputs: vec![randn(&[b, c], r)],
                    build: Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
                }
            },
        },
    ]
}

fn weighted_loss(
    case: &Case,
    inputs: &[Tensor],
    weights: &Tensor,
    track: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if track { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect::<Result<_>>()?;
    let out = (case.build)(&mut g, &vars)?;
    let wv = g.constant(weights.clone())?;
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod)?;
    let value = g.value(loss).item();
    if !track {
        return Ok((value, None));
    }
    let grads = g.backward(loss)?;
    let gs = vars
        .iter()
        .map(|v| grads.get(*v).cloned().expect("every input is differentiable"))
        .collect();
    Ok((value, Some(gs)))
}

/// Largest relative error between analytic and numeric gradients of one case.
pub fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<f64> {
    // Output shape, then a fixed random weighting.
    let mut probe = Graph::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|t| probe.constant(t.clone()))
        .collect::<Result<_>>()?;
    let out = (case.build)(&mut probe, &vars)?;
    let weights = randn(probe.shape(out), rng);

    let (_, analytic) = weighted_loss(case, &case.inputs, &weights, true)?;
    let analytic = analytic.unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in case.inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let (fp, _) = weighted_loss(case, &plus, &weights, false)?;
            let (fm, _) = weighted_loss(case, &minus, &weights, false)?;
            let numeric = (fp - fm) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Worst relative error over `cases` random draws of `op`.
pub fn check_op(op: &OpSpec, cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let case = (op.make)(&mut rng);
        worst = worst.max(check_case(&case, &mut rng)?);
    }
    Ok(worst)
}
