//! Central finite-difference checks of the tape's backward rules.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::{self, Rng};
use crate::{Array, Result, Tape, Var};

pub type Graph = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Relative L2 error between an analytic and a numeric gradient.
///
/// Falls back to the absolute error when both are (near) zero.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let d = math::sqrt(sq(&diff));
    let scale = math::sqrt(sq(analytic)).max(math::sqrt(sq(numeric)));
    if scale < 1e-8 {
        d
    } else {
        d / scale
    }
}

fn weighted_loss(inputs: &[Array], graph: &Graph, weights: &Array) -> Result<f64> {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
    let out = graph(&mut t, &vars)?;
    Ok(t.value(out).mul(weights)?.sum())
}

/// Worst relative error over all inputs of `sum(graph(inputs) * R)` for a random `R`.
pub fn max_rel_error(inputs: &[Array], graph: &Graph, h: f64, rng: &mut Rng) -> Result<f64> {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
    let out = graph(&mut t, &vars)?;
    let (r, c) = t.shape(out);
    let weights = rng::normal_array(rng, r, c);
    let weighted = t.mul_const(out, weights.clone())?;
    let loss = t.sum(weighted);
    t.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = t.grad(*v);
        let mut numeric = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            numeric.push((weighted_loss(&plus, graph, &weights)? - weighted_loss(&minus, graph, &weights)?) / (2.0 * h));
        }
        worst = worst.max(rel_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

/// Outcome for one op.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub trials: usize,
    pub worst: f64,
}

struct Spec {
    op: &'static str,
    /// Input shapes from `(rows, cols)`.
    shapes: fn(usize, usize) -> Vec<(usize, usize)>,
    /// Points where the op is not differentiable.
    kinks: &'static [f64],
    graph: Box<Graph>,
}

fn same2(r: usize, c: usize) -> Vec<(usize, usize)> {
    vec![(r, c), (r, c)]
}

fn one(r: usize, c: usize) -> Vec<(usize, usize)> {
    vec![(r, c)]
}

fn registry() -> Vec<Spec> {
    let unary = |op: &'static str, kinks: &'static [f64], f: fn(&mut Tape, Var) -> Var| Spec {
        op,
        shapes: one,
        kinks,
        graph: Box::new(move |t: &mut Tape, v: &[Var]| Ok(f(t, v[0]))),
    };
    vec![
        Spec {
            op: "matmul",
            shapes: |r, c| vec![(r, c), (c, r)],
            kinks: &[],
            graph: Box::new(|t, v| t.matmul(v[0], v[1])),
        },
        Spec {
            op: "add",
            shapes: same2,
            kinks: &[],
            graph: Box::new(|t, v| t.add(v[0], v[1])),
        },
        Spec {
            op: "sub",
            shapes: same2,
            kinks: &[],
            graph: Box::new(|t, v| t.sub(v[0], v[1])),
        },
        Spec {
            op: "mul",
            shapes: same2,
            kinks: &[],
            graph: Box::new(|t, v| t.mul(v[0], v[1])),
        },
        Spec {
            op: "add_row",
            shapes: |r, c| vec![(r, c), (1, c)],
            kinks: &[],
            graph: Box::new(|t, v| t.add_row(v[0], v[1])),
        },
        unary("scale", &[], |t, x| t.scale(x, -1.7)),
        unary("silu", &[], |t, x| t.silu(x)),
        unary("relu", &[0.0], |t, x| t.relu(x)),
        unary("exp", &[], |t, x| t.exp(x)),
        unary("softplus", &[], |t, x| t.softplus(x)),
        unary("clamp", &[-0.5, 0.7], |t, x| t.clamp(x, -0.5, 0.7)),
        unary("square", &[], |t, x| t.square(x)),
        unary("sum", &[], |t, x| t.sum(x)),
        unary("mean", &[], |t, x| t.mean(x)),
        unary("sum_rows", &[], |t, x| t.sum_rows(x)),
        unary("transpose", &[], |t, x| t.transpose(x)),
        Spec {
            op: "broadcast_rows",
            shapes: |_, c| vec![(1, c)],
            kinks: &[],
            graph: Box::new(|t, v| t.broadcast_rows(v[0], 3)),
        },
        Spec {
            op: "broadcast_scalar",
            shapes: |_, _| vec![(1, 1)],
            kinks: &[],
            graph: Box::new(|t, v| t.broadcast_scalar(v[0], 2, 3)),
        },
        Spec {
            op: "concat",
            shapes: |r, c| vec![(r, c), (r, 2)],
            kinks: &[],
            graph: Box::new(|t, v| t.concat(v[0], v[1])),
        },
        Spec {
            op: "slice_cols",
            shapes: |r, c| vec![(r, c + 2)],
            kinks: &[],
            graph: Box::new(|t, v| {
                let c = t.shape(v[0]).1;
                t.slice_cols(v[0], 1, c - 1)
            }),
        },
        Spec {
            op: "grad_graph",
            shapes: |r, c| vec![(r, c), (c, 2)],
            kinks: &[],
            graph: Box::new(|t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.silu(h);
                let e = t.exp(h);
                let p = t.mul(h, e)?;
                let sq = t.square(p);
                let l = t.sum(sq);
                Ok(t.grad_graph(l, &[v[0], v[1]])?[0])
            }),
        },
    ]
}

/// Runs `trials` random finite-difference checks of every op with inputs in `[-2, 2]`.
pub fn check_registered_ops(trials: usize, h: f64, seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (k, spec) in registry().into_iter().enumerate() {
        let mut rng = rng::stream(seed, k as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let r = 1 + rng::index(&mut rng, 4);
            let c = 1 + rng::index(&mut rng, 4);
            let inputs: Vec<Array> = (spec.shapes)(r, c)
                .into_iter()
                .map(|(r, c)| {
                    let mut a = Array::zeros(r, c);
                    for x in a.data_mut() {
                        let mut v = rng::uniform(&mut rng, -2.0, 2.0);
                        for &kink in spec.kinks {
                            if (v - kink).abs() < 10.0 * h {
                                v = kink + if v >= kink { 10.0 * h } else { -10.0 * h };
                            }
                        }
                        *x = v;
                    }
                    a
                })
                .collect();
            worst = worst.max(max_rel_error(&inputs, spec.graph.as_ref(), h, &mut rng)?);
        }
        out.push(OpCheck {
            op: spec.op,
            trials,
            worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_few_trials() {
        for c in check_registered_ops(5, 1e-4, 1).unwrap() {
            assert!(c.worst < 1e-4, "{}: {}", c.op, c.worst);
        }
    }

    #[test]
    fn a_wrong_rule_is_caught() {
        // Treat stop_grad(x) * x as if it were x^2: the check must see the factor of 2.
        let g: Box<Graph> = Box::new(|t, v| {
            let s = t.stop_grad(v[0]);
            t.mul(s, v[0])
        });
        let x = Array::from_rows(&[[1.0, -0.5]]);
        let e = max_rel_error(&[x], g.as_ref(), 1e-4, &mut rng::seeded(0)).unwrap();
        assert!(e > 0.1);
    }
}
