//! Central finite-difference gradient checking.
//!
//! A checked function maps input tensors to an output of any shape. The
//! output is reduced to a scalar with fixed random weights, so every output
//! element contributes to the compared gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn projection(len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x005e_ed0f_d1ff);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn eval_projected<F>(inputs: &[Tensor], f: &F, weights: &[f64]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out)
        .data()
        .iter()
        .zip(weights)
        .map(|(a, b)| a * b)
        .sum())
}

/// Largest relative error between analytic and central-difference gradients
/// over every element of every input.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    let weights = projection(g.value(out).numel());
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(Tensor::new(shape, weights.clone())?);
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod)?;
    let grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("input tracked").to_vec();
        for (k, &exact) in analytic.iter().enumerate() {
            let orig = probe[i].data()[k];
            probe[i].data_mut()[k] = orig + FD_STEP;
            let up = eval_projected(&probe, &f, &weights)?;
            probe[i].data_mut()[k] = orig - FD_STEP;
            let down = eval_projected(&probe, &f, &weights)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(exact, numeric));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.max_rel_err.is_finite()
    }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn dim(&mut self, lo: usize, hi: usize) -> usize {
        self.0.random_range(lo..=hi)
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(&mut self.0)).collect();
        Tensor::new(shape.to_vec(), data).expect("consistent shape")
    }
}

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

const CASES: usize = 5;

fn cases(op: &'static str, rng: &mut Gen) -> Vec<Case> {
    let mut out: Vec<Case> = Vec::new();
    for case in 0..CASES {
        let c: Case = match op {
            "matmul" => {
                let (m, k, n) = if case == 0 {
                    (4, 5, 3)
                } else {
                    (rng.dim(1, 5), rng.dim(1, 5), rng.dim(1, 5))
                };
                (
                    vec![rng.tensor(&[m, k]), rng.tensor(&[k, n])],
                    Box::new(|g, v| g.matmul(v[0], v[1])),
                )
            }
            "matmul_nt" => {
                let (m, k, n) = (rng.dim(1, 5), rng.dim(1, 5), rng.dim(1, 5));
                (
                    vec![rng.tensor(&[m, k]), rng.tensor(&[n, k])],
                    Box::new(|g, v| g.matmul_nt(v[0], v[1])),
                )
            }
            "add" => {
                let s = [rng.dim(1, 5), rng.dim(1, 5)];
                (
                    vec![rng.tensor(&s), rng.tensor(&s)],
                    Box::new(|g, v| g.add(v[0], v[1])),
                )
            }
            "mul" => {
                let s = [rng.dim(1, 5), rng.dim(1, 5)];
                (
                    vec![rng.tensor(&s), rng.tensor(&s)],
                    Box::new(|g, v| g.mul(v[0], v[1])),
                )
            }
            "scale" => {
                let s = [rng.dim(1, 5), rng.dim(1, 5)];
                let f = rng.0.random_range(-3.0..3.0);
                (vec![rng.tensor(&s)], Box::new(move |g, v| g.scale(v[0], f)))
            }
            "add_row" => {
                let (r, c) = (rng.dim(1, 5), rng.dim(1, 5));
                (
                    vec![rng.tensor(&[r, c]), rng.tensor(&[c])],
                    Box::new(|g, v| g.add_row(v[0], v[1])),
                )
            }
            "layer_norm" => {
                let (r, c) = (rng.dim(1, 4), rng.dim(2, 6));
                (
                    vec![rng.tensor(&[r, c]), rng.tensor(&[c]), rng.tensor(&[c])],
                    Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
                )
            }
            "gelu" => {
                let s = if case == 0 {
                    vec![17]
                } else {
                    vec![rng.dim(1, 5), rng.dim(1, 5)]
                };
                (vec![rng.tensor(&s)], Box::new(|g, v| g.gelu(v[0])))
            }
            "embedding" => {
                let (vocab, d, n) = (rng.dim(2, 6), rng.dim(1, 4), rng.dim(1, 7));
                let ids: Vec<usize> = (0..n).map(|_| rng.0.random_range(0..vocab)).collect();
                (
                    vec![rng.tensor(&[vocab, d])],
                    Box::new(move |g, v| g.embedding(v[0], &ids)),
                )
            }
            "transpose" => {
                let s = [rng.dim(1, 5), rng.dim(1, 5)];
                (vec![rng.tensor(&s)], Box::new(|g, v| g.transpose(v[0])))
            }
            "concat_rows" => {
                let c = rng.dim(1, 4);
                let (r1, r2) = (rng.dim(1, 3), rng.dim(1, 3));
                (
                    vec![rng.tensor(&[r1, c]), rng.tensor(&[r2, c])],
                    Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
                )
            }
            "concat_cols" => {
                let r = rng.dim(1, 4);
                let (c1, c2) = (rng.dim(1, 3), rng.dim(1, 3));
                (
                    vec![rng.tensor(&[r, c1]), rng.tensor(&[r, c2])],
                    Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
                )
            }
            "slice_rows" => {
                let (r, c) = (rng.dim(2, 6), rng.dim(1, 4));
                let start = rng.0.random_range(0..r);
                let len = rng.0.random_range(1..=r - start);
                (
                    vec![rng.tensor(&[r, c])],
                    Box::new(move |g, v| g.slice_rows(v[0], start, len)),
                )
            }
            "slice_cols" => {
                let (r, c) = (rng.dim(1, 4), rng.dim(2, 6));
                let start = rng.0.random_range(0..c);
                let len = rng.0.random_range(1..=c - start);
                (
                    vec![rng.tensor(&[r, c])],
                    Box::new(move |g, v| g.slice_cols(v[0], start, len)),
                )
            }
            "softmax" => {
                let rank = rng.dim(1, 3);
                let shape: Vec<usize> = if case == 0 {
                    vec![3, 4]
                } else {
                    (0..rank).map(|_| rng.dim(1, 4)).collect()
                };
                let axis = if case == 0 {
                    1
                } else {
                    rng.0.random_range(0..shape.len())
                };
                (
                    vec![rng.tensor(&shape)],
                    Box::new(move |g, v| g.softmax(v[0], axis)),
                )
            }
            "causal_softmax" => {
                let n = rng.dim(1, 5);
                (
                    vec![rng.tensor(&[n, n])],
                    Box::new(|g, v| g.causal_softmax(v[0])),
                )
            }
            "cross_entropy" => {
                let (l, vocab) = (rng.dim(2, 6), rng.dim(2, 6));
                let targets: Vec<usize> = (0..l).map(|_| rng.0.random_range(0..vocab)).collect();
                let mut mask: Vec<bool> = (0..l).map(|i| i % 2 == 0).collect();
                if case % 2 == 1 {
                    mask.iter_mut().for_each(|m| *m = !*m);
                }
                (
                    vec![rng.tensor(&[l, vocab])],
                    Box::new(move |g, v| g.cross_entropy(v[0], &targets, &mask)),
                )
            }
            "cosine_rows" => {
                let s = [rng.dim(1, 4), rng.dim(2, 5)];
                (
                    vec![rng.tensor(&s), rng.tensor(&s)],
                    Box::new(|g, v| g.cosine_rows(v[0], v[1])),
                )
            }
            "cosine_matrix" => {
                let (m, n, d) = (rng.dim(1, 4), rng.dim(1, 4), rng.dim(2, 5));
                (
                    vec![rng.tensor(&[m, d]), rng.tensor(&[n, d])],
                    Box::new(|g, v| g.cosine_matrix(v[0], v[1])),
                )
            }
            "mean_rows" => {
                let s = [rng.dim(1, 5), rng.dim(1, 5)];
                (vec![rng.tensor(&s)], Box::new(|g, v| g.mean_rows(v[0])))
            }
            "sum" => {
                let s = [rng.dim(1, 5), rng.dim(1, 5)];
                (vec![rng.tensor(&s)], Box::new(|g, v| g.sum(v[0])))
            }
            other => unreachable!("unknown op {other}"),
        };
        out.push(c);
    }
    out
}

/// Every differentiable operation on the tape.
pub const OPS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "add",
    "mul",
    "scale",
    "add_row",
    "layer_norm",
    "gelu",
    "embedding",
    "transpose",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "softmax",
    "causal_softmax",
    "cross_entropy",
    "cosine_rows",
    "cosine_matrix",
    "mean_rows",
    "sum",
];

/// Runs the finite-difference check for every operation over
/// [`CASES`] random shapes each.
pub fn run_suite(seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = Gen(ChaCha8Rng::seed_from_u64(seed));
    let mut reports = Vec::with_capacity(OPS.len());
    for &op in OPS {
        let mut worst: f64 = 0.0;
        let list = cases(op, &mut rng);
        let n = list.len();
        for (inputs, f) in list {
            worst = worst.max(check(&inputs, f)?);
        }
        reports.push(OpReport {
            op,
            cases: n,
            max_rel_err: worst,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // y = x·x computed through `mul` is fine; comparing against a scaled
        // copy of the analytic path must be flagged.
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let ok = check(std::slice::from_ref(&x), |g, v| g.mul(v[0], v[0])).unwrap();
        assert!(ok < TOLERANCE);
        let floor = relative_error(2.0, 1.0);
        assert!(floor > TOLERANCE);
    }

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert!(relative_error(1e-9, 0.0) < 1e-5);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
