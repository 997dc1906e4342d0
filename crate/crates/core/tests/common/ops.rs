//! Finite-difference checks covering every differentiable graph op.

use super::gradcheck::{check_op, Report};
use super::{rng, uniform};
use dplora::autodiff::{Graph, Var};
use dplora::tensor::Tensor;
use dplora::Result;

/// Reduces an op output to a scalar through fixed random weights so that
/// every output element contributes a distinct gradient.
fn weighted<'g>(g: &mut Graph<'g>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut r = rng(99);
    let w = g.constant(uniform(shape, -1.0, 1.0, &mut r));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn op(
    out: &mut Vec<(String, Report)>,
    what: &str,
    inputs: &[Tensor],
    f: impl for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
) {
    let r = check_op(inputs, |g, v| {
        let out = f(g, v)?;
        if g.shape(out).is_empty() {
            Ok(out)
        } else {
            weighted(g, out)
        }
    });
    out.push((what.to_string(), r));
}

pub fn matmul_family(out: &mut Vec<(String, Report)>) {
    let mut r = rng(1);
    let a = uniform([3, 4], -1.0, 1.0, &mut r);
    let b = uniform([4, 5], -1.0, 1.0, &mut r);
    let bt = uniform([5, 4], -1.0, 1.0, &mut r);
    op(out, "matmul", &[a.clone(), b], |g, v| g.matmul(v[0], v[1]));
    op(out, "matmul_nt", &[a, bt], |g, v| g.matmul_nt(v[0], v[1]));
}

pub fn binary(out: &mut Vec<(String, Report)>) {
    let mut r = rng(2);
    let x = uniform([3, 4], -1.0, 1.0, &mut r);
    let y = uniform([3, 4], -1.0, 1.0, &mut r);
    let row = uniform([4], -1.0, 1.0, &mut r);
    let col = uniform([3, 1], -1.0, 1.0, &mut r);
    for (name, k) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let f = move |g: &mut Graph<'_>, a: Var, b: Var| match k {
            0 => g.add(a, b),
            1 => g.sub(a, b),
            _ => g.mul(a, b),
        };
        op(out, name, &[x.clone(), y.clone()], move |g, v| f(g, v[0], v[1]));
        op(out, &format!("{name} (row broadcast)"), &[x.clone(), row.clone()], move |g, v| f(g, v[0], v[1]));
        op(out, &format!("{name} (column broadcast)"), &[col.clone(), x.clone()], move |g, v| f(g, v[0], v[1]));
    }
}

pub fn elementwise(out: &mut Vec<(String, Report)>) {
    let mut r = rng(3);
    let x = uniform([2, 5], -2.0, 2.0, &mut r);
    // Keep relu inputs away from the kink.
    let away = Tensor::from_fn([2, 5], |i| if i % 2 == 0 { 0.3 + i as f64 } else { -0.4 - i as f64 });
    let pos = uniform([2, 5], 0.2, 3.0, &mut r);
    op(out, "scale", &[x.clone()], |g, v| Ok(g.scale(v[0], -1.7)));
    op(out, "relu", &[away], |g, v| Ok(g.relu(v[0])));
    op(out, "gelu", &[x.clone()], |g, v| Ok(g.gelu(v[0])));
    op(out, "sigmoid", &[x.clone()], |g, v| Ok(g.sigmoid(v[0])));
    op(out, "exp", &[x.clone()], |g, v| Ok(g.exp(v[0])));
    op(out, "log", &[pos], |g, v| g.log(v[0]));
    op(out, "softmax", &[x.clone()], |g, v| Ok(g.softmax(v[0])));
    op(out, "log_softmax", &[x], |g, v| Ok(g.log_softmax(v[0])));
}

pub fn reductions_and_reshaping(out: &mut Vec<(String, Report)>) {
    let mut r = rng(4);
    let x = uniform([4, 6], -1.0, 1.0, &mut r);
    let y = uniform([4, 2], -1.0, 1.0, &mut r);
    let gain = uniform([6], 0.5, 1.5, &mut r);
    let bias = uniform([6], -0.5, 0.5, &mut r);
    op(out, "layer_norm", &[x.clone(), gain, bias], |g, v| g.layer_norm(v[0], v[1], v[2]));
    op(out, "sum", &[x.clone()], |g, v| Ok(g.sum(v[0])));
    op(out, "mean", &[x.clone()], |g, v| Ok(g.mean(v[0])));
    op(out, "mean_rows", &[x.clone()], |g, v| g.mean_rows(v[0]));
    op(out, "gather_rows", &[x.clone()], |g, v| g.gather_rows(v[0], &[3, 0, 3, 1]));
    op(out, "slice_cols", &[x.clone()], |g, v| g.slice_cols(v[0], 2, 3));
    op(out, "concat_cols", &[x.clone(), y], |g, v| g.concat_cols(&[v[0], v[1]]));
    op(out, "dropout", &[x], |g, v| {
        let mut r = rng(5);
        g.dropout(v[0], 0.4, &mut r)
    });
}

pub fn losses(out: &mut Vec<(String, Report)>) {
    let mut r = rng(6);
    let z = uniform([1, 7], -3.0, 3.0, &mut r);
    let targets: Vec<f64> = (0..7).map(|i| (i % 3 == 0) as u8 as f64).collect();
    op(out, "bce_with_logits", &[z], move |g, v| g.bce_with_logits(v[0], &targets));
    let logits = uniform([3, 5], -2.0, 2.0, &mut r);
    op(out, "cross_entropy", &[logits], |g, v| g.cross_entropy(v[0], &[4, 0, 2]));
}

pub fn all() -> Vec<(String, Report)> {
    let mut out = Vec::new();
    matmul_family(&mut out);
    binary(&mut out);
    elementwise(&mut out);
    reductions_and_reshaping(&mut out);
    losses(&mut out);
    out
}
