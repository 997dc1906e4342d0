//! Finite-difference gradient checking shared by the test targets.

use dplora::autodiff::{Graph, Var};
use dplora::model::{encode, mlm_logits, ModelParams};
use dplora::per_sample::{gradient, Binding};
use dplora::tensor::Tensor;
use dplora::Result;

pub const STEP: f64 = 1e-3;
/// Denominator floor for the relative error, so that gradients which are
/// zero up to rounding do not divide by ~0.
pub const FLOOR: f64 = 1e-7;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Fourth-order central difference of `f` around its current input,
/// where `set(delta)` shifts the input and `f()` evaluates the loss.
pub fn derivative(mut set: impl FnMut(f64), mut f: impl FnMut() -> f64) -> f64 {
    let mut at = |d: f64| {
        set(d);
        let v = f();
        set(-d);
        v
    };
    let (m2, m1, p1, p2) = (at(-2.0 * STEP), at(-STEP), at(STEP), at(2.0 * STEP));
    (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * STEP)
}

#[derive(Debug, Default)]
pub struct Report {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl Report {
    pub fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_error(analytic, numeric);
        if e > self.worst || e.is_nan() {
            self.worst = e;
            self.worst_at = format!("{} (analytic {analytic:e}, numeric {numeric:e})", what());
        }
    }
}

/// Checks an op-level function `f(graph, inputs) -> scalar` against finite
/// differences on every element of every input.
pub fn check_op(
    inputs: &[Tensor],
    f: impl for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
) -> Report {
    let mut inputs: Vec<Tensor> = inputs
        .iter()
        .map(|t| t.clone().with_requires_grad(true))
        .collect();
    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out)[0]
    };
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars).unwrap();
        let grads = g.backward(out).unwrap();
        vars.iter()
            .zip(&inputs)
            .map(|(&v, t)| {
                grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    };
    let mut report = Report::default();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let cell = std::cell::RefCell::new(&mut inputs);
            let numeric = derivative(
                |d| cell.borrow_mut()[k].data_mut()[i] += d,
                || eval(&cell.borrow()),
            );
            report.record(|| format!("input {k}[{i}]"), analytic[k][i], numeric);
        }
    }
    report
}

/// Token ids, mask positions and targets for the model-level check.
pub struct ModelProbe {
    pub ids: Vec<u32>,
    pub masked: Vec<usize>,
    pub mlm_targets: Vec<usize>,
    pub labels: Vec<f64>,
}

/// Classification BCE plus masked-completion cross-entropy, so that every
/// tensor (including the tied token table) is reached.
pub fn combined_loss(g: &mut Graph<'_>, b: &Binding, m: &ModelParams, p: &ModelProbe) -> Result<Var> {
    let hidden = encode(g, b, m, &p.ids, None)?;
    let pooled = g.mean_rows(hidden)?;
    let z = g.matmul(pooled, b.var(m.params.id("head.weight").unwrap()))?;
    let logits = g.add(z, b.var(m.params.id("head.bias").unwrap()))?;
    let bce = g.bce_with_logits(logits, &p.labels)?;
    let vocab = mlm_logits(g, b, m, hidden, &p.masked)?;
    let ce = g.cross_entropy(vocab, &p.mlm_targets)?;
    g.add(bce, ce)
}

/// Checks every element of every trainable tensor of `model`.
pub fn check_model(model: &mut ModelParams, probe: &ModelProbe) -> Report {
    let (_, grads) = gradient(&model.params, |g, b| combined_loss(g, b, model, probe)).unwrap();
    let names: Vec<String> = model.params.names().to_vec();
    let eval = |m: &ModelParams| -> f64 {
        let mut g = Graph::no_grad();
        let b = Binding::bind(&mut g, &m.params);
        let l = combined_loss(&mut g, &b, m, probe).unwrap();
        g.value(l)[0]
    };
    let token_id = model.params.id("embed.token").unwrap();
    let d = model.config.d_model;
    let unused_rows = TiedRows::new(model, probe);
    let mut report = Report::default();
    for (id, name) in names.iter().enumerate() {
        let Some(analytic) = grads.get(id).map(<[f64]>::to_vec) else {
            continue;
        };
        for (i, &a) in analytic.iter().enumerate() {
            if id == token_id && !probe.ids.contains(&((i / d) as u32)) {
                let numeric = unused_rows.derivative(i / d, i % d);
                report.record(|| format!("{name}[{i}]"), a, numeric);
                continue;
            }
            let cell = std::cell::RefCell::new(&mut *model);
            let numeric = derivative(
                |d| cell.borrow_mut().params.tensor_mut(id).data_mut()[i] += d,
                || eval(&cell.borrow()),
            );
            report.record(|| format!("{name}[{i}]"), a, numeric);
        }
    }
    report
}

/// Loss as a function of one token-table row that does not occur in the
/// input: such a row only feeds the tied output logits, so the encoder
/// output can be computed once and only the cross-entropy re-evaluated.
struct TiedRows {
    bce: f64,
    hidden: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
    targets: Vec<usize>,
}

impl TiedRows {
    fn new(m: &ModelParams, p: &ModelProbe) -> Self {
        let mut g = Graph::no_grad();
        let b = Binding::bind(&mut g, &m.params);
        let h = encode(&mut g, &b, m, &p.ids, None).unwrap();
        let pooled = g.mean_rows(h).unwrap();
        let z = g.matmul(pooled, b.var(m.params.id("head.weight").unwrap())).unwrap();
        let z = g.add(z, b.var(m.params.id("head.bias").unwrap())).unwrap();
        let bce = g.bce_with_logits(z, &p.labels).unwrap();
        let d = m.config.d_model;
        let table = m.params.get("embed.token").unwrap().data();
        let hidden: Vec<Vec<f64>> = p
            .masked
            .iter()
            .map(|&pos| g.value(h)[pos * d..(pos + 1) * d].to_vec())
            .collect();
        let logits = hidden
            .iter()
            .map(|hr| {
                table
                    .chunks(d)
                    .map(|e| e.iter().zip(hr).map(|(x, y)| x * y).sum())
                    .collect()
            })
            .collect();
        TiedRows {
            bce: g.value(bce)[0],
            hidden,
            logits,
            targets: p.mlm_targets.clone(),
        }
    }

    fn loss(&self, row: usize, col: usize, delta: f64) -> f64 {
        let mut ce = 0.0;
        for ((logits, hr), &t) in self.logits.iter().zip(&self.hidden).zip(&self.targets) {
            let at = |j: usize| logits[j] + if j == row { delta * hr[col] } else { 0.0 };
            let max = (0..logits.len()).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..logits.len()).map(|j| (at(j) - max).exp()).sum::<f64>().ln();
            ce += lse - at(t);
        }
        self.bce + ce / self.targets.len() as f64
    }

    fn derivative(&self, row: usize, col: usize) -> f64 {
        let delta = std::cell::Cell::new(0.0);
        derivative(|d| delta.set(delta.get() + d), || self.loss(row, col, delta.get()))
    }
}
