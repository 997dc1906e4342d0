//! DP-SGD: per-sample clipping, one Gaussian draw on the clipped sum,
//! Poisson subsampling, and the fixed `σ = 1.25/ε`, `δ = 1/n²` calibration.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::per_sample::{per_sample_losses_and_gradients, Binding, FlatLayout, ParamGrads};
use crate::rng::Prng;
use crate::tensor::ParamSet;

/// Multiplier in the calibration rule `σ = SIGMA_FACTOR / ε`.
pub const SIGMA_FACTOR: f64 = 1.25;

pub const CALIBRATION_NOTE: &str = "fixed rule sigma = 1.25/epsilon and delta = 1/n^2; \
no privacy accountant is run, so no composed multi-step epsilon is claimed, \
and the rule does not say whether epsilon is per step or for the whole run";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    /// `f64::INFINITY` in non-private mode.
    pub epsilon: f64,
    pub delta: f64,
    /// `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    /// Zero disables noise.
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub max_steps: usize,
    pub train_size: usize,
}

fn check_common(n: usize, q: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::contract(format!("train size {n} must be at least 2")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::contract(format!("sampling rate {q} outside (0,1]")));
    }
    if q * (n as f64) < 1.0 {
        return Err(Error::contract(format!(
            "expected batch q·n = {} is below 1",
            q * n as f64
        )));
    }
    Ok(())
}

/// Private spec with `σ = 1.25/ε` and `δ = 1/n²`.
pub fn calibrate(
    epsilon: f64,
    train_size: usize,
    clip_norm: f64,
    sampling_rate: f64,
    max_steps: usize,
) -> Result<PrivacySpec> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::contract(format!("epsilon {epsilon} must be positive and finite")));
    }
    if !(clip_norm > 0.0 && clip_norm.is_finite()) {
        return Err(Error::contract(format!("clip norm {clip_norm} must be positive and finite")));
    }
    check_common(train_size, sampling_rate)?;
    let n = train_size as f64;
    Ok(PrivacySpec {
        epsilon,
        delta: 1.0 / (n * n),
        clip_norm,
        noise_multiplier: SIGMA_FACTOR * (1.0 / epsilon),
        sampling_rate,
        max_steps,
        train_size,
    })
}

impl PrivacySpec {
    /// Plain mini-batch SGD expressed as a spec: no clipping, no noise.
    pub fn non_private(train_size: usize, sampling_rate: f64, max_steps: usize) -> Result<Self> {
        check_common(train_size, sampling_rate)?;
        Ok(PrivacySpec {
            epsilon: f64::INFINITY,
            delta: 0.0,
            clip_norm: f64::INFINITY,
            noise_multiplier: 0.0,
            sampling_rate,
            max_steps,
            train_size,
        })
    }

    pub fn is_private(&self) -> bool {
        self.noise_multiplier > 0.0
    }

    pub fn noise_std(&self) -> f64 {
        if self.noise_multiplier == 0.0 {
            0.0
        } else {
            self.noise_multiplier * self.clip_norm
        }
    }
}

/// ℓ₂ norm that does not overflow for large finite entries.
pub fn l2_norm(g: &[f64]) -> f64 {
    let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    scale * g.iter().map(|x| (x / scale) * (x / scale)).sum::<f64>().sqrt()
}

/// Scales `g` in place to `g / max(1, ‖g‖/C)` and returns the pre-clip norm.
/// The result norm is guaranteed `≤ C` despite rounding.
pub fn clip_gradient(g: &mut [f64], clip_norm: f64) -> Result<f64> {
    if !(clip_norm > 0.0) {
        return Err(Error::contract(format!("clip norm {clip_norm} must be positive")));
    }
    if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient entry at index {pos}")));
    }
    let norm = l2_norm(g);
    if norm <= clip_norm {
        return Ok(norm);
    }
    let mut factor = clip_norm / norm;
    let original = g.to_vec();
    loop {
        for (x, &o) in g.iter_mut().zip(&original) {
            *x = o * factor;
        }
        if l2_norm(g) <= clip_norm {
            return Ok(norm);
        }
        factor *= 1.0 - f64::EPSILON;
    }
}

/// `(sum + N(0, σ²C²·I)) / batch`. With `σ = 0` no draw is made and the
/// result is exactly `sum / batch`.
pub fn add_noise(sum: &[f64], batch: usize, spec: &PrivacySpec, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if batch == 0 {
        return Err(Error::contract("add_noise needs a batch of at least one"));
    }
    let b = batch as f64;
    let std = spec.noise_std();
    if std == 0.0 {
        return Ok(sum.iter().map(|&s| s / b).collect());
    }
    Ok(sum
        .iter()
        .map(|&s| {
            let z: f64 = rng.sample(StandardNormal);
            (s + std * z) / b
        })
        .collect())
}

/// Each index of `0..n` independently with probability `q`, ascending.
pub fn poisson_sample(n: usize, q: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::contract(format!("sampling rate {q} outside (0,1]")));
    }
    Ok((0..n).filter(|_| rng.random::<f64>() < q).collect())
}

/// Audit record for one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DPStepReport {
    pub step: usize,
    pub realized_batch: usize,
    /// True when the sampled batch was empty and no update happened.
    pub skipped: bool,
    pub mean_loss: f64,
    pub norm_min: f64,
    pub norm_mean: f64,
    pub norm_max: f64,
    pub fraction_clipped: f64,
    pub noise_std: f64,
}

impl DPStepReport {
    fn skipped(step: usize, spec: &PrivacySpec) -> Self {
        DPStepReport {
            step,
            realized_batch: 0,
            skipped: true,
            mean_loss: 0.0,
            norm_min: 0.0,
            norm_mean: 0.0,
            norm_max: 0.0,
            fraction_clipped: 0.0,
            noise_std: spec.noise_std(),
        }
    }
}

/// Clips each sample's flat gradient, sums in batch order, adds one noise
/// draw and averages. Returns the privatized mean gradient in the layout of
/// `FlatLayout::trainable`.
pub fn privatize(
    per_sample: &[ParamGrads],
    spec: &PrivacySpec,
    rng: &mut impl Rng,
    step: usize,
) -> Result<(Vec<f64>, DPStepReport)> {
    if per_sample.is_empty() {
        return Err(Error::contract("privatize needs at least one gradient"));
    }
    let mut sum: Vec<f64> = Vec::new();
    let mut norms = Vec::with_capacity(per_sample.len());
    let mut clipped = 0usize;
    for (i, g) in per_sample.iter().enumerate() {
        let mut flat = g.flatten();
        if let Some(pos) = flat.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "step {step}: non-finite gradient for sample {i} at coordinate {pos}"
            )));
        }
        let norm = if spec.clip_norm.is_finite() {
            let norm = clip_gradient(&mut flat, spec.clip_norm)?;
            debug_assert!(l2_norm(&flat) <= spec.clip_norm);
            norm
        } else {
            l2_norm(&flat)
        };
        if norm > spec.clip_norm {
            clipped += 1;
        }
        norms.push(norm);
        if sum.is_empty() {
            sum = vec![0.0; flat.len()];
        }
        if flat.len() != sum.len() {
            return Err(Error::contract("per-sample gradients differ in length"));
        }
        for (s, x) in sum.iter_mut().zip(&flat) {
            *s += x;
        }
    }
    let b = per_sample.len();
    let noisy = add_noise(&sum, b, spec, rng)?;
    let report = DPStepReport {
        step,
        realized_batch: b,
        skipped: false,
        mean_loss: 0.0,
        norm_min: norms.iter().cloned().fold(f64::INFINITY, f64::min),
        norm_mean: norms.iter().sum::<f64>() / b as f64,
        norm_max: norms.iter().cloned().fold(0.0, f64::max),
        fraction_clipped: clipped as f64 / b as f64,
        noise_std: spec.noise_std(),
    };
    Ok((noisy, report))
}

/// `p ← p − lr·g` over the trainable tensors; frozen tensors are untouched.
pub fn sgd_update(params: &mut ParamSet, layout: &FlatLayout, grad: &[f64], lr: f64) -> Result<()> {
    if grad.len() != layout.len() {
        return Err(Error::Shape {
            op: "sgd_update",
            lhs: vec![layout.len()],
            rhs: vec![grad.len()],
        });
    }
    for &(id, offset, len) in layout.entries() {
        let t = params.tensor_mut(id);
        if !t.requires_grad() {
            return Err(Error::contract(format!(
                "layout names frozen tensor {}",
                id
            )));
        }
        for (p, &g) in t.data_mut().iter_mut().zip(&grad[offset..offset + len]) {
            *p -= lr * g;
        }
    }
    Ok(())
}

/// Per-sample loss over a model, as used by [`dp_step`].
pub trait SampleLoss<S>:
    for<'g> Fn(&mut Graph<'g>, &Binding, &ModelParams, &S) -> Result<Var> + Sync
{
}

impl<S, F> SampleLoss<S> for F where
    F: for<'g> Fn(&mut Graph<'g>, &Binding, &ModelParams, &S) -> Result<Var> + Sync
{
}

/// Post-processing of the released gradient before it reaches the
/// parameters: an optional rescale to global norm at most `max_norm`, then
/// heavy-ball `v ← β·v + g`, `p ← p − lr·v`. It only ever sees privatized
/// gradients, so it costs no privacy. The default is plain SGD.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateRule {
    beta: f64,
    max_norm: Option<f64>,
    velocity: Vec<f64>,
}

impl UpdateRule {
    pub fn new(beta: f64, max_norm: Option<f64>) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::config(format!("momentum {beta} outside [0,1)")));
        }
        if let Some(c) = max_norm.filter(|c| !(*c > 0.0)) {
            return Err(Error::config(format!("gradient norm cap {c} must be positive")));
        }
        Ok(UpdateRule {
            beta,
            max_norm,
            velocity: Vec::new(),
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    fn apply(&mut self, mut grad: Vec<f64>) -> Result<Vec<f64>> {
        if let Some(c) = self.max_norm {
            let norm = l2_norm(&grad);
            if norm > c {
                grad.iter_mut().for_each(|x| *x *= c / norm);
            }
        }
        if self.beta == 0.0 {
            return Ok(grad);
        }
        if self.velocity.is_empty() {
            self.velocity = vec![0.0; grad.len()];
        }
        if self.velocity.len() != grad.len() {
            return Err(Error::contract("trainable layout changed under momentum"));
        }
        for (v, g) in self.velocity.iter_mut().zip(&grad) {
            *v = self.beta * *v + g;
        }
        Ok(self.velocity.clone())
    }
}

/// One DP-SGD step on `batch`: per-sample gradients, clip, sum, one noise
/// draw, average, SGD update of trainable tensors. An empty batch is a
/// recorded no-op.
pub fn dp_step<S: Sync>(
    model: &mut ModelParams,
    batch: &[S],
    loss: &impl SampleLoss<S>,
    spec: &PrivacySpec,
    rng: &mut Prng,
    learning_rate: f64,
    step: usize,
) -> Result<DPStepReport> {
    let mut plain = UpdateRule::default();
    dp_step_with(model, batch, loss, spec, rng, learning_rate, &mut plain, step)
}

/// [`dp_step`] with the privatized gradient passed through `rule`.
/// Skipped steps leave the velocity untouched.
#[allow(clippy::too_many_arguments)]
pub fn dp_step_with<S: Sync>(
    model: &mut ModelParams,
    batch: &[S],
    loss: &impl SampleLoss<S>,
    spec: &PrivacySpec,
    rng: &mut Prng,
    learning_rate: f64,
    rule: &mut UpdateRule,
    step: usize,
) -> Result<DPStepReport> {
    if batch.is_empty() {
        return Ok(DPStepReport::skipped(step, spec));
    }
    let layout = FlatLayout::trainable(&model.params);
    let m: &ModelParams = model;
    let (losses, grads) =
        per_sample_losses_and_gradients(&m.params, batch, |g, b, s| loss(g, b, m, s))?;
    let (update, mut report) = privatize(&grads, spec, rng, step)?;
    report.mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let update = rule.apply(update)?;
    sgd_update(&mut model.params, &layout, &update, learning_rate)?;
    Ok(report)
}

/// Mini-batch SGD by gradient accumulation with micro-batch one: each
/// sample's gradient is added in batch order, the sum divided by the batch
/// size, then applied.
pub fn sgd_step<S: Sync>(
    model: &mut ModelParams,
    batch: &[S],
    loss: &impl SampleLoss<S>,
    learning_rate: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("sgd_step needs a non-empty batch"));
    }
    let layout = FlatLayout::trainable(&model.params);
    let mut acc = vec![0.0; layout.len()];
    let mut total_loss = 0.0;
    for s in batch {
        let (l, g) = crate::per_sample::gradient(&model.params, |g, b| loss(g, b, model, s))?;
        total_loss += l;
        for (a, x) in acc.iter_mut().zip(g.flatten()) {
            *a += x;
        }
    }
    let b = batch.len() as f64;
    let mean: Vec<f64> = acc.iter().map(|&s| s / b).collect();
    sgd_update(&mut model.params, &layout, &mean, learning_rate)?;
    Ok(total_loss / b)
}

/// Configuration echo of a privacy spec after some number of steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub private: bool,
    /// `None` in non-private mode.
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub noise_multiplier: f64,
    pub clip_norm: Option<f64>,
    pub sampling_rate: f64,
    pub train_size: usize,
    pub steps_taken: usize,
    pub max_steps: usize,
    pub calibration: String,
}

pub fn privacy_report(spec: &PrivacySpec, steps_taken: usize) -> PrivacyReport {
    let finite = |x: f64| x.is_finite().then_some(x);
    PrivacyReport {
        private: spec.is_private(),
        epsilon: finite(spec.epsilon),
        delta: spec.delta,
        noise_multiplier: spec.noise_multiplier,
        clip_norm: finite(spec.clip_norm),
        sampling_rate: spec.sampling_rate,
        train_size: spec.train_size,
        steps_taken,
        max_steps: spec.max_steps,
        calibration: if spec.is_private() {
            CALIBRATION_NOTE.to_string()
        } else {
            "non-private: no clipping, no noise".to_string()
        },
    }
}
