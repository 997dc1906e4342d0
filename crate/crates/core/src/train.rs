//! Training loops shared by the classifier, the masked-token pretraining
//! objective and the memorization experiments.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, MASK, RESERVED};
use crate::dp::{
    calibrate, dp_step_with, poisson_sample, sgd_update, DPStepReport, PrivacySpec, UpdateRule, SampleLoss,
};
use crate::error::{Error, Result};
use crate::metrics::{confusion, threshold, weighted_f1, MetricsReport};
use crate::model::{
    classify_loss, forward_classify, mlm_loss, ClassifySample, LoraTargets, MlmSample,
    ModelParams, TokenId,
};
use crate::per_sample::{per_sample_losses_and_gradients, FlatLayout};
use crate::probe::mask_suffix;
use crate::rng::{derive_seed, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    FullFt,
    Lora,
    DpLora,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::FullFt => "full-ft",
            TrainMode::Lora => "lora",
            TrainMode::DpLora => "dp-lora",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-ft" => Ok(TrainMode::FullFt),
            "lora" => Ok(TrainMode::Lora),
            "dp-lora" => Ok(TrainMode::DpLora),
            other => Err(Error::config(format!(
                "unknown mode {other:?}; expected full-ft, lora or dp-lora"
            ))),
        }
    }
}

/// Optimizer and sampling settings common to every mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Expected Poisson batch size `q·n`.
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Heavy-ball coefficient; zero is plain SGD.
    pub momentum: f64,
    /// Cap on the global norm of the averaged gradient in non-private runs,
    /// which have no per-sample clipping. Zero disables it.
    pub max_grad_norm: f64,
}

impl Default for SgdSettings {
    fn default() -> Self {
        SgdSettings {
            epochs: 10,
            learning_rate: 0.5,
            batch_size: 64,
            clip_norm: 1.0,
            momentum: 0.0,
            max_grad_norm: 1.0,
        }
    }
}

impl SgdSettings {
    pub fn sampling_rate(&self, n: usize) -> f64 {
        (self.batch_size as f64 / n as f64).min(1.0)
    }

    /// `epochs / q`, rounded to the nearest step.
    pub fn steps(&self, n: usize) -> usize {
        (self.epochs as f64 / self.sampling_rate(n)).round() as usize
    }

    /// Privacy spec for `n` training samples: calibrated when `epsilon` is
    /// given, otherwise no clipping and no noise.
    pub fn privacy_spec(&self, n: usize, epsilon: Option<f64>) -> Result<PrivacySpec> {
        let q = self.sampling_rate(n);
        match epsilon {
            Some(eps) => calibrate(eps, n, self.clip_norm, q, self.steps(n)),
            None => PrivacySpec::non_private(n, q, self.steps(n)),
        }
    }
}

/// Runs `spec.max_steps` steps of Poisson-sampled (DP-)SGD over `samples`.
/// Batches, noise and dropout come from streams derived from `seed` and the
/// step index. `on_step` sees every step report, including skipped steps.
pub fn run_sgd<S: Sync + Clone>(
    model: &mut ModelParams,
    samples: &[S],
    loss: &impl SampleLoss<S>,
    spec: &PrivacySpec,
    sgd: &SgdSettings,
    seed: u64,
    mut on_step: impl FnMut(&DPStepReport) -> Result<()>,
) -> Result<()> {
    if samples.len() != spec.train_size {
        return Err(Error::contract(format!(
            "spec was calibrated for {} samples but {} were given",
            spec.train_size,
            samples.len()
        )));
    }
    let cap = (!spec.is_private() && sgd.max_grad_norm > 0.0).then_some(sgd.max_grad_norm);
    let mut rule = UpdateRule::new(sgd.momentum, cap)?;
    for step in 0..spec.max_steps {
        let mut sampler = rng_for(seed, "poisson", step as u64);
        let batch: Vec<S> = poisson_sample(samples.len(), spec.sampling_rate, &mut sampler)?
            .into_iter()
            .map(|i| samples[i].clone())
            .collect();
        let mut noise = rng_for(seed, "dp-noise", step as u64);
        let report = dp_step_with(
            model,
            &batch,
            loss,
            spec,
            &mut noise,
            sgd.learning_rate,
            &mut rule,
            step,
        )?;
        on_step(&report)?;
    }
    model
        .lineage
        .push(format!("sgd:seed={seed}:steps={}", spec.max_steps));
    Ok(())
}

/// How the classifier is adapted on top of a backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptSettings {
    pub mode: TrainMode,
    pub rank: usize,
    pub lora_scale: f64,
    pub lora_targets: LoraTargets,
    pub train_head: bool,
    /// Required for `DpLora`, rejected otherwise.
    pub epsilon: Option<f64>,
}

impl AdaptSettings {
    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.epsilon) {
            (TrainMode::DpLora, None) => Err(Error::config("dp-lora needs an epsilon")),
            (TrainMode::DpLora, Some(e)) if !(e > 0.0 && e.is_finite()) => {
                Err(Error::config(format!("epsilon {e} must be positive and finite")))
            }
            (TrainMode::FullFt | TrainMode::Lora, Some(_)) => Err(Error::config(format!(
                "{} is non-private and takes no epsilon",
                self.mode.as_str()
            ))),
            _ if self.mode != TrainMode::FullFt && self.rank == 0 => {
                Err(Error::config("LoRA rank must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Copies `backbone`, gives it a fresh head and sets up trainable
    /// tensors for the mode.
    pub fn prepare(&self, backbone: &ModelParams, n_labels: usize, seed: u64) -> Result<ModelParams> {
        self.validate()?;
        let mut model = backbone.clone();
        model.reset_head(n_labels, derive_seed(seed, "head", 0))?;
        match self.mode {
            TrainMode::FullFt => model.set_all_trainable(true),
            TrainMode::Lora | TrainMode::DpLora => {
                model.attach_lora(
                    &self.lora_targets.weight_names(&model.config),
                    self.rank,
                    self.lora_scale,
                    self.train_head,
                    derive_seed(seed, "lora", 0),
                )?;
            }
        }
        Ok(model)
    }
}

pub fn classify_samples(examples: &[Example], dropout: bool, seed: u64) -> Vec<ClassifySample> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| ClassifySample {
            ids: e.ids.clone(),
            targets: e.labels.iter().map(|&l| l as f64).collect(),
            dropout_seed: dropout.then(|| derive_seed(seed, "dropout", i as u64)),
        })
        .collect()
}

/// Fits a classifier on `train` from a copy of `backbone`.
pub fn train_classifier(
    backbone: &ModelParams,
    train: &[Example],
    adapt: &AdaptSettings,
    sgd: &SgdSettings,
    seed: u64,
    on_step: impl FnMut(&DPStepReport) -> Result<()>,
) -> Result<(ModelParams, PrivacySpec)> {
    let n_labels = train
        .first()
        .ok_or_else(|| Error::data("empty training split"))?
        .labels
        .len();
    let mut model = adapt.prepare(backbone, n_labels, seed)?;
    let spec = sgd.privacy_spec(train.len(), adapt.epsilon)?;
    let samples = classify_samples(train, model.config.dropout_rate > 0.0, seed);
    run_sgd(&mut model, &samples, &classify_loss, &spec, sgd, seed, on_step)?;
    Ok((model, spec))
}

/// Label probabilities of `examples`, thresholded and scored.
pub fn evaluate(model: &ModelParams, examples: &[Example], t: f64) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::data("cannot evaluate on an empty split"));
    }
    let ids: Vec<Vec<TokenId>> = examples.iter().map(|e| e.ids.clone()).collect();
    let mut probs = forward_classify(model, &ids)?;
    for p in probs.data_mut() {
        *p = 1.0 / (1.0 + (-*p).exp());
    }
    let preds = threshold(&probs, t)?;
    let targets: Vec<Vec<u8>> = examples.iter().map(|e| e.labels.clone()).collect();
    Ok(weighted_f1(&confusion(&preds, &targets)?))
}

/// A copy of `ids` with each non-reserved token masked with probability
/// `rate` (at least one position). `None` if nothing can be masked.
pub fn random_mask(ids: &[TokenId], rate: f64, rng: &mut impl Rng) -> Option<MlmSample> {
    let candidates: Vec<usize> = (0..ids.len())
        .filter(|&i| ids[i] as usize >= RESERVED.len())
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let mut positions: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < rate)
        .collect();
    if positions.is_empty() {
        positions.push(*candidates.choose(rng).expect("non-empty"));
    }
    let mut masked = ids.to_vec();
    let targets = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        masked[p] = MASK;
    }
    Some(MlmSample {
        ids: masked,
        positions,
        targets,
        dropout_seed: None,
    })
}

/// Masked-token pretraining of a backbone on public text. This stage is
/// non-private and uses Adam on the mean batch gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSettings {
    pub mask_rate: f64,
    /// Chance that a sequence has a contiguous tail masked instead, with
    /// the tail fraction drawn from [0.1, 0.5]. Teaches the backbone the
    /// completion task; 0 keeps plain token masking.
    pub suffix_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            mask_rate: 0.15,
            suffix_rate: 0.0,
            epochs: 8,
            batch_size: 32,
            learning_rate: 3e-3,
        }
    }
}

const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
const ADAM_EPS: f64 = 1e-8;

/// Trains every tensor except the classification head. Each epoch draws
/// fresh masks and a fresh order from streams derived from `seed`.
/// `on_step` receives the step index and mean batch loss.
pub fn pretrain_mlm(
    model: &mut ModelParams,
    sequences: &[Vec<TokenId>],
    settings: &PretrainSettings,
    seed: u64,
    mut on_step: impl FnMut(usize, f64) -> Result<()>,
) -> Result<()> {
    if settings.batch_size == 0 || !(settings.mask_rate > 0.0 && settings.mask_rate <= 1.0) {
        return Err(Error::config("pretraining needs a positive batch size and mask rate in (0,1]"));
    }
    if !(0.0..=1.0).contains(&settings.suffix_rate) {
        return Err(Error::config("pretraining suffix rate must lie in [0,1]"));
    }
    model.set_all_trainable(true);
    model.set_head_trainable(false);
    let layout = FlatLayout::trainable(&model.params);
    let (mut m1, mut m2) = (vec![0.0; layout.len()], vec![0.0; layout.len()]);
    let mut step = 0usize;
    for epoch in 0..settings.epochs {
        let mut rng = rng_for(seed, "pretrain-epoch", epoch as u64);
        let mut samples = Vec::with_capacity(sequences.len());
        for ids in sequences {
            let tail = settings.suffix_rate > 0.0 && rng.random::<f64>() < settings.suffix_rate;
            let sample = if tail {
                mask_suffix(ids, rng.random_range(0.1..=0.5))?.map(|m| MlmSample {
                    ids: m.ids,
                    positions: m.positions,
                    targets: m.originals,
                    dropout_seed: None,
                })
            } else {
                random_mask(ids, settings.mask_rate, &mut rng)
            };
            samples.extend(sample);
        }
        if samples.is_empty() {
            return Err(Error::data("pretraining corpus has no maskable tokens"));
        }
        samples.shuffle(&mut rng);
        for batch in samples.chunks(settings.batch_size) {
            let m: &ModelParams = model;
            let (losses, grads) =
                per_sample_losses_and_gradients(&m.params, batch, |g, b, s| mlm_loss(g, b, m, s))?;
            let mut mean = vec![0.0; layout.len()];
            for g in &grads {
                for (a, x) in mean.iter_mut().zip(g.flatten()) {
                    *a += x;
                }
            }
            step += 1;
            let (b1, b2) = ADAM_BETAS;
            let c1 = 1.0 - b1.powi(step as i32);
            let c2 = 1.0 - b2.powi(step as i32);
            let n = batch.len() as f64;
            let update: Vec<f64> = mean
                .iter()
                .zip(m1.iter_mut().zip(m2.iter_mut()))
                .map(|(&g, (a, v))| {
                    let g = g / n;
                    *a = b1 * *a + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    (*a / c1) / ((*v / c2).sqrt() + ADAM_EPS)
                })
                .collect();
            if update.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("pretraining step {step} diverged")));
            }
            sgd_update(&mut model.params, &layout, &update, settings.learning_rate)?;
            on_step(step, losses.iter().sum::<f64>() / n)?;
        }
    }
    model.set_all_trainable(true);
    model
        .lineage
        .push(format!("pretrain:seed={seed}:steps={step}"));
    Ok(())
}

/// Suffix-masked copies of `sequences`, skipping those too short to mask.
pub fn completion_samples(sequences: &[Vec<TokenId>], fraction: f64) -> Result<Vec<MlmSample>> {
    let mut out = Vec::with_capacity(sequences.len());
    for ids in sequences {
        if let Some(m) = mask_suffix(ids, fraction)? {
            out.push(MlmSample {
                ids: m.ids,
                positions: m.positions,
                targets: m.originals,
                dropout_seed: None,
            });
        }
    }
    Ok(out)
}

/// Fine-tunes a copy of `backbone` to fill in the masked tail of each
/// sequence. The classification head is frozen throughout.
pub fn train_completion(
    backbone: &ModelParams,
    sequences: &[Vec<TokenId>],
    adapt: &AdaptSettings,
    sgd: &SgdSettings,
    fraction: f64,
    seed: u64,
    on_step: impl FnMut(&DPStepReport) -> Result<()>,
) -> Result<(ModelParams, PrivacySpec)> {
    let adapt = AdaptSettings {
        train_head: false,
        ..adapt.clone()
    };
    let mut model = adapt.prepare(backbone, backbone.config.n_labels, seed)?;
    model.set_head_trainable(false);
    let samples = completion_samples(sequences, fraction)?;
    let spec = sgd.privacy_spec(samples.len(), adapt.epsilon)?;
    run_sgd(&mut model, &samples, &mlm_loss, &spec, sgd, seed, on_step)?;
    Ok((model, spec))
}
