//! A small pre-norm transformer encoder with a multi-label classification
//! head, a masked-completion head tied to the token embeddings, and LoRA
//! adapters that wrap frozen projection weights.

mod checkpoint;
mod forward;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{ParamSet, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{
    bce_multilabel_loss, classify_logits, classify_loss, complete_masked, encode, forward_classify,
    forward_complete, mlm_logits, mlm_loss, pooled_embedding, ClassifySample, MlmSample,
};

pub type TokenId = u32;

/// Standard deviation of the Gaussian used for every fresh weight matrix.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_labels: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2048,
            max_seq_len: 128,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ff: 128,
            n_labels: 14,
            dropout_rate: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("n_labels", self.n_labels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which projection weights receive adapters by default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoraTargets {
    /// Q, K, V and O projections of every layer.
    #[default]
    Attention,
    /// Attention projections plus both FFN matrices.
    AttentionFfn,
}

impl LoraTargets {
    pub fn weight_names(self, config: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..config.n_layers {
            for p in ["q", "k", "v", "o"] {
                out.push(format!("layer{l}.attn.{p}.weight"));
            }
            if self == LoraTargets::AttentionFfn {
                out.push(format!("layer{l}.ffn.up.weight"));
                out.push(format!("layer{l}.ffn.down.weight"));
            }
        }
        out
    }
}

/// Low-rank update `scale·B·A` attached to a frozen `d×k` weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn a_name(&self) -> String {
        format!("{}.lora_a", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora_b", self.target)
    }
}

/// All model tensors plus adapter metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: ParamSet,
    adapters: Vec<LoraAdapter>,
    /// Seeds and steps that produced these weights, oldest first.
    pub lineage: Vec<String>,
}

fn gaussian(shape: [usize; 2], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

fn is_adapter(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

impl ModelParams {
    /// Fresh weights: Gaussian(0, 0.02²) matrices, zero biases, unit
    /// layer-norm gains. Everything starts trainable.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "model-init", 0);
        let (d, f) = (config.d_model, config.d_ff);
        let mut ps = ParamSet::new();
        let trainable = |t: Tensor| t.with_requires_grad(true);
        ps.insert(
            "embed.token",
            trainable(gaussian([config.vocab_size, d], INIT_STD, &mut rng)),
        )?;
        ps.insert(
            "embed.position",
            trainable(gaussian([config.max_seq_len, d], INIT_STD, &mut rng)),
        )?;
        let ones = |n: usize| trainable(Tensor::from_fn([n], |_| 1.0));
        let zeros = |n: usize| trainable(Tensor::zeros([n]));
        for l in 0..config.n_layers {
            ps.insert(format!("layer{l}.ln1.gain"), ones(d))?;
            ps.insert(format!("layer{l}.ln1.bias"), zeros(d))?;
            for p in ["q", "k", "v", "o"] {
                ps.insert(
                    format!("layer{l}.attn.{p}.weight"),
                    trainable(gaussian([d, d], INIT_STD, &mut rng)),
                )?;
                ps.insert(format!("layer{l}.attn.{p}.bias"), zeros(d))?;
            }
            ps.insert(format!("layer{l}.ln2.gain"), ones(d))?;
            ps.insert(format!("layer{l}.ln2.bias"), zeros(d))?;
            ps.insert(
                format!("layer{l}.ffn.up.weight"),
                trainable(gaussian([d, f], INIT_STD, &mut rng)),
            )?;
            ps.insert(format!("layer{l}.ffn.up.bias"), zeros(f))?;
            ps.insert(
                format!("layer{l}.ffn.down.weight"),
                trainable(gaussian([f, d], INIT_STD, &mut rng)),
            )?;
            ps.insert(format!("layer{l}.ffn.down.bias"), zeros(d))?;
        }
        ps.insert("final_ln.gain", ones(d))?;
        ps.insert("final_ln.bias", zeros(d))?;
        ps.insert(
            "head.weight",
            trainable(gaussian([d, config.n_labels], INIT_STD, &mut rng)),
        )?;
        ps.insert("head.bias", zeros(config.n_labels))?;
        Ok(ModelParams {
            config,
            params: ps,
            adapters: Vec::new(),
            lineage: vec![format!("init:{seed}")],
        })
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapter_for(&self, weight: &str) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.target == weight)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    /// Replaces the classification head with a fresh one for `n_labels`.
    pub fn reset_head(&mut self, n_labels: usize, seed: u64) -> Result<()> {
        let mut rng = rng_for(seed, "head-init", 0);
        let d = self.config.d_model;
        let trainable = self.tensor("head.weight")?.requires_grad();
        *self.params.get_mut("head.weight").expect("head exists") =
            gaussian([d, n_labels], INIT_STD, &mut rng).with_requires_grad(trainable);
        *self.params.get_mut("head.bias").expect("head exists") =
            Tensor::zeros([n_labels]).with_requires_grad(trainable);
        self.config.n_labels = n_labels;
        self.lineage.push(format!("head:{seed}"));
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for t in self.params.tensors_mut() {
            t.set_requires_grad(trainable);
        }
    }

    pub fn set_head_trainable(&mut self, trainable: bool) {
        for name in ["head.weight", "head.bias"] {
            if let Some(t) = self.params.get_mut(name) {
                t.set_requires_grad(trainable);
            }
        }
    }

    /// Attaches rank-`rank` adapters to each named 2-D weight and freezes the
    /// backbone. A ~ Gaussian(0, 0.02²), B = 0, so the forward pass is
    /// unchanged until B moves.
    pub fn attach_lora(
        &mut self,
        targets: &[String],
        rank: usize,
        scale: f64,
        train_head: bool,
        seed: u64,
    ) -> Result<()> {
        if rank == 0 {
            return Err(Error::config("LoRA rank must be at least 1"));
        }
        if !scale.is_finite() {
            return Err(Error::config("LoRA scale must be finite"));
        }
        for target in targets {
            let w = self.tensor(target)?;
            let &[d, k] = w.shape() else {
                return Err(Error::config(format!("{target} is not a 2-D weight")));
            };
            if is_adapter(target) || is_head(target) || target.starts_with("embed.") {
                return Err(Error::config(format!("{target} cannot carry an adapter")));
            }
            if rank > d.min(k) {
                return Err(Error::config(format!(
                    "rank {rank} exceeds min(d, k) = {} for {target}",
                    d.min(k)
                )));
            }
            if self.adapter_for(target).is_some() {
                return Err(Error::config(format!("{target} already has an adapter")));
            }
        }
        for t in self.params.tensors_mut() {
            t.set_requires_grad(false);
        }
        for (i, target) in targets.iter().enumerate() {
            let (d, k) = {
                let s = self.tensor(target)?.shape();
                (s[0], s[1])
            };
            let adapter = LoraAdapter {
                target: target.clone(),
                rank,
                scale,
            };
            let mut rng = rng_for(seed, "lora-a", i as u64);
            let a = gaussian([rank, k], INIT_STD, &mut rng).with_requires_grad(true);
            let b = Tensor::zeros([d, rank]).with_requires_grad(true);
            self.params.insert(adapter.a_name(), a)?;
            self.params.insert(adapter.b_name(), b)?;
            self.adapters.push(adapter);
        }
        // Adapters from an earlier attach stay trainable as well.
        for adapter in &self.adapters {
            for name in [adapter.a_name(), adapter.b_name()] {
                self.params
                    .get_mut(&name)
                    .expect("adapter tensors exist")
                    .set_requires_grad(true);
            }
        }
        self.set_head_trainable(train_head);
        self.lineage.push(format!("lora:r{rank}:{seed}"));
        Ok(())
    }

    /// Dense `W + scale·B·A` for one adapter.
    pub fn merge_adapter(&self, adapter: &LoraAdapter) -> Result<Tensor> {
        let w = self.tensor(&adapter.target)?;
        let a = self.tensor(&adapter.a_name())?;
        let b = self.tensor(&adapter.b_name())?;
        let (d, k, r) = (w.shape()[0], w.shape()[1], adapter.rank);
        if b.shape() != [d, r] || a.shape() != [r, k] {
            return Err(Error::Shape {
                op: "merge_adapter",
                lhs: b.shape().to_vec(),
                rhs: a.shape().to_vec(),
            });
        }
        let mut out = w.data().to_vec();
        if b.data().iter().all(|&x| x == 0.0) {
            return Tensor::new([d, k], out);
        }
        f64::gemm_into(d, r, k, adapter.scale, b.data(), a.data(), &mut out);
        Tensor::new([d, k], out)
    }

    /// Copy with every adapter folded into its dense weight.
    pub fn merged(&self) -> Result<ModelParams> {
        let mut ps = ParamSet::new();
        for (name, t) in self.params.iter() {
            if is_adapter(name) {
                continue;
            }
            let t = match self.adapter_for(name) {
                Some(a) => self.merge_adapter(a)?,
                None => t.clone(),
            };
            ps.insert(name, t)?;
        }
        Ok(ModelParams {
            config: self.config.clone(),
            params: ps,
            adapters: Vec::new(),
            lineage: self
                .lineage
                .iter()
                .cloned()
                .chain(std::iter::once("merged".to_string()))
                .collect(),
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// SHA-256 over the bytes of every backbone tensor (neither adapter nor
    /// head), in parameter order.
    pub fn backbone_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter() {
            if is_adapter(name) || is_head(name) {
                continue;
            }
            h.update(name.as_bytes());
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

trait GemmInto {
    fn gemm_into(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], c: &mut [f64]);
}

impl GemmInto for f64 {
    /// `c += alpha · a·b` for dense row-major operands.
    fn gemm_into(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], c: &mut [f64]) {
        use crate::tensor::Real;
        <f64 as Real>::gemm(
            m,
            k,
            n,
            alpha,
            a,
            (k as isize, 1),
            b,
            (n as isize, 1),
            1.0,
            c,
        );
    }
}
