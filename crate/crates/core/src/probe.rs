//! Memorization probe: mask the tail of training reports, let each model
//! fill it in, and compare completion with original by cosine similarity
//! of mean-pooled encoder states.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::{MASK, PAD, RESERVED};
use crate::error::{Error, Result};
use crate::model::{encode, forward_complete, ModelParams, TokenId};
use crate::per_sample::Binding;

pub const DEFAULT_MASK_FRACTION: f64 = 0.3;
/// Sequences with fewer maskable tokens than this are skipped.
pub const MIN_PROBE_TOKENS: usize = 4;

fn is_special(id: TokenId) -> bool {
    (id as usize) < RESERVED.len()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuffixMask {
    pub ids: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub originals: Vec<TokenId>,
}

/// Replaces the last `⌈f·T⌉` non-special tokens with `[MASK]`, where `T`
/// counts non-special tokens. `Ok(None)` means the sequence is too short to
/// probe.
pub fn mask_suffix(ids: &[TokenId], fraction: f64) -> Result<Option<SuffixMask>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract(format!("mask fraction {fraction} outside (0,1)")));
    }
    let content: Vec<usize> = (0..ids.len()).filter(|&i| !is_special(ids[i])).collect();
    let t = content.len();
    if t < MIN_PROBE_TOKENS {
        return Ok(None);
    }
    let k = ((fraction * t as f64).ceil() as usize).clamp(1, t);
    let positions = content[t - k..].to_vec();
    let mut masked = ids.to_vec();
    let originals = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        masked[p] = MASK;
    }
    Ok(Some(SuffixMask {
        ids: masked,
        positions,
        originals,
    }))
}

/// Final-layer states averaged over non-PAD positions, scaled to unit norm.
pub fn embed_text(model: &ModelParams, ids: &[TokenId]) -> Result<Vec<f64>> {
    let keep: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] != PAD).collect();
    if keep.is_empty() {
        return Err(Error::contract("cannot embed an all-padding sequence"));
    }
    let mut g = Graph::no_grad();
    let b = Binding::bind(&mut g, &model.params);
    let hidden = encode(&mut g, &b, model, ids, None)?;
    let d = model.config.d_model;
    let h = g.value(hidden);
    let mut v = vec![0.0; d];
    for &i in &keep {
        for (a, x) in v.iter_mut().zip(&h[i * d..(i + 1) * d]) {
            *a += x;
        }
    }
    let norm = crate::dp::l2_norm(&v);
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Numeric(format!("embedding norm {norm} cannot be normalized")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "cosine",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    let (nu, nv) = (crate::dp::l2_norm(u), crate::dp::l2_norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::contract("cosine of a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| (a / nu) * (b / nv)).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// One training report to probe.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeItem {
    pub report_id: String,
    pub ids: Vec<TokenId>,
}

/// Which encoder embeds originals and completions.
#[derive(Clone, Copy, Debug)]
pub enum Embedder<'a> {
    /// Each probed model embeds its own completions.
    Own,
    /// One fixed model embeds every completion.
    Shared(&'a ModelParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub model_tag: String,
    /// `(report_id, cosine)` in probe-set order.
    pub cosines: Vec<(String, f64)>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single report.
    pub std: f64,
    /// Report ids skipped as too short.
    pub skipped: Vec<String>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Masks every probe item once, then for each model completes the masks,
/// embeds original and completion, and records their cosine.
pub fn run_probe(
    models: &[(String, &ModelParams)],
    probe_set: &[ProbeItem],
    fraction: f64,
    embedder: Embedder<'_>,
) -> Result<Vec<ProbeResult>> {
    let first = models
        .first()
        .ok_or_else(|| Error::config("probe needs at least one model"))?;
    for (tag, m) in models {
        if m.config.vocab_size != first.1.config.vocab_size {
            return Err(Error::config(format!(
                "model {tag} has vocabulary size {} but {} has {}",
                m.config.vocab_size, first.0, first.1.config.vocab_size
            )));
        }
    }
    if let Embedder::Shared(e) = embedder {
        if e.config.vocab_size != first.1.config.vocab_size {
            return Err(Error::config("embedder vocabulary differs from the probed models"));
        }
    }
    let mut masks = Vec::with_capacity(probe_set.len());
    let mut skipped = Vec::new();
    for item in probe_set {
        match mask_suffix(&item.ids, fraction)? {
            Some(m) => masks.push((item, m)),
            None => skipped.push(item.report_id.clone()),
        }
    }
    models
        .iter()
        .map(|(tag, model)| {
            let emb = match embedder {
                Embedder::Own => *model,
                Embedder::Shared(e) => e,
            };
            let cosines: Vec<(String, f64)> = masks
                .par_iter()
                .map(|(item, m)| {
                    let fill = forward_complete(model, &m.ids, &m.positions)?;
                    let mut completed = m.ids.clone();
                    for (&p, &t) in m.positions.iter().zip(&fill) {
                        completed[p] = t;
                    }
                    let c = cosine(&embed_text(emb, &item.ids)?, &embed_text(emb, &completed)?)?;
                    Ok((item.report_id.clone(), c))
                })
                .collect::<Result<_>>()?;
            let values: Vec<f64> = cosines.iter().map(|c| c.1).collect();
            let (mean, std) = mean_std(&values);
            Ok(ProbeResult {
                model_tag: tag.clone(),
                cosines,
                mean,
                std,
                skipped: skipped.clone(),
            })
        })
        .collect()
}

/// `model_tag,report_id,cosine` rows.
pub fn write_probe_csv(results: &[ProbeResult], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ser = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(["model_tag", "report_id", "cosine"]).map_err(ser)?;
    for r in results {
        for (id, c) in &r.cosines {
            w.write_record([r.model_tag.as_str(), id, &format!("{c:.12}")])
                .map_err(ser)?;
        }
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))
}

/// `model_tag,mean,std,n` rows.
pub fn write_summary_csv(results: &[ProbeResult], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ser = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(["model_tag", "mean", "std", "n"]).map_err(ser)?;
    for r in results {
        w.write_record([
            r.model_tag.clone(),
            format!("{:.12}", r.mean),
            format!("{:.12}", r.std),
            r.cosines.len().to_string(),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))
}
