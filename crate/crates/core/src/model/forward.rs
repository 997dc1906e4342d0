use rayon::prelude::*;

use super::{ModelParams, TokenId};
use crate::autodiff::{Graph, Var};
use crate::corpus::MASK;
use crate::error::{Error, Result};
use crate::per_sample::Binding;
use crate::rng::{rng_for, Prng};
use crate::tensor::Tensor;

/// One training example for the multi-label objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifySample {
    pub ids: Vec<TokenId>,
    /// 0/1 per label.
    pub targets: Vec<f64>,
    pub dropout_seed: Option<u64>,
}

/// One masked-completion example: `ids` already carries mask tokens at
/// `positions`, and `targets[i]` is the original token at `positions[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmSample {
    pub ids: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub targets: Vec<TokenId>,
    pub dropout_seed: Option<u64>,
}

fn var(b: &Binding, model: &ModelParams, name: &str) -> Var {
    let id = model
        .params
        .id(name)
        .unwrap_or_else(|| panic!("model is missing parameter {name}"));
    b.var(id)
}

/// `x·W + bias`, plus `scale·(x·B)·A` when `W` carries an adapter.
fn linear(
    g: &mut Graph<'_>,
    b: &Binding,
    model: &ModelParams,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let weight = format!("{prefix}.weight");
    let mut y = g.matmul(x, var(b, model, &weight))?;
    if let Some(adapter) = model.adapter_for(&weight) {
        let xb = g.matmul(x, var(b, model, &adapter.b_name()))?;
        let xba = g.matmul(xb, var(b, model, &adapter.a_name()))?;
        let scaled = g.scale(xba, adapter.scale);
        y = g.add(y, scaled)?;
    }
    g.add(y, var(b, model, &format!("{prefix}.bias")))
}

fn check_ids(model: &ModelParams, ids: &[TokenId]) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Err(Error::contract("empty token sequence"));
    }
    if ids.len() > model.config.max_seq_len {
        return Err(Error::Input {
            position: model.config.max_seq_len,
            detail: format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                ids.len(),
                model.config.max_seq_len
            ),
        });
    }
    ids.iter()
        .enumerate()
        .map(|(pos, &id)| {
            if (id as usize) < model.config.vocab_size {
                Ok(id as usize)
            } else {
                Err(Error::Input {
                    position: pos,
                    detail: format!(
                        "token id {id} out of range for vocabulary of {}",
                        model.config.vocab_size
                    ),
                })
            }
        })
        .collect()
}

fn maybe_dropout(g: &mut Graph<'_>, x: Var, rate: f64, rng: &mut Option<Prng>) -> Result<Var> {
    match rng {
        Some(r) if rate > 0.0 => g.dropout(x, rate, r),
        _ => Ok(x),
    }
}

/// Final-layer hidden states `[T×d]` for one sequence. Dropout is applied
/// only when `dropout_seed` is given and the configured rate is positive.
pub fn encode(
    g: &mut Graph<'_>,
    b: &Binding,
    model: &ModelParams,
    ids: &[TokenId],
    dropout_seed: Option<u64>,
) -> Result<Var> {
    let ids = check_ids(model, ids)?;
    let cfg = &model.config;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = g.gather_rows(var(b, model, "embed.token"), &ids)?;
    let pos = g.gather_rows(var(b, model, "embed.position"), &positions)?;
    let mut x = g.add(tok, pos)?;
    let mut rng = dropout_seed.map(|s| rng_for(s, "dropout", 0));
    let rate = cfg.dropout_rate;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.n_layers {
        let h = g.layer_norm(
            x,
            var(b, model, &format!("layer{l}.ln1.gain")),
            var(b, model, &format!("layer{l}.ln1.bias")),
        )?;
        let q = linear(g, b, model, &format!("layer{l}.attn.q"), h)?;
        let k = linear(g, b, model, &format!("layer{l}.attn.k"), h)?;
        let v = linear(g, b, model, &format!("layer{l}.attn.v"), h)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, inv_sqrt);
            let attn = g.softmax(scores);
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let attn_out = linear(g, b, model, &format!("layer{l}.attn.o"), cat)?;
        let attn_out = maybe_dropout(g, attn_out, rate, &mut rng)?;
        x = g.add(x, attn_out)?;

        let h = g.layer_norm(
            x,
            var(b, model, &format!("layer{l}.ln2.gain")),
            var(b, model, &format!("layer{l}.ln2.bias")),
        )?;
        let up = linear(g, b, model, &format!("layer{l}.ffn.up"), h)?;
        let act = g.gelu(up);
        let down = linear(g, b, model, &format!("layer{l}.ffn.down"), act)?;
        let down = maybe_dropout(g, down, rate, &mut rng)?;
        x = g.add(x, down)?;
    }
    g.layer_norm(
        x,
        var(b, model, "final_ln.gain"),
        var(b, model, "final_ln.bias"),
    )
}

/// Label logits `[1×L]` from the mean-pooled encoding.
pub fn classify_logits(
    g: &mut Graph<'_>,
    b: &Binding,
    model: &ModelParams,
    ids: &[TokenId],
    dropout_seed: Option<u64>,
) -> Result<Var> {
    let hidden = encode(g, b, model, ids, dropout_seed)?;
    let pooled = g.mean_rows(hidden)?;
    let z = g.matmul(pooled, var(b, model, "head.weight"))?;
    g.add(z, var(b, model, "head.bias"))
}

/// Vocabulary logits `[n×V]` at `positions`, through the tied token table.
pub fn mlm_logits(
    g: &mut Graph<'_>,
    b: &Binding,
    model: &ModelParams,
    hidden: Var,
    positions: &[usize],
) -> Result<Var> {
    let rows = g.gather_rows(hidden, positions)?;
    g.matmul_nt(rows, var(b, model, "embed.token"))
}

/// Mean per-label binary cross-entropy. Targets must be exactly 0 or 1.
pub fn bce_multilabel_loss(g: &mut Graph<'_>, logits: Var, targets: &[f64]) -> Result<Var> {
    if let Some(pos) = targets.iter().position(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Input {
            position: pos,
            detail: format!("label target {} is not binary", targets[pos]),
        });
    }
    g.bce_with_logits(logits, targets)
}

pub fn classify_loss(
    g: &mut Graph<'_>,
    b: &Binding,
    model: &ModelParams,
    sample: &ClassifySample,
) -> Result<Var> {
    let logits = classify_logits(g, b, model, &sample.ids, sample.dropout_seed)?;
    bce_multilabel_loss(g, logits, &sample.targets)
}

pub fn mlm_loss(
    g: &mut Graph<'_>,
    b: &Binding,
    model: &ModelParams,
    sample: &MlmSample,
) -> Result<Var> {
    if sample.positions.is_empty() || sample.positions.len() != sample.targets.len() {
        return Err(Error::contract(
            "masked sample needs matching, non-empty positions and targets",
        ));
    }
    let hidden = encode(g, b, model, &sample.ids, sample.dropout_seed)?;
    let logits = mlm_logits(g, b, model, hidden, &sample.positions)?;
    let targets: Vec<usize> = sample.targets.iter().map(|&t| t as usize).collect();
    g.cross_entropy(logits, &targets)
}

/// Label logits `[B×L]` for a batch, without building gradients.
pub fn forward_classify(model: &ModelParams, batch: &[Vec<TokenId>]) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::contract("forward_classify needs a non-empty batch"));
    }
    let rows: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|ids| {
            let mut g = Graph::no_grad();
            let b = Binding::bind(&mut g, &model.params);
            let z = classify_logits(&mut g, &b, model, ids, None)?;
            Ok(g.value(z).to_vec())
        })
        .collect::<Result<_>>()?;
    let l = model.config.n_labels;
    Tensor::new([batch.len(), l], rows.concat())
}

/// Greedy prediction at each of `positions`; ties go to the lowest id.
pub fn forward_complete(
    model: &ModelParams,
    ids: &[TokenId],
    positions: &[usize],
) -> Result<Vec<TokenId>> {
    let mut g = Graph::no_grad();
    let b = Binding::bind(&mut g, &model.params);
    let hidden = encode(&mut g, &b, model, ids, None)?;
    let logits = mlm_logits(&mut g, &b, model, hidden, positions)?;
    let v = model.config.vocab_size;
    Ok(g.value(logits)
        .chunks(v)
        .map(|row| {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best as TokenId
        })
        .collect())
}

/// `ids` with every `[MASK]` replaced by the greedy prediction.
pub fn complete_masked(model: &ModelParams, ids: &[TokenId]) -> Result<Vec<TokenId>> {
    let positions: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] == MASK).collect();
    if positions.is_empty() {
        return Err(Error::contract("no masked positions to complete"));
    }
    let fill = forward_complete(model, ids, &positions)?;
    let mut out = ids.to_vec();
    for (&p, t) in positions.iter().zip(fill) {
        out[p] = t;
    }
    Ok(out)
}

/// Mean-pooled final hidden state `[d]`.
pub fn pooled_embedding(model: &ModelParams, ids: &[TokenId]) -> Result<Vec<f64>> {
    let mut g = Graph::no_grad();
    let b = Binding::bind(&mut g, &model.params);
    let hidden = encode(&mut g, &b, model, ids, None)?;
    let pooled = g.mean_rows(hidden)?;
    Ok(g.value(pooled).to_vec())
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;

    fn tiny() -> ModelParams {
        ModelParams::init(
            ModelConfig {
                vocab_size: 12,
                max_seq_len: 6,
                d_model: 4,
                n_heads: 2,
                n_layers: 1,
                d_ff: 8,
                n_labels: 3,
                dropout_rate: 0.0,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_sequences() {
        let m = tiny();
        let err = forward_classify(&m, &[vec![1, 2, 12]]).unwrap_err();
        assert!(matches!(err, Error::Input { position: 2, .. }));
        assert!(forward_classify(&m, &[vec![1; 7]]).is_err());
        assert!(forward_classify(&m, &[vec![]]).is_err());
    }

    #[test]
    fn non_binary_targets_are_rejected() {
        let m = tiny();
        let s = ClassifySample {
            ids: vec![1, 2],
            targets: vec![0.0, 1.0, -1.0],
            dropout_seed: None,
        };
        let mut g = Graph::new();
        let b = Binding::bind(&mut g, &m.params);
        assert!(matches!(
            classify_loss(&mut g, &b, &m, &s),
            Err(Error::Input { position: 2, .. })
        ));
    }

    #[test]
    fn batch_rows_match_single_calls() {
        let m = tiny();
        let batch = vec![vec![1, 2, 3], vec![4, 5], vec![6, 7, 8, 9]];
        let all = forward_classify(&m, &batch).unwrap();
        for (i, ids) in batch.iter().enumerate() {
            let one = forward_classify(&m, std::slice::from_ref(ids)).unwrap();
            assert_eq!(&all.data()[i * 3..(i + 1) * 3], one.data());
        }
    }
}
