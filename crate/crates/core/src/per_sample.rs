//! Parameter binding, per-sample gradients, and flat gradient vectors.

use rayon::prelude::*;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Real};

/// Graph handles for every tensor of a [`ParamSet`], indexed by param id.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn bind<'a, T: Real>(graph: &mut Graph<'a, T>, params: &'a ParamSet<T>) -> Self {
        let vars = (0..params.len())
            .map(|i| graph.param(params.tensor(i)))
            .collect();
        Binding { vars }
    }

    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }
}

/// One gradient per parameter id; `None` for frozen parameters. Trainable
/// parameters the loss does not reach hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T: Real = f64> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn get(&self, id: usize) -> Option<&[T]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Concatenation of the trainable gradients in parameter order.
    pub fn flatten(&self) -> Vec<T> {
        self.grads.iter().flatten().flatten().copied().collect()
    }

    pub fn l2_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .flatten()
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }
}

/// Offsets of each trainable tensor inside a flat gradient vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlatLayout {
    entries: Vec<(usize, usize, usize)>,
    total: usize,
}

impl FlatLayout {
    pub fn trainable<T: Real>(params: &ParamSet<T>) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0;
        for id in params.trainable_ids() {
            let n = params.tensor(id).numel();
            entries.push((id, offset, n));
            offset += n;
        }
        FlatLayout {
            entries,
            total: offset,
        }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// `(param id, offset, length)` triples in flat order.
    pub fn entries(&self) -> &[(usize, usize, usize)] {
        &self.entries
    }

    /// Flat view of each trainable tensor's values.
    pub fn gather_values<T: Real>(&self, params: &ParamSet<T>) -> Vec<T> {
        let mut out = Vec::with_capacity(self.total);
        for &(id, _, _) in &self.entries {
            out.extend_from_slice(params.tensor(id).data());
        }
        out
    }
}

fn collect<T: Real>(
    params: &ParamSet<T>,
    binding: &Binding,
    mut grads: crate::autodiff::Gradients<T>,
) -> ParamGrads<T> {
    let grads = (0..params.len())
        .map(|id| {
            let t = params.tensor(id);
            t.requires_grad().then(|| {
                grads
                    .take(binding.var(id))
                    .unwrap_or_else(|| vec![T::zero(); t.numel()])
            })
        })
        .collect();
    ParamGrads { grads }
}

/// Loss value and gradient of a single closure evaluation.
pub fn gradient<T, F>(params: &ParamSet<T>, loss_fn: F) -> Result<(T, ParamGrads<T>)>
where
    T: Real,
    F: for<'g> FnOnce(&mut Graph<'g, T>, &Binding) -> Result<Var>,
{
    let mut graph = Graph::new();
    let binding = Binding::bind(&mut graph, params);
    let loss = loss_fn(&mut graph, &binding)?;
    let value = graph.value(loss)[0];
    let grads = graph.backward(loss)?;
    Ok((value, collect(params, &binding, grads)))
}

/// Gradient of each sample's loss, each on its own tape. Samples may be
/// processed concurrently; the output is always in batch order.
pub fn per_sample_gradients<T, S, F>(
    params: &ParamSet<T>,
    batch: &[S],
    loss_fn: F,
) -> Result<Vec<ParamGrads<T>>>
where
    T: Real,
    S: Sync,
    F: for<'g> Fn(&mut Graph<'g, T>, &Binding, &S) -> Result<Var> + Sync,
{
    Ok(per_sample_losses_and_gradients(params, batch, loss_fn)?.1)
}

/// [`per_sample_gradients`] plus each sample's loss value.
pub fn per_sample_losses_and_gradients<T, S, F>(
    params: &ParamSet<T>,
    batch: &[S],
    loss_fn: F,
) -> Result<(Vec<T>, Vec<ParamGrads<T>>)>
where
    T: Real,
    S: Sync,
    F: for<'g> Fn(&mut Graph<'g, T>, &Binding, &S) -> Result<Var> + Sync,
{
    if batch.is_empty() {
        return Err(Error::contract("per_sample_gradients needs a non-empty batch"));
    }
    let pairs: Vec<(T, ParamGrads<T>)> = batch
        .par_iter()
        .map(|sample| gradient(params, |g, b| loss_fn(g, b, sample)))
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Gradient of the mean loss over `batch`, computed on one shared tape.
pub fn batch_mean_gradient<T, S, F>(
    params: &ParamSet<T>,
    batch: &[S],
    loss_fn: F,
) -> Result<(T, ParamGrads<T>)>
where
    T: Real,
    F: for<'g> Fn(&mut Graph<'g, T>, &Binding, &S) -> Result<Var>,
{
    if batch.is_empty() {
        return Err(Error::contract("batch_mean_gradient needs a non-empty batch"));
    }
    gradient(params, |g, b| {
        let mut losses = Vec::with_capacity(batch.len());
        for s in batch {
            losses.push(loss_fn(g, b, s)?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l)?;
        }
        Ok(g.scale(total, T::one() / T::lit(batch.len() as f64)))
    })
}
