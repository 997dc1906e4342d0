//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as an append-only list of nodes, so
//! node indices are already a topological order. [`Graph::backward`] walks
//! that list once in reverse. Parameters are bound by reference, which lets
//! many graphs (one per sample) share a single immutable parameter snapshot.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the flat index of a broadcast output maps back onto an input.
#[derive(Debug)]
enum Bcast {
    Same,
    Modulo(usize),
    Map(Vec<usize>),
}

impl Bcast {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Modulo(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Relu,
    Gelu,
    Sigmoid,
    Log,
    Exp,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        amap: Bcast,
        bmap: Bcast,
    },
    Scale {
        x: Var,
        c: T,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    MeanRows {
        x: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<'a, T: Real> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    requires_grad: bool,
    op: Op<T>,
}

/// Variance floor used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<'a, T: Real = f64> {
    nodes: Vec<Node<'a, T>>,
    track: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real = f64> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, `None` when the leaf is frozen or unreachable.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    /// A graph that records operations for [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A graph that only evaluates values; nothing requires grad.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node holds a valid tensor")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = requires_grad && self.track;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter by reference. It participates in backward iff the
    /// tensor is flagged `requires_grad` and this graph tracks gradients.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            requires_grad: t.requires_grad() && self.track,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// An owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Matrix product `a·b` of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product `a·bᵀ` of `[m×k]` and `[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let mismatch = |g: &Self| Error::Shape {
            op,
            lhs: g.nodes[a.0].shape.clone(),
            rhs: g.nodes[b.0].shape.clone(),
        };
        let (m, k) = self.dims2(a, op).map_err(|_| mismatch(self))?;
        let (br, bc) = self.dims2(b, op).map_err(|_| mismatch(self))?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(mismatch(self));
        }
        let mut out = vec![T::zero(); m * n];
        let bs = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            (k as isize, 1),
            self.value(b),
            bs,
            T::zero(),
            &mut out,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            vec![m, n],
            out,
            rg,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Bcast, Bcast)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa == sb {
            return Ok((sa.clone(), Bcast::Same, Bcast::Same));
        }
        let rank = sa.len().max(sb.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(sa), pad(sb));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            out.push(match (x, y) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::Shape {
                        op,
                        lhs: sa.clone(),
                        rhs: sb.clone(),
                    })
                }
            });
        }
        let map_for = |s: &[usize], padded: &[usize]| -> Bcast {
            if s == out.as_slice() {
                return Bcast::Same;
            }
            let first = s.iter().position(|&d| d != 1).unwrap_or(s.len());
            let core = &s[first..];
            if out.ends_with(core) {
                return Bcast::Modulo(numel(core).max(1));
            }
            let total = numel(&out);
            let mut map = Vec::with_capacity(total);
            let mut idx = vec![0usize; rank];
            for _ in 0..total {
                let mut flat = 0;
                for d in 0..rank {
                    let ix = if padded[d] == 1 { 0 } else { idx[d] };
                    flat = flat * padded[d] + ix;
                }
                map.push(flat);
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < out[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            Bcast::Map(map)
        };
        let amap = map_for(sa, &pa);
        let bmap = map_for(sb, &pb);
        Ok((out, amap, bmap))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        let (shape, amap, bmap) = self.broadcast(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let out: Vec<T> = match (&amap, &bmap) {
            (Bcast::Same, Bcast::Same) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            (Bcast::Same, Bcast::Modulo(n)) => va
                .chunks(*n)
                .flat_map(|row| row.iter().zip(vb).map(|(&x, &y)| f(x, y)))
                .collect(),
            _ => (0..numel(&shape))
                .map(|i| f(va[amap.at(i)], vb[bmap.at(i)]))
                .collect(),
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Binary {
                kind,
                a,
                b,
                amap,
                bmap,
            },
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_grad(&[x]);
        self.push(shape, out, rg, Op::Scale { x, c })
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let out: Vec<T> = match kind {
            UnaryKind::Relu => vx.iter().map(|&v| v.max(T::zero())).collect(),
            UnaryKind::Gelu => vx.iter().map(|&v| gelu(v)).collect(),
            UnaryKind::Sigmoid => vx.iter().map(|&v| sigmoid(v)).collect(),
            UnaryKind::Exp => vx.iter().map(|&v| v.exp()).collect(),
            UnaryKind::Log => {
                if let Some(pos) = vx.iter().position(|&v| v.is_nan() || v <= T::zero()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {:?} at index {pos}", vx[pos]),
                    });
                }
                vx.iter().map(|&v| v.ln()).collect()
            }
        };
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, out, rg, Op::Unary { kind, x }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x).expect("relu is total")
    }

    /// GELU, tanh approximation (smooth everywhere).
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x).expect("gelu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x).expect("exp is total")
    }

    /// Natural log; fails on any non-positive entry.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    fn last_axis(&self, x: Var) -> (usize, usize) {
        let shape = &self.nodes[x.0].shape;
        let d = shape.last().copied().unwrap_or(1);
        (numel(shape) / d, d)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (rows, d) = self.last_axis(x);
        let vx = self.value(x);
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let src = &vx[r * d..(r + 1) * d];
            let dst = &mut out[r * d..(r + 1) * d];
            let max = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - max).exp();
                total = total + *o;
            }
            for o in dst.iter_mut() {
                *o = *o / total;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_grad(&[x]);
        self.push(shape, out, rg, Op::Softmax { x })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (rows, d) = self.last_axis(x);
        let vx = self.value(x);
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let src = &vx[r * d..(r + 1) * d];
            let lse = log_sum_exp(src);
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(src) {
                *o = v - lse;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_grad(&[x]);
        self.push(shape, out, rg, Op::LogSoftmax { x })
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, d) = self.last_axis(x);
        for p in [gain, bias] {
            if numel(&self.nodes[p.0].shape) != d {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.nodes[x.0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let dn = T::lit(d as f64);
        let (vx, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let src = &vx[r * d..(r + 1) * d];
            let mean = src.iter().copied().sum::<T>() / dn;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (src[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Vec::new(), vec![s], rg, Op::Sum { x })
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.iter().copied().sum::<T>() / T::lit(vx.len() as f64);
        let rg = self.any_grad(&[x]);
        self.push(Vec::new(), vec![s], rg, Op::Mean { x })
    }

    /// Column means of a `[r×c]` matrix, as `[1×c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "mean_rows")?;
        let vx = self.value(x);
        let mut out = vec![T::zero(); c];
        for row in vx.chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let rn = T::lit(r as f64);
        for o in &mut out {
            *o = *o / rn;
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![1, c], out, rg, Op::MeanRows { x }))
    }

    /// Row lookup: `table[ids[i]]` stacked into `[len×d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows needs at least one id"));
        }
        if let Some(pos) = ids.iter().position(|&i| i >= v) {
            return Err(Error::Input {
                position: pos,
                detail: format!("row id {} out of range for table with {v} rows", ids[pos]),
            });
        }
        let vt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&vt[i * d..(i + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Columns `start..start+width` of a `[r×c]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if width == 0 || start + width > c {
            return Err(Error::contract(format!(
                "slice_cols {start}..{} out of range for {c} columns",
                start + width
            )));
        }
        let vx = self.value(x);
        let mut out = Vec::with_capacity(r * width);
        for row in vx.chunks_exact(c) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(vec![r, width], out, rg, Op::SliceCols { x, start }))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one part"))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.nodes[first.0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[row * w..(row + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            vec![r, total],
            out,
            rg,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Inverted dropout with keep-probability `1 - rate`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, out, rg, Op::Dropout { x, mask }))
    }

    /// Mean binary cross-entropy of `logits` against 0/1 `targets`, in the
    /// stable form `max(z,0) - z·y + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: self.nodes[logits.0].shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let total: T = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / T::lit(z.len() as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            rg,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean categorical cross-entropy of `[n×V]` logits against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(pos) = targets.iter().position(|&t| t >= v) {
            return Err(Error::Input {
                position: pos,
                detail: format!("class id {} out of range for {v} classes", targets[pos]),
            });
        }
        let z = self.value(logits);
        let rg = self.any_grad(&[logits]);
        let mut probs = if rg { vec![T::zero(); n * v] } else { Vec::new() };
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &z[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            total = total + lse - row[t];
            if rg {
                for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                    *p = (x - lse).exp();
                }
            }
        }
        let loss = total / T::lit(n as f64);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// reachable leaf that requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot(nodes, grads, *a) {
                    // dA = G·Bᵀ, or G·B when the forward used Bᵀ.
                    let bs = if *trans_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    T::gemm(m, n, k, T::one(), g, (n as isize, 1), vb, bs, T::one(), ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    if *trans_b {
                        // dB = Gᵀ·A, shape [n×k].
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            g,
                            (1, n as isize),
                            va,
                            (k as isize, 1),
                            T::one(),
                            gb,
                        );
                    } else {
                        // dB = Aᵀ·G, shape [k×n].
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            va,
                            (1, k as isize),
                            g,
                            (n as isize, 1),
                            T::one(),
                            gb,
                        );
                    }
                }
            }
            Op::Binary {
                kind,
                a,
                b,
                amap,
                bmap,
            } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinKind::Add | BinKind::Sub => gi,
                            BinKind::Mul => gi * vb[bmap.at(i)],
                        };
                        let j = amap.at(i);
                        ga[j] = ga[j] + d;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinKind::Add => gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * va[amap.at(i)],
                        };
                        let j = bmap.at(i);
                        gb[j] = gb[j] + d;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o = *o + gi * *c;
                    }
                }
            }
            Op::Unary { kind, x } => {
                let vx = &nodes[x.0].value;
                let out = &node.value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Relu => {
                                if vx[i] > T::zero() {
                                    g[i]
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Gelu => g[i] * gelu_grad(vx[i]),
                            UnaryKind::Sigmoid => g[i] * out[i] * (T::one() - out[i]),
                            UnaryKind::Exp => g[i] * out[i],
                            UnaryKind::Log => g[i] / vx[i],
                        };
                        gx[i] = gx[i] + d;
                    }
                }
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let d = node.shape.last().copied().unwrap_or(1);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..y.len() / d {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] = gx[r * d + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let y = &node.value;
                let d = node.shape.last().copied().unwrap_or(1);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..y.len() / d {
                        let gr = &g[r * d..(r + 1) * d];
                        let total: T = gr.iter().copied().sum();
                        for j in 0..d {
                            let p = y[r * d + j].exp();
                            gx[r * d + j] = gx[r * d + j] + gr[j] - p * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.shape.last().copied().unwrap_or(1);
                let rows = xhat.len() / d;
                let gv = &nodes[gain.0].value;
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let dn = T::lit(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / dn;
                        let m2 = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            gx[r * d + j] =
                                gx[r * d + j] + inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in gx.iter_mut() {
                        *o = *o + g[0];
                    }
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let s = g[0] / T::lit(gx.len() as f64);
                    for o in gx.iter_mut() {
                        *o = *o + s;
                    }
                }
            }
            Op::MeanRows { x } => {
                let shape = &nodes[x.0].shape;
                let (r, c) = (shape[0], shape[1]);
                if let Some(gx) = slot(nodes, grads, *x) {
                    let rn = T::lit(r as f64);
                    for row in gx.chunks_exact_mut(c) {
                        for (o, &gi) in row.iter_mut().zip(g) {
                            *o = *o + gi / rn;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = nodes[table.0].shape[1];
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        for (o, &gi) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o = *o + gi;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].shape[1];
                let w = node.shape[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (row, grow) in gx.chunks_exact_mut(c).zip(g.chunks_exact(w)) {
                        for (o, &gi) in row[*start..*start + w].iter_mut().zip(grow) {
                            *o = *o + gi;
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    if let Some(gp) = slot(nodes, grads, p) {
                        for (row, grow) in gp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            for (o, &gi) in row.iter_mut().zip(&grow[offset..offset + w]) {
                                *o = *o + gi;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o = *o + gi * m;
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let z = &nodes[logits.0].value;
                if let Some(gz) = slot(nodes, grads, *logits) {
                    let s = g[0] / T::lit(z.len() as f64);
                    for i in 0..z.len() {
                        gz[i] = gz[i] + s * (sigmoid(z[i]) - targets[i]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].shape[1];
                if let Some(gz) = slot(nodes, grads, *logits) {
                    let s = g[0] / T::lit(targets.len() as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gz[r * v + j] = gz[r * v + j] + s * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

/// Accumulation buffer for `v`, or `None` when `v` is frozen.
fn slot<'g, T: Real>(
    nodes: &[Node<'_, T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]))
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

pub(crate) fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = t(&[2, 2], &[1.5, -2.0, 0.25, 7.0]);
        let id = Tensor::identity(2);
        let mut g = Graph::no_grad();
        let (a, b) = (g.constant(id), g.constant(m.clone()));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p), m.data());

        let mut g = Graph::no_grad();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[0.0, 1.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(p), &[2, 1]);
        assert_eq!(g.value(p), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = randn(&[5, 7], &mut rng);
        let b = randn(&[7, 3], &mut rng);
        let expected = naive_matmul(&a, &b);
        let mut g = Graph::no_grad();
        let (va, vb) = (g.constant(a), g.constant(b.clone()));
        let p = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(p).iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::no_grad();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_sigmoid_layer_norm_values() {
        let mut g = Graph::no_grad();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = g.softmax(x);
        for &v in g.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let z = g.constant(Tensor::scalar(0.0));
        let sz = g.sigmoid(z);
        assert_eq!(g.value(sz), &[0.5]);

        // [1,2,3]: mean 2, biased variance 2/3 → (x-2)/sqrt(2/3 + eps).
        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let gain = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let bias = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let s = 1.0 / (2.0f64 / 3.0 + LAYER_NORM_EPS).sqrt();
        let want = [-s, 0.0, s];
        for (a, b) in g.value(y).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let out = g.value(y);
        let mean: f64 = out.iter().sum::<f64>() / 3.0;
        let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_of_constant_row_is_finite() {
        let mut g = Graph::new();
        let xt = t(&[1, 4], &[3.0; 4]).with_requires_grad(true);
        let gain = t(&[4], &[1.0; 4]);
        let bias = t(&[4], &[0.5; 4]);
        let x = g.param(&xt);
        let (gv, bv) = (g.constant(gain), g.constant(bias));
        let y = g.layer_norm(x, gv, bv).unwrap();
        assert_eq!(g.value(y), &[0.5; 4]);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn backward_linear_case() {
        // loss = sum(W·x): dL/dW[i][j] = x[j] for every row i.
        let w = t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).with_requires_grad(true);
        let x = t(&[2, 1], &[2.0, -1.0]);
        let mut g = Graph::new();
        let (wv, xv) = (g.param(&w), g.constant(x));
        let y = g.matmul(wv, xv).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(wv).unwrap(), &[2.0, -1.0, 2.0, -1.0, 2.0, -1.0]);
        assert!(grads.get(xv).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let w = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let v = g.param(&w);
        let e = g.exp(v);
        assert!(matches!(g.backward(e), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_bias_and_general() {
        let mut g = Graph::new();
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_requires_grad(true);
        let b = t(&[3], &[10.0, 20.0, 30.0]).with_requires_grad(true);
        let c = t(&[2, 1], &[1.0, 2.0]).with_requires_grad(true);
        let (av, bv, cv) = (g.param(&a), g.param(&b), g.param(&c));
        let s = g.add(av, bv).unwrap();
        assert_eq!(g.value(s), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let p = g.mul(s, cv).unwrap();
        assert_eq!(g.value(p), &[11.0, 22.0, 33.0, 28.0, 50.0, 72.0]);
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(bv).unwrap(), &[3.0, 3.0, 3.0]);
        assert_eq!(grads.get(cv).unwrap(), &[66.0, 75.0]);
        assert_eq!(grads.get(av).unwrap(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let a = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        let b = t(&[2], &[3.0, 4.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let (av, bv) = (g.param(&a), g.param(&b));
        let l = g.sum(av);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(bv).is_none());
        assert_eq!(grads.get(av).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn gather_rejects_out_of_range_ids() {
        let mut g = Graph::<f64>::no_grad();
        let table = g.constant(Tensor::zeros([4, 2]));
        match g.gather_rows(table, &[0, 3, 4]) {
            Err(Error::Input { position, .. }) => assert_eq!(position, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn f32_matmul_path() {
        let a: Tensor<f32> = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        let b: Tensor<f32> = Tensor::new([2, 1], vec![3.0, 4.0]).unwrap();
        let mut g = Graph::no_grad();
        let (av, bv) = (g.constant(a), g.constant(b));
        let p = g.matmul(av, bv).unwrap();
        assert_eq!(g.value(p), &[11.0f32]);
    }
}
