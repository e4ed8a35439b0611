//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records the intermediates of one forward pass together with
//! just enough context to replay it backwards. Training builds one tape per
//! sequence; tapes are short-lived and never shared across threads, so batch
//! parallelism stays trivial and the reduction order stays under the
//! caller's control. The op set is exactly what the model needs, nothing
//! speculative.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Epsilon inside the RMS normalizer.
pub const RMS_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node<S: Scalar> {
    value: Tensor<S>,
    needs_grad: bool,
    op: Op<S>,
}

enum Op<S: Scalar> {
    Leaf,
    Add(usize, usize),
    Scale(usize, S),
    /// `A · B`
    MatMul(usize, usize),
    /// `A · Bᵀ`, the linear-layer pattern.
    MatMulNt(usize, usize),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        /// Per-row `1/sqrt(mean(x²)+eps)`, saved by the forward pass.
        inv_rms: Vec<S>,
    },
    /// Row-wise softmax over a square score matrix with strictly-upper
    /// entries masked out. The node value holds the probabilities.
    CausalSoftmax(usize),
    Silu(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    /// Sum of per-position NLL over unmasked positions; value is scalar.
    CrossEntropySum {
        logits: usize,
        probs: Tensor<S>,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

/// Gradients keyed by [`Var`]; only trainable leaves keep entries after
/// [`Tape::backward`], intermediates are dropped as soon as consumed.
#[derive(Debug)]
pub struct Grads<S: Scalar> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, needs_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, needs_grad: bool) -> Var {
        self.push(value, needs_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient (inputs, frozen weights).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let value = self.value(x).scale(factor);
        let needs = self.needs(x);
        self.push(value, needs, Op::Scale(x.0, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::MatMul(a.0, b.0)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::MatMulNt(a.0, b.0)))
    }

    /// Selects `table[id]` rows into a `[len(ids), d]` tensor.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::shape(format!(
                "gather_rows table must be 2-D, got {:?}",
                tv.shape()
            )));
        }
        if ids.is_empty() {
            return Err(Error::argument("gather_rows needs at least one id"));
        }
        let (rows, d) = (tv.nrows(), tv.ncols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index(format!(
                    "gather_rows id {id} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::from_raw(vec![ids.len(), d], data);
        let needs = self.needs(table);
        Ok(self.push(
            value,
            needs,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row-wise RMS normalization with a learned gain:
    /// `y[t,j] = x[t,j] / sqrt(mean_j x[t,·]² + eps) · gain[j]`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gain);
        if xv.rank() != 2 || gv.rank() != 1 || gv.shape()[0] != xv.ncols() {
            return Err(Error::shape(format!(
                "rms_norm expects x[T,d] and gain[d], got {:?} and {:?}",
                xv.shape(),
                gv.shape()
            )));
        }
        let (t, d) = (xv.nrows(), xv.ncols());
        let dd = S::from_f64(d as f64);
        let eps = S::from_f64(RMS_EPS);
        let mut inv_rms = Vec::with_capacity(t);
        let mut data = Vec::with_capacity(t * d);
        for row in 0..t {
            let xs = xv.row(row);
            let mean_sq = xs.iter().map(|&v| v * v).sum::<S>() / dd;
            let r = (mean_sq + eps).sqrt().recip();
            inv_rms.push(r);
            for (j, &v) in xs.iter().enumerate() {
                data.push(v * r * gv.data()[j]);
            }
        }
        let value = Tensor::from_raw(vec![t, d], data);
        let needs = self.needs(x) || self.needs(gain);
        Ok(self.push(
            value,
            needs,
            Op::RmsNorm {
                x: x.0,
                gain: gain.0,
                inv_rms,
            },
        ))
    }

    /// Softmax of each row of a square score matrix restricted to columns
    /// `0..=row`; later columns get probability exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.nrows() != xv.ncols() {
            return Err(Error::shape(format!(
                "causal_softmax expects a square matrix, got {:?}",
                xv.shape()
            )));
        }
        let t = xv.nrows();
        let mut data = vec![S::zero(); t * t];
        for i in 0..t {
            let row = &xv.row(i)[..=i];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                data[i * t + j] = e;
                sum += e;
            }
            for j in 0..=i {
                data[i * t + j] = data[i * t + j] / sum;
            }
        }
        let value = Tensor::from_raw(vec![t, t], data);
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::CausalSoftmax(x.0)))
    }

    /// `x · sigmoid(x)` elementwise.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let needs = self.needs(x);
        self.push(value, needs, Op::Silu(x.0))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape(format!(
                "slice_cols expects a 2-D tensor, got {:?}",
                xv.shape()
            )));
        }
        if len == 0 || start + len > xv.ncols() {
            return Err(Error::Index(format!(
                "slice_cols [{start}, {start}+{len}) out of range for {} columns",
                xv.ncols()
            )));
        }
        let t = xv.nrows();
        let mut data = Vec::with_capacity(t * len);
        for row in 0..t {
            data.extend_from_slice(&xv.row(row)[start..start + len]);
        }
        let value = Tensor::from_raw(vec![t, len], data);
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::SliceCols { x: x.0, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::argument("concat_cols needs at least one part"));
        }
        let t = self.value(parts[0]).nrows();
        let mut width = 0usize;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.nrows() != t {
                return Err(Error::shape(format!(
                    "concat_cols parts must share the row count {t}, got {:?}",
                    pv.shape()
                )));
            }
            width += pv.ncols();
        }
        let mut data = Vec::with_capacity(t * width);
        for row in 0..t {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(row));
            }
        }
        let value = Tensor::from_raw(vec![t, width], data);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            value,
            needs,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
        ))
    }

    /// Sum of `-log softmax(logits[t])[targets[t]]` over positions with
    /// `mask[t]` true; returns the scalar node and the unmasked count.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<(Var, usize)> {
        let lv = self.value(logits);
        if lv.rank() != 2 {
            return Err(Error::shape(format!(
                "cross_entropy_sum expects 2-D logits, got {:?}",
                lv.shape()
            )));
        }
        let (t, v) = (lv.nrows(), lv.ncols());
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape(format!(
                "cross_entropy_sum expects {t} targets and mask entries, got {} and {}",
                targets.len(),
                mask.len()
            )));
        }
        let mut probs = vec![S::zero(); t * v];
        let mut total = S::zero();
        let mut count = 0usize;
        for pos in 0..t {
            if !mask[pos] {
                continue;
            }
            if targets[pos] >= v {
                return Err(Error::Index(format!(
                    "target {} at position {pos} out of range for vocab {v}",
                    targets[pos]
                )));
            }
            let row = lv.row(pos);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[pos * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                probs[pos * v + j] = probs[pos * v + j] / sum;
            }
            total += max + sum.ln() - row[targets[pos]];
            count += 1;
        }
        if count == 0 {
            return Err(Error::DegenerateBatch(
                "cross_entropy_sum over fully masked positions".into(),
            ));
        }
        let needs = self.needs(logits);
        let var = self.push(
            Tensor::scalar(total),
            needs,
            Op::CrossEntropySum {
                logits: logits.0,
                probs: Tensor::from_raw(vec![t, v], probs),
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        );
        Ok((var, count))
    }

    /// Backward pass from a scalar root, seeded with 1.
    pub fn backward(&self, root: Var) -> Result<Grads<S>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar root, got {:?}; use backward_with_seed",
                self.value(root).shape()
            )));
        }
        self.backward_with_seed(root, &Tensor::scalar(S::one()))
    }

    /// Backward pass with an explicit output cotangent; the result holds
    /// `d(sum(seed ⊙ root)) / d(leaf)` for every trainable leaf.
    pub fn backward_with_seed(&self, root: Var, seed: &Tensor<S>) -> Result<Grads<S>> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::shape(format!(
                "seed shape {:?} does not match root {:?}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(root) {
            return Ok(Grads { slots: grads });
        }
        grads[root.0] = Some(seed.clone());
        for idx in (0..=root.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            match &self.nodes[idx].op {
                // Leaves keep their accumulated gradient for the caller.
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let dy = grads[idx].take().unwrap();
                    if self.nodes[*b].needs_grad {
                        accum(&mut grads, *b, dy.clone())?;
                    }
                    if self.nodes[*a].needs_grad {
                        accum(&mut grads, *a, dy)?;
                    }
                }
                Op::Scale(x, factor) => {
                    let dy = grads[idx].take().unwrap();
                    if self.nodes[*x].needs_grad {
                        accum(&mut grads, *x, dy.scale(*factor))?;
                    }
                }
                Op::MatMul(a, b) => {
                    let dy = grads[idx].take().unwrap();
                    if self.nodes[*a].needs_grad {
                        accum(&mut grads, *a, dy.matmul_nt(&self.nodes[*b].value)?)?;
                    }
                    if self.nodes[*b].needs_grad {
                        accum(&mut grads, *b, self.nodes[*a].value.matmul_tn(&dy)?)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    let dy = grads[idx].take().unwrap();
                    if self.nodes[*a].needs_grad {
                        accum(&mut grads, *a, dy.matmul(&self.nodes[*b].value)?)?;
                    }
                    if self.nodes[*b].needs_grad {
                        accum(&mut grads, *b, dy.matmul_tn(&self.nodes[*a].value)?)?;
                    }
                }
                Op::GatherRows { table, ids } => {
                    let dy = grads[idx].take().unwrap();
                    if self.nodes[*table].needs_grad {
                        let tv = &self.nodes[*table].value;
                        let (rows, d) = (tv.nrows(), tv.ncols());
                        let mut g = vec![S::zero(); rows * d];
                        for (t, &id) in ids.iter().enumerate() {
                            let slot = &mut g[id * d..(id + 1) * d];
                            for (s, &v) in slot.iter_mut().zip(dy.row(t)) {
                                *s += v;
                            }
                        }
                        accum(&mut grads, *table, Tensor::from_raw(vec![rows, d], g))?;
                    }
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let dy = grads[idx].take().unwrap();
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*gain].value;
                    let (t, d) = (xv.nrows(), xv.ncols());
                    let dd = S::from_f64(d as f64);
                    if self.nodes[*gain].needs_grad {
                        let mut dg = vec![S::zero(); d];
                        for row in 0..t {
                            let r = inv_rms[row];
                            for (j, s) in dg.iter_mut().enumerate() {
                                *s += dy.at2(row, j) * xv.at2(row, j) * r;
                            }
                        }
                        accum(&mut grads, *gain, Tensor::from_raw(vec![d], dg))?;
                    }
                    if self.nodes[*x].needs_grad {
                        let mut dx = vec![S::zero(); t * d];
                        for row in 0..t {
                            let r = inv_rms[row];
                            let s: S = (0..d)
                                .map(|j| dy.at2(row, j) * gv.data()[j] * xv.at2(row, j))
                                .sum();
                            let shrink = r * r * r / dd * s;
                            for j in 0..d {
                                dx[row * d + j] =
                                    r * gv.data()[j] * dy.at2(row, j) - shrink * xv.at2(row, j);
                            }
                        }
                        accum(&mut grads, *x, Tensor::from_raw(vec![t, d], dx))?;
                    }
                }
                Op::CausalSoftmax(x) => {
                    let dy = grads[idx].take().unwrap();
                    if self.nodes[*x].needs_grad {
                        let p = &self.nodes[idx].value;
                        let t = p.nrows();
                        let mut dx = vec![S::zero(); t * t];
                        for i in 0..t {
                            let prow = p.row(i);
                            let dyrow = dy.row(i);
                            let dot: S = prow.iter().zip(dyrow).map(|(&a, &b)| a * b).sum();
                            for j in 0..=i {
                                dx[i * t + j] = prow[j] * (dyrow[j] - dot);
                            }
                        }
                        accum(&mut grads, *x, Tensor::from_raw(vec![t, t], dx))?;
                    }
                }
                Op::Silu(x) => {
                    let dy = grads[idx].take().unwrap();
                    if self.nodes[*x].needs_grad {
                        let xv = &self.nodes[*x].value;
                        let data: Vec<S> = xv
                            .data()
                            .iter()
                            .zip(dy.data())
                            .map(|(&v, &g)| {
                                let sig = sigmoid(v);
                                g * (sig + v * sig * (S::one() - sig))
                            })
                            .collect();
                        accum(&mut grads, *x, Tensor::from_raw(xv.shape().to_vec(), data))?;
                    }
                }
                Op::SliceCols { x, start } => {
                    let dy = grads[idx].take().unwrap();
                    if self.nodes[*x].needs_grad {
                        let xv = &self.nodes[*x].value;
                        let (t, c) = (xv.nrows(), xv.ncols());
                        let w = dy.ncols();
                        let mut dx = vec![S::zero(); t * c];
                        for row in 0..t {
                            dx[row * c + start..row * c + start + w].copy_from_slice(dy.row(row));
                        }
                        accum(&mut grads, *x, Tensor::from_raw(vec![t, c], dx))?;
                    }
                }
                Op::ConcatCols(parts) => {
                    let dy = grads[idx].take().unwrap();
                    let t = dy.nrows();
                    let mut offset = 0usize;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        if self.nodes[p].needs_grad {
                            let mut dp = Vec::with_capacity(t * w);
                            for row in 0..t {
                                dp.extend_from_slice(&dy.row(row)[offset..offset + w]);
                            }
                            accum(&mut grads, p, Tensor::from_raw(vec![t, w], dp))?;
                        }
                        offset += w;
                    }
                }
                Op::CrossEntropySum {
                    logits,
                    probs,
                    targets,
                    mask,
                } => {
                    let dy = grads[idx].take().unwrap();
                    if self.nodes[*logits].needs_grad {
                        let s = dy.data()[0];
                        let (t, v) = (probs.nrows(), probs.ncols());
                        let mut dl = vec![S::zero(); t * v];
                        for pos in 0..t {
                            if !mask[pos] {
                                continue;
                            }
                            for (j, &p) in probs.row(pos).iter().enumerate() {
                                let indicator = if j == targets[pos] { S::one() } else { S::zero() };
                                dl[pos * v + j] = s * (p - indicator);
                            }
                        }
                        accum(&mut grads, *logits, Tensor::from_raw(vec![t, v], dl))?;
                    }
                }
            }
        }
        Ok(Grads { slots: grads })
    }
}

fn accum<S: Scalar>(grads: &mut [Option<Tensor<S>>], idx: usize, delta: Tensor<S>) -> Result<()> {
    if let Some(g) = &mut grads[idx] {
        g.add_assign(&delta)
    } else {
        grads[idx] = Some(delta);
        Ok(())
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_fill, SeededRng};
    use proptest::prelude::*;

    /// Central finite differences against the tape gradients. The scalar
    /// objective is `sum(seed ⊙ build(inputs))` with a fixed random seed
    /// tensor, so `backward_with_seed` is exactly its gradient.
    fn fd_check<F>(inputs: &[Tensor<f64>], trainable: &[bool], build: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let h = 1e-5;
        let tol = 1e-6;
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(trainable)
            .map(|(t, &tr)| tape.leaf(t.clone(), tr))
            .collect();
        let y = build(&mut tape, &vars);
        let mut rng = SeededRng::new(7);
        let seed = gaussian_fill::<f64>(tape.value(y).shape(), &mut rng, 1.0).unwrap();
        let grads = tape.backward_with_seed(y, &seed).unwrap();

        let eval = |xs: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs
                .iter()
                .zip(trainable)
                .map(|(t, &tr)| tape.leaf(t.clone(), tr))
                .collect();
            let y = build(&mut tape, &vars);
            tape.value(y)
                .data()
                .iter()
                .zip(seed.data())
                .map(|(&a, &b)| a * b)
                .sum()
        };

        for (i, &tr) in trainable.iter().enumerate() {
            if !tr {
                assert!(
                    grads.get(vars[i]).is_none(),
                    "frozen leaf {i} must not receive a gradient"
                );
                continue;
            }
            let g = grads.get(vars[i]).expect("trainable leaf gradient");
            assert_eq!(g.shape(), inputs[i].shape());
            for j in 0..inputs[i].numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = g.data()[j];
                let denom = 1.0f64.max(fd.abs()).max(a.abs());
                assert!(
                    (fd - a).abs() / denom <= tol,
                    "input {i} coord {j}: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SeededRng::new(seed);
        gaussian_fill(shape, &mut rng, 1.0).unwrap()
    }

    #[test]
    fn fd_add_and_scale() {
        let a = randn(&[3, 4], 1);
        let b = randn(&[3, 4], 2);
        fd_check(&[a, b], &[true, true], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            t.scale(s, 1.7)
        });
    }

    #[test]
    fn fd_matmul() {
        let a = randn(&[3, 4], 3);
        let b = randn(&[4, 2], 4);
        fd_check(&[a, b], &[true, true], |t, v| t.matmul(v[0], v[1]).unwrap());
    }

    #[test]
    fn fd_matmul_nt() {
        let a = randn(&[3, 4], 5);
        let b = randn(&[5, 4], 6);
        fd_check(&[a, b], &[true, true], |t, v| {
            t.matmul_nt(v[0], v[1]).unwrap()
        });
    }

    #[test]
    fn fd_gather_rows_with_repeats() {
        let table = randn(&[4, 3], 7);
        // A repeated id checks gradient accumulation into the same row.
        fd_check(&[table], &[true], |t, v| {
            t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap()
        });
    }

    #[test]
    fn fd_rms_norm() {
        let x = randn(&[3, 5], 8);
        let gain = randn(&[5], 9);
        fd_check(&[x, gain], &[true, true], |t, v| {
            t.rms_norm(v[0], v[1]).unwrap()
        });
    }

    #[test]
    fn fd_causal_softmax() {
        let x = randn(&[4, 4], 10);
        fd_check(&[x], &[true], |t, v| t.causal_softmax(v[0]).unwrap());
    }

    #[test]
    fn fd_silu() {
        let x = randn(&[2, 6], 11);
        fd_check(&[x], &[true], |t, v| t.silu(v[0]));
    }

    #[test]
    fn fd_slice_and_concat() {
        let x = randn(&[3, 6], 12);
        fd_check(&[x], &[true], |t, v| {
            let a = t.slice_cols(v[0], 0, 2).unwrap();
            let b = t.slice_cols(v[0], 2, 4).unwrap();
            // Swapped halves so the op is not the identity.
            t.concat_cols(&[b, a]).unwrap()
        });
    }

    #[test]
    fn fd_cross_entropy_sum() {
        let logits = randn(&[4, 7], 13);
        let targets = [2usize, 6, 0, 3];
        let mask = [true, false, true, true];
        fd_check(&[logits], &[true], |t, v| {
            t.cross_entropy_sum(v[0], &targets, &mask).unwrap().0
        });
    }

    #[test]
    fn fd_attention_shaped_composite() {
        let x = randn(&[4, 6], 14);
        let wq = randn(&[6, 6], 15);
        let wk = randn(&[6, 6], 16);
        let wv = randn(&[6, 6], 17);
        fd_check(&[x, wq, wk, wv], &[true, true, true, true], |t, v| {
            let q = t.matmul_nt(v[0], v[1]).unwrap();
            let k = t.matmul_nt(v[0], v[2]).unwrap();
            let vv = t.matmul_nt(v[0], v[3]).unwrap();
            let scores = t.matmul_nt(q, k).unwrap();
            let scaled = t.scale(scores, 1.0 / (6.0f64).sqrt());
            let probs = t.causal_softmax(scaled).unwrap();
            t.matmul(probs, vv).unwrap()
        });
    }

    #[test]
    fn fd_mlp_with_loss_composite() {
        let x = randn(&[3, 4], 18);
        let w_up = randn(&[8, 4], 19);
        let w_down = randn(&[5, 8], 20);
        let gain = randn(&[4], 21);
        let targets = [1usize, 4, 0];
        let mask = [true, true, true];
        fd_check(&[x, w_up, w_down, gain], &[true, true, true, true], |t, v| {
            let n = t.rms_norm(v[0], v[3]).unwrap();
            let u = t.matmul_nt(n, v[1]).unwrap();
            let s = t.silu(u);
            let logits = t.matmul_nt(s, v[2]).unwrap();
            t.cross_entropy_sum(logits, &targets, &mask).unwrap().0
        });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn fd_random_small_shapes(m in 1usize..4, k in 1usize..5, n in 1usize..4, seed in 0u64..1000) {
            let a = randn(&[m, k], seed.wrapping_mul(3).wrapping_add(1));
            let b = randn(&[n, k], seed.wrapping_mul(5).wrapping_add(2));
            fd_check(&[a, b], &[true, true], |t, v| {
                let y = t.matmul_nt(v[0], v[1]).unwrap();
                t.silu(y)
            });
        }
    }

    #[test]
    fn frozen_leaves_are_skipped() {
        let x = randn(&[2, 3], 22);
        let w = randn(&[4, 3], 23);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.leaf(w, true);
        let y = tape.matmul_nt(xv, wv).unwrap();
        let seed = Tensor::filled(vec![2, 4], 1.0).unwrap();
        let grads = tape.backward_with_seed(y, &seed).unwrap();
        assert!(grads.get(xv).is_none());
        assert!(grads.get(wv).is_some());
    }

    #[test]
    fn backward_is_deterministic() {
        let x = randn(&[3, 3], 24);
        let w = randn(&[3, 3], 25);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let y = tape.matmul_nt(xv, wv).unwrap();
            let p = tape.causal_softmax(y).unwrap();
            let (loss, _) = tape
                .cross_entropy_sum(p, &[0, 1, 2], &[true, true, true])
                .unwrap();
            let g = tape.backward(loss).unwrap();
            (
                g.get(xv).unwrap().data().to_vec(),
                g.get(wv).unwrap().data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn causal_probs_mask_future_and_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(randn(&[5, 5], 26));
        let p = tape.causal_softmax(x).unwrap();
        let pv = tape.value(p);
        for i in 0..5 {
            let row_sum: f64 = pv.row(i).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            for j in i + 1..5 {
                assert_eq!(pv.at2(i, j), 0.0);
            }
        }
    }

    #[test]
    fn cross_entropy_sum_matches_mean_version() {
        let logits = randn(&[4, 9], 27);
        let targets = [0usize, 3, 8, 1];
        let mask = [true, true, false, true];
        let mean = crate::tensor::cross_entropy(&logits, &targets, &mask).unwrap();
        let mut tape = Tape::new();
        let lv = tape.constant(logits);
        let (sum, count) = tape.cross_entropy_sum(lv, &targets, &mask).unwrap();
        assert_eq!(count, 3);
        let got = tape.value(sum).data()[0];
        assert!((got - mean * 3.0).abs() < 1e-12, "{got} vs {}", mean * 3.0);
    }

    #[test]
    fn fully_masked_loss_is_degenerate() {
        let mut tape = Tape::<f64>::new();
        let lv = tape.constant(randn(&[2, 4], 28));
        let err = tape.cross_entropy_sum(lv, &[0, 1], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(_)));
    }

    #[test]
    fn backward_rejects_non_scalar_root_without_seed() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(randn(&[2, 2], 29), true);
        let y = tape.silu(x);
        assert!(matches!(tape.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn rms_norm_forward_matches_hand_computation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let g = tape.constant(Tensor::new(vec![2], vec![2.0, 0.5]).unwrap());
        let y = tape.rms_norm(x, g).unwrap();
        // mean square = 12.5, rms ≈ 3.5355339; y = [3/rms·2, 4/rms·0.5].
        let rms = 12.5f64 + RMS_EPS;
        let rms = rms.sqrt();
        let yv = tape.value(y);
        assert!((yv.at2(0, 0) - 3.0 / rms * 2.0).abs() < 1e-12);
        assert!((yv.at2(0, 1) - 4.0 / rms * 0.5).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_copies_and_bounds_checks() {
        let mut tape = Tape::<f64>::new();
        let table = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let picked = tape.gather_rows(table, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(picked).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        assert!(matches!(
            tape.gather_rows(table, &[2]),
            Err(Error::Index(_))
        ));
    }
}
