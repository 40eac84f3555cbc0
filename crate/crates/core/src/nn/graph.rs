//! Tape-based reverse-mode differentiation over 2-D activations.
//!
//! A [`Graph`] records one forward pass. Parameters enter through
//! [`Graph::param`]; [`Graph::backward`] walks the tape once in reverse and
//! returns one gradient tensor per entry of the [`ParamSet`].

use super::kernels::{self, AttnShape};
use super::{NnError, ParamSet, Scalar, Tensor};
use crate::rng::StreamRng;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Constant,
    Param(usize),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        means: Vec<F>,
        rstds: Vec<F>,
    },
    Gelu {
        x: Var,
    },
    Attention {
        qkv: Var,
        shape: AttnShape,
        probs: Vec<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<F>,
        count: usize,
    },
    Sum {
        x: Var,
    },
    Scale {
        x: Var,
        factor: F,
    },
    StraightThrough {
        z: Var,
    },
    SqDistMean {
        z: Var,
        target: Vec<F>,
        rows: usize,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> NnError {
    NnError::ShapeMismatch(msg)
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, params: &ParamSet<F>, idx: usize) -> Var {
        self.push(params.by_index(idx).clone(), Op::Param(idx))
    }

    pub fn param_named(&mut self, params: &ParamSet<F>, name: &str) -> Result<Var, NnError> {
        Ok(self.param(params, params.index_of(name)?))
    }

    /// Rows of a `[n, d]` table selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let t = self.value(table);
        let (n, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(shape_err(format!(
                    "embedding id {id} outside table of {n} rows"
                )));
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::from_vec(&[ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(shape_err(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![F::ZERO; m * n];
        F::gemm(
            m,
            k,
            n,
            F::ONE,
            av.data(),
            k,
            1,
            bv.data(),
            n,
            1,
            F::ZERO,
            &mut out,
            n,
            1,
        );
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Adds a length-`n` bias to every row of `[m, n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(shape_err(format!(
                "add_row {:?} + {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (r, &b) in row.iter_mut().zip(bv.data()) {
                *r += b;
            }
        }
        let value = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(value, Op::AddRow { x, bias }))
    }

    /// `x W + b` for `W: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != d || bv.len() != d {
            return Err(shape_err(format!(
                "layer_norm width {d} with gain {:?} bias {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![F::ZERO; rows * d];
        let mut means = vec![F::ZERO; rows];
        let mut rstds = vec![F::ZERO; rows];
        kernels::layer_norm_forward(
            xv.data(),
            d,
            gv.data(),
            bv.data(),
            &mut out,
            Some((&mut means, &mut rstds)),
        );
        let value = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::from_vec(xv.shape(), data).expect("same shape");
        self.push(value, Op::Gelu { x })
    }

    /// Multi-head attention over a packed `[batch*seq, 3d]` qkv activation.
    pub fn attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var, NnError> {
        let qv = self.value(qkv);
        let w = qv.cols();
        if !w.is_multiple_of(3) || qv.rows() != batch * seq {
            return Err(shape_err(format!(
                "attention input {:?} for batch {batch} x seq {seq}",
                qv.shape()
            )));
        }
        let d = w / 3;
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(NnError::Config(format!(
                "d_model {d} not divisible by {heads} heads"
            )));
        }
        let shape = AttnShape {
            batch,
            seq,
            d,
            heads,
            causal,
        };
        let mut out = vec![F::ZERO; batch * seq * d];
        let mut probs = vec![F::ZERO; shape.probs_len()];
        kernels::attention_forward(qv.data(), shape, &mut out, &mut probs);
        let value = Tensor::from_vec(&[batch * seq, d], out)?;
        Ok(self.push(value, Op::Attention { qkv, shape, probs }))
    }

    /// Inverted dropout. A rate of zero records an identity mask.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut StreamRng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let xv = self.value(x);
        let keep = F::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..xv.len())
            .map(|_| if rng.uniform() < rate { F::ZERO } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_vec(xv.shape(), data).expect("same shape");
        self.push(value, Op::Dropout { x, mask })
    }

    /// Mean cross-entropy of rows with a target; `None` rows are ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var, NnError> {
        let lv = self.value(logits);
        let vocab = lv.cols();
        if targets.len() != lv.rows() {
            return Err(shape_err(format!(
                "{} targets for {} logit rows",
                targets.len(),
                lv.rows()
            )));
        }
        if let Some(&t) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(NnError::TargetOutOfRange { target: t, vocab });
        }
        let (loss, count, probs) = kernels::cross_entropy_forward(lv.data(), vocab, targets);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::from_vec(xv.shape(), data).expect("same shape");
        self.push(value, Op::Scale { x, factor })
    }

    /// Forward value `quantized`, gradient copied straight through to `z`.
    pub fn straight_through(&mut self, z: Var, quantized: Tensor<F>) -> Result<Var, NnError> {
        if self.value(z).shape() != quantized.shape() {
            return Err(shape_err(format!(
                "straight-through {:?} vs {:?}",
                self.value(z).shape(),
                quantized.shape()
            )));
        }
        Ok(self.push(quantized, Op::StraightThrough { z }))
    }

    /// Mean over rows of the squared distance from `z` to a fixed target.
    pub fn sq_dist_mean(&mut self, z: Var, target: Tensor<F>) -> Result<Var, NnError> {
        let zv = self.value(z);
        if zv.shape() != target.shape() {
            return Err(shape_err(format!(
                "sq_dist {:?} vs {:?}",
                zv.shape(),
                target.shape()
            )));
        }
        let rows = zv.rows();
        let mut total = F::ZERO;
        for (&a, &b) in zv.data().iter().zip(target.data()) {
            total += (a - b) * (a - b);
        }
        let value = Tensor::scalar(total / F::from_f64(rows.max(1) as f64));
        Ok(self.push(
            value,
            Op::SqDistMean {
                z,
                target: target.into_data(),
                rows,
            },
        ))
    }

    /// Reverse pass from a scalar node. The tape can be differentiated once.
    pub fn backward(&mut self, loss: Var, params: &ParamSet<F>) -> Result<Vec<Tensor<F>>, NnError> {
        if self.consumed {
            return Err(NnError::Graph("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(NnError::Graph(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::ONE]);
        let mut param_grads: Vec<Tensor<F>> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => {
                    let dst = param_grads
                        .get_mut(*p)
                        .ok_or_else(|| NnError::Graph(format!("param index {p} out of range")))?;
                    if dst.len() != g.len() {
                        return Err(NnError::Graph(format!(
                            "param {} shape changed since the forward pass",
                            params.name(*p)
                        )));
                    }
                    for (d, &v) in dst.data_mut().iter_mut().zip(&g) {
                        *d += v;
                    }
                }
                Op::Embedding { table, ids } => {
                    let t = &self.nodes[table.0].value;
                    let d = t.cols();
                    let acc = grad_buf(&mut grads, *table, t.len());
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, &v) in acc[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                        {
                            *a += v;
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let (a, b) = (*a, *b);
                    // dA = dC B^T
                    let da = grad_buf(&mut grads, a, m * k);
                    F::gemm(m, n, k, F::ONE, &g, n, 1, bv.data(), 1, n, F::ONE, da, k, 1);
                    // dB = A^T dC
                    let db = grad_buf(&mut grads, b, k * n);
                    F::gemm(k, m, n, F::ONE, av.data(), 1, k, &g, n, 1, F::ONE, db, n, 1);
                }
                Op::Add { a, b } => {
                    for v in [*a, *b] {
                        let acc = grad_buf(&mut grads, v, g.len());
                        for (x, &y) in acc.iter_mut().zip(&g) {
                            *x += y;
                        }
                    }
                }
                Op::AddRow { x, bias } => {
                    let n = self.nodes[bias.0].value.len();
                    let acc = grad_buf(&mut grads, *x, g.len());
                    for (a, &v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                    let acc = grad_buf(&mut grads, *bias, n);
                    for row in g.chunks_exact(n) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    means,
                    rstds,
                } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gain.0].value;
                    let d = xv.cols();
                    let mut dx = vec![F::ZERO; xv.len()];
                    let mut dg = vec![F::ZERO; d];
                    let mut db = vec![F::ZERO; d];
                    kernels::layer_norm_backward(
                        xv.data(),
                        d,
                        gv.data(),
                        means,
                        rstds,
                        &g,
                        &mut dx,
                        &mut dg,
                        &mut db,
                    );
                    accumulate(&mut grads, *x, &dx);
                    accumulate(&mut grads, *gain, &dg);
                    accumulate(&mut grads, *bias, &db);
                }
                Op::Gelu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let dx: Vec<F> = xv
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| kernels::gelu_grad(v) * gv)
                        .collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Attention { qkv, shape, probs } => {
                    let qv = &self.nodes[qkv.0].value;
                    let mut dqkv = vec![F::ZERO; qv.len()];
                    kernels::attention_backward(qv.data(), probs, *shape, &g, &mut dqkv);
                    accumulate(&mut grads, *qkv, &dqkv);
                }
                Op::Dropout { x, mask } => {
                    let dx: Vec<F> = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let lv = &self.nodes[logits.0].value;
                    let vocab = lv.cols();
                    if *count > 0 {
                        let scale = g[0] / F::from_f64(*count as f64);
                        let acc = grad_buf(&mut grads, *logits, lv.len());
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            let row = &mut acc[r * vocab..(r + 1) * vocab];
                            for (a, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                                *a += p * scale;
                            }
                            row[t] -= scale;
                        }
                    }
                }
                Op::Sum { x } => {
                    let n = self.nodes[x.0].value.len();
                    let acc = grad_buf(&mut grads, *x, n);
                    for a in acc.iter_mut() {
                        *a += g[0];
                    }
                }
                Op::Scale { x, factor } => {
                    let dx: Vec<F> = g.iter().map(|&v| v * *factor).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::StraightThrough { z } => accumulate(&mut grads, *z, &g),
                Op::SqDistMean { z, target, rows } => {
                    let zv = &self.nodes[z.0].value;
                    let c = F::from_f64(2.0 / (*rows).max(1) as f64) * g[0];
                    let dz: Vec<F> = zv
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&a, &b)| c * (a - b))
                        .collect();
                    accumulate(&mut grads, *z, &dz);
                }
            }
        }
        Ok(param_grads)
    }
}

fn grad_buf<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::ZERO; len])
}

fn accumulate<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, delta: &[F]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        for (name, shape, data) in entries {
            p.insert(*name, Tensor::from_vec(shape, data.clone()).unwrap())
                .unwrap();
        }
        p
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let p = params(&[("w", vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.5])]);
        let mut g = Graph::new();
        let w = g.param(&p, 0);
        let loss = g.sum(w);
        let grads = g.backward(loss, &p).unwrap();
        assert_eq!(grads[0].data(), &[1.0; 6]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let p = params(&[
            ("w", vec![2], vec![1.0, 2.0]),
            ("unused", vec![3], vec![4.0, 5.0, 6.0]),
        ]);
        let mut g = Graph::new();
        let w = g.param(&p, 0);
        let loss = g.sum(w);
        let grads = g.backward(loss, &p).unwrap();
        assert_eq!(grads[1].data(), &[0.0; 3]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let p = params(&[("w", vec![1], vec![1.0])]);
        let mut g = Graph::new();
        let w = g.param(&p, 0);
        let loss = g.sum(w);
        g.backward(loss, &p).unwrap();
        assert!(matches!(g.backward(loss, &p), Err(NnError::Graph(_))));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let p = params(&[("w", vec![1, 2], vec![1.0, 2.0])]);
        let mut g = Graph::new();
        let a = g.param(&p, 0);
        let b = g.param(&p, 0);
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss, &p).unwrap();
        assert_eq!(grads[0].data(), &[2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            g.cross_entropy(l, &[Some(1), Some(4)]),
            Err(NnError::TargetOutOfRange {
                target: 4,
                vocab: 4
            })
        ));
    }

    #[test]
    fn cross_entropy_margin_drives_loss_to_zero() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut g = Graph::<f64>::new();
            let mut logits = vec![0.0; 5];
            logits[2] = margin;
            let l = g.constant(Tensor::from_vec(&[1, 5], logits).unwrap());
            let loss = g.cross_entropy(l, &[Some(2)]).unwrap();
            let v = g.value(loss).item();
            assert!(v >= 0.0 && v < last);
            last = v;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 15]));
        assert!(matches!(
            g.attention(x, 1, 2, 2, true),
            Err(NnError::Config(_))
        ));
    }
}
