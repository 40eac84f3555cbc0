//! Pre-norm transformer blocks, shared by the password model, the VQ
//! encoder/decoder and the codes model.
//!
//! Parameter names under a stack prefix `p`:
//!
//! | name                      | shape      |
//! |---------------------------|------------|
//! | `p.h{i}.ln1.g` / `.ln1.b` | `[d]`      |
//! | `p.h{i}.attn.qkv.w`       | `[d, 3d]`  |
//! | `p.h{i}.attn.qkv.b`       | `[3d]`     |
//! | `p.h{i}.attn.proj.w`      | `[d, d]`   |
//! | `p.h{i}.attn.proj.b`      | `[d]`      |
//! | `p.h{i}.ln2.g` / `.ln2.b` | `[d]`      |
//! | `p.h{i}.mlp.fc.w`         | `[d, 4d]`  |
//! | `p.h{i}.mlp.fc.b`         | `[4d]`     |
//! | `p.h{i}.mlp.proj.w`       | `[4d, d]`  |
//! | `p.h{i}.mlp.proj.b`       | `[d]`      |
//! | `p.ln_f.g` / `p.ln_f.b`   | `[d]`      |

use super::graph::{Graph, Var};
use super::kernels;
use super::{NnError, ParamSet, Scalar, Tensor};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq)]
pub struct StackSpec {
    pub prefix: String,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub causal: bool,
}

impl StackSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(NnError::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    fn name(&self, layer: usize, suffix: &str) -> String {
        format!("{}.h{layer}.{suffix}", self.prefix)
    }

    fn final_name(&self, suffix: &str) -> String {
        format!("{}.ln_f.{suffix}", self.prefix)
    }
}

/// Normal(0, std) matrix.
pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut StreamRng) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.normal() * std) as f32).collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

/// Adds freshly initialized parameters for a stack. Weights are drawn from
/// normal(0, std); the two residual output projections of each block are
/// further scaled by `1/sqrt(2 * layers)`.
pub fn init_stack(
    params: &mut ParamSet<f32>,
    spec: &StackSpec,
    std: f64,
    rng: &mut StreamRng,
) -> Result<(), NnError> {
    spec.validate()?;
    let d = spec.d_model;
    let resid_std = std / ((2 * spec.layers.max(1)) as f64).sqrt();
    for l in 0..spec.layers {
        params.insert(spec.name(l, "ln1.g"), Tensor::filled(&[d], 1.0))?;
        params.insert(spec.name(l, "ln1.b"), Tensor::zeros(&[d]))?;
        params.insert(
            spec.name(l, "attn.qkv.w"),
            normal_tensor(&[d, 3 * d], std, rng),
        )?;
        params.insert(spec.name(l, "attn.qkv.b"), Tensor::zeros(&[3 * d]))?;
        params.insert(
            spec.name(l, "attn.proj.w"),
            normal_tensor(&[d, d], resid_std, rng),
        )?;
        params.insert(spec.name(l, "attn.proj.b"), Tensor::zeros(&[d]))?;
        params.insert(spec.name(l, "ln2.g"), Tensor::filled(&[d], 1.0))?;
        params.insert(spec.name(l, "ln2.b"), Tensor::zeros(&[d]))?;
        params.insert(
            spec.name(l, "mlp.fc.w"),
            normal_tensor(&[d, 4 * d], std, rng),
        )?;
        params.insert(spec.name(l, "mlp.fc.b"), Tensor::zeros(&[4 * d]))?;
        params.insert(
            spec.name(l, "mlp.proj.w"),
            normal_tensor(&[4 * d, d], resid_std, rng),
        )?;
        params.insert(spec.name(l, "mlp.proj.b"), Tensor::zeros(&[d]))?;
    }
    params.insert(spec.final_name("g"), Tensor::filled(&[d], 1.0))?;
    params.insert(spec.final_name("b"), Tensor::zeros(&[d]))?;
    Ok(())
}

/// Expected `(name, shape)` pairs of a stack, in insertion order.
pub fn stack_shapes(spec: &StackSpec) -> Vec<(String, Vec<usize>)> {
    let d = spec.d_model;
    let mut out = Vec::new();
    for l in 0..spec.layers {
        for (suffix, shape) in [
            ("ln1.g", vec![d]),
            ("ln1.b", vec![d]),
            ("attn.qkv.w", vec![d, 3 * d]),
            ("attn.qkv.b", vec![3 * d]),
            ("attn.proj.w", vec![d, d]),
            ("attn.proj.b", vec![d]),
            ("ln2.g", vec![d]),
            ("ln2.b", vec![d]),
            ("mlp.fc.w", vec![d, 4 * d]),
            ("mlp.fc.b", vec![4 * d]),
            ("mlp.proj.w", vec![4 * d, d]),
            ("mlp.proj.b", vec![d]),
        ] {
            out.push((spec.name(l, suffix), shape));
        }
    }
    out.push((spec.final_name("g"), vec![d]));
    out.push((spec.final_name("b"), vec![d]));
    out
}

/// Dropout rate and the stream that draws its masks.
pub type DropoutCtx<'a> = Option<(f64, &'a mut StreamRng)>;

fn maybe_dropout<F: Scalar>(g: &mut Graph<F>, x: Var, dropout: &mut DropoutCtx<'_>) -> Var {
    match dropout {
        Some((rate, rng)) => g.dropout(x, *rate, rng),
        None => x,
    }
}

/// One pre-norm block: `x + Attn(LN(x))`, then `+ MLP(LN(.))`.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<F: Scalar>(
    g: &mut Graph<F>,
    params: &ParamSet<F>,
    spec: &StackSpec,
    layer: usize,
    x: Var,
    batch: usize,
    seq: usize,
    dropout: &mut DropoutCtx<'_>,
) -> Result<Var, NnError> {
    let p = |g: &mut Graph<F>, s: &str| g.param_named(params, &spec.name(layer, s));
    let (ln1g, ln1b) = (p(g, "ln1.g")?, p(g, "ln1.b")?);
    let h = g.layer_norm(x, ln1g, ln1b)?;
    let (wqkv, bqkv) = (p(g, "attn.qkv.w")?, p(g, "attn.qkv.b")?);
    let qkv = g.linear(h, wqkv, Some(bqkv))?;
    let att = g.attention(qkv, batch, seq, spec.heads, spec.causal)?;
    let (wo, bo) = (p(g, "attn.proj.w")?, p(g, "attn.proj.b")?);
    let att = g.linear(att, wo, Some(bo))?;
    let att = maybe_dropout(g, att, dropout);
    let x = g.add(x, att)?;

    let (ln2g, ln2b) = (p(g, "ln2.g")?, p(g, "ln2.b")?);
    let h = g.layer_norm(x, ln2g, ln2b)?;
    let (wfc, bfc) = (p(g, "mlp.fc.w")?, p(g, "mlp.fc.b")?);
    let h = g.linear(h, wfc, Some(bfc))?;
    let h = g.gelu(h);
    let (wp, bp) = (p(g, "mlp.proj.w")?, p(g, "mlp.proj.b")?);
    let h = g.linear(h, wp, Some(bp))?;
    let h = maybe_dropout(g, h, dropout);
    g.add(x, h)
}

/// All blocks followed by the final layer norm.
pub fn stack_forward<F: Scalar>(
    g: &mut Graph<F>,
    params: &ParamSet<F>,
    spec: &StackSpec,
    mut x: Var,
    batch: usize,
    seq: usize,
    dropout: &mut DropoutCtx<'_>,
) -> Result<Var, NnError> {
    for l in 0..spec.layers {
        x = block_forward(g, params, spec, l, x, batch, seq, dropout)?;
    }
    let gain = g.param_named(params, &spec.final_name("g"))?;
    let bias = g.param_named(params, &spec.final_name("b"))?;
    g.layer_norm(x, gain, bias)
}

/// `x W + b` on plain buffers, rows of `x` of width `k`.
pub fn linear_rows<F: Scalar>(
    x: &[F],
    k: usize,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
    out: &mut [F],
) {
    let n = w.cols();
    let m = x.len() / k;
    F::gemm(m, k, n, F::ONE, x, k, 1, w.data(), n, 1, F::ZERO, out, n, 1);
    if let Some(b) = b {
        for row in out.chunks_exact_mut(n) {
            for (r, &bv) in row.iter_mut().zip(b.data()) {
                *r += bv;
            }
        }
    }
}

struct LayerRefs<'a, F> {
    ln1: (&'a Tensor<F>, &'a Tensor<F>),
    qkv: (&'a Tensor<F>, &'a Tensor<F>),
    proj: (&'a Tensor<F>, &'a Tensor<F>),
    ln2: (&'a Tensor<F>, &'a Tensor<F>),
    fc: (&'a Tensor<F>, &'a Tensor<F>),
    out: (&'a Tensor<F>, &'a Tensor<F>),
}

/// Key/value cache for position-by-position causal inference over a batch
/// of sequences advancing in lockstep.
pub struct StackCache<'a, F> {
    spec: StackSpec,
    layers: Vec<LayerRefs<'a, F>>,
    ln_f: (&'a Tensor<F>, &'a Tensor<F>),
    batch: usize,
    ctx: usize,
    pos: usize,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
}

impl<'a, F: Scalar> StackCache<'a, F> {
    pub fn new(
        params: &'a ParamSet<F>,
        spec: &StackSpec,
        batch: usize,
        ctx: usize,
    ) -> Result<Self, NnError> {
        if !spec.causal {
            return Err(NnError::Config(
                "incremental inference needs a causal stack".into(),
            ));
        }
        let get = |l: usize, s: &str| params.get(&spec.name(l, s));
        let mut layers = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            layers.push(LayerRefs {
                ln1: (get(l, "ln1.g")?, get(l, "ln1.b")?),
                qkv: (get(l, "attn.qkv.w")?, get(l, "attn.qkv.b")?),
                proj: (get(l, "attn.proj.w")?, get(l, "attn.proj.b")?),
                ln2: (get(l, "ln2.g")?, get(l, "ln2.b")?),
                fc: (get(l, "mlp.fc.w")?, get(l, "mlp.fc.b")?),
                out: (get(l, "mlp.proj.w")?, get(l, "mlp.proj.b")?),
            });
        }
        let cache = vec![F::ZERO; batch * ctx * spec.d_model];
        Ok(StackCache {
            spec: spec.clone(),
            layers,
            ln_f: (
                params.get(&spec.final_name("g"))?,
                params.get(&spec.final_name("b"))?,
            ),
            batch,
            ctx,
            pos: 0,
            keys: vec![cache.clone(); spec.layers],
            values: vec![cache; spec.layers],
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Runs the blocks for the next position. `x` holds the `[batch, d]`
    /// input embeddings and is replaced by the final-normed hidden states.
    pub fn step(&mut self, x: &mut [F]) -> Result<(), NnError> {
        let d = self.spec.d_model;
        let (b_n, pos) = (self.batch, self.pos);
        if pos >= self.ctx {
            return Err(NnError::Config(format!(
                "context of {} positions exhausted",
                self.ctx
            )));
        }
        if x.len() != b_n * d {
            return Err(NnError::ShapeMismatch(format!(
                "step input of {} values for batch {b_n} x d {d}",
                x.len()
            )));
        }
        let heads = self.spec.heads;
        let hd = d / heads;
        let scale = F::from_f64(1.0 / (hd as f64).sqrt());
        let mut h = vec![F::ZERO; b_n * d];
        let mut qkv = vec![F::ZERO; b_n * 3 * d];
        let mut att = vec![F::ZERO; b_n * d];
        let mut tmp = vec![F::ZERO; b_n * d];
        let mut fc = vec![F::ZERO; b_n * 4 * d];
        let mut probs = vec![F::ZERO; self.ctx];

        for (l, lr) in self.layers.iter().enumerate() {
            kernels::layer_norm_forward(x, d, lr.ln1.0.data(), lr.ln1.1.data(), &mut h, None);
            linear_rows(&h, d, lr.qkv.0, Some(lr.qkv.1), &mut qkv);
            let (kc, vc) = (&mut self.keys[l], &mut self.values[l]);
            for b in 0..b_n {
                let dst = (b * self.ctx + pos) * d;
                kc[dst..dst + d].copy_from_slice(&qkv[b * 3 * d + d..b * 3 * d + 2 * d]);
                vc[dst..dst + d].copy_from_slice(&qkv[b * 3 * d + 2 * d..b * 3 * d + 3 * d]);
            }
            let (kc, vc) = (&self.keys[l], &self.values[l]);
            for b in 0..b_n {
                for hh in 0..heads {
                    let q = &qkv[b * 3 * d + hh * hd..b * 3 * d + (hh + 1) * hd];
                    let base = b * self.ctx * d + hh * hd;
                    kernels::attend_one(
                        q,
                        pos + 1,
                        |j| &kc[base + j * d..base + j * d + hd],
                        |j| &vc[base + j * d..base + j * d + hd],
                        scale,
                        &mut probs,
                        &mut att[b * d + hh * hd..b * d + (hh + 1) * hd],
                    );
                }
            }
            linear_rows(&att, d, lr.proj.0, Some(lr.proj.1), &mut tmp);
            for (xi, &t) in x.iter_mut().zip(&tmp) {
                *xi += t;
            }
            kernels::layer_norm_forward(x, d, lr.ln2.0.data(), lr.ln2.1.data(), &mut h, None);
            linear_rows(&h, d, lr.fc.0, Some(lr.fc.1), &mut fc);
            for v in fc.iter_mut() {
                *v = kernels::gelu(*v);
            }
            linear_rows(&fc, 4 * d, lr.out.0, Some(lr.out.1), &mut tmp);
            for (xi, &t) in x.iter_mut().zip(&tmp) {
                *xi += t;
            }
        }
        kernels::layer_norm_forward(x, d, self.ln_f.0.data(), self.ln_f.1.data(), &mut h, None);
        x.copy_from_slice(&h);
        self.pos += 1;
        Ok(())
    }
}
