//! Named parameter store, initialization, and the shared transformer block.
//!
//! Parameters live in an ordered map (`BTreeMap`) of flat `f32` buffers.
//! Each training step binds them onto a fresh [`Tape`] (converting to the
//! tape's scalar type), runs forward/backward, then pulls gradients back out
//! by name for the optimizer. Binding order is the sorted name order, so the
//! tape layout — and with it every downstream computation — is independent
//! of insertion order.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, TensorId};

/// One named tensor of the model.
#[derive(Debug, Clone)]
pub struct Param {
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: BTreeMap<String, Param>,
}

/// Values truncated-normal: N(0, std²) with draws outside ±2·std resampled.
pub fn trunc_normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0, std).expect("std > 0");
    let bound = 2.0 * std;
    (0..n)
        .map(|_| {
            loop {
                let v: f64 = dist.sample(rng);
                if v.abs() <= bound {
                    return v as f32;
                }
            }
        })
        .collect()
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, param: Param) -> Result<()> {
        let numel: usize = param.shape.iter().product();
        if numel != param.data.len() {
            return Err(Error::Shape(format!(
                "param {name}: data length {} != shape {:?}",
                param.data.len(),
                param.shape
            )));
        }
        if self.entries.insert(name.to_string(), param).is_some() {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    pub fn add_trunc_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let n = shape.iter().product();
        self.insert(
            name,
            Param { data: trunc_normal_vec(rng, n, std), shape: shape.to_vec(), trainable: true },
        )
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f32) -> Result<()> {
        let n: usize = shape.iter().product();
        self.insert(name, Param { data: vec![value; n], shape: shape.to_vec(), trainable: true })
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.add_const(name, shape, 0.0)
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.add_const(name, shape, 1.0)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Iterate in sorted name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable_scalars(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.numel()).sum()
    }

    /// Set the trainable flag of every parameter from a name predicate.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.entries.iter_mut() {
            p.trainable = pred(name);
        }
    }

    /// Register every parameter as a leaf on `tape` (values converted to the
    /// tape's scalar type); `requires_grad` mirrors the trainable flag.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.entries {
            let data: Vec<T> = p.data.iter().map(|&v| T::from_f64(v as f64)).collect();
            let id = tape.leaf(data, p.shape.clone(), p.trainable)?;
            ids.insert(name.clone(), id);
        }
        Ok(Bound { ids })
    }

    /// Pull accumulated gradients for every trainable parameter after a
    /// backward pass on the tape the `bound` was created from.
    pub fn collect_grads<T: Scalar>(&self, tape: &Tape<T>, bound: &Bound) -> Result<BTreeMap<String, Vec<f32>>> {
        let mut grads = BTreeMap::new();
        for (name, p) in &self.entries {
            if !p.trainable {
                continue;
            }
            let id = bound.id(name)?;
            let g = tape
                .grad(id)
                .ok_or_else(|| Error::Invalid(format!("no gradient for trainable parameter {name}")))?;
            grads.insert(name.clone(), g.iter().map(|&v| v.to_f64() as f32).collect());
        }
        Ok(grads)
    }
}

/// Tape handles of bound parameters, addressed by name.
pub struct Bound {
    ids: BTreeMap<String, TensorId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("parameter {name} not bound on tape")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }
}

/// `x · W (+ b)` with `W: [d_in, d_out]`, bias broadcast over leading dims.
pub fn linear<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    w: TensorId,
    b: Option<TensorId>,
) -> Result<TensorId> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Low-rank adapter configuration: rank `r`, scaling `alpha/r`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraCfg {
    pub rank: usize,
    pub alpha: f64,
}

/// Transformer block configuration (pre-norm, GELU MLP).
#[derive(Debug, Clone)]
pub struct BlockCfg {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub ln_eps: f64,
    pub causal: bool,
    /// Adapters on the attention query and value projections.
    pub lora: Option<LoraCfg>,
}

impl BlockCfg {
    pub fn new(dim: usize, heads: usize) -> Self {
        BlockCfg { dim, heads, mlp_ratio: 4.0, ln_eps: 1e-6, causal: false, lora: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "block: dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Invalid("block: mlp_ratio must be positive".into()));
        }
        if let Some(l) = self.lora {
            if l.rank == 0 || l.rank >= self.dim {
                return Err(Error::Invalid(format!(
                    "lora: rank {} must be in 1..{} (min projection dimension)",
                    l.rank, self.dim
                )));
            }
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Create the parameters of one block under `prefix` (e.g. `enc.blocks.0`).
/// LoRA adapter matrices are created only when configured; base projections
/// are trainable by default (freezing is applied later by the recipe).
pub fn init_block(params: &mut Params, prefix: &str, cfg: &BlockCfg, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    let h = cfg.mlp_hidden();
    params.add_ones(&format!("{prefix}.ln1.g"), &[d])?;
    params.add_zeros(&format!("{prefix}.ln1.b"), &[d])?;
    for proj in ["wq", "wk", "wv", "wo"] {
        params.add_trunc_normal(&format!("{prefix}.attn.{proj}"), &[d, d], 0.02, rng)?;
        params.add_zeros(&format!("{prefix}.attn.{proj}.bias"), &[d])?;
    }
    if let Some(l) = cfg.lora {
        for proj in ["wq", "wv"] {
            params.add_trunc_normal(&format!("{prefix}.attn.{proj}.lora_a"), &[d, l.rank], 0.02, rng)?;
            params.add_zeros(&format!("{prefix}.attn.{proj}.lora_b"), &[l.rank, d])?;
        }
    }
    params.add_ones(&format!("{prefix}.ln2.g"), &[d])?;
    params.add_zeros(&format!("{prefix}.ln2.b"), &[d])?;
    params.add_trunc_normal(&format!("{prefix}.mlp.fc1.w"), &[d, h], 0.02, rng)?;
    params.add_zeros(&format!("{prefix}.mlp.fc1.b"), &[h])?;
    params.add_trunc_normal(&format!("{prefix}.mlp.fc2.w"), &[h, d], 0.02, rng)?;
    params.add_zeros(&format!("{prefix}.mlp.fc2.b"), &[d])?;
    Ok(())
}

/// Projection through a frozen base weight plus an optional low-rank update:
/// `y = x·W + b + (alpha/r)·(x·A)·B`.
pub fn lora_linear<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    w: TensorId,
    b: Option<TensorId>,
    adapter: Option<(TensorId, TensorId, LoraCfg)>,
) -> Result<TensorId> {
    let base = linear(tape, x, w, b)?;
    let Some((a, bm, cfg)) = adapter else { return Ok(base) };
    let din = tape.shape(w)[0];
    let dout = tape.shape(w)[1];
    if tape.shape(a) != [din, cfg.rank] || tape.shape(bm) != [cfg.rank, dout] {
        return Err(Error::Shape(format!(
            "lora_linear: adapter shapes {:?}/{:?} inconsistent with base [{din}, {dout}] rank {}",
            tape.shape(a),
            tape.shape(bm),
            cfg.rank
        )));
    }
    if cfg.rank >= din.min(dout) {
        return Err(Error::Invalid(format!(
            "lora_linear: rank {} must be below min({din}, {dout})",
            cfg.rank
        )));
    }
    let xa = tape.matmul(x, a)?;
    let xab = tape.matmul(xa, bm)?;
    let update = tape.scale(xab, cfg.alpha / cfg.rank as f64);
    tape.add(base, update)
}

fn qv_adapter<T: Scalar>(
    tape: &Tape<T>,
    bound: &Bound,
    prefix: &str,
    proj: &str,
    cfg: &BlockCfg,
) -> Result<Option<(TensorId, TensorId, LoraCfg)>> {
    let _ = tape;
    match cfg.lora {
        Some(l) => {
            let a = bound.id(&format!("{prefix}.attn.{proj}.lora_a"))?;
            let b = bound.id(&format!("{prefix}.attn.{proj}.lora_b"))?;
            Ok(Some((a, b, l)))
        }
        None => Ok(None),
    }
}

/// Additive attention bias for causal (autoregressive) masking: `[L, L]`
/// with 0 on and below the diagonal and a large negative value above it.
pub fn causal_bias<T: Scalar>(l: usize) -> Vec<T> {
    let neg = T::from_f64(-1e9);
    let mut bias = vec![T::zero(); l * l];
    for i in 0..l {
        for j in (i + 1)..l {
            bias[i * l + j] = neg;
        }
    }
    bias
}

/// Multi-head self-attention. Returns `(output [B,L,D], probs [B,H,L,L])`.
///
/// `extra_bias` (if given) is added to the pre-softmax scores; its shape must
/// be `[B,H,L,L]` or a trailing suffix of it (e.g. `[L,L]`). When
/// `cfg.causal` is set, a causal bias is added as well.
pub fn attention_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    cfg: &BlockCfg,
    x: TensorId,
    extra_bias: Option<TensorId>,
) -> Result<(TensorId, TensorId)> {
    cfg.validate()?;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.dim {
        return Err(Error::Shape(format!(
            "attention: input {:?} must be [B, L, {}]",
            shape, cfg.dim
        )));
    }
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let dh = d / cfg.heads;
    let heads = cfg.heads;

    let split = |tape: &mut Tape<T>, proj: &str, with_lora: bool| -> Result<TensorId> {
        let w = bound.id(&format!("{prefix}.attn.{proj}"))?;
        let bias = bound.id(&format!("{prefix}.attn.{proj}.bias"))?;
        let adapter = if with_lora { qv_adapter(tape, bound, prefix, proj, cfg)? } else { None };
        let y = lora_linear(tape, x, w, Some(bias), adapter)?;
        let y = tape.reshape(y, &[b, l, heads, dh])?;
        tape.swap_axes(y, 1, 2) // [B, H, L, dh]
    };
    let q = split(tape, "wq", true)?;
    let k = split(tape, "wk", false)?;
    let v = split(tape, "wv", true)?;

    let kt = tape.transpose_last_two(k)?;
    let scores = tape.matmul(q, kt)?; // [B, H, L, L]
    let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    if cfg.causal {
        let bias = tape.constant(causal_bias::<T>(l), vec![l, l])?;
        scores = tape.add(scores, bias)?;
    }
    if let Some(extra) = extra_bias {
        scores = tape.add(scores, extra)?;
    }
    let probs = tape.softmax_last(scores)?;
    let ctx = tape.matmul(probs, v)?; // [B, H, L, dh]
    let ctx = tape.swap_axes(ctx, 1, 2)?;
    let ctx = tape.reshape(ctx, &[b, l, d])?;
    let wo = bound.id(&format!("{prefix}.attn.wo"))?;
    let bo = bound.id(&format!("{prefix}.attn.wo.bias"))?;
    let out = linear(tape, ctx, wo, Some(bo))?;
    Ok((out, probs))
}

/// One pre-norm transformer block: `x + Attn(LN(x))` then `x + MLP(LN(x))`.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    cfg: &BlockCfg,
    x: TensorId,
    extra_bias: Option<TensorId>,
) -> Result<TensorId> {
    let g1 = bound.id(&format!("{prefix}.ln1.g"))?;
    let b1 = bound.id(&format!("{prefix}.ln1.b"))?;
    let h = tape.layer_norm(x, g1, b1, cfg.ln_eps)?;
    let (attn, _probs) = attention_forward(tape, bound, prefix, cfg, h, extra_bias)?;
    let x = tape.add(x, attn)?;

    let g2 = bound.id(&format!("{prefix}.ln2.g"))?;
    let b2 = bound.id(&format!("{prefix}.ln2.b"))?;
    let h = tape.layer_norm(x, g2, b2, cfg.ln_eps)?;
    let fc1w = bound.id(&format!("{prefix}.mlp.fc1.w"))?;
    let fc1b = bound.id(&format!("{prefix}.mlp.fc1.b"))?;
    let fc2w = bound.id(&format!("{prefix}.mlp.fc2.w"))?;
    let fc2b = bound.id(&format!("{prefix}.mlp.fc2.b"))?;
    let h = linear(tape, h, fc1w, Some(fc1b))?;
    let h = tape.gelu(h);
    let h = linear(tape, h, fc2w, Some(fc2b))?;
    tape.add(x, h)
}
