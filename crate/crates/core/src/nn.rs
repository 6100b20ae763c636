//! Parameter stores and the small set of transformer layers shared by the
//! translator, the toy language model and the ViT backbone.
//!
//! Every parameter is addressed by a stable dotted name. Seeded
//! initialisation derives one RNG stream per name, so values do not depend on
//! the order in which a model asks for its parameters.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Large negative additive bias used to remove keys from attention.
pub const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
}

pub trait ParamSource {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
    fn dtype(&self) -> DType;
    fn device(&self) -> &Device;
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub(crate) fn seeded_values(seed: u64, name: &str, len: usize, init: Init) -> Vec<f64> {
    match init {
        Init::Zeros => vec![0.0; len],
        Init::Ones => vec![1.0; len],
        Init::Normal { std } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..len).map(|_| normal.sample(&mut rng)).collect()
        }
    }
}

fn seeded_tensor(
    seed: u64,
    name: &str,
    shape: &[usize],
    init: Init,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let len = shape.iter().product();
    let values = seeded_values(seed, name, len, init);
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Trainable parameters backed by autograd variables.
pub struct VarStore {
    seed: u64,
    dtype: DType,
    device: Device,
    vars: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl VarStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            seed,
            dtype,
            device,
            vars: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.vars[i].1)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Detached copies of every variable, in registration order.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites every variable from `tensors`; all names must be present.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::integrity(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::integrity(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    pub fn digest(&self) -> Result<String> {
        tensor_digest(self.vars.iter().map(|(n, v)| (n.as_str(), v.as_tensor())))
    }
}

impl ParamSource for VarStore {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(&i) = self.index.get(name) {
            let var = &self.vars[i].1;
            if var.dims() != shape {
                return Err(Error::integrity(format!(
                    "parameter `{name}` requested with shape {shape:?}, registered as {:?}",
                    var.dims()
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let t = seeded_tensor(self.seed, name, shape, init, self.dtype, &self.device)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.index.insert(name.to_string(), self.vars.len());
        self.vars.push((name.to_string(), var));
        Ok(out)
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn device(&self) -> &Device {
        &self.device
    }
}

enum FrozenSource {
    Seeded(u64),
    Tensors(HashMap<String, Tensor>),
}

/// Immutable parameters: either generated from a seed or read from a weight file.
/// The tensors handed out are never autograd variables.
pub struct FrozenStore {
    source: FrozenSource,
    dtype: DType,
    device: Device,
    tensors: Vec<(String, Tensor)>,
}

impl FrozenStore {
    pub fn seeded(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            source: FrozenSource::Seeded(seed),
            dtype,
            device,
            tensors: Vec::new(),
        }
    }

    pub fn from_tensors(tensors: HashMap<String, Tensor>, dtype: DType, device: Device) -> Self {
        Self {
            source: FrozenSource::Tensors(tensors),
            dtype,
            device,
            tensors: Vec::new(),
        }
    }

    pub fn from_safetensors(path: &std::path::Path, dtype: DType, device: Device) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &device)?;
        Ok(Self::from_tensors(tensors, dtype, device))
    }

    /// The parameters handed out so far, in request order.
    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn digest(&self) -> Result<String> {
        tensor_digest(self.tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn save_safetensors(&self, path: &std::path::Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self.tensors.iter().cloned().collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }
}

impl ParamSource for FrozenStore {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let t = match &self.source {
            FrozenSource::Seeded(seed) => {
                seeded_tensor(*seed, name, shape, init, self.dtype, &self.device)?
            }
            FrozenSource::Tensors(map) => {
                let t = map
                    .get(name)
                    .ok_or_else(|| Error::integrity(format!("weight file lacks `{name}`")))?;
                if t.dims() != shape {
                    return Err(Error::integrity(format!(
                        "weight `{name}` has shape {:?}, architecture expects {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(self.dtype)?.to_device(&self.device)?.detach()
            }
        };
        self.tensors.push((name.to_string(), t.clone()));
        Ok(t)
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn device(&self) -> &Device {
        &self.device
    }
}

/// Wraps a source and remembers every parameter handed out, for freeze digests.
pub(crate) struct Recorder<'a> {
    pub inner: &'a mut dyn ParamSource,
    pub seen: Vec<(String, Tensor)>,
}

impl ParamSource for Recorder<'_> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let t = self.inner.param(name, shape, init)?;
        self.seen.push((name.to_string(), t.clone()));
        Ok(t)
    }

    fn dtype(&self) -> DType {
        self.inner.dtype()
    }

    fn device(&self) -> &Device {
        self.inner.device()
    }
}

/// SHA-256 over parameter names and their values widened to f64.
pub fn tensor_digest<'a>(tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        let values = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        ps: &mut dyn ParamSource,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = ps.param(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::Normal { std },
        )?;
        let bias = if bias {
            Some(ps.param(&format!("{name}.bias"), &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut dyn ParamSource, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.weight"), &[dim], Init::Ones)?,
            beta: ps.param(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `(1, 1, s, s)` additive bias hiding future positions.
pub fn causal_bias(s: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f64> = (0..s)
        .flat_map(|q| (0..s).map(move |k| if k > q { MASKED } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(values, (1, 1, s, s), device)?.to_dtype(dtype)?)
}

/// `(b, 1, 1, s)` additive bias removing keys whose flag is false.
pub fn key_padding_bias(keep: &[Vec<bool>], dtype: DType, device: &Device) -> Result<Tensor> {
    let b = keep.len();
    let s = keep.first().map_or(0, Vec::len);
    let values: Vec<f64> = keep
        .iter()
        .flat_map(|row| row.iter().map(|&k| if k { 0.0 } else { MASKED }))
        .collect();
    Ok(Tensor::from_vec(values, (b, 1, 1, s), device)?.to_dtype(dtype)?)
}

pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

impl SelfAttention {
    pub fn new(ps: &mut dyn ParamSource, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        // A key bias only shifts every score of a query by the same amount, so it is omitted.
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, false)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, true)?,
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, true)?,
            heads,
            head_dim: dim / heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, s, _) = x.dims3()?;
        Ok(x.reshape((b, s, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `x`: `(b, s, dim)`; `bias`: additive, broadcastable to `(b, heads, s, s)`.
    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, s, d) = x.dims3()?;
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.k.forward(x)?)?;
        let v = self.split_heads(&self.v.forward(x)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let weights = softmax(&scores)?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, s, d))?;
        self.o.forward(&out)
    }
}

pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut dyn ParamSource, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Pre-norm transformer block.
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(
        ps: &mut dyn ParamSource,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim, 1e-5)?,
            attn: SelfAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim, 1e-5)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, ff_dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, bias)?)?;
        Ok((&x + self.mlp.forward(&self.ln2.forward(&x)?)?)?)
    }
}
