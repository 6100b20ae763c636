//! The trainable translation network: per-layer projections, slot positions,
//! learnable prefix tokens and a transformer whose prefix outputs become the
//! language model's prompt.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, FeatureVector, LayerRef};
use crate::error::{Error, Result};
use crate::nn::{
    key_padding_bias, Init, LayerNorm, Linear, ParamSource, TransformerBlock, VarStore,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlot {
    pub layer: LayerRef,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslatorConfig {
    pub n_prefix: usize,
    pub depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Width of the language model's token embeddings.
    pub lm_dim: usize,
    /// Input slots in backbone order; also the maximum input length.
    pub layers: Vec<LayerSlot>,
}

fn slots(spec: &BackboneSpec) -> Vec<LayerSlot> {
    spec.layers
        .iter()
        .map(|l| LayerSlot {
            layer: l.layer.clone(),
            channels: l.dims.channels,
        })
        .collect()
}

impl TranslatorConfig {
    /// 12 layers of width 768 with 10 prefix tokens.
    pub fn standard(spec: &BackboneSpec, lm_dim: usize) -> Self {
        Self {
            n_prefix: 10,
            depth: 12,
            model_dim: 768,
            heads: 12,
            ff_dim: 3072,
            lm_dim,
            layers: slots(spec),
        }
    }

    /// Reduced network used when pairing with the smaller GPT-2 decoder.
    pub fn gpt2_comparison(spec: &BackboneSpec, lm_dim: usize) -> Self {
        Self {
            depth: 8,
            heads: 8,
            ff_dim: 1532,
            ..Self::standard(spec, lm_dim)
        }
    }

    pub fn toy(spec: &BackboneSpec, lm_dim: usize) -> Self {
        Self {
            n_prefix: 10,
            depth: 2,
            model_dim: 64,
            heads: 4,
            ff_dim: 128,
            lm_dim,
            layers: slots(spec),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_prefix == 0 || self.depth == 0 {
            return Err(Error::config("n_prefix and depth must be at least 1"));
        }
        if self.model_dim == 0 || self.ff_dim == 0 || self.lm_dim == 0 || self.heads == 0 {
            return Err(Error::config("translator dimensions must be positive"));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.layers.is_empty() || self.layers.iter().any(|s| s.channels == 0) {
            return Err(Error::config(
                "translator needs at least one non-empty layer slot",
            ));
        }
        Ok(())
    }

    pub fn slot(&self, layer: &LayerRef) -> Option<usize> {
        self.layers.iter().position(|s| &s.layer == layer)
    }
}

/// `n_prefix` embeddings in the language model's input space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixPrompt {
    n_prefix: usize,
    dim: usize,
    values: Vec<f64>,
}

impl PrefixPrompt {
    pub fn new(n_prefix: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if n_prefix == 0 || values.len() != n_prefix * dim {
            return Err(Error::integrity(format!(
                "{} prompt values for {n_prefix} tokens of width {dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::integrity("prompt contains non-finite values"));
        }
        Ok(Self {
            n_prefix,
            dim,
            values,
        })
    }

    /// From an `(n, d)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, d) = t.dims2()?;
        Self::new(n, d, t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }

    pub fn n_prefix(&self) -> usize {
        self.n_prefix
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(1, n, d)`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_vec(self.values.clone(), (1, self.n_prefix, self.dim), device)?
                .to_dtype(dtype)?,
        )
    }
}

pub struct Translator {
    cfg: TranslatorConfig,
    store: VarStore,
    projections: Vec<Linear>,
    slot_positions: Tensor,
    prefix: Tensor,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    head: Linear,
    trained: bool,
}

impl std::fmt::Debug for Translator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Translator")
            .field("cfg", &self.cfg)
            .field("trained", &self.trained)
            .finish()
    }
}

impl Translator {
    pub fn new(cfg: TranslatorConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = VarStore::new(seed, dtype, Device::Cpu);
        let ps: &mut dyn ParamSource = &mut store;
        let projections = cfg
            .layers
            .iter()
            .enumerate()
            .map(|(k, s)| Linear::new(ps, &format!("proj.{k}"), s.channels, cfg.model_dim, true))
            .collect::<Result<Vec<_>>>()?;
        let slot_positions = ps.param(
            "slot_pos",
            &[cfg.layers.len(), cfg.model_dim],
            Init::Normal { std: 0.02 },
        )?;
        let prefix = ps.param(
            "prefix",
            &[cfg.n_prefix, cfg.model_dim],
            Init::Normal { std: 0.5 },
        )?;
        let blocks = (0..cfg.depth)
            .map(|k| {
                TransformerBlock::new(
                    ps,
                    &format!("blocks.{k}"),
                    cfg.model_dim,
                    cfg.heads,
                    cfg.ff_dim,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(ps, "ln_f", cfg.model_dim, 1e-5)?;
        let head = Linear::new(ps, "head", cfg.model_dim, cfg.lm_dim, true)?;
        Ok(Self {
            cfg,
            store,
            projections,
            slot_positions,
            prefix,
            blocks,
            final_norm,
            head,
            trained: false,
        })
    }

    /// Rebuilds a translator and overwrites its weights; the result counts as trained.
    pub fn from_tensors(
        cfg: TranslatorConfig,
        tensors: &HashMap<String, Tensor>,
        dtype: DType,
    ) -> Result<Self> {
        let mut t = Self::new(cfg, 0, dtype)?;
        t.store.load(tensors)?;
        t.trained = true;
        Ok(t)
    }

    pub fn config(&self) -> &TranslatorConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.prefix.dtype()
    }

    pub fn vars(&self) -> &[(String, Var)] {
        self.store.vars()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.store.snapshot()
    }

    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        self.store.load(tensors)
    }

    pub fn digest(&self) -> Result<String> {
        self.store.digest()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    fn check(&self, v: &FeatureVector) -> Result<usize> {
        let slot = self.cfg.slot(&v.layer).ok_or_else(|| {
            Error::config(format!(
                "translator has no projection for layer `{}`",
                v.layer
            ))
        })?;
        let expected = self.cfg.layers[slot].channels;
        if v.dim() != expected {
            return Err(Error::integrity(format!(
                "feature of `{}` has {} channels, expected {expected}",
                v.layer,
                v.dim()
            )));
        }
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::integrity(format!(
                "feature of `{}` is not finite",
                v.layer
            )));
        }
        Ok(slot)
    }

    /// `W_l v + b_l + e_l` for the slot of `v.layer`.
    pub fn project_feature(&self, v: &FeatureVector) -> Result<Vec<f64>> {
        let slot = self.check(v)?;
        let x = Tensor::from_vec(v.values.clone(), (1, v.dim()), &Device::Cpu)?
            .to_dtype(self.dtype())?;
        let y = self.projections[slot]
            .forward(&x)?
            .broadcast_add(&self.slot_positions.narrow(0, slot, 1)?)?;
        Ok(y.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }

    /// Differentiable `(B, n_prefix, lm_dim)` prompts for a batch of feature
    /// sequences of possibly different lengths. Shorter sequences are padded
    /// and the padding is hidden from attention.
    pub fn forward(&self, batch: &[Vec<FeatureVector>]) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::argument("empty batch"));
        }
        let max_len = self.cfg.layers.len();
        let mut slots_per_row = Vec::with_capacity(batch.len());
        for row in batch {
            if row.is_empty() {
                return Err(Error::argument("feature list is empty"));
            }
            if row.len() > max_len {
                return Err(Error::argument(format!(
                    "{} features exceed the {max_len} input slots",
                    row.len()
                )));
            }
            slots_per_row.push(
                row.iter()
                    .map(|v| self.check(v))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let b = batch.len();
        let k = slots_per_row.iter().map(Vec::len).max().unwrap_or(0);
        let d = self.cfg.model_dim;
        let dtype = self.dtype();
        let device = Device::Cpu;

        // Project all vectors of one slot together, then gather them into
        // (row, position) order. The last gathered row is zero padding.
        let mut groups: Vec<Tensor> = Vec::new();
        let mut offset = 0usize;
        let mut where_: HashMap<(usize, usize), usize> = HashMap::new();
        for (slot, proj) in self.projections.iter().enumerate() {
            let mut values = Vec::new();
            let mut count = 0;
            for (r, row) in batch.iter().enumerate() {
                for (p, v) in row.iter().enumerate() {
                    if slots_per_row[r][p] == slot {
                        values.extend_from_slice(&v.values);
                        where_.insert((r, p), offset + count);
                        count += 1;
                    }
                }
            }
            if count == 0 {
                continue;
            }
            let c = self.cfg.layers[slot].channels;
            let x = Tensor::from_vec(values, (count, c), &device)?.to_dtype(dtype)?;
            let y = proj
                .forward(&x)?
                .broadcast_add(&self.slot_positions.narrow(0, slot, 1)?)?;
            groups.push(y);
            offset += count;
        }
        groups.push(Tensor::zeros((1, d), dtype, &device)?);
        let projected = Tensor::cat(&groups, 0)?;
        let mut index = Vec::with_capacity(b * k);
        let mut keep = Vec::with_capacity(b);
        for (r, row) in batch.iter().enumerate() {
            let mut flags = vec![true; k + self.cfg.n_prefix];
            for p in 0..k {
                if p < row.len() {
                    index.push(where_[&(r, p)] as u32);
                } else {
                    index.push(offset as u32);
                    flags[p] = false;
                }
            }
            keep.push(flags);
        }
        let index = Tensor::from_vec(index, b * k, &device)?;
        let features = projected.index_select(&index, 0)?.reshape((b, k, d))?;
        let prefix = self
            .prefix
            .unsqueeze(0)?
            .broadcast_as((b, self.cfg.n_prefix, d))?;
        let mut x = Tensor::cat(&[&features, &prefix], 1)?;
        let padded = keep.iter().any(|r| r.iter().any(|&f| !f));
        let bias = if padded {
            Some(key_padding_bias(&keep, dtype, &device)?)
        } else {
            None
        };
        for block in &self.blocks {
            x = block.forward(&x, bias.as_ref())?;
        }
        let out = self
            .final_norm
            .forward(&x.narrow(1, k, self.cfg.n_prefix)?)?;
        self.head.forward(&out)
    }

    pub fn translate(&self, features: &[FeatureVector]) -> Result<PrefixPrompt> {
        let out = self.forward(&[features.to_vec()])?.detach();
        PrefixPrompt::from_tensor(&out.squeeze(0)?)
    }

    /// Detached `(B, n, lm_dim)` prompts.
    pub fn translate_batch(&self, batch: &[Vec<FeatureVector>]) -> Result<Tensor> {
        Ok(self.forward(batch)?.detach())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Provenance;

    fn cfg(depth: usize, dim: usize, heads: usize) -> TranslatorConfig {
        TranslatorConfig {
            n_prefix: 3,
            depth,
            model_dim: dim,
            heads,
            ff_dim: 2 * dim,
            lm_dim: 5,
            layers: vec![
                LayerSlot {
                    layer: "a".into(),
                    channels: 4,
                },
                LayerSlot {
                    layer: "b".into(),
                    channels: 6,
                },
            ],
        }
    }

    fn fv(layer: &str, values: Vec<f64>) -> FeatureVector {
        FeatureVector {
            layer: layer.into(),
            values,
            provenance: Provenance::Pooled,
        }
    }

    fn params(t: &Translator) -> HashMap<String, Vec<f64>> {
        t.snapshot()
            .unwrap()
            .into_iter()
            .map(|(n, v)| (n, v.flatten_all().unwrap().to_vec1::<f64>().unwrap()))
            .collect()
    }

    fn matvec(w: &[f64], b: Option<&[f64]>, x: &[f64], out: usize) -> Vec<f64> {
        let inp = x.len();
        (0..out)
            .map(|o| {
                let s: f64 = (0..inp).map(|i| w[o * inp + i] * x[i]).sum();
                s + b.map_or(0.0, |b| b[o])
            })
            .collect()
    }

    fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    #[test]
    fn output_has_prefix_length_for_any_input_count() {
        let t = Translator::new(cfg(1, 8, 2), 1, DType::F64).unwrap();
        let one = t.translate(&[fv("a", vec![0.5; 4])]).unwrap();
        let two = t
            .translate(&[fv("a", vec![0.5; 4]), fv("b", vec![-1.0; 6])])
            .unwrap();
        assert_eq!((one.n_prefix(), one.dim()), (3, 5));
        assert_eq!((two.n_prefix(), two.dim()), (3, 5));
    }

    #[test]
    fn projection_matches_direct_recomputation() {
        let t = Translator::new(cfg(1, 8, 2), 2, DType::F64).unwrap();
        let p = params(&t);
        let v = vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let got = t.project_feature(&fv("b", v.clone())).unwrap();
        let mut want = matvec(&p["proj.1.weight"], Some(&p["proj.1.bias"]), &v, 8);
        for (w, e) in want.iter_mut().zip(&p["slot_pos"][8..16]) {
            *w += e;
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_layer_and_empty_input_are_rejected() {
        let t = Translator::new(cfg(1, 8, 2), 1, DType::F64).unwrap();
        assert!(matches!(
            t.project_feature(&fv("zzz", vec![0.0; 4])),
            Err(Error::Configuration(_))
        ));
        assert!(matches!(t.translate(&[]), Err(Error::Argument(_))));
        assert!(matches!(
            t.translate(&[fv("a", vec![0.0; 5])]),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn padded_batch_rows_equal_unpadded_calls() {
        let t = Translator::new(cfg(2, 8, 2), 5, DType::F64).unwrap();
        let long = vec![
            fv("a", vec![0.2, 0.1, -0.3, 0.9]),
            fv("b", vec![1.0, 0.0, 0.5, -0.5, 0.2, 0.3]),
        ];
        let short = vec![fv("b", vec![-0.1, 0.4, 0.0, 0.7, 0.2, -0.9])];
        let batched = t.translate_batch(&[long.clone(), short.clone()]).unwrap();
        for (r, row) in [long, short].iter().enumerate() {
            let alone = t.translate(row).unwrap();
            let got = batched
                .get(r)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            for (a, b) in got.iter().zip(alone.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_layer_permutation_leaves_output_unchanged() {
        let t = Translator::new(cfg(2, 8, 2), 9, DType::F64).unwrap();
        let x = fv("a", vec![0.1, 0.2, 0.3, 0.4]);
        let y = fv("a", vec![-1.0, 0.5, 0.0, 2.0]);
        let p = t.translate(&[x.clone(), y.clone()]).unwrap();
        let q = t.translate(&[y, x]).unwrap();
        for (a, b) in p.values().iter().zip(q.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Depth 1, width 8: the whole network recomputed with scalar loops.
    #[test]
    fn matches_scalar_reference_transformer() {
        let c = cfg(1, 8, 2);
        let t = Translator::new(c.clone(), 11, DType::F64).unwrap();
        // give layer norms and biases non-trivial values
        let mut snap: HashMap<String, Tensor> = t.snapshot().unwrap().into_iter().collect();
        for (name, v) in snap.iter_mut() {
            if name.ends_with(".bias") || name.contains("ln") {
                let n = v.elem_count();
                let vals: Vec<f64> = (0..n)
                    .map(|i| 1.0 + 0.1 * ((i * 7 + name.len()) % 5) as f64 - 0.2)
                    .collect();
                *v = Tensor::from_vec(vals, v.dims(), &Device::Cpu).unwrap();
            }
        }
        t.load(&snap).unwrap();
        let p = params(&t);
        let d = 8;
        let heads = 2;
        let hd = d / heads;
        let features = [
            fv("b", vec![0.5, -0.2, 0.9, 0.0, 1.1, -0.7]),
            fv("a", vec![0.3, 0.3, -0.8, 0.4]),
        ];
        let got = t.translate(&features).unwrap();

        let mut x: Vec<Vec<f64>> = Vec::new();
        for f in &features {
            let slot = c.slot(&f.layer).unwrap();
            let w = &p[&format!("proj.{slot}.weight")];
            let b = &p[&format!("proj.{slot}.bias")];
            let mut y = matvec(w, Some(b), &f.values, d);
            for (k, e) in y.iter_mut().enumerate() {
                *e += p["slot_pos"][slot * d + k];
            }
            x.push(y);
        }
        for r in 0..3 {
            x.push(p["prefix"][r * d..(r + 1) * d].to_vec());
        }
        let s = x.len();
        let pre = "blocks.0";
        let g = |n: &str| p[&format!("{pre}.{n}")].clone();
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm(r, &g("ln1.weight"), &g("ln1.bias")))
            .collect();
        let q: Vec<Vec<f64>> = h
            .iter()
            .map(|r| matvec(&g("attn.q.weight"), Some(&g("attn.q.bias")), r, d))
            .collect();
        let k: Vec<Vec<f64>> = h
            .iter()
            .map(|r| matvec(&g("attn.k.weight"), None, r, d))
            .collect();
        let v: Vec<Vec<f64>> = h
            .iter()
            .map(|r| matvec(&g("attn.v.weight"), Some(&g("attn.v.bias")), r, d))
            .collect();
        let mut att = vec![vec![0.0; d]; s];
        for head in 0..heads {
            let o = head * hd;
            for a in 0..s {
                let scores: Vec<f64> = (0..s)
                    .map(|bb| {
                        (0..hd).map(|e| q[a][o + e] * k[bb][o + e]).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|sc| (sc - m).exp()).sum();
                for bb in 0..s {
                    let w = (scores[bb] - m).exp() / z;
                    for e in 0..hd {
                        att[a][o + e] += w * v[bb][o + e];
                    }
                }
            }
        }
        for a in 0..s {
            let o = matvec(&g("attn.o.weight"), Some(&g("attn.o.bias")), &att[a], d);
            for e in 0..d {
                x[a][e] += o[e];
            }
            let h2 = layer_norm(&x[a], &g("ln2.weight"), &g("ln2.bias"));
            let f1: Vec<f64> = matvec(&g("mlp.fc1.weight"), Some(&g("mlp.fc1.bias")), &h2, 2 * d)
                .into_iter()
                .map(gelu)
                .collect();
            let f2 = matvec(&g("mlp.fc2.weight"), Some(&g("mlp.fc2.bias")), &f1, d);
            for e in 0..d {
                x[a][e] += f2[e];
            }
        }
        let mut want = Vec::new();
        for row in &x[2..] {
            let n = layer_norm(row, &p["ln_f.weight"], &p["ln_f.bias"]);
            want.extend(matvec(&p["head.weight"], Some(&p["head.bias"]), &n, 5));
        }
        for (a, b) in got.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
