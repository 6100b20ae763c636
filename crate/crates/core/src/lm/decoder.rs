use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{target_log_likelihoods, LanguageModel, Tokenizer, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{
    causal_bias, log_softmax, FrozenStore, Init, LayerNorm, ParamSource, Recorder,
    TransformerBlock, VarStore,
};
use crate::trainer::AdamW;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Upper bound on prefix plus token positions.
    pub max_positions: usize,
    #[serde(default)]
    pub use_bos: bool,
}

impl DecoderConfig {
    pub fn toy() -> Self {
        Self {
            dim: 64,
            depth: 2,
            heads: 4,
            ff_dim: 128,
            max_positions: 32,
            use_bos: true,
        }
    }
}

/// GPT-style decoder: learned absolute positions, pre-norm blocks, output
/// head tied to the token embedding.
pub struct ToyDecoder {
    id: String,
    cfg: DecoderConfig,
    tokenizer: Tokenizer,
    token_embedding: Tensor,
    positions: Tensor,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    params: Vec<(String, Tensor)>,
}

impl ToyDecoder {
    pub fn build(
        ps: &mut dyn ParamSource,
        id: &str,
        cfg: DecoderConfig,
        tokenizer: Tokenizer,
    ) -> Result<Self> {
        let mut rec = Recorder {
            inner: ps,
            seen: Vec::new(),
        };
        let v = tokenizer.vocab_size();
        let token_embedding = rec.param("wte", &[v, cfg.dim], Init::Normal { std: 0.1 })?;
        let positions = rec.param(
            "wpe",
            &[cfg.max_positions, cfg.dim],
            Init::Normal { std: 0.02 },
        )?;
        let blocks = (0..cfg.depth)
            .map(|k| {
                TransformerBlock::new(&mut rec, &format!("h.{k}"), cfg.dim, cfg.heads, cfg.ff_dim)
            })
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(&mut rec, "ln_f", cfg.dim, 1e-5)?;
        let params = rec.seen;
        Ok(Self {
            id: id.to_string(),
            cfg,
            tokenizer,
            token_embedding,
            positions,
            blocks,
            final_norm,
            params,
        })
    }

    pub fn load(path: &Path, id: &str, cfg: DecoderConfig, tokenizer: Tokenizer) -> Result<Self> {
        let mut store = FrozenStore::from_safetensors(path, DType::F64, Device::Cpu)?;
        Self::build(&mut store, id, cfg, tokenizer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.detach()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// `(B, T)` ids to `(B, T, dim)` embeddings.
    pub fn embed_tokens(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        Ok(self
            .token_embedding
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, t, self.cfg.dim))?)
    }
}

impl LanguageModel for ToyDecoder {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn embed_dim(&self) -> usize {
        self.cfg.dim
    }

    fn uses_bos(&self) -> bool {
        self.cfg.use_bos
    }

    fn dtype(&self) -> DType {
        self.token_embedding.dtype()
    }

    fn log_probs(&self, prefix: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, n, _) = prefix.dims3()?;
        let t = context.dim(1)?;
        let s = n + t;
        if s > self.cfg.max_positions {
            return Err(Error::argument(format!(
                "sequence of {s} positions exceeds the decoder limit {}",
                self.cfg.max_positions
            )));
        }
        let prefix = prefix.to_dtype(self.dtype())?;
        let x = if t == 0 {
            prefix
        } else {
            Tensor::cat(&[&prefix, &self.embed_tokens(context)?], 1)?
        };
        let mut x = x.broadcast_add(&self.positions.narrow(0, 0, s)?.unsqueeze(0)?)?;
        let mask = causal_bias(s, x.dtype(), x.device())?;
        for block in &self.blocks {
            x = block.forward(&x, Some(&mask))?;
        }
        let h = self.final_norm.forward(&x)?;
        let logits = h.broadcast_matmul(&self.token_embedding.t()?)?;
        debug_assert_eq!(logits.dims(), &[b, s, self.tokenizer.vocab_size()]);
        log_softmax(&logits)
    }

    fn max_positions(&self) -> Option<usize> {
        Some(self.cfg.max_positions)
    }

    fn parameters(&self) -> &[(String, Tensor)] {
        &self.params
    }
}

/// One text-only pretraining sequence. `context` tokens occupy the positions
/// later taken by prefix embeddings; `text` (plus `<eos>`) is predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSample {
    pub context: Vec<u32>,
    pub text: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Context slots per sequence; shorter contexts are padded with `<pad>`.
    pub context_len: usize,
}

/// Trains a decoder on text alone and returns it frozen, with the last batch loss.
pub fn pretrain_decoder(
    samples: &[PretrainSample],
    tokenizer: Tokenizer,
    id: &str,
    cfg: DecoderConfig,
    pcfg: &PretrainConfig,
) -> Result<(ToyDecoder, f64)> {
    if samples.is_empty() {
        return Err(Error::argument("no pretraining samples"));
    }
    if pcfg.context_len == 0 {
        return Err(Error::argument("context_len must be at least 1"));
    }
    let mut store = VarStore::new(pcfg.seed, DType::F64, Device::Cpu);
    let model = ToyDecoder::build(&mut store, id, cfg.clone(), tokenizer.clone())?;
    let mut opt = AdamW::new(store.vars().to_vec(), 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
    let mut last = f64::NAN;
    for step in 0..pcfg.steps {
        let batch: Vec<&PretrainSample> = (0..pcfg.batch_size)
            .map(|_| &samples[rng.random_range(0..samples.len())])
            .collect();
        let ctx: Vec<u32> = batch
            .iter()
            .flat_map(|s| {
                let mut c = s.context.clone();
                c.truncate(pcfg.context_len);
                c.resize(pcfg.context_len, PAD);
                c
            })
            .collect();
        let ctx = Tensor::from_vec(ctx, (batch.len(), pcfg.context_len), &Device::Cpu)?;
        let prefix = model.embed_tokens(&ctx)?;
        let targets: Vec<Vec<u32>> = batch
            .iter()
            .map(|s| {
                let mut t = s.text.clone();
                t.push(EOS);
                t
            })
            .collect();
        let (lp, mask) = target_log_likelihoods(&model, &prefix, &targets)?;
        let loss = (lp.sum_all()?.neg()? / mask.sum_all()?.to_scalar::<f64>()?)?;
        last = loss.to_scalar::<f64>()?;
        let grads = loss.backward()?;
        // cosine decay to 10% of the peak rate
        let progress = step as f64 / pcfg.steps.max(1) as f64;
        let lr = pcfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        opt.step(&grads, lr, Some(1.0))?;
    }
    let tensors: HashMap<String, Tensor> = store.snapshot()?.into_iter().collect();
    let mut frozen = FrozenStore::from_tensors(tensors, DType::F64, Device::Cpu);
    Ok((ToyDecoder::build(&mut frozen, id, cfg, tokenizer)?, last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{generate, GenerationConfig};
    use crate::translator::PrefixPrompt;

    fn small() -> DecoderConfig {
        DecoderConfig {
            dim: 16,
            depth: 1,
            heads: 2,
            ff_dim: 32,
            max_positions: 16,
            use_bos: true,
        }
    }

    #[test]
    fn log_probs_are_normalized_and_causal() {
        let tok = Tokenizer::new(["x", "y", "z"]);
        let mut store = FrozenStore::seeded(3, DType::F64, Device::Cpu);
        let lm = ToyDecoder::build(&mut store, "t", small(), tok).unwrap();
        let prefix = Tensor::randn(0f64, 1.0, (1, 2, 16), &Device::Cpu).unwrap();
        let a = Tensor::new(&[[4u32, 5, 6]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[[4u32, 5, 4]], &Device::Cpu).unwrap();
        let la = lm.log_probs(&prefix, &a).unwrap();
        let lb = lm.log_probs(&prefix, &b).unwrap();
        let sums = la.exp().unwrap().sum(2).unwrap().to_vec2::<f64>().unwrap();
        assert!(sums[0].iter().all(|s| (s - 1.0).abs() < 1e-9));
        // positions before the last token cannot see it
        let da = la.narrow(1, 0, 4).unwrap().to_vec3::<f64>().unwrap();
        let db = lb.narrow(1, 0, 4).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(da, db);
    }

    #[test]
    fn pretraining_learns_to_copy_context() {
        let tok = Tokenizer::new(["x", "y", "z"]);
        let samples: Vec<PretrainSample> = [4u32, 5, 6]
            .iter()
            .map(|&w| PretrainSample {
                context: vec![w],
                text: vec![w, w],
            })
            .collect();
        let pcfg = PretrainConfig {
            steps: 150,
            batch_size: 8,
            lr: 3e-3,
            seed: 1,
            context_len: 2,
        };
        let (lm, loss) = pretrain_decoder(&samples, tok, "copy", small(), &pcfg).unwrap();
        assert!(loss < 0.2, "pretraining loss {loss}");
        let ctx = Tensor::new(&[[5u32, PAD]], &Device::Cpu).unwrap();
        let prefix = lm.embed_tokens(&ctx).unwrap();
        let prompt = PrefixPrompt::from_tensor(&prefix.squeeze(0).unwrap()).unwrap();
        let g = generate(&lm, &prompt, &GenerationConfig { max_tokens: 5 }).unwrap();
        assert_eq!(g.sequence.text, "y y");
    }
}
