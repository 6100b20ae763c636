//! Frozen causal language models conditioned on prefix embeddings, with
//! greedy generation and teacher-forced query scoring on top.

mod decoder;
mod stub;
mod tokenizer;

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::WeightSource;
use crate::error::{Error, Result};
use crate::translator::PrefixPrompt;

pub use decoder::{pretrain_decoder, DecoderConfig, PretrainConfig, PretrainSample, ToyDecoder};
pub use stub::{StubLm, StubView};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, UNK};

/// A frozen causal LM that accepts continuous prefix embeddings ahead of its tokens.
pub trait LanguageModel: Send + Sync {
    fn model_id(&self) -> &str;

    fn tokenizer(&self) -> &Tokenizer;

    /// Width of the prefix embeddings the model accepts.
    fn embed_dim(&self) -> usize;

    /// Whether a `<bos>` token follows the prefix.
    fn uses_bos(&self) -> bool;

    fn dtype(&self) -> DType;

    /// Next-token log-probabilities for every position of `[prefix; context]`.
    ///
    /// `prefix` is `(B, n, d)`, `context` is `(B, T)` token ids (`u32`);
    /// the result is `(B, n + T, V)`, row `t` conditioned on positions `..=t`.
    /// Must be differentiable in `prefix`.
    fn log_probs(&self, prefix: &Tensor, context: &Tensor) -> Result<Tensor>;

    /// Longest prefix plus context the model accepts, if bounded.
    fn max_positions(&self) -> Option<usize> {
        None
    }

    /// Frozen weights by name.
    fn parameters(&self) -> &[(String, Tensor)];

    fn parameter_digest(&self) -> Result<String> {
        crate::nn::tensor_digest(self.parameters().iter().map(|(n, t)| (n.as_str(), t)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub text: String,
}

impl TokenSequence {
    pub fn from_text(tokenizer: &Tokenizer, text: &str) -> Self {
        let ids = tokenizer.encode(text);
        Self {
            text: tokenizer.decode(&ids),
            ids,
        }
    }

    pub fn from_ids(tokenizer: &Tokenizer, ids: Vec<u32>) -> Self {
        Self {
            text: tokenizer.decode(&ids),
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_tokens: usize,
}

impl GenerationConfig {
    pub const CAPTION: GenerationConfig = GenerationConfig { max_tokens: 50 };
    pub const NEURON: GenerationConfig = GenerationConfig { max_tokens: 20 };
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self::CAPTION
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub sequence: TokenSequence,
    pub token_log_probs: Vec<f64>,
    pub stopped_at_eos: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub total: f64,
    pub token_log_probs: Vec<f64>,
}

impl QueryScore {
    pub fn token_count(&self) -> usize {
        self.token_log_probs.len()
    }
}

fn check_prompts(lm: &dyn LanguageModel, prompts: &Tensor) -> Result<(usize, usize)> {
    let (b, n, d) = prompts.dims3()?;
    if d != lm.embed_dim() {
        return Err(Error::integrity(format!(
            "prompt width {d} does not match `{}` embedding width {}",
            lm.model_id(),
            lm.embed_dim()
        )));
    }
    if n == 0 {
        return Err(Error::integrity("prompt has no prefix tokens"));
    }
    Ok((b, n))
}

fn ids_tensor(rows: &[Vec<u32>], device: &Device) -> Result<Tensor> {
    let b = rows.len();
    let t = rows.first().map_or(0, Vec::len);
    let flat: Vec<u32> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (b, t), device)?)
}

/// Normalised log-probabilities of the token following `prompt` and `context`.
pub fn next_token_log_probs(
    lm: &dyn LanguageModel,
    prompt: &PrefixPrompt,
    context: &[u32],
) -> Result<Vec<f64>> {
    let prefix = prompt.to_tensor(lm.dtype(), &Device::Cpu)?;
    check_prompts(lm, &prefix)?;
    let mut ctx = Vec::with_capacity(context.len() + 1);
    if lm.uses_bos() {
        ctx.push(BOS);
    }
    ctx.extend_from_slice(context);
    let lp = lm.log_probs(&prefix, &ids_tensor(&[ctx], &Device::Cpu)?)?;
    let last = lp.dim(1)? - 1;
    Ok(lp
        .get(0)?
        .get(last)?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?)
}

fn argmax(row: &[f64]) -> (u32, f64) {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    (best as u32, row[best])
}

pub fn generate(
    lm: &dyn LanguageModel,
    prompt: &PrefixPrompt,
    cfg: &GenerationConfig,
) -> Result<Generation> {
    let prefix = prompt.to_tensor(lm.dtype(), &Device::Cpu)?;
    Ok(generate_batch(lm, &prefix, cfg)?
        .pop()
        .expect("one prompt in, one generation out"))
}

/// Greedy decoding of a `(B, n, d)` batch of prompts. Ties go to the lowest id.
pub fn generate_batch(
    lm: &dyn LanguageModel,
    prompts: &Tensor,
    cfg: &GenerationConfig,
) -> Result<Vec<Generation>> {
    if cfg.max_tokens == 0 {
        return Err(Error::argument("max_tokens must be at least 1"));
    }
    let (b, n) = check_prompts(lm, prompts)?;
    let device = prompts.device().clone();
    let mut contexts: Vec<Vec<u32>> = vec![if lm.uses_bos() { vec![BOS] } else { vec![] }; b];
    let mut out: Vec<(Vec<u32>, Vec<f64>, bool)> = vec![(Vec::new(), Vec::new(), false); b];
    // generation stops early, without `<eos>`, when the model runs out of positions
    let room = lm.max_positions().map_or(usize::MAX, |m| {
        (m + 1).saturating_sub(n + contexts[0].len())
    });
    if room == 0 {
        return Err(Error::argument(format!(
            "a prompt of {n} tokens leaves no room to generate in `{}`",
            lm.model_id()
        )));
    }
    for _ in 0..cfg.max_tokens.min(room) {
        let lp = lm.log_probs(prompts, &ids_tensor(&contexts, &device)?)?;
        let last = lp.dim(1)? - 1;
        let rows = lp
            .narrow(1, last, 1)?
            .squeeze(1)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        for (k, row) in rows.iter().enumerate() {
            let (id, logp) = argmax(row);
            let (ids, lps, done) = &mut out[k];
            if !*done {
                if id == EOS {
                    *done = true;
                } else {
                    ids.push(id);
                    lps.push(logp);
                }
            }
            contexts[k].push(if *done { EOS } else { id });
        }
        if out.iter().all(|o| o.2) {
            break;
        }
    }
    let tok = lm.tokenizer();
    Ok(out
        .into_iter()
        .map(|(ids, token_log_probs, stopped_at_eos)| Generation {
            sequence: TokenSequence::from_ids(tok, ids),
            token_log_probs,
            stopped_at_eos,
        })
        .collect())
}

/// Teacher-forced log-likelihood of each target token.
///
/// Returns `(log_probs, mask)`, both `(B, T)` where `T` is the longest target;
/// padded entries are zero in both. Differentiable in `prefix`.
pub fn target_log_likelihoods(
    lm: &dyn LanguageModel,
    prefix: &Tensor,
    targets: &[Vec<u32>],
) -> Result<(Tensor, Tensor)> {
    let (b, n) = check_prompts(lm, prefix)?;
    if targets.len() != b {
        return Err(Error::argument(format!(
            "{} targets for {b} prompts",
            targets.len()
        )));
    }
    if targets.iter().any(Vec::is_empty) {
        return Err(Error::argument("every target needs at least one token"));
    }
    let device = prefix.device().clone();
    let bos = lm.uses_bos();
    let t_max = targets.iter().map(Vec::len).max().unwrap_or(0);
    let ctx_len = if bos { t_max } else { t_max - 1 };
    let contexts: Vec<Vec<u32>> = targets
        .iter()
        .map(|t| {
            let mut c = Vec::with_capacity(ctx_len);
            if bos {
                c.push(BOS);
            }
            c.extend_from_slice(&t[..t.len() - 1]);
            c.resize(ctx_len, PAD);
            c
        })
        .collect();
    let lp = lm.log_probs(prefix, &ids_tensor(&contexts, &device)?)?;
    let start = n - 1 + usize::from(bos);
    let lp = lp.narrow(1, start, t_max)?.contiguous()?;
    let padded: Vec<Vec<u32>> = targets
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.resize(t_max, 0);
            t
        })
        .collect();
    let index = ids_tensor(&padded, &device)?.unsqueeze(D::Minus1)?;
    let picked = lp.gather(&index, D::Minus1)?.squeeze(D::Minus1)?;
    let mask_values: Vec<u8> = targets
        .iter()
        .flat_map(|t| (0..t_max).map(move |k| u8::from(k < t.len())))
        .collect();
    let mask = Tensor::from_vec(mask_values, (b, t_max), &device)?;
    let zeros = picked.zeros_like()?;
    let picked = mask.where_cond(&picked, &zeros)?;
    Ok((picked, mask.to_dtype(lm.dtype())?))
}

/// Log-likelihood of `query` given `prompt`, summed over tokens without length normalisation.
pub fn score_query(
    lm: &dyn LanguageModel,
    prompt: &PrefixPrompt,
    query: &str,
) -> Result<QueryScore> {
    let prefix = prompt.to_tensor(lm.dtype(), &Device::Cpu)?;
    Ok(score_query_batch(lm, &prefix, query)?
        .pop()
        .expect("one prompt in, one score out"))
}

/// Scores one query against every prompt of a `(B, n, d)` batch.
pub fn score_query_batch(
    lm: &dyn LanguageModel,
    prompts: &Tensor,
    query: &str,
) -> Result<Vec<QueryScore>> {
    if query.trim().is_empty() {
        return Err(Error::argument("query is empty"));
    }
    let ids = lm.tokenizer().encode(query);
    if ids.is_empty() {
        return Err(Error::argument(format!("query `{query}` has no tokens")));
    }
    let (b, _) = check_prompts(lm, prompts)?;
    let (lp, _) = target_log_likelihoods(lm, prompts, &vec![ids; b])?;
    let rows = lp.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .into_iter()
        .map(|token_log_probs| QueryScore {
            total: token_log_probs.iter().sum(),
            token_log_probs,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LmFamily {
    ToyDecoder(DecoderConfig),
    /// Ignores its prompt and predicts uniformly; for wiring checks.
    UniformStub {
        dim: usize,
    },
}

/// Language-model registry entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub model_id: String,
    pub family: LmFamily,
    /// Safetensors path (relative to the model cache) for decoder weights.
    #[serde(default)]
    pub weights: Option<String>,
    /// Tokenizer vocabulary JSON path.
    pub tokenizer: String,
}

pub fn load_language_model(
    cfg: &LmConfig,
    cache_dir: Option<&Path>,
) -> Result<Arc<dyn LanguageModel>> {
    let tok_path = match WeightSource::parse(&cfg.tokenizer, cache_dir)? {
        WeightSource::File(p) => p,
        WeightSource::Seed(_) => return Err(Error::config("tokenizer must be a file")),
    };
    let tokenizer = Tokenizer::load(&tok_path)?;
    match &cfg.family {
        LmFamily::UniformStub { dim } => Ok(Arc::new(
            StubLm::uniform(tokenizer, *dim).with_id(cfg.model_id.clone()),
        )),
        LmFamily::ToyDecoder(dcfg) => {
            let weights = cfg
                .weights
                .as_deref()
                .ok_or_else(|| Error::config("toy-decoder needs a weight file"))?;
            let path = match WeightSource::parse(weights, cache_dir)? {
                WeightSource::File(p) => p,
                WeightSource::Seed(seed) => {
                    let mut store = crate::nn::FrozenStore::seeded(seed, DType::F64, Device::Cpu);
                    return Ok(Arc::new(ToyDecoder::build(
                        &mut store,
                        &cfg.model_id,
                        dcfg.clone(),
                        tokenizer,
                    )?));
                }
            };
            Ok(Arc::new(ToyDecoder::load(
                &path,
                &cfg.model_id,
                dcfg.clone(),
                tokenizer,
            )?))
        }
    }
}
