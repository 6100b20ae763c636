use std::sync::Arc;

use candle_core::{DType, Tensor};

use super::{LanguageModel, Tokenizer, EOS};
use crate::error::Result;

/// What a stub rule sees when asked for next-token logits.
pub struct StubView<'a> {
    /// The prompt of this batch row, `n * d` values row-major.
    pub prompt: &'a [f64],
    /// Context tokens seen after the prompt (including `<bos>` if used).
    pub history: &'a [u32],
}

type Rule = dyn Fn(&StubView) -> Vec<f64> + Send + Sync;

/// Deterministic LM with programmable logits, for analytic tests. It has no
/// parameters, so no gradient reaches its prompt.
#[derive(Clone)]
pub struct StubLm {
    id: String,
    tokenizer: Tokenizer,
    dim: usize,
    bos: bool,
    rule: Arc<Rule>,
}

impl StubLm {
    pub fn from_fn(
        tokenizer: Tokenizer,
        dim: usize,
        rule: impl Fn(&StubView) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            id: "stub".into(),
            tokenizer,
            dim,
            bos: false,
            rule: Arc::new(rule),
        }
    }

    pub fn uniform(tokenizer: Tokenizer, dim: usize) -> Self {
        let v = tokenizer.vocab_size();
        Self::from_fn(tokenizer, dim, move |_| vec![0.0; v])
    }

    pub fn fixed(tokenizer: Tokenizer, dim: usize, logits: Vec<f64>) -> Self {
        Self::from_fn(tokenizer, dim, move |_| logits.clone())
    }

    /// All probability mass on `token`, at every step.
    pub fn always(tokenizer: Tokenizer, dim: usize, token: u32) -> Self {
        let v = tokenizer.vocab_size();
        Self::from_fn(tokenizer, dim, move |_| one_hot(v, token))
    }

    /// Emits `cycle[0], cycle[1], ...` repeatedly, never `<eos>`.
    pub fn cycle(tokenizer: Tokenizer, dim: usize, cycle: Vec<u32>) -> Self {
        let v = tokenizer.vocab_size();
        Self::from_fn(tokenizer, dim, move |view| {
            one_hot(v, cycle[view.history.len() % cycle.len()])
        })
    }

    /// Puts all mass on the next token of `script`, then on `<eos>`.
    pub fn scripted(tokenizer: Tokenizer, dim: usize, script: Vec<u32>) -> Self {
        let v = tokenizer.vocab_size();
        Self::from_fn(tokenizer, dim, move |view| {
            one_hot(v, script.get(view.history.len()).copied().unwrap_or(EOS))
        })
    }

    pub fn with_bos(mut self, bos: bool) -> Self {
        self.bos = bos;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

fn one_hot(v: usize, token: u32) -> Vec<f64> {
    let mut logits = vec![f64::NEG_INFINITY; v];
    logits[token as usize] = 0.0;
    logits
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - lse).collect()
}

impl LanguageModel for StubLm {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn uses_bos(&self) -> bool {
        self.bos
    }

    fn dtype(&self) -> DType {
        DType::F64
    }

    fn log_probs(&self, prefix: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, n, _) = prefix.dims3()?;
        let t = context.dim(1)?;
        let prompts = prefix
            .to_dtype(DType::F64)?
            .flatten_from(1)?
            .to_vec2::<f64>()?;
        let ctx = context.to_vec2::<u32>()?;
        let v = self.tokenizer.vocab_size();
        let mut out = Vec::with_capacity(b * (n + t) * v);
        for (prompt, history) in prompts.iter().zip(&ctx) {
            for pos in 0..n + t {
                // positions inside the prefix see no tokens yet
                let seen = (pos + 1).saturating_sub(n);
                let view = StubView {
                    prompt,
                    history: &history[..seen],
                };
                let logits = (self.rule)(&view);
                assert_eq!(logits.len(), v, "stub rule must return one logit per token");
                out.extend(log_softmax(&logits));
            }
        }
        Ok(Tensor::from_vec(out, (b, n + t, v), prefix.device())?)
    }

    fn parameters(&self) -> &[(String, Tensor)] {
        &[]
    }
}
