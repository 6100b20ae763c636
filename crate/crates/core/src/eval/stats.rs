//! Per-layer statistics of generated descriptions.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::scorers::tokenize;
use super::CaptionScorer;
use crate::backbone::LayerRef;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosTag {
    Adjective,
    Verb,
    Noun,
    Other,
}

pub trait PosTagger: Send + Sync {
    /// One tag per token.
    fn tag(&self, tokens: &[String]) -> Result<Vec<PosTag>>;
}

/// Dictionary tagger. Unknown words are `Other`, or an error when strict.
#[derive(Clone, Debug, Default)]
pub struct LexiconTagger {
    lexicon: HashMap<String, PosTag>,
    pub strict: bool,
}

impl LexiconTagger {
    pub fn new(entries: impl IntoIterator<Item = (String, PosTag)>) -> Self {
        Self {
            lexicon: entries.into_iter().collect(),
            strict: false,
        }
    }

    /// Colors as adjectives, shapes as nouns.
    pub fn shapes() -> Self {
        let mut e: Vec<(String, PosTag)> = crate::trainer::COLORS
            .iter()
            .map(|w| (w.to_string(), PosTag::Adjective))
            .collect();
        e.extend(
            crate::trainer::SHAPES
                .iter()
                .map(|w| (w.to_string(), PosTag::Noun)),
        );
        Self::new(e)
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, tokens: &[String]) -> Result<Vec<PosTag>> {
        tokens
            .iter()
            .map(|t| match self.lexicon.get(t) {
                Some(&tag) => Ok(tag),
                None if self.strict => Err(Error::Adapter(format!("no tag for `{t}`"))),
                None => Ok(PosTag::Other),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionStats {
    pub layer: LayerRef,
    pub adjective_pct: f64,
    pub verb_pct: f64,
    pub unique_words: usize,
    pub cider: Option<f64>,
    pub warning: Option<String>,
}

/// Descriptions of one layer, aligned with the evaluation references when a
/// CIDEr column is wanted.
pub struct LayerTexts {
    pub layer: LayerRef,
    pub texts: Vec<String>,
}

pub fn caption_stats(
    layers: &[LayerTexts],
    tagger: &dyn PosTagger,
    cider: Option<(&[Vec<String>], &dyn CaptionScorer)>,
) -> Result<Vec<CaptionStats>> {
    layers
        .iter()
        .map(|lt| {
            let tokens: Vec<Vec<String>> = lt.texts.iter().map(|t| tokenize(t)).collect();
            let total: usize = tokens.iter().map(Vec::len).sum();
            let cider = match cider {
                Some((refs, scorer)) => Some(scorer.score(&lt.texts, refs)?),
                None => None,
            };
            if total == 0 {
                log::warn!("layer `{}` has no description tokens", lt.layer);
                return Ok(CaptionStats {
                    layer: lt.layer.clone(),
                    adjective_pct: 0.0,
                    verb_pct: 0.0,
                    unique_words: 0,
                    cider,
                    warning: Some("empty corpus".into()),
                });
            }
            let (mut adj, mut verb) = (0usize, 0usize);
            for t in &tokens {
                for tag in tagger.tag(t)? {
                    match tag {
                        PosTag::Adjective => adj += 1,
                        PosTag::Verb => verb += 1,
                        _ => {}
                    }
                }
            }
            let unique: HashSet<&String> = tokens.iter().flatten().collect();
            Ok(CaptionStats {
                layer: lt.layer.clone(),
                adjective_pct: 100.0 * adj as f64 / total as f64,
                verb_pct: 100.0 * verb as f64 / total as f64,
                unique_words: unique.len(),
                cider,
                warning: None,
            })
        })
        .collect()
}
