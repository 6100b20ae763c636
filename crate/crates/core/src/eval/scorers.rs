//! Caption scorer adapters. BLEU@4, ROUGE-L and CIDEr-D follow the
//! reference COCO caption evaluation code; anything else (METEOR, SPICE,
//! BERTScore) is reached through [`CommandScorer`]. All values are reported
//! on a 0-100 scale.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use super::CaptionScorer;
use crate::error::{Error, Result};

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

type Ngram = Vec<String>;

fn ngram_counts(words: &[String], max_n: usize) -> HashMap<Ngram, usize> {
    let mut counts = HashMap::new();
    for n in 1..=max_n {
        for win in words.windows(n) {
            *counts.entry(win.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

fn check(hyps: &[String], refs: &[Vec<String>]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::argument("hypotheses and references are not aligned"));
    }
    if refs.iter().any(Vec::is_empty) {
        return Err(Error::argument(
            "every hypothesis needs at least one reference",
        ));
    }
    Ok(())
}

/// Corpus-level BLEU with closest-reference brevity penalty.
pub struct Bleu {
    pub n: usize,
}

impl Default for Bleu {
    fn default() -> Self {
        Self { n: 4 }
    }
}

impl CaptionScorer for Bleu {
    fn name(&self) -> &str {
        "BLEU@4"
    }

    fn score(&self, hyps: &[String], refs: &[Vec<String>]) -> Result<f64> {
        check(hyps, refs)?;
        let n = self.n;
        let mut correct = vec![0usize; n];
        let mut guess = vec![0usize; n];
        let (mut test_len, mut ref_len) = (0usize, 0usize);
        for (h, rs) in hyps.iter().zip(refs) {
            let hw = tokenize(h);
            let mut max_ref: HashMap<Ngram, usize> = HashMap::new();
            let mut lens = Vec::new();
            for r in rs {
                let rw = tokenize(r);
                lens.push(rw.len());
                for (g, c) in ngram_counts(&rw, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            let closest = lens
                .iter()
                .copied()
                .min_by_key(|&l| (l.abs_diff(hw.len()), l))
                .unwrap_or(0);
            test_len += hw.len();
            ref_len += closest;
            for k in 0..n {
                guess[k] += hw.len().saturating_sub(k);
            }
            for (g, c) in ngram_counts(&hw, n) {
                correct[g.len() - 1] += c.min(max_ref.get(&g).copied().unwrap_or(0));
            }
        }
        let (tiny, small) = (1e-15, 1e-9);
        let mut log_sum = 0.0;
        for k in 0..n {
            log_sum += ((correct[k] as f64 + tiny) / (guess[k] as f64 + small)).ln();
        }
        let mut bleu = (log_sum / n as f64).exp();
        let ratio = (test_len as f64 + tiny) / (ref_len as f64 + small);
        if ratio < 1.0 {
            bleu *= (1.0 - 1.0 / ratio).exp();
        }
        Ok(100.0 * bleu)
    }
}

/// Sentence-level LCS F-measure (beta 1.2), best precision and recall over
/// the references, averaged over the corpus.
pub struct RougeL;

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

impl CaptionScorer for RougeL {
    fn name(&self) -> &str {
        "ROUGE-L"
    }

    fn score(&self, hyps: &[String], refs: &[Vec<String>]) -> Result<f64> {
        check(hyps, refs)?;
        if hyps.is_empty() {
            return Ok(0.0);
        }
        let beta2 = 1.2f64 * 1.2;
        let mut total = 0.0;
        for (h, rs) in hyps.iter().zip(refs) {
            let hw = tokenize(h);
            let (mut p_max, mut r_max) = (0.0f64, 0.0f64);
            for r in rs {
                let rw = tokenize(r);
                let l = lcs(&hw, &rw) as f64;
                if !hw.is_empty() {
                    p_max = p_max.max(l / hw.len() as f64);
                }
                if !rw.is_empty() {
                    r_max = r_max.max(l / rw.len() as f64);
                }
            }
            if p_max > 0.0 && r_max > 0.0 {
                total += (1.0 + beta2) * p_max * r_max / (r_max + beta2 * p_max);
            }
        }
        Ok(100.0 * total / hyps.len() as f64)
    }
}

/// Consensus-based TF-IDF similarity with clipping and a Gaussian length
/// penalty; document frequencies come from the references being scored.
pub struct CiderD {
    pub sigma: f64,
}

impl Default for CiderD {
    fn default() -> Self {
        Self { sigma: 6.0 }
    }
}

struct TfIdf {
    vec: Vec<HashMap<Ngram, f64>>,
    norm: Vec<f64>,
    length: f64,
}

impl CiderD {
    fn vectorize(counts: &HashMap<Ngram, usize>, df: &HashMap<Ngram, usize>, log_n: f64) -> TfIdf {
        let mut vec = vec![HashMap::new(); 4];
        let mut norm = vec![0.0; 4];
        let mut length = 0.0;
        for (g, &tf) in counts {
            let n = g.len() - 1;
            let d = (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
            let v = tf as f64 * (log_n - d);
            norm[n] += v * v;
            vec[n].insert(g.clone(), v);
            if n == 1 {
                length += tf as f64;
            }
        }
        TfIdf {
            vec,
            norm: norm.into_iter().map(f64::sqrt).collect(),
            length,
        }
    }

    fn similarity(&self, h: &TfIdf, r: &TfIdf) -> [f64; 4] {
        let delta = h.length - r.length;
        let mut out = [0.0; 4];
        for n in 0..4 {
            for (g, &hv) in &h.vec[n] {
                if let Some(&rv) = r.vec[n].get(g) {
                    out[n] += hv.min(rv) * rv;
                }
            }
            if h.norm[n] != 0.0 && r.norm[n] != 0.0 {
                out[n] /= h.norm[n] * r.norm[n];
            }
            out[n] *= (-(delta * delta) / (2.0 * self.sigma * self.sigma)).exp();
        }
        out
    }
}

impl CaptionScorer for CiderD {
    fn name(&self) -> &str {
        "CIDEr"
    }

    fn score(&self, hyps: &[String], refs: &[Vec<String>]) -> Result<f64> {
        check(hyps, refs)?;
        if hyps.is_empty() {
            return Ok(0.0);
        }
        let ref_counts: Vec<Vec<HashMap<Ngram, usize>>> = refs
            .iter()
            .map(|rs| rs.iter().map(|r| ngram_counts(&tokenize(r), 4)).collect())
            .collect();
        let mut df: HashMap<Ngram, usize> = HashMap::new();
        for rs in &ref_counts {
            let grams: HashSet<&Ngram> = rs.iter().flat_map(|c| c.keys()).collect();
            for g in grams {
                *df.entry(g.clone()).or_insert(0) += 1;
            }
        }
        let log_n = (hyps.len() as f64).ln();
        let mut total = 0.0;
        for (h, rs) in hyps.iter().zip(&ref_counts) {
            let hv = Self::vectorize(&ngram_counts(&tokenize(h), 4), &df, log_n);
            let mut acc = [0.0; 4];
            for rc in rs {
                let rv = Self::vectorize(rc, &df, log_n);
                for (a, s) in acc.iter_mut().zip(self.similarity(&hv, &rv)) {
                    *a += s;
                }
            }
            let mean = acc.iter().sum::<f64>() / 4.0;
            total += mean / rs.len() as f64 * 10.0;
        }
        Ok(100.0 * total / hyps.len() as f64)
    }
}

/// Runs an external scorer. The program receives
/// `{"metric", "hypotheses", "references"}` as JSON on stdin and must print
/// `{"score": <number>}` on stdout.
pub struct CommandScorer {
    pub metric: String,
    pub program: String,
    pub args: Vec<String>,
}

#[derive(Serialize)]
struct CommandInput<'a> {
    metric: &'a str,
    hypotheses: &'a [String],
    references: &'a [Vec<String>],
}

#[derive(Deserialize)]
struct CommandOutput {
    score: f64,
}

impl CaptionScorer for CommandScorer {
    fn name(&self) -> &str {
        &self.metric
    }

    fn score(&self, hyps: &[String], refs: &[Vec<String>]) -> Result<f64> {
        check(hyps, refs)?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Adapter(format!("cannot start `{}`: {e}", self.program)))?;
        let input = serde_json::to_vec(&CommandInput {
            metric: &self.metric,
            hypotheses: hyps,
            references: refs,
        })?;
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(&input)
            .map_err(|e| Error::Adapter(format!("`{}` closed its input: {e}", self.program)))?;
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(Error::Adapter(format!(
                "`{}` failed: {}",
                self.program,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let parsed: CommandOutput = serde_json::from_slice(&out.stdout)
            .map_err(|e| Error::Adapter(format!("`{}` printed no score: {e}", self.program)))?;
        Ok(parsed.score)
    }
}

pub fn standard_scorers() -> Vec<Box<dyn CaptionScorer>> {
    vec![
        Box::new(Bleu::default()),
        Box::new(RougeL),
        Box::new(CiderD::default()),
    ]
}
