use std::collections::HashMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::masking::{mask_mlm, maskable_count, masking_rng, special, MaskingConfig};
use crate::error::{Error, Result};
use crate::model::EncoderInput;

/// One `[CLS] A [SEP] B [SEP]` sentence pair, unpadded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub is_next: bool,
}

impl Example {
    /// Pack two sentences, trimming the longer one until the pair fits.
    pub fn pair(a: &[usize], b: &[usize], is_next: bool, seq_len: usize) -> Result<Self> {
        if seq_len < 5 {
            return Err(Error::Config(format!("sequence length {seq_len} cannot hold a sentence pair")));
        }
        let (mut a, mut b) = (a, b);
        while a.len() + b.len() + 3 > seq_len {
            if a.len() > b.len() {
                a = &a[..a.len() - 1];
            } else {
                b = &b[..b.len() - 1];
            }
        }
        let mut tokens = Vec::with_capacity(a.len() + b.len() + 3);
        tokens.push(special::CLS);
        tokens.extend_from_slice(a);
        tokens.push(special::SEP);
        let first = tokens.len();
        tokens.extend_from_slice(b);
        tokens.push(special::SEP);
        let segments = (0..tokens.len()).map(|i| usize::from(i >= first)).collect();
        Ok(Example {
            tokens,
            segments,
            is_next,
        })
    }
}

/// Token streams from a sparse first-order Markov chain over the ordinary ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpus {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub examples: usize,
    /// Successors reachable from each token.
    pub branching: usize,
    pub seed: Option<u64>,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        SyntheticCorpus {
            vocab_size: 101,
            seq_len: 32,
            examples: 2000,
            branching: 3,
            seed: None,
        }
    }
}

impl SyntheticCorpus {
    pub fn validate(&self) -> Result<()> {
        let regular = self.vocab_size.saturating_sub(special::FIRST_REGULAR);
        if regular < 2 {
            return Err(Error::Config(format!(
                "corpus.vocab_size must exceed {} to leave room for ordinary tokens",
                special::FIRST_REGULAR + 1
            )));
        }
        if self.branching == 0 || self.branching > regular {
            return Err(Error::Config(format!(
                "corpus.branching must lie in [1, {regular}], got {}",
                self.branching
            )));
        }
        if self.seq_len < 8 {
            return Err(Error::Config(format!("corpus.seq_len must be at least 8, got {}", self.seq_len)));
        }
        if self.examples == 0 {
            return Err(Error::Config("corpus.examples must be positive".into()));
        }
        Ok(())
    }

    /// Half the pairs are true continuations, half draw B from another stream.
    pub fn generate(&self, seed: u64) -> Result<Vec<Example>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.unwrap_or(seed));
        let regular: Vec<usize> = (special::FIRST_REGULAR..self.vocab_size).collect();
        let chain: Vec<Vec<(usize, f64)>> = regular
            .iter()
            .map(|_| {
                let next: Vec<usize> = regular.choose_multiple(&mut rng, self.branching).copied().collect();
                let weights: Vec<f64> = next.iter().map(|_| rng.random_range(0.2..1.0)).collect();
                next.into_iter().zip(weights).collect()
            })
            .collect();
        let step = |rng: &mut ChaCha8Rng, t: usize| -> usize {
            let options = &chain[t - special::FIRST_REGULAR];
            let total: f64 = options.iter().map(|o| o.1).sum();
            let mut u = rng.random_range(0.0..total);
            for &(n, w) in options {
                if u < w {
                    return n;
                }
                u -= w;
            }
            options[options.len() - 1].0
        };
        let stream = |rng: &mut ChaCha8Rng, len: usize| -> Vec<usize> {
            let mut t = *regular.choose(rng).expect("non-empty");
            (0..len)
                .map(|_| {
                    let cur = t;
                    t = step(rng, t);
                    cur
                })
                .collect()
        };
        let budget = self.seq_len - 3;
        let mut out = Vec::with_capacity(self.examples);
        for _ in 0..self.examples {
            let total = rng.random_range(budget / 2..=budget);
            let len_a = rng.random_range(1..total);
            let len_b = total - len_a;
            let is_next = rng.random_bool(0.5);
            let a_and_b = stream(&mut rng, total);
            let b = if is_next {
                a_and_b[len_a..].to_vec()
            } else {
                stream(&mut rng, len_b)
            };
            out.push(Example::pair(&a_and_b[..len_a], &b, is_next, self.seq_len)?);
        }
        Ok(out)
    }
}

/// Sentences of integer token ids, one per non-empty line.
pub fn read_sequences(path: &Path, vocab_size: usize) -> Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ids = line
            .split_whitespace()
            .map(|w| {
                let id: usize = w.parse().map_err(|_| {
                    Error::Data(format!("{}:{}: '{w}' is not a token id", path.display(), line_no + 1))
                })?;
                if id >= vocab_size {
                    return Err(Error::Data(format!(
                        "{}:{}: token id {id} exceeds vocabulary size {vocab_size}",
                        path.display(),
                        line_no + 1
                    )));
                }
                Ok(id)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ids);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} holds no sequences", path.display())));
    }
    Ok(out)
}

/// Pair consecutive sentences; half the time B is replaced by a random sentence.
pub fn pair_sentences(sentences: &[Vec<usize>], seq_len: usize, seed: u64) -> Result<Vec<Example>> {
    if sentences.len() < 2 {
        return Err(Error::Data("sentence pairing needs at least two sentences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sentences.len() - 1)
        .map(|i| {
            let is_next = rng.random_bool(0.5);
            let b = if is_next {
                &sentences[i + 1]
            } else {
                &sentences[rng.random_range(0..sentences.len())]
            };
            Example::pair(&sentences[i], b, is_next, seq_len)
        })
        .collect()
}

/// Whitespace tokenizer over lowercased text with frequency-ranked ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keep the `vocab_size − 5` most frequent words; ties break alphabetically.
    pub fn fit(text: &str, vocab_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for w in text.split_whitespace() {
            *counts.entry(w.to_lowercase()).or_default() += 1;
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(vocab_size.saturating_sub(special::FIRST_REGULAR));
        let words: Vec<String> = ranked.into_iter().map(|(w, _)| w).collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), special::FIRST_REGULAR + i))
            .collect();
        Vocabulary { words, index }
    }

    pub fn size(&self) -> usize {
        special::FIRST_REGULAR + self.words.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| *self.index.get(&w.to_lowercase()).unwrap_or(&special::UNK))
            .collect()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        id.checked_sub(special::FIRST_REGULAR)
            .and_then(|i| self.words.get(i))
            .map(String::as_str)
    }
}

/// Lines of raw text, tokenized with a vocabulary fitted on the same file.
pub fn read_text(path: &Path, vocab_size: usize) -> Result<(Vocabulary, Vec<Vec<usize>>)> {
    let text = std::fs::read_to_string(path)?;
    let vocab = Vocabulary::fit(&text, vocab_size);
    let sentences: Vec<Vec<usize>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| vocab.encode(l))
        .collect();
    if sentences.is_empty() {
        return Err(Error::Data(format!("{} holds no text", path.display())));
    }
    Ok((vocab, sentences))
}

/// Padded, masked model input with its prediction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: EncoderInput,
    /// One entry per position, row-major `[batch, seq_len]`.
    pub mlm_targets: Vec<Option<usize>>,
    pub nsp_targets: Vec<Option<usize>>,
    /// Sequences without any maskable token.
    pub skipped: usize,
}

impl Batch {
    pub fn masked_count(&self) -> usize {
        self.mlm_targets.iter().filter(|t| t.is_some()).count()
    }

    /// Mask each example with the generator for `first_index + position`.
    pub fn build(
        examples: &[&Example],
        seq_len: usize,
        vocab_size: usize,
        masking: &MaskingConfig,
        masking_seed: u64,
        first_index: u64,
    ) -> Result<Self> {
        let n = examples.len();
        let mut tokens = vec![special::PAD; n * seq_len];
        let mut segments = vec![0; n * seq_len];
        let mut mask = vec![false; n * seq_len];
        let mut mlm_targets = vec![None; n * seq_len];
        let mut skipped = 0;
        for (b, ex) in examples.iter().enumerate() {
            if ex.tokens.len() > seq_len {
                return Err(Error::Data(format!(
                    "example of length {} exceeds sequence length {seq_len}",
                    ex.tokens.len()
                )));
            }
            let row = b * seq_len;
            if maskable_count(&ex.tokens) == 0 {
                skipped += 1;
                tokens[row..row + ex.tokens.len()].copy_from_slice(&ex.tokens);
            } else {
                let mut rng = masking_rng(masking_seed, first_index + b as u64);
                let m = mask_mlm(&ex.tokens, vocab_size, masking, &mut rng);
                tokens[row..row + ex.tokens.len()].copy_from_slice(&m.tokens);
                for (&p, &l) in m.positions.iter().zip(&m.labels) {
                    mlm_targets[row + p] = Some(l);
                }
            }
            segments[row..row + ex.tokens.len()].copy_from_slice(&ex.segments);
            mask[row..row + ex.tokens.len()].fill(true);
        }
        Ok(Batch {
            input: EncoderInput::new(n, seq_len, tokens, segments, mask)?,
            mlm_targets,
            nsp_targets: examples.iter().map(|e| Some(usize::from(!e.is_next))).collect(),
            skipped,
        })
    }
}
