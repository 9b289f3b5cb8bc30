use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved token ids shared by every vocabulary.
pub mod special {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const CLS: usize = 2;
    pub const SEP: usize = 3;
    pub const MASK: usize = 4;
    /// First id available to ordinary tokens.
    pub const FIRST_REGULAR: usize = 5;

    pub fn is_structural(id: usize) -> bool {
        matches!(id, PAD | CLS | SEP)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    pub replace_mask: f64,
    pub replace_random: f64,
    pub keep: f64,
    pub mask_token_id: usize,
    /// Derived from the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_prob: 0.15,
            replace_mask: 0.8,
            replace_random: 0.1,
            keep: 0.1,
            mask_token_id: special::MASK,
            seed: None,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, p) in [
            ("mask_prob", self.mask_prob),
            ("replace_mask", self.replace_mask),
            ("replace_random", self.replace_random),
            ("keep", self.keep),
        ] {
            if !(0.0..=1.0).contains(&p) {
                problems.push(format!("masking.{name} must lie in [0, 1], got {p}"));
            }
        }
        let total = self.replace_mask + self.replace_random + self.keep;
        if (total - 1.0).abs() > 1e-9 {
            problems.push(format!(
                "masking.replace_mask + replace_random + keep must sum to 1, got {total}"
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Generator for the sequence at `index` under `seed`.
pub fn masking_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskedSequence {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    /// Original token at each entry of `positions`.
    pub labels: Vec<usize>,
}

impl MaskedSequence {
    /// One target per position, `None` where no prediction is scored.
    pub fn targets(&self) -> Vec<Option<usize>> {
        let mut t = vec![None; self.tokens.len()];
        for (&p, &l) in self.positions.iter().zip(&self.labels) {
            t[p] = Some(l);
        }
        t
    }
}

/// Number of positions eligible for corruption.
pub fn maskable_count(tokens: &[usize]) -> usize {
    tokens.iter().filter(|&&t| !special::is_structural(t)).count()
}

/// Select prediction targets and corrupt them.
///
/// Random replacements are drawn from the ordinary ids `[5, vocab_size)`.
pub fn mask_mlm<R: Rng + ?Sized>(
    tokens: &[usize],
    vocab_size: usize,
    config: &MaskingConfig,
    rng: &mut R,
) -> MaskedSequence {
    let mut out = MaskedSequence {
        tokens: tokens.to_vec(),
        ..Default::default()
    };
    let regular = vocab_size.saturating_sub(special::FIRST_REGULAR);
    for (i, &t) in tokens.iter().enumerate() {
        if special::is_structural(t) || !rng.random_bool(config.mask_prob) {
            continue;
        }
        out.positions.push(i);
        out.labels.push(t);
        let u: f64 = rng.random();
        if u < config.replace_mask {
            out.tokens[i] = config.mask_token_id;
        } else if u < config.replace_mask + config.replace_random && regular > 0 {
            out.tokens[i] = special::FIRST_REGULAR + rng.random_range(0..regular);
        }
    }
    out
}
