//! Averaged attention maps and normalized positional entropy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{EncoderInput, Model};
use crate::tensor::Graph;

/// Square attention map for one (layer, head), averaged over sequences of one length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub seq_len: usize,
    pub layer: usize,
    pub head: usize,
    pub sequences_averaged: usize,
    /// Row-major `seq_len × seq_len`; row = query, column = key.
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(seq_len: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != seq_len * seq_len {
            return Err(Error::shape("attention map", &[seq_len, seq_len], &[values.len()]));
        }
        Ok(AttentionMap {
            seq_len,
            layer: 0,
            head: 0,
            sequences_averaged: 1,
            values,
        })
    }

    pub fn uniform(seq_len: usize) -> Self {
        let v = 1.0 / seq_len as f64;
        AttentionMap::new(seq_len, vec![v; seq_len * seq_len]).expect("square by construction")
    }

    pub fn at(&self, query: usize, key: usize) -> f64 {
        self.values[query * self.seq_len + key]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.seq_len)
    }

    /// Largest deviation of a row sum from one.
    pub fn max_row_error(&self) -> f64 {
        self.rows()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// `−(1 / (L ln L)) Σ_i Σ_j a_ij ln a_ij`, with `0 ln 0 = 0`.
///
/// Uniform rows score 1 and one-hot rows score 0. Results within 1e-9 of
/// either end are snapped to it.
pub fn positional_entropy(map: &AttentionMap) -> Result<f64> {
    let l = map.seq_len;
    if l < 2 {
        return Err(Error::Degenerate(format!(
            "positional entropy needs at least two positions, got {l}"
        )));
    }
    let mut sum = 0.0;
    for &a in &map.values {
        if a > 0.0 {
            sum += a * a.ln();
        }
    }
    let h = -sum / (l as f64 * (l as f64).ln());
    Ok(if h.abs() < 1e-9 {
        0.0
    } else if (h - 1.0).abs() < 1e-9 {
        1.0
    } else {
        h.clamp(0.0, 1.0)
    })
}

/// Maps grouped by unpadded sequence length; each bucket holds
/// `layers × heads` maps in layer-major order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaps {
    pub layers: usize,
    pub heads: usize,
    pub buckets: BTreeMap<usize, Vec<AttentionMap>>,
}

impl AttentionMaps {
    pub fn sequences(&self) -> usize {
        self.buckets
            .values()
            .map(|maps| maps.first().map_or(0, |m| m.sequences_averaged))
            .sum()
    }

    pub fn get(&self, seq_len: usize, layer: usize, head: usize) -> Option<&AttentionMap> {
        self.buckets.get(&seq_len)?.get(layer * self.heads + head)
    }
}

/// Mean attention map per (layer, head) over at most `max_sequences`
/// sequences, taken in batch order.
///
/// Padded queries are dropped and the remaining rows renormalized over the
/// real keys, so each sequence contributes an `n × n` map for its unpadded
/// length `n`.
pub fn average_attention_maps(
    model: &Model,
    batches: &[EncoderInput],
    max_sequences: usize,
) -> Result<AttentionMaps> {
    let heads = model.config().heads;
    let mut layers = 0;
    let mut sums: BTreeMap<usize, (usize, Vec<Vec<f64>>)> = BTreeMap::new();
    let mut seen = 0;
    'outer: for input in batches {
        let mut g = Graph::new(model.precision());
        let out = model.encode(&mut g, input)?;
        layers = out.attention.len();
        let maps: Vec<_> = out.attention.iter().map(|a| a.maps(&g)).collect();
        let l = input.seq_len;
        for b in 0..input.batch {
            if seen == max_sequences {
                break 'outer;
            }
            let real: Vec<usize> = (0..l).filter(|&t| input.mask[b * l + t]).collect();
            let n = real.len();
            let entry = sums
                .entry(n)
                .or_insert_with(|| (0, vec![vec![0.0; n * n]; layers * heads]));
            entry.0 += 1;
            for (layer, probs) in maps.iter().enumerate() {
                let p = probs.data();
                for h in 0..heads {
                    let acc = &mut entry.1[layer * heads + h];
                    let base = (b * heads + h) * l * l;
                    for (qi, &q) in real.iter().enumerate() {
                        let row: Vec<f64> = real.iter().map(|&k| p[base + q * l + k]).collect();
                        let z: f64 = row.iter().sum();
                        for (ki, v) in row.into_iter().enumerate() {
                            acc[qi * n + ki] += v / z;
                        }
                    }
                }
            }
            seen += 1;
        }
    }
    if seen == 0 {
        return Err(Error::Data("no sequences to average".into()));
    }
    let buckets = sums
        .into_iter()
        .map(|(n, (count, accs))| {
            let maps = accs
                .into_iter()
                .enumerate()
                .map(|(i, acc)| AttentionMap {
                    seq_len: n,
                    layer: i / heads,
                    head: i % heads,
                    sequences_averaged: count,
                    values: acc.into_iter().map(|v| v / count as f64).collect(),
                })
                .collect();
            (n, maps)
        })
        .collect();
    Ok(AttentionMaps {
        layers,
        heads,
        buckets,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadEntropy {
    pub head: usize,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// Unweighted mean over every (layer, head).
    pub mean: f64,
    /// Per layer, heads ordered from highest to lowest entropy.
    pub layers: Vec<Vec<HeadEntropy>>,
    pub sequences: usize,
    /// Sequences per unpadded length.
    pub buckets: BTreeMap<usize, usize>,
}

/// Entropy of every (layer, head), combining length buckets weighted by
/// their sequence counts. Buckets of length one carry no positional
/// information and are skipped.
pub fn entropy_report(maps: &AttentionMaps) -> Result<EntropyReport> {
    let mut weighted = vec![0.0; maps.layers * maps.heads];
    let mut weight = 0usize;
    let mut buckets = BTreeMap::new();
    for (&n, bucket) in &maps.buckets {
        let count = bucket.first().map_or(0, |m| m.sequences_averaged);
        buckets.insert(n, count);
        if n < 2 {
            continue;
        }
        for (i, m) in bucket.iter().enumerate() {
            weighted[i] += count as f64 * positional_entropy(m)?;
        }
        weight += count;
    }
    if weight == 0 || weighted.is_empty() {
        return Err(Error::Data("no attention maps with at least two positions".into()));
    }
    let per_head: Vec<f64> = weighted.iter().map(|w| w / weight as f64).collect();
    let mean = per_head.iter().sum::<f64>() / per_head.len() as f64;
    let layers = per_head
        .chunks(maps.heads)
        .map(|hs| {
            let mut v: Vec<HeadEntropy> = hs
                .iter()
                .enumerate()
                .map(|(head, &entropy)| HeadEntropy { head, entropy })
                .collect();
            v.sort_by(|a, b| b.entropy.total_cmp(&a.entropy).then(a.head.cmp(&b.head)));
            v
        })
        .collect();
    Ok(EntropyReport {
        mean,
        layers,
        sequences: maps.sequences(),
        buckets,
    })
}

/// Average positional entropy of `model` over the sequences in `batches`.
pub fn model_entropy(model: &Model, batches: &[EncoderInput], max_sequences: usize) -> Result<EntropyReport> {
    entropy_report(&average_attention_maps(model, batches, max_sequences)?)
}

// ---------------------------------------------------------------------------
// output

/// Grayscale level for an attention weight: range [0, 0.1], gamma 1/3.
pub fn heatmap_level(v: f64) -> u8 {
    let x = (v / 0.1).clamp(0.0, 1.0);
    (255.0 * x.powf(1.0 / 3.0)).round() as u8
}

/// Binary PGM (P5) rendering of a map, one pixel per entry.
pub fn heatmap_pgm(map: &AttentionMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.seq_len, map.seq_len).into_bytes();
    out.extend(map.values.iter().map(|&v| heatmap_level(v)));
    out
}

pub fn map_csv(map: &AttentionMap) -> String {
    let mut s = String::new();
    for row in map.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

/// Write per-head CSV matrices and heatmaps under `out/maps/` and the entropy
/// summary to `out/entropy.json`.
pub fn write_analysis(out: &Path, maps: &AttentionMaps, report: &EntropyReport) -> Result<()> {
    let dir = out.join("maps");
    std::fs::create_dir_all(&dir)?;
    for (n, bucket) in &maps.buckets {
        for m in bucket {
            let stem = format!("len{n:03}_layer{:02}_head{:02}", m.layer, m.head);
            write_atomic(&dir.join(format!("{stem}.csv")), map_csv(m).as_bytes())?;
            write_atomic(&dir.join(format!("{stem}.pgm")), &heatmap_pgm(m))?;
        }
    }
    write_atomic(&out.join("entropy.json"), serde_json::to_string_pretty(report)?.as_bytes())
}
