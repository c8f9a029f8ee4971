use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{EOS_ID, NUM_SENTINELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpanCorruptionConfig {
    pub corruption_rate: f64,
    pub mean_span_length: f64,
    pub max_sentinels: usize,
}

impl Default for SpanCorruptionConfig {
    fn default() -> Self {
        SpanCorruptionConfig {
            corruption_rate: 0.15,
            mean_span_length: 3.0,
            max_sentinels: NUM_SENTINELS,
        }
    }
}

impl SpanCorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.corruption_rate > 0.0 && self.corruption_rate < 1.0) {
            return Err(Error::Config(format!(
                "span.corruption_rate {} outside (0, 1)",
                self.corruption_rate
            )));
        }
        if self.mean_span_length < 1.0 {
            return Err(Error::Config("span.mean_span_length must be >= 1".into()));
        }
        if self.max_sentinels == 0 || self.max_sentinels > NUM_SENTINELS {
            return Err(Error::Config(format!(
                "span.max_sentinels must be in 1..={NUM_SENTINELS}"
            )));
        }
        Ok(())
    }
}

/// Corrupted input/target pair. `skip` is set when no span could be placed;
/// the input is then the original sequence and the target is empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanExample {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
    pub skip: bool,
}

/// Replaces each `(start, len)` span with one sentinel. Sentinel `k` (in
/// order of appearance) is `vocab_size - 1 - k`. Spans must be sorted,
/// non-empty, and separated by at least one kept token.
pub fn corrupt_with_spans(tokens: &[u32], spans: &[(usize, usize)], vocab_size: usize) -> Result<SpanExample> {
    let mut input = Vec::with_capacity(tokens.len());
    let mut target = Vec::new();
    let mut pos = 0;
    for (k, &(start, len)) in spans.iter().enumerate() {
        if len == 0 || start < pos || (k > 0 && start == pos) || start + len > tokens.len() {
            return Err(Error::Config(format!("invalid span ({start}, {len})")));
        }
        let sentinel = (vocab_size - 1 - k) as u32;
        input.extend_from_slice(&tokens[pos..start]);
        input.push(sentinel);
        target.push(sentinel);
        target.extend_from_slice(&tokens[start..start + len]);
        pos = start + len;
    }
    input.extend_from_slice(&tokens[pos..]);
    let skip = spans.is_empty();
    if !skip {
        target.push(EOS_ID);
    }
    Ok(SpanExample {
        input,
        target,
        skip,
    })
}

/// Uniformly random composition of `total` into `parts` positive integers.
fn composition(total: usize, parts: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut cuts = sample(rng, total - 1, parts - 1).into_vec();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c + 1 - prev);
        prev = c + 1;
    }
    out.push(total - prev);
    out
}

/// Span placement for a sequence of `len` tokens.
///
/// `round(rate · len)` tokens are noise, split into
/// `k = round(noise / mean_span)` spans (at least one, capped by the sentinel
/// budget and by room for separating gaps). Span lengths are a uniform random
/// composition of the noise count; the kept tokens are split into `k + 1`
/// gaps of which the `k - 1` interior ones are non-empty, so spans never
/// touch.
pub fn sample_spans(len: usize, cfg: &SpanCorruptionConfig, seed: u64) -> Vec<(usize, usize)> {
    let noise = ((cfg.corruption_rate * len as f64).round() as usize).min(len.saturating_sub(1));
    if noise == 0 {
        return Vec::new();
    }
    let keep = len - noise;
    let k = ((noise as f64 / cfg.mean_span_length).round() as usize)
        .max(1)
        .min(cfg.max_sentinels)
        .min(noise)
        .min(keep + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths = composition(noise, k, &mut rng);
    // Gaps g_0..g_k with g_1..g_{k-1} >= 1: shift by one for the interior
    // gaps and by one for the two outer gaps to draw a positive composition.
    let gaps = composition(keep + 2, k + 1, &mut rng);
    let mut spans = Vec::with_capacity(k);
    let mut pos = 0;
    for (i, &l) in lengths.iter().enumerate() {
        let gap = if i == 0 { gaps[0] - 1 } else { gaps[i] };
        pos += gap;
        spans.push((pos, l));
        pos += l;
    }
    spans
}

/// T5-style span corruption, deterministic in `seed`.
pub fn span_corrupt(tokens: &[u32], cfg: &SpanCorruptionConfig, vocab_size: usize, seed: u64) -> Result<SpanExample> {
    let spans = sample_spans(tokens.len(), cfg, seed);
    corrupt_with_spans(tokens, &spans, vocab_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const V: usize = 1000;

    fn x(k: u32) -> u32 {
        V as u32 - 1 - k
    }

    #[test]
    fn hand_example() {
        let t = [10, 11, 12, 13, 14, 15];
        let e = corrupt_with_spans(&t, &[(2, 2)], V).unwrap();
        assert_eq!(e.input, vec![10, 11, x(0), 14, 15]);
        assert_eq!(e.target, vec![x(0), 12, 13, EOS_ID]);
        assert!(!e.skip);
    }

    #[test]
    fn touching_spans_are_rejected() {
        assert!(corrupt_with_spans(&[1, 2, 3, 4], &[(0, 1), (1, 1)], V).is_err());
    }

    #[test]
    fn tiny_rate_skips() {
        let cfg = SpanCorruptionConfig {
            corruption_rate: 1e-6,
            ..Default::default()
        };
        let t: Vec<u32> = (10..300).collect();
        let e = span_corrupt(&t, &cfg, V, 1).unwrap();
        assert!(e.skip);
        assert_eq!(e.input, t);
        assert!(e.target.is_empty());
    }

    #[test]
    fn single_token_skips() {
        let e = span_corrupt(&[5], &SpanCorruptionConfig::default(), V, 0).unwrap();
        assert!(e.skip);
    }

    #[test]
    fn same_seed_same_output() {
        let t: Vec<u32> = (10..100).collect();
        let cfg = SpanCorruptionConfig::default();
        assert_eq!(span_corrupt(&t, &cfg, V, 9).unwrap(), span_corrupt(&t, &cfg, V, 9).unwrap());
        assert_ne!(span_corrupt(&t, &cfg, V, 9).unwrap(), span_corrupt(&t, &cfg, V, 10).unwrap());
    }

    /// Rebuilds the original sequence by substituting each input sentinel
    /// with the target tokens that follow the same sentinel.
    fn reconstruct(e: &SpanExample) -> Vec<u32> {
        let is_sentinel = |t: u32| t as usize >= V - NUM_SENTINELS;
        let mut out = Vec::new();
        for &t in &e.input {
            if is_sentinel(t) {
                let at = e.target.iter().position(|&s| s == t).unwrap();
                out.extend(e.target[at + 1..].iter().take_while(|&&s| !is_sentinel(s) && s != EOS_ID));
            } else {
                out.push(t);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn reconstruction_and_sentinel_order(
            len in 1usize..400,
            rate in 0.05f64..0.6,
            mean in 1.0f64..6.0,
            seed in any::<u64>(),
        ) {
            let cfg = SpanCorruptionConfig { corruption_rate: rate, mean_span_length: mean, max_sentinels: 100 };
            let t: Vec<u32> = (0..len as u32).map(|i| 3 + i % 500).collect();
            let e = span_corrupt(&t, &cfg, V, seed).unwrap();
            prop_assert_eq!(reconstruct(&e), t);
            let sin: Vec<u32> = e.input.iter().copied().filter(|&s| s as usize >= V - 100).collect();
            let sout: Vec<u32> = e.target.iter().copied().filter(|&s| s as usize >= V - 100).collect();
            prop_assert_eq!(&sin, &sout);
            prop_assert!(sin.windows(2).all(|w| w[0] > w[1]));
            // Spans never touch: no two sentinels are adjacent in the input.
            prop_assert!(e.input.windows(2).all(|w| !(w[0] as usize >= V - 100 && w[1] as usize >= V - 100)));
        }
    }
}
