use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::{Float, Mask};

/// Projection handles of one multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Var,
    pub q_mem: Option<Var>,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

/// T5 relative-position bucket of `rel_pos = query_pos - key_pos`.
///
/// Bidirectional: half the buckets for keys at or behind the query, half
/// (offset by `num_buckets / 2`) for keys ahead of it. Unidirectional: keys
/// ahead all land in bucket 0. Within each half, the first half of the
/// buckets are exact distances and the rest grow logarithmically up to
/// `max_distance`, beyond which everything shares the last bucket.
pub fn relative_position_bucket(
    rel_pos: i64,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> usize {
    let mut buckets = num_buckets as i64;
    let mut offset = 0;
    let dist = if bidirectional {
        buckets /= 2;
        if rel_pos < 0 {
            offset = buckets;
        }
        rel_pos.abs()
    } else {
        rel_pos.max(0)
    };
    let max_exact = buckets / 2;
    let b = if dist < max_exact {
        dist
    } else {
        let ratio = (dist as f64 / max_exact as f64).ln()
            / (max_distance as f64 / max_exact as f64).ln();
        let log_b = max_exact + (ratio * (buckets - max_exact) as f64) as i64;
        log_b.min(buckets - 1)
    };
    (offset + b) as usize
}

/// Bucket ids `[tq · tk]` for query positions `qpos` against key positions
/// `kpos`; `None` marks a memory row or column, mapped to `mem_bucket`.
pub fn bucket_grid(
    qpos: &[Option<usize>],
    kpos: &[Option<usize>],
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
    mem_bucket: usize,
) -> Vec<u32> {
    let mut out = Vec::with_capacity(qpos.len() * kpos.len());
    for q in qpos {
        for k in kpos {
            let b = match (q, k) {
                (Some(q), Some(k)) => relative_position_bucket(
                    *q as i64 - *k as i64,
                    bidirectional,
                    num_buckets,
                    max_distance,
                ),
                _ => mem_bucket,
            };
            out.push(b as u32);
        }
    }
    out
}

/// Looks up `table [buckets, h]` at `ids` and lays it out as `[h, tq, tk]`.
pub fn position_bias<F: Float>(
    g: &mut Graph<F>,
    table: Var,
    ids: &[u32],
    tq: usize,
    tk: usize,
) -> Result<Var> {
    let h = g.shape(table)[1];
    let rows = g.embedding(table, ids)?;
    let rows = g.reshape(rows, &[tq, tk, h])?;
    g.permute(rows, &[2, 0, 1])
}

/// `[B, t, h·dk] -> [B, h, t, dk]`.
pub fn split_heads<F: Float>(g: &mut Graph<F>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, t, heads, d / heads])?;
    g.permute(x, &[0, 2, 1, 3])
}

/// `[B, h, t, dk] -> [B, t, h·dk]`.
pub fn merge_heads<F: Float>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, t, dk) = (s[0], s[1], s[2], s[3]);
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b, t, h * dk])
}

/// Unscaled dot-product attention on projected inputs.
///
/// `q [B, tq, d]`, `k`/`v [B, tk, d]`, `mask` broadcastable to
/// `[B, h, tq, tk]`, optional `bias [h, tq, tk]`. Returns the merged context
/// `[B, tq, d]` before the output projection. T5 folds the `1/sqrt(d_k)`
/// factor into initialization, so no scaling is applied here.
pub fn attend<F: Float>(
    g: &mut Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    mask: &Mask,
    bias: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let mut scores = g.bmm(q, k, true)?;
    if let Some(b) = bias {
        scores = g.add(scores, b)?;
    }
    let probs = g.masked_softmax(scores, mask)?;
    let ctx = g.bmm(probs, v, false)?;
    merge_heads(g, ctx)
}

/// Full multi-head attention: queries from `xq`, keys and values from `xkv`.
pub fn attention<F: Float>(
    g: &mut Graph<F>,
    xq: Var,
    xkv: Var,
    p: &AttentionParams,
    mask: &Mask,
    bias: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let q = g.matmul(xq, p.q)?;
    let k = g.matmul(xkv, p.k)?;
    let v = g.matmul(xkv, p.v)?;
    let ctx = attend(g, q, k, v, mask, bias, heads)?;
    g.matmul(ctx, p.o)
}

/// Lower-triangular mask `[1, 1, t, t]`.
pub fn causal_mask(t: usize) -> Mask {
    let data = (0..t * t).map(|i| i % t <= i / t).collect();
    Mask::new(vec![1, 1, t, t], data).expect("square mask")
}

/// Key-padding mask `[B, 1, 1, tk]` from `valid [B · tk]`.
pub fn key_mask(valid: &[bool], batch: usize) -> Mask {
    let tk = valid.len() / batch.max(1);
    Mask::new(vec![batch, 1, 1, tk], valid.to_vec()).expect("mask length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn bucket_small_offsets_are_exact() {
        assert_eq!(relative_position_bucket(0, true, 32, 128), 0);
        assert_eq!(relative_position_bucket(1, true, 32, 128), 1);
        assert_eq!(relative_position_bucket(-1, true, 32, 128), 17);
        assert_eq!(relative_position_bucket(7, true, 32, 128), 7);
        assert_eq!(relative_position_bucket(1, false, 32, 128), 1);
        assert_eq!(relative_position_bucket(-5, false, 32, 128), 0);
        assert_eq!(relative_position_bucket(15, false, 32, 128), 15);
    }

    #[test]
    fn bucket_far_offsets_clamp_to_last() {
        assert_eq!(relative_position_bucket(10_000, true, 32, 128), 15);
        assert_eq!(relative_position_bucket(-10_000, true, 32, 128), 31);
        assert_eq!(relative_position_bucket(10_000, false, 32, 128), 31);
        // Just below max_distance stays below the last bucket.
        assert!(relative_position_bucket(100, false, 32, 128) < 31);
    }

    #[test]
    fn bucket_is_monotone_in_distance() {
        let mut prev = 0;
        for d in 0..300 {
            let b = relative_position_bucket(d, false, 32, 128);
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn causal_mask_shape() {
        let m = causal_mask(3);
        assert_eq!(
            m.data(),
            &[true, false, false, true, true, false, true, true, true]
        );
    }

    #[test]
    fn heads_roundtrip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(
            Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap(),
        );
        let s = split_heads(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(s), &[2, 2, 3, 2]);
        let m = merge_heads(&mut g, s).unwrap();
        assert_eq!(g.value(m), g.value(x));
    }
}
