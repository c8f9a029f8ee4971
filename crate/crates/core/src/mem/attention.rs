use crate::error::{Error, Result};
use crate::graph::{ChunkLayout, Graph, Var};
use crate::model::attention::{attend, attention, merge_heads, split_heads, AttentionParams};
use crate::tensor::{Float, Mask};

/// Prepends the `M` learned memory rows to every chunk.
///
/// `tokens [B, n, chunk_len, d]`, `mem_init [M, d]` (absent when `M = 0`).
/// Returns `[B, n, M + chunk_len, d]`.
pub fn prefix_memory<F: Float>(g: &mut Graph<F>, tokens: Var, mem_init: Option<Var>) -> Result<Var> {
    let Some(mem) = mem_init else {
        return Ok(tokens);
    };
    let s = g.shape(tokens).to_vec();
    let (b, n) = (s[0], s[1]);
    let mem = g.expand(mem, &[b, n])?;
    g.concat(&[mem, tokens], 2)
}

/// Self-attention over the augmented sequence `x [B, n·(M + chunk_len), d]`
/// where memory rows take queries from `W^Q_mem` and token rows from `W^Q`.
/// Keys and values share one projection. With `M = 0` this is plain attention.
pub fn mem_attention<F: Float>(
    g: &mut Graph<F>,
    x: Var,
    p: &AttentionParams,
    layout: ChunkLayout,
    mask: &Mask,
    bias: Option<Var>,
    heads: usize,
) -> Result<Var> {
    if layout.mem == 0 {
        return attention(g, x, x, p, mask, bias, heads);
    }
    let q_mem = p
        .q_mem
        .ok_or_else(|| Error::Config("memory attention needs a memory query projection".into()))?;
    let s = g.shape(x).to_vec();
    let (b, d) = (s[0], s[2]);
    let blocks = g.reshape(x, &[b, layout.n_chunks, layout.block(), d])?;
    let mem_rows = g.narrow(blocks, 2, 0, layout.mem)?;
    let tok_rows = g.narrow(blocks, 2, layout.mem, layout.chunk_len)?;
    let qm = g.matmul(mem_rows, q_mem)?;
    let qt = g.matmul(tok_rows, p.q)?;
    let q = g.concat(&[qm, qt], 2)?;
    let q = g.reshape(q, &[b, layout.total(), d])?;
    let k = g.matmul(x, p.k)?;
    let v = g.matmul(x, p.v)?;
    let ctx = attend(g, q, k, v, mask, bias, heads)?;
    g.matmul(ctx, p.o)
}

/// Decoder cross-attention through the chunk selector.
///
/// `dec [B, tq, d]` against the full encoder output `enc [B, n·(M+cl), d]`.
/// Each query scores chunk `c` by the log-sum-exp of its scores on `c`'s
/// memory keys, softmaxes those chunk scores over chunks with real tokens,
/// and spreads each chunk's weight over its real tokens by ordinary
/// within-chunk attention. `valid [B · n · cl]` marks real tokens.
pub fn selector_cross_attention<F: Float>(
    g: &mut Graph<F>,
    dec: Var,
    enc: Var,
    p: &AttentionParams,
    layout: ChunkLayout,
    valid: &[bool],
    heads: usize,
) -> Result<Var> {
    let q = g.matmul(dec, p.q)?;
    let k = g.matmul(enc, p.k)?;
    let v = g.matmul(enc, p.v)?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let scores = g.bmm(q, k, true)?;
    let probs = g.selector_softmax(scores, layout, valid.to_vec())?;
    let ctx = g.bmm(probs, v, false)?;
    let ctx = merge_heads(g, ctx)?;
    g.matmul(ctx, p.o)
}

/// Decoder cross-attention whose keys and values are the `n·M` memory
/// states `memory [B, n·M, d]` only.
pub fn ws_cross_attention<F: Float>(
    g: &mut Graph<F>,
    dec: Var,
    memory: Var,
    p: &AttentionParams,
    heads: usize,
) -> Result<Var> {
    let s = g.shape(memory).to_vec();
    if s[1] == 0 {
        return Err(Error::Config(
            "memory cross-attention needs at least one memory token".into(),
        ));
    }
    let mask = Mask::all(vec![1, 1, 1, s[1]]);
    attention(g, dec, memory, p, &mask, None, heads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::mask::build_mem_attention_mask;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn params(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, d: usize, q_mem: bool) -> AttentionParams {
        let mut m = || g.leaf(rand_t(rng, &[d, d]), true);
        AttentionParams {
            q: m(),
            q_mem: if q_mem { Some(m()) } else { None },
            k: m(),
            v: m(),
            o: m(),
        }
    }

    #[test]
    fn prefix_rows_are_identical_across_chunks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new();
        let tok = g.constant(rand_t(&mut rng, &[1, 4, 3, 2]));
        let mem = g.constant(rand_t(&mut rng, &[2, 2]));
        let out = prefix_memory(&mut g, tok, Some(mem)).unwrap();
        assert_eq!(g.shape(out), &[1, 4, 5, 2]);
        let d = g.value(out).data();
        for c in 1..4 {
            assert_eq!(&d[c * 10..c * 10 + 4], &d[0..4]);
        }
        assert_eq!(prefix_memory(&mut g, tok, None).unwrap(), tok);
    }

    #[test]
    fn shared_query_projection_equals_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let layout = ChunkLayout {
            n_chunks: 2,
            mem: 1,
            chunk_len: 3,
        };
        let x = g.constant(rand_t(&mut rng, &[2, 8, 4]));
        let mut p = params(&mut g, &mut rng, 4, false);
        p.q_mem = Some(p.q);
        let mask = build_mem_attention_mask(layout, &[true; 6]).unwrap();
        let a = mem_attention(&mut g, x, &p, layout, &mask, None, 2).unwrap();
        let b = attention(&mut g, x, x, &p, &mask, None, 2).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
    }

    #[test]
    fn missing_memory_query_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f64>::new();
        let layout = ChunkLayout {
            n_chunks: 2,
            mem: 1,
            chunk_len: 2,
        };
        let x = g.constant(rand_t(&mut rng, &[1, 6, 4]));
        let p = params(&mut g, &mut rng, 4, false);
        let mask = build_mem_attention_mask(layout, &[true; 4]).unwrap();
        let err = mem_attention(&mut g, x, &p, layout, &mask, None, 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_chunk_selector_is_plain_cross_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let layout = ChunkLayout {
            n_chunks: 1,
            mem: 2,
            chunk_len: 4,
        };
        let dec = g.constant(rand_t(&mut rng, &[1, 3, 4]));
        let enc = g.constant(rand_t(&mut rng, &[1, 6, 4]));
        let p = params(&mut g, &mut rng, 4, false);
        let valid = [true, true, true, false];
        let a = selector_cross_attention(&mut g, dec, enc, &p, layout, &valid, 2).unwrap();
        let keys = [false, false, true, true, true, false];
        let mask = Mask::new(vec![1, 1, 1, 6], keys.to_vec()).unwrap();
        let b = attention(&mut g, dec, enc, &p, &mask, None, 2).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
    }

    #[test]
    fn ws_key_length_is_memory_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::<f64>::new();
        let dec = g.constant(rand_t(&mut rng, &[1, 3, 4]));
        let mem = g.constant(rand_t(&mut rng, &[1, 8, 4]));
        let p = params(&mut g, &mut rng, 4, false);
        let a = ws_cross_attention(&mut g, dec, mem, &p, 2).unwrap();
        let b = attention(&mut g, dec, mem, &p, &Mask::all(vec![1, 1, 3, 8]), None, 2).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
        let empty = g.constant(Tensor::zeros(vec![1, 0, 4]));
        assert!(ws_cross_attention(&mut g, dec, empty, &p, 2).is_err());
    }
}
