use crate::error::{Error, Result};
use crate::graph::ChunkLayout;
use crate::tensor::Mask;

/// Row `r` of the augmented sequence: which chunk it is in and, for token
/// rows, the in-chunk position (`None` for memory rows).
pub fn row_kind(layout: ChunkLayout, r: usize) -> (usize, Option<usize>) {
    let c = r / layout.block();
    let i = r % layout.block();
    if i < layout.mem {
        (c, None)
    } else {
        (c, Some(i - layout.mem))
    }
}

/// Encoder self-attention mask over `n · (M + chunk_len)` rows.
///
/// `valid` has `n · chunk_len` entries (`true` = real token). Memory rows see
/// every memory row plus the real tokens of their own chunk; token rows see
/// the memory rows and real tokens of their own chunk. Pad keys are never
/// visible. A row left with no visible key (a pad token of an all-pad chunk
/// without memory) may attend to itself so that softmax stays defined.
pub fn build_mem_attention_mask(layout: ChunkLayout, valid: &[bool]) -> Result<Mask> {
    let t = layout.total();
    let tokens = layout.n_chunks * layout.chunk_len;
    if valid.len() != tokens {
        return Err(Error::shape("mem mask", &[valid.len()], &[tokens]));
    }
    let mut data = vec![false; t * t];
    for q in 0..t {
        let (qc, qi) = row_kind(layout, q);
        let row = &mut data[q * t..(q + 1) * t];
        for (k, slot) in row.iter_mut().enumerate() {
            let (kc, ki) = row_kind(layout, k);
            *slot = match (qi, ki) {
                (None, None) => true,
                (_, None) => qc == kc,
                (_, Some(j)) => qc == kc && valid[kc * layout.chunk_len + j],
            };
        }
        if !row.iter().any(|&v| v) {
            row[q] = true;
        }
    }
    Mask::new(vec![t, t], data)
}

/// Stacks per-element masks into `[B, 1, T, T]`.
pub fn batch_mem_attention_mask(layout: ChunkLayout, valid: &[bool], batch: usize) -> Result<Mask> {
    let tokens = layout.n_chunks * layout.chunk_len;
    let t = layout.total();
    let mut data = Vec::with_capacity(batch * t * t);
    for b in 0..batch {
        let m = build_mem_attention_mask(layout, &valid[b * tokens..(b + 1) * tokens])?;
        data.extend_from_slice(m.data());
    }
    Mask::new(vec![batch, 1, t, t], data)
}

/// Admissible (query, key) pairs of one encoder layer with every token real:
/// `n · [M · (chunk_len + n·M) + chunk_len · (chunk_len + M)]`.
pub fn admissible_pairs(n_chunks: usize, chunk_len: usize, mem: usize) -> usize {
    n_chunks * (mem * (chunk_len + n_chunks * mem) + chunk_len * (chunk_len + mem))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(n: usize, m: usize, cl: usize) -> ChunkLayout {
        ChunkLayout {
            n_chunks: n,
            mem: m,
            chunk_len: cl,
        }
    }

    #[test]
    fn worked_example_two_chunks_one_memory() {
        // Rows: [m0, t0, t1, m1, t2, t3]
        let l = layout(2, 1, 2);
        let m = build_mem_attention_mask(l, &[true; 4]).unwrap();
        let row = |r: usize| m.data()[r * 6..(r + 1) * 6].to_vec();
        assert_eq!(row(0), vec![true, true, true, true, false, false]);
        assert_eq!(row(1), vec![true, true, true, false, false, false]);
        assert_eq!(row(3), vec![true, false, false, true, true, true]);
        assert_eq!(row(4), vec![false, false, false, true, true, true]);
        assert_eq!(m.count_true(), admissible_pairs(2, 2, 1));
    }

    #[test]
    fn pad_keys_are_hidden() {
        let l = layout(2, 1, 2);
        let m = build_mem_attention_mask(l, &[true, false, true, true]).unwrap();
        for q in 0..6 {
            assert!(!m.data()[q * 6 + 2], "row {q} sees pad key");
        }
    }

    #[test]
    fn all_pad_chunk_without_memory_falls_back_to_self() {
        let l = layout(2, 0, 2);
        let m = build_mem_attention_mask(l, &[true, true, false, false]).unwrap();
        assert_eq!(&m.data()[2 * 4..3 * 4], &[false, false, true, false]);
        assert_eq!(&m.data()[3 * 4..4 * 4], &[false, false, false, true]);
    }

    #[test]
    fn count_formula_matches_full_grid() {
        for n in [1, 2, 4] {
            for cl in [3, 4, 8] {
                for mem in [0, 1, 2] {
                    let l = layout(n, mem, cl);
                    let m = build_mem_attention_mask(l, &vec![true; n * cl]).unwrap();
                    assert_eq!(m.count_true(), admissible_pairs(n, cl, mem));
                }
            }
        }
    }

    #[test]
    fn long_document_cost_ratio() {
        assert_eq!(admissible_pairs(4, 128, 2), 67_648);
        assert_eq!(admissible_pairs(1, 520, 0), 270_400);
    }
}
