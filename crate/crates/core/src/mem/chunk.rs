use crate::error::{Error, Result};
use crate::tokenizer::PAD_ID;

/// Source ids laid out as `[batch, n_chunks, chunk_len]`, with a parallel
/// validity mask (`true` = real token, `false` = padding).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkedBatch {
    pub ids: Vec<u32>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub n_chunks: usize,
    pub chunk_len: usize,
}

impl ChunkedBatch {
    pub fn tokens_per_row(&self) -> usize {
        self.n_chunks * self.chunk_len
    }

    /// Rows of `ids`/`valid` belonging to batch element `b`.
    pub fn row(&self, b: usize) -> (&[u32], &[bool]) {
        let t = self.tokens_per_row();
        (&self.ids[b * t..(b + 1) * t], &self.valid[b * t..(b + 1) * t])
    }

    /// Concatenates single-row batches with identical chunk geometry.
    pub fn stack(rows: &[ChunkedBatch]) -> Result<ChunkedBatch> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Config("cannot stack an empty batch".into()))?;
        let mut out = ChunkedBatch {
            ids: Vec::new(),
            valid: Vec::new(),
            batch: 0,
            n_chunks: first.n_chunks,
            chunk_len: first.chunk_len,
        };
        for r in rows {
            if (r.n_chunks, r.chunk_len) != (out.n_chunks, out.chunk_len) {
                return Err(Error::shape(
                    "stack",
                    &[out.n_chunks, out.chunk_len],
                    &[r.n_chunks, r.chunk_len],
                ));
            }
            out.ids.extend_from_slice(&r.ids);
            out.valid.extend_from_slice(&r.valid);
            out.batch += r.batch;
        }
        Ok(out)
    }

    /// Whether chunk `c` of element `b` contains at least one real token.
    pub fn chunk_has_tokens(&self, b: usize, c: usize) -> bool {
        let start = (b * self.n_chunks + c) * self.chunk_len;
        self.valid[start..start + self.chunk_len].iter().any(|&v| v)
    }
}

/// Right-pads `ids` to `n_chunks · chunk_len` and splits it into consecutive
/// chunks. Longer inputs are cut when `truncate` is set and rejected otherwise.
pub fn chunk_input(
    ids: &[u32],
    chunk_len: usize,
    n_chunks: usize,
    truncate: bool,
) -> Result<ChunkedBatch> {
    let cap = chunk_len * n_chunks;
    if ids.len() > cap && !truncate {
        return Err(Error::Overflow {
            len: ids.len(),
            capacity: cap,
        });
    }
    let used = ids.len().min(cap);
    let mut out_ids = ids[..used].to_vec();
    let mut valid = vec![true; used];
    out_ids.resize(cap, PAD_ID);
    valid.resize(cap, false);
    Ok(ChunkedBatch {
        ids: out_ids,
        valid,
        batch: 1,
        n_chunks,
        chunk_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn five_tokens_into_two_chunks_of_four() {
        let c = chunk_input(&[10, 11, 12, 13, 14], 4, 2, false).unwrap();
        assert_eq!(c.ids, vec![10, 11, 12, 13, 14, 0, 0, 0]);
        assert_eq!(
            c.valid,
            vec![true, true, true, true, true, false, false, false]
        );
    }

    #[test]
    fn overflow_is_rejected_or_truncated() {
        let err = chunk_input(&[1; 9], 4, 2, false).unwrap_err();
        assert!(matches!(err, Error::Overflow { len: 9, capacity: 8 }));
        let c = chunk_input(&[1; 9], 4, 2, true).unwrap();
        assert_eq!(c.ids.len(), 8);
        assert!(c.valid.iter().all(|&v| v));
    }

    #[test]
    fn empty_input_is_all_padding() {
        let c = chunk_input(&[], 3, 2, false).unwrap();
        assert!(!c.chunk_has_tokens(0, 0) && !c.chunk_has_tokens(0, 1));
    }

    proptest! {
        #[test]
        fn concatenating_chunks_recovers_input(
            ids in proptest::collection::vec(3u32..100, 0..24),
            cl in 1usize..7,
            n in 1usize..5,
        ) {
            prop_assume!(ids.len() <= cl * n);
            let c = chunk_input(&ids, cl, n, false).unwrap();
            let real: Vec<u32> = c.ids.iter().zip(&c.valid).filter(|(_, &v)| v).map(|(&i, _)| i).collect();
            prop_assert_eq!(real, ids.clone());
            prop_assert_eq!(c.valid.iter().filter(|&&v| v).count(), ids.len());
        }
    }
}
