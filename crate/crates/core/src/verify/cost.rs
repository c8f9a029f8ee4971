use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::ChunkLayout;
use crate::mem::mask::build_mem_attention_mask;

/// Encoder self-attention score counts for one layer, all tokens real.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttentionCost {
    pub n: usize,
    pub chunk_len: usize,
    #[serde(rename = "M")]
    pub mem: usize,
    pub allowed: usize,
    pub dense: usize,
    pub ratio: f64,
}

/// Counts the admissible entries of the constructed mask one by one and
/// compares them with dense attention over the same augmented length.
pub fn count_attention_cost(n: usize, chunk_len: usize, mem: usize) -> Result<AttentionCost> {
    if n == 0 || chunk_len == 0 {
        return Err(Error::Config(format!("attention cost needs positive sizes, got n={n} chunk_len={chunk_len}")));
    }
    let layout = ChunkLayout {
        n_chunks: n,
        mem,
        chunk_len,
    };
    let mask = build_mem_attention_mask(layout, &vec![true; n * chunk_len])?;
    let allowed = mask.data().iter().filter(|&&b| b).count();
    let dense = layout.total() * layout.total();
    Ok(AttentionCost {
        n,
        chunk_len,
        mem,
        allowed,
        dense,
        ratio: allowed as f64 / dense as f64,
    })
}
