pub mod attention;
pub mod chunk;
pub mod mask;

pub use chunk::{chunk_input, ChunkedBatch};
pub use mask::{admissible_pairs, build_mem_attention_mask};
