pub mod config;
pub mod error;
pub mod graph;
pub mod mem;
pub mod model;
pub mod params;
pub mod tensor;
pub mod data;
pub mod tokenizer;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{ChunkLayout, Graph, Var};
pub use params::ParamStore;
pub use tensor::{Float, Mask, Tensor};
pub use mem::{chunk_input, ChunkedBatch};
pub use model::{Model, ModelConfig, Seq2SeqBatch, Variant};
pub use config::{RunConfig, Task};
