pub mod corpus;
pub mod qa;
pub mod span;
pub mod synthetic;

pub use corpus::{load_text_corpus, pack_documents, read_documents, split_documents};
pub use qa::{build_qa_example, flatten_context, load_qa_dataset, QaRecord};
pub use span::{corrupt_with_spans, span_corrupt, SpanCorruptionConfig, SpanExample};
