pub mod checkpoint;
pub mod metrics;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{Progress, TrainState};
pub use metrics::{perplexity, qa_metrics, score_answer, token_accuracy, QaScores};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use schedule::{lr_at, ScheduleConfig, ScheduleKind};
pub use trainer::{check_vocab, evaluate, load_dataset, mlm_sequence_len, mix_seed, Dataset, EvalMetrics, MetricRow, Outcome, QaExample, RunReport, Trainer};
