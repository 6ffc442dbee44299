//! Continual model merging and lifelong-learning simulation at desk scale.
//!
//! Task-specific fine-tuning of a small attention-pooling bag aggregator
//! against frozen prompt embeddings, orthogonal continual merging of the
//! resulting task vectors, prompt-aligned inference, and a metric suite for
//! synthetic class-incremental task streams.

pub mod aggregator;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod merge;
pub mod metrics;
pub mod prompt;
pub mod rand_util;
pub mod stream;
pub mod svd;

pub use aggregator::{forward, loss_and_grads, subsample, train_task, AggregatorParams, Bag, TrainConfig};
pub use checkpoint::{apply_delta, task_vector, Checkpoint, TaskVector};
pub use error::{Error, Result};
pub use harness::{matrix_to_csv, run_stream, Method, RunHyper, RunResult, Timings};
pub use matrix::Matrix;
pub use merge::{average_merge, project_orthogonal, update_lambda, LambdaMode, MergeState, ProjectionReport};
pub use metrics::{
    balanced_accuracy, backward_transfer, forgetting, mean_acc, overall_accuracy, AccuracyMatrix,
    Averaging, MeanAccMode, MetricReport, Setting,
};
pub use prompt::{
    class_logits, masked_infer, naive_infer, synth_prompt_bank, task_embedding, tcp_infer,
    Prediction, PromptBank, PromptBankConfig, TaskPrompts,
};
pub use stream::{gen_stream, permute_tasks, ClassSpec, Stream, StreamConfig, TaskSpec};
pub use svd::{diag_embed, svd_full, SvdResult};
