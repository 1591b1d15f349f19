//! Feature extractor, attention and classifier; meta-example inner steps,
//! first-order outer steps, meta-training and the sequential meta-test.

mod checkpoint;
mod evaluate;
mod model;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use evaluate::{meta_test, meta_test_run, MetaTestConfig, MetaTestPoint};
pub use model::{Architecture, Backbone, Bound, Model, Trainable};
pub use train::{
    attention_aggregate, forward_fen, inner_step_on_features, inner_update, meta_train, outer_update,
    support_loss, write_trace_csv, Aggregation, InnerMode, MetaExample, MetaHyper, MetaTrainOutcome,
};
