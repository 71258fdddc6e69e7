//! Low-rank adapters chained across transformer layers by a state-space
//! recurrence, together with a small frozen host encoder, exact parameter
//! accounting and a synthetic-task training harness.
//!
//! Module map:
//!
//! - [`tensor`], [`autodiff`], [`finite_diff`]: dense `f64` tensors and a
//!   reverse-mode tape with an explicit gradient stop.
//! - [`time_module`], [`lora`]: the chained adapter unit and the plain
//!   LoRA baseline.
//! - [`time_axis`]: chains of modules and per-pass state.
//! - [`planner`]: insertion patterns and parameter counts.
//! - [`encoder`]: the frozen host transformer.
//! - [`tasks`], [`train`], [`gradcheck`]: datasets, optimizer loop,
//!   evaluation and gradient verification.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod finite_diff;
pub mod gradcheck;
pub mod lora;
pub mod planner;
pub mod seed;
pub mod tasks;
pub mod tensor;
pub mod time_axis;
pub mod time_module;
pub mod train;

pub use autodiff::{stop_gradient, Gradients, Tape, Var};
pub use encoder::{
    attach_adapters, build_encoder, EncoderConfig, ForwardOptions, FrozenEncoder, Pooling, TokenBatch,
};
pub use error::{Error, Result};
pub use finite_diff::{finite_diff, finite_diff_at};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use planner::{
    budget_report, count_params, plan_alternating, plan_dense, plan_skip_one, BudgetReport, BudgetRow,
    InsertionPlan, MatrixKind, Method, ModelDims, NamedPlan, PlanEntry,
};
pub use tasks::{gen_task, Dataset, Example, TaskKind, TaskSpec};
pub use tensor::Tensor;
pub use time_axis::{run_chain_oracle, Chain, PassState, StateTrace};
pub use time_module::{AdapterConfig, TimeModule};
pub use train::{evaluate, train, Adam, EpochRecord, EvalReport, Metrics, TrainOptions};
