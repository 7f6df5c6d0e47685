//! Direct preference optimization and SimPO with a per-token regularizer
//! whose rewards the model scores itself, on a small byte-level causal
//! transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: f64 tensors, a reverse-mode tape and gradient checking;
//! * [`model`]: the transformer, its roles and checkpoints;
//! * [`data`]: records, tokenization, batching and the planted-error task;
//! * [`rewards`]: contrastive and DPO-implicit token rewards;
//! * [`losses`]: DPO, SimPO, the token regularizer and their combinations;
//! * [`trainer`]: optimizer, schedule, training loop and evaluation;
//! * [`diagnostics`]: reward heatmaps and credit-assignment metrics;
//! * [`experiment`]: planted-task pipelines (synthesize, warm up, annotate);
//! * [`gradcheck_suite`]: finite-difference checks of every loss variant;
//! * [`cli`]: the `treg` command-line tool.

pub mod cli;
pub mod data;
pub mod model;
pub mod numerics;
pub mod rewards;
pub mod losses;
pub mod diagnostics;
pub mod experiment;
pub mod gradcheck_suite;
pub mod trainer;
