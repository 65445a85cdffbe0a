//! Job-shop scheduling toolkit.
//!
//! The crate builds a greedy construction heuristic for the minimum-makespan
//! job shop scheduling problem by training a double-LSTM actor-critic with
//! proximal policy optimization (adaptive KL penalty), and benchmarks the
//! learned policy against an in-repo exact branch-and-bound baseline.
//!
//! Module map:
//! - [`instances`]: problem data model, random generation, text format
//! - [`env`]: the scheduling decision process (states, masks, rewards)
//! - [`autodiff`]: minimal reverse-mode differentiation engine + Adam
//! - [`models`]: LSTM encoder stacks, actor and critic heads
//! - [`ppo`]: rollout collection, losses, the training loop, greedy solving
//! - [`exact`]: MILP export, branch-and-bound, brute-force oracle
//! - [`eval`]: gap/improvement statistics, performance profiles, benchmarking
//! - [`checkpoint`]: versioned parameter container on disk

pub mod autodiff;
pub mod checkpoint;
pub mod env;
pub mod eval;
pub mod exact;
pub mod instances;
pub mod models;
pub mod ppo;
