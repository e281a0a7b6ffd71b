//! Self-backtracking laboratory for the Countdown task.
//!
//! The crate is organised bottom-up:
//!
//! - [`countdown`]: exact state transitions, exhaustive solving, path
//!   verification and a budgeted DFS baseline.
//! - [`dataset`]: problem generation, canonical rendering, error injection
//!   and the masked training corpus.
//! - [`lm`]: character vocabulary, a small decoder-only transformer with
//!   hand-written backward pass, and decoding/scoring.
//! - [`train`]: the masked next-token objective and the training loop.
//! - [`search`]: expansion / backtracking / selection at inference time.
//! - [`improve`]: expert iteration from search results back into the model.
//! - [`eval`]: evaluation reports, trigger rates and parameter sweeps.

pub mod countdown;
pub mod dataset;
pub mod eval;
pub mod improve;
pub mod lm;
pub mod rng;
pub mod search;
pub mod train;
