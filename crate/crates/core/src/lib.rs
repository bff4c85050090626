//! Optimal consumption and investment with state-dependent (discounted)
//! utilities and labour income, solved in closed form through a convex
//! dual multiplier and checked by Monte Carlo and small-tree oracles.
//!
//! Modules follow the flow of a run: [`market`] simulates prices and the
//! state price density, [`preferences`] holds the utilities and aggregate
//! demand, [`endowment`] values future income, [`optimizer`] assembles the
//! optimal policy and [`verify`] tests it.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod endowment;
pub mod error;
pub mod exec;
pub mod market;
pub mod numerics;
pub mod optimizer;
pub mod preferences;
pub mod verify;

pub use endowment::{varpi, EndowmentModel, EndowmentRate, VarPiCache, VarPiMode};
pub use error::{Error, Result};
pub use exec::ExecMode;
pub use market::{Coef, MarketSpec, PathBundle, SamplePath, TimeGrid};
pub use optimizer::{solve, Branch, PathState, ProblemKind, Solution, SolveConfig};
pub use preferences::{StatePreference, Utility, Weight};
