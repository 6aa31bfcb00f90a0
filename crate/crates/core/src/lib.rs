//! Dealer-market engine for binary prediction markets.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bmm;
pub mod engine;
pub mod lmsr;
pub mod market;
pub mod numerics;
pub mod sim;
pub mod walk;

pub use market::{MarketMakerConfig, MarketMakerState, Side};
