//! Scenario runners and oracles shared by the integration tests and the
//! acceptance suite. Each check returns `Err` with a readable reason.

#![allow(dead_code)]

pub mod analytics;
pub mod attendance;
pub mod limiter;
pub mod schedule;
pub mod survey;
