//! Course-interaction chat bot engine.
//!
//! The bot runs attendance checks, activity feedback surveys and weekly
//! scheduled announcements against a simulated chat guild, stores every
//! interaction as CSV, and computes the learning analytics over the stored
//! records.

pub mod analytics;
pub mod attendance;
pub mod bot;
pub mod course;
pub mod dispatch;
pub mod gateway;
pub mod model;
pub mod rate_limit;
pub mod scheduler;
pub mod sim;
pub mod store;
pub mod survey;

pub use model::{
    ActivityKind, ActivityRef, DifficultyRating, GradeBand, GuildEvent, MessageId, OutboundAction, Timestamp, UserRef,
};
