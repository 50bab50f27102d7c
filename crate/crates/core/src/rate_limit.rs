//! Dual-layer admission control for outbound platform calls.
//!
//! Every outbound action is keyed by a [`RouteKey`] (HTTP method, route
//! template and the major id substituted into it). A permit must be granted
//! by both the per-route bucket and the global one-second window; the two
//! decrements happen under one lock so a permit is never half-granted.
//!
//! Buckets are sliding-window logs: a bucket of capacity `c` and window `w`
//! never holds more than `c` grants inside any interval of length `w`. Server
//! feedback (rate-limit headers and 429 responses) only ever tightens the
//! local state, so configuration is always an upper bound on throughput.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Mutex;
use std::time::Duration;

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum HttpMethod {
    Get,
    Post,
    Put,
    Delete,
}

impl fmt::Display for HttpMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HttpMethod::Get => "GET",
            HttpMethod::Post => "POST",
            HttpMethod::Put => "PUT",
            HttpMethod::Delete => "DELETE",
        })
    }
}

/// Rate-limit key: method plus route template with its major id.
///
/// Only the first `{param}` of the template is the major id; any further
/// parameters stay elided, so `channels/{channel_id}/messages/{message_id}`
/// for channel `c1` renders as `channels/c1/messages/{message_id}`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RouteKey {
    pub method: HttpMethod,
    template: String,
    major: Option<String>,
}

impl RouteKey {
    pub fn new(method: HttpMethod, template: impl Into<String>, major: Option<&str>) -> Self {
        Self {
            method,
            template: template.into(),
            major: major.map(str::to_string),
        }
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn major(&self) -> Option<&str> {
        self.major.as_deref()
    }

    /// The route string with the major id substituted.
    pub fn route(&self) -> String {
        match (&self.major, self.template.find('{')) {
            (Some(major), Some(open)) => match self.template[open..].find('}') {
                Some(close) => format!(
                    "{}{}{}",
                    &self.template[..open],
                    major,
                    &self.template[open + close + 1..]
                ),
                None => self.template.clone(),
            },
            _ => self.template.clone(),
        }
    }
}

impl fmt::Display for RouteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.method, self.route())
    }
}

fn default_capacity() -> u32 {
    5
}

fn default_window() -> f64 {
    5.0
}

fn default_global() -> u32 {
    50
}

/// One row of the limiter configuration table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteLimit {
    pub method: HttpMethod,
    pub route: String,
    pub capacity: u32,
    pub window_seconds: f64,
    /// Routes sharing an alias share one bucket per major id.
    #[serde(default)]
    pub alias: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimiterConfig {
    #[serde(default)]
    pub routes: Vec<RouteLimit>,
    #[serde(default = "default_global")]
    pub global_capacity_per_second: u32,
    #[serde(default = "default_capacity")]
    pub default_capacity: u32,
    #[serde(default = "default_window")]
    pub default_window_seconds: f64,
    /// Reject routes missing from the table instead of giving them a default bucket.
    #[serde(default)]
    pub strict: bool,
}

impl Default for LimiterConfig {
    fn default() -> Self {
        Self {
            routes: Vec::new(),
            global_capacity_per_second: default_global(),
            default_capacity: default_capacity(),
            default_window_seconds: default_window(),
            strict: false,
        }
    }
}

impl LimiterConfig {
    pub fn validate(&self) -> Result<(), RateLimitError> {
        let bad = |msg: String| Err(RateLimitError::InvalidConfig(msg));
        if self.global_capacity_per_second == 0 {
            return bad("global_capacity_per_second must be positive".into());
        }
        if self.default_capacity == 0 || !(self.default_window_seconds > 0.0) {
            return bad("default bucket must have positive capacity and window".into());
        }
        let mut groups: BTreeMap<&str, (u32, f64)> = BTreeMap::new();
        for r in &self.routes {
            if r.capacity == 0 || !(r.window_seconds > 0.0) {
                return bad(format!("{} {}: capacity and window must be positive", r.method, r.route));
            }
            if let Some(alias) = &r.alias {
                if let Some(&(cap, win)) = groups.get(alias.as_str()) {
                    if cap != r.capacity || win != r.window_seconds {
                        return bad(format!("alias `{alias}` declared with conflicting limits"));
                    }
                }
                groups.insert(alias, (r.capacity, r.window_seconds));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RateLimitError {
    #[error("unknown route {0}")]
    UnknownRoute(String),
    #[error("invalid limiter configuration: {0}")]
    InvalidConfig(String),
}

/// Identity of the bucket a route resolves to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BucketId {
    pub group: String,
    pub major: Option<String>,
}

impl fmt::Display for BucketId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.major {
            Some(m) => write!(f, "{}@{}", self.group, m),
            None => f.write_str(&self.group),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permit {
    pub bucket: BucketId,
    pub granted_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    Permit(Permit),
    /// Nothing was reserved; retrying after this long can succeed.
    Wait(Duration),
}

impl Admission {
    pub fn is_permit(&self) -> bool {
        matches!(self, Admission::Permit(_))
    }
}

/// What the server said about a completed call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ResponseOutcome {
    Headers {
        limit: u32,
        remaining: u32,
        reset_after: f64,
    },
    TooManyRequests {
        retry_after: f64,
        is_global: bool,
    },
}

/// Point-in-time view of a bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    pub capacity: u32,
    pub remaining: u32,
    pub reset_at: Timestamp,
    pub window: Duration,
}

pub(crate) fn secs(seconds: f64) -> TimeDelta {
    TimeDelta::microseconds((seconds.max(0.0) * 1e6).round() as i64)
}

fn to_std(delta: TimeDelta) -> Duration {
    delta.to_std().unwrap_or(Duration::ZERO)
}

#[derive(Debug)]
struct SlidingLog {
    capacity: u32,
    window: TimeDelta,
    grants: VecDeque<Timestamp>,
}

impl SlidingLog {
    fn new(capacity: u32, window: TimeDelta) -> Self {
        Self {
            capacity,
            window,
            grants: VecDeque::new(),
        }
    }

    fn prune(&mut self, now: Timestamp) {
        while let Some(&front) = self.grants.front() {
            if front + self.window <= now {
                self.grants.pop_front();
            } else {
                break;
            }
        }
    }

    fn remaining(&self) -> u32 {
        self.capacity.saturating_sub(self.grants.len() as u32)
    }

    /// Time until a slot frees up, or `None` if one is free now.
    fn wait(&self, now: Timestamp) -> Option<TimeDelta> {
        if (self.grants.len() as u32) < self.capacity {
            return None;
        }
        // The grant that must expire is the one `capacity` places from the end.
        let idx = self.grants.len() - self.capacity as usize;
        Some(self.grants[idx] + self.window - now)
    }
}

#[derive(Debug)]
struct BucketState {
    log: SlidingLog,
    configured_capacity: u32,
    server_budget: Option<(u32, Timestamp)>,
    blocked_until: Option<Timestamp>,
}

impl BucketState {
    fn new(capacity: u32, window: TimeDelta) -> Self {
        Self {
            log: SlidingLog::new(capacity, window),
            configured_capacity: capacity,
            server_budget: None,
            blocked_until: None,
        }
    }

    fn refresh(&mut self, now: Timestamp) {
        self.log.prune(now);
        if matches!(self.server_budget, Some((_, until)) if until <= now) {
            self.server_budget = None;
        }
        if matches!(self.blocked_until, Some(until) if until <= now) {
            self.blocked_until = None;
        }
    }

    fn wait(&self, now: Timestamp) -> Option<TimeDelta> {
        let mut wait = self.log.wait(now);
        if let Some((0, until)) = self.server_budget {
            wait = wait.max(Some(until - now));
        }
        if let Some(until) = self.blocked_until {
            wait = wait.max(Some(until - now));
        }
        wait
    }
}

#[derive(Debug)]
struct LimiterState {
    latest: Option<Timestamp>,
    buckets: BTreeMap<BucketId, BucketState>,
    global: SlidingLog,
    global_blocked_until: Option<Timestamp>,
}

/// Thread-safe per-route + global limiter.
#[derive(Debug)]
pub struct RateLimiter {
    config: LimiterConfig,
    state: Mutex<LimiterState>,
}

impl RateLimiter {
    pub fn new(config: LimiterConfig) -> Result<Self, RateLimitError> {
        config.validate()?;
        let global = SlidingLog::new(config.global_capacity_per_second, TimeDelta::seconds(1));
        Ok(Self {
            config,
            state: Mutex::new(LimiterState {
                latest: None,
                buckets: BTreeMap::new(),
                global,
                global_blocked_until: None,
            }),
        })
    }

    pub fn config(&self) -> &LimiterConfig {
        &self.config
    }

    /// Resolve a key to its bucket identity and limits.
    pub fn resolve(&self, key: &RouteKey) -> Result<(BucketId, u32, TimeDelta), RateLimitError> {
        let entry = self
            .config
            .routes
            .iter()
            .find(|r| r.method == key.method && r.route == key.template);
        match entry {
            Some(r) => Ok((
                BucketId {
                    group: r
                        .alias
                        .clone()
                        .unwrap_or_else(|| format!("{} {}", r.method, r.route)),
                    major: key.major.clone(),
                },
                r.capacity,
                secs(r.window_seconds),
            )),
            None if self.config.strict => Err(RateLimitError::UnknownRoute(key.to_string())),
            None => Ok((
                BucketId {
                    group: format!("{} {}", key.method, key.template),
                    major: key.major.clone(),
                },
                self.config.default_capacity,
                secs(self.config.default_window_seconds),
            )),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LimiterState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Request a permit for `key` at `now`.
    ///
    /// Timestamps earlier than one already observed are clamped forward; the
    /// permit reports the instant it was actually granted at.
    pub fn acquire(&self, key: &RouteKey, now: Timestamp) -> Result<Admission, RateLimitError> {
        let (id, capacity, window) = self.resolve(key)?;
        let mut state = self.lock();
        let now = state.observe(now);

        state.global.prune(now);
        if matches!(state.global_blocked_until, Some(until) if until <= now) {
            state.global_blocked_until = None;
        }
        let mut wait = state.global.wait(now);
        if let Some(until) = state.global_blocked_until {
            wait = wait.max(Some(until - now));
        }

        let bucket = state
            .buckets
            .entry(id.clone())
            .or_insert_with(|| BucketState::new(capacity, window));
        bucket.refresh(now);
        wait = wait.max(bucket.wait(now));

        if let Some(wait) = wait {
            return Ok(Admission::Wait(to_std(wait)));
        }

        bucket.log.grants.push_back(now);
        if let Some((remaining, _)) = bucket.server_budget.as_mut() {
            *remaining = remaining.saturating_sub(1);
        }
        state.global.grants.push_back(now);
        Ok(Admission::Permit(Permit {
            bucket: id,
            granted_at: now,
        }))
    }

    /// Feed back what the server reported for a call on `key`.
    pub fn on_response(
        &self,
        key: &RouteKey,
        outcome: ResponseOutcome,
        now: Timestamp,
    ) -> Result<(), RateLimitError> {
        let (id, capacity, window) = self.resolve(key)?;
        let mut state = self.lock();
        let now = state.observe(now);
        match outcome {
            ResponseOutcome::TooManyRequests {
                retry_after,
                is_global: true,
            } => {
                let until = now + secs(retry_after);
                state.global_blocked_until = state.global_blocked_until.max(Some(until));
            }
            ResponseOutcome::TooManyRequests {
                retry_after,
                is_global: false,
            } => {
                let bucket = state
                    .buckets
                    .entry(id)
                    .or_insert_with(|| BucketState::new(capacity, window));
                let until = now + secs(retry_after);
                bucket.blocked_until = bucket.blocked_until.max(Some(until));
            }
            ResponseOutcome::Headers {
                limit,
                remaining,
                reset_after,
            } => {
                let bucket = state
                    .buckets
                    .entry(id)
                    .or_insert_with(|| BucketState::new(capacity, window));
                bucket.refresh(now);
                bucket.log.capacity = limit.clamp(1, bucket.configured_capacity);
                bucket.server_budget = Some((remaining, now + secs(reset_after)));
            }
        }
        Ok(())
    }

    /// Current view of the bucket `key` resolves to.
    pub fn bucket(&self, key: &RouteKey, now: Timestamp) -> Result<Bucket, RateLimitError> {
        let (id, capacity, window) = self.resolve(key)?;
        let mut state = self.lock();
        let now = state.observe(now);
        let bucket = state
            .buckets
            .entry(id)
            .or_insert_with(|| BucketState::new(capacity, window));
        bucket.refresh(now);
        let mut remaining = bucket.log.remaining();
        if let Some((server, _)) = bucket.server_budget {
            remaining = remaining.min(server);
        }
        if bucket.blocked_until.is_some() {
            remaining = 0;
        }
        let reset_at = now + bucket.wait(now).unwrap_or(TimeDelta::zero());
        Ok(Bucket {
            capacity: bucket.log.capacity,
            remaining,
            reset_at,
            window: to_std(bucket.log.window),
        })
    }
}

impl LimiterState {
    fn observe(&mut self, now: Timestamp) -> Timestamp {
        let now = self.latest.map_or(now, |l| l.max(now));
        self.latest = Some(now);
        now
    }
}
