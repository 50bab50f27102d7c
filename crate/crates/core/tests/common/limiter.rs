//! Replay oracle for the rate limiter. Blocks from 429 responses are checked
//! as permits are granted; window capacities are checked over the whole log
//! afterwards.

use std::collections::BTreeMap;

use chrono::{TimeDelta, TimeZone, Utc};
use coursebot_core::rate_limit::{
    Admission, HttpMethod, LimiterConfig, RateLimiter, ResponseOutcome, RouteKey, RouteLimit,
};
use coursebot_core::Timestamp;

pub const GLOBAL: u32 = 12;
pub const ROUTES: usize = 5;
pub const MAJORS: usize = 3;

pub fn config() -> LimiterConfig {
    let route = |method, route: &str, capacity, window_seconds, alias: Option<&str>| RouteLimit {
        method,
        route: route.into(),
        capacity,
        window_seconds,
        alias: alias.map(String::from),
    };
    LimiterConfig {
        routes: vec![
            route(HttpMethod::Post, "channels/{channel_id}/messages", 5, 5.0, None),
            route(HttpMethod::Put, "channels/{channel_id}/messages/{message_id}", 3, 2.0, None),
            route(HttpMethod::Post, "interactions/{interaction_id}/callback", 8, 1.0, None),
            route(HttpMethod::Get, "guilds/{guild_id}/members", 2, 0.5, Some("members")),
            route(HttpMethod::Delete, "guilds/{guild_id}/members/{user_id}", 2, 0.5, Some("members")),
        ],
        global_capacity_per_second: GLOBAL,
        ..LimiterConfig::default()
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Acquire { route: usize, major: usize },
    Headers { route: usize, major: usize, limit: u32, remaining: u32, reset_ms: u32 },
    Limited { route: usize, major: usize, retry_ms: u32, global: bool },
}

#[derive(Debug, Clone)]
pub struct Step {
    /// Milliseconds relative to the previous step; negative values exercise clamping.
    pub dt_ms: i64,
    pub op: Op,
}

pub fn key(cfg: &LimiterConfig, route: usize, major: usize) -> RouteKey {
    let r = &cfg.routes[route];
    RouteKey::new(r.method, r.route.clone(), Some(&format!("m{major}")))
}

fn group(r: &RouteLimit) -> String {
    r.alias.clone().unwrap_or_else(|| format!("{} {}", r.method, r.route))
}

pub fn t0() -> Timestamp {
    Utc.with_ymd_and_hms(2024, 10, 14, 9, 0, 0).unwrap()
}

/// Largest number of `times` inside any half-open interval of length `window`.
fn max_in_window(times: &[Timestamp], window: TimeDelta) -> usize {
    let mut sorted = times.to_vec();
    sorted.sort();
    let mut best = 0;
    let mut hi = 0;
    for lo in 0..sorted.len() {
        while hi < sorted.len() && sorted[hi] < sorted[lo] + window {
            hi += 1;
        }
        best = best.max(hi - lo);
    }
    best
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ReplayStats {
    pub permits: usize,
    pub waits: usize,
    pub global_blocks: usize,
}

pub fn replay(steps: &[Step]) -> Result<ReplayStats, String> {
    let cfg = config();
    let limiter = RateLimiter::new(cfg.clone()).unwrap();
    let mut clock = t0();
    let mut latest: Option<Timestamp> = None;
    let mut grants: BTreeMap<(String, usize), Vec<Timestamp>> = BTreeMap::new();
    let mut all = Vec::new();
    let mut global_blocks: Vec<(Timestamp, Timestamp)> = Vec::new();
    let mut route_blocks: Vec<((String, usize), Timestamp, Timestamp)> = Vec::new();
    let mut stats = ReplayStats::default();

    for step in steps {
        clock += TimeDelta::milliseconds(step.dt_ms);
        // The limiter clamps late timestamps forward; the oracle does the same.
        let now = latest.map_or(clock, |l| l.max(clock));
        latest = Some(now);
        match step.op {
            Op::Acquire { route, major } => match limiter.acquire(&key(&cfg, route, major), clock).unwrap() {
                Admission::Permit(p) => {
                    let t = p.granted_at;
                    if t != now {
                        return Err(format!("granted at {t} but effective time is {now}"));
                    }
                    let bucket = (group(&cfg.routes[route]), major);
                    if let Some((from, until)) = global_blocks.iter().find(|(f, u)| t >= *f && t < *u) {
                        return Err(format!("permit at {t} inside global block [{from}, {until})"));
                    }
                    if route_blocks.iter().any(|(b, f, u)| *b == bucket && t >= *f && t < *u) {
                        return Err(format!("permit at {t} inside route block of {bucket:?}"));
                    }
                    grants.entry(bucket).or_default().push(t);
                    all.push(t);
                    stats.permits += 1;
                }
                Admission::Wait(d) => {
                    if d.is_zero() {
                        return Err("zero wait returned instead of a permit".into());
                    }
                    stats.waits += 1;
                }
            },
            Op::Headers { route, major, limit, remaining, reset_ms } => {
                let outcome = ResponseOutcome::Headers {
                    limit,
                    remaining,
                    reset_after: f64::from(reset_ms) / 1000.0,
                };
                limiter.on_response(&key(&cfg, route, major), outcome, clock).unwrap();
            }
            Op::Limited { route, major, retry_ms, global } => {
                let outcome = ResponseOutcome::TooManyRequests {
                    retry_after: f64::from(retry_ms) / 1000.0,
                    is_global: global,
                };
                limiter.on_response(&key(&cfg, route, major), outcome, clock).unwrap();
                let until = now + TimeDelta::milliseconds(retry_ms.into());
                if global {
                    global_blocks.push((now, until));
                    stats.global_blocks += 1;
                } else {
                    route_blocks.push(((group(&cfg.routes[route]), major), now, until));
                }
            }
        }
    }

    for ((g, major), times) in &grants {
        let r = cfg.routes.iter().find(|r| group(r) == *g).unwrap();
        let window = TimeDelta::microseconds((r.window_seconds * 1e6) as i64);
        let seen = max_in_window(times, window);
        if seen > r.capacity as usize {
            return Err(format!("bucket {g} m{major} granted {seen} > {} within {window}", r.capacity));
        }
    }
    let seen = max_in_window(&all, TimeDelta::seconds(1));
    if seen > GLOBAL as usize {
        return Err(format!("global window granted {seen} > {GLOBAL}"));
    }
    Ok(stats)
}

/// A schedule drawn from `rng`: mostly acquires, some header feedback and 429s,
/// occasional clock regressions.
pub fn random_schedule(rng: &mut impl rand::Rng, len: usize) -> Vec<Step> {
    (0..len)
        .map(|_| {
            let dt_ms = if rng.random_bool(0.1) { -rng.random_range(1..200) } else { rng.random_range(0..400) };
            let route = rng.random_range(0..ROUTES);
            let major = rng.random_range(0..MAJORS);
            let op = match rng.random_range(0..10) {
                0 => Op::Headers {
                    route,
                    major,
                    limit: rng.random_range(1..10),
                    remaining: rng.random_range(0..4),
                    reset_ms: rng.random_range(0..3000),
                },
                1 => Op::Limited { route, major, retry_ms: rng.random_range(1..3000), global: rng.random_bool(0.5) },
                _ => Op::Acquire { route, major },
            };
            Step { dt_ms, op }
        })
        .collect()
}
