//! Scheduler checks over a fourteen-week semester: firing order under
//! arbitrary tick spacing, and exactly-once survey launches across a restart.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::TimeDelta;
use coursebot_core::bot::Bot;
use coursebot_core::course::CourseData;
use coursebot_core::scheduler::{Scheduler, TriggerAction};
use coursebot_core::sim::{epoch, generate_course, SimParams};
use coursebot_core::store::{DataStore, MemorySink, RecordSink};

pub const WEEKS: u32 = 14;

pub fn semester() -> CourseData {
    generate_course(&SimParams { weeks: WEEKS, students: 5, seed: 3 })
}

/// Tick with `spacing` (seconds, cycled) until nothing is due. Every trigger
/// must fire once, never early, in calendar order. Returns the trigger count.
pub fn check_ticks(course: &CourseData, spacing: &[i64]) -> Result<usize, String> {
    let mut s = Scheduler::load_calendar(course).map_err(|e| e.to_string())?;
    let expected: Vec<String> = s.triggers().iter().map(|t| t.trigger_id.clone()).collect();
    let sink = MemorySink::default();
    let mut now = epoch();
    let mut fired = Vec::new();
    let mut i = 0;
    while s.next_due().is_some() {
        now += TimeDelta::seconds(spacing[i % spacing.len()]);
        i += 1;
        for t in s.tick(now, &sink).map_err(|e| e.to_string())? {
            if t.at > now {
                return Err(format!("{} fired at {now}, due {}", t.trigger_id, t.at));
            }
            fired.push(t.trigger_id);
        }
    }
    if fired != expected {
        let at = fired.iter().zip(&expected).position(|(a, b)| a != b).unwrap_or(fired.len().min(expected.len()));
        return Err(format!("fired sequence diverges at position {at} ({} fired, {} expected)", fired.len(), expected.len()));
    }
    if sink.fired() != expected {
        return Err("persisted fired flags differ from the firing order".into());
    }
    Ok(expected.len())
}

/// Run a bot until `kill_hours` after the epoch, drop it, start a fresh one
/// from the persisted fired flags and run to the end. Each survey must launch
/// exactly once over both lives. Returns the number of surveys.
pub fn check_restart(course: &CourseData, spacing: &[i64], kill_hours: i64) -> Result<usize, String> {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(DataStore::new(dir.path()));
    let kill_at = epoch() + TimeDelta::hours(kill_hours);
    let mut launches: BTreeMap<String, usize> = BTreeMap::new();
    let mut count = |bot: &Bot| {
        for c in bot.state.changes.since(0) {
            if c.kind == "survey_launched" {
                *launches.entry(c.data["survey_id"].as_str().unwrap_or_default().to_string()).or_default() += 1;
            }
        }
    };

    let mut now = epoch();
    let mut i = 0;
    let mut bot = Bot::new(course.clone(), store.clone() as Arc<dyn RecordSink>).map_err(|e| e.to_string())?;
    while now < kill_at {
        now += TimeDelta::seconds(spacing[i % spacing.len()]);
        i += 1;
        bot.tick(now).map_err(|e| e.to_string())?;
    }
    count(&bot);
    drop(bot);

    let mut bot = Bot::new(course.clone(), store.clone() as Arc<dyn RecordSink>).map_err(|e| e.to_string())?;
    let fired = store.load_fired().map_err(|e| e.to_string())?;
    bot.resume(fired.iter().map(|(id, _)| id.as_str()));
    while bot.next_due().is_some() {
        now += TimeDelta::seconds(spacing[i % spacing.len()]);
        i += 1;
        bot.tick(now).map_err(|e| e.to_string())?;
    }
    count(&bot);

    let calendar = Scheduler::load_calendar(course).map_err(|e| e.to_string())?;
    let fired = store.load_fired().map_err(|e| e.to_string())?;
    if fired.len() != calendar.triggers().len() {
        return Err(format!("{} fired flags persisted, {} triggers", fired.len(), calendar.triggers().len()));
    }
    let surveys = calendar
        .triggers()
        .iter()
        .filter(|t| matches!(t.action, TriggerAction::LaunchSurvey { .. }))
        .count();
    if launches.len() != surveys {
        return Err(format!("{} surveys launched, {surveys} scheduled", launches.len()));
    }
    if let Some((id, n)) = launches.iter().find(|(_, &n)| n != 1) {
        return Err(format!("{id} launched {n} times"));
    }
    Ok(surveys)
}

/// Tick spacings from one second to three days, in three bands.
pub fn random_spacing(rng: &mut impl rand::Rng) -> Vec<i64> {
    let len = rng.random_range(1..400);
    (0..len)
        .map(|_| match rng.random_range(0..3) {
            0 => rng.random_range(1..60),
            1 => rng.random_range(60..3600),
            _ => rng.random_range(3600..3 * 86_400),
        })
        .collect()
}
