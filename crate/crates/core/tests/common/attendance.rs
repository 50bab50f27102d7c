//! Attendance scenarios through the full guild loop, checked against what
//! the students actually sent and against the CSV on disk.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use chrono::{TimeDelta, TimeZone, Utc};
use coursebot_core::gateway::Harness;
use coursebot_core::model::ActivityKind;
use coursebot_core::rate_limit::LimiterConfig;
use coursebot_core::sim::{generate_course, SimParams, INSTRUCTOR_ID};
use coursebot_core::store::{AttendanceRow, DataStore, RecordCategory, RecordSink, RecordType};
use coursebot_core::{GuildEvent, Timestamp, UserRef};

pub const ACTIVITY: &str = "w01-tutorial-wed";

pub fn opened_at() -> Timestamp {
    Utc.with_ymd_and_hms(2024, 10, 16, 14, 5, 0).unwrap()
}

pub fn category() -> RecordCategory {
    RecordCategory::new(ActivityKind::TutorialSession, ACTIVITY, RecordType::Attendance)
}

pub fn harness(students: u32, dir: &Path) -> Harness {
    let course = generate_course(&SimParams { weeks: 1, students, seed: 1 });
    let sink: Arc<dyn RecordSink> = Arc::new(DataStore::new(dir));
    let start = Utc.with_ymd_and_hms(2024, 10, 14, 0, 0, 0).unwrap();
    Harness::new(course, sink, LimiterConfig::default(), start).unwrap()
}

pub fn instructor() -> UserRef {
    UserRef::instructor(INSTRUCTOR_ID, "Instructor")
}

pub fn student(h: &Harness, i: u32) -> UserRef {
    h.guild().user(&format!("s{i:03}")).unwrap().clone()
}

#[derive(Debug, Clone)]
pub enum Submit {
    Right { padded: bool, upper: bool },
    Wrong,
}

/// Run one session and return the students who sent the right keyword.
pub fn run(h: &mut Harness, keyword: &str, plan: &[(u32, Submit)]) -> BTreeSet<String> {
    let t = opened_at();
    let start = GuildEvent::slash_command(t, &instructor(), "attendance-start", [("keyword", keyword), ("activity_id", ACTIVITY)]);
    assert!(!h.deliver(start).unwrap().is_rejected());
    let mut expected = BTreeSet::new();
    for (n, (i, submit)) in plan.iter().enumerate() {
        let s = student(h, *i);
        let text = match submit {
            Submit::Right { padded, upper } => {
                expected.insert(s.user_id.clone());
                let k = if *upper { keyword.to_uppercase() } else { keyword.to_string() };
                if *padded { format!("  {k}\n") } else { k }
            }
            Submit::Wrong => format!("{keyword}x"),
        };
        let at = t + TimeDelta::milliseconds(250 * (n as i64 + 1));
        h.deliver(GuildEvent::direct_message(at, &s, text)).unwrap();
    }
    let end = t + TimeDelta::minutes(50);
    let stop = GuildEvent::slash_command(end, &instructor(), "attendance-stop", [("activity_id", ACTIVITY)]);
    assert!(!h.deliver(stop).unwrap().is_rejected());
    h.settle().unwrap();
    expected
}

pub fn csv_rows(dir: &Path) -> Vec<AttendanceRow> {
    DataStore::new(dir)
        .load_records(&category())
        .unwrap()
        .iter()
        .map(|r| AttendanceRow::from_row(r).unwrap())
        .collect()
}

/// Parse the roster file and write it back through a fresh store; the bytes must match.
pub fn round_trip(dir: &Path) -> Result<(), String> {
    let original = fs::read(DataStore::new(dir).path_of(&category())).map_err(|e| e.to_string())?;
    let copy = tempfile::tempdir().unwrap();
    let store = DataStore::new(copy.path());
    for row in csv_rows(dir) {
        store.append_record(&category(), &row.to_row()).unwrap();
    }
    let rewritten = fs::read(store.path_of(&category())).map_err(|e| e.to_string())?;
    if rewritten != original {
        return Err("CSV round trip changed the bytes".into());
    }
    Ok(())
}

/// Run `plan` against a fresh course of `students` and check the roster.
/// Returns the number of roster rows.
pub fn check_plan(students: u32, plan: &[(u32, Submit)]) -> Result<usize, String> {
    let dir = tempfile::tempdir().unwrap();
    let mut h = harness(students, dir.path());
    let expected = run(&mut h, "g5", plan);
    let rows = csv_rows(dir.path());
    let ids: Vec<&str> = rows.iter().map(|r| r.student_id.as_str()).collect();
    let unique: BTreeSet<&str> = ids.iter().copied().collect();
    if unique.len() != ids.len() {
        return Err(format!("{} duplicate roster entries", ids.len() - unique.len()));
    }
    let expected: BTreeSet<&str> = expected.iter().map(String::as_str).collect();
    if let Some(extra) = unique.difference(&expected).next() {
        return Err(format!("{extra} is on the roster without sending the keyword"));
    }
    if let Some(missing) = expected.difference(&unique).next() {
        return Err(format!("{missing} sent the keyword but is not on the roster"));
    }
    let session = &h.bot().state.attendance.sessions()[0];
    if session.records.len() != rows.len() {
        return Err(format!("session holds {} records, CSV {}", session.records.len(), rows.len()));
    }
    if !rows.is_empty() {
        round_trip(dir.path())?;
    }
    Ok(rows.len())
}

/// Up to 137 students; about one in five submissions repeats a student and
/// one in seven carries a wrong keyword.
pub fn random_plan(rng: &mut impl rand::Rng) -> (u32, Vec<(u32, Submit)>) {
    let students = rng.random_range(1..=137);
    let len = rng.random_range(0..=2 * students as usize);
    let plan = (0..len)
        .map(|_| {
            let s = rng.random_range(1..=students);
            let submit = if rng.random_bool(1.0 / 7.0) {
                Submit::Wrong
            } else {
                Submit::Right { padded: rng.random_bool(0.3), upper: rng.random_bool(0.3) }
            };
            (s, submit)
        })
        .collect();
    (students, plan)
}
