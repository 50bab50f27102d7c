//! Seeded semester simulation: generates a course calendar, drives the bot
//! through virtual time and synthesizes student and instructor behaviour.
//!
//! Agents only react to what crosses the gateway: a student clicks Accept
//! after an invitation DM appears in their thread, answers each question
//! message, and DMs the attendance keyword once the instructor has opened
//! the check (the keyword itself is announced on site, so the agent learns
//! it from the instructor agent rather than from the guild).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{TimeDelta, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bot::INSTRUCTOR_CHANNEL;
use crate::course::{CourseActivity, CourseData, Participant};
use crate::gateway::{GatewayError, Harness, Transcript};
use crate::model::{
    grade_band_of, ActivityKind, ActivityRef, DifficultyRating, GuildEvent, MessageId, OutboundAction,
    Timestamp, UserRef,
};
use crate::rate_limit::LimiterConfig;
use crate::scheduler::expand_activities;
use crate::store::{DataStore, GradeRecord, RecordSink, StoreError};
use crate::survey::{parse_component, Click, EXPECTED_GRADE_QUESTION};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SimError {
    pub fn code(&self) -> &'static str {
        match self {
            SimError::InvalidParams(_) => "INVALID_PARAMS",
            SimError::Gateway(e) => e.code(),
            SimError::Store(e) => e.code(),
            SimError::Io { .. } => "IO_FAILURE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimParams {
    pub weeks: u32,
    pub students: u32,
    pub seed: u64,
}

/// Knobs of the synthetic behaviour model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorModel {
    pub attendance_probability: f64,
    pub response_probability: f64,
    pub wrong_keyword_probability: f64,
    pub duplicate_keyword_probability: f64,
    pub question_dropout_probability: f64,
    pub very_hard_skips_grade_probability: f64,
    pub exam_participation_probability: f64,
    pub exercise_submission_probability: f64,
    pub ability_sd: f64,
    pub weekly_difficulty_sd: f64,
    pub perception_noise_sd: f64,
    pub grade_noise_sd: f64,
    pub expectation_noise_sd: f64,
}

impl Default for BehaviorModel {
    fn default() -> Self {
        Self {
            attendance_probability: 0.7,
            response_probability: 0.65,
            wrong_keyword_probability: 0.05,
            duplicate_keyword_probability: 0.05,
            question_dropout_probability: 0.02,
            very_hard_skips_grade_probability: 0.6,
            exam_participation_probability: 0.85,
            exercise_submission_probability: 0.9,
            ability_sd: 1.0,
            weekly_difficulty_sd: 0.7,
            perception_noise_sd: 0.7,
            grade_noise_sd: 8.0,
            expectation_noise_sd: 10.0,
        }
    }
}

impl BehaviorModel {
    fn kind_offset(kind: ActivityKind) -> f64 {
        match kind {
            ActivityKind::Lecture => 0.0,
            ActivityKind::Quiz => 0.2,
            ActivityKind::TutorialSession => -0.2,
            ActivityKind::Exercise => 0.3,
            ActivityKind::Exam => 0.6,
        }
    }

    pub fn header(&self, params: &SimParams) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# simulate weeks={} students={} seed={}",
            params.weeks, params.students, params.seed
        );
        let _ = writeln!(s, "# attendance probability        {:.2}", self.attendance_probability);
        let _ = writeln!(s, "# survey response probability   {:.2}", self.response_probability);
        let _ = writeln!(s, "# wrong keyword probability     {:.2}", self.wrong_keyword_probability);
        let _ = writeln!(s, "# duplicate keyword probability {:.2}", self.duplicate_keyword_probability);
        let _ = writeln!(s, "# question dropout probability  {:.2}", self.question_dropout_probability);
        let _ = writeln!(s, "# very-hard raters skip grade   {:.2}", self.very_hard_skips_grade_probability);
        let _ = writeln!(s, "# exam participation            {:.2}", self.exam_participation_probability);
        let _ = writeln!(s, "# exercise submission           {:.2}", self.exercise_submission_probability);
        let _ = writeln!(
            s,
            "# difficulty: latent = week ~ N(0, {:.2}) + kind offset - 0.5 * ability ~ N(0, {:.2}) + N(0, {:.2}), cut at -1.2/-0.4/0.4/1.2",
            self.weekly_difficulty_sd, self.ability_sd, self.perception_noise_sd
        );
        let _ = writeln!(
            s,
            "# grade: 62 + 14 * ability - 6 * week difficulty + N(0, {:.1}), clamped to [0, 100]; expected band from grade + N(0, {:.1})",
            self.grade_noise_sd, self.expectation_noise_sd
        );
        s
    }
}

/// Monday of week 1.
pub fn epoch() -> Timestamp {
    Utc.with_ymd_and_hms(2024, 10, 14, 0, 0, 0).unwrap()
}

fn at(week: u32, day: i64, hour: i64) -> Timestamp {
    epoch() + TimeDelta::days(7 * i64::from(week - 1) + day) + TimeDelta::hours(hour)
}

pub fn exam_week(weeks: u32) -> Option<u32> {
    (weeks >= 2).then(|| weeks.div_ceil(2))
}

pub const INSTRUCTOR_ID: &str = "i01";

/// Calendar: lecture Tuesday 10-12, tutorials Wednesday and Thursday 14-16,
/// an exercise due the following Monday 09:00, and a mid-term exam on the
/// Friday of the middle week.
pub fn generate_course(params: &SimParams) -> CourseData {
    let mut course = CourseData::empty(format!("sim-{}", params.seed));
    course.students = (1..=params.students)
        .map(|i| Participant {
            user_id: format!("s{i:03}"),
            display_name: format!("Student {i:03}"),
        })
        .collect();
    course.instructors = vec![Participant {
        user_id: INSTRUCTOR_ID.into(),
        display_name: "Instructor".into(),
    }];
    let activity = |kind, id: String, title: String, week, start, end| CourseActivity {
        activity: ActivityRef {
            kind,
            id,
            title,
            week,
            window_start: start,
            window_end: end,
        },
        preview_text: None,
        deadline: None,
    };
    for w in 1..=params.weeks {
        let mut lecture = activity(
            ActivityKind::Lecture,
            format!("w{w:02}-lecture"),
            format!("Lecture {w}"),
            w,
            at(w, 1, 10),
            at(w, 1, 12),
        );
        lecture.preview_text = Some(format!("Topic {w}: slides and reading list are online."));
        course.activities.push(lecture);
        for (day, name) in [(2, "wed"), (3, "thu")] {
            course.activities.push(activity(
                ActivityKind::TutorialSession,
                format!("w{w:02}-tutorial-{name}"),
                format!("Tutorial {w} ({name})"),
                w,
                at(w, day, 14),
                at(w, day, 16),
            ));
        }
        let mut exercise = activity(
            ActivityKind::Exercise,
            format!("w{w:02}-exercise"),
            format!("Exercise {w}"),
            w,
            at(w, 1, 12),
            at(w, 7, 9),
        );
        exercise.deadline = Some(at(w, 7, 9));
        course.activities.push(exercise);
        if exam_week(params.weeks) == Some(w) {
            course.activities.push(activity(
                ActivityKind::Exam,
                "exam-midterm".into(),
                "Mid-term exam".into(),
                w,
                at(w, 4, 10),
                at(w, 4, 12),
            ));
        }
    }
    course
}

/// Counts of what the bot recorded during the run, from its change log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimCounts {
    pub attendance_recorded: u64,
    pub survey_answers: u64,
    pub surveys_completed: u64,
    pub surveys_launched: u64,
    pub triggers_fired: u64,
}

pub struct SimOutcome {
    pub course: CourseData,
    pub grades: Vec<GradeRecord>,
    pub transcript: Transcript,
    pub counts: SimCounts,
    pub header: String,
}

struct Student {
    user: UserRef,
    ability: f64,
    responsiveness: f64,
    group_wed: bool,
}

struct World<'a> {
    model: &'a BehaviorModel,
    rng: ChaCha8Rng,
    students: BTreeMap<String, Student>,
    activities: BTreeMap<String, ActivityRef>,
    weekly: Vec<f64>,
    grades: BTreeMap<(String, String), f64>,
    difficulty_answers: BTreeMap<(String, String), DifficultyRating>,
    agenda: BTreeMap<(Timestamp, u64), GuildEvent>,
    next_seq: u64,
    instructor: UserRef,
}

impl World<'_> {
    fn schedule(&mut self, event: GuildEvent) {
        self.next_seq += 1;
        self.agenda.insert((event.at, self.next_seq), event);
    }

    fn uniform_secs(&mut self, lo: i64, hi: i64) -> TimeDelta {
        TimeDelta::seconds(self.rng.random_range(lo..=hi))
    }

    fn normal(&mut self, sd: f64) -> f64 {
        Normal::new(0.0, sd).expect("sd is positive").sample(&mut self.rng)
    }

    fn perceived(&mut self, student: &str, activity: &ActivityRef) -> DifficultyRating {
        let ability = self.students[student].ability;
        let week = self.weekly[(activity.week - 1) as usize];
        let latent = week + BehaviorModel::kind_offset(activity.kind) - 0.5 * ability + self.normal(self.model.perception_noise_sd);
        let level = match latent {
            x if x < -1.2 => 1,
            x if x < -0.4 => 2,
            x if x < 0.4 => 3,
            x if x < 1.2 => 4,
            _ => 5,
        };
        DifficultyRating::from_ordinal(level).expect("1..=5")
    }

    fn expected_band(&mut self, student: &str, activity: &ActivityRef) -> String {
        let grade = match self.grades.get(&(student.to_string(), activity.id.clone())) {
            Some(g) => *g,
            None => 62.0 + 14.0 * self.students[student].ability,
        };
        let guess = (grade + self.normal(self.model.expectation_noise_sd)).clamp(0.0, 100.0);
        grade_band_of(guess).expect("clamped").code().to_string()
    }

    /// React to one bot message in a student's DM thread.
    fn on_dm(&mut self, to: &str, message_id: MessageId, components: &[crate::model::Button], now: Timestamp) {
        if !self.students.contains_key(to) || components.is_empty() {
            return;
        }
        let Some((survey_id, click)) = parse_component(&components[0].component_id) else { return };
        let Some(activity) = self.activities.get(survey_id).cloned() else { return };
        let user = self.students[to].user.clone();
        match click {
            Click::Accept => {
                let p = self.students[to].responsiveness;
                if self.rng.random_bool(p) {
                    let delay = self.uniform_secs(60, 48 * 3600);
                    self.schedule(GuildEvent::button_click(
                        now + delay,
                        &user,
                        message_id,
                        components[0].component_id.clone(),
                    ));
                }
            }
            Click::Answer { question_id, .. } => {
                if self.rng.random_bool(self.model.question_dropout_probability) {
                    return;
                }
                let code = if question_id == EXPECTED_GRADE_QUESTION {
                    let rated_very_hard = self.difficulty_answers.get(&(to.to_string(), survey_id.to_string()))
                        == Some(&DifficultyRating::VeryHard);
                    if rated_very_hard && self.rng.random_bool(self.model.very_hard_skips_grade_probability) {
                        return;
                    }
                    self.expected_band(to, &activity)
                } else {
                    let rating = self.perceived(to, &activity);
                    self.difficulty_answers.insert((to.to_string(), survey_id.to_string()), rating);
                    rating.code().to_string()
                };
                let Some(button) = components.iter().find(|b| b.component_id.ends_with(&format!("/{code}"))) else {
                    return;
                };
                let delay = self.uniform_secs(5, 120);
                self.schedule(GuildEvent::button_click(now + delay, &user, message_id, button.component_id.clone()));
            }
        }
    }

    /// The instructor opens the check a few minutes into the tutorial and closes it after a quarter hour.
    fn on_attendance_prompt(&mut self, body: &str, now: Timestamp) {
        let Some(activity_id) = body.split("activity_id:").nth(1).map(|s| s.trim().to_string()) else { return };
        let Some(activity) = self.activities.get(&activity_id).cloned() else { return };
        let keyword = format!("k{}", self.rng.random_range(100..1000));
        let opened = now + TimeDelta::minutes(2);
        let closed = opened + TimeDelta::minutes(15);
        let instructor = self.instructor.clone();
        self.schedule(GuildEvent::slash_command(
            opened,
            &instructor,
            "attendance-start",
            [("keyword", keyword.as_str()), ("activity_id", activity_id.as_str())],
        ));
        self.schedule(GuildEvent::slash_command(closed, &instructor, "attendance-stop", [("activity_id", activity_id.as_str())]));

        let wed = activity.id.ends_with("-wed");
        let ids: Vec<String> = self.students.keys().cloned().collect();
        for id in ids {
            if self.students[&id].group_wed != wed || !self.rng.random_bool(self.model.attendance_probability) {
                continue;
            }
            let user = self.students[&id].user.clone();
            let mut t = opened + self.uniform_secs(20, 10 * 60);
            if self.rng.random_bool(self.model.wrong_keyword_probability) {
                self.schedule(GuildEvent::direct_message(t, &user, "g5?"));
                t += self.uniform_secs(10, 60);
            }
            let variant = if self.rng.random_bool(0.2) {
                format!(" {} ", keyword.to_uppercase())
            } else {
                keyword.clone()
            };
            self.schedule(GuildEvent::direct_message(t, &user, variant));
            if self.rng.random_bool(self.model.duplicate_keyword_probability) {
                let again = t + self.uniform_secs(5, 90);
                self.schedule(GuildEvent::direct_message(again, &user, keyword.clone()));
            }
        }
    }
}

pub fn validate_params(params: &SimParams) -> Result<(), SimError> {
    if params.weeks == 0 {
        return Err(SimError::InvalidParams("weeks must be >= 1".into()));
    }
    if params.students == 0 {
        return Err(SimError::InvalidParams("students must be >= 1".into()));
    }
    if params.students > 999 {
        return Err(SimError::InvalidParams("students must be <= 999".into()));
    }
    Ok(())
}

/// Run the semester against `sink`.
pub fn simulate(params: &SimParams, model: &BehaviorModel, sink: Arc<dyn RecordSink>) -> Result<SimOutcome, SimError> {
    validate_params(params)?;
    let course = generate_course(params);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let ability = Normal::new(0.0, model.ability_sd).expect("sd is positive");
    let week_dist = Normal::new(0.0, model.weekly_difficulty_sd).expect("sd is positive");
    let responsiveness = Normal::new(model.response_probability, 0.15).expect("sd is positive");
    let weekly: Vec<f64> = (0..params.weeks).map(|_| week_dist.sample(&mut rng)).collect();
    let students: BTreeMap<String, Student> = course
        .student_refs()
        .into_iter()
        .enumerate()
        .map(|(i, user)| {
            let s = Student {
                ability: ability.sample(&mut rng),
                responsiveness: responsiveness.sample(&mut rng).clamp(0.05, 0.98),
                group_wed: i % 2 == 0,
                user,
            };
            (s.user.user_id.clone(), s)
        })
        .collect();
    let activities: BTreeMap<String, ActivityRef> = expand_activities(&course).into_iter().map(|a| (a.id.clone(), a)).collect();

    let mut grades = BTreeMap::new();
    for a in activities.values() {
        let p = match a.kind {
            ActivityKind::Exam => model.exam_participation_probability,
            ActivityKind::Exercise => model.exercise_submission_probability,
            _ => continue,
        };
        for (id, s) in &students {
            if !rng.random_bool(p) {
                continue;
            }
            let noise = Normal::new(0.0, model.grade_noise_sd).expect("sd is positive").sample(&mut rng);
            let g = (62.0 + 14.0 * s.ability - 6.0 * weekly[(a.week - 1) as usize] + noise).clamp(0.0, 100.0);
            grades.insert((id.clone(), a.id.clone()), (g * 10.0).round() / 10.0);
        }
    }

    let mut harness = Harness::new(course.clone(), sink, LimiterConfig::default(), epoch())?;
    let instructor = harness
        .guild()
        .user(INSTRUCTOR_ID)
        .cloned()
        .expect("generated course has an instructor");
    let mut world = World {
        model,
        rng,
        students,
        activities,
        weekly,
        grades,
        difficulty_answers: BTreeMap::new(),
        agenda: BTreeMap::new(),
        next_seq: 0,
        instructor,
    };

    let mut cursor = 0usize;
    loop {
        let next_event = world.agenda.keys().next().map(|(t, _)| *t);
        let next_wake = harness.next_wakeup();
        match (next_event, next_wake) {
            (None, None) => break,
            (Some(e), w) if w.is_none_or(|w| e < w) => {
                let key = *world.agenda.keys().next().expect("non-empty");
                let event = world.agenda.remove(&key).expect("present");
                harness.deliver(event)?;
            }
            (_, Some(w)) => harness.advance_to(w)?,
            (Some(_), None) => unreachable!("covered by the guarded arm"),
        }
        let entries = &harness.transcript().entries()[cursor..];
        cursor += entries.len();
        let fresh: Vec<(Timestamp, OutboundAction, Option<MessageId>)> = entries
            .iter()
            .filter_map(|e| Some((e.at, e.action.clone()?, e.message_id)))
            .collect();
        for (now, action, message_id) in fresh {
            match action {
                OutboundAction::SendDm { to, components, .. } => {
                    if let Some(id) = message_id {
                        world.on_dm(&to, id, &components, now);
                    }
                }
                OutboundAction::SendChannel { channel, body, .. } if channel == INSTRUCTOR_CHANNEL => {
                    world.on_attendance_prompt(&body, now);
                }
                _ => {}
            }
        }
    }

    let mut counts = SimCounts::default();
    for c in harness.bot().state.changes.since(0) {
        match c.kind.as_str() {
            "attendance_recorded" => counts.attendance_recorded += 1,
            "survey_answer" => counts.survey_answers += 1,
            "survey_completed" => counts.surveys_completed += 1,
            "survey_launched" => counts.surveys_launched += 1,
            "trigger_fired" => counts.triggers_fired += 1,
            _ => {}
        }
    }
    let grades = world
        .grades
        .into_iter()
        .map(|((student_id, activity_id), grade)| GradeRecord {
            student_id,
            activity_id,
            grade,
        })
        .collect();
    Ok(SimOutcome {
        course,
        grades,
        transcript: harness.transcript().clone(),
        counts,
        header: model.header(params),
    })
}

pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";

/// Run the semester into a data directory: records, `course.json`,
/// `grades.csv` and the gateway transcript.
pub fn simulate_to_dir(params: &SimParams, model: &BehaviorModel, out: &Path) -> Result<SimOutcome, SimError> {
    validate_params(params)?;
    fs::create_dir_all(out).map_err(|source| SimError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let store = Arc::new(DataStore::new(out));
    let outcome = simulate(params, model, store.clone())?;
    let write = |path: PathBuf, text: String| {
        fs::write(&path, text).map_err(|source| SimError::Io { path, source })
    };
    write(store.course_path(), outcome.course.to_json() + "\n")?;
    store.write_grades(&outcome.grades)?;
    write(out.join(TRANSCRIPT_FILE), outcome.transcript.to_jsonl())?;
    Ok(outcome)
}
