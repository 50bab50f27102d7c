//! Weekly automation: derives timed triggers from the course calendar and
//! fires each one exactly once.
//!
//! Derived trigger times:
//!
//! | activity  | trigger       | at                                |
//! |-----------|---------------|-----------------------------------|
//! | lecture   | invite        | window start                      |
//! | lecture   | quiz_survey   | window start + 30 min             |
//! | lecture   | survey        | window end                        |
//! | tutorial  | attendance    | window start                      |
//! | tutorial  | survey        | window end                        |
//! | exercise  | survey        | deadline (or window end) + 1 h    |
//! | exam/quiz | survey        | window end                        |
//!
//! Every lecture carries an in-class quiz, surveyed as activity
//! `{lecture_id}-quiz` unless the calendar declares that id itself.

use std::collections::BTreeSet;

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::course::{CourseData, TriggerSlot};
use crate::model::{ActivityKind, ActivityRef, Timestamp};
use crate::store::{RecordSink, StoreError};

pub const QUIZ_SURVEY_OFFSET_MINUTES: i64 = 30;
pub const EXERCISE_SURVEY_OFFSET_MINUTES: i64 = 60;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("schedule override references unknown activity `{0}`")]
    DanglingActivity(String),
    #[error("activity `{activity_id}` has no `{slot}` trigger to override")]
    SlotNotApplicable { activity_id: String, slot: &'static str },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl SchedulerError {
    pub fn code(&self) -> &'static str {
        match self {
            SchedulerError::DanglingActivity(_) => "DANGLING_ACTIVITY",
            SchedulerError::SlotNotApplicable { .. } => "SCHEMA_INVALID",
            SchedulerError::Store(_) => "IO_FAILURE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TriggerAction {
    LectureInvite {
        activity: ActivityRef,
        preview_text: Option<String>,
    },
    LaunchSurvey {
        activity: ActivityRef,
    },
    AttendancePrompt {
        activity: ActivityRef,
    },
}

impl TriggerAction {
    pub fn activity(&self) -> &ActivityRef {
        match self {
            TriggerAction::LectureInvite { activity, .. }
            | TriggerAction::LaunchSurvey { activity }
            | TriggerAction::AttendancePrompt { activity } => activity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trigger {
    pub trigger_id: String,
    pub at: Timestamp,
    pub action: TriggerAction,
    pub fired: bool,
}

fn derived_quiz(lecture: &ActivityRef) -> ActivityRef {
    ActivityRef {
        kind: ActivityKind::Quiz,
        id: format!("{}-quiz", lecture.id),
        title: format!("{} quiz", lecture.title),
        week: lecture.week,
        window_start: lecture.window_start,
        window_end: lecture.window_start + TimeDelta::minutes(QUIZ_SURVEY_OFFSET_MINUTES),
    }
}

/// Course activities plus the quiz derived from every lecture.
pub fn expand_activities(course: &CourseData) -> Vec<ActivityRef> {
    let declared: BTreeSet<&str> = course.activities.iter().map(|a| a.activity.id.as_str()).collect();
    let mut out = Vec::new();
    for a in &course.activities {
        out.push(a.activity.clone());
        if a.activity.kind == ActivityKind::Lecture {
            let quiz = derived_quiz(&a.activity);
            if !declared.contains(quiz.id.as_str()) {
                out.push(quiz);
            }
        }
    }
    out
}

/// Owns the trigger list; `tick` fires everything due.
#[derive(Debug, Clone, Default)]
pub struct Scheduler {
    // Sorted by `at`; ties keep calendar declaration order.
    triggers: Vec<Trigger>,
}

impl Scheduler {
    pub fn load_calendar(course: &CourseData) -> Result<Self, SchedulerError> {
        let declared: BTreeSet<&str> = course.activities.iter().map(|a| a.activity.id.as_str()).collect();
        let mut triggers = Vec::new();
        for a in &course.activities {
            let act = &a.activity;
            let slot = |slot: TriggerSlot, at: Timestamp, action: TriggerAction| Trigger {
                trigger_id: format!("{}/{}", act.id, slot.code()),
                at,
                action,
                fired: false,
            };
            match act.kind {
                ActivityKind::Lecture => {
                    triggers.push(slot(
                        TriggerSlot::Invite,
                        act.window_start,
                        TriggerAction::LectureInvite {
                            activity: act.clone(),
                            preview_text: a.preview_text.clone(),
                        },
                    ));
                    let quiz = derived_quiz(act);
                    if !declared.contains(quiz.id.as_str()) {
                        triggers.push(slot(
                            TriggerSlot::QuizSurvey,
                            quiz.window_end,
                            TriggerAction::LaunchSurvey { activity: quiz },
                        ));
                    }
                    triggers.push(slot(
                        TriggerSlot::Survey,
                        act.window_end,
                        TriggerAction::LaunchSurvey { activity: act.clone() },
                    ));
                }
                ActivityKind::TutorialSession => {
                    triggers.push(slot(
                        TriggerSlot::Attendance,
                        act.window_start,
                        TriggerAction::AttendancePrompt { activity: act.clone() },
                    ));
                    triggers.push(slot(
                        TriggerSlot::Survey,
                        act.window_end,
                        TriggerAction::LaunchSurvey { activity: act.clone() },
                    ));
                }
                ActivityKind::Exercise => {
                    let due = a.deadline.unwrap_or(act.window_end);
                    triggers.push(slot(
                        TriggerSlot::Survey,
                        due + TimeDelta::minutes(EXERCISE_SURVEY_OFFSET_MINUTES),
                        TriggerAction::LaunchSurvey { activity: act.clone() },
                    ));
                }
                ActivityKind::Exam | ActivityKind::Quiz => {
                    triggers.push(slot(
                        TriggerSlot::Survey,
                        act.window_end,
                        TriggerAction::LaunchSurvey { activity: act.clone() },
                    ));
                }
            }
        }
        for o in &course.schedule_overrides {
            if !declared.contains(o.activity_id.as_str()) {
                return Err(SchedulerError::DanglingActivity(o.activity_id.clone()));
            }
            let id = format!("{}/{}", o.activity_id, o.trigger.code());
            let trigger = triggers
                .iter_mut()
                .find(|t| t.trigger_id == id)
                .ok_or_else(|| SchedulerError::SlotNotApplicable {
                    activity_id: o.activity_id.clone(),
                    slot: o.trigger.code(),
                })?;
            trigger.at = o.at;
        }
        // Stable sort keeps declaration order among equal times.
        triggers.sort_by_key(|t| t.at);
        Ok(Self { triggers })
    }

    pub fn triggers(&self) -> &[Trigger] {
        &self.triggers
    }

    pub fn pending(&self) -> impl Iterator<Item = &Trigger> {
        self.triggers.iter().filter(|t| !t.fired)
    }

    pub fn next_due(&self) -> Option<Timestamp> {
        self.pending().map(|t| t.at).min()
    }

    /// Mark triggers fired in a previous run.
    pub fn resume<'a>(&mut self, fired: impl IntoIterator<Item = &'a str>) {
        let fired: BTreeSet<&str> = fired.into_iter().collect();
        for t in &mut self.triggers {
            if fired.contains(t.trigger_id.as_str()) {
                t.fired = true;
            }
        }
    }

    /// Mark unfired triggers due before `t` as fired without running or
    /// persisting them. Used when a service starts mid-semester.
    pub fn skip_before(&mut self, t: Timestamp) -> usize {
        let mut skipped = 0;
        for trigger in self.triggers.iter_mut().filter(|tr| !tr.fired && tr.at < t) {
            trigger.fired = true;
            skipped += 1;
        }
        skipped
    }

    /// Fire every due trigger in time order. The fired flag is persisted
    /// before the trigger is returned, so a crash between persisting and
    /// acting loses the action rather than repeating it.
    pub fn tick(&mut self, now: Timestamp, sink: &dyn RecordSink) -> Result<Vec<Trigger>, SchedulerError> {
        let mut due: Vec<usize> = (0..self.triggers.len())
            .filter(|&i| !self.triggers[i].fired && self.triggers[i].at <= now)
            .collect();
        due.sort_by_key(|&i| (self.triggers[i].at, i));
        let mut fired = Vec::with_capacity(due.len());
        for i in due {
            sink.record_fired(&self.triggers[i].trigger_id, now)?;
            self.triggers[i].fired = true;
            fired.push(self.triggers[i].clone());
        }
        Ok(fired)
    }
}
