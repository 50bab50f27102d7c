//! Keyword-gated attendance sessions.
//!
//! An instructor opens a session for a tutorial and announces a keyword on
//! site; students DM the keyword to the bot and are recorded at most once.
//! Stopping the session sends the roster to the instructor and appends one
//! CSV row per recorded student.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActivityKind, ActivityRef, OutboundAction, Timestamp, UserRef};
use crate::store::{AttendanceRow, RecordCategory, RecordSink, RecordType, StoreError};

pub const ANNOUNCE_CHANNEL: &str = "announcements";

#[derive(Debug, Error)]
pub enum AttendanceError {
    #[error("an attendance session is already open for `{0}`")]
    SessionAlreadyOpen(String),
    #[error("only instructors can manage attendance")]
    NotInstructor,
    #[error("the keyword must not be empty")]
    EmptyKeyword,
    #[error("no attendance session is open")]
    NoOpenSession,
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl AttendanceError {
    pub fn code(&self) -> &'static str {
        match self {
            AttendanceError::SessionAlreadyOpen(_) => "SESSION_ALREADY_OPEN",
            AttendanceError::NotInstructor => "NOT_INSTRUCTOR",
            AttendanceError::EmptyKeyword => "EMPTY_KEYWORD",
            AttendanceError::NoOpenSession => "NO_OPEN_SESSION",
            AttendanceError::Store(_) => "IO_FAILURE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttendanceRecord {
    pub student: UserRef,
    pub at: Timestamp,
    /// False when the sender is not on the course roster.
    pub enrolled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttendanceSession {
    pub session_id: String,
    pub course_id: String,
    pub activity: ActivityRef,
    pub keyword: String,
    pub state: SessionStatus,
    pub opened_by: UserRef,
    pub opened_at: Timestamp,
    pub closed_at: Option<Timestamp>,
    pub records: Vec<AttendanceRecord>,
}

impl AttendanceSession {
    pub fn is_open(&self) -> bool {
        self.state == SessionStatus::Open
    }

    pub fn has_student(&self, user_id: &str) -> bool {
        self.records.iter().any(|r| r.student.user_id == user_id)
    }

    pub fn rows(&self) -> Vec<AttendanceRow> {
        self.records
            .iter()
            .map(|r| AttendanceRow {
                session_id: self.session_id.clone(),
                course_id: self.course_id.clone(),
                activity_id: self.activity.id.clone(),
                timestamp: r.at,
                student_id: r.student.user_id.clone(),
                display_name: r.student.display_name.clone(),
            })
            .collect()
    }

    pub fn category(&self) -> RecordCategory {
        RecordCategory::new(self.activity.kind, &self.activity.id, RecordType::Attendance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    NoOpenSession,
    KeywordMismatch,
    AlreadyRecorded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Submission {
    Accepted { session_id: String },
    Rejected(RejectReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RosterSummary {
    pub session_id: String,
    pub activity_id: String,
    pub lines: Vec<String>,
    pub rows_written: usize,
    pub actions: Vec<OutboundAction>,
}

/// Trim and casefold, so " G5 " matches "g5".
pub fn normalize_keyword(text: &str) -> String {
    text.trim().to_lowercase()
}

/// Every attendance session of one course.
#[derive(Debug, Clone, Default)]
pub struct AttendanceBook {
    course_id: String,
    enrolled: BTreeSet<String>,
    sessions: Vec<AttendanceSession>,
}

impl AttendanceBook {
    pub fn new(course_id: impl Into<String>, roster: &[UserRef]) -> Self {
        Self {
            course_id: course_id.into(),
            enrolled: roster.iter().map(|u| u.user_id.clone()).collect(),
            sessions: Vec::new(),
        }
    }

    pub fn sessions(&self) -> &[AttendanceSession] {
        &self.sessions
    }

    pub fn session(&self, session_id: &str) -> Option<&AttendanceSession> {
        self.sessions.iter().find(|s| s.session_id == session_id)
    }

    pub fn open_session_for(&self, activity_id: &str) -> Option<&AttendanceSession> {
        self.sessions
            .iter()
            .find(|s| s.is_open() && s.activity.id == activity_id)
    }

    pub fn has_open(&self) -> bool {
        self.sessions.iter().any(AttendanceSession::is_open)
    }

    pub fn start_session(
        &mut self,
        instructor: &UserRef,
        activity: &ActivityRef,
        keyword: &str,
        now: Timestamp,
    ) -> Result<(&AttendanceSession, Vec<OutboundAction>), AttendanceError> {
        if !instructor.is_instructor() {
            return Err(AttendanceError::NotInstructor);
        }
        let keyword = normalize_keyword(keyword);
        if keyword.is_empty() {
            return Err(AttendanceError::EmptyKeyword);
        }
        if self.open_session_for(&activity.id).is_some() {
            return Err(AttendanceError::SessionAlreadyOpen(activity.id.clone()));
        }
        let n = self.sessions.iter().filter(|s| s.activity.id == activity.id).count() + 1;
        let session = AttendanceSession {
            session_id: format!("att-{}-{}", activity.id, n),
            course_id: self.course_id.clone(),
            activity: activity.clone(),
            keyword,
            state: SessionStatus::Open,
            opened_by: instructor.clone(),
            opened_at: now,
            closed_at: None,
            records: Vec::new(),
        };
        let actions = vec![
            OutboundAction::channel(
                ANNOUNCE_CHANNEL,
                format!(
                    "Attendance check for \"{}\" is open. Send me the keyword announced in the room as a direct message.",
                    activity.title
                ),
            ),
            OutboundAction::ephemeral(
                &instructor.user_id,
                format!("Attendance session {} opened for {}.", session.session_id, activity.id),
            ),
        ];
        self.sessions.push(session);
        Ok((self.sessions.last().expect("just pushed"), actions))
    }

    /// Match a DM against every open session.
    pub fn submit_keyword(&mut self, student: &UserRef, text: &str, now: Timestamp) -> (Submission, Vec<OutboundAction>) {
        if !self.has_open() {
            return (Submission::Rejected(RejectReason::NoOpenSession), Vec::new());
        }
        let keyword = normalize_keyword(text);
        let mut matched_but_recorded = false;
        for session in self.sessions.iter_mut().filter(|s| s.is_open() && s.keyword == keyword) {
            if session.has_student(&student.user_id) {
                matched_but_recorded = true;
                continue;
            }
            session.records.push(AttendanceRecord {
                student: student.clone(),
                at: now,
                enrolled: self.enrolled.contains(&student.user_id),
            });
            let reply = OutboundAction::dm(
                &student.user_id,
                format!("Thanks {}, you are on the attendance list for \"{}\".", student.display_name, session.activity.title),
            );
            return (
                Submission::Accepted {
                    session_id: session.session_id.clone(),
                },
                vec![reply],
            );
        }
        let (reason, text) = if matched_but_recorded {
            (RejectReason::AlreadyRecorded, "You are already on the attendance list.")
        } else {
            (RejectReason::KeywordMismatch, "That keyword does not match an open attendance check.")
        };
        (Submission::Rejected(reason), vec![OutboundAction::dm(&student.user_id, text)])
    }

    /// Close the session for `activity_id`, or the most recently opened one.
    pub fn stop_session(
        &mut self,
        instructor: &UserRef,
        activity_id: Option<&str>,
        now: Timestamp,
        sink: &dyn RecordSink,
    ) -> Result<RosterSummary, AttendanceError> {
        if !instructor.is_instructor() {
            return Err(AttendanceError::NotInstructor);
        }
        let idx = self
            .sessions
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_open() && activity_id.is_none_or(|a| s.activity.id == a))
            .max_by_key(|(i, s)| (s.opened_at, *i))
            .map(|(i, _)| i)
            .ok_or(AttendanceError::NoOpenSession)?;

        let session = &self.sessions[idx];
        let category = session.category();
        for row in session.rows() {
            sink.append_record(&category, &row.to_row())?;
        }
        let session = &mut self.sessions[idx];
        session.state = SessionStatus::Closed;
        session.closed_at = Some(now);

        let lines: Vec<String> = session
            .records
            .iter()
            .map(|r| {
                if r.enrolled {
                    r.student.display_name.clone()
                } else {
                    format!("{} (not enrolled)", r.student.display_name)
                }
            })
            .collect();
        let mut body = format!(
            "Attendance for \"{}\" ({}): {} student{}",
            session.activity.title,
            session.session_id,
            lines.len(),
            if lines.len() == 1 { "" } else { "s" }
        );
        if lines.is_empty() {
            body.push_str("\nNo students checked in.");
        }
        for line in &lines {
            body.push('\n');
            body.push_str(line);
        }
        Ok(RosterSummary {
            session_id: session.session_id.clone(),
            activity_id: session.activity.id.clone(),
            rows_written: lines.len(),
            lines,
            actions: vec![OutboundAction::dm(&instructor.user_id, body)],
        })
    }
}

/// A tutorial activity for an attendance check started outside the calendar.
pub fn ad_hoc_activity(now: Timestamp, n: usize) -> ActivityRef {
    ActivityRef {
        kind: ActivityKind::TutorialSession,
        id: format!("adhoc-{}-{}", now.format("%Y%m%d"), n),
        title: "Ad-hoc attendance check".into(),
        week: 1,
        window_start: now,
        window_end: now + chrono::TimeDelta::hours(2),
    }
}
