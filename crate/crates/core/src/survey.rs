//! Activity-feedback surveys driven through direct messages with buttons.
//!
//! A student is invited with an Accept button; accepting sends the first
//! question, and every option click records the answer, disables the buttons
//! of the answered message and sends either the next question or the closing
//! thank-you. Answers are immutable once clicked.

use std::collections::BTreeMap;

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{format_tenths, percent_tenths};
use crate::model::{
    ActivityKind, ActivityRef, Button, DifficultyRating, Embed, EmbedField, GradeBand, MessageId,
    OutboundAction, Timestamp, UserRef,
};
use crate::store::{CsvRow, RecordCategory, RecordSink, RecordType, StoreError, SurveyAnswerRow};

pub const COMPONENT_PREFIX: &str = "survey/";
const MAX_CUSTOM_OPTIONS: usize = 10;

#[derive(Debug, Error)]
pub enum SurveyError {
    #[error("survey `{0}` was already launched")]
    AlreadyLaunched(String),
    #[error("cannot launch a survey to an empty roster")]
    EmptyRoster,
    #[error("unknown survey `{0}`")]
    UnknownSurvey(String),
    #[error("this question has already been answered")]
    AlreadyAnswered,
    #[error("this survey invitation has expired")]
    StaleSession,
    #[error("this message is not one of your survey messages")]
    ForeignMessage,
    #[error("unrecognized survey component `{0}`")]
    UnknownComponent(String),
    #[error("invalid survey definition: {0}")]
    InvalidDefinition(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl SurveyError {
    pub fn code(&self) -> &'static str {
        match self {
            SurveyError::AlreadyLaunched(_) => "ALREADY_LAUNCHED",
            SurveyError::EmptyRoster => "EMPTY_ROSTER",
            SurveyError::UnknownSurvey(_) => "UNKNOWN_SURVEY",
            SurveyError::AlreadyAnswered => "ALREADY_ANSWERED",
            SurveyError::StaleSession => "STALE_SESSION",
            SurveyError::ForeignMessage => "FOREIGN_MESSAGE",
            SurveyError::UnknownComponent(_) => "UNKNOWN_COMPONENT",
            SurveyError::InvalidDefinition(_) => "INVALID_DEFINITION",
            SurveyError::Store(_) => "IO_FAILURE",
        }
    }
}

/// The answer scale a question offers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OptionSet {
    DifficultyScale,
    GradeBands,
    Custom(Vec<String>),
}

impl OptionSet {
    /// Canonical answer codes in scale order.
    pub fn codes(&self) -> Vec<String> {
        match self {
            OptionSet::DifficultyScale => DifficultyRating::ALL.iter().map(|d| d.code().to_string()).collect(),
            OptionSet::GradeBands => GradeBand::ALL.iter().map(|b| b.code().to_string()).collect(),
            OptionSet::Custom(labels) => labels.clone(),
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            OptionSet::DifficultyScale => DifficultyRating::ALL.iter().map(|d| d.label().to_string()).collect(),
            OptionSet::GradeBands => GradeBand::ALL.iter().map(|b| b.label().to_string()).collect(),
            OptionSet::Custom(labels) => labels.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), SurveyError> {
        if let OptionSet::Custom(labels) = self {
            if !(2..=MAX_CUSTOM_OPTIONS).contains(&labels.len()) {
                return Err(SurveyError::InvalidDefinition(format!(
                    "custom questions need 2 to {MAX_CUSTOM_OPTIONS} options, got {}",
                    labels.len()
                )));
            }
            let mut sorted: Vec<&String> = labels.iter().collect();
            sorted.sort();
            if sorted.windows(2).any(|w| w[0] == w[1]) || labels.iter().any(|l| l.trim().is_empty()) {
                return Err(SurveyError::InvalidDefinition(
                    "custom options must be distinct and non-empty".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub question_id: String,
    pub prompt: String,
    pub options: OptionSet,
}

pub type Question = QuestionSpec;

/// Questions asked for every activity of one kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyTemplate {
    pub activity_kind: ActivityKind,
    pub questions: Vec<Question>,
}

pub const DIFFICULTY_QUESTION: &str = "difficulty";
pub const EXPECTED_GRADE_QUESTION: &str = "expected_grade";

/// Built-in template: one difficulty question, plus an expected-grade
/// question for exams.
pub fn default_template(kind: ActivityKind) -> SurveyTemplate {
    let difficulty_prompt = match kind {
        ActivityKind::Lecture => "How difficult was the content of this lecture?",
        ActivityKind::Quiz => "How difficult was today's quiz?",
        ActivityKind::Exercise => "How difficult was this week's exercise?",
        ActivityKind::Exam => "How difficult was the exam?",
        ActivityKind::TutorialSession => "How difficult was the tutorial session?",
    };
    let mut questions = vec![Question {
        question_id: DIFFICULTY_QUESTION.into(),
        prompt: difficulty_prompt.into(),
        options: OptionSet::DifficultyScale,
    }];
    if kind == ActivityKind::Exam {
        questions.push(Question {
            question_id: EXPECTED_GRADE_QUESTION.into(),
            prompt: "Which grade range do you expect?".into(),
            options: OptionSet::GradeBands,
        });
    }
    SurveyTemplate {
        activity_kind: kind,
        questions,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyDefinition {
    pub survey_id: String,
    pub activity: ActivityRef,
    pub questions: Vec<Question>,
}

impl SurveyDefinition {
    pub fn new(
        survey_id: impl Into<String>,
        activity: ActivityRef,
        questions: Vec<Question>,
    ) -> Result<Self, SurveyError> {
        let def = Self {
            survey_id: survey_id.into(),
            activity,
            questions,
        };
        def.validate()?;
        Ok(def)
    }

    /// The survey for `activity` built from `template`; its id is the activity id.
    pub fn from_template(template: &SurveyTemplate, activity: &ActivityRef) -> Result<Self, SurveyError> {
        Self::new(activity.id.clone(), activity.clone(), template.questions.clone())
    }

    pub fn validate(&self) -> Result<(), SurveyError> {
        let bad = |m: String| Err(SurveyError::InvalidDefinition(m));
        if self.survey_id.is_empty() || self.survey_id.contains('/') {
            return bad(format!("survey id `{}` must be non-empty without '/'", self.survey_id));
        }
        if self.questions.is_empty() {
            return bad("a survey needs at least one question".into());
        }
        let mut ids: Vec<&str> = Vec::new();
        for q in &self.questions {
            if q.question_id.is_empty() || q.question_id.contains('/') {
                return bad(format!("question id `{}` must be non-empty without '/'", q.question_id));
            }
            if ids.contains(&q.question_id.as_str()) {
                return bad(format!("duplicate question id `{}`", q.question_id));
            }
            ids.push(&q.question_id);
            q.options.validate()?;
        }
        Ok(())
    }

    pub fn question_index(&self, question_id: &str) -> Option<usize> {
        self.questions.iter().position(|q| q.question_id == question_id)
    }

    pub fn category(&self) -> RecordCategory {
        RecordCategory::new(self.activity.kind, self.activity.id.clone(), RecordType::SurveyAnswer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Invited,
    Answering { question: usize },
    Completed,
    Expired,
}

/// One student's pass through one survey.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveySession {
    pub survey_id: String,
    pub student: UserRef,
    pub state: SessionState,
    pub answers: BTreeMap<String, String>,
    pub message_ids: BTreeMap<String, MessageId>,
    pub invited_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionCount {
    pub code: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub question_id: String,
    pub prompt: String,
    pub counts: Vec<OptionCount>,
}

impl QuestionResult {
    pub fn answered(&self) -> u64 {
        self.counts.iter().map(|c| c.count).sum()
    }

    pub fn count_of(&self, code: &str) -> u64 {
        self.counts.iter().find(|c| c.code == code).map_or(0, |c| c.count)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResults {
    pub survey_id: String,
    pub questions: Vec<QuestionResult>,
    /// Sessions that answered every question.
    pub respondents: u64,
}

impl SurveyResults {
    fn tally<'a>(def: &SurveyDefinition, answers: impl Iterator<Item = &'a BTreeMap<String, String>>) -> Self {
        let mut questions: Vec<QuestionResult> = def
            .questions
            .iter()
            .map(|q| QuestionResult {
                question_id: q.question_id.clone(),
                prompt: q.prompt.clone(),
                counts: q
                    .options
                    .codes()
                    .into_iter()
                    .map(|code| OptionCount { code, count: 0 })
                    .collect(),
            })
            .collect();
        let mut respondents = 0;
        for per_student in answers {
            for (i, q) in def.questions.iter().enumerate() {
                if let Some(code) = per_student.get(&q.question_id) {
                    if let Some(c) = questions[i].counts.iter_mut().find(|c| &c.code == code) {
                        c.count += 1;
                    }
                }
            }
            if def.questions.iter().all(|q| per_student.contains_key(&q.question_id)) {
                respondents += 1;
            }
        }
        SurveyResults {
            survey_id: def.survey_id.clone(),
            questions,
            respondents,
        }
    }

    /// Rebuild results from stored answer rows of this survey.
    pub fn from_rows(def: &SurveyDefinition, rows: &[CsvRow]) -> Result<Self, StoreError> {
        let mut per_student: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for row in rows {
            let r = SurveyAnswerRow::from_row(row)?;
            if r.survey_id != def.survey_id {
                continue;
            }
            per_student
                .entry(r.student_id)
                .or_default()
                .entry(r.question_id)
                .or_insert(r.answer_code);
        }
        Ok(Self::tally(def, per_student.values()))
    }
}

const EMBED_COLOR: u32 = 0x5865F2;

/// Instructor summary: one field per question, one line per option in scale
/// order with its count and share of that question's answers.
pub fn render_results_embed(results: &SurveyResults) -> Embed {
    let title = format!("Survey results: {}", results.survey_id);
    if results.questions.iter().all(|q| q.answered() == 0) {
        return Embed {
            title,
            color: EMBED_COLOR,
            fields: vec![EmbedField {
                name: "Responses".into(),
                value: "no responses".into(),
            }],
        };
    }
    let fields = results
        .questions
        .iter()
        .map(|q| {
            let total = q.answered();
            let value = q
                .counts
                .iter()
                .map(|c| format!("{} {} ({} %)", c.code, c.count, format_tenths(percent_tenths(c.count, total))))
                .collect::<Vec<_>>()
                .join("\n");
            EmbedField {
                name: q.prompt.clone(),
                value,
            }
        })
        .collect();
    Embed {
        title,
        color: EMBED_COLOR,
        fields,
    }
}

/// What a survey button does.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Click {
    Accept,
    Answer { question_id: String, code: String },
}

pub fn accept_component(survey_id: &str) -> String {
    format!("{COMPONENT_PREFIX}{survey_id}/accept")
}

pub fn answer_component(survey_id: &str, question_id: &str, code: &str) -> String {
    format!("{COMPONENT_PREFIX}{survey_id}/{question_id}/{code}")
}

pub fn parse_component(component_id: &str) -> Option<(&str, Click)> {
    let rest = component_id.strip_prefix(COMPONENT_PREFIX)?;
    let mut parts = rest.splitn(3, '/');
    let survey_id = parts.next().filter(|s| !s.is_empty())?;
    match (parts.next()?, parts.next()) {
        ("accept", None) => Some((survey_id, Click::Accept)),
        (question_id, Some(code)) if !question_id.is_empty() && !code.is_empty() => Some((
            survey_id,
            Click::Answer {
                question_id: question_id.to_string(),
                code: code.to_string(),
            },
        )),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Launch {
    pub invited: usize,
    pub actions: Vec<OutboundAction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ButtonOutcome {
    pub actions: Vec<OutboundAction>,
    pub survey_id: String,
    /// `(question_id, answer_code)` when the click recorded an answer.
    pub recorded: Option<(String, String)>,
    pub completed: bool,
}

pub const DEFAULT_EXPIRY_DAYS: i64 = 7;

/// Owns survey definitions and every student's session.
#[derive(Debug)]
pub struct SurveyEngine {
    definitions: BTreeMap<String, SurveyDefinition>,
    sessions: BTreeMap<(String, String), SurveySession>,
    expiry: TimeDelta,
}

impl Default for SurveyEngine {
    fn default() -> Self {
        Self::new(TimeDelta::days(DEFAULT_EXPIRY_DAYS))
    }
}

impl SurveyEngine {
    pub fn new(expiry: TimeDelta) -> Self {
        Self {
            definitions: BTreeMap::new(),
            sessions: BTreeMap::new(),
            expiry,
        }
    }

    pub fn definition(&self, survey_id: &str) -> Option<&SurveyDefinition> {
        self.definitions.get(survey_id)
    }

    pub fn definitions(&self) -> impl Iterator<Item = &SurveyDefinition> {
        self.definitions.values()
    }

    pub fn is_launched(&self, survey_id: &str) -> bool {
        self.definitions.contains_key(survey_id)
    }

    pub fn session(&self, survey_id: &str, user_id: &str) -> Option<&SurveySession> {
        self.sessions.get(&(survey_id.to_string(), user_id.to_string()))
    }

    pub fn sessions<'a>(&'a self, survey_id: &'a str) -> impl Iterator<Item = &'a SurveySession> + 'a {
        self.sessions
            .iter()
            .filter(move |((s, _), _)| s == survey_id)
            .map(|(_, v)| v)
    }

    /// Invite every roster student by DM.
    pub fn launch(
        &mut self,
        def: SurveyDefinition,
        roster: &[UserRef],
        now: Timestamp,
    ) -> Result<Launch, SurveyError> {
        def.validate()?;
        if self.definitions.contains_key(&def.survey_id) {
            return Err(SurveyError::AlreadyLaunched(def.survey_id));
        }
        if roster.is_empty() {
            return Err(SurveyError::EmptyRoster);
        }
        let body = format!(
            "Hi! We would like your feedback on the {} \"{}\" ({} question{}). Click Accept to start the survey.",
            def.activity.kind.label(),
            def.activity.title,
            def.questions.len(),
            if def.questions.len() == 1 { "" } else { "s" },
        );
        let mut actions = Vec::new();
        for student in roster {
            let key = (def.survey_id.clone(), student.user_id.clone());
            if self.sessions.contains_key(&key) {
                continue;
            }
            self.sessions.insert(
                key,
                SurveySession {
                    survey_id: def.survey_id.clone(),
                    student: student.clone(),
                    state: SessionState::Invited,
                    answers: BTreeMap::new(),
                    message_ids: BTreeMap::new(),
                    invited_at: now,
                },
            );
            actions.push(OutboundAction::dm_with_buttons(
                &student.user_id,
                &body,
                vec![Button::new(accept_component(&def.survey_id), "Accept")],
            ));
        }
        let invited = actions.len();
        self.definitions.insert(def.survey_id.clone(), def);
        Ok(Launch { invited, actions })
    }

    /// Mark every invitation older than the expiry window as expired.
    pub fn expire_stale(&mut self, now: Timestamp) -> usize {
        let mut expired = 0;
        for session in self.sessions.values_mut() {
            if session.state == SessionState::Invited && now >= session.invited_at + self.expiry {
                session.state = SessionState::Expired;
                expired += 1;
            }
        }
        expired
    }

    pub fn owns_component(component_id: &str) -> bool {
        component_id.starts_with(COMPONENT_PREFIX)
    }

    /// Handle a click on one of the student's survey messages.
    pub fn on_button(
        &mut self,
        student: &UserRef,
        message_id: MessageId,
        component_id: &str,
        now: Timestamp,
        sink: &dyn RecordSink,
    ) -> Result<ButtonOutcome, SurveyError> {
        let (survey_id, click) =
            parse_component(component_id).ok_or_else(|| SurveyError::UnknownComponent(component_id.into()))?;
        let def = self
            .definitions
            .get(survey_id)
            .ok_or_else(|| SurveyError::UnknownSurvey(survey_id.into()))?;
        let session = self
            .sessions
            .get_mut(&(survey_id.to_string(), student.user_id.clone()))
            .ok_or(SurveyError::ForeignMessage)?;
        if session.state == SessionState::Invited && now >= session.invited_at + self.expiry {
            session.state = SessionState::Expired;
        }

        let (question_id, code) = match (session.state, click) {
            (SessionState::Expired, _) => return Err(SurveyError::StaleSession),
            (SessionState::Invited, Click::Accept) => {
                session.state = SessionState::Answering { question: 0 };
                session.message_ids.insert("accept".into(), message_id);
                return Ok(ButtonOutcome {
                    actions: vec![
                        OutboundAction::DisableComponents { message_id },
                        question_message(def, 0, &student.user_id),
                    ],
                    survey_id: def.survey_id.clone(),
                    recorded: None,
                    completed: false,
                });
            }
            (_, Click::Accept) => return Err(SurveyError::AlreadyAnswered),
            (SessionState::Invited, Click::Answer { .. }) => return Err(SurveyError::ForeignMessage),
            (SessionState::Completed, Click::Answer { question_id, .. }) => {
                return Err(if def.question_index(&question_id).is_some() {
                    SurveyError::AlreadyAnswered
                } else {
                    SurveyError::ForeignMessage
                })
            }
            (SessionState::Answering { question }, Click::Answer { question_id, code }) => {
                if session.answers.contains_key(&question_id) {
                    return Err(SurveyError::AlreadyAnswered);
                }
                if def.questions[question].question_id != question_id {
                    return Err(SurveyError::ForeignMessage);
                }
                if !def.questions[question].options.codes().contains(&code) {
                    return Err(SurveyError::UnknownComponent(component_id.into()));
                }
                (question_id, code)
            }
        };

        let SessionState::Answering { question } = session.state else {
            unreachable!("only the answering state records answers")
        };
        let row = SurveyAnswerRow {
            survey_id: def.survey_id.clone(),
            activity_kind: def.activity.kind,
            activity_id: def.activity.id.clone(),
            question_id: question_id.clone(),
            student_id: student.user_id.clone(),
            answer_code: code.clone(),
            timestamp: now,
        };
        sink.append_record(&def.category(), &row.to_row())?;

        session.answers.insert(question_id.clone(), code.clone());
        session.message_ids.insert(question_id.clone(), message_id);
        let mut actions = vec![OutboundAction::DisableComponents { message_id }];
        let next = question + 1;
        let completed = next == def.questions.len();
        if completed {
            session.state = SessionState::Completed;
            actions.push(OutboundAction::dm(
                &student.user_id,
                "Thank you for your feedback! Your answers have been saved.",
            ));
        } else {
            session.state = SessionState::Answering { question: next };
            actions.push(question_message(def, next, &student.user_id));
        }
        Ok(ButtonOutcome {
            actions,
            survey_id: def.survey_id.clone(),
            recorded: Some((question_id, code)),
            completed,
        })
    }

    /// Counts of recorded answers per question.
    pub fn aggregate(&self, survey_id: &str) -> Result<SurveyResults, SurveyError> {
        let def = self
            .definitions
            .get(survey_id)
            .ok_or_else(|| SurveyError::UnknownSurvey(survey_id.into()))?;
        Ok(SurveyResults::tally(def, self.sessions(survey_id).map(|s| &s.answers)))
    }
}

fn question_message(def: &SurveyDefinition, index: usize, to: &str) -> OutboundAction {
    let q = &def.questions[index];
    let buttons = q
        .options
        .codes()
        .into_iter()
        .zip(q.options.labels())
        .map(|(code, label)| Button::new(answer_component(&def.survey_id, &q.question_id, &code), label))
        .collect();
    OutboundAction::dm_with_buttons(
        to,
        format!("Question {}/{}: {}", index + 1, def.questions.len(), q.prompt),
        buttons,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::MemorySink;

    fn ts(s: &str) -> Timestamp {
        s.parse().unwrap()
    }

    fn exam() -> ActivityRef {
        ActivityRef::new(
            ActivityKind::Exam,
            "mid",
            "Intermediate exam",
            7,
            ts("2024-11-29T10:00:00Z"),
            ts("2024-11-29T12:00:00Z"),
        )
        .unwrap()
    }

    fn exam_survey() -> SurveyDefinition {
        SurveyDefinition::from_template(&default_template(ActivityKind::Exam), &exam()).unwrap()
    }

    fn students(n: usize) -> Vec<UserRef> {
        (0..n).map(|i| UserRef::student(format!("s{i}"), format!("Student {i}"))).collect()
    }

    fn click(
        engine: &mut SurveyEngine,
        sink: &MemorySink,
        who: &UserRef,
        msg: u64,
        component: &str,
    ) -> Result<ButtonOutcome, SurveyError> {
        engine.on_button(who, MessageId(msg), component, ts("2024-11-29T13:00:00Z"), sink)
    }

    #[test]
    fn launch_invites_every_student_once() {
        let mut engine = SurveyEngine::default();
        let launch = engine.launch(exam_survey(), &students(137), ts("2024-11-29T12:00:00Z")).unwrap();
        assert_eq!(launch.invited, 137);
        assert_eq!(launch.actions.len(), 137);
        assert!(launch.actions.iter().all(|a| a.components().len() == 1));
        assert!(matches!(
            engine.launch(exam_survey(), &students(3), ts("2024-11-29T12:00:00Z")),
            Err(SurveyError::AlreadyLaunched(_))
        ));
        let mut other = SurveyEngine::default();
        assert!(matches!(
            other.launch(exam_survey(), &[], ts("2024-11-29T12:00:00Z")),
            Err(SurveyError::EmptyRoster)
        ));
    }

    #[test]
    fn full_interaction_records_and_disables() {
        let mut engine = SurveyEngine::default();
        let sink = MemorySink::default();
        let roster = students(1);
        let s = &roster[0];
        engine.launch(exam_survey(), &roster, ts("2024-11-29T12:00:00Z")).unwrap();

        let out = click(&mut engine, &sink, s, 1, &accept_component("mid")).unwrap();
        assert_eq!(out.actions[0], OutboundAction::DisableComponents { message_id: MessageId(1) });
        assert_eq!(out.actions[1].components().len(), 5);
        assert_eq!(engine.session("mid", "s0").unwrap().state, SessionState::Answering { question: 0 });

        let medium = answer_component("mid", DIFFICULTY_QUESTION, "MEDIUM");
        let out = click(&mut engine, &sink, s, 2, &medium).unwrap();
        assert_eq!(out.actions[0], OutboundAction::DisableComponents { message_id: MessageId(2) });
        assert!(matches!(&out.actions[1], OutboundAction::SendDm { body, .. } if body.starts_with("Question 2/2")));
        assert_eq!(out.recorded, Some(("difficulty".into(), "MEDIUM".into())));

        assert!(matches!(click(&mut engine, &sink, s, 2, &medium), Err(SurveyError::AlreadyAnswered)));
        assert_eq!(engine.session("mid", "s0").unwrap().answers.len(), 1);

        let b60 = answer_component("mid", EXPECTED_GRADE_QUESTION, "B60");
        let out = click(&mut engine, &sink, s, 3, &b60).unwrap();
        assert!(out.completed);
        assert!(matches!(&out.actions[1], OutboundAction::SendDm { body, .. } if body.starts_with("Thank you")));
        let session = engine.session("mid", "s0").unwrap();
        assert_eq!(session.state, SessionState::Completed);
        assert_eq!(session.message_ids.get("difficulty"), Some(&MessageId(2)));
        assert_eq!(sink.records().len(), 2);
        assert!(matches!(click(&mut engine, &sink, s, 3, &b60), Err(SurveyError::AlreadyAnswered)));
        assert!(matches!(
            click(&mut engine, &sink, s, 1, &accept_component("mid")),
            Err(SurveyError::AlreadyAnswered)
        ));
    }

    #[test]
    fn foreign_and_stale_clicks() {
        let mut engine = SurveyEngine::default();
        let sink = MemorySink::default();
        let roster = students(1);
        engine.launch(exam_survey(), &roster, ts("2024-11-20T12:00:00Z")).unwrap();
        let outsider = UserRef::student("zz", "Outsider");
        assert!(matches!(
            click(&mut engine, &sink, &outsider, 1, &accept_component("mid")),
            Err(SurveyError::ForeignMessage)
        ));
        // invited 9 days before the click, default expiry is 7 days
        assert!(matches!(
            click(&mut engine, &sink, &roster[0], 1, &accept_component("mid")),
            Err(SurveyError::StaleSession)
        ));
        assert_eq!(engine.session("mid", "s0").unwrap().state, SessionState::Expired);
        assert!(matches!(
            click(&mut engine, &sink, &roster[0], 1, "survey/nope/accept"),
            Err(SurveyError::UnknownSurvey(_))
        ));
        assert!(matches!(
            click(&mut engine, &sink, &roster[0], 1, "attendance/x"),
            Err(SurveyError::UnknownComponent(_))
        ));
    }

    #[test]
    fn skipping_ahead_is_rejected() {
        let mut engine = SurveyEngine::default();
        let sink = MemorySink::default();
        let roster = students(1);
        engine.launch(exam_survey(), &roster, ts("2024-11-29T12:00:00Z")).unwrap();
        click(&mut engine, &sink, &roster[0], 1, &accept_component("mid")).unwrap();
        let grade = answer_component("mid", EXPECTED_GRADE_QUESTION, "B60");
        assert!(matches!(click(&mut engine, &sink, &roster[0], 2, &grade), Err(SurveyError::ForeignMessage)));
        let bogus = answer_component("mid", DIFFICULTY_QUESTION, "B60");
        assert!(matches!(click(&mut engine, &sink, &roster[0], 2, &bogus), Err(SurveyError::UnknownComponent(_))));
        assert!(sink.records().is_empty());
    }

    fn answered_results(answers: &[&str]) -> SurveyResults {
        let lecture = ActivityRef::new(
            ActivityKind::Lecture,
            "w01-lecture",
            "Intro",
            1,
            ts("2024-10-15T10:00:00Z"),
            ts("2024-10-15T12:00:00Z"),
        )
        .unwrap();
        let def = SurveyDefinition::from_template(&default_template(ActivityKind::Lecture), &lecture).unwrap();
        let mut engine = SurveyEngine::default();
        let sink = MemorySink::default();
        let roster = students(answers.len().max(1));
        engine.launch(def, &roster, ts("2024-10-15T12:00:00Z")).unwrap();
        let t = ts("2024-10-15T13:00:00Z");
        for s in roster.iter().take(answers.len()) {
            engine.on_button(s, MessageId(1), &accept_component("w01-lecture"), t, &sink).unwrap();
        }
        for (i, (s, a)) in roster.iter().zip(answers).enumerate() {
            engine
                .on_button(s, MessageId(100 + i as u64), &answer_component("w01-lecture", DIFFICULTY_QUESTION, a), t, &sink)
                .unwrap();
        }
        engine.aggregate("w01-lecture").unwrap()
    }

    #[test]
    fn aggregate_hand_count() {
        let results = answered_results(&["MEDIUM", "MEDIUM", "HARD"]);
        let q = &results.questions[0];
        assert_eq!(q.count_of("MEDIUM"), 2);
        assert_eq!(q.count_of("HARD"), 1);
        assert_eq!(q.count_of("EASY"), 0);
        assert_eq!(results.respondents, 3);

        let none = answered_results(&[]);
        assert_eq!(none.respondents, 0);
        assert!(none.questions[0].counts.iter().all(|c| c.count == 0));
    }

    #[test]
    fn embed_lists_counts_and_percentages() {
        let results = answered_results(&["MEDIUM", "MEDIUM", "HARD"]);
        let embed = render_results_embed(&results);
        assert_eq!(embed.fields.len(), 1);
        let lines: Vec<&str> = embed.fields[0].value.lines().collect();
        assert_eq!(
            lines,
            vec![
                "VERY_EASY 0 (0.0 %)",
                "EASY 0 (0.0 %)",
                "MEDIUM 2 (66.7 %)",
                "HARD 1 (33.3 %)",
                "VERY_HARD 0 (0.0 %)",
            ]
        );
        let empty = render_results_embed(&answered_results(&[]));
        assert_eq!(empty.fields[0].value, "no responses");
    }

    #[test]
    fn component_parsing() {
        assert_eq!(parse_component("survey/mid/accept"), Some(("mid", Click::Accept)));
        assert_eq!(
            parse_component("survey/mid/q1/a/b"),
            Some((
                "mid",
                Click::Answer {
                    question_id: "q1".into(),
                    code: "a/b".into()
                }
            ))
        );
        assert_eq!(parse_component("survey//accept"), None);
        assert_eq!(parse_component("survey/mid"), None);
    }

    #[test]
    fn definition_validation() {
        let too_many = OptionSet::Custom((0..11).map(|i| i.to_string()).collect());
        assert!(too_many.validate().is_err());
        assert!(OptionSet::Custom(vec!["a".into(), "a".into()]).validate().is_err());
        assert!(SurveyDefinition::new("x", exam(), vec![]).is_err());
    }
}
