//! Course-data documents: roster, activities and optional schedule and
//! survey-template overrides, uploaded by instructors as JSON.
//!
//! Validation walks the whole document and reports every problem it finds,
//! each with a JSON path, instead of stopping at the first one.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{ActivityKind, ActivityRef, Timestamp, UserRef};
use crate::survey::{OptionSet, QuestionSpec, SurveyTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueCode {
    SchemaInvalid,
    DuplicateId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationIssue {
    pub path: String,
    pub code: IssueCode,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("course data rejected: {}", .issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
pub struct CourseDataError {
    pub issues: Vec<ValidationIssue>,
}

impl CourseDataError {
    pub fn has(&self, code: IssueCode) -> bool {
        self.issues.iter().any(|i| i.code == code)
    }

    pub fn paths(&self) -> Vec<&str> {
        self.issues.iter().map(|i| i.path.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub user_id: String,
    pub display_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CourseActivity {
    #[serde(flatten)]
    pub activity: ActivityRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preview_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline: Option<Timestamp>,
}

/// Which of an activity's scheduled actions an override moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerSlot {
    Invite,
    QuizSurvey,
    Survey,
    Attendance,
}

impl TriggerSlot {
    pub fn code(self) -> &'static str {
        match self {
            TriggerSlot::Invite => "invite",
            TriggerSlot::QuizSurvey => "quiz_survey",
            TriggerSlot::Survey => "survey",
            TriggerSlot::Attendance => "attendance",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            TriggerSlot::Invite,
            TriggerSlot::QuizSurvey,
            TriggerSlot::Survey,
            TriggerSlot::Attendance,
        ]
        .into_iter()
        .find(|t| t.code() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleOverride {
    pub activity_id: String,
    pub trigger: TriggerSlot,
    pub at: Timestamp,
}

/// Validated course data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CourseData {
    pub course_id: String,
    pub timezone: String,
    pub students: Vec<Participant>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instructors: Vec<Participant>,
    pub activities: Vec<CourseActivity>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedule_overrides: Vec<ScheduleOverride>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub survey_templates: Vec<SurveyTemplate>,
}

impl CourseData {
    pub fn empty(course_id: impl Into<String>) -> Self {
        Self {
            course_id: course_id.into(),
            timezone: "UTC".into(),
            students: Vec::new(),
            instructors: Vec::new(),
            activities: Vec::new(),
            schedule_overrides: Vec::new(),
            survey_templates: Vec::new(),
        }
    }

    pub fn student_refs(&self) -> Vec<UserRef> {
        self.students
            .iter()
            .map(|p| UserRef::student(&p.user_id, &p.display_name))
            .collect()
    }

    pub fn instructor_refs(&self) -> Vec<UserRef> {
        self.instructors
            .iter()
            .map(|p| UserRef::instructor(&p.user_id, &p.display_name))
            .collect()
    }

    pub fn activity(&self, id: &str) -> Option<&CourseActivity> {
        self.activities.iter().find(|a| a.activity.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("course data serializes")
    }
}

/// Parse and validate a course-data JSON document.
pub fn ingest_course_data(document: &str) -> Result<CourseData, CourseDataError> {
    let value: Value = serde_json::from_str(document).map_err(|e| CourseDataError {
        issues: vec![ValidationIssue {
            path: "$".into(),
            code: IssueCode::SchemaInvalid,
            message: format!("not valid JSON: {e}"),
        }],
    })?;
    let mut v = Validator::default();
    let data = v.course(&value);
    if v.issues.is_empty() {
        Ok(data.expect("no issues implies complete data"))
    } else {
        Err(CourseDataError { issues: v.issues })
    }
}

#[derive(Default)]
struct Validator {
    issues: Vec<ValidationIssue>,
}

impl Validator {
    fn invalid(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(ValidationIssue {
            path: path.into(),
            code: IssueCode::SchemaInvalid,
            message: message.into(),
        });
    }

    fn duplicate(&mut self, path: impl Into<String>, id: &str) {
        self.issues.push(ValidationIssue {
            path: path.into(),
            code: IssueCode::DuplicateId,
            message: format!("duplicate id `{id}`"),
        });
    }

    fn string(&mut self, obj: &Map<String, Value>, key: &str, path: &str) -> Option<String> {
        match obj.get(key) {
            Some(Value::String(s)) if !s.trim().is_empty() => Some(s.clone()),
            Some(Value::String(_)) => {
                self.invalid(format!("{path}.{key}"), "must not be empty");
                None
            }
            Some(_) => {
                self.invalid(format!("{path}.{key}"), "must be a string");
                None
            }
            None => {
                self.invalid(format!("{path}.{key}"), "is required");
                None
            }
        }
    }

    fn opt_string(&mut self, obj: &Map<String, Value>, key: &str, path: &str) -> Option<String> {
        match obj.get(key) {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                self.invalid(format!("{path}.{key}"), "must be a string");
                None
            }
        }
    }

    fn timestamp(&mut self, obj: &Map<String, Value>, key: &str, path: &str) -> Option<Timestamp> {
        let text = self.string(obj, key, path)?;
        self.parse_time(&text, &format!("{path}.{key}"))
    }

    fn parse_time(&mut self, text: &str, path: &str) -> Option<Timestamp> {
        match chrono::DateTime::parse_from_rfc3339(text) {
            Ok(t) => Some(t.to_utc()),
            Err(e) => {
                self.invalid(path, format!("`{text}` is not an ISO-8601 timestamp: {e}"));
                None
            }
        }
    }

    fn array<'a>(&mut self, obj: &'a Map<String, Value>, key: &str, required: bool) -> &'a [Value] {
        match obj.get(key) {
            Some(Value::Array(items)) => items,
            None if !required => &[],
            Some(Value::Null) if !required => &[],
            None => {
                self.invalid(format!("$.{key}"), "is required");
                &[]
            }
            Some(_) => {
                self.invalid(format!("$.{key}"), "must be an array");
                &[]
            }
        }
    }

    fn object<'a>(&mut self, value: &'a Value, path: &str) -> Option<&'a Map<String, Value>> {
        match value {
            Value::Object(map) => Some(map),
            _ => {
                self.invalid(path, "must be an object");
                None
            }
        }
    }

    fn course(&mut self, root: &Value) -> Option<CourseData> {
        let obj = self.object(root, "$")?;
        let course_id = self.string(obj, "course_id", "$");
        let timezone = self.string(obj, "timezone", "$");
        if let Some(tz) = &timezone {
            if !valid_timezone(tz) {
                self.invalid("$.timezone", format!("`{tz}` is neither a fixed offset nor a zone name"));
            }
        }

        let mut user_ids = BTreeSet::new();
        let students = self.participants(obj, "students", true, &mut user_ids);
        let instructors = self.participants(obj, "instructors", false, &mut user_ids);

        let mut activity_ids = BTreeSet::new();
        let mut activities = Vec::new();
        for (i, item) in self.array(obj, "activities", true).iter().enumerate() {
            let path = format!("$.activities[{i}]");
            if let Some(a) = self.activity(item, &path) {
                if !activity_ids.insert(a.activity.id.clone()) {
                    self.duplicate(format!("{path}.id"), &a.activity.id);
                }
                activities.push(a);
            }
        }

        let mut overrides = Vec::new();
        for (i, item) in self.array(obj, "schedule_overrides", false).iter().enumerate() {
            let path = format!("$.schedule_overrides[{i}]");
            let Some(o) = self.object(item, &path) else { continue };
            let activity_id = self.string(o, "activity_id", &path);
            let trigger = self.string(o, "trigger", &path).and_then(|t| {
                let slot = TriggerSlot::parse(&t);
                if slot.is_none() {
                    self.invalid(
                        format!("{path}.trigger"),
                        "must be one of invite, quiz_survey, survey, attendance",
                    );
                }
                slot
            });
            let at = self.timestamp(o, "at", &path);
            if let (Some(activity_id), Some(trigger), Some(at)) = (activity_id, trigger, at) {
                overrides.push(ScheduleOverride {
                    activity_id,
                    trigger,
                    at,
                });
            }
        }

        let mut templates = Vec::new();
        let mut template_kinds = BTreeSet::new();
        for (i, item) in self.array(obj, "survey_templates", false).iter().enumerate() {
            let path = format!("$.survey_templates[{i}]");
            if let Some(t) = self.template(item, &path) {
                if !template_kinds.insert(t.activity_kind) {
                    self.duplicate(format!("{path}.activity_kind"), t.activity_kind.code());
                }
                templates.push(t);
            }
        }

        Some(CourseData {
            course_id: course_id?,
            timezone: timezone?,
            students,
            instructors,
            activities,
            schedule_overrides: overrides,
            survey_templates: templates,
        })
    }

    fn participants(
        &mut self,
        obj: &Map<String, Value>,
        key: &str,
        required: bool,
        seen: &mut BTreeSet<String>,
    ) -> Vec<Participant> {
        let mut out = Vec::new();
        for (i, item) in self.array(obj, key, required).iter().enumerate() {
            let path = format!("$.{key}[{i}]");
            let Some(p) = self.object(item, &path) else { continue };
            let user_id = self.string(p, "user_id", &path);
            let display_name = self.string(p, "display_name", &path);
            if let (Some(user_id), Some(display_name)) = (user_id, display_name) {
                if !seen.insert(user_id.clone()) {
                    self.duplicate(format!("{path}.user_id"), &user_id);
                }
                out.push(Participant {
                    user_id,
                    display_name,
                });
            }
        }
        out
    }

    fn activity(&mut self, item: &Value, path: &str) -> Option<CourseActivity> {
        let a = self.object(item, path)?;
        let id = self.string(a, "id", path);
        if let Some(id) = &id {
            if id.contains(['/', '\\']) || id == "." || id == ".." {
                self.invalid(format!("{path}.id"), "must be usable as a folder name");
            }
        }
        let kind = self.string(a, "kind", path).and_then(|k| match k.parse::<ActivityKind>() {
            Ok(kind) => Some(kind),
            Err(e) => {
                self.invalid(format!("{path}.kind"), e.to_string());
                None
            }
        });
        let title = self.string(a, "title", path);
        let week = match a.get("week") {
            Some(Value::Number(n)) => match n.as_u64() {
                Some(w) if (1..=u64::from(u32::MAX)).contains(&w) => Some(w as u32),
                _ => {
                    self.invalid(format!("{path}.week"), "must be a positive integer");
                    None
                }
            },
            Some(_) => {
                self.invalid(format!("{path}.week"), "must be a positive integer");
                None
            }
            None => {
                self.invalid(format!("{path}.week"), "is required");
                None
            }
        };
        let start = self.timestamp(a, "window_start", path);
        let end = self.timestamp(a, "window_end", path);
        if let (Some(s), Some(e)) = (start, end) {
            if s >= e {
                self.invalid(format!("{path}.window_end"), "must be after window_start");
            }
        }
        let preview_text = self.opt_string(a, "preview_text", path);
        let deadline = match self.opt_string(a, "deadline", path) {
            Some(text) => self.parse_time(&text, &format!("{path}.deadline")),
            None => None,
        };
        let activity = ActivityRef {
            kind: kind?,
            id: id?,
            title: title?,
            week: week?,
            window_start: start?,
            window_end: end?,
        };
        activity.validate().ok()?;
        Some(CourseActivity {
            activity,
            preview_text,
            deadline,
        })
    }

    fn template(&mut self, item: &Value, path: &str) -> Option<SurveyTemplate> {
        let t = self.object(item, path)?;
        let kind = self
            .string(t, "activity_kind", path)
            .and_then(|k| match k.parse::<ActivityKind>() {
                Ok(kind) => Some(kind),
                Err(e) => {
                    self.invalid(format!("{path}.activity_kind"), e.to_string());
                    None
                }
            });
        let questions = match t.get("questions") {
            Some(Value::Array(q)) if !q.is_empty() => q,
            _ => {
                self.invalid(format!("{path}.questions"), "must be a non-empty array");
                return None;
            }
        };
        let mut ids = BTreeSet::new();
        let mut out = Vec::new();
        for (i, q) in questions.iter().enumerate() {
            let qpath = format!("{path}.questions[{i}]");
            let Some(qo) = self.object(q, &qpath) else { continue };
            let question_id = self.string(qo, "question_id", &qpath);
            let prompt = self.string(qo, "prompt", &qpath);
            let options = match serde_json::from_value::<OptionSet>(
                qo.get("options").cloned().unwrap_or(Value::Null),
            ) {
                Ok(o) => match o.validate() {
                    Ok(()) => Some(o),
                    Err(e) => {
                        self.invalid(format!("{qpath}.options"), e.to_string());
                        None
                    }
                },
                Err(e) => {
                    self.invalid(format!("{qpath}.options"), e.to_string());
                    None
                }
            };
            if let Some(id) = &question_id {
                if !ids.insert(id.clone()) {
                    self.duplicate(format!("{qpath}.question_id"), id);
                }
            }
            if let (Some(question_id), Some(prompt), Some(options)) = (question_id, prompt, options) {
                out.push(QuestionSpec {
                    question_id,
                    prompt,
                    options,
                });
            }
        }
        Some(SurveyTemplate {
            activity_kind: kind?,
            questions: out,
        })
    }
}

fn valid_timezone(tz: &str) -> bool {
    if tz == "UTC" || tz == "Z" {
        return true;
    }
    let bytes = tz.as_bytes();
    if bytes.len() == 6 && (bytes[0] == b'+' || bytes[0] == b'-') && bytes[3] == b':' {
        let hh = tz[1..3].parse::<u8>();
        let mm = tz[4..6].parse::<u8>();
        return matches!((hh, mm), (Ok(h), Ok(m)) if h <= 14 && m < 60);
    }
    tz.contains('/')
        && tz
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '/' | '_' | '-' | '+'))
}
