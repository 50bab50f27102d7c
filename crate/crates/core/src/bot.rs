//! The bot: command registry, feature state and scheduled automation wired
//! together behind one event-handling entry point.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::attendance::{ad_hoc_activity, AttendanceBook, Submission, ANNOUNCE_CHANNEL};
use crate::course::CourseData;
use crate::dispatch::{
    ArgSpec, ArgType, CommandCall, CommandError, CommandSpec, DispatchResult, Dispatcher, HandlerResult, Permission,
    Routes,
};
use crate::model::{ActivityKind, ActivityRef, GuildEvent, MessageId, OutboundAction, Timestamp, UserRef};
use crate::scheduler::{expand_activities, Scheduler, SchedulerError, TriggerAction};
use crate::store::{RecordSink, StoreError};
use crate::survey::{
    default_template, render_results_embed, SurveyDefinition, SurveyEngine, SurveyError, SurveyTemplate,
    DEFAULT_EXPIRY_DAYS,
};

pub const INSTRUCTOR_CHANNEL: &str = "instructors";

#[derive(Debug, Error)]
pub enum BotError {
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Survey(#[from] SurveyError),
}

/// One observable state change, numbered for cursor-based polling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Change {
    pub seq: u64,
    pub at: Timestamp,
    pub kind: String,
    pub data: Value,
}

#[derive(Debug, Clone, Default)]
pub struct ChangeLog {
    entries: Vec<Change>,
}

impl ChangeLog {
    pub fn push(&mut self, at: Timestamp, kind: &str, data: Value) {
        let seq = self.last_seq() + 1;
        self.entries.push(Change { seq, at, kind: kind.into(), data });
    }

    pub fn last_seq(&self) -> u64 {
        self.entries.last().map_or(0, |c| c.seq)
    }

    /// Every change with `seq > since`, in order.
    pub fn since(&self, since: u64) -> &[Change] {
        let start = self.entries.partition_point(|c| c.seq <= since);
        &self.entries[start..]
    }
}

pub struct BotState {
    pub course: CourseData,
    activities: Vec<ActivityRef>,
    roster: Vec<UserRef>,
    templates: BTreeMap<ActivityKind, SurveyTemplate>,
    pub attendance: AttendanceBook,
    pub surveys: SurveyEngine,
    pub changes: ChangeLog,
    sink: Arc<dyn RecordSink>,
    adhoc: usize,
}

fn err(code: &'static str, message: impl Into<String>) -> CommandError {
    CommandError::new(code, message)
}

impl BotState {
    pub fn roster(&self) -> &[UserRef] {
        &self.roster
    }

    pub fn activities(&self) -> &[ActivityRef] {
        &self.activities
    }

    pub fn activity(&self, id: &str) -> Option<&ActivityRef> {
        self.activities.iter().find(|a| a.id == id)
    }

    pub fn template(&self, kind: ActivityKind) -> SurveyTemplate {
        self.templates.get(&kind).cloned().unwrap_or_else(|| default_template(kind))
    }

    fn launch_survey(&mut self, activity: &ActivityRef, now: Timestamp) -> Result<Vec<OutboundAction>, SurveyError> {
        let def = SurveyDefinition::from_template(&self.template(activity.kind), activity)?;
        let launch = self.surveys.launch(def, &self.roster, now)?;
        self.changes.push(
            now,
            "survey_launched",
            json!({"survey_id": activity.id, "activity_kind": activity.kind, "invited": launch.invited}),
        );
        Ok(launch.actions)
    }

    fn attendance_start(&mut self, call: &CommandCall<'_>) -> HandlerResult {
        let keyword = call.arg("keyword").unwrap_or_default();
        let activity = match call.arg("activity_id") {
            Some(id) => {
                let a = self
                    .activity(id)
                    .ok_or_else(|| err("UNKNOWN_ACTIVITY", format!("Unknown activity `{id}`.")))?;
                if a.kind != ActivityKind::TutorialSession {
                    return Err(err("ARG_INVALID", format!("`{id}` is not a tutorial session.")));
                }
                a.clone()
            }
            None => match self
                .activities
                .iter()
                .find(|a| a.kind == ActivityKind::TutorialSession && a.contains(call.at))
            {
                Some(a) => a.clone(),
                None => ad_hoc_activity(call.at, self.adhoc + 1),
            },
        };
        let (session, actions) = self
            .attendance
            .start_session(call.from, &activity, keyword, call.at)
            .map_err(|e| err(e.code(), e.to_string()))?;
        let data = json!({"session_id": session.session_id, "activity_id": activity.id});
        if activity.id.starts_with("adhoc-") && self.activity(&activity.id).is_none() {
            self.adhoc += 1;
        }
        self.changes.push(call.at, "attendance_started", data);
        Ok(actions)
    }

    fn attendance_stop(&mut self, call: &CommandCall<'_>) -> HandlerResult {
        let roster = self
            .attendance
            .stop_session(call.from, call.arg("activity_id"), call.at, &*self.sink)
            .map_err(|e| err(e.code(), e.to_string()))?;
        self.changes.push(
            call.at,
            "attendance_stopped",
            json!({"session_id": roster.session_id, "activity_id": roster.activity_id, "count": roster.rows_written}),
        );
        Ok(roster.actions)
    }

    fn survey_launch(&mut self, call: &CommandCall<'_>) -> HandlerResult {
        let id = call.arg("activity_id").unwrap_or_default();
        let activity = self
            .activity(id)
            .cloned()
            .ok_or_else(|| err("UNKNOWN_ACTIVITY", format!("Unknown activity `{id}`.")))?;
        let mut actions = self
            .launch_survey(&activity, call.at)
            .map_err(|e| err(e.code(), e.to_string()))?;
        let invited = actions.len();
        actions.push(OutboundAction::ephemeral(
            &call.from.user_id,
            format!("Survey {id} sent to {invited} students."),
        ));
        Ok(actions)
    }

    fn survey_results(&mut self, call: &CommandCall<'_>) -> HandlerResult {
        let id = call.arg("activity_id").unwrap_or_default();
        let results = self.surveys.aggregate(id).map_err(|e| err(e.code(), e.to_string()))?;
        Ok(vec![OutboundAction::SendEmbed {
            to: call.from.user_id.clone(),
            embed: render_results_embed(&results),
        }])
    }

    fn run_trigger(&mut self, action: &TriggerAction, trigger_id: &str, now: Timestamp) -> Vec<OutboundAction> {
        self.changes.push(now, "trigger_fired", json!({"trigger_id": trigger_id}));
        match action {
            TriggerAction::LectureInvite { activity, preview_text } => {
                let mut body = format!(
                    "Week {}: the lecture \"{}\" starts now. You are welcome to attend.",
                    activity.week, activity.title
                );
                if let Some(preview) = preview_text {
                    body.push_str("\nToday: ");
                    body.push_str(preview);
                }
                vec![OutboundAction::channel(ANNOUNCE_CHANNEL, body)]
            }
            TriggerAction::AttendancePrompt { activity } => vec![OutboundAction::channel(
                INSTRUCTOR_CHANNEL,
                format!(
                    "The tutorial \"{}\" is starting. Open the attendance check with /attendance-start keyword:<word> activity_id:{}",
                    activity.title, activity.id
                ),
            )],
            TriggerAction::LaunchSurvey { activity } => match self.launch_survey(activity, now) {
                Ok(actions) => actions,
                Err(e) => {
                    self.changes.push(
                        now,
                        "trigger_skipped",
                        json!({"trigger_id": trigger_id, "reason": e.code()}),
                    );
                    Vec::new()
                }
            },
        }
    }
}

impl Routes for BotState {
    fn on_direct_message(&mut self, from: &UserRef, text: &str, at: Timestamp, help: &str) -> Vec<OutboundAction> {
        if self.attendance.has_open() {
            let (outcome, actions) = self.attendance.submit_keyword(from, text, at);
            if let Submission::Accepted { session_id } = outcome {
                self.changes.push(
                    at,
                    "attendance_recorded",
                    json!({"session_id": session_id, "student_id": from.user_id, "display_name": from.display_name}),
                );
            }
            return actions;
        }
        vec![OutboundAction::dm(
            &from.user_id,
            format!(
                "Hi {}! I collect attendance keywords during tutorial sessions and send activity surveys. Available commands:\n{}",
                from.display_name, help
            ),
        )]
    }

    fn on_button(&mut self, from: &UserRef, message_id: MessageId, component_id: &str, at: Timestamp) -> HandlerResult {
        let outcome = self
            .surveys
            .on_button(from, message_id, component_id, at, &*self.sink)
            .map_err(|e| err(e.code(), e.to_string()))?;
        if let Some((question_id, code)) = &outcome.recorded {
            self.changes.push(
                at,
                "survey_answer",
                json!({"survey_id": outcome.survey_id, "student_id": from.user_id, "question_id": question_id, "answer_code": code}),
            );
        }
        if outcome.completed {
            self.changes.push(
                at,
                "survey_completed",
                json!({"survey_id": outcome.survey_id, "student_id": from.user_id}),
            );
        }
        Ok(outcome.actions)
    }

    fn owns_component(&self, component_id: &str) -> bool {
        SurveyEngine::owns_component(component_id)
    }
}

fn spec(name: &str, permission: Permission, args: Vec<ArgSpec>, description: &str) -> CommandSpec {
    CommandSpec {
        name: name.into(),
        arg_schema: args,
        permission,
        description: description.into(),
    }
}

fn register_commands(d: &mut Dispatcher<BotState>) {
    use ArgType::String as S;
    let all = [
        (
            spec(
                "attendance-start",
                Permission::InstructorOnly,
                vec![ArgSpec::required("keyword", S), ArgSpec::optional("activity_id", S)],
                "open an attendance check",
            ),
            BotState::attendance_start as fn(&mut BotState, &CommandCall<'_>) -> HandlerResult,
        ),
        (
            spec(
                "attendance-stop",
                Permission::InstructorOnly,
                vec![ArgSpec::optional("activity_id", S)],
                "close the attendance check and receive the roster",
            ),
            BotState::attendance_stop,
        ),
        (
            spec(
                "survey-launch",
                Permission::InstructorOnly,
                vec![ArgSpec::required("activity_id", S)],
                "send the activity survey to every student",
            ),
            BotState::survey_launch,
        ),
        (
            spec(
                "survey-results",
                Permission::InstructorOnly,
                vec![ArgSpec::required("activity_id", S)],
                "show the survey results",
            ),
            BotState::survey_results,
        ),
        (
            spec("ping", Permission::Everyone, vec![], "check that the bot is alive"),
            |_: &mut BotState, c: &CommandCall<'_>| Ok(vec![OutboundAction::ephemeral(&c.from.user_id, "pong")]),
        ),
    ];
    for (s, handler) in all {
        d.register(s, handler).expect("built-in commands are valid");
    }
}

pub struct Bot {
    dispatcher: Dispatcher<BotState>,
    pub state: BotState,
    scheduler: Scheduler,
}

impl Bot {
    pub fn new(course: CourseData, sink: Arc<dyn RecordSink>) -> Result<Self, BotError> {
        let scheduler = Scheduler::load_calendar(&course)?;
        let roster = course.student_refs();
        let mut dispatcher = Dispatcher::default();
        register_commands(&mut dispatcher);
        let state = BotState {
            activities: expand_activities(&course),
            templates: course
                .survey_templates
                .iter()
                .map(|t| (t.activity_kind, t.clone()))
                .collect(),
            attendance: AttendanceBook::new(&course.course_id, &roster),
            surveys: SurveyEngine::new(TimeDelta::days(DEFAULT_EXPIRY_DAYS)),
            changes: ChangeLog::default(),
            roster,
            course,
            sink,
            adhoc: 0,
        };
        Ok(Self {
            dispatcher,
            state,
            scheduler,
        })
    }

    /// Skip triggers that a previous run already fired.
    pub fn resume<'a>(&mut self, fired: impl IntoIterator<Item = &'a str>) {
        self.scheduler.resume(fired);
    }

    pub fn skip_before(&mut self, t: Timestamp) -> usize {
        self.scheduler.skip_before(t)
    }

    pub fn dispatcher(&self) -> &Dispatcher<BotState> {
        &self.dispatcher
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn handle(&mut self, event: &GuildEvent) -> DispatchResult {
        self.dispatcher.dispatch(&mut self.state, event)
    }

    pub fn next_due(&self) -> Option<Timestamp> {
        self.scheduler.next_due()
    }

    /// Expire stale survey invitations and run every due trigger.
    pub fn tick(&mut self, now: Timestamp) -> Result<Vec<OutboundAction>, BotError> {
        self.state.surveys.expire_stale(now);
        let fired = self.scheduler.tick(now, &*self.state.sink)?;
        let mut actions = Vec::new();
        for t in fired {
            actions.extend(self.state.run_trigger(&t.action, &t.trigger_id, now));
        }
        Ok(actions)
    }
}
