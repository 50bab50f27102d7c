//! Shared domain vocabulary: activities, answer scales, participants and the
//! inbound-event / outbound-action algebra spoken by every other module.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// All timestamps are UTC instants.
pub type Timestamp = DateTime<Utc>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("percentage {0} is outside [0, 100]")]
    OutOfRange(f64),
    #[error("unknown {what} code `{code}`")]
    UnknownCode { what: &'static str, code: String },
    #[error("invalid activity: {0}")]
    InvalidActivity(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActivityKind {
    Lecture,
    Quiz,
    Exercise,
    Exam,
    TutorialSession,
}

impl ActivityKind {
    pub const ALL: [ActivityKind; 5] = [
        ActivityKind::Lecture,
        ActivityKind::Quiz,
        ActivityKind::Exercise,
        ActivityKind::Exam,
        ActivityKind::TutorialSession,
    ];

    /// Canonical identifier, e.g. `TUTORIAL_SESSION`.
    pub fn code(self) -> &'static str {
        match self {
            ActivityKind::Lecture => "LECTURE",
            ActivityKind::Quiz => "QUIZ",
            ActivityKind::Exercise => "EXERCISE",
            ActivityKind::Exam => "EXAM",
            ActivityKind::TutorialSession => "TUTORIAL_SESSION",
        }
    }

    /// Directory name used for on-disk record folders.
    pub fn dir_name(self) -> &'static str {
        match self {
            ActivityKind::Lecture => "lecture",
            ActivityKind::Quiz => "quiz",
            ActivityKind::Exercise => "exercise",
            ActivityKind::Exam => "exam",
            ActivityKind::TutorialSession => "tutorial_session",
        }
    }

    pub fn from_dir_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.dir_name() == name)
    }

    pub fn label(self) -> &'static str {
        match self {
            ActivityKind::Lecture => "lecture",
            ActivityKind::Quiz => "quiz",
            ActivityKind::Exercise => "exercise",
            ActivityKind::Exam => "exam",
            ActivityKind::TutorialSession => "tutorial session",
        }
    }
}

impl FromStr for ActivityKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.code() == s)
            .ok_or_else(|| ModelError::UnknownCode {
                what: "activity kind",
                code: s.to_string(),
            })
    }
}

impl fmt::Display for ActivityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// A course activity that surveys, attendance sessions and schedules attach to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityRef {
    pub kind: ActivityKind,
    pub id: String,
    pub title: String,
    pub week: u32,
    pub window_start: Timestamp,
    pub window_end: Timestamp,
}

impl ActivityRef {
    pub fn new(
        kind: ActivityKind,
        id: impl Into<String>,
        title: impl Into<String>,
        week: u32,
        window_start: Timestamp,
        window_end: Timestamp,
    ) -> Result<Self, ModelError> {
        let activity = Self {
            kind,
            id: id.into(),
            title: title.into(),
            week,
            window_start,
            window_end,
        };
        activity.validate()?;
        Ok(activity)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.id.trim().is_empty() {
            return Err(ModelError::InvalidActivity("empty id".into()));
        }
        if self.id.contains(['/', '\\']) || self.id == "." || self.id == ".." {
            return Err(ModelError::InvalidActivity(format!(
                "id `{}` is not usable as a folder name",
                self.id
            )));
        }
        if self.week == 0 {
            return Err(ModelError::InvalidActivity(format!(
                "`{}`: week must be >= 1",
                self.id
            )));
        }
        if self.window_start >= self.window_end {
            return Err(ModelError::InvalidActivity(format!(
                "`{}`: window start must precede window end",
                self.id
            )));
        }
        Ok(())
    }

    pub fn contains(&self, at: Timestamp) -> bool {
        self.window_start <= at && at < self.window_end
    }
}

/// Five-point perceived difficulty scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DifficultyRating {
    VeryEasy = 1,
    Easy = 2,
    Medium = 3,
    Hard = 4,
    VeryHard = 5,
}

impl DifficultyRating {
    pub const ALL: [DifficultyRating; 5] = [
        DifficultyRating::VeryEasy,
        DifficultyRating::Easy,
        DifficultyRating::Medium,
        DifficultyRating::Hard,
        DifficultyRating::VeryHard,
    ];

    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub fn from_ordinal(value: u8) -> Option<Self> {
        Self::ALL.get(usize::from(value).checked_sub(1)?).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            DifficultyRating::VeryEasy => "VERY_EASY",
            DifficultyRating::Easy => "EASY",
            DifficultyRating::Medium => "MEDIUM",
            DifficultyRating::Hard => "HARD",
            DifficultyRating::VeryHard => "VERY_HARD",
        }
    }

    /// Default display string shown on buttons.
    pub fn label(self) -> &'static str {
        match self {
            DifficultyRating::VeryEasy => "Very easy",
            DifficultyRating::Easy => "Easy",
            DifficultyRating::Medium => "Medium",
            DifficultyRating::Hard => "Hard",
            DifficultyRating::VeryHard => "Very hard",
        }
    }
}

impl FromStr for DifficultyRating {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|d| d.code() == s)
            .ok_or_else(|| ModelError::UnknownCode {
                what: "difficulty",
                code: s.to_string(),
            })
    }
}

impl fmt::Display for DifficultyRating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Ordinal encoding used by the correlation analyses: `VERY_EASY` is 1, `VERY_HARD` is 5.
pub fn difficulty_ordinal(rating: DifficultyRating) -> u8 {
    rating.ordinal()
}

/// Twenty-point percentage bands. The top band is closed so that the five
/// bands partition `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GradeBand {
    B0,
    B20,
    B40,
    B60,
    B80,
}

impl GradeBand {
    pub const ALL: [GradeBand; 5] = [
        GradeBand::B0,
        GradeBand::B20,
        GradeBand::B40,
        GradeBand::B60,
        GradeBand::B80,
    ];

    pub fn lower(self) -> f64 {
        f64::from(self.index() as u8) * 20.0
    }

    pub fn upper(self) -> f64 {
        self.lower() + 20.0
    }

    pub fn midpoint(self) -> f64 {
        self.lower() + 10.0
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            GradeBand::B0 => "B0",
            GradeBand::B20 => "B20",
            GradeBand::B40 => "B40",
            GradeBand::B60 => "B60",
            GradeBand::B80 => "B80",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            GradeBand::B0 => "0-20 %",
            GradeBand::B20 => "20-40 %",
            GradeBand::B40 => "40-60 %",
            GradeBand::B60 => "60-80 %",
            GradeBand::B80 => "80-100 %",
        }
    }
}

impl FromStr for GradeBand {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|b| b.code() == s)
            .ok_or_else(|| ModelError::UnknownCode {
                what: "grade band",
                code: s.to_string(),
            })
    }
}

impl fmt::Display for GradeBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Bucket a percentage into its grade band.
pub fn grade_band_of(percentage: f64) -> Result<GradeBand, ModelError> {
    if !(0.0..=100.0).contains(&percentage) {
        return Err(ModelError::OutOfRange(percentage));
    }
    let index = ((percentage / 20.0).floor() as usize).min(4);
    Ok(GradeBand::ALL[index])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Student,
    Instructor,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UserRef {
    pub user_id: String,
    pub display_name: String,
    pub role: Role,
}

impl UserRef {
    pub fn student(user_id: impl Into<String>, display_name: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            display_name: display_name.into(),
            role: Role::Student,
        }
    }

    pub fn instructor(user_id: impl Into<String>, display_name: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            display_name: display_name.into(),
            role: Role::Instructor,
        }
    }

    pub fn is_instructor(&self) -> bool {
        self.role == Role::Instructor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageId(pub u64);

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    DirectMessage {
        from: UserRef,
        text: String,
    },
    SlashCommand {
        from: UserRef,
        name: String,
        #[serde(default)]
        args: BTreeMap<String, String>,
    },
    ButtonClick {
        from: UserRef,
        message_id: MessageId,
        component_id: String,
    },
}

/// An inbound event delivered by the chat platform.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuildEvent {
    pub at: Timestamp,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl GuildEvent {
    pub fn sender(&self) -> &UserRef {
        match &self.kind {
            EventKind::DirectMessage { from, .. }
            | EventKind::SlashCommand { from, .. }
            | EventKind::ButtonClick { from, .. } => from,
        }
    }

    pub fn direct_message(at: Timestamp, from: &UserRef, text: impl Into<String>) -> Self {
        Self {
            at,
            kind: EventKind::DirectMessage {
                from: from.clone(),
                text: text.into(),
            },
        }
    }

    pub fn slash_command<'a>(
        at: Timestamp,
        from: &UserRef,
        name: impl Into<String>,
        args: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Self {
        Self {
            at,
            kind: EventKind::SlashCommand {
                from: from.clone(),
                name: name.into(),
                args: args
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect(),
            },
        }
    }

    pub fn button_click(
        at: Timestamp,
        from: &UserRef,
        message_id: MessageId,
        component_id: impl Into<String>,
    ) -> Self {
        Self {
            at,
            kind: EventKind::ButtonClick {
                from: from.clone(),
                message_id,
                component_id: component_id.into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Button {
    pub component_id: String,
    pub label: String,
}

impl Button {
    pub fn new(component_id: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            component_id: component_id.into(),
            label: label.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedField {
    pub name: String,
    pub value: String,
}

/// Rich message block with a title, a coloured border and named fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Embed {
    pub title: String,
    pub color: u32,
    pub fields: Vec<EmbedField>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutboundAction {
    SendDm {
        to: String,
        body: String,
        components: Vec<Button>,
    },
    SendChannel {
        channel: String,
        body: String,
        components: Vec<Button>,
    },
    SendEmbed {
        to: String,
        embed: Embed,
    },
    DisableComponents {
        message_id: MessageId,
    },
    EphemeralReply {
        to: String,
        text: String,
    },
}

impl OutboundAction {
    pub fn dm(to: impl Into<String>, body: impl Into<String>) -> Self {
        OutboundAction::SendDm {
            to: to.into(),
            body: body.into(),
            components: Vec::new(),
        }
    }

    pub fn dm_with_buttons(to: impl Into<String>, body: impl Into<String>, components: Vec<Button>) -> Self {
        OutboundAction::SendDm {
            to: to.into(),
            body: body.into(),
            components,
        }
    }

    pub fn channel(channel: impl Into<String>, body: impl Into<String>) -> Self {
        OutboundAction::SendChannel {
            channel: channel.into(),
            body: body.into(),
            components: Vec::new(),
        }
    }

    pub fn ephemeral(to: impl Into<String>, text: impl Into<String>) -> Self {
        OutboundAction::EphemeralReply {
            to: to.into(),
            text: text.into(),
        }
    }

    pub fn components(&self) -> &[Button] {
        match self {
            OutboundAction::SendDm { components, .. }
            | OutboundAction::SendChannel { components, .. } => components,
            _ => &[],
        }
    }

    /// Component ids must be unique within one message.
    pub fn has_unique_component_ids(&self) -> bool {
        let components = self.components();
        let mut ids: Vec<&str> = components.iter().map(|b| b.component_id.as_str()).collect();
        ids.sort_unstable();
        ids.windows(2).all(|w| w[0] != w[1])
    }
}
