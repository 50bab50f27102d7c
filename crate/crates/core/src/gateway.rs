//! In-process chat platform: a guild with channels, DM threads and messages
//! carrying buttons, driven on a virtual clock.
//!
//! Every outbound action passes through the rate limiter. Actions the
//! limiter defers are queued in order and retried once the reported wait
//! has passed; nothing behind a deferred action overtakes it.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attendance::ANNOUNCE_CHANNEL;
use crate::bot::{Bot, BotError, INSTRUCTOR_CHANNEL};
use crate::course::CourseData;
use crate::dispatch::{DispatchResult, Rejection};
use crate::model::{Button, Embed, EventKind, GuildEvent, MessageId, OutboundAction, Timestamp, UserRef};
use crate::rate_limit::{Admission, HttpMethod, LimiterConfig, RateLimitError, RateLimiter, RouteKey};
use crate::store::RecordSink;

pub const MESSAGES_ROUTE: &str = "channels/{channel_id}/messages";
pub const MESSAGE_ROUTE: &str = "channels/{channel_id}/messages/{message_id}";
pub const INTERACTION_ROUTE: &str = "interactions/{interaction_id}/callback";
pub const GATEWAY: &str = "gateway";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("`{0}` is not a member of this guild")]
    UnknownUser(String),
    #[error("scenario step {index} at {at} is earlier than the current time {now}")]
    NonMonotoneScenario { index: usize, at: Timestamp, now: Timestamp },
    #[error("event at {at} is earlier than the current time {now}")]
    ClockRegression { at: Timestamp, now: Timestamp },
    #[error("target `{0}` does not exist")]
    TargetMissing(String),
    #[error("rate limited; retry after {retry_after:?}")]
    RateDeferred { retry_after: Duration },
    #[error("no message from the bot carries component `{0}`")]
    UnresolvedComponent(String),
    #[error(transparent)]
    RateLimit(#[from] RateLimitError),
    #[error(transparent)]
    Bot(#[from] BotError),
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::UnknownUser(_) => "UNKNOWN_USER",
            GatewayError::NonMonotoneScenario { .. } | GatewayError::ClockRegression { .. } => "NON_MONOTONE_SCENARIO",
            GatewayError::TargetMissing(_) => "TARGET_MISSING",
            GatewayError::RateDeferred { .. } => "RATE_DEFERRED",
            GatewayError::UnresolvedComponent(_) => "TARGET_MISSING",
            GatewayError::RateLimit(_) => "UNKNOWN_ROUTE",
            GatewayError::Bot(_) => "IO_FAILURE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "lowercase")]
pub enum Location {
    Dm(String),
    Channel(String),
}

impl Location {
    /// The major id of the location's channel routes.
    pub fn major(&self) -> String {
        match self {
            Location::Dm(user) => format!("dm-{user}"),
            Location::Channel(name) => name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimComponent {
    pub button: Button,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimMessage {
    pub id: MessageId,
    pub location: Location,
    pub body: String,
    pub components: Vec<SimComponent>,
    pub embed: Option<Embed>,
    pub at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub method: HttpMethod,
    pub template: String,
    pub major: Option<String>,
}

impl RouteRecord {
    pub fn key(&self) -> RouteKey {
        RouteKey::new(self.method, &self.template, self.major.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub at: Timestamp,
    pub seq: u64,
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<GuildEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<OutboundAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message_id: Option<MessageId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<RouteRecord>,
}

/// Append-only log of everything that crossed the gateway.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn outbound(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries.iter().filter(|e| e.direction == Direction::Out)
    }

    pub fn inbound(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries.iter().filter(|e| e.direction == Direction::In)
    }

    fn push(&mut self, mut entry: TranscriptEntry) {
        entry.seq = self.entries.len() as u64 + 1;
        self.entries.push(entry);
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("transcript entry serializes"));
            out.push('\n');
        }
        out
    }
}

/// Rate-limit route an outbound action is sent on.
pub fn route_of(action: &OutboundAction, message_location: Option<&Location>) -> Option<RouteKey> {
    Some(match action {
        OutboundAction::SendDm { to, .. } | OutboundAction::SendEmbed { to, .. } => {
            RouteKey::new(HttpMethod::Post, MESSAGES_ROUTE, Some(&Location::Dm(to.clone()).major()))
        }
        OutboundAction::SendChannel { channel, .. } => RouteKey::new(HttpMethod::Post, MESSAGES_ROUTE, Some(channel)),
        OutboundAction::DisableComponents { .. } => {
            RouteKey::new(HttpMethod::Put, MESSAGE_ROUTE, Some(&message_location?.major()))
        }
        OutboundAction::EphemeralReply { to, .. } => RouteKey::new(HttpMethod::Post, INTERACTION_ROUTE, Some(to)),
    })
}

/// The boundary a real chat-platform client implements.
pub trait PlatformAdapter {
    fn now(&self) -> Timestamp;
    fn apply(&mut self, action: &OutboundAction, now: Timestamp) -> Result<Option<MessageId>, GatewayError>;
}

/// The simulated guild.
#[derive(Debug)]
pub struct SimGuild {
    users: BTreeMap<String, UserRef>,
    channels: BTreeMap<String, Vec<MessageId>>,
    dm_threads: BTreeMap<String, Vec<MessageId>>,
    messages: BTreeMap<MessageId, SimMessage>,
    next_id: u64,
    clock: Timestamp,
    limiter: Arc<RateLimiter>,
    transcript: Transcript,
}

impl SimGuild {
    pub fn new(start: Timestamp, limiter: Arc<RateLimiter>) -> Self {
        let mut guild = Self {
            users: BTreeMap::new(),
            channels: BTreeMap::new(),
            dm_threads: BTreeMap::new(),
            messages: BTreeMap::new(),
            next_id: 1,
            clock: start,
            limiter,
            transcript: Transcript::default(),
        };
        guild.add_channel(ANNOUNCE_CHANNEL);
        guild.add_channel(INSTRUCTOR_CHANNEL);
        guild
    }

    pub fn add_user(&mut self, user: UserRef) {
        self.dm_threads.entry(user.user_id.clone()).or_default();
        self.users.insert(user.user_id.clone(), user);
    }

    pub fn add_channel(&mut self, name: &str) {
        self.channels.entry(name.to_string()).or_default();
    }

    pub fn user(&self, user_id: &str) -> Option<&UserRef> {
        self.users.get(user_id)
    }

    pub fn users(&self) -> impl Iterator<Item = &UserRef> {
        self.users.values()
    }

    pub fn clock(&self) -> Timestamp {
        self.clock
    }

    /// Move the clock forward; earlier instants are ignored.
    pub fn advance_clock(&mut self, to: Timestamp) {
        self.clock = self.clock.max(to);
    }

    pub fn limiter(&self) -> &RateLimiter {
        &self.limiter
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn message(&self, id: MessageId) -> Option<&SimMessage> {
        self.messages.get(&id)
    }

    pub fn dm_thread(&self, user_id: &str) -> Vec<&SimMessage> {
        self.dm_threads
            .get(user_id)
            .map(|ids| ids.iter().filter_map(|id| self.messages.get(id)).collect())
            .unwrap_or_default()
    }

    pub fn channel(&self, name: &str) -> Vec<&SimMessage> {
        self.channels
            .get(name)
            .map(|ids| ids.iter().filter_map(|id| self.messages.get(id)).collect())
            .unwrap_or_default()
    }

    pub fn record_inbound(&mut self, event: &GuildEvent) {
        self.transcript.push(TranscriptEntry {
            at: event.at,
            seq: 0,
            direction: Direction::In,
            event: Some(event.clone()),
            action: None,
            message_id: None,
            route: None,
        });
    }

    /// Why a click would be refused before reaching the bot, if it would.
    pub fn check_click(&self, from: &UserRef, message_id: MessageId, component_id: &str) -> Result<(), Rejection> {
        let reject = |code: &'static str, message: &str| Err(Rejection { code, message: message.into() });
        let Some(msg) = self.messages.get(&message_id) else {
            return reject("TARGET_MISSING", "That message does not exist.");
        };
        if let Location::Dm(owner) = &msg.location {
            if owner != &from.user_id {
                return reject("FOREIGN_MESSAGE", "That message belongs to someone else.");
            }
        }
        match msg.components.iter().find(|c| c.button.component_id == component_id) {
            None => reject("UNKNOWN_COMPONENT", "That button is not part of this message."),
            Some(c) if !c.enabled => reject("ALREADY_ANSWERED", "This message no longer accepts answers."),
            Some(_) => Ok(()),
        }
    }

    /// Latest DM to `user_id` that carries `component_id`.
    pub fn find_component(&self, user_id: &str, component_id: &str) -> Option<MessageId> {
        self.dm_threads.get(user_id)?.iter().rev().copied().find(|id| {
            self.messages[id]
                .components
                .iter()
                .any(|c| c.button.component_id == component_id)
        })
    }

    fn new_message(&mut self, location: Location, body: String, components: &[Button], embed: Option<Embed>, at: Timestamp) -> MessageId {
        let id = MessageId(self.next_id);
        self.next_id += 1;
        match &location {
            Location::Dm(user) => self.dm_threads.entry(user.clone()).or_default().push(id),
            Location::Channel(name) => self.channels.entry(name.clone()).or_default().push(id),
        }
        self.messages.insert(
            id,
            SimMessage {
                id,
                location,
                body,
                components: components
                    .iter()
                    .map(|b| SimComponent {
                        button: b.clone(),
                        enabled: true,
                    })
                    .collect(),
                embed,
                at,
            },
        );
        id
    }

    fn require_user(&self, user_id: &str) -> Result<(), GatewayError> {
        if self.users.contains_key(user_id) {
            Ok(())
        } else {
            Err(GatewayError::TargetMissing(user_id.into()))
        }
    }
}

impl PlatformAdapter for SimGuild {
    fn now(&self) -> Timestamp {
        self.clock
    }

    fn apply(&mut self, action: &OutboundAction, now: Timestamp) -> Result<Option<MessageId>, GatewayError> {
        self.advance_clock(now);
        let now = self.clock;
        let location = match action {
            OutboundAction::SendDm { to, .. } | OutboundAction::SendEmbed { to, .. } | OutboundAction::EphemeralReply { to, .. } => {
                self.require_user(to)?;
                None
            }
            OutboundAction::SendChannel { channel, .. } => {
                if !self.channels.contains_key(channel) {
                    return Err(GatewayError::TargetMissing(channel.clone()));
                }
                None
            }
            OutboundAction::DisableComponents { message_id } => Some(
                self.messages
                    .get(message_id)
                    .ok_or_else(|| GatewayError::TargetMissing(message_id.to_string()))?
                    .location
                    .clone(),
            ),
        };
        let key = route_of(action, location.as_ref()).expect("location resolved above");
        let granted_at = match self.limiter.acquire(&key, now)? {
            Admission::Wait(retry_after) => return Err(GatewayError::RateDeferred { retry_after }),
            Admission::Permit(p) => p.granted_at,
        };

        let message_id = match action {
            OutboundAction::SendDm { to, body, components } => {
                Some(self.new_message(Location::Dm(to.clone()), body.clone(), components, None, now))
            }
            OutboundAction::SendChannel { channel, body, components } => {
                Some(self.new_message(Location::Channel(channel.clone()), body.clone(), components, None, now))
            }
            OutboundAction::SendEmbed { to, embed } => {
                Some(self.new_message(Location::Dm(to.clone()), String::new(), &[], Some(embed.clone()), now))
            }
            OutboundAction::DisableComponents { message_id } => {
                if let Some(msg) = self.messages.get_mut(message_id) {
                    for c in &mut msg.components {
                        c.enabled = false;
                    }
                }
                None
            }
            OutboundAction::EphemeralReply { .. } => None,
        };
        self.transcript.push(TranscriptEntry {
            at: granted_at,
            seq: 0,
            direction: Direction::Out,
            event: None,
            action: Some(action.clone()),
            message_id,
            route: Some(RouteRecord {
                method: key.method,
                template: key.template().to_string(),
                major: key.major().map(str::to_string),
            }),
        });
        Ok(message_id)
    }
}

/// A scenario event; users are referenced by id and a click may omit the
/// message id, in which case the latest DM carrying the component is used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScenarioEvent {
    DirectMessage {
        from: String,
        text: String,
    },
    SlashCommand {
        from: String,
        name: String,
        #[serde(default)]
        args: BTreeMap<String, String>,
    },
    ButtonClick {
        from: String,
        #[serde(default)]
        message_id: Option<MessageId>,
        component_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioStep {
    pub at: Timestamp,
    pub event: ScenarioEvent,
}

pub fn parse_scenario(text: &str) -> Result<Vec<ScenarioStep>, serde_json::Error> {
    serde_json::from_str(text)
}

/// Guild plus bot on one virtual clock: the single-owner event loop.
pub struct Harness {
    guild: SimGuild,
    bot: Bot,
    deferred: VecDeque<OutboundAction>,
    retry_at: Option<Timestamp>,
    dropped: Vec<(Timestamp, OutboundAction, String)>,
}

const MIN_RETRY: TimeDelta = TimeDelta::milliseconds(1);

impl Harness {
    pub fn new(
        course: CourseData,
        sink: Arc<dyn RecordSink>,
        limiter: LimiterConfig,
        start: Timestamp,
    ) -> Result<Self, GatewayError> {
        let limiter = Arc::new(RateLimiter::new(limiter)?);
        let mut guild = SimGuild::new(start, limiter);
        for u in course.student_refs().into_iter().chain(course.instructor_refs()) {
            guild.add_user(u);
        }
        let bot = Bot::new(course, sink)?;
        Ok(Self {
            guild,
            bot,
            deferred: VecDeque::new(),
            retry_at: None,
            dropped: Vec::new(),
        })
    }

    pub fn guild(&self) -> &SimGuild {
        &self.guild
    }

    pub fn guild_mut(&mut self) -> &mut SimGuild {
        &mut self.guild
    }

    pub fn bot(&self) -> &Bot {
        &self.bot
    }

    pub fn bot_mut(&mut self) -> &mut Bot {
        &mut self.bot
    }

    pub fn transcript(&self) -> &Transcript {
        self.guild.transcript()
    }

    pub fn now(&self) -> Timestamp {
        self.guild.clock()
    }

    pub fn pending_actions(&self) -> usize {
        self.deferred.len()
    }

    /// Actions that could not be applied because their target vanished.
    pub fn dropped(&self) -> &[(Timestamp, OutboundAction, String)] {
        &self.dropped
    }

    /// Earliest instant at which the loop has work without new events.
    pub fn next_wakeup(&self) -> Option<Timestamp> {
        match (self.retry_at, self.bot.next_due()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Run deferred retries and scheduler triggers up to `t`, then set the clock to `t`.
    pub fn advance_to(&mut self, t: Timestamp) -> Result<(), GatewayError> {
        while let Some(next) = self.next_wakeup().filter(|n| *n <= t) {
            let now = next.max(self.guild.clock());
            self.guild.advance_clock(now);
            let due = self.bot.tick(now)?;
            self.deferred.extend(due);
            self.flush(now)?;
        }
        self.guild.advance_clock(t);
        Ok(())
    }

    /// Drain all pending work regardless of how far the clock has to move.
    pub fn settle(&mut self) -> Result<(), GatewayError> {
        while let Some(t) = self.retry_at {
            self.advance_to(t)?;
        }
        Ok(())
    }

    fn flush(&mut self, now: Timestamp) -> Result<(), GatewayError> {
        while let Some(action) = self.deferred.front() {
            match self.guild.apply(action, now) {
                Ok(_) => {
                    self.deferred.pop_front();
                }
                Err(GatewayError::RateDeferred { retry_after }) => {
                    let wait = TimeDelta::from_std(retry_after).unwrap_or(MIN_RETRY).max(MIN_RETRY);
                    self.retry_at = Some(self.guild.clock() + wait);
                    return Ok(());
                }
                Err(GatewayError::TargetMissing(target)) => {
                    let action = self.deferred.pop_front().expect("front exists");
                    self.dropped.push((now, action, target));
                }
                Err(e) => return Err(e),
            }
        }
        self.retry_at = None;
        Ok(())
    }

    /// Deliver one event: route it through the bot and apply the resulting actions.
    pub fn deliver(&mut self, event: GuildEvent) -> Result<DispatchResult, GatewayError> {
        if event.at < self.guild.clock() {
            return Err(GatewayError::ClockRegression {
                at: event.at,
                now: self.guild.clock(),
            });
        }
        let sender = event.sender().user_id.clone();
        if self.guild.user(&sender).is_none() {
            return Err(GatewayError::UnknownUser(sender));
        }
        self.advance_to(event.at)?;
        self.guild.record_inbound(&event);

        let result = match &event.kind {
            EventKind::ButtonClick {
                from,
                message_id,
                component_id,
            } => match self.guild.check_click(from, *message_id, component_id) {
                Err(rejection) => DispatchResult {
                    actions: vec![OutboundAction::ephemeral(&from.user_id, &rejection.message)],
                    handled_by: GATEWAY.into(),
                    rejection: Some(rejection),
                },
                Ok(()) => self.bot.handle(&event),
            },
            _ => self.bot.handle(&event),
        };
        self.deferred.extend(result.actions.iter().cloned());
        if self.retry_at.is_none() {
            self.flush(event.at)?;
        }
        Ok(result)
    }

    pub fn resolve(&self, step: &ScenarioStep) -> Result<GuildEvent, GatewayError> {
        let user = |id: &str| {
            self.guild
                .user(id)
                .cloned()
                .ok_or_else(|| GatewayError::UnknownUser(id.into()))
        };
        let kind = match &step.event {
            ScenarioEvent::DirectMessage { from, text } => EventKind::DirectMessage {
                from: user(from)?,
                text: text.clone(),
            },
            ScenarioEvent::SlashCommand { from, name, args } => EventKind::SlashCommand {
                from: user(from)?,
                name: name.clone(),
                args: args.clone(),
            },
            ScenarioEvent::ButtonClick {
                from,
                message_id,
                component_id,
            } => EventKind::ButtonClick {
                from: user(from)?,
                message_id: match message_id {
                    Some(id) => *id,
                    None => self
                        .guild
                        .find_component(from, component_id)
                        .ok_or_else(|| GatewayError::UnresolvedComponent(component_id.clone()))?,
                },
                component_id: component_id.clone(),
            },
        };
        Ok(GuildEvent { at: step.at, kind })
    }

    /// Play a scenario from the current clock and return the transcript.
    pub fn run_script(&mut self, scenario: &[ScenarioStep]) -> Result<&Transcript, GatewayError> {
        let mut now = self.guild.clock();
        for (index, step) in scenario.iter().enumerate() {
            if step.at < now {
                return Err(GatewayError::NonMonotoneScenario { index, at: step.at, now });
            }
            now = step.at;
        }
        for step in scenario {
            let event = self.resolve(step)?;
            self.deliver(event)?;
        }
        Ok(self.guild.transcript())
    }
}
