//! Slash-command registry and event routing.
//!
//! Slash commands are validated against their argument schema and
//! permission before the handler runs. Direct messages go to the message
//! router and button clicks to the survey engine. A rejected dispatch
//! produces exactly one ephemeral reply and leaves state untouched.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EventKind, GuildEvent, MessageId, OutboundAction, Timestamp, UserRef};

pub const MESSAGE_ROUTER: &str = "message-router";
pub const SURVEY_ROUTER: &str = "survey-engine";
pub const DISPATCHER: &str = "dispatcher";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ArgType {
    String,
    Int,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ArgType,
    pub required: bool,
}

impl ArgSpec {
    pub fn required(name: &str, ty: ArgType) -> Self {
        Self { name: name.into(), ty, required: true }
    }

    pub fn optional(name: &str, ty: ArgType) -> Self {
        Self { name: name.into(), ty, required: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Permission {
    InstructorOnly,
    Everyone,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandSpec {
    pub name: String,
    pub arg_schema: Vec<ArgSpec>,
    pub permission: Permission,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegisterError {
    #[error("command `{0}` is already registered")]
    DuplicateCommand(String),
    #[error("command `{0}`: required arguments must precede optional ones")]
    SchemaOrder(String),
    #[error("command name `{0}` must be lowercase without spaces")]
    InvalidName(String),
}

impl RegisterError {
    pub fn code(&self) -> &'static str {
        match self {
            RegisterError::DuplicateCommand(_) => "DUPLICATE_COMMAND",
            RegisterError::SchemaOrder(_) => "SCHEMA_ORDER",
            RegisterError::InvalidName(_) => "INVALID_NAME",
        }
    }
}

/// A handler or router rejection, surfaced to the sender as one ephemeral reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandError {
    pub code: &'static str,
    pub message: String,
}

impl CommandError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl fmt::Display for CommandError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

pub struct CommandCall<'a> {
    pub from: &'a UserRef,
    pub name: &'a str,
    pub args: &'a BTreeMap<String, String>,
    pub at: Timestamp,
}

impl CommandCall<'_> {
    pub fn arg(&self, name: &str) -> Option<&str> {
        self.args.get(name).map(String::as_str)
    }
}

pub type HandlerResult = Result<Vec<OutboundAction>, CommandError>;
pub type Handler<S> = Box<dyn Fn(&mut S, &CommandCall<'_>) -> HandlerResult + Send + Sync>;

/// State the dispatcher routes non-command events to.
pub trait Routes {
    fn on_direct_message(&mut self, from: &UserRef, text: &str, at: Timestamp, help: &str) -> Vec<OutboundAction>;
    fn on_button(&mut self, from: &UserRef, message_id: MessageId, component_id: &str, at: Timestamp) -> HandlerResult;
    fn owns_component(&self, component_id: &str) -> bool;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub code: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DispatchResult {
    pub actions: Vec<OutboundAction>,
    pub handled_by: String,
    pub rejection: Option<Rejection>,
}

impl DispatchResult {
    fn handled(by: &str, actions: Vec<OutboundAction>) -> Self {
        Self { actions, handled_by: by.into(), rejection: None }
    }

    fn rejected(by: &str, to: &UserRef, err: CommandError) -> Self {
        Self {
            actions: vec![OutboundAction::ephemeral(&to.user_id, &err.message)],
            handled_by: by.into(),
            rejection: Some(Rejection { code: err.code, message: err.message }),
        }
    }

    pub fn is_rejected(&self) -> bool {
        self.rejection.is_some()
    }
}

pub struct Dispatcher<S> {
    commands: BTreeMap<String, (CommandSpec, Handler<S>)>,
}

impl<S> Default for Dispatcher<S> {
    fn default() -> Self {
        Self { commands: BTreeMap::new() }
    }
}

impl<S: Routes> Dispatcher<S> {
    pub fn register(
        &mut self,
        spec: CommandSpec,
        handler: impl Fn(&mut S, &CommandCall<'_>) -> HandlerResult + Send + Sync + 'static,
    ) -> Result<(), RegisterError> {
        if spec.name.is_empty() || spec.name.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
            return Err(RegisterError::InvalidName(spec.name));
        }
        if self.commands.contains_key(&spec.name) {
            return Err(RegisterError::DuplicateCommand(spec.name));
        }
        if spec.arg_schema.windows(2).any(|w| !w[0].required && w[1].required) {
            return Err(RegisterError::SchemaOrder(spec.name));
        }
        self.commands.insert(spec.name.clone(), (spec, Box::new(handler)));
        Ok(())
    }

    pub fn commands(&self) -> impl Iterator<Item = &CommandSpec> {
        self.commands.values().map(|(spec, _)| spec)
    }

    /// The listing shown when a user types "/".
    pub fn command_index(&self, for_user: &UserRef) -> String {
        let mut lines = Vec::new();
        for spec in self.commands() {
            if spec.permission == Permission::InstructorOnly && !for_user.is_instructor() {
                continue;
            }
            let mut usage = format!("/{}", spec.name);
            for arg in &spec.arg_schema {
                if arg.required {
                    usage.push_str(&format!(" <{}>", arg.name));
                } else {
                    usage.push_str(&format!(" [{}]", arg.name));
                }
            }
            lines.push(format!("{usage} - {}", spec.description));
        }
        lines.join("\n")
    }

    fn validate_args(spec: &CommandSpec, args: &BTreeMap<String, String>) -> Result<(), CommandError> {
        for name in args.keys() {
            if !spec.arg_schema.iter().any(|a| &a.name == name) {
                return Err(CommandError::new("ARG_INVALID", format!("/{} has no argument `{name}`", spec.name)));
            }
        }
        for arg in &spec.arg_schema {
            match args.get(&arg.name) {
                None if arg.required => {
                    return Err(CommandError::new(
                        "ARG_INVALID",
                        format!("/{} requires argument `{}`", spec.name, arg.name),
                    ))
                }
                Some(value) if arg.ty == ArgType::Int && value.trim().parse::<i64>().is_err() => {
                    return Err(CommandError::new(
                        "ARG_INVALID",
                        format!("argument `{}` must be an integer", arg.name),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn dispatch(&self, state: &mut S, event: &GuildEvent) -> DispatchResult {
        match &event.kind {
            EventKind::SlashCommand { from, name, args } => {
                let Some((spec, handler)) = self.commands.get(name) else {
                    return DispatchResult::rejected(
                        DISPATCHER,
                        from,
                        CommandError::new("UNKNOWN_COMMAND", format!("Unknown command /{name}.")),
                    );
                };
                if spec.permission == Permission::InstructorOnly && !from.is_instructor() {
                    return DispatchResult::rejected(
                        DISPATCHER,
                        from,
                        CommandError::new("PERMISSION_DENIED", format!("/{name} is only available to instructors.")),
                    );
                }
                if let Err(e) = Self::validate_args(spec, args) {
                    return DispatchResult::rejected(DISPATCHER, from, e);
                }
                let call = CommandCall { from, name, args, at: event.at };
                match handler(state, &call) {
                    Ok(actions) => DispatchResult::handled(name, actions),
                    Err(e) => DispatchResult::rejected(name, from, e),
                }
            }
            EventKind::DirectMessage { from, text } => {
                let help = self.command_index(from);
                DispatchResult::handled(MESSAGE_ROUTER, state.on_direct_message(from, text, event.at, &help))
            }
            EventKind::ButtonClick { from, message_id, component_id } => {
                if !state.owns_component(component_id) {
                    return DispatchResult::rejected(
                        DISPATCHER,
                        from,
                        CommandError::new("UNKNOWN_COMPONENT", "This button is not handled by the bot."),
                    );
                }
                match state.on_button(from, *message_id, component_id, event.at) {
                    Ok(actions) => DispatchResult::handled(SURVEY_ROUTER, actions),
                    Err(e) => DispatchResult::rejected(SURVEY_ROUTER, from, e),
                }
            }
        }
    }
}
