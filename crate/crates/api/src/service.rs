//! The guild event loop behind the HTTP API.
//!
//! One OS thread owns the [`Harness`]. Handlers send it closures and await
//! the reply, so every mutation is serialized with scheduler ticks and no
//! handler ever holds a reference into live state. The change counter is
//! published on a watch channel for long-polling.

use std::path::PathBuf;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use chrono::Utc;
use coursebot_core::course::CourseData;
use coursebot_core::gateway::{GatewayError, Harness};
use coursebot_core::rate_limit::LimiterConfig;
use coursebot_core::store::{DataStore, RecordSink, StoreError};
use coursebot_core::{GuildEvent, Timestamp, UserRef};
use thiserror::Error;
use tokio::sync::{oneshot, watch};

pub type Clock = Arc<dyn Fn() -> Timestamp + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(Utc::now)
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("course data declares no instructor to act on behalf of the API")]
    NoInstructor,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("the event loop has stopped")]
    Stopped,
}

type Job = Box<dyn FnOnce(&mut Harness, Timestamp) + Send>;

enum Request {
    Job(Job),
    Shutdown,
}

pub struct ServiceConfig {
    pub course: CourseData,
    pub data_dir: PathBuf,
    pub limiter: LimiterConfig,
    pub catch_up: bool,
    pub tick: Duration,
}

/// Cheap handle to the running loop.
#[derive(Clone)]
pub struct Service {
    tx: mpsc::Sender<Request>,
    seq: watch::Receiver<u64>,
    api_user: UserRef,
    data_dir: PathBuf,
    thread: Arc<Mutex<Option<JoinHandle<()>>>>,
}

impl Service {
    /// Build the harness, resume from persisted trigger state and start the loop.
    ///
    /// Triggers that fell due while the service was down are skipped unless
    /// `catch_up` is set.
    pub fn start(config: ServiceConfig, clock: Clock) -> Result<Self, ServiceError> {
        let api_user = config
            .course
            .instructor_refs()
            .into_iter()
            .next()
            .ok_or(ServiceError::NoInstructor)?;
        let store = DataStore::new(&config.data_dir);
        let fired = store.load_fired()?;
        let sink: Arc<dyn RecordSink> = Arc::new(store);
        let now = clock();
        let mut harness = Harness::new(config.course, sink, config.limiter, now)?;
        harness.bot_mut().resume(fired.iter().map(|(id, _)| id.as_str()));
        if !config.catch_up {
            let skipped = harness.bot_mut().skip_before(now);
            if skipped > 0 {
                tracing::info!(skipped, "skipped triggers that fell due while stopped");
            }
        }

        let (tx, rx) = mpsc::channel::<Request>();
        let (seq_tx, seq_rx) = watch::channel(harness.bot().state.changes.last_seq());
        let tick = config.tick;
        let stopper = api_user.clone();
        let thread = std::thread::Builder::new()
            .name("guild-loop".into())
            .spawn(move || run_loop(harness, rx, seq_tx, clock, tick, stopper))
            .expect("spawn event loop thread");
        Ok(Self {
            tx,
            seq: seq_rx,
            api_user,
            data_dir: config.data_dir,
            thread: Arc::new(Mutex::new(Some(thread))),
        })
    }

    /// The instructor on whose behalf API mutations are issued.
    pub fn api_user(&self) -> &UserRef {
        &self.api_user
    }

    pub fn data_dir(&self) -> &PathBuf {
        &self.data_dir
    }

    pub fn changes(&self) -> watch::Receiver<u64> {
        self.seq.clone()
    }

    /// Run `f` on the loop thread with the current time and return its result.
    pub async fn call<R, F>(&self, f: F) -> Result<R, ServiceError>
    where
        R: Send + 'static,
        F: FnOnce(&mut Harness, Timestamp) -> R + Send + 'static,
    {
        let (reply, rx) = oneshot::channel();
        let job: Job = Box::new(move |h, now| {
            let _ = reply.send(f(h, now));
        });
        self.tx.send(Request::Job(job)).map_err(|_| ServiceError::Stopped)?;
        rx.await.map_err(|_| ServiceError::Stopped)
    }

    /// Deliver an event built at the loop's current time.
    pub async fn deliver<F>(&self, build: F) -> Result<coursebot_core::dispatch::DispatchResult, ServiceError>
    where
        F: FnOnce(&Harness, Timestamp) -> Result<GuildEvent, GatewayError> + Send + 'static,
    {
        self.call(move |h, now| {
            let event = build(h, now)?;
            h.deliver(event)
        })
        .await?
        .map_err(ServiceError::from)
    }

    /// Stop the loop, closing open attendance sessions so their rows reach disk.
    /// Blocks until the loop thread exits.
    pub fn shutdown(&self) {
        let _ = self.tx.send(Request::Shutdown);
        let handle = self.thread.lock().expect("thread handle lock").take();
        if let Some(handle) = handle {
            let _ = handle.join();
        }
    }
}

fn run_loop(
    mut harness: Harness,
    rx: mpsc::Receiver<Request>,
    seq: watch::Sender<u64>,
    clock: Clock,
    tick: Duration,
    api_user: UserRef,
) {
    let now_of = |h: &Harness| clock().max(h.now());
    loop {
        let request = rx.recv_timeout(tick);
        let now = now_of(&harness);
        if let Err(e) = harness.advance_to(now) {
            tracing::error!(error = %e, "advancing the guild clock failed");
        }
        match request {
            Ok(Request::Job(job)) => job(&mut harness, now),
            Ok(Request::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
            Err(RecvTimeoutError::Timeout) => {}
        }
        seq.send_replace(harness.bot().state.changes.last_seq());
    }

    let now = now_of(&harness);
    let open: Vec<String> = harness
        .bot()
        .state
        .attendance
        .sessions()
        .iter()
        .filter(|s| s.is_open())
        .map(|s| s.activity.id.clone())
        .collect();
    for activity_id in open {
        let event = GuildEvent::slash_command(now, &api_user, "attendance-stop", [("activity_id", activity_id.as_str())]);
        match harness.deliver(event) {
            Ok(r) if r.is_rejected() => tracing::warn!(activity_id, "closing attendance on shutdown was rejected"),
            Ok(_) => tracing::info!(activity_id, "closed open attendance session on shutdown"),
            Err(e) => tracing::error!(error = %e, activity_id, "closing attendance on shutdown failed"),
        }
    }
    if let Err(e) = harness.settle() {
        tracing::error!(error = %e, "draining deferred actions failed");
    }
    seq.send_replace(harness.bot().state.changes.last_seq());
}
