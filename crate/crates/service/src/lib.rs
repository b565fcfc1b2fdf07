//! Session orchestration for crowdsourced MUSHRA campaigns.
//!
//! [`Service`] serializes every mutation through one lock and one event log
//! writer. The HTTP layer in [`http`] and the in-process simulator both call
//! the same methods.

pub mod engine;
pub mod error;
pub mod events;
pub mod export;
pub mod http;
pub mod store;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use crowdmushra_core::config::{ExperimentConfig, Manifest};
use crowdmushra_core::model::{ExperimentId, SlotLabel};

pub use engine::{ClientRating, Engine, SessionId, SessionView, Step, StepPayload};
pub use error::ServiceError;
pub use events::{AdminAction, Event, EventRecord};
pub use export::ExportFlavor;
use engine::Decision;
use store::EventLog;

pub trait Clock: Send + Sync {
    /// Unix seconds.
    fn now(&self) -> u64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: u64) -> Self {
        Self(AtomicU64::new(start))
    }

    pub fn advance(&self, seconds: u64) {
        self.0.fetch_add(seconds, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

struct Inner {
    engine: Engine,
    log: EventLog,
}

pub struct Service {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
    audio_root: PathBuf,
}

impl Service {
    pub fn in_memory(clock: Arc<dyn Clock>, audio_root: impl Into<PathBuf>) -> Self {
        Self {
            inner: Mutex::new(Inner {
                engine: Engine::new(),
                log: EventLog::in_memory(),
            }),
            clock,
            audio_root: audio_root.into(),
        }
    }

    /// Opens the log at `log_path` and rebuilds state by replaying it.
    pub fn open(
        log_path: &Path,
        clock: Arc<dyn Clock>,
        audio_root: impl Into<PathBuf>,
    ) -> Result<Self, ServiceError> {
        let log = EventLog::open(log_path)?;
        let engine = replay(log.records())?;
        Ok(Self {
            inner: Mutex::new(Inner { engine, log }),
            clock,
            audio_root: audio_root.into(),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// A copy of the current state, for inspection and replay checks.
    pub fn snapshot(&self) -> Engine {
        self.lock().engine.clone()
    }

    pub fn events(&self) -> Vec<EventRecord> {
        self.lock().log.records().to_vec()
    }

    pub fn event_count(&self) -> usize {
        self.lock().log.records().len()
    }

    pub fn with_engine<T>(&self, f: impl FnOnce(&Engine) -> T) -> T {
        f(&self.lock().engine)
    }

    fn commit(&self, inner: &mut Inner, decision: Decision) -> Result<Option<SessionId>, ServiceError> {
        match decision {
            Decision::Append {
                session_id,
                idempotency_key,
                event,
            } => {
                let record = EventRecord {
                    seq: inner.log.next_seq(),
                    timestamp: self.clock.now(),
                    session_id: session_id.clone(),
                    idempotency_key,
                    event,
                };
                if let Err(e) = inner.engine.apply(&record) {
                    // the event never reaches the log; drop any partial mutation
                    inner.engine = replay(inner.log.records())?;
                    return Err(e);
                }
                if let Err(e) = inner.log.append(record) {
                    inner.engine = replay(inner.log.records())?;
                    return Err(e);
                }
                Ok(session_id)
            }
            Decision::Existing(sid) => Ok(Some(sid)),
            Decision::Replayed(view) => Ok(Some(view.session_id)),
        }
    }

    pub fn create_experiment(&self, config: ExperimentConfig, manifest: Manifest) -> Result<(), ServiceError> {
        let mut inner = self.lock();
        let d = inner.engine.decide_create_experiment(config, manifest)?;
        self.commit(&mut inner, d).map(|_| ())
    }

    pub fn admin(&self, experiment_id: &ExperimentId, action: AdminAction) -> Result<(), ServiceError> {
        let mut inner = self.lock();
        let d = inner.engine.decide_admin(experiment_id, action)?;
        self.commit(&mut inner, d).map(|_| ())
    }

    /// Records expiry for a session idle past its timeout. Returns whether it expired.
    fn expire_if_idle(&self, inner: &mut Inner, sid: &SessionId) -> Result<bool, ServiceError> {
        let now = self.clock.now();
        let idle = inner
            .engine
            .sessions
            .get(sid)
            .is_some_and(|s| inner.engine.is_idle(s, now));
        if idle {
            self.commit(
                inner,
                Decision::Append {
                    session_id: Some(sid.clone()),
                    idempotency_key: None,
                    event: Event::SessionExpired,
                },
            )?;
        }
        Ok(idle)
    }

    /// Expires every idle session; returns how many were expired.
    pub fn expire_idle(&self) -> Result<usize, ServiceError> {
        let mut inner = self.lock();
        let idle = inner.engine.idle_sessions(self.clock.now());
        for sid in &idle {
            self.expire_if_idle(&mut inner, sid)?;
        }
        Ok(idle.len())
    }

    pub fn create_session(&self, experiment_id: &ExperimentId, worker: &str) -> Result<SessionView, ServiceError> {
        let mut inner = self.lock();
        if let Some(sid) = inner
            .engine
            .experiments
            .get(experiment_id)
            .and_then(|e| e.workers.get(worker))
            .cloned()
        {
            self.expire_if_idle(&mut inner, &sid)?;
        }
        let d = inner.engine.decide_create_session(experiment_id, worker)?;
        let sid = self.commit(&mut inner, d)?.expect("session decision");
        inner.engine.view(&sid)
    }

    pub fn current_step(&self, sid: &SessionId) -> Result<SessionView, ServiceError> {
        let mut inner = self.lock();
        self.expire_if_idle(&mut inner, sid)?;
        inner.engine.view(sid)
    }

    pub fn submit(
        &self,
        sid: &SessionId,
        idempotency_key: Option<String>,
        payload: StepPayload,
    ) -> Result<SessionView, ServiceError> {
        let mut inner = self.lock();
        let d = inner.engine.decide_submit(sid, idempotency_key, payload)?;
        if let Decision::Replayed(view) = d {
            return Ok(view);
        }
        if self.expire_if_idle(&mut inner, sid)? {
            return Err(ServiceError::Gone(format!("session {sid} timed out")));
        }
        self.commit(&mut inner, d)?;
        inner.engine.view(sid)
    }

    /// Filesystem path of a stimulus the session may currently play.
    pub fn stimulus_file(&self, sid: &SessionId, slot: &SlotLabel) -> Result<PathBuf, ServiceError> {
        let rel = self.lock().engine.stimulus_path(sid, slot)?;
        self.resolve_audio(&rel)
    }

    pub fn hearing_file(&self, sid: &SessionId, index: usize) -> Result<PathBuf, ServiceError> {
        let rel = self.lock().engine.hearing_path(sid, index)?;
        self.resolve_audio(&rel)
    }

    fn resolve_audio(&self, rel: &str) -> Result<PathBuf, ServiceError> {
        let rel = Path::new(rel);
        if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(ServiceError::NotFound("stimulus".into()));
        }
        Ok(self.audio_root.join(rel))
    }

    pub fn export(&self, experiment_id: &ExperimentId, flavor: ExportFlavor) -> Result<(Vec<u8>, &'static str), ServiceError> {
        export::export(&self.lock().engine, experiment_id, flavor)
    }
}

/// Rebuilds state from a sequence of records.
pub fn replay(records: &[EventRecord]) -> Result<Engine, ServiceError> {
    let mut engine = Engine::new();
    for r in records {
        engine.apply(r)?;
    }
    Ok(engine)
}
