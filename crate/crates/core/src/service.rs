//! Live-session engine: scores incoming turns, keeps the rolling pair window,
//! issues topic recommendations once the window is full, records selections
//! and writes an append-only NDJSON log per session.
//!
//! The engine is transport-agnostic. [`SessionEngine::handle`] maps one
//! inbound [`WireMessage`] to the replies a client should receive, so the
//! HTTP server, the in-process simulator and tests drive the same code.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Algorithm, Transition};
use crate::alliance::{AllianceError, BoundInventory, Inventory, Scale};
use crate::corpus::{pair_turns, Condition, Session, Speaker, Turn};
use crate::embed::Embedder;
use crate::recsys::{frame_state, recommend, Annotator, Model, PairFeatures, RecsysError, FRAME_PAIRS};
use crate::topics::ActionSpaceKind;

pub const DEFAULT_TOP_N: usize = 3;
pub const LOG_EXTENSION: &str = "ndjson";

/// Source of wall-clock milliseconds, injectable for reproducible logs.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Starts at a fixed instant and advances by `step` on every reading.
pub struct SteppingClock {
    next: AtomicU64,
    step: u64,
}

impl SteppingClock {
    pub fn new(start: u64, step: u64) -> Self {
        Self {
            next: AtomicU64::new(start),
            step,
        }
    }
}

impl Clock for SteppingClock {
    fn now_ms(&self) -> u64 {
        self.next.fetch_add(self.step, Ordering::SeqCst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    UnknownSession,
    UnknownInventory,
    EmptyText,
    TopicRange,
    NoPendingRecommendation,
    StaleRound,
    Io,
    Internal,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("unknown inventory {0:?}")]
    UnknownInventory(String),
    #[error("inventory {0:?} is already registered")]
    DuplicateInventory(String),
    #[error("turn text is empty")]
    EmptyText,
    #[error("topic {topic} outside [0, {k})")]
    TopicRange { topic: usize, k: usize },
    #[error("no recommendation is pending")]
    NoPendingRecommendation,
    #[error("selection names round {got}, current round is {current}")]
    StaleRound { got: u32, current: u32 },
    #[error("malformed message: {0}")]
    BadMessage(String),
    #[error(transparent)]
    Alliance(#[from] AllianceError),
    #[error(transparent)]
    Recsys(#[from] RecsysError),
    #[error("session log: {0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ServiceError::UnknownSession(_) => ErrorCode::UnknownSession,
            ServiceError::UnknownInventory(_) | ServiceError::DuplicateInventory(_) => ErrorCode::UnknownInventory,
            ServiceError::EmptyText => ErrorCode::EmptyText,
            ServiceError::TopicRange { .. } => ErrorCode::TopicRange,
            ServiceError::NoPendingRecommendation => ErrorCode::NoPendingRecommendation,
            ServiceError::StaleRound { .. } => ErrorCode::StaleRound,
            ServiceError::BadMessage(_) => ErrorCode::BadMessage,
            ServiceError::Io(_) => ErrorCode::Io,
            ServiceError::Alliance(_) | ServiceError::Recsys(_) => ErrorCode::Internal,
        }
    }

    pub fn to_message(&self) -> WireMessage {
        WireMessage::Error {
            code: self.code(),
            detail: self.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedTopic {
    pub topic_id: usize,
    pub label: String,
    pub score: f64,
}

/// Configuration echoed back when a session opens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub inventory: String,
    pub items: usize,
    pub top_n: usize,
    pub window: usize,
    pub topics: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    /// Accepted turns, counting merged ones individually.
    pub turns: usize,
    pub pairs: usize,
    pub recommendations: usize,
    pub selections: usize,
    /// Mean scale scores over the session's patient turns after merging,
    /// null without patient turns.
    pub mean_task: Option<f64>,
    pub mean_bond: Option<f64>,
    pub mean_goal: Option<f64>,
}

/// One record of the wire protocol, discriminated by `type`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Hello {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inventory: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        top_n: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        condition: Option<Condition>,
    },
    Turn {
        session_id: String,
        speaker: Speaker,
        text: String,
    },
    Annotation {
        session_id: String,
        turn_index: u32,
        task: f64,
        bond: f64,
        goal: f64,
        topic_id: usize,
    },
    Recommendation {
        session_id: String,
        round: u32,
        ranked: Vec<RankedTopic>,
    },
    Select {
        session_id: String,
        round: u32,
        topic_id: usize,
    },
    Ack {
        session_id: String,
        detail: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config: Option<SessionConfig>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        summary: Option<SessionSummary>,
    },
    Error {
        code: ErrorCode,
        detail: String,
    },
    End {
        session_id: String,
    },
}

impl WireMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::Hello { .. } => "hello",
            WireMessage::Turn { .. } => "turn",
            WireMessage::Annotation { .. } => "annotation",
            WireMessage::Recommendation { .. } => "recommendation",
            WireMessage::Select { .. } => "select",
            WireMessage::Ack { .. } => "ack",
            WireMessage::Error { .. } => "error",
            WireMessage::End { .. } => "end",
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("wire messages always serialize")
    }

    pub fn from_line(line: &str) -> Result<Self, ServiceError> {
        serde_json::from_str(line.trim()).map_err(|e| ServiceError::BadMessage(e.to_string()))
    }
}

/// Engine health and loaded-model metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineInfo {
    pub status: String,
    pub model_format: String,
    pub model_version: u32,
    pub algorithm: Algorithm,
    pub scale: Scale,
    pub action_space: ActionSpaceKind,
    pub topics: usize,
    pub labels: Vec<String>,
    pub state_dimension: usize,
    pub window: usize,
    pub inventories: Vec<String>,
    pub open_sessions: usize,
}

/// A recommendation round waiting for the therapist's reply.
#[derive(Clone, Debug, PartialEq)]
struct Round {
    number: u32,
    /// Index of the pair whose therapist turn answers the round.
    pair: usize,
    state: Vec<f64>,
    selected: Option<usize>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogRecord<'a> {
    Turn {
        session_id: &'a str,
        index: u32,
        speaker: Speaker,
        text: &'a str,
        timestamp: u64,
        #[serde(skip_serializing_if = "Option::is_none")]
        condition: Option<Condition>,
    },
    Annotation {
        session_id: &'a str,
        turn_index: u32,
        task: f64,
        bond: f64,
        goal: f64,
        topic_id: usize,
        timestamp: u64,
    },
    Recommendation {
        session_id: &'a str,
        round: u32,
        ranked: &'a [RankedTopic],
        timestamp: u64,
    },
    Selection {
        session_id: &'a str,
        round: u32,
        topic_id: usize,
        state: &'a [f64],
        timestamp: u64,
    },
    End {
        session_id: &'a str,
        summary: &'a SessionSummary,
        timestamp: u64,
    },
}

struct LiveSession {
    id: String,
    condition: Option<Condition>,
    inventory: Arc<BoundInventory>,
    top_n: usize,
    created_ms: u64,
    turns: Vec<Turn>,
    /// Features of completed pairs keyed by pair index, recomputed when a
    /// merge changes a pair's text.
    pair_cache: Vec<(String, String, PairFeatures)>,
    rounds: Vec<Round>,
    log: Vec<String>,
    file: Option<File>,
}

impl LiveSession {
    fn session(&self) -> Session {
        Session {
            session_id: self.id.clone(),
            condition: self.condition.unwrap_or_default(),
            turns: self.turns.clone(),
        }
    }

    fn append(&mut self, record: &LogRecord<'_>) -> Result<(), ServiceError> {
        let line = serde_json::to_string(record).map_err(|e| ServiceError::BadMessage(e.to_string()))?;
        if let Some(file) = self.file.as_mut() {
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
            file.flush()?;
        }
        self.log.push(line);
        Ok(())
    }
}

struct Shared {
    model: Model,
    /// The model's own inventory, bound to its embedder; state features always
    /// use it so they match training.
    features: BoundInventory,
    inventories: RwLock<BTreeMap<String, Arc<BoundInventory>>>,
}

/// Serves many sessions at once. Models are shared read-only; each session
/// is guarded by its own lock so its messages are handled in arrival order.
pub struct SessionEngine {
    shared: Arc<Shared>,
    sessions: Mutex<HashMap<String, Arc<Mutex<LiveSession>>>>,
    clock: Arc<dyn Clock>,
    log_dir: Option<PathBuf>,
    next_id: AtomicU64,
    default_top_n: usize,
}

impl SessionEngine {
    pub fn new(model: Model) -> Self {
        let features = model.bound_inventory();
        let mut inventories = BTreeMap::new();
        inventories.insert(model.inventory.name().to_string(), Arc::new(features.clone()));
        Self {
            shared: Arc::new(Shared {
                model,
                features,
                inventories: RwLock::new(inventories),
            }),
            sessions: Mutex::new(HashMap::new()),
            clock: Arc::new(SystemClock),
            log_dir: None,
            next_id: AtomicU64::new(1),
            default_top_n: DEFAULT_TOP_N,
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Writes each session's log to `<dir>/<session_id>.ndjson`.
    pub fn with_log_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.log_dir = Some(dir.into());
        self
    }

    pub fn with_top_n(mut self, top_n: usize) -> Self {
        self.default_top_n = top_n.max(1);
        self
    }

    pub fn model(&self) -> &Model {
        &self.shared.model
    }

    pub fn log_path(&self, session_id: &str) -> Option<PathBuf> {
        self.log_dir
            .as_ref()
            .map(|d| d.join(format!("{session_id}.{LOG_EXTENSION}")))
    }

    /// Makes `inventory` selectable by name in `hello`.
    pub fn register_inventory(&self, inventory: Inventory) -> Result<(), ServiceError> {
        let mut map = self.shared.inventories.write().expect("inventory registry poisoned");
        let name = inventory.name().to_string();
        if map.contains_key(&name) {
            return Err(ServiceError::DuplicateInventory(name));
        }
        map.insert(name, Arc::new(inventory.bind(&self.shared.model.embedder)));
        Ok(())
    }

    pub fn info(&self) -> EngineInfo {
        let model = &self.shared.model;
        EngineInfo {
            status: "ok".into(),
            model_format: model.format.clone(),
            model_version: model.version,
            algorithm: model.agent.algorithm(),
            scale: model.config.scale,
            action_space: model.action_space.kind(),
            topics: model.topics.k(),
            labels: model.topics.labels().to_vec(),
            state_dimension: model.agent.state_dimension(),
            window: FRAME_PAIRS,
            inventories: self
                .shared
                .inventories
                .read()
                .expect("inventory registry poisoned")
                .keys()
                .cloned()
                .collect(),
            open_sessions: self.sessions.lock().expect("session registry poisoned").len(),
        }
    }

    /// Dispatches one client message; replies come back in send order.
    /// Failures become a single `error` reply.
    pub fn handle(&self, message: WireMessage) -> Vec<WireMessage> {
        let result = match message {
            WireMessage::Hello {
                inventory,
                top_n,
                condition,
            } => self
                .open(inventory.as_deref(), top_n, condition)
                .map(|(session_id, config)| {
                    vec![WireMessage::Ack {
                        session_id,
                        detail: "session opened".into(),
                        config: Some(config),
                        summary: None,
                    }]
                }),
            WireMessage::Turn {
                session_id,
                speaker,
                text,
            } => self.submit_turn(&session_id, speaker, &text),
            WireMessage::Select {
                session_id,
                round,
                topic_id,
            } => self.select(&session_id, round, topic_id).map(|detail| {
                vec![WireMessage::Ack {
                    session_id,
                    detail,
                    config: None,
                    summary: None,
                }]
            }),
            WireMessage::End { session_id } => self.close(&session_id).map(|summary| {
                vec![WireMessage::Ack {
                    session_id,
                    detail: "session closed".into(),
                    config: None,
                    summary: Some(summary),
                }]
            }),
            other => Err(ServiceError::BadMessage(format!(
                "clients may not send {:?} messages",
                other.kind()
            ))),
        };
        result.unwrap_or_else(|e| vec![e.to_message()])
    }

    pub fn open(
        &self,
        inventory: Option<&str>,
        top_n: Option<usize>,
        condition: Option<Condition>,
    ) -> Result<(String, SessionConfig), ServiceError> {
        let bound = {
            let map = self.shared.inventories.read().expect("inventory registry poisoned");
            let name = inventory.unwrap_or(self.shared.model.inventory.name());
            map.get(name)
                .cloned()
                .ok_or_else(|| ServiceError::UnknownInventory(name.to_string()))?
        };
        let top_n = top_n
            .unwrap_or(self.default_top_n)
            .clamp(1, self.shared.model.topics.k());
        let id = self.fresh_id();
        let file = match self.log_path(&id) {
            Some(path) => Some(open_log(&path)?),
            None => None,
        };
        let config = SessionConfig {
            inventory: bound.inventory().name().to_string(),
            items: bound.inventory().len(),
            top_n,
            window: FRAME_PAIRS,
            topics: self.shared.model.topics.k(),
        };
        let session = LiveSession {
            id: id.clone(),
            condition,
            inventory: bound,
            top_n,
            created_ms: self.clock.now_ms(),
            turns: Vec::new(),
            pair_cache: Vec::new(),
            rounds: Vec::new(),
            log: Vec::new(),
            file,
        };
        self.sessions
            .lock()
            .expect("session registry poisoned")
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok((id, config))
    }

    fn fresh_id(&self) -> String {
        loop {
            let n = self.next_id.fetch_add(1, Ordering::SeqCst);
            let id = format!("live-{n:06}");
            let taken = self
                .sessions
                .lock()
                .expect("session registry poisoned")
                .contains_key(&id)
                || self.log_path(&id).is_some_and(|p| p.exists());
            if !taken {
                return id;
            }
        }
    }

    fn session(&self, session_id: &str) -> Result<Arc<Mutex<LiveSession>>, ServiceError> {
        self.sessions
            .lock()
            .expect("session registry poisoned")
            .get(session_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_string()))
    }

    /// Scores and logs one turn. Replies with its annotation, an ack when it
    /// merged into the previous same-speaker turn, and a recommendation when
    /// a patient turn arrives with a full window.
    pub fn submit_turn(
        &self,
        session_id: &str,
        speaker: Speaker,
        text: &str,
    ) -> Result<Vec<WireMessage>, ServiceError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(ServiceError::EmptyText);
        }
        let handle = self.session(session_id)?;
        let mut live = handle.lock().expect("session poisoned");
        let index = live.turns.len() as u32;
        let merged = live.turns.last().is_some_and(|t| t.speaker == speaker);
        let now = self.clock.now_ms();
        let mut turn = Turn::new(session_id, index, speaker, text);
        turn.timestamp = Some(now);
        live.turns.push(turn);
        let condition = if index == 0 { live.condition } else { None };
        live.append(&LogRecord::Turn {
            session_id,
            index,
            speaker,
            text,
            timestamp: now,
            condition,
        })?;

        // The annotation scores the effective turn, i.e. the merged text.
        let effective = merged_tail(&live.turns);
        let embedder = &self.shared.model.embedder;
        let e = embedder.embed(&effective);
        let score = live.inventory.score_vector(&e.values, e.degenerate)?;
        let topic_id = self.shared.model.topics.label_embedding(&e.values);
        let [task, bond, goal] = score.triple();
        live.append(&LogRecord::Annotation {
            session_id,
            turn_index: index,
            task,
            bond,
            goal,
            topic_id,
            timestamp: now,
        })?;
        let mut replies = vec![WireMessage::Annotation {
            session_id: session_id.to_string(),
            turn_index: index,
            task,
            bond,
            goal,
            topic_id,
        }];
        if merged {
            replies.push(WireMessage::Ack {
                session_id: session_id.to_string(),
                detail: format!("turn {index} merged into the preceding {speaker} turn"),
                config: None,
                summary: None,
            });
        }

        let pairs = self.refresh_pairs(&mut live)?;
        if speaker == Speaker::Patient && !merged && pairs >= FRAME_PAIRS {
            let window: Vec<PairFeatures> = live.pair_cache[pairs - FRAME_PAIRS..]
                .iter()
                .map(|c| c.2.clone())
                .collect();
            let state = frame_state(&window, self.shared.model.topics.k());
            let ranked: Vec<RankedTopic> = recommend(
                &self.shared.model.agent,
                &self.shared.model.action_space,
                &state,
                live.top_n,
            )?
            .into_iter()
            .map(|r| RankedTopic {
                topic_id: r.topic,
                label: self.shared.model.topics.label(r.topic).to_string(),
                score: r.score,
            })
            .collect();
            let number = live.rounds.len() as u32 + 1;
            live.append(&LogRecord::Recommendation {
                session_id,
                round: number,
                ranked: &ranked,
                timestamp: now,
            })?;
            live.rounds.push(Round {
                number,
                pair: pairs,
                state,
                selected: None,
            });
            replies.push(WireMessage::Recommendation {
                session_id: session_id.to_string(),
                round: number,
                ranked,
            });
        }
        Ok(replies)
    }

    /// Recomputes features of pairs whose text changed; returns the number
    /// of completed pairs.
    fn refresh_pairs(&self, live: &mut LiveSession) -> Result<usize, ServiceError> {
        let pairs = pair_turns(&live.session());
        let annotator = Annotator {
            embedder: &self.shared.model.embedder,
            inventory: &self.shared.features,
            topics: &self.shared.model.topics,
        };
        live.pair_cache.truncate(pairs.len());
        for (i, pair) in pairs.iter().enumerate() {
            let fresh = match live.pair_cache.get(i) {
                Some((p, t, _)) => p != &pair.patient.text || t != &pair.therapist.text,
                None => true,
            };
            if fresh {
                let features = annotator.pair_features(pair)?;
                let entry = (pair.patient.text.clone(), pair.therapist.text.clone(), features);
                if i < live.pair_cache.len() {
                    live.pair_cache[i] = entry;
                } else {
                    live.pair_cache.push(entry);
                }
            }
        }
        Ok(pairs.len())
    }

    /// Records the therapist's pick for the latest round.
    pub fn select(&self, session_id: &str, round: u32, topic_id: usize) -> Result<String, ServiceError> {
        let handle = self.session(session_id)?;
        let mut live = handle.lock().expect("session poisoned");
        let k = self.shared.model.topics.k();
        if topic_id >= k {
            return Err(ServiceError::TopicRange { topic: topic_id, k });
        }
        let current = match live.rounds.last() {
            Some(r) if r.selected.is_none() => r.number,
            _ => return Err(ServiceError::NoPendingRecommendation),
        };
        if round != current {
            return Err(ServiceError::StaleRound { got: round, current });
        }
        let now = self.clock.now_ms();
        let state = live.rounds.last().expect("checked above").state.clone();
        live.append(&LogRecord::Selection {
            session_id,
            round,
            topic_id,
            state: &state,
            timestamp: now,
        })?;
        live.rounds.last_mut().expect("checked above").selected = Some(topic_id);
        Ok(format!("round {round}: topic {topic_id} recorded"))
    }

    /// Transitions for every selected round whose pair has completed. The
    /// action is the selected topic's embedding and the reward the patient's
    /// score of that pair on the model's scale.
    pub fn export_transitions(&self, session_id: &str) -> Result<Vec<Transition>, ServiceError> {
        let handle = self.session(session_id)?;
        let mut live = handle.lock().expect("session poisoned");
        let pairs = self.refresh_pairs(&mut live)?;
        let k = self.shared.model.topics.k();
        let scale = self.shared.model.config.scale as usize;
        let mut out = Vec::new();
        for round in &live.rounds {
            let Some(topic) = round.selected else { continue };
            if round.pair >= pairs {
                continue;
            }
            let window: Vec<PairFeatures> = live.pair_cache[round.pair + 1 - FRAME_PAIRS..=round.pair]
                .iter()
                .map(|c| c.2.clone())
                .collect();
            out.push(Transition {
                state: round.state.clone(),
                action: self
                    .shared
                    .model
                    .action_space
                    .action(topic)
                    .map_err(RecsysError::from)?
                    .to_vec(),
                reward: live.pair_cache[round.pair].2.patient[scale],
                next_state: frame_state(&window, k),
                terminal: round.pair + 1 == pairs,
            });
        }
        Ok(out)
    }

    /// The session's log lines so far.
    pub fn log_lines(&self, session_id: &str) -> Result<Vec<String>, ServiceError> {
        let handle = self.session(session_id)?;
        let live = handle.lock().expect("session poisoned");
        Ok(live.log.clone())
    }

    /// Seals the log and removes the session. Model parameters are untouched.
    pub fn close(&self, session_id: &str) -> Result<SessionSummary, ServiceError> {
        let handle = self
            .sessions
            .lock()
            .expect("session registry poisoned")
            .remove(session_id)
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_string()))?;
        let mut live = handle.lock().expect("session poisoned");
        let summary = summarize(&live, &self.shared.model.embedder)?;
        let now = self.clock.now_ms().max(live.created_ms);
        live.append(&LogRecord::End {
            session_id,
            summary: &summary,
            timestamp: now,
        })?;
        if let Some(file) = live.file.take() {
            file.sync_all()?;
        }
        Ok(summary)
    }
}

fn open_log(path: &Path) -> Result<File, ServiceError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}

/// Text of the trailing same-speaker run, joined as the corpus merge does.
fn merged_tail(turns: &[Turn]) -> String {
    let Some(last) = turns.last() else {
        return String::new();
    };
    let start = turns
        .iter()
        .rposition(|t| t.speaker != last.speaker)
        .map_or(0, |i| i + 1);
    turns[start..]
        .iter()
        .map(|t| t.text.trim())
        .collect::<Vec<_>>()
        .join(" ")
}

fn summarize<E: Embedder + ?Sized>(live: &LiveSession, embedder: &E) -> Result<SessionSummary, ServiceError> {
    let merged = crate::corpus::merge_consecutive(&live.turns);
    let mut sums = [0.0; 3];
    let mut count = 0usize;
    for turn in merged.iter().filter(|t| t.speaker == Speaker::Patient) {
        let triple = live.inventory.score_text(embedder, &turn.text)?.triple();
        for (s, v) in sums.iter_mut().zip(triple) {
            *s += v;
        }
        count += 1;
    }
    let mean = |i: usize| (count > 0).then(|| sums[i] / count as f64);
    Ok(SessionSummary {
        session_id: live.id.clone(),
        turns: live.turns.len(),
        pairs: live.pair_cache.len(),
        recommendations: live.rounds.len(),
        selections: live.rounds.iter().filter(|r| r.selected.is_some()).count(),
        mean_task: mean(0),
        mean_bond: mean(1),
        mean_goal: mean(2),
    })
}
