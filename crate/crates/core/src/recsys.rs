//! Frames of scored, topic-labeled turn pairs as RL states; training,
//! evaluation and top-N recommendation on top of the agents.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{ActionBox, Agent, AgentConfig, AgentError, Algorithm, Losses, ReplayBuffer, Transition};
use crate::alliance::{AllianceError, BoundInventory, Inventory, Scale};
use crate::corpus::{filter_condition, pair_turns, Condition, CorpusError, Session, Speaker, Turn, TurnPair};
use crate::embed::{EmbedError, Embedder, HashedTfIdf, DEFAULT_DIMENSION, DEFAULT_PROJECTION_SEED};
use crate::topics::{ActionSpace, ActionSpaceKind, TopicError, TopicModel, DEFAULT_TOPICS};

/// Turn pairs per state frame.
pub const FRAME_PAIRS: usize = 10;
pub const DEFAULT_EPOCHS: usize = 50;
pub const DEFAULT_TEST_FRACTION: f64 = 0.05;

const MODEL_FORMAT: &str = "r2d2-model";
const MODEL_VERSION: u32 = 1;

pub type RatingScale = Scale;

#[derive(Debug, Error)]
pub enum RecsysError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Alliance(#[from] AllianceError),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("no transitions: every session has fewer than {} turn pairs", FRAME_PAIRS + 1)]
    NoTransitions,
    #[error("correlation undefined: {0} has zero variance")]
    UndefinedCorrelation(&'static str),
    #[error("pearson needs two equally long sequences of length >= 2 (got {0} and {1})")]
    PearsonLength(usize, usize),
    #[error("evaluation needs at least 2 cases, got {0}")]
    TooFewCases(usize),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RecsysError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            RecsysError::UndefinedCorrelation(_)
                | RecsysError::Agent(AgentError::NonFinite { .. })
                | RecsysError::Agent(AgentError::Neural(_))
        )
    }
}

/// Features of one turn pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairFeatures {
    pub patient: [f64; 3],
    pub therapist: [f64; 3],
    pub topic: usize,
}

/// Everything needed to turn raw text into features.
#[derive(Clone, Debug)]
pub struct Annotator<'a> {
    pub embedder: &'a HashedTfIdf,
    pub inventory: &'a BoundInventory,
    pub topics: &'a TopicModel,
}

/// Score and topic of one turn.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnAnnotation {
    pub scores: [f64; 3],
    pub topic: usize,
    pub degenerate: bool,
}

impl Annotator<'_> {
    pub fn annotate_text(&self, text: &str) -> Result<TurnAnnotation, RecsysError> {
        let e = self.embedder.embed(text);
        let score = self.inventory.score_vector(&e.values, e.degenerate)?;
        Ok(TurnAnnotation {
            scores: score.triple(),
            topic: self.topics.label_embedding(&e.values),
            degenerate: e.degenerate,
        })
    }

    pub fn pair_features(&self, pair: &TurnPair) -> Result<PairFeatures, RecsysError> {
        let patient = self.annotate_text(&pair.patient.text)?;
        let therapist = self.annotate_text(&pair.therapist.text)?;
        Ok(PairFeatures {
            patient: patient.scores,
            therapist: therapist.scores,
            topic: therapist.topic,
        })
    }

    pub fn session_features(&self, session: &Session) -> Result<Vec<PairFeatures>, RecsysError> {
        pair_turns(session).iter().map(|p| self.pair_features(p)).collect()
    }
}

pub fn state_dimension(k: usize) -> usize {
    FRAME_PAIRS * (6 + k)
}

/// Flattens a window of exactly [`FRAME_PAIRS`] pairs: per pair the patient
/// triple, the therapist triple, then the topic one-hot.
pub fn frame_state(window: &[PairFeatures], k: usize) -> Vec<f64> {
    assert_eq!(window.len(), FRAME_PAIRS, "a frame holds exactly {FRAME_PAIRS} pairs");
    let mut state = Vec::with_capacity(state_dimension(k));
    for pair in window {
        state.extend_from_slice(&pair.patient);
        state.extend_from_slice(&pair.therapist);
        state.extend((0..k).map(|t| if t == pair.topic { 1.0 } else { 0.0 }));
    }
    state
}

/// Where a transition's action came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub session: usize,
    /// Index of the pair holding the action and reward.
    pub pair: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransitionSet {
    pub transitions: Vec<Transition>,
    /// Logged topic of each transition's action.
    pub topics: Vec<usize>,
    pub origins: Vec<Origin>,
    /// Sessions with fewer than `FRAME_PAIRS + 1` pairs.
    pub skipped: usize,
}

impl TransitionSet {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Stride-1 frames: state = pairs `[t, t+10)`, action = topic action of the
/// therapist in pair `t+10`, reward = that pair's patient `scale` score,
/// next state = pairs `[t+1, t+11)`. The last transition of a session is
/// terminal.
pub fn build_transitions(
    sessions: &[Session],
    annotator: &Annotator<'_>,
    space: &ActionSpace,
    scale: RatingScale,
) -> Result<TransitionSet, RecsysError> {
    let k = space.k();
    let mut out = TransitionSet::default();
    for (s, session) in sessions.iter().enumerate() {
        let features = annotator.session_features(session)?;
        if features.len() <= FRAME_PAIRS {
            out.skipped += 1;
            continue;
        }
        let last = features.len() - FRAME_PAIRS - 1;
        for t in 0..=last {
            let acted = &features[t + FRAME_PAIRS];
            out.transitions.push(Transition {
                state: frame_state(&features[t..t + FRAME_PAIRS], k),
                action: space.action(acted.topic)?.to_vec(),
                reward: acted.patient[scale as usize],
                next_state: frame_state(&features[t + 1..t + 1 + FRAME_PAIRS], k),
                terminal: t == last,
            });
            out.topics.push(acted.topic);
            out.origins.push(Origin {
                session: s,
                pair: t + FRAME_PAIRS,
            });
        }
    }
    Ok(out)
}

/// Sample correlation, two-pass.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, RecsysError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(RecsysError::PearsonLength(x.len(), y.len()));
    }
    if x.iter().all(|v| *v == x[0]) {
        return Err(RecsysError::UndefinedCorrelation("x"));
    }
    if y.iter().all(|v| *v == y[0]) {
        return Err(RecsysError::UndefinedCorrelation("y"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// One held-out decision to score a policy on.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub state: Vec<f64>,
    pub target_action: Vec<f64>,
    pub target_topic: usize,
    pub logged_topic: usize,
    pub reward: f64,
}

impl EvalCase {
    /// Cases whose target is the logged action.
    pub fn from_transitions(set: &TransitionSet) -> Vec<EvalCase> {
        set.transitions
            .iter()
            .zip(&set.topics)
            .map(|(t, &topic)| EvalCase {
                state: t.state.clone(),
                target_action: t.action.clone(),
                target_topic: topic,
                logged_topic: topic,
                reward: t.reward,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` when either flattened sequence has zero variance.
    pub pearson_r: Option<f64>,
    pub topic_accuracy: f64,
    /// Mean observed reward over cases where the decoded prediction equals
    /// the logged topic; `None` if there are none.
    pub mean_reward: Option<f64>,
    pub cases: usize,
}

pub fn evaluate<F>(mut policy: F, cases: &[EvalCase], space: &ActionSpace) -> Result<Metrics, RecsysError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, RecsysError>,
{
    if cases.len() < 2 {
        return Err(RecsysError::TooFewCases(cases.len()));
    }
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    let mut hits = 0usize;
    let (mut reward_sum, mut reward_n) = (0.0, 0usize);
    for case in cases {
        let action = policy(&case.state)?;
        let topic = space.decode(&action)?;
        hits += usize::from(topic == case.target_topic);
        if topic == case.logged_topic {
            reward_sum += case.reward;
            reward_n += 1;
        }
        predicted.extend_from_slice(&action);
        truth.extend_from_slice(&case.target_action);
    }
    let pearson_r = match pearson(&predicted, &truth) {
        Ok(r) => Some(r),
        Err(RecsysError::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics {
        pearson_r,
        topic_accuracy: hits as f64 / cases.len() as f64,
        mean_reward: (reward_n > 0).then(|| reward_sum / reward_n as f64),
        cases: cases.len(),
    })
}

pub fn evaluate_agent(agent: &Agent, cases: &[EvalCase], space: &ActionSpace) -> Result<Metrics, RecsysError> {
    evaluate(|s| Ok(agent.select_action(s)?), cases, space)
}

/// Accuracy of a policy that emits a uniformly random topic's action,
/// averaged over `draws` independent passes.
pub fn random_baseline_accuracy(
    cases: &[EvalCase],
    space: &ActionSpace,
    draws: usize,
    seed: u64,
) -> Result<f64, RecsysError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..draws.max(1) {
        let m = evaluate(
            |_| Ok(space.action(rng.random_range(0..space.k()))?.to_vec()),
            cases,
            space,
        )?;
        total += m.topic_accuracy;
    }
    Ok(total / draws.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub topic: usize,
    /// Negated distance of the topic action to the agent's action.
    pub score: f64,
}

pub fn recommend(
    agent: &Agent,
    space: &ActionSpace,
    state: &[f64],
    n: usize,
) -> Result<Vec<Recommendation>, RecsysError> {
    let action = agent.select_action(state)?;
    Ok(space
        .rank(&action, n)?
        .into_iter()
        .map(|(topic, distance)| Recommendation {
            topic,
            score: -distance,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub topics: usize,
    pub embed_dimension: usize,
    pub action_space: ActionSpaceKind,
    pub scale: Scale,
    pub epochs: usize,
    pub seed: u64,
    pub test_fraction: f64,
    /// Restricts both training and evaluation sessions.
    pub condition: Option<Condition>,
    pub agent: AgentConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            topics: DEFAULT_TOPICS,
            embed_dimension: DEFAULT_DIMENSION,
            action_space: ActionSpaceKind::Pca36,
            scale: Scale::Task,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            test_fraction: DEFAULT_TEST_FRACTION,
            condition: None,
            agent: AgentConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn algorithm(&self) -> Algorithm {
        self.agent.algorithm
    }

    pub fn sessions<'a>(&self, sessions: &'a [Session]) -> std::borrow::Cow<'a, [Session]> {
        match self.condition {
            Some(c) => std::borrow::Cow::Owned(filter_condition(sessions, c)),
            None => std::borrow::Cow::Borrowed(sessions),
        }
    }
}

/// A trained recommender with everything needed to serve it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub format: String,
    pub version: u32,
    pub config: PipelineConfig,
    pub embedder: HashedTfIdf,
    pub inventory: Inventory,
    pub topics: TopicModel,
    pub action_space: ActionSpace,
    pub agent: Agent,
    /// Mean losses per epoch.
    pub loss_trace: Vec<Losses>,
}

impl Model {
    pub fn bound_inventory(&self) -> BoundInventory {
        self.inventory.bind(&self.embedder)
    }

    pub fn to_json(&self) -> Result<String, RecsysError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, RecsysError> {
        let model: Model = serde_json::from_str(text)?;
        if model.format != MODEL_FORMAT || model.version != MODEL_VERSION {
            return Err(RecsysError::Format(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                model.format, model.version
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), RecsysError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RecsysError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Embedder, topic model and action space fitted on training sessions.
#[derive(Clone, Debug)]
pub struct FittedWorld {
    pub embedder: HashedTfIdf,
    pub topics: TopicModel,
    pub action_space: ActionSpace,
}

/// Fits the embedder on every training turn and the topics and action
/// space on therapist turns.
pub fn fit_world(sessions: &[Session], config: &PipelineConfig) -> Result<FittedWorld, RecsysError> {
    let texts: Vec<&str> = sessions
        .iter()
        .flat_map(|s| s.turns.iter().map(|t| t.text.as_str()))
        .collect();
    let embedder = HashedTfIdf::fit(&texts, config.embed_dimension, DEFAULT_PROJECTION_SEED)?;
    let therapist: Vec<&Turn> = sessions
        .iter()
        .flat_map(|s| s.turns.iter())
        .filter(|t| t.speaker == Speaker::Therapist)
        .collect();
    let topics = TopicModel::fit(&embedder, &therapist, config.topics, config.seed)?;
    let action_space = ActionSpace::from_turns(&topics, &embedder, &therapist, config.action_space)?;
    Ok(FittedWorld {
        embedder,
        topics,
        action_space,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub transitions: usize,
    pub skipped: usize,
}

/// Fits the world on `train`, builds transitions, and trains an agent for
/// `config.epochs` epochs. Deterministic per seed.
pub fn train(config: &PipelineConfig, train: &[Session], inventory: &Inventory) -> Result<TrainOutcome, RecsysError> {
    let train = config.sessions(train);
    let world = fit_world(&train, config)?;
    let bound = inventory.bind(&world.embedder);
    let annotator = Annotator {
        embedder: &world.embedder,
        inventory: &bound,
        topics: &world.topics,
    };
    let set = build_transitions(&train, &annotator, &world.action_space, config.scale)?;
    if set.is_empty() {
        return Err(RecsysError::NoTransitions);
    }
    let bounds = ActionBox::from_actions(world.action_space.topic_actions())?;
    let mut agent = Agent::new(
        config.agent.clone(),
        state_dimension(world.topics.k()),
        bounds,
        config.seed,
    )?;
    let transitions = set.len();
    let mut buffer = ReplayBuffer::new(set.transitions, config.seed)?;
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        loss_trace.push(agent.run_epoch(&mut buffer)?);
    }
    Ok(TrainOutcome {
        model: Model {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config: config.clone(),
            embedder: world.embedder,
            inventory: inventory.clone(),
            topics: world.topics,
            action_space: world.action_space,
            agent,
            loss_trace,
        },
        transitions,
        skipped: set.skipped,
    })
}

/// Held-out transitions of `sessions` under the model's own featurization.
pub fn model_transitions(model: &Model, sessions: &[Session]) -> Result<TransitionSet, RecsysError> {
    let sessions = model.config.sessions(sessions);
    let bound = model.bound_inventory();
    let annotator = Annotator {
        embedder: &model.embedder,
        inventory: &bound,
        topics: &model.topics,
    };
    build_transitions(&sessions, &annotator, &model.action_space, model.config.scale)
}

pub fn evaluate_model(model: &Model, sessions: &[Session]) -> Result<Metrics, RecsysError> {
    let set = model_transitions(model, sessions)?;
    evaluate_agent(&model.agent, &EvalCase::from_transitions(&set), &model.action_space)
}

/// One line of the metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub algorithm: Algorithm,
    pub scale: Scale,
    pub condition: String,
    pub pearson_r: Option<f64>,
    pub topic_accuracy: f64,
    pub mean_reward: Option<f64>,
    pub cases: usize,
    pub seed: u64,
}

impl MetricsLine {
    pub fn new(config: &PipelineConfig, metrics: &Metrics) -> Self {
        Self {
            algorithm: config.algorithm(),
            scale: config.scale,
            condition: config.condition.map_or_else(|| "all".to_string(), |c| c.to_string()),
            pearson_r: metrics.pearson_r,
            topic_accuracy: metrics.topic_accuracy,
            mean_reward: metrics.mean_reward,
            cases: metrics.cases,
            seed: config.seed,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }

    /// True when every reported number is finite.
    pub fn is_finite(&self) -> bool {
        self.topic_accuracy.is_finite()
            && self.pearson_r.is_none_or(f64::is_finite)
            && self.mean_reward.is_none_or(f64::is_finite)
    }
}
