//! Planted-topic benchmark: train on a synthetic corpus and score the
//! policy against the planted best topic of every held-out state.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::agents::Algorithm;
use crate::alliance::Inventory;
use crate::corpus::synthetic::{SyntheticCorpus, SyntheticWorld};
use crate::corpus::{split_corpus, Session};
use crate::recsys::{
    evaluate_agent, model_transitions, random_baseline_accuracy, train, EvalCase, Metrics, Model, PipelineConfig,
    RecsysError, TransitionSet,
};
use crate::topics::TopicError;

pub const BASELINE_DRAWS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub algorithm: Algorithm,
    pub metrics: Metrics,
    pub baseline_accuracy: f64,
    pub topics: usize,
    pub train_transitions: usize,
    /// Mean critic loss of the first and last epoch.
    pub first_critic_loss: Option<f64>,
    pub last_critic_loss: Option<f64>,
}

/// Learned topic id of each planted topic, found by labeling the planted
/// vocabulary. Fails unless the mapping is a bijection.
pub fn planted_topic_map(model: &Model, world: &SyntheticWorld) -> Result<Vec<usize>, RecsysError> {
    let k = world.topics();
    let map: Vec<usize> = (0..k)
        .map(|p| {
            model
                .topics
                .label_text(&model.embedder, &world.topic_vocabulary(p).join(" "))
                .topic
        })
        .collect();
    let mut seen = vec![false; model.topics.k()];
    for &t in &map {
        if t >= seen.len() || std::mem::replace(&mut seen[t], true) {
            return Err(RecsysError::Topic(TopicError::NotEnoughData { k, found: 0 }));
        }
    }
    Ok(map)
}

/// Evaluation cases whose target is the planted best topic.
pub fn planted_cases(
    model: &Model,
    world: &SyntheticWorld,
    corpus: &SyntheticCorpus,
    sessions: &[Session],
    set: &TransitionSet,
) -> Result<Vec<EvalCase>, RecsysError> {
    let map = planted_topic_map(model, world)?;
    let index: HashMap<&str, usize> = corpus
        .sessions
        .iter()
        .enumerate()
        .map(|(i, s)| (s.session_id.as_str(), i))
        .collect();
    set.transitions
        .iter()
        .zip(&set.topics)
        .zip(&set.origins)
        .map(|((t, &logged), origin)| {
            let s = index[sessions[origin.session].session_id.as_str()];
            let previous = corpus.therapist_topics[s][origin.pair - 1];
            let target_topic = map[world.best_topic(previous)];
            Ok(EvalCase {
                state: t.state.clone(),
                target_action: model.action_space.action(target_topic)?.to_vec(),
                target_topic,
                logged_topic: logged,
                reward: t.reward,
            })
        })
        .collect()
}

/// Splits, trains and scores one algorithm on a generated corpus.
pub fn run_planted_benchmark(
    world: &SyntheticWorld,
    corpus: &SyntheticCorpus,
    inventory: &Inventory,
    config: &PipelineConfig,
) -> Result<(Model, BenchmarkReport), RecsysError> {
    let split = split_corpus(&corpus.sessions, config.test_fraction, config.seed)?;
    let outcome = train(config, &split.train, inventory)?;
    let model = outcome.model;
    let test_sessions = config.sessions(&split.test).into_owned();
    let set = model_transitions(&model, &test_sessions)?;
    let cases = planted_cases(&model, world, corpus, &test_sessions, &set)?;
    let metrics = evaluate_agent(&model.agent, &cases, &model.action_space)?;
    let baseline_accuracy = random_baseline_accuracy(&cases, &model.action_space, BASELINE_DRAWS, config.seed)?;
    let report = BenchmarkReport {
        algorithm: config.algorithm(),
        metrics,
        baseline_accuracy,
        topics: model.topics.k(),
        train_transitions: outcome.transitions,
        first_critic_loss: model.loss_trace.first().map(|l| l.critic()),
        last_critic_loss: model.loss_trace.last().map(|l| l.critic()),
    };
    Ok((model, report))
}
