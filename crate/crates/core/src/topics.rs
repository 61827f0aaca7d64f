//! Topics as recommendation items.
//!
//! Turn embeddings are clustered with seeded k-means++/Lloyd into `K` topics.
//! Each topic gets a continuous action vector: the mean embedding of its
//! member turns, optionally after projecting onto the top principal
//! components. Action vectors decode back to topics by nearest neighbor.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Turn;
use crate::embed::{cosine, tokenize, Embedder, HashedTfIdf};

pub const DEFAULT_TOPICS: usize = 7;
pub const MAX_LLOYD_ITERATIONS: usize = 100;
pub const CENTROID_TOLERANCE: f64 = 1e-6;
/// Seeded k-means++ starts per topic fit; the lowest final objective wins.
pub const KMEANS_RESTARTS: u64 = 10;

#[derive(Debug, Error)]
pub enum TopicError {
    #[error("topic count must be at least 2, got {0}")]
    TooFewTopics(usize),
    #[error("need at least {k} distinct non-empty turn embeddings, found {found}")]
    NotEnoughData { k: usize, found: usize },
    #[error("topic {0} has no labeled turns")]
    EmptyTopic(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("requested {n} topics from a space of {k}")]
    RankOutOfRange { n: usize, k: usize },
    #[error("topic id {topic} out of range for {k} topics")]
    TopicOutOfRange { topic: usize, k: usize },
    #[error("unknown action space {0:?}")]
    UnknownKind(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    centroids: Vec<Vec<f64>>,
    labels: Vec<String>,
    seed: u64,
    iterations: usize,
}

/// Result of a k-means run, with the objective after every Lloyd iteration.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest point under squared Euclidean distance, ties to the lowest index.
pub fn nearest(points: &[Vec<f64>], query: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = squared_distance(p, query);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn objective(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &c)| squared_distance(p, &centroids[c]))
        .sum()
}

/// Seeded k-means++ initialization followed by Lloyd iterations until every
/// centroid moves less than [`CENTROID_TOLERANCE`] or the iteration cap is hit.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansFit, TopicError> {
    if k < 2 {
        return Err(TopicError::TooFewTopics(k));
    }
    let distinct: HashSet<Vec<u64>> = points.iter().map(|p| p.iter().map(|x| x.to_bits()).collect()).collect();
    if distinct.len() < k {
        return Err(TopicError::NotEnoughData {
            k,
            found: distinct.len(),
        });
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut chosen = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                chosen = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
        }
        let next = points[chosen.expect("distinct points leave positive mass")].clone();
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(squared_distance(p, &next));
        }
        centroids.push(next);
    }

    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(&centroids, p)).collect();
    let mut trace = vec![objective(points, &centroids, &assignments)];
    let mut iterations = 0;
    for _ in 0..MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(squared_distance(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        assignments = points.iter().map(|p| nearest(&centroids, p)).collect();
        trace.push(objective(points, &centroids, &assignments));
        if shift < CENTROID_TOLERANCE {
            break;
        }
    }
    Ok(KMeansFit {
        centroids,
        assignments,
        objective_trace: trace,
        iterations,
    })
}

/// A turn's topic assignment. `degenerate` marks turns with no tokens,
/// which are assigned the centroid nearest the zero vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TopicLabel {
    pub topic: usize,
    pub degenerate: bool,
}

fn final_objective(fit: &KMeansFit) -> f64 {
    fit.objective_trace.last().copied().unwrap_or(f64::INFINITY)
}

impl TopicModel {
    /// Clusters the embeddings of `turns` into `k` topics. Empty turns are ignored.
    pub fn fit(embedder: &HashedTfIdf, turns: &[&Turn], k: usize, seed: u64) -> Result<Self, TopicError> {
        if k < 2 {
            return Err(TopicError::TooFewTopics(k));
        }
        let mut texts = Vec::new();
        let mut points = Vec::new();
        for turn in turns {
            let e = embedder.embed(&turn.text);
            if !e.degenerate {
                points.push(e.values);
                texts.push(turn.text.as_str());
            }
        }
        if points.len() < k {
            return Err(TopicError::NotEnoughData { k, found: points.len() });
        }
        let mut fit = kmeans(&points, k, seed)?;
        for restart in 1..KMEANS_RESTARTS {
            let candidate = kmeans(
                &points,
                k,
                seed.wrapping_add(restart.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            )?;
            if final_objective(&candidate) < final_objective(&fit) {
                fit = candidate;
            }
        }
        let labels = describe_clusters(embedder, &texts, &fit.assignments, k);
        Ok(Self {
            centroids: fit.centroids,
            labels,
            seed,
            iterations: fit.iterations,
        })
    }

    pub fn from_centroids(centroids: Vec<Vec<f64>>) -> Result<Self, TopicError> {
        if centroids.len() < 2 {
            return Err(TopicError::TooFewTopics(centroids.len()));
        }
        let labels = (0..centroids.len()).map(|k| format!("topic {k}")).collect();
        Ok(Self {
            centroids,
            labels,
            seed: 0,
            iterations: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dimension(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, topic: usize) -> &str {
        self.labels.get(topic).map_or("", String::as_str)
    }

    pub fn set_labels(&mut self, labels: Vec<String>) {
        if labels.len() == self.k() {
            self.labels = labels;
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label_embedding(&self, values: &[f64]) -> usize {
        nearest(&self.centroids, values)
    }

    pub fn label_text<E: Embedder + ?Sized>(&self, embedder: &E, text: &str) -> TopicLabel {
        let e = embedder.embed(text);
        TopicLabel {
            topic: self.label_embedding(&e.values),
            degenerate: e.degenerate,
        }
    }

    pub fn label_turn<E: Embedder + ?Sized>(&self, embedder: &E, turn: &Turn) -> TopicLabel {
        self.label_text(embedder, &turn.text)
    }
}

/// Names each cluster after its three highest TF-IDF tokens.
fn describe_clusters(embedder: &HashedTfIdf, texts: &[&str], assignments: &[usize], k: usize) -> Vec<String> {
    let mut weights: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); k];
    for (text, &c) in texts.iter().zip(assignments) {
        for token in tokenize(text) {
            let idf = embedder.idf(&token);
            *weights[c].entry(token).or_insert(0.0) += idf;
        }
    }
    weights
        .into_iter()
        .map(|w| {
            let mut ranked: Vec<(String, f64)> = w.into_iter().collect();
            ranked.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| a.0.cmp(&b.0))
            });
            ranked.into_iter().take(3).map(|(t, _)| t).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionSpaceKind {
    /// Per-topic mean of raw turn embeddings.
    #[default]
    Doc300,
    /// Per-topic mean after projecting onto the top 36 principal components.
    Pca36,
    /// Per-topic mean after projecting onto the top 2 principal components.
    Pca2,
}

impl ActionSpaceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionSpaceKind::Doc300 => "doc300",
            ActionSpaceKind::Pca36 => "pca36",
            ActionSpaceKind::Pca2 => "pca2",
        }
    }

    pub fn components(self) -> Option<usize> {
        match self {
            ActionSpaceKind::Doc300 => None,
            ActionSpaceKind::Pca36 => Some(36),
            ActionSpaceKind::Pca2 => Some(2),
        }
    }
}

impl fmt::Display for ActionSpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionSpaceKind {
    type Err = TopicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "doc300" => Ok(ActionSpaceKind::Doc300),
            "pca36" => Ok(ActionSpaceKind::Pca36),
            "pca2" => Ok(ActionSpaceKind::Pca2),
            other => Err(TopicError::UnknownKind(other.to_string())),
        }
    }
}

/// Distance used when decoding actions to topics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMetric {
    #[default]
    Euclidean,
    /// `1 - cosine`; meaningful for the raw embedding space only.
    Cosine,
}

/// Principal-component projection: `basis` rows are orthonormal components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl PcaBasis {
    /// Top `components` eigenvectors of the sample covariance of `points`.
    pub fn fit(points: &[Vec<f64>], components: usize) -> Self {
        let n = points.len();
        let d = points[0].len();
        let mut mean = vec![0.0; d];
        for p in points {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
        let denom = (n.max(2) - 1) as f64;
        let covariance = (centered.transpose() * &centered) / denom;
        let eigen = SymmetricEigen::new(covariance);

        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eigen.eigenvalues[b]
                .partial_cmp(&eigen.eigenvalues[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let take = components.min(d);
        let mut basis = Vec::with_capacity(take);
        let mut eigenvalues = Vec::with_capacity(take);
        for &col in order.iter().take(take) {
            let mut v: Vec<f64> = eigen.eigenvectors.column(col).iter().copied().collect();
            // fix the sign so the largest-magnitude coordinate is positive
            let pivot = v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap_or(Ordering::Equal))
                .map_or(0, |(i, _)| i);
            if v[pivot] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            basis.push(v);
            eigenvalues.push(eigen.eigenvalues[col].max(0.0));
        }
        Self {
            mean,
            basis,
            eigenvalues,
        }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.basis
            .iter()
            .map(|b| {
                b.iter()
                    .zip(x)
                    .zip(&self.mean)
                    .map(|((bi, xi), mi)| bi * (xi - mi))
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (b, zi) in self.basis.iter().zip(z) {
            for (o, bi) in out.iter_mut().zip(b) {
                *o += bi * zi;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    kind: ActionSpaceKind,
    topic_actions: Vec<Vec<f64>>,
    pca: Option<PcaBasis>,
    #[serde(default)]
    metric: DecodeMetric,
}

impl ActionSpace {
    /// Averages (projected) turn embeddings per topic label.
    ///
    /// `labeled` pairs each turn embedding with its topic; PCA kinds fit the
    /// basis on all of those embeddings.
    pub fn build(k: usize, labeled: &[(Vec<f64>, usize)], kind: ActionSpaceKind) -> Result<Self, TopicError> {
        if k < 2 {
            return Err(TopicError::TooFewTopics(k));
        }
        if let Some(&(_, topic)) = labeled.iter().find(|(_, t)| *t >= k) {
            return Err(TopicError::TopicOutOfRange { topic, k });
        }
        let pca = kind.components().map(|c| {
            let points: Vec<Vec<f64>> = labeled.iter().map(|(v, _)| v.clone()).collect();
            PcaBasis::fit(&points, c)
        });
        let width = match &pca {
            Some(p) => p.basis.len(),
            None => labeled.first().map_or(0, |(v, _)| v.len()),
        };
        let mut sums = vec![vec![0.0; width]; k];
        let mut counts = vec![0usize; k];
        for (v, topic) in labeled {
            let projected = match &pca {
                Some(p) => p.project(v),
                None => v.clone(),
            };
            counts[*topic] += 1;
            for (s, x) in sums[*topic].iter_mut().zip(&projected) {
                *s += x;
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(TopicError::EmptyTopic(empty));
        }
        let topic_actions = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| s.into_iter().map(|x| x / c as f64).collect())
            .collect();
        Ok(Self {
            kind,
            topic_actions,
            pca,
            metric: DecodeMetric::Euclidean,
        })
    }

    /// Embeds and labels `turns`, then builds the space from them.
    pub fn from_turns<E: Embedder + ?Sized>(
        model: &TopicModel,
        embedder: &E,
        turns: &[&Turn],
        kind: ActionSpaceKind,
    ) -> Result<Self, TopicError> {
        let labeled: Vec<(Vec<f64>, usize)> = turns
            .iter()
            .map(|t| embedder.embed(&t.text))
            .filter(|e| !e.degenerate)
            .map(|e| {
                let topic = model.label_embedding(&e.values);
                (e.values, topic)
            })
            .collect();
        Self::build(model.k(), &labeled, kind)
    }

    /// A space whose action vectors are given directly.
    pub fn from_actions(kind: ActionSpaceKind, topic_actions: Vec<Vec<f64>>) -> Result<Self, TopicError> {
        if topic_actions.len() < 2 {
            return Err(TopicError::TooFewTopics(topic_actions.len()));
        }
        Ok(Self {
            kind,
            topic_actions,
            pca: None,
            metric: DecodeMetric::Euclidean,
        })
    }

    pub fn with_metric(mut self, metric: DecodeMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn kind(&self) -> ActionSpaceKind {
        self.kind
    }

    pub fn metric(&self) -> DecodeMetric {
        self.metric
    }

    pub fn k(&self) -> usize {
        self.topic_actions.len()
    }

    pub fn dimension(&self) -> usize {
        self.topic_actions[0].len()
    }

    pub fn topic_actions(&self) -> &[Vec<f64>] {
        &self.topic_actions
    }

    pub fn action(&self, topic: usize) -> Result<&[f64], TopicError> {
        self.topic_actions
            .get(topic)
            .map(Vec::as_slice)
            .ok_or(TopicError::TopicOutOfRange { topic, k: self.k() })
    }

    pub fn pca(&self) -> Option<&PcaBasis> {
        self.pca.as_ref()
    }

    /// Maps a raw embedding into this space.
    pub fn project(&self, embedding: &[f64]) -> Vec<f64> {
        match &self.pca {
            Some(p) => p.project(embedding),
            None => embedding.to_vec(),
        }
    }

    fn check_dimension(&self, action: &[f64]) -> Result<(), TopicError> {
        if action.len() != self.dimension() {
            return Err(TopicError::Dimension {
                expected: self.dimension(),
                got: action.len(),
            });
        }
        Ok(())
    }

    pub fn distance(&self, topic: usize, action: &[f64]) -> f64 {
        let target = &self.topic_actions[topic];
        match self.metric {
            DecodeMetric::Euclidean => squared_distance(target, action).sqrt(),
            DecodeMetric::Cosine => 1.0 - cosine(target, action).unwrap_or(0.0),
        }
    }

    /// Nearest topic to `action`; ties go to the lowest id.
    pub fn decode(&self, action: &[f64]) -> Result<usize, TopicError> {
        self.check_dimension(action)?;
        let mut best = (0, f64::INFINITY);
        for k in 0..self.k() {
            let d = self.distance(k, action);
            if d < best.1 {
                best = (k, d);
            }
        }
        Ok(best.0)
    }

    /// The `n` nearest topics in ascending distance, ties by id.
    pub fn rank(&self, action: &[f64], n: usize) -> Result<Vec<(usize, f64)>, TopicError> {
        self.check_dimension(action)?;
        if n == 0 || n > self.k() {
            return Err(TopicError::RankOutOfRange { n, k: self.k() });
        }
        let mut ranked: Vec<(usize, f64)> = (0..self.k()).map(|k| (k, self.distance(k, action))).collect();
        ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        ranked.truncate(n);
        Ok(ranked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Speaker;

    fn planted_turns(vocabularies: &[&[&str]], per_topic: usize, seed: u64) -> (Vec<Turn>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut turns = Vec::new();
        let mut truth = Vec::new();
        for i in 0..per_topic {
            for (k, vocab) in vocabularies.iter().enumerate() {
                let words: Vec<&str> = (0..6).map(|_| vocab[rng.random_range(0..vocab.len())]).collect();
                turns.push(Turn::new(
                    "s",
                    (i * vocabularies.len() + k) as u32,
                    Speaker::Therapist,
                    words.join(" "),
                ));
                truth.push(k);
            }
        }
        (turns, truth)
    }

    const VOCABS: [&[&str]; 3] = [
        &["anger", "scared", "sad", "upset", "tears", "furious"],
        &["play", "games", "fun", "toys", "laugh", "sport"],
        &["count", "numbers", "seven", "twelve", "many", "total"],
    ];

    #[test]
    fn recovers_planted_partition() {
        let (turns, truth) = planted_turns(&VOCABS, 30, 3);
        let texts: Vec<&str> = turns.iter().map(|t| t.text.as_str()).collect();
        let e = HashedTfIdf::fit(&texts, 300, 1).unwrap();
        let refs: Vec<&Turn> = turns.iter().collect();
        let tm = TopicModel::fit(&e, &refs, 3, 11).unwrap();
        let labels: Vec<usize> = turns.iter().map(|t| tm.label_turn(&e, t).topic).collect();
        // each planted topic maps to exactly one cluster and vice versa
        let mut mapping = [usize::MAX; 3];
        for (&l, &t) in labels.iter().zip(&truth) {
            if mapping[t] == usize::MAX {
                mapping[t] = l;
            }
            assert_eq!(mapping[t], l);
        }
        let mut seen = mapping.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 3);
        assert_eq!(tm, TopicModel::fit(&e, &refs, 3, 11).unwrap());
    }

    #[test]
    fn single_topic_is_rejected() {
        let e = HashedTfIdf::fit(&["some text"], 8, 1).unwrap();
        let t = Turn::new("s", 0, Speaker::Patient, "some text");
        assert!(matches!(
            TopicModel::fit(&e, &[&t], 1, 0),
            Err(TopicError::TooFewTopics(1))
        ));
        assert!(matches!(
            TopicModel::fit(&e, &[&t, &t], 2, 0),
            Err(TopicError::NotEnoughData { .. })
        ));
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
            .collect();
        let fit = kmeans(&points, 5, 9).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn labeling_matches_exhaustive_scan() {
        let (turns, _) = planted_turns(&VOCABS, 70, 8);
        let texts: Vec<&str> = turns.iter().map(|t| t.text.as_str()).collect();
        let e = HashedTfIdf::fit(&texts, 64, 1).unwrap();
        let refs: Vec<&Turn> = turns.iter().collect();
        let tm = TopicModel::fit(&e, &refs, 3, 2).unwrap();
        for t in turns.iter().take(200) {
            let v = e.embed(&t.text).values;
            let dists: Vec<f64> = tm.centroids().iter().map(|c| squared_distance(c, &v)).collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let expect = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(tm.label_turn(&e, t).topic, expect);
        }
    }

    #[test]
    fn label_ties_go_to_lowest_id() {
        let tm = TopicModel::from_centroids(vec![
            vec![20.0, 20.0],
            vec![20.0, -20.0],
            vec![-1.0, 0.0],
            vec![30.0, 0.0],
            vec![-30.0, 0.0],
            vec![1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(tm.label_embedding(&[30.0, 0.0]), 3);
        // equidistant from centroids 2 and 5
        assert_eq!(tm.label_embedding(&[0.0, 0.0]), 2);
        assert_eq!(tm.label_embedding(&[0.0, 7.0]), 2);
    }

    fn space_actions() -> Vec<Vec<f64>> {
        vec![
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![10.0, 10.0],
            vec![-10.0, 10.0],
            vec![10.0, -10.0],
            vec![-10.0, -10.0],
            vec![0.0, 20.0],
        ]
    }

    #[test]
    fn decode_exact_and_midpoint() {
        let space = ActionSpace::from_actions(ActionSpaceKind::Pca2, space_actions()).unwrap();
        assert_eq!(space.decode(&[0.0, 20.0]).unwrap(), 6);
        assert_eq!(space.decode(&[1.0, 0.0]).unwrap(), 0);
        assert!(matches!(space.decode(&[1.0]), Err(TopicError::Dimension { .. })));
    }

    #[test]
    fn rank_full_and_top_one() {
        let space = ActionSpace::from_actions(ActionSpaceKind::Pca2, space_actions()).unwrap();
        let full = space.rank(&[3.0, 1.0], 7).unwrap();
        let mut ids: Vec<usize> = full.iter().map(|r| r.0).collect();
        ids.sort();
        assert_eq!(ids, (0..7).collect::<Vec<_>>());
        assert_eq!(space.rank(&[10.0, 10.0], 1).unwrap(), vec![(2, 0.0)]);
        assert!(matches!(
            space.rank(&[0.0, 0.0], 0),
            Err(TopicError::RankOutOfRange { .. })
        ));
        assert!(matches!(
            space.rank(&[0.0, 0.0], 8),
            Err(TopicError::RankOutOfRange { .. })
        ));
    }

    #[test]
    fn build_means_and_empty_topic() {
        let labeled = vec![(vec![1.0, 2.0], 0), (vec![3.0, 4.0], 0), (vec![5.0, 5.0], 1)];
        let space = ActionSpace::build(2, &labeled, ActionSpaceKind::Doc300).unwrap();
        assert_eq!(space.topic_actions(), &[vec![2.0, 3.0], vec![5.0, 5.0]]);
        assert!(matches!(
            ActionSpace::build(3, &labeled, ActionSpaceKind::Doc300),
            Err(TopicError::EmptyTopic(2))
        ));
        let pca = ActionSpace::build(2, &labeled, ActionSpaceKind::Pca2).unwrap();
        let basis = pca.pca().unwrap();
        assert_eq!(pca.topic_actions()[1], basis.project(&[5.0, 5.0]));
    }

    #[test]
    fn pca_basis_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let points: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..50).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let pca = PcaBasis::fit(&points, 36);
        for i in 0..36 {
            for j in 0..36 {
                let g: f64 = pca.basis[i].iter().zip(&pca.basis[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g - want).abs() < 1e-8, "gram[{i}][{j}] = {g}");
            }
        }
        for p in &points {
            let back = pca.reconstruct(&pca.project(p));
            assert!(squared_distance(&back, &pca.mean) <= squared_distance(p, &pca.mean) + 1e-12);
        }
    }
}
