//! Seeded synthetic therapy transcripts with a planted best-topic rule.
//!
//! Every topic owns a vocabulary of pseudo-words. In each turn pair the
//! therapist speaks on one topic; the best topic for that pair is a fixed
//! function of the topic the therapist used in the previous pair. The
//! patient turn of the pair echoes positively keyed inventory wording when
//! the therapist's topic is the best one and negatively keyed wording
//! otherwise, so every alliance scale is maximized by the planted choice.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Condition, CorpusError, Session, Speaker, Turn};
use crate::alliance::{default_inventory, Inventory, Scale};
use crate::embed::tokenize;

const STOPWORDS: &[&str] = &[
    "the", "and", "me", "my", "we", "to", "of", "in", "is", "are", "am", "on", "for", "that", "what", "our", "with",
    "about", "by", "be", "it", "or", "not", "how", "this", "these", "here", "when", "even", "where", "why", "both",
    "each", "can", "will", "i", "an", "at", "one", "us",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub sessions: usize,
    pub turns_per_session: usize,
    pub topics: usize,
    pub vocabulary_per_topic: usize,
    pub words_per_therapist_turn: usize,
    /// Therapist words per turn borrowed from the two neighboring topics on a
    /// ring of the `K` topics; the rest come from the topic's own vocabulary.
    /// Gives the topic centroids a circular layout that survives a 2-d PCA.
    pub ring_words: usize,
    /// Words from each scale's chosen inventory item in a patient turn.
    pub alliance_words_per_scale: usize,
    pub chatter_words: usize,
    /// Probability the recorded therapist follows the planted best topic;
    /// otherwise the topic is uniform over all `K`.
    pub best_topic_rate: f64,
    pub inventory: Inventory,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            sessions: 200,
            turns_per_session: 40,
            topics: 7,
            vocabulary_per_topic: 20,
            words_per_therapist_turn: 8,
            ring_words: 3,
            alliance_words_per_scale: 2,
            chatter_words: 3,
            best_topic_rate: 0.5,
            inventory: default_inventory(),
        }
    }
}

/// Vocabularies and the planted rule derived from a [`SyntheticSpec`].
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    spec: SyntheticSpec,
    topic_vocab: Vec<Vec<String>>,
    chatter_vocab: Vec<String>,
    /// Per scale, content words of each positively / negatively keyed item.
    positive_items: Vec<Vec<Vec<String>>>,
    negative_items: Vec<Vec<Vec<String>>>,
}

/// Generated sessions plus the ground truth behind them.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub sessions: Vec<Session>,
    /// Planted topic the therapist used in each pair, per session.
    pub therapist_topics: Vec<Vec<usize>>,
}

impl SyntheticWorld {
    pub fn new(spec: SyntheticSpec) -> Result<Self, CorpusError> {
        if spec.topics < 2 {
            return Err(CorpusError::Argument(format!(
                "need at least 2 topics, got {}",
                spec.topics
            )));
        }
        if spec.turns_per_session < 2 || spec.vocabulary_per_topic == 0 || spec.words_per_therapist_turn == 0 {
            return Err(CorpusError::Argument(
                "turn and vocabulary sizes must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&spec.best_topic_rate) {
            return Err(CorpusError::Argument("best_topic_rate must lie in [0, 1]".into()));
        }
        if spec.ring_words >= spec.words_per_therapist_turn {
            return Err(CorpusError::Argument(
                "ring_words must leave room for topic words".into(),
            ));
        }

        let mut taken: BTreeSet<String> = spec.inventory.items().iter().flat_map(|i| tokenize(&i.text)).collect();
        let mut stream = 0x7091c5_u64;
        let mut fresh = |count: usize, taken: &mut BTreeSet<String>| -> Vec<String> {
            let mut words = Vec::with_capacity(count);
            while words.len() < count {
                let w = pseudo_word(&mut stream);
                if taken.insert(w.clone()) {
                    words.push(w);
                }
            }
            words
        };
        let topic_vocab = (0..spec.topics)
            .map(|_| fresh(spec.vocabulary_per_topic, &mut taken))
            .collect();
        let chatter_vocab = fresh(30, &mut taken);

        let sign_tokens = |sign: i8| -> BTreeSet<String> {
            spec.inventory
                .items()
                .iter()
                .filter(|i| i.sign == sign)
                .flat_map(|i| tokenize(&i.text))
                .collect()
        };
        let (pos_tokens, neg_tokens) = (sign_tokens(1), sign_tokens(-1));
        let content = |sign: i8, scale: Scale| -> Vec<Vec<String>> {
            let opposite = if sign > 0 { &neg_tokens } else { &pos_tokens };
            spec.inventory
                .items()
                .iter()
                .filter(|i| i.sign == sign && i.scale == scale)
                .map(|i| {
                    let mut words: Vec<String> = tokenize(&i.text)
                        .into_iter()
                        .filter(|t| !opposite.contains(t) && !STOPWORDS.contains(&t.as_str()))
                        .collect();
                    words.dedup();
                    words
                })
                .filter(|w| !w.is_empty())
                .collect()
        };
        let positive_items: Vec<_> = Scale::ALL.iter().map(|&s| content(1, s)).collect();
        let negative_items: Vec<_> = Scale::ALL.iter().map(|&s| content(-1, s)).collect();
        if positive_items.iter().chain(&negative_items).any(Vec::is_empty) {
            return Err(CorpusError::Argument(
                "inventory needs sign-specific wording for both signs of every scale".into(),
            ));
        }
        Ok(Self {
            spec,
            topic_vocab,
            chatter_vocab,
            positive_items,
            negative_items,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn topics(&self) -> usize {
        self.spec.topics
    }

    pub fn topic_vocabulary(&self, topic: usize) -> &[String] {
        &self.topic_vocab[topic]
    }

    /// The planted rule: best topic given the therapist's previous topic.
    pub fn best_topic(&self, previous_topic: usize) -> usize {
        (previous_topic + (self.spec.topics / 2).max(1)) % self.spec.topics
    }

    pub fn therapist_text<R: Rng + ?Sized>(&self, topic: usize, rng: &mut R) -> String {
        let k = self.spec.topics;
        let mut words: Vec<&str> = Vec::with_capacity(self.spec.words_per_therapist_turn);
        for _ in 0..self.spec.ring_words {
            let neighbor = if rng.random::<bool>() {
                (topic + 1) % k
            } else {
                (topic + k - 1) % k
            };
            words.push(self.topic_vocab[neighbor].choose(rng).expect("non-empty vocabulary"));
        }
        let vocab = &self.topic_vocab[topic];
        while words.len() < self.spec.words_per_therapist_turn {
            words.push(vocab.choose(rng).expect("non-empty vocabulary"));
        }
        words.join(" ")
    }

    /// Patient wording for a pair whose therapist topic is `chosen`.
    /// With no planted best (first pair of a session) only chatter is used.
    pub fn patient_text<R: Rng + ?Sized>(&self, best: Option<usize>, chosen: usize, rng: &mut R) -> String {
        let mut words: Vec<&str> = Vec::new();
        if let Some(best) = best {
            let pool = if best == chosen {
                &self.positive_items
            } else {
                &self.negative_items
            };
            for items in pool {
                for _ in 0..self.spec.alliance_words_per_scale {
                    let item = items.choose(rng).expect("non-empty item list");
                    words.push(item.choose(rng).expect("non-empty item wording"));
                }
            }
        }
        for _ in 0..self.spec.chatter_words.max(usize::from(best.is_none())) {
            words.push(self.chatter_vocab.choose(rng).expect("non-empty chatter"));
        }
        words.join(" ")
    }

    pub fn generate(&self, seed: u64) -> SyntheticCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = &self.spec;
        let mut sessions = Vec::with_capacity(spec.sessions);
        let mut therapist_topics = Vec::with_capacity(spec.sessions);
        for s in 0..spec.sessions {
            let session_id = format!("syn-{s:04}");
            let condition = Condition::LABELED[s % Condition::LABELED.len()];
            let mut turns = Vec::with_capacity(spec.turns_per_session);
            let mut topics = Vec::with_capacity(spec.turns_per_session / 2);
            let mut previous: Option<usize> = None;
            while turns.len() + 1 < spec.turns_per_session {
                let best = previous.map(|p| self.best_topic(p));
                let chosen = match best {
                    Some(b) if rng.random::<f64>() < spec.best_topic_rate => b,
                    _ => rng.random_range(0..spec.topics),
                };
                let patient = self.patient_text(best, chosen, &mut rng);
                let therapist = self.therapist_text(chosen, &mut rng);
                let index = turns.len() as u32;
                turns.push(Turn::new(session_id.clone(), index, Speaker::Patient, patient));
                turns.push(Turn::new(session_id.clone(), index + 1, Speaker::Therapist, therapist));
                topics.push(chosen);
                previous = Some(chosen);
            }
            if turns.len() < spec.turns_per_session {
                let text = self.patient_text(previous.map(|p| self.best_topic(p)), usize::MAX, &mut rng);
                turns.push(Turn::new(
                    session_id.clone(),
                    turns.len() as u32,
                    Speaker::Patient,
                    text,
                ));
            }
            sessions.push(Session {
                session_id,
                condition,
                turns,
            });
            therapist_topics.push(topics);
        }
        SyntheticCorpus {
            sessions,
            therapist_topics,
        }
    }
}

/// Builds the world for `spec` and generates its corpus.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus, CorpusError> {
    Ok(SyntheticWorld::new(spec.clone())?.generate(seed))
}

fn pseudo_word(state: &mut u64) -> String {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kl", "tr", "sn",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    *state = state
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    let mut bits = *state ^ (*state >> 29);
    let syllables = 2 + (bits % 2) as usize;
    bits /= 2;
    let mut word = String::new();
    for _ in 0..syllables {
        word.push_str(ONSETS[(bits % ONSETS.len() as u64) as usize]);
        bits /= ONSETS.len() as u64;
        word.push_str(VOWELS[(bits % VOWELS.len() as u64) as usize]);
        bits /= VOWELS.len() as u64;
    }
    word
}
