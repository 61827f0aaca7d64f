//! Dialogue data model: turns, sessions, canonical patient/therapist pairing
//! and session-level train/test splitting.

mod io;
pub mod synthetic;

pub use io::{load_corpus, parse_corpus, save_corpus, write_corpus, CorpusFormat};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("corpus is empty")]
    Empty,
    #[error("session {session_id}: {detail}")]
    InvalidSession { session_id: String, detail: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Patient,
    Therapist,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::Patient => "patient",
            Speaker::Therapist => "therapist",
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Speaker {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "patient" => Ok(Speaker::Patient),
            "therapist" => Ok(Speaker::Therapist),
            other => Err(format!("unknown speaker tag {other:?}")),
        }
    }
}

/// Clinical label attached to a session.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Anxiety,
    Depression,
    Schizophrenia,
    Suicidal,
    #[default]
    Unlabeled,
}

impl Condition {
    pub const LABELED: [Condition; 4] = [
        Condition::Anxiety,
        Condition::Depression,
        Condition::Schizophrenia,
        Condition::Suicidal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Anxiety => "anxiety",
            Condition::Depression => "depression",
            Condition::Schizophrenia => "schizophrenia",
            Condition::Suicidal => "suicidal",
            Condition::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "anxiety" => Ok(Condition::Anxiety),
            "depression" => Ok(Condition::Depression),
            "schizophrenia" => Ok(Condition::Schizophrenia),
            "suicidal" => Ok(Condition::Suicidal),
            "" | "unlabeled" => Ok(Condition::Unlabeled),
            other => Err(format!("unknown condition {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub session_id: String,
    pub index: u32,
    pub speaker: Speaker,
    pub text: String,
    /// Milliseconds since the Unix epoch, when known.
    pub timestamp: Option<u64>,
}

impl Turn {
    pub fn new(session_id: impl Into<String>, index: u32, speaker: Speaker, text: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            index,
            speaker,
            text: text.into(),
            timestamp: None,
        }
    }
}

/// A patient utterance followed by the therapist's response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnPair {
    pub patient: Turn,
    pub therapist: Turn,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub session_id: String,
    pub condition: Condition,
    pub turns: Vec<Turn>,
}

impl Session {
    /// Builds a session from `(speaker, text)` tuples, numbering turns from 0.
    pub fn from_script<S: AsRef<str>>(
        session_id: impl Into<String>,
        condition: Condition,
        script: &[(Speaker, S)],
    ) -> Self {
        let session_id = session_id.into();
        let turns = script
            .iter()
            .enumerate()
            .map(|(i, (speaker, text))| Turn::new(session_id.clone(), i as u32, *speaker, text.as_ref()))
            .collect();
        Self {
            session_id,
            condition,
            turns,
        }
    }

    /// Checks ordering and content invariants.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |detail: String| CorpusError::InvalidSession {
            session_id: self.session_id.clone(),
            detail,
        };
        for pair in self.turns.windows(2) {
            if pair[1].index <= pair[0].index {
                return Err(invalid(format!(
                    "turn index {} does not follow {}",
                    pair[1].index, pair[0].index
                )));
            }
        }
        for turn in &self.turns {
            if turn.session_id != self.session_id {
                return Err(invalid(format!(
                    "turn {} belongs to session {}",
                    turn.index, turn.session_id
                )));
            }
            if turn.text.trim().is_empty() {
                return Err(invalid(format!("turn {} has empty text", turn.index)));
            }
        }
        Ok(())
    }
}

/// Collapses runs of same-speaker turns into one turn.
///
/// Texts are joined with a single space; the merged turn keeps the index of
/// the last turn in the run and the timestamp of the first.
pub fn merge_consecutive(turns: &[Turn]) -> Vec<Turn> {
    let mut merged: Vec<Turn> = Vec::with_capacity(turns.len());
    for turn in turns {
        match merged.last_mut() {
            Some(last) if last.speaker == turn.speaker => {
                last.text.push(' ');
                last.text.push_str(turn.text.trim());
                last.index = turn.index;
                if last.timestamp.is_none() {
                    last.timestamp = turn.timestamp;
                }
            }
            _ => {
                let mut t = turn.clone();
                t.text = t.text.trim().to_string();
                merged.push(t);
            }
        }
    }
    merged
}

/// Canonical patient-first pairing of a session's turns.
///
/// Same-speaker runs are merged first, a leading therapist turn and a
/// trailing patient turn are left unpaired.
pub fn pair_turns(session: &Session) -> Vec<TurnPair> {
    let merged = merge_consecutive(&session.turns);
    let mut pairs = Vec::with_capacity(merged.len() / 2);
    let mut iter = merged.into_iter().peekable();
    if matches!(iter.peek(), Some(t) if t.speaker == Speaker::Therapist) {
        iter.next();
    }
    while let Some(patient) = iter.next() {
        debug_assert_eq!(patient.speaker, Speaker::Patient);
        match iter.next() {
            Some(therapist) => pairs.push(TurnPair { patient, therapist }),
            None => break,
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<Session>,
    pub test: Vec<Session>,
    pub seed: u64,
}

/// Splits at session granularity. Both sides keep the input order.
pub fn split_corpus(sessions: &[Session], test_fraction: f64, seed: u64) -> Result<CorpusSplit, CorpusError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::Argument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if sessions.len() < 2 {
        return Err(CorpusError::Argument(format!(
            "need at least 2 sessions to split, got {}",
            sessions.len()
        )));
    }
    let n = sessions.len();
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n - n_test), Vec::with_capacity(n_test));
    for (session, test_side) in sessions.iter().zip(is_test) {
        if test_side {
            test.push(session.clone());
        } else {
            train.push(session.clone());
        }
    }
    Ok(CorpusSplit { train, test, seed })
}

/// Keeps only sessions carrying the given condition label.
pub fn filter_condition(sessions: &[Session], condition: Condition) -> Vec<Session> {
    sessions.iter().filter(|s| s.condition == condition).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use Speaker::{Patient as P, Therapist as T};

    fn session(script: &[(Speaker, &str)]) -> Session {
        Session::from_script("s1", Condition::Unlabeled, script)
    }

    #[test]
    fn alternating_turns_give_two_pairs() {
        let s = session(&[(P, "a"), (T, "b"), (P, "c"), (T, "d")]);
        let pairs = pair_turns(&s);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].patient.text, "c");
        assert_eq!(pairs[1].therapist.text, "d");
    }

    #[test]
    fn consecutive_patient_turns_merge() {
        let s = session(&[(P, "first"), (P, "second"), (T, "reply")]);
        let pairs = pair_turns(&s);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].patient.text, "first second");
        assert_eq!(pairs[0].therapist.index, pairs[0].patient.index + 1);
    }

    #[test]
    fn leading_therapist_turn_is_dropped() {
        // adjacencies of T,P,T: (T,P) is therapist-first, (P,T) is the only pair
        let s = session(&[(T, "hello"), (P, "hi"), (T, "how are you")]);
        let pairs = pair_turns(&s);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].patient.index, 1);
        assert_eq!(pairs[0].therapist.index, 2);
    }

    #[test]
    fn no_valid_adjacency_is_empty() {
        assert!(pair_turns(&session(&[(T, "x"), (T, "y")])).is_empty());
        assert!(pair_turns(&session(&[(P, "x")])).is_empty());
    }

    fn sessions(n: usize) -> Vec<Session> {
        (0..n)
            .map(|i| Session::from_script(format!("s{i}"), Condition::Unlabeled, &[(P, "a"), (T, "b")]))
            .collect()
    }

    #[test]
    fn split_ninety_five_five() {
        let split = split_corpus(&sessions(100), 0.05, 7).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (95, 5));
        let again = split_corpus(&sessions(100), 0.05, 7).unwrap();
        assert_eq!(split, again);
    }

    #[test]
    fn split_two_sessions_half() {
        let split = split_corpus(&sessions(2), 0.5, 1).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (1, 1));
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(matches!(
            split_corpus(&sessions(10), 0.0, 1),
            Err(CorpusError::Argument(_))
        ));
        assert!(matches!(
            split_corpus(&sessions(10), 1.0, 1),
            Err(CorpusError::Argument(_))
        ));
        assert!(matches!(
            split_corpus(&sessions(1), 0.5, 1),
            Err(CorpusError::Argument(_))
        ));
    }

    #[test]
    fn validate_rejects_non_increasing_index() {
        let mut s = session(&[(P, "a"), (T, "b")]);
        s.turns[1].index = 0;
        assert!(s.validate().is_err());
        let blank = session(&[(P, "  ")]);
        assert!(blank.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn speakers() -> impl Strategy<Value = Vec<bool>> {
            prop::collection::vec(any::<bool>(), 0..40)
        }

        proptest! {
            #[test]
            fn pair_count_bounded_by_merged_turns(flags in speakers()) {
                let script: Vec<(Speaker, String)> = flags
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| (if p { P } else { T }, format!("w{i}")))
                    .collect();
                let s = Session::from_script("x", Condition::Unlabeled, &script);
                let merged = merge_consecutive(&s.turns).len();
                let pairs = pair_turns(&s);
                prop_assert!(pairs.len() <= merged / 2);
                for p in &pairs {
                    prop_assert_eq!(p.patient.speaker, P);
                    prop_assert_eq!(p.therapist.speaker, T);
                    prop_assert!(p.therapist.index > p.patient.index);
                }
            }

            #[test]
            fn split_partitions_sessions(n in 2usize..60, frac in 0.01f64..0.99, seed in any::<u64>()) {
                let all = sessions(n);
                let split = split_corpus(&all, frac, seed).unwrap();
                prop_assert_eq!(split.train.len() + split.test.len(), n);
                let mut ids: Vec<&str> = split.train.iter().chain(&split.test).map(|s| s.session_id.as_str()).collect();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), n);
                let expected = n as f64 * frac;
                prop_assert!((split.test.len() as f64 - expected).abs() <= 1.0);
            }
        }
    }
}
