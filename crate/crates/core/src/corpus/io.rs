use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Condition, CorpusError, Session, Speaker, Turn};

/// On-disk corpus layouts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CorpusFormat {
    /// One JSON object per line.
    #[default]
    Jsonl,
    /// Tab-separated with a header row naming the columns.
    Tsv,
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => CorpusFormat::Tsv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TurnRecord {
    session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    condition: Option<String>,
    speaker: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamp: Option<u64>,
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Session>, CorpusError> {
    let contents = fs::read_to_string(path)?;
    parse_corpus(&contents, format)
}

/// Parses corpus text. Sessions come out in order of first appearance and
/// turns sorted by index.
///
/// JSONL input may be a live-session log: records whose `type` field is
/// present and not `"turn"` are skipped.
pub fn parse_corpus(contents: &str, format: CorpusFormat) -> Result<Vec<Session>, CorpusError> {
    let records = match format {
        CorpusFormat::Jsonl => parse_jsonl(contents)?,
        CorpusFormat::Tsv => parse_tsv(contents)?,
    };
    if records.is_empty() {
        return Err(CorpusError::Empty);
    }

    let mut order: Vec<Session> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (line, record) in records {
        let speaker: Speaker = record
            .speaker
            .parse()
            .map_err(|detail| CorpusError::Parse { line, detail })?;
        let condition = match &record.condition {
            Some(c) => Some(
                c.parse::<Condition>()
                    .map_err(|detail| CorpusError::Parse { line, detail })?,
            ),
            None => None,
        };
        if record.text.trim().is_empty() {
            return Err(CorpusError::Parse {
                line,
                detail: "empty turn text".into(),
            });
        }
        let slot = *by_id.entry(record.session_id.clone()).or_insert_with(|| {
            order.push(Session {
                session_id: record.session_id.clone(),
                condition: Condition::Unlabeled,
                turns: Vec::new(),
            });
            order.len() - 1
        });
        let session = &mut order[slot];
        if let Some(c) = condition {
            if session.turns.is_empty() || session.condition == Condition::Unlabeled {
                session.condition = c;
            } else if session.condition != c && c != Condition::Unlabeled {
                return Err(CorpusError::Parse {
                    line,
                    detail: format!(
                        "session {} labeled {} but earlier turns say {}",
                        session.session_id, c, session.condition
                    ),
                });
            }
        }
        let index = record
            .index
            .unwrap_or_else(|| session.turns.iter().map(|t| t.index + 1).max().unwrap_or(0));
        if session.turns.iter().any(|t| t.index == index) {
            return Err(CorpusError::Parse {
                line,
                detail: format!("duplicate turn index {index} in session {}", session.session_id),
            });
        }
        session.turns.push(Turn {
            session_id: record.session_id,
            index,
            speaker,
            text: record.text,
            timestamp: record.timestamp,
        });
    }
    for session in &mut order {
        session.turns.sort_by_key(|t| t.index);
    }
    Ok(order)
}

fn parse_jsonl(contents: &str) -> Result<Vec<(usize, TurnRecord)>, CorpusError> {
    let mut out = Vec::new();
    for (i, raw) in contents.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| CorpusError::Parse {
            line,
            detail: e.to_string(),
        })?;
        match value.get("type").and_then(Value::as_str) {
            Some("turn") | None => {}
            Some(_) => continue,
        }
        let record: TurnRecord = serde_json::from_value(value).map_err(|e| CorpusError::Parse {
            line,
            detail: e.to_string(),
        })?;
        out.push((line, record));
    }
    Ok(out)
}

const TSV_COLUMNS: [&str; 6] = ["session_id", "condition", "speaker", "index", "timestamp", "text"];

fn parse_tsv(contents: &str) -> Result<Vec<(usize, TurnRecord)>, CorpusError> {
    let mut lines = contents.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let columns: Vec<&str> = header.split('\t').map(str::trim).collect();
    let position = |name: &str| columns.iter().position(|c| *c == name);
    let (Some(sid), Some(spk), Some(txt)) = (position("session_id"), position("speaker"), position("text")) else {
        return Err(CorpusError::Parse {
            line: 1,
            detail: "header must name session_id, speaker and text columns".into(),
        });
    };
    let (cond, idx, ts) = (position("condition"), position("index"), position("timestamp"));

    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        let fields: Vec<&str> = raw.split('\t').collect();
        let get = |col: usize, name: &str| {
            fields.get(col).copied().ok_or_else(|| CorpusError::Parse {
                line,
                detail: format!("missing field `{name}`"),
            })
        };
        let optional = |col: Option<usize>| {
            col.and_then(|c| fields.get(c))
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
        };
        let number = |col: Option<usize>, name: &str| -> Result<Option<u64>, CorpusError> {
            optional(col)
                .map(|s| {
                    s.parse::<u64>().map_err(|e| CorpusError::Parse {
                        line,
                        detail: format!("field `{name}`: {e}"),
                    })
                })
                .transpose()
        };
        out.push((
            line,
            TurnRecord {
                session_id: unescape_tsv(get(sid, "session_id")?.trim()),
                condition: optional(cond).map(str::to_string),
                speaker: get(spk, "speaker")?.to_string(),
                text: unescape_tsv(get(txt, "text")?),
                index: number(idx, "index")?.map(|v| v as u32),
                timestamp: number(ts, "timestamp")?,
            },
        ));
    }
    Ok(out)
}

fn escape_tsv(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape_tsv(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

pub fn write_corpus<W: Write>(mut w: W, sessions: &[Session], format: CorpusFormat) -> Result<(), CorpusError> {
    if format == CorpusFormat::Tsv {
        writeln!(w, "{}", TSV_COLUMNS.join("\t"))?;
    }
    for session in sessions {
        for turn in &session.turns {
            match format {
                CorpusFormat::Jsonl => {
                    let record = TurnRecord {
                        session_id: session.session_id.clone(),
                        condition: Some(session.condition.as_str().to_string()),
                        speaker: turn.speaker.as_str().to_string(),
                        text: turn.text.clone(),
                        index: Some(turn.index),
                        timestamp: turn.timestamp,
                    };
                    serde_json::to_writer(&mut w, &record).map_err(std::io::Error::from)?;
                    writeln!(w)?;
                }
                CorpusFormat::Tsv => writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    escape_tsv(&session.session_id),
                    session.condition,
                    turn.speaker,
                    turn.index,
                    turn.timestamp.map(|t| t.to_string()).unwrap_or_default(),
                    escape_tsv(&turn.text)
                )?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_corpus(path: &Path, sessions: &[Session], format: CorpusFormat) -> Result<(), CorpusError> {
    let file = fs::File::create(path)?;
    write_corpus(BufWriter::new(file), sessions, format)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sessions_four_turns() {
        let mut text = String::new();
        for s in ["a", "b"] {
            for (i, spk) in ["patient", "therapist", "patient", "therapist"].iter().enumerate() {
                text.push_str(&format!(
                    "{{\"session_id\":\"{s}\",\"speaker\":\"{spk}\",\"text\":\"turn {i}\"}}\n"
                ));
            }
        }
        let sessions = parse_corpus(&text, CorpusFormat::Jsonl).unwrap();
        assert_eq!(sessions.len(), 2);
        assert_eq!(sessions[0].session_id, "a");
        assert!(sessions.iter().all(|s| s.turns.len() == 4));
        assert_eq!(sessions[1].turns[3].index, 3);
    }

    #[test]
    fn unknown_speaker_names_line() {
        let text = "{\"session_id\":\"a\",\"speaker\":\"patient\",\"text\":\"x\"}\n\
                    {\"session_id\":\"a\",\"speaker\":\"nurse\",\"text\":\"y\"}\n";
        match parse_corpus(text, CorpusFormat::Jsonl) {
            Err(CorpusError::Parse { line, detail }) => {
                assert_eq!(line, 2);
                assert!(detail.contains("nurse"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_names_line() {
        let text =
            "{\"session_id\":\"a\",\"speaker\":\"patient\",\"text\":\"x\"}\n\n{\"session_id\":\"a\",\"text\":\"y\"}\n";
        match parse_corpus(text, CorpusFormat::Jsonl) {
            Err(CorpusError::Parse { line, detail }) => {
                assert_eq!(line, 3);
                assert!(detail.contains("speaker"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_input_is_empty_corpus() {
        assert!(matches!(parse_corpus("", CorpusFormat::Jsonl), Err(CorpusError::Empty)));
        assert!(matches!(
            parse_corpus("\n\n", CorpusFormat::Jsonl),
            Err(CorpusError::Empty)
        ));
    }

    #[test]
    fn explicit_indices_sort_turns() {
        let text = "{\"session_id\":\"a\",\"speaker\":\"therapist\",\"text\":\"second\",\"index\":5}\n\
                    {\"session_id\":\"a\",\"speaker\":\"patient\",\"text\":\"first\",\"index\":2}\n";
        let sessions = parse_corpus(text, CorpusFormat::Jsonl).unwrap();
        assert_eq!(sessions[0].turns[0].text, "first");
        assert_eq!(sessions[0].turns[1].index, 5);
    }

    #[test]
    fn non_turn_log_records_are_skipped() {
        let text = "{\"type\":\"turn\",\"session_id\":\"a\",\"speaker\":\"patient\",\"text\":\"x\",\"index\":0}\n\
                    {\"type\":\"annotation\",\"session_id\":\"a\",\"task\":1.0}\n";
        let sessions = parse_corpus(text, CorpusFormat::Jsonl).unwrap();
        assert_eq!(sessions[0].turns.len(), 1);
    }

    #[test]
    fn tsv_round_trip_with_escapes() {
        let s = Session {
            session_id: "s\t1".into(),
            condition: Condition::Suicidal,
            turns: vec![
                Turn {
                    session_id: "s\t1".into(),
                    index: 0,
                    speaker: Speaker::Patient,
                    text: "tab\there and a \\ slash".into(),
                    timestamp: Some(12),
                },
                Turn::new("s\t1", 1, Speaker::Therapist, "line\nbreak"),
            ],
        };
        let mut buf = Vec::new();
        write_corpus(&mut buf, std::slice::from_ref(&s), CorpusFormat::Tsv).unwrap();
        let back = parse_corpus(std::str::from_utf8(&buf).unwrap(), CorpusFormat::Tsv).unwrap();
        assert_eq!(back, vec![s]);
    }
}
