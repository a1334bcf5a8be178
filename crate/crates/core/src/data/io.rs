//! Line-delimited JSON corpus format.
//!
//! One session per line:
//!
//! ```text
//! {"skill":"music","turns":[["play clocks","playing clocks"],["stop",""]],"targeted_index":0,"score":4,"label":"SAT"}
//! ```
//!
//! `score` and `label` are omitted for unlabeled sessions. An empty
//! response string is an empty agent response. Token ids are not stored;
//! they are recomputed from the text with the corpus vocabulary.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::session::{Label, Session, Turn};
use super::vocab::Vocab;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub skill: String,
    pub turns: Vec<(String, String)>,
    pub targeted_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl From<&Session> for SessionRecord {
    fn from(s: &Session) -> Self {
        Self {
            skill: s.skill.clone(),
            turns: s
                .turns
                .iter()
                .map(|t| (t.raw_utterance.clone(), t.raw_response.clone()))
                .collect(),
            targeted_index: s.targeted_index,
            score: s.score,
            label: s.label,
        }
    }
}

impl SessionRecord {
    pub fn into_session(self, vocab: &Vocab) -> Result<Session> {
        let turns = self
            .turns
            .into_iter()
            .map(|(u, r)| {
                Ok(Turn {
                    utterance: vocab.encode(&u)?,
                    response: vocab.encode(&r)?,
                    raw_utterance: u,
                    raw_response: r,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Session::new(
            turns,
            self.targeted_index,
            self.skill,
            self.score,
            self.label,
        )
    }
}

pub fn write_sessions<W: Write>(mut w: W, sessions: &[Session]) -> Result<()> {
    for s in sessions {
        serde_json::to_writer(&mut w, &SessionRecord::from(s))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sessions<R: BufRead>(r: R, vocab: &Vocab) -> Result<Vec<Session>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SessionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        out.push(rec.into_session(vocab)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, GeneratorConfig};

    #[test]
    fn corpus_round_trip() {
        let c = generate_corpus(&GeneratorConfig {
            num_labeled: 50,
            num_unlabeled: 50,
            ..Default::default()
        })
        .unwrap();
        for set in [&c.labeled, &c.unlabeled] {
            let mut buf = Vec::new();
            write_sessions(&mut buf, set).unwrap();
            let back = read_sessions(buf.as_slice(), &c.vocab).unwrap();
            assert_eq!(&back, set);
        }
    }

    #[test]
    fn documented_line_parses() {
        let vocab = Vocab::from_text("play\nclocks\nplaying\nstop\n").unwrap();
        let line = r#"{"skill":"music","turns":[["play clocks","playing clocks"],["stop",""]],"targeted_index":0,"score":4,"label":"SAT"}"#;
        let s = read_sessions(line.as_bytes(), &vocab).unwrap();
        assert_eq!(s[0].label, Some(Label::Sat));
        assert!(s[0].turns[1].response.is_empty());
        let bad = r#"{"skill":"music","turns":[["play clocks",""]],"targeted_index":0,"score":1,"label":"SAT"}"#;
        assert!(read_sessions(bad.as_bytes(), &vocab).is_err());
    }
}
