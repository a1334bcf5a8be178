use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One utterance/response exchange. An empty response is the agent staying
/// silent (`[EMPTY]`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Turn {
    pub utterance: Vec<usize>,
    pub response: Vec<usize>,
    pub raw_utterance: String,
    pub raw_response: String,
}

impl Turn {
    pub fn is_empty(&self) -> bool {
        self.utterance.is_empty() && self.response.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "SAT")]
    Sat,
    #[serde(rename = "DSAT")]
    Dsat,
}

impl Label {
    /// Training target: dissatisfaction is the positive class.
    pub fn target(self) -> f64 {
        match self {
            Label::Sat => 0.0,
            Label::Dsat => 1.0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Sat => "SAT",
            Label::Dsat => "DSAT",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SAT" => Ok(Label::Sat),
            "DSAT" => Ok(Label::Dsat),
            o => Err(Error::Format(format!("unknown label `{o}`"))),
        }
    }
}

/// Annotator score to label: 3 or better is satisfying.
pub fn score_to_label(score: u8) -> Result<Label> {
    match score {
        1 | 2 => Ok(Label::Dsat),
        3..=5 => Ok(Label::Sat),
        s => Err(Error::Domain(format!("score must be in 1..=5, got {s}"))),
    }
}

/// An ordered list of turns with one targeted turn.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Session {
    pub turns: Vec<Turn>,
    pub targeted_index: usize,
    pub skill: String,
    pub label: Option<Label>,
    pub score: Option<u8>,
}

impl Session {
    pub fn new(
        turns: Vec<Turn>,
        targeted_index: usize,
        skill: impl Into<String>,
        score: Option<u8>,
        label: Option<Label>,
    ) -> Result<Self> {
        let s = Self {
            turns,
            targeted_index,
            skill: skill.into(),
            label,
            score,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Domain("session has no turns".into()));
        }
        if self.targeted_index >= self.turns.len() {
            return Err(Error::Domain(format!(
                "targeted index {} outside session of {} turns",
                self.targeted_index,
                self.turns.len()
            )));
        }
        if let (Some(score), Some(label)) = (self.score, self.label) {
            if score_to_label(score)? != label {
                return Err(Error::Domain(format!(
                    "label {label} disagrees with score {score}"
                )));
            }
        }
        Ok(())
    }

    pub fn targeted(&self) -> &Turn {
        &self.turns[self.targeted_index]
    }

    pub fn targeted_mut(&mut self) -> &mut Turn {
        &mut self.turns[self.targeted_index]
    }

    /// Turns before the targeted turn, in conversation order.
    pub fn previous(&self) -> &[Turn] {
        &self.turns[..self.targeted_index]
    }

    /// Turns after the targeted turn, in conversation order.
    pub fn next(&self) -> &[Turn] {
        &self.turns[self.targeted_index + 1..]
    }

    /// Identity used for overlap checks: all raw turn texts.
    pub fn identity(&self) -> Vec<(&str, &str)> {
        self.turns
            .iter()
            .map(|t| (t.raw_utterance.as_str(), t.raw_response.as_str()))
            .collect()
    }

    pub fn max_token(&self) -> Option<usize> {
        self.turns
            .iter()
            .flat_map(|t| t.utterance.iter().chain(&t.response))
            .copied()
            .max()
    }
}

/// At most `t` turns either side of the targeted turn; fewer at session
/// boundaries. No padding.
pub fn window(session: &Session, t: usize) -> Session {
    let start = session.targeted_index.saturating_sub(t);
    let end = (session.targeted_index + t + 1).min(session.turns.len());
    Session {
        turns: session.turns[start..end].to_vec(),
        targeted_index: session.targeted_index - start,
        skill: session.skill.clone(),
        label: session.label,
        score: session.score,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn turn(i: usize) -> Turn {
        Turn {
            utterance: vec![i],
            response: vec![],
            raw_utterance: format!("u{i}"),
            raw_response: String::new(),
        }
    }

    fn session(n: usize, target: usize) -> Session {
        Session::new((0..n).map(turn).collect(), target, "music", None, None).unwrap()
    }

    #[test]
    fn score_mapping() {
        assert_eq!(score_to_label(3).unwrap(), Label::Sat);
        assert_eq!(score_to_label(1).unwrap(), Label::Dsat);
        assert_eq!(score_to_label(5).unwrap(), Label::Sat);
        assert_eq!(score_to_label(2).unwrap(), Label::Dsat);
        assert!(matches!(score_to_label(0), Err(Error::Domain(_))));
        assert!(matches!(score_to_label(6), Err(Error::Domain(_))));
    }

    #[test]
    fn score_mapping_is_monotone() {
        for s in 1..5u8 {
            let (a, b) = (score_to_label(s).unwrap(), score_to_label(s + 1).unwrap());
            assert!(!(a == Label::Sat && b == Label::Dsat));
        }
    }

    #[test]
    fn window_examples() {
        let w = window(&session(7, 3), 2);
        assert_eq!(w.turns, (1..=5).map(turn).collect::<Vec<_>>());
        assert_eq!(w.targeted_index, 2);

        let w = window(&session(7, 0), 2);
        assert_eq!(w.turns, (0..=2).map(turn).collect::<Vec<_>>());
        assert_eq!(w.targeted_index, 0);

        let w = window(&session(7, 4), 0);
        assert_eq!(w.turns, vec![turn(4)]);
        assert_eq!(w.targeted_index, 0);
    }

    #[test]
    fn invalid_sessions_rejected() {
        assert!(Session::new(vec![], 0, "x", None, None).is_err());
        assert!(Session::new(vec![turn(0)], 1, "x", None, None).is_err());
        assert!(Session::new(vec![turn(0)], 0, "x", Some(4), Some(Label::Dsat)).is_err());
    }

    proptest! {
        #[test]
        fn window_keeps_target(n in 1usize..20, t in 0usize..5, seed in 0usize..1000) {
            let target = seed % n;
            let s = session(n, target);
            let w = window(&s, t);
            prop_assert!(w.turns.len() <= 2 * t + 1);
            prop_assert_eq!(w.targeted(), s.targeted());
        }
    }
}
