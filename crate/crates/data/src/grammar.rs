//! Answer grammar shared by every task family.
//!
//! ```text
//! answer  := record*
//! record  := "ENT" label word ";"
//!          | "REL" label word label word ";"
//!          | "EVT" label word ("ARG" label word)* ";"
//! label   := "T" digits
//! word    := "w" digits | "amb"
//! ```
//!
//! Parsing stops at the first `<eos>`; everything from the first malformed
//! record onward is dropped and counted.

use serde::{Deserialize, Serialize};

pub const EOS: &str = "<eos>";
pub const SEP: &str = ";";
pub const ENT: &str = "ENT";
pub const REL: &str = "REL";
pub const EVT: &str = "EVT";
pub const ARG: &str = "ARG";
pub const AMBIGUOUS: &str = "amb";

pub fn is_label(tok: &str) -> bool {
    tok.len() > 1 && tok.starts_with('T') && tok[1..].bytes().all(|b| b.is_ascii_digit())
}

pub fn is_word(tok: &str) -> bool {
    tok == AMBIGUOUS || (tok.len() > 1 && tok.starts_with('w') && tok[1..].bytes().all(|b| b.is_ascii_digit()))
}

pub fn label_token(label: usize) -> String {
    format!("T{label}")
}

pub fn word_token(word: usize) -> String {
    format!("w{word}")
}

/// A labelled word occurrence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub label: String,
    pub word: String,
}

/// One extracted record.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExtractionRecord {
    Entity(Slot),
    Relation { head: Slot, tail: Slot },
    Event { trigger: Slot, args: Vec<Slot> },
}

impl ExtractionRecord {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Entity(_) => ENT,
            Self::Relation { .. } => REL,
            Self::Event { .. } => EVT,
        }
    }

    pub fn slots(&self) -> Vec<&Slot> {
        match self {
            Self::Entity(s) => vec![s],
            Self::Relation { head, tail } => vec![head, tail],
            Self::Event { trigger, args } => std::iter::once(trigger).chain(args).collect(),
        }
    }

    pub fn write_tokens(&self, out: &mut Vec<String>) {
        out.push(self.tag().to_string());
        let push = |out: &mut Vec<String>, s: &Slot| {
            out.push(s.label.clone());
            out.push(s.word.clone());
        };
        match self {
            Self::Entity(s) => push(out, s),
            Self::Relation { head, tail } => {
                push(out, head);
                push(out, tail);
            }
            Self::Event { trigger, args } => {
                push(out, trigger);
                for a in args {
                    out.push(ARG.to_string());
                    push(out, a);
                }
            }
        }
        out.push(SEP.to_string());
    }
}

/// Records in grammar form, without `<eos>`.
pub fn serialize(records: &[ExtractionRecord]) -> Vec<String> {
    let mut out = Vec::new();
    for r in records {
        r.write_tokens(&mut out);
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub records: Vec<ExtractionRecord>,
    /// Tokens discarded after the first malformed record.
    pub malformed_tokens: usize,
}

/// Parses the grammar-valid prefix of an answer. Never fails.
pub fn parse_answer<S: AsRef<str>>(tokens: &[S]) -> ParsedAnswer {
    let end = tokens.iter().position(|t| t.as_ref() == EOS).unwrap_or(tokens.len());
    let toks: Vec<&str> = tokens[..end].iter().map(AsRef::as_ref).collect();
    let mut records = Vec::new();
    let mut pos = 0;
    while pos < toks.len() {
        match parse_record(&toks[pos..]) {
            Some((rec, used)) => {
                records.push(rec);
                pos += used;
            }
            None => break,
        }
    }
    ParsedAnswer {
        records,
        malformed_tokens: toks.len() - pos,
    }
}

fn slot_at(toks: &[&str], i: usize) -> Option<Slot> {
    let (label, word) = (toks.get(i)?, toks.get(i + 1)?);
    (is_label(label) && is_word(word)).then(|| Slot {
        label: label.to_string(),
        word: word.to_string(),
    })
}

fn parse_record(toks: &[&str]) -> Option<(ExtractionRecord, usize)> {
    let sep_at = |i: usize| (toks.get(i) == Some(&SEP)).then_some(i + 1);
    match *toks.first()? {
        ENT => {
            let s = slot_at(toks, 1)?;
            Some((ExtractionRecord::Entity(s), sep_at(3)?))
        }
        REL => {
            let head = slot_at(toks, 1)?;
            let tail = slot_at(toks, 3)?;
            Some((ExtractionRecord::Relation { head, tail }, sep_at(5)?))
        }
        EVT => {
            let trigger = slot_at(toks, 1)?;
            let mut args = Vec::new();
            let mut i = 3;
            while toks.get(i) == Some(&ARG) {
                args.push(slot_at(toks, i + 1)?);
                i += 3;
            }
            Some((ExtractionRecord::Event { trigger, args }, sep_at(i)?))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn two_well_formed_records() {
        let p = parse_answer(&toks("ENT T1 w4 ; REL T0 w2 T3 amb ; <eos>"));
        assert_eq!(p.records.len(), 2);
        assert_eq!(p.malformed_tokens, 0);
        assert_eq!(serialize(&p.records), toks("ENT T1 w4 ; REL T0 w2 T3 amb ;"));
    }

    #[test]
    fn empty_answer() {
        let p = parse_answer::<String>(&[]);
        assert!(p.records.is_empty() && p.malformed_tokens == 0);
    }

    #[test]
    fn malformed_tail_is_dropped_and_counted() {
        let p = parse_answer(&toks("EVT T2 w1 ARG T0 w5 ; ENT w3 T1 ; ENT T0 w1 ;"));
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.malformed_tokens, 8);
        let unterminated = parse_answer(&toks("ENT T0 w1"));
        assert!(unterminated.records.is_empty());
        assert_eq!(unterminated.malformed_tokens, 3);
    }

    fn token_strategy() -> impl Strategy<Value = String> {
        prop_oneof![
            Just(ENT.to_string()),
            Just(REL.to_string()),
            Just(EVT.to_string()),
            Just(ARG.to_string()),
            Just(SEP.to_string()),
            Just(EOS.to_string()),
            Just(AMBIGUOUS.to_string()),
            (0usize..6).prop_map(label_token),
            (0usize..30).prop_map(word_token),
            "[a-zA-Z0-9;<>]{0,4}",
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn fuzzed_answers_parse_and_round_trip(input in proptest::collection::vec(token_strategy(), 0..40)) {
            let parsed = parse_answer(&input);
            let again = parse_answer(&serialize(&parsed.records));
            prop_assert_eq!(again.malformed_tokens, 0);
            prop_assert_eq!(again.records, parsed.records);
        }
    }
}
