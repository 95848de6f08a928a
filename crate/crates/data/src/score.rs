//! Exact-match, record-level micro F1.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::grammar::ExtractionRecord;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Matched / predicted / gold record tallies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl MatchCounts {
    /// Multiset intersection of predicted and gold records.
    pub fn of(pred: &[ExtractionRecord], gold: &[ExtractionRecord]) -> Self {
        let mut remaining: HashMap<&ExtractionRecord, usize> = HashMap::new();
        for g in gold {
            *remaining.entry(g).or_default() += 1;
        }
        let mut matched = 0;
        for p in pred {
            if let Some(n) = remaining.get_mut(p) {
                if *n > 0 {
                    *n -= 1;
                    matched += 1;
                }
            }
        }
        Self {
            matched,
            predicted: pred.len(),
            gold: gold.len(),
        }
    }

    pub fn add(&mut self, o: MatchCounts) {
        self.matched += o.matched;
        self.predicted += o.predicted;
        self.gold += o.gold;
    }

    /// `P = matched/predicted`, `R = matched/gold`, `F1 = 2PR/(P+R)`;
    /// each is 0 when its denominator is 0.
    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.matched, self.predicted);
        let recall = ratio(self.matched, self.gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

/// Micro P/R/F1 of one prediction against one gold set.
pub fn f1(pred: &[ExtractionRecord], gold: &[ExtractionRecord]) -> Prf {
    MatchCounts::of(pred, gold).prf()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::Slot;

    fn ent(l: usize, w: usize) -> ExtractionRecord {
        ExtractionRecord::Entity(Slot {
            label: format!("T{l}"),
            word: format!("w{w}"),
        })
    }

    #[test]
    fn exact_match() {
        let g = vec![ent(0, 1), ent(2, 3)];
        assert_eq!(f1(&g, &g).f1, 1.0);
    }

    #[test]
    fn disjoint() {
        assert_eq!(f1(&[ent(0, 1)], &[ent(1, 1)]).f1, 0.0);
    }

    #[test]
    fn half_recall() {
        let p = f1(&[ent(0, 1)], &[ent(0, 1), ent(2, 3)]);
        assert_eq!((p.precision, p.recall), (1.0, 0.5));
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_prediction_and_duplicates() {
        assert_eq!(f1(&[], &[ent(0, 1)]).f1, 0.0);
        assert_eq!(f1(&[], &[]).f1, 0.0);
        let p = f1(&[ent(0, 1), ent(0, 1)], &[ent(0, 1)]);
        assert_eq!((p.precision, p.recall), (0.5, 1.0));
    }
}
