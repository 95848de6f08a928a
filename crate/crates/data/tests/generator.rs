use std::collections::{BTreeMap, BTreeSet};

use clorae_data::grammar::AMBIGUOUS;
use clorae_data::jsonl::{read_suite, to_jsonl_bytes, write_suite};
use clorae_data::score::MatchCounts;
use clorae_data::{generate, parse_answer, DataError, Family, GeneratorSpec, LookupOracle, Split, Suite};

fn spec(seed: u64, kappa: f64, visual: f64) -> GeneratorSpec {
    let mut s = GeneratorSpec::three_families(seed, 120, 40, 40);
    s.conflict_rate = kappa;
    s.visual_rate = visual;
    s
}

fn suite_bytes(suite: &Suite) -> Vec<u8> {
    let mut out = Vec::new();
    for d in &suite.datasets {
        for split in Split::ALL {
            out.extend(to_jsonl_bytes(d.split(split)).unwrap());
        }
    }
    out
}

/// `(family, word) -> labels` read back from gold answers, ignoring `amb`.
fn observed_labels(suite: &Suite) -> BTreeMap<(usize, String), BTreeSet<String>> {
    let mut seen: BTreeMap<(usize, String), BTreeSet<String>> = BTreeMap::new();
    for d in &suite.datasets {
        for split in Split::ALL {
            for s in d.split(split) {
                for r in parse_answer(&s.answer).records {
                    for slot in r.slots() {
                        if slot.word != AMBIGUOUS {
                            seen.entry((s.task, slot.word.clone())).or_default().insert(slot.label.clone());
                        }
                    }
                }
            }
        }
    }
    seen
}

#[test]
fn same_seed_gives_identical_bytes() {
    let a = suite_bytes(&generate(&spec(11, 0.7, 0.1)).unwrap());
    let b = suite_bytes(&generate(&spec(11, 0.7, 0.1)).unwrap());
    let c = suite_bytes(&generate(&spec(12, 0.7, 0.1)).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn zero_conflict_admits_one_shared_table() {
    let seen = observed_labels(&generate(&spec(3, 0.0, 0.0)).unwrap());
    let mut table: BTreeMap<String, String> = BTreeMap::new();
    for ((_, word), labels) in &seen {
        assert_eq!(labels.len(), 1, "word {word} has labels {labels:?} within one family");
        let l = labels.iter().next().unwrap();
        let prev = table.entry(word.clone()).or_insert_with(|| l.clone());
        assert_eq!(prev, l, "word {word} needs two labels");
    }
}

#[test]
fn full_conflict_defeats_any_shared_table() {
    let seen = observed_labels(&generate(&spec(3, 1.0, 0.0)).unwrap());
    let mut shared = 0;
    for f in 0..3 {
        for g in f + 1..3 {
            for ((task, word), labels) in &seen {
                if *task != f {
                    continue;
                }
                if let Some(other) = seen.get(&(g, word.clone())) {
                    shared += 1;
                    assert!(labels.is_disjoint(other), "word {word} agrees across families {f} and {g}");
                }
            }
        }
    }
    assert!(shared > 0);
}

#[test]
fn lookup_oracle_is_perfect_on_every_split() {
    for kappa in [0.0, 0.5, 1.0] {
        let suite = generate(&spec(5, kappa, 0.3)).unwrap();
        let oracle = LookupOracle::new(&suite.tables);
        for d in &suite.datasets {
            for split in Split::ALL {
                let mut counts = MatchCounts::default();
                for s in d.split(split) {
                    let pred = parse_answer(&oracle.answer(s)).records;
                    counts.add(MatchCounts::of(&pred, &s.gold_records()));
                }
                assert_eq!(counts.prf().f1, 1.0, "κ={kappa} {} {:?}", d.spec.name, split);
            }
        }
    }
}

#[test]
fn splits_are_disjoint_and_ids_unique() {
    let suite = generate(&spec(8, 0.7, 0.1)).unwrap();
    let mut ids = BTreeSet::new();
    for d in &suite.datasets {
        for split in Split::ALL {
            for s in d.split(split) {
                assert!(ids.insert(s.id.clone()), "duplicate id {}", s.id);
            }
        }
    }
}

#[test]
fn text_only_oracle_is_capped_by_visual_dependence() {
    let suite = generate(&spec(9, 0.7, 0.5)).unwrap();
    let text_only = LookupOracle::text_only(&suite.tables);
    let chance = 1.0 / suite.spec.n_labels as f64;
    let (mut hit, mut total, mut affected) = (0usize, 0usize, 0usize);
    for d in &suite.datasets {
        for s in &d.test {
            let gold = s.gold_records();
            let pred = parse_answer(&text_only.answer(s)).records;
            hit += MatchCounts::of(&pred, &gold).matched;
            total += gold.len();
            affected += gold.iter().filter(|r| r.slots().iter().any(|x| x.word == AMBIGUOUS)).count();
        }
    }
    let v = affected as f64 / total as f64;
    let accuracy = hit as f64 / total as f64;
    assert!(v > 0.2, "affected fraction {v}");
    // binomial slack on the lucky guesses
    let slack = 3.0 * (chance * (1.0 - chance) / affected as f64).sqrt() * v;
    assert!(accuracy <= 1.0 - v * (1.0 - chance) + slack, "accuracy {accuracy} v {v}");
    assert!(accuracy < 1.0);
}

#[test]
fn visual_prototype_identifies_the_hidden_label() {
    let suite = generate(&spec(2, 0.7, 1.0)).unwrap();
    for s in &suite.datasets[0].train {
        let amb = parse_answer(&s.answer)
            .records
            .into_iter()
            .flat_map(|r| r.slots().into_iter().cloned().collect::<Vec<_>>())
            .find(|x| x.word == AMBIGUOUS)
            .expect("every sample is visual at rate 1");
        assert_eq!(amb.label, format!("T{}", suite.tables.nearest_label(&s.visual[0])));
        assert_eq!(s.visual.len(), suite.spec.visual_len);
        assert!(s.visual.iter().all(|r| r.len() == suite.spec.visual_dim));
    }
}

#[test]
fn family_shapes() {
    let suite = generate(&spec(4, 0.7, 0.0)).unwrap();
    for d in &suite.datasets {
        for s in &d.train {
            let recs = s.gold_records();
            match d.spec.family {
                Family::Entity => assert!((1..=3).contains(&recs.len())),
                Family::Relation | Family::Event => assert_eq!(recs.len(), 1),
            }
            assert_eq!(s.instruction.last().unwrap(), &format!("@{}", d.spec.name));
        }
    }
}

#[test]
fn zero_counts_are_rejected() {
    let mut s = spec(1, 0.7, 0.1);
    s.datasets[1].dev = 0;
    assert!(matches!(generate(&s), Err(DataError::Spec(_))));
}

#[test]
fn suite_round_trips_through_disk() {
    let suite = generate(&spec(6, 0.7, 0.2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_suite(dir.path(), &suite).unwrap();
    assert_eq!(read_suite(dir.path()).unwrap(), suite);
}
