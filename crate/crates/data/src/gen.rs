//! Seeded generator of synthetic multimodal extraction datasets.
//!
//! Every family (entity / relation / event) labels the same content words
//! with the same label inventory. A fraction `κ` of the words gets a
//! family-specific label, so one shared word→label table cannot serve all
//! families; that is the cross-task conflict. With probability `v` a sample
//! hides one word behind the `amb` token, and its label is only recoverable
//! from the first visual vector (a noisy label prototype).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grammar::{label_token, word_token, ExtractionRecord, Slot, AMBIGUOUS};
use crate::sample::{Family, Split, TaskSample};
use crate::seed::stream;
use crate::DataError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub family: Family,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl DatasetSpec {
    pub fn new(name: &str, family: Family, train: usize, dev: usize, test: usize) -> Self {
        Self {
            name: name.to_string(),
            family,
            train,
            dev,
            test,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub datasets: Vec<DatasetSpec>,
    /// Number of distinct content words.
    pub vocab_words: usize,
    pub n_fillers: usize,
    /// Size of the shared label inventory; at least the number of families.
    pub n_labels: usize,
    pub text_len: usize,
    /// Fraction of content words whose label differs across families.
    pub conflict_rate: f64,
    /// Probability that a sample's answer needs the visual input.
    pub visual_rate: f64,
    pub visual_dim: usize,
    pub visual_len: usize,
    pub visual_noise: f64,
}

impl GeneratorSpec {
    /// One dataset per family with the given split sizes.
    pub fn three_families(seed: u64, train: usize, dev: usize, test: usize) -> Self {
        Self {
            seed,
            datasets: vec![
                DatasetSpec::new("ner", Family::Entity, train, dev, test),
                DatasetSpec::new("rel", Family::Relation, train, dev, test),
                DatasetSpec::new("evt", Family::Event, train, dev, test),
            ],
            vocab_words: 24,
            n_fillers: 8,
            n_labels: 4,
            text_len: 8,
            conflict_rate: 0.7,
            visual_rate: 0.1,
            visual_dim: 32,
            visual_len: 2,
            visual_noise: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.datasets.is_empty() {
            return bad("no datasets".into());
        }
        for d in &self.datasets {
            if d.train == 0 || d.dev == 0 || d.test == 0 {
                return bad(format!("dataset `{}` needs positive split counts", d.name));
            }
        }
        let mut names: Vec<_> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.datasets.len() {
            return bad("dataset names must be unique".into());
        }
        if self.n_labels < Family::ALL.len() {
            return bad(format!("need at least {} labels", Family::ALL.len()));
        }
        if self.vocab_words < 3 {
            return bad("need at least 3 content words".into());
        }
        if self.text_len < 3 {
            return bad("text_len must be at least 3".into());
        }
        if !(0.0..=1.0).contains(&self.conflict_rate) || !(0.0..=1.0).contains(&self.visual_rate) {
            return bad("rates must lie in [0, 1]".into());
        }
        if self.visual_dim == 0 || self.visual_len == 0 {
            return bad("visual input needs positive length and width".into());
        }
        Ok(())
    }
}

/// Ground-truth tables behind a generated suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTables {
    /// `labels[family][word]`
    pub labels: Vec<Vec<usize>>,
    /// Words whose label differs across families.
    pub conflicting: Vec<bool>,
    /// One prototype vector per label.
    pub prototypes: Vec<Vec<f64>>,
}

impl GeneratorTables {
    fn build(spec: &GeneratorSpec) -> Self {
        let mut rng = stream(spec.seed, "tables");
        let base: Vec<usize> = (0..spec.vocab_words).map(|_| rng.gen_range(0..spec.n_labels)).collect();
        let mut order: Vec<usize> = (0..spec.vocab_words).collect();
        order.shuffle(&mut rng);
        let n_conflict = (spec.conflict_rate * spec.vocab_words as f64).round() as usize;
        let mut conflicting = vec![false; spec.vocab_words];
        for &w in &order[..n_conflict] {
            conflicting[w] = true;
        }
        let labels = Family::ALL
            .iter()
            .map(|f| {
                (0..spec.vocab_words)
                    .map(|w| {
                        if conflicting[w] {
                            (base[w] + f.task_id()) % spec.n_labels
                        } else {
                            base[w]
                        }
                    })
                    .collect()
            })
            .collect();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let prototypes = (0..spec.n_labels)
            .map(|_| (0..spec.visual_dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        Self {
            labels,
            conflicting,
            prototypes,
        }
    }

    pub fn label(&self, family: Family, word: usize) -> usize {
        self.labels[family.task_id()][word]
    }

    /// Label whose prototype is closest to `v`.
    pub fn nearest_label(&self, v: &[f64]) -> usize {
        let dist = |p: &Vec<f64>| p.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        (0..self.prototypes.len())
            .min_by(|&a, &b| dist(&self.prototypes[a]).total_cmp(&dist(&self.prototypes[b])))
            .expect("at least one label")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<TaskSample>,
    pub dev: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[TaskSample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// All datasets of one generator run plus the tables that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub spec: GeneratorSpec,
    pub tables: GeneratorTables,
    pub datasets: Vec<Dataset>,
}

pub fn instruction(family: Family, dataset: &str) -> Vec<String> {
    let words: &[&str] = match family {
        Family::Entity => &["extract", "entities"],
        Family::Relation => &["list", "relations", "between", "entities"],
        Family::Event => &["detect", "events", "with", "arguments"],
    };
    words
        .iter()
        .map(|w| w.to_string())
        .chain(std::iter::once(format!("@{dataset}")))
        .collect()
}

pub fn filler_token(i: usize) -> String {
    format!("f{i}")
}

/// Generates every dataset of `spec`. Deterministic in `spec`.
pub fn generate(spec: &GeneratorSpec) -> Result<Suite, DataError> {
    spec.validate()?;
    let tables = GeneratorTables::build(spec);
    let datasets = spec
        .datasets
        .iter()
        .map(|d| Dataset {
            spec: d.clone(),
            train: gen_split(spec, &tables, d, Split::Train),
            dev: gen_split(spec, &tables, d, Split::Dev),
            test: gen_split(spec, &tables, d, Split::Test),
        })
        .collect();
    Ok(Suite {
        spec: spec.clone(),
        tables,
        datasets,
    })
}

fn gen_split(spec: &GeneratorSpec, tables: &GeneratorTables, d: &DatasetSpec, split: Split) -> Vec<TaskSample> {
    let mut rng = stream(spec.seed, &format!("{}/{}", d.name, split.name()));
    (0..d.count(split))
        .map(|i| gen_sample(spec, tables, d, split, i, &mut rng))
        .collect()
}

fn gen_sample(
    spec: &GeneratorSpec,
    tables: &GeneratorTables,
    d: &DatasetSpec,
    split: Split,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> TaskSample {
    let family = d.family;
    let n_content = match family {
        Family::Entity => rng.gen_range(1..=3),
        Family::Relation => 2,
        Family::Event => rng.gen_range(2..=3),
    }
    .min(spec.text_len);

    let mut words: Vec<usize> = (0..spec.vocab_words).collect();
    words.shuffle(rng);
    words.truncate(n_content);
    let mut slots: Vec<(String, usize)> = words
        .iter()
        .map(|&w| (word_token(w), tables.label(family, w)))
        .collect();

    let ambiguous_label = if rng.gen_bool(spec.visual_rate) {
        let at = rng.gen_range(0..slots.len());
        let label = rng.gen_range(0..spec.n_labels);
        slots[at] = (AMBIGUOUS.to_string(), label);
        Some(label)
    } else {
        None
    };

    let mut positions: Vec<usize> = (0..spec.text_len).collect();
    positions.shuffle(rng);
    positions.truncate(slots.len());
    positions.sort_unstable();
    let mut text: Vec<String> = (0..spec.text_len)
        .map(|_| filler_token(rng.gen_range(0..spec.n_fillers)))
        .collect();
    for (pos, (tok, _)) in positions.iter().zip(&slots) {
        text[*pos] = tok.clone();
    }

    let visual = gen_visual(spec, tables, ambiguous_label, rng);

    let slot = |(w, l): &(String, usize)| Slot {
        label: label_token(*l),
        word: w.clone(),
    };
    let records = match family {
        Family::Entity => slots.iter().map(|s| ExtractionRecord::Entity(slot(s))).collect(),
        Family::Relation => vec![ExtractionRecord::Relation {
            head: slot(&slots[0]),
            tail: slot(&slots[1]),
        }],
        Family::Event => vec![ExtractionRecord::Event {
            trigger: slot(&slots[0]),
            args: slots[1..].iter().map(slot).collect(),
        }],
    };

    TaskSample {
        task: family.task_id(),
        dataset: d.name.clone(),
        instruction: instruction(family, &d.name),
        text,
        visual,
        answer: crate::grammar::serialize(&records),
        id: format!("{}-{}-{index:05}", d.name, split.name()),
    }
}

fn gen_visual(spec: &GeneratorSpec, tables: &GeneratorTables, label: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let noise = Normal::new(0.0, spec.visual_noise.max(1e-12)).expect("finite noise");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let shown = label.unwrap_or_else(|| rng.gen_range(0..spec.n_labels));
    let mut out = Vec::with_capacity(spec.visual_len);
    // resample until the noisy prototype is unambiguous
    let first = loop {
        let v: Vec<f64> = tables.prototypes[shown].iter().map(|p| p + noise.sample(rng)).collect();
        if tables.nearest_label(&v) == shown {
            break v;
        }
    };
    out.push(first);
    for _ in 1..spec.visual_len {
        out.push((0..spec.visual_dim).map(|_| unit.sample(rng)).collect());
    }
    out
}

/// Reconstructs gold answers from the generator tables.
pub struct LookupOracle<'a> {
    tables: &'a GeneratorTables,
    use_visual: bool,
}

impl<'a> LookupOracle<'a> {
    pub fn new(tables: &'a GeneratorTables) -> Self {
        Self {
            tables,
            use_visual: true,
        }
    }

    /// An oracle that ignores the visual input and guesses label 0 for `amb`.
    pub fn text_only(tables: &'a GeneratorTables) -> Self {
        Self {
            tables,
            use_visual: false,
        }
    }

    pub fn answer(&self, sample: &TaskSample) -> Vec<String> {
        let family = Family::from_task_id(sample.task).expect("valid task id");
        let slots: Vec<Slot> = sample
            .text
            .iter()
            .filter(|t| crate::grammar::is_word(t))
            .map(|t| {
                let label = if t == AMBIGUOUS {
                    if self.use_visual {
                        self.tables.nearest_label(&sample.visual[0])
                    } else {
                        0
                    }
                } else {
                    let w: usize = t[1..].parse().expect("word index");
                    self.tables.label(family, w)
                };
                Slot {
                    label: label_token(label),
                    word: t.clone(),
                }
            })
            .collect();
        let records = match family {
            Family::Entity => slots.into_iter().map(ExtractionRecord::Entity).collect(),
            Family::Relation => vec![ExtractionRecord::Relation {
                head: slots[0].clone(),
                tail: slots[1].clone(),
            }],
            Family::Event => vec![ExtractionRecord::Event {
                trigger: slots[0].clone(),
                args: slots[1..].to_vec(),
            }],
        };
        crate::grammar::serialize(&records)
    }
}
