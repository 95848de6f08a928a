//! JSON-lines dataset files.
//!
//! One sample per line. Floats are written with 17 significant digits so a
//! reload reproduces every bit.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gen::{Dataset, DatasetSpec, GeneratorSpec, GeneratorTables, Suite};
use crate::sample::{Split, TaskSample};
use crate::DataError;

pub const SCHEMA: &str = "clorae-task/1";
pub const SUITE_FILE: &str = "suite.json";

#[derive(Deserialize)]
struct Line {
    schema: String,
    #[serde(flatten)]
    sample: TaskSample,
}

fn push_json<S: Serialize + ?Sized>(out: &mut String, v: &S) {
    out.push_str(&serde_json::to_string(v).expect("strings serialize"));
}

fn push_float(out: &mut String, x: f64) -> Result<(), DataError> {
    if !x.is_finite() {
        return Err(DataError::Format(format!("non-finite value {x}")));
    }
    write!(out, "{x:.16e}").expect("write to string");
    Ok(())
}

/// Serializes one sample as a JSON line, without the trailing newline.
pub fn sample_line(s: &TaskSample) -> Result<String, DataError> {
    let mut out = String::with_capacity(256);
    out.push_str("{\"schema\":");
    push_json(&mut out, SCHEMA);
    write!(out, ",\"task\":{},\"dataset\":", s.task).expect("write to string");
    push_json(&mut out, &s.dataset);
    out.push_str(",\"instruction\":");
    push_json(&mut out, &s.instruction);
    out.push_str(",\"text\":");
    push_json(&mut out, &s.text);
    out.push_str(",\"visual\":[");
    for (i, row) in s.visual.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        for (j, &x) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            push_float(&mut out, x)?;
        }
        out.push(']');
    }
    out.push_str("],\"answer\":");
    push_json(&mut out, &s.answer);
    out.push_str(",\"id\":");
    push_json(&mut out, &s.id);
    out.push('}');
    Ok(out)
}

pub fn parse_line(line: &str) -> Result<TaskSample, DataError> {
    let l: Line = serde_json::from_str(line).map_err(|e| DataError::Format(e.to_string()))?;
    if l.schema != SCHEMA {
        return Err(DataError::Schema {
            found: l.schema,
            expected: SCHEMA.to_string(),
        });
    }
    Ok(l.sample)
}

pub fn to_jsonl_bytes(samples: &[TaskSample]) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::new();
    for s in samples {
        out.extend_from_slice(sample_line(s)?.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, samples: &[TaskSample]) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(&to_jsonl_bytes(samples)?).map_err(|e| DataError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TaskSample>, DataError> {
    let f = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line).map_err(|e| e.at(path, n + 1))?);
    }
    Ok(out)
}

/// Index written next to the split files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteIndex {
    pub schema: String,
    pub spec: GeneratorSpec,
    pub tables: GeneratorTables,
}

pub fn split_path(dir: &Path, dataset: &str, split: Split) -> PathBuf {
    dir.join(format!("{dataset}.{}.jsonl", split.name()))
}

pub fn write_suite(dir: &Path, suite: &Suite) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    for d in &suite.datasets {
        for split in Split::ALL {
            write_jsonl(&split_path(dir, &d.spec.name, split), d.split(split))?;
        }
    }
    let index = SuiteIndex {
        schema: SCHEMA.to_string(),
        spec: suite.spec.clone(),
        tables: suite.tables.clone(),
    };
    let path = dir.join(SUITE_FILE);
    let json = serde_json::to_string_pretty(&index).map_err(|e| DataError::Format(e.to_string()))?;
    fs::write(&path, json).map_err(|e| DataError::io(&path, e))
}

pub fn read_suite(dir: &Path) -> Result<Suite, DataError> {
    let path = dir.join(SUITE_FILE);
    let raw = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let index: SuiteIndex = serde_json::from_str(&raw).map_err(|e| DataError::Format(e.to_string()))?;
    if index.schema != SCHEMA {
        return Err(DataError::Schema {
            found: index.schema,
            expected: SCHEMA.to_string(),
        });
    }
    let datasets = index
        .spec
        .datasets
        .iter()
        .map(|d| read_dataset(dir, d))
        .collect::<Result<_, _>>()?;
    Ok(Suite {
        spec: index.spec,
        tables: index.tables,
        datasets,
    })
}

fn read_dataset(dir: &Path, spec: &DatasetSpec) -> Result<Dataset, DataError> {
    let load = |split| {
        let samples = read_jsonl(&split_path(dir, &spec.name, split))?;
        if let Some(bad) = samples.iter().find(|s| s.dataset != spec.name || s.task != spec.family.task_id()) {
            return Err(DataError::Schema {
                found: format!("sample `{}` of dataset `{}` task {}", bad.id, bad.dataset, bad.task),
                expected: format!("dataset `{}` task {}", spec.name, spec.family.task_id()),
            });
        }
        Ok(samples)
    };
    Ok(Dataset {
        spec: spec.clone(),
        train: load(Split::Train)?,
        dev: load(Split::Dev)?,
        test: load(Split::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(visual: Vec<Vec<f64>>) -> TaskSample {
        TaskSample {
            task: 1,
            dataset: "rel".into(),
            instruction: vec!["list".into()],
            text: vec!["w1".into(), "f\"2".into()],
            visual,
            answer: vec!["REL".into()],
            id: "rel-train-00000".into(),
        }
    }

    #[test]
    fn floats_reload_bit_exactly() {
        let v = vec![vec![0.1, -1.0 / 3.0, 1e-300, f64::MAX, 5e-324, -0.0]];
        let s = sample(v);
        let line = sample_line(&s).unwrap();
        let back = parse_line(&line).unwrap();
        for (a, b) in s.visual[0].iter().zip(&back.visual[0]) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, s);
    }

    #[test]
    fn schema_mismatch_and_non_finite_are_errors() {
        let line = sample_line(&sample(vec![vec![1.0]])).unwrap().replace(SCHEMA, "other/9");
        assert!(matches!(parse_line(&line), Err(DataError::Schema { .. })));
        assert!(sample_line(&sample(vec![vec![f64::NAN]])).is_err());
    }
}
