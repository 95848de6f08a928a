//! The multi-task training loop.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use clorae_core::{
    default_layer_groups, multitask_step_loss, routing_report, AchievementTracker, Adam, AdamConfig, ForwardCtx, Graph,
    NodeId, RoutingStats, StepDecay, TaskWeights,
};
use clorae_data::jsonl::read_suite;
use clorae_data::seed::stream;
use clorae_data::{generate, Split, Suite, TaskSample, Vocab};
use clorae_model::{EncodedSample, ModelConfig, ModelError, Seq2Seq};
use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::eval::{evaluate, EvalReport};
use crate::metrics::{DatasetEpoch, EpochMetrics, EpochTiming};
use crate::TrainError;

#[derive(Clone, Debug)]
pub struct EncodedSplits {
    pub train: Vec<EncodedSample>,
    pub dev: Vec<EncodedSample>,
    pub test: Vec<EncodedSample>,
}

impl EncodedSplits {
    pub fn split(&self, split: Split) -> &[EncodedSample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// A loaded suite with its vocabulary and encoded splits.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub suite: Suite,
    pub vocab: Vocab,
    /// Parallel to `suite.datasets`.
    pub encoded: Vec<EncodedSplits>,
}

/// Loads or generates the suite named by `config`.
pub fn load_suite(config: &RunConfig) -> Result<Suite, TrainError> {
    config.validate()?;
    let suite = match &config.data_dir {
        Some(dir) => read_suite(dir)?,
        None => generate(&config.generator)?,
    };
    if suite.datasets.is_empty() {
        return Err(TrainError::Config("the suite has no datasets".into()));
    }
    Ok(suite)
}

/// Loads or generates the suite named by `config` and encodes it with a
/// vocabulary built from all of its splits.
pub fn prepare(config: &RunConfig) -> Result<Prepared, TrainError> {
    let suite = load_suite(config)?;
    let vocab = Vocab::build(
        suite
            .datasets
            .iter()
            .flat_map(|d| Split::ALL.iter().flat_map(move |&s| d.split(s))),
    );
    let model_config = config.model_config(vocab.len());
    encode_suite(suite, vocab, &model_config)
}

/// Encodes every split of `suite` for a model with `model_config`.
pub fn encode_suite(suite: Suite, vocab: Vocab, model_config: &ModelConfig) -> Result<Prepared, TrainError> {
    let encode = |samples: &[TaskSample]| -> Result<Vec<EncodedSample>, TrainError> {
        samples
            .iter()
            .map(|s| {
                EncodedSample::new(s, &vocab, model_config).map_err(|e| match e {
                    ModelError::Config(m) => TrainError::Config(format!("dataset does not fit the model: {m}")),
                    e @ ModelError::Truncation { .. } => TrainError::Config(e.to_string()),
                    e => e.into(),
                })
            })
            .collect()
    };
    let mut encoded = Vec::with_capacity(suite.datasets.len());
    for d in &suite.datasets {
        encoded.push(EncodedSplits {
            train: encode(&d.train)?,
            dev: encode(&d.dev)?,
            test: encode(&d.test)?,
        });
    }
    Ok(Prepared { suite, vocab, encoded })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Seq2Seq<f64>,
    pub metrics: Vec<EpochMetrics>,
    /// Last dev evaluation; the untrained model's when no epoch ran.
    pub dev: EvalReport,
    pub test: EvalReport,
}

impl TrainOutcome {
    /// The metrics stream as written to `metrics.jsonl`.
    pub fn metrics_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for m in &self.metrics {
            out.extend_from_slice(m.to_line().as_bytes());
            out.push(b'\n');
        }
        out
    }
}

pub fn train(config: &RunConfig) -> Result<TrainOutcome, TrainError> {
    let data = prepare(config)?;
    train_prepared(config, &data, &mut |_, _| {})
}

/// Writes `bytes` to `dir/name`.
fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), TrainError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| TrainError::io(path, e))
}

fn append_line(dir: &Path, name: &str, line: &str) -> Result<(), TrainError> {
    let path = dir.join(name);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| TrainError::io(&path, e))?;
    writeln!(f, "{line}").map_err(|e| TrainError::io(&path, e))
}

fn save_checkpoint(dir: &Path, name: &str, model: &Seq2Seq<f64>) -> Result<(), TrainError> {
    let path = dir.join(name);
    model.checkpoint().save(&path).map_err(|e| match e {
        clorae_core::CoreError::Io(io) => TrainError::io(path, io),
        e => e.into(),
    })
}

/// Trains on prepared data. `on_epoch` sees each record and its wall time.
pub fn train_prepared(
    config: &RunConfig,
    data: &Prepared,
    on_epoch: &mut dyn FnMut(&EpochMetrics, f64),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if let Some(d) = data.suite.datasets.iter().find(|d| d.train.is_empty()) {
        return Err(TrainError::Config(format!("dataset `{}` has no training samples", d.spec.name)));
    }
    let n_datasets = data.suite.datasets.len();
    let model_config = config.model_config(data.vocab.len());
    let mut model = Seq2Seq::<f64>::new(model_config, data.vocab.clone())?;
    let out_dir = config.out_dir.as_deref();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        let json = serde_json::to_string_pretty(config).expect("config serializes");
        write_file(dir, "config.json", json.as_bytes())?;
        write_file(dir, "metrics.jsonl", b"")?;
        write_file(dir, "timing.jsonl", b"")?;
    }

    let mut tracker = AchievementTracker::new(config.targets_for(n_datasets)?, config.margin, config.gamma)?;
    let mut weights = tracker.initial_weights();
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            decay_factor: config.decay_factor,
            ..AdamConfig::default()
        },
        model.store(),
    );
    let decay = StepDecay {
        every: config.decay_every,
    };
    let beta = config.effective_beta();
    let learned_gate = model.config().adapter.has_learned_gate();
    let layer_groups = default_layer_groups(model.config().n_layers());
    let mut dropout_rng = stream(config.seed, "dropout");

    let mut metrics = Vec::with_capacity(config.epochs);
    let mut dev = None;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let learning_rate = opt.effective_lr();
        let mut shuffle_rng = stream(config.seed, &format!("shuffle/{epoch}"));
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (m, enc) in data.encoded.iter().enumerate() {
            let mut order: Vec<usize> = (0..enc.train.len()).collect();
            order.shuffle(&mut shuffle_rng);
            groups.extend(order.chunks(config.group_size).map(|c| (m, c.to_vec())));
        }
        groups.shuffle(&mut shuffle_rng);

        let mut ce_sum = vec![0.0; n_datasets];
        let mut ce_tokens = vec![0usize; n_datasets];
        let (mut mim_sum, mut mim_groups) = (0.0, 0usize);
        let mut stats = RoutingStats::new();
        for (step, chunk) in groups.chunks(config.groups_per_step).enumerate() {
            let mut g = Graph::new();
            let mut per_group: Vec<(usize, NodeId)> = Vec::with_capacity(chunk.len());
            let mut mims = Vec::new();
            for (m, idx) in chunk {
                let batch: Vec<&EncodedSample> = idx.iter().map(|&i| &data.encoded[*m].train[i]).collect();
                let ctx = ForwardCtx::train(&mut dropout_rng);
                let mut ctx = if learned_gate { ctx.with_routing(&mut stats) } else { ctx };
                let out = model.forward_group(&mut g, &batch, &mut ctx)?;
                ce_sum[*m] += g.value(out.loss).item() * out.tokens as f64;
                ce_tokens[*m] += out.tokens;
                if let Some(mim) = out.mim {
                    mim_sum += g.value(mim).item();
                    mim_groups += 1;
                    mims.push(mim);
                }
                per_group.push((*m, out.loss));
            }
            let per_dataset = mean_per_dataset(&mut g, &per_group, n_datasets)?;
            let mim = mean_nodes(&mut g, &mims)?;
            let loss = multitask_step_loss(&mut g, &per_dataset, &weights, mim, beta)?;
            let non_finite = |model: &Seq2Seq<f64>| TrainError::NonFinite {
                epoch,
                step,
                param: model.store().first_non_finite().unwrap_or("<loss>").to_string(),
            };
            let grads = g.backward(loss)?;
            model.store_mut().zero_grad();
            grads.accumulate_into(model.store_mut());
            if !g.value(loss).item().is_finite() || model.store().first_non_finite().is_some() {
                return Err(non_finite(&model));
            }
            opt.step(model.store_mut());
            if model.store().first_non_finite().is_some() {
                return Err(non_finite(&model));
            }
        }

        let report = evaluate(&model, data, Split::Dev, config.dev_limit, config.eval_group)?;
        let datasets = data
            .suite
            .datasets
            .iter()
            .enumerate()
            .map(|(m, d)| DatasetEpoch {
                dataset: d.spec.name.clone(),
                train_ce: if ce_tokens[m] == 0 { 0.0 } else { ce_sum[m] / ce_tokens[m] as f64 },
                dev_f1: report.datasets[m].f1,
                weight: weights.get(m),
            })
            .collect();
        let record = EpochMetrics {
            epoch,
            learning_rate,
            datasets,
            mim_loss: (mim_groups > 0).then(|| mim_sum / mim_groups as f64),
            routing: if stats.is_empty() {
                None
            } else {
                Some(routing_report(&stats, &layer_groups)?)
            },
        };

        let scores: Vec<(usize, f64)> = report.datasets.iter().enumerate().map(|(m, d)| (m, d.f1)).collect();
        let next = tracker.update_epoch(&scores)?;
        weights = if config.ablation.no_aml {
            TaskWeights::uniform(n_datasets, epoch + 1)
        } else {
            next
        };
        if decay.fires_after(epoch) {
            opt.decay();
        }

        let seconds = started.elapsed().as_secs_f64();
        if let Some(dir) = out_dir {
            append_line(dir, "metrics.jsonl", &record.to_line())?;
            let timing = EpochTiming { epoch, seconds };
            append_line(dir, "timing.jsonl", &serde_json::to_string(&timing).expect("timing serializes"))?;
            save_checkpoint(dir, &format!("epoch-{epoch:03}.ckpt"), &model)?;
        }
        on_epoch(&record, seconds);
        metrics.push(record);
        dev = Some(report);
    }

    let dev = match dev {
        Some(d) => d,
        None => evaluate(&model, data, Split::Dev, config.dev_limit, config.eval_group)?,
    };
    let test = evaluate(&model, data, Split::Test, None, config.eval_group)?;
    if let Some(dir) = out_dir {
        save_checkpoint(dir, "final.ckpt", &model)?;
        let json = serde_json::to_string_pretty(&test).expect("report serializes");
        write_file(dir, "test_report.json", json.as_bytes())?;
        write_file(dir, "test_report.txt", test.table().as_bytes())?;
    }
    Ok(TrainOutcome {
        model,
        metrics,
        dev,
        test,
    })
}

/// Mean of the loss nodes of each dataset, in dataset order.
fn mean_per_dataset(
    g: &mut Graph<f64>,
    per_group: &[(usize, NodeId)],
    n_datasets: usize,
) -> Result<Vec<(usize, NodeId)>, TrainError> {
    let mut out = Vec::new();
    for m in 0..n_datasets {
        let nodes: Vec<NodeId> = per_group.iter().filter(|(d, _)| *d == m).map(|&(_, n)| n).collect();
        if let Some(mean) = mean_nodes(g, &nodes)? {
            out.push((m, mean));
        }
    }
    Ok(out)
}

fn mean_nodes(g: &mut Graph<f64>, nodes: &[NodeId]) -> Result<Option<NodeId>, TrainError> {
    let Some((&first, rest)) = nodes.split_first() else {
        return Ok(None);
    };
    if rest.is_empty() {
        return Ok(Some(first));
    }
    let mut acc = first;
    for &n in rest {
        acc = g.add(acc, n)?;
    }
    Ok(Some(g.scale(acc, 1.0 / nodes.len() as f64)))
}
