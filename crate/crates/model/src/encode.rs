use clorae_data::{TaskSample, Vocab};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::ModelError;

/// A sample mapped to token ids, ready for the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedSample {
    pub id: String,
    pub task: usize,
    pub dataset: String,
    /// Instruction followed by text.
    pub input_ids: Vec<usize>,
    /// `[visual_len × d_model]`, row-major.
    pub visual: Vec<f64>,
    /// `<bos>` followed by the answer.
    pub decoder_input: Vec<usize>,
    /// The answer followed by `<eos>`.
    pub targets: Vec<usize>,
}

impl EncodedSample {
    pub fn new(sample: &TaskSample, vocab: &Vocab, config: &ModelConfig) -> Result<Self, ModelError> {
        if sample.task >= config.n_tasks {
            return Err(ModelError::Config(format!(
                "sample `{}` has task {} but the model has {} task slots",
                sample.id, sample.task, config.n_tasks
            )));
        }
        let text_len = sample.instruction.len() + sample.text.len();
        if text_len > config.max_text_len {
            return Err(ModelError::Truncation {
                id: sample.id.clone(),
                part: "input",
                len: text_len,
                max: config.max_text_len,
            });
        }
        if sample.answer.len() + 1 > config.max_answer_len {
            return Err(ModelError::Truncation {
                id: sample.id.clone(),
                part: "answer",
                len: sample.answer.len() + 1,
                max: config.max_answer_len,
            });
        }
        if sample.visual.len() != config.visual_len || sample.visual.iter().any(|r| r.len() != config.d_model) {
            return Err(ModelError::Config(format!(
                "sample `{}`: visual input must be {} × {}",
                sample.id, config.visual_len, config.d_model
            )));
        }
        let mut input_ids = vocab.encode(&sample.instruction);
        input_ids.extend(vocab.encode(&sample.text));
        let answer = vocab.encode(&sample.answer);
        let mut decoder_input = vec![Vocab::BOS_ID];
        decoder_input.extend(&answer);
        let mut targets = answer;
        targets.push(Vocab::EOS_ID);
        Ok(Self {
            id: sample.id.clone(),
            task: sample.task,
            dataset: sample.dataset.clone(),
            input_ids,
            visual: sample.visual.iter().flatten().copied().collect(),
            decoder_input,
            targets,
        })
    }

    pub fn visual_len(&self, d_model: usize) -> usize {
        self.visual.len() / d_model
    }

    /// Encoder sequence length: visual prefix then text.
    pub fn encoder_len(&self, d_model: usize) -> usize {
        self.visual_len(d_model) + self.input_ids.len()
    }

    /// `true` at visual positions of the encoder sequence.
    pub fn modality_mask(&self, d_model: usize) -> Vec<bool> {
        let v = self.visual_len(d_model);
        (0..self.encoder_len(d_model)).map(|i| i < v).collect()
    }
}

pub fn encode_all(samples: &[TaskSample], vocab: &Vocab, config: &ModelConfig) -> Result<Vec<EncodedSample>, ModelError> {
    samples.iter().map(|s| EncodedSample::new(s, vocab, config)).collect()
}
