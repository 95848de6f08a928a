//! Pre-norm encoder-decoder over a visual prefix and instruction text.

use clorae_core::rng::{gaussian, stream};
use clorae_core::{
    mim_loss, AdaptedLinear, AttentionSpec, Checkpoint, CloraeConfig, CloraeLinear, ForwardCtx, Graph, Linear, LoraLinear,
    NodeId, ParamId, ParamStore, Scalar, Tensor, TrainableCount,
};
use clorae_data::Vocab;
use serde_json::json;

use crate::config::{AdapterKind, ModelConfig, Projection};
use crate::encode::EncodedSample;
use crate::ModelError;

pub const MANIFEST_FORMAT: &str = "clorae-model/1";
const LN_EPS: f64 = 1e-5;
const HEAD_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
struct Attention {
    q: AdaptedLinear,
    k: AdaptedLinear,
    v: AdaptedLinear,
    o: AdaptedLinear,
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: AdaptedLinear,
    down: AdaptedLinear,
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    attn: Attention,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    self_attn: Attention,
    cross: Attention,
    ffn: FeedForward,
}

/// Row-stacked sequences of one forward group.
#[derive(Clone, Debug, PartialEq)]
pub struct Segments(pub Vec<(usize, usize)>);

impl Segments {
    fn of(lens: impl IntoIterator<Item = usize>) -> Self {
        let mut start = 0;
        Self(
            lens.into_iter()
                .map(|l| {
                    let s = (start, l);
                    start += l;
                    s
                })
                .collect(),
        )
    }

    pub fn rows(&self) -> usize {
        self.0.last().map_or(0, |&(s, l)| s + l)
    }
}

/// Teacher-forced outputs of one task-homogeneous group.
#[derive(Clone, Debug)]
pub struct GroupOutput {
    /// `[Σ answer tokens × vocab]`
    pub logits: NodeId,
    /// Mean token cross-entropy.
    pub loss: NodeId,
    pub tokens: usize,
    /// Mean MIM loss over wrapped layers; `None` without MIM heads.
    pub mim: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Seq2Seq<T: Scalar> {
    config: ModelConfig,
    vocab: Vocab,
    store: ParamStore<T>,
    embed: ParamId,
    head: ParamId,
    enc: Vec<EncoderBlock>,
    dec: Vec<DecoderBlock>,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    config: &'a ModelConfig,
}

impl<T: Scalar> Builder<'_, T> {
    fn projection(&mut self, name: &str, which: Projection, d_in: usize, d_out: usize, layer: usize) -> Result<AdaptedLinear, ModelError> {
        let c = self.config;
        let base = Linear::new(self.store, name, d_in, d_out, true, c.seed)?;
        if !c.wrap.contains(&which) {
            return Ok(AdaptedLinear::Plain(base));
        }
        Ok(match c.adapter.kind {
            AdapterKind::None => AdaptedLinear::Plain(base),
            AdapterKind::Lora => AdaptedLinear::Lora(LoraLinear::new(self.store, base, name, c.rank, c.alpha, c.dropout, c.seed)?),
            AdapterKind::Clorae => {
                let cfg = CloraeConfig {
                    d_in,
                    d_out,
                    rank: c.rank,
                    n_tasks: c.n_tasks,
                    alpha: c.alpha,
                    dropout: c.dropout,
                    universal: c.adapter.universal,
                    task_experts: c.adapter.task_experts,
                    gate: c.adapter.gate,
                    mim: c.adapter.mim,
                };
                AdaptedLinear::Clorae(CloraeLinear::new(self.store, base, name, layer, cfg, c.seed)?)
            }
        })
    }

    fn attention(&mut self, prefix: &str, layer: usize) -> Result<Attention, ModelError> {
        let d = self.config.d_model;
        Ok(Attention {
            q: self.projection(&format!("{prefix}.q"), Projection::Q, d, d, layer)?,
            k: self.projection(&format!("{prefix}.k"), Projection::K, d, d, layer)?,
            v: self.projection(&format!("{prefix}.v"), Projection::V, d, d, layer)?,
            o: self.projection(&format!("{prefix}.o"), Projection::O, d, d, layer)?,
        })
    }

    fn ffn(&mut self, prefix: &str, layer: usize) -> Result<FeedForward, ModelError> {
        let (d, f) = (self.config.d_model, self.config.d_ff);
        Ok(FeedForward {
            up: self.projection(&format!("{prefix}.up"), Projection::Up, d, f, layer)?,
            down: self.projection(&format!("{prefix}.down"), Projection::Down, f, d, layer)?,
        })
    }
}

/// Sinusoidal position encodings `[len × d]`.
pub fn positions<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for p in 0..len {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = p as f64 * freq;
            data.push(T::of(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new([len, d], data).expect("len × d")
}

impl<T: Scalar> Seq2Seq<T> {
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::Config(format!(
                "vocabulary has {} tokens, config expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let (v, d) = (config.vocab_size, config.d_model);
        let mut store = ParamStore::new();
        let frozen = !config.train_embeddings;
        let embed = store.add("embed", gaussian(&mut stream(config.seed, "embed"), [v, d], 1.0), frozen)?;
        let head = store.add("head", gaussian(&mut stream(config.seed, "head"), [v, d], HEAD_INIT_STD), frozen)?;
        let mut b = Builder {
            store: &mut store,
            config: &config,
        };
        let enc = (0..config.enc_layers)
            .map(|i| {
                Ok(EncoderBlock {
                    attn: b.attention(&format!("enc.{i}.attn"), i)?,
                    ffn: b.ffn(&format!("enc.{i}.ffn"), i)?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let dec = (0..config.dec_layers)
            .map(|i| {
                let layer = config.enc_layers + i;
                Ok(DecoderBlock {
                    self_attn: b.attention(&format!("dec.{i}.self"), layer)?,
                    cross: b.attention(&format!("dec.{i}.cross"), layer)?,
                    ffn: b.ffn(&format!("dec.{i}.ffn"), layer)?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(Self {
            config,
            vocab,
            store,
            embed,
            head,
            enc,
            dec,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn projections(&self) -> impl Iterator<Item = &AdaptedLinear> {
        self.enc
            .iter()
            .flat_map(|b| [&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o, &b.ffn.up, &b.ffn.down])
            .chain(self.dec.iter().flat_map(|b| {
                [
                    &b.self_attn.q,
                    &b.self_attn.k,
                    &b.self_attn.v,
                    &b.self_attn.o,
                    &b.cross.q,
                    &b.cross.k,
                    &b.cross.v,
                    &b.cross.o,
                    &b.ffn.up,
                    &b.ffn.down,
                ]
            }))
    }

    /// Trainable parameters by role.
    pub fn count_trainable(&self) -> TrainableCount {
        let adapters: TrainableCount = self.projections().map(|p| p.count_trainable(&self.store)).sum();
        let other = [self.embed, self.head]
            .into_iter()
            .filter(|&id| !self.store.get(id).frozen)
            .map(|id| self.store.value(id).len())
            .sum();
        TrainableCount { other, ..adapters }.finish()
    }

    fn check_group(&self, batch: &[&EncodedSample]) -> Result<usize, ModelError> {
        let task = batch.first().ok_or_else(|| ModelError::Config("empty forward group".into()))?.task;
        if let Some(s) = batch.iter().find(|s| s.task != task) {
            return Err(ModelError::MixedTasks {
                first: task,
                other: s.task,
                id: s.id.clone(),
            });
        }
        Ok(task)
    }

    fn attend(
        &self,
        g: &mut Graph<T>,
        a: &Attention,
        x: NodeId,
        memory: Option<NodeId>,
        spec: AttentionSpec,
        task: usize,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<NodeId, ModelError> {
        let kv = memory.unwrap_or(x);
        let q = a.q.forward(g, &self.store, x, task, ctx)?;
        let k = a.k.forward(g, &self.store, kv, task, ctx)?;
        let v = a.v.forward(g, &self.store, kv, task, ctx)?;
        let h = g.attention(q, k, v, spec)?;
        Ok(a.o.forward(g, &self.store, h, task, ctx)?)
    }

    fn feed_forward(&self, g: &mut Graph<T>, f: &FeedForward, x: NodeId, task: usize, ctx: &mut ForwardCtx<'_>) -> Result<NodeId, ModelError> {
        let h = f.up.forward(g, &self.store, x, task, ctx)?;
        let h = g.relu(h);
        Ok(f.down.forward(g, &self.store, h, task, ctx)?)
    }

    fn residual(&self, g: &mut Graph<T>, x: NodeId, delta: NodeId) -> Result<NodeId, ModelError> {
        Ok(g.add(x, delta)?)
    }

    /// Encoder output (after the final norm) and its segments.
    pub fn encode(&self, g: &mut Graph<T>, batch: &[&EncodedSample], ctx: &mut ForwardCtx<'_>) -> Result<(NodeId, Segments), ModelError> {
        let task = self.check_group(batch)?;
        let d = self.config.d_model;
        let embed = g.param(&self.store, self.embed);
        let mut parts = Vec::with_capacity(batch.len() * 2);
        let mut pos = Vec::new();
        for s in batch {
            let vis: Vec<T> = s.visual.iter().map(|&x| T::of(x)).collect();
            parts.push(g.constant(Tensor::new([s.visual_len(d), d], vis)?));
            parts.push(g.gather(embed, &s.input_ids)?);
            pos.extend_from_slice(positions::<T>(s.encoder_len(d), d).data());
        }
        let segs = Segments::of(batch.iter().map(|s| s.encoder_len(d)));
        let x = g.concat_rows(&parts)?;
        let p = g.constant(Tensor::new([segs.rows(), d], pos)?);
        let mut h = g.add(x, p)?;
        let spec = AttentionSpec {
            heads: self.config.n_heads,
            causal: false,
            q_segments: segs.0.clone(),
            k_segments: segs.0.clone(),
        };
        for b in &self.enc {
            let n = g.layer_norm(h, T::of(LN_EPS));
            let a = self.attend(g, &b.attn, n, None, spec.clone(), task, ctx)?;
            h = self.residual(g, h, a)?;
            let n = g.layer_norm(h, T::of(LN_EPS));
            let f = self.feed_forward(g, &b.ffn, n, task, ctx)?;
            h = self.residual(g, h, f)?;
        }
        Ok((g.layer_norm(h, T::of(LN_EPS)), segs))
    }

    /// Logits `[Σ prefix tokens × vocab]` for decoder prefixes over `memory`.
    pub fn decode_logits(
        &self,
        g: &mut Graph<T>,
        memory: NodeId,
        enc_segs: &Segments,
        prefixes: &[&[usize]],
        task: usize,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<NodeId, ModelError> {
        let d = self.config.d_model;
        let embed = g.param(&self.store, self.embed);
        let ids: Vec<usize> = prefixes.iter().flat_map(|p| p.iter().copied()).collect();
        let x = g.gather(embed, &ids)?;
        let mut pos = Vec::with_capacity(ids.len() * d);
        for p in prefixes {
            pos.extend_from_slice(positions::<T>(p.len(), d).data());
        }
        let segs = Segments::of(prefixes.iter().map(|p| p.len()));
        let p = g.constant(Tensor::new([segs.rows(), d], pos)?);
        let mut h = g.add(x, p)?;
        let self_spec = AttentionSpec {
            heads: self.config.n_heads,
            causal: true,
            q_segments: segs.0.clone(),
            k_segments: segs.0.clone(),
        };
        let cross_spec = AttentionSpec {
            heads: self.config.n_heads,
            causal: false,
            q_segments: segs.0.clone(),
            k_segments: enc_segs.0.clone(),
        };
        for b in &self.dec {
            let n = g.layer_norm(h, T::of(LN_EPS));
            let a = self.attend(g, &b.self_attn, n, None, self_spec.clone(), task, ctx)?;
            h = self.residual(g, h, a)?;
            let n = g.layer_norm(h, T::of(LN_EPS));
            let c = self.attend(g, &b.cross, n, Some(memory), cross_spec.clone(), task, ctx)?;
            h = self.residual(g, h, c)?;
            let n = g.layer_norm(h, T::of(LN_EPS));
            let f = self.feed_forward(g, &b.ffn, n, task, ctx)?;
            h = self.residual(g, h, f)?;
        }
        let n = g.layer_norm(h, T::of(LN_EPS));
        let head = g.param(&self.store, self.head);
        Ok(g.matmul_nt(n, head)?)
    }

    /// Teacher-forced cross-entropy for one group of same-task samples.
    pub fn forward_group(&self, g: &mut Graph<T>, batch: &[&EncodedSample], ctx: &mut ForwardCtx<'_>) -> Result<GroupOutput, ModelError> {
        let task = self.check_group(batch)?;
        let first_pair = ctx.expert_pairs.len();
        let (memory, enc_segs) = self.encode(g, batch, ctx)?;
        let prefixes: Vec<&[usize]> = batch.iter().map(|s| s.decoder_input.as_slice()).collect();
        let logits = self.decode_logits(g, memory, &enc_segs, &prefixes, task, ctx)?;
        let targets: Vec<usize> = batch.iter().flat_map(|s| s.targets.iter().copied()).collect();
        let loss = g.cross_entropy(logits, &targets, Vocab::PAD_ID)?;

        let pairs: Vec<_> = ctx.expert_pairs.drain(first_pair..).collect();
        let mim = if pairs.is_empty() {
            None
        } else {
            let mut terms = Vec::with_capacity(pairs.len());
            for p in &pairs {
                terms.push(mim_loss(g, &self.store, p.task, p.universal, &p.head)?);
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t)?;
            }
            Some(g.scale(acc, T::of(1.0 / terms.len() as f64)))
        };
        Ok(GroupOutput {
            logits,
            loss,
            tokens: targets.len(),
            mim,
        })
    }

    /// Greedy decoding of a same-task group; `cap` bounds the answer length
    /// including `<eos>`. Returns answer tokens without `<eos>`.
    pub fn decode_group(&self, batch: &[&EncodedSample], cap: usize) -> Result<Vec<Vec<String>>, ModelError> {
        let task = self.check_group(batch)?;
        let mut out = vec![Vec::new(); batch.len()];
        if cap == 0 {
            return Ok(out);
        }
        let mut ctx = ForwardCtx::eval();
        let mut g = Graph::new();
        let (memory, enc_segs) = self.encode(&mut g, batch, &mut ctx)?;
        let memory = g.value(memory).clone();

        let mut prefixes: Vec<Vec<usize>> = vec![vec![Vocab::BOS_ID]; batch.len()];
        let mut done = vec![false; batch.len()];
        for _ in 0..cap {
            let mut g = Graph::new();
            let mem = g.constant(memory.clone());
            let refs: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
            let logits = self.decode_logits(&mut g, mem, &enc_segs, &refs, task, &mut ForwardCtx::eval())?;
            let logits = g.value(logits);
            let mut row = 0;
            for (i, p) in prefixes.iter_mut().enumerate() {
                row += p.len();
                let last = logits.row(row - 1);
                let next = argmax(last);
                if !done[i] {
                    if next == Vocab::EOS_ID {
                        done[i] = true;
                    } else {
                        out[i].push(self.vocab.token(next).to_string());
                    }
                }
                p.push(next);
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    /// Greedy decoding of arbitrary samples, grouped by task in chunks of
    /// `group`; results follow input order.
    pub fn decode(&self, samples: &[EncodedSample], group: usize) -> Result<Vec<Vec<String>>, ModelError> {
        let mut out = vec![Vec::new(); samples.len()];
        for task in 0..self.config.n_tasks {
            let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].task == task).collect();
            for chunk in idx.chunks(group.max(1)) {
                let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| &samples[i]).collect();
                for (k, ans) in self.decode_group(&batch, self.config.max_answer_len)?.into_iter().enumerate() {
                    out[chunk[k]] = ans;
                }
            }
        }
        Ok(out)
    }

    pub fn manifest(&self) -> serde_json::Value {
        json!({
            "format": MANIFEST_FORMAT,
            "config": self.config,
            "vocab": self.vocab,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.manifest(), &self.store)
    }

    /// Rebuilds a model from a checkpoint written by [`Seq2Seq::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::Manifest(m);
        let format = ck.manifest.get("format").and_then(|v| v.as_str()).unwrap_or("");
        if format != MANIFEST_FORMAT {
            return Err(bad(format!("format `{format}`, expected `{MANIFEST_FORMAT}`")));
        }
        let config: ModelConfig =
            serde_json::from_value(ck.manifest["config"].clone()).map_err(|e| bad(format!("config: {e}")))?;
        let vocab: Vocab = serde_json::from_value(ck.manifest["vocab"].clone()).map_err(|e| bad(format!("vocab: {e}")))?;
        let mut model = Self::new(config, vocab)?;
        ck.apply_to(&mut model.store)?;
        Ok(model)
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
