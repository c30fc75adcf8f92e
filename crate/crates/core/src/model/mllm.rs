use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use crate::compressor::{plan_bins, PoolMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::trace_io::{self, Record};

use super::config::{ModelConfig, ProjectorConfig, ProjectorKind};
use super::params::Params;
use super::record::{AttentionTrace, AttnModule, GenerationRecord, PoolRecord, StepTrace, TraceMode};
use super::task::{Image, Vocab, EOS};

/// Which parameters receive gradients in a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Trainable {
    None,
    Projector,
    ProjectorAndDecoder,
}

impl Trainable {
    fn allows(self, name: &str) -> bool {
        let module = name.split('/').next().unwrap_or("");
        match self {
            Trainable::None => false,
            Trainable::Projector => module == "projector",
            Trainable::ProjectorAndDecoder => module == "projector" || module == "decoder",
        }
    }
}

struct TapSpec {
    module: AttnModule,
    layer: usize,
    heads: Vec<NodeId>,
}

/// Graph under construction with parameter lookup and tap bookkeeping.
pub(crate) struct Builder<'a> {
    pub g: Graph,
    cfg: &'a ModelConfig,
    params: &'a Params,
    trainable: Trainable,
    taps: Vec<TapSpec>,
    pool_node: Option<NodeId>,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a ModelConfig, params: &'a Params, trainable: Trainable) -> Self {
        Self {
            g: Graph::new(),
            cfg,
            params,
            trainable,
            taps: Vec::new(),
            pool_node: None,
        }
    }

    fn p(&mut self, name: &str) -> NodeId {
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"));
        self.g.input(name, t.shape(), self.trainable.allows(name))
    }

    fn linear(&mut self, x: NodeId, w: &str, b: &str) -> NodeId {
        let (w, b) = (self.p(w), self.p(b));
        let y = self.g.matmul(x, w);
        self.g.add_row(y, b)
    }

    fn ln(&mut self, x: NodeId, prefix: &str, tag: &str) -> NodeId {
        let g = self.p(&format!("{prefix}param.{tag}_g"));
        let b = self.p(&format!("{prefix}param.{tag}_b"));
        self.g.layer_norm(x, g, b)
    }

    /// Multi-head attention of `xq` over `xkv`; every head's probability
    /// matrix is tapped.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        prefix: &str,
        tag: &str,
        xq: NodeId,
        xkv: NodeId,
        d: usize,
        causal: bool,
        module: AttnModule,
        layer: usize,
    ) -> NodeId {
        let heads = self.cfg.heads;
        let dh = d / heads;
        let wq = self.p(&format!("{prefix}param.{tag}wq"));
        let wk = self.p(&format!("{prefix}param.{tag}wk"));
        let wv = self.p(&format!("{prefix}param.{tag}wv"));
        let q = self.g.matmul(xq, wq);
        let k = self.g.matmul(xkv, wk);
        let v = self.g.matmul(xkv, wv);
        let scale = 1.0 / (dh as f64).sqrt();

        let mut outs = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = self.g.slice(q, 1, cols.clone());
            let kh = self.g.slice(k, 1, cols.clone());
            let vh = self.g.slice(v, 1, cols);
            let kt = self.g.transpose(kh);
            let s = self.g.matmul(qh, kt);
            let mut s = self.g.scale(s, scale);
            if causal {
                s = self.g.causal_mask(s);
            }
            let a = self.g.softmax(s);
            self.g.tap(a);
            probs.push(a);
            outs.push(self.g.matmul(a, vh));
        }
        self.taps.push(TapSpec {
            module,
            layer,
            heads: probs,
        });
        let o = if outs.len() == 1 { outs[0] } else { self.g.concat(outs, 1) };
        self.linear(o, &format!("{prefix}param.{tag}wo"), &format!("{prefix}param.{tag}bo"))
    }

    fn mlp(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let h = self.linear(x, &format!("{prefix}param.w1"), &format!("{prefix}param.b1"));
        let h = self.g.gelu(h);
        self.linear(h, &format!("{prefix}param.w2"), &format!("{prefix}param.b2"))
    }

    /// Pre-norm transformer block.
    fn block(&mut self, x: NodeId, prefix: &str, d: usize, causal: bool, module: AttnModule, layer: usize) -> NodeId {
        let h = self.ln(x, prefix, "ln1");
        let a = self.attention(prefix, "", h, h, d, causal, module, layer);
        let x = self.g.add(x, a);
        let h = self.ln(x, prefix, "ln2");
        let m = self.mlp(h, prefix);
        self.g.add(x, m)
    }

    /// Image cells → `(N, d_I)` patch embeddings.
    fn encoder(&mut self, image: &Image) -> NodeId {
        let di = self.cfg.embed_dim_vision;
        let cells = self.g.constant(image.cells().clone());
        let x = self.linear(cells, "encoder/embed/param.w_patch", "encoder/embed/param.b_patch");
        let pos = self.p("encoder/embed/param.pos");
        let mut x = self.g.add(x, pos);
        for l in 0..self.cfg.encoder_layers {
            x = self.block(x, &format!("encoder/{l}/"), di, false, AttnModule::Encoder, l);
        }
        self.ln(x, "encoder/final/", "ln")
    }

    /// `(N, d_I)` patches → `(M, d_T)` visual tokens.
    fn projector(&mut self, patches: NodeId) -> Result<NodeId> {
        let pc = self.cfg.projector;
        let di = self.cfg.embed_dim_vision;
        let x = match pc.kind {
            ProjectorKind::Linear => patches,
            ProjectorKind::AdaptiveAvgPool | ProjectorKind::AdaptiveMaxPool => {
                let plan = Arc::new(pool_plan(self.cfg)?);
                let mode = if pc.kind == ProjectorKind::AdaptiveAvgPool {
                    PoolMode::Avg
                } else {
                    PoolMode::Max
                };
                let pooled = self.g.pool(patches, plan, mode);
                self.pool_node = Some(pooled);
                pooled
            }
            ProjectorKind::Resampler => {
                let mut q = self.p("projector/queries/param.q");
                for l in 0..pc.resampler_layers {
                    let prefix = format!("projector/{l}/");
                    let h = self.ln(q, &prefix, "ln_self");
                    let a = self.attention(&prefix, "self_", h, h, di, false, AttnModule::ProjectorSelf, l);
                    q = self.g.add(q, a);
                    let h = self.ln(q, &prefix, "ln_cross");
                    let kv = self.ln(patches, &prefix, "ln_kv");
                    let c = self.attention(&prefix, "cross_", h, kv, di, false, AttnModule::ProjectorCross, l);
                    q = self.g.add(q, c);
                    let h = self.ln(q, &prefix, "ln_mlp");
                    let m = self.mlp(h, &prefix);
                    q = self.g.add(q, m);
                }
                q
            }
        };
        Ok(self.linear(x, "projector/out/param.w", "projector/out/param.b"))
    }

    /// Decoder over `[visual; text]`; returns the final hidden states
    /// `(M + T, d_T)`.
    fn decoder(&mut self, visual: NodeId, text: &[usize]) -> Result<NodeId> {
        let m = self.cfg.n_queries();
        let seq = m + text.len();
        if text.len() > self.cfg.max_text_len {
            return Err(Error::Config(format!(
                "text of {} tokens exceeds max_text_len {}",
                text.len(),
                self.cfg.max_text_len
            )));
        }
        for &id in text {
            if id >= self.cfg.vocab_size {
                return Err(Error::TokenOutOfVocab {
                    id,
                    vocab: self.cfg.vocab_size,
                });
            }
        }
        let dt = self.cfg.embed_dim_text;
        let tok = self.p("decoder/embed/param.tok");
        let emb = self.g.embedding(tok, text.to_vec());
        let x = self.g.concat(vec![visual, emb], 0);
        let pos = self.p("decoder/embed/param.pos");
        let pos = self.g.slice(pos, 0, 0..seq);
        let mut x = self.g.add(x, pos);
        for l in 0..self.cfg.decoder_layers {
            x = self.block(x, &format!("decoder/{l}/"), dt, true, AttnModule::Decoder, l);
        }
        Ok(self.ln(x, "decoder/final/", "ln"))
    }

    fn head(&mut self, hidden: NodeId, rows: std::ops::Range<usize>) -> NodeId {
        let h = self.g.slice(hidden, 0, rows);
        self.linear(h, "decoder/head/param.w", "decoder/head/param.b")
    }

    /// Traces ordered by module, then layer.
    fn collect_traces(&self, grads: Option<&crate::graph::Gradients>) -> Vec<AttentionTrace> {
        let mut out: Vec<AttentionTrace> = self
            .taps
            .iter()
            .map(|t| {
                let stack = |get: &dyn Fn(NodeId) -> Tensor| {
                    let parts: Vec<Tensor> = t.heads.iter().map(|&id| get(id)).collect();
                    let (tq, tk) = parts[0].dims2().expect("attention matrix");
                    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
                    Tensor::new(vec![parts.len(), tq, tk], data).expect("stacked heads")
                };
                let attn = stack(&|id| self.g.value(id).expect("evaluated").clone());
                let grad = grads.map(|gr| stack(&|id| gr.get(id).expect("tapped").clone()));
                AttentionTrace {
                    module: t.module,
                    layer: t.layer,
                    attn,
                    grad,
                }
            })
            .collect();
        out.sort_by_key(|a| (a.module, a.layer));
        out
    }
}

pub fn pool_plan(cfg: &ModelConfig) -> Result<crate::compressor::PoolPlan> {
    let out_side = cfg.projector.out_side().ok_or_else(|| {
        Error::Config(format!("pooling needs a square out_tokens, got {}", cfg.projector.out_tokens))
    })?;
    plan_bins(cfg.patch_grid_side, out_side)
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub patches: Tensor,
    pub attention: Vec<AttentionTrace>,
}

#[derive(Debug, Clone)]
pub struct Projected {
    pub tokens: Tensor,
    pub attention: Vec<AttentionTrace>,
    pub pool: Option<PoolRecord>,
}

/// Encoder φ_v, projector φ_p and causal decoder φ_t.
#[derive(Debug, Clone, PartialEq)]
pub struct Mllm {
    cfg: ModelConfig,
    params: Params,
    vocab: Vocab,
}

impl Mllm {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let params = Params::init(&cfg);
        Ok(Self {
            cfg,
            params,
            vocab: Vocab::standard(),
        })
    }

    pub fn with_params(cfg: ModelConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        let params = Params::from_tensors(&cfg, params.bindings().clone())?;
        Ok(Self {
            cfg,
            params,
            vocab: Vocab::standard(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.side() != self.cfg.patch_grid_side || image.channels() != self.cfg.channels {
            return Err(Error::InvalidShape(format!(
                "image is {}x{}x{}, model expects {}x{}x{}",
                image.side(),
                image.side(),
                image.channels(),
                self.cfg.patch_grid_side,
                self.cfg.patch_grid_side,
                self.cfg.channels
            )));
        }
        Ok(())
    }

    pub(crate) fn builder(&self, trainable: Trainable) -> Builder<'_> {
        Builder::new(&self.cfg, &self.params, trainable)
    }

    pub fn encode(&self, image: &Image) -> Result<Encoded> {
        self.check_image(image)?;
        let mut b = self.builder(Trainable::None);
        let out = b.encoder(image);
        b.g.forward(self.params.bindings())?;
        Ok(Encoded {
            patches: b.g.value(out).expect("evaluated").clone(),
            attention: b.collect_traces(None),
        })
    }

    pub fn project(&self, patches: &Tensor) -> Result<Projected> {
        let expected = [self.cfg.n_patches(), self.cfg.embed_dim_vision];
        if patches.shape() != expected {
            return Err(Error::InvalidShape(format!(
                "projector expects patches {expected:?}, got {:?}",
                patches.shape()
            )));
        }
        let mut b = self.builder(Trainable::None);
        let x = b.g.constant(patches.clone());
        let out = b.projector(x)?;
        b.g.forward(self.params.bindings())?;
        let pool = self.pool_record(&b);
        Ok(Projected {
            tokens: b.g.value(out).expect("evaluated").clone(),
            attention: b.collect_traces(None),
            pool,
        })
    }

    fn pool_record(&self, b: &Builder<'_>) -> Option<PoolRecord> {
        let node = b.pool_node?;
        let (plan, mode) = match b.g.op(node) {
            crate::graph::Op::Pool { plan, mode, .. } => ((**plan).clone(), *mode),
            _ => unreachable!("pool node"),
        };
        Some(PoolRecord {
            plan,
            mode,
            argmax: b.g.argmax(node).cloned(),
        })
    }

    /// Logits at the last position of `[visual; context]` without taps.
    pub fn next_logits(&self, image: &Image, context: &[usize]) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let mut b = self.builder(Trainable::None);
        let patches = b.encoder(image);
        let visual = b.projector(patches)?;
        let hidden = b.decoder(visual, context)?;
        let seq = self.cfg.n_queries() + context.len();
        let logits = b.head(hidden, seq - 1..seq);
        b.g.forward(self.params.bindings())?;
        Ok(b.g.value(logits).expect("evaluated").data().to_vec())
    }

    /// Forward over `[visual; context]`, then backward from the logit of
    /// `target` at the final position. `target = None` picks the argmax.
    pub fn decode_step(&self, image: &Image, context: &[usize], target: Option<usize>) -> Result<StepTrace> {
        self.check_image(image)?;
        if context.is_empty() {
            return Err(Error::Config("decoder context must hold at least one token".into()));
        }
        if let Some(t) = target {
            if t >= self.cfg.vocab_size {
                return Err(Error::TokenOutOfVocab {
                    id: t,
                    vocab: self.cfg.vocab_size,
                });
            }
        }
        let mut b = self.builder(Trainable::None);
        let patches = b.encoder(image);
        let visual = b.projector(patches)?;
        let hidden = b.decoder(visual, context)?;
        let seq = self.cfg.n_queries() + context.len();
        let logits = b.head(hidden, seq - 1..seq);
        b.g.forward(self.params.bindings())?;

        let logit_values = b.g.value(logits).expect("evaluated").data().to_vec();
        let target = target.unwrap_or_else(|| argmax(&logit_values));
        let picked = b.g.element(logits, &[0, target]);
        b.g.forward_appended(self.params.bindings())?;
        let grads = b.g.backward(picked)?;

        Ok(StepTrace {
            step: 0,
            target,
            predict_pos: seq - 1,
            logits: logit_values,
            attention: b.collect_traces(Some(&grads)),
        })
    }

    /// Graph whose target is the logit of `target` after `context`, plus
    /// every decoder attention head as `(layer, head, node)`.
    #[allow(clippy::type_complexity)]
    pub(crate) fn logit_graph(
        &self,
        image: &Image,
        context: &[usize],
        target: usize,
    ) -> Result<(Graph, NodeId, Vec<(usize, usize, NodeId)>)> {
        self.check_image(image)?;
        let mut b = self.builder(Trainable::None);
        let patches = b.encoder(image);
        let visual = b.projector(patches)?;
        let hidden = b.decoder(visual, context)?;
        let seq = self.cfg.n_queries() + context.len();
        let logits = b.head(hidden, seq - 1..seq);
        let picked = b.g.element(logits, &[0, target]);
        let heads = b
            .taps
            .iter()
            .filter(|t| t.module == AttnModule::Decoder)
            .flat_map(|t| t.heads.iter().enumerate().map(move |(h, &id)| (t.layer, h, id)))
            .collect();
        Ok((b.g, picked, heads))
    }

    /// Decodes up to `max_len` steps, tracing each. In teacher-forced mode
    /// the targets are `oracle`; in greedy mode decoding stops after EOS.
    pub fn generate(
        &self,
        image: &Image,
        prompt: &[usize],
        max_len: usize,
        mode: TraceMode,
        oracle: Option<&[usize]>,
    ) -> Result<GenerationRecord> {
        if max_len < 1 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        let targets: Option<Vec<usize>> = match mode {
            TraceMode::TeacherForced => {
                let o = oracle.ok_or_else(|| Error::Config("teacher-forced tracing needs oracle text".into()))?;
                if o.is_empty() {
                    return Err(Error::Config("oracle text is empty".into()));
                }
                Some(o.iter().copied().take(max_len).collect())
            }
            TraceMode::Greedy => None,
        };

        let mut tokens = Vec::new();
        let mut steps = Vec::new();
        let mut context = prompt.to_vec();
        for t in 0..max_len {
            let target = match &targets {
                Some(ts) if t >= ts.len() => break,
                Some(ts) => Some(ts[t]),
                None => None,
            };
            let mut step = self.decode_step(image, &context, target)?;
            step.step = t;
            tokens.push(step.target);
            context.push(step.target);
            let done = step.target == EOS;
            steps.push(step);
            if mode == TraceMode::Greedy && done {
                break;
            }
        }

        let pool = if self.cfg.projector.kind.is_pooling() {
            let enc = self.encode(image)?;
            self.project(&enc.patches)?.pool
        } else {
            None
        };
        Ok(GenerationRecord {
            projector: self.cfg.projector.kind,
            n_patches: self.cfg.n_patches(),
            n_queries: self.cfg.n_queries(),
            heads: self.cfg.heads,
            mode,
            prompt: prompt.to_vec(),
            tokens,
            pool,
            steps,
        })
    }

    /// Greedy caption without tracing; stops at EOS (excluded).
    pub fn greedy_caption(&self, image: &Image, max_len: usize) -> Result<Vec<usize>> {
        let mut context = self.vocab.prompt();
        let mut out = Vec::new();
        for _ in 0..max_len {
            let tok = argmax(&self.next_logits(image, &context)?);
            if tok == EOS {
                break;
            }
            out.push(tok);
            context.push(tok);
        }
        Ok(out)
    }

    /// Teacher-forced mean cross-entropy over `batch` (image, caption)
    /// pairs; targets are the caption followed by EOS. Patches are taken
    /// precomputed since the encoder is frozen.
    pub(crate) fn loss_graph(
        &self,
        batch: &[(&Tensor, &[usize])],
        trainable: Trainable,
    ) -> Result<(Graph, NodeId)> {
        let mut b = self.builder(trainable);
        let prompt = self.vocab.prompt();
        let m = self.cfg.n_queries();
        let mut losses = Vec::with_capacity(batch.len());
        for (patches, caption) in batch {
            let x = b.g.constant((*patches).clone());
            let visual = b.projector(x)?;
            let mut text = prompt.clone();
            text.extend_from_slice(caption);
            let hidden = b.decoder(visual, &text)?;
            // position of the last prompt token predicts caption[0]
            let first = m + prompt.len() - 1;
            let logits = b.head(hidden, first..first + caption.len() + 1);
            let mut targets = caption.to_vec();
            targets.push(EOS);
            losses.push(b.g.cross_entropy(logits, targets));
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = b.g.add(total, l);
        }
        let loss = b.g.scale(total, 1.0 / batch.len() as f64);
        Ok((b.g, loss))
    }

    pub fn projector_config(&self) -> &ProjectorConfig {
        &self.cfg.projector
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        trace_io::write_trace(path, &self.checkpoint_records())
    }

    /// Parameters plus two manifest records: the configuration as numbers
    /// and the newline-separated parameter names as bytes.
    pub fn checkpoint_records(&self) -> Vec<Record> {
        let c = &self.cfg;
        let config = vec![
            c.patch_grid_side as f64,
            c.channels as f64,
            c.embed_dim_vision as f64,
            c.embed_dim_text as f64,
            c.heads as f64,
            c.encoder_layers as f64,
            c.decoder_layers as f64,
            c.vocab_size as f64,
            c.max_text_len as f64,
            f64::from(c.projector.kind.code()),
            c.projector.out_tokens as f64,
            c.projector.resampler_layers as f64,
            // seeds above 2^53 lose precision here; the weights themselves are stored exactly
            c.seed as f64,
        ];
        let names: Vec<&str> = self.params.names().collect();
        let name_bytes = names.join("\n").into_bytes().into_iter().map(f64::from).collect();
        let mut out = vec![
            Record::new("manifest/config/map", Tensor::vector(config)),
            Record::new("manifest/names/map", Tensor::vector(name_bytes)),
        ];
        out.extend(self.params.iter().map(|(n, t)| Record::new(n, t.clone())));
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_records(&trace_io::read_trace(path)?)
    }

    pub fn from_checkpoint_records(records: &[Record]) -> Result<Self> {
        let c = trace_io::find(records, "manifest/config/map")?.data().to_vec();
        if c.len() != 13 {
            return Err(Error::Config("manifest/config/map must hold 13 values".into()));
        }
        let u = |i: usize| c[i] as usize;
        let cfg = ModelConfig {
            patch_grid_side: u(0),
            channels: u(1),
            embed_dim_vision: u(2),
            embed_dim_text: u(3),
            heads: u(4),
            encoder_layers: u(5),
            decoder_layers: u(6),
            vocab_size: u(7),
            max_text_len: u(8),
            projector: ProjectorConfig {
                kind: ProjectorKind::from_code(c[9] as u8)?,
                out_tokens: u(10),
                resampler_layers: u(11),
            },
            seed: c[12] as u64,
        };
        let bytes: Vec<u8> = trace_io::find(records, "manifest/names/map")?
            .data()
            .iter()
            .map(|&v| v as u8)
            .collect();
        let names = String::from_utf8(bytes).map_err(|_| Error::Config("manifest names are not UTF-8".into()))?;
        let mut tensors = std::collections::BTreeMap::new();
        for name in names.split('\n').filter(|n| !n.is_empty()) {
            tensors.insert(name.to_string(), trace_io::find(records, name)?.clone());
        }
        let params = Params::from_tensors(&cfg, tensors)?;
        Self::with_params(cfg, params)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Encoder outputs memoised per image; the encoder never trains.
#[derive(Debug, Default)]
pub struct PatchCache {
    entries: HashMap<Vec<u64>, Tensor>,
}

impl PatchCache {
    pub fn get(&mut self, model: &Mllm, image: &Image) -> Result<Tensor> {
        let key: Vec<u64> = image.cells().data().iter().map(|v| v.to_bits()).collect();
        if let Some(t) = self.entries.get(&key) {
            return Ok(t.clone());
        }
        let t = model.encode(image)?.patches;
        self.entries.insert(key, t.clone());
        Ok(t)
    }
}
