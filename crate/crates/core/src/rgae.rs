//! Gradient-weighted attention relevance for generation records.
//!
//! Each attention layer contributes `Ā = mean_h clamp⁺(∇A ⊙ A)`; relevance
//! accumulates as `R ← R + Ā·R` from the identity. Per generation step the
//! decoder yields a text-to-query row, the projector a query-to-patch
//! matrix, and their product is the text-to-patch map. Maps are averaged
//! over steps.

use std::fmt;
use std::str::FromStr;

use crate::compressor::{structural_map_avg, structural_map_linear, structural_map_max, PoolMode};
use crate::error::{Error, Result};
use crate::model::{AttentionTrace, AttnModule, GenerationRecord, ProjectorKind, StepTrace};
use crate::tensor::Tensor;
use crate::trace_io::Record;

/// How cross-attention relevance from patches to queries accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossRule {
    /// `crossR ← crossR + Ā_cross`.
    Simple,
    /// `crossR ← crossR + rownorm(selfR)·Ā_cross`.
    #[default]
    Normalized,
}

impl CrossRule {
    pub fn as_str(self) -> &'static str {
        match self {
            CrossRule::Simple => "simple",
            CrossRule::Normalized => "normalized",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            CrossRule::Simple => 0,
            CrossRule::Normalized => 1,
        }
    }
}

impl fmt::Display for CrossRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CrossRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(CrossRule::Simple),
            "normalized" => Ok(CrossRule::Normalized),
            other => Err(Error::Config(format!("unknown cross rule `{other}`"))),
        }
    }
}

/// Token set a relevance matrix ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Patch(usize),
    Query(usize),
    /// Decoder sequence: visual tokens, prompt and generated text.
    Mixed(usize),
}

impl Domain {
    pub fn size(self) -> usize {
        match self {
            Domain::Patch(n) | Domain::Query(n) | Domain::Mixed(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceState {
    domain: Domain,
    r: Tensor,
    layers_applied: usize,
}

impl RelevanceState {
    pub fn new(domain: Domain) -> Self {
        Self {
            domain,
            r: Tensor::eye(domain.size()),
            layers_applied: 0,
        }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn matrix(&self) -> &Tensor {
        &self.r
    }

    pub fn layers_applied(&self) -> usize {
        self.layers_applied
    }
}

fn shape_error(what: &str, expected: &[usize], got: &[usize]) -> Error {
    Error::InvalidShape(format!("{what}: expected {expected:?}, got {got:?}"))
}

/// `mean_h clamp⁺(∇A ⊙ A)` for `(heads, Tq, Tk)` inputs.
pub fn layer_relevance(attn: &Tensor, grad: &Tensor) -> Result<Tensor> {
    if attn.ndim() != 3 {
        return Err(Error::InvalidShape(format!(
            "attention must be (heads, Tq, Tk), got {:?}",
            attn.shape()
        )));
    }
    if grad.shape() != attn.shape() {
        return Err(shape_error("attention gradient", attn.shape(), grad.shape()));
    }
    let (heads, tq, tk) = (attn.shape()[0], attn.shape()[1], attn.shape()[2]);
    if heads == 0 {
        return Err(Error::InvalidShape("attention has no heads".into()));
    }
    let plane = tq * tk;
    let mut out = vec![0.0; plane];
    for h in 0..heads {
        let a = &attn.data()[h * plane..(h + 1) * plane];
        let g = &grad.data()[h * plane..(h + 1) * plane];
        for ((o, x), y) in out.iter_mut().zip(a).zip(g) {
            *o += (x * y).max(0.0);
        }
    }
    let inv = heads as f64;
    Tensor::new(vec![tq, tk], out.into_iter().map(|v| v / inv).collect())
}

/// `R ← R + Ā·R`.
pub fn propagate_self(state: &RelevanceState, bar: &Tensor) -> Result<RelevanceState> {
    let n = state.domain.size();
    if bar.shape() != [n, n] {
        return Err(shape_error("self-attention relevance", &[n, n], bar.shape()));
    }
    let update = bar.matmul(&state.r)?;
    let data = state.r.data().iter().zip(update.data()).map(|(r, u)| r + u).collect();
    Ok(RelevanceState {
        domain: state.domain,
        r: Tensor::new(vec![n, n], data)?,
        layers_applied: state.layers_applied + 1,
    })
}

/// Each row divided by its sum; all-zero rows stay zero.
pub fn rownorm(t: &Tensor) -> Result<Tensor> {
    let (rows, cols) = t.dims2()?;
    let mut out = t.clone();
    for r in 0..rows {
        let s: f64 = t.row(r).iter().sum();
        if s != 0.0 {
            for v in &mut out.data_mut()[r * cols..(r + 1) * cols] {
                *v /= s;
            }
        }
    }
    Ok(out)
}

/// Accumulates one cross-attention layer into the `(M, N)` query-to-patch
/// relevance.
pub fn propagate_cross(self_state: &RelevanceState, cross: &Tensor, bar: &Tensor, rule: CrossRule) -> Result<Tensor> {
    let m = self_state.domain.size();
    let (cm, n) = cross.dims2()?;
    if cm != m {
        return Err(shape_error("cross relevance", &[m, n], cross.shape()));
    }
    if bar.shape() != cross.shape() {
        return Err(shape_error("cross-attention relevance", cross.shape(), bar.shape()));
    }
    let update = match rule {
        CrossRule::Simple => bar.clone(),
        CrossRule::Normalized => rownorm(&self_state.r)?.matmul(bar)?,
    };
    let data = cross.data().iter().zip(update.data()).map(|(c, u)| c + u).collect();
    Tensor::new(vec![m, n], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExplainOptions {
    pub rule: CrossRule,
    /// Reserved: propagate through encoder layers. Not implemented.
    pub encoder_propagation: bool,
}

impl ExplainOptions {
    pub fn with_rule(rule: CrossRule) -> Self {
        Self {
            rule,
            encoder_propagation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMaps {
    pub step: usize,
    /// `(1, M)`.
    pub text_to_query: Tensor,
    /// `(M, N)`.
    pub query_to_patch: Tensor,
    /// `(1, N)`.
    pub text_to_patch: Tensor,
    /// Final decoder relevance over the step's sequence.
    pub decoder_relevance: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RGaeResult {
    pub rule: CrossRule,
    pub steps: Vec<StepMaps>,
    pub text_to_query: Tensor,
    pub query_to_patch: Tensor,
    pub text_to_patch: Tensor,
}

impl RGaeResult {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Container records under `<prefix>/<map>/map[.t<step>]` plus
    /// `<prefix>/meta/map = [rule code, L, M, N]`.
    pub fn to_records(&self, prefix: &str) -> Vec<Record> {
        let (m, n) = self.query_to_patch.dims2().expect("query_to_patch is 2-D");
        let mut out = vec![
            Record::new(
                format!("{prefix}/meta/map"),
                Tensor::vector(vec![f64::from(self.rule.code()), self.steps.len() as f64, m as f64, n as f64]),
            ),
            Record::new(format!("{prefix}/text_to_query/map"), self.text_to_query.clone()),
            Record::new(format!("{prefix}/query_to_patch/map"), self.query_to_patch.clone()),
            Record::new(format!("{prefix}/text_to_patch/map"), self.text_to_patch.clone()),
        ];
        for s in &self.steps {
            let t = s.step;
            out.push(Record::new(format!("{prefix}/text_to_query/map.t{t}"), s.text_to_query.clone()));
            out.push(Record::new(format!("{prefix}/query_to_patch/map.t{t}"), s.query_to_patch.clone()));
            out.push(Record::new(format!("{prefix}/text_to_patch/map.t{t}"), s.text_to_patch.clone()));
        }
        out
    }
}

fn grad_of<'a>(trace: &'a AttentionTrace, step: usize) -> Result<&'a Tensor> {
    trace.grad.as_ref().ok_or_else(|| Error::MissingGradient {
        step,
        tap: format!("{}/{}/grad_attn.t{step}", trace.module.as_str(), trace.layer),
    })
}

fn check_layers(traces: &[&AttentionTrace], module: AttnModule, step: usize) -> Result<()> {
    for (i, t) in traces.iter().enumerate() {
        if t.layer != i {
            return Err(Error::MissingRecord(format!("{}/{i}/attn.t{step}", module.as_str())));
        }
    }
    Ok(())
}

/// Query-to-patch map of a projector without attention.
pub fn structural_query_to_patch(record: &GenerationRecord) -> Result<Tensor> {
    match record.projector {
        ProjectorKind::Linear => Ok(structural_map_linear(record.n_patches)),
        ProjectorKind::AdaptiveAvgPool | ProjectorKind::AdaptiveMaxPool => {
            let pool = record
                .pool
                .as_ref()
                .ok_or_else(|| Error::MissingRecord("record/meta/map pool plan".into()))?;
            match pool.mode {
                PoolMode::Avg => Ok(structural_map_avg(&pool.plan)),
                PoolMode::Max => structural_map_max(&pool.plan, pool.argmax.as_ref()),
            }
        }
        ProjectorKind::Resampler => Err(Error::Config("resampler has no structural map".into())),
    }
}

fn decoder_text_to_query(record: &GenerationRecord, step: &StepTrace) -> Result<(Tensor, Tensor)> {
    let layers = step.module(AttnModule::Decoder);
    if layers.is_empty() {
        return Err(Error::MissingRecord(format!("decoder/0/attn.t{}", step.step)));
    }
    check_layers(&layers, AttnModule::Decoder, step.step)?;
    let seq = layers[0].attn.shape()[1];
    let mut state = RelevanceState::new(Domain::Mixed(seq));
    for trace in &layers {
        let bar = layer_relevance(&trace.attn, grad_of(trace, step.step)?)?;
        state = propagate_self(&state, &bar)?;
    }
    let m = record.n_queries;
    if step.predict_pos >= seq || m > seq {
        return Err(Error::InvalidShape(format!(
            "step {}: predicting position {} or {m} visual tokens outside sequence of {seq}",
            step.step, step.predict_pos
        )));
    }
    let row = state.r.row(step.predict_pos)[..m].to_vec();
    Ok((Tensor::new(vec![1, m], row)?, state.r))
}

fn resampler_query_to_patch(record: &GenerationRecord, step: &StepTrace, rule: CrossRule) -> Result<Tensor> {
    let selfs = step.module(AttnModule::ProjectorSelf);
    let crosses = step.module(AttnModule::ProjectorCross);
    if crosses.is_empty() || selfs.len() != crosses.len() {
        return Err(Error::MissingRecord(format!(
            "projector_cross/{}/attn.t{}",
            selfs.len().min(crosses.len()),
            step.step
        )));
    }
    check_layers(&selfs, AttnModule::ProjectorSelf, step.step)?;
    check_layers(&crosses, AttnModule::ProjectorCross, step.step)?;
    let (m, n) = (record.n_queries, record.n_patches);
    let mut state = RelevanceState::new(Domain::Query(m));
    let mut cross = Tensor::zeros(&[m, n]);
    for (s, c) in selfs.iter().zip(&crosses) {
        let bar = layer_relevance(&s.attn, grad_of(s, step.step)?)?;
        state = propagate_self(&state, &bar)?;
        let bar = layer_relevance(&c.attn, grad_of(c, step.step)?)?;
        cross = propagate_cross(&state, &cross, &bar, rule)?;
    }
    Ok(cross)
}

/// Relevance maps of generation step `t`.
pub fn explain_step(record: &GenerationRecord, t: usize, opts: ExplainOptions) -> Result<StepMaps> {
    if opts.encoder_propagation {
        return Err(Error::Unsupported("propagation through encoder layers".into()));
    }
    let step = record
        .steps
        .get(t)
        .ok_or_else(|| Error::MissingRecord(format!("record/step/map.t{t}")))?;
    let (text_to_query, decoder_relevance) = decoder_text_to_query(record, step)?;
    let query_to_patch = match record.projector {
        ProjectorKind::Resampler => resampler_query_to_patch(record, step, opts.rule)?,
        _ => structural_query_to_patch(record)?,
    };
    let text_to_patch = text_to_query.matmul(&query_to_patch)?;
    Ok(StepMaps {
        step: t,
        text_to_query,
        query_to_patch,
        text_to_patch,
        decoder_relevance,
    })
}

fn mean_of<'a>(maps: impl Iterator<Item = &'a Tensor>, count: usize) -> Tensor {
    let mut it = maps;
    let mut acc = it.next().expect("at least one map").clone();
    for m in it {
        for (a, b) in acc.data_mut().iter_mut().zip(m.data()) {
            *a += b;
        }
    }
    acc.map(|v| v / count as f64)
}

fn average(rule: CrossRule, steps: Vec<StepMaps>) -> Result<RGaeResult> {
    if steps.is_empty() {
        return Err(Error::EmptyRecord);
    }
    let l = steps.len();
    Ok(RGaeResult {
        rule,
        text_to_query: mean_of(steps.iter().map(|s| &s.text_to_query), l),
        query_to_patch: mean_of(steps.iter().map(|s| &s.query_to_patch), l),
        text_to_patch: mean_of(steps.iter().map(|s| &s.text_to_patch), l),
        steps,
    })
}

/// Explains every step and averages the maps.
pub fn explain(record: &GenerationRecord, opts: ExplainOptions) -> Result<RGaeResult> {
    if record.steps.is_empty() {
        return Err(Error::EmptyRecord);
    }
    let steps = (0..record.steps.len())
        .map(|t| explain_step(record, t, opts))
        .collect::<Result<Vec<_>>>()?;
    average(opts.rule, steps)
}

fn head_mean(t: &Tensor) -> Tensor {
    let (heads, tq, tk) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let plane = tq * tk;
    let mut out = vec![0.0; plane];
    for h in 0..heads {
        for (o, v) in out.iter_mut().zip(&t.data()[h * plane..(h + 1) * plane]) {
            *o += v;
        }
    }
    Tensor::new(vec![tq, tk], out.into_iter().map(|v| v / heads as f64).collect()).expect("plane")
}

/// Raw-attention maps of step `t`: the last decoder layer's head-mean row
/// at the predicting position and the last cross-attention layer's
/// head-mean (structural map for projectors without attention).
pub fn raw_attention_step(record: &GenerationRecord, t: usize) -> Result<StepMaps> {
    let step = record
        .steps
        .get(t)
        .ok_or_else(|| Error::MissingRecord(format!("record/step/map.t{t}")))?;
    let decoder = step.module(AttnModule::Decoder);
    let last = decoder
        .last()
        .ok_or_else(|| Error::MissingRecord(format!("decoder/0/attn.t{t}")))?;
    let mean = head_mean(&last.attn);
    let m = record.n_queries;
    let text_to_query = Tensor::new(vec![1, m], mean.row(step.predict_pos)[..m].to_vec())?;
    let query_to_patch = match record.projector {
        ProjectorKind::Resampler => {
            let cross = step.module(AttnModule::ProjectorCross);
            let last = cross
                .last()
                .ok_or_else(|| Error::MissingRecord(format!("projector_cross/0/attn.t{t}")))?;
            head_mean(&last.attn)
        }
        _ => structural_query_to_patch(record)?,
    };
    let text_to_patch = text_to_query.matmul(&query_to_patch)?;
    Ok(StepMaps {
        step: t,
        text_to_query,
        query_to_patch,
        text_to_patch,
        decoder_relevance: mean,
    })
}

/// Raw-attention baseline over all steps, averaged like [`explain`].
/// The rule field is informational only.
pub fn raw_attention_baseline(record: &GenerationRecord) -> Result<RGaeResult> {
    let steps = (0..record.steps.len())
        .map(|t| raw_attention_step(record, t))
        .collect::<Result<Vec<_>>>()?;
    average(CrossRule::default(), steps)
}

pub fn l1_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum()
}
