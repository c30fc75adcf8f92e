//! Attention traces captured while generating, and their container form.

use std::fmt;
use std::str::FromStr;

use crate::compressor::{plan_bins, ArgmaxRecord, PoolMode, PoolPlan};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trace_io::{find, Record};

use super::config::ProjectorKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttnModule {
    Encoder,
    ProjectorSelf,
    ProjectorCross,
    Decoder,
}

impl AttnModule {
    pub fn as_str(self) -> &'static str {
        match self {
            AttnModule::Encoder => "encoder",
            AttnModule::ProjectorSelf => "projector_self",
            AttnModule::ProjectorCross => "projector_cross",
            AttnModule::Decoder => "decoder",
        }
    }

    const ALL: [AttnModule; 4] = [
        AttnModule::Encoder,
        AttnModule::ProjectorSelf,
        AttnModule::ProjectorCross,
        AttnModule::Decoder,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceMode {
    /// Targets are the oracle caption tokens.
    #[default]
    TeacherForced,
    /// Targets are the model's own argmax tokens.
    Greedy,
}

impl TraceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceMode::TeacherForced => "teacher_forced",
            TraceMode::Greedy => "greedy",
        }
    }
}

impl fmt::Display for TraceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TraceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_forced" => Ok(TraceMode::TeacherForced),
            "greedy" => Ok(TraceMode::Greedy),
            other => Err(Error::Config(format!("unknown trace mode `{other}`"))),
        }
    }
}

/// Attention probabilities of one layer, `(heads, Tq, Tk)`, and their
/// gradients with respect to the step's target logit.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub module: AttnModule,
    pub layer: usize,
    pub attn: Tensor,
    pub grad: Option<Tensor>,
}

impl AttentionTrace {
    pub fn heads(&self) -> usize {
        self.attn.shape()[0]
    }

    /// Head `h` as a `(Tq, Tk)` matrix.
    pub fn head(&self, h: usize) -> Tensor {
        head_of(&self.attn, h)
    }
}

pub(crate) fn head_of(t: &Tensor, h: usize) -> Tensor {
    let (tq, tk) = (t.shape()[1], t.shape()[2]);
    let span = h * tq * tk..(h + 1) * tq * tk;
    Tensor::new(vec![tq, tk], t.data()[span].to_vec()).expect("head slice")
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// Zero-based generation step.
    pub step: usize,
    /// Token whose logit was the backward target.
    pub target: usize,
    /// Decoder position whose output predicts `target`.
    pub predict_pos: usize,
    /// Logits at `predict_pos`.
    pub logits: Vec<f64>,
    pub attention: Vec<AttentionTrace>,
}

impl StepTrace {
    /// Traces of one module ordered by layer.
    pub fn module(&self, module: AttnModule) -> Vec<&AttentionTrace> {
        let mut v: Vec<&AttentionTrace> =
            self.attention.iter().filter(|t| t.module == module).collect();
        v.sort_by_key(|t| t.layer);
        v
    }
}

/// Pooling details of a pooling projector run; constant over steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    pub plan: PoolPlan,
    pub mode: PoolMode,
    pub argmax: Option<ArgmaxRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub projector: ProjectorKind,
    /// N.
    pub n_patches: usize,
    /// M.
    pub n_queries: usize,
    pub heads: usize,
    pub mode: TraceMode,
    pub prompt: Vec<usize>,
    /// y_1..y_L: oracle tokens in teacher-forced mode, generated otherwise.
    pub tokens: Vec<usize>,
    pub pool: Option<PoolRecord>,
    pub steps: Vec<StepTrace>,
}

fn ids_tensor(ids: &[usize]) -> Tensor {
    Tensor::vector(ids.iter().map(|&i| i as f64).collect())
}

fn tensor_ids(t: &Tensor, what: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("`{what}` holds non-integer id {v}")))
            }
        })
        .collect()
}

impl GenerationRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Container records: metadata under `record/*`, attention under
    /// `<module>/<layer>/attn.t<step>` and `grad_attn.t<step>`.
    pub fn to_records(&self) -> Vec<Record> {
        let pool_mode = match &self.pool {
            None => 0.0,
            Some(p) if p.mode == PoolMode::Avg => 1.0,
            Some(_) => 2.0,
        };
        let meta = vec![
            f64::from(self.projector.code()),
            self.n_patches as f64,
            self.n_queries as f64,
            self.heads as f64,
            self.steps.len() as f64,
            if self.mode == TraceMode::Greedy { 1.0 } else { 0.0 },
            pool_mode,
        ];
        let mut out = vec![
            Record::new("record/meta/map", Tensor::vector(meta)),
            Record::new("record/prompt/map", ids_tensor(&self.prompt)),
            Record::new("record/tokens/map", ids_tensor(&self.tokens)),
        ];
        if let Some(argmax) = self.pool.as_ref().and_then(|p| p.argmax.as_ref()) {
            let t = Tensor::new(
                vec![argmax.out_tokens, argmax.channels],
                argmax.index.iter().map(|&i| i as f64).collect(),
            )
            .expect("argmax shape");
            out.push(Record::new("record/argmax/map", t));
        }
        for s in &self.steps {
            let t = s.step;
            out.push(Record::new(
                format!("record/step/map.t{t}"),
                Tensor::vector(vec![s.target as f64, s.predict_pos as f64]),
            ));
            out.push(Record::new(format!("decoder/logits/map.t{t}"), Tensor::vector(s.logits.clone())));
            for a in &s.attention {
                let base = format!("{}/{}", a.module.as_str(), a.layer);
                out.push(Record::new(format!("{base}/attn.t{t}"), a.attn.clone()));
                if let Some(g) = &a.grad {
                    out.push(Record::new(format!("{base}/grad_attn.t{t}"), g.clone()));
                }
            }
        }
        out
    }

    pub fn from_records(records: &[Record]) -> Result<Self> {
        let meta = find(records, "record/meta/map")?.data().to_vec();
        if meta.len() != 7 {
            return Err(Error::Config("record/meta/map must hold 7 values".into()));
        }
        let projector = ProjectorKind::from_code(meta[0] as u8)?;
        let (n_patches, n_queries, heads, len) =
            (meta[1] as usize, meta[2] as usize, meta[3] as usize, meta[4] as usize);
        let mode = if meta[5] == 1.0 { TraceMode::Greedy } else { TraceMode::TeacherForced };

        let pool = match meta[6] as u8 {
            0 => None,
            code => {
                let side = |n: usize| {
                    let s = n.isqrt();
                    (s * s == n)
                        .then_some(s)
                        .ok_or_else(|| Error::Config(format!("{n} tokens are not a square grid")))
                };
                let plan = plan_bins(side(n_patches)?, side(n_queries)?)?;
                let (mode, argmax) = if code == 1 {
                    (PoolMode::Avg, None)
                } else {
                    let t = find(records, "record/argmax/map")?;
                    let (m, d) = t.dims2()?;
                    let index = tensor_ids(t, "record/argmax/map")?;
                    let rec = ArgmaxRecord {
                        out_tokens: m,
                        channels: d,
                        index,
                    };
                    (PoolMode::Max, Some(rec))
                };
                Some(PoolRecord { plan, mode, argmax })
            }
        };

        let mut steps = Vec::with_capacity(len);
        for t in 0..len {
            let head = find(records, &format!("record/step/map.t{t}"))?.data().to_vec();
            if head.len() != 2 {
                return Err(Error::Config(format!("record/step/map.t{t} must hold 2 values")));
            }
            let logits = find(records, &format!("decoder/logits/map.t{t}"))?.data().to_vec();
            let suffix = format!("attn.t{t}");
            let mut attention = Vec::new();
            for r in records {
                let parts: Vec<&str> = r.name.split('/').collect();
                if parts.len() != 3 || parts[2] != suffix {
                    continue;
                }
                let Some(module) = AttnModule::ALL.into_iter().find(|m| m.as_str() == parts[0]) else {
                    continue;
                };
                let layer: usize = parts[1]
                    .parse()
                    .map_err(|_| Error::InvalidName(r.name.clone()))?;
                if r.tensor.ndim() != 3 {
                    return Err(Error::InvalidShape(format!(
                        "`{}` must be (heads, Tq, Tk), got {:?}",
                        r.name,
                        r.tensor.shape()
                    )));
                }
                let grad_name = format!("{}/{}/grad_attn.t{t}", parts[0], parts[1]);
                let grad = records
                    .iter()
                    .find(|g| g.name == grad_name)
                    .map(|g| g.tensor.clone());
                if let Some(g) = &grad {
                    if g.shape() != r.tensor.shape() {
                        return Err(Error::InvalidShape(format!(
                            "`{grad_name}` shape {:?} differs from attention {:?}",
                            g.shape(),
                            r.tensor.shape()
                        )));
                    }
                }
                attention.push(AttentionTrace {
                    module,
                    layer,
                    attn: r.tensor.clone(),
                    grad,
                });
            }
            attention.sort_by_key(|a| (a.module, a.layer));
            steps.push(StepTrace {
                step: t,
                target: head[0] as usize,
                predict_pos: head[1] as usize,
                logits,
                attention,
            });
        }

        Ok(Self {
            projector,
            n_patches,
            n_queries,
            heads,
            mode,
            prompt: tensor_ids(find(records, "record/prompt/map")?, "record/prompt/map")?,
            tokens: tensor_ids(find(records, "record/tokens/map")?, "record/tokens/map")?,
            pool,
            steps,
        })
    }
}
