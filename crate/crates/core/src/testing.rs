//! Random generation records for property tests of the relevance engine.
//!
//! Attention rows are stochastic (causal for the decoder), gradients are
//! uniform in `[-1, 1]`, and shapes follow the real pipeline: decoder
//! sequences grow by one token per step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compressor::{plan_bins, ArgmaxRecord, PoolMode};
use crate::model::{AttentionTrace, AttnModule, GenerationRecord, PoolRecord, ProjectorKind, StepTrace, TraceMode};
use crate::tensor::Tensor;

/// Unset fields are drawn at random: 1–3 layers, 1–4 heads, 1–3 steps.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomRecordSpec {
    pub projector: Option<ProjectorKind>,
    pub decoder_layers: Option<usize>,
    pub resampler_layers: Option<usize>,
    pub heads: Option<usize>,
    pub steps: Option<usize>,
    pub zero_grads: bool,
}

fn stochastic(rng: &mut ChaCha8Rng, heads: usize, rows: usize, cols: usize, causal: bool) -> Tensor {
    let mut data = Vec::with_capacity(heads * rows * cols);
    for _ in 0..heads {
        for r in 0..rows {
            let limit = if causal { r + cols - rows } else { cols - 1 };
            let raw: Vec<f64> = (0..cols)
                .map(|c| if c <= limit { rng.random_range(0.01..1.0) } else { 0.0 })
                .collect();
            let s: f64 = raw.iter().sum();
            data.extend(raw.into_iter().map(|v| v / s));
        }
    }
    Tensor::new(vec![heads, rows, cols], data).expect("attention shape")
}

fn grads(rng: &mut ChaCha8Rng, like: &Tensor, zero: bool) -> Tensor {
    if zero {
        Tensor::zeros(like.shape())
    } else {
        Tensor::uniform(like.shape(), -1.0, 1.0, rng)
    }
}

pub fn random_record(seed: u64, spec: RandomRecordSpec) -> GenerationRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projector = spec
        .projector
        .unwrap_or_else(|| ProjectorKind::ALL[rng.random_range(0..ProjectorKind::ALL.len())]);
    let side = rng.random_range(2..=4usize);
    let n = side * side;
    let heads = spec.heads.unwrap_or_else(|| rng.random_range(1..=4));
    let dec_layers = spec.decoder_layers.unwrap_or_else(|| rng.random_range(1..=3));
    let res_layers = spec.resampler_layers.unwrap_or_else(|| rng.random_range(1..=3));
    let steps = spec.steps.unwrap_or_else(|| rng.random_range(1..=3));
    let prompt_len = rng.random_range(1..=3);

    let (m, pool) = match projector {
        ProjectorKind::Linear => (n, None),
        ProjectorKind::Resampler => (rng.random_range(1..=5), None),
        kind => {
            let out_side = rng.random_range(1..=side);
            let plan = plan_bins(side, out_side).expect("out_side ≤ side");
            let channels = 3;
            let (mode, argmax) = if kind == ProjectorKind::AdaptiveAvgPool {
                (PoolMode::Avg, None)
            } else {
                let index = (0..plan.out_tokens() * channels)
                    .map(|i| {
                        let window: Vec<usize> = plan.window_indices(i / channels).collect();
                        window[rng.random_range(0..window.len())]
                    })
                    .collect();
                let rec = ArgmaxRecord {
                    out_tokens: plan.out_tokens(),
                    channels,
                    index,
                };
                (PoolMode::Max, Some(rec))
            };
            (plan.out_tokens(), Some(PoolRecord { plan, mode, argmax }))
        }
    };

    let prompt: Vec<usize> = (0..prompt_len).map(|_| rng.random_range(0..27)).collect();
    let tokens: Vec<usize> = (0..steps).map(|_| rng.random_range(0..27)).collect();
    let mut out_steps = Vec::with_capacity(steps);
    for t in 0..steps {
        let seq = m + prompt_len + t;
        let mut attention = Vec::new();
        if projector == ProjectorKind::Resampler {
            for l in 0..res_layers {
                for (module, cols) in [(AttnModule::ProjectorSelf, m), (AttnModule::ProjectorCross, n)] {
                    let attn = stochastic(&mut rng, heads, m, cols, false);
                    let grad = Some(grads(&mut rng, &attn, spec.zero_grads));
                    attention.push(AttentionTrace {
                        module,
                        layer: l,
                        attn,
                        grad,
                    });
                }
            }
        }
        for l in 0..dec_layers {
            let attn = stochastic(&mut rng, heads, seq, seq, true);
            let grad = Some(grads(&mut rng, &attn, spec.zero_grads));
            attention.push(AttentionTrace {
                module: AttnModule::Decoder,
                layer: l,
                attn,
                grad,
            });
        }
        attention.sort_by_key(|a| (a.module, a.layer));
        out_steps.push(StepTrace {
            step: t,
            target: tokens[t],
            predict_pos: seq - 1,
            logits: (0..27).map(|_| rng.random_range(-1.0..1.0)).collect(),
            attention,
        });
    }

    GenerationRecord {
        projector,
        n_patches: n,
        n_queries: m,
        heads,
        mode: TraceMode::TeacherForced,
        prompt,
        tokens,
        pool,
        steps: out_steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_are_well_formed() {
        for seed in 0..50 {
            let rec = random_record(seed, RandomRecordSpec::default());
            for s in &rec.steps {
                for a in &s.attention {
                    let (h, r, c) = (a.attn.shape()[0], a.attn.shape()[1], a.attn.shape()[2]);
                    for i in 0..h * r {
                        let row = &a.attn.data()[i * c..(i + 1) * c];
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
            assert_eq!(rec.steps[0].module(AttnModule::Decoder)[0].attn.shape()[1], rec.n_queries + rec.prompt.len());
        }
    }
}
