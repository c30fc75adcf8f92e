//! Drivers behind the CLI: the finite-difference suite, the projector
//! sweep and the convergence comparison.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gradcheck::{check_primitives, finite_diff_check, finite_diff_check_node, CheckReport};
use crate::model::mllm::Trainable;
use crate::model::{
    argmax, caption_accuracy, train, GenerationRecord, LossPoint, Mllm, ModelConfig, ProjectorKind,
    SyntheticTask, TraceMode, TrainConfig,
};
use crate::rgae::{explain, ExplainOptions};
use crate::trace_io::format_g17;

/// Primitive checks plus full-model checks: the training loss with respect
/// to every trainable weight matrix, and a target logit with respect to
/// every decoder attention head.
pub fn gradcheck_suite(cfg: &ModelConfig, h: f64) -> Result<Vec<CheckReport>> {
    let mut reports = check_primitives(cfg.seed, h)?;
    let model = Mllm::new(cfg.clone())?;
    let task = SyntheticTask::new(cfg.patch_grid_side, cfg.seed);
    let sample = task.sample_at(0, 0, cfg.patch_grid_side - 1);
    let patches = model.encode(&sample.image)?.patches;

    let (mut g, loss) = model.loss_graph(&[(&patches, sample.caption.as_slice())], Trainable::ProjectorAndDecoder)?;
    let matrices: Vec<String> = model
        .params()
        .iter()
        .filter(|(n, t)| !n.starts_with("encoder/") && t.ndim() == 2)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in matrices {
        let err = finite_diff_check(&mut g, model.params().bindings(), loss, &name, h)?;
        reports.push(CheckReport {
            name: format!("model/loss/{name}"),
            max_rel_error: err,
        });
    }

    let (mut g, target, heads) = model.logit_graph(&sample.image, &model.vocab().prompt(), sample.caption[0])?;
    for (layer, head, node) in heads {
        let err = finite_diff_check_node(&mut g, model.params().bindings(), target, node, h)?;
        reports.push(CheckReport {
            name: format!("model/logit/decoder/{layer}/attn.h{head}"),
            max_rel_error: err,
        });
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparePoint {
    pub kind: ProjectorKind,
    pub out_tokens: usize,
    pub final_loss: f64,
    pub caption_accuracy: f64,
    /// Fraction of samples whose strongest text-to-patch cell is the
    /// object's cell.
    pub localization: f64,
}

#[derive(Debug, Clone)]
pub struct CompareOptions {
    pub base: ModelConfig,
    pub train: TrainConfig,
    /// Output grid sides for the compressive projectors.
    pub out_sides: Vec<usize>,
    pub eval_samples: usize,
    pub eval_seed: u64,
}

impl CompareOptions {
    /// Sweep mirroring 576 → {400, 256, 144, 64}: every side from the
    /// input side down to 1, scaled onto the toy grid.
    pub fn for_grid(base: ModelConfig, train: TrainConfig) -> Self {
        let side = base.patch_grid_side;
        Self {
            base,
            train,
            out_sides: (1..=side).rev().collect(),
            eval_samples: 16,
            eval_seed: 999,
        }
    }
}

/// Argmax of the step-averaged text-to-patch map equals the object cell.
pub fn localization_accuracy(model: &Mllm, samples: usize, seed: u64) -> Result<f64> {
    let mut task = SyntheticTask::new(model.config().patch_grid_side, seed);
    let side = model.config().patch_grid_side;
    let mut hits = 0;
    for _ in 0..samples {
        let s = task.sample();
        let rec = model.generate(
            &s.image,
            &model.vocab().prompt(),
            s.caption.len(),
            TraceMode::TeacherForced,
            Some(&s.caption),
        )?;
        let res = explain(&rec, ExplainOptions::default())?;
        if argmax(res.text_to_patch.data()) == s.row * side + s.col {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.max(1) as f64)
}

fn tail_mean(history: &[LossPoint], k: usize) -> f64 {
    let tail = &history[history.len().saturating_sub(k)..];
    tail.iter().map(|p| p.loss).sum::<f64>() / tail.len().max(1) as f64
}

/// Trains every projector at every applicable token count with the same
/// budget and evaluates it.
pub fn compare(opts: &CompareOptions) -> Result<Vec<ComparePoint>> {
    let n = opts.base.n_patches();
    let mut points = Vec::new();
    for kind in ProjectorKind::ALL {
        let counts: Vec<usize> = match kind {
            ProjectorKind::Linear => vec![n],
            _ => opts.out_sides.iter().map(|s| s * s).collect(),
        };
        for m in counts {
            let cfg = opts.base.clone().with_projector(kind, m);
            let mut model = Mllm::new(cfg)?;
            let history = train(&mut model, &opts.train)?;
            points.push(ComparePoint {
                kind,
                out_tokens: m,
                final_loss: tail_mean(&history, 10),
                caption_accuracy: caption_accuracy(&model, opts.eval_samples, opts.eval_seed)?,
                localization: localization_accuracy(&model, opts.eval_samples, opts.eval_seed)?,
            });
        }
    }
    Ok(points)
}

pub fn compare_csv(points: &[ComparePoint]) -> String {
    let mut out = String::from("projector,out_tokens,final_loss,caption_accuracy,localization\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.kind,
            p.out_tokens,
            format_g17(p.final_loss),
            format_g17(p.caption_accuracy),
            format_g17(p.localization)
        );
    }
    out
}

/// Loss history as `step,stage,loss` rows.
pub fn loss_csv(history: &[LossPoint]) -> String {
    let mut out = String::from("step,stage,loss\n");
    for p in history {
        let _ = writeln!(out, "{},{},{}", p.step, p.stage, format_g17(p.loss));
    }
    out
}

/// Moving average over the trailing `window` losses.
pub fn smoothed(history: &[LossPoint], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..history.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let span = &history[lo..=i];
            span.iter().map(|p| p.loss).sum::<f64>() / span.len() as f64
        })
        .collect()
}

/// First 1-based step whose smoothed loss is at or below `threshold`.
pub fn steps_to_threshold(history: &[LossPoint], threshold: f64, window: usize) -> Option<usize> {
    smoothed(history, window).iter().position(|&l| l <= threshold).map(|i| i + 1)
}

#[derive(Debug, Clone)]
pub struct ConvergenceOptions {
    pub base: ModelConfig,
    pub train: TrainConfig,
    pub kinds: Vec<(ProjectorKind, usize)>,
    pub seeds: Vec<u64>,
    pub threshold: f64,
    pub window: usize,
}

#[derive(Debug, Clone)]
pub struct ConvergenceRun {
    pub kind: ProjectorKind,
    pub out_tokens: usize,
    pub seed: u64,
    pub history: Vec<LossPoint>,
    /// `None` when the budget ran out first.
    pub steps_to_threshold: Option<usize>,
}

impl ConvergenceRun {
    /// Steps to threshold with misses counted as one past the budget.
    pub fn cost(&self) -> usize {
        self.steps_to_threshold.unwrap_or(self.history.len() + 1)
    }
}

/// Same budget and data for every projector; the seed drives both the
/// initialisation and the data stream.
pub fn convergence(opts: &ConvergenceOptions) -> Result<Vec<ConvergenceRun>> {
    let mut runs = Vec::new();
    for &(kind, m) in &opts.kinds {
        for &seed in &opts.seeds {
            let cfg = ModelConfig {
                seed,
                ..opts.base.clone().with_projector(kind, m)
            };
            let mut model = Mllm::new(cfg)?;
            let tc = TrainConfig {
                data_seed: seed,
                ..opts.train.clone()
            };
            let history = train(&mut model, &tc)?;
            runs.push(ConvergenceRun {
                kind,
                out_tokens: m,
                seed,
                steps_to_threshold: steps_to_threshold(&history, opts.threshold, opts.window),
                history,
            });
        }
    }
    Ok(runs)
}

/// Costs of one projector's runs, ascending.
pub fn sorted_costs(runs: &[ConvergenceRun], kind: ProjectorKind) -> Vec<usize> {
    let mut v: Vec<usize> = runs.iter().filter(|r| r.kind == kind).map(ConvergenceRun::cost).collect();
    v.sort_unstable();
    v
}

/// Lower median.
pub fn median(sorted: &[usize]) -> Result<usize> {
    if sorted.is_empty() {
        return Err(Error::EmptyRecord);
    }
    Ok(sorted[(sorted.len() - 1) / 2])
}

/// `median(a) ≤ b` at one rank above its median: the comparison allows
/// one seed of slack.
pub fn no_slower_with_slack(a: &[usize], b: &[usize]) -> Result<bool> {
    let rank = ((b.len().max(1) - 1) / 2 + 1).min(b.len().saturating_sub(1));
    Ok(median(a)? <= *b.get(rank).ok_or(Error::EmptyRecord)?)
}

/// `kind,out_tokens,seed,step,loss,smoothed` rows for every run.
pub fn convergence_csv(runs: &[ConvergenceRun], window: usize) -> String {
    let mut out = String::from("projector,out_tokens,seed,step,loss,smoothed\n");
    for r in runs {
        for (p, s) in r.history.iter().zip(smoothed(&r.history, window)) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.kind,
                r.out_tokens,
                r.seed,
                p.step,
                format_g17(p.loss),
                format_g17(s)
            );
        }
    }
    out
}

/// Teacher-forced record of one sample; shared by the CLI and tests.
pub fn trace_sample(model: &Mllm, color: usize, row: usize, col: usize, mode: TraceMode) -> Result<GenerationRecord> {
    let task = SyntheticTask::new(model.config().patch_grid_side, 0);
    let s = task.sample_at(color, row, col);
    model.generate(
        &s.image,
        &model.vocab().prompt(),
        s.caption.len() + 1,
        mode,
        Some(&s.caption),
    )
}
