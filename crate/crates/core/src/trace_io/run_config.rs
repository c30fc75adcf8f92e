//! `key = value` run configuration files.
//!
//! Blank lines and `#` comments are ignored, unknown or repeated keys are
//! errors, and every key has a default. The original text is kept so runs
//! can echo it verbatim.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ProjectorConfig, ProjectorKind, TraceMode, TrainConfig};
use crate::rgae::CrossRule;

pub const KEYS: [&str; 20] = [
    "grid_side",
    "embed_dim_vision",
    "embed_dim_text",
    "heads",
    "encoder_layers",
    "decoder_layers",
    "vocab_size",
    "projector",
    "out_tokens",
    "resampler_layers",
    "seed",
    "data_seed",
    "cross_rule",
    "stages",
    "steps_stage1",
    "steps_stage2",
    "lr",
    "batch_size",
    "output_dir",
    "trace_mode",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cross_rule: CrossRule,
    pub trace_mode: TraceMode,
    /// Explicit output directory, if the file sets one.
    pub output_dir: Option<PathBuf>,
    /// Source text, empty for defaults.
    pub text: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::parse("", Path::new("<default>")).expect("defaults are valid")
    }
}

fn value<T: std::str::FromStr>(raw: &str, origin: &Path, line: usize, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg: format!("bad value `{raw}` for `{key}`: {e}"),
    })
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut model = ModelConfig::default();
        let mut train = TrainConfig::default();
        let mut cross_rule = CrossRule::default();
        let mut trace_mode = TraceMode::default();
        let mut output_dir = None;
        let mut out_tokens: Option<usize> = None;
        let mut seen = std::collections::HashSet::new();

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: line_no,
                msg,
            };
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, val) = (key.trim(), val.trim());
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(err(format!("key `{key}` given twice")));
            }
            match key {
                "grid_side" => model.patch_grid_side = value(val, origin, line_no, key)?,
                "embed_dim_vision" => model.embed_dim_vision = value(val, origin, line_no, key)?,
                "embed_dim_text" => model.embed_dim_text = value(val, origin, line_no, key)?,
                "heads" => model.heads = value(val, origin, line_no, key)?,
                "encoder_layers" => model.encoder_layers = value(val, origin, line_no, key)?,
                "decoder_layers" => model.decoder_layers = value(val, origin, line_no, key)?,
                "vocab_size" => model.vocab_size = value(val, origin, line_no, key)?,
                "projector" => model.projector.kind = value::<ProjectorKind>(val, origin, line_no, key)?,
                "out_tokens" => {
                    if val != "auto" {
                        out_tokens = Some(value(val, origin, line_no, key)?);
                    }
                }
                "resampler_layers" => model.projector.resampler_layers = value(val, origin, line_no, key)?,
                "seed" => model.seed = value(val, origin, line_no, key)?,
                "data_seed" => train.data_seed = value(val, origin, line_no, key)?,
                "cross_rule" => cross_rule = value(val, origin, line_no, key)?,
                "stages" => train.stages = value(val, origin, line_no, key)?,
                "steps_stage1" => train.steps_stage1 = value(val, origin, line_no, key)?,
                "steps_stage2" => train.steps_stage2 = value(val, origin, line_no, key)?,
                "lr" => train.lr = value(val, origin, line_no, key)?,
                "batch_size" => train.batch_size = value(val, origin, line_no, key)?,
                "output_dir" => output_dir = Some(PathBuf::from(val)),
                "trace_mode" => trace_mode = value(val, origin, line_no, key)?,
                _ => unreachable!("key list checked above"),
            }
        }

        model.projector = ProjectorConfig {
            out_tokens: out_tokens.unwrap_or_else(|| default_out_tokens(model.projector.kind, model.patch_grid_side)),
            ..model.projector
        };
        model.validate()?;
        train.validate()?;
        Ok(Self {
            model,
            train,
            cross_rule,
            trace_mode,
            output_dir,
            text: text.to_string(),
        })
    }
}

/// All patches for the linear projector, a half-side grid otherwise.
pub fn default_out_tokens(kind: ProjectorKind, grid_side: usize) -> usize {
    match kind {
        ProjectorKind::Linear => grid_side * grid_side,
        _ => {
            let s = (grid_side / 2).max(1);
            s * s
        }
    }
}
