use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::task::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProjectorKind {
    Linear,
    AdaptiveAvgPool,
    AdaptiveMaxPool,
    Resampler,
}

impl ProjectorKind {
    pub const ALL: [ProjectorKind; 4] = [
        ProjectorKind::Linear,
        ProjectorKind::AdaptiveAvgPool,
        ProjectorKind::AdaptiveMaxPool,
        ProjectorKind::Resampler,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProjectorKind::Linear => "linear",
            ProjectorKind::AdaptiveAvgPool => "avg_pool",
            ProjectorKind::AdaptiveMaxPool => "max_pool",
            ProjectorKind::Resampler => "resampler",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ProjectorKind::Linear => 0,
            ProjectorKind::AdaptiveAvgPool => 1,
            ProjectorKind::AdaptiveMaxPool => 2,
            ProjectorKind::Resampler => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or_else(|| Error::Config(format!("unknown projector code {code}")))
    }

    pub fn is_pooling(self) -> bool {
        matches!(self, ProjectorKind::AdaptiveAvgPool | ProjectorKind::AdaptiveMaxPool)
    }
}

impl fmt::Display for ProjectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProjectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProjectorKind::Linear),
            "avg_pool" | "adaptive_avg_pool" => Ok(ProjectorKind::AdaptiveAvgPool),
            "max_pool" | "adaptive_max_pool" => Ok(ProjectorKind::AdaptiveMaxPool),
            "resampler" => Ok(ProjectorKind::Resampler),
            other => Err(Error::Config(format!("unknown projector `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectorConfig {
    pub kind: ProjectorKind,
    /// M, the number of visual tokens handed to the decoder.
    pub out_tokens: usize,
    pub resampler_layers: usize,
}

impl ProjectorConfig {
    pub fn new(kind: ProjectorKind, out_tokens: usize) -> Self {
        Self {
            kind,
            out_tokens,
            resampler_layers: 2,
        }
    }

    /// √M for pooling kinds.
    pub fn out_side(&self) -> Option<usize> {
        let s = self.out_tokens.isqrt();
        (s * s == self.out_tokens).then_some(s)
    }

    pub fn validate(&self, n_patches: usize) -> Result<()> {
        if self.out_tokens == 0 {
            return Err(Error::Config("out_tokens must be positive".into()));
        }
        match self.kind {
            ProjectorKind::Linear if self.out_tokens != n_patches => Err(Error::Config(format!(
                "linear projector keeps all {n_patches} patches, got out_tokens {}",
                self.out_tokens
            ))),
            k if k.is_pooling() => {
                if self.out_side().is_none() {
                    return Err(Error::Config(format!(
                        "pooling needs a square out_tokens, got {}",
                        self.out_tokens
                    )));
                }
                if self.out_tokens > n_patches {
                    return Err(Error::Config(format!(
                        "pooling cannot upsample {n_patches} patches to {}",
                        self.out_tokens
                    )));
                }
                Ok(())
            }
            ProjectorKind::Resampler if self.resampler_layers == 0 => {
                Err(Error::Config("resampler needs at least one layer".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub patch_grid_side: usize,
    /// Values per image cell.
    pub channels: usize,
    pub embed_dim_vision: usize,
    pub embed_dim_text: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    /// Text positions available after the visual tokens.
    pub max_text_len: usize,
    pub projector: ProjectorConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_grid_side: 4,
            channels: 3,
            embed_dim_vision: 32,
            embed_dim_text: 32,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            vocab_size: Vocab::standard().len(),
            max_text_len: 16,
            projector: ProjectorConfig::new(ProjectorKind::AdaptiveAvgPool, 4),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// N.
    pub fn n_patches(&self) -> usize {
        self.patch_grid_side * self.patch_grid_side
    }

    /// M.
    pub fn n_queries(&self) -> usize {
        self.projector.out_tokens
    }

    pub fn decoder_positions(&self) -> usize {
        self.n_queries() + self.max_text_len
    }

    pub fn with_projector(mut self, kind: ProjectorKind, out_tokens: usize) -> Self {
        self.projector.kind = kind;
        self.projector.out_tokens = out_tokens;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_grid_side", self.patch_grid_side),
            ("channels", self.channels),
            ("embed_dim_vision", self.embed_dim_vision),
            ("embed_dim_text", self.embed_dim_text),
            ("heads", self.heads),
            ("max_text_len", self.max_text_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.embed_dim_vision % self.heads != 0 || self.embed_dim_text % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dims {}/{} not divisible by {} heads",
                self.embed_dim_vision, self.embed_dim_text, self.heads
            )));
        }
        let vocab = Vocab::standard();
        if self.vocab_size < vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than the {} built-in words",
                self.vocab_size,
                vocab.len()
            )));
        }
        if self.patch_grid_side > vocab.max_grid_side() {
            return Err(Error::Config(format!(
                "grid side {} exceeds the vocabulary's {} row/col words",
                self.patch_grid_side,
                vocab.max_grid_side()
            )));
        }
        self.projector.validate(self.n_patches())
    }
}
