use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Bindings;
use crate::tensor::Tensor;

use super::config::{ModelConfig, ProjectorKind};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn spec(name: String, shape: &[usize], init: Init) -> Spec {
    Spec {
        name,
        shape: shape.to_vec(),
        init,
    }
}

fn layer_norm(out: &mut Vec<Spec>, prefix: &str, tag: &str, d: usize) {
    out.push(spec(format!("{prefix}param.{tag}_g"), &[d], Init::Ones));
    out.push(spec(format!("{prefix}param.{tag}_b"), &[d], Init::Zeros));
}

fn attention(out: &mut Vec<Spec>, prefix: &str, tag: &str, d: usize, depth: usize) {
    let std = 1.0 / (d as f64).sqrt();
    for w in ["wq", "wk", "wv"] {
        out.push(spec(format!("{prefix}param.{tag}{w}"), &[d, d], Init::Normal(std)));
    }
    let out_std = std / (2.0 * depth as f64).sqrt();
    out.push(spec(format!("{prefix}param.{tag}wo"), &[d, d], Init::Normal(out_std)));
    out.push(spec(format!("{prefix}param.{tag}bo"), &[d], Init::Zeros));
}

fn mlp(out: &mut Vec<Spec>, prefix: &str, d: usize, depth: usize) {
    let hidden = 2 * d;
    out.push(spec(format!("{prefix}param.w1"), &[d, hidden], Init::Normal(1.0 / (d as f64).sqrt())));
    out.push(spec(format!("{prefix}param.b1"), &[hidden], Init::Zeros));
    let std = 1.0 / (hidden as f64).sqrt() / (2.0 * depth as f64).sqrt();
    out.push(spec(format!("{prefix}param.w2"), &[hidden, d], Init::Normal(std)));
    out.push(spec(format!("{prefix}param.b2"), &[d], Init::Zeros));
}

fn block(out: &mut Vec<Spec>, prefix: &str, d: usize, depth: usize) {
    layer_norm(out, prefix, "ln1", d);
    attention(out, prefix, "", d, depth);
    layer_norm(out, prefix, "ln2", d);
    mlp(out, prefix, d, depth);
}

/// Every parameter of a configuration, in initialisation order.
fn specs(cfg: &ModelConfig) -> Vec<Spec> {
    let (di, dt) = (cfg.embed_dim_vision, cfg.embed_dim_text);
    let n = cfg.n_patches();
    let mut out = Vec::new();

    out.push(spec(
        "encoder/embed/param.w_patch".into(),
        &[cfg.channels, di],
        Init::Normal(1.0 / (cfg.channels as f64).sqrt()),
    ));
    out.push(spec("encoder/embed/param.b_patch".into(), &[di], Init::Zeros));
    out.push(spec("encoder/embed/param.pos".into(), &[n, di], Init::Normal(0.5)));
    for l in 0..cfg.encoder_layers {
        block(&mut out, &format!("encoder/{l}/"), di, cfg.encoder_layers);
    }
    layer_norm(&mut out, "encoder/final/", "ln", di);

    if cfg.projector.kind == ProjectorKind::Resampler {
        let layers = cfg.projector.resampler_layers;
        out.push(spec(
            "projector/queries/param.q".into(),
            &[cfg.n_queries(), di],
            Init::Normal(1.0),
        ));
        for l in 0..layers {
            let p = format!("projector/{l}/");
            layer_norm(&mut out, &p, "ln_self", di);
            attention(&mut out, &p, "self_", di, layers);
            layer_norm(&mut out, &p, "ln_cross", di);
            layer_norm(&mut out, &p, "ln_kv", di);
            attention(&mut out, &p, "cross_", di, layers);
            layer_norm(&mut out, &p, "ln_mlp", di);
            mlp(&mut out, &p, di, layers);
        }
    }
    out.push(spec(
        "projector/out/param.w".into(),
        &[di, dt],
        Init::Normal(1.0 / (di as f64).sqrt()),
    ));
    out.push(spec("projector/out/param.b".into(), &[dt], Init::Zeros));

    out.push(spec("decoder/embed/param.tok".into(), &[cfg.vocab_size, dt], Init::Normal(1.0)));
    out.push(spec(
        "decoder/embed/param.pos".into(),
        &[cfg.decoder_positions(), dt],
        Init::Normal(0.5),
    ));
    for l in 0..cfg.decoder_layers {
        block(&mut out, &format!("decoder/{l}/"), dt, cfg.decoder_layers);
    }
    layer_norm(&mut out, "decoder/final/", "ln", dt);
    out.push(spec(
        "decoder/head/param.w".into(),
        &[dt, cfg.vocab_size],
        Init::Normal(1.0 / (dt as f64).sqrt()),
    ));
    out.push(spec("decoder/head/param.b".into(), &[cfg.vocab_size], Init::Zeros));
    out
}

/// Named parameter tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    tensors: Bindings,
}

impl Params {
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let tensors = specs(cfg)
            .into_iter()
            .map(|s| {
                let t = match s.init {
                    Init::Normal(std) => Tensor::randn(&s.shape, std, &mut rng),
                    Init::Zeros => Tensor::zeros(&s.shape),
                    Init::Ones => Tensor::full(&s.shape, 1.0),
                };
                (s.name, t)
            })
            .collect();
        Self { tensors }
    }

    /// All parameters zero, layer-norm gains included.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let tensors = specs(cfg)
            .into_iter()
            .map(|s| (s.name, Tensor::zeros(&s.shape)))
            .collect();
        Self { tensors }
    }

    /// Accepts tensors whose names and shapes match `cfg` exactly.
    pub fn from_tensors(cfg: &ModelConfig, mut tensors: Bindings) -> Result<Self> {
        let mut out = BTreeMap::new();
        for s in specs(cfg) {
            let t = tensors
                .remove(&s.name)
                .ok_or_else(|| Error::MissingRecord(s.name.clone()))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::InvalidShape(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            out.insert(s.name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self { tensors: out })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn bindings(&self) -> &Bindings {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Parameters whose module (first name segment) is `module`.
    pub fn module<'a>(&'a self, module: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.iter()
            .filter(move |(n, _)| n.split('/').next() == Some(module))
    }
}
