//! Parameter-free adaptive pooling over a square patch grid, and the
//! structural query-to-patch maps that non-attention projectors induce.
//!
//! Token `n` of an `(in_side², d)` input is the patch at row `n / in_side`,
//! column `n % in_side`. Output tokens are flattened the same way over the
//! `out_side × out_side` grid.
//!
//! Bin edges follow the usual adaptive-pooling rule: output index `i`
//! covers `[floor(i·in/out), ceil((i+1)·in/out))`. Bins overlap when
//! `out_side` does not divide `in_side`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Avg,
    Max,
}

impl PoolMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolMode::Avg => "avg",
            PoolMode::Max => "max",
        }
    }
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(PoolMode::Avg),
            "max" => Ok(PoolMode::Max),
            other => Err(Error::Config(format!("unknown pool mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolPlan {
    in_side: usize,
    out_side: usize,
    bins: Vec<Range<usize>>,
}

/// Computes the per-output windows for pooling an `in_side²` grid down to
/// `out_side²`. The same bins apply to rows and columns.
pub fn plan_bins(in_side: usize, out_side: usize) -> Result<PoolPlan> {
    if in_side == 0 || out_side == 0 {
        return Err(Error::Config(format!(
            "pool sides must be positive (in {in_side}, out {out_side})"
        )));
    }
    if out_side > in_side {
        return Err(Error::Upsample { in_side, out_side });
    }
    let bins = (0..out_side)
        .map(|i| {
            let start = i * in_side / out_side;
            let end = ((i + 1) * in_side).div_ceil(out_side);
            start..end
        })
        .collect();
    Ok(PoolPlan {
        in_side,
        out_side,
        bins,
    })
}

impl PoolPlan {
    pub fn in_side(&self) -> usize {
        self.in_side
    }

    pub fn out_side(&self) -> usize {
        self.out_side
    }

    /// N, the number of input patches.
    pub fn in_tokens(&self) -> usize {
        self.in_side * self.in_side
    }

    /// M, the number of pooled tokens.
    pub fn out_tokens(&self) -> usize {
        self.out_side * self.out_side
    }

    /// Bins along one axis.
    pub fn bins(&self) -> &[Range<usize>] {
        &self.bins
    }

    /// Row and column intervals of output token `m`.
    pub fn window(&self, m: usize) -> (Range<usize>, Range<usize>) {
        let (i, j) = (m / self.out_side, m % self.out_side);
        (self.bins[i].clone(), self.bins[j].clone())
    }

    pub fn window_len(&self, m: usize) -> usize {
        let (r, c) = self.window(m);
        r.len() * c.len()
    }

    /// Flattened input indices covered by output token `m`, ascending.
    pub fn window_indices(&self, m: usize) -> impl Iterator<Item = usize> + '_ {
        let (rows, cols) = self.window(m);
        let side = self.in_side;
        rows.flat_map(move |r| cols.clone().map(move |c| r * side + c))
    }

    /// Uniform kernel size and stride `(K, S)`, present only when `out_side`
    /// divides `in_side`.
    pub fn uniform_kernel(&self) -> Option<(usize, usize)> {
        (self.in_side % self.out_side == 0).then(|| {
            let k = self.in_side / self.out_side;
            (k, k)
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (n, d) = x.dims2()?;
        if n != self.in_tokens() {
            return Err(Error::InvalidShape(format!(
                "pool plan expects {} tokens ({}x{} grid), got shape {:?}",
                self.in_tokens(),
                self.in_side,
                self.in_side,
                x.shape()
            )));
        }
        Ok((n, d))
    }
}

/// Per-channel winning input index for every pooled cell of a max-pool run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxRecord {
    pub out_tokens: usize,
    pub channels: usize,
    /// `index[m * channels + c]` is the flattened input patch that won.
    pub index: Vec<usize>,
}

impl ArgmaxRecord {
    /// Patch chosen by the most channels in window `m`; ties go to the
    /// lowest patch index.
    pub fn majority(&self, m: usize) -> usize {
        let mut winners: Vec<usize> =
            self.index[m * self.channels..(m + 1) * self.channels].to_vec();
        winners.sort_unstable();
        let mut best = (0usize, usize::MAX);
        let mut k = 0;
        while k < winners.len() {
            let v = winners[k];
            let run = winners[k..].iter().take_while(|&&w| w == v).count();
            if run > best.0 {
                best = (run, v);
            }
            k += run;
        }
        best.1
    }
}

pub fn pool_avg(x: &Tensor, plan: &PoolPlan) -> Result<Tensor> {
    let (_, d) = plan.check_input(x)?;
    let m_total = plan.out_tokens();
    let mut out = vec![0.0; m_total * d];
    let src = x.data();
    for m in 0..m_total {
        let count = plan.window_len(m) as f64;
        let dst = &mut out[m * d..(m + 1) * d];
        for n in plan.window_indices(m) {
            for (o, &v) in dst.iter_mut().zip(&src[n * d..(n + 1) * d]) {
                *o += v;
            }
        }
        for o in dst.iter_mut() {
            *o /= count;
        }
    }
    Tensor::new(vec![m_total, d], out)
}

#[derive(Debug, Clone)]
pub struct MaxPooled {
    pub output: Tensor,
    pub argmax: ArgmaxRecord,
}

pub fn pool_max(x: &Tensor, plan: &PoolPlan) -> Result<MaxPooled> {
    let (_, d) = plan.check_input(x)?;
    let m_total = plan.out_tokens();
    let mut out = vec![f64::NEG_INFINITY; m_total * d];
    let mut index = vec![usize::MAX; m_total * d];
    let src = x.data();
    for m in 0..m_total {
        for n in plan.window_indices(m) {
            for c in 0..d {
                let v = src[n * d + c];
                // strict comparison: ascending scan keeps the lowest index on ties
                if v > out[m * d + c] || index[m * d + c] == usize::MAX {
                    out[m * d + c] = v;
                    index[m * d + c] = n;
                }
            }
        }
    }
    Ok(MaxPooled {
        output: Tensor::new(vec![m_total, d], out)?,
        argmax: ArgmaxRecord {
            out_tokens: m_total,
            channels: d,
            index,
        },
    })
}

/// The `M×N` linear operator of average pooling: entry `(m, n)` is
/// `1/|window_m|` when patch `n` lies in window `m`.
pub fn structural_map_avg(plan: &PoolPlan) -> Tensor {
    let (m_total, n_total) = (plan.out_tokens(), plan.in_tokens());
    let mut map = Tensor::zeros(&[m_total, n_total]);
    for m in 0..m_total {
        let w = 1.0 / plan.window_len(m) as f64;
        for n in plan.window_indices(m) {
            map.set(&[m, n], w);
        }
    }
    map
}

/// One-hot rows at each window's channel-majority max patch.
pub fn structural_map_max(plan: &PoolPlan, argmax: Option<&ArgmaxRecord>) -> Result<Tensor> {
    let argmax = argmax.ok_or(Error::MissingArgmax)?;
    if argmax.out_tokens != plan.out_tokens() {
        return Err(Error::InvalidShape(format!(
            "argmax record covers {} tokens, plan has {}",
            argmax.out_tokens,
            plan.out_tokens()
        )));
    }
    let mut map = Tensor::zeros(&[plan.out_tokens(), plan.in_tokens()]);
    for m in 0..plan.out_tokens() {
        map.set(&[m, argmax.majority(m)], 1.0);
    }
    Ok(map)
}

/// Query-to-patch map of a non-compressive projector.
pub fn structural_map_linear(n: usize) -> Tensor {
    Tensor::eye(n)
}

pub fn pool_backward(
    grad_out: &Tensor,
    plan: &PoolPlan,
    mode: PoolMode,
    argmax: Option<&ArgmaxRecord>,
) -> Result<Tensor> {
    let (m_total, d) = grad_out.dims2()?;
    if m_total != plan.out_tokens() {
        return Err(Error::InvalidShape(format!(
            "pool gradient has {m_total} rows, plan produces {}",
            plan.out_tokens()
        )));
    }
    let g = grad_out.data();
    let mut grad_in = vec![0.0; plan.in_tokens() * d];
    match mode {
        PoolMode::Avg => {
            for m in 0..m_total {
                let count = plan.window_len(m) as f64;
                for n in plan.window_indices(m) {
                    for c in 0..d {
                        grad_in[n * d + c] += g[m * d + c] / count;
                    }
                }
            }
        }
        PoolMode::Max => {
            let argmax = argmax.ok_or(Error::MissingArgmax)?;
            if argmax.channels != d || argmax.out_tokens != m_total {
                return Err(Error::InvalidShape("argmax record does not match gradient".into()));
            }
            for (k, &n) in argmax.index.iter().enumerate() {
                let c = k % d;
                grad_in[n * d + c] += g[k];
            }
        }
    }
    Tensor::new(vec![plan.in_tokens(), d], grad_in)
}
