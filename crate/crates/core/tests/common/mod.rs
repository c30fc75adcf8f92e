//! Reference implementations written with plain loops over `Vec<f64>`.
//! They share no code with the library beyond reading its record types.

#![allow(dead_code)]

use rgae_core::model::{AttnModule, GenerationRecord, ProjectorKind, StepTrace};
use rgae_core::rgae::CrossRule;
use rgae_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn identity(n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn max_abs_diff(a: &Mat, t: &Tensor) -> f64 {
    let b = to_mat(t);
    assert_eq!(a.len(), b.len(), "row count");
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.len(), y.len(), "column count");
        for (p, q) in x.iter().zip(y) {
            worst = worst.max((p - q).abs());
        }
    }
    worst
}

/// Adaptive bin `[floor(i·in/out), ceil((i+1)·in/out))`.
pub fn bin(i: usize, in_side: usize, out_side: usize) -> (usize, usize) {
    (i * in_side / out_side, ((i + 1) * in_side).div_ceil(out_side))
}

/// Average pooling of a row-major `(in_side², d)` buffer.
pub fn naive_pool_avg(x: &[f64], in_side: usize, out_side: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_side * out_side * d];
    for i in 0..out_side {
        for j in 0..out_side {
            let (r0, r1) = bin(i, in_side, out_side);
            let (c0, c1) = bin(j, in_side, out_side);
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            for ch in 0..d {
                let mut s = 0.0;
                for r in r0..r1 {
                    for c in c0..c1 {
                        s += x[(r * in_side + c) * d + ch];
                    }
                }
                out[(i * out_side + j) * d + ch] = s / count;
            }
        }
    }
    out
}

pub fn naive_structural_avg(in_side: usize, out_side: usize) -> Mat {
    let mut map = zeros(out_side * out_side, in_side * in_side);
    for i in 0..out_side {
        for j in 0..out_side {
            let (r0, r1) = bin(i, in_side, out_side);
            let (c0, c1) = bin(j, in_side, out_side);
            let w = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
            for r in r0..r1 {
                for c in c0..c1 {
                    map[i * out_side + j][r * in_side + c] = w;
                }
            }
        }
    }
    map
}

/// `mean_h max(0, A ⊙ ∇A)`.
fn bar(attn: &Tensor, grad: &Tensor) -> Mat {
    let (h, tq, tk) = (attn.shape()[0], attn.shape()[1], attn.shape()[2]);
    let mut out = zeros(tq, tk);
    for i in 0..tq {
        for j in 0..tk {
            let mut s = 0.0;
            for head in 0..h {
                let k = head * tq * tk + i * tk + j;
                let v = attn.data()[k] * grad.data()[k];
                if v > 0.0 {
                    s += v;
                }
            }
            out[i][j] = s / h as f64;
        }
    }
    out
}

fn layers(step: &StepTrace, module: AttnModule) -> Vec<(&Tensor, &Tensor)> {
    let mut v: Vec<_> = step.attention.iter().filter(|a| a.module == module).collect();
    v.sort_by_key(|a| a.layer);
    v.into_iter().map(|a| (&a.attn, a.grad.as_ref().expect("gradient present"))).collect()
}

fn row_normalized(m: &Mat) -> Mat {
    m.iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                row.clone()
            } else {
                row.iter().map(|v| v / s).collect()
            }
        })
        .collect()
}

fn structural(record: &GenerationRecord) -> Mat {
    let n = record.n_patches;
    let in_side = (n as f64).sqrt().round() as usize;
    match record.projector {
        ProjectorKind::Linear => identity(n),
        ProjectorKind::AdaptiveAvgPool => {
            let out_side = (record.n_queries as f64).sqrt().round() as usize;
            naive_structural_avg(in_side, out_side)
        }
        ProjectorKind::AdaptiveMaxPool => {
            let am = record.pool.as_ref().and_then(|p| p.argmax.as_ref()).expect("argmax record");
            let mut map = zeros(record.n_queries, n);
            for m in 0..record.n_queries {
                let mut votes = vec![0usize; n];
                for c in 0..am.channels {
                    votes[am.index[m * am.channels + c]] += 1;
                }
                // first index with the highest vote count
                let mut best = 0;
                for p in 1..n {
                    if votes[p] > votes[best] {
                        best = p;
                    }
                }
                map[m][best] = 1.0;
            }
            map
        }
        ProjectorKind::Resampler => unreachable!("resampler has learned attention"),
    }
}

pub struct OracleStep {
    pub text_to_query: Mat,
    pub query_to_patch: Mat,
    pub text_to_patch: Mat,
}

pub fn oracle_step(record: &GenerationRecord, t: usize, rule: CrossRule) -> OracleStep {
    let step = &record.steps[t];
    let dec = layers(step, AttnModule::Decoder);
    let seq = dec[0].0.shape()[1];
    let mut r = identity(seq);
    for (a, g) in dec {
        r = add(&r, &matmul(&bar(a, g), &r));
    }
    let m = record.n_queries;
    let text_to_query = vec![r[step.predict_pos][..m].to_vec()];

    let query_to_patch = if record.projector == ProjectorKind::Resampler {
        let selfs = layers(step, AttnModule::ProjectorSelf);
        let crosses = layers(step, AttnModule::ProjectorCross);
        let mut rq = identity(m);
        let mut cross = zeros(m, record.n_patches);
        for ((sa, sg), (ca, cg)) in selfs.into_iter().zip(crosses) {
            rq = add(&rq, &matmul(&bar(sa, sg), &rq));
            let b = bar(ca, cg);
            let upd = match rule {
                CrossRule::Simple => b,
                CrossRule::Normalized => matmul(&row_normalized(&rq), &b),
            };
            cross = add(&cross, &upd);
        }
        cross
    } else {
        structural(record)
    };
    let text_to_patch = matmul(&text_to_query, &query_to_patch);
    OracleStep {
        text_to_query,
        query_to_patch,
        text_to_patch,
    }
}

/// Correctly rounded sum (Shewchuk's exact partials, as in Python's
/// `math.fsum`).
pub fn fsum(values: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &v in values {
        let mut x = v;
        let mut kept = 0;
        for i in 0..partials.len() {
            let mut y = partials[i];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    let mut hi = 0.0;
    if let Some(mut n) = partials.len().checked_sub(1) {
        hi = partials[n];
        let mut lo = 0.0;
        while n > 0 {
            n -= 1;
            let x = hi;
            let y = partials[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // half-way cases: round toward the sign of the next partial
        if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}
