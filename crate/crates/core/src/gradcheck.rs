//! Central finite-difference checks of the analytic gradients.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compressor::{plan_bins, PoolMode};
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

/// Elementwise relative error with the `1e-12` floor.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Max relative error between the analytic gradient of `target` with
/// respect to input `name` and its central difference with step `h`.
pub fn finite_diff_check(
    graph: &mut Graph,
    inputs: &Bindings,
    target: NodeId,
    name: &str,
    h: f64,
) -> Result<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    graph.forward(inputs)?;
    let analytic = graph
        .backward(target)?
        .input(name)
        .cloned()
        .ok_or_else(|| Error::UnboundInput(name.to_string()))?;
    let base = inputs
        .get(name)
        .ok_or_else(|| Error::UnboundInput(name.to_string()))?;

    let mut bindings = inputs.clone();
    let mut worst = 0.0f64;
    for k in 0..base.len() {
        let mut eval = |delta: f64| -> Result<f64> {
            let mut t = base.clone();
            t.data_mut()[k] += delta;
            bindings.insert(name.to_string(), t);
            graph.forward(&bindings)?;
            Ok(graph.value(target).expect("evaluated").data()[0])
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[k], numeric));
    }
    graph.forward(inputs)?;
    Ok(worst)
}

/// Same check for an intermediate node: the node's value is overridden
/// (cut from its operands) and perturbed in place.
pub fn finite_diff_check_node(
    graph: &mut Graph,
    inputs: &Bindings,
    target: NodeId,
    node: NodeId,
    h: f64,
) -> Result<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    graph.tap(node);
    graph.forward(inputs)?;
    let analytic = graph
        .backward(target)?
        .get(node)
        .cloned()
        .ok_or(Error::UnknownNode(node.index()))?;
    let base = graph.value(node).expect("evaluated").clone();

    let mut worst = 0.0f64;
    let mut overrides = HashMap::new();
    for k in 0..base.len() {
        let mut eval = |delta: f64| -> Result<f64> {
            let mut t = base.clone();
            t.data_mut()[k] += delta;
            overrides.insert(node, t);
            graph.forward_with_overrides(inputs, &overrides)?;
            Ok(graph.value(target).expect("evaluated").data()[0])
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[k], numeric));
    }
    graph.forward(inputs)?;
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// A self-contained check: a record, its bindings, the scalar target and
/// which input to differentiate.
struct Case {
    name: &'static str,
    graph: Graph,
    inputs: Bindings,
    target: NodeId,
    wrt: &'static str,
}

fn rand_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng)
}

/// Reduces a non-scalar node to a scalar through a fixed random weighting so
/// every output element contributes to the checked gradient.
fn weighted_sum(g: &mut Graph, node: NodeId, shape: &[usize], rng: &mut ChaCha8Rng) -> NodeId {
    let w = g.constant(rand_input(rng, shape));
    let p = g.mul(node, w);
    g.sum(p)
}

fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    macro_rules! case {
        ($name:expr, $wrt:expr, $build:expr) => {{
            let mut g = Graph::new();
            let mut inputs = Bindings::new();
            let build: &mut dyn FnMut(&mut Graph, &mut Bindings, &mut ChaCha8Rng) -> NodeId =
                &mut $build;
            let target = build(&mut g, &mut inputs, &mut rng);
            cases.push(Case {
                name: $name,
                graph: g,
                inputs,
                target,
                wrt: $wrt,
            });
        }};
    }

    fn inp(
        g: &mut Graph,
        b: &mut Bindings,
        rng: &mut ChaCha8Rng,
        name: &str,
        shape: &[usize],
    ) -> NodeId {
        b.insert(name.to_string(), rand_input(rng, shape));
        g.input(name, shape, true)
    }

    case!("matmul/lhs", "a", |g, b, r| {
        let a = inp(g, b, r, "a", &[3, 4]);
        let c = inp(g, b, r, "b", &[4, 2]);
        let y = g.matmul(a, c);
        weighted_sum(g, y, &[3, 2], r)
    });
    case!("matmul/rhs", "b", |g, b, r| {
        let a = inp(g, b, r, "a", &[3, 4]);
        let c = inp(g, b, r, "b", &[4, 2]);
        let y = g.matmul(a, c);
        weighted_sum(g, y, &[3, 2], r)
    });
    case!("transpose", "a", |g, b, r| {
        let a = inp(g, b, r, "a", &[3, 2]);
        let y = g.transpose(a);
        weighted_sum(g, y, &[2, 3], r)
    });
    case!("add", "a", |g, b, r| {
        let a = inp(g, b, r, "a", &[2, 3]);
        let c = inp(g, b, r, "b", &[2, 3]);
        let y = g.add(a, c);
        weighted_sum(g, y, &[2, 3], r)
    });
    case!("add_row/bias", "bias", |g, b, r| {
        let a = inp(g, b, r, "a", &[4, 3]);
        let c = inp(g, b, r, "bias", &[3]);
        let y = g.add_row(a, c);
        weighted_sum(g, y, &[4, 3], r)
    });
    case!("mul", "a", |g, b, r| {
        let a = inp(g, b, r, "a", &[2, 3]);
        let c = inp(g, b, r, "b", &[2, 3]);
        let y = g.mul(a, c);
        weighted_sum(g, y, &[2, 3], r)
    });
    case!("scale", "a", |g, b, r| {
        let a = inp(g, b, r, "a", &[5]);
        let y = g.scale(a, -0.7);
        weighted_sum(g, y, &[5], r)
    });
    case!("softmax", "a", |g, b, r| {
        let a = inp(g, b, r, "a", &[3, 5]);
        let y = g.softmax(a);
        weighted_sum(g, y, &[3, 5], r)
    });
    case!("causal_softmax", "a", |g, b, r| {
        let a = inp(g, b, r, "a", &[4, 4]);
        let m = g.causal_mask(a);
        let y = g.softmax(m);
        weighted_sum(g, y, &[4, 4], r)
    });
    case!("layer_norm/x", "x", |g, b, r| {
        let x = inp(g, b, r, "x", &[3, 6]);
        let ga = inp(g, b, r, "gamma", &[6]);
        let be = inp(g, b, r, "beta", &[6]);
        let y = g.layer_norm(x, ga, be);
        weighted_sum(g, y, &[3, 6], r)
    });
    case!("layer_norm/gamma", "gamma", |g, b, r| {
        let x = inp(g, b, r, "x", &[3, 6]);
        let ga = inp(g, b, r, "gamma", &[6]);
        let be = inp(g, b, r, "beta", &[6]);
        let y = g.layer_norm(x, ga, be);
        weighted_sum(g, y, &[3, 6], r)
    });
    case!("gelu", "a", |g, b, r| {
        let a = inp(g, b, r, "a", &[8]);
        let y = g.gelu(a);
        weighted_sum(g, y, &[8], r)
    });
    case!("embedding", "table", |g, b, r| {
        let t = inp(g, b, r, "table", &[5, 3]);
        let y = g.embedding(t, vec![4, 0, 4, 2]);
        weighted_sum(g, y, &[4, 3], r)
    });
    case!("reshape", "a", |g, b, r| {
        let a = inp(g, b, r, "a", &[2, 6]);
        let y = g.reshape(a, &[3, 4]);
        weighted_sum(g, y, &[3, 4], r)
    });
    case!("slice/cols", "a", |g, b, r| {
        let a = inp(g, b, r, "a", &[3, 5]);
        let y = g.slice(a, 1, 1..4);
        weighted_sum(g, y, &[3, 3], r)
    });
    case!("concat/rows", "b", |g, b, r| {
        let a = inp(g, b, r, "a", &[2, 3]);
        let c = inp(g, b, r, "b", &[1, 3]);
        let y = g.concat(vec![a, c], 0);
        weighted_sum(g, y, &[3, 3], r)
    });
    case!("element", "a", |g, b, r| {
        let a = inp(g, b, r, "a", &[3, 3]);
        let s = g.softmax(a);
        g.element(s, &[1, 2])
    });
    case!("mean", "a", |g, b, r| {
        let a = inp(g, b, r, "a", &[4, 2]);
        let sq = g.mul(a, a);
        g.mean(sq)
    });
    case!("pool/avg_overlap_6to4", "a", |g, b, r| {
        let a = inp(g, b, r, "a", &[36, 2]);
        let plan = Arc::new(plan_bins(6, 4).expect("valid plan"));
        let y = g.pool(a, plan, PoolMode::Avg);
        weighted_sum(g, y, &[16, 2], r)
    });
    case!("pool/max", "a", |g, b, r| {
        let a = inp(g, b, r, "a", &[16, 2]);
        let plan = Arc::new(plan_bins(4, 2).expect("valid plan"));
        let y = g.pool(a, plan, PoolMode::Max);
        weighted_sum(g, y, &[4, 2], r)
    });
    case!("cross_entropy", "logits", |g, b, r| {
        let l = inp(g, b, r, "logits", &[3, 6]);
        g.cross_entropy(l, vec![0, 5, 2])
    });
    cases
}

/// Checks every graph primitive on random inputs in `[-2, 2]`.
pub fn check_primitives(seed: u64, h: f64) -> Result<Vec<CheckReport>> {
    primitive_cases(seed)
        .into_iter()
        .map(|mut c| {
            let err = finite_diff_check(&mut c.graph, &c.inputs, c.target, c.wrt, h)?;
            Ok(CheckReport {
                name: format!("primitive/{}", c.name),
                max_rel_error: err,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(name: &str, t: Tensor) -> Bindings {
        [(name.to_string(), t)].into_iter().collect()
    }

    #[test]
    fn linear_map_is_exact() {
        let mut g = Graph::new();
        let x = g.input("x", &[3], true);
        let w = g.constant(Tensor::vector(vec![2.0, -1.0, 0.5]));
        let p = g.mul(x, w);
        let t = g.sum(p);
        for h in [1e-3, 1e-5, 0.1] {
            let err =
                finite_diff_check(&mut g, &bind("x", Tensor::vector(vec![1.0, 2.0, 3.0])), t, "x", h)
                    .unwrap();
            assert!(err < 1e-10, "h={h} err={err}");
        }
    }

    #[test]
    fn cube_at_one() {
        // d/dx x^3 = 3 at x = 1; central difference error is h^2 = 1e-10.
        let mut g = Graph::new();
        let x = g.input("x", &[], true);
        let sq = g.mul(x, x);
        let cube = g.mul(sq, x);
        let err = finite_diff_check(&mut g, &bind("x", Tensor::scalar(1.0)), cube, "x", 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn every_primitive_within_tolerance() {
        for seed in 0..3 {
            for r in check_primitives(seed, DEFAULT_STEP).unwrap() {
                assert!(r.passed(DEFAULT_TOLERANCE), "{} seed {seed}: {}", r.name, r.max_rel_error);
            }
        }
    }

    #[test]
    fn tap_gradient_equals_cut_graph_input() {
        // Gradient retained at an intermediate node equals the gradient of the
        // same computation when that node's value is fed in as a fresh input.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xv = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let wv = Tensor::uniform(&[4, 4], -2.0, 2.0, &mut rng);
        let cv = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);

        let mut g = Graph::new();
        let x = g.input("x", &[3, 4], true);
        let w = g.constant(wv.clone());
        let h = g.matmul(x, w);
        let a = g.softmax(h);
        g.tap(a);
        let c = g.constant(cv.clone());
        let p = g.mul(a, c);
        let e = g.gelu(p);
        let t = g.sum(e);
        g.forward(&bind("x", xv)).unwrap();
        let tapped = g.backward(t).unwrap().get(a).unwrap().clone();
        let a_val = g.value(a).unwrap().clone();

        let mut cut = Graph::new();
        let a2 = cut.input("a", &[3, 4], true);
        let c2 = cut.constant(cv);
        let p2 = cut.mul(a2, c2);
        let e2 = cut.gelu(p2);
        let t2 = cut.sum(e2);
        cut.forward(&bind("a", a_val)).unwrap();
        let fresh = cut.backward(t2).unwrap().input("a").unwrap().clone();
        assert_eq!(tapped, fresh);
    }
}
