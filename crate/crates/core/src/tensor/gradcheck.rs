//! Finite-difference verification of the backward pass.
//!
//! A case owns its input arrays and a closure that rebuilds the scalar loss
//! on a fresh graph. The checker compares analytic gradients against central
//! differences, coordinate by coordinate, rebuilding the graph for every
//! probe so the two paths share no state.

use rand::Rng;

use super::array::Array;
use super::graph::{Graph, TensorId};
use super::TensorError;
use crate::scalar::Scalar;
use crate::seed::derive_rng;

pub type BuildFn<T> = dyn Fn(&Graph<T>, &[TensorId]) -> Result<TensorId, TensorError>;

pub struct GradCheckCase<T> {
    pub name: String,
    pub inputs: Vec<Array<T>>,
    pub eps: f64,
    pub tol: f64,
    pub build: Box<BuildFn<T>>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Denominator floor for [`rel_error`]. Central differences at double
/// precision carry roundoff noise around 1e-12 absolute, so comparing
/// against anything smaller measures noise, not correctness. A gradient
/// that is wrongly zero still fails loudly down to 1e-10 magnitude.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Relative error with the denominator floored so near-zero pairs compare
/// absolutely.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval_loss<T: Scalar>(
    case: &GradCheckCase<T>,
    perturb: Option<(usize, usize, f64)>,
) -> Result<f64, TensorError> {
    let graph = Graph::new();
    let mut ids = Vec::with_capacity(case.inputs.len());
    for (i, input) in case.inputs.iter().enumerate() {
        let mut value = input.clone();
        if let Some((pi, pj, delta)) = perturb {
            if pi == i {
                let cur = value.data()[pj].as_f64();
                value.data_mut()[pj] = T::cast(cur + delta);
            }
        }
        ids.push(graph.param(value)?);
    }
    let loss = (case.build)(&graph, &ids)?;
    let v = graph.value(loss);
    if v.numel() != 1 {
        return Err(TensorError::NotScalar { op: "gradcheck", numel: v.numel() });
    }
    Ok(v.first().as_f64())
}

/// Checks one case, returning its worst coordinate error.
pub fn check_case<T: Scalar>(case: &GradCheckCase<T>) -> Result<GradCheckRow, TensorError> {
    let graph = Graph::new();
    let mut ids = Vec::with_capacity(case.inputs.len());
    for input in &case.inputs {
        ids.push(graph.param(input.clone())?);
    }
    let loss = (case.build)(&graph, &ids)?;
    let grads = graph.backward(loss)?;

    let mut max_err = 0.0f64;
    for (i, input) in case.inputs.iter().enumerate() {
        let analytic = grads.get(ids[i]).cloned();
        for j in 0..input.numel() {
            let fp = eval_loss(case, Some((i, j, case.eps)))?;
            let fm = eval_loss(case, Some((i, j, -case.eps)))?;
            let numeric = (fp - fm) / (2.0 * case.eps);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[j].as_f64());
            max_err = max_err.max(rel_error(a, numeric));
        }
    }
    Ok(GradCheckRow {
        name: case.name.clone(),
        max_rel_error: max_err,
        tol: case.tol,
        pass: max_err <= case.tol,
    })
}

/// Runs every case; an empty battery is a configuration error.
pub fn run_gradcheck<T: Scalar>(cases: &[GradCheckCase<T>]) -> Result<Vec<GradCheckRow>, TensorError> {
    if cases.is_empty() {
        return Err(TensorError::Invalid { op: "gradcheck", why: "empty case list".into() });
    }
    cases.iter().map(check_case).collect()
}

const BATTERY_SEED: u64 = 0x6e67_7261_6463; // arbitrary fixed battery seed

fn draw(label: &str, shape: &[usize], lo: f64, hi: f64) -> Array<f64> {
    let mut rng = derive_rng(BATTERY_SEED, label);
    Array::uniform(shape, lo, hi, &mut rng)
}

/// Magnitudes in [lo, hi] with random signs, keeping values away from the
/// kinks of relu/abs so finite differences stay valid.
fn draw_signed(label: &str, shape: &[usize], lo: f64, hi: f64) -> Array<f64> {
    let mut rng = derive_rng(BATTERY_SEED, label);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Array::from_vec(shape.to_vec(), data)
}

fn case(
    name: &str,
    inputs: Vec<Array<f64>>,
    tol: f64,
    build: impl Fn(&Graph<f64>, &[TensorId]) -> Result<TensorId, TensorError> + 'static,
) -> GradCheckCase<f64> {
    GradCheckCase { name: name.to_string(), inputs, eps: 1e-5, tol, build: Box::new(build) }
}

/// Weighted mean of an arbitrary tensor against the last input, producing a
/// scalar loss with O(1) gradient entries everywhere.
fn weighted_mean(g: &Graph<f64>, x: TensorId, w: TensorId) -> Result<TensorId, TensorError> {
    let prod = g.mul(x, w)?;
    g.mean_all(prod)
}

/// The standard per-op verification battery: every differentiable primitive
/// plus the composite blocks the fusion network chains them into.
pub fn engine_cases() -> Vec<GradCheckCase<f64>> {
    let mut cases = Vec::new();

    cases.push(case(
        "quadratic_form",
        vec![draw_signed("quadratic/x", &[3, 4], 0.2, 1.0)],
        1e-9,
        |g, ids| {
            let sq = g.mul(ids[0], ids[0])?;
            let s = g.sum_all(sq)?;
            g.scale(s, 0.5)
        },
    ));

    cases.push(case(
        "add",
        vec![
            draw_signed("add/x", &[2, 4, 4], 0.2, 1.0),
            draw_signed("add/y", &[2, 4, 4], 0.2, 1.0),
            draw_signed("add/w", &[2, 4, 4], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let s = g.add(ids[0], ids[1])?;
            weighted_mean(g, s, ids[2])
        },
    ));

    cases.push(case(
        "sub",
        vec![
            draw_signed("sub/x", &[2, 4, 4], 0.2, 1.0),
            draw_signed("sub/y", &[2, 4, 4], 0.2, 1.0),
            draw_signed("sub/w", &[2, 4, 4], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let s = g.sub(ids[0], ids[1])?;
            weighted_mean(g, s, ids[2])
        },
    ));

    cases.push(case(
        "mul",
        vec![
            draw_signed("mul/x", &[2, 4, 4], 0.2, 1.0),
            draw_signed("mul/y", &[2, 4, 4], 0.2, 1.0),
        ],
        1e-5,
        |g, ids| {
            let p = g.mul(ids[0], ids[1])?;
            g.mean_all(p)
        },
    ));

    cases.push(case(
        "scale",
        vec![
            draw_signed("scale/x", &[3, 4], 0.2, 1.0),
            draw_signed("scale/w", &[3, 4], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let s = g.scale(ids[0], -1.7)?;
            weighted_mean(g, s, ids[1])
        },
    ));

    cases.push(case(
        "relu",
        vec![
            draw_signed("relu/x", &[2, 5, 5], 0.2, 1.0),
            draw_signed("relu/w", &[2, 5, 5], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.relu(ids[0])?;
            weighted_mean(g, y, ids[1])
        },
    ));

    cases.push(case(
        "sigmoid",
        vec![
            draw_signed("sigmoid/x", &[2, 5, 5], 0.2, 2.0),
            draw_signed("sigmoid/w", &[2, 5, 5], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.sigmoid(ids[0])?;
            weighted_mean(g, y, ids[1])
        },
    ));

    cases.push(case(
        "sigmoid_chain",
        vec![
            draw_signed("sigchain/x", &[3, 3], 0.2, 1.5),
            draw_signed("sigchain/w", &[3, 3], 0.5, 1.5),
        ],
        1e-6,
        |g, ids| {
            let y = g.sigmoid(ids[0])?;
            let y = g.mul(y, ids[1])?;
            let y = g.sigmoid(y)?;
            g.mean_all(y)
        },
    ));

    cases.push(case(
        "abs",
        vec![
            draw_signed("abs/x", &[2, 5, 5], 0.2, 1.0),
            draw_signed("abs/w", &[2, 5, 5], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.abs(ids[0])?;
            weighted_mean(g, y, ids[1])
        },
    ));

    // Half the samples inside (0,1), half saturated well outside, all far
    // enough from the clamp corners that probes stay on one side.
    cases.push(case(
        "clamp01",
        vec![
            {
                let inner = draw("clamp/in", &[18], 0.05, 0.95);
                let outer = draw_signed("clamp/out", &[18], 1.1, 1.6);
                let mut data = inner.data().to_vec();
                data.extend_from_slice(outer.data());
                Array::from_vec(vec![36], data)
            },
            draw_signed("clamp/w", &[36], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.clamp01(ids[0])?;
            weighted_mean(g, y, ids[1])
        },
    ));

    cases.push(case(
        "mu_law",
        vec![
            draw("mulaw/x", &[3, 4, 4], 0.02, 0.98),
            draw_signed("mulaw/w", &[3, 4, 4], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.mu_law(ids[0], 5000.0)?;
            weighted_mean(g, y, ids[1])
        },
    ));

    cases.push(case(
        "sum_all",
        vec![draw_signed("sum/x", &[2, 4, 4], 0.2, 1.0)],
        1e-9,
        |g, ids| g.sum_all(ids[0]),
    ));

    cases.push(case(
        "mean_all",
        vec![draw_signed("mean/x", &[2, 4, 4], 0.2, 1.0)],
        1e-9,
        |g, ids| g.mean_all(ids[0]),
    ));

    cases.push(case(
        "matmul",
        vec![
            draw_signed("matmul/a", &[3, 4], 0.2, 1.0),
            draw_signed("matmul/b", &[4, 5], 0.2, 1.0),
            draw_signed("matmul/w", &[3, 5], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let p = g.matmul(ids[0], ids[1])?;
            weighted_mean(g, p, ids[2])
        },
    ));

    cases.push(case(
        "transpose",
        vec![
            draw_signed("transpose/a", &[3, 5], 0.2, 1.0),
            draw_signed("transpose/w", &[5, 3], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let t = g.transpose(ids[0])?;
            weighted_mean(g, t, ids[1])
        },
    ));

    cases.push(case(
        "softmax_rows",
        vec![
            draw_signed("softmax/x", &[4, 6], 0.2, 1.5),
            draw_signed("softmax/w", &[4, 6], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.softmax_rows(ids[0])?;
            weighted_mean(g, y, ids[1])
        },
    ));

    cases.push(case(
        "fully_connected",
        vec![
            draw_signed("fc/w", &[4, 6], 0.2, 1.0),
            draw_signed("fc/x", &[6], 0.2, 1.0),
            draw_signed("fc/b", &[4], 0.2, 1.0),
            draw_signed("fc/r", &[4], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.fully_connected(ids[0], ids[1], Some(ids[2]))?;
            weighted_mean(g, y, ids[3])
        },
    ));

    cases.push(case(
        "conv2d",
        vec![
            draw_signed("conv/x", &[3, 6, 6], 0.2, 1.0),
            draw_signed("conv/w", &[4, 3, 3, 3], 0.2, 1.0),
            draw_signed("conv/b", &[4], 0.2, 1.0),
            draw_signed("conv/r", &[4, 6, 6], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1)?;
            weighted_mean(g, y, ids[3])
        },
    ));

    cases.push(case(
        "conv2d_strided",
        vec![
            draw_signed("convs/x", &[2, 6, 6], 0.2, 1.0),
            draw_signed("convs/w", &[3, 2, 3, 3], 0.2, 1.0),
            draw_signed("convs/b", &[3], 0.2, 1.0),
            draw_signed("convs/r", &[3, 3, 3], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
            weighted_mean(g, y, ids[3])
        },
    ));

    cases.push(case(
        "conv2d_dilated",
        vec![
            draw_signed("convd/x", &[2, 7, 7], 0.2, 1.0),
            draw_signed("convd/w", &[2, 2, 3, 3], 0.2, 1.0),
            draw_signed("convd/r", &[2, 7, 7], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], None, 1, 2)?;
            weighted_mean(g, y, ids[2])
        },
    ));

    cases.push(case(
        "global_avg_pool",
        vec![
            draw_signed("gap/x", &[3, 6, 6], 0.2, 1.0),
            draw_signed("gap/w", &[3], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.global_avg_pool(ids[0])?;
            weighted_mean(g, y, ids[1])
        },
    ));

    cases.push(case(
        "scale_channels",
        vec![
            draw_signed("sc/x", &[3, 5, 5], 0.2, 1.0),
            draw_signed("sc/v", &[3], 0.2, 1.0),
            draw_signed("sc/w", &[3, 5, 5], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.scale_channels(ids[0], ids[1])?;
            weighted_mean(g, y, ids[2])
        },
    ));

    cases.push(case(
        "concat0",
        vec![
            draw_signed("cat/x", &[2, 4, 4], 0.2, 1.0),
            draw_signed("cat/y", &[3, 4, 4], 0.2, 1.0),
            draw_signed("cat/w", &[5, 4, 4], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.concat0(&[ids[0], ids[1]])?;
            weighted_mean(g, y, ids[2])
        },
    ));

    cases.push(case(
        "slice_channels",
        vec![
            draw_signed("slice/x", &[5, 4, 4], 0.2, 1.0),
            draw_signed("slice/w", &[3, 4, 4], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.slice_channels(ids[0], 1, 3)?;
            weighted_mean(g, y, ids[1])
        },
    ));

    cases.push(case(
        "unfold",
        vec![
            draw_signed("unfold/x", &[2, 6, 6], 0.2, 1.0),
            draw_signed("unfold/w", &[9, 8], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.unfold(ids[0], 2, 2)?;
            weighted_mean(g, y, ids[1])
        },
    ));

    cases.push(case(
        "unfold_overlapping",
        vec![
            draw_signed("unfoldo/x", &[1, 5, 5], 0.2, 1.0),
            draw_signed("unfoldo/w", &[9, 9], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.unfold(ids[0], 3, 1)?;
            weighted_mean(g, y, ids[1])
        },
    ));

    cases.push(case(
        "fold",
        vec![
            draw_signed("fold/t", &[9, 8], 0.2, 1.0),
            draw_signed("fold/w", &[2, 4, 4], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.fold(ids[0], 2, 4, 4, 2, 1)?;
            weighted_mean(g, y, ids[1])
        },
    ));

    cases.push(case(
        "fold_unnormalized",
        vec![
            draw_signed("foldu/t", &[9, 8], 0.2, 1.0),
            draw_signed("foldu/w", &[2, 4, 4], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.fold_unnormalized(ids[0], 2, 4, 4, 2, 1)?;
            weighted_mean(g, y, ids[1])
        },
    ));

    cases.push(case(
        "pixel_shuffle_up",
        vec![
            draw_signed("ps/x", &[8, 3, 3], 0.2, 1.0),
            draw_signed("ps/w", &[2, 6, 6], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.pixel_shuffle_up(ids[0], 2)?;
            weighted_mean(g, y, ids[1])
        },
    ));

    cases.push(case(
        "bilinear_upsample",
        vec![
            draw_signed("bilin/x", &[2, 3, 3], 0.2, 1.0),
            draw_signed("bilin/w", &[2, 6, 6], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.bilinear_upsample(ids[0], 2)?;
            weighted_mean(g, y, ids[1])
        },
    ));

    cases.push(case(
        "haar_dwt",
        vec![
            draw_signed("dwt/x", &[2, 4, 4], 0.2, 1.0),
            draw_signed("dwt/w", &[8, 2, 2], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let bands = g.haar_dwt(ids[0])?;
            let stacked = g.concat0(&bands)?;
            weighted_mean(g, stacked, ids[1])
        },
    ));

    cases.push(case(
        "haar_iwt",
        vec![
            draw_signed("iwt/ll", &[2, 3, 3], 0.2, 1.0),
            draw_signed("iwt/lh", &[2, 3, 3], 0.2, 1.0),
            draw_signed("iwt/hl", &[2, 3, 3], 0.2, 1.0),
            draw_signed("iwt/hh", &[2, 3, 3], 0.2, 1.0),
            draw_signed("iwt/w", &[2, 6, 6], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.haar_iwt([ids[0], ids[1], ids[2], ids[3]])?;
            weighted_mean(g, y, ids[4])
        },
    ));

    cases.push(case(
        "crop2d",
        vec![
            draw_signed("crop/x", &[2, 5, 5], 0.2, 1.0),
            draw_signed("crop/w", &[2, 3, 4], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.crop2d(ids[0], 3, 4)?;
            weighted_mean(g, y, ids[1])
        },
    ));

    // Token attention block as the fusion network wires it: projections,
    // additive-logit softmax, value aggregation, fold back to a map.
    cases.push(case(
        "attention_block",
        vec![
            draw_signed("attn/fr", &[2, 4, 4], 0.2, 1.0),
            draw_signed("attn/fn", &[2, 4, 4], 0.2, 1.0),
            draw_signed("attn/wq", &[8, 8], 0.2, 0.6),
            draw_signed("attn/wk", &[8, 8], 0.2, 0.6),
            draw_signed("attn/wv", &[8, 8], 0.2, 0.6),
            draw_signed("attn/w", &[2, 4, 4], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let qt = g.unfold(ids[0], 2, 2)?;
            let kt = g.unfold(ids[1], 2, 2)?;
            let q = g.matmul(qt, ids[2])?;
            let k = g.matmul(kt, ids[3])?;
            let v = g.matmul(kt, ids[4])?;
            let qk = g.add(q, k)?;
            let kt2 = g.transpose(k)?;
            let logits = g.matmul(qk, kt2)?;
            let logits = g.scale(logits, 1.0 / (8f64).sqrt())?;
            let a = g.softmax_rows(logits)?;
            let av = g.matmul(a, v)?;
            let folded = g.fold(av, 2, 4, 4, 2, 2)?;
            weighted_mean(g, folded, ids[5])
        },
    ));

    // Convolution feeding softmax across flattened responses, the other
    // composite called out by the verification contract.
    cases.push(case(
        "conv_softmax_block",
        vec![
            draw_signed("convsm/x", &[2, 4, 4], 0.2, 1.0),
            draw_signed("convsm/w", &[2, 2, 3, 3], 0.2, 0.8),
            draw_signed("convsm/r", &[4, 8], 0.5, 1.5),
        ],
        1e-5,
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], None, 1, 1)?;
            let t = g.unfold(y, 2, 2)?;
            let s = g.softmax_rows(t)?;
            weighted_mean(g, s, ids[2])
        },
    ));

    cases
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;
    use std::rc::Rc;

    #[test]
    fn battery_is_nonempty_and_names_are_unique() {
        let cases = engine_cases();
        assert!(cases.len() >= 25);
        let mut names: Vec<_> = cases.iter().map(|c| c.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), cases.len());
    }

    #[test]
    fn full_battery_passes() {
        for row in run_gradcheck(&engine_cases()).unwrap() {
            assert!(
                row.pass,
                "{}: max rel error {} exceeds {}",
                row.name, row.max_rel_error, row.tol
            );
        }
    }

    #[test]
    fn quadratic_case_passes_tightly() {
        let cases = engine_cases();
        let quad = cases.iter().find(|c| c.name == "quadratic_form").unwrap();
        let row = check_case(quad).unwrap();
        assert!(row.pass, "max rel error {}", row.max_rel_error);
    }

    #[test]
    fn empty_battery_is_an_error() {
        let cases: Vec<GradCheckCase<f64>> = Vec::new();
        assert!(run_gradcheck(&cases).is_err());
    }

    #[test]
    fn inconsistent_loss_function_is_flagged_by_name() {
        // The closure changes behavior after the first (analytic) build,
        // standing in for a corrupted backward rule.
        let calls = Rc::new(Cell::new(0usize));
        let calls_in = calls.clone();
        let case = GradCheckCase::<f64> {
            name: "corrupted_op".to_string(),
            inputs: vec![Array::from_vec(vec![2], vec![0.3, -0.7])],
            eps: 1e-5,
            tol: 1e-5,
            build: Box::new(move |g, ids| {
                let n = calls_in.get();
                calls_in.set(n + 1);
                let factor = if n == 0 { 1.0 } else { 2.0 };
                let s = g.scale(ids[0], factor)?;
                g.sum_all(s)
            }),
        };
        let row = check_case(&case).unwrap();
        assert!(!row.pass);
        assert_eq!(row.name, "corrupted_op");
        assert!(row.max_rel_error > 0.1);
    }
}
