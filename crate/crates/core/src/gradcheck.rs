//! Central finite-difference gradient checks in double precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Perturbation for central differences.
pub const STEP: f64 = 1e-5;

/// Smaller steps tried when a probe disagrees at [`STEP`]. A perturbation
/// that straddles a kink (max-pool or channel-max switch, leaky-ReLU at 0)
/// corrupts the central difference; a wrong gradient disagrees at every step.
pub const REFINE_STEPS: [f64; 2] = [1e-6, 1e-7];

/// Probes with a relative error above this are retried with [`REFINE_STEPS`].
pub const REFINE_ABOVE: f64 = 1e-6;

/// Gradients smaller than this (times `max(1, |f(x)|)`) are compared on an
/// absolute scale: central differences of a large output carry roundoff of
/// order `ε·|f| / STEP`, so exact zeros would otherwise read as errors.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOutcome {
    pub max_rel_error: f64,
    pub probes: usize,
    /// `(input index, flat offset)` of the worst probe.
    pub worst: (usize, usize),
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_FLOOR)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `f` with central differences.
///
/// `f` builds a scalar from `inputs` on the provided graph. Up to `probes`
/// coordinates, drawn uniformly over all inputs with `seed`, are perturbed by
/// ±[`STEP`]; every coordinate is probed when there are fewer.
pub fn check<F>(inputs: &[Tensor<f64>], probes: usize, seed: u64, f: F) -> Result<GradcheckOutcome>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    check_with(inputs, probes, seed, |_| {}, f)
}

/// Like [`check`], with a hook that configures the analytic-pass graph
/// (used for fault injection).
pub fn check_with<F, P>(
    inputs: &[Tensor<f64>],
    probes: usize,
    seed: u64,
    prepare: P,
    f: F,
) -> Result<GradcheckOutcome>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
    P: Fn(&Graph<f64>),
{
    let graph = Graph::new();
    prepare(&graph);
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = f(&graph, &vars)?;
    let floor = REL_FLOOR * graph.value(out).data()[0].abs().max(1.0);
    let grads = graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if total <= probes {
        (0..total).collect()
    } else {
        let mut picks = sample(&mut rng, total, probes).into_vec();
        picks.sort_unstable();
        picks
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut outcome = GradcheckOutcome {
        max_rel_error: 0.0,
        probes: chosen.len(),
        worst: (0, 0),
    };
    for flat in chosen {
        let (which, offset) = locate(inputs, flat);
        let original = work[which].data()[offset];
        let mut central = |h: f64| -> Result<f64> {
            work[which].data_mut()[offset] = original + h;
            let plus = eval(&work)?;
            work[which].data_mut()[offset] = original - h;
            let minus = eval(&work)?;
            work[which].data_mut()[offset] = original;
            Ok((plus - minus) / (2.0 * h))
        };

        let a = analytic[which][offset];
        let mut err = relative_error_floored(a, central(STEP)?, floor);
        for h in REFINE_STEPS {
            if !(err > REFINE_ABOVE) {
                break;
            }
            err = err.min(relative_error_floored(a, central(h)?, floor));
        }
        if !err.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradcheck probe {which}:{offset}"
            )));
        }
        if err > outcome.max_rel_error {
            outcome.max_rel_error = err;
            outcome.worst = (which, offset);
        }
    }
    Ok(outcome)
}

fn locate(inputs: &[Tensor<f64>], mut flat: usize) -> (usize, usize) {
    for (i, t) in inputs.iter().enumerate() {
        if flat < t.len() {
            return (i, flat);
        }
        flat -= t.len();
    }
    unreachable!("probe index beyond inputs")
}

/// Fixed random projection weights so a tensor output reduces to a scalar
/// with a non-degenerate gradient (a plain sum is invariant under
/// normalization layers).
pub fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("valid projection shape")
}

/// `Σ r ⊙ y` for a fixed random `r` matching `y`'s shape.
pub fn project(graph: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = graph.constant(projection(&graph.shape(y), seed));
    let prod = graph.mul(y, r)?;
    Ok(graph.sum(prod))
}

/// Random tensor with entries in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("valid random shape")
}
