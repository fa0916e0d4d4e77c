//! Training losses over predicted probabilities.
//!
//! Each loss is a single tape node with a hand-written gradient with respect
//! to the prediction; targets are plain tensors.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to `[LOG_EPS, 1 - LOG_EPS]` before any log.
pub const LOG_EPS: f64 = 1e-7;

/// Default smoothing for the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1e-6;

/// Nonnegative class (or pixel) weights for weighted binary cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!(
                "class weights must be finite and nonnegative, got {values:?}"
            )));
        }
        if values.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid("at least one class weight must be positive"));
        }
        Ok(Self(values))
    }

    /// `[background, foreground]` both 1.
    pub fn uniform() -> Self {
        Self(vec![1.0, 1.0])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// How WBCE applies its weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// Only the positive term is weighted.
    #[default]
    Literal,
    /// Both terms are weighted by the weight of the pixel's class.
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HybridLossConfig {
    pub alpha: f64,
    pub smooth: f64,
    pub weight_mode: WeightMode,
}

impl Default for HybridLossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            smooth: DICE_SMOOTH,
            weight_mode: WeightMode::Literal,
        }
    }
}

impl HybridLossConfig {
    pub fn with_alpha(alpha: f64) -> Result<Self> {
        let cfg = Self {
            alpha,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "hybrid alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.smooth >= 0.0) {
            return Err(Error::invalid("dice smoothing must be nonnegative"));
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(op: &'static str, pred: &Tensor<T>, truth: &Tensor<T>) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(op, pred.shape(), truth.shape()));
    }
    Ok(())
}

/// `(clamped p, d clamp / d p)`
fn clamp<T: Scalar>(p: T) -> (T, T) {
    let lo = T::from_f64(LOG_EPS);
    let hi = T::one() - lo;
    if p < lo {
        (lo, T::zero())
    } else if p > hi {
        (hi, T::zero())
    } else {
        (p, T::one())
    }
}

/// Categorical cross-entropy, averaged over pixels. `y_true` is one-hot over
/// the last axis.
pub fn cce<T: Scalar>(g: &Graph<T>, y_pred: Var, y_true: &Tensor<T>) -> Result<Var> {
    let pred = g.value(y_pred);
    same_shape("cce", &pred, y_true)?;
    let c = *pred.shape().last().expect("non-empty shape");
    let pixels = T::from_f64((pred.len() / c) as f64);
    let mut total = T::zero();
    for (&p, &t) in pred.data().iter().zip(y_true.data()) {
        if t != T::zero() {
            total -= t * clamp(p).0.ln();
        }
    }
    let truth = y_true.clone();
    Ok(g.record(
        "cce",
        Tensor::scalar(total / pixels),
        &[y_pred],
        Box::new(move |go| {
            let scale = go[0] / pixels;
            let grad = pred
                .data()
                .iter()
                .zip(truth.data())
                .map(|(&p, &t)| {
                    let (pc, d) = clamp(p);
                    -scale * t * d / pc
                })
                .collect();
            vec![Some(grad)]
        }),
    ))
}

/// Weighted binary cross-entropy over `N` probabilities.
///
/// `weights` holds either two class weights `[background, foreground]` or one
/// weight per pixel. In [`WeightMode::Literal`] the weight multiplies only the
/// `y·log p` term.
pub fn wbce<T: Scalar>(
    g: &Graph<T>,
    y_pred: Var,
    y_true: &Tensor<T>,
    weights: &ClassWeights,
    mode: WeightMode,
) -> Result<Var> {
    let pred = g.value(y_pred);
    same_shape("wbce", &pred, y_true)?;
    let n = pred.len();
    let w = weights.values();
    if w.len() != 2 && w.len() != n {
        return Err(Error::invalid(format!(
            "wbce needs 2 class weights or {n} pixel weights, got {}",
            w.len()
        )));
    }
    // With exactly two pixels, two weights are read as class weights.
    let per_pixel = w.len() != 2;
    let weight_of = move |i: usize, positive: bool| -> f64 {
        if per_pixel {
            w[i]
        } else if positive {
            w[1]
        } else {
            w[0]
        }
    };
    // Per-pixel (positive-term weight, negative-term weight).
    let coeffs: Vec<(T, T)> = y_true
        .data()
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let wi = weight_of(i, t > T::from_f64(0.5));
            let neg = match mode {
                WeightMode::Literal => 1.0,
                WeightMode::Symmetric => wi,
            };
            (T::from_f64(wi), T::from_f64(neg))
        })
        .collect();

    let nf = T::from_f64(n as f64);
    let mut total = T::zero();
    for ((&p, &t), &(wp, wn)) in pred.data().iter().zip(y_true.data()).zip(&coeffs) {
        let (pc, _) = clamp(p);
        let (qc, _) = clamp(T::one() - p);
        total += wp * t * pc.ln() + wn * (T::one() - t) * qc.ln();
    }
    let truth = y_true.clone();
    Ok(g.record(
        "wbce",
        Tensor::scalar(-total / nf),
        &[y_pred],
        Box::new(move |go| {
            let scale = go[0] / nf;
            let grad = pred
                .data()
                .iter()
                .zip(truth.data())
                .zip(&coeffs)
                .map(|((&p, &t), &(wp, wn))| {
                    let (pc, dp) = clamp(p);
                    let (qc, dq) = clamp(T::one() - p);
                    -scale * (wp * t * dp / pc - wn * (T::one() - t) * dq / qc)
                })
                .collect();
            vec![Some(grad)]
        }),
    ))
}

/// Soft Dice loss `1 - (2Σtp + s) / (Σt + Σp + s)`.
pub fn dice_loss<T: Scalar>(g: &Graph<T>, y_pred: Var, y_true: &Tensor<T>, smooth: f64) -> Result<Var> {
    let pred = g.value(y_pred);
    same_shape("dice_loss", &pred, y_true)?;
    if !(smooth >= 0.0) {
        return Err(Error::invalid("dice smoothing must be nonnegative"));
    }
    let s = T::from_f64(smooth);
    let two = T::from_f64(2.0);
    let inter: T = pred.data().iter().zip(y_true.data()).map(|(&p, &t)| p * t).sum();
    let union = pred.sum() + y_true.sum();
    let num = two * inter + s;
    let den = union + s;
    let loss = if den == T::zero() {
        // s = 0 with empty prediction and truth: perfect agreement.
        T::zero()
    } else {
        T::one() - num / den
    };
    let truth = y_true.clone();
    Ok(g.record(
        "dice_loss",
        Tensor::scalar(loss),
        &[y_pred],
        Box::new(move |go| {
            if den == T::zero() {
                return vec![Some(vec![T::zero(); truth.len()])];
            }
            let den2 = den * den;
            let grad = truth
                .data()
                .iter()
                .map(|&t| -go[0] * (two * t * den - num) / den2)
                .collect();
            vec![Some(grad)]
        }),
    ))
}

/// `alpha · wbce + (1 - alpha) · dice_loss`.
pub fn hybrid_loss<T: Scalar>(
    g: &Graph<T>,
    cfg: &HybridLossConfig,
    y_pred: Var,
    y_true: &Tensor<T>,
    weights: &ClassWeights,
) -> Result<Var> {
    cfg.validate()?;
    let lw = wbce(g, y_pred, y_true, weights, cfg.weight_mode)?;
    let ld = dice_loss(g, y_pred, y_true, cfg.smooth)?;
    let a = g.scale(lw, cfg.alpha);
    let b = g.scale(ld, 1.0 - cfg.alpha);
    g.add(a, b)
}

/// Training objective selected per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossConfig {
    /// Multi-class softmax head.
    Cce,
    /// Binary sigmoid head.
    Hybrid {
        #[serde(flatten)]
        config: HybridLossConfig,
        /// Derived from training-split class frequencies when absent.
        weights: Option<ClassWeights>,
    },
}

impl LossConfig {
    pub fn for_classes(num_classes: usize) -> Self {
        if num_classes >= 2 {
            LossConfig::Cce
        } else {
            LossConfig::Hybrid {
                config: HybridLossConfig::default(),
                weights: None,
            }
        }
    }
}
