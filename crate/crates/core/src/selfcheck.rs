//! The gradient self-check suite: finite-difference checks of every
//! primitive, block, loss and a tiny full network, in double precision.

use std::fmt::Write as _;

use crate::autodiff::{BatchNormConfig, Conv2dOptions, Graph, RunningStats, Var};
use crate::error::Result;
use crate::gradcheck::{check_with, project, random_tensor, GradcheckOutcome};
use crate::loss::{cce, dice_loss, hybrid_loss, wbce, ClassWeights, HybridLossConfig, WeightMode, DICE_SMOOTH};
use crate::model::{ModelConfig, OcuNet};
use crate::nn::{
    Aspp, BlockConfig, Builder, ConvBnLReLU, CsafModule, Forward, ParamStore, ResidualBlock,
    SeBlock, SkipChain,
};
use crate::tensor::Tensor;

/// A unit passes when its max relative error is at most this.
pub const PASS_TOLERANCE: f64 = 1e-3;
/// Stricter target for primitives, blocks and losses.
pub const UNIT_TARGET: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Primitive,
    Block,
    Loss,
    Model,
}

impl UnitKind {
    pub fn target(self) -> f64 {
        match self {
            UnitKind::Model => PASS_TOLERANCE,
            _ => UNIT_TARGET,
        }
    }

    fn label(self) -> &'static str {
        match self {
            UnitKind::Primitive => "primitive",
            UnitKind::Block => "block",
            UnitKind::Loss => "loss",
            UnitKind::Model => "model",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    /// Coordinates probed per unit.
    pub probes: usize,
    pub seed: u64,
    /// Tape op whose backward is negated, to prove failures are caught.
    pub fault: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            probes: 60,
            seed: 7,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnitResult {
    pub name: &'static str,
    pub kind: UnitKind,
    pub target: f64,
    /// `Err` holds the message of a check that could not run.
    pub outcome: std::result::Result<GradcheckOutcome, String>,
}

impl UnitResult {
    pub fn passed(&self) -> bool {
        matches!(&self.outcome, Ok(o) if o.max_rel_error <= PASS_TOLERANCE)
    }

    pub fn met_target(&self) -> bool {
        matches!(&self.outcome, Ok(o) if o.max_rel_error <= self.target)
    }
}

type Prepare<'a> = &'a dyn Fn(&Graph<f64>);
type UnitFn = fn(&SuiteOptions, Prepare<'_>) -> Result<GradcheckOutcome>;

struct Unit {
    name: &'static str,
    kind: UnitKind,
    run: UnitFn,
}

fn x_nhwc(seed: u64) -> Tensor<f64> {
    random_tensor(&[2, 4, 4, 3], seed)
}

/// Checks `op` applied to one random input, reduced by a fixed projection.
fn unary(
    o: &SuiteOptions,
    p: Prepare<'_>,
    input: Tensor<f64>,
    op: impl Fn(&Graph<f64>, Var) -> Result<Var>,
) -> Result<GradcheckOutcome> {
    let seed = o.seed;
    check_with(&[input], o.probes, seed, p, |g, v| {
        let y = op(g, v[0])?;
        project(g, y, seed)
    })
}

/// Builds a block into a fresh store and checks it with respect to its input
/// and every parameter, in training mode.
fn block<B>(
    o: &SuiteOptions,
    p: Prepare<'_>,
    input: Tensor<f64>,
    build: impl Fn(&mut Builder<'_, f64>) -> Result<B>,
    forward: impl Fn(&B, &Forward<'_, f64>, Var) -> Result<Var>,
) -> Result<GradcheckOutcome> {
    let mut store = ParamStore::new();
    let b = build(&mut Builder::new(&mut store, o.seed))?;
    let mut inputs = vec![input];
    inputs.extend(store.ids().map(|id| store.get(id).clone()));
    let seed = o.seed;
    check_with(&inputs, o.probes, seed, p, |g, v| {
        let f = Forward::bound(g, &store, true, &v[1..])?;
        let y = forward(&b, &f, v[0])?;
        project(g, y, seed)
    })
}

/// Probabilities kept away from the clamp bounds.
fn probabilities(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, seed).map(|v| 0.5 + 0.4 * v)
}

fn binary_target(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, seed).map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

fn onehot_target(pixels: usize, classes: usize, seed: u64) -> Tensor<f64> {
    let r = random_tensor(&[pixels], seed);
    let mut data = vec![0.0; pixels * classes];
    for (i, v) in r.data().iter().enumerate() {
        let c = (((v + 1.0) / 2.0 * classes as f64) as usize).min(classes - 1);
        data[i * classes + c] = 1.0;
    }
    Tensor::new(&[pixels, classes], data).expect("valid shape")
}

const CFG: BlockConfig = BlockConfig {
    leaky_slope: 0.3,
    batch_norm: BatchNormConfig {
        epsilon: 1e-3,
        momentum: 0.99,
    },
    se_ratio: None,
};

fn units() -> Vec<Unit> {
    use UnitKind::*;
    vec![
        Unit {
            name: "add (broadcast)",
            kind: Primitive,
            run: |o, p| {
                let s = o.seed;
                check_with(&[x_nhwc(s), random_tensor(&[1, 1, 4, 3], s + 1)], o.probes, s, p, |g, v| {
                    let y = g.add(v[0], v[1])?;
                    project(g, y, s)
                })
            },
        },
        Unit {
            name: "mul (broadcast)",
            kind: Primitive,
            run: |o, p| {
                let s = o.seed;
                check_with(&[x_nhwc(s), random_tensor(&[2, 1, 1, 3], s + 1)], o.probes, s, p, |g, v| {
                    let y = g.mul(v[0], v[1])?;
                    project(g, y, s)
                })
            },
        },
        Unit {
            name: "dense",
            kind: Primitive,
            run: |o, p| {
                let s = o.seed;
                let inputs = [
                    random_tensor(&[3, 5], s),
                    random_tensor(&[5, 4], s + 1),
                    random_tensor(&[4], s + 2),
                ];
                check_with(&inputs, o.probes, s, p, |g, v| {
                    let y = g.dense(v[0], v[1], Some(v[2]))?;
                    project(g, y, s)
                })
            },
        },
        Unit {
            name: "conv2d (3x3, dilation 2)",
            kind: Primitive,
            run: |o, p| {
                let s = o.seed;
                let inputs = [
                    random_tensor(&[2, 6, 5, 3], s),
                    random_tensor(&[3, 3, 3, 2], s + 1),
                    random_tensor(&[2], s + 2),
                ];
                check_with(&inputs, o.probes, s, p, |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), Conv2dOptions::dilated(2))?;
                    project(g, y, s)
                })
            },
        },
        Unit {
            name: "batch_norm (training)",
            kind: Primitive,
            run: |o, p| {
                let s = o.seed;
                let inputs = [x_nhwc(s), random_tensor(&[3], s + 1), random_tensor(&[3], s + 2)];
                check_with(&inputs, o.probes, s, p, |g, v| {
                    let stats = RunningStats::new(3);
                    let (y, _) = g.batch_norm(v[0], v[1], v[2], &stats, true, BatchNormConfig::default())?;
                    project(g, y, s)
                })
            },
        },
        Unit {
            name: "leaky_relu",
            kind: Primitive,
            run: |o, p| unary(o, p, x_nhwc(o.seed), |g, x| g.leaky_relu(x, 0.3)),
        },
        Unit {
            name: "sigmoid",
            kind: Primitive,
            run: |o, p| unary(o, p, x_nhwc(o.seed), |g, x| Ok(g.sigmoid(x))),
        },
        Unit {
            name: "softmax",
            kind: Primitive,
            run: |o, p| unary(o, p, x_nhwc(o.seed), |g, x| Ok(g.softmax(x))),
        },
        Unit {
            name: "max_pool2",
            kind: Primitive,
            run: |o, p| unary(o, p, x_nhwc(o.seed), |g, x| g.max_pool2(x)),
        },
        Unit {
            name: "global_avg_pool",
            kind: Primitive,
            run: |o, p| unary(o, p, x_nhwc(o.seed), |g, x| g.global_avg_pool(x)),
        },
        Unit {
            name: "channel_max",
            kind: Primitive,
            run: |o, p| unary(o, p, x_nhwc(o.seed), |g, x| g.channel_max(x)),
        },
        Unit {
            name: "upsample2x",
            kind: Primitive,
            run: |o, p| unary(o, p, x_nhwc(o.seed), |g, x| g.upsample2x(x)),
        },
        Unit {
            name: "concat + slice_channels",
            kind: Primitive,
            run: |o, p| {
                let s = o.seed;
                check_with(&[x_nhwc(s), random_tensor(&[2, 4, 4, 2], s + 1)], o.probes, s, p, |g, v| {
                    let c = g.concat(&[v[0], v[1]])?;
                    let y = g.slice_channels(c, 2, 3)?;
                    project(g, y, s)
                })
            },
        },
        Unit {
            name: "ConvBnLReLU",
            kind: Block,
            run: |o, p| {
                block(
                    o,
                    p,
                    x_nhwc(o.seed),
                    |b| Ok(ConvBnLReLU::new(b, "cbr", 3, 4, 3, &CFG)),
                    |m, f, x| m.forward(f, x),
                )
            },
        },
        Unit {
            name: "SE block",
            kind: Block,
            run: |o, p| {
                block(
                    o,
                    p,
                    random_tensor(&[2, 4, 4, 8], o.seed),
                    |b| Ok(SeBlock::new(b, "se", 8, &CFG)),
                    |m, f, x| m.forward(f, x),
                )
            },
        },
        Unit {
            name: "CSAF module",
            kind: Block,
            run: |o, p| {
                block(
                    o,
                    p,
                    random_tensor(&[2, 6, 6, 4], o.seed),
                    |b| Ok(CsafModule::new(b, "csaf", 4, (6, 6), &CFG)),
                    |m, f, x| m.forward(f, x),
                )
            },
        },
        Unit {
            name: "residual block",
            kind: Block,
            run: |o, p| {
                block(
                    o,
                    p,
                    random_tensor(&[2, 4, 4, 4], o.seed),
                    |b| Ok(ResidualBlock::new(b, "res", 4, &CFG)),
                    |m, f, x| m.forward(f, x),
                )
            },
        },
        Unit {
            name: "skip chain (level 3)",
            kind: Block,
            run: |o, p| {
                block(
                    o,
                    p,
                    random_tensor(&[2, 4, 4, 4], o.seed),
                    |b| SkipChain::new(b, "skip", 4, 3, &CFG),
                    |m, f, x| m.forward(f, x),
                )
            },
        },
        Unit {
            name: "ASPP",
            kind: Block,
            run: |o, p| {
                block(
                    o,
                    p,
                    random_tensor(&[2, 4, 4, 3], o.seed),
                    |b| Aspp::new(b, "aspp", 3, 4, &[1, 2, 3], &CFG),
                    |m, f, x| m.forward(f, x),
                )
            },
        },
        Unit {
            name: "CCE loss",
            kind: Loss,
            run: |o, p| {
                let t = onehot_target(8, 3, o.seed + 1);
                check_with(&[probabilities(&[8, 3], o.seed)], o.probes, o.seed, p, |g, v| cce(g, v[0], &t))
            },
        },
        Unit {
            name: "WBCE loss",
            kind: Loss,
            run: |o, p| {
                let t = binary_target(&[12], o.seed + 1);
                let w = ClassWeights::new(vec![0.6, 1.7]).expect("valid weights");
                check_with(&[probabilities(&[12], o.seed)], o.probes, o.seed, p, |g, v| {
                    wbce(g, v[0], &t, &w, WeightMode::Literal)
                })
            },
        },
        Unit {
            name: "Dice loss",
            kind: Loss,
            run: |o, p| {
                let t = binary_target(&[12], o.seed + 1);
                check_with(&[probabilities(&[12], o.seed)], o.probes, o.seed, p, |g, v| {
                    dice_loss(g, v[0], &t, DICE_SMOOTH)
                })
            },
        },
        Unit {
            name: "hybrid loss",
            kind: Loss,
            run: |o, p| {
                let t = binary_target(&[12], o.seed + 1);
                let w = ClassWeights::new(vec![0.6, 1.7]).expect("valid weights");
                let cfg = HybridLossConfig {
                    alpha: 0.4,
                    weight_mode: WeightMode::Symmetric,
                    ..HybridLossConfig::default()
                };
                check_with(&[probabilities(&[12], o.seed)], o.probes, o.seed, p, |g, v| {
                    hybrid_loss(g, &cfg, v[0], &t, &w)
                })
            },
        },
        Unit {
            name: "OCU-Net (tiny)",
            kind: Model,
            run: |o, p| {
                let config = ModelConfig::tiny(2, 16, 3);
                let mut store = ParamStore::new();
                let net = OcuNet::build(&config, &mut store, o.seed)?;
                let mut inputs = vec![random_tensor(&[1, 16, 16, 3], o.seed)];
                inputs.extend(store.ids().map(|id| store.get(id).clone()));
                let seed = o.seed;
                check_with(&inputs, o.probes, seed, p, |g, v| {
                    let f = Forward::bound(g, &store, true, &v[1..])?;
                    let y = net.forward(&f, v[0])?;
                    project(g, y, seed)
                })
            },
        },
    ]
}

/// Number of units [`run_suite`] checks.
pub fn unit_count() -> usize {
    units().len()
}

pub fn run_suite(opts: &SuiteOptions) -> Vec<UnitResult> {
    let fault = opts.fault.clone();
    let prepare = move |g: &Graph<f64>| {
        if let Some(op) = &fault {
            g.inject_sign_fault(op);
        }
    };
    units()
        .into_iter()
        .map(|u| UnitResult {
            name: u.name,
            kind: u.kind,
            target: u.kind.target(),
            outcome: (u.run)(opts, &prepare).map_err(|e| e.to_string()),
        })
        .collect()
}

pub fn render(results: &[UnitResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:<10} {:>12} {:>7} {:>7}  result",
        "unit", "kind", "max rel err", "target", "probes"
    );
    for r in results {
        let (err, probes) = match &r.outcome {
            Ok(o) => (format!("{:.3e}", o.max_rel_error), o.probes.to_string()),
            Err(_) => ("-".into(), "-".into()),
        };
        let _ = write!(
            out,
            "{:<28} {:<10} {:>12} {:>7.0e} {:>7}  {}",
            r.name,
            r.kind.label(),
            err,
            r.target,
            probes,
            match (r.passed(), r.met_target()) {
                (true, true) => "PASS",
                (true, false) => "PASS (above target)",
                _ => "FAIL",
            }
        );
        if let Err(msg) = &r.outcome {
            let _ = write!(out, " ({msg})");
        }
        out.push('\n');
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        let _ = writeln!(
            out,
            "all {} units passed (max relative error <= {PASS_TOLERANCE:.0e})",
            results.len()
        );
    } else {
        let _ = writeln!(out, "{} of {} units failed: {}", failed.len(), results.len(), failed.join(", "));
    }
    out
}
