//! Central finite-difference checks of every differentiable operation, run
//! in `f64`.
//!
//! Each case reduces an operation's output to a scalar with fixed
//! pseudo-random weights, so every output element contributes to the
//! gradient with a distinct coefficient. Coordinates where the ε and ε/2
//! difference quotients disagree sit on a kink (ReLU at zero, a max-pool
//! tie, a bilinear cell boundary) and are skipped; a case fails if more than
//! a quarter of its coordinates are skipped.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result, TensorError};
use crate::layers::{Binding, Parameters};
use crate::model::{ArchConfig, FrameSequence, ModelVariant, SrModel, WarpPredictor};
use crate::perceptual::{total_loss, FeatureNetwork, LossMode, LossWeights};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tps::{self, ControlGrid, TpsSystem, WarpBasis};
use crate::training::collect_grads;

pub const EPSILON: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
const DENOMINATOR_FLOOR: f64 = 1e-8;
/// Coordinates checked per tensor; larger tensors are subsampled.
const COORDS_PER_TENSOR: usize = 24;
const MAX_SKIPPED_FRACTION: f64 = 0.25;

pub const MODULES: [&str; 5] = ["tensor_autodiff", "nn_layers", "tps_warp", "sr_networks", "perceptual_loss"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub op: &'static str,
    pub module: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && (self.skipped as f64) <= MAX_SKIPPED_FRACTION * (self.checked + self.skipped) as f64
    }
}

impl fmt::Display for CheckResult {
    /// One tab-separated line: op, module, worst error, checked, skipped, verdict.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:.3e}\t{}\t{}\t{}",
            self.op,
            self.module,
            self.max_rel_err,
            self.checked,
            self.skipped,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOMINATOR_FLOOR)
}

/// Plain input tensors plus whatever constant context an operation needs.
struct Inputs {
    tensors: Vec<Tensor<f64>>,
    basis: Option<WarpBasis<f64>>,
    net: Option<FeatureNetwork<f64>>,
    target: Option<Tensor<f64>>,
}

impl Inputs {
    fn new(tensors: Vec<Tensor<f64>>) -> Self {
        Self {
            tensors,
            basis: None,
            net: None,
            target: None,
        }
    }
}

impl Parameters<f64> for Inputs {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<f64>)) {
        for (i, t) in self.tensors.iter().enumerate() {
            f(format!("{prefix}in{i}"), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<f64>)) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            f(format!("{prefix}in{i}"), t);
        }
    }
}

struct PredictorCase {
    predictor: WarpPredictor<f64>,
    reference: Tensor<f64>,
    moving: Tensor<f64>,
}

impl Parameters<f64> for PredictorCase {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<f64>)) {
        self.predictor.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<f64>)) {
        self.predictor.visit_mut(prefix, f)
    }
}

struct ModelCase {
    model: SrModel<f64>,
    seq: FrameSequence<f64>,
    target: Tensor<f64>,
}

impl Parameters<f64> for ModelCase {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<f64>)) {
        self.model.params.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<f64>)) {
        self.model.params.visit_mut(prefix, f)
    }
}

/// Fixed reduction weights in [−1, 1], a function of position only.
fn reduction_weights(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| {
        let h = (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 40;
        (h as f64 / (1u64 << 24) as f64) * 2.0 - 1.0
    })
}

/// Passes values through unchanged but scales the gradient by 1.5.
fn corrupt<'a>(tape: &mut Tape<'a, f64>, y: Var) -> Result<Var, TensorError> {
    let value = tape.value(y).clone();
    tape.custom("corrupted", &[y], value, Box::new(|_, _, g| vec![Some(g.iter().map(|v| 1.5 * v).collect())]))
}

fn reduce<'a>(tape: &mut Tape<'a, f64>, y: Var) -> Result<Var, TensorError> {
    let w = tape.constant(reduction_weights(tape.shape(y)));
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

/// Compares the tape gradient of `op` with central differences at a seeded
/// subset of coordinates of every tensor of `p`.
fn check<P, F>(op: &'static str, module: &'static str, mut p: P, seed: u64, fault: bool, f: F) -> Result<CheckResult>
where
    P: Parameters<f64>,
    F: for<'a> Fn(&'a P, &mut Tape<'a, f64>) -> Result<Var, TensorError>,
{
    let analytic = {
        let mut tape = Tape::new();
        let mut y = f(&p, &mut tape)?;
        if fault {
            y = corrupt(&mut tape, y)?;
        }
        let loss = reduce(&mut tape, y)?;
        let g = tape.backward(loss)?;
        collect_grads(&p, &g)
    };
    let value = |p: &P| -> Result<f64> {
        let mut tape = Tape::new();
        let y = f(p, &mut tape)?;
        let loss = reduce(&mut tape, y)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut sizes = Vec::new();
    p.visit("", &mut |_, t| sizes.push(t.numel()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let mut result = CheckResult {
        op,
        module,
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (ti, &n) in sizes.iter().enumerate() {
        let coords: Vec<usize> = if n <= COORDS_PER_TENSOR {
            (0..n).collect()
        } else {
            (0..COORDS_PER_TENSOR).map(|_| rng.random_range(0..n)).collect()
        };
        for k in coords {
            let x = set_coord(&mut p, ti, k, None);
            let centre = value(&p)?;
            // (central quotient, forward minus backward quotient)
            let mut quotients = |eps: f64| -> Result<(f64, f64)> {
                set_coord(&mut p, ti, k, Some(x + eps));
                let plus = value(&p);
                set_coord(&mut p, ti, k, Some(x - eps));
                let minus = value(&p);
                set_coord(&mut p, ti, k, Some(x));
                let (plus, minus) = (plus?, minus?);
                Ok(((plus - minus) / (2.0 * eps), (plus - 2.0 * centre + minus) / eps))
            };
            let ((full, jump), (half, jump_half)) = (quotients(EPSILON)?, quotients(EPSILON / 2.0)?);
            if is_kink(full, half, jump, jump_half) {
                result.skipped += 1;
                continue;
            }
            let a = analytic[ti].as_ref().map_or(0.0, |g| g[k]);
            result.max_rel_err = result.max_rel_err.max(rel_err(a, full));
            result.checked += 1;
        }
    }
    Ok(result)
}

/// A smooth point has central quotients that agree and a one-sided
/// disagreement that halves with ε (it is ε·f''). At a kink the one-sided
/// disagreement is the slope jump and does not shrink.
fn is_kink(full: f64, half: f64, jump: f64, jump_half: f64) -> bool {
    let visible = jump.abs() > 1e-7 * full.abs().max(1.0);
    rel_err(full, half) > TOLERANCE / 10.0 || (visible && (jump_half - jump).abs() < 0.25 * jump.abs())
}

/// Returns the coordinate's current value, then overwrites it if `new` is given.
fn set_coord<P: Parameters<f64>>(p: &mut P, tensor: usize, index: usize, new: Option<f64>) -> f64 {
    let (mut i, mut old) = (0, 0.0);
    p.visit_mut("", &mut |_, t| {
        if i == tensor {
            old = t.data()[index];
            if let Some(v) = new {
                t.data_mut()[index] = v;
            }
        }
        i += 1;
    });
    old
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Uniform in ±[0.1, 1], away from the ReLU kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Sampling field whose pixel coordinates have fractional parts in
/// [0.25, 0.75], a quarter pixel from every cell boundary.
fn interior_field(rng: &mut ChaCha8Rng, h: usize, w: usize, oh: usize, ow: usize) -> Tensor<f64> {
    let mut field = Tensor::zeros(&[2, oh, ow]);
    let n = oh * ow;
    for (c, size) in [(0, w), (1, h)] {
        for i in 0..n {
            let px = rng.random_range(0..size - 1) as f64 + rng.random_range(0.25..0.75);
            field.data_mut()[c * n + i] = (2.0 * px + 1.0) / size as f64 - 1.0;
        }
    }
    field
}

/// Zero biases put units fed only by dead ReLUs exactly on a kink.
fn randomize_biases(p: &mut impl Parameters<f64>, rng: &mut ChaCha8Rng) {
    p.visit_mut("", &mut |name, t| {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    });
}

fn micro_basis(side: usize) -> Result<WarpBasis<f64>> {
    let system = TpsSystem::new(ControlGrid::regular(ArchConfig::micro().control_side))?;
    Ok(WarpBasis::for_grid(&system, side, side))
}

/// One named check.
pub struct Case {
    pub op: &'static str,
    pub module: &'static str,
    run: fn(u64, bool) -> Result<CheckResult>,
}

impl Case {
    pub fn run(&self, seed: u64, fault: bool) -> Result<CheckResult> {
        (self.run)(seed, fault)
    }
}

macro_rules! inputs_case {
    ($op:literal, $module:literal, |$rng:ident| $make:expr, |$p:ident, $t:ident, $v:ident| $body:expr) => {
        Case {
            op: $op,
            module: $module,
            run: |seed, fault| {
                let mut $rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs: Inputs = $make;
                check($op, $module, inputs, seed, fault, |$p, $t| {
                    let $v: Vec<Var> = $p.tensors.iter().map(|x| $t.param(x)).collect();
                    $body
                })
            },
        }
    };
}

pub fn cases() -> Vec<Case> {
    vec![
        inputs_case!("add", "tensor_autodiff", |r| Inputs::new(vec![uniform(&mut r, &[3, 4]), uniform(&mut r, &[3, 4])]), |_p, t, v| t.add(v[0], v[1])),
        inputs_case!("sub", "tensor_autodiff", |r| Inputs::new(vec![uniform(&mut r, &[3, 4]), uniform(&mut r, &[3, 4])]), |_p, t, v| t.sub(v[0], v[1])),
        inputs_case!("mul", "tensor_autodiff", |r| Inputs::new(vec![uniform(&mut r, &[3, 4]), uniform(&mut r, &[3, 4])]), |_p, t, v| t.mul(v[0], v[1])),
        inputs_case!("scale", "tensor_autodiff", |r| Inputs::new(vec![uniform(&mut r, &[7])]), |_p, t, v| t.scale(v[0], -1.7)),
        inputs_case!("sum", "tensor_autodiff", |r| Inputs::new(vec![uniform(&mut r, &[2, 5])]), |_p, t, v| t.sum(v[0])),
        inputs_case!("mean", "tensor_autodiff", |r| Inputs::new(vec![uniform(&mut r, &[2, 5])]), |_p, t, v| t.mean(v[0])),
        inputs_case!("matmul", "tensor_autodiff", |r| Inputs::new(vec![uniform(&mut r, &[3, 4]), uniform(&mut r, &[4, 2])]), |_p, t, v| t.matmul(v[0], v[1])),
        inputs_case!("mse", "tensor_autodiff", |r| Inputs::new(vec![uniform(&mut r, &[5]), uniform(&mut r, &[5])]), |_p, t, v| t.mse(v[0], v[1])),
        inputs_case!("sum_squared_error", "tensor_autodiff", |r| Inputs::new(vec![uniform(&mut r, &[2, 3]), uniform(&mut r, &[2, 3])]), |_p, t, v| t.sum_squared_error(v[0], v[1])),
        inputs_case!("reshape", "tensor_autodiff", |r| Inputs::new(vec![uniform(&mut r, &[3, 4])]), |_p, t, v| t.reshape(v[0], &[2, 6])),
        inputs_case!("concat", "tensor_autodiff", |r| Inputs::new(vec![uniform(&mut r, &[2, 3, 3]), uniform(&mut r, &[1, 3, 3])]), |_p, t, v| t.concat(&[v[0], v[1]])),
        inputs_case!("relu", "nn_layers", |r| Inputs::new(vec![off_zero(&mut r, &[20])]), |_p, t, v| t.relu(v[0])),
        inputs_case!("sigmoid", "nn_layers", |r| Inputs::new(vec![Tensor::from_fn(&[20], |_| r.random_range(-4.0..4.0))]), |_p, t, v| t.sigmoid(v[0])),
        inputs_case!(
            "conv2d",
            "nn_layers",
            |r| Inputs::new(vec![uniform(&mut r, &[2, 5, 5]), uniform(&mut r, &[3, 2, 3, 3]), uniform(&mut r, &[3])]),
            |_p, t, v| t.conv2d(v[0], v[1], v[2], 1, 1)
        ),
        inputs_case!(
            "conv2d_strided",
            "nn_layers",
            |r| Inputs::new(vec![uniform(&mut r, &[2, 6, 5]), uniform(&mut r, &[3, 2, 3, 3]), uniform(&mut r, &[3])]),
            |_p, t, v| t.conv2d(v[0], v[1], v[2], 2, 1)
        ),
        inputs_case!(
            "conv2d_pointwise",
            "nn_layers",
            |r| Inputs::new(vec![uniform(&mut r, &[3, 4, 4]), uniform(&mut r, &[2, 3, 1, 1]), uniform(&mut r, &[2])]),
            |_p, t, v| t.conv2d(v[0], v[1], v[2], 1, 0)
        ),
        inputs_case!(
            "conv_transpose2d",
            "nn_layers",
            |r| Inputs::new(vec![uniform(&mut r, &[2, 3, 3]), uniform(&mut r, &[2, 3, 4, 4]), uniform(&mut r, &[3])]),
            |_p, t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 1)
        ),
        inputs_case!(
            "linear",
            "nn_layers",
            |r| Inputs::new(vec![uniform(&mut r, &[5]), uniform(&mut r, &[4, 5]), uniform(&mut r, &[4])]),
            |_p, t, v| t.linear(v[0], v[1], v[2])
        ),
        inputs_case!(
            "max_pool2",
            "nn_layers",
            // A shuffled ramp has no ties, so every window has a unique maximum.
            |r| {
                let mut vals: Vec<f64> = (0..32).map(|i| i as f64 / 16.0 - 1.0).collect();
                for i in (1..vals.len()).rev() {
                    vals.swap(i, r.random_range(0..=i));
                }
                Inputs::new(vec![Tensor::new(&[2, 4, 4], vals)?])
            },
            |_p, t, v| t.max_pool2(v[0])
        ),
        inputs_case!("global_avg_pool", "nn_layers", |r| Inputs::new(vec![uniform(&mut r, &[3, 2, 3])]), |_p, t, v| t.global_avg_pool(v[0])),
        inputs_case!(
            "conv_relu_linear_mse",
            "nn_layers",
            |r| Inputs::new(vec![
                uniform(&mut r, &[2, 4, 4]),
                uniform(&mut r, &[3, 2, 3, 3]),
                uniform(&mut r, &[3]),
                uniform(&mut r, &[4, 48]),
                uniform(&mut r, &[4]),
                uniform(&mut r, &[4]),
            ]),
            |_p, t, v| {
                let h = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                let h = t.relu(h)?;
                let h = t.reshape(h, &[48])?;
                let y = t.linear(h, v[3], v[4])?;
                t.mse(y, v[5])
            }
        ),
        inputs_case!(
            "tps_grid",
            "tps_warp",
            |r| {
                let c = ArchConfig::micro().control_points();
                let mut i = Inputs::new(vec![Tensor::from_fn(&[2 * c], |_| r.random_range(-0.2..0.2))]);
                i.basis = Some(micro_basis(5)?);
                i
            },
            |p, t, v| tps::tps_grid(t, v[0], p.basis.as_ref().expect("basis"))
        ),
        inputs_case!(
            "grid_sample",
            "tps_warp",
            |r| {
                let f = uniform(&mut r, &[2, 5, 6]);
                let field = interior_field(&mut r, 5, 6, 4, 3);
                Inputs::new(vec![f, field])
            },
            |_p, t, v| t.grid_sample(v[0], v[1])
        ),
        inputs_case!(
            "tps_warp",
            "tps_warp",
            |r| {
                let c = ArchConfig::micro().control_points();
                let mut i = Inputs::new(vec![uniform(&mut r, &[2, 8, 8]), Tensor::from_fn(&[2 * c], |_| r.random_range(-0.15..0.15))]);
                i.basis = Some(micro_basis(8)?);
                i
            },
            |p, t, v| {
                let field = tps::tps_grid(t, v[1], p.basis.as_ref().expect("basis"))?;
                t.grid_sample(v[0], field)
            }
        ),
        Case {
            op: "predict_warp",
            module: "sr_networks",
            run: |seed, fault| {
                let arch = ArchConfig::micro();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut predictor = WarpPredictor::init(&arch, seed)?;
                // The zero-initialised head would hide every upstream gradient.
                predictor.head.weight = uniform(&mut rng, predictor.head.weight.shape());
                randomize_biases(&mut predictor, &mut rng);
                let side = arch.lr_size;
                let case = PredictorCase {
                    predictor,
                    reference: Tensor::from_fn(&[3, side, side], |_| rng.random_range(0.0..1.0)),
                    moving: Tensor::from_fn(&[3, side, side], |_| rng.random_range(0.0..1.0)),
                };
                check("predict_warp", "sr_networks", case, seed, fault, |p, t| {
                    let r = t.constant_ref(&p.reference);
                    let m = t.constant_ref(&p.moving);
                    p.predictor.forward(t, r, m, Binding::Trainable)
                })
            },
        },
        Case {
            op: "f5warp_forward",
            module: "sr_networks",
            run: |seed, fault| {
                let arch = ArchConfig::micro();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut model = SrModel::<f64>::new(arch.clone(), ModelVariant::warped(5)?, seed)?;
                // Small random head: non-trivial warps whose sample points stay inside cells.
                let head = &mut model.params.warp.head.weight;
                *head = Tensor::from_fn(head.shape(), |_| rng.random_range(-0.05..0.05));
                randomize_biases(&mut model.params, &mut rng);
                let (lr, hr) = (arch.lr_size, arch.hr_size);
                let frames = (0..5).map(|_| Tensor::from_fn(&[3, lr, lr], |_| rng.random_range(0.0..1.0))).collect();
                let case = ModelCase {
                    model,
                    seq: FrameSequence::new(frames, None)?,
                    target: Tensor::from_fn(&[3, hr, hr], |_| rng.random_range(0.0..1.0)),
                };
                check("f5warp_forward", "sr_networks", case, seed, fault, |p, t| {
                    let trace = p.model.forward(t, &p.seq)?;
                    let target = t.constant_ref(&p.target);
                    t.mse(trace.output, target)
                })
            },
        },
        inputs_case!(
            "perceptual_total_loss",
            "perceptual_loss",
            |r| {
                let mut i = Inputs::new(vec![Tensor::from_fn(&[3, 16, 16], |_| r.random_range(0.0..1.0))]);
                i.net = Some(FeatureNetwork::seeded(r.random())?);
                i.target = Some(Tensor::from_fn(&[3, 16, 16], |_| r.random_range(0.0..1.0)));
                i
            },
            |p, t, v| {
                let target = t.constant_ref(p.target.as_ref().expect("target"));
                let mut w = LossWeights::preset(LossMode::PixelPool3Pool4, 1.0);
                w.set(crate::perceptual::Tap::Fc7, 1.0);
                total_loss(t, v[0], target, p.net.as_ref().expect("net"), &w)
            }
        ),
    ]
}

/// Runs every case of `module` (all modules if `None`). `fault` names an
/// op whose backward pass is deliberately corrupted.
pub fn run_suite(seed: u64, module: Option<&str>, fault: Option<&str>) -> Result<Vec<CheckResult>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::Config(format!("unknown module {m:?}; expected one of {}", MODULES.join(", "))));
        }
    }
    let all = cases();
    if let Some(op) = fault {
        if !all.iter().any(|c| c.op == op) {
            return Err(Error::Config(format!("unknown op {op:?}")));
        }
    }
    all.iter()
        .filter(|c| module.is_none_or(|m| c.module == m))
        .map(|c| c.run(seed, fault == Some(c.op)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_two_seeds() {
        for seed in [0, 1] {
            for r in run_suite(seed, None, None).unwrap() {
                assert!(r.passed(), "seed {seed}: {r}");
                assert!(r.checked > 0, "{r}");
            }
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        for op in ["relu", "grid_sample", "f5warp_forward"] {
            let module = cases().into_iter().find(|c| c.op == op).unwrap().module;
            let results = run_suite(3, Some(module), Some(op)).unwrap();
            let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
            assert_eq!(failed, vec![op]);
        }
    }

    #[test]
    fn module_filter_restricts_cases() {
        let r = run_suite(0, Some("tps_warp"), None).unwrap();
        let ops: Vec<_> = r.iter().map(|r| r.op).collect();
        assert_eq!(ops, ["tps_grid", "grid_sample", "tps_warp"]);
        assert!(run_suite(0, Some("nope"), None).is_err());
        assert!(run_suite(0, None, Some("nope")).is_err());
    }

    #[test]
    fn kinks_are_told_apart_from_curvature() {
        let quotients = |f: &dyn Fn(f64) -> f64, x: f64, eps: f64| {
            let (p, c, m) = (f(x + eps), f(x), f(x - eps));
            ((p - m) / (2.0 * eps), (p - 2.0 * c + m) / eps)
        };
        let check = |f: &dyn Fn(f64) -> f64, x: f64| {
            let ((a, j), (b, jh)) = (quotients(f, x, EPSILON), quotients(f, x, EPSILON / 2.0));
            is_kink(a, b, j, jh)
        };
        // Symmetric kink: both central quotients are exactly zero.
        assert!(check(&|x: f64| x.abs(), 0.0));
        assert!(check(&|x: f64| x.max(0.0), 0.0));
        assert!(!check(&|x: f64| x.max(0.0), 0.5));
        assert!(!check(&|x: f64| 1e3 * x * x, 1e-3));
        assert!(!check(&|x: f64| x.sin(), 0.3));
    }

    #[test]
    fn square_gradient_matches_hand_value() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param(&x).unwrap(), vec![6.0]);
        let f = |x: f64| x * x;
        assert!(rel_err(6.0, (f(3.0 + EPSILON) - f(3.0 - EPSILON)) / (2.0 * EPSILON)) < 1e-9);
    }
}
