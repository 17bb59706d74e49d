//! Central finite-difference checks of the autodiff engine in `f64`.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{NormStats, Tape, Var};
use crate::cbam::Cbam;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d};
use crate::model::{Bottleneck, Model, ModelConfig};
use crate::ops::PoolKind;
use crate::params::{Graph, Mode, ModelState, ParamBuilder, Registry};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-4;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const FULL_TOL: f64 = 1e-4;

/// `|a - n| / (|a| + |n| + 1e-12)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Smallest derivative a central difference with step `h` can resolve to
/// relative error `tol` on a loss of magnitude `loss`: one ulp of the loss
/// divided by `h * tol`. Below it the quotient is round-off.
pub fn resolution_floor(loss: f64, h: f64, tol: f64) -> f64 {
    loss.abs().max(f64::MIN_POSITIVE) * f64::EPSILON / (h * tol)
}

/// [`rel_err`] with the denominator raised to `floor`, so that derivatives
/// under the oracle's resolution are held to absolute agreement instead.
pub fn floored_rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs() + numeric.abs() + 1e-12;
    (analytic - numeric).abs() / denom.max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Blocks,
    Full,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitives" => Ok(Self::Primitives),
            "blocks" => Ok(Self::Blocks),
            "full" => Ok(Self::Full),
            other => Err(Error::Argument(format!("unknown gradcheck scope {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Number of scalar derivatives compared.
    pub checked: usize,
    /// Elements whose difference quotient never stabilized because a relu or
    /// max switch sat inside every stencil tried. Excluded from the maximum.
    pub nondifferentiable: usize,
    /// Elements compared against [`resolution_floor`] rather than their own
    /// magnitude.
    pub below_resolution: usize,
}

impl CheckResult {
    /// Also fails when more than 5% of the elements sat at kinks, since the
    /// maximum would then rest on too few comparisons.
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.nondifferentiable * 20 <= self.checked
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<32} max_rel_err {:.3e} (tol {:.0e}, {} checked",
            if self.passed() { "ok" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.checked
        )?;
        if self.nondifferentiable > 0 {
            write!(f, ", {} at kinks", self.nondifferentiable)?;
        }
        if self.below_resolution > 0 {
            write!(f, ", {} below resolution", self.below_resolution)?;
        }
        write!(f, ")")
    }
}

/// Options shared by every check.
#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub eps: f64,
    /// Scales every adjoint by this factor (negative control).
    pub fault: Option<f64>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            fault: None,
            seed: 0,
        }
    }
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central differences over every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_input(&f, x, eps, None).map(|(err, _)| err)
}

fn check_input<F>(f: &F, x: &Tensor<f64>, eps: f64, fault: Option<f64>) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_adjoint_fault(k);
    }
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let analytic = tape.backward(y)?.get_or_zeros(xv, x.shape());
    let eval = |p: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(p.clone());
        let out = f(&mut t, v)?;
        t.value(out).item()
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok((worst, x.len()))
}

/// Steps tried by [`stable_central`], relative to the starting step.
const STEP_SHRINK: [f64; 4] = [1.0, 1e-1, 1e-2, 1e-3];

/// Central difference of `f` at 0 that refuses to straddle a kink.
///
/// Deep relu/max networks are only piecewise smooth, and at a fixed step a
/// few stencils cross a switch, giving O(1) errors that say nothing about
/// the backward pass. On a smooth stencil the quotients at `h` and `h/2`
/// agree to O(h^2); when they disagree the step shrinks tenfold. Only loss
/// values are consulted, so a wrong adjoint cannot be hidden. Returns the
/// quotient and the step that produced it, or `None` when no step in the
/// ladder is smooth.
pub fn stable_central(eps: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<Option<(f64, f64)>> {
    for shrink in STEP_SHRINK {
        let h = eps * shrink;
        let wide = (f(h)? - f(-h)?) / (2.0 * h);
        let narrow = (f(h / 2.0)? - f(-h / 2.0)?) / h;
        // Round-off in a loss of order one after thousands of accumulated
        // terms is near 1e-14, amplified by 1/h.
        let noise = 1e-13 / h;
        if (wide - narrow).abs() <= 1e-6 * (wide.abs() + narrow.abs()) + noise {
            return Ok(Some((wide, h)));
        }
    }
    Ok(None)
}

/// Uniform in `[-1, 1]` with `|v| >= 0.1`, keeping clear of the relu kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Distinct values spaced at least 0.05 apart, so max selections are stable
/// under perturbation.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let len: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..len).map(|i| -1.0 + 0.05 * i as f64 + rng.gen_range(0.0..0.01)).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).expect("valid shape")
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// `sum(v * w)` for a fixed random `w`, so every output element carries a
/// distinct adjoint.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, w: &Tensor<f64>) -> Result<Var> {
    let c = tape.constant(w.clone());
    let m = tape.mul(v, c)?;
    Ok(tape.sum(m))
}

type PrimitiveFn = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

/// Builds `(name, f, x)` cases where `f` maps `x` to a weighted sum of the
/// primitive's output.
fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(String, PrimitiveFn, Tensor<f64>)> {
    let mut cases: Vec<(String, PrimitiveFn, Tensor<f64>)> = Vec::new();
    macro_rules! case {
        ($name:expr, $x:expr, $out_shape:expr, |$t:ident, $v:ident| $body:expr) => {{
            let w = uniform(&$out_shape, rng);
            let f: PrimitiveFn = Box::new(move |$t: &mut Tape<f64>, $v: Var| {
                let y = $body?;
                weighted_sum($t, y, &w)
            });
            cases.push(($name.to_string(), f, $x));
        }};
    }

    let x = uniform(&[2, 3, 4, 4], rng);
    let other = uniform(&[2, 3, 4, 4], rng);
    let o = other.clone();
    case!("add", x.clone(), [2, 3, 4, 4], |t, v| {
        let b = t.constant(o.clone());
        t.add(v, b)
    });
    let o = other.clone();
    case!("sub (rhs)", x.clone(), [2, 3, 4, 4], |t, v| {
        let a = t.constant(o.clone());
        t.sub(a, v)
    });
    let feature = uniform(&[2, 3, 4, 4], rng);
    let f1 = feature.clone();
    case!("add broadcast [1,C,1,1]", uniform(&[1, 3, 1, 1], rng), [2, 3, 4, 4], |t, v| {
        let m = t.constant(f1.clone());
        t.add(m, v)
    });
    let f2 = feature.clone();
    case!("mul broadcast gate", uniform(&[2, 3, 1, 1], rng), [2, 3, 4, 4], |t, v| {
        let m = t.constant(f2.clone());
        t.mul(m, v)
    });
    let gate = uniform(&[2, 1, 4, 4], rng);
    case!("mul broadcast feature", feature.clone(), [2, 3, 4, 4], |t, v| {
        let g = t.constant(gate.clone());
        t.mul(v, g)
    });
    case!("scale", x.clone(), [2, 3, 4, 4], |t, v| Ok::<_, Error>(t.scale(v, -1.7)));
    case!("relu", away_from_zero(&[2, 3, 4, 4], rng), [2, 3, 4, 4], |t, v| Ok::<_, Error>(t.relu(v)));
    case!("sigmoid", uniform(&[2, 3, 4, 4], rng).map(|v| 3.0 * v), [2, 3, 4, 4], |t, v| {
        Ok::<_, Error>(t.sigmoid(v))
    });

    let kernel = uniform(&[3, 2, 3, 3], rng);
    let k1 = kernel.clone();
    case!("conv2d input s2 p1", uniform(&[1, 2, 5, 5], rng), [1, 3, 3, 3], |t, v| {
        let k = t.constant(k1.clone());
        t.conv2d(v, k, 2, 1)
    });
    let img = uniform(&[2, 2, 5, 5], rng);
    case!("conv2d kernel s1 p1", kernel.clone(), [2, 3, 5, 5], |t, v| {
        let i = t.constant(img.clone());
        t.conv2d(i, v, 1, 1)
    });
    let k7 = uniform(&[1, 2, 7, 7], rng);
    case!("conv2d 7x7 p3", uniform(&[1, 2, 6, 6], rng), [1, 1, 6, 6], |t, v| {
        let k = t.constant(k7.clone());
        t.conv2d(v, k, 1, 3)
    });
    case!("max pool k3 s2 p1", distinct(&[1, 2, 7, 7], rng), [1, 2, 4, 4], |t, v| {
        t.pool2d(v, PoolKind::Max, 3, 2, 1)
    });
    case!("avg pool k3 s2 p1", uniform(&[1, 2, 7, 7], rng), [1, 2, 4, 4], |t, v| {
        t.pool2d(v, PoolKind::Avg, 3, 2, 1)
    });
    case!("avg pool k2 s2", uniform(&[1, 2, 4, 6], rng), [1, 2, 2, 3], |t, v| {
        t.pool2d(v, PoolKind::Avg, 2, 2, 0)
    });
    case!("global avg pool", uniform(&[2, 3, 3, 4], rng), [2, 3, 1, 1], |t, v| {
        t.global_pool(v, PoolKind::Avg)
    });
    case!("global max pool", distinct(&[2, 3, 3, 4], rng), [2, 3, 1, 1], |t, v| {
        t.global_pool(v, PoolKind::Max)
    });
    case!("channel mean", uniform(&[2, 4, 3, 3], rng), [2, 1, 3, 3], |t, v| {
        t.channel_pool(v, PoolKind::Avg)
    });
    case!("channel max", distinct(&[2, 4, 3, 3], rng), [2, 1, 3, 3], |t, v| {
        t.channel_pool(v, PoolKind::Max)
    });
    let side = uniform(&[2, 1, 3, 3], rng);
    case!("concat channels", uniform(&[2, 2, 3, 3], rng), [2, 3, 3, 3], |t, v| {
        let s = t.constant(side.clone());
        t.concat_channels(&[v, s])
    });

    let gamma = uniform(&[3], rng).map(|v| 1.0 + 0.5 * v);
    let beta = uniform(&[3], rng);
    let (g1, b1) = (gamma.clone(), beta.clone());
    case!("batch norm (batch stats) input", uniform(&[3, 3, 2, 2], rng), [3, 3, 2, 2], |t, v| {
        let g = t.constant(g1.clone());
        let b = t.constant(b1.clone());
        t.batch_norm(v, g, b, NormStats::Batch { eps: 1e-5 }).map(|(y, _)| y)
    });
    let bn_in = uniform(&[3, 3, 2, 2], rng);
    let (bi, b2) = (bn_in.clone(), beta.clone());
    case!("batch norm gamma", gamma.clone(), [3, 3, 2, 2], |t, v| {
        let x = t.constant(bi.clone());
        let b = t.constant(b2.clone());
        t.batch_norm(x, v, b, NormStats::Batch { eps: 1e-5 }).map(|(y, _)| y)
    });
    let (bi, g2) = (bn_in.clone(), gamma.clone());
    case!("batch norm beta", beta.clone(), [3, 3, 2, 2], |t, v| {
        let x = t.constant(bi.clone());
        let g = t.constant(g2.clone());
        t.batch_norm(x, g, v, NormStats::Batch { eps: 1e-5 }).map(|(y, _)| y)
    });
    let (g3, b3) = (gamma.clone(), beta.clone());
    let run_mean = vec![0.1, -0.2, 0.3];
    let run_var = vec![0.5, 1.5, 2.0];
    case!("batch norm (running stats)", uniform(&[2, 3, 2, 2], rng), [2, 3, 2, 2], |t, v| {
        let g = t.constant(g3.clone());
        let b = t.constant(b3.clone());
        let stats = NormStats::Running {
            mean: &run_mean,
            var: &run_var,
            eps: 1e-5,
        };
        t.batch_norm(v, g, b, stats).map(|(y, _)| y)
    });
    let mask: Vec<f64> = (0..24).map(|i| if i % 3 == 0 { 0.0 } else { 2.0 }).collect();
    case!("dropout mask", uniform(&[2, 3, 2, 2], rng), [2, 3, 2, 2], |t, v| t.mask_mul(v, mask.clone()));
    case!("reshape", uniform(&[2, 3, 1, 1], rng), [2, 3], |t, v| t.reshape(v, &[2, 3]));
    let rhs = uniform(&[5, 3], rng);
    case!("matmul lhs", uniform(&[4, 5], rng), [4, 3], |t, v| {
        let b = t.constant(rhs.clone());
        t.matmul(v, b)
    });
    let lhs = uniform(&[4, 5], rng);
    case!("matmul rhs", uniform(&[5, 3], rng), [4, 3], |t, v| {
        let a = t.constant(lhs.clone());
        t.matmul(a, v)
    });
    case!("transpose", uniform(&[3, 5], rng), [5, 3], |t, v| t.transpose(v));
    case!("mean", uniform(&[3, 4], rng), [1], |t, v| Ok::<_, Error>(t.mean(v)));
    case!("softmax", uniform(&[3, 4], rng).map(|v| 2.0 * v), [3, 4], |t, v| t.softmax(v));
    let labels = vec![2usize, 0, 3];
    cases.push((
        "cross entropy".to_string(),
        Box::new(move |t: &mut Tape<f64>, v: Var| t.cross_entropy(v, &labels)),
        uniform(&[3, 4], rng).map(|v| 2.0 * v),
    ));
    cases.push((
        "sum".to_string(),
        Box::new(|t: &mut Tape<f64>, v: Var| Ok(t.sum(v))),
        uniform(&[2, 3], rng),
    ));
    cases
}

pub fn check_primitives(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    primitive_cases(&mut rng)
        .into_iter()
        .map(|(name, f, x)| {
            let (err, checked) = check_input(&f, &x, opts.eps, opts.fault)?;
            Ok(CheckResult {
                name,
                max_rel_err: err,
                tolerance: PRIMITIVE_TOL,
                checked,
                nondifferentiable: 0,
                below_resolution: 0,
            })
        })
        .collect()
}

/// Loss over a parameterized forward pass. Dropout draws come from a fixed
/// seed on every call, so the function is deterministic.
struct StateCheck<'a, F> {
    name: String,
    state: ModelState<f64>,
    registry: &'a Registry,
    input: Tensor<f64>,
    forward: F,
    tolerance: f64,
}

impl<F> StateCheck<'_, F>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    fn loss(&self, state: &ModelState<f64>, input: &Tensor<f64>) -> Result<f64> {
        let mut g = Graph::new(state, Mode::Train, false).with_rng(ChaCha8Rng::seed_from_u64(7));
        let x = g.input(input.clone());
        let out = (self.forward)(&mut g, x)?;
        g.tape.value(out).item()
    }

    /// Compares `per_tensor` sampled elements of every parameter tensor (all
    /// of them when the tensor is that small) plus sampled input elements.
    fn run(self, opts: &CheckOptions, per_tensor: usize, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
        let (param_grads, input_grad) = {
            let mut g = Graph::new(&self.state, Mode::Train, true).with_rng(ChaCha8Rng::seed_from_u64(7));
            if let Some(k) = opts.fault {
                g.tape.inject_adjoint_fault(k);
            }
            let x = g.tape.leaf(self.input.clone(), true);
            let out = (self.forward)(&mut g, x)?;
            let grads = g.tape.backward(out)?;
            let pg: Vec<Tensor<f64>> = g
                .param_vars()
                .iter()
                .zip(&self.state.params)
                .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
                .collect();
            (pg, grads.get_or_zeros(x, self.input.shape()))
        };

        let eps = opts.eps;
        let mut params_worst = 0.0f64;
        let mut checked = 0;
        let mut kinks = 0;
        let mut params_floored = 0;
        let base = self.loss(&self.state, &self.input)?;
        let mut worst_name = String::new();
        let mut state = self.state.clone();
        for j in 0..self.state.params.len() {
            let len = self.state.params[j].len();
            let picks = sample(rng, len, per_tensor.min(len)).into_vec();
            for i in picks {
                let orig = state.params[j].data()[i];
                let numeric = stable_central(eps, |d| {
                    state.params[j].data_mut()[i] = orig + d;
                    self.loss(&state, &self.input)
                })?;
                state.params[j].data_mut()[i] = orig;
                checked += 1;
                let Some((numeric, h)) = numeric else {
                    kinks += 1;
                    continue;
                };
                let a = param_grads[j].data()[i];
                let floor = resolution_floor(base, h, self.tolerance);
                params_floored += usize::from(a.abs() + numeric.abs() < floor);
                let e = floored_rel_err(a, numeric, floor);
                if e > params_worst {
                    params_worst = e;
                    worst_name = self.registry.params[j].clone();
                }
            }
        }

        let mut input_worst = 0.0f64;
        let mut input_kinks = 0;
        let mut input_floored = 0;
        let picks = sample(rng, self.input.len(), per_tensor.max(8).min(self.input.len())).into_vec();
        let mut probe = self.input.clone();
        for &i in &picks {
            let orig = probe.data()[i];
            let numeric = stable_central(eps, |d| {
                probe.data_mut()[i] = orig + d;
                self.loss(&self.state, &probe)
            })?;
            probe.data_mut()[i] = orig;
            match numeric {
                Some((n, h)) => {
                    let a = input_grad.data()[i];
                    let floor = resolution_floor(base, h, self.tolerance);
                    input_floored += usize::from(a.abs() + n.abs() < floor);
                    input_worst = input_worst.max(floored_rel_err(a, n, floor));
                }
                None => input_kinks += 1,
            }
        }
        log::debug!("{}: worst parameter {worst_name}", self.name);
        Ok(vec![
            CheckResult {
                name: format!("{} params", self.name),
                max_rel_err: params_worst,
                tolerance: self.tolerance,
                checked,
                nondifferentiable: kinks,
                below_resolution: params_floored,
            },
            CheckResult {
                name: format!("{} input", self.name),
                max_rel_err: input_worst,
                tolerance: self.tolerance,
                checked: picks.len(),
                nondifferentiable: input_kinks,
                below_resolution: input_floored,
            },
        ])
    }
}

fn build_state<M>(
    seed: u64,
    build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<M>,
) -> Result<(M, Registry, ModelState<f64>)> {
    let mut registry = Registry::default();
    let mut state = ModelState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let module = {
        let mut b = ParamBuilder::new(&mut registry, &mut state, &mut rng);
        build(&mut b)?
    };
    Ok((module, registry, state))
}

/// Perturbs BN affine parameters away from `(1, 0)` so their gradients are
/// exercised at generic values.
fn jitter(state: &mut ModelState<f64>, rng: &mut ChaCha8Rng) {
    for p in &mut state.params {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

pub fn check_blocks(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xb10c);
    let mut out = Vec::new();

    // conv + batch norm + relu
    let (layers, reg, mut state) = build_state(opts.seed, |b| {
        Ok((Conv2d::same(b, "conv", 3, 4, 3, 1), BatchNorm2d::new(b, "bn", 4)))
    })?;
    jitter(&mut state, &mut rng);
    let w = uniform(&[2, 4, 5, 5], &mut rng);
    out.extend(
        StateCheck {
            name: "conv+bn+relu".into(),
            state,
            registry: &reg,
            input: uniform(&[2, 3, 5, 5], &mut rng),
            forward: |g: &mut Graph<'_, f64>, x: Var| {
                let y = layers.0.forward(g, x)?;
                let y = layers.1.forward(g, y)?;
                let y = g.tape.relu(y);
                weighted_sum(&mut g.tape, y, &w)
            },
            tolerance: PRIMITIVE_TOL,
        }
        .run(opts, 6, &mut rng)?,
    );

    // CBAM on its own
    let (cbam, reg, mut state) = build_state(opts.seed + 1, |b| Cbam::new(b, "cbam", 16, 4, 3))?;
    jitter(&mut state, &mut rng);
    let w = uniform(&[2, 16, 4, 4], &mut rng);
    out.extend(
        StateCheck {
            name: "cbam".into(),
            state,
            registry: &reg,
            input: uniform(&[2, 16, 4, 4], &mut rng),
            forward: |g: &mut Graph<'_, f64>, x: Var| {
                let y = cbam.forward(g, x)?;
                weighted_sum(&mut g.tape, y, &w)
            },
            tolerance: PRIMITIVE_TOL,
        }
        .run(opts, 6, &mut rng)?,
    );

    // Three bottlenecks: downsampling with the average-pool shortcut, then
    // two identity blocks, all with CBAM.
    let cfg = ModelConfig::resnet50_plus(3).with_width(0.125);
    let (blocks, reg, mut state) = build_state(opts.seed + 2, |b| {
        Ok(vec![
            Bottleneck::new(b, "block1", &cfg, 16, 8, 2)?,
            Bottleneck::new(b, "block2", &cfg, 32, 8, 1)?,
            Bottleneck::new(b, "block3", &cfg, 32, 8, 1)?,
        ])
    })?;
    jitter(&mut state, &mut rng);
    let w = uniform(&[2, 32, 2, 2], &mut rng);
    out.extend(
        StateCheck {
            name: "3-block composite".into(),
            state,
            registry: &reg,
            input: uniform(&[2, 16, 4, 4], &mut rng),
            forward: |g: &mut Graph<'_, f64>, x: Var| {
                let mut y = x;
                for blk in &blocks {
                    y = blk.forward(g, y)?;
                }
                weighted_sum(&mut g.tape, y, &w)
            },
            tolerance: PRIMITIVE_TOL,
        }
        .run(opts, 3, &mut rng)?,
    );
    Ok(out)
}

/// Batch size for the whole-network check. Two samples make the final 1x1
/// batch-norm layers nearly constant at 32 px, leaving only round-off to
/// compare; four keeps every statistic informative.
pub const FULL_BATCH: usize = 4;

/// Whole ResNet50+ at width 0.25 on 32x32 inputs: cross-entropy on a small
/// batch, sampled elements of every parameter tensor.
pub fn check_full(opts: &CheckOptions, per_tensor: usize, batch: usize) -> Result<Vec<CheckResult>> {
    let cfg = ModelConfig::resnet50_plus(3).with_width(0.25);
    let model = Model::<f64>::build(&cfg, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xf011);
    let input = uniform(&[batch, 3, 32, 32], &mut rng);
    let labels: Vec<usize> = (0..batch).map(|i| i % 3).collect();
    StateCheck {
        name: "resnet50+ w0.25".into(),
        state: model.state().clone(),
        registry: model.registry(),
        input,
        forward: |g: &mut Graph<'_, f64>, x: Var| {
            let logits = model.forward(g, x)?;
            g.tape.cross_entropy(logits, &labels)
        },
        tolerance: FULL_TOL,
    }
    .run(opts, per_tensor, &mut rng)
}

pub fn run_scope(scope: Scope, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    match scope {
        Scope::Primitives => check_primitives(opts),
        Scope::Blocks => check_blocks(opts),
        Scope::Full => check_full(opts, 2, FULL_BATCH),
    }
}
