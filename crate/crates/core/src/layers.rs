//! Parameterized layers: convolution, batch norm, linear, dropout.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{NormStats, Var};
use crate::error::{arg_err, Result};
use crate::params::{BufferId, Graph, Mode, ParamBuilder, ParamId};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// He-normal samples, `N(0, sqrt(2 / fan_in))` with `fan_in = prod(shape[1..])`.
pub fn he_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::from_f64(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("valid shape")
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        b.scoped(name, |b| {
            let w = he_init(&[out_channels, in_channels, kernel, kernel], b.rng);
            let weight = b.param("weight", w);
            let bias = bias.then(|| b.param("bias", Tensor::zeros(&[out_channels])));
            Self {
                weight,
                bias,
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            }
        })
    }

    /// Bias-free convolution with "same" padding `k / 2`.
    pub fn same<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self::new(b, name, in_channels, out_channels, kernel, stride, kernel / 2, false)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.tape.conv2d(x, w, self.stride, self.padding)?;
        match self.bias {
            None => Ok(y),
            Some(bias) => {
                let b = g.param(bias);
                let b = g.tape.reshape(b, &[1, self.out_channels, 1, 1])?;
                g.tape.add(y, b)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        b.scoped(name, |b| Self {
            gamma: b.param("gamma", Tensor::ones(&[channels])),
            beta: b.param("beta", Tensor::zeros(&[channels])),
            running_mean: b.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: b.buffer("running_var", Tensor::ones(&[channels])),
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    /// Train mode normalizes with batch statistics and queues the running
    /// update `running <- (1 - momentum) * running + momentum * batch`;
    /// eval mode uses the running statistics only.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let eps = T::from_f64(self.eps);
        match g.mode() {
            Mode::Train => {
                let (y, moments) = g.tape.batch_norm(x, gamma, beta, NormStats::Batch { eps })?;
                let moments = moments.expect("batch statistics");
                let m = T::from_f64(self.momentum);
                let keep = T::one() - m;
                let blend = |old: &Tensor<T>, new: &[T]| {
                    let data = old.data().iter().zip(new).map(|(&o, &n)| keep * o + m * n).collect();
                    Tensor::new(old.shape(), data)
                };
                let mean = blend(g.buffer(self.running_mean), &moments.mean)?;
                let var = blend(g.buffer(self.running_var), &moments.var_unbiased)?;
                g.queue_update(self.running_mean, mean);
                g.queue_update(self.running_var, var);
                Ok(y)
            }
            Mode::Eval => {
                let mean = g.buffer(self.running_mean).data().to_vec();
                let var = g.buffer(self.running_var).data().to_vec();
                let (y, _) = g.tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    NormStats::Running {
                        mean: &mean,
                        var: &var,
                        eps,
                    },
                )?;
                Ok(y)
            }
        }
    }
}

/// `y = x W^T + b` over `[N, in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, in_features: usize, out_features: usize) -> Self {
        b.scoped(name, |b| {
            let w = he_init(&[out_features, in_features], b.rng);
            Self::register(b, w, in_features, out_features)
        })
    }

    /// Weights drawn from `N(0, std^2)`, zero bias.
    pub fn with_std<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        std: f64,
    ) -> Self {
        b.scoped(name, |b| {
            let normal = Normal::new(0.0, std).expect("finite std");
            let data = (0..in_features * out_features)
                .map(|_| T::from_f64(normal.sample(&mut *b.rng)))
                .collect();
            let w = Tensor::new(&[out_features, in_features], data).expect("sized buffer");
            Self::register(b, w, in_features, out_features)
        })
    }

    fn register<T: Scalar>(b: &mut ParamBuilder<'_, T>, w: Tensor<T>, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: b.param("weight", w),
            bias: b.param("bias", Tensor::zeros(&[out_features])),
            in_features,
            out_features,
        }
    }

    pub fn num_params(&self) -> usize {
        self.out_features * self.in_features + self.out_features
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let wt = g.tape.transpose(w)?;
        let y = g.tape.matmul(x, wt)?;
        let b = g.param(self.bias);
        let b = g.tape.reshape(b, &[1, self.out_features])?;
        g.tape.add(y, b)
    }
}

/// Inverted dropout: in train mode each activation is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(arg_err!("dropout rate must lie in [0, 1), got {}", rate));
        }
        Ok(Self { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if g.mode() == Mode::Eval || self.rate == 0.0 {
            return Ok(x);
        }
        let len = g.tape.value(x).len();
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        let rate = self.rate;
        let rng = g
            .rng()
            .ok_or_else(|| arg_err!("train-mode dropout needs a random stream"))?;
        let mask = (0..len)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        g.tape.mask_mul(x, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ModelState, Registry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn builder_state() -> (Registry, ModelState<f64>) {
        (
            Registry::default(),
            ModelState {
                params: vec![],
                buffers: vec![],
            },
        )
    }

    #[test]
    fn he_init_is_seeded_and_scaled() {
        let a: Tensor<f64> = he_init(&[1000, 100], &mut ChaCha8Rng::seed_from_u64(7));
        let b: Tensor<f64> = he_init(&[1000, 100], &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        let n = a.len() as f64;
        let mean = a.sum() / n;
        let std = (a.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = 0.02f64.sqrt();
        assert!((std - target).abs() / target < 0.05, "std {std}");

        let c: Tensor<f64> = he_init(&[1000, 100], &mut ChaCha8Rng::seed_from_u64(8));
        let differing = a.data().iter().zip(c.data()).filter(|(x, y)| x != y).count();
        assert!(differing as f64 >= 0.99 * n);
    }

    #[test]
    fn linear_hand_product() {
        let (mut reg, mut state) = builder_state();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Linear::new(&mut ParamBuilder::new(&mut reg, &mut state, &mut rng), "fc", 2, 2);
        *state.param_mut(layer.weight) = Tensor::from_f64s(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        let mut g = Graph::new(&state, Mode::Eval, false);
        let x = g.input(Tensor::from_f64s(&[1, 2], &[1., 1.]).unwrap());
        let y = layer.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.value(y).data(), &[3., 7.]);
        assert_eq!(layer.num_params(), 6);
    }

    #[test]
    fn linear_param_count_matches_formula() {
        let (mut reg, mut state) = builder_state();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Linear::new(&mut ParamBuilder::new(&mut reg, &mut state, &mut rng), "fc", 512, 3);
        assert_eq!(layer.num_params(), 1539);
        assert_eq!(state.num_scalars(), 1539);
    }

    #[test]
    fn batch_norm_eval_constant() {
        let (mut reg, mut state) = builder_state();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bn = BatchNorm2d::new(&mut ParamBuilder::new(&mut reg, &mut state, &mut rng), "bn", 1);
        bn.eps = 0.0;
        *state.param_mut(bn.gamma) = Tensor::full(&[1], 2.0);
        *state.param_mut(bn.beta) = Tensor::full(&[1], 3.0);
        state.buffers[bn.running_mean.0] = Tensor::full(&[1], 5.0);
        state.buffers[bn.running_var.0] = Tensor::full(&[1], 1.0);
        let mut g = Graph::new(&state, Mode::Eval, false);
        let x = g.input(Tensor::full(&[2, 1, 3, 3], 5.0));
        let y = bn.forward(&mut g, x).unwrap();
        assert!(g.tape.value(y).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn dropout_identity_cases_and_rate_check() {
        assert!(Dropout::new(1.0).is_err());
        assert!(Dropout::new(-0.1).is_err());
        let state = ModelState::<f64> {
            params: vec![],
            buffers: vec![],
        };
        let x = Tensor::from_f64s(&[4], &[1., -2., 3., 4.]).unwrap();
        let mut g = Graph::new(&state, Mode::Eval, false);
        let v = g.input(x.clone());
        let y = Dropout::new(0.5).unwrap().forward(&mut g, v).unwrap();
        assert_eq!(g.tape.value(y), &x);

        let mut g = Graph::new(&state, Mode::Train, false).with_rng(ChaCha8Rng::seed_from_u64(1));
        let v = g.input(x.clone());
        let y = Dropout::new(0.0).unwrap().forward(&mut g, v).unwrap();
        assert_eq!(g.tape.value(y), &x);
    }
}
