//! ResNet-50/101 and the ResNet+ variants (ResNet-D tweaks plus CBAM).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::cbam::{Cbam, DEFAULT_RATIO, DEFAULT_SPATIAL_KERNEL};
use crate::error::{arg_err, dim_err, Result};
use crate::layers::{BatchNorm2d, Conv2d, Dropout, Linear};
use crate::ops::PoolKind;
use crate::params::{Graph, Mode, ModelState, ParamBuilder, Registry};
use crate::tensor::{Scalar, Tensor};

pub const MIN_INPUT: usize = 32;
const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const EXPANSION: usize = 4;
/// Small classifier init keeps initial logits near uniform; a He-normal
/// head on unpooled 1x1 features starts far above `ln K`.
pub const CLASSIFIER_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// 50 or 101.
    pub depth: usize,
    pub num_classes: usize,
    pub width_mult: f64,
    /// CBAM inside every bottleneck.
    pub cbam: bool,
    /// Swap convolution orders: downsampling stride on the 3x3 instead of the leading 1x1.
    pub sco: bool,
    /// Replace the 7x7 stem convolution with three 3x3 convolutions.
    pub replace_stem: bool,
    /// Average-pool before the 1x1 projection shortcut, which then runs at stride 1.
    pub modify_shortcut: bool,
    /// Replace the stride-2 3x3 max pool with a stride-2 3x3 convolution.
    pub replace_maxpool: bool,
    pub cbam_ratio: usize,
    pub spatial_kernel: usize,
    pub dropout_rate: f64,
    /// Literal reading of the swap: stride stays on the 1x1 even with `sco`.
    pub sco_literal: bool,
    /// Rectifier at the end of the average-pool projection shortcut.
    pub shortcut_relu: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::resnet50_plus(3)
    }
}

impl ModelConfig {
    /// Vanilla ResNet50: every ResNet-D/CBAM flag off.
    pub fn resnet50(num_classes: usize) -> Self {
        Self {
            depth: 50,
            num_classes,
            width_mult: 1.0,
            cbam: false,
            sco: false,
            replace_stem: false,
            modify_shortcut: false,
            replace_maxpool: false,
            cbam_ratio: DEFAULT_RATIO,
            spatial_kernel: DEFAULT_SPATIAL_KERNEL,
            dropout_rate: 0.5,
            sco_literal: false,
            shortcut_relu: false,
        }
    }

    /// ResNet50+: every flag on.
    pub fn resnet50_plus(num_classes: usize) -> Self {
        Self {
            cbam: true,
            sco: true,
            replace_stem: true,
            modify_shortcut: true,
            replace_maxpool: true,
            ..Self::resnet50(num_classes)
        }
    }

    pub fn with_width(mut self, width_mult: f64) -> Self {
        self.width_mult = width_mult;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn stage_plan(&self) -> Result<[usize; 4]> {
        match self.depth {
            50 => Ok([3, 4, 6, 3]),
            101 => Ok([3, 4, 23, 3]),
            d => Err(arg_err!("unsupported depth {} (expected 50 or 101)", d)),
        }
    }

    pub fn scaled(&self, channels: usize) -> usize {
        ((channels as f64 * self.width_mult).round() as usize).max(1)
    }

    pub fn stem_channels(&self) -> usize {
        self.scaled(64)
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.scaled(STAGE_WIDTHS[stage])
    }

    pub fn feature_channels(&self) -> usize {
        EXPANSION * self.stage_width(3)
    }

    pub fn validate(&self) -> Result<()> {
        self.stage_plan()?;
        if self.num_classes < 2 {
            return Err(arg_err!("num_classes must be >= 2"));
        }
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return Err(arg_err!("width_mult must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(arg_err!("dropout_rate must lie in [0, 1)"));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(arg_err!("spatial_kernel must be odd"));
        }
        if self.cbam {
            for stage in 0..4 {
                let c = EXPANSION * self.stage_width(stage);
                if self.cbam_ratio == 0 || c < self.cbam_ratio || c % self.cbam_ratio != 0 {
                    return Err(arg_err!(
                        "CBAM ratio {} incompatible with {} channels in stage {}",
                        self.cbam_ratio,
                        c,
                        stage + 1
                    ));
                }
            }
        }
        Ok(())
    }

    /// Compact flag label such as `cbam+sco+rc+ms+mp`.
    pub fn flag_label(&self) -> String {
        let flags = [
            (self.cbam, "cbam"),
            (self.sco, "sco"),
            (self.replace_stem, "rc"),
            (self.modify_shortcut, "ms"),
            (self.replace_maxpool, "mp"),
        ];
        let on: Vec<&str> = flags.iter().filter(|(f, _)| *f).map(|(_, n)| *n).collect();
        if on.is_empty() {
            "baseline".into()
        } else {
            on.join("+")
        }
    }
}

/// Conv, batch norm, optional rectifier.
#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        relu: bool,
    ) -> Self {
        b.scoped(name, |b| Self {
            conv: Conv2d::same(b, "conv", cin, cout, k, stride),
            bn: BatchNorm2d::new(b, "bn", cout),
            relu,
        })
    }

    fn num_params(&self) -> usize {
        self.conv.num_params() + self.bn.num_params()
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(if self.relu { g.tape.relu(y) } else { y })
    }
}

#[derive(Debug, Clone)]
pub struct Stem {
    convs: Vec<ConvBn>,
    /// `None` means the stride-2 3x3 max pool.
    pool_conv: Option<ConvBn>,
}

impl Stem {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Self {
        b.scoped("stem", |b| {
            let out = cfg.stem_channels();
            let convs = if cfg.replace_stem {
                let mid = cfg.scaled(32);
                vec![
                    ConvBn::new(b, "conv1", 3, mid, 3, 2, true),
                    ConvBn::new(b, "conv2", mid, mid, 3, 1, true),
                    ConvBn::new(b, "conv3", mid, out, 3, 1, true),
                ]
            } else {
                vec![ConvBn::new(b, "conv1", 3, out, 7, 2, true)]
            };
            let pool_conv = cfg
                .replace_maxpool
                .then(|| ConvBn::new(b, "pool_conv", out, out, 3, 2, true));
            Self { convs, pool_conv }
        })
    }

    fn num_params(&self) -> usize {
        self.convs.iter().map(ConvBn::num_params).sum::<usize>()
            + self.pool_conv.as_ref().map_or(0, ConvBn::num_params)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.tape.value(x).dims4()?;
        if c != 3 {
            return Err(dim_err!("stem expects 3 input channels, got {}", c));
        }
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(dim_err!(
                "input {}x{} smaller than the minimum {}x{}",
                h,
                w,
                MIN_INPUT,
                MIN_INPUT
            ));
        }
        let mut y = x;
        for conv in &self.convs {
            y = conv.forward(g, y)?;
        }
        match &self.pool_conv {
            Some(conv) => conv.forward(g, y),
            None => g.tape.pool2d(y, PoolKind::Max, 3, 2, 1),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Shortcut {
    Identity,
    /// 1x1 convolution at the block stride, then batch norm.
    Projection { conv: Conv2d, bn: BatchNorm2d },
    /// 2x2/2 average pool (when downsampling), 1x1 convolution at stride 1, batch norm.
    AvgPoolProjection {
        pool: bool,
        conv: Conv2d,
        bn: BatchNorm2d,
        relu: bool,
    },
}

impl Shortcut {
    fn num_params(&self) -> usize {
        match self {
            Shortcut::Identity => 0,
            Shortcut::Projection { conv, bn } | Shortcut::AvgPoolProjection { conv, bn, .. } => {
                conv.num_params() + bn.num_params()
            }
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self {
            Shortcut::Identity => Ok(x),
            Shortcut::Projection { conv, bn } => {
                let y = conv.forward(g, x)?;
                bn.forward(g, y)
            }
            Shortcut::AvgPoolProjection { pool, conv, bn, relu } => {
                let mut y = x;
                if *pool {
                    let (_, _, h, w) = g.tape.value(x).dims4()?;
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(dim_err!(
                            "average-pool shortcut needs even spatial extent, got {}x{}",
                            h,
                            w
                        ));
                    }
                    y = g.tape.pool2d(y, PoolKind::Avg, 2, 2, 0)?;
                }
                let y = conv.forward(g, y)?;
                let y = bn.forward(g, y)?;
                Ok(if *relu { g.tape.relu(y) } else { y })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub conv3: Conv2d,
    pub bn3: BatchNorm2d,
    pub cbam: Option<Cbam>,
    pub shortcut: Shortcut,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl Bottleneck {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cfg: &ModelConfig,
        in_channels: usize,
        width: usize,
        stride: usize,
    ) -> Result<Self> {
        let out_channels = EXPANSION * width;
        let stride_on_3x3 = cfg.sco && !cfg.sco_literal;
        let (s1, s2) = if stride_on_3x3 { (1, stride) } else { (stride, 1) };
        b.scoped(name, |b| {
            let conv1 = Conv2d::same(b, "conv1", in_channels, width, 1, s1);
            let bn1 = BatchNorm2d::new(b, "bn1", width);
            let conv2 = Conv2d::same(b, "conv2", width, width, 3, s2);
            let bn2 = BatchNorm2d::new(b, "bn2", width);
            let conv3 = Conv2d::same(b, "conv3", width, out_channels, 1, 1);
            let bn3 = BatchNorm2d::new(b, "bn3", out_channels);
            let cbam = if cfg.cbam {
                Some(Cbam::new(b, "cbam", out_channels, cfg.cbam_ratio, cfg.spatial_kernel)?)
            } else {
                None
            };
            let shortcut = if stride == 1 && in_channels == out_channels {
                Shortcut::Identity
            } else {
                b.scoped("shortcut", |b| {
                    if cfg.modify_shortcut {
                        Shortcut::AvgPoolProjection {
                            pool: stride > 1,
                            conv: Conv2d::same(b, "conv", in_channels, out_channels, 1, 1),
                            bn: BatchNorm2d::new(b, "bn", out_channels),
                            relu: cfg.shortcut_relu,
                        }
                    } else {
                        Shortcut::Projection {
                            conv: Conv2d::same(b, "conv", in_channels, out_channels, 1, stride),
                            bn: BatchNorm2d::new(b, "bn", out_channels),
                        }
                    }
                })
            };
            Ok(Self {
                conv1,
                bn1,
                conv2,
                bn2,
                conv3,
                bn3,
                cbam,
                shortcut,
                in_channels,
                out_channels,
                stride,
            })
        })
    }

    pub fn num_params(&self) -> usize {
        [&self.conv1, &self.conv2, &self.conv3]
            .iter()
            .map(|c| c.num_params())
            .sum::<usize>()
            + [&self.bn1, &self.bn2, &self.bn3]
                .iter()
                .map(|bn| bn.num_params())
                .sum::<usize>()
            + self.cbam.as_ref().map_or(0, Cbam::num_params)
            + self.shortcut.num_params()
    }

    /// Main path (gated by CBAM when present) before the residual addition.
    pub fn residual<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, c, _, _) = g.tape.value(x).dims4()?;
        if c != self.in_channels {
            return Err(dim_err!(
                "bottleneck expects {} channels, got {}",
                self.in_channels,
                c
            ));
        }
        let y = self.conv1.forward(g, x)?;
        let y = self.bn1.forward(g, y)?;
        let y = g.tape.relu(y);
        let y = self.conv2.forward(g, y)?;
        let y = self.bn2.forward(g, y)?;
        let y = g.tape.relu(y);
        let y = self.conv3.forward(g, y)?;
        let y = self.bn3.forward(g, y)?;
        match &self.cbam {
            Some(cbam) => cbam.forward(g, y),
            None => Ok(y),
        }
    }

    /// Sum of shortcut and gated main path, before the final rectifier.
    pub fn pre_activation<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let main = self.residual(g, x)?;
        let short = self.shortcut.forward(g, x)?;
        let (ms, ss) = (g.tape.value(main).shape(), g.tape.value(short).shape());
        if ms != ss {
            return Err(dim_err!(
                "residual branch {:?} does not match shortcut {:?}",
                ms,
                ss
            ));
        }
        g.tape.add(short, main)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.pre_activation(g, x)?;
        Ok(g.tape.relu(y))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub stem: usize,
    pub stages: Vec<usize>,
    /// Portion of `stages` contributed by CBAM modules.
    pub cbam: usize,
    pub head: usize,
}

/// A built network together with its registry and raw weights.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    registry: Registry,
    state: ModelState<T>,
    pub stem: Stem,
    pub stages: Vec<Vec<Bottleneck>>,
    dropout: Dropout,
    fc: Linear,
}

impl<T: Scalar> Model<T> {
    /// Builds the network described by `config` with He-initialized weights
    /// drawn from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut registry = Registry::default();
        let mut state = ModelState {
            params: Vec::new(),
            buffers: Vec::new(),
        };
        let mut b = ParamBuilder::new(&mut registry, &mut state, &mut rng);
        let stem = Stem::new(&mut b, config);
        let mut stages = Vec::with_capacity(4);
        let mut channels = config.stem_channels();
        for (s, &blocks) in config.stage_plan()?.iter().enumerate() {
            let width = config.stage_width(s);
            let stage = b.scoped(&format!("stage{}", s + 1), |b| {
                (0..blocks)
                    .map(|i| {
                        let stride = if s > 0 && i == 0 { 2 } else { 1 };
                        let block = Bottleneck::new(b, &format!("block{}", i + 1), config, channels, width, stride)?;
                        channels = block.out_channels;
                        Ok(block)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            stages.push(stage);
        }
        let fc = Linear::with_std(&mut b, "fc", channels, config.num_classes, CLASSIFIER_INIT_STD);
        let dropout = Dropout::new(config.dropout_rate)?;
        Ok(Self {
            config: config.clone(),
            registry,
            state,
            stem,
            stages,
            dropout,
            fc,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn state(&self) -> &ModelState<T> {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut ModelState<T> {
        &mut self.state
    }

    pub fn set_state(&mut self, state: ModelState<T>) -> Result<()> {
        if !self.state.same_layout(&state) {
            return Err(dim_err!("state layout does not match the model"));
        }
        self.state = state;
        Ok(())
    }

    pub fn fc(&self) -> &Linear {
        &self.fc
    }

    /// Forward pass on the state bound in `g`: stem, four stages, global
    /// average pool, dropout (train only), fully connected.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let features = self.features(g, x)?;
        let pooled = g.tape.global_pool(features, PoolKind::Avg)?;
        let (n, c, _, _) = g.tape.value(pooled).dims4()?;
        let flat = g.tape.reshape(pooled, &[n, c])?;
        let dropped = self.dropout.forward(g, flat)?;
        self.fc.forward(g, dropped)
    }

    /// Final feature map before pooling.
    pub fn features(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.stem.forward(g, x)?;
        for stage in &self.stages {
            for block in stage {
                y = block.forward(g, y)?;
            }
        }
        Ok(y)
    }

    /// Eval-mode logits using `state` (raw or EMA weights).
    pub fn logits_with(&self, state: &ModelState<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(state, Mode::Eval, false);
        let input = g.input(x.clone());
        let out = self.forward(&mut g, input)?;
        Ok(g.tape.value(out).clone())
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits_with(&self.state, x)
    }

    pub fn param_count(&self) -> ParamCount {
        let stages: Vec<usize> = self
            .stages
            .iter()
            .map(|s| s.iter().map(Bottleneck::num_params).sum())
            .collect();
        let cbam = self
            .stages
            .iter()
            .flatten()
            .filter_map(|b| b.cbam.as_ref())
            .map(Cbam::num_params)
            .sum();
        let stem = self.stem.num_params();
        let head = self.fc.num_params();
        ParamCount {
            total: stem + stages.iter().sum::<usize>() + head,
            stem,
            stages,
            cbam,
            head,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            registry: self.registry.clone(),
            state: self.state.cast(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            dropout: self.dropout.clone(),
            fc: self.fc.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk(cfg: ModelConfig) -> ModelConfig {
        cfg.with_width(0.25)
    }

    #[test]
    fn stage_plans() {
        assert_eq!(ModelConfig::resnet50(3).stage_plan().unwrap(), [3, 4, 6, 3]);
        assert_eq!(ModelConfig::resnet50(3).with_depth(101).stage_plan().unwrap(), [3, 4, 23, 3]);
        assert!(ModelConfig::resnet50(3).with_depth(34).stage_plan().is_err());
    }

    #[test]
    fn cbam_in_every_block() {
        let m = Model::<f32>::build(&ModelConfig::resnet50_plus(3), 0).unwrap();
        let blocks: Vec<_> = m.stages.iter().flatten().collect();
        assert_eq!(m.stages.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 4, 6, 3]);
        assert_eq!(blocks.len(), 16);
        assert!(blocks.iter().all(|b| b.cbam.is_some()));
    }

    #[test]
    fn param_count_agrees_with_state() {
        for cfg in [ModelConfig::resnet50(3), ModelConfig::resnet50_plus(3)] {
            let m = Model::<f32>::build(&desk(cfg), 1).unwrap();
            assert_eq!(m.param_count().total, m.state().num_scalars());
        }
    }

    #[test]
    fn identity_shortcut_only_when_shape_preserved() {
        let m = Model::<f32>::build(&desk(ModelConfig::resnet50_plus(3)), 0).unwrap();
        for (s, stage) in m.stages.iter().enumerate() {
            for (i, block) in stage.iter().enumerate() {
                let identity = matches!(block.shortcut, Shortcut::Identity);
                assert_eq!(identity, i > 0, "stage {s} block {i}");
                if let Shortcut::AvgPoolProjection { pool, .. } = block.shortcut {
                    assert_eq!(pool, s > 0);
                }
            }
        }
    }

    #[test]
    fn too_small_input_is_rejected() {
        let m = Model::<f32>::build(&desk(ModelConfig::resnet50_plus(3)), 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        assert!(matches!(m.logits(&x), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = desk(ModelConfig::resnet50_plus(3));
        cfg.cbam_ratio = 128;
        assert!(Model::<f32>::build(&cfg, 0).is_err());
        let mut cfg = desk(ModelConfig::resnet50_plus(3));
        cfg.spatial_kernel = 6;
        assert!(Model::<f32>::build(&cfg, 0).is_err());
        assert!(Model::<f32>::build(&ModelConfig::resnet50(1), 0).is_err());
    }
}
