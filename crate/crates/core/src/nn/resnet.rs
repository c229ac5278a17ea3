use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{join, BatchNorm2d, Conv2d, GlobalAvgPool, Layer, Linear, MaxPool2d, NnError, Relu, Scalar, Slot, Tensor};

/// Residual network depth from the standard family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Depth {
    D18,
    D34,
    D50,
    D101,
}

impl Depth {
    pub fn layers(self) -> u32 {
        match self {
            Depth::D18 => 18,
            Depth::D34 => 34,
            Depth::D50 => 50,
            Depth::D101 => 101,
        }
    }

    /// Blocks per stage.
    pub fn stage_plan(self) -> [usize; 4] {
        match self {
            Depth::D18 => [2, 2, 2, 2],
            Depth::D34 | Depth::D50 => [3, 4, 6, 3],
            Depth::D101 => [3, 4, 23, 3],
        }
    }

    pub fn uses_bottleneck(self) -> bool {
        matches!(self, Depth::D50 | Depth::D101)
    }
}

impl TryFrom<u32> for Depth {
    type Error = String;

    fn try_from(v: u32) -> Result<Self, Self::Error> {
        match v {
            18 => Ok(Depth::D18),
            34 => Ok(Depth::D34),
            50 => Ok(Depth::D50),
            101 => Ok(Depth::D101),
            _ => Err(format!("unsupported depth {v} (expected 18, 34, 50 or 101)")),
        }
    }
}

impl From<Depth> for u32 {
    fn from(d: Depth) -> u32 {
        d.layers()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub depth: Depth,
    /// Scales every channel count; 1.0 is the standard network.
    pub width_multiplier: f64,
    pub in_channels: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: Depth::D50,
            width_multiplier: 1.0,
            in_channels: 2,
            n_classes: 13,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(NnError::Config(format!("width_multiplier {} outside (0, 1]", self.width_multiplier)));
        }
        if !(1..=2).contains(&self.in_channels) {
            return Err(NnError::Config(format!("in_channels {} (expected 1 or 2)", self.in_channels)));
        }
        if self.n_classes < 2 {
            return Err(NnError::Config(format!("n_classes {} (need at least 2)", self.n_classes)));
        }
        Ok(())
    }

    fn scaled(&self, channels: usize) -> usize {
        ((channels as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn stem_width(&self) -> usize {
        self.scaled(64)
    }

    /// Inner width of each stage (bottleneck blocks expand it 4×).
    pub fn stage_widths(&self) -> [usize; 4] {
        [64, 128, 256, 512].map(|c| self.scaled(c))
    }

    pub fn feature_width(&self) -> usize {
        let w = self.stage_widths()[3];
        if self.depth.uses_bottleneck() {
            w * Bottleneck::<f32>::EXPANSION
        } else {
            w
        }
    }
}

fn needs_projection(in_c: usize, out_c: usize, stride: usize) -> bool {
    stride != 1 || in_c != out_c
}

#[derive(Debug, Clone)]
struct Shortcut<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

impl<T: Scalar> Shortcut<T> {
    fn new(in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(in_c, out_c, 1, stride, 0, rng),
            bn: BatchNorm2d::new(out_c),
        }
    }

    fn forward_train(shortcut: &mut Option<Self>, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        match shortcut {
            Some(s) => {
                let y = s.conv.forward_train(x)?;
                s.bn.forward_train(&y)
            }
            None => Ok(x.clone()),
        }
    }

    fn backward(shortcut: &mut Option<Self>, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        match shortcut {
            Some(s) => {
                let g = s.bn.backward(grad)?;
                s.conv.backward(&g)
            }
            None => Ok(grad.clone()),
        }
    }

    fn infer(shortcut: &Option<Self>, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        match shortcut {
            Some(s) => s.bn.infer(&s.conv.infer(x)?),
            None => Ok(x.clone()),
        }
    }

    fn visit_mut(shortcut: &mut Option<Self>, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        if let Some(s) = shortcut {
            s.conv.visit_mut(&join(prefix, "downsample.0"), f);
            s.bn.visit_mut(&join(prefix, "downsample.1"), f);
        }
    }
}

/// Two 3×3 convolutions with an identity or projected shortcut.
#[derive(Debug, Clone)]
pub struct BasicBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    shortcut: Option<Shortcut<T>>,
    relu_out: Relu<T>,
}

impl<T: Scalar> BasicBlock<T> {
    pub fn new(in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(in_c, out_c, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(out_c),
            relu1: Relu::new(),
            conv2: Conv2d::new(out_c, out_c, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(out_c),
            shortcut: needs_projection(in_c, out_c, stride).then(|| Shortcut::new(in_c, out_c, stride, rng)),
            relu_out: Relu::new(),
        }
    }

    pub fn has_projection(&self) -> bool {
        self.shortcut.is_some()
    }
}

impl<T: Scalar> Layer<T> for BasicBlock<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let a = self.conv1.forward_train(x)?;
        let a = self.bn1.forward_train(&a)?;
        let a = self.relu1.forward_train(&a)?;
        let b = self.conv2.forward_train(&a)?;
        let b = self.bn2.forward_train(&b)?;
        let s = Shortcut::forward_train(&mut self.shortcut, x)?;
        self.relu_out.forward_train(&b.add(&s)?)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let g = self.relu_out.backward(grad)?;
        let d = self.bn2.backward(&g)?;
        let d = self.conv2.backward(&d)?;
        let d = self.relu1.backward(&d)?;
        let d = self.bn1.backward(&d)?;
        let dx = self.conv1.backward(&d)?;
        dx.add(&Shortcut::backward(&mut self.shortcut, &g)?)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let a = self.relu1.infer(&self.bn1.infer(&self.conv1.infer(x)?)?)?;
        let b = self.bn2.infer(&self.conv2.infer(&a)?)?;
        self.relu_out.infer(&b.add(&Shortcut::infer(&self.shortcut, x)?)?)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        Shortcut::visit_mut(&mut self.shortcut, prefix, f);
    }
}

/// 1×1 reduce, 3×3 (carrying the stride), 1×1 expand.
#[derive(Debug, Clone)]
pub struct Bottleneck<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    relu2: Relu<T>,
    pub conv3: Conv2d<T>,
    pub bn3: BatchNorm2d<T>,
    shortcut: Option<Shortcut<T>>,
    relu_out: Relu<T>,
}

impl<T: Scalar> Bottleneck<T> {
    pub const EXPANSION: usize = 4;

    pub fn new(in_c: usize, mid: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let out_c = mid * Self::EXPANSION;
        Self {
            conv1: Conv2d::new(in_c, mid, 1, 1, 0, rng),
            bn1: BatchNorm2d::new(mid),
            relu1: Relu::new(),
            conv2: Conv2d::new(mid, mid, 3, stride, 1, rng),
            bn2: BatchNorm2d::new(mid),
            relu2: Relu::new(),
            conv3: Conv2d::new(mid, out_c, 1, 1, 0, rng),
            bn3: BatchNorm2d::new(out_c),
            shortcut: needs_projection(in_c, out_c, stride).then(|| Shortcut::new(in_c, out_c, stride, rng)),
            relu_out: Relu::new(),
        }
    }

    pub fn has_projection(&self) -> bool {
        self.shortcut.is_some()
    }
}

impl<T: Scalar> Layer<T> for Bottleneck<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let a = self.conv1.forward_train(x)?;
        let a = self.bn1.forward_train(&a)?;
        let a = self.relu1.forward_train(&a)?;
        let a = self.conv2.forward_train(&a)?;
        let a = self.bn2.forward_train(&a)?;
        let a = self.relu2.forward_train(&a)?;
        let a = self.conv3.forward_train(&a)?;
        let a = self.bn3.forward_train(&a)?;
        let s = Shortcut::forward_train(&mut self.shortcut, x)?;
        self.relu_out.forward_train(&a.add(&s)?)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let g = self.relu_out.backward(grad)?;
        let d = self.bn3.backward(&g)?;
        let d = self.conv3.backward(&d)?;
        let d = self.relu2.backward(&d)?;
        let d = self.bn2.backward(&d)?;
        let d = self.conv2.backward(&d)?;
        let d = self.relu1.backward(&d)?;
        let d = self.bn1.backward(&d)?;
        let dx = self.conv1.backward(&d)?;
        dx.add(&Shortcut::backward(&mut self.shortcut, &g)?)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let a = self.relu1.infer(&self.bn1.infer(&self.conv1.infer(x)?)?)?;
        let a = self.relu2.infer(&self.bn2.infer(&self.conv2.infer(&a)?)?)?;
        let a = self.bn3.infer(&self.conv3.infer(&a)?)?;
        self.relu_out.infer(&a.add(&Shortcut::infer(&self.shortcut, x)?)?)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        self.bn3.visit_mut(&join(prefix, "bn3"), f);
        Shortcut::visit_mut(&mut self.shortcut, prefix, f);
    }
}

#[derive(Debug, Clone)]
pub enum Block<T> {
    Basic(BasicBlock<T>),
    Bottleneck(Bottleneck<T>),
}

impl<T: Scalar> Layer<T> for Block<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        match self {
            Block::Basic(b) => b.forward_train(x),
            Block::Bottleneck(b) => b.forward_train(x),
        }
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        match self {
            Block::Basic(b) => b.backward(grad),
            Block::Bottleneck(b) => b.backward(grad),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        match self {
            Block::Basic(b) => b.infer(x),
            Block::Bottleneck(b) => b.infer(x),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        match self {
            Block::Basic(b) => b.visit_mut(prefix, f),
            Block::Bottleneck(b) => b.visit_mut(prefix, f),
        }
    }
}

/// Residual CNN: 7×7/2 stem, 3×3/2 max-pool, four stages, global average
/// pool and a linear head producing `n_classes` logits.
#[derive(Debug, Clone)]
pub struct ResNet<T> {
    config: ModelConfig,
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu: Relu<T>,
    maxpool: MaxPool2d,
    blocks: Vec<(String, Block<T>)>,
    pool: GlobalAvgPool,
    fc: Linear<T>,
}

impl<T: Scalar> ResNet<T> {
    /// Freshly initialised network; `seed` fixes every initial weight.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = config.stem_width();
        let conv1 = Conv2d::new(config.in_channels, stem, 7, 2, 3, &mut rng);
        let mut blocks = Vec::new();
        let mut in_c = stem;
        for (stage, (&count, &width)) in config.depth.stage_plan().iter().zip(&config.stage_widths()).enumerate() {
            for i in 0..count {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let block = if config.depth.uses_bottleneck() {
                    let b = Bottleneck::new(in_c, width, stride, &mut rng);
                    in_c = width * Bottleneck::<T>::EXPANSION;
                    Block::Bottleneck(b)
                } else {
                    let b = BasicBlock::new(in_c, width, stride, &mut rng);
                    in_c = width;
                    Block::Basic(b)
                };
                blocks.push((format!("layer{}.{i}", stage + 1), block));
            }
        }
        let fc = Linear::new(in_c, config.n_classes, &mut rng);
        Ok(Self {
            config,
            conv1,
            bn1: BatchNorm2d::new(stem),
            relu: Relu::new(),
            maxpool: MaxPool2d::new(3, 2, 1),
            blocks,
            pool: GlobalAvgPool::new(),
            fc,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, &Block<T>)> {
        self.blocks.iter().map(|(n, b)| (n.as_str(), b))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), NnError> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(NnError::ChannelMismatch {
                expected: self.config.in_channels,
                got: c,
            });
        }
        Ok(())
    }

    /// Evaluation-mode class probabilities, `[N, n_classes]`.
    pub fn predict_proba(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        super::softmax_rows(&self.infer(x)?)
    }

    /// Every named tensor (parameters and buffers) in a fixed order.
    pub fn named_tensors(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |name, slot| {
            let t = match slot {
                Slot::Param(p) => p.value.clone(),
                Slot::Buffer(b) => b.clone(),
            };
            out.push((name.to_string(), t));
        });
        out
    }
}

impl<T: Scalar> Layer<T> for ResNet<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.check_input(x)?;
        let a = self.conv1.forward_train(x)?;
        let a = self.bn1.forward_train(&a)?;
        let a = self.relu.forward_train(&a)?;
        let mut a = Layer::<T>::forward_train(&mut self.maxpool, &a)?;
        for (_, b) in &mut self.blocks {
            a = b.forward_train(&a)?;
        }
        let a = Layer::<T>::forward_train(&mut self.pool, &a)?;
        self.fc.forward_train(&a)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let g = self.fc.backward(grad)?;
        let mut g = Layer::<T>::backward(&mut self.pool, &g)?;
        for (_, b) in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        let g = Layer::<T>::backward(&mut self.maxpool, &g)?;
        let g = self.relu.backward(&g)?;
        let g = self.bn1.backward(&g)?;
        self.conv1.backward(&g)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.check_input(x)?;
        let a = self.relu.infer(&self.bn1.infer(&self.conv1.infer(x)?)?)?;
        let mut a = Layer::<T>::infer(&self.maxpool, &a)?;
        for (_, b) in &self.blocks {
            a = b.infer(&a)?;
        }
        self.fc.infer(&Layer::<T>::infer(&self.pool, &a)?)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        for (name, b) in &mut self.blocks {
            b.visit_mut(&join(prefix, name), f);
        }
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}
