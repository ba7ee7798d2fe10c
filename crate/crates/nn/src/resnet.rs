use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Act, Backbone, BatchNorm2d, Conv2d, GlobalAvgPool, MaxPool2d, NnError, Param, Relu, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemKind {
    /// 3×3 stride-1 convolution, for 32×32 inputs.
    Cifar,
    /// 7×7 stride-2 convolution followed by 3×3 stride-2 max pooling.
    ImageNet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub stem: StemKind,
    /// Output channels per stage. Every stage after the first halves resolution.
    pub widths: Vec<usize>,
    /// Basic blocks per stage.
    pub blocks: Vec<usize>,
}

impl ResNetConfig {
    pub fn from_name(name: &str, base_width: Option<usize>) -> Result<Self> {
        let (stem, base, blocks) = match name {
            "resnet8" => (StemKind::Cifar, 16, vec![1, 1, 1]),
            "resnet20" => (StemKind::Cifar, 16, vec![3, 3, 3]),
            "resnet32" => (StemKind::Cifar, 16, vec![5, 5, 5]),
            "resnet18" => (StemKind::ImageNet, 64, vec![2, 2, 2, 2]),
            other => return Err(NnError::UnknownBackbone(other.to_string())),
        };
        let base = base_width.unwrap_or(base);
        let widths = (0..blocks.len()).map(|i| base << i).collect();
        Ok(Self { stem, widths, blocks })
    }
}

/// Two 3×3 convolutions with a residual connection; the shortcut is a 1×1
/// projection whenever shape changes.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
    relu_out: Relu,
}

impl BasicBlock {
    pub fn new(in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let shortcut = (stride != 1 || in_c != out_c)
            .then(|| (Conv2d::new(in_c, out_c, 1, stride, 0, rng), BatchNorm2d::new(out_c)));
        Self {
            conv1: Conv2d::new(in_c, out_c, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(out_c),
            relu1: Relu::default(),
            conv2: Conv2d::new(out_c, out_c, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(out_c),
            shortcut,
            relu_out: Relu::default(),
        }
    }

    pub fn forward(&self, x: &Act) -> Act {
        let h = Relu::forward(&self.bn1.forward(&self.conv1.forward(x)));
        let mut h = self.bn2.forward(&self.conv2.forward(&h));
        match &self.shortcut {
            Some((conv, bn)) => h.add_assign(&bn.forward(&conv.forward(x))),
            None => h.add_assign(x),
        }
        Relu::forward(&h)
    }

    pub fn forward_train(&mut self, x: &Act) -> Act {
        let h = self.conv1.forward_train(x);
        let h = self.bn1.forward_train(&h);
        let h = self.relu1.forward_train(&h);
        let h = self.conv2.forward_train(&h);
        let mut h = self.bn2.forward_train(&h);
        match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward_train(x);
                h.add_assign(&bn.forward_train(&s));
            }
            None => h.add_assign(x),
        }
        self.relu_out.forward_train(&h)
    }

    pub fn backward(&mut self, dy: &Act) -> Act {
        let d = self.relu_out.backward(dy);
        let g = self.bn2.backward(&d);
        let g = self.conv2.backward(&g);
        let g = self.relu1.backward(&g);
        let g = self.bn1.backward(&g);
        let mut dx = self.conv1.backward(&g);
        match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = bn.backward(&d);
                dx.add_assign(&conv.backward(&s));
            }
            None => dx.add_assign(&d),
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.conv1.weight);
        f(&mut self.bn1.gamma);
        f(&mut self.bn1.beta);
        f(&mut self.conv2.weight);
        f(&mut self.bn2.gamma);
        f(&mut self.bn2.beta);
        if let Some((conv, bn)) = &mut self.shortcut {
            f(&mut conv.weight);
            f(&mut bn.gamma);
            f(&mut bn.beta);
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        f(&format!("{prefix}.conv1.weight"), &mut self.conv1.weight.value);
        visit_bn(&format!("{prefix}.bn1"), &mut self.bn1, f);
        f(&format!("{prefix}.conv2.weight"), &mut self.conv2.weight.value);
        visit_bn(&format!("{prefix}.bn2"), &mut self.bn2, f);
        if let Some((conv, bn)) = &mut self.shortcut {
            f(&format!("{prefix}.shortcut.weight"), &mut conv.weight.value);
            visit_bn(&format!("{prefix}.shortcut.bn"), bn, f);
        }
    }

    fn clear_cache(&mut self) {
        self.conv1.clear_cache();
        self.bn1.clear_cache();
        self.relu1.clear_cache();
        self.conv2.clear_cache();
        self.bn2.clear_cache();
        self.relu_out.clear_cache();
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.clear_cache();
            bn.clear_cache();
        }
    }
}

fn visit_bn(prefix: &str, bn: &mut BatchNorm2d, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
    f(&format!("{prefix}.gamma"), &mut bn.gamma.value);
    f(&format!("{prefix}.beta"), &mut bn.beta.value);
    f(&format!("{prefix}.running_mean"), &mut bn.running_mean);
    f(&format!("{prefix}.running_var"), &mut bn.running_var);
}

/// Residual network ending in global average pooling.
#[derive(Clone, Debug)]
pub struct ResNet {
    name: String,
    pub config: ResNetConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stem_relu: Relu,
    stem_pool: Option<MaxPool2d>,
    blocks: Vec<BasicBlock>,
    pool: GlobalAvgPool,
}

impl ResNet {
    pub fn new(name: &str, config: ResNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = config.widths[0];
        let (stem_conv, stem_pool) = match config.stem {
            StemKind::Cifar => (Conv2d::new(3, first, 3, 1, 1, &mut rng), None),
            StemKind::ImageNet => {
                (Conv2d::new(3, first, 7, 2, 3, &mut rng), Some(MaxPool2d::new(3, 2, 1)))
            }
        };
        let mut blocks = Vec::new();
        let mut in_c = first;
        for (stage, (&width, &count)) in config.widths.iter().zip(&config.blocks).enumerate() {
            for b in 0..count {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(in_c, width, stride, &mut rng));
                in_c = width;
            }
        }
        Self {
            name: name.to_string(),
            stem_bn: BatchNorm2d::new(first),
            stem_conv,
            stem_relu: Relu::default(),
            stem_pool,
            blocks,
            pool: GlobalAvgPool::default(),
            config,
        }
    }
}

impl Backbone for ResNet {
    fn name(&self) -> &str {
        &self.name
    }

    fn feature_dim(&self) -> usize {
        *self.config.widths.last().expect("at least one stage")
    }

    fn forward_train(&mut self, x: &Act) -> Vec<f32> {
        let h = self.stem_conv.forward_train(x);
        let h = self.stem_bn.forward_train(&h);
        let mut h = self.stem_relu.forward_train(&h);
        if let Some(p) = &mut self.stem_pool {
            h = p.forward_train(&h);
        }
        for block in &mut self.blocks {
            h = block.forward_train(&h);
        }
        self.pool.forward_train(&h)
    }

    fn backward(&mut self, grad: &[f32]) {
        let mut g = self.pool.backward(grad);
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g);
        }
        if let Some(p) = &self.stem_pool {
            g = p.backward(&g);
        }
        let g = self.stem_relu.backward(&g);
        let g = self.stem_bn.backward(&g);
        // Input gradients are not needed; this call only accumulates weight grads.
        self.stem_conv.backward(&g);
    }

    fn forward_eval(&self, x: &Act) -> Vec<f32> {
        let mut h = Relu::forward(&self.stem_bn.forward(&self.stem_conv.forward(x)));
        if let Some(p) = &self.stem_pool {
            h = p.forward(&h);
        }
        for block in &self.blocks {
            h = block.forward(&h);
        }
        GlobalAvgPool::forward(&h)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.stem_conv.weight);
        f(&mut self.stem_bn.gamma);
        f(&mut self.stem_bn.beta);
        for block in &mut self.blocks {
            block.visit_params(f);
        }
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        f("stem.conv.weight", &mut self.stem_conv.weight.value);
        visit_bn("stem.bn", &mut self.stem_bn, f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_state(&format!("blocks.{i}"), f);
        }
    }

    fn clear_cache(&mut self) {
        self.stem_conv.clear_cache();
        self.stem_bn.clear_cache();
        self.stem_relu.clear_cache();
        if let Some(p) = &mut self.stem_pool {
            p.clear_cache();
        }
        for block in &mut self.blocks {
            block.clear_cache();
        }
    }

    fn clone_box(&self) -> Box<dyn Backbone> {
        Box::new(self.clone())
    }
}
