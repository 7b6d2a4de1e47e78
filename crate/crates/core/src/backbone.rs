//! 3D encoder backbones.
//!
//! Two families share one stage layout (stem, stage1..stage4) so freezing,
//! checkpointing, and fine-tuning schedules can address parts of either
//! network by name. Width scaling multiplies every channel count, which
//! keeps the tiny configurations used in tests structurally identical to the
//! full-size models.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    AvgPool3d, Conv3d, GlobalAvgPool, GroupNorm, MaxPool3d, ParamFn, Relu, Scalar, Tensor,
};

pub const STAGE_NAMES: [&str; 5] = ["stem", "stage1", "stage2", "stage3", "stage4"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BackboneKind {
    ResNet34,
    DenseNet121,
}

impl BackboneKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "resnet34_3d" => Ok(BackboneKind::ResNet34),
            "densenet121_3d" => Ok(BackboneKind::DenseNet121),
            other => Err(Error::validation(format!(
                "unknown backbone '{other}' (expected resnet34_3d or densenet121_3d)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackboneKind::ResNet34 => "resnet34_3d",
            BackboneKind::DenseNet121 => "densenet121_3d",
        }
    }
}

fn scaled(base: usize, width_scale: f64) -> usize {
    ((base as f64 * width_scale).round() as usize).max(1)
}

fn add_into<R: Scalar>(dst: &mut Tensor<R>, src: &Tensor<R>) {
    debug_assert_eq!(dst.shape, src.shape);
    for (d, &s) in dst.data.iter_mut().zip(&src.data) {
        *d = *d + s;
    }
}

/// Two 3x3x3 convolutions with a residual shortcut.
#[derive(Debug, Clone)]
struct BasicBlock<R> {
    conv1: Conv3d<R>,
    gn1: GroupNorm<R>,
    relu1: Relu<R>,
    conv2: Conv3d<R>,
    gn2: GroupNorm<R>,
    downsample: Option<(Conv3d<R>, GroupNorm<R>)>,
    relu_out: Relu<R>,
}

impl<R: Scalar> BasicBlock<R> {
    fn new(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, stride: usize) -> Self {
        let downsample = if stride != 1 || in_c != out_c {
            Some((
                Conv3d::new(rng, in_c, out_c, 1, stride, 0),
                GroupNorm::new(out_c),
            ))
        } else {
            None
        };
        BasicBlock {
            conv1: Conv3d::new(rng, in_c, out_c, 3, stride, 1),
            gn1: GroupNorm::new(out_c),
            relu1: Relu::new(),
            conv2: Conv3d::new(rng, out_c, out_c, 3, 1, 1),
            gn2: GroupNorm::new(out_c),
            downsample,
            relu_out: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor<R>) -> Tensor<R> {
        let shortcut = match &mut self.downsample {
            Some((conv, gn)) => gn.forward(&conv.forward(x)),
            None => x.clone(),
        };
        let h = self.relu1.forward(&self.gn1.forward(&self.conv1.forward(x)));
        let mut z = self.gn2.forward(&self.conv2.forward(&h));
        add_into(&mut z, &shortcut);
        self.relu_out.forward(&z)
    }

    fn backward(&mut self, dy: &Tensor<R>, need_dx: bool) -> Option<Tensor<R>> {
        let dz = self.relu_out.backward(dy);
        let dh = self
            .conv2
            .backward(&self.gn2.backward(&dz), true)
            .expect("main branch gradient");
        let dmain = self
            .conv1
            .backward(&self.gn1.backward(&self.relu1.backward(&dh)), need_dx);
        let dshort = match &mut self.downsample {
            Some((conv, gn)) => conv.backward(&gn.backward(&dz), need_dx),
            None => need_dx.then(|| dz.clone()),
        };
        match (dmain, dshort) {
            (Some(mut a), Some(b)) => {
                add_into(&mut a, &b);
                Some(a)
            }
            _ => None,
        }
    }

    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<R>) {
        self.conv1.for_each_param(&format!("{prefix}.conv1"), f);
        self.gn1.for_each_param(&format!("{prefix}.gn1"), f);
        self.conv2.for_each_param(&format!("{prefix}.conv2"), f);
        self.gn2.for_each_param(&format!("{prefix}.gn2"), f);
        if let Some((conv, gn)) = &mut self.downsample {
            conv.for_each_param(&format!("{prefix}.down.conv"), f);
            gn.for_each_param(&format!("{prefix}.down.gn"), f);
        }
    }
}

/// Shared stem: 7x7x7 stride-2 convolution, norm, relu, 3x3x3 stride-2 pool.
#[derive(Debug, Clone)]
struct Stem<R> {
    conv: Conv3d<R>,
    gn: GroupNorm<R>,
    relu: Relu<R>,
    pool: MaxPool3d,
}

impl<R: Scalar> Stem<R> {
    fn new(rng: &mut ChaCha8Rng, out_c: usize) -> Self {
        Stem {
            conv: Conv3d::new(rng, 1, out_c, 7, 2, 3),
            gn: GroupNorm::new(out_c),
            relu: Relu::new(),
            pool: MaxPool3d::new(3, 2, 1),
        }
    }

    fn forward(&mut self, x: &Tensor<R>) -> Tensor<R> {
        self.pool
            .forward(&self.relu.forward(&self.gn.forward(&self.conv.forward(x))))
    }

    fn backward(&mut self, dy: &Tensor<R>) {
        let d = self.relu.backward(&self.pool.backward(dy));
        // The stem touches raw input; nothing below needs a gradient.
        self.conv.backward(&self.gn.backward(&d), false);
    }

    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<R>) {
        self.conv.for_each_param(&format!("{prefix}.conv"), f);
        self.gn.for_each_param(&format!("{prefix}.gn"), f);
    }
}

/// One dense layer: bottleneck 1x1x1 to 4g channels, then 3x3x3 to g new
/// channels, concatenated onto the running feature map.
#[derive(Debug, Clone)]
struct DenseLayer<R> {
    gn1: GroupNorm<R>,
    relu1: Relu<R>,
    conv1: Conv3d<R>,
    gn2: GroupNorm<R>,
    relu2: Relu<R>,
    conv2: Conv3d<R>,
    in_channels: usize,
}

impl<R: Scalar> DenseLayer<R> {
    fn new(rng: &mut ChaCha8Rng, in_c: usize, growth: usize) -> Self {
        let mid = 4 * growth;
        DenseLayer {
            gn1: GroupNorm::new(in_c),
            relu1: Relu::new(),
            conv1: Conv3d::new(rng, in_c, mid, 1, 1, 0),
            gn2: GroupNorm::new(mid),
            relu2: Relu::new(),
            conv2: Conv3d::new(rng, mid, growth, 3, 1, 1),
            in_channels: in_c,
        }
    }

    fn forward(&mut self, x: &Tensor<R>) -> Tensor<R> {
        let h = self
            .conv1
            .forward(&self.relu1.forward(&self.gn1.forward(x)));
        let new = self.conv2.forward(&self.relu2.forward(&self.gn2.forward(&h)));
        concat_channels(x, &new)
    }

    /// Returns the gradient for this layer's input, combining the direct
    /// concat passthrough with the convolution branch.
    fn backward(&mut self, dy: &Tensor<R>, need_dx: bool) -> Option<Tensor<R>> {
        let (mut dx_direct, d_new) = split_channels(dy, self.in_channels);
        let dh = self
            .conv2
            .backward(&d_new, true)
            .expect("dense branch gradient");
        let d_branch = self
            .conv1
            .backward(&self.gn2.backward(&self.relu2.backward(&dh)), true)
            .expect("dense bottleneck gradient");
        let d_input = self.gn1.backward(&self.relu1.backward(&d_branch));
        if need_dx {
            add_into(&mut dx_direct, &d_input);
            Some(dx_direct)
        } else {
            // Weight gradients above are already accumulated.
            None
        }
    }

    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<R>) {
        self.gn1.for_each_param(&format!("{prefix}.gn1"), f);
        self.conv1.for_each_param(&format!("{prefix}.conv1"), f);
        self.gn2.for_each_param(&format!("{prefix}.gn2"), f);
        self.conv2.for_each_param(&format!("{prefix}.conv2"), f);
    }
}

fn concat_channels<R: Scalar>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    let (n, ca, cb) = (a.shape[0], a.shape[1], b.shape[1]);
    let sp: usize = a.shape[2..].iter().product();
    let mut shape = a.shape.clone();
    shape[1] = ca + cb;
    let mut out = Tensor::zeros(shape);
    for s in 0..n {
        let dst = &mut out.data[s * (ca + cb) * sp..(s + 1) * (ca + cb) * sp];
        dst[..ca * sp].copy_from_slice(&a.data[s * ca * sp..(s + 1) * ca * sp]);
        dst[ca * sp..].copy_from_slice(&b.data[s * cb * sp..(s + 1) * cb * sp]);
    }
    out
}

fn split_channels<R: Scalar>(x: &Tensor<R>, ca: usize) -> (Tensor<R>, Tensor<R>) {
    let (n, c) = (x.shape[0], x.shape[1]);
    let cb = c - ca;
    let sp: usize = x.shape[2..].iter().product();
    let mut shape_a = x.shape.clone();
    shape_a[1] = ca;
    let mut shape_b = x.shape.clone();
    shape_b[1] = cb;
    let mut a = Tensor::zeros(shape_a);
    let mut b = Tensor::zeros(shape_b);
    for s in 0..n {
        let src = &x.data[s * c * sp..(s + 1) * c * sp];
        a.data[s * ca * sp..(s + 1) * ca * sp].copy_from_slice(&src[..ca * sp]);
        b.data[s * cb * sp..(s + 1) * cb * sp].copy_from_slice(&src[ca * sp..]);
    }
    (a, b)
}

/// Norm-relu-1x1x1 halving convolution followed by 2x stride average pool.
#[derive(Debug, Clone)]
struct Transition<R> {
    gn: GroupNorm<R>,
    relu: Relu<R>,
    conv: Conv3d<R>,
    pool: AvgPool3d,
}

impl<R: Scalar> Transition<R> {
    fn new(rng: &mut ChaCha8Rng, in_c: usize) -> Self {
        Transition {
            gn: GroupNorm::new(in_c),
            relu: Relu::new(),
            conv: Conv3d::new(rng, in_c, in_c / 2, 1, 1, 0),
            pool: AvgPool3d::new(2),
        }
    }

    fn forward(&mut self, x: &Tensor<R>) -> Tensor<R> {
        self.pool
            .forward(&self.conv.forward(&self.relu.forward(&self.gn.forward(x))))
    }

    fn backward(&mut self, dy: &Tensor<R>, need_dx: bool) -> Option<Tensor<R>> {
        let d = self
            .conv
            .backward(&self.pool.backward(dy), need_dx)?;
        Some(self.gn.backward(&self.relu.backward(&d)))
    }

    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<R>) {
        self.gn.for_each_param(&format!("{prefix}.gn"), f);
        self.conv.for_each_param(&format!("{prefix}.conv"), f);
    }
}

#[derive(Debug, Clone)]
enum Stage<R> {
    Res(Vec<BasicBlock<R>>),
    /// Dense block plus optional transition (absent after the last block,
    /// where a final norm takes its place).
    Dense {
        layers: Vec<DenseLayer<R>>,
        transition: Option<Transition<R>>,
        final_gn: Option<(GroupNorm<R>, Relu<R>)>,
    },
}

impl<R: Scalar> Stage<R> {
    fn forward(&mut self, x: &Tensor<R>) -> Tensor<R> {
        match self {
            Stage::Res(blocks) => {
                let mut h = x.clone();
                for b in blocks {
                    h = b.forward(&h);
                }
                h
            }
            Stage::Dense {
                layers,
                transition,
                final_gn,
            } => {
                let mut h = x.clone();
                for l in layers {
                    h = l.forward(&h);
                }
                if let Some(t) = transition {
                    h = t.forward(&h);
                }
                if let Some((gn, relu)) = final_gn {
                    h = relu.forward(&gn.forward(&h));
                }
                h
            }
        }
    }

    fn backward(&mut self, dy: &Tensor<R>, need_dx: bool) -> Option<Tensor<R>> {
        match self {
            Stage::Res(blocks) => {
                let mut grad = dy.clone();
                for (i, b) in blocks.iter_mut().enumerate().rev() {
                    let need = need_dx || i > 0;
                    match b.backward(&grad, need) {
                        Some(g) => grad = g,
                        None => return None,
                    }
                }
                Some(grad)
            }
            Stage::Dense {
                layers,
                transition,
                final_gn,
            } => {
                let mut grad = dy.clone();
                if let Some((gn, relu)) = final_gn {
                    grad = gn.backward(&relu.backward(&grad));
                }
                if let Some(t) = transition {
                    grad = t.backward(&grad, true).expect("transition gradient");
                }
                for (i, l) in layers.iter_mut().enumerate().rev() {
                    let need = need_dx || i > 0;
                    match l.backward(&grad, need) {
                        Some(g) => grad = g,
                        None => return None,
                    }
                }
                Some(grad)
            }
        }
    }

    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<R>) {
        match self {
            Stage::Res(blocks) => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    b.for_each_param(&format!("{prefix}.block{i}"), f);
                }
            }
            Stage::Dense {
                layers,
                transition,
                final_gn,
            } => {
                for (i, l) in layers.iter_mut().enumerate() {
                    l.for_each_param(&format!("{prefix}.layer{i}"), f);
                }
                if let Some(t) = transition {
                    t.for_each_param(&format!("{prefix}.transition"), f);
                }
                if let Some((gn, _)) = final_gn {
                    gn.for_each_param(&format!("{prefix}.norm"), f);
                }
            }
        }
    }
}

/// Encoder: stem plus four stages plus global average pooling, producing a
/// flat feature vector per sample.
#[derive(Debug, Clone)]
pub struct Backbone<R> {
    pub kind: BackboneKind,
    pub width_scale: f64,
    stem: Stem<R>,
    stages: [Stage<R>; 4],
    gap: GlobalAvgPool,
    feature_dim: usize,
    /// Trainable flag per entry of [`STAGE_NAMES`].
    trainable: [bool; 5],
}

impl<R: Scalar> Backbone<R> {
    pub fn new(kind: BackboneKind, width_scale: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(width_scale > 0.0 && width_scale <= 4.0) {
            return Err(Error::validation(format!(
                "width scale must be in (0, 4], got {width_scale}"
            )));
        }
        let (stem, stages, feature_dim) = match kind {
            BackboneKind::ResNet34 => {
                let c: Vec<usize> = [64usize, 64, 128, 256, 512]
                    .iter()
                    .map(|&b| scaled(b, width_scale))
                    .collect();
                let stem = Stem::new(rng, c[0]);
                let counts = [3usize, 4, 6, 3];
                let mut stages = Vec::with_capacity(4);
                let mut in_c = c[0];
                for (si, &count) in counts.iter().enumerate() {
                    let out_c = c[si + 1];
                    let mut blocks = Vec::with_capacity(count);
                    for bi in 0..count {
                        let stride = if bi == 0 && si > 0 { 2 } else { 1 };
                        blocks.push(BasicBlock::new(rng, in_c, out_c, stride));
                        in_c = out_c;
                    }
                    stages.push(Stage::Res(blocks));
                }
                let dim = c[4];
                (stem, stages, dim)
            }
            BackboneKind::DenseNet121 => {
                let growth = scaled(32, width_scale);
                let init = scaled(64, width_scale);
                let stem = Stem::new(rng, init);
                let counts = [6usize, 12, 24, 16];
                let mut stages = Vec::with_capacity(4);
                let mut channels = init;
                for (si, &count) in counts.iter().enumerate() {
                    let mut layers = Vec::with_capacity(count);
                    for _ in 0..count {
                        layers.push(DenseLayer::new(rng, channels, growth));
                        channels += growth;
                    }
                    let last = si == counts.len() - 1;
                    let transition = if last {
                        None
                    } else {
                        let t = Transition::new(rng, channels);
                        channels /= 2;
                        Some(t)
                    };
                    let final_gn = last.then(|| (GroupNorm::new(channels), Relu::new()));
                    stages.push(Stage::Dense {
                        layers,
                        transition,
                        final_gn,
                    });
                }
                (stem, stages, channels)
            }
        };
        let stages: [Stage<R>; 4] = stages.try_into().map_err(|_| ()).expect("four stages");
        Ok(Backbone {
            kind,
            width_scale,
            stem,
            stages,
            gap: GlobalAvgPool::new(),
            feature_dim,
            trainable: [true; 5],
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Smallest cubic input edge the stage chain can reduce without hitting
    /// an empty feature map (dense transitions halve three extra times).
    pub fn min_input_size(&self) -> usize {
        match self.kind {
            BackboneKind::ResNet34 => 4,
            BackboneKind::DenseNet121 => 32,
        }
    }

    pub fn forward(&mut self, x: &Tensor<R>) -> Tensor<R> {
        let mut h = self.stem.forward(x);
        for s in &mut self.stages {
            h = s.forward(&h);
        }
        self.gap.forward(&h)
    }

    /// Backpropagate the feature gradient, accumulating weight gradients for
    /// trainable stages and stopping below the earliest one.
    pub fn backward(&mut self, dz: &Tensor<R>) {
        let Some(lowest) = self.trainable.iter().position(|&t| t) else {
            return;
        };
        let mut grad = self.gap.backward(dz);
        for i in (0..4).rev() {
            let stage_idx = i + 1; // trainable[0] is the stem
            if stage_idx < lowest {
                return;
            }
            let need_dx = lowest < stage_idx;
            match self.stages[i].backward(&grad, need_dx) {
                Some(g) => grad = g,
                None => return,
            }
        }
        if lowest == 0 {
            self.stem.backward(&grad);
        }
    }

    pub fn set_stage_trainable(&mut self, stage: &str, trainable: bool) -> Result<()> {
        let idx = STAGE_NAMES
            .iter()
            .position(|&s| s == stage)
            .ok_or_else(|| {
                Error::validation(format!(
                    "unknown stage '{stage}' (expected one of {STAGE_NAMES:?})"
                ))
            })?;
        self.trainable[idx] = trainable;
        let mut apply = |_: String, p: &mut crate::nn::Param<R>| p.trainable = trainable;
        match idx {
            0 => self.stem.for_each_param("stem", &mut apply),
            _ => self.stages[idx - 1].for_each_param(STAGE_NAMES[idx], &mut apply),
        }
        Ok(())
    }

    pub fn stage_trainable(&self, stage: &str) -> Option<bool> {
        STAGE_NAMES
            .iter()
            .position(|&s| s == stage)
            .map(|i| self.trainable[i])
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<R>) {
        self.stem.for_each_param(&format!("{prefix}.stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.for_each_param(&format!("{prefix}.stage{}", i + 1), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn rng(v: u64) -> ChaCha8Rng {
        seed::stream(v, &[seed::tag("backbone-test")])
    }

    fn param_count<R: Scalar>(b: &mut Backbone<R>) -> usize {
        let mut n = 0;
        b.for_each_param("backbone", &mut |_, p| n += p.numel());
        n
    }

    #[test]
    fn resnet_feature_dim_tracks_width_scale() {
        let mut r = rng(1);
        let mut full = Backbone::<f32>::new(BackboneKind::ResNet34, 1.0, &mut r).unwrap();
        assert_eq!(full.feature_dim(), 512);
        let mut tenth = Backbone::<f32>::new(BackboneKind::ResNet34, 0.1, &mut r).unwrap();
        assert_eq!(tenth.feature_dim(), 51);
        // Narrowing the channels must shrink the parameter budget too.
        assert!(param_count(&mut tenth) < param_count(&mut full) / 50);
    }

    #[test]
    fn densenet_feature_dim_tracks_width_scale() {
        let mut r = rng(2);
        let full = Backbone::<f32>::new(BackboneKind::DenseNet121, 1.0, &mut r).unwrap();
        // 64 -> +192|trans/2 -> 128 -> +384|/2 -> 256 -> +768|/2 -> 512 -> +512
        assert_eq!(full.feature_dim(), 1024);
        let tenth = Backbone::<f32>::new(BackboneKind::DenseNet121, 0.1, &mut r).unwrap();
        // growth 3, init 6: 6+18=24/2=12, +36=48/2=24, +72=96/2=48, +48=96
        assert_eq!(tenth.feature_dim(), 96);
    }

    #[test]
    fn resnet_forward_shape_and_determinism() {
        let mut r1 = rng(3);
        let mut b1 = Backbone::<f32>::new(BackboneKind::ResNet34, 0.1, &mut r1).unwrap();
        let mut r2 = rng(3);
        let mut b2 = Backbone::<f32>::new(BackboneKind::ResNet34, 0.1, &mut r2).unwrap();
        let x = Tensor::new(
            vec![2, 1, 16, 16, 16],
            (0..2 * 16 * 16 * 16).map(|i| (i % 97) as f32 / 97.0).collect(),
        );
        let z1 = b1.forward(&x);
        let z2 = b2.forward(&x);
        assert_eq!(z1.shape, vec![2, 51]);
        assert_eq!(z1.data, z2.data);
        assert!(z1.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn densenet_forward_shape() {
        let mut r = rng(4);
        let mut b = Backbone::<f32>::new(BackboneKind::DenseNet121, 0.1, &mut r).unwrap();
        assert_eq!(b.min_input_size(), 32);
        let n = 32 * 32 * 32;
        let x = Tensor::new(
            vec![1, 1, 32, 32, 32],
            (0..n).map(|i| (i % 31) as f32 / 31.0).collect(),
        );
        let z = b.forward(&x);
        assert_eq!(z.shape, vec![1, 96]);
        assert!(z.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn param_names_are_hierarchical_and_unique() {
        let mut r = rng(5);
        let mut b = Backbone::<f32>::new(BackboneKind::ResNet34, 0.1, &mut r).unwrap();
        let mut names = Vec::new();
        b.for_each_param("backbone", &mut |name, _| names.push(name));
        assert!(names.contains(&"backbone.stem.conv.weight".to_string()));
        assert!(names.contains(&"backbone.stage2.block0.down.conv.weight".to_string()));
        assert!(names.contains(&"backbone.stage4.block2.gn2.beta".to_string()));
        let unique: std::collections::HashSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn freezing_marks_only_the_requested_stage() {
        let mut r = rng(6);
        let mut b = Backbone::<f32>::new(BackboneKind::ResNet34, 0.1, &mut r).unwrap();
        b.set_stage_trainable("stem", false).unwrap();
        b.set_stage_trainable("stage1", false).unwrap();
        let mut frozen = 0;
        let mut thawed = 0;
        b.for_each_param("backbone", &mut |name, p| {
            if name.starts_with("backbone.stem") || name.starts_with("backbone.stage1.") {
                assert!(!p.trainable, "{name} should be frozen");
                frozen += 1;
            } else {
                assert!(p.trainable, "{name} should be trainable");
                thawed += 1;
            }
        });
        assert!(frozen > 0 && thawed > 0);
        assert!(b.set_stage_trainable("stage9", false).is_err());
        assert_eq!(b.stage_trainable("stem"), Some(false));
        assert_eq!(b.stage_trainable("stage2"), Some(true));
    }

    #[test]
    fn fully_frozen_backbone_skips_backward() {
        let mut r = rng(7);
        let mut b = Backbone::<f32>::new(BackboneKind::ResNet34, 0.1, &mut r).unwrap();
        for s in STAGE_NAMES {
            b.set_stage_trainable(s, false).unwrap();
        }
        let x = Tensor::new(vec![1, 1, 16, 16, 16], vec![0.3f32; 16 * 16 * 16]);
        let z = b.forward(&x);
        let dz = Tensor::new(z.shape.clone(), vec![1.0f32; z.numel()]);
        b.backward(&dz);
        let mut grads = 0.0f32;
        b.for_each_param("backbone", &mut |_, p| {
            grads += p.grad.iter().map(|g| g.abs()).sum::<f32>()
        });
        assert_eq!(grads, 0.0);
    }

    #[test]
    fn partial_freeze_trains_only_upper_stages() {
        let mut r = rng(8);
        let mut b = Backbone::<f32>::new(BackboneKind::ResNet34, 0.1, &mut r).unwrap();
        for s in ["stem", "stage1", "stage2"] {
            b.set_stage_trainable(s, false).unwrap();
        }
        let x = Tensor::new(
            vec![1, 1, 16, 16, 16],
            (0..16 * 16 * 16).map(|i| (i % 13) as f32 / 13.0).collect(),
        );
        let z = b.forward(&x);
        let dz = Tensor::new(z.shape.clone(), vec![0.5f32; z.numel()]);
        b.backward(&dz);
        let mut upper = 0.0f32;
        let mut lower = 0.0f32;
        b.for_each_param("backbone", &mut |name, p| {
            let s: f32 = p.grad.iter().map(|g| g.abs()).sum();
            if name.starts_with("backbone.stage3") || name.starts_with("backbone.stage4") {
                upper += s;
            } else {
                lower += s;
            }
        });
        assert!(upper > 0.0, "unfrozen stages should receive gradient");
        assert_eq!(lower, 0.0, "frozen stages must stay untouched");
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        // End-to-end check in f64 on a miniature resnet.
        let mut r = rng(9);
        let mut b = Backbone::<f64>::new(BackboneKind::ResNet34, 0.05, &mut r).unwrap();
        let nvox = 8 * 8 * 8;
        let x = Tensor::new(
            vec![1, 1, 8, 8, 8],
            (0..nvox).map(|i| ((i * 37) % 101) as f64 / 101.0).collect(),
        );
        let z = b.forward(&x);
        let c: Vec<f64> = (0..z.numel()).map(|i| 0.1 + 0.03 * i as f64).collect();
        let dz = Tensor::new(z.shape.clone(), c.clone());
        b.backward(&dz);

        let mut grads = Vec::new();
        b.for_each_param("backbone", &mut |name, p| {
            grads.push((name, p.data.clone(), p.grad.clone()))
        });
        let loss = |b: &mut Backbone<f64>, x: &Tensor<f64>| -> f64 {
            b.forward(x).data.iter().zip(&c).map(|(a, w)| a * w).sum()
        };
        let h = 1e-5;
        // Probe a few parameters spread across the network.
        for (name, _, grad) in grads.iter().step_by(7) {
            let idx = grad.len() / 2;
            let analytic = grad[idx];
            let set = |v: f64, b: &mut Backbone<f64>| {
                b.for_each_param("backbone", &mut |n, p| {
                    if n == *name {
                        p.data[idx] = v;
                    }
                });
            };
            let mut orig = 0.0;
            b.for_each_param("backbone", &mut |n, p| {
                if n == *name {
                    orig = p.data[idx];
                }
            });
            set(orig + h, &mut b);
            let fp = loss(&mut b, &x);
            set(orig - h, &mut b);
            let fm = loss(&mut b, &x);
            set(orig, &mut b);
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom < 1e-5,
                "{name}[{idx}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}
