//! Backbone zoo: the four feature-extractor families, each buildable as
//! `full_pretrained` (reference architecture, weights loaded from the
//! local weight store) or `tiny_random` (width/depth-reduced same-family
//! architecture with seeded random init, feature width 64).
//!
//! Batch normalization appears in folded per-channel affine form, so a
//! converted pretrained weight set supplies the folded scale/shift and
//! training always sees the same deterministic function.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, Array4, Ix2};
use serde::{Deserialize, Serialize};

use crate::ckpt::{self, ParamBlob};
use crate::error::{Error, Result};
use crate::nn::{
    Activation, ActivationKind, AvgPool2d, ChannelAffine, ClsPool, ClsToken, ConcatChannels,
    Conv2d, Dense, DepthwiseConv2d, GlobalAvgPool, Layer, LayerNorm, MaxPool2d, Normalize,
    Padding, Param, PatchEmbed, PosEmbed, Residual, Sequential, Softmax, TensorD,
    TransformerBlock,
};
use crate::seeding;

pub const TINY_FEATURE_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    EfficientnetV2,
    InceptionV2,
    MobilenetV2,
    VitB16,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::EfficientnetV2,
        Family::InceptionV2,
        Family::MobilenetV2,
        Family::VitB16,
    ];

    pub fn token(&self) -> &'static str {
        match self {
            Family::EfficientnetV2 => "efficientnet_v2",
            Family::InceptionV2 => "inception_v2",
            Family::MobilenetV2 => "mobilenet_v2",
            Family::VitB16 => "vit_b16",
        }
    }

    /// Feature width of the family's full reference architecture.
    pub fn reference_feature_dim(&self) -> usize {
        match self {
            Family::EfficientnetV2 => 1280,
            // v3-lineage reference (see `reference_architecture`)
            Family::InceptionV2 => 2048,
            Family::MobilenetV2 => 1280,
            Family::VitB16 => 768,
        }
    }

    pub fn reference_input_size(&self) -> (usize, usize) {
        match self {
            Family::InceptionV2 => (299, 299),
            _ => (224, 224),
        }
    }

    /// Concrete reference architecture behind the family token. The
    /// inception token maps to the V3-lineage blueprint.
    pub fn reference_architecture(&self) -> &'static str {
        match self {
            Family::EfficientnetV2 => "efficientnet_v2_s",
            Family::InceptionV2 => "inception_v3",
            Family::MobilenetV2 => "mobilenet_v2_1.0",
            Family::VitB16 => "vit_b16",
        }
    }

    pub fn default_preprocessing(&self) -> &'static str {
        match self {
            Family::VitB16 => "imagenet",
            _ => "scale_pm1",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.token() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone family: {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FullPretrained,
    TinyRandom,
}

impl Variant {
    pub fn token(&self) -> &'static str {
        match self {
            Variant::FullPretrained => "full_pretrained",
            Variant::TinyRandom => "tiny_random",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_pretrained" => Ok(Variant::FullPretrained),
            "tiny_random" => Ok(Variant::TinyRandom),
            other => Err(Error::Config(format!("unknown variant: {other}"))),
        }
    }
}

/// Identity of one backbone build.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: Family,
    pub variant: Variant,
    pub input_size: (usize, usize),
    pub feature_dim: usize,
    pub preprocessing_id: String,
}

impl BackboneSpec {
    pub fn tiny(family: Family, input_size: (usize, usize)) -> Self {
        BackboneSpec {
            family,
            variant: Variant::TinyRandom,
            input_size,
            feature_dim: TINY_FEATURE_DIM,
            preprocessing_id: family.default_preprocessing().to_string(),
        }
    }

    pub fn full(family: Family) -> Self {
        BackboneSpec {
            family,
            variant: Variant::FullPretrained,
            input_size: family.reference_input_size(),
            feature_dim: family.reference_feature_dim(),
            preprocessing_id: family.default_preprocessing().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if self.family == Family::VitB16 && (h % 16 != 0 || w % 16 != 0) {
            return Err(Error::UnsupportedInputSize {
                family: self.family.token().to_string(),
                height: h,
                width: w,
                reason: "patch size 16 requires input dimensions divisible by 16".to_string(),
            });
        }
        if h < 32 || w < 32 {
            return Err(Error::UnsupportedInputSize {
                family: self.family.token().to_string(),
                height: h,
                width: w,
                reason: "input must be at least 32x32".to_string(),
            });
        }
        let expected = match self.variant {
            Variant::TinyRandom => TINY_FEATURE_DIM,
            Variant::FullPretrained => self.family.reference_feature_dim(),
        };
        if self.feature_dim != expected {
            return Err(Error::Config(format!(
                "{}/{} has feature_dim {}, spec says {}",
                self.family,
                self.variant,
                expected,
                self.feature_dim
            )));
        }
        normalization_constants(&self.preprocessing_id)?;
        Ok(())
    }
}

/// Named input-normalization constants applied after the 1/255 rescale.
pub fn normalization_constants(id: &str) -> Result<([f32; 3], [f32; 3])> {
    match id {
        "unit" => Ok(([0.0; 3], [1.0; 3])),
        "scale_pm1" => Ok(([0.5; 3], [0.5; 3])),
        "imagenet" => Ok(([0.485, 0.456, 0.406], [0.229, 0.224, 0.225])),
        other => Err(Error::Config(format!("unknown preprocessing_id: {other}"))),
    }
}

/// Which parameter groups update during single-backbone training. The
/// classification head always trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    FreezeAll,
    #[default]
    FinetuneLastStage,
    FinetuneAll,
}

impl std::str::FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freeze_all" => Ok(FreezePolicy::FreezeAll),
            "finetune_last_stage" => Ok(FreezePolicy::FinetuneLastStage),
            "finetune_all" => Ok(FreezePolicy::FinetuneAll),
            other => Err(Error::Config(format!("unknown freeze policy: {other}"))),
        }
    }
}

/// A built backbone: preprocessing + body mapping (N,H,W,3) -> (N, feature_dim).
pub struct FeatureExtractor {
    pub spec: BackboneSpec,
    net: Sequential,
}

const FINAL_STAGE: &str = "final_stage";

impl FeatureExtractor {
    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    fn check_batch(&self, batch: &Array4<f32>) -> Result<()> {
        let (_, h, w, c) = batch.dim();
        if (h, w) != self.spec.input_size || c != 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("(N, {}, {}, 3)", self.spec.input_size.0, self.spec.input_size.1),
                actual: format!("(N, {h}, {w}, {c})"),
            });
        }
        Ok(())
    }

    /// Inference-mode feature vectors. Pure; safe to call concurrently.
    pub fn features(&self, batch: &Array4<f32>) -> Result<Array2<f32>> {
        self.check_batch(batch)?;
        let out = self.net.infer(&batch.clone().into_dyn());
        Ok(out.into_dimensionality::<Ix2>().expect("features are 2-D"))
    }

    pub fn forward_train(&mut self, batch: &Array4<f32>) -> Array2<f32> {
        let out = self.net.forward(&batch.clone().into_dyn());
        out.into_dimensionality::<Ix2>().expect("features are 2-D")
    }

    pub fn backward(&mut self, grad: &Array2<f32>) {
        self.net.backward(&grad.clone().into_dyn());
    }

    pub fn apply_freeze_policy(&mut self, policy: FreezePolicy) {
        match policy {
            FreezePolicy::FreezeAll => self.net.set_trainable_all(false),
            FreezePolicy::FinetuneLastStage => {
                self.net.set_trainable_all(false);
                self.net.set_trainable_for(&[FINAL_STAGE], true);
            }
            FreezePolicy::FinetuneAll => self.net.set_trainable_all(true),
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.net.visit_params(prefix, f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.net.visit_params_mut(prefix, f);
    }

    /// Stable digest of all parameter values, used by freeze tests and
    /// ensemble provenance.
    pub fn param_checksum(&self) -> String {
        let mut tensors: Vec<TensorD> = Vec::new();
        self.net
            .visit_params("", &mut |_, p| tensors.push(p.value.clone()));
        ckpt::tensor_checksum(tensors.iter())
    }

    pub fn param_entries(&self) -> Vec<(String, TensorD)> {
        let mut entries = Vec::new();
        self.net
            .visit_params("", &mut |name, p| entries.push((name.to_string(), p.value.clone())));
        entries
    }

    pub fn load_param_entries(&mut self, blob: &ParamBlob, path: &Path) -> Result<()> {
        let mut error: Option<Error> = None;
        let mut seen = 0usize;
        self.net.visit_params_mut("", &mut |name, p| {
            if error.is_some() {
                return;
            }
            match blob.get(name) {
                Some(tensor) if tensor.shape() == p.value.shape() => {
                    p.value.assign(tensor);
                    seen += 1;
                }
                Some(tensor) => {
                    error = Some(Error::CorruptCheckpoint {
                        path: path.to_path_buf(),
                        reason: format!(
                            "param {name}: stored shape {:?}, expected {:?}",
                            tensor.shape(),
                            p.value.shape()
                        ),
                    });
                }
                None => {
                    error = Some(Error::CorruptCheckpoint {
                        path: path.to_path_buf(),
                        reason: format!("param {name} missing from blob"),
                    });
                }
            }
        });
        if let Some(e) = error {
            return Err(e);
        }
        if seen != blob.entries.len() {
            return Err(Error::CorruptCheckpoint {
                path: path.to_path_buf(),
                reason: format!(
                    "blob holds {} params, architecture expects {seen}",
                    blob.entries.len()
                ),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// blueprint helpers

fn conv_unit(
    rng: &mut rand_chacha::ChaCha8Rng,
    in_ch: usize,
    out_ch: usize,
    kernel: (usize, usize),
    stride: usize,
    padding: Padding,
    act: Option<ActivationKind>,
) -> Sequential {
    let mut unit = Sequential::new();
    unit.push("conv", Conv2d::new(rng, in_ch, out_ch, kernel, stride, padding));
    unit.push("affine", ChannelAffine::new(out_ch));
    if let Some(kind) = act {
        unit.push("act", Activation::new(kind));
    }
    unit
}

fn inverted_residual(
    rng: &mut rand_chacha::ChaCha8Rng,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    expand: usize,
) -> Box<dyn Layer> {
    let mid = in_ch * expand;
    let mut body = Sequential::new();
    if expand != 1 {
        body.push(
            "expand",
            conv_unit(rng, in_ch, mid, (1, 1), 1, Padding::Same, Some(ActivationKind::Relu6)),
        );
    }
    let mut dw = Sequential::new();
    dw.push("conv", DepthwiseConv2d::new(rng, mid, (3, 3), stride, Padding::Same));
    dw.push("affine", ChannelAffine::new(mid));
    dw.push("act", Activation::new(ActivationKind::Relu6));
    body.push("depthwise", dw);
    // linear bottleneck projection
    body.push("project", conv_unit(rng, mid, out_ch, (1, 1), 1, Padding::Same, None));
    if stride == 1 && in_ch == out_ch {
        Box::new(Residual::new(body))
    } else {
        Box::new(body)
    }
}

fn fused_mbconv(
    rng: &mut rand_chacha::ChaCha8Rng,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    expand: usize,
) -> Box<dyn Layer> {
    let mid = in_ch * expand;
    let mut body = Sequential::new();
    if expand != 1 {
        body.push(
            "expand",
            conv_unit(rng, in_ch, mid, (3, 3), stride, Padding::Same, Some(ActivationKind::Silu)),
        );
        body.push("project", conv_unit(rng, mid, out_ch, (1, 1), 1, Padding::Same, None));
    } else {
        body.push(
            "fused",
            conv_unit(rng, in_ch, out_ch, (3, 3), stride, Padding::Same, Some(ActivationKind::Silu)),
        );
    }
    if stride == 1 && in_ch == out_ch {
        Box::new(Residual::new(body))
    } else {
        Box::new(body)
    }
}

fn mbconv_se(
    rng: &mut rand_chacha::ChaCha8Rng,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    expand: usize,
) -> Box<dyn Layer> {
    let mid = in_ch * expand;
    let mut body = Sequential::new();
    body.push(
        "expand",
        conv_unit(rng, in_ch, mid, (1, 1), 1, Padding::Same, Some(ActivationKind::Silu)),
    );
    let mut dw = Sequential::new();
    dw.push("conv", DepthwiseConv2d::new(rng, mid, (3, 3), stride, Padding::Same));
    dw.push("affine", ChannelAffine::new(mid));
    dw.push("act", Activation::new(ActivationKind::Silu));
    body.push("depthwise", dw);
    let reduced = (in_ch / 4).max(1);
    body.push("se", crate::nn::SqueezeExcite::new(rng, mid, reduced));
    body.push("project", conv_unit(rng, mid, out_ch, (1, 1), 1, Padding::Same, None));
    if stride == 1 && in_ch == out_ch {
        Box::new(Residual::new(body))
    } else {
        Box::new(body)
    }
}

fn inception_branch(units: Vec<(&str, Sequential)>) -> Sequential {
    let mut seq = Sequential::new();
    for (name, unit) in units {
        seq.push(name, unit);
    }
    seq
}

/// Multi-scale module: 1x1, factorized larger receptive fields, and a
/// pooled projection, concatenated along channels.
fn inception_module(
    rng: &mut rand_chacha::ChaCha8Rng,
    in_ch: usize,
    b1x1: usize,
    b3x3: (usize, usize),
    b5x5: (usize, usize),
    pool_proj: usize,
) -> ConcatChannels {
    let relu = Some(ActivationKind::Relu);
    let branch1 = inception_branch(vec![(
        "conv1x1",
        conv_unit(rng, in_ch, b1x1, (1, 1), 1, Padding::Same, relu),
    )]);
    let branch2 = inception_branch(vec![
        ("reduce", conv_unit(rng, in_ch, b3x3.0, (1, 1), 1, Padding::Same, relu)),
        ("conv", conv_unit(rng, b3x3.0, b3x3.1, (3, 3), 1, Padding::Same, relu)),
    ]);
    // 5x5 receptive field factorized into two 3x3 convolutions
    let branch3 = inception_branch(vec![
        ("reduce", conv_unit(rng, in_ch, b5x5.0, (1, 1), 1, Padding::Same, relu)),
        ("conv_a", conv_unit(rng, b5x5.0, b5x5.1, (3, 3), 1, Padding::Same, relu)),
        ("conv_b", conv_unit(rng, b5x5.1, b5x5.1, (3, 3), 1, Padding::Same, relu)),
    ]);
    let mut branch4 = Sequential::new();
    branch4.push("pool", AvgPool2d::new(3, 1, Padding::Same));
    branch4.push("proj", conv_unit(rng, in_ch, pool_proj, (1, 1), 1, Padding::Same, relu));

    ConcatChannels::new(vec![
        ("b1".into(), branch1),
        ("b3".into(), branch2),
        ("b5".into(), branch3),
        ("pool".into(), branch4),
    ])
}

// ---------------------------------------------------------------------------
// family blueprints

fn build_mobilenet(rng: &mut rand_chacha::ChaCha8Rng, spec: &BackboneSpec) -> Sequential {
    let mut net = Sequential::new();
    match spec.variant {
        Variant::TinyRandom => {
            net.push(
                "stem",
                conv_unit(rng, 3, 16, (3, 3), 2, Padding::Same, Some(ActivationKind::Relu6)),
            );
            net.push_boxed("block1", inverted_residual(rng, 16, 24, 2, 4));
            net.push_boxed("block2", inverted_residual(rng, 24, 24, 1, 4));
            let mut last = Sequential::new();
            last.push(
                "head",
                conv_unit(rng, 24, 64, (1, 1), 1, Padding::Same, Some(ActivationKind::Relu6)),
            );
            last.push("pool", GlobalAvgPool::new());
            net.push(FINAL_STAGE, last);
        }
        Variant::FullPretrained => {
            net.push(
                "stem",
                conv_unit(rng, 3, 32, (3, 3), 2, Padding::Same, Some(ActivationKind::Relu6)),
            );
            // (expand, channels, repeats, first stride)
            let table = [
                (1, 16, 1, 1),
                (6, 24, 2, 2),
                (6, 32, 3, 2),
                (6, 64, 4, 2),
                (6, 96, 3, 1),
                (6, 160, 3, 2),
                (6, 320, 1, 1),
            ];
            let mut in_ch = 32;
            let mut idx = 0;
            for (expand, out_ch, repeats, stride) in table {
                for r in 0..repeats {
                    let s = if r == 0 { stride } else { 1 };
                    net.push_boxed(
                        format!("block{idx}"),
                        inverted_residual(rng, in_ch, out_ch, s, expand),
                    );
                    in_ch = out_ch;
                    idx += 1;
                }
            }
            let mut last = Sequential::new();
            last.push(
                "head",
                conv_unit(rng, 320, 1280, (1, 1), 1, Padding::Same, Some(ActivationKind::Relu6)),
            );
            last.push("pool", GlobalAvgPool::new());
            net.push(FINAL_STAGE, last);
        }
    }
    net
}

fn build_efficientnet(rng: &mut rand_chacha::ChaCha8Rng, spec: &BackboneSpec) -> Sequential {
    let mut net = Sequential::new();
    match spec.variant {
        Variant::TinyRandom => {
            net.push(
                "stem",
                conv_unit(rng, 3, 16, (3, 3), 2, Padding::Same, Some(ActivationKind::Silu)),
            );
            net.push_boxed("block1", fused_mbconv(rng, 16, 24, 2, 2));
            net.push_boxed("block2", fused_mbconv(rng, 24, 24, 1, 2));
            net.push_boxed("block3", mbconv_se(rng, 24, 32, 1, 2));
            let mut last = Sequential::new();
            last.push(
                "head",
                conv_unit(rng, 32, 64, (1, 1), 1, Padding::Same, Some(ActivationKind::Silu)),
            );
            last.push("pool", GlobalAvgPool::new());
            net.push(FINAL_STAGE, last);
        }
        Variant::FullPretrained => {
            net.push(
                "stem",
                conv_unit(rng, 3, 24, (3, 3), 2, Padding::Same, Some(ActivationKind::Silu)),
            );
            // (kind, expand, channels, repeats, first stride)
            enum Kind {
                Fused,
                MbSe,
            }
            let table = [
                (Kind::Fused, 1, 24, 2, 1),
                (Kind::Fused, 4, 48, 4, 2),
                (Kind::Fused, 4, 64, 4, 2),
                (Kind::MbSe, 4, 128, 6, 2),
                (Kind::MbSe, 6, 160, 9, 1),
                (Kind::MbSe, 6, 256, 15, 2),
            ];
            let mut in_ch = 24;
            let mut idx = 0;
            for (kind, expand, out_ch, repeats, stride) in table {
                for r in 0..repeats {
                    let s = if r == 0 { stride } else { 1 };
                    let block = match kind {
                        Kind::Fused => fused_mbconv(rng, in_ch, out_ch, s, expand),
                        Kind::MbSe => mbconv_se(rng, in_ch, out_ch, s, expand),
                    };
                    net.push_boxed(format!("block{idx}"), block);
                    in_ch = out_ch;
                    idx += 1;
                }
            }
            let mut last = Sequential::new();
            last.push(
                "head",
                conv_unit(rng, 256, 1280, (1, 1), 1, Padding::Same, Some(ActivationKind::Silu)),
            );
            last.push("pool", GlobalAvgPool::new());
            net.push(FINAL_STAGE, last);
        }
    }
    net
}

fn build_inception(rng: &mut rand_chacha::ChaCha8Rng, spec: &BackboneSpec) -> Sequential {
    let relu = Some(ActivationKind::Relu);
    let mut net = Sequential::new();
    match spec.variant {
        Variant::TinyRandom => {
            let mut stem = Sequential::new();
            stem.push("conv", conv_unit(rng, 3, 16, (3, 3), 2, Padding::Same, relu));
            stem.push("pool", MaxPool2d::new(3, 2, Padding::Same));
            net.push("stem", stem);
            net.push("moduleA", inception_module(rng, 16, 8, (8, 12), (4, 8), 4));
            net.push("reduce", MaxPool2d::new(3, 2, Padding::Same));
            net.push("moduleB", inception_module(rng, 32, 12, (8, 16), (4, 8), 4));
            let mut last = Sequential::new();
            last.push("head", conv_unit(rng, 40, 64, (1, 1), 1, Padding::Same, relu));
            last.push("pool", GlobalAvgPool::new());
            net.push(FINAL_STAGE, last);
        }
        Variant::FullPretrained => {
            let mut stem = Sequential::new();
            stem.push("conv1", conv_unit(rng, 3, 32, (3, 3), 2, Padding::Valid, relu));
            stem.push("conv2", conv_unit(rng, 32, 32, (3, 3), 1, Padding::Valid, relu));
            stem.push("conv3", conv_unit(rng, 32, 64, (3, 3), 1, Padding::Same, relu));
            stem.push("pool1", MaxPool2d::new(3, 2, Padding::Valid));
            stem.push("conv4", conv_unit(rng, 64, 80, (1, 1), 1, Padding::Same, relu));
            stem.push("conv5", conv_unit(rng, 80, 192, (3, 3), 1, Padding::Valid, relu));
            stem.push("pool2", MaxPool2d::new(3, 2, Padding::Valid));
            net.push("stem", stem);

            net.push("mixedA0", inception_module(rng, 192, 64, (48, 64), (64, 96), 32));
            net.push("mixedA1", inception_module(rng, 256, 64, (48, 64), (64, 96), 64));
            net.push("mixedA2", inception_module(rng, 288, 64, (48, 64), (64, 96), 64));

            // reduction to 768 channels
            let red_a = ConcatChannels::new(vec![
                (
                    "b3".into(),
                    inception_branch(vec![(
                        "conv",
                        conv_unit(rng, 288, 384, (3, 3), 2, Padding::Valid, relu),
                    )]),
                ),
                (
                    "b5".into(),
                    inception_branch(vec![
                        ("reduce", conv_unit(rng, 288, 64, (1, 1), 1, Padding::Same, relu)),
                        ("conv_a", conv_unit(rng, 64, 96, (3, 3), 1, Padding::Same, relu)),
                        ("conv_b", conv_unit(rng, 96, 96, (3, 3), 2, Padding::Valid, relu)),
                    ]),
                ),
                ("pool".into(), {
                    let mut p = Sequential::new();
                    p.push("pool", MaxPool2d::new(3, 2, Padding::Valid));
                    p
                }),
            ]);
            net.push("reductionA", red_a);

            for (i, c7) in [128usize, 160, 160, 192].into_iter().enumerate() {
                net.push(format!("mixedB{i}"), inception_b_module(rng, 768, c7));
            }

            let red_b = ConcatChannels::new(vec![
                (
                    "b3".into(),
                    inception_branch(vec![
                        ("reduce", conv_unit(rng, 768, 192, (1, 1), 1, Padding::Same, relu)),
                        ("conv", conv_unit(rng, 192, 320, (3, 3), 2, Padding::Valid, relu)),
                    ]),
                ),
                (
                    "b7".into(),
                    inception_branch(vec![
                        ("reduce", conv_unit(rng, 768, 192, (1, 1), 1, Padding::Same, relu)),
                        ("conv_a", conv_unit(rng, 192, 192, (1, 7), 1, Padding::Same, relu)),
                        ("conv_b", conv_unit(rng, 192, 192, (7, 1), 1, Padding::Same, relu)),
                        ("conv_c", conv_unit(rng, 192, 192, (3, 3), 2, Padding::Valid, relu)),
                    ]),
                ),
                ("pool".into(), {
                    let mut p = Sequential::new();
                    p.push("pool", MaxPool2d::new(3, 2, Padding::Valid));
                    p
                }),
            ]);
            net.push("reductionB", red_b);

            net.push("mixedC0", inception_c_module(rng, 1280));
            let mut last = Sequential::new();
            last.push_boxed("module", Box::new(inception_c_module(rng, 2048)));
            last.push("pool", GlobalAvgPool::new());
            net.push(FINAL_STAGE, last);
        }
    }
    net
}

/// 7x7-factorized module (768 channels in and out).
fn inception_b_module(rng: &mut rand_chacha::ChaCha8Rng, in_ch: usize, c7: usize) -> ConcatChannels {
    let relu = Some(ActivationKind::Relu);
    ConcatChannels::new(vec![
        (
            "b1".into(),
            inception_branch(vec![("conv", conv_unit(rng, in_ch, 192, (1, 1), 1, Padding::Same, relu))]),
        ),
        (
            "b7".into(),
            inception_branch(vec![
                ("reduce", conv_unit(rng, in_ch, c7, (1, 1), 1, Padding::Same, relu)),
                ("conv_a", conv_unit(rng, c7, c7, (1, 7), 1, Padding::Same, relu)),
                ("conv_b", conv_unit(rng, c7, 192, (7, 1), 1, Padding::Same, relu)),
            ]),
        ),
        (
            "b7x2".into(),
            inception_branch(vec![
                ("reduce", conv_unit(rng, in_ch, c7, (1, 1), 1, Padding::Same, relu)),
                ("conv_a", conv_unit(rng, c7, c7, (7, 1), 1, Padding::Same, relu)),
                ("conv_b", conv_unit(rng, c7, c7, (1, 7), 1, Padding::Same, relu)),
                ("conv_c", conv_unit(rng, c7, c7, (7, 1), 1, Padding::Same, relu)),
                ("conv_d", conv_unit(rng, c7, 192, (1, 7), 1, Padding::Same, relu)),
            ]),
        ),
        ("pool".into(), {
            let mut p = Sequential::new();
            p.push("pool", AvgPool2d::new(3, 1, Padding::Same));
            p.push("proj", conv_unit(rng, in_ch, 192, (1, 1), 1, Padding::Same, relu));
            p
        }),
    ])
}

/// Wide expanded module producing 2048 channels.
fn inception_c_module(rng: &mut rand_chacha::ChaCha8Rng, in_ch: usize) -> ConcatChannels {
    let relu = Some(ActivationKind::Relu);
    let split = |rng: &mut rand_chacha::ChaCha8Rng, ch: usize| -> ConcatChannels {
        ConcatChannels::new(vec![
            (
                "h".into(),
                inception_branch(vec![("conv", conv_unit(rng, ch, 384, (1, 3), 1, Padding::Same, relu))]),
            ),
            (
                "v".into(),
                inception_branch(vec![("conv", conv_unit(rng, ch, 384, (3, 1), 1, Padding::Same, relu))]),
            ),
        ])
    };
    let mut b3 = Sequential::new();
    b3.push("reduce", conv_unit(rng, in_ch, 384, (1, 1), 1, Padding::Same, relu));
    b3.push_boxed("split", Box::new(split(rng, 384)));
    let mut b5 = Sequential::new();
    b5.push("reduce", conv_unit(rng, in_ch, 448, (1, 1), 1, Padding::Same, relu));
    b5.push("conv", conv_unit(rng, 448, 384, (3, 3), 1, Padding::Same, relu));
    b5.push_boxed("split", Box::new(split(rng, 384)));
    ConcatChannels::new(vec![
        (
            "b1".into(),
            inception_branch(vec![("conv", conv_unit(rng, in_ch, 320, (1, 1), 1, Padding::Same, relu))]),
        ),
        ("b3".into(), b3),
        ("b5".into(), b5),
        ("pool".into(), {
            let mut p = Sequential::new();
            p.push("pool", AvgPool2d::new(3, 1, Padding::Same));
            p.push("proj", conv_unit(rng, in_ch, 192, (1, 1), 1, Padding::Same, relu));
            p
        }),
    ])
}

fn build_vit(rng: &mut rand_chacha::ChaCha8Rng, spec: &BackboneSpec) -> Sequential {
    let (h, w) = spec.input_size;
    let patch = 16;
    // divisibility guaranteed by spec.validate()
    let tokens = (h / patch) * (w / patch) + 1;
    let (dim, heads, mlp_dim, depth) = match spec.variant {
        Variant::TinyRandom => (TINY_FEATURE_DIM, 4, 128, 2),
        Variant::FullPretrained => (768, 12, 3072, 12),
    };
    let mut net = Sequential::new();
    net.push("patch_embed", PatchEmbed::new(rng, 3, dim, patch));
    net.push("cls_token", ClsToken::new(rng, dim));
    net.push("pos_embed", PosEmbed::new(rng, tokens, dim));
    for i in 0..depth - 1 {
        net.push(
            format!("encoder{i}"),
            TransformerBlock::new(rng, dim, heads, mlp_dim),
        );
    }
    let mut last = Sequential::new();
    last.push(
        format!("encoder{}", depth - 1),
        TransformerBlock::new(rng, dim, heads, mlp_dim),
    );
    last.push("norm", LayerNorm::new(dim));
    last.push("cls_pool", ClsPool::new());
    net.push(FINAL_STAGE, last);
    net
}

// ---------------------------------------------------------------------------
// construction

/// Build the architecture with seeded random parameters, without touching
/// the weight store. This is the entry point for tiny variants, for the
/// weight-conversion tooling that populates a store, and for tests.
pub fn build_architecture(spec: &BackboneSpec, init_seed: u64) -> Result<FeatureExtractor> {
    spec.validate()?;
    let mut rng = seeding::rng_for(
        init_seed,
        "backbone_init",
        &[spec.family as u64, spec.variant as u64],
    );
    let (mean, std) = normalization_constants(&spec.preprocessing_id)?;
    let mut net = Sequential::new();
    net.push("normalize", Normalize::new(mean, std));
    let body = match spec.family {
        Family::MobilenetV2 => build_mobilenet(&mut rng, spec),
        Family::EfficientnetV2 => build_efficientnet(&mut rng, spec),
        Family::InceptionV2 => build_inception(&mut rng, spec),
        Family::VitB16 => build_vit(&mut rng, spec),
    };
    for (name, layer) in body.into_children() {
        net.push_boxed(name, layer);
    }

    let extractor = FeatureExtractor {
        spec: spec.clone(),
        net,
    };
    let probe = Array4::<f32>::zeros((1, spec.input_size.0, spec.input_size.1, 3));
    let width = extractor.features(&probe)?.ncols();
    if width != spec.feature_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("feature_dim {}", spec.feature_dim),
            actual: format!("probed extractor width {width}"),
        });
    }
    Ok(extractor)
}

/// Build a backbone per its spec. Tiny variants initialize from the
/// seed; full variants must find their weights in the store.
pub fn build_backbone(
    spec: &BackboneSpec,
    init_seed: u64,
    weight_store: Option<&Path>,
) -> Result<FeatureExtractor> {
    let mut extractor = build_architecture(spec, init_seed)?;
    if spec.variant == Variant::FullPretrained {
        let store = weight_store.ok_or_else(|| Error::WeightsUnavailable {
            family: spec.family.token().to_string(),
            variant: spec.variant.token().to_string(),
            reason: "no weight store configured".to_string(),
        })?;
        load_pretrained(&mut extractor, store)?;
    }
    Ok(extractor)
}

fn store_rel_path(spec: &BackboneSpec) -> String {
    format!("{}/{}.bin", spec.family.token(), spec.variant.token())
}

/// Write an extractor's parameters into a weight store, updating the
/// store manifest with the content hash.
pub fn save_to_store(extractor: &FeatureExtractor, store: &Path) -> Result<()> {
    let rel = store_rel_path(&extractor.spec);
    let path = store.join(&rel);
    let blob = ParamBlob {
        meta: serde_json::json!({
            "family": extractor.spec.family.token(),
            "variant": extractor.spec.variant.token(),
            "feature_dim": extractor.spec.feature_dim,
            "reference_architecture": extractor.spec.family.reference_architecture(),
        }),
        entries: extractor.param_entries(),
    };
    ckpt::write_blob(&path, &blob)?;
    let digest = ckpt::sha256_hex_of_file(&path)?;

    let manifest_path = store.join("MANIFEST.json");
    let mut manifest: std::collections::BTreeMap<String, String> = if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(&manifest_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: manifest_path.clone(),
            source: e,
        })?
    } else {
        Default::default()
    };
    manifest.insert(rel, digest);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: manifest_path.clone(),
        source: e,
    })?;
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

fn load_pretrained(extractor: &mut FeatureExtractor, store: &Path) -> Result<()> {
    let spec = extractor.spec.clone();
    let unavailable = |reason: String| Error::WeightsUnavailable {
        family: spec.family.token().to_string(),
        variant: spec.variant.token().to_string(),
        reason,
    };
    let manifest_path = store.join("MANIFEST.json");
    if !manifest_path.exists() {
        return Err(unavailable(format!(
            "weight store manifest not found at {}",
            manifest_path.display()
        )));
    }
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: std::collections::BTreeMap<String, String> =
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: manifest_path.clone(),
            source: e,
        })?;
    let rel = store_rel_path(&spec);
    let expected = manifest
        .get(&rel)
        .ok_or_else(|| unavailable(format!("{rel} not listed in the store manifest")))?;
    let path = store.join(&rel);
    if !path.exists() {
        return Err(unavailable(format!("{} missing", path.display())));
    }
    let actual = ckpt::sha256_hex_of_file(&path)?;
    if &actual != expected {
        return Err(Error::WeightHashMismatch {
            path,
            expected: expected.clone(),
            actual,
        });
    }
    let blob = ckpt::read_blob(&path)?;
    extractor.load_param_entries(&blob, &path)
}

// ---------------------------------------------------------------------------
// classifier

/// Backbone plus softmax classification head.
pub struct ClassifierModel {
    pub extractor: FeatureExtractor,
    head: Dense,
    softmax: Softmax,
    num_classes: usize,
}

impl ClassifierModel {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.extractor.spec
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Dense {
        &mut self.head
    }

    /// Drop the classification head, keeping the trained backbone — how
    /// ensemble branches are sourced from per-model checkpoints.
    pub fn into_extractor(self) -> FeatureExtractor {
        self.extractor
    }

    pub fn set_freeze_policy(&mut self, policy: FreezePolicy) {
        self.extractor.apply_freeze_policy(policy);
    }

    /// Inference-mode class probabilities; deterministic, shape-checked.
    pub fn predict_proba(&self, batch: &Array4<f32>) -> Result<Array2<f32>> {
        let features = self.extractor.features(batch)?;
        let logits = self.head.infer(&features.into_dyn());
        Ok(Softmax::apply(&logits)
            .into_dimensionality::<Ix2>()
            .expect("probabilities are 2-D"))
    }

    pub fn forward_train(&mut self, batch: &Array4<f32>) -> Array2<f32> {
        let features = self.extractor.forward_train(batch);
        let logits = self.head.forward(&features.into_dyn());
        self.softmax
            .forward(&logits)
            .into_dimensionality::<Ix2>()
            .expect("probabilities are 2-D")
    }

    /// Backward pass from dL/dprobs through softmax, head, backbone.
    pub fn backward_from_probs(&mut self, dprobs: &Array2<f32>) {
        let dlogits = self.softmax.backward(&dprobs.clone().into_dyn());
        let dfeatures = self.head.backward(&dlogits);
        let d2 = dfeatures
            .into_dimensionality::<Ix2>()
            .expect("feature grads are 2-D");
        self.extractor.backward(&d2);
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.extractor.visit_params("backbone", f);
        self.head.visit_params("head", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.extractor.visit_params_mut("backbone", f);
        self.head.visit_params_mut("head", f);
    }
}

/// Attach a seeded-random softmax head (always trainable) and apply the
/// default freezing policy to the backbone.
pub fn attach_head(extractor: FeatureExtractor, num_classes: usize, seed: u64) -> Result<ClassifierModel> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "classifier needs at least 2 classes, got {num_classes}"
        )));
    }
    let mut rng = seeding::rng_for(seed, "head_init", &[num_classes as u64]);
    let head = Dense::new(&mut rng, extractor.feature_dim(), num_classes);
    let mut model = ClassifierModel {
        extractor,
        head,
        softmax: Softmax::new(),
        num_classes,
    };
    model.set_freeze_policy(FreezePolicy::default());
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;

    fn random_batch(n: usize, size: (usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = seeding::rng_for(seed, "test_batch", &[]);
        Array4::from_shape_fn((n, size.0, size.1, 3), |_| rng.gen::<f32>())
    }

    #[test]
    fn tiny_backbones_probe_to_64() {
        for family in Family::ALL {
            let spec = BackboneSpec::tiny(family, (64, 64));
            let extractor = build_backbone(&spec, 11, None).unwrap();
            assert_eq!(extractor.feature_dim(), 64, "{family}");
            let features = extractor.features(&random_batch(2, (64, 64), 1)).unwrap();
            assert_eq!(features.dim(), (2, 64), "{family}");
        }
    }

    #[test]
    fn vit_rejects_non_multiple_of_16() {
        let mut spec = BackboneSpec::tiny(Family::VitB16, (100, 100));
        spec.input_size = (100, 100);
        assert!(matches!(
            build_backbone(&spec, 0, None),
            Err(Error::UnsupportedInputSize { .. })
        ));
    }

    #[test]
    fn vit_patch_arithmetic_at_224() {
        let spec = BackboneSpec::tiny(Family::VitB16, (224, 224));
        let extractor = build_backbone(&spec, 3, None).unwrap();
        // 224/16 = 14 per side -> 196 patches + 1 class token
        let mut pos_shape = None;
        extractor.visit_params("", &mut |name, p| {
            if name.ends_with("pos_embed.embedding") {
                pos_shape = Some(p.value.shape().to_vec());
            }
        });
        assert_eq!(pos_shape.unwrap(), vec![1, 197, 64]);
    }

    #[test]
    fn full_mobilenet_architecture_probes_to_1280() {
        let spec = BackboneSpec::full(Family::MobilenetV2);
        assert_eq!(spec.feature_dim, 1280);
        let extractor = build_architecture(&spec, 5).unwrap();
        assert_eq!(extractor.feature_dim(), 1280);
    }

    #[test]
    fn full_variants_error_without_store() {
        let spec = BackboneSpec::full(Family::MobilenetV2);
        assert!(matches!(
            build_backbone(&spec, 0, None),
            Err(Error::WeightsUnavailable { .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_backbone(&spec, 0, Some(dir.path())),
            Err(Error::WeightsUnavailable { .. })
        ));
    }

    #[test]
    fn weight_store_round_trip_and_hash_verification() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BackboneSpec::full(Family::MobilenetV2);
        let source = build_architecture(&spec, 77).unwrap();
        save_to_store(&source, dir.path()).unwrap();

        let loaded = build_backbone(&spec, 1234, Some(dir.path())).unwrap();
        assert_eq!(loaded.param_checksum(), source.param_checksum());

        // tamper with the stored file: hash verification must fail
        let rel = dir.path().join("mobilenet_v2/full_pretrained.bin");
        let mut bytes = std::fs::read(&rel).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xFF;
        std::fs::write(&rel, bytes).unwrap();
        assert!(matches!(
            build_backbone(&spec, 1234, Some(dir.path())),
            Err(Error::WeightHashMismatch { .. })
        ));
    }

    #[test]
    fn head_shapes_and_softmax_simplex() {
        let spec = BackboneSpec::tiny(Family::MobilenetV2, (64, 64));
        let extractor = build_backbone(&spec, 9, None).unwrap();
        let model = attach_head(extractor, 4, 9).unwrap();
        let mut head_shape = None;
        model.visit_params(&mut |name, p| {
            if name == "head.weight" {
                head_shape = Some(p.value.shape().to_vec());
            }
        });
        assert_eq!(head_shape.unwrap(), vec![64, 4]);

        let probs = model.predict_proba(&random_batch(8, (64, 64), 2)).unwrap();
        assert_eq!(probs.dim(), (8, 4));
        for row in probs.rows() {
            let sum: f32 = row.sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_weight_head_gives_uniform_output() {
        let spec = BackboneSpec::tiny(Family::EfficientnetV2, (64, 64));
        let extractor = build_backbone(&spec, 9, None).unwrap();
        let mut model = attach_head(extractor, 4, 9).unwrap();
        model.visit_params_mut(&mut |name, p| {
            if name.starts_with("head.") {
                p.value.fill(0.0);
            }
        });
        let probs = model.predict_proba(&random_batch(3, (64, 64), 3)).unwrap();
        for v in probs.iter() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn predict_proba_is_deterministic_and_batch_equivariant() {
        let spec = BackboneSpec::tiny(Family::VitB16, (64, 64));
        let extractor = build_backbone(&spec, 4, None).unwrap();
        let model = attach_head(extractor, 4, 4).unwrap();
        let batch = random_batch(5, (64, 64), 4);

        let a = model.predict_proba(&batch).unwrap();
        let b = model.predict_proba(&batch).unwrap();
        assert_eq!(a, b);

        // identical images produce identical rows
        let mut dup = batch.clone();
        let row0 = batch.index_axis(ndarray::Axis(0), 0).to_owned();
        dup.index_axis_mut(ndarray::Axis(0), 3).assign(&row0);
        let probs = model.predict_proba(&dup).unwrap();
        let r0 = probs.row(0).to_owned();
        let r3 = probs.row(3).to_owned();
        assert_eq!(r0, r3);

        // single-sample forward matches its batched row
        let single = batch
            .index_axis(ndarray::Axis(0), 2)
            .to_owned()
            .insert_axis(ndarray::Axis(0));
        let solo = model.predict_proba(&single).unwrap();
        for (x, y) in solo.row(0).iter().zip(a.row(2).iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn predict_proba_rejects_wrong_input_size() {
        let spec = BackboneSpec::tiny(Family::MobilenetV2, (64, 64));
        let extractor = build_backbone(&spec, 1, None).unwrap();
        let model = attach_head(extractor, 4, 1).unwrap();
        let err = model.predict_proba(&random_batch(1, (32, 32), 5)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = BackboneSpec::tiny(Family::InceptionV2, (64, 64));
        let a = build_backbone(&spec, 42, None).unwrap();
        let b = build_backbone(&spec, 42, None).unwrap();
        let c = build_backbone(&spec, 43, None).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());
        assert_ne!(a.param_checksum(), c.param_checksum());
    }
}
