//! Frozen feature backbones for the feature-space losses and the FID embedder.
//!
//! Three kinds are supported:
//! - `identity`: a single layer `pixels` equal to the input image;
//! - `fixed-random-cnn`: stride-2 convolution stages with Gaussian weights frozen at a seed,
//!   layers named `conv1`, `conv2`, ...;
//! - `pretrained-vgg19`: VGG-19 loaded from a safetensors file using torchvision's
//!   `features.{index}.{weight,bias}` keys, layers named `relu1_1` ... `relu5_4` and `pool1` ... `pool5`.
//!
//! Backbone weights are plain tensors, never `Var`s, so no optimizer can reach them while
//! gradients still flow back into the input image.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d};

pub const IDENTITY_LAYER: &str = "pixels";

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

const VGG19_CFG: [&[usize]; 5] = [
    &[64, 64],
    &[128, 128],
    &[256, 256, 256, 256],
    &[512, 512, 512, 512],
    &[512, 512, 512, 512],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Identity,
    FixedRandomCnn,
    PretrainedVgg19,
}

/// Which backbone layers feed each feature-space term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossLayers {
    pub perceptual: Vec<String>,
    pub style: Vec<String>,
    pub contextual: Vec<String>,
    /// Used only when the pixel loss runs in feature space.
    pub pixel: Vec<String>,
    /// Globally pooled to form the FID embedding.
    pub embedding: String,
}

impl LossLayers {
    fn uniform(layers: &[&str], embedding: &str) -> Self {
        let v: Vec<String> = layers.iter().map(|s| s.to_string()).collect();
        Self {
            perceptual: v.clone(),
            style: v.clone(),
            contextual: v,
            pixel: vec![layers[0].to_string()],
            embedding: embedding.to_string(),
        }
    }

    fn all(&self) -> impl Iterator<Item = &String> {
        self.perceptual
            .iter()
            .chain(&self.style)
            .chain(&self.contextual)
            .chain(&self.pixel)
            .chain(std::iter::once(&self.embedding))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Output channels of each random-CNN stage.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_padding")]
    pub padding: usize,
    #[serde(default)]
    pub weights: Option<PathBuf>,
    pub layers: LossLayers,
}

fn default_in_channels() -> usize {
    3
}
fn default_widths() -> Vec<usize> {
    vec![16, 32, 64]
}
fn default_kernel() -> usize {
    3
}
fn default_padding() -> usize {
    1
}

impl BackboneSpec {
    pub fn identity() -> Self {
        Self {
            kind: BackboneKind::Identity,
            seed: 0,
            in_channels: 3,
            widths: Vec::new(),
            kernel: 1,
            padding: 0,
            weights: None,
            layers: LossLayers::uniform(&[IDENTITY_LAYER], IDENTITY_LAYER),
        }
    }

    /// Three stages (stride 1, 2, 2) of 3x3 convolutions: 32x32 input gives 32, 16 and 8.
    pub fn random_cnn(seed: u64) -> Self {
        Self {
            kind: BackboneKind::FixedRandomCnn,
            seed,
            in_channels: 3,
            widths: default_widths(),
            kernel: 3,
            padding: 1,
            weights: None,
            layers: LossLayers::uniform(&["conv1", "conv2", "conv3"], "conv3"),
        }
    }

    /// VGG-19 with the last activation of each of the first four stages.
    pub fn vgg19(weights: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackboneKind::PretrainedVgg19,
            seed: 0,
            in_channels: 3,
            widths: Vec::new(),
            kernel: 3,
            padding: 1,
            weights: Some(weights.into()),
            layers: LossLayers::uniform(&["relu1_2", "relu2_2", "relu3_4", "relu4_4"], "relu4_4"),
        }
    }
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::random_cnn(0)
    }
}

/// Ordered `(layer name, B x C x H x W)` feature maps, shallow to deep.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    layers: Vec<(String, Tensor)>,
}

impl FeaturePyramid {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> Vec<&str> {
        self.layers.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.layers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

#[derive(Debug, Clone)]
enum Stage {
    /// conv followed by leaky ReLU
    RandomConv(Conv2d),
    VggConv(Conv2d),
    VggRelu,
    VggPool,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    kind: BackboneKind,
    spec: BackboneSpec,
    stages: Vec<(String, Stage)>,
}

impl Backbone {
    pub fn new(spec: &BackboneSpec, dtype: DType, device: &Device) -> Result<Self> {
        let stages = match spec.kind {
            BackboneKind::Identity => Vec::new(),
            BackboneKind::FixedRandomCnn => random_stages(spec, dtype, device)?,
            BackboneKind::PretrainedVgg19 => {
                let path = spec.weights.as_ref().ok_or_else(|| {
                    Error::Config("pretrained-vgg19 backbone needs a `weights` path".into())
                })?;
                let all = vgg_layer_names();
                let deepest = spec
                    .layers
                    .all()
                    .map(|l| {
                        all.iter().position(|a| a == l).ok_or_else(|| Error::UnknownLayer {
                            name: l.clone(),
                            available: all.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .max()
                    .unwrap_or(0);
                vgg_stages(path, deepest, dtype, device)?
            }
        };
        let backbone = Self {
            kind: spec.kind,
            spec: spec.clone(),
            stages,
        };
        for l in spec.layers.all() {
            backbone.check_layer(l)?;
        }
        Ok(backbone)
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn layers(&self) -> &LossLayers {
        &self.spec.layers
    }

    pub fn layer_names(&self) -> Vec<String> {
        match self.kind {
            BackboneKind::Identity => vec![IDENTITY_LAYER.to_string()],
            BackboneKind::FixedRandomCnn => self.stages.iter().map(|(n, _)| n.clone()).collect(),
            BackboneKind::PretrainedVgg19 => self
                .stages
                .iter()
                .filter(|(_, s)| !matches!(s, Stage::VggConv(_)))
                .map(|(n, _)| n.clone())
                .collect(),
        }
    }

    fn check_layer(&self, name: &str) -> Result<()> {
        let names = self.layer_names();
        if names.iter().any(|n| n == name) {
            Ok(())
        } else {
            Err(Error::UnknownLayer {
                name: name.to_string(),
                available: names,
            })
        }
    }

    /// Runs the backbone up to the deepest requested layer; layers come back in depth order.
    pub fn extract(&self, image: &Tensor, layers: &[String]) -> Result<FeaturePyramid> {
        for l in layers {
            self.check_layer(l)?;
        }
        if self.kind == BackboneKind::Identity {
            let out = if layers.is_empty() {
                Vec::new()
            } else {
                vec![(IDENTITY_LAYER.to_string(), image.clone())]
            };
            return Ok(FeaturePyramid { layers: out });
        }
        let mut x = match self.kind {
            BackboneKind::PretrainedVgg19 => imagenet_normalize(image)?,
            _ => image.clone(),
        };
        let mut out = Vec::new();
        let mut remaining = layers.len();
        for (name, stage) in &self.stages {
            if remaining == 0 {
                break;
            }
            x = match stage {
                Stage::RandomConv(c) => leaky_relu(&c.forward(&x)?, 0.2)?,
                Stage::VggConv(c) => c.forward(&x)?,
                Stage::VggRelu => x.relu()?,
                Stage::VggPool => x.max_pool2d(2)?,
            };
            if layers.iter().any(|l| l == name) {
                out.push((name.clone(), x.clone()));
                remaining -= 1;
            }
        }
        Ok(FeaturePyramid { layers: out })
    }

    /// Every named layer, shallow to deep.
    pub fn extract_all(&self, image: &Tensor) -> Result<FeaturePyramid> {
        self.extract(image, &self.layer_names())
    }

    /// Global average pool of the embedding layer: one vector per batch item.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let layer = self.spec.layers.embedding.clone();
        let pyr = self.extract(image, std::slice::from_ref(&layer))?;
        let f = pyr.get(&layer).expect("requested layer present");
        Ok(f.mean(3)?.mean(2)?)
    }
}

fn random_stages(spec: &BackboneSpec, dtype: DType, device: &Device) -> Result<Vec<(String, Stage)>> {
    if spec.widths.is_empty() {
        return Err(Error::Config("fixed-random-cnn needs at least one stage width".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut stages = Vec::new();
    let mut cin = spec.in_channels;
    for (i, &cout) in spec.widths.iter().enumerate() {
        let fan_in = (cin * spec.kernel * spec.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let n = cout * cin * spec.kernel * spec.kernel;
        let w: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let weight = Tensor::from_vec(w, (cout, cin, spec.kernel, spec.kernel), device)?.to_dtype(dtype)?;
        let conv = Conv2d {
            weight,
            bias: None,
            stride: if i == 0 { 1 } else { 2 },
            padding: spec.padding,
            dilation: 1,
        };
        stages.push((format!("conv{}", i + 1), Stage::RandomConv(conv)));
        cin = cout;
    }
    Ok(stages)
}

fn vgg_layer_names() -> Vec<String> {
    let mut names = Vec::new();
    for (b, block) in VGG19_CFG.iter().enumerate() {
        for k in 0..block.len() {
            names.push(format!("relu{}_{}", b + 1, k + 1));
        }
        names.push(format!("pool{}", b + 1));
    }
    names
}

fn vgg_stages(path: &Path, deepest: usize, dtype: DType, device: &Device) -> Result<Vec<(String, Stage)>> {
    let tensors = candle_core::safetensors::load(path, device)?;
    let mut stages = Vec::new();
    let mut index = 0usize;
    let mut named = 0usize;
    let mut cin = 3;
    'outer: for (b, block) in VGG19_CFG.iter().enumerate() {
        for (k, &cout) in block.iter().enumerate() {
            let get = |suffix: &str| -> Result<Tensor> {
                let key = format!("features.{index}.{suffix}");
                let t = tensors.get(&key).ok_or_else(|| Error::Checkpoint {
                    path: path.to_path_buf(),
                    detail: format!("missing tensor {key}"),
                })?;
                Ok(t.to_dtype(dtype)?)
            };
            let weight = get("weight")?;
            if weight.dims() != [cout, cin, 3, 3] {
                return Err(Error::shape(format!(
                    "vgg features.{index}.weight: expected {:?}, found {:?}",
                    [cout, cin, 3, 3],
                    weight.dims()
                )));
            }
            let conv = Conv2d {
                weight,
                bias: Some(get("bias")?),
                stride: 1,
                padding: 1,
                dilation: 1,
            };
            stages.push((format!("conv{}_{}", b + 1, k + 1), Stage::VggConv(conv)));
            stages.push((format!("relu{}_{}", b + 1, k + 1), Stage::VggRelu));
            index += 2;
            cin = cout;
            if named == deepest {
                break 'outer;
            }
            named += 1;
        }
        stages.push((format!("pool{}", b + 1), Stage::VggPool));
        index += 1;
        if named == deepest {
            break;
        }
        named += 1;
    }
    Ok(stages)
}

fn imagenet_normalize(image: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = image.dims4()?;
    let x = match c {
        3 => image.clone(),
        1 => Tensor::cat(&[image, image, image], 1)?,
        _ => return Err(Error::shape(format!("vgg19 expects 1 or 3 channels, got {c}"))),
    };
    let unit = x.affine(0.5, 0.5)?;
    let dev = image.device();
    let mean = Tensor::new(&IMAGENET_MEAN, dev)?.to_dtype(image.dtype())?.reshape((1, 3, 1, 1))?;
    let std = Tensor::new(&IMAGENET_STD, dev)?.to_dtype(image.dtype())?.reshape((1, 3, 1, 1))?;
    Ok(unit.broadcast_sub(&mean)?.broadcast_div(&std)?)
}
