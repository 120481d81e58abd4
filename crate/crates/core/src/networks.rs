//! Generator, reference encoder and patch discriminator.
//!
//! The generator encodes the corrupted image with the keep-mask as a fourth input
//! channel, runs seven dilated residual blocks at the bottleneck, merges the
//! reference features through example-guided attention and decodes back to
//! image resolution with a tanh bound. The reference encoder has the generator
//! encoder's exact structure (its fourth channel is a constant plane of ones)
//! but its own parameters.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::{query_channels, ExampleGuidedAttention, FlowPolarity, FusionKind};
use crate::error::{Error, Result};
use crate::imagecore::{downsample_mask, ComponentMask};
use crate::nn::{instance_norm, leaky_relu, Conv2d, ConvSpec, ConvTranspose2d, ParamGroup, ParamStore};

pub const NUM_DILATED_BLOCKS: usize = 7;
const DISC_STRIDED_STAGES: usize = 3;
const LRELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    #[default]
    Instance,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub downsample_steps: usize,
    pub dilation_schedule: Vec<usize>,
    pub image_size: usize,
    #[serde(default)]
    pub norm: NormKind,
    /// `false` replaces the attention module by concatenating reference and source features.
    #[serde(default = "yes")]
    pub attention: bool,
    #[serde(default)]
    pub fusion: FusionKind,
    #[serde(default)]
    pub flow_polarity: FlowPolarity,
    pub discriminator_channels: usize,
}

fn yes() -> bool {
    true
}

impl GeneratorConfig {
    /// Desk-scale defaults: 32x32 images, 16 base channels, 8x8 bottleneck.
    pub fn toy() -> Self {
        Self {
            base_channels: 16,
            downsample_steps: 2,
            dilation_schedule: vec![1, 2, 4, 8, 4, 2, 1],
            image_size: 32,
            norm: NormKind::Instance,
            attention: true,
            fusion: FusionKind::Concat,
            flow_polarity: FlowPolarity::Literal,
            discriminator_channels: 16,
        }
    }

    /// Full resolution: 256x256 images with a 64x64 bottleneck.
    pub fn full() -> Self {
        Self {
            base_channels: 64,
            image_size: 256,
            discriminator_channels: 64,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation_schedule.len() != NUM_DILATED_BLOCKS {
            return Err(Error::Config(format!(
                "dilation_schedule needs exactly {NUM_DILATED_BLOCKS} entries, got {}",
                self.dilation_schedule.len()
            )));
        }
        if self.dilation_schedule.contains(&0) {
            return Err(Error::Config("dilations must be positive".into()));
        }
        let factor = 1usize << self.downsample_steps;
        if self.image_size == 0 || self.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by 2^{}",
                self.image_size, self.downsample_steps
            )));
        }
        if self.image_size < 1 << DISC_STRIDED_STAGES {
            return Err(Error::Config("image_size too small for the discriminator".into()));
        }
        if self.base_channels == 0 || self.discriminator_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.downsample_steps
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.downsample_steps
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.downsample_steps
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    norm: NormKind,
}

impl Encoder {
    fn new(store: &mut ParamStore, prefix: &str, group: ParamGroup, cfg: &GeneratorConfig) -> Result<Self> {
        let bias = cfg.norm == NormKind::None;
        let stem = store.conv2d(
            &format!("{prefix}.stem"),
            group,
            ConvSpec::new(4, cfg.base_channels, 3).bias(bias),
        )?;
        let mut downs = Vec::new();
        let mut c = cfg.base_channels;
        for i in 0..cfg.downsample_steps {
            downs.push(store.conv2d(
                &format!("{prefix}.down{i}"),
                group,
                ConvSpec::new(c, 2 * c, 4).stride(2).padding(1).bias(bias),
            )?);
            c *= 2;
        }
        Ok(Self {
            stem,
            downs,
            norm: cfg.norm,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = norm_relu(&self.stem.forward(x)?, self.norm)?;
        for d in &self.downs {
            h = norm_relu(&d.forward(&h)?, self.norm)?;
        }
        Ok(h)
    }
}

fn norm(x: &Tensor, kind: NormKind) -> Result<Tensor> {
    match kind {
        NormKind::Instance => instance_norm(x),
        NormKind::None => Ok(x.clone()),
    }
}

fn norm_relu(x: &Tensor, kind: NormKind) -> Result<Tensor> {
    Ok(norm(x, kind)?.relu()?)
}

#[derive(Debug, Clone)]
struct DilatedResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    norm: NormKind,
}

impl DilatedResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = norm_relu(&self.conv1.forward(x)?, self.norm)?;
        let h = norm(&self.conv2.forward(&h)?, self.norm)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
enum Bottleneck {
    Attention(ExampleGuidedAttention),
    /// "without attention": 1x1 projection of `[F_s ; F_r]`.
    Concat(Conv2d),
}

#[derive(Debug, Clone)]
struct Decoder {
    ups: Vec<ConvTranspose2d>,
    out: Conv2d,
    norm: NormKind,
}

impl Decoder {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for u in &self.ups {
            h = norm_relu(&u.forward(&h)?, self.norm)?;
        }
        Ok(self.out.forward(&h)?.tanh()?)
    }
}

#[derive(Debug, Clone)]
struct Discriminator {
    stages: Vec<Conv2d>,
    out: Conv2d,
}

impl Discriminator {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for s in &self.stages {
            h = leaky_relu(&s.forward(&h)?, LRELU_SLOPE)?;
        }
        self.out.forward(&h)
    }
}

/// All trainable networks plus their parameter store.
#[derive(Debug)]
pub struct RFaceModel {
    config: GeneratorConfig,
    store: ParamStore,
    source_encoder: Encoder,
    reference_encoder: Encoder,
    blocks: Vec<DilatedResBlock>,
    bottleneck: Bottleneck,
    decoder: Decoder,
    discriminator: Discriminator,
}

impl RFaceModel {
    pub fn new(config: &GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let mut store = ParamStore::new(seed, dtype, device);
        let bias = cfg.norm == NormKind::None;

        let source_encoder = Encoder::new(&mut store, "gen.enc", ParamGroup::Generator, cfg)?;
        let reference_encoder = Encoder::new(&mut store, "ref.enc", ParamGroup::Reference, cfg)?;

        let c = cfg.bottleneck_channels();
        let mut blocks = Vec::new();
        for (i, &d) in cfg.dilation_schedule.iter().enumerate() {
            let conv1 = store.conv2d(
                &format!("gen.block{i}.conv1"),
                ParamGroup::Generator,
                ConvSpec::new(c, c, 3).padding(d).dilation(d).bias(bias),
            )?;
            let conv2 = store.conv2d(
                &format!("gen.block{i}.conv2"),
                ParamGroup::Generator,
                ConvSpec::new(c, c, 3).bias(bias),
            )?;
            blocks.push(DilatedResBlock {
                conv1,
                conv2,
                norm: cfg.norm,
            });
        }

        let bottleneck = if cfg.attention {
            let query = store.conv2d("attn.query", ParamGroup::Query, ConvSpec::new(c, query_channels(c), 1))?;
            let projection = match cfg.fusion {
                FusionKind::Concat => Some(store.conv2d("attn.fuse", ParamGroup::Fusion, ConvSpec::new(2 * c, c, 1))?),
                FusionKind::Add => None,
            };
            Bottleneck::Attention(ExampleGuidedAttention {
                query,
                projection,
                polarity: cfg.flow_polarity,
            })
        } else {
            Bottleneck::Concat(store.conv2d("concat.fuse", ParamGroup::Fusion, ConvSpec::new(2 * c, c, 1))?)
        };

        let mut ups = Vec::new();
        let mut ch = c;
        for i in 0..cfg.downsample_steps {
            ups.push(store.conv_transpose2d(
                &format!("gen.dec.up{i}"),
                ParamGroup::Generator,
                ConvSpec::new(ch, ch / 2, 4).stride(2).padding(1).bias(bias),
            )?);
            ch /= 2;
        }
        let out = store.conv2d("gen.dec.out", ParamGroup::Generator, ConvSpec::new(ch, 3, 3))?;
        let decoder = Decoder {
            ups,
            out,
            norm: cfg.norm,
        };

        let mut stages = Vec::new();
        let mut cin = 3;
        let mut cout = cfg.discriminator_channels;
        for i in 0..DISC_STRIDED_STAGES {
            stages.push(store.conv2d(
                &format!("disc.conv{i}"),
                ParamGroup::Discriminator,
                ConvSpec::new(cin, cout, 4).stride(2).padding(1),
            )?);
            cin = cout;
            cout *= 2;
        }
        let out = store.conv2d("disc.out", ParamGroup::Discriminator, ConvSpec::new(cin, 1, 3))?;
        let discriminator = Discriminator { stages, out };

        Ok(Self {
            config: cfg.clone(),
            store,
            source_encoder,
            reference_encoder,
            blocks,
            bottleneck,
            decoder,
            discriminator,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    fn check_image(&self, x: &Tensor, what: &str) -> Result<usize> {
        let (b, c, h, w) = x.dims4()?;
        let s = self.config.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(format!(
                "{what} must be Bx3x{s}x{s}, got {:?}",
                x.dims()
            )));
        }
        Ok(b)
    }

    /// `E_r(I_r)`: reference features at bottleneck resolution.
    pub fn encode_reference(&self, reference: &Tensor) -> Result<Tensor> {
        let b = self.check_image(reference, "reference image")?;
        let s = self.config.image_size;
        let ones = Tensor::ones((b, 1, s, s), reference.dtype(), reference.device())?;
        self.reference_encoder.forward(&Tensor::cat(&[reference, &ones], 1)?)
    }

    /// The generator encoder alone, on `[I_c ; mask]`.
    pub fn encode_source(&self, corrupted: &Tensor, mask: &ComponentMask) -> Result<Tensor> {
        let b = self.check_image(corrupted, "corrupted image")?;
        let s = self.config.image_size;
        if (mask.batch(), mask.height(), mask.width()) != (b, s, s) {
            return Err(Error::shape(format!(
                "mask {}x1x{}x{} does not match image batch {b}x{s}x{s}",
                mask.batch(),
                mask.height(),
                mask.width()
            )));
        }
        let m = mask.to_tensor(corrupted.dtype(), corrupted.device())?;
        self.source_encoder.forward(&Tensor::cat(&[corrupted, &m], 1)?)
    }

    /// `I_g = G_i(I_c, I_m^s, E_r(I_r))`.
    pub fn generate(&self, corrupted: &Tensor, mask: &ComponentMask, reference_features: &Tensor) -> Result<Tensor> {
        let mut h = self.encode_source(corrupted, mask)?;
        if h.dims() != reference_features.dims() {
            return Err(Error::shape(format!(
                "reference features {:?} do not match the bottleneck {:?}",
                reference_features.dims(),
                h.dims()
            )));
        }
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let fused = match &self.bottleneck {
            Bottleneck::Attention(att) => {
                let m = downsample_mask(mask, self.config.downsample_factor())?;
                let m = m.to_tensor(h.dtype(), h.device())?;
                att.forward(&h, reference_features, &m)?.fused
            }
            Bottleneck::Concat(proj) => proj.forward(&Tensor::cat(&[&h, reference_features], 1)?)?,
        };
        self.decoder.forward(&fused)
    }

    /// Convenience: encode the reference and generate in one call.
    pub fn forward(&self, corrupted: &Tensor, mask: &ComponentMask, reference: &Tensor) -> Result<Tensor> {
        let fr = self.encode_reference(reference)?;
        self.generate(corrupted, mask, &fr)
    }

    /// Raw patch scores (no sigmoid).
    pub fn discriminate(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image, "discriminator input")?;
        self.discriminator.forward(image)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BlendMode {
    Raw,
    #[default]
    Paste,
}

/// `Raw` returns the generator output; `Paste` keeps source pixels outside the hole.
pub fn compose_output(generated: &Tensor, source: &Tensor, mask: &ComponentMask, mode: BlendMode) -> Result<Tensor> {
    if generated.dims() != source.dims() {
        return Err(Error::shape(format!(
            "generated {:?} and source {:?} differ",
            generated.dims(),
            source.dims()
        )));
    }
    match mode {
        BlendMode::Raw => Ok(generated.clone()),
        BlendMode::Paste => {
            let keep = mask
                .to_tensor(DType::U8, source.device())?
                .broadcast_as(source.shape())?;
            Ok(keep.where_cond(source, generated)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn image(b: usize, s: usize, seed: u64) -> Tensor {
        let n = b * 3 * s * s;
        let v: Vec<f32> = (0..n)
            .map(|i| ((((i as u64 + seed) * 2654435761) % 1000) as f32 / 500.0) - 1.0)
            .collect();
        Tensor::from_vec(v, (b, 3, s, s), &Device::Cpu).unwrap()
    }

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 4,
            discriminator_channels: 4,
            ..GeneratorConfig::toy()
        }
    }

    #[test]
    fn reference_features_have_bottleneck_shape() {
        let cfg = GeneratorConfig {
            base_channels: 64,
            ..GeneratorConfig::toy()
        };
        let m = RFaceModel::new(&cfg, 0, DType::F32, &Device::Cpu).unwrap();
        let fr = m.encode_reference(&image(1, 32, 1)).unwrap();
        assert_eq!(fr.dims(), &[1, 256, 8, 8]);
    }

    #[test]
    fn encoders_do_not_share_parameters() {
        let m = RFaceModel::new(&small(), 0, DType::F32, &Device::Cpu).unwrap();
        let x = image(1, 32, 3);
        let mask = ComponentMask::ones(1, 32, 32);
        let a = m.encode_source(&x, &mask).unwrap();
        let b = m.encode_reference(&x).unwrap();
        let diff = (a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff > 0.0);
        // same structure
        for (name, p) in m.store().iter().filter(|(n, _)| n.starts_with("gen.enc")) {
            let twin = name.replacen("gen.enc", "ref.enc", 1);
            assert_eq!(p.var.dims(), m.store().get(&twin).unwrap().var.dims());
        }
        // mutating the reference encoder leaves the source encoder untouched
        let w = m.store().get("ref.enc.stem.weight").unwrap();
        w.var.set(&w.var.as_tensor().affine(3.0, 0.1).unwrap()).unwrap();
        let a2 = m.encode_source(&x, &mask).unwrap();
        let b2 = m.encode_reference(&x).unwrap();
        let same = (m.encode_source(&x, &mask).unwrap() - &a2).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(same.to_scalar::<f32>().unwrap(), 0.0);
        let moved = (b2 - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(moved > 0.0);
    }

    #[test]
    fn generate_shape_range_and_determinism() {
        for steps in [2usize, 3] {
            for size in [32usize, 64] {
                let cfg = GeneratorConfig {
                    downsample_steps: steps,
                    image_size: size,
                    ..small()
                };
                let m = RFaceModel::new(&cfg, 5, DType::F32, &Device::Cpu).unwrap();
                let x = image(2, size, 7);
                let mut data = vec![1u8; 2 * size * size];
                data[size * 3 + 4] = 0;
                let mask = ComponentMask::new(2, size, size, data).unwrap();
                let out = m.forward(&x, &mask, &image(2, size, 9)).unwrap();
                assert_eq!(out.dims(), x.dims());
                let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                assert!(v.iter().all(|p| (-1.0..=1.0).contains(p)));
                let again = m.forward(&x, &mask, &image(2, size, 9)).unwrap();
                assert_eq!(v, again.flatten_all().unwrap().to_vec1::<f32>().unwrap());
            }
        }
    }

    #[test]
    fn generate_rejects_mismatched_reference_features() {
        let m = RFaceModel::new(&small(), 0, DType::F32, &Device::Cpu).unwrap();
        let x = image(1, 32, 0);
        let fr = Tensor::zeros((1, 16, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(m.generate(&x, &ComponentMask::ones(1, 32, 32), &fr).is_err());
        assert!(m.encode_reference(&image(1, 16, 0)).is_err());
    }

    #[test]
    fn discriminator_patch_map() {
        let m = RFaceModel::new(&small(), 0, DType::F32, &Device::Cpu).unwrap();
        let s = m.discriminate(&image(2, 32, 4)).unwrap();
        assert_eq!(s.dims(), &[2, 1, 4, 4]);
        let v = s.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn constructed_discriminator_zeroes_lsgan_loss() {
        // each stage copies channel 0 of one tap; final conv maps real=1 -> 1, fake=-1 -> 0
        let m = RFaceModel::new(&small(), 0, DType::F64, &Device::Cpu).unwrap();
        let dev = Device::Cpu;
        let mut values: BTreeMap<String, Tensor> = m.store().snapshot().unwrap();
        for (name, t) in values.iter_mut().filter(|(n, _)| n.starts_with("disc.")) {
            let dims = t.dims().to_vec();
            let mut v = vec![0f64; t.elem_count()];
            if name.ends_with(".weight") {
                // tap (1, 1) of output 0 / input 0
                let tap = dims[3] + 1;
                v[tap] = if name.starts_with("disc.out") { 1.0 / 1.008 } else { 1.0 };
            } else if name == "disc.out.bias" {
                v[0] = 0.008 / 1.008;
            }
            *t = Tensor::from_vec(v, dims, &dev).unwrap();
        }
        m.store().load(&values).unwrap();
        let real = Tensor::ones((1, 3, 32, 32), DType::F64, &dev).unwrap();
        let fake = real.neg().unwrap();
        let dr = m.discriminate(&real).unwrap();
        let df = m.discriminate(&fake).unwrap();
        let (_, ld) = crate::losses::adversarial_losses(&dr, &df).unwrap();
        assert!(crate::nn::scalar(&ld).unwrap().abs() < 1e-12);
    }

    #[test]
    fn paste_composition() {
        let dev = Device::Cpu;
        let g = Tensor::from_vec(vec![-0.5f32; 12], (1, 3, 2, 2), &dev).unwrap();
        let s = Tensor::from_vec((0..12).map(|i| i as f32 / 12.0).collect::<Vec<_>>(), (1, 3, 2, 2), &dev).unwrap();
        let vals = |t: Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let ones = ComponentMask::ones(1, 2, 2);
        assert_eq!(vals(compose_output(&g, &s, &ones, BlendMode::Paste).unwrap()), vals(s.clone()));
        let zeros = ComponentMask::zeros(1, 2, 2);
        assert_eq!(vals(compose_output(&g, &s, &zeros, BlendMode::Paste).unwrap()), vals(g.clone()));
        assert_eq!(vals(compose_output(&g, &s, &ones, BlendMode::Raw).unwrap()), vals(g.clone()));
        let mixed = ComponentMask::new(1, 2, 2, vec![1, 0, 0, 1]).unwrap();
        let out = vals(compose_output(&g, &s, &mixed, BlendMode::Paste).unwrap());
        let (gv, sv) = (vals(g), vals(s));
        for c in 0..3 {
            for p in 0..4 {
                let i = c * 4 + p;
                let expected = if mixed.data()[p] == 1 { sv[i] } else { gv[i] };
                assert_eq!(out[i], expected);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = GeneratorConfig::toy();
        cfg.dilation_schedule.pop();
        assert!(cfg.validate().is_err());
        let cfg = GeneratorConfig {
            image_size: 36,
            downsample_steps: 3,
            ..GeneratorConfig::toy()
        };
        assert!(cfg.validate().is_err());
        assert!(GeneratorConfig::full().validate().is_ok());
    }
}
