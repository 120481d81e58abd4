//! Images, parsing labels and component masks.
//!
//! Masks use a keep convention everywhere: `1` marks a preserved source pixel
//! and `0` marks a hole left by a removed face component. Corrupting an image
//! is then a plain elementwise product.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 19 face-parsing classes of CelebAMask-HQ, in label-id order.
pub const FACE_CLASSES: [&str; 19] = [
    "background",
    "skin",
    "nose",
    "eye_g",
    "l_eye",
    "r_eye",
    "l_brow",
    "r_brow",
    "l_ear",
    "r_ear",
    "mouth",
    "u_lip",
    "l_lip",
    "hair",
    "hat",
    "ear_r",
    "neck_l",
    "neck",
    "cloth",
];

pub const NUM_CLASSES: u8 = FACE_CLASSES.len() as u8;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_SKIN: u8 = 1;
pub const CLASS_NOSE: u8 = 2;
pub const CLASS_LEFT_EYE: u8 = 4;
pub const CLASS_RIGHT_EYE: u8 = 5;
pub const CLASS_MOUTH: u8 = 10;
pub const CLASS_UPPER_LIP: u8 = 11;
pub const CLASS_LOWER_LIP: u8 = 12;
pub const CLASS_HAIR: u8 = 13;

pub fn class_id(name: &str) -> Option<u8> {
    FACE_CLASSES.iter().position(|c| *c == name).map(|i| i as u8)
}

/// Declared value interval of an image tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// `[-1, 1]`, what the networks consume and produce.
    Network,
    /// `[0, 1]`, what the metrics consume.
    Unit,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Network => (-1.0, 1.0),
            ValueRange::Unit => (0.0, 1.0),
        }
    }
}

/// A batched `B x C x H x W` raster whose elements lie in a declared range.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    tensor: Tensor,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(tensor: Tensor, range: ValueRange) -> Result<Self> {
        let (_, c, h, w) = tensor.dims4()?;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "image dims must be positive, got {:?}",
                tensor.dims()
            )));
        }
        let (lo, hi) = range.bounds();
        let values = tensor.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if let Some(v) = values.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::Range(format!(
                "element {v} outside [{lo}, {hi}]"
            )));
        }
        Ok(Self { tensor, range })
    }

    pub fn from_rgb(images: &[RgbImage], range: ValueRange, dtype: DType, device: &Device) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::shape("cannot build an empty image batch"))?;
        let (w, h) = first.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.dimensions() != first.dimensions() {
                return Err(Error::shape("images in a batch must share dimensions"));
            }
            for c in 0..3 {
                for p in img.pixels() {
                    let u = p[c] as f32 / 255.0;
                    data.push(match range {
                        ValueRange::Unit => u,
                        ValueRange::Network => u * 2.0 - 1.0,
                    });
                }
            }
        }
        let tensor = Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?;
        Ok(Self { tensor, range })
    }

    pub fn to_rgb(&self) -> Result<Vec<RgbImage>> {
        let (b, c, h, w) = self.tensor.dims4()?;
        if c != 3 && c != 1 {
            return Err(Error::shape(format!("cannot export {c}-channel image")));
        }
        let unit = self.to_range(ValueRange::Unit)?;
        let data = unit.tensor.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let plane = h * w;
        Ok((0..b)
            .map(|bi| {
                RgbImage::from_fn(w as u32, h as u32, |x, y| {
                    let idx = y as usize * w + x as usize;
                    let px = |ch: usize| {
                        let ch = ch.min(c - 1);
                        let v = data[(bi * c + ch) * plane + idx];
                        (v.clamp(0.0, 1.0) * 255.0).round() as u8
                    };
                    image::Rgb([px(0), px(1), px(2)])
                })
            })
            .collect())
    }

    pub fn to_range(&self, range: ValueRange) -> Result<ImageTensor> {
        let tensor = match (self.range, range) {
            (a, b) if a == b => self.tensor.clone(),
            (ValueRange::Network, ValueRange::Unit) => self.tensor.affine(0.5, 0.5)?,
            (ValueRange::Unit, ValueRange::Network) => self.tensor.affine(2.0, -1.0)?,
            _ => unreachable!(),
        };
        Ok(ImageTensor { tensor, range })
    }

    /// Wraps a tensor that is known to be in range (for instance a tanh output).
    pub(crate) fn from_trusted(tensor: Tensor, range: ValueRange) -> Self {
        Self { tensor, range }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.tensor.dims();
        (d[0], d[1], d[2], d[3])
    }
}

/// Per-pixel parsing labels for a single image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }

    /// Nearest-neighbour resize; never invents class ids.
    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMap {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                data.push(self.data[sy * self.width + sx]);
            }
        }
        LabelMap {
            height,
            width,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Eyes,
    Nose,
    Mouth,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Eyes, Component::Nose, Component::Mouth];

    pub fn class_ids(self) -> &'static [u8] {
        match self {
            Component::Eyes => &[CLASS_LEFT_EYE, CLASS_RIGHT_EYE],
            Component::Nose => &[CLASS_NOSE],
            Component::Mouth => &[CLASS_MOUTH, CLASS_UPPER_LIP, CLASS_LOWER_LIP],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Eyes => "eyes",
            Component::Nose => "nose",
            Component::Mouth => "mouth",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "eyes" => Ok(Component::Eyes),
            "nose" => Ok(Component::Nose),
            "mouth" => Ok(Component::Mouth),
            _ => Err(Error::UnknownComponent { name: s.to_string() }),
        }
    }
}

/// A subset of {eyes, nose, mouth}.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct ComponentSet(BTreeSet<Component>);

impl ComponentSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Component::ALL.into_iter().collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, c: Component) -> bool {
        self.0.contains(&c)
    }

    pub fn iter(&self) -> impl Iterator<Item = Component> + '_ {
        self.0.iter().copied()
    }

    /// Class ids covered by the selected components.
    pub fn class_ids(&self) -> BTreeSet<u8> {
        self.iter().flat_map(|c| c.class_ids().iter().copied()).collect()
    }

    /// Parses a comma-separated list such as `eyes,mouth`.
    pub fn parse_list(s: &str) -> Result<Self> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(Component::from_str)
            .collect()
    }
}

impl FromIterator<Component> for ComponentSet {
    fn from_iter<I: IntoIterator<Item = Component>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl fmt::Display for ComponentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Component::name).collect();
        f.write_str(&names.join(","))
    }
}

/// Binary keep-mask of shape `B x 1 x H x W` (1 = keep, 0 = hole).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMask {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ComponentMask {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(Error::shape(format!(
                "mask {batch}x1x{height}x{width} needs {} values, got {}",
                batch * height * width,
                data.len()
            )));
        }
        if let Some(&v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::NonBinaryMask(v as f64));
        }
        Ok(Self {
            batch,
            height,
            width,
            data,
        })
    }

    pub fn ones(batch: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            height,
            width,
            data: vec![1; batch * height * width],
        }
    }

    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            height,
            width,
            data: vec![0; batch * height * width],
        }
    }

    /// Reads a `B x 1 x H x W` tensor whose values must be exactly 0 or 1.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("mask must have one channel, got {c}")));
        }
        let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let mut data = Vec::with_capacity(values.len());
        for v in values {
            if v == 0.0 {
                data.push(0);
            } else if v == 1.0 {
                data.push(1);
            } else {
                return Err(Error::NonBinaryMask(v));
            }
        }
        Ok(Self {
            batch: b,
            height: h,
            width: w,
            data,
        })
    }

    pub fn stack(masks: &[ComponentMask]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero masks"))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for m in masks {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(Error::shape("masks in a batch must share spatial dims"));
            }
            data.extend_from_slice(&m.data);
            batch += m.batch;
        }
        Ok(Self {
            batch,
            height: first.height,
            width: first.width,
            data,
        })
    }

    pub fn item(&self, index: usize) -> ComponentMask {
        let plane = self.height * self.width;
        ComponentMask {
            batch: 1,
            height: self.height,
            width: self.width,
            data: self.data[index * plane..(index + 1) * plane].to_vec(),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> u8 {
        self.data[(b * self.height + y) * self.width + x]
    }

    pub fn is_hole(&self, b: usize, y: usize, x: usize) -> bool {
        self.get(b, y, x) == 0
    }

    pub fn hole_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }

    /// The mask as a `B x 1 x H x W` tensor of 0.0/1.0.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_iter(self.data.iter().copied(), device)?
            .reshape((self.batch, 1, self.height, self.width))?
            .to_dtype(dtype)?)
    }

    /// The complement: 1 on the hole, 0 elsewhere.
    pub fn inverted(&self) -> ComponentMask {
        ComponentMask {
            data: self.data.iter().map(|v| 1 - v).collect(),
            ..*self
        }
    }
}

/// `source ⊙ mask`: zeroes every hole pixel.
pub fn corrupt(source: &ImageTensor, mask: &ComponentMask) -> Result<ImageTensor> {
    let (b, _, h, w) = source.dims();
    if (mask.batch, mask.height, mask.width) != (b, h, w) {
        return Err(Error::shape(format!(
            "image {:?} and mask {}x1x{}x{} do not align",
            source.tensor.dims(),
            mask.batch,
            mask.height,
            mask.width
        )));
    }
    let m = mask.to_tensor(source.tensor.dtype(), source.tensor.device())?;
    let out = apply_mask(source.tensor(), &m)?;
    Ok(ImageTensor::from_trusted(out, source.range))
}

/// Tensor-level corruption used inside the training graph; `mask` broadcasts over channels.
pub fn apply_mask(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(mask)?)
}

/// Builds a keep-mask from a parsing label map: selected components become holes.
pub fn components_to_mask(labels: &LabelMap, set: &ComponentSet) -> Result<ComponentMask> {
    let holes = set.class_ids();
    let mut data = Vec::with_capacity(labels.data.len());
    for &c in &labels.data {
        if c >= NUM_CLASSES {
            return Err(Error::UnknownClass(c));
        }
        data.push(if holes.contains(&c) { 0 } else { 1 });
    }
    Ok(ComponentMask {
        batch: 1,
        height: labels.height,
        width: labels.width,
        data,
    })
}

/// Grows the hole region by a square structuring element of side `2 * radius + 1`,
/// clipped at the image border.
pub fn dilate_mask(mask: &ComponentMask, radius: usize) -> ComponentMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height, mask.width);
    let plane = h * w;
    let mut out = vec![1u8; mask.data.len()];
    let mut rows = vec![false; plane];
    for b in 0..mask.batch {
        let src = &mask.data[b * plane..(b + 1) * plane];
        // separable: horizontal then vertical max of the hole indicator
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                rows[y * w + x] = (lo..=hi).any(|xx| src[y * w + xx] == 0);
            }
        }
        let dst = &mut out[b * plane..(b + 1) * plane];
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for x in 0..w {
                if (lo..=hi).any(|yy| rows[yy * w + x]) {
                    dst[y * w + x] = 0;
                }
            }
        }
    }
    ComponentMask {
        data: out,
        ..*mask
    }
}

/// Nearest-neighbour subsampling anchored at the top-left pixel of each `factor x factor` cell.
pub fn downsample_mask(mask: &ComponentMask, factor: usize) -> Result<ComponentMask> {
    if factor == 0 || mask.height % factor != 0 || mask.width % factor != 0 {
        return Err(Error::shape(format!(
            "mask {}x{} is not divisible by factor {factor}",
            mask.height, mask.width
        )));
    }
    let (oh, ow) = (mask.height / factor, mask.width / factor);
    let mut data = Vec::with_capacity(mask.batch * oh * ow);
    for b in 0..mask.batch {
        for y in 0..oh {
            for x in 0..ow {
                data.push(mask.get(b, y * factor, x * factor));
            }
        }
    }
    Ok(ComponentMask {
        batch: mask.batch,
        height: oh,
        width: ow,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(data: Vec<f32>, h: usize, w: usize) -> ImageTensor {
        let t = Tensor::from_vec(data, (1, 1, h, w), &Device::Cpu).unwrap();
        ImageTensor::new(t, ValueRange::Network).unwrap()
    }

    #[test]
    fn corrupt_worked_example() {
        let t = Tensor::from_vec(vec![1f32, 2., 3., 4.], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let x = ImageTensor::from_trusted(t, ValueRange::Network);
        let m = ComponentMask::new(1, 2, 2, vec![1, 0, 0, 1]).unwrap();
        let out = corrupt(&x, &m).unwrap();
        let v = out.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![1., 0., 0., 4.]);
    }

    #[test]
    fn corrupt_identity_and_annihilation() {
        let x = img(vec![0.5, -0.25, 0.75, -1.0], 2, 2);
        let same = corrupt(&x, &ComponentMask::ones(1, 2, 2)).unwrap();
        assert_eq!(
            same.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![0.5, -0.25, 0.75, -1.0]
        );
        let zero = corrupt(&x, &ComponentMask::zeros(1, 2, 2)).unwrap();
        assert!(zero
            .tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn corrupt_rejects_misaligned_mask() {
        let x = img(vec![0.0; 4], 2, 2);
        let m = ComponentMask::ones(1, 3, 2);
        assert!(matches!(corrupt(&x, &m), Err(Error::Shape(_))));
    }

    #[test]
    fn image_range_is_validated() {
        let t = Tensor::from_vec(vec![0.0f32, 1.5], (1, 1, 1, 2), &Device::Cpu).unwrap();
        assert!(matches!(
            ImageTensor::new(t, ValueRange::Network),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn mask_rejects_non_binary_values() {
        assert!(ComponentMask::new(1, 1, 2, vec![1, 2]).is_err());
        let t = Tensor::from_vec(vec![0.0f32, 0.5], (1, 1, 1, 2), &Device::Cpu).unwrap();
        assert!(matches!(
            ComponentMask::from_tensor(&t),
            Err(Error::NonBinaryMask(_))
        ));
    }

    #[test]
    fn component_groups() {
        assert_eq!(Component::Eyes.class_ids(), &[CLASS_LEFT_EYE, CLASS_RIGHT_EYE]);
        assert_eq!(Component::Nose.class_ids(), &[CLASS_NOSE]);
        assert_eq!(
            Component::Mouth.class_ids(),
            &[CLASS_MOUTH, CLASS_UPPER_LIP, CLASS_LOWER_LIP]
        );
        assert_eq!(FACE_CLASSES[CLASS_LEFT_EYE as usize], "l_eye");
        assert_eq!(FACE_CLASSES[CLASS_UPPER_LIP as usize], "u_lip");
    }

    #[test]
    fn parse_component_list() {
        let set = ComponentSet::parse_list("eyes, mouth").unwrap();
        assert!(set.contains(Component::Eyes) && set.contains(Component::Mouth));
        assert_eq!(set.len(), 2);
        let err = ComponentSet::parse_list("eyes,ears").unwrap_err();
        assert!(err.to_string().contains("eyes, nose, mouth"));
    }

    #[test]
    fn empty_set_keeps_everything() {
        let labels = LabelMap::new(2, 2, vec![0, 2, 4, 10]).unwrap();
        let m = components_to_mask(&labels, &ComponentSet::empty()).unwrap();
        assert_eq!(m.data(), &[1, 1, 1, 1]);
    }

    #[test]
    fn eyes_only_removes_eye_pixels() {
        let mut labels = LabelMap::filled(4, 4, CLASS_SKIN);
        labels.set(1, 1, CLASS_LEFT_EYE);
        labels.set(1, 2, CLASS_LEFT_EYE);
        let set: ComponentSet = [Component::Eyes].into_iter().collect();
        let m = components_to_mask(&labels, &set).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let hole = (y, x) == (1, 1) || (y, x) == (1, 2);
                assert_eq!(m.is_hole(0, y, x), hole);
            }
        }
    }

    #[test]
    fn all_components_hole_is_union_of_regions() {
        // synthetic map cycling through every class id
        let data: Vec<u8> = (0..64).map(|i| (i * 7 % 19) as u8).collect();
        let labels = LabelMap::new(8, 8, data.clone()).unwrap();
        let m = components_to_mask(&labels, &ComponentSet::all()).unwrap();
        let members = [2u8, 4, 5, 10, 11, 12];
        for (i, &c) in data.iter().enumerate() {
            let expected = if members.contains(&c) { 0 } else { 1 };
            assert_eq!(m.data()[i], expected, "pixel {i} class {c}");
        }
    }

    #[test]
    fn unknown_class_is_named() {
        let labels = LabelMap::new(1, 2, vec![1, 23]).unwrap();
        let err = components_to_mask(&labels, &ComponentSet::all()).unwrap_err();
        assert!(matches!(err, Error::UnknownClass(23)));
        assert!(err.to_string().contains("23"));
    }

    #[test]
    fn dilate_radius_zero_is_identity() {
        let m = ComponentMask::new(1, 2, 3, vec![1, 0, 1, 1, 1, 0]).unwrap();
        assert_eq!(dilate_mask(&m, 0), m);
    }

    #[test]
    fn dilate_single_pixel_grows_square_block_clipped() {
        let mut data = vec![1u8; 25];
        data[2 * 5 + 2] = 0;
        let m = ComponentMask::new(1, 5, 5, data).unwrap();
        let d = dilate_mask(&m, 1);
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..=3).contains(&y) && (1..=3).contains(&x);
                assert_eq!(d.is_hole(0, y, x), inside, "({y},{x})");
            }
        }
        // corner hole clips at the border
        let mut data = vec![1u8; 25];
        data[0] = 0;
        let d = dilate_mask(&ComponentMask::new(1, 5, 5, data).unwrap(), 1);
        assert_eq!(d.hole_count(), 4);
        assert!(d.is_hole(0, 1, 1) && !d.is_hole(0, 2, 2));
    }

    #[test]
    fn downsample_cases() {
        let ones = ComponentMask::ones(2, 4, 4);
        let d = downsample_mask(&ones, 2).unwrap();
        assert_eq!((d.batch(), d.height(), d.width()), (2, 2, 2));
        assert!(d.data().iter().all(|&v| v == 1));

        let m = ComponentMask::new(1, 2, 2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(downsample_mask(&m, 1).unwrap(), m);

        // checkerboard with 1 at even (y + x): the top-left anchor always lands on a 1
        let data: Vec<u8> = (0..16).map(|i| ((i / 4 + i % 4 + 1) % 2) as u8).collect();
        let cb = ComponentMask::new(1, 4, 4, data).unwrap();
        assert_eq!(cb.get(0, 0, 0), 1);
        let d = downsample_mask(&cb, 2).unwrap();
        assert!(d.data().iter().all(|&v| v == 1));
        // the complementary checkerboard anchors on zeros
        let d = downsample_mask(&cb.inverted(), 2).unwrap();
        assert!(d.data().iter().all(|&v| v == 0));

        assert!(downsample_mask(&ComponentMask::ones(1, 5, 4), 2).is_err());
    }

    #[test]
    fn label_resize_keeps_class_ids() {
        let data: Vec<u8> = (0..36).map(|i| (i % 19) as u8).collect();
        let labels = LabelMap::new(6, 6, data.clone()).unwrap();
        let r = labels.resize_nearest(4, 4);
        assert!(r.data().iter().all(|c| data.contains(c)));
        let r = labels.resize_nearest(13, 9);
        assert!(r.data().iter().all(|c| data.contains(c)));
    }

    fn mask_strategy() -> impl Strategy<Value = ComponentMask> {
        (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..2, h * w)
                .prop_map(move |d| ComponentMask::new(1, h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn corrupt_is_idempotent(m in mask_strategy(), seed in 0u64..1000) {
            let n = m.height() * m.width();
            let vals: Vec<f32> = (0..n).map(|i| (((i as u64 * 31 + seed) % 17) as f32 / 8.0) - 1.0).collect();
            let x = img(vals, m.height(), m.width());
            let once = corrupt(&x, &m).unwrap();
            let twice = corrupt(&once, &m).unwrap();
            prop_assert_eq!(
                once.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                twice.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }

        #[test]
        fn dilation_is_monotone(m in mask_strategy(), r1 in 0usize..3, extra in 0usize..3) {
            let small = dilate_mask(&m, r1);
            let large = dilate_mask(&m, r1 + extra);
            for i in 0..m.data().len() {
                if m.data()[i] == 0 { prop_assert_eq!(small.data()[i], 0); }
                if small.data()[i] == 0 { prop_assert_eq!(large.data()[i], 0); }
            }
        }

        #[test]
        fn downsample_stays_binary(d in proptest::collection::vec(0u8..2, 36), f in prop::sample::select(vec![1usize, 2, 3, 6])) {
            let m = ComponentMask::new(1, 6, 6, d).unwrap();
            let out = downsample_mask(&m, f).unwrap();
            prop_assert!(out.data().iter().all(|&v| v <= 1));
        }

        #[test]
        fn mask_ignores_unselected_labels(perm_seed in 0u8..19) {
            // relabel every non-eye class by a rotation; the eye mask must not move
            let data: Vec<u8> = (0..49).map(|i| (i * 5 % 19) as u8).collect();
            let eyes: ComponentSet = [Component::Eyes].into_iter().collect();
            let ids = eyes.class_ids();
            let others: Vec<u8> = (0..19).filter(|c| !ids.contains(c)).collect();
            let rotated: Vec<u8> = data.iter().map(|c| {
                if ids.contains(c) { *c } else {
                    let pos = others.iter().position(|o| o == c).unwrap();
                    others[(pos + perm_seed as usize) % others.len()]
                }
            }).collect();
            let a = components_to_mask(&LabelMap::new(7, 7, data).unwrap(), &eyes).unwrap();
            let b = components_to_mask(&LabelMap::new(7, 7, rotated).unwrap(), &eyes).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
