//! The six training losses and their weighted sum.
//!
//! All functions take `B x C x H x W` tensors and return scalar tensors that stay
//! on the autograd tape. Batch reduction is always a mean over items.

use std::fmt;

use candle_core::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featnet::Backbone;
use crate::imagecore::ComponentMask;

/// Weights of the full objective, in the order
/// perceptual, style, contextual, pixel, tv, adversarial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub perceptual: f64,
    pub style: f64,
    pub contextual: f64,
    pub pixel: f64,
    pub tv: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 0.1,
            style: 250.0,
            contextual: 1.0,
            pixel: 0.5,
            tv: 0.1,
            adversarial: 0.01,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            perceptual: 0.0,
            style: 0.0,
            contextual: 0.0,
            pixel: 0.0,
            tv: 0.0,
            adversarial: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.perceptual,
            self.style,
            self.contextual,
            self.pixel,
            self.tv,
            self.adversarial,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// One value per loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub perceptual: f64,
    pub style: f64,
    pub contextual: f64,
    pub pixel: f64,
    pub tv: f64,
    pub adversarial: f64,
}

impl LossTerms {
    pub fn splat(v: f64) -> Self {
        Self {
            perceptual: v,
            style: v,
            contextual: v,
            pixel: v,
            tv: v,
            adversarial: v,
        }
    }

    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("perceptual", self.perceptual),
            ("style", self.style),
            ("contextual", self.contextual),
            ("pixel", self.pixel),
            ("tv", self.tv),
            ("adversarial", self.adversarial),
        ]
    }

    /// Sum in the fixed term order.
    pub fn sum(&self) -> f64 {
        self.named().iter().map(|(_, v)| v).sum()
    }
}

/// Raw and weighted terms of one generator update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub raw: LossTerms,
    pub weighted: LossTerms,
    pub total: f64,
}

impl LossReport {
    /// One JSON object per line, for the training log.
    pub fn to_log_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {} total {:.6}", self.step, self.total)?;
        for (name, v) in self.raw.named() {
            write!(f, " {name}={v:.6}")?;
        }
        Ok(())
    }
}

/// `L = Σ λ_k L_k`. Fails on the first non-finite raw term.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights, step: u64) -> Result<LossReport> {
    for (term, value) in terms.named() {
        if !value.is_finite() {
            return Err(Error::NonFinite { term, value });
        }
    }
    let weighted = LossTerms {
        perceptual: weights.perceptual * terms.perceptual,
        style: weights.style * terms.style,
        contextual: weights.contextual * terms.contextual,
        pixel: weights.pixel * terms.pixel,
        tv: weights.tv * terms.tv,
        adversarial: weights.adversarial * terms.adversarial,
    };
    Ok(LossReport {
        step,
        raw: *terms,
        weighted,
        total: weighted.sum(),
    })
}

fn same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `G = φ φᵀ` with `φ` flattened to `C x HW`; one `C x C` matrix per batch item.
pub fn gram(features: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = features.dims4()?;
    let flat = features.reshape((b, c, h * w))?;
    Ok(flat.matmul(&flat.transpose(1, 2)?.contiguous()?)?)
}

fn sum_layers(parts: Vec<Tensor>, like: &Tensor) -> Result<Tensor> {
    let mut it = parts.into_iter();
    match it.next() {
        Some(first) => it.try_fold(first, |acc, t| Ok((acc + t)?)),
        None => Ok(Tensor::zeros((), like.dtype(), like.device())?),
    }
}

/// `Σ_l 1/(C_l H_l W_l) ‖φ_l(I_g) − φ_l(I_s)‖₁`.
pub fn perceptual_loss(generated: &Tensor, source: &Tensor, backbone: &Backbone) -> Result<Tensor> {
    same_dims(generated, source, "perceptual loss inputs")?;
    let layers = &backbone.layers().perceptual;
    let fg = backbone.extract(generated, layers)?;
    let fs = backbone.extract(&source.detach(), layers)?;
    let parts = fg
        .iter()
        .zip(fs.iter())
        .map(|((_, a), (_, b))| mean_abs_diff(a, b))
        .collect::<Result<Vec<_>>>()?;
    sum_layers(parts, generated)
}

/// `Σ_l 1/C_l² ‖(G_l(I_g ⊙ M) − G_l(I_c)) / (C_l H_l W_l)‖₁`, `mask` broadcasting over channels.
pub fn style_loss(generated: &Tensor, corrupted: &Tensor, mask: &Tensor, backbone: &Backbone) -> Result<Tensor> {
    same_dims(generated, corrupted, "style loss inputs")?;
    let layers = &backbone.layers().style;
    let masked = generated.broadcast_mul(mask)?;
    let fg = backbone.extract(&masked, layers)?;
    let fc = backbone.extract(&corrupted.detach(), layers)?;
    let parts = fg
        .iter()
        .zip(fc.iter())
        .map(|((_, a), (_, b))| {
            let (_, c, h, w) = a.dims4()?;
            let d = mean_abs_diff(&gram(a)?, &gram(b)?)?;
            Ok(d.affine(1.0 / (c * h * w) as f64, 0.0)?)
        })
        .collect::<Result<Vec<_>>>()?;
    sum_layers(parts, generated)
}

/// Constants of the contextual-similarity pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextualParams {
    pub bandwidth: f64,
    pub eps: f64,
}

impl Default for ContextualParams {
    fn default() -> Self {
        Self {
            bandwidth: 0.5,
            eps: 1e-5,
        }
    }
}

/// The `N_x x N_y` matrix `CX_ij` for feature sets given as `N x C` rows.
///
/// Both sets are centred on the mean of `Y` and L2-normalised (the norm is
/// `sqrt(|v|² + ε²)`, so an all-zero row stays finite). With cosine distances
/// `d_ij`, `d̃_ij = d_ij / (min_k d_ik + ε)`, `w_ij = exp((1 − d̃_ij) / h)` and
/// `CX_ij = w_ij / Σ_k w_ik`.
pub fn contextual_affinity(x: &Tensor, y: &Tensor, params: &ContextualParams) -> Result<Tensor> {
    let (nx, cx) = x.dims2()?;
    let (ny, cy) = y.dims2()?;
    if nx == 0 || ny == 0 {
        return Err(Error::EmptyHole("contextual similarity needs at least one feature".into()));
    }
    if cx != cy {
        return Err(Error::shape(format!("feature widths differ: {cx} vs {cy}")));
    }
    let eps = params.eps;
    let mu = y.mean_keepdim(0)?;
    let unit = |v: &Tensor| -> Result<Tensor> {
        let c = v.broadcast_sub(&mu)?;
        let n = (c.sqr()?.sum_keepdim(1)? + eps * eps)?.sqrt()?;
        Ok(c.broadcast_div(&n)?)
    };
    let xn = unit(x)?;
    let yn = unit(y)?;
    let cos = xn.matmul(&yn.t()?.contiguous()?)?;
    let dist = cos.affine(-1.0, 1.0)?;
    let min = (dist.min_keepdim(1)? + eps)?;
    let rel = dist.broadcast_div(&min)?;
    let w = rel.affine(-1.0 / params.bandwidth, 1.0 / params.bandwidth)?.exp()?;
    Ok(w.broadcast_div(&w.sum_keepdim(1)?)?)
}

/// `CX(X, Y) = 1/N_y Σ_j max_i CX_ij`; see [`contextual_affinity`].
pub fn contextual_similarity(x: &Tensor, y: &Tensor, params: &ContextualParams) -> Result<Tensor> {
    Ok(contextual_affinity(x, y, params)?.max(0)?.mean_all()?)
}

/// Feature locations (row-major indices at `h x w`) covering at least one hole pixel.
fn hole_locations(mask: &ComponentMask, item: usize, h: usize, w: usize) -> Result<Vec<u32>> {
    let (mh, mw) = (mask.height(), mask.width());
    if mh % h != 0 || mw % w != 0 {
        return Err(Error::shape(format!("feature map {h}x{w} does not tile mask {mh}x{mw}")));
    }
    let (fy, fx) = (mh / h, mw / w);
    let mut idx = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let hole = (y * fy..(y + 1) * fy).any(|yy| (x * fx..(x + 1) * fx).any(|xx| mask.is_hole(item, yy, xx)));
            if hole {
                idx.push((y * w + x) as u32);
            }
        }
    }
    Ok(idx)
}

fn gather_rows(features: &Tensor, item: usize, locations: &[u32]) -> Result<Tensor> {
    let f = features.get(item)?;
    let (c, h, w) = f.dims3()?;
    let flat = f.reshape((c, h * w))?.t()?;
    let idx = Tensor::from_slice(locations, locations.len(), f.device())?;
    Ok(flat.contiguous()?.index_select(&idx, 0)?)
}

/// `−log CX(φ(I_g ⊙ H_s), φ(I_r ⊙ H_r))` summed over layers and averaged over the batch.
///
/// `H` is the component indicator (the complement of the keep-mask), so both
/// images are reduced to their component content, and the feature sets are the
/// feature locations that overlap the hole. When the two sets differ in size
/// the larger one is subsampled uniformly without replacement.
pub fn contextual_loss<R: Rng>(
    generated: &Tensor,
    source_mask: &ComponentMask,
    reference: &Tensor,
    reference_mask: &ComponentMask,
    backbone: &Backbone,
    params: &ContextualParams,
    rng: &mut R,
) -> Result<Tensor> {
    same_dims(generated, reference, "contextual loss inputs")?;
    let (b, _, _, _) = generated.dims4()?;
    if source_mask.batch() != b || reference_mask.batch() != b {
        return Err(Error::shape("contextual loss masks must match the batch"));
    }
    let dtype = generated.dtype();
    let dev = generated.device();
    let hole_s = source_mask.inverted().to_tensor(dtype, dev)?;
    let hole_r = reference_mask.inverted().to_tensor(dtype, dev)?;
    let layers = &backbone.layers().contextual;
    let fg = backbone.extract(&generated.broadcast_mul(&hole_s)?, layers)?;
    let fr = backbone.extract(&reference.detach().broadcast_mul(&hole_r)?, layers)?;

    let mut per_layer = Vec::new();
    for ((name, g), (_, r)) in fg.iter().zip(fr.iter()) {
        let (_, _, h, w) = g.dims4()?;
        let mut items = Vec::with_capacity(b);
        for i in 0..b {
            let mut ls = hole_locations(source_mask, i, h, w)?;
            let mut lr = hole_locations(reference_mask, i, h, w)?;
            if ls.is_empty() || lr.is_empty() {
                return Err(Error::EmptyHole(format!("item {i} has no hole at layer {name}")));
            }
            let n = ls.len().min(lr.len());
            subsample(&mut ls, n, rng);
            subsample(&mut lr, n, rng);
            let x = gather_rows(g, i, &ls)?;
            let y = gather_rows(r, i, &lr)?;
            let cx = contextual_similarity(&x, &y, params)?;
            items.push(cx.log()?.neg()?);
        }
        per_layer.push(Tensor::stack(&items, 0)?.mean_all()?);
    }
    sum_layers(per_layer, generated)
}

fn subsample<R: Rng>(locations: &mut Vec<u32>, n: usize, rng: &mut R) {
    if locations.len() > n {
        let mut picked: Vec<usize> = sample(rng, locations.len(), n).into_vec();
        picked.sort_unstable();
        *locations = picked.into_iter().map(|i| locations[i]).collect();
    }
}

/// Where the pixel loss is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PixelSpace {
    /// Literal per-pixel L1.
    #[default]
    Identity,
    /// L1 between backbone features of the masked images.
    Feature,
}

/// `‖φ(I_g ⊙ M) − φ(I_s ⊙ M)‖₁` normalised by element count.
pub fn pixel_loss(
    generated: &Tensor,
    source: &Tensor,
    mask: &Tensor,
    backbone: &Backbone,
    space: PixelSpace,
) -> Result<Tensor> {
    same_dims(generated, source, "pixel loss inputs")?;
    let g = generated.broadcast_mul(mask)?;
    let s = source.detach().broadcast_mul(mask)?;
    match space {
        PixelSpace::Identity => mean_abs_diff(&g, &s),
        PixelSpace::Feature => {
            let layers = &backbone.layers().pixel;
            let fg = backbone.extract(&g, layers)?;
            let fs = backbone.extract(&s, layers)?;
            let parts = fg
                .iter()
                .zip(fs.iter())
                .map(|((_, a), (_, b))| mean_abs_diff(a, b))
                .collect::<Result<Vec<_>>>()?;
            sum_layers(parts, generated)
        }
    }
}

/// Anisotropic L1 total variation: mean |horizontal diff| + mean |vertical diff|.
pub fn tv_loss(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut total = Tensor::zeros((), x.dtype(), x.device())?;
    if w > 1 {
        let dx = (x.narrow(3, 1, w - 1)? - x.narrow(3, 0, w - 1)?)?;
        total = (total + dx.abs()?.mean_all()?)?;
    }
    if h > 1 {
        let dy = (x.narrow(2, 1, h - 1)? - x.narrow(2, 0, h - 1)?)?;
        total = (total + dy.abs()?.mean_all()?)?;
    }
    Ok(total)
}

/// Least-squares adversarial terms: `(mean((D(I_g) − 1)²), mean(D(I_g)²) + mean((D(I_s) − 1)²))`.
pub fn adversarial_losses(real_scores: &Tensor, fake_scores: &Tensor) -> Result<(Tensor, Tensor)> {
    let gen = fake_scores.affine(1.0, -1.0)?.sqr()?.mean_all()?;
    let disc = (fake_scores.sqr()?.mean_all()? + real_scores.affine(1.0, -1.0)?.sqr()?.mean_all()?)?;
    Ok((gen, disc))
}

/// Generator-side adversarial term only.
pub fn adversarial_generator_loss(fake_scores: &Tensor) -> Result<Tensor> {
    Ok(fake_scores.affine(1.0, -1.0)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featnet::BackboneSpec;
    use crate::nn::scalar;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn identity() -> Backbone {
        Backbone::new(&BackboneSpec::identity(), DType::F64, &Device::Cpu).unwrap()
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.9..0.9)).collect()
    }

    #[test]
    fn gram_cases() {
        let z = gram(&t(vec![0.0; 8], &[1, 2, 2, 2])).unwrap();
        assert!(z.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| *v == 0.0));
        let eye = gram(&t(vec![1.0, 0.0, 0.0, 1.0], &[1, 2, 1, 2])).unwrap();
        assert_eq!(eye.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 0.0, 0.0, 1.0]);

        let v = noise(12, 1);
        let g = gram(&t(v.clone(), &[1, 3, 2, 2])).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let direct: f64 = (0..4).map(|k| v[a * 4 + k] * v[b * 4 + k]).sum();
                assert!((g[a * 3 + b] - direct).abs() < 1e-12);
                assert_eq!(g[a * 3 + b], g[b * 3 + a]);
            }
        }
    }

    #[test]
    fn perceptual_identity_backbone_is_mean_abs_diff() {
        let bb = identity();
        let a = noise(2 * 3 * 4 * 4, 2);
        let x = t(a.clone(), &[2, 3, 4, 4]);
        assert_eq!(scalar(&perceptual_loss(&x, &x, &bb).unwrap()).unwrap(), 0.0);
        let shifted = x.affine(1.0, 0.05).unwrap();
        let v = scalar(&perceptual_loss(&shifted, &x, &bb).unwrap()).unwrap();
        assert!((v - 0.05).abs() < 1e-12);
        let b = noise(a.len(), 3);
        let y = t(b.clone(), &[2, 3, 4, 4]);
        let oracle: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
        assert!((scalar(&perceptual_loss(&x, &y, &bb).unwrap()).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn perceptual_unit_offset_is_one() {
        let bb = identity();
        let x = t(vec![-0.5; 16], &[1, 1, 4, 4]);
        let y = t(vec![0.5; 16], &[1, 1, 4, 4]);
        assert!((scalar(&perceptual_loss(&y, &x, &bb).unwrap()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn style_vanishes_when_generated_is_source() {
        let bb = identity();
        let s = t(noise(16, 4), &[1, 1, 4, 4]);
        let mut md = vec![1.0; 16];
        md[5] = 0.0;
        md[6] = 0.0;
        let m = t(md, &[1, 1, 4, 4]);
        let c = s.broadcast_mul(&m).unwrap();
        assert_eq!(scalar(&style_loss(&s, &c, &m, &bb).unwrap()).unwrap(), 0.0);
        let z = t(vec![0.0; 16], &[1, 1, 4, 4]);
        assert_eq!(scalar(&style_loss(&z, &z, &m, &bb).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn style_matches_gram_oracle() {
        let bb = identity();
        let (c, hw) = (2usize, 16usize);
        let g = noise(c * hw, 5);
        let s = noise(c * hw, 6);
        let m: Vec<f64> = (0..hw).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect();
        let gm: Vec<f64> = (0..c * hw).map(|i| g[i] * m[i % hw]).collect();
        let cm: Vec<f64> = (0..c * hw).map(|i| s[i] * m[i % hw]).collect();
        let gram_of = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; c * c];
            for a in 0..c {
                for b in 0..c {
                    out[a * c + b] = (0..hw).map(|k| v[a * hw + k] * v[b * hw + k]).sum();
                }
            }
            out
        };
        let (ga, gb) = (gram_of(&gm), gram_of(&cm));
        let l1: f64 = ga.iter().zip(&gb).map(|(p, q)| (p - q).abs()).sum();
        let oracle = l1 / (c * c) as f64 / (c * hw) as f64;

        let gt = t(g, &[1, c, 4, 4]);
        let ct = t(cm, &[1, c, 4, 4]);
        let mt = t(m, &[1, 1, 4, 4]);
        let v = scalar(&style_loss(&gt, &ct, &mt, &bb).unwrap()).unwrap();
        assert!((v - oracle).abs() < 1e-12, "{v} vs {oracle}");
    }

    #[test]
    fn contextual_singleton_is_one() {
        let p = ContextualParams::default();
        let cx = contextual_similarity(&t(vec![0.3, -0.2], &[1, 2]), &t(vec![1.0, 4.0], &[1, 2]), &p).unwrap();
        assert!((scalar(&cx).unwrap() - 1.0).abs() < 1e-12);
        let empty = Tensor::zeros((0, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            contextual_similarity(&empty, &empty, &p),
            Err(Error::EmptyHole(_))
        ));
    }

    #[test]
    fn contextual_zero_feature_stays_finite() {
        // a feature equal to the Y mean has zero norm after centring
        let p = ContextualParams::default();
        let x = t(vec![0.5, 0.5, 1.0, 0.0], &[2, 2]);
        let y = t(vec![0.0, 1.0, 1.0, 0.0], &[2, 2]);
        let v = scalar(&contextual_similarity(&x, &y, &p).unwrap()).unwrap();
        assert!(v.is_finite() && v > 0.0 && v <= 1.0);
    }

    #[test]
    fn tv_cases() {
        let c = t(vec![0.3; 16], &[1, 1, 4, 4]);
        assert_eq!(scalar(&tv_loss(&c).unwrap()).unwrap(), 0.0);
        let x = t(vec![0.0, 1.0, 0.0, 1.0], &[1, 1, 2, 2]);
        assert_eq!(scalar(&tv_loss(&x).unwrap()).unwrap(), 1.0);
        let r = t(noise(32, 8), &[2, 1, 4, 4]);
        let base = scalar(&tv_loss(&r).unwrap()).unwrap();
        let scaled = scalar(&tv_loss(&r.affine(-2.5, 0.0).unwrap()).unwrap()).unwrap();
        assert!((scaled - 2.5 * base).abs() < 1e-12);
    }

    #[test]
    fn lsgan_cases() {
        let ones = t(vec![1.0; 4], &[1, 1, 2, 2]);
        let zeros = t(vec![0.0; 4], &[1, 1, 2, 2]);
        let half = t(vec![0.5; 4], &[1, 1, 2, 2]);
        let (g, _) = adversarial_losses(&zeros, &ones).unwrap();
        assert_eq!(scalar(&g).unwrap(), 0.0);
        let (_, d) = adversarial_losses(&ones, &zeros).unwrap();
        assert_eq!(scalar(&d).unwrap(), 0.0);
        let (g, d) = adversarial_losses(&half, &half).unwrap();
        assert_eq!(scalar(&g).unwrap(), 0.25);
        assert_eq!(scalar(&d).unwrap(), 0.5);
    }

    #[test]
    fn pixel_cases() {
        let bb = identity();
        let a = noise(32, 9);
        let b = noise(32, 10);
        let x = t(a.clone(), &[1, 2, 4, 4]);
        let y = t(b.clone(), &[1, 2, 4, 4]);
        let md: Vec<f64> = (0..16).map(|i| if i < 6 { 0.0 } else { 1.0 }).collect();
        let m = t(md.clone(), &[1, 1, 4, 4]);
        assert_eq!(scalar(&pixel_loss(&x, &x, &m, &bb, PixelSpace::Identity).unwrap()).unwrap(), 0.0);
        let zero_mask = t(vec![0.0; 16], &[1, 1, 4, 4]);
        assert_eq!(scalar(&pixel_loss(&x, &y, &zero_mask, &bb, PixelSpace::Identity).unwrap()).unwrap(), 0.0);
        let oracle: f64 = (0..32).map(|i| md[i % 16] * (a[i] - b[i]).abs()).sum::<f64>() / 32.0;
        let v = scalar(&pixel_loss(&x, &y, &m, &bb, PixelSpace::Identity).unwrap()).unwrap();
        assert!((v - oracle).abs() < 1e-12);
        // feature space over the identity backbone is the same quantity
        let f = scalar(&pixel_loss(&x, &y, &m, &bb, PixelSpace::Feature).unwrap()).unwrap();
        assert!((f - oracle).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        let r = total_loss(&LossTerms::default(), &w, 0).unwrap();
        assert_eq!(r.total, 0.0);
        let r = total_loss(&LossTerms::splat(1.0), &w, 3).unwrap();
        assert!((r.total - 251.71).abs() < 1e-9);
        assert_eq!(r.total, r.weighted.sum());
        let no_cx = LossWeights { contextual: 0.0, ..w };
        let a = total_loss(&LossTerms { contextual: 1.0, ..LossTerms::splat(0.3) }, &no_cx, 0).unwrap();
        let b = total_loss(&LossTerms { contextual: 9.0, ..LossTerms::splat(0.3) }, &no_cx, 0).unwrap();
        assert_eq!(a.total, b.total);
        let err = total_loss(&LossTerms { style: f64::NAN, ..LossTerms::default() }, &w, 0).unwrap_err();
        assert!(err.to_string().contains("style"));
    }

    #[test]
    fn report_serializes_to_one_line() {
        let r = total_loss(&LossTerms::splat(0.5), &LossWeights::default(), 7).unwrap();
        let line = r.to_log_line();
        assert!(!line.contains('\n'));
        let back: LossReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn contextual_loss_rejects_empty_hole() {
        let bb = identity();
        let x = t(noise(48, 11), &[1, 3, 4, 4]);
        let ones = ComponentMask::ones(1, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = contextual_loss(&x, &ones, &x, &ones, &bb, &ContextualParams::default(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::EmptyHole(_)));
    }
}
