//! Image-quality metrics: multi-scale structural similarity and the Fréchet
//! distance between Gaussian fits of embedded image sets.

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::featnet::Backbone;
use crate::imagecore::{ImageTensor, ValueRange};

/// Canonical per-scale exponents, finest scale first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, PartialEq)]
pub struct MsSsimConfig {
    pub weights: Vec<f64>,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self {
            weights: MS_SSIM_WEIGHTS.to_vec(),
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl MsSsimConfig {
    pub fn levels(&self) -> usize {
        self.weights.len()
    }

    /// Smallest side length accepted by this configuration.
    pub fn minimum_size(&self) -> usize {
        (1usize << (self.levels().saturating_sub(1))) * self.window
    }

    /// The deepest canonical configuration that fits an `height x width` image;
    /// the leading canonical weights are kept and rescaled to sum to one.
    pub fn fitting(height: usize, width: usize) -> Result<Self> {
        let base = Self::default();
        let side = height.min(width);
        let levels = (1..=MS_SSIM_WEIGHTS.len())
            .rev()
            .find(|&l| (1usize << (l - 1)) * base.window <= side)
            .ok_or(Error::TooSmall {
                height,
                width,
                levels: 1,
                minimum: base.window,
            })?;
        let head = &MS_SSIM_WEIGHTS[..levels];
        let sum: f64 = head.iter().sum();
        Ok(Self {
            weights: head.iter().map(|w| w / sum).collect(),
            ..base
        })
    }

    fn kernel(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// One image plane in row-major order.
#[derive(Debug, Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    /// Separable "valid" filtering with a 1-D kernel.
    fn filter(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let (ow, oh) = (self.w + 1 - n, self.h + 1 - n);
        let mut rows = vec![0.0; self.h * ow];
        for y in 0..self.h {
            for x in 0..ow {
                rows[y * ow + x] = (0..n).map(|i| k[i] * self.data[y * self.w + x + i]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
            }
        }
        Plane { h: oh, w: ow, data: out }
    }

    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// 2x2 average pooling; an odd trailing row/column is dropped.
    fn halve(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| self.data[yy * self.w + xx];
                data[y * w + x] = 0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
            }
        }
        Plane { h, w, data }
    }
}

/// Mean luminance and contrast-structure terms of one plane pair at one scale.
fn ssim_terms(x: &Plane, y: &Plane, k: &[f64], c1: f64, c2: f64) -> (f64, f64) {
    let mx = x.filter(k);
    let my = y.filter(k);
    let sxx = x.zip(x, |a, b| a * b).filter(k);
    let syy = y.zip(y, |a, b| a * b).filter(k);
    let sxy = x.zip(y, |a, b| a * b).filter(k);
    let n = mx.data.len() as f64;
    let (mut lum, mut cs) = (0.0, 0.0);
    for i in 0..mx.data.len() {
        let (ux, uy) = (mx.data[i], my.data[i]);
        let vx = sxx.data[i] - ux * ux;
        let vy = syy.data[i] - uy * uy;
        let cxy = sxy.data[i] - ux * uy;
        lum += (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
        cs += (2.0 * cxy + c2) / (vx + vy + c2);
    }
    (lum / n, cs / n)
}

fn planes(img: &ImageTensor) -> Result<Vec<Vec<Plane>>> {
    let unit = img.to_range(ValueRange::Unit)?;
    let (b, c, h, w) = unit.dims();
    let flat = unit.tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..b)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let off = (i * c + ch) * h * w;
                    Plane {
                        h,
                        w,
                        data: flat[off..off + h * w].to_vec(),
                    }
                })
                .collect()
        })
        .collect())
}

/// Multi-scale SSIM per batch item, in `[0, 1]`.
///
/// Contrast-structure terms are taken at every scale and luminance at the
/// coarsest; channel terms are averaged before the weighted product. Negative
/// terms are clamped to zero so the fractional exponents stay defined.
pub fn ms_ssim_per_item(x: &ImageTensor, y: &ImageTensor, cfg: &MsSsimConfig) -> Result<Vec<f64>> {
    if x.dims() != y.dims() {
        return Err(Error::shape(format!("ms-ssim inputs differ: {:?} vs {:?}", x.dims(), y.dims())));
    }
    let (_, _, h, w) = x.dims();
    let minimum = cfg.minimum_size();
    if cfg.levels() == 0 || h < minimum || w < minimum {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            levels: cfg.levels(),
            minimum,
        });
    }
    let k = cfg.kernel();
    let c1 = (cfg.k1).powi(2);
    let c2 = (cfg.k2).powi(2);
    let (px, py) = (planes(x)?, planes(y)?);
    let mut out = Vec::with_capacity(px.len());
    for (mut xs, mut ys) in px.into_iter().zip(py) {
        let mut value = 1.0;
        for (level, weight) in cfg.weights.iter().enumerate() {
            let n = xs.len() as f64;
            let (mut lum, mut cs) = (0.0, 0.0);
            for (a, b) in xs.iter().zip(&ys) {
                let (l, c) = ssim_terms(a, b, &k, c1, c2);
                lum += l / n;
                cs += c / n;
            }
            let term = if level + 1 == cfg.levels() { lum * cs } else { cs };
            value *= term.max(0.0).powf(*weight);
            if level + 1 < cfg.levels() {
                xs = xs.iter().map(Plane::halve).collect();
                ys = ys.iter().map(Plane::halve).collect();
            }
        }
        out.push(value);
    }
    Ok(out)
}

/// Batch mean of [`ms_ssim_per_item`].
pub fn ms_ssim(x: &ImageTensor, y: &ImageTensor, cfg: &MsSsimConfig) -> Result<f64> {
    let v = ms_ssim_per_item(x, y, cfg)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Maps a batch of images to `B x D` feature vectors.
pub trait Embedder {
    fn embed(&self, images: &ImageTensor) -> Result<Tensor>;
}

/// Raw pixels as the embedding.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelEmbedder;

impl Embedder for PixelEmbedder {
    fn embed(&self, images: &ImageTensor) -> Result<Tensor> {
        let (b, _, _, _) = images.dims();
        Ok(images.tensor().reshape((b, ()))?)
    }
}

impl Embedder for Backbone {
    fn embed(&self, images: &ImageTensor) -> Result<Tensor> {
        let net = images.to_range(ValueRange::Network)?;
        Backbone::embed(self, net.tensor())
    }
}

/// Gaussian fit of a set of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl DistributionStats {
    /// Mean and unbiased covariance of the rows of `samples`.
    pub fn from_rows(samples: &DMatrix<f64>) -> Result<Self> {
        let n = samples.nrows();
        if n < 2 {
            return Err(Error::TooFewSamples(n));
        }
        let mean = samples.row_mean().transpose();
        let mut centered = samples.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Embeds every batch and fits the resulting sample set.
pub fn embed_stats<E: Embedder + ?Sized>(batches: &[ImageTensor], embedder: &E) -> Result<DistributionStats> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for batch in batches {
        let e = embedder.embed(batch)?.to_dtype(DType::F64)?;
        rows.extend(e.to_vec2::<f64>()?);
    }
    let n = rows.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let d = rows[0].len();
    let m = DMatrix::from_row_iterator(n, d, rows.into_iter().flatten());
    DistributionStats::from_rows(&m)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})`.
///
/// The trace of `(Σ_a Σ_b)^{1/2}` is evaluated through the symmetric product
/// `Σ_a^{1/2} Σ_b Σ_a^{1/2}`, whose eigenvalues equal those of `Σ_a Σ_b`;
/// round-off negatives are clamped to zero.
pub fn frechet_distance(a: &DistributionStats, b: &DistributionStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != b.cov.shape() {
        return Err(Error::shape(format!("embedding dims differ: {} vs {}", a.dim(), b.dim())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov);
    let mut inner = &ra * &b.cov * &ra;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    fn image(values: Vec<f64>, dims: (usize, usize, usize, usize)) -> ImageTensor {
        let t = Tensor::from_vec(values, dims, &Device::Cpu).unwrap();
        ImageTensor::new(t, ValueRange::Unit).unwrap()
    }

    fn pattern(h: usize, w: usize) -> Vec<f64> {
        (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                0.5 + 0.4 * ((x as f64 * 0.7).sin() * (y as f64 * 0.3).cos())
            })
            .collect()
    }

    #[test]
    fn self_similarity_is_one() {
        let x = image(pattern(176, 176), (1, 1, 176, 176));
        let v = ms_ssim(&x, &x, &MsSsimConfig::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
        let c = image(vec![0.3; 176 * 176], (1, 1, 176, 176));
        assert!((ms_ssim(&c, &c, &MsSsimConfig::default()).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inversion_scores_lower() {
        let p = pattern(64, 64);
        let inv: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        let cfg = MsSsimConfig::fitting(64, 64).unwrap();
        assert_eq!(cfg.levels(), 3);
        let x = image(p, (1, 1, 64, 64));
        let y = image(inv, (1, 1, 64, 64));
        let s = ms_ssim(&x, &y, &cfg).unwrap();
        assert!(s < ms_ssim(&x, &x, &cfg).unwrap());
        assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn too_small_reports_minimum() {
        let x = image(vec![0.5; 3 * 32 * 32], (1, 3, 32, 32));
        let err = ms_ssim(&x, &x, &MsSsimConfig::default()).unwrap_err();
        assert!(matches!(err, Error::TooSmall { minimum: 176, .. }));
        assert!(err.to_string().contains("176"));
        assert_eq!(MsSsimConfig::fitting(32, 32).unwrap().levels(), 2);
    }

    #[test]
    fn fitting_weights_sum_to_one() {
        for side in [11, 22, 44, 88, 176, 256] {
            let cfg = MsSsimConfig::fitting(side, side).unwrap();
            assert!((cfg.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(cfg.minimum_size() <= side);
        }
    }

    fn stats(mean: Vec<f64>, cov: Vec<f64>) -> DistributionStats {
        let d = mean.len();
        DistributionStats {
            mean: DVector::from_vec(mean),
            cov: DMatrix::from_row_slice(d, d, &cov),
            count: 10,
        }
    }

    #[test]
    fn frechet_closed_forms() {
        let a = stats(vec![0.0], vec![1.0]);
        let b = stats(vec![1.0], vec![1.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-6);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);

        let (ma, va) = (vec![0.1, -0.4, 2.0], vec![0.5, 2.0, 1.3]);
        let (mb, vb) = (vec![0.7, 0.2, 1.0], vec![1.5, 0.1, 1.3]);
        let diag = |v: &[f64]| {
            let mut m = vec![0.0; 9];
            for i in 0..3 {
                m[i * 4] = v[i];
            }
            m
        };
        let a = stats(ma.clone(), diag(&va));
        let b = stats(mb.clone(), diag(&vb));
        let oracle: f64 = (0..3).map(|d| (ma[d] - mb[d]).powi(2) + (va[d].sqrt() - vb[d].sqrt()).powi(2)).sum();
        assert!((frechet_distance(&a, &b).unwrap() - oracle).abs() < 1e-6);
        let c = stats(vec![0.0; 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert!(frechet_distance(&a, &c).is_err());
    }

    #[test]
    fn embed_stats_matches_direct_moments() {
        // two 1x1x1x2 images under the pixel embedder
        let batch = image(vec![0.2, 0.6, 0.4, 0.2], (2, 1, 1, 2));
        let s = embed_stats(&[batch], &PixelEmbedder).unwrap();
        assert_eq!(s.count, 2);
        assert!((s.mean[0] - 0.3).abs() < 1e-12 && (s.mean[1] - 0.4).abs() < 1e-12);
        // unbiased: sum of squared deviations / (n - 1)
        let expect = [0.02, -0.04, -0.04, 0.08];
        for (got, want) in s.cov.transpose().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
        let same = image(vec![0.5, 0.1, 0.5, 0.1], (2, 1, 1, 2));
        let z = embed_stats(&[same], &PixelEmbedder).unwrap();
        assert!(z.cov.iter().all(|v| *v == 0.0));
        let one = image(vec![0.5, 0.1], (1, 1, 1, 2));
        assert!(matches!(embed_stats(&[one], &PixelEmbedder), Err(Error::TooFewSamples(1))));
    }

    #[test]
    fn embed_stats_ignores_order() {
        let a = image(vec![0.1, 0.9, 0.3, 0.5, 0.7, 0.2], (3, 1, 1, 2));
        let b = image(vec![0.7, 0.2, 0.1, 0.9, 0.3, 0.5], (3, 1, 1, 2));
        let sa = embed_stats(&[a], &PixelEmbedder).unwrap();
        let sb = embed_stats(&[b], &PixelEmbedder).unwrap();
        assert!((&sa.mean - &sb.mean).norm() < 1e-12);
        assert!((&sa.cov - &sb.cov).norm() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ms_ssim_is_symmetric(a in prop::collection::vec(0.0f64..1.0, 22 * 22), b in prop::collection::vec(0.0f64..1.0, 22 * 22)) {
            let cfg = MsSsimConfig::fitting(22, 22).unwrap();
            let x = image(a, (1, 1, 22, 22));
            let y = image(b, (1, 1, 22, 22));
            let s1 = ms_ssim(&x, &y, &cfg).unwrap();
            let s2 = ms_ssim(&y, &x, &cfg).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-6);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s1));
        }

        #[test]
        fn frechet_is_symmetric(rows_a in prop::collection::vec(-2.0f64..2.0, 8 * 3), rows_b in prop::collection::vec(-2.0f64..2.0, 8 * 3)) {
            let a = DistributionStats::from_rows(&DMatrix::from_row_slice(8, 3, &rows_a)).unwrap();
            let b = DistributionStats::from_rows(&DMatrix::from_row_slice(8, 3, &rows_b)).unwrap();
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-6 * (1.0 + ab));
            prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
        }
    }
}
