#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rface::featnet::{Backbone, BackboneKind, BackboneSpec, LossLayers};
use rface::nn::scalar;

pub fn tensor(values: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
}

pub fn uniform(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Gradient of `f` at `x` through autograd.
pub fn analytic_grad(f: &dyn Fn(&Tensor) -> Tensor, x: &[f64], shape: &[usize]) -> Vec<f64> {
    let var = Var::from_tensor(&tensor(x.to_vec(), shape)).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    match grads.get(var.as_tensor()) {
        Some(g) => values(g),
        None => vec![0.0; x.len()],
    }
}

/// Central finite differences of `f` at `x`.
pub fn numeric_grad(f: &dyn Fn(&Tensor) -> Tensor, x: &[f64], shape: &[usize], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[i] += h;
            minus[i] -= h;
            let fp = scalar(&f(&tensor(plus, shape))).unwrap();
            let fm = scalar(&f(&tensor(minus, shape))).unwrap();
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Worst relative error between autograd and finite differences.
pub fn grad_check(f: &dyn Fn(&Tensor) -> Tensor, x: &[f64], shape: &[usize]) -> f64 {
    let a = analytic_grad(f, x, shape);
    let n = numeric_grad(f, x, shape, 1e-6);
    assert!(a.iter().any(|g| *g != 0.0), "gradient vanished identically");
    relative_error(&a, &n)
}

/// A single-channel random CNN mapping 1x1x4x4 inputs to 2x3x3 features.
pub fn tiny_backbone() -> Backbone {
    let one = vec!["conv1".to_string()];
    let spec = BackboneSpec {
        kind: BackboneKind::FixedRandomCnn,
        seed: 3,
        in_channels: 1,
        widths: vec![2],
        kernel: 2,
        padding: 0,
        weights: None,
        layers: LossLayers {
            perceptual: one.clone(),
            style: one.clone(),
            contextual: one.clone(),
            pixel: one,
            embedding: "conv1".into(),
        },
    };
    Backbone::new(&spec, DType::F64, &Device::Cpu).unwrap()
}
