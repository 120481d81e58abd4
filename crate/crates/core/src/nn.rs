//! Small layer toolkit on top of candle tensors: named parameters, convolutions
//! and the normalisation/activation helpers the networks share.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;

/// Which sub-network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Generator,
    Reference,
    Query,
    Fusion,
    Discriminator,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub group: ParamGroup,
}

/// Named trainable tensors, iterated in name order.
#[derive(Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            params: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, group: ParamGroup, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.params.insert(name.to_string(), Param { var, group });
        Ok(tensor)
    }

    /// Zero-mean Gaussian weights with the shared init std.
    pub fn gaussian(&mut self, name: &str, group: ParamGroup, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let values: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.insert(name, group, values, shape)
    }

    pub fn zeros(&mut self, name: &str, group: ParamGroup, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, group, vec![0.0; n], shape)
    }

    pub fn conv2d(&mut self, name: &str, group: ParamGroup, spec: ConvSpec) -> Result<Conv2d> {
        let weight = self.gaussian(
            &format!("{name}.weight"),
            group,
            &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
        )?;
        let bias = if spec.bias {
            Some(self.zeros(&format!("{name}.bias"), group, &[spec.out_channels])?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
        })
    }

    pub fn conv_transpose2d(&mut self, name: &str, group: ParamGroup, spec: ConvSpec) -> Result<ConvTranspose2d> {
        let weight = self.gaussian(
            &format!("{name}.weight"),
            group,
            &[spec.in_channels, spec.out_channels, spec.kernel, spec.kernel],
        )?;
        let bias = if spec.bias {
            Some(self.zeros(&format!("{name}.bias"), group, &[spec.out_channels])?)
        } else {
            None
        };
        Ok(ConvTranspose2d {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn vars(&self, groups: &[ParamGroup]) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(n, p)| (n.clone(), p.var.clone()))
            .collect()
    }

    /// Copies of the current values, keyed by parameter name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .map(|(n, p)| Ok((n.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites every parameter from `values`; names and shapes must match exactly.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (name, p) in &self.params {
            let v = values
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if v.dims() != p.var.dims() {
                return Err(Error::shape(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    p.var.dims(),
                    v.dims()
                )));
            }
            p.var.set(&v.to_dtype(self.dtype)?.to_device(&self.device)?.copy()?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        let padding = weight.dims()[2] / 2;
        Self {
            weight,
            bias,
            stride: 1,
            padding,
            dilation: 1,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, self.dilation, 1)?;
        add_channel_bias(y, self.bias.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?;
        add_channel_bias(y, self.bias.as_ref())
    }
}

fn add_channel_bias(y: Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    match bias {
        Some(b) => {
            let c = b.dims()[0];
            Ok(y.broadcast_add(&b.reshape((1, c, 1, 1))?)?)
        }
        None => Ok(y),
    }
}

/// Per-sample, per-channel normalisation over the spatial dims (no affine).
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(3)?.mean_keepdim(2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let last = x.rank() - 1;
    // the max shift cancels exactly, so it carries no gradient
    let max = x.max_keepdim(last)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(last)?)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}
