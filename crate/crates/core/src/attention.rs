//! Example-guided attention.
//!
//! A self-attention map computed from the source bottleneck features is reused
//! twice: once to aggregate the source features themselves, and once to warp the
//! reference features. The warped reference features are blended with the raw
//! reference features through the feature-resolution keep-mask, and the two
//! streams are fused before decoding.
//!
//! Shapes: feature maps are `B x C x H x W`, the attention map is `B x N x N`
//! with `N = H * W`, and row `j` of the map holds the weights that output
//! location `j` assigns to every source location `i`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_last_dim, Conv2d};

/// How the attention stream and the example-guided stream are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    /// Channel concatenation followed by a learned 1x1 projection back to C channels.
    #[default]
    Concat,
    /// Elementwise sum, no parameters.
    Add,
}

/// Which side of the keep-mask receives the warped reference features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FlowPolarity {
    /// Warped features where the mask keeps, raw reference features in the hole.
    #[default]
    Literal,
    /// Warped features in the hole, raw reference features elsewhere.
    Swapped,
}

/// Query channel count for a bottleneck of `channels`: `C / 8`, at least 1.
pub fn query_channels(channels: usize) -> usize {
    (channels / 8).max(1)
}

fn flatten_spatial(f: &Tensor) -> Result<(Tensor, (usize, usize, usize, usize))> {
    let (b, c, h, w) = f.dims4()?;
    Ok((f.reshape((b, c, h * w))?, (b, c, h, w)))
}

/// `Softmax(F_qᵀ F_q)` with `F_q` a 1x1 convolution of the source features.
pub fn attention_map(source: &Tensor, query: &Conv2d) -> Result<Tensor> {
    let q = query.forward(source)?;
    let (q, _) = flatten_spatial(&q)?;
    // scores[j, i] = <q_j, q_i>
    let scores = q.transpose(1, 2)?.contiguous()?.matmul(&q)?;
    softmax_last_dim(&scores)
}

/// `out[:, j] = Σ_i features[:, i] · map[j, i]`.
fn aggregate(features: &Tensor, map: &Tensor) -> Result<Tensor> {
    let (flat, (b, c, h, w)) = flatten_spatial(features)?;
    let (mb, n, n2) = map.dims3()?;
    if mb != b || n != n2 || n != h * w {
        return Err(Error::shape(format!(
            "attention map {:?} does not match features {:?}",
            map.dims(),
            features.dims()
        )));
    }
    let out = flat.matmul(&map.transpose(1, 2)?.contiguous()?)?;
    Ok(out.reshape((b, c, h, w))?)
}

/// `F_a = F_s ⊗ F_m`.
pub fn self_attend(source: &Tensor, map: &Tensor) -> Result<Tensor> {
    aggregate(source, map)
}

/// `F_e = M ⊙ F_e' + (1 − M) ⊙ F_r` with `F_e' = F_r ⊗ F_m`.
///
/// The blend is a mask *selection*, so each location is bitwise equal to one of the two inputs.
pub fn example_flow(
    reference: &Tensor,
    map: &Tensor,
    mask_feat: &Tensor,
    polarity: FlowPolarity,
) -> Result<Tensor> {
    let warped = aggregate(reference, map)?;
    let (b, _, h, w) = reference.dims4()?;
    let (mb, mc, mh, mw) = mask_feat.dims4()?;
    if (mb, mc, mh, mw) != (b, 1, h, w) {
        return Err(Error::shape(format!(
            "feature mask {:?} does not match reference features {:?}",
            mask_feat.dims(),
            reference.dims()
        )));
    }
    let keep = mask_feat.to_dtype(DType::U8)?.broadcast_as(reference.shape())?;
    let out = match polarity {
        FlowPolarity::Literal => keep.where_cond(&warped, reference)?,
        FlowPolarity::Swapped => keep.where_cond(reference, &warped)?,
    };
    Ok(out)
}

/// Channel concatenation `[F_a ; F_e]` (2C channels).
pub fn concat_streams(attended: &Tensor, example: &Tensor) -> Result<Tensor> {
    if attended.dims() != example.dims() {
        return Err(Error::shape(format!(
            "cannot fuse {:?} with {:?}",
            attended.dims(),
            example.dims()
        )));
    }
    Ok(Tensor::cat(&[attended, example], 1)?)
}

/// `F_f = F_a ⊕ F_e`.
pub fn fuse(attended: &Tensor, example: &Tensor, projection: Option<&Conv2d>) -> Result<Tensor> {
    match projection {
        Some(p) => p.forward(&concat_streams(attended, example)?),
        None => {
            if attended.dims() != example.dims() {
                return Err(Error::shape(format!(
                    "cannot fuse {:?} with {:?}",
                    attended.dims(),
                    example.dims()
                )));
            }
            Ok((attended + example)?)
        }
    }
}

/// Weights of the whole attention block.
#[derive(Debug, Clone)]
pub struct ExampleGuidedAttention {
    pub query: Conv2d,
    /// Present for [`FusionKind::Concat`].
    pub projection: Option<Conv2d>,
    pub polarity: FlowPolarity,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub fused: Tensor,
    pub map: Tensor,
}

impl ExampleGuidedAttention {
    pub fn forward(&self, source: &Tensor, reference: &Tensor, mask_feat: &Tensor) -> Result<AttentionOutput> {
        if source.dims() != reference.dims() {
            return Err(Error::shape(format!(
                "source features {:?} and reference features {:?} differ",
                source.dims(),
                reference.dims()
            )));
        }
        let map = attention_map(source, &self.query)?;
        let attended = self_attend(source, &map)?;
        let example = example_flow(reference, &map, mask_feat, self.polarity)?;
        let fused = fuse(&attended, &example, self.projection.as_ref())?;
        Ok(AttentionOutput { fused, map })
    }
}
