//! The adversarial training loop: one discriminator update followed by one
//! generator update per step, both with Adam.

use std::io::Write;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{sample_component_subset, Sample};
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::featnet::Backbone;
use crate::imagecore::{components_to_mask, dilate_mask, ComponentMask, ComponentSet, ImageTensor, LabelMap, ValueRange};
use crate::losses::{
    adversarial_generator_loss, adversarial_losses, contextual_loss, perceptual_loss, pixel_loss, style_loss,
    total_loss, tv_loss, LossReport, LossTerms,
};
use crate::networks::RFaceModel;
use crate::nn::{scalar, ParamGroup};

/// Parameter groups updated by the generator step.
pub const GENERATOR_GROUPS: [ParamGroup; 4] =
    [ParamGroup::Generator, ParamGroup::Reference, ParamGroup::Query, ParamGroup::Fusion];

/// RNG stream used for batch sampling, kept apart from weight initialisation.
const SAMPLING_STREAM: u64 = 1;

/// A dataset converted to tensors once, in network range.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    images: Tensor,
    labels: Vec<LabelMap>,
}

impl TrainingSet {
    pub fn new(samples: &[Sample], dtype: DType, device: &Device) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::TooFewSamples(samples.len()));
        }
        let rgb: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
        let images = ImageTensor::from_rgb(&rgb, ValueRange::Network, dtype, device)?.into_tensor();
        Ok(Self {
            images,
            labels: samples.iter().map(|s| s.labels.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self, indices: &[usize]) -> Result<Tensor> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, indices.len(), self.images.device())?;
        Ok(self.images.index_select(&idx, 0)?)
    }

    pub fn labels(&self, index: usize) -> &LabelMap {
        &self.labels[index]
    }
}

/// One training batch: sources, references and their component keep-masks.
#[derive(Debug, Clone)]
pub struct Batch {
    pub source: Tensor,
    pub reference: Tensor,
    pub source_mask: ComponentMask,
    pub reference_mask: ComponentMask,
    pub components: Vec<ComponentSet>,
    pub source_ids: Vec<usize>,
    pub reference_ids: Vec<usize>,
}

/// Dilated keep-masks for one component set on source and reference labels.
pub fn pair_masks(
    source: &LabelMap,
    reference: &LabelMap,
    components: &ComponentSet,
    radius: usize,
) -> Result<(ComponentMask, ComponentMask)> {
    Ok((
        dilate_mask(&components_to_mask(source, components)?, radius),
        dilate_mask(&components_to_mask(reference, components)?, radius),
    ))
}

/// Result of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    #[serde(flatten)]
    pub report: LossReport,
    pub discriminator: f64,
}

impl StepOutcome {
    pub fn to_log_line(&self) -> String {
        serde_json::to_string(self).expect("outcome serializes")
    }
}

/// Model, frozen backbone, optimisers and sampling state of a run.
#[derive(Debug)]
pub struct Trainer {
    pub(crate) cfg: ExperimentConfig,
    pub(crate) model: RFaceModel,
    pub(crate) backbone: Backbone,
    pub(crate) opt_g: Adam,
    pub(crate) opt_d: Adam,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) step: u64,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let model = RFaceModel::new(&cfg.generator, cfg.train.seed, dtype, device)?;
        let backbone = Backbone::new(&cfg.train.backbone, dtype, device)?;
        let opt_g = Adam::new(model.store().vars(&GENERATOR_GROUPS), cfg.train.optimizer)?;
        let opt_d = Adam::new(model.store().vars(&[ParamGroup::Discriminator]), cfg.train.optimizer)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(SAMPLING_STREAM);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            backbone,
            opt_g,
            opt_d,
            rng,
            step: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn model(&self) -> &RFaceModel {
        &self.model
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Random sources, a different random reference for each, and a random
    /// component subset applied to both.
    pub fn sample_batch(&mut self, data: &TrainingSet) -> Result<Batch> {
        let n = data.len();
        if n < 2 {
            return Err(Error::TooFewSamples(n));
        }
        let b = self.cfg.train.batch_size;
        let radius = self.cfg.train.dilation_radius;
        let (mut src, mut refs, mut ms, mut mr, mut comps) = (vec![], vec![], vec![], vec![], vec![]);
        for _ in 0..b {
            let i = self.rng.random_range(0..n);
            let mut j = self.rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let set = sample_component_subset(&mut self.rng, &self.cfg.train.component_counts);
            let (a, r) = pair_masks(data.labels(i), data.labels(j), &set, radius)?;
            src.push(i);
            refs.push(j);
            ms.push(a);
            mr.push(r);
            comps.push(set);
        }
        Ok(Batch {
            source: data.images(&src)?,
            reference: data.images(&refs)?,
            source_mask: ComponentMask::stack(&ms)?,
            reference_mask: ComponentMask::stack(&mr)?,
            components: comps,
            source_ids: src,
            reference_ids: refs,
        })
    }

    fn diverged(&self, detail: String) -> Error {
        Error::Diverged {
            step: self.step,
            report: detail,
        }
    }

    /// One discriminator update, then one generator update on the weighted objective.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepOutcome> {
        let model = &self.model;
        let dtype = model.dtype();
        let device = model.device().clone();
        let mask = batch.source_mask.to_tensor(dtype, &device)?;
        let corrupted = batch.source.broadcast_mul(&mask)?;
        let generated = model.forward(&corrupted, &batch.source_mask, &batch.reference)?;

        let real = model.discriminate(&batch.source)?;
        let fake = model.discriminate(&generated.detach())?;
        let (_, d_loss) = adversarial_losses(&real, &fake)?;
        let d_value = scalar(&d_loss)?;
        if !d_value.is_finite() {
            return Err(self.diverged(format!("discriminator loss is {d_value}")));
        }
        self.opt_d.step(&d_loss.backward()?)?;

        let t = &self.cfg.train;
        let bb = &self.backbone;
        let perceptual = perceptual_loss(&generated, &batch.source, bb)?;
        let style = style_loss(&generated, &corrupted, &mask, bb)?;
        let contextual = match contextual_loss(
            &generated,
            &batch.source_mask,
            &batch.reference,
            &batch.reference_mask,
            bb,
            &t.contextual,
            &mut self.rng,
        ) {
            Ok(v) => v,
            // nothing to match: the batch carries no contextual signal
            Err(Error::EmptyHole(_)) => Tensor::zeros((), dtype, &device)?,
            Err(e) => return Err(e),
        };
        let pixel = pixel_loss(&generated, &batch.source, &mask, bb, t.pixel_space)?;
        let tv = tv_loss(&generated)?;
        let adversarial = adversarial_generator_loss(&model.discriminate(&generated)?)?;

        let raw = LossTerms {
            perceptual: scalar(&perceptual)?,
            style: scalar(&style)?,
            contextual: scalar(&contextual)?,
            pixel: scalar(&pixel)?,
            tv: scalar(&tv)?,
            adversarial: scalar(&adversarial)?,
        };
        let report = match total_loss(&raw, &t.weights, self.step) {
            Ok(r) => r,
            Err(e) => {
                let line = serde_json::to_string(&raw)?;
                return Err(self.diverged(format!("{e}; terms {line}")));
            }
        };

        let w = &t.weights;
        let mut objective: Option<Tensor> = None;
        for (weight, term) in [
            (w.perceptual, &perceptual),
            (w.style, &style),
            (w.contextual, &contextual),
            (w.pixel, &pixel),
            (w.tv, &tv),
            (w.adversarial, &adversarial),
        ] {
            if weight != 0.0 {
                let scaled = term.affine(weight, 0.0)?;
                objective = Some(match objective {
                    Some(acc) => (acc + scaled)?,
                    None => scaled,
                });
            }
        }
        if let Some(objective) = objective {
            self.opt_g.step(&objective.backward()?)?;
        }
        self.step += 1;
        Ok(StepOutcome {
            report,
            discriminator: d_value,
        })
    }

    /// Runs until `steps` total steps have been taken, writing one JSON line per step to `log`.
    pub fn fit(&mut self, data: &TrainingSet, steps: u64, mut log: Option<&mut dyn Write>) -> Result<Vec<StepOutcome>> {
        let mut out = Vec::new();
        while self.step < steps {
            let batch = self.sample_batch(data)?;
            let o = self.train_step(&batch)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", o.to_log_line())?;
            }
            out.push(o);
        }
        Ok(out)
    }
}
