//! Editing, evaluation tables, the ablation harness and silhouette scoring.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device};
use image::{imageops, Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::config::{Ablation, ExperimentConfig};
use super::data::{load_split, palette, sample_component_subset, Sample};
use super::train::{pair_masks, Trainer, TrainingSet};
use crate::error::{Error, Result};
use crate::featnet::{Backbone, BackboneKind, BackboneSpec};
use crate::imagecore::{corrupt, Component, ComponentMask, ComponentSet, ImageTensor, LabelMap, ValueRange};
use crate::metrics::{embed_stats, frechet_distance, ms_ssim_per_item, MsSsimConfig};
use crate::networks::{compose_output, BlendMode, RFaceModel};

/// Seed offset for the fixed evaluation pairing, so it never aliases training draws.
const EVAL_SEED_OFFSET: u64 = 0x5eed_e7a1;
const EVAL_BATCH: usize = 8;

/// One test edit: which source, which reference, which components.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub source: usize,
    pub reference: usize,
    pub components: ComponentSet,
}

/// Source `i` takes its reference from `i + 1` (cyclically); component sets are
/// drawn with the training policy from a fixed seed.
pub fn eval_pairs(n: usize, counts: &[usize], seed: u64) -> Vec<EvalPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SEED_OFFSET);
    (0..n)
        .map(|i| EvalPair {
            source: i,
            reference: (i + 1) % n,
            components: sample_component_subset(&mut rng, counts),
        })
        .collect()
}

/// Output of one edit.
#[derive(Debug, Clone)]
pub struct Edited {
    pub output: RgbImage,
    pub corrupted: RgbImage,
    /// Keep-mask of the source (zeros over the removed components).
    pub mask: ComponentMask,
}

/// Runs the generator on `(source, reference)` pairs; `labels` are the sources' parsing maps.
pub fn edit_images(
    model: &RFaceModel,
    sources: &[RgbImage],
    labels: &[LabelMap],
    references: &[RgbImage],
    components: &[ComponentSet],
    dilation_radius: usize,
    blend: BlendMode,
) -> Result<Vec<Edited>> {
    let n = sources.len();
    if labels.len() != n || references.len() != n || components.len() != n {
        return Err(Error::shape("edit inputs must have equal lengths"));
    }
    let size = model.config().image_size as u32;
    for img in sources.iter().chain(references) {
        if img.dimensions() != (size, size) {
            return Err(Error::shape(format!(
                "model expects {size}x{size} images, got {}x{}",
                img.width(),
                img.height()
            )));
        }
    }
    let (dtype, device) = (model.dtype(), model.device().clone());
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(n);
        let masks = (start..end)
            .map(|i| {
                if components[i].is_empty() {
                    return Err(Error::Config("at least one component must be edited".into()));
                }
                // the reference needs no mask at inference
                let (m, _) = pair_masks(&labels[i], &labels[i], &components[i], dilation_radius)?;
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        let mask = ComponentMask::stack(&masks)?;
        let src = ImageTensor::from_rgb(&sources[start..end], ValueRange::Network, dtype, &device)?;
        let refs = ImageTensor::from_rgb(&references[start..end], ValueRange::Network, dtype, &device)?;
        let corrupted = corrupt(&src, &mask)?;
        let generated = model.forward(corrupted.tensor(), &mask, refs.tensor())?;
        let composed = compose_output(&generated, src.tensor(), &mask, blend)?;
        let composed = ImageTensor::new(composed.clamp(-1.0, 1.0)?, ValueRange::Network)?;
        let outputs = composed.to_rgb()?;
        let corrupted_rgb = corrupted.to_rgb()?;
        for (k, (o, c)) in outputs.into_iter().zip(corrupted_rgb).enumerate() {
            out.push(Edited {
                output: o,
                corrupted: c,
                mask: mask.item(k),
            });
        }
    }
    Ok(out)
}

/// `source | reference | corrupted | output` side by side.
pub fn edit_grid(source: &RgbImage, reference: &RgbImage, corrupted: &RgbImage, output: &RgbImage) -> RgbImage {
    let (w, h) = source.dimensions();
    let gap = 2;
    let mut grid = RgbImage::from_pixel(4 * w + 3 * gap, h, Rgb([255, 255, 255]));
    for (k, img) in [source, reference, corrupted, output].into_iter().enumerate() {
        imageops::replace(&mut grid, img, (k as u32 * (w + gap)) as i64, 0);
    }
    grid
}

/// Pixels of `img` whose colour belongs to `component`'s synthetic palette family.
pub fn palette_silhouette(img: &RgbImage, component: Component) -> Vec<bool> {
    img.pixels().map(|p| palette::matches(component, *p)).collect()
}

/// Intersection and union counts of two silhouettes within `region`.
pub fn overlap_counts(a: &[bool], b: &[bool], region: &[bool]) -> (usize, usize) {
    let mut inter = 0;
    let mut union = 0;
    for ((&x, &y), &r) in a.iter().zip(b).zip(region) {
        if r {
            inter += usize::from(x && y);
            union += usize::from(x || y);
        }
    }
    (inter, union)
}

/// Pooled hole-region IoU between the edited components in each output and in its reference.
pub fn hole_shape_iou(edits: &[Edited], references: &[RgbImage], components: &[ComponentSet]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for ((e, r), set) in edits.iter().zip(references).zip(components) {
        let region: Vec<bool> = e.mask.data().iter().map(|&v| v == 0).collect();
        for c in set.iter() {
            let (i, u) = overlap_counts(&palette_silhouette(&e.output, c), &palette_silhouette(r, c), &region);
            inter += i;
            union += u;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// One row of a metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub label: String,
    pub fid: f64,
    pub ms_ssim: f64,
}

/// Tab-separated `config / FID / MS-SSIM` table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl fmt::Display for MetricsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "config\tFID\tMS-SSIM")?;
        for r in &self.rows {
            writeln!(f, "{}\t{:.6}\t{:.6}", r.label, r.fid, r.ms_ssim)?;
        }
        Ok(())
    }
}

impl MetricsTable {
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_string())?;
        Ok(())
    }
}

/// The FID embedder for a config: its backbone when that is the random CNN,
/// otherwise a random CNN with the config's backbone seed.
pub fn fid_embedder(cfg: &ExperimentConfig, dtype: DType, device: &Device) -> Result<Backbone> {
    let spec = if cfg.train.backbone.kind == BackboneKind::FixedRandomCnn {
        cfg.train.backbone.clone()
    } else {
        BackboneSpec::random_cnn(cfg.train.backbone.seed)
    };
    Backbone::new(&spec, dtype, device)
}

/// FID between real test images and pasted edits, and mean MS-SSIM of each edit against its source.
pub fn evaluate(model: &RFaceModel, cfg: &ExperimentConfig, test: &[Sample], label: &str) -> Result<MetricsRow> {
    if test.len() < 2 {
        return Err(Error::TooFewSamples(test.len()));
    }
    let pairs = eval_pairs(test.len(), &cfg.train.component_counts, cfg.train.seed);
    let sources: Vec<RgbImage> = pairs.iter().map(|p| test[p.source].image.clone()).collect();
    let labels: Vec<LabelMap> = pairs.iter().map(|p| test[p.source].labels.clone()).collect();
    let refs: Vec<RgbImage> = pairs.iter().map(|p| test[p.reference].image.clone()).collect();
    let comps: Vec<ComponentSet> = pairs.iter().map(|p| p.components.clone()).collect();
    let edits = edit_images(model, &sources, &labels, &refs, &comps, cfg.train.dilation_radius, BlendMode::Paste)?;

    let dtype = DType::F64;
    let device = Device::Cpu;
    let outputs: Vec<RgbImage> = edits.iter().map(|e| e.output.clone()).collect();
    let batches = |imgs: &[RgbImage]| -> Result<Vec<ImageTensor>> {
        imgs.chunks(EVAL_BATCH)
            .map(|c| ImageTensor::from_rgb(c, ValueRange::Unit, dtype, &device))
            .collect()
    };
    let (real, fake) = (batches(&sources)?, batches(&outputs)?);
    let embedder = fid_embedder(cfg, dtype, &device)?;
    let fid = frechet_distance(&embed_stats(&real, &embedder)?, &embed_stats(&fake, &embedder)?)?;

    let size = cfg.generator.image_size;
    let ms_cfg = MsSsimConfig::fitting(size, size)?;
    let mut scores = Vec::new();
    for (r, f) in real.iter().zip(&fake) {
        scores.extend(ms_ssim_per_item(f, r, &ms_cfg)?);
    }
    Ok(MetricsRow {
        label: label.to_string(),
        fid,
        ms_ssim: scores.iter().sum::<f64>() / scores.len() as f64,
    })
}

/// Files written by [`train_experiment`].
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const CONFIG_FILE: &str = "config.toml";

/// Trains one experiment from scratch; with `out`, writes the config, the
/// per-step log and the final checkpoint there.
pub fn train_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(Trainer, Vec<Sample>)> {
    let (dtype, device) = (DType::F32, Device::Cpu);
    let (train, test) = load_split(&cfg.train.data, cfg.train.image_size)?;
    let set = TrainingSet::new(&train, dtype, &device)?;
    let mut trainer = Trainer::new(cfg, dtype, &device)?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml_string()?)?;
            let mut log = BufWriter::new(File::create(dir.join(LOG_FILE))?);
            trainer.fit(&set, cfg.train.steps, Some(&mut log))?;
            log.flush()?;
            save_checkpoint(&trainer, &dir.join(CHECKPOINT_FILE))?;
        }
        None => {
            trainer.fit(&set, cfg.train.steps, None)?;
        }
    }
    Ok((trainer, test))
}

/// Trains and evaluates every variant on the shared test split and embedder.
/// With `out`, each variant's run is kept under `out/<variant>/`.
pub fn run_ablation(base: &ExperimentConfig, variants: &[Ablation], out: Option<&Path>) -> Result<MetricsTable> {
    let mut table = MetricsTable::default();
    for &v in variants {
        let cfg = base.ablated(v);
        let dir = out.map(|o| o.join(v.to_string()));
        let (trainer, test) = train_experiment(&cfg, dir.as_deref())?;
        // every variant is scored with the base config's pairing and embedder
        table.rows.push(evaluate(trainer.model(), base, &test, v.label())?);
    }
    Ok(table)
}
