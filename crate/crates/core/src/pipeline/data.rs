//! Datasets: procedural toy faces, CelebAMask-HQ ingestion, the train/test
//! split and per-sample component sampling.
//!
//! Two on-disk layouts are understood. The raw release layout is
//!
//! ```text
//! <root>/CelebA-HQ-img/<id>.jpg
//! <root>/CelebAMask-HQ-mask-anno/<id / 2000>/<id:05>_<class>.png
//! ```
//!
//! with one binary PNG per parsing class. The prepared layout written by
//! `prepare-data` holds resized images and merged single-channel label maps
//! whose pixel values are class ids:
//!
//! ```text
//! <root>/images/<id>.png
//! <root>/labels/<id>.png
//! ```

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use walkdir::WalkDir;

use super::config::DataConfig;
use crate::error::{Error, Result};
use crate::imagecore::{
    Component, ComponentSet, LabelMap, CLASS_BACKGROUND, CLASS_LEFT_EYE, CLASS_LOWER_LIP, CLASS_MOUTH, CLASS_NOSE,
    CLASS_RIGHT_EYE, CLASS_SKIN, CLASS_UPPER_LIP, FACE_CLASSES,
};

/// Images held out for testing when the full dataset is present.
pub const DEFAULT_TEST_SIZE: usize = 2000;
pub const RAW_IMAGE_DIR: &str = "CelebA-HQ-img";
pub const RAW_MASK_DIR: &str = "CelebAMask-HQ-mask-anno";
pub const PREPARED_IMAGE_DIR: &str = "images";
pub const PREPARED_LABEL_DIR: &str = "labels";
const RAW_IDS_PER_FOLDER: u64 = 2000;

/// One face image with its parsing labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub labels: LabelMap,
}

/// Disjoint train and test id lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    /// Holds out the last `test_size` ids (in the given order) for testing.
    pub fn holdout(ids: &[String], test_size: usize) -> Result<Self> {
        if test_size == 0 || test_size >= ids.len() {
            return Err(Error::Config(format!(
                "test size {test_size} must be in 1..{} for {} ids",
                ids.len(),
                ids.len()
            )));
        }
        let cut = ids.len() - test_size;
        Ok(Self {
            train: ids[..cut].to_vec(),
            test: ids[cut..].to_vec(),
        })
    }
}

/// Draws the removed components of one training sample: a size from `counts`
/// uniformly, then a uniformly random subset of {eyes, nose, mouth} of that size.
pub fn sample_component_subset<R: Rng>(rng: &mut R, counts: &[usize]) -> ComponentSet {
    let all = [Component::Eyes, Component::Nose, Component::Mouth];
    let k = counts[rng.random_range(0..counts.len())].min(all.len());
    sample(rng, all.len(), k).into_iter().map(|i| all[i]).collect()
}

/// Palette families of the synthetic faces; each component has its own hue.
pub mod palette {
    use image::Rgb;

    use crate::imagecore::Component;

    pub fn is_skin(p: Rgb<u8>) -> bool {
        let [r, g, b] = p.0.map(i32::from);
        r >= 190 && g >= 150 && b >= 100 && r > g && g > b
    }

    /// Whether a pixel colour falls in the family of `component`.
    pub fn matches(component: Component, p: Rgb<u8>) -> bool {
        let [r, g, b] = p.0.map(i32::from);
        match component {
            Component::Eyes => b > r + 60 && b > g + 40,
            Component::Nose => g > r + 40 && g > b + 40,
            Component::Mouth => r > g + 70 && r > b + 50,
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn colour<R: Rng>(rng: &mut R, ranges: [(u8, u8); 3]) -> Rgb<u8> {
    Rgb(ranges.map(|(lo, hi)| rng.random_range(lo..=hi)))
}

/// Pixel-centre coordinate closest to `v`.
fn snap(v: f64) -> f64 {
    v.floor() + 0.5
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    dx * dx + dy * dy <= 1.0
}

fn render_toy_face<R: Rng>(rng: &mut R, size: usize) -> (RgbImage, LabelMap) {
    let s = size as f64;
    let bg = colour(rng, [(60, 110), (60, 110), (60, 110)]);
    let skin = colour(rng, [(205, 235), (170, 195), (120, 150)]);
    let eye = colour(rng, [(20, 60), (40, 90), (150, 210)]);
    let nose = colour(rng, [(40, 90), (150, 200), (40, 90)]);
    let lip = colour(rng, [(190, 235), (20, 60), (50, 90)]);
    let mouth_line = colour(rng, [(120, 150), (10, 30), (20, 40)]);

    let cx = snap(s / 2.0 + uniform(rng, -0.02, 0.02) * s);
    let cy = snap(s / 2.0 + uniform(rng, -0.02, 0.02) * s);
    let (face_rx, face_ry) = (uniform(rng, 0.36, 0.42) * s, uniform(rng, 0.44, 0.48) * s);

    let eye_dx = snap(0.17 * s + uniform(rng, -0.01, 0.01) * s) - 0.5;
    let eye_y = snap(cy - 0.10 * s + uniform(rng, -0.01, 0.01) * s);
    let (eye_rx, eye_ry) = (uniform(rng, 0.06, 0.11) * s, uniform(rng, 0.035, 0.07) * s);

    let nose_top = cy - 0.04 * s;
    let nose_bottom = cy + uniform(rng, 0.08, 0.14) * s;
    let nose_half = uniform(rng, 0.04, 0.08) * s;

    let mouth_y = snap(cy + 0.24 * s + uniform(rng, -0.01, 0.01) * s);
    let mouth_rx = uniform(rng, 0.09, 0.17) * s;
    let mouth_ry = (uniform(rng, 0.035, 0.07) * s).max(1.6);

    let mut img = RgbImage::from_pixel(size as u32, size as u32, bg);
    let mut labels = LabelMap::filled(size, size, CLASS_BACKGROUND);
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let mut paint = |class: u8, c: Rgb<u8>| {
                labels.set(yi, xi, class);
                img.put_pixel(xi as u32, yi as u32, c);
            };
            if in_ellipse(x, y, cx, cy, face_rx, face_ry) {
                paint(CLASS_SKIN, skin);
            }
            // the viewer's left eye is the subject's right eye
            if in_ellipse(x, y, cx - eye_dx, eye_y, eye_rx, eye_ry) {
                paint(CLASS_RIGHT_EYE, eye);
            }
            if in_ellipse(x, y, cx + eye_dx, eye_y, eye_rx, eye_ry) {
                paint(CLASS_LEFT_EYE, eye);
            }
            if y >= nose_top && y <= nose_bottom {
                let half = nose_half * (y - nose_top) / (nose_bottom - nose_top) + 0.5;
                if (x - cx).abs() <= half {
                    paint(CLASS_NOSE, nose);
                }
            }
            if in_ellipse(x, y, cx, mouth_y, mouth_rx, mouth_ry) {
                if y == mouth_y {
                    paint(CLASS_MOUTH, mouth_line);
                } else if y < mouth_y {
                    paint(CLASS_UPPER_LIP, lip);
                } else {
                    paint(CLASS_LOWER_LIP, lip);
                }
            }
        }
    }
    (img, labels)
}

/// Procedural faces (oval face, two eyes, a triangular nose and a two-lip mouth
/// with randomised geometry and colours) with exact label maps. Deterministic
/// per seed.
pub fn synth_toy_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if size < 16 {
        return Err(Error::Config(format!("toy faces need size >= 16, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let (image, labels) = render_toy_face(&mut rng, size);
            Sample {
                id: format!("toy-{i:05}"),
                image,
                labels,
            }
        })
        .collect())
}

fn sort_ids(ids: &mut [String]) {
    ids.sort_by(|a, b| match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    });
}

fn file_stems(dir: &Path, extensions: &[&str]) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::MissingData {
            id: dir.display().to_string(),
            detail: "directory not found".into(),
        });
    }
    let mut ids = Vec::new();
    for entry in WalkDir::new(dir).min_depth(1).max_depth(1) {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        let path = entry.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if entry.file_type().is_file() && extensions.contains(&ext.as_str()) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    sort_ids(&mut ids);
    Ok(ids)
}

fn is_prepared(root: &Path) -> bool {
    root.join(PREPARED_IMAGE_DIR).is_dir() && root.join(PREPARED_LABEL_DIR).is_dir()
}

/// Sample ids found under `root`, in numeric order.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    if is_prepared(root) {
        file_stems(&root.join(PREPARED_IMAGE_DIR), &["png"])
    } else {
        file_stems(&root.join(RAW_IMAGE_DIR), &["jpg", "jpeg", "png"])
    }
}

fn raw_image_path(root: &Path, id: &str) -> Option<PathBuf> {
    ["jpg", "jpeg", "png"]
        .iter()
        .map(|ext| root.join(RAW_IMAGE_DIR).join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// Merges the per-class binary masks of one raw sample; later classes win.
fn merge_raw_masks(root: &Path, id: &str) -> Result<LabelMap> {
    let num: u64 = id.parse().map_err(|_| Error::MissingData {
        id: id.to_string(),
        detail: "raw annotation ids must be numeric".into(),
    })?;
    let folder = root.join(RAW_MASK_DIR).join((num / RAW_IDS_PER_FOLDER).to_string());
    let mut merged: Option<LabelMap> = None;
    for (class, name) in FACE_CLASSES.iter().enumerate().skip(1) {
        let path = folder.join(format!("{num:05}_{name}.png"));
        if !path.is_file() {
            continue;
        }
        let mask = image::open(&path)?.to_luma8();
        let (w, h) = (mask.width() as usize, mask.height() as usize);
        let labels = merged.get_or_insert_with(|| LabelMap::filled(h, w, CLASS_BACKGROUND));
        if (labels.height(), labels.width()) != (h, w) {
            return Err(Error::MissingData {
                id: id.to_string(),
                detail: format!("{} has size {w}x{h}, expected {}x{}", path.display(), labels.width(), labels.height()),
            });
        }
        for (x, y, p) in mask.enumerate_pixels() {
            if p.0[0] > 127 {
                labels.set(y as usize, x as usize, class as u8);
            }
        }
    }
    merged.ok_or_else(|| Error::MissingData {
        id: id.to_string(),
        detail: format!("no annotation masks in {}", folder.display()),
    })
}

fn label_map_from_gray(img: &GrayImage) -> Result<LabelMap> {
    LabelMap::new(img.height() as usize, img.width() as usize, img.as_raw().clone())
}

pub fn label_map_to_gray(labels: &LabelMap) -> GrayImage {
    GrayImage::from_fn(labels.width() as u32, labels.height() as u32, |x, y| {
        Luma([labels.get(y as usize, x as usize)])
    })
}

fn resize_image(img: RgbImage, size: usize) -> RgbImage {
    if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    }
}

/// Loads one sample by id, resizing images bilinearly and labels by nearest neighbour.
pub fn load_sample(root: &Path, id: &str, size: usize) -> Result<Sample> {
    let (image, labels) = if is_prepared(root) {
        let ip = root.join(PREPARED_IMAGE_DIR).join(format!("{id}.png"));
        let lp = root.join(PREPARED_LABEL_DIR).join(format!("{id}.png"));
        for p in [&ip, &lp] {
            if !p.is_file() {
                return Err(Error::MissingData {
                    id: id.to_string(),
                    detail: format!("{} not found", p.display()),
                });
            }
        }
        (image::open(&ip)?.to_rgb8(), label_map_from_gray(&image::open(&lp)?.to_luma8())?)
    } else {
        let ip = raw_image_path(root, id).ok_or_else(|| Error::MissingData {
            id: id.to_string(),
            detail: "image file not found".into(),
        })?;
        (image::open(&ip)?.to_rgb8(), merge_raw_masks(root, id)?)
    };
    Ok(Sample {
        id: id.to_string(),
        image: resize_image(image, size),
        labels: labels.resize_nearest(size, size),
    })
}

/// Every sample under `root`, in id order.
pub fn load_celebamask_hq(root: &Path, size: usize) -> Result<Vec<Sample>> {
    let ids = list_ids(root)?;
    if ids.is_empty() {
        return Err(Error::MissingData {
            id: root.display().to_string(),
            detail: "no images found".into(),
        });
    }
    ids.iter().map(|id| load_sample(root, id, size)).collect()
}

/// Writes samples in the prepared layout under `out`.
pub fn write_prepared(samples: &[Sample], out: &Path) -> Result<()> {
    let images = out.join(PREPARED_IMAGE_DIR);
    let labels = out.join(PREPARED_LABEL_DIR);
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&labels)?;
    for s in samples {
        s.image.save(images.join(format!("{}.png", s.id)))?;
        label_map_to_gray(&s.labels).save(labels.join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

/// Converts the dataset under `root` into the prepared layout at `size`, streaming one sample at a time.
pub fn prepare_dataset(root: &Path, size: usize, out: &Path) -> Result<usize> {
    let ids = list_ids(root)?;
    for id in &ids {
        let s = load_sample(root, id, size)?;
        write_prepared(std::slice::from_ref(&s), out)?;
    }
    Ok(ids.len())
}

/// Train and test samples for a data configuration.
pub fn load_split(data: &DataConfig, size: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    match data {
        DataConfig::Toy {
            train_samples,
            test_samples,
            seed,
        } => {
            let mut all = synth_toy_dataset(train_samples + test_samples, size, *seed)?;
            let test = all.split_off(*train_samples);
            Ok((all, test))
        }
        DataConfig::CelebamaskHq { root, test_size } => {
            let ids = list_ids(root)?;
            let split = DatasetSplit::holdout(&ids, *test_size)?;
            let load = |ids: &[String]| ids.iter().map(|id| load_sample(root, id, size)).collect::<Result<Vec<_>>>();
            Ok((load(&split.train)?, load(&split.test)?))
        }
    }
}
