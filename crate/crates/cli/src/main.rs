use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use clap::{Parser, Subcommand, ValueEnum};
use image::imageops::FilterType;
use image::RgbImage;

use rface::imagecore::{ComponentSet, LabelMap};
use rface::networks::BlendMode;
use rface::pipeline::data::{self, PREPARED_IMAGE_DIR, PREPARED_LABEL_DIR};
use rface::pipeline::eval::{edit_grid, edit_images, evaluate, run_ablation, train_experiment, CHECKPOINT_FILE, LOG_FILE};
use rface::pipeline::{load_model, AblationGrid, ExperimentConfig};

#[derive(Parser)]
#[command(name = "rface", version, about = "Reference-guided face component editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Blend {
    /// Keep source pixels outside the hole.
    Paste,
    /// Use the raw generator output everywhere.
    Raw,
}

#[derive(Subcommand)]
enum Command {
    /// Resize a dataset and merge its parsing masks into the prepared layout,
    /// or write a synthetic toy dataset with --toy.
    PrepareData {
        /// Dataset root (raw release layout); with --toy, the output directory.
        #[arg(long)]
        root: PathBuf,
        /// Output side length in pixels.
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Output directory [default: <root>/prepared-<size>].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generate this many synthetic faces instead of reading a dataset.
        #[arg(long)]
        toy: Option<usize>,
        /// Seed for --toy.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a TOML experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory for the config copy, per-step log and checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer components from a reference face onto a source face.
    Edit {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Comma-separated subset of eyes, nose, mouth.
        #[arg(long)]
        components: String,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output image; the comparison grid is written next to it as <stem>_grid.png.
        #[arg(long)]
        out: PathBuf,
        /// Parsing label map of the source [default: ../labels/<file name> beside the source].
        #[arg(long)]
        source_labels: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Blend::Paste)]
        blend: Blend,
    },
    /// Score a checkpoint on a split of its training data.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out_table: PathBuf,
    },
    /// Train and score every variant of an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out_table: PathBuf,
        /// Keep each variant's run (log and checkpoint) under this directory.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::PrepareData {
            root,
            size,
            out,
            toy,
            seed,
        } => prepare(&root, size, out, toy, seed),
        Command::Train { config, out } => train(&config, &out),
        Command::Edit {
            source,
            reference,
            components,
            checkpoint,
            out,
            source_labels,
            blend,
        } => edit(&source, &reference, &components, &checkpoint, &out, source_labels, blend),
        Command::Evaluate {
            checkpoint,
            split,
            out_table,
        } => eval(&checkpoint, split, &out_table),
        Command::Ablate { grid, out_table, runs } => ablate(&grid, &out_table, runs.as_deref()),
    }
}

fn prepare(root: &Path, size: usize, out: Option<PathBuf>, toy: Option<usize>, seed: u64) -> Result<()> {
    match toy {
        Some(n) => {
            let out = out.unwrap_or_else(|| root.to_path_buf());
            let samples = data::synth_toy_dataset(n, size, seed)?;
            data::write_prepared(&samples, &out)?;
            println!("wrote {n} toy faces at {size}x{size} to {}", out.display());
        }
        None => {
            let out = out.unwrap_or_else(|| root.join(format!("prepared-{size}")));
            let n = data::prepare_dataset(root, size, &out)?;
            println!("prepared {n} samples at {size}x{size} in {}", out.display());
        }
    }
    Ok(())
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let (trainer, _) = train_experiment(&cfg, Some(out))?;
    println!(
        "trained {} steps; log {}, checkpoint {}",
        trainer.step(),
        out.join(LOG_FILE).display(),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn load_rgb(path: &Path, size: usize) -> Result<RgbImage> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
    Ok(if img.dimensions() == (size as u32, size as u32) {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    })
}

fn default_labels(source: &Path) -> Result<PathBuf> {
    let name = source.file_name().context("source path has no file name")?;
    let dir = source.parent().unwrap_or(Path::new("."));
    if dir.file_name().is_some_and(|d| d == PREPARED_IMAGE_DIR) {
        let parent = dir.parent().unwrap_or(Path::new("."));
        return Ok(parent.join(PREPARED_LABEL_DIR).join(name).with_extension("png"));
    }
    bail!(
        "cannot infer the label map for {}; pass --source-labels",
        source.display()
    )
}

fn edit(
    source: &Path,
    reference: &Path,
    components: &str,
    checkpoint: &Path,
    out: &Path,
    source_labels: Option<PathBuf>,
    blend: Blend,
) -> Result<()> {
    let set = ComponentSet::parse_list(components)?;
    let (model, cfg) = load_model(checkpoint, DType::F32, &Device::Cpu)?;
    let size = cfg.generator.image_size;
    let labels_path = match source_labels {
        Some(p) => p,
        None => default_labels(source)?,
    };
    let gray = image::open(&labels_path)
        .with_context(|| format!("reading {}", labels_path.display()))?
        .to_luma8();
    let labels = LabelMap::new(gray.height() as usize, gray.width() as usize, gray.into_raw())?.resize_nearest(size, size);
    let src = load_rgb(source, size)?;
    let refr = load_rgb(reference, size)?;
    let blend = match blend {
        Blend::Paste => BlendMode::Paste,
        Blend::Raw => BlendMode::Raw,
    };
    let edited = edit_images(
        &model,
        std::slice::from_ref(&src),
        std::slice::from_ref(&labels),
        std::slice::from_ref(&refr),
        std::slice::from_ref(&set),
        cfg.train.dilation_radius,
        blend,
    )?
    .remove(0);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    edited.output.save(out)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("edit");
    let grid_path = out.with_file_name(format!("{stem}_grid.png"));
    edit_grid(&src, &refr, &edited.corrupted, &edited.output).save(&grid_path)?;
    println!("wrote {} and {}", out.display(), grid_path.display());
    Ok(())
}

fn eval(checkpoint: &Path, split: Split, out_table: &Path) -> Result<()> {
    let (model, cfg) = load_model(checkpoint, DType::F32, &Device::Cpu)?;
    let (train, test) = data::load_split(&cfg.train.data, cfg.train.image_size)?;
    let (samples, label) = match split {
        Split::Train => (train, "r-FACE (train split)"),
        Split::Test => (test, "r-FACE (full)"),
    };
    let row = evaluate(&model, &cfg, &samples, label)?;
    let table = rface::pipeline::MetricsTable { rows: vec![row] };
    table.write(out_table)?;
    print!("{table}");
    Ok(())
}

fn ablate(grid: &Path, out_table: &Path, runs: Option<&Path>) -> Result<()> {
    let (grid, base) = AblationGrid::load(grid).with_context(|| format!("loading {}", grid.display()))?;
    let table = run_ablation(&base, &grid.variants, runs)?;
    table.write(out_table)?;
    print!("{table}");
    Ok(())
}
