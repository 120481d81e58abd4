//! Datasets, configuration, the training loop, checkpoints, evaluation and the
//! ablation harness.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod optim;
pub mod train;

pub use checkpoint::{load_model, load_trainer, save_checkpoint};
pub use config::{Ablation, AblationGrid, AdamConfig, DataConfig, ExperimentConfig, TrainConfig};
pub use data::{load_celebamask_hq, sample_component_subset, synth_toy_dataset, DatasetSplit, Sample};
pub use eval::{edit_images, evaluate, run_ablation, train_experiment, MetricsRow, MetricsTable};
pub use train::{Batch, StepOutcome, Trainer, TrainingSet};
