#![allow(dead_code)]

use std::path::Path;

use advseg::config::GeneratorKind;
use advseg::data::{write_toy_dataset, Dataset, DatasetSpec, Split};
use advseg::gan::{ArchConfig, Batch};
use advseg::{Scheme, TrainConfig, Variant};
use candle_core::DType;

pub fn arch(generator: GeneratorKind, num_classes: usize, dtype: DType) -> ArchConfig {
    ArchConfig {
        generator,
        ngf: 4,
        ndf: 4,
        n_blocks: 1,
        n_downsampling: 2,
        unet_depth: 3,
        disc_layers: 1,
        disc_kernel: 4,
        num_classes,
        lambda_l1: 100.0,
        lambda_cycle: 10.0,
        learning_rate: 2e-4,
        beta1: 0.5,
        beta2: 0.999,
        seed: 1234,
        dtype,
    }
}

/// All batches of one shuffled pass over a freshly written toy dataset.
pub fn toy_batches(root: &Path, n: usize, size: usize, scheme: Scheme, dtype: DType) -> Vec<Batch> {
    let mut spec = write_toy_dataset(root, n, 0, size, 99).unwrap();
    spec.scheme = scheme;
    let ds = Dataset::open(&spec, Split::Train, size).unwrap();
    ds.epoch_order(5, 1, true).chunks(1).map(|c| ds.load_batch(c, dtype).unwrap()).collect()
}

pub fn toy_spec(root: &Path, n_train: usize, n_test: usize, size: usize) -> DatasetSpec {
    write_toy_dataset(root, n_train, n_test, size, 7).unwrap()
}

/// Small paired config over a toy dataset rooted at `data`, writing runs below `out`.
pub fn toy_config(data: &Path, out: &Path, name: &str) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.run_name = name.into();
    c.out_dir = out.to_path_buf();
    c.dataset = "toy".into();
    c.dataset_root = data.to_path_buf();
    c.scheme = Scheme::Paired;
    c.variant = Variant::Both;
    c.epochs = 2;
    c.lr_constant_epochs = 1;
    c.image_size = 16;
    c.ngf = 4;
    c.ndf = 4;
    c.unet_depth = 3;
    c.disc_layers = 1;
    c.seg_map_size = 16;
    c.checkpoint_interval = 1;
    c.seed = 3;
    c
}
