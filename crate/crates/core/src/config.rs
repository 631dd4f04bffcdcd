//! Domain types, run configuration and the composite objective.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A color image with values in `[-1, 1]`, stored row-major as HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ColorImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "color image {height}x{width} needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Param(format!("color value {v} outside [-1, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.pixels, (self.height, self.width, 3), device)?
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .to_dtype(dtype)?
            .contiguous()?;
        Ok(t)
    }

    /// Inverse of [`ColorImage::to_tensor`] for a single `[1, 3, H, W]` or `[3, H, W]` tensor.
    /// Values are clamped into range.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
        }
        let pixels = t
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect();
        Ok(Self { height: h, width: w, pixels })
    }
}

/// A single-channel sketch with values in `[0, 1]`; 1.0 is a blank page.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl SketchImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension(format!(
                "sketch {height}x{width} needs {} values, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Param(format!("sketch value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.pixels, (1, 1, self.height, self.width), device)?
            .to_dtype(dtype)?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_g: f64,
    pub w_b: f64,
    pub w_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_g: 1.0, w_b: 1.0, w_m: 1.0 }
    }
}

impl LossWeights {
    pub fn new(w_g: f64, w_b: f64, w_m: f64) -> Result<Self> {
        let w = Self { w_g, w_b, w_m };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w_g", self.w_g), ("w_b", self.w_b), ("w_m", self.w_m)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be a nonnegative finite number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    MultiClass,
    Binary,
    Both,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::MultiClass => "multiclass",
            Variant::Binary => "binary",
            Variant::Both => "both",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "multiclass" | "multi" => Ok(Variant::MultiClass),
            "binary" => Ok(Variant::Binary),
            "both" => Ok(Variant::Both),
            _ => Err(Error::Config(format!("unknown variant {s:?}; expected multiclass|binary|both"))),
        }
    }
}

/// The two auxiliary discriminators: `Multi` judges full class maps, `Binary`
/// judges foreground/background maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SegDiscriminator {
    Multi,
    Binary,
}

impl fmt::Display for SegDiscriminator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SegDiscriminator::Multi => "d_m",
            SegDiscriminator::Binary => "d_b",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub variant: Variant,
    pub weights: LossWeights,
}

impl VariantConfig {
    pub fn new(variant: Variant, weights: LossWeights) -> Self {
        Self { variant, weights }
    }

    pub fn is_active(&self, which: SegDiscriminator) -> bool {
        active_discriminators(self).contains(&which)
    }
}

/// Which auxiliary discriminators a variant trains.
pub fn active_discriminators(v: &VariantConfig) -> BTreeSet<SegDiscriminator> {
    match v.variant {
        Variant::MultiClass => BTreeSet::from([SegDiscriminator::Multi]),
        Variant::Binary => BTreeSet::from([SegDiscriminator::Binary]),
        Variant::Both => BTreeSet::from([SegDiscriminator::Multi, SegDiscriminator::Binary]),
    }
}

/// `w_g·l_g + w_b·l_b + w_m·l_m`. Non-finite terms mean training has diverged.
pub fn total_objective(l_g: f64, l_b: f64, l_m: f64, w: &LossWeights) -> Result<f64> {
    for (term, value) in [("l_g", l_g), ("l_b", l_b), ("l_m", l_m)] {
        if !value.is_finite() {
            return Err(Error::Diverged { term: term.to_string(), value });
        }
    }
    Ok(w.w_g * l_g + w.w_b * l_b + w.w_m * l_m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    Paired,
    Unpaired,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Paired => "paired",
            Scheme::Unpaired => "unpaired",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paired" => Ok(Scheme::Paired),
            "unpaired" => Ok(Scheme::Unpaired),
            _ => Err(Error::Config(format!("unknown scheme {s:?}; expected paired|unpaired"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// Residual-block encoder-decoder.
    Resnet,
    /// Skip-connection encoder-decoder.
    Unet,
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resnet" => Ok(GeneratorKind::Resnet),
            "unet" => Ok(GeneratorKind::Unet),
            _ => Err(Error::Config(format!("unknown generator {s:?}; expected resnet|unet|auto"))),
        }
    }
}

/// Everything a run needs, in one flat key-value namespace.
///
/// The text form is one `key = value` per line; `#` starts a comment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub run_name: String,
    pub out_dir: PathBuf,
    pub dataset: String,
    pub dataset_root: PathBuf,
    pub scheme: Scheme,
    pub variant: Variant,
    pub w_g: f64,
    pub w_b: f64,
    pub w_m: f64,
    pub epochs: usize,
    /// Epochs at the initial learning rate before linear decay starts.
    pub lr_constant_epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub image_size: usize,
    pub seed: u64,
    /// `None` picks the scheme default: skip connections for paired, residual blocks for unpaired.
    pub generator: Option<GeneratorKind>,
    pub ngf: usize,
    pub ndf: usize,
    pub n_blocks: usize,
    pub n_downsampling: usize,
    pub unet_depth: usize,
    pub disc_layers: usize,
    pub disc_kernel: usize,
    pub lambda_l1: f64,
    pub lambda_cycle: f64,
    /// `mock` or a path to a segmentation weights file.
    pub seg_backend: String,
    pub num_classes: usize,
    pub partition_file: Option<PathBuf>,
    pub seg_map_size: usize,
    pub seg_temperature: f64,
    pub checkpoint_interval: usize,
    pub double_precision: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            out_dir: PathBuf::from("runs"),
            dataset: "bedroom".into(),
            dataset_root: PathBuf::from("datasets/bedroom"),
            scheme: Scheme::Unpaired,
            variant: Variant::Both,
            w_g: 1.0,
            w_b: 1.0,
            w_m: 1.0,
            epochs: 200,
            lr_constant_epochs: 100,
            learning_rate: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            image_size: 256,
            seed: 0,
            generator: None,
            ngf: 64,
            ndf: 64,
            n_blocks: 9,
            n_downsampling: 2,
            unet_depth: 8,
            disc_layers: 3,
            disc_kernel: 4,
            lambda_l1: 100.0,
            lambda_cycle: 10.0,
            seg_backend: "mock".into(),
            num_classes: 135,
            partition_file: None,
            seg_map_size: 256,
            seg_temperature: 0.1,
            checkpoint_interval: 10,
            double_precision: false,
        }
    }
}

const KEYS: &[&str] = &[
    "run_name",
    "out_dir",
    "dataset",
    "dataset_root",
    "scheme",
    "variant",
    "w_g",
    "w_b",
    "w_m",
    "epochs",
    "lr_constant_epochs",
    "learning_rate",
    "beta1",
    "beta2",
    "batch_size",
    "image_size",
    "seed",
    "generator",
    "ngf",
    "ndf",
    "n_blocks",
    "n_downsampling",
    "unet_depth",
    "disc_layers",
    "disc_kernel",
    "lambda_l1",
    "lambda_cycle",
    "seg_backend",
    "num_classes",
    "partition_file",
    "seg_map_size",
    "seg_temperature",
    "checkpoint_interval",
    "double_precision",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}"))),
    }
}

impl TrainConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { w_g: self.w_g, w_b: self.w_b, w_m: self.w_m }
    }

    pub fn variant_config(&self) -> VariantConfig {
        VariantConfig::new(self.variant, self.weights())
    }

    pub fn generator_kind(&self) -> GeneratorKind {
        self.generator.unwrap_or(match self.scheme {
            Scheme::Paired => GeneratorKind::Unet,
            Scheme::Unpaired => GeneratorKind::Resnet,
        })
    }

    pub fn dtype(&self) -> DType {
        if self.double_precision {
            DType::F64
        } else {
            DType::F32
        }
    }

    /// Sets one field from its text form. Dashes in `key` are treated as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "run_name" => self.run_name = value.to_string(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "dataset" => self.dataset = value.to_string(),
            "dataset_root" => self.dataset_root = PathBuf::from(value),
            "scheme" => self.scheme = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "w_g" => self.w_g = parse(&key, value)?,
            "w_b" => self.w_b = parse(&key, value)?,
            "w_m" => self.w_m = parse(&key, value)?,
            "epochs" => self.epochs = parse(&key, value)?,
            "lr_constant_epochs" => self.lr_constant_epochs = parse(&key, value)?,
            "learning_rate" => self.learning_rate = parse(&key, value)?,
            "beta1" => self.beta1 = parse(&key, value)?,
            "beta2" => self.beta2 = parse(&key, value)?,
            "batch_size" => self.batch_size = parse(&key, value)?,
            "image_size" => self.image_size = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "generator" => {
                self.generator = match value.to_ascii_lowercase().as_str() {
                    "auto" | "" => None,
                    other => Some(other.parse()?),
                }
            }
            "ngf" => self.ngf = parse(&key, value)?,
            "ndf" => self.ndf = parse(&key, value)?,
            "n_blocks" => self.n_blocks = parse(&key, value)?,
            "n_downsampling" => self.n_downsampling = parse(&key, value)?,
            "unet_depth" => self.unet_depth = parse(&key, value)?,
            "disc_layers" => self.disc_layers = parse(&key, value)?,
            "disc_kernel" => self.disc_kernel = parse(&key, value)?,
            "lambda_l1" => self.lambda_l1 = parse(&key, value)?,
            "lambda_cycle" => self.lambda_cycle = parse(&key, value)?,
            "seg_backend" => self.seg_backend = value.to_string(),
            "num_classes" => self.num_classes = parse(&key, value)?,
            "partition_file" => {
                self.partition_file = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "seg_map_size" => self.seg_map_size = parse(&key, value)?,
            "seg_temperature" => self.seg_temperature = parse(&key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(&key, value)?,
            "double_precision" => self.double_precision = parse_bool(&key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "run_name" => self.run_name.clone(),
            "out_dir" => self.out_dir.display().to_string(),
            "dataset" => self.dataset.clone(),
            "dataset_root" => self.dataset_root.display().to_string(),
            "scheme" => self.scheme.to_string(),
            "variant" => self.variant.to_string(),
            "w_g" => self.w_g.to_string(),
            "w_b" => self.w_b.to_string(),
            "w_m" => self.w_m.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr_constant_epochs" => self.lr_constant_epochs.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "image_size" => self.image_size.to_string(),
            "seed" => self.seed.to_string(),
            "generator" => match self.generator {
                None => "auto".into(),
                Some(GeneratorKind::Resnet) => "resnet".into(),
                Some(GeneratorKind::Unet) => "unet".into(),
            },
            "ngf" => self.ngf.to_string(),
            "ndf" => self.ndf.to_string(),
            "n_blocks" => self.n_blocks.to_string(),
            "n_downsampling" => self.n_downsampling.to_string(),
            "unet_depth" => self.unet_depth.to_string(),
            "disc_layers" => self.disc_layers.to_string(),
            "disc_kernel" => self.disc_kernel.to_string(),
            "lambda_l1" => self.lambda_l1.to_string(),
            "lambda_cycle" => self.lambda_cycle.to_string(),
            "seg_backend" => self.seg_backend.clone(),
            "num_classes" => self.num_classes.to_string(),
            "partition_file" => self
                .partition_file
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into()),
            "seg_map_size" => self.seg_map_size.to_string(),
            "seg_temperature" => self.seg_temperature.to_string(),
            "checkpoint_interval" => self.checkpoint_interval.to_string(),
            "double_precision" => self.double_precision.to_string(),
            _ => return None,
        };
        Some(v)
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text)
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).unwrap_or_default());
            out.push('\n');
        }
        out
    }

    /// Stable digest of every field; used to refuse resuming under a changed config.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv_string().as_bytes()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_name)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!("image_size must be divisible by 4, got {}", self.image_size)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.generator_kind() == GeneratorKind::Unet && self.image_size % (1 << self.unet_depth) != 0 {
            return Err(Error::Config(format!(
                "unet_depth {} needs image_size divisible by {}",
                self.unet_depth,
                1usize << self.unet_depth
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.seg_map_size == 0 || self.ngf == 0 || self.ndf == 0 {
            return Err(Error::Config("seg_map_size, ngf and ndf must be positive".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be at least 1".into()));
        }
        Ok(())
    }
}
