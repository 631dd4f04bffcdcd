//! Frozen segmentation backends and the foreground/background collapse.
//!
//! Backends map color images in `[-1, 1]` to per-pixel class probabilities.
//! Their weights are plain tensors, never variables, so no optimizer can reach
//! them and gradients only flow through them to the images.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvStack};

/// Default number of segmentation classes.
pub const DEFAULT_NUM_CLASSES: usize = 135;
/// Default number of "thing" (foreground) categories; the rest are "stuff".
pub const DEFAULT_THING_CLASSES: usize = 80;

pub trait SegmentationBackend: Send + Sync {
    fn num_classes(&self) -> usize;

    /// `[B, 3, H, W]` images in `[-1, 1]` to `[B, C, H', W']` class probabilities.
    fn segment(&self, images: &Tensor) -> Result<Tensor>;

    /// Digest of every weight the backend holds.
    fn digest(&self) -> Result<String>;

    fn id(&self) -> String;
}

/// Convolution stack followed by a channel softmax.
///
/// Inputs are mapped to `[0, 1]`, standardized with per-channel mean/std,
/// optionally average-pooled, then run through the stack.
#[derive(Debug, Clone)]
pub struct ConvSegBackend {
    stack: ConvStack,
    pool: usize,
    mean: [f64; 3],
    std: [f64; 3],
    id: String,
}

/// Evenly spread colors in `[-1, 1]^3`, one per class.
pub fn class_palette(num_classes: usize) -> Vec<[f64; 3]> {
    let levels = (1..).find(|n: &usize| n * n * n >= num_classes).unwrap_or(1).max(2);
    let step = 2.0 / (levels - 1) as f64;
    let mut out = Vec::with_capacity(num_classes);
    'outer: for r in 0..levels {
        for g in 0..levels {
            for b in 0..levels {
                if out.len() == num_classes {
                    break 'outer;
                }
                out.push([-1.0 + r as f64 * step, -1.0 + g as f64 * step, -1.0 + b as f64 * step]);
            }
        }
    }
    out
}

impl ConvSegBackend {
    /// Nearest-prototype soft classifier: logits `-(‖x − p_c‖²) / τ` up to a
    /// per-pixel constant, realised as a 1×1 convolution.
    pub fn palette(num_classes: usize, temperature: f64, pool: usize, dtype: DType) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("segmentation needs at least 2 classes".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        let protos = class_palette(num_classes);
        let weight: Vec<f64> = protos.iter().flat_map(|p| p.map(|v| 2.0 * v / temperature)).collect();
        let bias: Vec<f64> = protos.iter().map(|p| -p.iter().map(|v| v * v).sum::<f64>() / temperature).collect();
        let weight = Tensor::from_vec(weight, (num_classes, 3, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let bias = Tensor::from_vec(bias, num_classes, &Device::Cpu)?.to_dtype(dtype)?;
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "segmentation".into());
        meta.insert("pool".into(), pool.max(1).to_string());
        meta.insert("mean".into(), "0.5,0.5,0.5".into());
        meta.insert("std".into(), "0.5,0.5,0.5".into());
        Ok(Self {
            stack: ConvStack::new(vec![Conv2d::from_tensors(weight, Some(bias), 1, 0)?], meta),
            pool: pool.max(1),
            mean: [0.5; 3],
            std: [0.5; 3],
            id: format!("palette-{num_classes}-t{temperature}-p{}", pool.max(1)),
        })
    }

    /// Loads a conv-stack segmentation network from a safetensors file.
    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let stack = ConvStack::load(path, dtype)?;
        let meta = stack.metadata().clone();
        if meta.get("kind").map(String::as_str) != Some("segmentation") {
            return Err(Error::Backend(format!("{} is not a segmentation network", path.display())));
        }
        let triple = |key: &str, default: f64| -> Result<[f64; 3]> {
            match meta.get(key) {
                None => Ok([default; 3]),
                Some(s) => {
                    let v: Vec<f64> = s
                        .split(',')
                        .map(|x| x.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Backend(format!("bad {key} metadata {s:?}")))?;
                    v.try_into().map_err(|_| Error::Backend(format!("{key} needs 3 values")))
                }
            }
        };
        let pool = meta.get("pool").map(|p| p.parse::<usize>()).transpose().map_err(|_| {
            Error::Backend("bad pool metadata".into())
        })?;
        let first_in = stack.layers()[0].in_channels();
        if first_in != 3 {
            return Err(Error::Backend(format!("segmentation input must have 3 channels, got {first_in}")));
        }
        Ok(Self {
            mean: triple("mean", 0.5)?,
            std: triple("std", 0.5)?,
            pool: pool.unwrap_or(1).max(1),
            id: format!("file:{}", path.display()),
            stack,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.stack.save(path)
    }

    fn normalize(&self, images: &Tensor) -> Result<Tensor> {
        let dev = images.device();
        let scale: Vec<f64> = self.std.iter().map(|s| 0.5 / s).collect();
        let shift: Vec<f64> = self.mean.iter().zip(&self.std).map(|(m, s)| (0.5 - m) / s).collect();
        let scale = Tensor::from_vec(scale, (1, 3, 1, 1), dev)?.to_dtype(images.dtype())?;
        let shift = Tensor::from_vec(shift, (1, 3, 1, 1), dev)?.to_dtype(images.dtype())?;
        Ok(images.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

impl SegmentationBackend for ConvSegBackend {
    fn num_classes(&self) -> usize {
        self.stack.out_channels().unwrap_or(0)
    }

    fn segment(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Dimension(format!("segmentation expects 3 channels, got {c}")));
        }
        let mut x = self.normalize(images)?;
        if self.pool > 1 {
            if h % self.pool != 0 || w % self.pool != 0 {
                return Err(Error::Dimension(format!("image {h}x{w} not divisible by pool {}", self.pool)));
            }
            x = x.avg_pool2d(self.pool)?;
        }
        nn::softmax_channels(&self.stack.forward(&x)?)
    }

    fn digest(&self) -> Result<String> {
        self.stack.digest()
    }

    fn id(&self) -> String {
        self.id.clone()
    }
}

/// Resolves a backend spec: `mock` builds the palette classifier, anything else
/// is a weights file. Failures surface here, before training starts.
pub fn load_backend(
    spec: &str,
    num_classes: usize,
    temperature: f64,
    dtype: DType,
) -> Result<Box<dyn SegmentationBackend>> {
    let backend = if spec == "mock" {
        ConvSegBackend::palette(num_classes, temperature, 1, dtype)?
    } else {
        let path = Path::new(spec);
        if !path.is_file() {
            return Err(Error::Backend(format!("segmentation weights not found: {spec}")));
        }
        ConvSegBackend::load(path, dtype)?
    };
    if backend.num_classes() != num_classes {
        return Err(Error::Config(format!(
            "backend produces {} classes, config expects {num_classes}",
            backend.num_classes()
        )));
    }
    Ok(Box::new(backend))
}

fn check_simplex(probs: &Tensor, tol: f64) -> Result<()> {
    let p = probs.to_dtype(DType::F64)?;
    let min = p.flatten_all()?.min(0)?.to_scalar::<f64>()?;
    if min < -tol {
        return Err(Error::Param(format!("negative probability {min}")));
    }
    let sums = p.sum(1)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(s) = sums.iter().find(|s| (*s - 1.0).abs() > tol) {
        return Err(Error::Param(format!("class probabilities sum to {s}, expected 1")));
    }
    Ok(())
}

/// `[B, C, H, W]` per-pixel class probabilities.
#[derive(Debug, Clone)]
pub struct SoftSegMap {
    probs: Tensor,
}

impl SoftSegMap {
    pub fn new(probs: Tensor) -> Result<Self> {
        probs.dims4()?;
        check_simplex(&probs, 1e-5)?;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.dim(1).unwrap_or(0)
    }
}

/// `[B, 2, H, W]` foreground/background probabilities; channel 0 is foreground.
#[derive(Debug, Clone)]
pub struct BinarySegMap {
    probs: Tensor,
}

impl BinarySegMap {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.dims4()?.1 != 2 {
            return Err(Error::Dimension("binary map needs 2 channels".into()));
        }
        check_simplex(&probs, 1e-5)?;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }
}

/// Which classes count as foreground; all others are background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FgBgPartition {
    num_classes: usize,
    fg: BTreeSet<usize>,
}

impl FgBgPartition {
    pub fn new(num_classes: usize, fg: BTreeSet<usize>) -> Result<Self> {
        if let Some(bad) = fg.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Config(format!("foreground class {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { num_classes, fg })
    }

    /// Thing categories first, stuff after: `[0, things)` is foreground.
    pub fn thing_stuff(num_classes: usize, things: usize) -> Result<Self> {
        Self::new(num_classes, (0..things.min(num_classes)).collect())
    }

    pub fn default_for(num_classes: usize) -> Result<Self> {
        let things = if num_classes > DEFAULT_THING_CLASSES { DEFAULT_THING_CLASSES } else { num_classes / 2 };
        Self::thing_stuff(num_classes, things)
    }

    /// Parses `class_index FG|BG` lines; every class must appear exactly once.
    pub fn parse(text: &str, num_classes: usize) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut fg = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(idx), Some(kind), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Config(format!("partition line {}: expected `index FG|BG`", lineno + 1)));
            };
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Config(format!("partition line {}: bad index {idx:?}", lineno + 1)))?;
            if idx >= num_classes {
                return Err(Error::Config(format!("partition class {idx} out of range for {num_classes} classes")));
            }
            if !seen.insert(idx) {
                return Err(Error::Config(format!("partition lists class {idx} twice")));
            }
            match kind.to_ascii_uppercase().as_str() {
                "FG" => {
                    fg.insert(idx);
                }
                "BG" => {}
                other => return Err(Error::Config(format!("partition line {}: unknown group {other:?}", lineno + 1))),
            }
        }
        if seen.len() != num_classes {
            let missing: Vec<usize> = (0..num_classes).filter(|c| !seen.contains(c)).take(10).collect();
            return Err(Error::Config(format!("partition does not cover all classes; missing e.g. {missing:?}")));
        }
        Self::new(num_classes, fg)
    }

    pub fn load(path: &Path, num_classes: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, num_classes)
    }

    pub fn to_text(&self) -> String {
        (0..self.num_classes)
            .map(|c| format!("{c} {}\n", if self.fg.contains(&c) { "FG" } else { "BG" }))
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_fg(&self, class: usize) -> bool {
        self.fg.contains(&class)
    }

    pub fn fg_classes(&self) -> &BTreeSet<usize> {
        &self.fg
    }

    pub fn bg_classes(&self) -> BTreeSet<usize> {
        (0..self.num_classes).filter(|c| !self.fg.contains(c)).collect()
    }

    /// `[2, C, 1, 1]` 0/1 kernel: row 0 selects foreground classes, row 1 background.
    pub fn kernel(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let c = self.num_classes;
        let mut w = vec![0.0f64; 2 * c];
        for k in 0..c {
            if self.fg.contains(&k) {
                w[k] = 1.0;
            } else {
                w[c + k] = 1.0;
            }
        }
        Ok(Tensor::from_vec(w, (2, c, 1, 1), device)?.to_dtype(dtype)?)
    }
}

/// Sums class probabilities into (foreground, background); differentiable in `probs`.
pub fn collapse_tensor(probs: &Tensor, partition: &FgBgPartition) -> Result<Tensor> {
    let c = probs.dim(1)?;
    if c != partition.num_classes() {
        return Err(Error::Config(format!(
            "partition covers {} classes but map has {c}",
            partition.num_classes()
        )));
    }
    let k = partition.kernel(probs.dtype(), probs.device())?;
    Ok(probs.conv2d(&k, 0, 1, 1, 1)?)
}

pub fn collapse_binary(map: &SoftSegMap, partition: &FgBgPartition) -> Result<BinarySegMap> {
    Ok(BinarySegMap { probs: collapse_tensor(map.probs(), partition)? })
}

/// Hard class labels for one image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

/// Per-pixel argmax of each image in the batch; ties go to the lowest class index.
pub fn hard_labels(map: &SoftSegMap) -> Result<Vec<LabelMap>> {
    let (b, c, h, w) = map.probs.dims4()?;
    let flat = map.probs.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut out = Vec::with_capacity(b);
    for n in 0..b {
        let base = n * c * h * w;
        let labels = (0..h * w)
            .map(|px| {
                let mut best = 0;
                let mut best_v = flat[base + px];
                for k in 1..c {
                    let v = flat[base + k * h * w + px];
                    if v > best_v {
                        best = k;
                        best_v = v;
                    }
                }
                best
            })
            .collect();
        out.push(LabelMap { height: h, width: w, labels });
    }
    Ok(out)
}

/// Renders a label map with each class drawn in its palette color.
pub fn render_labels(labels: &LabelMap, num_classes: usize) -> image::RgbImage {
    let palette = class_palette(num_classes);
    image::RgbImage::from_fn(labels.width as u32, labels.height as u32, |x, y| {
        let p = palette[labels.labels[y as usize * labels.width + x as usize].min(num_classes - 1)];
        image::Rgb(p.map(|v| ((v + 1.0) * 127.5).round() as u8))
    })
}
