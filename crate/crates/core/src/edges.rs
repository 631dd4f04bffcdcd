//! Sketch synthesis from color photographs.
//!
//! XDoG is built in and deterministic. HED runs as an external program with its
//! own pretrained weights; its edge-probability output is converted to the
//! dark-strokes-on-white convention used everywhere else.

use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;

use crate::config::SketchImage;
use crate::error::{Error, Result};
use crate::image_io;

/// A single-channel raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Luminance with weights 0.299 / 0.587 / 0.114, in `[0, 1]`.
pub fn luminance(rgb: &image::RgbImage) -> Plane {
    let data = rgb
        .pixels()
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
        .collect();
    Plane { height: rgb.height() as usize, width: rgb.width() as usize, data }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XdogParams {
    pub sigma: f64,
    pub k: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub phi: f64,
}

impl Default for XdogParams {
    fn default() -> Self {
        Self { sigma: 0.8, k: 1.6, gamma: 0.98, epsilon: -0.1, phi: 200.0 }
    }
}

impl XdogParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Param(format!("xdog sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.k > 1.0) {
            return Err(Error::Param(format!("xdog k must be > 1, got {}", self.k)));
        }
        if !(self.phi > 0.0) {
            return Err(Error::Param(format!("xdog phi must be > 0, got {}", self.phi)));
        }
        if !self.gamma.is_finite() || !self.epsilon.is_finite() {
            return Err(Error::Param("xdog gamma and epsilon must be finite".into()));
        }
        Ok(())
    }
}

/// Half-sample symmetric extension (`d c b a | a b c d | d c b a`), applied periodically.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Sampled, unit-mass Gaussian of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian convolution with symmetric boundary reflection.
pub fn gaussian_blur(img: &Plane, sigma: f64) -> Result<Plane> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Param(format!("blur sigma must be > 0, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * row[reflect(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    Plane::new(h, w, out)
}

/// Difference of Gaussians `blur(σ) − γ·blur(kσ)`.
pub fn difference_of_gaussians(gray: &Plane, p: &XdogParams) -> Result<Plane> {
    let narrow = gaussian_blur(gray, p.sigma)?;
    let wide = gaussian_blur(gray, p.k * p.sigma)?;
    let data = narrow.data.iter().zip(&wide.data).map(|(a, b)| a - p.gamma * b).collect();
    Plane::new(gray.height, gray.width, data)
}

/// Soft-thresholded difference of Gaussians.
pub fn xdog(gray: &Plane, p: &XdogParams) -> Result<SketchImage> {
    p.validate()?;
    if let Some(v) = gray.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Param(format!("xdog input value {v} outside [0, 1]")));
    }
    let dog = difference_of_gaussians(gray, p)?;
    let pixels = dog
        .data
        .iter()
        .map(|&d| {
            let v = if d >= p.epsilon { 1.0 } else { 1.0 + (p.phi * (d - p.epsilon)).tanh() };
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    SketchImage::new(gray.height, gray.width, pixels)
}

/// External HED edge detector.
///
/// Invoked as `<command> --weights <weights> --input <image> --output <png>`; the
/// output is read as an edge-probability map (bright edges on black).
#[derive(Debug, Clone, PartialEq)]
pub struct HedConfig {
    pub command: PathBuf,
    pub weights: PathBuf,
    /// Map probabilities `p` to `1 - p` so strokes come out dark.
    pub invert: bool,
    /// Optional binarization applied after inversion.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EdgeBackend {
    Xdog(XdogParams),
    Hed(HedConfig),
}

impl EdgeBackend {
    /// Builds a backend from its name and a `key = value` parameter text.
    pub fn from_params(backend: &str, params: &str) -> Result<Self> {
        let mut xdog = XdogParams::default();
        let mut command = None;
        let mut weights = None;
        let mut invert = true;
        let mut threshold = None;
        for (lineno, raw) in params.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("params line {}: expected `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || -> Result<f64> {
                v.parse().map_err(|_| Error::Config(format!("invalid number {v:?} for {k}")))
            };
            match k {
                "sigma" => xdog.sigma = num()?,
                "k" => xdog.k = num()?,
                "gamma" => xdog.gamma = num()?,
                "epsilon" => xdog.epsilon = num()?,
                "phi" => xdog.phi = num()?,
                "hed_command" => command = Some(PathBuf::from(v)),
                "hed_weights" => weights = Some(PathBuf::from(v)),
                "hed_invert" => invert = matches!(v, "true" | "1" | "yes"),
                "hed_threshold" => threshold = Some(num()?),
                _ => return Err(Error::Config(format!("unknown edge parameter {k:?}"))),
            }
        }
        match backend {
            "xdog" => {
                xdog.validate()?;
                Ok(EdgeBackend::Xdog(xdog))
            }
            "hed" | "hed-external" => {
                let command = command.ok_or_else(|| Error::Config("hed backend needs hed_command".into()))?;
                let weights = weights.ok_or_else(|| Error::Config("hed backend needs hed_weights".into()))?;
                if !weights.is_file() {
                    return Err(Error::Backend(format!("hed weights not found: {}", weights.display())));
                }
                Ok(EdgeBackend::Hed(HedConfig { command, weights, invert, threshold }))
            }
            other => Err(Error::Config(format!("unknown edge backend {other:?}; expected xdog|hed"))),
        }
    }

    fn sketch_file(&self, src: &Path, dst: &Path) -> Result<()> {
        match self {
            EdgeBackend::Xdog(p) => {
                let rgb = image_io::open(src)?.to_rgb8();
                let sketch = xdog(&luminance(&rgb), p)?;
                let gray = image_io::gray_from_unit(sketch.pixels(), sketch.height(), sketch.width());
                image_io::save_png(&gray, dst)
            }
            EdgeBackend::Hed(cfg) => {
                let raw = dst.with_extension("hed.png");
                let status = Command::new(&cfg.command)
                    .arg("--weights")
                    .arg(&cfg.weights)
                    .arg("--input")
                    .arg(src)
                    .arg("--output")
                    .arg(&raw)
                    .status()
                    .map_err(|e| Error::Backend(format!("failed to run {}: {e}", cfg.command.display())))?;
                if !status.success() {
                    return Err(Error::Backend(format!("hed exited with {status} on {}", src.display())));
                }
                let probs = image_io::open(&raw)?.to_luma8();
                let _ = std::fs::remove_file(&raw);
                let px: Vec<f32> = probs
                    .as_raw()
                    .iter()
                    .map(|&v| {
                        let p = v as f64 / 255.0;
                        let s = if cfg.invert { 1.0 - p } else { p };
                        let s = match cfg.threshold {
                            Some(t) => {
                                if s >= t {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            None => s,
                        };
                        s as f32
                    })
                    .collect();
                let gray = image_io::gray_from_unit(&px, probs.height() as usize, probs.width() as usize);
                image_io::save_png(&gray, dst)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractReport {
    pub written: usize,
    pub warnings: Vec<String>,
}

/// Writes one 8-bit single-channel PNG sketch per decodable image in `src_dir`,
/// keeping the file stem. Undecodable files are skipped with a warning.
pub fn extract_sketch_dir(src_dir: &Path, dst_dir: &Path, backend: &EdgeBackend) -> Result<ExtractReport> {
    let files = image_io::list_images(src_dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDir(src_dir.to_path_buf()));
    }
    std::fs::create_dir_all(dst_dir).map_err(|e| Error::io(dst_dir, e))?;
    let outcomes: Vec<std::result::Result<(), String>> = files
        .par_iter()
        .map(|src| {
            let dst = dst_dir.join(format!("{}.png", image_io::stem(src)));
            backend
                .sketch_file(src, &dst)
                .map_err(|e| format!("skipped {}: {e}", src.display()))
        })
        .collect();
    let mut report = ExtractReport::default();
    for outcome in outcomes {
        match outcome {
            Ok(()) => report.written += 1,
            Err(w) => {
                log::warn!("{w}");
                report.warnings.push(w);
            }
        }
    }
    Ok(report)
}
