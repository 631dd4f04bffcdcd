//! FID: Gaussian fits of image features and the Fréchet distance between them,
//! plus sample-grid rendering for qualitative comparison.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gan::Generator;
use crate::image_io::{self, list_images};
use crate::nn::{resize_bilinear, rng_for, Conv2d, ConvStack};

const SYMMETRY_TOL: f64 = 1e-8;
const EIGEN_CLIP: f64 = 1e-10;

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension(format!("mean has {d} entries, covariance is {}x{}", cov.nrows(), cov.ncols())));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > SYMMETRY_TOL * cov.amax().max(1.0) {
            return Err(Error::Param(format!("covariance not symmetric (max deviation {asym:e})")));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased (n−1) covariance of the rows of `features`.
pub fn fit_gaussian(features: &DMatrix<f64>) -> Result<GaussianStats> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mean = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianStats::new(mean, cov)
}

fn eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let diag = m.diagonal();
    let (lo, hi) = (diag.min(), diag.max());
    SymmetricEigen::try_new(m, f64::EPSILON, 10_000).ok_or_else(|| {
        Error::Numerical(format!(
            "eigendecomposition of {what} did not converge (diagonal range [{lo:e}, {hi:e}])"
        ))
    })
}

/// Square root of a symmetric positive semidefinite matrix; eigenvalues below the clip become 0.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = eigen(m.clone(), "covariance")?;
    let roots = e.eigenvalues.map(|l| if l < EIGEN_CLIP { 0.0 } else { l.sqrt() });
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose())
}

/// `Tr((Σ_a Σ_b)^{1/2})`, via the symmetric similar matrix `Σ_a^{1/2} Σ_b Σ_a^{1/2}`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ra = psd_sqrt(a)?;
    let m = &ra * b * &ra;
    let m = (&m + m.transpose()) * 0.5;
    let e = eigen(m, "covariance product")?;
    Ok(e.eigenvalues.iter().map(|&l| if l < EIGEN_CLIP { 0.0 } else { l.sqrt() }).sum())
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`, clamped at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let covmean = trace_sqrt_product(&a.cov, &b.cov)?;
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * covmean;
    Ok(d.max(0.0))
}

/// Maps a batch of `[-1, 1]` color images to one feature vector per image.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> String;

    fn dim(&self) -> usize;

    fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>>;
}

/// Convolution stack with ReLUs, global average pooled. Input is resized to a
/// fixed side first so any image size works.
pub struct ConvFeatureExtractor {
    stack: ConvStack,
    input_size: usize,
    id: String,
}

impl ConvFeatureExtractor {
    /// Fixed random weights (He-normal, zero bias) drawn from `seed`.
    pub fn random(seed: u64, dim: usize, input_size: usize) -> Result<Self> {
        let dev = Device::Cpu;
        let mut rng = rng_for(seed, "extractor");
        let widths = [3, 16, 32, 64, dim];
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            let (cin, cout) = (w[0], w[1]);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let values: Vec<f32> = (0..cout * cin * 9).map(|_| normal.sample(&mut rng) as f32).collect();
            let weight = Tensor::from_vec(values, (cout, cin, 3, 3), &dev)?;
            let bias = Tensor::zeros(cout, DType::F32, &dev)?;
            layers.push(Conv2d::from_tensors(weight, Some(bias), 2, 1)?);
        }
        let stack = ConvStack::new(layers, Default::default());
        Ok(Self { stack, input_size, id: format!("random:{seed}:{dim}") })
    }

    pub fn load(path: &Path, input_size: usize) -> Result<Self> {
        let stack = ConvStack::load(path, DType::F32)?;
        let id = format!("file:{}", stack.digest()?);
        Ok(Self { stack, input_size, id })
    }
}

impl FeatureExtractor for ConvFeatureExtractor {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn dim(&self) -> usize {
        self.stack.out_channels().unwrap_or(0)
    }

    fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let x = images.to_dtype(DType::F32)?;
        let (_, _, h, w) = x.dims4()?;
        let x = if h == self.input_size && w == self.input_size {
            x
        } else {
            resize_bilinear(&x, self.input_size, self.input_size)?
        };
        let f = self.stack.forward(&x)?.relu()?;
        let pooled = f.mean(3)?.mean(2)?.to_dtype(DType::F64)?;
        Ok(pooled.to_vec2::<f64>()?)
    }
}

/// `random[:seed]` for the seeded random extractor, otherwise a weights file.
pub fn load_extractor(spec: &str) -> Result<Box<dyn FeatureExtractor>> {
    if let Some(rest) = spec.strip_prefix("random") {
        let seed = match rest.strip_prefix(':') {
            Some(s) => s.parse().map_err(|_| Error::Config(format!("invalid extractor seed in {spec:?}")))?,
            None if rest.is_empty() => 0,
            None => return Err(Error::Config(format!("unknown extractor {spec:?}"))),
        };
        return Ok(Box::new(ConvFeatureExtractor::random(seed, 64, 64)?));
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(Error::Backend(format!("extractor weights not found: {spec}")));
    }
    Ok(Box::new(ConvFeatureExtractor::load(path, 299)?))
}

#[derive(Debug, Clone, Serialize)]
pub struct SideReport {
    pub dir: PathBuf,
    pub n: usize,
    pub skipped: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FidReport {
    pub real: SideReport,
    pub fake: SideReport,
    pub fid: f64,
    pub extractor: String,
}

const FEATURE_BATCH: usize = 16;
const FEATURE_IMAGE_SIZE: usize = 128;

/// Features of every decodable image in `dir`, in sorted path order.
pub fn extract_dir(dir: &Path, extractor: &dyn FeatureExtractor) -> Result<(DMatrix<f64>, SideReport)> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDir(dir.to_path_buf()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(files.len());
    let mut skipped = Vec::new();
    for chunk in files.chunks(FEATURE_BATCH) {
        let mut tensors = Vec::new();
        for f in chunk {
            match image_io::load_color(f, FEATURE_IMAGE_SIZE) {
                Ok(img) => tensors.push(img.to_tensor(&Device::Cpu, DType::F32)?),
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    skipped.push(f.clone());
                }
            }
        }
        if !tensors.is_empty() {
            rows.extend(extractor.features(&Tensor::cat(&tensors, 0)?)?);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyDir(dir.to_path_buf()));
    }
    let d = extractor.dim();
    let m = DMatrix::from_row_iterator(rows.len(), d, rows.iter().flatten().copied());
    let report = SideReport { dir: dir.to_path_buf(), n: rows.len(), skipped };
    Ok((m, report))
}

pub fn compute_fid(real_dir: &Path, fake_dir: &Path, extractor: &dyn FeatureExtractor) -> Result<FidReport> {
    let (fa, ra) = extract_dir(real_dir, extractor)?;
    let (fb, rb) = extract_dir(fake_dir, extractor)?;
    let fid = frechet_distance(&fit_gaussian(&fa)?, &fit_gaussian(&fb)?)?;
    Ok(FidReport { real: ra, fake: rb, fid, extractor: extractor.id() })
}

/// Renders each sketch next to the generator's output; pairs fill a grid of
/// `columns` pairs per row, row-major.
pub fn emit_sample_grid(
    generator: &Generator,
    sketches: &[PathBuf],
    out: &Path,
    columns: usize,
    image_size: usize,
    dtype: DType,
) -> Result<(usize, usize)> {
    if sketches.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    if columns == 0 {
        return Err(Error::Param("columns must be at least 1".into()));
    }
    let rows = sketches.len().div_ceil(columns);
    let cols = columns.min(sketches.len());
    let s = image_size as u32;
    let mut canvas = image::RgbImage::from_pixel(cols as u32 * 2 * s, rows as u32 * s, image::Rgb([255, 255, 255]));
    for (i, path) in sketches.iter().enumerate() {
        let sketch = image_io::load_sketch(path, image_size)?;
        let input = sketch.to_tensor(&Device::Cpu, dtype)?.affine(2.0, -1.0)?;
        let output = crate::config::ColorImage::from_tensor(&generator.forward(&input)?.to_dtype(DType::F32)?)?;
        let (r, c) = ((i / columns) as u32, (i % columns) as u32);
        image::imageops::replace(&mut canvas, &image_io::sketch_to_rgb(&sketch), (2 * c * s) as i64, (r * s) as i64);
        image::imageops::replace(&mut canvas, &image_io::color_to_rgb(&output), ((2 * c + 1) * s) as i64, (r * s) as i64);
    }
    image_io::save_png(&canvas, out)?;
    Ok((rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(mean: &[f64], cov_diag: &[f64]) -> GaussianStats {
        GaussianStats::new(DVector::from_column_slice(mean), DMatrix::from_diagonal(&DVector::from_column_slice(cov_diag)))
            .unwrap()
    }

    #[test]
    fn fit_examples() {
        let same = DMatrix::from_row_slice(4, 2, &[1.0, -2.0, 1.0, -2.0, 1.0, -2.0, 1.0, -2.0]);
        let g = fit_gaussian(&same).unwrap();
        assert_eq!(g.mean.as_slice(), &[1.0, -2.0]);
        assert!(g.cov.iter().all(|&v| v == 0.0));

        let two = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 3.0, -2.0, 4.0]);
        let g = fit_gaussian(&two).unwrap();
        let p = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let q = DVector::from_column_slice(&[3.0, -2.0, 4.0]);
        let diff = &p - &q;
        let expected = &diff * diff.transpose() / 2.0;
        assert!((g.mean.clone() - (&p + &q) / 2.0).amax() < 1e-12);
        assert!((g.cov - expected).amax() < 1e-12);

        let one = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert!(matches!(fit_gaussian(&one), Err(Error::InsufficientSamples { needed: 2, got: 1 })));
    }

    #[test]
    fn fit_recovers_known_gaussian() {
        let mut rng = rng_for(3, "fit");
        let n = 10_000;
        let std = [1.0, 2.0, 0.5];
        let mean = [0.5, -1.0, 3.0];
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            for k in 0..3 {
                data.push(mean[k] + std[k] * Normal::new(0.0, 1.0).unwrap().sample(&mut rng));
            }
        }
        let g = fit_gaussian(&DMatrix::from_row_slice(n, 3, &data)).unwrap();
        for k in 0..3 {
            assert!((g.mean[k] - mean[k]).abs() < 0.05 * std[k].max(1.0));
            assert!((g.cov[(k, k)] - std[k] * std[k]).abs() < 0.05 * std[k] * std[k]);
        }
    }

    #[test]
    fn frechet_examples() {
        let a = stats(&[0.0, 0.0], &[1.0, 1.0]);
        let b = stats(&[3.0, 4.0], &[1.0, 1.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 25.0).abs() < 1e-9);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-12);
        let c = stats(&[0.0], &[1.0]);
        assert!(matches!(frechet_distance(&a, &c), Err(Error::Dimension(_))));
        assert!(GaussianStats::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
    }

    #[test]
    fn sample_grid_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = crate::nn::ParamStore::new(DType::F32, Device::Cpu);
        let g = Generator::Unet(
            crate::gan::UnetGenerator::new(&mut store, 1, 3, 2, 2, &mut rng_for(0, "g")).unwrap(),
        );
        let mut paths = Vec::new();
        for i in 0..4 {
            let p = dir.path().join(format!("s{i}.png"));
            image_io::save_png(&image::GrayImage::from_pixel(8, 8, image::Luma([40 * i as u8])), &p).unwrap();
            paths.push(p);
        }
        let out = dir.path().join("grid.png");
        assert_eq!(emit_sample_grid(&g, &paths, &out, 2, 8, DType::F32).unwrap(), (2, 2));
        let img = image_io::open(&out).unwrap();
        assert_eq!((img.width(), img.height()), (32, 16));
        let first = std::fs::read(&out).unwrap();
        emit_sample_grid(&g, &paths, &out, 2, 8, DType::F32).unwrap();
        assert_eq!(first, std::fs::read(&out).unwrap());
        assert!(emit_sample_grid(&g, &[], &out, 2, 8, DType::F32).is_err());
    }

    fn random_psd(d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_for(seed, "psd");
        let n = Normal::new(0.0, 1.0).unwrap();
        let a = DMatrix::from_fn(d, d + 2, |_, _| n.sample(&mut rng));
        &a * a.transpose() / (d as f64)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn frechet_identity_symmetry_nonnegativity(d in 1usize..8, s1 in 0u64..1000, s2 in 0u64..1000) {
            let mut rng = rng_for(s1 ^ (s2 << 20), "mean");
            let n = Normal::new(0.0, 1.0).unwrap();
            let a = GaussianStats::new(DVector::from_fn(d, |_, _| n.sample(&mut rng)), random_psd(d, s1)).unwrap();
            let b = GaussianStats::new(DVector::from_fn(d, |_, _| n.sample(&mut rng)), random_psd(d, s2 + 5000)).unwrap();
            prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-6 * ab.max(1.0));
        }
    }
}
