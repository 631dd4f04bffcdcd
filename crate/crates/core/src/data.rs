//! Dataset curation, on-disk layout and batch loading.
//!
//! Layout: `{root}/{trainA,trainB,testA,testB}`, `A` holding sketches and `B`
//! color images. Paired datasets additionally require identical file stems in
//! `A` and `B` of each split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ColorImage, Scheme, SketchImage};
use crate::edges::{luminance, xdog, XdogParams};
use crate::error::{Error, Result};
use crate::gan::Batch;
use crate::image_io::{self, list_images, stem};
use crate::nn::rng_for;
use crate::segmentation::class_palette;

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Debug, Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Parsed instance annotations, reduced to what curation needs.
#[derive(Debug, Clone)]
pub struct CocoIndex {
    categories: BTreeMap<String, BTreeSet<u64>>,
    instances: Vec<(u64, u64)>,
    file_names: BTreeMap<u64, String>,
}

impl CocoIndex {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let file: CocoFile =
            serde_json::from_str(text).map_err(|source| Error::Parse { path: origin.to_path_buf(), source })?;
        let mut categories: BTreeMap<String, BTreeSet<u64>> = BTreeMap::new();
        for c in file.categories {
            categories.entry(c.name).or_default().insert(c.id);
        }
        Ok(Self {
            categories,
            instances: file.annotations.into_iter().map(|a| (a.image_id, a.category_id)).collect(),
            file_names: file.images.into_iter().map(|i| (i.id, i.file_name)).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn category_names(&self) -> Vec<&str> {
        self.categories.keys().map(String::as_str).collect()
    }

    /// Ids of every image with at least one instance of `category`, sorted and deduplicated.
    pub fn images_with(&self, category: &str) -> Result<Vec<u64>> {
        let ids = self.categories.get(category).ok_or_else(|| Error::UnknownCategory {
            name: category.to_string(),
            available: self.category_names().join(", "),
        })?;
        let set: BTreeSet<u64> =
            self.instances.iter().filter(|(_, c)| ids.contains(c)).map(|(img, _)| *img).collect();
        Ok(set.into_iter().collect())
    }

    pub fn file_name(&self, id: u64) -> Option<&str> {
        self.file_names.get(&id).map(String::as_str)
    }
}

/// Image ids in a COCO instance-annotation file containing `category_name`.
pub fn curate_coco(annotation_file: &Path, category_name: &str) -> Result<Vec<u64>> {
    CocoIndex::load(annotation_file)?.images_with(category_name)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CurationReport {
    pub selected: usize,
    pub copied: usize,
    /// Curated images whose file is absent from the image directory.
    pub missing: Vec<String>,
}

/// Copies every image containing `category` from `images_dir` into the color
/// directory of `split` under `out_root`. A COCO annotation file covers one
/// split, so train and val annotations are exported separately.
pub fn export_coco_split(
    index: &CocoIndex,
    category: &str,
    images_dir: &Path,
    out_root: &Path,
    split: Split,
) -> Result<CurationReport> {
    let ids = index.images_with(category)?;
    let dst_dir = out_root.join(split.color_dir());
    std::fs::create_dir_all(&dst_dir).map_err(|e| Error::io(&dst_dir, e))?;
    let mut report = CurationReport { selected: ids.len(), ..Default::default() };
    for id in ids {
        let name = index.file_name(id).map(str::to_string).unwrap_or_else(|| format!("{id:012}.jpg"));
        let src = images_dir.join(&name);
        if !src.is_file() {
            report.missing.push(name);
            continue;
        }
        let dst = dst_dir.join(&name);
        std::fs::copy(&src, &dst).map_err(|e| Error::io(&dst, e))?;
        report.copied += 1;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn sketch_dir(self) -> &'static str {
        match self {
            Split::Train => "trainA",
            Split::Test => "testA",
        }
    }

    pub fn color_dir(self) -> &'static str {
        match self {
            Split::Train => "trainB",
            Split::Test => "testB",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// A dataset on disk with the split sizes it is expected to have.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub root: PathBuf,
    pub scheme: Scheme,
    pub expected_train: Option<usize>,
    pub expected_test: Option<usize>,
}

/// `(name, train, test)` for the four datasets.
pub const KNOWN_DATASETS: [(&str, usize, usize); 4] =
    [("elephant", 1800, 343), ("sheep", 1300, 229), ("bedroom", 1355, 135), ("illustration", 659, 131)];

/// COCO category behind each curated dataset.
pub fn coco_category(dataset: &str) -> Option<&'static str> {
    match dataset {
        "elephant" => Some("elephant"),
        "sheep" => Some("sheep"),
        _ => None,
    }
}

impl DatasetSpec {
    /// Spec for `name`, with expected counts filled in for the known datasets.
    pub fn new(name: &str, root: impl Into<PathBuf>, scheme: Scheme) -> Self {
        let known = KNOWN_DATASETS.iter().find(|(n, _, _)| *n == name);
        Self {
            name: name.to_string(),
            root: root.into(),
            scheme,
            expected_train: known.map(|k| k.1),
            expected_test: known.map(|k| k.2),
        }
    }

    pub fn dir(&self, sub: &str) -> PathBuf {
        self.root.join(sub)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetReport {
    pub name: String,
    /// Image count per layout directory (`trainA`, `trainB`, `testA`, `testB`).
    pub counts: BTreeMap<String, usize>,
    pub violations: Vec<String>,
}

impl DatasetReport {
    pub fn count(&self, split: Split) -> usize {
        self.counts.get(split.color_dir()).copied().unwrap_or(0)
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn paired_orphans(a: &[PathBuf], b: &[PathBuf]) -> Vec<PathBuf> {
    let sa: BTreeSet<String> = a.iter().map(|p| stem(p)).collect();
    let sb: BTreeSet<String> = b.iter().map(|p| stem(p)).collect();
    a.iter()
        .filter(|p| !sb.contains(&stem(p)))
        .chain(b.iter().filter(|p| !sa.contains(&stem(p))))
        .cloned()
        .collect()
}

/// Counts every split and lists deviations from the expected layout and sizes.
/// Deviations are reported, not raised; only a missing root is an error.
pub fn validate_dataset(spec: &DatasetSpec) -> Result<DatasetReport> {
    if !spec.root.is_dir() {
        return Err(Error::Layout(format!("dataset root {} does not exist", spec.root.display())));
    }
    let mut counts = BTreeMap::new();
    let mut violations = Vec::new();
    for split in [Split::Train, Split::Test] {
        let mut files = Vec::new();
        for sub in [split.sketch_dir(), split.color_dir()] {
            let dir = spec.dir(sub);
            let listed = if dir.is_dir() {
                list_images(&dir)?
            } else {
                violations.push(format!("missing directory {sub}"));
                Vec::new()
            };
            counts.insert(sub.to_string(), listed.len());
            files.push(listed);
        }
        let expected = match split {
            Split::Train => spec.expected_train,
            Split::Test => spec.expected_test,
        };
        if let Some(n) = expected {
            for (sub, got) in [(split.sketch_dir(), files[0].len()), (split.color_dir(), files[1].len())] {
                if got != n {
                    violations.push(format!("{sub}: expected {n} images, found {got}"));
                }
            }
        }
        if files[0].is_empty() && files[1].is_empty() {
            violations.push(format!("{split} split is empty"));
        }
        if spec.scheme == Scheme::Paired {
            for orphan in paired_orphans(&files[0], &files[1]) {
                violations.push(format!("unpaired file {}", orphan.display()));
            }
        }
    }
    Ok(DatasetReport { name: spec.name.clone(), counts, violations })
}

/// One split of a validated dataset, ready to produce batches.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub split: Split,
    pub image_size: usize,
    sketches: Vec<PathBuf>,
    colors: Vec<PathBuf>,
}

impl Dataset {
    /// Lists the split and checks it; paired datasets fail on the first orphan file.
    pub fn open(spec: &DatasetSpec, split: Split, image_size: usize) -> Result<Self> {
        let list = |sub: &str| -> Result<Vec<PathBuf>> {
            let dir = spec.dir(sub);
            if !dir.is_dir() {
                return Err(Error::Layout(format!("missing directory {}", dir.display())));
            }
            let files = list_images(&dir)?;
            if files.is_empty() {
                return Err(Error::EmptyDir(dir));
            }
            Ok(files)
        };
        let sketches = list(split.sketch_dir())?;
        let colors = list(split.color_dir())?;
        if spec.scheme == Scheme::Paired {
            if let Some(orphan) = paired_orphans(&sketches, &colors).first() {
                return Err(Error::Layout(format!("no counterpart for {}", orphan.display())));
            }
        }
        Ok(Self { spec: spec.clone(), split, image_size, sketches, colors })
    }

    pub fn num_sketches(&self) -> usize {
        self.sketches.len()
    }

    pub fn num_colors(&self) -> usize {
        self.colors.len()
    }

    pub fn sketch_paths(&self) -> &[PathBuf] {
        &self.sketches
    }

    pub fn color_paths(&self) -> &[PathBuf] {
        &self.colors
    }

    /// Samples per epoch: the pair count when paired, `max(|A|, |B|)` when unpaired.
    pub fn epoch_len(&self) -> usize {
        match self.spec.scheme {
            Scheme::Paired => self.sketches.len(),
            Scheme::Unpaired => self.sketches.len().max(self.colors.len()),
        }
    }

    /// `(sketch index, color index)` for every sample of `epoch`, fixed by `seed`.
    /// Paired: one shuffled pass over the pairs. Unpaired: a shuffled pass over
    /// the sketches (cycled if shorter) against independent uniform color draws.
    pub fn epoch_order(&self, seed: u64, epoch: usize, shuffle: bool) -> Vec<(usize, usize)> {
        let mut rng = rng_for(seed, &format!("loader.{}.epoch{epoch}", self.split));
        let n = self.epoch_len();
        let mut perm: Vec<usize> = (0..self.sketches.len()).collect();
        if shuffle {
            perm.shuffle(&mut rng);
        }
        match self.spec.scheme {
            Scheme::Paired => perm.into_iter().map(|i| (i, i)).collect(),
            Scheme::Unpaired => (0..n)
                .map(|k| (perm[k % perm.len()], rng.random_range(0..self.colors.len())))
                .collect(),
        }
    }

    /// Decodes the given samples into a batch.
    pub fn load_batch(&self, indices: &[(usize, usize)], dtype: DType) -> Result<Batch> {
        let mut sketches = Vec::with_capacity(indices.len());
        let mut colors = Vec::with_capacity(indices.len());
        let mut sketch_stems = Vec::with_capacity(indices.len());
        let mut color_stems = Vec::with_capacity(indices.len());
        for &(a, b) in indices {
            let sp = self.sketches.get(a).ok_or_else(|| Error::Param(format!("sketch index {a} out of range")))?;
            let cp = self.colors.get(b).ok_or_else(|| Error::Param(format!("color index {b} out of range")))?;
            sketches.push(image_io::load_sketch(sp, self.image_size)?);
            colors.push(image_io::load_color(cp, self.image_size)?);
            sketch_stems.push(stem(sp));
            color_stems.push(stem(cp));
        }
        Batch::new(&sketches, &colors, sketch_stems, color_stems, dtype)
    }

    pub fn load_color(&self, index: usize) -> Result<ColorImage> {
        image_io::load_color(&self.colors[index], self.image_size)
    }

    pub fn load_sketch(&self, index: usize) -> Result<SketchImage> {
        image_io::load_sketch(&self.sketches[index], self.image_size)
    }

    /// Batches of `batch_size` over `order`, decoded on a background thread and
    /// handed over through a bounded queue, in order.
    pub fn prefetch(
        &self,
        order: Vec<(usize, usize)>,
        batch_size: usize,
        dtype: DType,
    ) -> mpsc::Receiver<Result<Batch>> {
        let (tx, rx) = mpsc::sync_channel(2);
        let me = self.clone();
        let size = batch_size.max(1);
        thread::spawn(move || {
            for chunk in order.chunks(size) {
                if tx.send(me.load_batch(chunk, dtype)).is_err() {
                    break;
                }
            }
        });
        rx
    }
}

fn write_rgb(path: &Path, pixels: &[[u8; 3]], size: usize) -> Result<()> {
    let raw: Vec<u8> = pixels.iter().flatten().copied().collect();
    let img = image::RgbImage::from_raw(size as u32, size as u32, raw).expect("size*size pixels");
    image_io::save_png(&img, path)
}

/// Procedural color image: palette background with a few palette-colored shapes.
pub fn toy_color_image(size: usize, seed: u64, index: usize) -> image::RgbImage {
    let palette = class_palette(27);
    let mut rng = rng_for(seed, &format!("toy.{index}"));
    let to_u8 = |c: [f64; 3]| c.map(|v| ((v + 1.0) * 127.5).round() as u8);
    let bg = to_u8(palette[rng.random_range(0..palette.len())]);
    let mut px = vec![bg; size * size];
    for _ in 0..rng.random_range(1..=3) {
        let color = to_u8(palette[rng.random_range(0..palette.len())]);
        let cx = rng.random_range(0.2..0.8) * size as f64;
        let cy = rng.random_range(0.2..0.8) * size as f64;
        let r = rng.random_range(0.12..0.3) * size as f64;
        let disc: bool = rng.random();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disc { dx * dx + dy * dy <= r * r } else { dx.abs() <= r && dy.abs() <= r };
                if inside {
                    px[y * size + x] = color;
                }
            }
        }
    }
    let raw: Vec<u8> = px.into_iter().flatten().collect();
    image::RgbImage::from_raw(size as u32, size as u32, raw).expect("size*size pixels")
}

/// XDoG settings that draw the flat-colored shape boundaries of the toy images.
pub fn toy_xdog_params() -> XdogParams {
    XdogParams { epsilon: -0.02, ..XdogParams::default() }
}

/// Writes a small paired dataset of procedural images with XDoG sketches.
pub fn write_toy_dataset(root: &Path, n_train: usize, n_test: usize, size: usize, seed: u64) -> Result<DatasetSpec> {
    let params = toy_xdog_params();
    for (split, n, offset) in [(Split::Train, n_train, 0), (Split::Test, n_test, n_train)] {
        for i in 0..n {
            let rgb = toy_color_image(size, seed, offset + i);
            let name = format!("{:05}.png", offset + i);
            image_io::save_png(&rgb, &root.join(split.color_dir()).join(&name))?;
            let sketch = xdog(&luminance(&rgb), &params)?;
            let gray = image_io::gray_from_unit(sketch.pixels(), size, size);
            image_io::save_png(&gray, &root.join(split.sketch_dir()).join(&name))?;
        }
    }
    Ok(DatasetSpec {
        name: "toy".into(),
        root: root.to_path_buf(),
        scheme: Scheme::Paired,
        expected_train: Some(n_train),
        expected_test: Some(n_test),
    })
}

/// Fills the four layout directories with `train`/`test` tiny placeholder images per side.
pub fn write_placeholder_layout(root: &Path, train: usize, test: usize) -> Result<()> {
    let px = [[255u8, 255, 255]; 4];
    for (split, n) in [(Split::Train, train), (Split::Test, test)] {
        for i in 0..n {
            let name = format!("{i:06}.png");
            write_rgb(&root.join(split.sketch_dir()).join(&name), &px, 2)?;
            write_rgb(&root.join(split.color_dir()).join(&name), &px, 2)?;
        }
    }
    Ok(())
}
