//! Image file plumbing: directory listing, decoding with normalization, PNG output.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::config::{ColorImage, SketchImage};
use crate::error::{Error, Result};

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

pub fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files directly inside `dir`, sorted by path.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Decodes, resizes bilinearly to `size`×`size` and maps to `[-1, 1]`.
pub fn load_color(path: &Path, size: usize) -> Result<ColorImage> {
    let rgb = open(path)?.to_rgb8();
    Ok(rgb_to_color(&rgb, size))
}

pub fn rgb_to_color(rgb: &RgbImage, size: usize) -> ColorImage {
    let resized = if rgb.width() as usize == size && rgb.height() as usize == size {
        rgb.clone()
    } else {
        image::imageops::resize(rgb, size as u32, size as u32, FilterType::Triangle)
    };
    let pixels = resized.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0).collect();
    ColorImage::new(size, size, pixels).expect("u8 maps into [-1, 1]")
}

/// Decodes as grayscale, area-resizes to `size`×`size` and maps to `[0, 1]`.
pub fn load_sketch(path: &Path, size: usize) -> Result<SketchImage> {
    let gray = open(path)?.to_luma8();
    let src: Vec<f32> = gray.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    let pixels = resize_area(&src, gray.height() as usize, gray.width() as usize, size, size);
    let pixels = pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    SketchImage::new(size, size, pixels)
}

/// Overlap weights for resampling `src` samples onto `dst` samples of a box partition.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, (overlap / scale) as f32));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Pixel-area (box coverage) resampling of a single-channel image.
pub fn resize_area(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let wx = area_weights(w, out_w);
    let wy = area_weights(h, out_h);
    let mut rows = vec![0f32; h * out_w];
    for y in 0..h {
        for (ox, taps) in wx.iter().enumerate() {
            rows[y * out_w + ox] = taps.iter().map(|&(x, k)| src[y * w + x] * k).sum();
        }
    }
    let mut out = vec![0f32; out_h * out_w];
    for (oy, taps) in wy.iter().enumerate() {
        for ox in 0..out_w {
            out[oy * out_w + ox] = taps.iter().map(|&(y, k)| rows[y * out_w + ox] * k).sum();
        }
    }
    out
}

/// Quantizes `[0, 1]` values to an 8-bit grayscale image.
pub fn gray_from_unit(pixels: &[f32], h: usize, w: usize) -> GrayImage {
    let raw = pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw).expect("buffer sized h*w")
}

pub fn color_to_rgb(img: &ColorImage) -> RgbImage {
    let raw = img
        .pixels()
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect();
    ImageBuffer::<Rgb<u8>, _>::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer sized h*w*3")
}

pub fn sketch_to_rgb(img: &SketchImage) -> RgbImage {
    let raw = img
        .pixels()
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g]
        })
        .collect();
    ImageBuffer::<Rgb<u8>, _>::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer sized h*w*3")
}

pub fn save_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}
