#![allow(dead_code)]

use std::path::Path;

/// Writes `n` stems per dataset. Ours images are red, baseline images blue.
pub fn write_content(root: &Path, datasets: &[(&str, usize)]) {
    for (dataset, n) in datasets {
        for (model, rgb) in [("baseline", [0u8, 0, 255]), ("ours", [255u8, 0, 0])] {
            let dir = root.join(dataset).join(model);
            std::fs::create_dir_all(&dir).unwrap();
            for i in 0..*n {
                let img = image::RgbImage::from_pixel(8, 8, image::Rgb([rgb[0], (i % 200) as u8, rgb[2]]));
                img.save(dir.join(format!("{i:04}.png"))).unwrap();
            }
        }
    }
}

pub fn is_ours_png(bytes: &[u8]) -> bool {
    let img = image::load_from_memory(bytes).unwrap().to_rgb8();
    img.get_pixel(0, 0)[0] == 255
}
