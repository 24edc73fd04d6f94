//! Label-map images: lossless label PNGs, palette colouring and difference
//! images.

use std::path::Path;

use anyhow::{bail, Context, Result};
use chromoseg::data::ClassMap;
use image::{GrayImage, Luma, Rgb, RgbImage};

/// Class colours: background black, first chromosome red, second green,
/// overlap blue.
pub struct ClassPalette;

impl ClassPalette {
    pub const COLORS: [[u8; 3]; 4] = [[0, 0, 0], [255, 0, 0], [0, 255, 0], [0, 0, 255]];

    pub fn color(class: u8) -> [u8; 3] {
        Self::COLORS[usize::from(class).min(3)]
    }
}

pub fn colorize(map: &ClassMap) -> RgbImage {
    RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        Rgb(ClassPalette::color(map.get(y as usize, x as usize)))
    })
}

/// Mismatching pixels take the colour of the predicted class; matches are
/// black.
pub fn difference(pred: &ClassMap, gt: &ClassMap) -> Result<RgbImage> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        bail!(
            "prediction is {}×{} but ground truth is {}×{}",
            pred.height,
            pred.width,
            gt.height,
            gt.width
        );
    }
    Ok(RgbImage::from_fn(pred.width as u32, pred.height as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        let p = pred.get(r, c);
        if p == gt.get(r, c) {
            Rgb([0, 0, 0])
        } else {
            Rgb(ClassPalette::color(p))
        }
    }))
}

/// Class ids stored directly as 8-bit gray levels.
pub fn save_labels(map: &ClassMap, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        Luma([map.get(y as usize, x as usize)])
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn load_labels(path: &Path) -> Result<ClassMap> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let map = ClassMap::new(h as usize, w as usize, img.into_raw())?;
    if let Some(v) = map.data.iter().find(|&&v| v > 3) {
        bail!("{} holds label value {v}; expected a label map with ids 0..=3", path.display());
    }
    Ok(map)
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
