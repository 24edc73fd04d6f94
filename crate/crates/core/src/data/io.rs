use std::path::Path;
use std::str::FromStr;

use hdf5::types::VarLenUnicode;
use log::info;
use serde::{Deserialize, Serialize};

use super::{check_raw_dims, validate_labels, ClassMap, RawSample};
use crate::error::{Error, Result};
use crate::NUM_CLASSES;

const IMAGES: &str = "images";
const LABELS: &str = "labels";
const META_ATTR: &str = "meta";

/// How the corpus container is organised.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `images` and `labels` arrays of shape `N × 94 × 93` (u8) plus a
    /// `meta` attribute or `.json` sidecar.
    Canonical,
    /// A single `N × H × W × 2` array (slice 0 image, slice 1 labels). When
    /// `array` is `None` the only 4-D dataset whose last axis is 2 is used.
    Published { array: Option<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

pub fn load_dataset(path: &Path, layout: &Layout) -> Result<Vec<RawSample>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = hdf5::File::open(path)?;
    let samples = match layout {
        Layout::Canonical => load_canonical(&file, path)?,
        Layout::Published { array } => load_published(&file, array.as_deref())?,
    };
    validate_labels(&samples, NUM_CLASSES)?;
    info!("loaded {} samples from {}", samples.len(), path.display());
    Ok(samples)
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

fn load_canonical(file: &hdf5::File, path: &Path) -> Result<Vec<RawSample>> {
    let meta: CorpusMeta = match file.attr(META_ATTR) {
        Ok(attr) => serde_json::from_str(attr.read_scalar::<VarLenUnicode>()?.as_str())?,
        Err(_) => {
            let sidecar = sidecar_path(path);
            let text = std::fs::read_to_string(&sidecar).map_err(|_| {
                Error::UnrecognizedLayout(format!(
                    "no `{META_ATTR}` attribute and no sidecar {}",
                    sidecar.display()
                ))
            })?;
            serde_json::from_str(&text)?
        }
    };
    check_raw_dims(meta.height, meta.width)?;
    if meta.classes != NUM_CLASSES {
        return Err(Error::UnrecognizedLayout(format!(
            "corpus declares {} classes, expected {NUM_CLASSES}",
            meta.classes
        )));
    }
    let images = file
        .dataset(IMAGES)
        .map_err(|_| Error::UnrecognizedLayout(format!("missing `{IMAGES}` array")))?;
    let labels = file
        .dataset(LABELS)
        .map_err(|_| Error::UnrecognizedLayout(format!("missing `{LABELS}` array")))?;
    let expected = vec![meta.n, meta.height, meta.width];
    for ds in [&images, &labels] {
        if ds.shape() != expected {
            return Err(crate::error::shape_err(&expected, ds.shape()));
        }
    }
    let plane = meta.height * meta.width;
    if meta.n == 0 {
        return Ok(Vec::new());
    }
    let images: Vec<u8> = images.read_raw()?;
    let labels: Vec<u8> = labels.read_raw()?;
    images
        .chunks_exact(plane)
        .zip(labels.chunks_exact(plane))
        .map(|(img, lab)| {
            RawSample::new(img.to_vec(), ClassMap::new(meta.height, meta.width, lab.to_vec())?)
        })
        .collect()
}

fn collect_datasets(group: &hdf5::Group, prefix: &str, out: &mut Vec<String>) -> Result<()> {
    for name in group.member_names()? {
        let full = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}/{name}")
        };
        if let Ok(ds) = group.dataset(&name) {
            let shape = ds.shape();
            if shape.len() == 4 && shape[3] == 2 {
                out.push(full);
            }
        } else if let Ok(sub) = group.group(&name) {
            collect_datasets(&sub, &full, out)?;
        }
    }
    Ok(())
}

fn load_published(file: &hdf5::File, array: Option<&str>) -> Result<Vec<RawSample>> {
    let name = match array {
        Some(a) => a.to_string(),
        None => {
            let mut found = Vec::new();
            collect_datasets(file, "", &mut found)?;
            match found.len() {
                1 => found.remove(0),
                0 => {
                    return Err(Error::UnrecognizedLayout(
                        "no 4-D array with a trailing axis of size 2; name the array explicitly".into(),
                    ))
                }
                _ => {
                    return Err(Error::UnrecognizedLayout(format!(
                        "several candidate arrays {found:?}; name one explicitly"
                    )))
                }
            }
        }
    };
    let ds = file
        .dataset(&name)
        .map_err(|_| Error::UnrecognizedLayout(format!("array `{name}` not found")))?;
    let shape = ds.shape();
    if shape.len() != 4 || shape[3] != 2 {
        return Err(Error::UnrecognizedLayout(format!(
            "array `{name}` has shape {shape:?}, expected N×H×W×2"
        )));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    check_raw_dims(h, w)?;
    info!("published layout: using array `{name}` with shape {shape:?}");
    if n == 0 {
        return Ok(Vec::new());
    }
    let raw: Vec<u8> = ds.read_raw()?;
    let plane = h * w;
    raw.chunks_exact(plane * 2)
        .map(|rec| {
            let image = rec.iter().step_by(2).copied().collect();
            let label = rec.iter().skip(1).step_by(2).copied().collect();
            RawSample::new(image, ClassMap::new(h, w, label)?)
        })
        .collect()
}

/// Writes samples in the canonical layout. The metadata goes both into the
/// `meta` attribute and into a `.json` sidecar next to the container.
pub fn write_canonical(path: &Path, samples: &[RawSample]) -> Result<CorpusMeta> {
    let (height, width) = samples
        .first()
        .map(|s| (s.height(), s.width()))
        .unwrap_or((crate::RAW_HEIGHT, crate::RAW_WIDTH));
    check_raw_dims(height, width)?;
    let meta = CorpusMeta {
        n: samples.len(),
        height,
        width,
        classes: NUM_CLASSES,
    };
    let mut images = Vec::with_capacity(samples.len() * height * width);
    let mut labels = Vec::with_capacity(samples.len() * height * width);
    for s in samples {
        check_raw_dims(s.height(), s.width())?;
        images.extend_from_slice(&s.image);
        labels.extend_from_slice(&s.label.data);
    }
    let file = hdf5::File::create(path)?;
    for (name, data) in [(IMAGES, &images), (LABELS, &labels)] {
        let ds = file
            .new_dataset::<u8>()
            .shape((meta.n, height, width))
            .create(name)?;
        if meta.n > 0 {
            ds.write_raw(data)?;
        }
    }
    let json = serde_json::to_string(&meta)?;
    let value = VarLenUnicode::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("metadata encoding: {e}")))?;
    file.new_attr::<VarLenUnicode>()
        .create(META_ATTR)?
        .write_scalar(&value)?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(meta)
}
