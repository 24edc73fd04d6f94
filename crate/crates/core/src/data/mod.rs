//! Corpus handling: raw samples, canvas preparation, splits and batches.

mod io;

pub use io::{load_dataset, write_canonical, CorpusMeta, Layout};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::SeededRng;
use crate::{CANVAS, NUM_CLASSES, RAW_HEIGHT, RAW_WIDTH};

/// Gray level used for canvas padding (the chromosome images have a white
/// background).
pub const PAD_GRAY: u8 = 255;
/// Label used for canvas padding.
pub const PAD_LABEL: u8 = 0;

/// Row-major 2-D map of class ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.data[row * self.width + col] = class;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn max_class(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }

    /// Copy of the `height × width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(shape_err(
                (self.height, self.width),
                (top + height, left + width),
            ));
        }
        let mut data = Vec::with_capacity(height * width);
        for r in top..top + height {
            let start = r * self.width + left;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Ok(Self { height, width, data })
    }
}

/// One corpus record as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSample {
    /// Gray levels, row-major, same dims as `label`.
    pub image: Vec<u8>,
    pub label: ClassMap,
}

impl RawSample {
    pub fn new(image: Vec<u8>, label: ClassMap) -> Result<Self> {
        if image.len() != label.len() {
            return Err(shape_err(label.len(), image.len()));
        }
        Ok(Self { image, label })
    }

    pub fn height(&self) -> usize {
        self.label.height
    }

    pub fn width(&self) -> usize {
        self.label.width
    }
}

/// A sample placed on the square network canvas with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub image: Vec<f32>,
    pub label: ClassMap,
}

impl PreparedSample {
    pub fn side(&self) -> usize {
        self.label.height
    }
}

/// Offsets `(top, left)` that center a `height × width` raw image on the canvas.
pub fn canvas_offsets(height: usize, width: usize) -> (usize, usize) {
    ((CANVAS - height) / 2, (CANVAS - width) / 2)
}

/// Pads a raw sample onto the 128×128 canvas (image 255, label 0 outside the
/// centered window) and divides intensities by 255.
pub fn prepare_sample(raw: &RawSample) -> PreparedSample {
    let (h, w) = (raw.height(), raw.width());
    debug_assert!(h <= CANVAS && w <= CANVAS);
    let (top, left) = canvas_offsets(h, w);
    let mut image = vec![f32::from(PAD_GRAY) / 255.0; CANVAS * CANVAS];
    let mut label = ClassMap::filled(CANVAS, CANVAS, PAD_LABEL);
    for r in 0..h {
        for c in 0..w {
            let dst = (r + top) * CANVAS + c + left;
            image[dst] = f32::from(raw.image[r * w + c]) / 255.0;
            label.data[dst] = raw.label.data[r * w + c];
        }
    }
    PreparedSample { image, label }
}

pub fn prepare_all(raws: &[RawSample]) -> Vec<PreparedSample> {
    raws.par_iter().map(prepare_sample).collect()
}

/// Checks every label value against the class range, reporting the first
/// offending sample.
pub fn validate_labels(samples: &[RawSample], classes: usize) -> Result<()> {
    for (index, s) in samples.iter().enumerate() {
        if let Some(value) = s.label.data.iter().copied().find(|&v| usize::from(v) >= classes) {
            return Err(Error::InvalidLabel { index, value, classes });
        }
    }
    Ok(())
}

/// `C × H × W` indicator array, channel `c` set where the label equals `c`.
pub fn one_hot(label: &ClassMap, classes: usize) -> Result<Vec<f32>> {
    let plane = label.len();
    let mut out = vec![0f32; classes * plane];
    for (p, &v) in label.data.iter().enumerate() {
        let c = usize::from(v);
        if c >= classes {
            return Err(Error::InvalidLabel { index: 0, value: v, classes });
        }
        out[c * plane + p] = 1.0;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Test indices whose label map contains at least one overlap pixel.
    pub overlap_test_indices: Vec<usize>,
}

/// Seeded shuffle of `0..n`; the first `floor(n · ratio)` indices train, the
/// rest test. Both lists are returned in ascending order.
pub fn split_dataset(n: usize, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("split ratio {ratio} not in (0, 1)")));
    }
    let perm = SeededRng::new(seed).permutation(n);
    let n_train = (n as f64 * ratio).floor() as usize;
    let mut train_indices = perm[..n_train].to_vec();
    let mut test_indices = perm[n_train..].to_vec();
    train_indices.sort_unstable();
    test_indices.sort_unstable();
    Ok(DatasetSplit {
        seed,
        train_indices,
        test_indices,
        overlap_test_indices: Vec::new(),
    })
}

/// Test indices whose label map holds at least one pixel of the overlap class.
pub fn filter_overlap(split: &DatasetSplit, labels: &[&ClassMap]) -> Vec<usize> {
    let overlap = (NUM_CLASSES - 1) as u8;
    split
        .test_indices
        .iter()
        .copied()
        .filter(|&i| labels[i].data.contains(&overlap))
        .collect()
}

/// Shuffled mini-batch schedule over the training indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchIterator {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

impl Default for BatchIterator {
    fn default() -> Self {
        Self {
            batch_size: 64,
            seed: 123,
            drop_last: false,
        }
    }
}

/// Batches for one epoch: a permutation of `split.train_indices` derived from
/// `(spec.seed, epoch)`, cut into `spec.batch_size` chunks.
pub fn batches(split: &DatasetSplit, spec: &BatchIterator, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if spec.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let mut order = split.train_indices.clone();
    SeededRng::derived(spec.seed, epoch).shuffle(&mut order);
    Ok(order
        .chunks(spec.batch_size)
        .filter(|b| !spec.drop_last || b.len() == spec.batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Checks the raw dimensions expected by the canonical corpus.
pub fn check_raw_dims(height: usize, width: usize) -> Result<()> {
    if (height, width) != (RAW_HEIGHT, RAW_WIDTH) {
        return Err(shape_err((RAW_HEIGHT, RAW_WIDTH), (height, width)));
    }
    Ok(())
}
