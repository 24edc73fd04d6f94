use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use candle_core::Device;
use chromoseg::data::{
    canvas_offsets, filter_overlap, load_dataset, prepare_all, prepare_sample, split_dataset, write_canonical,
    ClassMap, DatasetSplit, Layout, PreparedSample, RawSample,
};
use chromoseg::metrics::{ConfusionMatrix, MetricsReport};
use chromoseg::train::{evaluate, fit, load_generator, Segmenter};
use chromoseg::{CANVAS, RAW_HEIGHT, RAW_WIDTH};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::render;

pub const CORPUS_FILE: &str = "corpus.h5";
pub const SPLIT_FILE: &str = "split.json";
pub const RUN_CONFIG_FILE: &str = "run.toml";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub total: usize,
    pub train: usize,
    pub test: usize,
    pub overlap_test: usize,
}

/// Written by `prepare`, read by `train` and `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub ratio: f64,
    pub counts: SplitCounts,
    #[serde(flatten)]
    pub split: DatasetSplit,
}

impl SplitManifest {
    pub fn build(labels: &[&ClassMap], ratio: f64, seed: u64) -> Result<Self> {
        let mut split = split_dataset(labels.len(), ratio, seed)?;
        split.overlap_test_indices = filter_overlap(&split, labels);
        Ok(Self {
            ratio,
            counts: SplitCounts {
                total: labels.len(),
                train: split.train_indices.len(),
                test: split.test_indices.len(),
                overlap_test: split.overlap_test_indices.len(),
            },
            split,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    fn check_against(&self, n: usize) -> Result<()> {
        ensure!(
            self.counts.total == n,
            "split manifest covers {} samples but the dataset holds {n}",
            self.counts.total
        );
        Ok(())
    }
}

fn load_raw(path: &Path, layout: &Layout) -> Result<Vec<RawSample>> {
    load_dataset(path, layout).map_err(|e| match e {
        chromoseg::Error::UnrecognizedLayout(msg) => anyhow::anyhow!(
            "could not read {}: {msg}\nhint: pass --layout canonical|published and, for the published layout, \
             --array <path/to/array>",
            path.display()
        ),
        other => other.into(),
    })
}

fn labels_of(raws: &[RawSample]) -> Vec<&ClassMap> {
    raws.iter().map(|s| &s.label).collect()
}

pub fn prepare(cfg: &RunConfig) -> Result<SplitManifest> {
    let dataset = cfg.dataset.as_ref().context("no dataset given")?;
    let raws = load_raw(dataset, &cfg.layout())?;
    info!("loaded {} samples from {}", raws.len(), dataset.display());
    std::fs::create_dir_all(&cfg.out)?;
    write_canonical(&cfg.out.join(CORPUS_FILE), &raws)?;
    let manifest = SplitManifest::build(&labels_of(&raws), cfg.split_ratio, cfg.split_seed)?;
    manifest.write(&cfg.out.join(SPLIT_FILE))?;
    Ok(manifest)
}

fn resolve_split(cfg: &RunConfig, raws: &[RawSample]) -> Result<SplitManifest> {
    match &cfg.split {
        Some(path) => {
            let m = SplitManifest::load(path)?;
            m.check_against(raws.len())?;
            Ok(m)
        }
        None => SplitManifest::build(&labels_of(raws), cfg.split_ratio, cfg.split_seed),
    }
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let dataset = cfg.dataset.as_ref().context("no dataset given")?;
    let raws = load_raw(dataset, &cfg.layout())?;
    let manifest = resolve_split(cfg, &raws)?;
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join(RUN_CONFIG_FILE), cfg.to_toml()?)?;
    manifest.write(&cfg.out.join(SPLIT_FILE))?;
    let corpus = prepare_all(&raws);
    let outcome = fit(&corpus, &manifest.split, &cfg.train, &cfg.out)?;
    let s = &outcome.state;
    println!(
        "trained {} epochs{}; best train Dice {:.4} at epoch {}; checkpoint {}",
        s.epoch,
        if s.stopped_early { " (early stop)" } else { "" },
        s.best_train_dice,
        s.best_epoch.map_or("-".into(), |e| e.to_string()),
        outcome.best_checkpoint.display()
    );
    Ok(())
}

/// Loads a grayscale PNG and places it on the network canvas. Returns the
/// prepared sample and, for raw-sized inputs, the crop window.
fn load_input(path: &Path) -> Result<(PreparedSample, Option<(usize, usize)>)> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img.into_raw();
    if (h, w) == (RAW_HEIGHT, RAW_WIDTH) {
        let raw = RawSample::new(pixels, ClassMap::filled(h, w, 0))?;
        Ok((prepare_sample(&raw), Some(canvas_offsets(h, w))))
    } else if (h, w) == (CANVAS, CANVAS) {
        let image = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
        Ok((
            PreparedSample {
                image,
                label: ClassMap::filled(h, w, 0),
            },
            None,
        ))
    } else {
        bail!(
            "{} is {h}×{w}; expected {RAW_HEIGHT}×{RAW_WIDTH} or {CANVAS}×{CANVAS}",
            path.display()
        )
    }
}

pub fn segment(checkpoint: &Path, images: &[PathBuf], out: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    ensure!(!images.is_empty(), "no input images");
    let g = load_generator(checkpoint, &Device::Cpu)?;
    ensure!(
        g.config().input_size == CANVAS && g.config().in_channels == 1,
        "checkpoint expects {}-channel {}×{} inputs",
        g.config().in_channels,
        g.config().input_size,
        g.config().input_size
    );
    std::fs::create_dir_all(out)?;
    let mut written = Vec::with_capacity(images.len());
    for path in images {
        let (sample, window) = load_input(path)?;
        let mut map = g.segment(&[&sample])?.remove(0);
        if let Some((top, left)) = window {
            map = map.crop(top, left, RAW_HEIGHT, RAW_WIDTH)?;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let labels = out.join(format!("{stem}_labels.png"));
        let color = out.join(format!("{stem}_color.png"));
        render::save_labels(&map, &labels)?;
        render::save_rgb(&render::colorize(&map), &color)?;
        written.push((labels, color));
    }
    Ok(written)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    /// Test samples containing overlap pixels.
    Overlap,
    Test,
    Train,
}

#[derive(Debug, Serialize)]
pub struct ConfusionReport {
    /// Rows: true class; columns: predicted class.
    pub counts: Vec<Vec<u64>>,
    /// Each row divided by its sum (percent); rows of absent classes are zero.
    pub row_percent: Vec<Vec<f64>>,
}

impl ConfusionReport {
    pub fn new(cm: &ConfusionMatrix) -> Self {
        Self {
            counts: cm.counts.clone(),
            row_percent: cm
                .row_normalized()
                .into_iter()
                .map(|row| row.into_iter().map(|v| v * 100.0).collect())
                .collect(),
        }
    }
}

pub struct EvaluateArgs<'a> {
    pub checkpoint: &'a Path,
    pub subset: Subset,
    pub method: Option<String>,
}

pub fn evaluate_cmd(cfg: &RunConfig, args: &EvaluateArgs<'_>) -> Result<MetricsReport> {
    let dataset = cfg.dataset.as_ref().context("no dataset given")?;
    let raws = load_raw(dataset, &cfg.layout())?;
    let manifest = resolve_split(cfg, &raws)?;
    let indices = match args.subset {
        Subset::Overlap => &manifest.split.overlap_test_indices,
        Subset::Test => &manifest.split.test_indices,
        Subset::Train => &manifest.split.train_indices,
    };
    ensure!(!indices.is_empty(), "the selected evaluation set is empty");
    let picked: Vec<RawSample> = indices.iter().map(|&i| raws[i].clone()).collect();
    let samples = prepare_all(&picked);
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let g = load_generator(args.checkpoint, &Device::Cpu)?;
    let started = Instant::now();
    let report = evaluate(&g, &refs)?;
    let per_image = started.elapsed().as_secs_f64() / refs.len() as f64;

    std::fs::create_dir_all(&cfg.out)?;
    report.write_json(&cfg.out.join("metrics.json"))?;
    let method = args.method.clone().unwrap_or_else(|| method_name(args.checkpoint));
    let csv = cfg.out.join("metrics.csv");
    if csv.exists() {
        std::fs::remove_file(&csv)?;
    }
    report.append_csv(&csv, &method)?;
    let confusion = ConfusionReport::new(&report.confusion);
    std::fs::write(
        cfg.out.join("confusion.json"),
        serde_json::to_string_pretty(&confusion)?,
    )?;
    std::fs::write(
        cfg.out.join("timing.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "samples": refs.len(),
            "seconds_per_image": per_image,
            "device": "cpu",
        }))?,
    )?;
    Ok(report)
}

/// Run directory name of a checkpoint, used to label report rows.
fn method_name(checkpoint: &Path) -> String {
    checkpoint
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| checkpoint.file_stem())
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string()
}

#[derive(Debug, Serialize)]
pub struct DiffMetadata {
    pub convention: &'static str,
    pub height: usize,
    pub width: usize,
    pub mismatches: usize,
    /// Mismatching pixels by predicted class.
    pub by_predicted_class: [usize; 4],
}

pub const DIFF_CONVENTION: &str = "pixels where prediction and ground truth differ are drawn in the palette colour \
of the predicted class; matching pixels are black";

pub fn diff(pred: &Path, gt: &Path, out: &Path) -> Result<DiffMetadata> {
    let p = render::load_labels(pred)?;
    let g = render::load_labels(gt)?;
    let img = render::difference(&p, &g)?;
    render::save_rgb(&img, out)?;
    let mut by_predicted_class = [0usize; 4];
    for (a, b) in p.data.iter().zip(&g.data) {
        if a != b {
            by_predicted_class[usize::from(*a)] += 1;
        }
    }
    let meta = DiffMetadata {
        convention: DIFF_CONVENTION,
        height: p.height,
        width: p.width,
        mismatches: by_predicted_class.iter().sum(),
        by_predicted_class,
    };
    std::fs::write(out.with_extension("json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Collects `metrics.json` files into one CSV table, one pair of rows per
/// input labelled by its directory name.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<usize> {
    ensure!(!inputs.is_empty(), "no metrics files given");
    if out.exists() {
        std::fs::remove_file(out)?;
    }
    for path in inputs {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let r: MetricsReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        r.append_csv(out, &method_name(path))?;
    }
    Ok(inputs.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_split_of_ten() {
        let maps: Vec<ClassMap> = (0..10).map(|i| ClassMap::filled(2, 2, (i % 4) as u8)).collect();
        let refs: Vec<&ClassMap> = maps.iter().collect();
        let m = SplitManifest::build(&refs, 0.5, 123).unwrap();
        assert_eq!((m.counts.train, m.counts.test), (5, 5));
        let overlap: Vec<usize> = m.split.test_indices.iter().copied().filter(|i| i % 4 == 3).collect();
        assert_eq!(m.split.overlap_test_indices, overlap);
    }

    #[test]
    fn manifest_json_round_trips() {
        let maps: Vec<ClassMap> = (0..7).map(|_| ClassMap::filled(1, 1, 3)).collect();
        let refs: Vec<&ClassMap> = maps.iter().collect();
        let m = SplitManifest::build(&refs, 0.8, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        m.write(&path).unwrap();
        assert_eq!(SplitManifest::load(&path).unwrap(), m);
        assert!(m.check_against(7).is_ok());
        assert!(m.check_against(8).is_err());
    }

    #[test]
    fn confusion_rows_are_percentages() {
        let cm = ConfusionMatrix {
            classes: 2,
            counts: vec![vec![3, 1], vec![0, 0]],
        };
        let r = ConfusionReport::new(&cm);
        assert_eq!(r.row_percent, vec![vec![75.0, 25.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn perfect_prediction_gives_identity_confusion() {
        let gt = ClassMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let cm = chromoseg::metrics::confusion_matrix(&gt, &gt, 4).unwrap();
        let r = ConfusionReport::new(&cm);
        for (i, row) in r.row_percent.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 100.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn method_names_come_from_run_directories() {
        assert_eq!(method_name(Path::new("runs/amfl/best.json")), "amfl");
        assert_eq!(method_name(Path::new("best.json")), "best");
    }
}
