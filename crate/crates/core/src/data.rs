//! Dataset ingestion (IDX images, WDBC CSV), preprocessing, minority
//! oversampling, deterministic splits, and mini-batch iteration.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Stream ids for the per-run generator; data preparation draws from its
/// own stream so model initialization and batching stay decoupled.
pub const STREAM_DATA: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_BATCH: u64 = 3;

/// The four benchmark datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Mnist,
    Fashion,
    Kmnist,
    Wdbc,
}

impl DatasetTag {
    pub fn tag(self) -> &'static str {
        match self {
            DatasetTag::Mnist => "mnist",
            DatasetTag::Fashion => "fashion",
            DatasetTag::Kmnist => "kmnist",
            DatasetTag::Wdbc => "wdbc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetTag::Mnist),
            "fashion" => Ok(DatasetTag::Fashion),
            "kmnist" => Ok(DatasetTag::Kmnist),
            "wdbc" => Ok(DatasetTag::Wdbc),
            other => Err(Error::Domain(format!(
                "unknown dataset '{other}' (expected mnist|fashion|kmnist|wdbc)"
            ))),
        }
    }

    pub fn is_idx_family(self) -> bool {
        self != DatasetTag::Wdbc
    }
}

impl std::fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// An in-memory labeled dataset. Immutable after load; preprocessing
/// returns transformed copies.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.class_count];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }

    /// Row subset in the given index order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Matrix::zeros(indices.len(), self.dim());
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            features.row_mut(r).copy_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            class_count: self.class_count,
            name: self.name.clone(),
        }
    }
}

fn open_maybe_gzip(path: &Path) -> Result<Box<dyn Read>> {
    let mut file = File::open(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: format!("cannot open: {e}"),
    })?;
    let mut prefix = [0u8; 2];
    let n = file.read(&mut prefix)?;
    let reopened = File::open(path)?;
    // 0x1f8b marks a gzip stream.
    if n == 2 && prefix == [0x1f, 0x8b] {
        Ok(Box::new(GzDecoder::new(BufReader::new(reopened))))
    } else {
        Ok(Box::new(BufReader::new(reopened)))
    }
}

/// Load an IDX image/label file pair into a flat [0,1]-scaled dataset.
/// Gzip-compressed inputs are detected by their leading bytes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let fmt = |path: &Path, detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };

    let mut images = open_maybe_gzip(images_path)?;
    let magic = images.read_u32::<BigEndian>()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(fmt(
            images_path,
            format!("bad images magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let count = images.read_u32::<BigEndian>()? as usize;
    let rows = images.read_u32::<BigEndian>()? as usize;
    let cols = images.read_u32::<BigEndian>()? as usize;
    let dim = rows * cols;
    let mut raw = vec![0u8; count * dim];
    images
        .read_exact(&mut raw)
        .map_err(|e| fmt(images_path, format!("truncated pixel payload: {e}")))?;

    let mut labels_file = open_maybe_gzip(labels_path)?;
    let magic = labels_file.read_u32::<BigEndian>()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(fmt(
            labels_path,
            format!("bad labels magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let label_count = labels_file.read_u32::<BigEndian>()? as usize;
    if label_count != count {
        return Err(fmt(
            labels_path,
            format!("{label_count} labels for {count} images"),
        ));
    }
    let mut label_bytes = vec![0u8; label_count];
    labels_file
        .read_exact(&mut label_bytes)
        .map_err(|e| fmt(labels_path, format!("truncated label payload: {e}")))?;

    let data: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(1, |&m| m + 1).max(10);

    Ok(Dataset {
        features: Matrix::from_vec(count, dim, data)?,
        labels,
        class_count,
        name: images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    })
}

/// Write a dataset back out as an uncompressed IDX pair. Features must lie
/// in [0,1]; they are rescaled to bytes. Used for fixtures and roundtrips.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    ds: &Dataset,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if rows * cols != ds.dim() {
        return Err(Error::Domain(format!(
            "cannot reshape dim {} into {}x{} images",
            ds.dim(),
            rows,
            cols
        )));
    }
    let mut w = BufWriter::new(File::create(images_path)?);
    w.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    w.write_u32::<BigEndian>(ds.len() as u32)?;
    w.write_u32::<BigEndian>(rows as u32)?;
    w.write_u32::<BigEndian>(cols as u32)?;
    for v in ds.features.data() {
        w.write_all(&[(v * 255.0).round() as u8])?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(labels_path)?);
    w.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    w.write_u32::<BigEndian>(ds.len() as u32)?;
    for &l in &ds.labels {
        w.write_all(&[l as u8])?;
    }
    w.flush()?;
    Ok(())
}

/// Parse the UCI WDBC file: 32 comma-separated columns per row
/// (id, diagnosis M|B, 30 real features). Malignant maps to label 1.
pub fn load_wdbc(path: &Path) -> Result<Dataset> {
    let fmt = |line: usize, detail: String| Error::Format {
        path: path.display().to_string(),
        detail: format!("line {line}: {detail}"),
    };

    let mut text = String::new();
    File::open(path)
        .map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("cannot open: {e}"),
        })?
        .read_to_string(&mut text)?;

    let mut data: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 32 {
            return Err(fmt(lineno, format!("{} columns, expected 32", fields.len())));
        }
        let label = match fields[1] {
            "M" => 1usize,
            "B" => 0usize,
            other => return Err(fmt(lineno, format!("diagnosis '{other}' is not M or B"))),
        };
        labels.push(label);
        for field in &fields[2..] {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| fmt(lineno, format!("bad feature '{field}': {e}")))?;
            data.push(v);
        }
    }

    let n = labels.len();
    Ok(Dataset {
        features: Matrix::from_vec(n, 30, data)?,
        labels,
        class_count: 2,
        name: "wdbc".into(),
    })
}

/// Duplicate minority-class rows (sampled with replacement) until both
/// classes are equally frequent. Original rows are all retained; the
/// duplicates are appended.
pub fn oversample_minority(ds: &Dataset, rng: &mut Rng) -> Result<Dataset> {
    if ds.class_count != 2 {
        return Err(Error::Domain(format!(
            "oversampling expects a two-class dataset, got {} classes",
            ds.class_count
        )));
    }
    let hist = ds.class_histogram();
    if hist[0] == 0 || hist[1] == 0 {
        return Err(Error::Domain(
            "oversampling needs both classes present".into(),
        ));
    }
    if hist[0] == hist[1] {
        return Ok(ds.clone());
    }
    let minority = if hist[0] < hist[1] { 0 } else { 1 };
    let deficit = hist[1 - minority] - hist[minority];
    let minority_rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == minority).collect();

    let mut indices: Vec<usize> = (0..ds.len()).collect();
    for _ in 0..deficit {
        indices.push(minority_rows[rng.index(minority_rows.len())]);
    }
    Ok(ds.subset(&indices))
}

/// Disjoint train/val/test row indices over one source dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffle `n` indices and carve off `test_fraction` for test, then
/// `val_fraction` of the remaining pool for validation (both floored).
pub fn split_with_test(n: usize, test_fraction: f64, val_fraction: f64, seed: u64) -> SplitSpec {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::with_stream(seed, STREAM_DATA);
    rng.shuffle(&mut order);
    let test_count = (n as f64 * test_fraction).floor() as usize;
    let test: Vec<usize> = order[..test_count].to_vec();
    let pool = &order[test_count..];
    let val_count = (pool.len() as f64 * val_fraction).floor() as usize;
    SplitSpec {
        val: pool[..val_count].to_vec(),
        train: pool[val_count..].to_vec(),
        test,
        seed,
    }
}

/// Carve a validation split out of a fixed training pool (the *MNIST path,
/// where the test set is a separate file). An optional cap keeps only the
/// first `limit` shuffled rows before the carve, for reduced-scale runs.
pub fn split_train_val(n: usize, val_fraction: f64, limit: Option<usize>, seed: u64) -> SplitSpec {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::with_stream(seed, STREAM_DATA);
    rng.shuffle(&mut order);
    if let Some(limit) = limit {
        order.truncate(limit);
    }
    let val_count = (order.len() as f64 * val_fraction).floor() as usize;
    SplitSpec {
        val: order[..val_count].to_vec(),
        train: order[val_count..].to_vec(),
        test: Vec::new(),
        seed,
    }
}

/// Per-column affine transform fitted on the training split.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit mean and population standard deviation per column.
    /// Zero-variance columns get std clamped to 1 so they map to zero.
    pub fn fit(train: &Dataset) -> Standardizer {
        let n = train.len().max(1);
        let dim = train.dim();
        let mut mean = vec![0.0; dim];
        for r in 0..train.len() {
            for (j, v) in train.features.row(r).iter().enumerate() {
                mean[j] += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for r in 0..train.len() {
            for (j, v) in train.features.row(r).iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        let std = var
            .iter()
            .map(|&v| {
                let s = (v / n as f64).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        for r in 0..out.len() {
            for (j, v) in out.features.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

/// One shuffled pass over a dataset in mini-batches; the final partial
/// batch is kept.
pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = (Matrix, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let sub = self.ds.subset(idx);
        Some((sub.features, sub.labels))
    }
}

/// Iterate one epoch of shuffled mini-batches. The shuffle order is drawn
/// from `rng`, so an epoch sequence is reproducible under the run seed.
pub fn batches<'a>(ds: &'a Dataset, batch_size: usize, rng: &mut Rng) -> BatchIter<'a> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut order);
    BatchIter {
        ds,
        order,
        batch_size,
        cursor: 0,
    }
}

/// Steps one epoch takes at this batch size (final partial batch included).
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Train/val/test datasets ready for a run.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Options controlling dataset preparation.
#[derive(Debug, Clone, Copy, Default)]
pub struct PrepareOptions {
    /// WDBC only: split before oversampling (the hygienic order) instead of
    /// the default oversample-then-split.
    pub split_first: bool,
    /// Cap on the training pool (applied before the validation carve).
    pub limit_train: Option<usize>,
}

/// File names of the IDX pairs, relative to `data_dir/<dataset>/`.
pub const IDX_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const IDX_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const IDX_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const IDX_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Resolve an IDX file that may be stored raw or gzip-compressed.
pub fn resolve_idx_file(dir: &Path, name: &str) -> Result<PathBuf> {
    let raw = dir.join(name);
    if raw.exists() {
        return Ok(raw);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::Format {
        path: raw.display().to_string(),
        detail: "file not found (neither raw nor .gz); run the fetch command".into(),
    })
}

/// Raw on-disk datasets, loaded once and shared across runs.
#[derive(Debug)]
pub struct RawData {
    pub tag: DatasetTag,
    pub train: Dataset,
    /// Fixed test file for the IDX family; WDBC derives its test split.
    pub test: Option<Dataset>,
}

pub fn load_raw(tag: DatasetTag, data_dir: &Path) -> Result<RawData> {
    match tag {
        DatasetTag::Wdbc => Ok(RawData {
            tag,
            train: load_wdbc(&data_dir.join("wdbc.data"))?,
            test: None,
        }),
        _ => {
            let dir = data_dir.join(tag.tag());
            Ok(RawData {
                tag,
                train: load_idx(
                    &resolve_idx_file(&dir, IDX_TRAIN_IMAGES)?,
                    &resolve_idx_file(&dir, IDX_TRAIN_LABELS)?,
                )?,
                test: Some(load_idx(
                    &resolve_idx_file(&dir, IDX_TEST_IMAGES)?,
                    &resolve_idx_file(&dir, IDX_TEST_LABELS)?,
                )?),
            })
        }
    }
}

/// Split already-loaded raw data for one run.
///
/// WDBC: oversample, 70/30 train/test split, 10% validation carve, then
/// z-score standardization fitted on the training split. The *MNIST
/// datasets use their fixed test files, a 10% validation carve, and no
/// standardization (pixels are already in [0,1]).
pub fn split_raw(raw: &RawData, seed: u64, opts: PrepareOptions) -> Result<SplitData> {
    match raw.tag {
        DatasetTag::Wdbc => {
            let mut rng = Rng::with_stream(seed, STREAM_DATA);
            if opts.split_first {
                // Hygienic order: hold out the test set first so oversampled
                // duplicates cannot leak across the boundary.
                let spec = split_with_test(raw.train.len(), 0.3, 0.0, seed);
                let test = raw.train.subset(&spec.test);
                let pool = oversample_minority(&raw.train.subset(&spec.train), &mut rng)?;
                let inner = split_train_val(pool.len(), 0.1, opts.limit_train, seed ^ 1);
                standardized(pool.subset(&inner.train), pool.subset(&inner.val), test)
            } else {
                let balanced = oversample_minority(&raw.train, &mut rng)?;
                let spec = split_with_test(balanced.len(), 0.3, 0.1, seed);
                let mut train = balanced.subset(&spec.train);
                if let Some(limit) = opts.limit_train {
                    let keep: Vec<usize> = (0..train.len().min(limit)).collect();
                    train = train.subset(&keep);
                }
                standardized(
                    train,
                    balanced.subset(&spec.val),
                    balanced.subset(&spec.test),
                )
            }
        }
        _ => {
            let spec = split_train_val(raw.train.len(), 0.1, opts.limit_train, seed);
            Ok(SplitData {
                train: raw.train.subset(&spec.train),
                val: raw.train.subset(&spec.val),
                test: raw
                    .test
                    .as_ref()
                    .expect("idx datasets carry a test file")
                    .clone(),
            })
        }
    }
}

/// Load and split a dataset exactly as a training run consumes it.
pub fn prepare(
    tag: DatasetTag,
    data_dir: &Path,
    seed: u64,
    opts: PrepareOptions,
) -> Result<SplitData> {
    split_raw(&load_raw(tag, data_dir)?, seed, opts)
}

fn standardized(train: Dataset, val: Dataset, test: Dataset) -> Result<SplitData> {
    let standardizer = Standardizer::fit(&train);
    Ok(SplitData {
        train: standardizer.apply(&train),
        val: standardizer.apply(&val),
        test: standardizer.apply(&test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn toy(labels: &[usize], class_count: usize) -> Dataset {
        let n = labels.len();
        let data: Vec<f64> = (0..n * 2).map(|i| i as f64).collect();
        Dataset {
            features: Matrix::from_vec(n, 2, data).unwrap(),
            labels: labels.to_vec(),
            class_count,
            name: "toy".into(),
        }
    }

    /// Hand-written IDX byte pair: two 28x28 images. Image 0 holds the
    /// pattern (r*28+c) % 256, image 1 is all 255; labels are 3 and 7.
    fn fixture_idx_bytes() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        for i in 0..784u32 {
            images.push((i % 256) as u8);
        }
        images.extend_from_slice(&[255u8; 784]);

        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.push(3);
        labels.push(7);
        (images, labels)
    }

    #[test]
    fn load_idx_parses_hand_written_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = fixture_idx_bytes();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("lbls");
        std::fs::write(&ip, &images).unwrap();
        std::fs::write(&lp, &labels).unwrap();

        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 784);
        assert_eq!(ds.labels, vec![3, 7]);
        for i in 0..784 {
            assert_eq!(ds.features.get(0, i), (i % 256) as f64 / 255.0);
            assert_eq!(ds.features.get(1, i), 1.0); // pixel 255 -> feature 1.0
        }
        assert_eq!(ds.features.get(0, 0), 0.0); // all-zero pixel stays 0
    }

    #[test]
    fn load_idx_detects_gzip_by_prefix() {
        use flate2::write::GzEncoder;
        use flate2::Compression;

        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = fixture_idx_bytes();
        let ip = dir.path().join("imgs.gz");
        let lp = dir.path().join("lbls.gz");
        for (path, bytes) in [(&ip, &images), (&lp, &labels)] {
            let mut enc = GzEncoder::new(File::create(path).unwrap(), Compression::default());
            enc.write_all(bytes).unwrap();
            enc.finish().unwrap();
        }
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 7]);
    }

    #[test]
    fn load_idx_rejects_bad_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (mut images, labels) = fixture_idx_bytes();
        images[0] = 0xff;
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("lbls");
        std::fs::write(&ip, &images).unwrap();
        std::fs::write(&lp, &labels).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let (images, mut labels) = fixture_idx_bytes();
        labels[7] = 3; // claim 3 labels for 2 images
        labels.push(0);
        std::fs::write(&ip, &images).unwrap();
        std::fs::write(&lp, &labels).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("labels for"), "{err}");
    }

    #[test]
    fn idx_write_read_roundtrip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = fixture_idx_bytes();
        let ip = dir.path().join("in_imgs");
        let lp = dir.path().join("in_lbls");
        std::fs::write(&ip, &images).unwrap();
        std::fs::write(&lp, &labels).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();

        let op = dir.path().join("out_imgs");
        let ol = dir.path().join("out_lbls");
        write_idx(&op, &ol, &ds, 28, 28).unwrap();
        let ds2 = load_idx(&op, &ol).unwrap();
        assert_eq!(ds.labels, ds2.labels);
        assert_eq!(ds.features, ds2.features);
        // And the bytes themselves match the hand-written fixture.
        assert_eq!(std::fs::read(&op).unwrap(), images);
        assert_eq!(std::fs::read(&ol).unwrap(), labels);
    }

    #[test]
    fn wdbc_single_row_fixture_parses_literal_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("row.data");
        let mut row = String::from("842302,M");
        for i in 0..30 {
            row.push_str(&format!(",{}.5", i));
        }
        std::fs::write(&path, row).unwrap();
        let ds = load_wdbc(&path).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![1]);
        for i in 0..30 {
            assert_eq!(ds.features.get(0, i), i as f64 + 0.5);
        }
    }

    #[test]
    fn wdbc_malformed_row_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.data");
        std::fs::write(&path, "1,M,1.0\n").unwrap();
        let err = load_wdbc(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");

        std::fs::write(&path, format!("1,X{}\n", ",1.0".repeat(30))).unwrap();
        let err = load_wdbc(&path).unwrap_err().to_string();
        assert!(err.contains("not M or B"), "{err}");
    }

    #[test]
    fn oversample_balances_and_keeps_originals() {
        let ds = toy(&[0, 0, 0, 1], 2);
        let out = oversample_minority(&ds, &mut Rng::new(1)).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out.class_histogram(), vec![3, 3]);
        // The first four rows are the originals, in order.
        for i in 0..4 {
            assert_eq!(out.features.row(i), ds.features.row(i));
            assert_eq!(out.labels[i], ds.labels[i]);
        }
        // Added rows are copies of minority rows.
        for i in 4..6 {
            assert_eq!(out.labels[i], 1);
            assert_eq!(out.features.row(i), ds.features.row(3));
        }
    }

    #[test]
    fn oversample_leaves_balanced_sets_unchanged() {
        let ds = toy(&[0, 1, 0, 1], 2);
        let out = oversample_minority(&ds, &mut Rng::new(2)).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.features, ds.features);
    }

    #[test]
    fn oversample_rejects_single_class() {
        let ds = toy(&[0, 0, 0], 2);
        assert!(oversample_minority(&ds, &mut Rng::new(3)).is_err());
        let three = toy(&[0, 1, 2], 3);
        assert!(oversample_minority(&three, &mut Rng::new(3)).is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let a = split_with_test(714, 0.3, 0.1, 42);
        let b = split_with_test(714, 0.3, 0.1, 42);
        assert_eq!(a, b);
        let c = split_with_test(714, 0.3, 0.1, 43);
        assert_ne!(a.train, c.train);

        let mut seen = BTreeSet::new();
        for idx in a.train.iter().chain(&a.val).chain(&a.test) {
            assert!(seen.insert(*idx), "index {idx} appears twice");
        }
        assert_eq!(seen.len(), 714);
    }

    #[test]
    fn wdbc_split_arithmetic() {
        // 714 -> 214 test; 500 pool -> 50 val, 450 train.
        let spec = split_with_test(714, 0.3, 0.1, 7);
        assert_eq!(spec.test.len(), 214);
        assert_eq!(spec.val.len(), 50);
        assert_eq!(spec.train.len(), 450);
    }

    #[test]
    fn mnist_val_carve_is_ten_percent() {
        let spec = split_train_val(60_000, 0.1, None, 9);
        assert_eq!(spec.val.len(), 6_000);
        assert_eq!(spec.train.len(), 54_000);

        let limited = split_train_val(60_000, 0.1, Some(10_000), 9);
        assert_eq!(limited.val.len(), 1_000);
        assert_eq!(limited.train.len(), 9_000);
    }

    #[test]
    fn standardizer_normalizes_train_columns() {
        let mut rng = Rng::new(11);
        let features: Matrix = rng.uniform(5.0, 50.0, 200, 4).unwrap();
        let ds = Dataset {
            features,
            labels: vec![0; 200],
            class_count: 2,
            name: "t".into(),
        };
        let st = Standardizer::fit(&ds);
        let out = st.apply(&ds);
        for j in 0..4 {
            let mut mean = 0.0;
            for r in 0..200 {
                mean += out.features.get(r, j);
            }
            mean /= 200.0;
            let mut var = 0.0;
            for r in 0..200 {
                var += (out.features.get(r, j) - mean).powi(2);
            }
            let std = (var / 200.0).sqrt();
            assert!(mean.abs() < 1e-9, "col {j} mean {mean}");
            assert!((std - 1.0).abs() < 1e-9, "col {j} std {std}");
        }
    }

    #[test]
    fn standardizer_clamps_zero_variance_columns() {
        let ds = Dataset {
            features: Matrix::from_rows(&[vec![3.0, 1.0], vec![3.0, 2.0]]).unwrap(),
            labels: vec![0, 1],
            class_count: 2,
            name: "t".into(),
        };
        let st = Standardizer::fit(&ds);
        assert_eq!(st.std[0], 1.0);
        let out = st.apply(&ds);
        assert_eq!(out.features.get(0, 0), 0.0);
        assert_eq!(out.features.get(1, 0), 0.0);
    }

    #[test]
    fn batches_partition_with_partial_tail() {
        let ds = toy(&vec![0; 250], 2);
        let mut rng = Rng::new(5);
        let sizes: Vec<usize> = batches(&ds, 100, &mut rng).map(|(_, l)| l.len()).collect();
        assert_eq!(sizes, vec![100, 100, 50]);
    }

    #[test]
    fn batch_union_covers_every_row_exactly_once() {
        let n = 137;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        // Feature column 0 identifies the source row.
        let data: Vec<f64> = (0..n * 2).map(|i| (i / 2) as f64).collect();
        let ds = Dataset {
            features: Matrix::from_vec(n, 2, data).unwrap(),
            labels,
            class_count: 2,
            name: "t".into(),
        };
        let mut rng = Rng::new(6);
        let mut seen = BTreeSet::new();
        for (x, _) in batches(&ds, 16, &mut rng) {
            for r in 0..x.rows() {
                assert!(seen.insert(x.get(r, 0) as usize));
            }
        }
        assert_eq!(seen.len(), n);
    }

    #[test]
    fn twenty_epochs_of_the_full_pool_take_10800_steps() {
        assert_eq!(steps_per_epoch(54_000, 100) * 20, 10_800);
    }
}
