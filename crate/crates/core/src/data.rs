//! Reference labels, dataset splits, batching and a synthetic dataset.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mha::{read_mha, write_mha, ElementType, MhaError, MhaHeader, VoxelData, Volume};
use crate::preprocess::{preprocess, Image2d, PreprocessConfig, PreprocessError};
use crate::tensor::Tensor;

pub const REFERENCE_HEADER: [&str; 3] = ["PatientID", "probCOVID", "probSevere"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reference file: {0}")]
    Schema(String),
    #[error("reference file line {line}: {detail}")]
    Label { line: u64, detail: String },
    #[error("reference file line {line}: duplicate patient id {id:?}")]
    Duplicate { line: u64, id: String },
    #[error("validation count {count} must lie strictly between 0 and {total}")]
    SplitBounds { count: usize, total: usize },
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("patient {patient_id}: cannot read {path}: {source}")]
    Read {
        patient_id: String,
        path: PathBuf,
        source: io::Error,
    },
    #[error("patient {patient_id}: {source}")]
    Volume { patient_id: String, source: MhaError },
    #[error("patient {patient_id}: {source}")]
    Preprocess {
        patient_id: String,
        source: PreprocessError,
    },
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> DataError {
    let context = context.into();
    move |source| DataError::Io { context, source }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StudyRecord {
    pub patient_id: String,
    pub label_covid: u8,
    pub label_severe: u8,
    pub volume_path: PathBuf,
}

impl StudyRecord {
    pub fn labels(&self) -> [u8; 2] {
        [self.label_covid, self.label_severe]
    }
}

fn parse_label(field: &str, column: &str, line: u64) -> Result<u8, DataError> {
    match field.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(DataError::Label {
            line,
            detail: format!("{column} must be 0 or 1, got {other:?}"),
        }),
    }
}

/// Parses the reference CSV; each patient's volume is `data_dir/<id>.mha`.
pub fn load_reference(csv_bytes: &[u8], data_dir: &Path) -> Result<Vec<StudyRecord>, DataError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv_bytes);
    let headers = reader
        .headers()
        .map_err(|e| DataError::Schema(e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::Schema(format!("missing column {name:?}")))
    };
    let [id_col, covid_col, severe_col] = [
        column(REFERENCE_HEADER[0])?,
        column(REFERENCE_HEADER[1])?,
        column(REFERENCE_HEADER[2])?,
    ];
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| DataError::Schema(e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| {
            row.get(i).ok_or_else(|| DataError::Label {
                line,
                detail: format!("row has only {} fields", row.len()),
            })
        };
        let id = field(id_col)?.to_string();
        if id.is_empty() {
            return Err(DataError::Label {
                line,
                detail: "empty patient id".into(),
            });
        }
        let label_covid = parse_label(field(covid_col)?, REFERENCE_HEADER[1], line)?;
        let label_severe = parse_label(field(severe_col)?, REFERENCE_HEADER[2], line)?;
        if !seen.insert(id.clone()) {
            return Err(DataError::Duplicate { line, id });
        }
        records.push(StudyRecord {
            volume_path: data_dir.join(format!("{id}.mha")),
            patient_id: id,
            label_covid,
            label_severe,
        });
    }
    Ok(records)
}

pub fn write_reference(records: &[StudyRecord], path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DataError::Schema(e.to_string()))?;
    let write = |w: &mut csv::Writer<fs::File>, row: [&str; 3]| {
        w.write_record(row).map_err(|e| DataError::Schema(e.to_string()))
    };
    write(&mut w, REFERENCE_HEADER)?;
    for r in records {
        write(&mut w, [&r.patient_id, &r.label_covid.to_string(), &r.label_severe.to_string()])?;
    }
    w.flush().map_err(io_err(path.display().to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<StudyRecord>,
    pub validation: Vec<StudyRecord>,
    pub seed: u64,
}

/// Seeded shuffle; the first `validation_count` records become validation.
pub fn split(records: &[StudyRecord], validation_count: usize, seed: u64) -> Result<DatasetSplit, DataError> {
    if validation_count == 0 || validation_count >= records.len() {
        return Err(DataError::SplitBounds {
            count: validation_count,
            total: records.len(),
        });
    }
    let mut shuffled = records.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = shuffled.split_off(validation_count);
    Ok(DatasetSplit {
        train,
        validation: shuffled,
        seed,
    })
}

/// Record order for one epoch: identity without a seed, otherwise a
/// permutation seeded by `seed + epoch`.
pub fn epoch_order(len: usize, shuffle_seed: Option<u64>, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64)));
    }
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// N×1×S×S.
    pub images: Tensor<f32>,
    /// N×2, entries 0 or 1.
    pub labels: Tensor<f32>,
    pub patient_ids: Vec<String>,
}

/// Preprocessed images stored on disk, keyed by patient and config hash.
#[derive(Debug, Clone)]
pub struct ImageCache {
    dir: PathBuf,
}

pub fn config_hash(config: &PreprocessConfig) -> String {
    hex::encode(&Sha256::digest(config.describe().as_bytes())[..8])
}

impl ImageCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, DataError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(format!("creating cache {}", dir.display())))?;
        Ok(Self { dir })
    }

    pub fn path(&self, patient_id: &str, config: &PreprocessConfig) -> PathBuf {
        let safe = patient_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        let stem = if safe {
            patient_id.to_string()
        } else {
            format!("x{}", hex::encode(patient_id))
        };
        self.dir.join(format!("{stem}-{}.img", config_hash(config)))
    }

    fn load(&self, path: &Path) -> Option<Image2d> {
        let bytes = fs::read(path).ok()?;
        let h = u32::from_le_bytes(bytes.get(0..4)?.try_into().ok()?) as usize;
        let w = u32::from_le_bytes(bytes.get(4..8)?.try_into().ok()?) as usize;
        let body = bytes.get(8..)?;
        if body.len() != h.checked_mul(w)?.checked_mul(4)? {
            return None;
        }
        let pixels = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Some(Image2d::new(h, w, pixels))
    }

    fn store(&self, path: &Path, image: &Image2d) -> Result<(), DataError> {
        let mut bytes = Vec::with_capacity(8 + image.pixels.len() * 4);
        bytes.extend_from_slice(&(image.height as u32).to_le_bytes());
        bytes.extend_from_slice(&(image.width as u32).to_le_bytes());
        for p in &image.pixels {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(io_err(format!("writing {}", tmp.display())))?;
        fs::rename(&tmp, path).map_err(io_err(format!("writing {}", path.display())))
    }
}

/// Reads and preprocesses one record's volume, consulting `cache` first.
pub fn load_image(
    record: &StudyRecord,
    config: &PreprocessConfig,
    cache: Option<&ImageCache>,
) -> Result<Image2d, DataError> {
    let cached = cache.map(|c| c.path(&record.patient_id, config));
    if let (Some(c), Some(p)) = (cache, &cached) {
        if let Some(img) = c.load(p) {
            return Ok(img);
        }
    }
    let bytes = fs::read(&record.volume_path).map_err(|source| DataError::Read {
        patient_id: record.patient_id.clone(),
        path: record.volume_path.clone(),
        source,
    })?;
    let volume = read_mha(&bytes).map_err(|source| DataError::Volume {
        patient_id: record.patient_id.clone(),
        source,
    })?;
    let processed = preprocess(&volume, &record.patient_id, config).map_err(|source| DataError::Preprocess {
        patient_id: record.patient_id.clone(),
        source,
    })?;
    if let (Some(c), Some(p)) = (cache, &cached) {
        c.store(p, &processed.image)?;
    }
    Ok(processed.image)
}

/// Collates records into one batch, preprocessing each image.
pub fn collate(
    records: &[&StudyRecord],
    config: &PreprocessConfig,
    cache: Option<&ImageCache>,
) -> Result<Batch, DataError> {
    let s = config.target_size;
    let mut pixels = Vec::with_capacity(records.len() * s * s);
    let mut labels = Vec::with_capacity(records.len() * 2);
    for r in records {
        let img = load_image(r, config, cache)?;
        pixels.extend_from_slice(&img.pixels);
        labels.extend(r.labels().map(f32::from));
    }
    let n = records.len();
    Ok(Batch {
        images: Tensor::new([n, 1, s, s], pixels).expect("collated pixel count"),
        labels: Tensor::new([n, 2], labels).expect("collated label count"),
        patient_ids: records.iter().map(|r| r.patient_id.clone()).collect(),
    })
}

/// Lazily preprocessed batches for one epoch; the final partial batch is kept.
pub struct Batches<'a> {
    records: &'a [StudyRecord],
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
    config: PreprocessConfig,
    cache: Option<&'a ImageCache>,
}

impl<'a> Batches<'a> {
    pub fn new(
        records: &'a [StudyRecord],
        batch_size: usize,
        shuffle_seed: Option<u64>,
        epoch: usize,
        config: PreprocessConfig,
        cache: Option<&'a ImageCache>,
    ) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::BatchSize);
        }
        Ok(Self {
            records,
            order: epoch_order(records.len(), shuffle_seed, epoch),
            batch_size,
            next: 0,
            config,
            cache,
        })
    }

    /// Number of batches this epoch yields.
    pub fn count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Record indices of every batch, in delivery order.
    pub fn plan(&self) -> Vec<Vec<usize>> {
        self.order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let picked: Vec<&StudyRecord> = self.order[self.next..end].iter().map(|&i| &self.records[i]).collect();
        self.next = end;
        Some(collate(&picked, &self.config, self.cache))
    }
}

pub const SYNTH_BACKGROUND_HU: f64 = -850.0;
pub const SYNTH_NOISE_HU: f64 = 30.0;
pub const SYNTH_BLOB_HU: f64 = 700.0;
pub const SYNTH_SLICES: usize = 3;

/// Writes `n` synthetic studies to `out_dir/data/*.mha` and
/// `out_dir/reference.csv`.
///
/// Every study has a noisy background; covid-positive studies carry one
/// Gaussian blob, severe ones a second. About half the studies are positive
/// and about half of those are severe.
pub fn synth_generate(n: usize, seed: u64, image_size: usize, out_dir: &Path) -> Result<Vec<StudyRecord>, DataError> {
    let data_dir = out_dir.join("data");
    fs::create_dir_all(&data_dir).map_err(io_err(format!("creating {}", data_dir.display())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives = n / 2;
    let severe = positives / 2;
    let mut labels: Vec<(u8, u8)> = (0..n)
        .map(|i| match i {
            i if i < severe => (1, 1),
            i if i < positives => (1, 0),
            _ => (0, 0),
        })
        .collect();
    labels.shuffle(&mut rng);
    let width = (n.max(1)).to_string().len().max(4);
    let mut records = Vec::with_capacity(n);
    for (i, &(covid, sev)) in labels.iter().enumerate() {
        let id = format!("p{:0width$}", i + 1);
        let volume = synth_volume(&mut rng, image_size, covid as usize + sev as usize);
        let path = data_dir.join(format!("{id}.mha"));
        fs::write(&path, write_mha(&volume, false)).map_err(io_err(format!("writing {}", path.display())))?;
        records.push(StudyRecord {
            patient_id: id,
            label_covid: covid,
            label_severe: sev,
            volume_path: path,
        });
    }
    write_reference(&records, &out_dir.join("reference.csv"))?;
    Ok(records)
}

fn synth_volume(rng: &mut ChaCha8Rng, size: usize, blobs: usize) -> Volume {
    let s = size as f64;
    let sigma = s / 10.0;
    let lo = s * 0.25;
    let hi = s * 0.75;
    let mut centers: Vec<(f64, f64)> = Vec::new();
    while centers.len() < blobs {
        let c = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        // Keep blobs apart so two blobs never read as one.
        if centers.iter().all(|&(y, x)| (y - c.0).hypot(x - c.1) > 3.0 * sigma) {
            centers.push(c);
        }
    }
    let noise = Normal::new(0.0, SYNTH_NOISE_HU).expect("positive std");
    let plane = size * size;
    let mut voxels = Vec::with_capacity(plane * SYNTH_SLICES);
    for _ in 0..SYNTH_SLICES {
        for i in 0..plane {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let blob: f64 = centers
                .iter()
                .map(|&(cy, cx)| {
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    SYNTH_BLOB_HU * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum();
            let v = SYNTH_BACKGROUND_HU + blob + noise.sample(rng);
            voxels.push(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16);
        }
    }
    let header = MhaHeader::new(vec![size, size, SYNTH_SLICES], ElementType::Short);
    Volume::new(header, VoxelData::Short(voxels)).expect("consistent synthetic volume")
}
