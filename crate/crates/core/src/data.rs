//! Synthetic feature-map datasets with class structure, standing in for
//! backbone-extracted features of real images.
//!
//! Each class owns `part_count` Gaussian "part" vectors with mean norm
//! around `class_sep`. A sample places those parts at a random subset of
//! grid cells (parts assigned to the chosen cells in ascending cell order)
//! and fills the remaining cells with background noise. Prototypes then have
//! localized structure to latch onto, and part positions move from sample to
//! sample.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::crt::FeatureMap;
use crate::error::{Error, Result};

const DATASET_MAGIC: &[u8; 8] = b"CRTDATA\0";
const DATASET_VERSION: u32 = 1;

/// Parameters of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Inter-class mean separation (mean part-vector norm).
    pub class_sep: f64,
    /// Background noise standard deviation.
    pub noise_sigma: f64,
    /// Semantic parts per class, placed at random grid cells.
    pub part_count: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 20,
            samples_per_class: 30,
            height: 4,
            width: 4,
            dim: 32,
            class_sep: 3.0,
            noise_sigma: 0.5,
            part_count: 3,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0
            || self.samples_per_class == 0
            || self.height == 0
            || self.width == 0
            || self.dim == 0
            || self.part_count == 0
        {
            return Err(Error::InvalidParameter(
                "synthetic spec extents and counts must be positive".into(),
            ));
        }
        if self.part_count > self.height * self.width {
            return Err(Error::InvalidParameter(format!(
                "part_count {} exceeds grid size {}",
                self.part_count,
                self.height * self.width
            )));
        }
        if self.class_sep < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::InvalidParameter(
                "class_sep and noise_sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One feature map with its class id; `part_cells` records which grid cells
/// carry part vectors (in-memory metadata, not persisted).
#[derive(Debug, Clone)]
pub struct Sample {
    pub feature_map: FeatureMap,
    pub label: usize,
    pub part_cells: Vec<usize>,
}

/// A P×Q batch: P distinct classes, Q samples each.
#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<Sample>,
}

impl Batch {
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// RNG stream used for dataset generation (other streams: model init 1,
/// batch sampling 2).
pub const DATASET_STREAM: u64 = 0;

/// Deterministic dataset generation: a pure function of the spec.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    use rand::SeedableRng;
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(DATASET_STREAM);
    let normal = Normal::new(0.0, 1.0).expect("unit normal parameters are valid");

    // Per-class part vectors, mean norm ≈ class_sep.
    let part_scale = spec.class_sep / (spec.dim as f64).sqrt();
    let parts: Vec<Vec<Vec<f64>>> = (0..spec.n_classes)
        .map(|_| {
            (0..spec.part_count)
                .map(|_| {
                    (0..spec.dim)
                        .map(|_| normal.sample(&mut rng) * part_scale)
                        .collect()
                })
                .collect()
        })
        .collect();

    let cells = spec.height * spec.width;
    let mut samples = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    for class in 0..spec.n_classes {
        for _ in 0..spec.samples_per_class {
            let mut chosen: Vec<usize> =
                index_sample(&mut rng, cells, spec.part_count).into_iter().collect();
            chosen.sort_unstable();
            let mut data = vec![0.0; cells * spec.dim];
            if spec.noise_sigma > 0.0 {
                for v in data.iter_mut() {
                    *v = normal.sample(&mut rng) * spec.noise_sigma;
                }
            } else {
                // Keep the rng stream aligned so part placement does not
                // depend on whether noise is enabled.
                for _ in 0..data.len() {
                    let _ = normal.sample(&mut rng);
                }
            }
            for (part_idx, &cell) in chosen.iter().enumerate() {
                let dst = &mut data[cell * spec.dim..(cell + 1) * spec.dim];
                dst.copy_from_slice(&parts[class][part_idx]);
            }
            samples.push(Sample {
                feature_map: FeatureMap::new(spec.height, spec.width, spec.dim, data)?,
                label: class,
                part_cells: chosen,
            });
        }
    }
    Ok(samples)
}

/// Split by class id: the lowest ⌈fraction·n⌉ class ids train, the rest
/// test. The two class-id sets are disjoint and every sample appears once.
pub fn split_classes(dataset: &[Sample], train_fraction: f64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let classes: BTreeSet<usize> = dataset.iter().map(|s| s.label).collect();
    if classes.len() < 2 {
        return Err(Error::InsufficientData {
            what: "classes to split",
            needed: 2,
            have: classes.len(),
        });
    }
    let n = classes.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::InvalidParameter(format!(
            "train fraction {train_fraction} leaves an empty side for {n} classes"
        )));
    }
    let train_ids: BTreeSet<usize> = classes.iter().copied().take(n_train).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in dataset {
        if train_ids.contains(&s.label) {
            train.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    Ok((train, test))
}

/// Distinct class ids present in a sample set, ascending.
pub fn class_ids(samples: &[Sample]) -> Vec<usize> {
    let set: BTreeSet<usize> = samples.iter().map(|s| s.label).collect();
    set.into_iter().collect()
}

/// Sample P distinct classes uniformly, then Q samples per class without
/// replacement.
pub fn sample_batch<R: Rng>(data: &[Sample], p: usize, q: usize, rng: &mut R) -> Result<Batch> {
    if p == 0 || q == 0 {
        return Err(Error::InvalidParameter("batch shape must be positive".into()));
    }
    let classes = class_ids(data);
    if classes.len() < p {
        return Err(Error::InsufficientData {
            what: "classes for a batch",
            needed: p,
            have: classes.len(),
        });
    }
    let by_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| {
            (0..data.len())
                .filter(|&i| data[i].label == c)
                .collect::<Vec<_>>()
        })
        .collect();
    if let Some(small) = by_class.iter().find(|v| v.len() < q) {
        return Err(Error::InsufficientData {
            what: "samples per class for a batch",
            needed: q,
            have: small.len(),
        });
    }

    let chosen_classes = index_sample(rng, classes.len(), p);
    let mut samples = Vec::with_capacity(p * q);
    for ci in chosen_classes {
        let pool = &by_class[ci];
        for si in index_sample(rng, pool.len(), q) {
            samples.push(data[pool[si]].clone());
        }
    }
    Ok(Batch { samples })
}

// ── Binary dataset file ──────────────────────────────────────────────
//
// Layout (little-endian): magic(8) version(u32) height(u32) width(u32)
// dim(u32) count(u32), then count·H·W·L doubles (sample-major, row-major
// inside each map), then count labels (u32 each).

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Write a dataset to a flat binary file.
pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InsufficientData {
            what: "samples to save",
            needed: 1,
            have: 0,
        });
    }
    let fm = &samples[0].feature_map;
    let (h, w, l) = (fm.height(), fm.width(), fm.dim());
    if samples
        .iter()
        .any(|s| s.feature_map.height() != h || s.feature_map.width() != w || s.feature_map.dim() != l)
    {
        return Err(Error::InvalidParameter(
            "samples in one dataset must share extents".into(),
        ));
    }

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    for v in [h as u32, w as u32, l as u32, samples.len() as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for s in samples {
        for v in s.feature_map.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    for s in samples {
        out.write_all(&(s.label as u32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Read a dataset written by [`save_dataset`]. Part-cell metadata is not
/// stored in the file, so loaded samples carry none.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path)
        .map_err(|e| corrupt(path, format!("cannot open: {e}")))?;
    let mut input = BufReader::new(file);

    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| corrupt(path, "truncated header"))?;
    if &magic != DATASET_MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |input: &mut BufReader<File>| -> Result<u32> {
        input.read_exact(&mut u32buf).map_err(|_| corrupt(path, "truncated header"))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut input)?;
    if version != DATASET_VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let h = read_u32(&mut input)? as usize;
    let w = read_u32(&mut input)? as usize;
    let l = read_u32(&mut input)? as usize;
    let count = read_u32(&mut input)? as usize;
    if h == 0 || w == 0 || l == 0 || count == 0 {
        return Err(corrupt(path, "zero extents in header"));
    }

    let map_len = h * w * l;
    let mut maps = Vec::with_capacity(count);
    let mut f64buf = [0u8; 8];
    for _ in 0..count {
        let mut data = Vec::with_capacity(map_len);
        for _ in 0..map_len {
            input.read_exact(&mut f64buf).map_err(|_| corrupt(path, "truncated feature data"))?;
            data.push(f64::from_le_bytes(f64buf));
        }
        maps.push(data);
    }
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b = [0u8; 4];
        input.read_exact(&mut b).map_err(|_| corrupt(path, "truncated labels"))?;
        labels.push(u32::from_le_bytes(b) as usize);
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(corrupt(path, "trailing bytes"));
    }

    maps.into_iter()
        .zip(labels)
        .map(|(data, label)| {
            Ok(Sample {
                feature_map: FeatureMap::new(h, w, l, data)?,
                label,
                part_cells: Vec::new(),
            })
        })
        .collect()
}
