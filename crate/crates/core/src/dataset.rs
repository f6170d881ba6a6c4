//! Dataset ingestion: IDX image files and CSV rows, plus batching helpers.

use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Flat row-major features, `examples * product(example_shape)` long.
    pub features: Vec<f32>,
    pub example_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_len(&self) -> usize {
        self.example_shape.iter().product()
    }

    /// Batch tensor `[indices.len(), ..example_shape]` plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let el = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * el);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.features[i * el..(i + 1) * el]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.example_shape);
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    pub fn full_batch(&self) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Subset in the given index order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let el = self.example_len();
        let mut features = Vec::with_capacity(indices.len() * el);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(&self.features[i * el..(i + 1) * el]);
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            example_shape: self.example_shape.clone(),
            labels,
            classes: self.classes,
        }
    }

    /// Reinterpret each example under a new shape of equal length, e.g.
    /// `[1, 8, 8]` images as `[64]` vectors for an MLP.
    pub fn with_example_shape(mut self, shape: &[usize]) -> Result<Dataset> {
        let new_len: usize = shape.iter().product();
        if new_len != self.example_len() {
            return Err(Error::Input(format!(
                "cannot view {:?} examples as {shape:?}",
                self.example_shape
            )));
        }
        self.example_shape = shape.to_vec();
        Ok(self)
    }

    /// In-place per-feature affine normalization `x -> (x - mean) / scale`.
    pub fn normalize(&mut self, mean: &[f32], scale: &[f32]) -> Result<()> {
        let el = self.example_len();
        if mean.len() != el || scale.len() != el {
            return Err(Error::Input(format!(
                "normalization length {} vs feature length {el}",
                mean.len()
            )));
        }
        if scale.iter().any(|&s| s == 0.0) {
            return Err(Error::Input("zero normalization scale".into()));
        }
        for (i, v) in self.features.iter_mut().enumerate() {
            let f = i % el;
            *v = (*v - mean[f]) / scale[f];
        }
        Ok(())
    }
}

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated IDX header".into()))?;
    Ok(u32::from_be_bytes(b))
}

/// Load an IDX image/label file pair. Pixels are scaled to [0, 1].
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let mut ir = std::io::BufReader::new(std::fs::File::open(images)?);
    let magic = read_u32_be(&mut ir)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(&mut ir)? as usize;
    let h = read_u32_be(&mut ir)? as usize;
    let w = read_u32_be(&mut ir)? as usize;
    let mut pixels = vec![0u8; n * h * w];
    ir.read_exact(&mut pixels)
        .map_err(|_| Error::Format("truncated IDX image payload".into()))?;

    let mut lr = std::io::BufReader::new(std::fs::File::open(labels)?);
    let lmagic = read_u32_be(&mut lr)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "IDX label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let ln = read_u32_be(&mut lr)? as usize;
    if ln != n {
        return Err(Error::Format(format!("{n} images but {ln} labels")));
    }
    let mut raw_labels = vec![0u8; ln];
    lr.read_exact(&mut raw_labels)
        .map_err(|_| Error::Format("truncated IDX label payload".into()))?;

    let features: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        features,
        example_shape: vec![1, h, w],
        labels,
        classes,
    })
}

/// CSV rows of `feature, ..., feature, integer label`.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::Format(format!("line {}: need features + label", lineno + 1)));
        }
        match width {
            None => width = Some(fields.len() - 1),
            Some(w) if w != fields.len() - 1 => {
                return Err(Error::Format(format!(
                    "line {}: ragged row ({} features, expected {w})",
                    lineno + 1,
                    fields.len() - 1
                )))
            }
            _ => {}
        }
        for f in &fields[..fields.len() - 1] {
            features.push(
                f.trim()
                    .parse::<f32>()
                    .map_err(|_| Error::Format(format!("line {}: bad float '{f}'", lineno + 1)))?,
            );
        }
        labels.push(
            fields[fields.len() - 1]
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("line {}: bad label", lineno + 1)))?,
        );
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        features,
        example_shape: vec![width.unwrap_or(0)],
        labels,
        classes,
    })
}

#[derive(Debug, Clone)]
pub enum DatasetSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        path: PathBuf,
        /// Fraction of trailing rows held out as the test split.
        test_fraction: f32,
    },
}

/// Load train and test splits. Example order is deterministic: file order,
/// before any seeded shuffle a caller may apply.
pub fn load_dataset(source: &DatasetSource) -> Result<(Dataset, Dataset)> {
    match source {
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let mut train = load_idx(train_images, train_labels)?;
            let mut test = load_idx(test_images, test_labels)?;
            let classes = train.classes.max(test.classes);
            train.classes = classes;
            test.classes = classes;
            Ok((train, test))
        }
        DatasetSource::Csv { path, test_fraction } => {
            let all = load_csv(path)?;
            if !(0.0..1.0).contains(test_fraction) {
                return Err(Error::Input(format!("test fraction {test_fraction}")));
            }
            let n_test = (all.len() as f32 * test_fraction).round() as usize;
            let split = all.len() - n_test;
            let train_idx: Vec<usize> = (0..split).collect();
            let test_idx: Vec<usize> = (split..all.len()).collect();
            Ok((all.subset(&train_idx), all.subset(&test_idx)))
        }
    }
}

/// Seeded shuffle of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}
