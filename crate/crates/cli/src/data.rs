//! Dataset argument parsing: `idx:tr-img,tr-lbl,te-img,te-lbl` or
//! `csv:path[,test-fraction]`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use prunefuse_core::dataset::{load_dataset, Dataset, DatasetSource};
use prunefuse_core::model_io::file_hash;
use prunefuse_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(Error::Input(format!("unknown split '{other}'"))),
        }
    }
}

pub fn parse_source(s: &str) -> Result<DatasetSource> {
    let (kind, rest) = s
        .split_once(':')
        .ok_or_else(|| Error::Input(format!("dataset spec '{s}' missing ':'")))?;
    match kind {
        "idx" => {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::Input(format!(
                    "idx spec needs 4 comma-separated paths, got {}",
                    parts.len()
                )));
            }
            Ok(DatasetSource::Idx {
                train_images: PathBuf::from(parts[0]),
                train_labels: PathBuf::from(parts[1]),
                test_images: PathBuf::from(parts[2]),
                test_labels: PathBuf::from(parts[3]),
            })
        }
        "csv" => {
            let (path, frac) = match rest.rsplit_once(',') {
                Some((p, f)) if f.parse::<f32>().is_ok() => (p, f.parse::<f32>().unwrap()),
                _ => (rest, 0.2),
            };
            Ok(DatasetSource::Csv {
                path: PathBuf::from(path),
                test_fraction: frac,
            })
        }
        other => Err(Error::Input(format!("unknown dataset kind '{other}'"))),
    }
}

pub fn load_split(spec: &str, split: Split) -> Result<Dataset> {
    let (train, test) = load_dataset(&parse_source(spec)?)?;
    Ok(match split {
        Split::Train => train,
        Split::Test => test,
    })
}

pub fn load_both(spec: &str) -> Result<(Dataset, Dataset)> {
    load_dataset(&parse_source(spec)?)
}

/// Hashes of every file the dataset spec touches, for run manifests.
pub fn source_hashes(spec: &str) -> Result<BTreeMap<String, String>> {
    let mut hashes = BTreeMap::new();
    let paths = match parse_source(spec)? {
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => vec![train_images, train_labels, test_images, test_labels],
        DatasetSource::Csv { path, .. } => vec![path],
    };
    for p in paths {
        hashes.insert(
            p.display().to_string(),
            format!("{:016x}", file_hash(&p)?),
        );
    }
    Ok(hashes)
}
