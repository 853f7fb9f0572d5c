//! Synthetic longitudinal image pairs, the `CFNI` image format and the
//! manifest CSV.

mod image;
mod manifest;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use image::{decode_image, encode_image, read_image, write_image, ImageFormatError, IMAGE_MAGIC, IMAGE_VERSION};
pub use manifest::{load_manifest, write_manifest, ManifestEntry, MANIFEST_HEADER};
pub use synth::{generate, generate_dataset, generate_subject, subject_plan, GeneratorConfig, NoduleTruth, SyntheticSubject};

use crate::tensor::Array;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageFormatError,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: header must be `{expected}`, found `{found}`")]
    Header { path: PathBuf, expected: String, found: String },
    #[error("{path} line {line}: {message}")]
    Row { path: PathBuf, line: u64, message: String },
    #[error("{path} line {line}: invariant violated: {message}")]
    Invariant { path: PathBuf, line: u64, message: String },
    #[error("subject {subject} appears in both {first} and {second} splits")]
    SplitLeak { subject: String, first: Split, second: Split },
    #[error("missing image file {0}")]
    MissingFile(PathBuf),
    #[error("invalid generator config: {0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Benign,
    Malignant,
    None,
}

impl Label {
    /// Binary target for classifiers; `None` for background-only pairs.
    pub fn target(self) -> Option<f32> {
        match self {
            Label::Benign => Some(0.0),
            Label::Malignant => Some(1.0),
            Label::None => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
            Label::None => "none",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "benign" => Ok(Label::Benign),
            "malignant" => Ok(Label::Malignant),
            "none" => Ok(Label::None),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One subject's baseline/follow-up pair with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePairRecord {
    pub subject_id: String,
    pub pair_id: String,
    pub x0: Array,
    pub x1: Array,
    pub label: Label,
    pub has_nodule: bool,
    pub split: Split,
}

/// Records of one split, in input order.
pub fn split_of(records: &[ImagePairRecord], split: Split) -> Vec<ImagePairRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}
