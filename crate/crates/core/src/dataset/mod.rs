//! Image decoding and directory-per-class dataset ingestion.

mod image;
mod netpbm;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use image::{luma, Image};
pub use netpbm::{decode_netpbm, encode_netpbm};

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unsupported image format (magic {0:?}); only binary P5/P6 NetPBM is supported")]
    UnsupportedFormat(String),
    #[error("malformed NetPBM header: {0}")]
    Header(String),
    #[error("maxval {0} is not supported (must be at most 255)")]
    UnsupportedMaxval(usize),
    #[error("truncated pixel data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} unexpected bytes after the pixel data")]
    TrailingData(usize),
    #[error("image has no pixels")]
    EmptyImage,
    #[error("unsupported channel count {0}")]
    Channels(usize),
    #[error("pixel buffer holds {actual} bytes, expected {expected}")]
    PixelCount { expected: usize, actual: usize },
    #[error("crop {rect:?} exceeds image size {size:?}")]
    CropOutOfBounds { rect: [usize; 4], size: [usize; 2] },
    #[error("class directory {0:?} contains no images")]
    EmptyClass(String),
    #[error("{0} contains no class directories")]
    NoClasses(PathBuf),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<DatasetError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("test fraction {0} outside [0, 1]")]
    Fraction(f64),
}

/// One training example: a `[3, H, W]` tensor in `[0, 1]` and its class.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub source: PathBuf,
}

impl Sample {
    pub fn one_hot(&self, num_classes: usize) -> Vec<f32> {
        let mut v = vec![0.0; num_classes];
        v[self.label] = 1.0;
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    /// Sorted ascending; a sample's label indexes this list.
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_image(path: &Path) -> Result<Image, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_netpbm(&bytes).map_err(|e| DatasetError::File {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

pub fn write_image(path: &Path, img: &Image) -> Result<(), DatasetError> {
    fs::write(path, encode_netpbm(img)).map_err(io_err(path))
}

pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Decodes an image for the classifier: RGB, resized to `size × size`,
/// scaled to `[0, 1]`.
pub fn image_to_input(img: &Image, size: usize) -> Result<Tensor, DatasetError> {
    Ok(img.to_rgb().resize_bilinear(size, size)?.to_tensor())
}

/// Loads `root/<class>/*.{pgm,ppm,pnm}`. Labels follow the byte order of
/// the class directory names.
pub fn load_dataset(root: &Path, size: usize) -> Result<LabeledDataset, DatasetError> {
    let mut classes: Vec<(String, PathBuf)> = fs::read_dir(root)
        .map_err(io_err(root))?
        .map(|e| e.map_err(io_err(root)))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    if classes.is_empty() {
        return Err(DatasetError::NoClasses(root.to_path_buf()));
    }
    classes.sort();

    let mut jobs = Vec::new();
    for (label, (name, dir)) in classes.iter().enumerate() {
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(DatasetError::EmptyClass(name.clone()));
        }
        jobs.extend(files.into_iter().map(|f| (label, f)));
    }
    let samples = jobs
        .into_par_iter()
        .map(|(label, source)| {
            let img = read_image(&source)?;
            let image = image_to_input(&img, size).map_err(|e| DatasetError::File {
                path: source.clone(),
                source: Box::new(e),
            })?;
            Ok(Sample { image, label, source })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    Ok(LabeledDataset {
        samples,
        class_names: classes.into_iter().map(|(n, _)| n).collect(),
    })
}

/// Stratified seeded split: within each class, shuffle, then the first
/// `round(test_fraction · n)` samples go to the test set. Both halves keep
/// the original sample order.
pub fn split(
    data: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DatasetError> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(DatasetError::Fraction(test_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; data.samples.len()];
    for class in 0..data.class_names.len() {
        let mut members: Vec<usize> = (0..data.samples.len())
            .filter(|&i| data.samples[i].label == class)
            .collect();
        members.shuffle(&mut rng);
        let n_test = (test_fraction * members.len() as f64).round() as usize;
        for &i in &members[..n_test] {
            is_test[i] = true;
        }
    }
    let pick = |want: bool| LabeledDataset {
        samples: data
            .samples
            .iter()
            .zip(&is_test)
            .filter(|(_, &t)| t == want)
            .map(|(s, _)| s.clone())
            .collect(),
        class_names: data.class_names.clone(),
    };
    Ok((pick(false), pick(true)))
}
