//! Binary model files: a 5-byte magic, a little-endian `u32` header length,
//! a JSON header, then every parameter as a little-endian `f32`.
//!
//! `SADM1` holds a CNN: the header lists layers, input shape, class names
//! and parameter shapes; the payload is the weight then bias of each
//! parameterised layer in layer order. `SADC1` holds a cascade: the header
//! lists feature geometry and polarity per weak classifier plus training
//! metadata; the payload is `threshold, alpha` per weak classifier followed
//! by the stage threshold, stage by stage.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnn::{CnnModel, LayerParams, LayerSpec};
use crate::haar::{Cascade, HaarFeature, Stage, StageReport, WeakClassifier};
use crate::tensor::Tensor;

pub const CNN_MAGIC: &[u8; 5] = b"SADM1";
pub const CASCADE_MAGIC: &[u8; 5] = b"SADC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("unknown model magic {0:?}")]
    UnknownMagic(Vec<u8>),
    #[error("expected a {expected} file")]
    WrongKind { expected: &'static str },
    #[error("format version {0} is newer than the supported version {FORMAT_VERSION}")]
    UnsupportedVersion(u32),
    #[error("file truncated in the {0}")]
    Truncated(&'static str),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("header declares {declared} parameters but the payload holds {actual} bytes")]
    CountMismatch { declared: usize, actual: usize },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelIoError + '_ {
    move |source| ModelIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    layer: usize,
    weight: Vec<usize>,
    bias: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CnnHeader {
    version: u32,
    input_shape: [usize; 3],
    class_names: Vec<String>,
    layers: Vec<LayerSpec>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeakEntry {
    feature: HaarFeature,
    polarity: i8,
    error: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CascadeHeader {
    version: u32,
    window: usize,
    stages: Vec<Vec<WeakEntry>>,
    reports: Vec<StageReport>,
    achieved_fpr: Option<f64>,
    negatives_exhausted: bool,
}

fn write_file(sink: &mut dyn Write, magic: &[u8; 5], header: &[u8], payload: &[f32]) -> std::io::Result<usize> {
    let len = u32::try_from(header.len()).map_err(|_| std::io::Error::other("header exceeds 4 GiB"))?;
    sink.write_all(magic)?;
    sink.write_all(&len.to_le_bytes())?;
    sink.write_all(header)?;
    let mut bytes = Vec::with_capacity(payload.len() * 4);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&bytes)?;
    Ok(5 + 4 + header.len() + bytes.len())
}

/// Splits a file into magic, header text and payload floats. The payload
/// must hold exactly `count(header)` values.
fn split_file<'a>(bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8], &'a [u8]), ModelIoError> {
    if bytes.len() < 5 {
        return Err(ModelIoError::Truncated("magic"));
    }
    let magic = &bytes[..5];
    if magic != CNN_MAGIC && magic != CASCADE_MAGIC {
        return Err(ModelIoError::UnknownMagic(magic.to_vec()));
    }
    let len_bytes: [u8; 4] = bytes
        .get(5..9)
        .ok_or(ModelIoError::Truncated("header length"))?
        .try_into()
        .expect("four bytes");
    let len = u32::from_le_bytes(len_bytes) as usize;
    let header = bytes.get(9..9 + len).ok_or(ModelIoError::Truncated("header"))?;
    Ok((magic, header, &bytes[9 + len..]))
}

fn check_version(header: &[u8]) -> Result<(), ModelIoError> {
    #[derive(Deserialize)]
    struct Version {
        version: u32,
    }
    let v: Version = serde_json::from_slice(header).map_err(|e| ModelIoError::Header(e.to_string()))?;
    if v.version > FORMAT_VERSION {
        return Err(ModelIoError::UnsupportedVersion(v.version));
    }
    Ok(())
}

fn read_payload(payload: &[u8], declared: usize) -> Result<Vec<f32>, ModelIoError> {
    if payload.len() < declared * 4 {
        return Err(ModelIoError::Truncated("payload"));
    }
    if payload.len() != declared * 4 {
        return Err(ModelIoError::CountMismatch {
            declared,
            actual: payload.len(),
        });
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_cnn(model: &CnnModel, sink: &mut dyn Write) -> Result<usize, ModelIoError> {
    let params = model
        .params()
        .iter()
        .enumerate()
        .filter_map(|(layer, p)| {
            p.as_ref().map(|p| ParamEntry {
                layer,
                weight: p.weight.shape().to_vec(),
                bias: p.bias.shape().to_vec(),
            })
        })
        .collect();
    let header = CnnHeader {
        version: FORMAT_VERSION,
        input_shape: model.input_shape(),
        class_names: model.class_names().to_vec(),
        layers: model.specs().to_vec(),
        params,
    };
    let header = serde_json::to_vec(&header).map_err(|e| ModelIoError::Header(e.to_string()))?;
    let payload: Vec<f32> = model.param_tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
    write_file(sink, CNN_MAGIC, &header, &payload).map_err(io_err(Path::new("<sink>")))
}

pub fn load_cnn(bytes: &[u8]) -> Result<CnnModel, ModelIoError> {
    let (magic, header, payload) = split_file(bytes)?;
    if magic != CNN_MAGIC {
        return Err(ModelIoError::WrongKind { expected: "CNN" });
    }
    check_version(header)?;
    let header: CnnHeader = serde_json::from_slice(header).map_err(|e| ModelIoError::Header(e.to_string()))?;
    let mut declared = 0usize;
    for p in &header.params {
        if p.layer >= header.layers.len() {
            return Err(ModelIoError::Header(format!("parameter entry for missing layer {}", p.layer)));
        }
        for shape in [&p.weight, &p.bias] {
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| ModelIoError::Header("parameter shape overflows".into()))?;
            declared = declared
                .checked_add(n)
                .ok_or_else(|| ModelIoError::Header("parameter count overflows".into()))?;
        }
    }
    let values = read_payload(payload, declared)?;
    let mut params: Vec<Option<LayerParams>> = vec![None; header.layers.len()];
    let mut offset = 0;
    let mut take = |shape: &[usize]| -> Result<Tensor, ModelIoError> {
        let n: usize = shape.iter().product();
        let t = Tensor::from_vec(shape, values[offset..offset + n].to_vec()).map_err(|e| ModelIoError::Invalid(e.to_string()))?;
        offset += n;
        Ok(t)
    };
    for p in &header.params {
        if params[p.layer].is_some() {
            return Err(ModelIoError::Header(format!("layer {} listed twice", p.layer)));
        }
        params[p.layer] = Some(LayerParams {
            weight: take(&p.weight)?,
            bias: take(&p.bias)?,
        });
    }
    CnnModel::from_parts(header.layers, header.input_shape, header.class_names, params)
        .map_err(|e| ModelIoError::Invalid(e.to_string()))
}

pub fn save_cascade(cascade: &Cascade, sink: &mut dyn Write) -> Result<usize, ModelIoError> {
    validate_cascade(cascade)?;
    let header = CascadeHeader {
        version: FORMAT_VERSION,
        window: cascade.window,
        stages: cascade
            .stages
            .iter()
            .map(|s| {
                s.classifiers
                    .iter()
                    .map(|w| WeakEntry {
                        feature: w.feature,
                        polarity: w.polarity,
                        error: w.error,
                    })
                    .collect()
            })
            .collect(),
        reports: cascade.reports.clone(),
        achieved_fpr: cascade.achieved_fpr,
        negatives_exhausted: cascade.negatives_exhausted,
    };
    let header = serde_json::to_vec(&header).map_err(|e| ModelIoError::Header(e.to_string()))?;
    let mut payload = Vec::new();
    for stage in &cascade.stages {
        for w in &stage.classifiers {
            payload.push(w.threshold);
            payload.push(w.alpha);
        }
        payload.push(stage.threshold);
    }
    write_file(sink, CASCADE_MAGIC, &header, &payload).map_err(io_err(Path::new("<sink>")))
}

fn validate_cascade(cascade: &Cascade) -> Result<(), ModelIoError> {
    if cascade.window < 2 {
        return Err(ModelIoError::Invalid(format!("window {} too small", cascade.window)));
    }
    for (i, stage) in cascade.stages.iter().enumerate() {
        if stage.classifiers.is_empty() {
            return Err(ModelIoError::Invalid(format!("stage {i} has no classifiers")));
        }
        for w in &stage.classifiers {
            if !w.feature.fits(cascade.window) {
                return Err(ModelIoError::Invalid(format!(
                    "stage {i}: {:?} does not fit the {}px window",
                    w.feature, cascade.window
                )));
            }
            if w.polarity != 1 && w.polarity != -1 {
                return Err(ModelIoError::Invalid(format!("stage {i}: polarity {}", w.polarity)));
            }
            if w.threshold.is_nan() || !w.alpha.is_finite() {
                return Err(ModelIoError::Invalid(format!("stage {i}: non-finite parameters")));
            }
        }
        if !stage.threshold.is_finite() {
            return Err(ModelIoError::Invalid(format!("stage {i}: non-finite threshold")));
        }
    }
    Ok(())
}

pub fn load_cascade(bytes: &[u8]) -> Result<Cascade, ModelIoError> {
    let (magic, header, payload) = split_file(bytes)?;
    if magic != CASCADE_MAGIC {
        return Err(ModelIoError::WrongKind { expected: "cascade" });
    }
    check_version(header)?;
    let header: CascadeHeader = serde_json::from_slice(header).map_err(|e| ModelIoError::Header(e.to_string()))?;
    let declared: usize = header.stages.iter().map(|s| 2 * s.len() + 1).sum();
    let values = read_payload(payload, declared)?;
    let mut it = values.into_iter();
    let mut next = || it.next().expect("payload length checked");
    let stages = header
        .stages
        .into_iter()
        .map(|entries| {
            let classifiers = entries
                .into_iter()
                .map(|e| WeakClassifier {
                    feature: e.feature,
                    threshold: next(),
                    polarity: e.polarity,
                    alpha: next(),
                    error: e.error,
                })
                .collect();
            Stage {
                classifiers,
                threshold: next(),
            }
        })
        .collect();
    let cascade = Cascade {
        window: header.window,
        stages,
        reports: header.reports,
        achieved_fpr: header.achieved_fpr,
        negatives_exhausted: header.negatives_exhausted,
    };
    validate_cascade(&cascade)?;
    Ok(cascade)
}

/// Either kind of model file.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Cnn(CnnModel),
    Cascade(Cascade),
}

/// Loads whichever model the magic announces.
pub fn load_model(source: &mut dyn Read) -> Result<Model, ModelIoError> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(io_err(Path::new("<source>")))?;
    match bytes.get(..5) {
        Some(m) if m == CNN_MAGIC => load_cnn(&bytes).map(Model::Cnn),
        Some(m) if m == CASCADE_MAGIC => load_cascade(&bytes).map(Model::Cascade),
        Some(m) => Err(ModelIoError::UnknownMagic(m.to_vec())),
        None => Err(ModelIoError::Truncated("magic")),
    }
}

pub fn save_model(model: &Model, sink: &mut dyn Write) -> Result<usize, ModelIoError> {
    match model {
        Model::Cnn(m) => save_cnn(m, sink),
        Model::Cascade(c) => save_cascade(c, sink),
    }
}

pub fn save_cnn_file(model: &CnnModel, path: &Path) -> Result<usize, ModelIoError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let n = save_cnn(model, &mut out)?;
    out.flush().map_err(io_err(path))?;
    Ok(n)
}

pub fn save_cascade_file(cascade: &Cascade, path: &Path) -> Result<usize, ModelIoError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let n = save_cascade(cascade, &mut out)?;
    out.flush().map_err(io_err(path))?;
    Ok(n)
}

pub fn load_cnn_file(path: &Path) -> Result<CnnModel, ModelIoError> {
    load_cnn(&std::fs::read(path).map_err(io_err(path))?)
}

pub fn load_cascade_file(path: &Path) -> Result<Cascade, ModelIoError> {
    load_cascade(&std::fs::read(path).map_err(io_err(path))?)
}
