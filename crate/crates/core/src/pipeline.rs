//! Region proposal by the cascade followed by CNN classification of each
//! proposed square.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnn::{argmax, CnnError, CnnModel};
use crate::dataset::{image_to_input, read_image, DatasetError, Image};
use crate::haar::{detect, Cascade, HaarError, IntegralImage, ScanConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error(transparent)]
    Haar(#[from] HaarError),
    #[error("{0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub scan: ScanConfig,
    /// Detections whose top class probability is below this are dropped.
    pub min_probability: f32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scan: ScanConfig::default(),
            min_probability: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.min_probability) {
            return Err(PipelineError::Config(format!(
                "min probability {} outside [0, 1]",
                self.min_probability
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDetection {
    pub x: usize,
    pub y: usize,
    pub side: usize,
    pub class_name: String,
    pub class_index: usize,
    /// Top probability of the CNN output for the crop.
    pub probability: f32,
    pub cascade_score: f64,
}

fn input_side(model: &CnnModel) -> Result<usize, PipelineError> {
    let [c, h, w] = model.input_shape();
    if c != 3 || h != w {
        return Err(PipelineError::Config(format!(
            "model input {:?} is not a square RGB image",
            model.input_shape()
        )));
    }
    Ok(h)
}

/// Class probabilities for an image, best first. Gray images are
/// replicated to RGB and everything is resized to the model's input size.
pub fn classify(model: &CnnModel, image: &Image) -> Result<Vec<(String, f32)>, PipelineError> {
    let probs = model.predict(&image_to_input(image, input_side(model)?)?)?;
    let mut ranked: Vec<(usize, f32)> = probs.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .map(|(i, p)| (model.class_names()[i].clone(), p))
        .collect())
}

pub fn classify_image(model: &CnnModel, path: &Path) -> Result<Vec<(String, f32)>, PipelineError> {
    classify(model, &read_image(path)?)
}

/// Cascade proposals on the frame's luma, each cropped from the original
/// frame and classified. Output is sorted by probability, best first.
pub fn two_stage_detect(
    frame: &Image,
    cascade: &Cascade,
    cnn: &CnnModel,
    config: &PipelineConfig,
) -> Result<Vec<LabeledDetection>, PipelineError> {
    config.validate()?;
    let side = input_side(cnn)?;
    let ii = IntegralImage::from_image(frame)?;
    let proposals = detect(cascade, &ii, &config.scan)?;
    let labeled: Vec<Option<LabeledDetection>> = proposals
        .par_iter()
        .map(|d| {
            let crop = frame.crop(d.x, d.y, d.side, d.side)?;
            let probs = cnn.predict(&image_to_input(&crop, side)?)?;
            let k = argmax(&probs);
            Ok((probs[k] >= config.min_probability).then(|| LabeledDetection {
                x: d.x,
                y: d.y,
                side: d.side,
                class_name: cnn.class_names()[k].clone(),
                class_index: k,
                probability: probs[k],
                cascade_score: d.score,
            }))
        })
        .collect::<Result<_, PipelineError>>()?;
    let mut out: Vec<LabeledDetection> = labeled.into_iter().flatten().collect();
    out.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then(b.cascade_score.total_cmp(&a.cascade_score))
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::Architecture;
    use crate::haar::{FeatureKind, HaarFeature, Stage, WeakClassifier};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cnn() -> CnnModel {
        let arch = Architecture {
            conv_channels: vec![4, 4],
            kernel: 3,
            dropout: 0.25,
            dense_widths: vec![],
        };
        CnnModel::new(arch.layer_specs(3), [3, 16, 16], ["x", "y", "z"].map(String::from).to_vec(), 4).unwrap()
    }

    fn accept_all(window: usize) -> Cascade {
        Cascade {
            window,
            stages: vec![Stage {
                classifiers: vec![WeakClassifier {
                    feature: HaarFeature::new(FeatureKind::TwoHorizontal, 0, 0, 1, 1),
                    threshold: f32::INFINITY,
                    polarity: 1,
                    alpha: 1.0,
                    error: 0.1,
                }],
                threshold: 1.0,
            }],
            reports: vec![],
            achieved_fpr: None,
            negatives_exhausted: false,
        }
    }

    fn noise(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::rgb(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn ranked_probabilities_sum_to_one() {
        let r = classify(&cnn(), &noise(20, 11, 0)).unwrap();
        assert_eq!(r.len(), 3);
        assert!((r.iter().map(|x| x.1).sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(r.windows(2).all(|p| p[0].1 >= p[1].1));
        assert_eq!(r, classify(&cnn(), &noise(20, 11, 0)).unwrap());
    }

    #[test]
    fn no_proposals_means_no_detections() {
        let mut reject = accept_all(12);
        reject.stages[0].threshold = 2.0;
        let out = two_stage_detect(&noise(40, 40, 1), &reject, &cnn(), &PipelineConfig::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn labels_are_the_argmax_of_the_crop() {
        let frame = noise(30, 30, 2);
        let config = PipelineConfig {
            scan: ScanConfig { min_neighbors: 1, group_iou: 2.0, ..ScanConfig::default() },
            min_probability: 0.0,
        };
        let out = two_stage_detect(&frame, &accept_all(12), &cnn(), &config).unwrap();
        assert!(!out.is_empty());
        for d in &out {
            let crop = frame.crop(d.x, d.y, d.side, d.side).unwrap();
            let top = classify(&cnn(), &crop).unwrap()[0].clone();
            assert_eq!((d.class_name.clone(), d.probability), top);
        }
        assert!(out.windows(2).all(|p| p[0].probability >= p[1].probability));
        assert_eq!(out, two_stage_detect(&frame, &accept_all(12), &cnn(), &config).unwrap());
    }

    #[test]
    fn raising_the_threshold_never_adds_detections() {
        let frame = noise(30, 30, 3);
        let mut config = PipelineConfig {
            scan: ScanConfig { min_neighbors: 1, group_iou: 2.0, ..ScanConfig::default() },
            min_probability: 0.0,
        };
        let mut last = usize::MAX;
        for t in [0.0, 0.34, 0.36, 0.4, 0.5, 1.0] {
            config.min_probability = t;
            let n = two_stage_detect(&frame, &accept_all(12), &cnn(), &config).unwrap().len();
            assert!(n <= last);
            last = n;
        }
        config.min_probability = 1.5;
        assert!(two_stage_detect(&frame, &accept_all(12), &cnn(), &config).is_err());
    }
}
