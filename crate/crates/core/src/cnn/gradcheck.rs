//! Whole-network gradient audit against central finite differences.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{ActivationPattern, CnnModel};
use super::train::{dropout_rng, sample_gradients};
use super::{layers, CnnError, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per parameterised layer (all of them if the
    /// layer is smaller).
    pub coords_per_layer: usize,
    /// Denominator floor for the relative error, so gradients that are
    /// zero up to round-off are compared absolutely.
    pub denom_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            coords_per_layer: 20,
            denom_floor: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LayerCheck {
    pub layer: usize,
    pub checked: usize,
    /// Coordinates where every sample crossed a kink.
    pub skipped: usize,
    /// (coordinate, sample) pairs left out because of a kink crossing.
    pub excluded_samples: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub layers: Vec<LayerCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn sample_loss(
    model: &CnnModel<f64>,
    image: &Tensor<f64>,
    label: usize,
    seed: u64,
    stream: u64,
) -> Result<(f64, ActivationPattern), CnnError> {
    let mut rng = dropout_rng(seed, stream);
    let pass = model.forward(image, Mode::Train, Some(&mut rng))?;
    let mut onehot = Tensor::zeros(&[1, model.num_classes()])?;
    onehot.data_mut()[label] = 1.0;
    let loss = layers::categorical_cross_entropy(&pass.probs, &onehot)?.0;
    Ok((loss, pass.activation_pattern()))
}

/// Compares back-propagated gradients of the cross-entropy with central
/// finite differences, in `f64`, on a random subset of every layer's
/// parameters. Dropout masks are frozen by re-seeding the same per-sample
/// streams for every evaluation.
///
/// For each coordinate, samples whose ±step perturbation flips a ReLU or
/// moves a max-pool winner are left out of both sides of the comparison;
/// the coordinate is compared on the mean over the remaining samples and
/// skipped only if none remain.
pub fn gradient_check(
    model: &CnnModel,
    images: &[Tensor],
    labels: &[usize],
    config: &GradCheckConfig,
) -> Result<GradCheckReport, CnnError> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(CnnError::EmptyDataset);
    }
    let base = model.cast::<f64>();
    let batch: Vec<(Tensor<f64>, usize)> = images
        .iter()
        .zip(labels)
        .map(|(img, &l)| {
            let s = img.shape();
            let img = if img.rank() == 3 {
                img.clone().reshape(&[1, s[0], s[1], s[2]])
            } else {
                Ok(img.clone())
            };
            img.map(|t| (t.cast::<f64>(), l))
        })
        .collect::<Result<_, _>>()?;
    let mut analytic = Vec::with_capacity(batch.len());
    let mut base_patterns = Vec::with_capacity(batch.len());
    for (i, (image, label)) in batch.iter().enumerate() {
        let mut rng = dropout_rng(config.seed, i as u64);
        analytic.push(sample_gradients(&base, image, *label, &mut rng)?.1);
        base_patterns.push(sample_loss(&base, image, *label, config.seed, i as u64)?.1);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport::default();
    for (layer, grads) in analytic[0].iter().enumerate() {
        let Some(grads) = grads else { continue };
        let wlen = grads.weight.len();
        let mut coords: Vec<usize> = (0..wlen + grads.bias.len()).collect();
        coords.shuffle(&mut rng);
        let mut check = LayerCheck {
            layer,
            ..LayerCheck::default()
        };
        for coord in coords {
            if check.checked == config.coords_per_layer {
                break;
            }
            let perturbed = |delta: f64| {
                let mut m = base.clone();
                let p = m.params_mut()[layer].as_mut().expect("layer has params");
                let (t, i) = if coord < wlen {
                    (&mut p.weight, coord)
                } else {
                    (&mut p.bias, coord - wlen)
                };
                t.data_mut()[i] += delta;
                m
            };
            let plus = perturbed(config.step);
            let minus = perturbed(-config.step);
            let (mut a_sum, mut n_sum, mut used) = (0.0, 0.0, 0usize);
            for (i, (image, label)) in batch.iter().enumerate() {
                let (lp, pp) = sample_loss(&plus, image, *label, config.seed, i as u64)?;
                let (lm, pm) = sample_loss(&minus, image, *label, config.seed, i as u64)?;
                if pp != base_patterns[i] || pm != base_patterns[i] {
                    check.excluded_samples += 1;
                    continue;
                }
                let g = analytic[i][layer].as_ref().expect("layer has params");
                a_sum += if coord < wlen {
                    g.weight.data()[coord]
                } else {
                    g.bias.data()[coord - wlen]
                };
                n_sum += (lp - lm) / (2.0 * config.step);
                used += 1;
            }
            if used == 0 {
                check.skipped += 1;
                continue;
            }
            let err = relative_error(a_sum / used as f64, n_sum / used as f64, config.denom_floor);
            check.max_rel_error = check.max_rel_error.max(err);
            check.checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.layers.push(check);
    }
    Ok(report)
}
