use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{AdamConfig, AdamState};
use super::model::{CnnModel, Gradients};
use super::{CnnError, Mode};
use crate::dataset::LabeledDataset;
use crate::tensor::{Scalar, Tensor};

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_SALT: u64 = 0x6a09_e667_f3bc_c908;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Drives shuffling and dropout masks. Weight init takes its own seed
    /// in [`CnnModel::new`]; the CLI passes the same value to both.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean training-mode cross-entropy over the epoch's samples.
    pub loss: f64,
    /// Inference-mode accuracy on the full training set after the epoch.
    pub accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn dropout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_SALT);
    rng.set_stream(stream);
    rng
}

fn as_batch<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>, CnnError> {
    if image.rank() == 4 {
        return Ok(image.clone());
    }
    let s = image.shape();
    Ok(image.clone().reshape(&[1, s[0], s[1], s[2]])?)
}

/// Forward + backward for one sample. Returns its cross-entropy, whether
/// the training-mode prediction was right, and the gradients of its loss.
pub(crate) fn sample_gradients<T: Scalar>(
    model: &CnnModel<T>,
    image: &Tensor<T>,
    label: usize,
    rng: &mut dyn RngCore,
) -> Result<(f64, Gradients<T>), CnnError> {
    let input = as_batch(image)?;
    let pass = model.forward(&input, Mode::Train, Some(rng))?;
    let k = model.num_classes();
    let mut onehot = Tensor::zeros(&[1, k])?;
    onehot.data_mut()[label] = T::one();
    let (loss, grad) = super::layers::categorical_cross_entropy(&pass.probs, &onehot)?;
    Ok((loss.as_f64(), model.backward(&pass, &grad)?))
}

fn accumulate<T: Scalar>(acc: &mut Gradients<T>, g: &Gradients<T>) -> Result<(), CnnError> {
    for (a, b) in acc.iter_mut().zip(g) {
        if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
            a.weight.add_assign(&b.weight)?;
            a.bias.add_assign(&b.bias)?;
        }
    }
    Ok(())
}

/// Mean loss and mean gradient over a batch. Samples are processed in
/// parallel, but their gradients are summed in batch order so the result
/// does not depend on thread scheduling.
pub(crate) fn batch_gradients<T: Scalar>(
    model: &CnnModel<T>,
    batch: &[(&Tensor<T>, usize)],
    dropout_seed: u64,
    first_stream: u64,
) -> Result<(f64, Gradients<T>), CnnError> {
    let per_sample: Vec<(f64, Gradients<T>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, &(image, label))| {
            let mut rng = dropout_rng(dropout_seed, first_stream + i as u64);
            sample_gradients(model, image, label, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or(CnnError::EmptyDataset)?;
    for (l, g) in iter {
        loss += l;
        accumulate(&mut grads, &g)?;
    }
    let inv = T::of(1.0 / batch.len() as f64);
    for p in grads.iter_mut().flatten() {
        p.weight.scale(inv);
        p.bias.scale(inv);
    }
    Ok((loss / batch.len() as f64, grads))
}

fn check_dataset(model: &CnnModel, data: &LabeledDataset) -> Result<(), CnnError> {
    if data.samples.is_empty() {
        return Err(CnnError::EmptyDataset);
    }
    let [c, h, w] = model.input_shape();
    for s in &data.samples {
        if s.label >= model.num_classes() {
            return Err(CnnError::Label(format!(
                "{}: label {} but the model has {} classes",
                s.source.display(),
                s.label,
                model.num_classes()
            )));
        }
        if s.image.shape() != [c, h, w] {
            return Err(CnnError::Shape(format!(
                "{}: image shape {:?}, model expects {:?}",
                s.source.display(),
                s.image.shape(),
                [c, h, w]
            )));
        }
    }
    Ok(())
}

pub fn fit(model: &mut CnnModel, train: &LabeledDataset, config: &TrainConfig) -> Result<Vec<EpochStats>, CnnError> {
    fit_with(model, train, None, config, |_| {})
}

/// Trains with mini-batch Adam on categorical cross-entropy. Fully
/// determined by the model's initial parameters and `config.seed`.
pub fn fit_with(
    model: &mut CnnModel,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>, CnnError> {
    if config.batch_size == 0 {
        return Err(CnnError::Config("batch size must be at least 1".into()));
    }
    check_dataset(model, train)?;
    if let Some(t) = test {
        if !t.samples.is_empty() {
            check_dataset(model, t)?;
        }
    }
    let n = train.samples.len();
    let mut adam = AdamState::new(config.adam, &model.param_tensors());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(&Tensor, usize)> = chunk
                .iter()
                .map(|&i| (&train.samples[i].image, train.samples[i].label))
                .collect();
            let stream = (epoch * n + b * config.batch_size) as u64;
            let (loss, grads) = batch_gradients(model, &batch, config.seed, stream)?;
            loss_sum += loss * batch.len() as f64;
            let grad_refs: Vec<&Tensor> = grads.iter().flatten().flat_map(|p| [&p.weight, &p.bias]).collect();
            adam.step(&mut model.param_tensors_mut(), &grad_refs)?;
        }
        let train_eval = evaluate(model, train)?;
        let test_accuracy = match test {
            Some(t) if !t.samples.is_empty() => Some(evaluate(model, t)?.accuracy),
            _ => None,
        };
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / n as f64,
            accuracy: train_eval.accuracy,
            test_accuracy,
        };
        log::info!("epoch {} loss {:.4} acc {:.4}", stats.epoch, stats.loss, stats.accuracy);
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

/// Inference-mode accuracy, mean loss and confusion matrix.
pub fn evaluate(model: &CnnModel, data: &LabeledDataset) -> Result<Evaluation, CnnError> {
    check_dataset(model, data)?;
    let k = model.num_classes();
    let probs: Vec<Vec<f32>> = data
        .samples
        .par_iter()
        .map(|s| model.predict(&s.image))
        .collect::<Result<_, _>>()?;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (s, p) in data.samples.iter().zip(&probs) {
        let pred = argmax(p);
        confusion[s.label][pred] += 1;
        if pred == s.label {
            correct += 1;
        }
        loss -= (p[s.label] as f64).max(super::layers::PROB_FLOOR).ln();
    }
    let n = data.samples.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::Architecture;
    use crate::dataset::Sample;
    use rand::Rng;

    fn tiny_arch() -> Architecture {
        Architecture {
            conv_channels: vec![4, 8],
            kernel: 3,
            dropout: 0.25,
            dense_widths: vec![8, 8],
        }
    }

    /// Two classes: horizontal vs vertical stripes, with noise.
    fn halves(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let mut data = vec![0f32; 3 * 8 * 8];
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        let lit = if label == 0 { y % 2 == 0 } else { x % 2 == 0 };
                        data[(c * 8 + y) * 8 + x] = if lit { 0.8 } else { 0.2 } + rng.gen_range(-0.1..0.1);
                    }
                }
            }
            samples.push(Sample {
                image: Tensor::from_vec(&[3, 8, 8], data).unwrap(),
                label,
                source: format!("mem/{i}").into(),
            });
        }
        LabeledDataset {
            samples,
            class_names: vec!["horizontal".into(), "vertical".into()],
        }
    }

    fn model(seed: u64) -> CnnModel {
        CnnModel::new(tiny_arch().layer_specs(2), [3, 8, 8], vec!["horizontal".into(), "vertical".into()], seed).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = halves(10, 1);
        let mut m = model(2);
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            seed: 3,
        };
        let hist = fit(&mut m, &data, &cfg).unwrap();
        assert_eq!(hist.len(), 1);
        assert_eq!(hist[0].epoch, 1);
        assert_eq!(m, before);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let data = halves(24, 4);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            seed: 9,
        };
        let mut a = model(5);
        let mut b = model(5);
        let ha = fit(&mut a, &data, &cfg).unwrap();
        let hb = fit(&mut b, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn learns_an_easy_split() {
        let data = halves(64, 6);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            seed: 7,
        };
        let mut m = model(8);
        let hist = fit(&mut m, &data, &cfg).unwrap();
        assert!(hist.last().unwrap().accuracy >= 0.95, "{hist:?}");
        let eval = evaluate(&m, &data).unwrap();
        assert_eq!(eval.accuracy, hist.last().unwrap().accuracy);
        assert_eq!(eval.confusion.iter().flatten().sum::<usize>(), 64);
    }

    #[test]
    fn parallel_batch_equals_serial_sum() {
        let data = halves(6, 10);
        let m = model(11).cast::<f64>();
        let images: Vec<Tensor<f64>> = data.samples.iter().map(|s| s.image.cast()).collect();
        let batch: Vec<(&Tensor<f64>, usize)> = images.iter().zip(data.samples.iter().map(|s| s.label)).collect();
        let (loss, grads) = batch_gradients(&m, &batch, 12, 100).unwrap();

        let mut serial_loss = 0.0;
        let mut serial: Option<Gradients<f64>> = None;
        for (i, &(img, label)) in batch.iter().enumerate() {
            let mut rng = dropout_rng(12, 100 + i as u64);
            let (l, g) = sample_gradients(&m, img, label, &mut rng).unwrap();
            serial_loss += l;
            match serial.as_mut() {
                None => serial = Some(g),
                Some(acc) => accumulate(acc, &g).unwrap(),
            }
        }
        let mut serial = serial.unwrap();
        for p in serial.iter_mut().flatten() {
            p.weight.scale(1.0 / 6.0);
            p.bias.scale(1.0 / 6.0);
        }
        assert_eq!(loss, serial_loss / 6.0);
        assert_eq!(grads, serial);
    }

    #[test]
    fn dataset_errors() {
        let mut m = model(1);
        let empty = LabeledDataset {
            samples: vec![],
            class_names: vec!["horizontal".into(), "vertical".into()],
        };
        assert!(matches!(fit(&mut m, &empty, &TrainConfig::default()), Err(CnnError::EmptyDataset)));
        let mut bad = halves(4, 1);
        bad.samples[2].label = 7;
        assert!(matches!(fit(&mut m, &bad, &TrainConfig::default()), Err(CnnError::Label(_))));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }
}
