use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Mode, Padding};
use super::CnnError;
use crate::tensor::{Scalar, Tensor};

/// One entry of the layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        padding: Padding,
    },
    Maxpool2d,
    Dropout {
        rate: f64,
    },
    GlobalAvgPool,
    Dense {
        out_features: usize,
    },
    Relu,
    Softmax,
}

/// Width parameters for the conv-block / dense-head family of networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub dropout: f64,
    /// Hidden dense widths; the classifier layer is appended automatically.
    pub dense_widths: Vec<usize>,
}

impl Default for Architecture {
    /// Four conv blocks (16/32/64/128), global average pooling, and three
    /// dense layers (128, 64, classes).
    fn default() -> Self {
        Self {
            conv_channels: vec![16, 32, 64, 128],
            kernel: 3,
            dropout: 0.25,
            dense_widths: vec![128, 64],
        }
    }
}

impl Architecture {
    pub fn layer_specs(&self, num_classes: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for &c in &self.conv_channels {
            specs.push(LayerSpec::Conv2d {
                out_channels: c,
                kernel: self.kernel,
                padding: Padding::Same,
            });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::Maxpool2d);
            specs.push(LayerSpec::Dropout { rate: self.dropout });
        }
        specs.push(LayerSpec::GlobalAvgPool);
        for &w in &self.dense_widths {
            specs.push(LayerSpec::Dense { out_features: w });
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::Dense {
            out_features: num_classes,
        });
        specs.push(LayerSpec::Softmax);
        specs
    }
}

/// Weight and bias of a conv or dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Per-layer parameter gradients, aligned with [`CnnModel::params`].
pub type Gradients<T> = Vec<Option<LayerParams<T>>>;

/// Checks the conv-block / pooling / dense-head layout and infers every
/// parameter shape. Returns `(weight_shape, bias_shape)` per layer.
fn infer_param_shapes(
    specs: &[LayerSpec],
    input_shape: [usize; 3],
    num_classes: usize,
) -> Result<Vec<Option<(Vec<usize>, Vec<usize>)>>, CnnError> {
    let bad = |msg: String| Err(CnnError::Config(msg));
    let kind_at = |i: usize| specs.get(i);

    let mut i = 0;
    let mut blocks = 0;
    while let Some(LayerSpec::Conv2d { .. }) = kind_at(i) {
        match (kind_at(i + 1), kind_at(i + 2), kind_at(i + 3)) {
            (Some(LayerSpec::Relu), Some(LayerSpec::Maxpool2d), Some(LayerSpec::Dropout { .. })) => {}
            _ => return bad(format!("layer {i}: conv2d must be followed by relu, maxpool2d, dropout")),
        }
        blocks += 1;
        i += 4;
    }
    if blocks == 0 {
        return bad("network must start with at least one conv block".into());
    }
    if kind_at(i) != Some(&LayerSpec::GlobalAvgPool) {
        return bad(format!("layer {i}: expected global_avg_pool after the conv blocks"));
    }
    i += 1;
    loop {
        if !matches!(kind_at(i), Some(LayerSpec::Dense { .. })) {
            return bad(format!("layer {i}: expected dense"));
        }
        match kind_at(i + 1) {
            Some(LayerSpec::Relu) => i += 2,
            Some(LayerSpec::Softmax) if i + 2 == specs.len() => break,
            _ => return bad(format!("layer {}: expected relu, or softmax as the last layer", i + 1)),
        }
    }

    let [mut c, mut h, mut w] = input_shape;
    if c == 0 || h == 0 || w == 0 {
        return bad(format!("input shape {input_shape:?} has a zero dimension"));
    }
    let mut features = 0;
    let mut shapes = Vec::with_capacity(specs.len());
    for (idx, spec) in specs.iter().enumerate() {
        let entry = match *spec {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                padding,
            } => {
                if out_channels == 0 || kernel == 0 {
                    return bad(format!("layer {idx}: conv2d sizes must be positive"));
                }
                if padding == Padding::Same && kernel % 2 == 0 {
                    return bad(format!("layer {idx}: same padding needs an odd kernel"));
                }
                let shape = (vec![out_channels, c, kernel, kernel], vec![out_channels]);
                h = layers::conv_output_size(h, kernel, padding).filter(|&s| s > 0).ok_or_else(|| {
                    CnnError::Config(format!("layer {idx}: input smaller than kernel"))
                })?;
                w = layers::conv_output_size(w, kernel, padding).filter(|&s| s > 0).ok_or_else(|| {
                    CnnError::Config(format!("layer {idx}: input smaller than kernel"))
                })?;
                c = out_channels;
                Some(shape)
            }
            LayerSpec::Maxpool2d => {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
                None
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return bad(format!("layer {idx}: dropout rate {rate} outside [0, 1)"));
                }
                None
            }
            LayerSpec::GlobalAvgPool => {
                features = c;
                None
            }
            LayerSpec::Dense { out_features } => {
                if out_features == 0 {
                    return bad(format!("layer {idx}: dense width must be positive"));
                }
                let shape = (vec![features, out_features], vec![out_features]);
                features = out_features;
                Some(shape)
            }
            LayerSpec::Relu | LayerSpec::Softmax => None,
        };
        shapes.push(entry);
    }
    if features != num_classes {
        return bad(format!(
            "final dense layer has {features} outputs but the model has {num_classes} classes"
        ));
    }
    Ok(shapes)
}

/// A classifier network: layer list, parameters and class names.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel<T = f32> {
    specs: Vec<LayerSpec>,
    input_shape: [usize; 3],
    class_names: Vec<String>,
    params: Vec<Option<LayerParams<T>>>,
}

/// Activations cached by a forward pass for use by [`CnnModel::backward`].
#[derive(Clone, Debug)]
pub(crate) enum Cache<T> {
    Conv { input: Tensor<T> },
    Pool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Dropout { mask: Vec<T> },
    Gap { input_shape: Vec<usize> },
    Dense { input: Tensor<T> },
    Relu { output: Tensor<T> },
    Softmax,
}

#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    pub(crate) caches: Vec<Cache<T>>,
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

/// Which side of every ReLU and max-pool decision a forward pass landed on.
#[derive(Debug, PartialEq, Eq)]
pub(crate) struct ActivationPattern {
    pub(crate) relu: Vec<bool>,
    pub(crate) argmax: Vec<usize>,
}

impl<T: Scalar> ForwardPass<T> {
    pub(crate) fn activation_pattern(&self) -> ActivationPattern {
        let mut relu = Vec::new();
        let mut argmax = Vec::new();
        for cache in &self.caches {
            match cache {
                Cache::Relu { output } => relu.extend(output.data().iter().map(|&v| v > T::zero())),
                Cache::Pool { argmax: a, .. } => argmax.extend_from_slice(a),
                _ => {}
            }
        }
        ActivationPattern { relu, argmax }
    }
}

impl CnnModel<f32> {
    /// Builds a model with Glorot-uniform weights (bound `√(6/(fan_in + fan_out))`) drawn
    /// from `seed`, and zero biases.
    pub fn new(
        specs: Vec<LayerSpec>,
        input_shape: [usize; 3],
        class_names: Vec<String>,
        seed: u64,
    ) -> Result<Self, CnnError> {
        let shapes = infer_param_shapes(&specs, input_shape, class_names.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.len());
        for shape in shapes {
            params.push(match shape {
                Some((ws, bs)) => {
                    let receptive: usize = ws[2..].iter().product();
                    let (fan_in, fan_out) = (ws[1] * receptive, ws[0] * receptive);
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                    let len: usize = ws.iter().product();
                    let w = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
                    Some(LayerParams {
                        weight: Tensor::from_vec(&ws, w)?,
                        bias: Tensor::zeros(&bs)?,
                    })
                }
                None => None,
            });
        }
        Ok(Self {
            specs,
            input_shape,
            class_names,
            params,
        })
    }
}

impl<T: Scalar> CnnModel<T> {
    /// Assembles a model from already-trained parameters (used by the loader).
    pub fn from_parts(
        specs: Vec<LayerSpec>,
        input_shape: [usize; 3],
        class_names: Vec<String>,
        params: Vec<Option<LayerParams<T>>>,
    ) -> Result<Self, CnnError> {
        let shapes = infer_param_shapes(&specs, input_shape, class_names.len())?;
        if params.len() != shapes.len() {
            return Err(CnnError::Config(format!(
                "{} parameter slots for {} layers",
                params.len(),
                shapes.len()
            )));
        }
        for (idx, (p, s)) in params.iter().zip(&shapes).enumerate() {
            let ok = match (p, s) {
                (None, None) => true,
                (Some(p), Some((ws, bs))) => p.weight.shape() == ws.as_slice() && p.bias.shape() == bs.as_slice(),
                _ => false,
            };
            if !ok {
                return Err(CnnError::Config(format!(
                    "layer {idx}: parameters do not match the inferred shape {s:?}"
                )));
            }
        }
        Ok(Self {
            specs,
            input_shape,
            class_names,
            params,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn params(&self) -> &[Option<LayerParams<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams<T>>] {
        &mut self.params
    }

    /// Parameter tensors in canonical order: layer ascending, weight before bias.
    pub fn param_tensors(&self) -> Vec<&Tensor<T>> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| [&p.weight, &p.bias])
            .collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// Spatial size of the activations entering each layer, for a
    /// `(C, H, W)` input. Used to document and test shape inference.
    pub fn activation_shapes(&self) -> Vec<[usize; 3]> {
        let [mut c, mut h, mut w] = self.input_shape;
        let mut out = Vec::with_capacity(self.specs.len() + 1);
        out.push([c, h, w]);
        for spec in &self.specs {
            match *spec {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    padding,
                } => {
                    c = out_channels;
                    h = layers::conv_output_size(h, kernel, padding).unwrap_or(0);
                    w = layers::conv_output_size(w, kernel, padding).unwrap_or(0);
                }
                LayerSpec::Maxpool2d => {
                    h = h.div_ceil(2);
                    w = w.div_ceil(2);
                }
                LayerSpec::GlobalAvgPool => {
                    h = 1;
                    w = 1;
                }
                LayerSpec::Dense { out_features } => c = out_features,
                _ => {}
            }
            out.push([c, h, w]);
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> CnnModel<U> {
        CnnModel {
            specs: self.specs.clone(),
            input_shape: self.input_shape,
            class_names: self.class_names.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weight: p.weight.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
        }
    }

    /// Runs the network on an `[N, C, H, W]` batch. `rng` drives dropout
    /// masks and is required in [`Mode::Train`].
    pub fn forward(
        &self,
        input: &Tensor<T>,
        mode: Mode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardPass<T>, CnnError> {
        let [_, c, h, w] = input.dims4();
        if input.rank() != 4 || [c, h, w] != self.input_shape {
            return Err(CnnError::Shape(format!(
                "model expects [N, {}, {}, {}] input, got {:?}",
                self.input_shape[0],
                self.input_shape[1],
                self.input_shape[2],
                input.shape()
            )));
        }
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.specs.len());
        let mut logits = None;
        for (spec, params) in self.specs.iter().zip(&self.params) {
            let (next, cache) = match (spec, params) {
                (LayerSpec::Conv2d { padding, .. }, Some(p)) => {
                    let y = layers::conv2d_forward(&x, &p.weight, &p.bias, *padding)?;
                    (y, Cache::Conv { input: x })
                }
                (LayerSpec::Dense { .. }, Some(p)) => {
                    let flat = if x.rank() == 2 {
                        x
                    } else {
                        let n = x.dims4()[0];
                        let f = x.len() / n;
                        x.reshape(&[n, f])?
                    };
                    let y = layers::dense_forward(&flat, &p.weight, &p.bias)?;
                    (y, Cache::Dense { input: flat })
                }
                (LayerSpec::Relu, None) => {
                    let y = layers::relu(&x);
                    (y.clone(), Cache::Relu { output: y })
                }
                (LayerSpec::Maxpool2d, None) => {
                    let (y, argmax) = layers::maxpool2d_forward(&x)?;
                    let input_shape = x.shape().to_vec();
                    (y, Cache::Pool { argmax, input_shape })
                }
                (LayerSpec::Dropout { rate }, None) => {
                    let (y, mask) = match (mode, rng.as_deref_mut()) {
                        (Mode::Infer, _) => (x, Vec::new()),
                        (Mode::Train, Some(r)) => layers::dropout(&x, *rate, mode, r)?,
                        (Mode::Train, None) => {
                            return Err(CnnError::Config("training forward pass needs an rng".into()))
                        }
                    };
                    (y, Cache::Dropout { mask })
                }
                (LayerSpec::GlobalAvgPool, None) => {
                    let input_shape = x.shape().to_vec();
                    (layers::global_avg_pool(&x)?, Cache::Gap { input_shape })
                }
                (LayerSpec::Softmax, None) => {
                    let y = layers::softmax(&x)?;
                    logits = Some(x);
                    (y, Cache::Softmax)
                }
                _ => return Err(CnnError::Config("parameters do not match layer list".into())),
            };
            x = next;
            caches.push(cache);
        }
        let logits = logits.ok_or_else(|| CnnError::Config("network has no softmax".into()))?;
        Ok(ForwardPass {
            caches,
            logits,
            probs: x,
        })
    }

    /// Back-propagates `grad_logits` (gradient of the loss with respect to
    /// the softmax input) through the cached pass.
    pub fn backward(&self, pass: &ForwardPass<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>, CnnError> {
        let mut grads: Gradients<T> = vec![None; self.specs.len()];
        let mut g = grad_logits.clone();
        for (idx, cache) in pass.caches.iter().enumerate().rev() {
            g = match cache {
                Cache::Softmax => g,
                Cache::Dense { input } => {
                    let p = self.params[idx].as_ref().expect("dense layer has parameters");
                    let d = layers::dense_backward(&g, input, &p.weight)?;
                    grads[idx] = Some(LayerParams {
                        weight: d.weight,
                        bias: d.bias,
                    });
                    d.input
                }
                Cache::Relu { output } => {
                    let g = if g.shape() == output.shape() { g } else { g.reshape(output.shape())? };
                    layers::relu_backward(&g, output)?
                }
                Cache::Gap { input_shape } => layers::global_avg_pool_backward(&g, input_shape)?,
                Cache::Dropout { mask } => {
                    if mask.is_empty() {
                        g
                    } else {
                        layers::dropout_backward(&g, mask)?
                    }
                }
                Cache::Pool { argmax, input_shape } => layers::maxpool2d_backward(&g, argmax, input_shape)?,
                Cache::Conv { input } => {
                    let p = self.params[idx].as_ref().expect("conv layer has parameters");
                    let padding = match self.specs[idx] {
                        LayerSpec::Conv2d { padding, .. } => padding,
                        _ => unreachable!("conv cache on a non-conv layer"),
                    };
                    let c = layers::conv2d_backward(&g, input, &p.weight, padding)?;
                    grads[idx] = Some(LayerParams {
                        weight: c.weight,
                        bias: c.bias,
                    });
                    c.input
                }
            };
        }
        Ok(grads)
    }

    /// Class probabilities for one `[C, H, W]` or `[1, C, H, W]` image,
    /// all layers in inference mode.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Vec<T>, CnnError> {
        let input = if image.rank() == 3 {
            let [c, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2]];
            image.clone().reshape(&[1, c, h, w])?
        } else {
            image.clone()
        };
        if input.dims4()[0] != 1 {
            return Err(CnnError::Shape("predict takes a single image".into()));
        }
        Ok(self.forward(&input, Mode::Infer, None)?.probs.into_data())
    }
}
