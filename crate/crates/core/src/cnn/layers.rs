//! Forward and backward kernels for every layer kind the network uses.
//!
//! All kernels take NCHW tensors (or `[N, F]` for dense/softmax) and are
//! generic over the scalar type so the gradient audit can run them in `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::CnnError;
use crate::tensor::{matmul_into, transpose_into, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
    /// Zero padding of `kernel / 2` on each side; output keeps the input size.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

fn expect_rank(t: &Tensor<impl Scalar>, rank: usize, what: &'static str) -> Result<(), CnnError> {
    if t.rank() != rank {
        return Err(CnnError::Shape(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Output spatial size of a stride-1 convolution.
pub fn conv_output_size(size: usize, kernel: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Same => Some(size),
        Padding::Valid => size.checked_sub(kernel).map(|s| s + 1),
    }
}

struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        padding: Padding,
    ) -> Result<Self, CnnError> {
        expect_rank(input, 4, "conv2d input")?;
        expect_rank(weight, 4, "conv2d weight")?;
        let [n, cin, h, w] = input.dims4();
        let [cout, wcin, kh, kw] = weight.dims4();
        if wcin != cin {
            return Err(CnnError::Shape(format!(
                "conv2d: input has {cin} channels but weight expects {wcin}"
            )));
        }
        if kh != kw {
            return Err(CnnError::Shape(format!("conv2d: non-square kernel {kh}x{kw}")));
        }
        let k = kh;
        let (oh, ow) = match (
            conv_output_size(h, k, padding),
            conv_output_size(w, k, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(CnnError::Shape(format!(
                    "conv2d: {h}x{w} input is smaller than the {k}x{k} kernel"
                )))
            }
        };
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k,
            pad,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one sample into a `(cin·k·k) × (oh·ow)` column matrix.
    fn im2col<T: Scalar>(&self, sample: &[T], cols: &mut [T]) {
        let p = self.out_len();
        for c in 0..self.cin {
            let plane = &sample[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.k {
                for j in 0..self.k {
                    let row = ((c * self.k + i) * self.k + j) * p;
                    let dst = &mut cols[row..row + p];
                    for y in 0..self.oh {
                        let sy = (y + i) as isize - self.pad as isize;
                        let line = &mut dst[y * self.ow..(y + 1) * self.ow];
                        if sy < 0 || sy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[sy as usize * self.w..(sy as usize + 1) * self.w];
                        for (x, d) in line.iter_mut().enumerate() {
                            let sx = (x + j) as isize - self.pad as isize;
                            *d = if sx < 0 || sx >= self.w as isize {
                                T::zero()
                            } else {
                                src[sx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Inverse of [`im2col`](Self::im2col): scatters column gradients back
    /// onto the input plane, accumulating overlaps.
    fn col2im<T: Scalar>(&self, cols: &[T], sample: &mut [T]) {
        let p = self.out_len();
        for c in 0..self.cin {
            let plane = &mut sample[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.k {
                for j in 0..self.k {
                    let row = ((c * self.k + i) * self.k + j) * p;
                    let src = &cols[row..row + p];
                    for y in 0..self.oh {
                        let sy = (y + i) as isize - self.pad as isize;
                        if sy < 0 || sy >= self.h as isize {
                            continue;
                        }
                        for x in 0..self.ow {
                            let sx = (x + j) as isize - self.pad as isize;
                            if sx < 0 || sx >= self.w as isize {
                                continue;
                            }
                            let d = &mut plane[sy as usize * self.w + sx as usize];
                            *d = *d + src[y * self.ow + x];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 2-D convolution (cross-correlation).
///
/// `out[n,o,y,x] = Σ_{c,i,j} weight[o,c,i,j]·input[n,c,y+i−pad,x+j−pad] + bias[o]`,
/// with the sum taken in ascending `(c, i, j)` order.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>, CnnError> {
    let g = ConvGeometry::new(input, weight, padding)?;
    if bias.len() != g.cout {
        return Err(CnnError::Shape(format!(
            "conv2d: bias has {} entries for {} output channels",
            bias.len(),
            g.cout
        )));
    }
    let p = g.out_len();
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut cols = vec![T::zero(); g.patch_len() * p];
    let in_len = g.cin * g.h * g.w;
    for n in 0..g.n {
        g.im2col(&input.data()[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        matmul_into(weight.data(), &cols, dst, g.cout, g.patch_len(), p);
        for (o, row) in dst.chunks_exact_mut(p).enumerate() {
            let b = bias.data()[o];
            for v in row {
                *v = *v + b;
            }
        }
    }
    Ok(Tensor::from_vec(&[g.n, g.cout, g.oh, g.ow], out)?)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    padding: Padding,
) -> Result<ConvGrads<T>, CnnError> {
    let g = ConvGeometry::new(input, weight, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(CnnError::Shape(format!(
            "conv2d backward: gradient shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.n, g.cout, g.oh, g.ow]
        )));
    }
    let p = g.out_len();
    let pl = g.patch_len();
    let in_len = g.cin * g.h * g.w;

    let mut weight_t = vec![T::zero(); pl * g.cout];
    transpose_into(weight.data(), &mut weight_t, g.cout, pl);

    let mut grad_w = vec![T::zero(); g.cout * pl];
    let mut grad_b = vec![T::zero(); g.cout];
    let mut grad_in = vec![T::zero(); input.len()];
    let mut cols = vec![T::zero(); pl * p];
    let mut cols_t = vec![T::zero(); p * pl];
    let mut grad_cols = vec![T::zero(); pl * p];

    for n in 0..g.n {
        let go = &grad_out.data()[n * g.cout * p..(n + 1) * g.cout * p];
        for (o, row) in go.chunks_exact(p).enumerate() {
            grad_b[o] = row.iter().fold(grad_b[o], |acc, &v| acc + v);
        }
        g.im2col(&input.data()[n * in_len..(n + 1) * in_len], &mut cols);
        transpose_into(&cols, &mut cols_t, pl, p);
        matmul_into(go, &cols_t, &mut grad_w, g.cout, p, pl);

        grad_cols.fill(T::zero());
        matmul_into(&weight_t, go, &mut grad_cols, pl, g.cout, p);
        g.col2im(&grad_cols, &mut grad_in[n * in_len..(n + 1) * in_len]);
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), grad_in)?,
        weight: Tensor::from_vec(weight.shape(), grad_w)?,
        bias: Tensor::from_vec(&[g.cout], grad_b)?,
    })
}

/// 2×2 stride-2 max pooling. Odd trailing rows/columns are treated as
/// padded with −∞, so the output is `ceil(H/2) × ceil(W/2)`.
///
/// Returns the pooled tensor and, per output cell, the flat input index of
/// the winning element. Ties go to the lowest flat index.
pub fn maxpool2d_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), CnnError> {
    expect_rank(input, 4, "maxpool2d input")?;
    let [n, c, h, w] = input.dims4();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best_i = base + 2 * y * w + 2 * x;
                let mut best = data[best_i];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (sy, sx) = (2 * y + dy, 2 * x + dx);
                        if sy >= h || sx >= w {
                            continue;
                        }
                        let i = base + sy * w + sx;
                        if data[i] > best {
                            best = data[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>, CnnError> {
    if grad_out.len() != argmax.len() {
        return Err(CnnError::Shape(format!(
            "maxpool2d backward: {} gradients for {} windows",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut grad_in = Tensor::zeros(input_shape)?;
    let dst = grad_in.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dst[i] = dst[i] + g;
    }
    Ok(grad_in)
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (`0` for dropped units, `1/(1−rate)` for kept ones).
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<T>), CnnError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(CnnError::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), vec![T::one(); input.len()]));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.gen::<f64>() >= rate { keep } else { T::zero() })
        .collect();
    let out = input.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::from_vec(input.shape(), out)?, mask))
}

pub fn dropout_backward<T: Scalar>(grad_out: &Tensor<T>, mask: &[T]) -> Result<Tensor<T>, CnnError> {
    if grad_out.len() != mask.len() {
        return Err(CnnError::Shape("dropout backward: mask length mismatch".into()));
    }
    let data = grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
    Ok(Tensor::from_vec(grad_out.shape(), data)?)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU, gated on the forward *output* being positive.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>, CnnError> {
    if grad_out.shape() != output.shape() {
        return Err(CnnError::Shape("relu backward: shape mismatch".into()));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_vec(grad_out.shape(), data)?)
}

pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, CnnError> {
    expect_rank(input, 4, "global_avg_pool input")?;
    let [n, c, h, w] = input.dims4();
    let area = T::of((h * w) as f64);
    let out = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / area)
        .collect();
    Ok(Tensor::from_vec(&[n, c], out)?)
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>, CnnError> {
    if input_shape.len() != 4 || grad_out.shape() != [input_shape[0], input_shape[1]] {
        return Err(CnnError::Shape(format!(
            "global_avg_pool backward: gradient {:?} vs input {:?}",
            grad_out.shape(),
            input_shape
        )));
    }
    let area = input_shape[2] * input_shape[3];
    let inv = T::one() / T::of(area as f64);
    let mut data = Vec::with_capacity(grad_out.len() * area);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, area));
    }
    Ok(Tensor::from_vec(input_shape, data)?)
}

/// `out = input · weight + bias` for `input: [N, F]`, `weight: [F, G]`.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, CnnError> {
    let mut out = input.matmul(weight)?;
    let g = weight.shape()[1];
    if bias.len() != g {
        return Err(CnnError::Shape(format!(
            "dense: bias has {} entries for {g} outputs",
            bias.len()
        )));
    }
    for row in out.data_mut().chunks_exact_mut(g) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<DenseGrads<T>, CnnError> {
    let grad_weight = input.transpose()?.matmul(grad_out)?;
    let grad_input = grad_out.matmul(&weight.transpose()?)?;
    let grad_bias = grad_out.reduce_sum(0)?;
    Ok(DenseGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>, CnnError> {
    expect_rank(logits, 2, "softmax input")?;
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum = sum + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / sum;
        }
    }
    Ok(Tensor::from_vec(logits.shape(), out)?)
}

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean categorical cross-entropy and its gradient with respect to the
/// logits that produced `probs` through a softmax: `(probs − onehot) / N`.
pub fn categorical_cross_entropy<T: Scalar>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
) -> Result<(T, Tensor<T>), CnnError> {
    if probs.shape() != onehot.shape() || probs.rank() != 2 {
        return Err(CnnError::Shape(format!(
            "cross-entropy: probs {:?} vs labels {:?}",
            probs.shape(),
            onehot.shape()
        )));
    }
    let [n, k] = [probs.shape()[0], probs.shape()[1]];
    let inv_n = T::one() / T::of(n as f64);
    let floor = T::of(PROB_FLOOR);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(probs.len());
    for (row, (p, y)) in probs
        .data()
        .chunks_exact(k)
        .zip(onehot.data().chunks_exact(k))
        .enumerate()
    {
        let ones = y.iter().filter(|&&v| v == T::one()).count();
        let zeros = y.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != k - 1 {
            return Err(CnnError::Label(format!("row {row} is not a one-hot vector")));
        }
        let label = y.iter().position(|&v| v == T::one()).unwrap_or(0);
        loss = loss - p[label].max(floor).ln();
        grad.extend(p.iter().zip(y).map(|(&pv, &yv)| (pv - yv) * inv_n));
    }
    Ok((loss * inv_n, Tensor::from_vec(probs.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct six-loop convolution, independent of the im2col path.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let [n, cin, h, wd] = x.dims4();
        let [cout, _, k, _] = w.dims4();
        let oh = h + 2 * pad - k + 1;
        let ow = wd + 2 * pad - k + 1;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]).unwrap();
        for nn in 0..n {
            for o in 0..cout {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = b.data()[o];
                        for c in 0..cin {
                            for i in 0..k {
                                for j in 0..k {
                                    let sy = y as isize + i as isize - pad as isize;
                                    let sx = xx as isize + j as isize - pad as isize;
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                        s += w.get4(o, c, i, j) * x.get4(nn, c, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        out.set4(nn, o, y, xx, s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_delta_kernel_is_identity_under_same_padding() {
        let x = random(&[1, 1, 5, 4], 1);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        w.set4(0, 0, 1, 1, 1.0);
        let b = Tensor::zeros(&[1]).unwrap();
        let y = conv2d_forward(&x, &w, &b, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_constant_field() {
        let x = Tensor::<f32>::full(&[1, 1, 5, 5], 1.0).unwrap();
        let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = conv2d_forward(&x, &w, &b, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let x = random(&[1, 2, 6, 6], 2);
        let w = random(&[3, 2, 3, 3], 3);
        let b = random(&[3], 4);
        for (padding, pad) in [(Padding::Valid, 0), (Padding::Same, 1)] {
            let y = conv2d_forward(&x, &w, &b, padding).unwrap();
            let expect = conv_oracle(&x, &w, &b, pad);
            assert_eq!(y.shape(), expect.shape());
            assert!(y.max_abs_diff(&expect) < 1e-6);
            let y32 = conv2d_forward(&x.cast::<f32>(), &w.cast(), &b.cast(), padding).unwrap();
            assert!(y32.cast::<f64>().max_abs_diff(&expect) < 1e-5);
        }
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f32>::zeros(&[1, 2, 5, 5]).unwrap();
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[1]).unwrap();
        assert!(matches!(conv2d_forward(&x, &w, &b, Padding::Same), Err(CnnError::Shape(_))));
        let small = Tensor::<f32>::zeros(&[1, 3, 2, 2]).unwrap();
        assert!(conv2d_forward(&small, &w, &b, Padding::Valid).is_err());
        assert!(conv2d_forward(&small, &w, &b, Padding::Same).is_ok());
    }

    fn numeric_grad(f: impl Fn(&Tensor<f64>) -> f64, at: &Tensor<f64>, h: f64) -> Vec<f64> {
        (0..at.len())
            .map(|i| {
                let mut p = at.clone();
                p.data_mut()[i] += h;
                let mut m = at.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        if d == 0.0 {
            0.0
        } else {
            d / a.abs().max(b.abs())
        }
    }

    /// Weighted sum of outputs as the scalar objective; its gradient with
    /// respect to the output is the fixed weight tensor.
    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_backward_zero_grad() {
        let x = random(&[1, 2, 5, 5], 5);
        let w = random(&[2, 2, 3, 3], 6);
        let go = Tensor::zeros(&[1, 2, 5, 5]).unwrap();
        let g = conv2d_backward(&go, &x, &w, Padding::Same).unwrap();
        assert!(g.input.data().iter().chain(g.weight.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_single_pixel_grad_is_input_patch() {
        let x = random(&[1, 1, 5, 5], 7);
        let w = random(&[1, 1, 3, 3], 8);
        let mut go = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        go.set4(0, 0, 1, 2, 1.0);
        let g = conv2d_backward(&go, &x, &w, Padding::Valid).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.weight.get4(0, 0, i, j), x.get4(0, 0, 1 + i, 2 + j));
            }
        }
        let b = Tensor::zeros(&[1]).unwrap();
        let num = numeric_grad(
            |wp| dot(&conv2d_forward(&x, wp, &b, Padding::Valid).unwrap(), &go),
            &w,
            1e-3,
        );
        for (a, n) in g.weight.data().iter().zip(&num) {
            assert!(rel_err(*a, *n) < 1e-6);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = random(&[2, 2, 5, 6], 9);
        let w = random(&[3, 2, 3, 3], 10);
        let b = random(&[3], 11);
        for padding in [Padding::Valid, Padding::Same] {
            let out = conv2d_forward(&x, &w, &b, padding).unwrap();
            let go = random(out.shape(), 12);
            let g = conv2d_backward(&go, &x, &w, padding).unwrap();
            let gx = numeric_grad(|xp| dot(&conv2d_forward(xp, &w, &b, padding).unwrap(), &go), &x, 1e-3);
            let gw = numeric_grad(|wp| dot(&conv2d_forward(&x, wp, &b, padding).unwrap(), &go), &w, 1e-3);
            let gb = numeric_grad(|bp| dot(&conv2d_forward(&x, &w, bp, padding).unwrap(), &go), &b, 1e-3);
            for (a, n) in g
                .input
                .data()
                .iter()
                .zip(&gx)
                .chain(g.weight.data().iter().zip(&gw))
                .chain(g.bias.data().iter().zip(&gb))
            {
                assert!(rel_err(*a, *n) < 1e-6, "{a} vs {n}");
            }
        }
    }

    fn pool_oracle(x: &Tensor<f64>) -> Tensor<f64> {
        let [n, c, h, w] = x.dims4();
        let mut out = Tensor::zeros(&[n, c, h / 2, w / 2]).unwrap();
        for nn in 0..n {
            for cc in 0..c {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let vals = [
                            x.get4(nn, cc, 2 * y, 2 * xx),
                            x.get4(nn, cc, 2 * y, 2 * xx + 1),
                            x.get4(nn, cc, 2 * y + 1, 2 * xx),
                            x.get4(nn, cc, 2 * y + 1, 2 * xx + 1),
                        ];
                        out.set4(nn, cc, y, xx, vals.iter().cloned().fold(f64::MIN, f64::max));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn maxpool_cases() {
        let x = Tensor::<f32>::full(&[1, 1, 4, 4], 2.5).unwrap();
        let (y, mask) = maxpool2d_forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        // every window picks its top-left element
        assert_eq!(mask, vec![0, 2, 8, 10]);

        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, mask) = maxpool2d_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(mask, vec![3]);

        let x = random(&[1, 1, 8, 8], 13);
        let (y, _) = maxpool2d_forward(&x).unwrap();
        assert_eq!(y, pool_oracle(&x));
    }

    #[test]
    fn maxpool_odd_size_pads_with_neg_infinity() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], vec![-1.0f32, -2.0, -3.0, -4.0, -5.0, -6.0, -7.0, -8.0, -9.0]).unwrap();
        let (y, mask) = maxpool2d_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[-1.0, -3.0, -7.0, -9.0]);
        assert_eq!(mask, vec![0, 2, 6, 8]);
    }

    #[test]
    fn maxpool_backward() {
        let x = random(&[2, 2, 4, 6], 14);
        let (y, mask) = maxpool2d_forward(&x).unwrap();
        let zero: Tensor<f64> = maxpool2d_backward(&Tensor::zeros(y.shape()).unwrap(), &mask, x.shape()).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let go = random(y.shape(), 15);
        let g = maxpool2d_backward(&go, &mask, x.shape()).unwrap();
        assert_eq!(g.sum(), go.sum());
        // piecewise linear: a step well below the smallest gap between
        // window values never crosses a kink
        let num = numeric_grad(|xp| dot(&maxpool2d_forward(xp).unwrap().0, &go), &x, 1e-7);
        for (a, n) in g.data().iter().zip(&num) {
            assert!((a - n).abs() < 1e-7 || rel_err(*a, *n) < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn dropout_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = random(&[1, 3, 4, 4], 17);
        let (y, _) = dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
        let (y, mask) = dropout(&x, 0.6, Mode::Infer, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(mask.iter().all(|&m| m == 1.0));
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout(&x, -0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = random(&[100_000], 19).map(|v| v + 2.0);
        let (y, mask) = dropout(&x, 0.25, Mode::Train, &mut rng).unwrap();
        let kept = mask.iter().filter(|&&m| m != 0.0).count() as f64 / mask.len() as f64;
        assert!((kept - 0.75).abs() <= 0.01, "kept fraction {kept}");
        let mean_in = x.sum() / x.len() as f64;
        let mean_out = y.sum() / y.len() as f64;
        assert!(((mean_out - mean_in) / mean_in).abs() < 0.02);
        let g = dropout_backward(&Tensor::full(&[100_000], 1.0).unwrap(), &mask).unwrap();
        assert_eq!(g.data(), mask.as_slice());
    }

    #[test]
    fn global_avg_pool_cases() {
        let x = Tensor::<f32>::full(&[1, 2, 3, 3], 4.5).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.5, 4.5]);
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0]);
        let g = global_avg_pool_backward(&Tensor::<f32>::full(&[1, 2], 1.0).unwrap(), &[1, 2, 4, 4]).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0 / 16.0));
        assert_eq!(g.sum(), 2.0);
    }

    #[test]
    fn dense_cases() {
        let x = random(&[3, 4], 20);
        let w = Tensor::eye(4).unwrap();
        let b = Tensor::zeros(&[4]).unwrap();
        assert_eq!(dense_forward(&x, &w, &b).unwrap(), x);

        let zero = Tensor::zeros(&[2, 4]).unwrap();
        let w = random(&[4, 3], 21);
        let b = random(&[3], 22);
        let y = dense_forward(&zero, &w, &b).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let x = random(&[3, 5], 23);
        let w = random(&[5, 4], 24);
        let b = random(&[4], 25);
        let go = random(&[3, 4], 26);
        let g = dense_backward(&go, &x, &w).unwrap();
        let gx = numeric_grad(|p| dot(&dense_forward(p, &w, &b).unwrap(), &go), &x, 1e-3);
        let gw = numeric_grad(|p| dot(&dense_forward(&x, p, &b).unwrap(), &go), &w, 1e-3);
        let gb = numeric_grad(|p| dot(&dense_forward(&x, &w, p).unwrap(), &go), &b, 1e-3);
        for (a, n) in g
            .input
            .data()
            .iter()
            .zip(&gx)
            .chain(g.weight.data().iter().zip(&gw))
            .chain(g.bias.data().iter().zip(&gb))
        {
            assert!(rel_err(*a, *n) < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn relu_backward_gates_on_output() {
        let x = Tensor::from_vec(&[4], vec![-1.0f32, 0.0, 0.5, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 2.0]);
        let g = relu_backward(&Tensor::full(&[4], 3.0).unwrap(), &y).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 3.0, 3.0]);
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&Tensor::<f32>::zeros(&[1, 6]).unwrap()).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-7);
        }
        let z = random(&[3, 5], 27);
        let shifted = z.map(|v| v + 123.0);
        let a = softmax(&z).unwrap();
        let b = softmax(&shifted).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        for row in a.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let big = softmax(&Tensor::from_vec(&[1, 2], vec![1000.0f32, 0.0]).unwrap()).unwrap();
        assert!(big.data().iter().all(|v| v.is_finite()));
        assert!((big.data()[0] - 1.0).abs() < 1e-6 && big.data()[1] < 1e-6);
    }

    #[test]
    fn cross_entropy_cases() {
        let onehot = Tensor::from_vec(&[1, 3], vec![0.0f64, 1.0, 0.0]).unwrap();
        let perfect = onehot.clone();
        let (loss, _) = categorical_cross_entropy(&perfect, &onehot).unwrap();
        assert_eq!(loss, 0.0);

        let uniform = Tensor::full(&[1, 6], 1.0 / 6.0).unwrap();
        let mut y = Tensor::zeros(&[1, 6]).unwrap();
        y.data_mut()[2] = 1.0;
        let (loss, _) = categorical_cross_entropy(&uniform, &y).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
        assert!((loss - 1.791759).abs() < 1e-6);

        let bad = Tensor::from_vec(&[1, 3], vec![0.0f64, 1.0, 1.0]).unwrap();
        assert!(matches!(
            categorical_cross_entropy(&perfect, &bad),
            Err(CnnError::Label(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences_on_logits() {
        let z = random(&[4, 6], 28);
        let mut y = Tensor::zeros(&[4, 6]).unwrap();
        for (r, label) in [1usize, 5, 0, 3].iter().enumerate() {
            y.data_mut()[r * 6 + label] = 1.0;
        }
        let (_, g) = categorical_cross_entropy(&softmax(&z).unwrap(), &y).unwrap();
        let num = numeric_grad(
            |zp| categorical_cross_entropy(&softmax(zp).unwrap(), &y).unwrap().0,
            &z,
            1e-3,
        );
        for (a, n) in g.data().iter().zip(&num) {
            assert!(rel_err(*a, *n) < 1e-6, "{a} vs {n}");
        }
    }
}
