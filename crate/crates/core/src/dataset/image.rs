use super::DatasetError;
use crate::tensor::Tensor;

/// 8-bit raster, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self, DatasetError> {
        if width == 0 || height == 0 {
            return Err(DatasetError::EmptyImage);
        }
        if channels != 1 && channels != 3 {
            return Err(DatasetError::Channels(channels));
        }
        if pixels.len() != width * height * channels {
            return Err(DatasetError::PixelCount {
                expected: width * height * channels,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, DatasetError> {
        Self::new(width, height, 1, pixels)
    }

    pub fn rgb(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, DatasetError> {
        Self::new(width, height, 3, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Rec.601 luma, `round(0.299 R + 0.587 G + 0.114 B)`.
    pub fn to_grayscale(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let pixels = self
            .pixels
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]))
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels,
        }
    }

    /// Three-channel copy; gray values are replicated.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            pixels: self.pixels.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Image, DatasetError> {
        if width == 0 || height == 0 || x + width > self.width || y + height > self.height {
            return Err(DatasetError::CropOutOfBounds {
                rect: [x, y, width, height],
                size: [self.width, self.height],
            });
        }
        let mut pixels = Vec::with_capacity(width * height * self.channels);
        for row in y..y + height {
            let start = (row * self.width + x) * self.channels;
            pixels.extend_from_slice(&self.pixels[start..start + width * self.channels]);
        }
        Ok(Image {
            width,
            height,
            channels: self.channels,
            pixels,
        })
    }

    /// Edge-clamped bilinear resampling with pixel-centre alignment.
    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Result<Image, DatasetError> {
        if out_w == 0 || out_h == 0 {
            return Err(DatasetError::EmptyImage);
        }
        if out_w == self.width && out_h == self.height {
            return Ok(self.clone());
        }
        let xs = sample_positions(self.width, out_w);
        let ys = sample_positions(self.height, out_h);
        let ch = self.channels;
        let mut pixels = Vec::with_capacity(out_w * out_h * ch);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for c in 0..ch {
                    let p = |x: usize, y: usize| self.pixels[(y * self.width + x) * ch + c] as f64;
                    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                    let v = top * (1.0 - fy) + bottom * fy;
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Ok(Image {
            width: out_w,
            height: out_h,
            channels: ch,
            pixels,
        })
    }

    /// `[C, H, W]` tensor with values scaled to `[0, 1]` (255 ↦ 1.0).
    pub fn to_tensor(&self) -> Tensor {
        let (w, h, ch) = (self.width, self.height, self.channels);
        let mut data = vec![0f32; w * h * ch];
        for c in 0..ch {
            for y in 0..h {
                for x in 0..w {
                    data[(c * h + y) * w + x] = self.pixels[(y * w + x) * ch + c] as f32 / 255.0;
                }
            }
        }
        Tensor::from_vec(&[ch, h, w], data).expect("image dimensions are positive")
    }
}

pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
        .round()
        .clamp(0.0, 255.0) as u8
}

/// For each output coordinate: the two source neighbours and the weight of
/// the second one.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grayscale_cases() {
        let g = Image::gray(2, 1, vec![10, 200]).unwrap();
        assert_eq!(g.to_grayscale(), g);
        let white = Image::rgb(1, 1, vec![255, 255, 255]).unwrap();
        assert_eq!(white.to_grayscale().pixels(), &[255]);
    }

    proptest! {
        #[test]
        fn grayscale_matches_scalar_formula(px in proptest::collection::vec(any::<u8>(), 3..=300)) {
            let n = px.len() / 3;
            let img = Image::rgb(n, 1, px[..n * 3].to_vec()).unwrap();
            let gray = img.to_grayscale();
            for i in 0..n {
                let (r, g, b) = (px[3 * i] as f64, px[3 * i + 1] as f64, px[3 * i + 2] as f64);
                let expect = (0.299 * r + 0.587 * g + 0.114 * b).round() as u8;
                prop_assert_eq!(gray.pixels()[i], expect);
            }
        }

        #[test]
        fn constant_image_resizes_to_constant(v in any::<u8>(), w in 1usize..12, h in 1usize..12, ow in 1usize..20, oh in 1usize..20) {
            let img = Image::gray(w, h, vec![v; w * h]).unwrap();
            let out = img.resize_bilinear(ow, oh).unwrap();
            prop_assert!(out.pixels().iter().all(|&p| p == v));
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = Image::rgb(3, 2, (0..18).map(|v| v * 13).collect()).unwrap();
        assert_eq!(img.resize_bilinear(3, 2).unwrap(), img);
    }

    #[test]
    fn checkerboard_upscale_matches_hand_grid() {
        // source sample positions for 2 -> 4 are -0.25, 0.25, 0.75, 1.25,
        // clamped to 0, 0.25, 0.75, 1
        let img = Image::gray(2, 2, vec![0, 255, 255, 0]).unwrap();
        let out = img.resize_bilinear(4, 4).unwrap();
        let w = [0.0f64, 0.25, 0.75, 1.0];
        for (y, &fy) in w.iter().enumerate() {
            for (x, &fx) in w.iter().enumerate() {
                let top = 255.0 * fx;
                let bottom = 255.0 * (1.0 - fx);
                let expect = (top * (1.0 - fy) + bottom * fy).round() as u8;
                assert_eq!(out.get(x, y, 0), expect, "({x},{y})");
            }
        }
        assert_eq!(out.pixels()[..4], [0, 64, 191, 255]);
    }

    #[test]
    fn tensor_normalisation() {
        let img = Image::rgb(1, 2, vec![255, 0, 51, 0, 255, 102]).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 2, 1]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn crop_bounds() {
        let img = Image::gray(4, 4, (0..16).collect()).unwrap();
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.pixels(), &[9, 10, 13, 14]);
        assert!(img.crop(3, 3, 2, 1).is_err());
    }

    #[test]
    fn invalid_images() {
        assert!(matches!(Image::gray(0, 3, vec![]), Err(DatasetError::EmptyImage)));
        assert!(matches!(Image::new(1, 1, 2, vec![0, 0]), Err(DatasetError::Channels(2))));
        assert!(Image::rgb(2, 2, vec![0; 11]).is_err());
    }
}
