use super::HaarError;
use crate::dataset::Image;

/// Axis-aligned rectangle in pixel units; `(x, y)` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self { x, y, width, height }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

/// Summed-area tables of pixel values and squared pixel values.
///
/// Both tables are `(width + 1) x (height + 1)` with a zero first row and
/// column, so `table[y][x]` is the sum over all pixels strictly above and
/// left of `(x, y)`. 64-bit entries cannot overflow below 2^31 pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    sum: Vec<u64>,
    sq: Vec<u64>,
}

impl IntegralImage {
    /// Builds both tables in one pass over row-major 8-bit gray pixels.
    pub fn from_pixels(width: usize, height: usize, pixels: &[u8]) -> Result<Self, HaarError> {
        if width == 0 || height == 0 {
            return Err(HaarError::EmptyImage);
        }
        if pixels.len() != width * height {
            return Err(HaarError::PixelCount {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        let stride = width + 1;
        let mut sum = vec![0u64; stride * (height + 1)];
        let mut sq = vec![0u64; stride * (height + 1)];
        for y in 0..height {
            let (mut row, mut row_sq) = (0u64, 0u64);
            for x in 0..width {
                let v = pixels[y * width + x] as u64;
                row += v;
                row_sq += v * v;
                let i = (y + 1) * stride + x + 1;
                sum[i] = sum[i - stride] + row;
                sq[i] = sq[i - stride] + row_sq;
            }
        }
        Ok(Self { width, height, sum, sq })
    }

    /// Gray images are used as-is; RGB is reduced to luma first.
    pub fn from_image(image: &Image) -> Result<Self, HaarError> {
        let gray = image.to_grayscale();
        Self::from_pixels(gray.width(), gray.height(), gray.pixels())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Padded table entry: sum of pixels in `[0, x) x [0, y)`.
    pub fn table(&self, x: usize, y: usize) -> u64 {
        self.sum[y * (self.width + 1) + x]
    }

    pub fn contains(&self, rect: &Rect) -> bool {
        rect.x + rect.width <= self.width && rect.y + rect.height <= self.height
    }

    pub fn rect_sum(&self, rect: &Rect) -> Result<u64, HaarError> {
        if !self.contains(rect) {
            return Err(HaarError::OutOfBounds {
                rect: *rect,
                size: [self.width, self.height],
            });
        }
        Ok(self.sum_unchecked(rect.x, rect.y, rect.width, rect.height))
    }

    pub fn rect_sq_sum(&self, rect: &Rect) -> Result<u64, HaarError> {
        if !self.contains(rect) {
            return Err(HaarError::OutOfBounds {
                rect: *rect,
                size: [self.width, self.height],
            });
        }
        Ok(four_reads(&self.sq, self.width + 1, rect.x, rect.y, rect.width, rect.height))
    }

    /// Four table reads; the caller guarantees the rectangle is in bounds.
    #[inline]
    pub(crate) fn sum_unchecked(&self, x: usize, y: usize, w: usize, h: usize) -> u64 {
        four_reads(&self.sum, self.width + 1, x, y, w, h)
    }

    /// Standard deviation of the pixels in a square window, clamped to at
    /// least 1 so flat windows do not blow up normalised feature values.
    pub(crate) fn window_sigma(&self, x: usize, y: usize, side: usize) -> f64 {
        let n = (side * side) as f64;
        let s = self.sum_unchecked(x, y, side, side) as f64;
        let sq = four_reads(&self.sq, self.width + 1, x, y, side, side) as f64;
        let mean = s / n;
        (sq / n - mean * mean).max(0.0).sqrt().max(1.0)
    }
}

#[inline]
fn four_reads(table: &[u64], stride: usize, x: usize, y: usize, w: usize, h: usize) -> u64 {
    let (x2, y2) = (x + w, y + h);
    // a + d - b - c never underflows because the sum is non-negative
    table[y2 * stride + x2] + table[y * stride + x] - table[y * stride + x2] - table[y2 * stride + x]
}
