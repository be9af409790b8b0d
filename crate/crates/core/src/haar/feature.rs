use serde::{Deserialize, Serialize};

use super::integral::IntegralImage;
use super::HaarError;

/// The five rectangle layouts. Declaration order is the canonical
/// enumeration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// White left, black right.
    TwoHorizontal,
    /// White top, black bottom.
    TwoVertical,
    /// White, black, white from left to right.
    ThreeHorizontal,
    /// White, black, white from top to bottom.
    ThreeVertical,
    /// White top-left and bottom-right, black on the other diagonal.
    FourDiagonal,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 5] = [
        FeatureKind::TwoHorizontal,
        FeatureKind::TwoVertical,
        FeatureKind::ThreeHorizontal,
        FeatureKind::ThreeVertical,
        FeatureKind::FourDiagonal,
    ];

    /// Footprint in units: (columns, rows).
    pub fn grid(self) -> (usize, usize) {
        match self {
            FeatureKind::TwoHorizontal => (2, 1),
            FeatureKind::TwoVertical => (1, 2),
            FeatureKind::ThreeHorizontal => (3, 1),
            FeatureKind::ThreeVertical => (1, 3),
            FeatureKind::FourDiagonal => (2, 2),
        }
    }

    /// Signed weight of each unit cell, row-major over `grid()`. Weights sum
    /// to zero so that a constant patch gives a zero response.
    fn weights(self) -> &'static [i64] {
        match self {
            FeatureKind::TwoHorizontal | FeatureKind::TwoVertical => &[1, -1],
            FeatureKind::ThreeHorizontal | FeatureKind::ThreeVertical => &[1, -2, 1],
            FeatureKind::FourDiagonal => &[1, -1, -1, 1],
        }
    }
}

/// A rectangle feature placed in the base window. `(x, y)` is the top-left
/// corner of the footprint and `(w, h)` the size of one unit cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HaarFeature {
    pub kind: FeatureKind,
    pub x: u16,
    pub y: u16,
    pub w: u16,
    pub h: u16,
}

impl HaarFeature {
    pub fn new(kind: FeatureKind, x: usize, y: usize, w: usize, h: usize) -> Self {
        Self {
            kind,
            x: x as u16,
            y: y as u16,
            w: w as u16,
            h: h as u16,
        }
    }

    /// Footprint size in pixels at scale 1.
    pub fn footprint(&self) -> (usize, usize) {
        let (cx, cy) = self.kind.grid();
        (cx * self.w as usize, cy * self.h as usize)
    }

    pub fn fits(&self, window: usize) -> bool {
        let (fw, fh) = self.footprint();
        self.w >= 1 && self.h >= 1 && self.x as usize + fw <= window && self.y as usize + fh <= window
    }

    /// Geometry for a window of side `round(window * scale)`. Unit sizes and
    /// the origin are rounded to the nearest pixel, then pulled back so the
    /// footprint stays inside the scaled window.
    pub fn scaled(&self, window: usize, scale: f64) -> ScaledFeature {
        let side = scaled_side(window, scale);
        let (cx, cy) = self.kind.grid();
        let place = |origin: u16, unit: u16, cells: usize| {
            let u = ((unit as f64 * scale).round() as usize).clamp(1, (side / cells).max(1));
            let o = ((origin as f64 * scale).round() as usize).min(side - cells * u);
            (o, u)
        };
        let (ox, uw) = place(self.x, self.w, cx);
        let (oy, uh) = place(self.y, self.h, cy);
        let mut cells = [(0, 0, 0); 4];
        for (i, &weight) in self.kind.weights().iter().enumerate() {
            let (col, row) = (i % cx, i / cx);
            cells[i] = (ox + col * uw, oy + row * uh, weight);
        }
        ScaledFeature {
            cells,
            len: self.kind.weights().len(),
            unit: (uw, uh),
            area_ratio: (uw * uh) as f64 / (self.w as usize * self.h as usize) as f64,
        }
    }
}

/// Side of the base window at `scale`.
pub fn scaled_side(window: usize, scale: f64) -> usize {
    ((window as f64 * scale).round() as usize).max(1)
}

/// A feature resolved to pixel rectangles relative to a window origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledFeature {
    cells: [(usize, usize, i64); 4],
    len: usize,
    unit: (usize, usize),
    /// Scaled unit area over base unit area.
    area_ratio: f64,
}

impl ScaledFeature {
    /// Weighted white-minus-black pixel sum; the window must lie inside the
    /// integral image.
    #[inline]
    pub fn raw(&self, ii: &IntegralImage, x: usize, y: usize) -> i64 {
        let (uw, uh) = self.unit;
        self.cells[..self.len]
            .iter()
            .map(|&(dx, dy, weight)| weight * ii.sum_unchecked(x + dx, y + dy, uw, uh) as i64)
            .sum()
    }

    /// Raw response brought back to base-window units and divided by `sigma`.
    #[inline]
    pub fn value(&self, ii: &IntegralImage, x: usize, y: usize, sigma: f64) -> f32 {
        (self.raw(ii, x, y) as f64 / (self.area_ratio * sigma)) as f32
    }
}

/// Every feature of every kind that fits in a `window x window` square, in
/// canonical order: kind, then `y`, `x`, then `h`, `w`.
pub fn enumerate_features(window: usize) -> Vec<HaarFeature> {
    let mut out = Vec::new();
    for kind in FeatureKind::ALL {
        enumerate_kind(kind, window, &mut out);
    }
    out
}

pub fn enumerate_kind(kind: FeatureKind, window: usize, out: &mut Vec<HaarFeature>) {
    let (cx, cy) = kind.grid();
    for y in 0..window {
        for x in 0..window {
            for h in 1..=(window - y) / cy {
                for w in 1..=(window - x) / cx {
                    out.push(HaarFeature::new(kind, x, y, w, h));
                }
            }
        }
    }
}

/// Feature value for the window with top-left `(x, y)` and side
/// `round(window * scale)`, optionally divided by the window's standard
/// deviation.
pub fn eval_feature(
    feature: &HaarFeature,
    ii: &IntegralImage,
    x: usize,
    y: usize,
    window: usize,
    scale: f64,
    variance_norm: bool,
) -> Result<f32, HaarError> {
    if !feature.fits(window) {
        return Err(HaarError::Config(format!("{feature:?} does not fit a {window}px window")));
    }
    let side = scaled_side(window, scale);
    let rect = super::Rect::new(x, y, side, side);
    if !ii.contains(&rect) {
        return Err(HaarError::OutOfBounds {
            rect,
            size: [ii.width(), ii.height()],
        });
    }
    let sigma = if variance_norm { ii.window_sigma(x, y, side) } else { 1.0 };
    Ok(feature.scaled(window, scale).value(ii, x, y, sigma))
}
