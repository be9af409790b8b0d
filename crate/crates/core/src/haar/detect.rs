use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cascade::{pyramid_scales, Cascade};
use super::integral::IntegralImage;
use super::HaarError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    pub scale_factor: f64,
    /// Smallest window side scanned, in pixels.
    pub min_side: usize,
    /// Groups with fewer raw hits are dropped.
    pub min_neighbors: usize,
    /// Raw hits overlapping at least this much are merged.
    pub group_iou: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            scale_factor: 1.25,
            min_side: 24,
            min_neighbors: 3,
            group_iou: 0.3,
        }
    }
}

/// A square region accepted by the cascade.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: usize,
    pub y: usize,
    pub side: usize,
    /// Final-stage margin; the maximum over members for a group.
    pub score: f64,
    /// Raw hits merged into this detection.
    pub neighbors: usize,
}

impl Detection {
    pub fn iou(&self, other: &Detection) -> f64 {
        iou([self.x, self.y, self.side], [other.x, other.y, other.side])
    }
}

/// Intersection over union of two squares given as `[x, y, side]`.
pub fn iou(a: [usize; 3], b: [usize; 3]) -> f64 {
    let ix = (a[0] + a[2]).min(b[0] + b[2]).saturating_sub(a[0].max(b[0]));
    let iy = (a[1] + a[2]).min(b[1] + b[2]).saturating_sub(a[1].max(b[1]));
    let inter = (ix * iy) as f64;
    let union = (a[2] * a[2] + b[2] * b[2]) as f64 - inter;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Every window the cascade accepts, scale by scale and in raster order.
/// Scales start at `min_side / window` and grow by `scale_factor` while
/// the window fits; the step at scale `s` is `max(1, round(s))`.
pub fn scan(cascade: &Cascade, ii: &IntegralImage, config: &ScanConfig) -> Result<Vec<Detection>, HaarError> {
    let w = cascade.window;
    if ii.width() < w || ii.height() < w {
        return Err(HaarError::ImageTooSmall {
            size: [ii.width(), ii.height()],
            window: w,
        });
    }
    if !(config.scale_factor > 1.0) {
        return Err(HaarError::Config(format!("scale factor {} must exceed 1", config.scale_factor)));
    }
    let start = config.min_side.max(w) as f64 / w as f64;
    let mut hits = Vec::new();
    for scale in pyramid_scales(w, ii.width(), ii.height(), start, config.scale_factor) {
        let sc = cascade.at_scale(scale);
        let side = sc.side();
        let step = (scale.round() as usize).max(1);
        let rows: Vec<usize> = (0..=ii.height() - side).step_by(step).collect();
        let found: Vec<Vec<Detection>> = rows
            .par_iter()
            .map(|&y| {
                (0..=ii.width() - side)
                    .step_by(step)
                    .filter_map(|x| {
                        let r = sc.classify(ii, x, y);
                        r.accept.then_some(Detection {
                            x,
                            y,
                            side,
                            score: r.margin,
                            neighbors: 1,
                        })
                    })
                    .collect()
            })
            .collect();
        hits.extend(found.into_iter().flatten());
    }
    Ok(hits)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Merges hits whose IoU reaches `min_iou` (transitively), averages each
/// group's rectangle, and keeps groups of at least `min_neighbors`. Output
/// is sorted by score, best first.
pub fn group(hits: &[Detection], min_iou: f64, min_neighbors: usize) -> Vec<Detection> {
    let n = hits.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if hits[i].iou(&hits[j]) >= min_iou {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let root = find(&mut parent, i);
        members[root].push(i);
    }
    let mut out: Vec<Detection> = members
        .into_iter()
        .filter(|m| !m.is_empty() && m.len() >= min_neighbors)
        .map(|m| {
            let k = m.len() as f64;
            let mean = |f: fn(&Detection) -> usize| (m.iter().map(|&i| f(&hits[i]) as f64).sum::<f64>() / k).round() as usize;
            Detection {
                x: mean(|d| d.x),
                y: mean(|d| d.y),
                side: mean(|d| d.side),
                score: m.iter().map(|&i| hits[i].score).fold(f64::NEG_INFINITY, f64::max),
                neighbors: m.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
    out
}

/// Multi-scale scan followed by grouping.
pub fn detect(cascade: &Cascade, ii: &IntegralImage, config: &ScanConfig) -> Result<Vec<Detection>, HaarError> {
    let hits = scan(cascade, ii, config)?;
    Ok(group(&hits, config.group_iou, config.min_neighbors))
}
