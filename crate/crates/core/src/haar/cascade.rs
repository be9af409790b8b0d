use log::{info, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::boost::{train_stage, FeatureMatrix, StageTargets, Stump};
use super::feature::{enumerate_features, scaled_side, HaarFeature, ScaledFeature};
use super::integral::{IntegralImage, Rect};
use super::HaarError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakClassifier {
    pub feature: HaarFeature,
    pub threshold: f32,
    /// +1 or -1.
    pub polarity: i8,
    pub alpha: f32,
    /// Weighted training error when the stump was chosen.
    pub error: f64,
}

impl WeakClassifier {
    #[inline]
    pub fn predict(&self, value: f32) -> bool {
        Stump {
            threshold: self.threshold,
            polarity: self.polarity,
            error: self.error,
            degenerate: false,
        }
        .predict(value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub classifiers: Vec<WeakClassifier>,
    /// Accept iff `sum(alpha * h) >= threshold`.
    pub threshold: f32,
}

/// Rates measured while a stage was trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub detection_rate: f64,
    /// False-positive rate on the negatives this stage was trained on, which
    /// all passed the earlier stages.
    pub false_positive_rate: f64,
    pub positives: usize,
    pub negatives: usize,
    pub reached_targets: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cascade {
    /// Side of the square base window in pixels.
    pub window: usize,
    pub stages: Vec<Stage>,
    pub reports: Vec<StageReport>,
    /// Acceptance rate of the whole cascade on freshly sampled negative
    /// windows, measured after training.
    pub achieved_fpr: Option<f64>,
    /// Set when mining could not fill a stage's negative set.
    pub negatives_exhausted: bool,
}

/// Outcome of running one window through the cascade.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowResult {
    pub accept: bool,
    pub stages_evaluated: usize,
    pub features_evaluated: usize,
    /// Vote minus threshold of the last stage evaluated; 0 for an empty
    /// cascade.
    pub margin: f64,
}

/// The cascade resolved to pixel geometry for one scale.
pub struct ScaledCascade<'a> {
    cascade: &'a Cascade,
    side: usize,
    features: Vec<Vec<ScaledFeature>>,
}

impl<'a> ScaledCascade<'a> {
    pub fn side(&self) -> usize {
        self.side
    }

    /// The `side x side` window at `(x, y)` must lie inside `ii`.
    pub fn classify(&self, ii: &IntegralImage, x: usize, y: usize) -> WindowResult {
        let sigma = ii.window_sigma(x, y, self.side);
        let mut result = WindowResult {
            accept: true,
            stages_evaluated: 0,
            features_evaluated: 0,
            margin: 0.0,
        };
        for (stage, scaled) in self.cascade.stages.iter().zip(&self.features) {
            let mut score = 0.0f64;
            for (weak, f) in stage.classifiers.iter().zip(scaled) {
                if weak.predict(f.value(ii, x, y, sigma)) {
                    score += weak.alpha as f64;
                }
            }
            result.stages_evaluated += 1;
            result.features_evaluated += stage.classifiers.len();
            result.margin = score - stage.threshold as f64;
            if score < stage.threshold as f64 {
                result.accept = false;
                break;
            }
        }
        result
    }
}

impl Cascade {
    pub fn feature_count(&self) -> usize {
        self.stages.iter().map(|s| s.classifiers.len()).sum()
    }

    pub fn at_scale(&self, scale: f64) -> ScaledCascade<'_> {
        ScaledCascade {
            cascade: self,
            side: scaled_side(self.window, scale),
            features: self
                .stages
                .iter()
                .map(|s| s.classifiers.iter().map(|w| w.feature.scaled(self.window, scale)).collect())
                .collect(),
        }
    }

    /// Runs stages in order and stops at the first rejection. An empty
    /// cascade accepts every window.
    pub fn classify_window(&self, ii: &IntegralImage, x: usize, y: usize, scale: f64) -> Result<WindowResult, HaarError> {
        let side = scaled_side(self.window, scale);
        let rect = Rect::new(x, y, side, side);
        if !ii.contains(&rect) {
            return Err(HaarError::OutOfBounds {
                rect,
                size: [ii.width(), ii.height()],
            });
        }
        Ok(self.at_scale(scale).classify(ii, x, y))
    }

    /// Copy keeping only the first `n` stages.
    pub fn prefix(&self, n: usize) -> Cascade {
        Cascade {
            window: self.window,
            stages: self.stages[..n.min(self.stages.len())].to_vec(),
            reports: self.reports[..n.min(self.reports.len())].to_vec(),
            achieved_fpr: None,
            negatives_exhausted: self.negatives_exhausted,
        }
    }

    /// Product of the per-stage training false-positive rates.
    pub fn fpr_product(&self) -> f64 {
        self.reports.iter().map(|r| r.false_positive_rate).product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    pub window: usize,
    pub d_min: f64,
    pub f_max: f64,
    /// Training stops once the measured cascade FPR is at most this.
    pub target_fpr: f64,
    pub max_stages: usize,
    pub max_rounds: usize,
    /// Negative windows mined for each stage.
    pub negatives_per_stage: usize,
    /// Fraction of the enumerated features offered to each stage; `None`
    /// uses all of them for windows up to 12 pixels and 10% above.
    pub feature_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            window: 24,
            d_min: 0.995,
            f_max: 0.5,
            target_fpr: 1e-3,
            max_stages: 10,
            max_rounds: 200,
            negatives_per_stage: 1000,
            feature_fraction: None,
            seed: 42,
        }
    }
}

/// A square window into one of a set of integral images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowRef {
    pub image: usize,
    pub x: usize,
    pub y: usize,
    pub scale: f64,
}

/// Scales `1, f, f^2, ...` at which a `window` square fits in `w x h`.
pub fn pyramid_scales(window: usize, width: usize, height: usize, start: f64, factor: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut s = start;
    while scaled_side(window, s) <= width.min(height) {
        out.push(s);
        s *= factor;
    }
    out
}

/// Draws random windows over the negative images, uniformly over images,
/// then scales, then positions.
struct NegativeSampler<'a> {
    images: &'a [IntegralImage],
    scales: Vec<Vec<f64>>,
    window: usize,
}

impl<'a> NegativeSampler<'a> {
    fn new(images: &'a [IntegralImage], window: usize) -> Self {
        let scales = images
            .iter()
            .map(|ii| pyramid_scales(window, ii.width(), ii.height(), 1.0, 1.25))
            .collect();
        Self { images, scales, window }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> WindowRef {
        let image = rng.gen_range(0..self.images.len());
        let scales = &self.scales[image];
        let scale = scales[rng.gen_range(0..scales.len())];
        let side = scaled_side(self.window, scale);
        let ii = &self.images[image];
        WindowRef {
            image,
            x: rng.gen_range(0..=ii.width() - side),
            y: rng.gen_range(0..=ii.height() - side),
            scale,
        }
    }
}

/// Mines up to `wanted` windows the cascade accepts, drawing at most
/// `max_draws`. Returns the windows and the number of draws. Candidates
/// are drawn and classified in fixed-size blocks so the result does not
/// depend on the thread count.
fn mine(
    cascade: &Cascade,
    sampler: &NegativeSampler<'_>,
    rng: &mut ChaCha8Rng,
    wanted: usize,
    max_draws: usize,
) -> (Vec<WindowRef>, usize) {
    const BLOCK: usize = 4096;
    let scaled: Vec<Vec<ScaledCascade<'_>>> = sampler
        .scales
        .iter()
        .map(|ss| ss.iter().map(|&s| cascade.at_scale(s)).collect())
        .collect();
    let mut found = Vec::new();
    let mut draws = 0;
    while found.len() < wanted && draws < max_draws {
        let n = BLOCK.min(max_draws - draws);
        let block: Vec<WindowRef> = (0..n).map(|_| sampler.draw(rng)).collect();
        let accepted: Vec<bool> = block
            .par_iter()
            .map(|w| {
                let k = sampler.scales[w.image].iter().position(|&s| s == w.scale).expect("drawn scale");
                scaled[w.image][k].classify(&sampler.images[w.image], w.x, w.y).accept
            })
            .collect();
        for (w, ok) in block.into_iter().zip(accepted) {
            draws += 1;
            if ok {
                found.push(w);
                if found.len() == wanted {
                    break;
                }
            }
        }
    }
    (found, draws)
}

fn feature_values(features: &[HaarFeature], windows: &[(&IntegralImage, usize, usize, f64)], base: usize) -> Vec<f32> {
    let sigmas: Vec<f64> = windows
        .iter()
        .map(|&(ii, x, y, s)| ii.window_sigma(x, y, scaled_side(base, s)))
        .collect();
    features
        .par_iter()
        .flat_map_iter(|f| {
            windows.iter().zip(&sigmas).map(move |(&(ii, x, y, s), &sigma)| {
                // scale-1 geometry is shared by every training positive
                f.scaled(base, s).value(ii, x, y, sigma)
            })
        })
        .collect()
}

/// Trains an attentional cascade. `positives` are base-window-sized
/// images; negative windows are sampled at every fitting scale from
/// `negatives`, and each stage after the first trains only on negatives the
/// earlier stages still accept.
pub fn train_cascade(
    positives: &[IntegralImage],
    negatives: &[IntegralImage],
    config: &CascadeConfig,
) -> Result<Cascade, HaarError> {
    if config.max_stages == 0 {
        return Err(HaarError::Config("max_stages must be at least 1".into()));
    }
    if config.window < 2 {
        return Err(HaarError::Config("window must be at least 2 pixels".into()));
    }
    if config.negatives_per_stage == 0 || !(config.target_fpr > 0.0) {
        return Err(HaarError::Config("negatives_per_stage and target_fpr must be positive".into()));
    }
    if positives.is_empty() {
        return Err(HaarError::EmptySet("positives"));
    }
    if negatives.is_empty() {
        return Err(HaarError::EmptySet("negatives"));
    }
    let w = config.window;
    if let Some(p) = positives.iter().find(|p| p.width() != w || p.height() != w) {
        return Err(HaarError::Config(format!(
            "positive samples must be {w}x{w}, found {}x{}",
            p.width(),
            p.height()
        )));
    }
    if let Some(n) = negatives.iter().find(|n| n.width() < w || n.height() < w) {
        return Err(HaarError::ImageTooSmall {
            size: [n.width(), n.height()],
            window: w,
        });
    }

    let all = enumerate_features(w);
    let fraction = config.feature_fraction.unwrap_or(if w <= 12 { 1.0 } else { 0.1 });
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(HaarError::Config(format!("feature fraction {fraction} outside (0, 1]")));
    }
    let per_stage = ((all.len() as f64 * fraction).round() as usize).clamp(1, all.len());
    let targets = StageTargets {
        d_min: config.d_min,
        f_max: config.f_max,
        max_rounds: config.max_rounds,
    };
    let sampler = NegativeSampler::new(negatives, w);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let max_draws = ((config.negatives_per_stage as f64 / config.target_fpr) * 2.0).ceil() as usize;
    let mut cascade = Cascade {
        window: w,
        stages: Vec::new(),
        reports: Vec::new(),
        achieved_fpr: None,
        negatives_exhausted: false,
    };

    for stage_index in 0..config.max_stages {
        let (negs, draws) = mine(&cascade, &sampler, &mut rng, config.negatives_per_stage, max_draws);
        let pass_rate = negs.len() as f64 / draws as f64;
        if stage_index > 0 && pass_rate <= config.target_fpr {
            info!("stage {stage_index}: cascade passes {pass_rate:.5} of negatives, target met");
            break;
        }
        if negs.len() < config.negatives_per_stage {
            cascade.negatives_exhausted = true;
            warn!(
                "stage {stage_index}: only {} of {} negatives found in {draws} draws",
                negs.len(),
                config.negatives_per_stage
            );
            if negs.is_empty() {
                break;
            }
        }
        let pos: Vec<&IntegralImage> = positives
            .iter()
            .filter(|p| cascade.classify_window(p, 0, 0, 1.0).map(|r| r.accept).unwrap_or(false))
            .collect();
        if pos.is_empty() {
            warn!("stage {stage_index}: no positives survive the earlier stages");
            break;
        }
        let mut chosen: Vec<usize> = sample(&mut rng, all.len(), per_stage).into_vec();
        chosen.sort_unstable();
        let features: Vec<HaarFeature> = chosen.iter().map(|&i| all[i]).collect();

        let windows: Vec<(&IntegralImage, usize, usize, f64)> = pos
            .iter()
            .map(|&p| (p, 0, 0, 1.0))
            .chain(negs.iter().map(|n| (&negatives[n.image], n.x, n.y, n.scale)))
            .collect();
        let labels: Vec<bool> = (0..windows.len()).map(|i| i < pos.len()).collect();
        let matrix = FeatureMatrix::new(windows.len(), feature_values(&features, &windows, w))?;
        let fit = train_stage(&matrix, &labels, &targets)?;
        if !fit.reached_targets {
            warn!(
                "stage {stage_index}: false-positive rate {:.4} after {} rounds",
                fit.false_positive_rate,
                fit.rounds.len()
            );
        }
        info!(
            "stage {stage_index}: {} features, detection {:.4}, false positives {:.4}",
            fit.rounds.len(),
            fit.detection_rate,
            fit.false_positive_rate
        );
        cascade.stages.push(Stage {
            classifiers: fit
                .rounds
                .iter()
                .map(|r| WeakClassifier {
                    feature: features[r.column],
                    threshold: r.stump.threshold,
                    polarity: r.stump.polarity,
                    alpha: r.alpha,
                    error: r.stump.error,
                })
                .collect(),
            threshold: fit.threshold,
        });
        cascade.reports.push(StageReport {
            detection_rate: fit.detection_rate,
            false_positive_rate: fit.false_positive_rate,
            positives: pos.len(),
            negatives: negs.len(),
            reached_targets: fit.reached_targets,
        });
    }
    if cascade.stages.is_empty() {
        return Err(HaarError::Config("no stage could be trained".into()));
    }
    let measure = config.negatives_per_stage.max(1000) * 10;
    let (accepted, draws) = mine(&cascade, &sampler, &mut rng, usize::MAX, measure);
    cascade.achieved_fpr = Some(accepted.len() as f64 / draws as f64);
    Ok(cascade)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haar::{FeatureKind, Stage};

    fn blob(bright: bool, seed: u64) -> IntegralImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<u8> = (0..144)
            .map(|i| {
                let (x, y) = (i % 12, i / 12);
                let inside = (3..9).contains(&x) && (3..9).contains(&y);
                let base: u8 = if bright && inside { 220 } else { 40 };
                base.saturating_add(rng.gen_range(0..20))
            })
            .collect();
        IntegralImage::from_pixels(12, 12, &px).unwrap()
    }

    fn noise(seed: u64, w: usize, h: usize) -> IntegralImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<u8> = (0..w * h).map(|_| rng.gen_range(30..70)).collect();
        IntegralImage::from_pixels(w, h, &px).unwrap()
    }

    fn small_config() -> CascadeConfig {
        CascadeConfig {
            window: 12,
            negatives_per_stage: 200,
            target_fpr: 0.01,
            max_stages: 4,
            ..CascadeConfig::default()
        }
    }

    #[test]
    fn separable_blobs_need_one_stage() {
        let pos: Vec<_> = (0..40).map(|i| blob(true, i)).collect();
        let neg: Vec<_> = (0..10).map(|i| noise(100 + i, 30, 30)).collect();
        let c = train_cascade(&pos, &neg, &small_config()).unwrap();
        assert_eq!(c.stages.len(), 1, "{:?}", c.reports);
        assert_eq!(c.reports[0].false_positive_rate, 0.0);
        assert_eq!(c.reports[0].detection_rate, 1.0);
        assert_eq!(c.fpr_product(), 0.0);
        assert!(c.achieved_fpr.unwrap() < 0.01, "{:?}", c.achieved_fpr);
        for p in &pos {
            assert!(c.classify_window(p, 0, 0, 1.0).unwrap().accept);
        }
    }

    #[test]
    fn zero_stages_is_a_config_error() {
        let pos = vec![blob(true, 0)];
        let neg = vec![noise(1, 12, 12)];
        let cfg = CascadeConfig { max_stages: 0, ..small_config() };
        assert!(matches!(train_cascade(&pos, &neg, &cfg), Err(HaarError::Config(_))));
        assert!(matches!(train_cascade(&[], &neg, &small_config()), Err(HaarError::EmptySet(_))));
        assert!(train_cascade(&pos, &[noise(1, 8, 8)], &small_config()).is_err());
    }

    #[test]
    fn empty_cascade_accepts_vacuously() {
        let c = Cascade {
            window: 12,
            stages: vec![],
            reports: vec![],
            achieved_fpr: None,
            negatives_exhausted: false,
        };
        let r = c.classify_window(&noise(0, 12, 12), 0, 0, 1.0).unwrap();
        assert_eq!((r.accept, r.stages_evaluated, r.features_evaluated), (true, 0, 0));
        assert!(c.classify_window(&noise(0, 12, 12), 1, 0, 1.0).is_err());
    }

    #[test]
    fn early_exit_counts() {
        let never = WeakClassifier {
            feature: HaarFeature::new(FeatureKind::TwoHorizontal, 0, 0, 1, 1),
            threshold: f32::NEG_INFINITY,
            polarity: 1,
            alpha: 1.0,
            error: 0.1,
        };
        let stage = |n: usize, threshold: f32| Stage {
            classifiers: vec![never.clone(); n],
            threshold,
        };
        let c = Cascade {
            window: 12,
            stages: vec![stage(2, 0.0), stage(3, 0.5), stage(4, 0.0)],
            reports: vec![],
            achieved_fpr: None,
            negatives_exhausted: false,
        };
        let r = c.classify_window(&noise(0, 12, 12), 0, 0, 1.0).unwrap();
        assert_eq!((r.accept, r.stages_evaluated, r.features_evaluated), (false, 2, 5));
        assert_eq!(r.margin, -0.5);
        let r = c.prefix(1).classify_window(&noise(0, 12, 12), 0, 0, 1.0).unwrap();
        assert_eq!((r.accept, r.stages_evaluated, r.features_evaluated), (true, 1, 2));
    }

    #[test]
    fn training_is_deterministic_and_prefixes_accept_supersets() {
        let pos: Vec<_> = (0..60)
            .map(|i| {
                // low-contrast blobs so a single stage is not enough
                let mut rng = ChaCha8Rng::seed_from_u64(i);
                let px: Vec<u8> = (0..144)
                    .map(|j| {
                        let (x, y) = (j % 12, j / 12);
                        let inside = (4..8).contains(&x) && (2..10).contains(&y);
                        rng.gen_range(30..70) + if inside { 8 } else { 0 }
                    })
                    .collect();
                IntegralImage::from_pixels(12, 12, &px).unwrap()
            })
            .collect();
        let neg: Vec<_> = (0..6).map(|i| noise(500 + i, 40, 40)).collect();
        let cfg = CascadeConfig { f_max: 0.3, ..small_config() };
        let a = train_cascade(&pos, &neg, &cfg).unwrap();
        let b = train_cascade(&pos, &neg, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.stages.len() >= 2, "{:?}", a.reports);
        let probe = noise(999, 40, 40);
        for y in 0..=28 {
            for x in 0..=28 {
                let full = a.classify_window(&probe, x, y, 1.0).unwrap().accept;
                for k in 0..a.stages.len() {
                    if full {
                        assert!(a.prefix(k).classify_window(&probe, x, y, 1.0).unwrap().accept);
                    }
                }
            }
        }
    }
}
