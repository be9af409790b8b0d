use rayon::prelude::*;

use super::HaarError;

/// Floor on the error used for the vote weight, so a perfect stump gets a
/// large but finite vote.
pub const MIN_ERROR: f64 = 1e-10;

/// Single-threshold rule `h(f) = 1 iff p * f < p * threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stump {
    pub threshold: f32,
    /// +1 or -1.
    pub polarity: i8,
    /// Weighted error achieved on the training weights.
    pub error: f64,
    /// Set when the samples contained a single class.
    pub degenerate: bool,
}

impl Stump {
    #[inline]
    pub fn predict(&self, value: f32) -> bool {
        if self.polarity > 0 {
            value < self.threshold
        } else {
            value > self.threshold
        }
    }
}

/// Vote weight `ln((1 - e) / e)`, quantised to `f32`.
pub fn vote_weight(error: f64) -> f32 {
    let e = error.max(MIN_ERROR);
    ((1.0 - e) / e).ln() as f32
}

/// Optimal stump over `values` by sorting once and sweeping every distinct
/// split. Ties go to the lower threshold, then to polarity +1.
pub fn train_weak(values: &[f32], labels: &[bool], weights: &[f64]) -> Result<Stump, HaarError> {
    if values.is_empty() || values.len() != labels.len() || values.len() != weights.len() {
        return Err(HaarError::Config(format!(
            "train_weak: {} values, {} labels, {} weights",
            values.len(),
            labels.len(),
            weights.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(HaarError::Config(format!("train_weak: value {i} is not finite")));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(HaarError::Config("train_weak: weights must be non-negative".into()));
    }
    let order = sort_order(values);
    let (tp, tn) = class_totals(labels, weights);
    Ok(sweep(values, &order, labels, weights, tp, tn))
}

fn sort_order(values: &[f32]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..values.len() as u32).collect();
    order.sort_by(|&a, &b| values[a as usize].total_cmp(&values[b as usize]));
    order
}

fn class_totals(labels: &[bool], weights: &[f64]) -> (f64, f64) {
    let mut tp = 0.0;
    let mut tn = 0.0;
    for (&l, &w) in labels.iter().zip(weights) {
        if l {
            tp += w;
        } else {
            tn += w;
        }
    }
    (tp, tn)
}

/// Threshold splitting sorted values after the first `k`.
fn split_threshold(values: &[f32], order: &[u32], k: usize, polarity: i8) -> f32 {
    let n = order.len();
    if k == 0 {
        return f32::NEG_INFINITY;
    }
    if k == n {
        return f32::INFINITY;
    }
    let a = values[order[k - 1] as usize];
    let b = values[order[k] as usize];
    let mid = ((a as f64 + b as f64) / 2.0) as f32;
    // the rule needs a < t <= b for p = +1 and a <= t < b for p = -1
    if polarity > 0 && mid <= a {
        b
    } else if polarity < 0 && mid >= b {
        a
    } else {
        mid
    }
}

fn sweep(values: &[f32], order: &[u32], labels: &[bool], weights: &[f64], tp: f64, tn: f64) -> Stump {
    let n = order.len();
    let (mut sp, mut sn) = (0.0f64, 0.0f64);
    let mut best = (f64::INFINITY, 0usize, 1i8);
    for k in 0..=n {
        if k == 0 || k == n || values[order[k - 1] as usize] < values[order[k] as usize] {
            // p = +1 labels the first k positive; p = -1 labels them negative
            let plus = ((tp - sp) + sn).max(0.0);
            let minus = (sp + (tn - sn)).max(0.0);
            if plus < best.0 {
                best = (plus, k, 1);
            }
            if minus < best.0 {
                best = (minus, k, -1);
            }
        }
        if k < n {
            let i = order[k] as usize;
            if labels[i] {
                sp += weights[i];
            } else {
                sn += weights[i];
            }
        }
    }
    let (error, k, polarity) = best;
    Stump {
        threshold: split_threshold(values, order, k, polarity),
        polarity,
        error,
        degenerate: tp == 0.0 || tn == 0.0,
    }
}

/// Feature responses for a fixed sample set, one column per feature, with
/// each column's ascending sort order computed once.
#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    samples: usize,
    values: Vec<f32>,
    order: Vec<u32>,
}

impl FeatureMatrix {
    /// `values` is column-major: `values[c * samples + i]`.
    pub fn new(samples: usize, values: Vec<f32>) -> Result<Self, HaarError> {
        if samples == 0 || values.len() % samples != 0 {
            return Err(HaarError::Config(format!(
                "feature matrix: {} values for {samples} samples",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(HaarError::Config(format!("feature matrix: value {i} is not finite")));
        }
        let order = values.par_chunks(samples).flat_map_iter(sort_order).collect();
        Ok(Self { samples, values, order })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn columns(&self) -> usize {
        self.values.len() / self.samples
    }

    pub fn column(&self, c: usize) -> &[f32] {
        &self.values[c * self.samples..(c + 1) * self.samples]
    }

    fn order(&self, c: usize) -> &[u32] {
        &self.order[c * self.samples..(c + 1) * self.samples]
    }

    /// Best stump over all columns; equal errors go to the lowest column.
    pub fn best_stump(&self, labels: &[bool], weights: &[f64]) -> (usize, Stump) {
        let (tp, tn) = class_totals(labels, weights);
        (0..self.columns())
            .into_par_iter()
            .map(|c| (c, sweep(self.column(c), self.order(c), labels, weights, tp, tn)))
            .reduce_with(|a, b| {
                if b.1.error < a.1.error || (b.1.error == a.1.error && b.0 < a.0) {
                    b
                } else {
                    a
                }
            })
            .expect("matrix has at least one column")
    }
}

/// One boosting round: the chosen column, its stump and its vote.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Round {
    pub column: usize,
    pub stump: Stump,
    pub alpha: f32,
}

/// Discrete AdaBoost over the columns of a feature matrix.
#[derive(Clone, Debug)]
pub struct Booster<'a> {
    matrix: &'a FeatureMatrix,
    labels: &'a [bool],
    weights: Vec<f64>,
    rounds: Vec<Round>,
    scores: Vec<f64>,
}

impl<'a> Booster<'a> {
    /// Starts from weights `1/(2P)` on positives and `1/(2N)` on negatives.
    pub fn new(matrix: &'a FeatureMatrix, labels: &'a [bool]) -> Result<Self, HaarError> {
        if labels.len() != matrix.samples() {
            return Err(HaarError::Config(format!(
                "booster: {} labels for {} samples",
                labels.len(),
                matrix.samples()
            )));
        }
        let pos = labels.iter().filter(|&&l| l).count();
        let neg = labels.len() - pos;
        if pos == 0 {
            return Err(HaarError::EmptySet("positives"));
        }
        if neg == 0 {
            return Err(HaarError::EmptySet("negatives"));
        }
        let weights = labels
            .iter()
            .map(|&l| if l { 0.5 / pos as f64 } else { 0.5 / neg as f64 })
            .collect();
        Ok(Self {
            matrix,
            labels,
            weights,
            rounds: Vec::new(),
            scores: vec![0.0; labels.len()],
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rounds(&self) -> &[Round] {
        &self.rounds
    }

    /// Per-sample `sum(alpha * h)` over the rounds so far, accumulated in
    /// round order.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Adds the minimum-error stump and reweights. Returns `None` without
    /// changing anything when no stump beats chance.
    pub fn step(&mut self) -> Option<Round> {
        let (column, stump) = self.matrix.best_stump(self.labels, &self.weights);
        if stump.error >= 0.5 {
            return None;
        }
        let alpha = vote_weight(stump.error);
        let values = self.matrix.column(column);
        let beta = stump.error / (1.0 - stump.error);
        for (i, &v) in values.iter().enumerate() {
            let h = stump.predict(v);
            if h {
                self.scores[i] += alpha as f64;
            }
            // a perfect stump would zero every weight; leave them as they are
            if h == self.labels[i] && stump.error > 0.0 {
                self.weights[i] *= beta;
            }
        }
        let total: f64 = self.weights.iter().sum();
        self.weights.iter_mut().for_each(|w| *w /= total);
        let round = Round { column, stump, alpha };
        self.rounds.push(round);
        Some(round)
    }
}

/// Largest `f32` not above `v`.
pub(crate) fn f32_at_or_below(v: f64) -> f32 {
    let t = v as f32;
    if (t as f64) <= v {
        t
    } else if t > 0.0 {
        f32::from_bits(t.to_bits() - 1)
    } else if t == 0.0 {
        -f32::from_bits(1)
    } else {
        f32::from_bits(t.to_bits() + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageTargets {
    /// Minimum fraction of positives the stage must accept.
    pub d_min: f64,
    /// Stop adding stumps once the false-positive rate is at most this.
    pub f_max: f64,
    pub max_rounds: usize,
}

impl Default for StageTargets {
    fn default() -> Self {
        Self {
            d_min: 0.995,
            f_max: 0.5,
            max_rounds: 200,
        }
    }
}

/// A boosted stage over matrix columns, before columns are mapped back to
/// features.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFit {
    pub rounds: Vec<Round>,
    /// Accept iff `sum(alpha * h) >= threshold`.
    pub threshold: f32,
    pub detection_rate: f64,
    pub false_positive_rate: f64,
    /// False when `max_rounds` ran out (or boosting stalled) before the
    /// false-positive target was met.
    pub reached_targets: bool,
}

/// Stage threshold keeping at least `ceil(d_min * P)` positives: the
/// corresponding positive score rounded down to `f32`.
pub fn stage_threshold(positive_scores: &[f64], d_min: f64) -> f32 {
    let mut s = positive_scores.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let keep = ((d_min * s.len() as f64 - 1e-9).ceil() as usize).clamp(1, s.len());
    f32_at_or_below(s[keep - 1])
}

pub fn train_stage(matrix: &FeatureMatrix, labels: &[bool], targets: &StageTargets) -> Result<StageFit, HaarError> {
    if targets.max_rounds == 0 {
        return Err(HaarError::Config("max_rounds must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&targets.d_min) || !(0.0..=1.0).contains(&targets.f_max) {
        return Err(HaarError::Config("d_min and f_max must lie in [0, 1]".into()));
    }
    let mut booster = Booster::new(matrix, labels)?;
    let mut fit = None;
    while booster.rounds().len() < targets.max_rounds {
        let Some(round) = booster.step() else { break };
        let (pos, neg): (Vec<_>, Vec<_>) = labels.iter().zip(booster.scores()).partition(|(&l, _)| l);
        let pos: Vec<f64> = pos.into_iter().map(|(_, &s)| s).collect();
        let threshold = stage_threshold(&pos, targets.d_min);
        let rate = |v: &[(&bool, &f64)]| v.iter().filter(|(_, &s)| s >= threshold as f64).count() as f64 / v.len() as f64;
        let detection_rate = pos.iter().filter(|&&s| s >= threshold as f64).count() as f64 / pos.len() as f64;
        let false_positive_rate = rate(&neg);
        let done = false_positive_rate <= targets.f_max;
        fit = Some(StageFit {
            rounds: booster.rounds().to_vec(),
            threshold,
            detection_rate,
            false_positive_rate,
            reached_targets: done,
        });
        if done || round.stump.error == 0.0 {
            break;
        }
    }
    fit.ok_or_else(|| HaarError::Config("no stump beats chance on this sample set".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scores every candidate threshold directly: -inf, +inf and the
    /// midpoint of each pair of adjacent distinct values.
    fn exhaustive(values: &[f32], labels: &[bool], weights: &[f64]) -> Stump {
        let mut distinct: Vec<f32> = values.to_vec();
        distinct.sort_by(f32::total_cmp);
        distinct.dedup();
        let mut cands = vec![(f32::NEG_INFINITY, f32::NEG_INFINITY)];
        for p in distinct.windows(2) {
            let m = ((p[0] as f64 + p[1] as f64) / 2.0) as f32;
            let up = if m <= p[0] { p[1] } else { m };
            let down = if m >= p[1] { p[0] } else { m };
            cands.push((up, down));
        }
        cands.push((f32::INFINITY, f32::INFINITY));
        let mut best: Option<Stump> = None;
        for (up, down) in cands {
            for (t, p) in [(up, 1i8), (down, -1i8)] {
                let s = Stump { threshold: t, polarity: p, error: 0.0, degenerate: false };
                let err: f64 = (0..values.len())
                    .filter(|&i| s.predict(values[i]) != labels[i])
                    .map(|i| weights[i])
                    .sum();
                if best.map_or(true, |b| err < b.error) {
                    best = Some(Stump { error: err, ..s });
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn separable_values_have_zero_error() {
        let v = [1.0, 2.0, 3.0, 10.0, 11.0, 12.0];
        let l = [false, false, false, true, true, true];
        let s = train_weak(&v, &l, &[1.0 / 6.0; 6]).unwrap();
        assert_eq!(s.error, 0.0);
        assert_eq!((s.polarity, s.threshold), (-1, 6.5));
        assert!(!s.degenerate);
    }

    #[test]
    fn single_class_is_degenerate() {
        let s = train_weak(&[3.0, 1.0, 2.0], &[true; 3], &[1.0 / 3.0; 3]).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.error, 0.0);
        assert!((0..3).all(|i| s.predict([3.0, 1.0, 2.0][i])));
    }

    #[test]
    fn five_point_hand_case() {
        // best split puts {1, 2} on the positive side: error = w(4) = 0.125
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        let l = [true, true, false, true, false];
        let w = [0.25, 0.25, 0.25, 0.125, 0.125];
        let s = train_weak(&v, &l, &w).unwrap();
        assert_eq!(s, exhaustive(&v, &l, &w));
        assert_eq!((s.threshold, s.polarity, s.error), (2.5, 1, 0.125));
    }

    #[test]
    fn twenty_sample_dyadic_dataset_matches_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..200 {
            let v: Vec<f32> = (0..20).map(|_| rng.gen_range(0..8) as f32 * 0.5).collect();
            let l: Vec<bool> = (0..20).map(|_| rng.gen()).collect();
            let raw: Vec<u32> = (0..20).map(|_| rng.gen_range(1..8)).collect();
            let total: u32 = raw.iter().sum();
            // normalise through a power of two so every partial sum is exact
            let scale = (total as f64).log2().ceil().exp2();
            let w: Vec<f64> = raw.iter().map(|&r| r as f64 / scale).collect();
            assert_eq!(train_weak(&v, &l, &w).unwrap(), Stump { degenerate: l.iter().all(|&x| x) || l.iter().all(|&x| !x), ..exhaustive(&v, &l, &w) });
        }
    }

    #[test]
    fn adjacent_floats_keep_a_valid_threshold() {
        let a = 1.0f32;
        let b = f32::from_bits(a.to_bits() + 1);
        for (l, p) in [([true, false], 1), ([false, true], -1)] {
            let s = train_weak(&[a, b], &l, &[0.5, 0.5]).unwrap();
            assert_eq!((s.error, s.polarity), (0.0, p));
            assert!(s.predict(a) == l[0] && s.predict(b) == l[1]);
        }
    }

    #[test]
    fn unlearnable_labels_give_near_chance_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4000;
        let v: Vec<f32> = (0..n).map(|_| rng.gen()).collect();
        let l: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let s = train_weak(&v, &l, &vec![1.0 / n as f64; n]).unwrap();
        assert!(s.error > 0.45 && s.error <= 0.5, "{s:?}");
    }

    #[test]
    fn bad_inputs() {
        assert!(train_weak(&[], &[], &[]).is_err());
        assert!(train_weak(&[1.0], &[true, false], &[1.0]).is_err());
        assert!(train_weak(&[f32::NAN], &[true], &[1.0]).is_err());
        assert!(train_weak(&[1.0], &[true], &[-1.0]).is_err());
    }

    /// (f1, f2) grid points labelled positive iff f1 is 2 or 3.
    fn xor_like() -> (FeatureMatrix, Vec<bool>) {
        let f1 = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0];
        let f2 = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let labels = f1.iter().map(|&v| v == 2.0 || v == 3.0).collect();
        (FeatureMatrix::new(8, [f1, f2].concat()).unwrap(), labels)
    }

    fn vote_error(scores: &[f64], labels: &[bool], rounds: &[Round], weights: &[f64]) -> f64 {
        let half: f64 = rounds.iter().map(|r| r.alpha as f64).sum::<f64>() / 2.0;
        (0..labels.len()).filter(|&i| (scores[i] >= half) != labels[i]).map(|i| weights[i]).sum()
    }

    /// Scalar discrete AdaBoost over the same two columns, written without
    /// sorting: every observed value +-0.5 is tried as a threshold.
    fn reference_boost(cols: [&[f32]; 2], labels: &[bool], rounds: usize) -> Vec<(usize, f64)> {
        let n = labels.len();
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut w: Vec<f64> = labels.iter().map(|&l| if l { 0.5 / pos } else { 0.5 / (n as f64 - pos) }).collect();
        let mut out = Vec::new();
        for _ in 0..rounds {
            let mut best = (f64::INFINITY, 0usize, 0.0f32, 0i8);
            for (c, col) in cols.iter().enumerate() {
                let mut ts: Vec<f32> = col.iter().flat_map(|&v| [v - 0.5, v + 0.5]).collect();
                ts.sort_by(f32::total_cmp);
                for &t in &ts {
                    for p in [1i8, -1] {
                        let e: f64 = (0..n).filter(|&i| ((p as f32 * col[i]) < (p as f32 * t)) != labels[i]).map(|i| w[i]).sum();
                        if e < best.0 - 1e-15 {
                            best = (e, c, t, p);
                        }
                    }
                }
            }
            let (e, c, t, p) = best;
            let beta = e / (1.0 - e);
            for i in 0..n {
                if ((p as f32 * cols[c][i]) < (p as f32 * t)) == labels[i] {
                    w[i] *= beta;
                }
            }
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            out.push((c, e));
        }
        out
    }

    #[test]
    fn xor_like_needs_three_rounds() {
        let (m, labels) = xor_like();
        let initial = Booster::new(&m, &labels).unwrap().weights().to_vec();
        let mut b = Booster::new(&m, &labels).unwrap();
        let mut errors = Vec::new();
        for _ in 0..3 {
            let r = b.step().unwrap();
            assert!((b.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(b.weights().iter().all(|&w| w >= 0.0));
            errors.push(vote_error(b.scores(), &labels, b.rounds(), &initial));
            assert!(r.stump.error < 0.5);
        }
        assert!(b.rounds()[0].stump.error >= 0.25);
        assert_eq!(errors[2], 0.0, "{errors:?}");
        assert!(errors[0] > 0.0);
        let reference = reference_boost([m.column(0), m.column(1)], &labels, 3);
        for (r, (c, e)) in b.rounds().iter().zip(reference) {
            assert_eq!(r.column, c);
            assert!((r.stump.error - e).abs() < 1e-12);
        }
    }

    #[test]
    fn lowest_column_wins_ties() {
        let col = [1.0, 2.0, 3.0, 4.0];
        let m = FeatureMatrix::new(4, [col, col, col].concat()).unwrap();
        let labels = [true, true, false, false];
        assert_eq!(m.best_stump(&labels, &[0.25; 4]).0, 0);
    }

    #[test]
    fn separable_stage_is_one_round() {
        let m = FeatureMatrix::new(6, vec![0.0, 1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0]).unwrap();
        let labels = [false, false, false, true, true, true];
        let fit = train_stage(&m, &labels, &StageTargets::default()).unwrap();
        assert_eq!(fit.rounds.len(), 1);
        assert_eq!((fit.detection_rate, fit.false_positive_rate), (1.0, 0.0));
        assert!(fit.reached_targets);
    }

    #[test]
    fn threshold_rounds_down() {
        let s = [0.1f64, 0.7, 0.3];
        let t = stage_threshold(&s, 1.0);
        assert!((t as f64) <= 0.1 && (t as f64) > 0.0999999);
        assert_eq!(stage_threshold(&s, 0.5), f32_at_or_below(0.3));
        assert_eq!(f32_at_or_below(0.0), 0.0);
        assert!((f32_at_or_below(-0.1) as f64) <= -0.1);
    }

    proptest! {
        #[test]
        fn stump_matches_exhaustive(
            data in proptest::collection::vec((0u8..6, any::<bool>(), 1u32..5), 1..20)
        ) {
            let v: Vec<f32> = data.iter().map(|d| d.0 as f32).collect();
            let l: Vec<bool> = data.iter().map(|d| d.1).collect();
            let w: Vec<f64> = data.iter().map(|d| d.2 as f64 / 64.0).collect();
            let s = train_weak(&v, &l, &w).unwrap();
            let e = exhaustive(&v, &l, &w);
            prop_assert_eq!((s.threshold, s.polarity, s.error), (e.threshold, e.polarity, e.error));
        }

        #[test]
        fn training_error_is_bounded_by_round_errors(seed in any::<u64>(), n in 6usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cols = 3;
            let values: Vec<f32> = (0..cols * n).map(|_| rng.gen_range(0..10) as f32).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            labels[0] = true;
            labels[1] = false;
            let m = FeatureMatrix::new(n, values).unwrap();
            let mut b = Booster::new(&m, &labels).unwrap();
            let initial = b.weights().to_vec();
            let mut bound = 1.0;
            for _ in 0..8 {
                let Some(r) = b.step() else { break };
                prop_assert!((b.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(b.weights().iter().all(|&w| w >= 0.0));
                if r.stump.error == 0.0 { break; }
                bound *= 2.0 * (r.stump.error * (1.0 - r.stump.error)).sqrt();
                // alpha is rounded to f32, so allow a little slack on the vote
                prop_assert!(vote_error(b.scores(), &labels, b.rounds(), &initial) <= bound + 1e-6);
            }
        }
    }
}
