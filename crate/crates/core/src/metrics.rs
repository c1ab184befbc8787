//! Overlap scores, the weighted cross-entropy loss value, class weights and
//! per-volume aggregation of evaluation results.
//!
//! [`paper_score`] is `|A∩B| / (|A| + |B∖A|)`, labelled a Dice score where it
//! was introduced but algebraically the Jaccard index. Both it and the
//! standard Dice are reported everywhere.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Pixel counts of a binary prediction against a binary truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub ntp: u64,
    pub nfp: u64,
    pub nfn: u64,
    pub ntn: u64,
}

impl ConfusionCounts {
    /// Nonzero is foreground in both masks.
    pub fn from_masks(pred: &Tensor<u8>, truth: &Tensor<u8>) -> Result<Self> {
        if pred.shape() != truth.shape() {
            return Err(Error::ShapeMismatch {
                op: "confusion_counts",
                lhs: pred.shape().to_vec(),
                rhs: truth.shape().to_vec(),
            });
        }
        Ok(Self::from_slices(pred.data(), truth.data()))
    }

    fn from_slices(pred: &[u8], truth: &[u8]) -> Self {
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p != 0, t != 0) {
                (true, true) => c.ntp += 1,
                (true, false) => c.nfp += 1,
                (false, true) => c.nfn += 1,
                (false, false) => c.ntn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.ntp + self.nfp + self.nfn + self.ntn
    }

    /// `|A|`, the truth foreground.
    pub fn truth_size(&self) -> u64 {
        self.ntp + self.nfn
    }

    pub fn merge(&mut self, other: &Self) {
        self.ntp += other.ntp;
        self.nfp += other.nfp;
        self.nfn += other.nfn;
        self.ntn += other.ntn;
    }

    /// `ntp / (|A| + nfp)`; 1.0 when both masks are empty.
    pub fn paper_score(&self) -> f64 {
        ratio(self.ntp, self.truth_size() + self.nfp)
    }

    pub fn dice(&self) -> f64 {
        ratio(2 * self.ntp, 2 * self.ntp + self.nfp + self.nfn)
    }

    pub fn jaccard(&self) -> f64 {
        ratio(self.ntp, self.ntp + self.nfp + self.nfn)
    }

    pub fn scores(&self) -> Scores {
        Scores {
            paper_score: self.paper_score(),
            dice: self.dice(),
            jaccard: self.jaccard(),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `paper_score` of `pred` (set B) against `truth` (set A): |A∩B| / (|A| + |B−A|).
pub fn paper_score(pred: &Tensor<u8>, truth: &Tensor<u8>) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, truth)?.paper_score())
}

pub fn dice_standard(pred: &Tensor<u8>, truth: &Tensor<u8>) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, truth)?.dice())
}

pub fn jaccard(pred: &Tensor<u8>, truth: &Tensor<u8>) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, truth)?.jaccard())
}

/// Value of the weighted cross-entropy without recording a graph; matches
/// [`crate::Tape::weighted_cross_entropy`].
pub fn weighted_cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<u8>, weights: &ClassWeights) -> Result<f64> {
    let (n, c, h, w) = probs.dims4()?;
    if labels.shape() != [n, h, w] {
        return Err(Error::ShapeMismatch {
            op: "weighted_cross_entropy",
            lhs: probs.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    if weights.len() != c {
        return Err(invalid(
            "weighted_cross_entropy",
            format!("{} class weights for {c} classes", weights.len()),
        ));
    }
    let plane = h * w;
    let mut total = 0.0;
    for (i, &label) in labels.data().iter().enumerate() {
        let k = label as usize;
        if k >= c {
            return Err(invalid("weighted_cross_entropy", format!("label {k} outside [0, {c})")));
        }
        let p = probs.data()[((i / plane) * c + k) * plane + i % plane].as_f64();
        total -= weights.get(k) * p.max(1e-12).ln();
    }
    Ok(total / labels.numel() as f64)
}

/// Per-pixel `argmax == lesion_class`, ties resolved toward the lower index.
pub fn probs_to_mask<T: Scalar>(probs: &Tensor<T>, lesion_class: usize) -> Result<Tensor<u8>> {
    let (n, c, h, w) = probs.dims4()?;
    if lesion_class >= c {
        return Err(invalid("probs_to_mask", format!("lesion class {lesion_class} outside [0, {c})")));
    }
    let plane = h * w;
    Ok(Tensor::from_fn(&[n, h, w], |i| {
        let base = (i / plane) * c * plane + i % plane;
        let mut best = 0;
        for k in 1..c {
            if probs.data()[base + k * plane] > probs.data()[base + best * plane] {
                best = k;
            }
        }
        u8::from(best == lesion_class)
    }))
}

/// Per-pixel argmax label map `[N, H, W]`.
pub fn probs_to_labels<T: Scalar>(probs: &Tensor<T>) -> Result<Tensor<u8>> {
    let (n, c, h, w) = probs.dims4()?;
    let plane = h * w;
    Ok(Tensor::from_fn(&[n, h, w], |i| {
        let base = (i / plane) * c * plane + i % plane;
        (1..c).fold(0, |best, k| {
            if probs.data()[base + k * plane] > probs.data()[base + best * plane] {
                k
            } else {
                best
            }
        }) as u8
    }))
}

/// Positive per-class loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(invalid("class_weights", format!("weights must be positive and finite: {weights:?}")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    /// Inverse frequency, normalized to mean 1, clamped to `[0.1, 10]`.
    /// Absent classes get the upper clamp.
    pub fn inverse_frequency(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if counts.is_empty() || total == 0 {
            return Err(invalid("class_weights", "no labelled pixels".to_string()));
        }
        let raw: Vec<f64> = counts
            .iter()
            .map(|&n| if n == 0 { f64::INFINITY } else { total as f64 / n as f64 })
            .collect();
        let finite: Vec<f64> = raw.iter().copied().filter(|w| w.is_finite()).collect();
        let mean = finite.iter().sum::<f64>() / finite.len() as f64;
        Self::new(raw.iter().map(|w| (w / mean).clamp(0.1, 10.0)).collect())
    }

    /// Pixel counts per class over label maps.
    pub fn count_labels<'a>(classes: usize, labels: impl IntoIterator<Item = &'a Tensor<u8>>) -> Vec<u64> {
        let mut counts = vec![0u64; classes];
        for t in labels {
            for &l in t.data() {
                if let Some(c) = counts.get_mut(l as usize) {
                    *c += 1;
                }
            }
        }
        counts
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub paper_score: f64,
    pub dice: f64,
    pub jaccard: f64,
}

impl Scores {
    fn mean(items: &[Scores]) -> Option<Scores> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        Some(Scores {
            paper_score: items.iter().map(|s| s.paper_score).sum::<f64>() / n,
            dice: items.iter().map(|s| s.dice).sum::<f64>() / n,
            jaccard: items.iter().map(|s| s.jaccard).sum::<f64>() / n,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeReport {
    pub volume_id: String,
    /// Mean over slices with nonempty truth; `None` if there are none.
    pub slice_mean: Option<Scores>,
    /// Scores of the summed voxel counts over every slice.
    pub global: Scores,
    pub slices: usize,
    pub scored_slices: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub volumes: Vec<VolumeReport>,
    /// Mean of the per-volume slice means (volumes without any lesion
    /// slice are left out).
    pub mean: Option<Scores>,
    /// Scores of voxel counts summed over all volumes.
    pub global: Scores,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let w = self.volumes.iter().map(|v| v.volume_id.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<w$}  {:>11}  {:>9}  {:>9}  {:>12}  {:>11}  {:>6}",
            "volume", "paper_score", "dice", "jaccard", "global_paper", "global_dice", "slices"
        );
        let row = |out: &mut String, id: &str, m: Option<Scores>, g: Scores, slices: String| {
            let _ = writeln!(
                out,
                "{:<w$}  {:>11}  {:>9}  {:>9}  {:>12.6}  {:>11.6}  {:>6}",
                id,
                fmt_opt(m.map(|s| s.paper_score)),
                fmt_opt(m.map(|s| s.dice)),
                fmt_opt(m.map(|s| s.jaccard)),
                g.paper_score,
                g.dice,
                slices
            );
        };
        for v in &self.volumes {
            row(&mut out, &v.volume_id, v.slice_mean, v.global, format!("{}/{}", v.scored_slices, v.slices));
        }
        let total: usize = self.volumes.iter().map(|v| v.slices).sum();
        row(&mut out, "mean", self.mean, self.global, total.to_string());
        out
    }

    /// `volume_id,paper_score,dice,jaccard,global_paper_score,global_dice,global_jaccard`
    /// rows, closed by a `mean` row. Undefined slice means are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("volume_id,paper_score,dice,jaccard,global_paper_score,global_dice,global_jaccard\n");
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let mut row = |id: &str, m: Option<Scores>, g: Scores| {
            let _ = writeln!(
                out,
                "{id},{},{},{},{},{},{}",
                cell(m.map(|s| s.paper_score)),
                cell(m.map(|s| s.dice)),
                cell(m.map(|s| s.jaccard)),
                g.paper_score,
                g.dice,
                g.jaccard
            );
        };
        for v in &self.volumes {
            row(&v.volume_id, v.slice_mean, v.global);
        }
        row("mean", self.mean, self.global);
        out
    }
}

/// Collects per-slice results and aggregates them per volume.
#[derive(Debug, Default, Clone)]
pub struct EvalAccumulator {
    volumes: BTreeMap<String, (Vec<Scores>, ConfusionCounts, usize)>,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one `[H, W]` (or any equal-shaped) prediction and truth pair.
    pub fn add_slice(&mut self, volume_id: &str, pred: &Tensor<u8>, truth: &Tensor<u8>) -> Result<()> {
        let counts = ConfusionCounts::from_masks(pred, truth)?;
        let entry = self.volumes.entry(volume_id.to_string()).or_default();
        if counts.truth_size() > 0 {
            entry.0.push(counts.scores());
        }
        entry.1.merge(&counts);
        entry.2 += 1;
        Ok(())
    }

    pub fn finish(&self) -> EvalReport {
        let mut total = ConfusionCounts::default();
        let mut volumes = Vec::new();
        for (id, (slices, counts, n)) in &self.volumes {
            total.merge(counts);
            volumes.push(VolumeReport {
                volume_id: id.clone(),
                slice_mean: Scores::mean(slices),
                global: counts.scores(),
                slices: *n,
                scored_slices: slices.len(),
            });
        }
        let means: Vec<Scores> = volumes.iter().filter_map(|v| v.slice_mean).collect();
        EvalReport {
            mean: Scores::mean(&means),
            global: total.scores(),
            volumes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> Tensor<u8> {
        Tensor::new(&[bits.len()], bits.to_vec()).unwrap()
    }

    #[test]
    fn score_examples() {
        let a = mask(&[1, 1, 0, 0]);
        assert_eq!(paper_score(&a, &a).unwrap(), 1.0);
        assert_eq!(paper_score(&mask(&[0, 0, 1, 1]), &a).unwrap(), 0.0);
        let b = mask(&[0, 1, 1, 0]);
        assert!((paper_score(&b, &a).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice_standard(&b, &a).unwrap(), 0.5);
        assert!((jaccard(&b, &a).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = mask(&[0, 0, 0, 0]);
        for f in [paper_score, dice_standard, jaccard] {
            assert_eq!(f(&empty, &empty).unwrap(), 1.0);
        }
        assert!(matches!(paper_score(&a, &mask(&[1])), Err(Error::ShapeMismatch { .. })));
    }

    proptest! {
        #[test]
        fn paper_score_is_jaccard(bits in prop::collection::vec((0u8..2, 0u8..2), 1..200)) {
            let a = mask(&bits.iter().map(|b| b.0).collect::<Vec<_>>());
            let b = mask(&bits.iter().map(|b| b.1).collect::<Vec<_>>());
            let p = paper_score(&a, &b).unwrap();
            let j = jaccard(&a, &b).unwrap();
            let d = dice_standard(&a, &b).unwrap();
            prop_assert!((p - j).abs() <= 1e-12);
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
            prop_assert_eq!(p, paper_score(&b, &a).unwrap());
            prop_assert_eq!(d, dice_standard(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&d));
            prop_assert_eq!(p == 1.0, a == b);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let probs = Tensor::new(&[1, 2, 1, 1], vec![0.5f64, 0.5]).unwrap();
        let labels = Tensor::new(&[1, 1, 1], vec![1u8]).unwrap();
        let w = ClassWeights::new(vec![1.0, 2.0]).unwrap();
        let loss = weighted_cross_entropy(&probs, &labels, &w).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
        let onehot = Tensor::new(&[1, 2, 1, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let labels = Tensor::new(&[1, 1, 2], vec![0u8, 1]).unwrap();
        assert!(weighted_cross_entropy(&onehot, &labels, &w).unwrap() <= 1e-10);
        let bad = Tensor::new(&[1, 1, 2], vec![0u8, 2]).unwrap();
        assert!(weighted_cross_entropy(&onehot, &bad, &w).is_err());
    }

    #[test]
    fn cross_entropy_value_matches_tape_and_unit_weights() {
        let mut rng = crate::rng::Rng::new(4, 0);
        let logits = Tensor::from_fn(&[2, 3, 2, 2], |_| rng.uniform_range(-2.0, 2.0));
        let probs = crate::kernels::softmax_channels(&logits).unwrap();
        let labels = Tensor::from_fn(&[2, 2, 2], |_| rng.below(3) as u8);
        let w = ClassWeights::new(vec![0.3, 1.0, 4.0]).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(probs.clone());
        let l = tape.weighted_cross_entropy(p, &labels, w.as_slice()).unwrap();
        let direct = weighted_cross_entropy(&probs, &labels, &w).unwrap();
        assert!((tape.value(l).item() - direct).abs() < 1e-12);
        let plain: f64 = (0..8)
            .map(|i| {
                let k = labels.data()[i] as usize;
                -probs.data()[((i / 4) * 3 + k) * 4 + i % 4].ln()
            })
            .sum::<f64>()
            / 8.0;
        let unit = weighted_cross_entropy(&probs, &labels, &ClassWeights::uniform(3)).unwrap();
        assert!((unit - plain).abs() < 1e-12);
    }

    #[test]
    fn descent_on_one_pixel() {
        let labels = Tensor::new(&[1, 1, 1], vec![1u8]).unwrap();
        let mut logits = Tensor::new(&[1, 2, 1, 1], vec![0.3f64, -0.2]).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..20 {
            let mut tape = Tape::new();
            let x = tape.param(logits.clone());
            let p = tape.softmax_channels(x).unwrap();
            let loss = tape.weighted_cross_entropy(p, &labels, &[1.0, 3.0]).unwrap();
            let value = tape.value(loss).item();
            assert!(value < last);
            last = value;
            let g = tape.backward(loss).unwrap();
            let g = g.get(x).unwrap();
            logits = Tensor::from_fn(logits.shape(), |i| logits.data()[i] - 0.1 * g.data()[i]);
        }
    }

    #[test]
    fn argmax_masks() {
        let lo = Tensor::new(&[1, 2, 1, 2], vec![0.9f32, 0.9, 0.1, 0.1]).unwrap();
        assert_eq!(probs_to_mask(&lo, 1).unwrap().data(), &[0, 0]);
        let hi = Tensor::new(&[1, 2, 1, 2], vec![0.1f32, 0.1, 0.9, 0.9]).unwrap();
        assert_eq!(probs_to_mask(&hi, 1).unwrap().data(), &[1, 1]);
        let tie = Tensor::new(&[1, 2, 1, 1], vec![0.5f32, 0.5]).unwrap();
        assert_eq!(probs_to_mask(&tie, 1).unwrap().data(), &[0]);
        assert_eq!(probs_to_labels(&tie).unwrap().data(), &[0]);
        assert!(probs_to_mask(&tie, 2).is_err());
    }

    #[test]
    fn inverse_frequency_weights() {
        let w = ClassWeights::inverse_frequency(&[90, 10]).unwrap();
        // raw 10/9 and 10; mean 50/9
        assert!((w.get(0) - 0.2).abs() < 1e-12);
        assert!((w.get(1) - 1.8).abs() < 1e-12);
        let w = ClassWeights::inverse_frequency(&[1_000_000, 1]).unwrap();
        assert!(w.get(0) >= 0.1 && w.get(1) <= 10.0);
        let w = ClassWeights::inverse_frequency(&[5, 0]).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 10.0]);
        assert!(ClassWeights::new(vec![1.0, 0.0]).is_err());
        assert_eq!(ClassWeights::count_labels(3, [&mask(&[0, 2, 2, 1, 2])]), vec![1, 1, 3]);
    }

    #[test]
    fn aggregation_rules() {
        let mut acc = EvalAccumulator::new();
        acc.add_slice("v1", &mask(&[1, 1, 0, 0]), &mask(&[1, 1, 0, 0])).unwrap();
        acc.add_slice("v1", &mask(&[1, 0, 0, 0]), &mask(&[0, 0, 0, 0])).unwrap();
        acc.add_slice("v0", &mask(&[0, 1, 1, 0]), &mask(&[1, 1, 0, 0])).unwrap();
        let r = acc.finish();
        assert_eq!(r.volumes[0].volume_id, "v0");
        let v1 = &r.volumes[1];
        // empty-truth slice left out of the slice mean, counted globally
        assert_eq!((v1.slices, v1.scored_slices), (2, 1));
        assert_eq!(v1.slice_mean.unwrap().dice, 1.0);
        assert!((v1.global.paper_score - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.mean.unwrap().dice - 0.75).abs() < 1e-15);
        assert!(r.to_csv().starts_with("volume_id,paper_score,dice,jaccard,"));
        assert!(r.to_text().contains("paper_score"));
    }
}
