//! Faithfulness metrics for attribution maps: input-perturbation curves
//! scored by balanced accuracy, and overlap with withheld masks (IoU at a
//! quantile threshold, average precision).
//!
//! Ties are always broken by flat pixel index, ascending.

use std::cmp::Ordering;
use std::io::Write;

use rand::Rng;

use crate::error::{invalid, shape_err, Result};

/// Default fraction grid: `0.00, 0.05, …, 1.00`.
pub fn default_fractions() -> Vec<f64> {
    (0..=20).map(|k| k as f64 / 20.0).collect()
}

pub const IOU_QUANTILES: [f64; 3] = [0.975, 0.95, 0.90];

/// An attribution map together with what it explains.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionRecord {
    pub attribution: Vec<f64>,
    pub image: Vec<f32>,
    pub label: u8,
    pub mask: Option<Vec<u8>>,
}

impl AttributionRecord {
    pub fn new(attribution: Vec<f64>, image: Vec<f32>, label: u8, mask: Option<Vec<u8>>) -> Result<Self> {
        if attribution.len() != image.len() || mask.as_ref().is_some_and(|m| m.len() != image.len()) {
            return Err(shape_err!("attribution, image and mask must have the same number of pixels"));
        }
        if attribution.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(invalid!("attributions must be finite and nonnegative"));
        }
        let total: f64 = attribution.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid!("attribution sums to {total}, expected 1"));
        }
        Ok(Self { attribution, image, label, mask })
    }
}

fn by_value_then_index(values: &[f64], a: usize, b: usize) -> Ordering {
    values[a].total_cmp(&values[b]).then(a.cmp(&b))
}

/// Pixel indices from least to most important.
pub fn removal_order(attribution: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..attribution.len()).collect();
    idx.sort_by(|&a, &b| by_value_then_index(attribution, a, b));
    idx
}

/// Zeroes the `⌊fraction·P⌋` least important pixels.
pub fn perturb(image: &[f32], attribution: &[f64], fraction: f64) -> Result<Vec<f32>> {
    if image.len() != attribution.len() {
        return Err(shape_err!("image has {} pixels, attribution {}", image.len(), attribution.len()));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid!("fraction {fraction} outside [0, 1]"));
    }
    Ok(perturb_ordered(image, &removal_order(attribution), fraction))
}

fn perturb_ordered(image: &[f32], order: &[usize], fraction: f64) -> Vec<f32> {
    let k = (fraction * image.len() as f64).floor() as usize;
    let mut out = image.to_vec();
    for &i in &order[..k.min(order.len())] {
        out[i] = 0.0;
    }
    out
}

/// Mean per-class recall over the classes present in `labels`, in percent.
pub fn balanced_accuracy(labels: &[usize], predictions: &[usize]) -> Result<f64> {
    if labels.is_empty() || labels.len() != predictions.len() {
        return Err(invalid!("need equally many labels and predictions, at least one"));
    }
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let (mut hit, mut seen) = (vec![0usize; classes], vec![0usize; classes]);
    for (&y, &p) in labels.iter().zip(predictions) {
        seen[y] += 1;
        hit[y] += usize::from(y == p);
    }
    let recalls: Vec<f64> = seen.iter().zip(&hit).filter(|(s, _)| **s > 0).map(|(s, h)| *h as f64 / *s as f64).collect();
    Ok(100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationCurve {
    fractions: Vec<f64>,
    balanced_accuracy: Vec<f64>,
}

impl PerturbationCurve {
    /// Fractions must ascend strictly from 0 to 1.
    pub fn new(fractions: Vec<f64>, balanced_accuracy: Vec<f64>) -> Result<Self> {
        validate_fractions(&fractions)?;
        if fractions.len() != balanced_accuracy.len() {
            return Err(shape_err!("{} fractions, {} accuracies", fractions.len(), balanced_accuracy.len()));
        }
        Ok(Self { fractions, balanced_accuracy })
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn balanced_accuracy(&self) -> &[f64] {
        &self.balanced_accuracy
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,balanced_accuracy\n");
        for (f, a) in self.fractions.iter().zip(&self.balanced_accuracy) {
            out.push_str(&format!("{f},{a}\n"));
        }
        out
    }
}

fn validate_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.len() < 2 {
        return Err(invalid!("a curve needs at least two fractions"));
    }
    if fractions[0] != 0.0 || *fractions.last().expect("nonempty") != 1.0 {
        return Err(invalid!("fractions must start at 0 and end at 1"));
    }
    if fractions.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid!("fractions must ascend strictly"));
    }
    Ok(())
}

/// Balanced accuracy of `scorer` on the records after removing each fraction
/// of pixels. The scorer maps a batch of images to class predictions.
pub fn perturbation_curve<F>(mut scorer: F, records: &[AttributionRecord], fractions: &[f64]) -> Result<PerturbationCurve>
where
    F: FnMut(&[&[f32]]) -> Result<Vec<usize>>,
{
    if records.is_empty() {
        return Err(invalid!("perturbation curve of an empty record set"));
    }
    validate_fractions(fractions)?;
    let labels: Vec<usize> = records.iter().map(|r| r.label as usize).collect();
    let orders: Vec<Vec<usize>> = records.iter().map(|r| removal_order(&r.attribution)).collect();
    let mut accs = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let images: Vec<Vec<f32>> = records.iter().zip(&orders).map(|(r, o)| perturb_ordered(&r.image, o, f)).collect();
        let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
        let preds = scorer(&refs)?;
        accs.push(balanced_accuracy(&labels, &preds)?);
    }
    PerturbationCurve::new(fractions.to_vec(), accs)
}

/// Trapezoidal area under the curve over `[0, 1]`.
pub fn curve_auc(curve: &PerturbationCurve) -> f64 {
    let (f, a) = (&curve.fractions, &curve.balanced_accuracy);
    f.windows(2).zip(a.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum()
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(invalid!("quantile needs values and q in [0, 1]"));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    Ok(s[lo] + (pos - lo as f64) * (s[hi] - s[lo]))
}

fn check_mask(attribution: &[f64], mask: &[u8]) -> Result<()> {
    if attribution.len() != mask.len() {
        return Err(shape_err!("attribution has {} pixels, mask {}", attribution.len(), mask.len()));
    }
    if mask.iter().all(|&m| m == 0) {
        return Err(invalid!("mask has no positive pixel"));
    }
    Ok(())
}

/// IoU of `{attribution > quantile(q)}` with the mask.
pub fn iou_at_quantile(attribution: &[f64], mask: &[u8], q: f64) -> Result<f64> {
    check_mask(attribution, mask)?;
    let t = quantile(attribution, q)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &m) in attribution.iter().zip(mask) {
        let (kept, pos) = (a > t, m != 0);
        inter += usize::from(kept && pos);
        union += usize::from(kept || pos);
    }
    Ok(inter as f64 / union as f64)
}

/// Non-interpolated average precision of the ranking by descending
/// attribution against the mask.
pub fn average_precision(attribution: &[f64], mask: &[u8]) -> Result<f64> {
    check_mask(attribution, mask)?;
    let mut idx: Vec<usize> = (0..attribution.len()).collect();
    idx.sort_by(|&a, &b| attribution[b].total_cmp(&attribution[a]).then(a.cmp(&b)));
    let positives = mask.iter().filter(|&&m| m != 0).count() as f64;
    let (mut hits, mut ap) = (0usize, 0.0);
    for (n, &i) in idx.iter().enumerate() {
        if mask[i] != 0 {
            hits += 1;
            ap += hits as f64 / (n + 1) as f64;
        }
    }
    Ok(ap / positives)
}

/// Mean of [`average_precision`] over records, all of which need masks.
pub fn mean_average_precision(records: &[AttributionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(invalid!("mean average precision of an empty record set"));
    }
    let mut total = 0.0;
    for r in records {
        let mask = r.mask.as_ref().ok_or_else(|| invalid!("record without a mask"))?;
        total += average_precision(&r.attribution, mask)?;
    }
    Ok(total / records.len() as f64)
}

/// Normalized i.i.d. uniform scores: the random-ranking reference.
pub fn random_attribution<R: Rng + ?Sized>(pixels: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..pixels).map(|_| rng.gen::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Binary PGM (P5) of `values`, min-max scaled to `0..=255`.
pub fn write_pgm<W: Write>(values: &[f64], width: usize, height: usize, mut out: W) -> Result<()> {
    if values.len() != width * height || values.is_empty() {
        return Err(shape_err!("{} values for a {width}x{height} image", values.len()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels: Vec<u8> = values
        .iter()
        .map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(&pixels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn curve(points: &[(f64, f64)]) -> PerturbationCurve {
        PerturbationCurve::new(points.iter().map(|p| p.0).collect(), points.iter().map(|p| p.1).collect()).unwrap()
    }

    #[test]
    fn perturb_examples() {
        let img = [1.0f32, 2.0, 3.0, 4.0];
        let attr = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(perturb(&img, &attr, 0.0).unwrap(), img);
        assert_eq!(perturb(&img, &attr, 1.0).unwrap(), [0.0; 4]);
        assert_eq!(perturb(&img, &[0.4, 0.1, 0.2, 0.3], 0.5).unwrap(), [1.0, 0.0, 0.0, 4.0]);
        assert_eq!(perturb(&img, &attr, 0.5).unwrap(), [0.0, 0.0, 3.0, 4.0]);
        assert_eq!(perturb(&img, &[0.25; 4], 0.5).unwrap(), [0.0, 0.0, 3.0, 4.0]);
        assert!(perturb(&img, &attr[..3], 0.5).is_err());
        assert!(perturb(&img, &attr, 1.5).is_err());
    }

    fn records(n: usize) -> Vec<AttributionRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..n)
            .map(|i| {
                let image: Vec<f32> = (0..16).map(|_| rng.gen()).collect();
                AttributionRecord::new(vec![1.0 / 16.0; 16], image, (i % 2) as u8, None).unwrap()
            })
            .collect()
    }

    #[test]
    fn curve_examples() {
        let recs = records(10);
        let labels: Vec<usize> = recs.iter().map(|r| r.label as usize).collect();
        let fr = default_fractions();
        // A scorer that knows the answer for untouched images only.
        let perfect = |imgs: &[&[f32]]| -> Result<Vec<usize>> {
            Ok(imgs
                .iter()
                .map(|im| recs.iter().find(|r| r.image.as_slice() == *im).map_or(0, |r| r.label as usize))
                .collect())
        };
        let c = perturbation_curve(perfect, &recs, &fr).unwrap();
        assert_eq!(c.balanced_accuracy()[0], 100.0);
        let constant = |imgs: &[&[f32]]| -> Result<Vec<usize>> { Ok(vec![1; imgs.len()]) };
        let c = perturbation_curve(constant, &recs, &fr).unwrap();
        assert_eq!(*c.balanced_accuracy().last().unwrap(), 50.0);
        let a = perturbation_curve(perfect, &recs, &fr).unwrap();
        let b = perturbation_curve(perfect, &recs, &fr).unwrap();
        assert_eq!(a, b);
        assert!(perturbation_curve(constant, &[], &fr).is_err());
        assert_eq!(balanced_accuracy(&labels, &labels).unwrap(), 100.0);
    }

    #[test]
    fn balanced_accuracy_weights_classes_equally() {
        assert_eq!(balanced_accuracy(&[0, 0, 0, 1], &[0, 0, 0, 0]).unwrap(), 50.0);
        assert!((balanced_accuracy(&[0, 0, 1, 2], &[0, 1, 1, 2]).unwrap() - 100.0 * (0.5 + 1.0 + 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn auc_examples() {
        assert!((curve_auc(&curve(&[(0.0, 33.3), (1.0, 33.3)])) - 33.3).abs() < 1e-12);
        assert_eq!(curve_auc(&curve(&[(0.0, 100.0), (1.0, 0.0)])), 50.0);
        assert_eq!(curve_auc(&curve(&[(0.0, 100.0), (0.5, 100.0), (1.0, 0.0)])), 75.0);
        assert_eq!(curve_auc(&curve(&[(0.0, 100.0), (1.0, 100.0)])), 100.0);
        assert!(PerturbationCurve::new(vec![0.0], vec![1.0]).is_err());
        assert!(PerturbationCurve::new(vec![0.0, 0.5], vec![1.0, 1.0]).is_err());
        assert!(PerturbationCurve::new(vec![0.0, 0.5, 0.5, 1.0], vec![1.0; 4]).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[0.0, 1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.0);
        assert!((quantile(&[0.0, 10.0], 0.975).unwrap() - 9.75).abs() < 1e-12);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 1.0).unwrap(), 3.0);
    }

    #[test]
    fn iou_examples() {
        let mut mask = vec![0u8; 100];
        mask[20..30].fill(1);
        let attr: Vec<f64> = mask.iter().map(|&m| f64::from(m) / 10.0).collect();
        assert_eq!(iou_at_quantile(&attr, &mask, 0.9).unwrap(), 1.0);
        let disjoint: Vec<f64> = mask.iter().map(|&m| f64::from(1 - m) / 90.0).collect();
        assert_eq!(iou_at_quantile(&disjoint, &mask, 0.9).unwrap(), 0.0);
        let uniform = vec![1.0 / 4096.0; 4096];
        let mut big = vec![0u8; 4096];
        big[..100].fill(1);
        for q in IOU_QUANTILES {
            assert_eq!(iou_at_quantile(&uniform, &big, q).unwrap(), 0.0);
        }
        assert!(iou_at_quantile(&attr, &[0; 100], 0.9).is_err());
    }

    #[test]
    fn ap_examples() {
        let mask = [0u8, 1, 0, 0];
        assert_eq!(average_precision(&[0.4, 0.3, 0.2, 0.1], &[1, 0, 0, 0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.1, 0.9, 0.0, 0.0], &mask).unwrap(), 1.0);
        // Anti-aligned: m positives last among P gives (1/m) Σ_k k/(P−m+k).
        let (p, m) = (10usize, 3usize);
        let mut mask = vec![0u8; p];
        mask[p - m..].fill(1);
        let attr: Vec<f64> = (0..p).map(|i| (p - i) as f64).collect();
        let tail: f64 = (1..=m).map(|k| k as f64 / (p - m + k) as f64).sum::<f64>() / m as f64;
        assert!((average_precision(&attr, &mask).unwrap() - tail).abs() < 1e-15);
        assert!(mean_average_precision(&[]).is_err());
    }

    #[test]
    fn pgm_header_and_scaling() {
        let mut buf = Vec::new();
        write_pgm(&[0.0, 0.5, 1.0, 0.25], 2, 2, &mut buf).unwrap();
        assert_eq!(&buf[..11], b"P5\n2 2\n255\n");
        assert_eq!(&buf[11..], &[0, 128, 255, 64]);
        assert!(write_pgm(&[0.0; 3], 2, 2, &mut Vec::new()).is_err());
    }

    fn attr_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (prop::collection::vec(0u8..6, 64), prop::collection::vec(0u8..2, 64))
            .prop_filter("mask needs a positive pixel", |(_, m)| m.iter().any(|&x| x == 1))
            .prop_map(|(a, m)| (a.into_iter().map(f64::from).collect(), m))
    }

    proptest! {
        #[test]
        fn perturbation_is_monotone(a in prop::collection::vec(0u8..5, 16), f1 in 0.0..=1.0f64, f2 in 0.0..=1.0f64) {
            let attr: Vec<f64> = a.into_iter().map(f64::from).collect();
            let img = [1.0f32; 16];
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let small = perturb(&img, &attr, lo).unwrap();
            let large = perturb(&img, &attr, hi).unwrap();
            for (s, l) in small.iter().zip(&large) {
                prop_assert!(*s == 1.0 || *l == 0.0);
            }
        }

        #[test]
        fn auc_ignores_collinear_points(ys in prop::collection::vec(0.0..100.0f64, 2..8), t in 0.01..0.99f64, seg in 0usize..7) {
            let n = ys.len();
            let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
            let base = PerturbationCurve::new(xs.clone(), ys.clone()).unwrap();
            let s = seg % (n - 1);
            let x = xs[s] + t * (xs[s + 1] - xs[s]);
            let y = ys[s] + t * (ys[s + 1] - ys[s]);
            let (mut xs2, mut ys2) = (xs.clone(), ys.clone());
            xs2.insert(s + 1, x);
            ys2.insert(s + 1, y);
            prop_assume!(xs2.windows(2).all(|w| w[0] < w[1]));
            let denser = PerturbationCurve::new(xs2, ys2).unwrap();
            prop_assert!((curve_auc(&base) - curve_auc(&denser)).abs() < 1e-9);
        }

        #[test]
        fn overlap_metrics_ignore_monotone_transforms((attr, mask) in attr_and_mask()) {
            let transformed: Vec<f64> = attr.iter().map(|a| (2.0 * a).exp() + 3.0).collect();
            prop_assert_eq!(average_precision(&attr, &mask).unwrap(), average_precision(&transformed, &mask).unwrap());
            for q in IOU_QUANTILES {
                prop_assert_eq!(iou_at_quantile(&attr, &mask, q).unwrap(), iou_at_quantile(&transformed, &mask, q).unwrap());
            }
        }
    }
}
