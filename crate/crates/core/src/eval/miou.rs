use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiouVariant {
    /// `TP / (TP + FP + FN)`.
    #[default]
    Iou,
    /// `TP / (TP + FP)`, the positive predictive value.
    Ppv,
}

impl MiouVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Iou => "iou",
            Self::Ppv => "ppv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    /// Score per class (index 0 = class 1); `None` when the class occurs in
    /// neither prediction nor ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the classes that have a score.
    pub class_avg: f64,
}

/// `C x C` counts, row = ground truth, column = prediction.
pub fn confusion_matrix(pred: &[u8], gt: &[u8], class_count: usize) -> Result<Vec<u64>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    let mut m = vec![0u64; class_count * class_count];
    for (&p, &g) in pred.iter().zip(gt) {
        if g == 0 || g as usize > class_count {
            return Err(Error::arg(format!("ground-truth label {g} outside 1..={class_count}")));
        }
        if p == 0 || p as usize > class_count {
            return Err(Error::arg(format!("predicted label {p} outside 1..={class_count}")));
        }
        m[(g as usize - 1) * class_count + p as usize - 1] += 1;
    }
    Ok(m)
}

pub fn miou(pred: &[u8], gt: &[u8], class_count: usize, variant: MiouVariant) -> Result<MiouResult> {
    let m = confusion_matrix(pred, gt, class_count)?;
    let c = class_count;
    let mut per_class = Vec::with_capacity(c);
    let mut ratios = Vec::with_capacity(c);
    for k in 0..c {
        let tp = m[k * c + k];
        let gt_total: u64 = m[k * c..(k + 1) * c].iter().sum();
        let pred_total: u64 = (0..c).map(|r| m[r * c + k]).sum();
        if gt_total == 0 && pred_total == 0 {
            per_class.push(None);
            continue;
        }
        let (fp, fn_) = (pred_total - tp, gt_total - tp);
        let denom = match variant {
            MiouVariant::Iou => tp + fp + fn_,
            MiouVariant::Ppv => tp + fp,
        };
        let ratio = if denom == 0 { (0, 1) } else { (tp, denom) };
        per_class.push(Some(ratio.0 as f64 / ratio.1 as f64));
        ratios.push(ratio);
    }
    Ok(MiouResult {
        per_class,
        class_avg: mean_of_ratios(&ratios),
    })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `num / den` terms as an exact fraction, rounded once. Falls back
/// to float summation when the fraction outgrows 53 bits.
fn mean_of_ratios(ratios: &[(u64, u64)]) -> f64 {
    if ratios.is_empty() {
        return 0.0;
    }
    let float_mean = || ratios.iter().map(|&(n, d)| n as f64 / d as f64).sum::<f64>() / ratios.len() as f64;
    let (mut num, mut den) = (0u128, 1u128);
    for &(n, d) in ratios {
        let (n, d) = (n as u128, d as u128);
        let g = gcd(den, d);
        let Some(lcm) = (den / g).checked_mul(d) else { return float_mean() };
        let (Some(a), Some(b)) = (num.checked_mul(lcm / den), n.checked_mul(lcm / d)) else {
            return float_mean();
        };
        let Some(sum) = a.checked_add(b) else { return float_mean() };
        let g = gcd(sum, lcm).max(1);
        (num, den) = (sum / g, lcm / g);
    }
    let Some(den) = den.checked_mul(ratios.len() as u128) else { return float_mean() };
    let g = gcd(num, den).max(1);
    let (num, den) = (num / g, den / g);
    const EXACT: u128 = 1 << 53;
    if num <= EXACT && den <= EXACT {
        num as f64 / den as f64
    } else {
        float_mean()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let r = miou(&[1, 2, 2, 2], &[1, 1, 2, 2], 2, MiouVariant::Iou).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(r.class_avg, 7.0 / 12.0);
    }

    #[test]
    fn identity_and_disjoint() {
        let g = [1, 2, 3, 1];
        assert_eq!(miou(&g, &g, 3, MiouVariant::Iou).unwrap().class_avg, 1.0);
        let r = miou(&[2, 2], &[1, 1], 2, MiouVariant::Iou).unwrap();
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.0)]);
        assert_eq!(r.class_avg, 0.0);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let r = miou(&[1, 1, 2], &[1, 1, 2], 4, MiouVariant::Iou).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(r.class_avg, 1.0);
        // class 2 only in ground truth scores 0 under both variants
        let r = miou(&[1, 1], &[1, 2], 2, MiouVariant::Ppv).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.0)]);
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(miou(&[1], &[1, 1], 2, MiouVariant::Iou), Err(Error::Shape(_))));
        assert!(matches!(miou(&[1], &[0], 2, MiouVariant::Iou), Err(Error::Argument(_))));
        assert!(matches!(miou(&[3], &[1], 2, MiouVariant::Iou), Err(Error::Argument(_))));
    }

    fn grid(len: usize, classes: u8) -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(1..=classes, len)
    }

    proptest! {
        #[test]
        fn relabelling_is_symmetric(pred in grid(64, 3), gt in grid(64, 3), perm in Just([1u8, 2, 3]).prop_shuffle()) {
            let map = |v: &[u8]| v.iter().map(|&x| perm[x as usize - 1]).collect::<Vec<_>>();
            let a = miou(&pred, &gt, 3, MiouVariant::Iou).unwrap();
            let b = miou(&map(&pred), &map(&gt), 3, MiouVariant::Iou).unwrap();
            for (k, &to) in perm.iter().enumerate() {
                prop_assert_eq!(a.per_class[k], b.per_class[to as usize - 1]);
            }
            prop_assert_eq!(a.class_avg, b.class_avg);
        }

        #[test]
        fn matches_pixel_enumeration(pred in grid(256, 3), gt in grid(256, 3)) {
            let r = miou(&pred, &gt, 3, MiouVariant::Iou).unwrap();
            let mut terms = Vec::new();
            for c in 1..=3u8 {
                let tp = pred.iter().zip(&gt).filter(|&(&p, &g)| p == c && g == c).count() as u64;
                let union = pred.iter().zip(&gt).filter(|&(&p, &g)| p == c || g == c).count() as u64;
                prop_assert_eq!(r.per_class[c as usize - 1], (union > 0).then(|| tp as f64 / union as f64));
                if union > 0 {
                    terms.push((tp, union));
                }
            }
            // Common denominator: every union is at most 256.
            let l: u64 = terms.iter().map(|t| t.1).product();
            let total: u64 = terms.iter().map(|&(n, d)| n * (l / d)).sum();
            prop_assert_eq!(r.class_avg, total as f64 / (l * terms.len() as u64) as f64);
        }

        #[test]
        fn ppv_dominates_iou_for_binary_masks(pred in grid(49, 2), gt in grid(49, 2)) {
            let iou = miou(&pred, &gt, 2, MiouVariant::Iou).unwrap();
            let ppv = miou(&pred, &gt, 2, MiouVariant::Ppv).unwrap();
            let m = confusion_matrix(&pred, &gt, 2).unwrap();
            for k in 0..2 {
                let (Some(i), Some(p)) = (iou.per_class[k], ppv.per_class[k]) else { continue };
                prop_assert!(p >= i);
                let fn_ = m[k * 2 + (1 - k)];
                let tp = m[k * 2 + k];
                if tp > 0 {
                    prop_assert_eq!(p == i, fn_ == 0);
                }
            }
        }
    }
}
