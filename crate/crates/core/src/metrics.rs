//! Dice coefficient and Aggregated Jaccard Index.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, InstanceMap, Result};

/// `2|P ∩ G| / (|P| + |G|)`, `1.0` when both masks are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("dice: {} vs {} pixels", pred.len(), gt.len())));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        total += usize::from(p) + usize::from(g);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Dice between the foregrounds of two instance maps.
pub fn binary_dice(pred: &InstanceMap, gt: &InstanceMap) -> Result<f64> {
    check_shape(pred, gt)?;
    dice(&pred.foreground(), &gt.foreground())
}

fn check_shape(pred: &InstanceMap, gt: &InstanceMap) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(format!(
            "{}x{} prediction vs {}x{} ground truth",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

/// Aggregated Jaccard Index.
///
/// Ground-truth instances are visited in raster order of their first pixel.
/// Each is matched to the not-yet-used predicted instance with the highest
/// IoU (ties go to the predicted instance whose first pixel comes first; no
/// match when every IoU is zero). Ordering by position rather than id keeps
/// the score invariant to relabeling either map. Matched pairs add their
/// intersection to the numerator and union to the denominator; unmatched
/// instances on either side add their area to the denominator. Two empty
/// maps score `1.0`.
pub fn aji(pred: &InstanceMap, gt: &InstanceMap) -> Result<f64> {
    check_shape(pred, gt)?;

    let mut gt_area: BTreeMap<u32, u64> = BTreeMap::new();
    let mut pred_area: BTreeMap<u32, u64> = BTreeMap::new();
    let mut overlap: BTreeMap<u32, BTreeMap<u32, u64>> = BTreeMap::new();
    let mut gt_first: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pred_first: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, (&p, &g)) in pred.labels.iter().zip(&gt.labels).enumerate() {
        if g != 0 {
            *gt_area.entry(g).or_default() += 1;
            gt_first.entry(g).or_insert(i);
        }
        if p != 0 {
            *pred_area.entry(p).or_default() += 1;
            pred_first.entry(p).or_insert(i);
        }
        if p != 0 && g != 0 {
            *overlap.entry(g).or_default().entry(p).or_default() += 1;
        }
    }
    if gt_area.is_empty() && pred_area.is_empty() {
        return Ok(1.0);
    }

    let mut used: BTreeMap<u32, bool> = pred_area.keys().map(|&k| (k, false)).collect();
    let (mut num, mut den) = (0u64, 0u64);
    let mut gt_order: Vec<u32> = gt_area.keys().copied().collect();
    gt_order.sort_by_key(|g| gt_first[g]);
    for g in gt_order {
        let ga = gt_area[&g];
        let mut best: Option<(u32, u64, u64)> = None;
        let mut best_iou = 0.0f64;
        if let Some(row) = overlap.get(&g) {
            let mut candidates: Vec<(u32, u64)> = row.iter().map(|(&p, &i)| (p, i)).collect();
            candidates.sort_by_key(|(p, _)| pred_first[p]);
            // strict `>` keeps the earliest-positioned instance among equal IoUs
            for (p, inter) in candidates {
                if used[&p] {
                    continue;
                }
                let union = ga + pred_area[&p] - inter;
                let iou = inter as f64 / union as f64;
                if iou > best_iou {
                    best_iou = iou;
                    best = Some((p, inter, union));
                }
            }
        }
        match best {
            Some((p, inter, union)) => {
                used.insert(p, true);
                num += inter;
                den += union;
            }
            None => den += ga,
        }
    }
    for (p, was_used) in used {
        if !was_used {
            den += pred_area[&p];
        }
    }
    Ok(num as f64 / den as f64)
}

/// Per-image scores plus their means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<(String, f64, f64)>,
    pub dice: f64,
    pub aji: f64,
}

impl MetricReport {
    /// Scores every `(id, prediction, ground truth)` triple and averages the
    /// per-image values.
    pub fn compute<'a, I>(pairs: I) -> Result<MetricReport>
    where
        I: IntoIterator<Item = (String, &'a InstanceMap, &'a InstanceMap)>,
    {
        let mut per_image = Vec::new();
        for (id, pred, gt) in pairs {
            per_image.push((id, binary_dice(pred, gt)?, aji(pred, gt)?));
        }
        let n = per_image.len().max(1) as f64;
        let dice = per_image.iter().map(|r| r.1).sum::<f64>() / n;
        let aji = per_image.iter().map(|r| r.2).sum::<f64>() / n;
        Ok(MetricReport { per_image, dice, aji })
    }
}

/// Instance ids permuted by `perm` (index = old id); unlisted ids unchanged.
pub fn relabel(map: &InstanceMap, perm: &[u32]) -> InstanceMap {
    let labels = map
        .labels
        .iter()
        .map(|&l| perm.get(l as usize).copied().unwrap_or(l))
        .collect();
    InstanceMap { height: map.height, width: map.width, labels }
}

/// Mask with `true` where `labels != 0`, for tests and reports.
pub fn mask_of(labels: &[u32]) -> Vec<bool> {
    labels.iter().map(|&l| l != 0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn m(h: usize, w: usize, labels: Vec<u32>) -> InstanceMap {
        InstanceMap::from_vec(h, w, labels).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = [true, true, false, false];
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
        let p = [true, true, true, true, false, false];
        let g = [false, false, true, true, true, true];
        assert_eq!(dice(&p, &g).unwrap(), 0.5);
        assert!(dice(&p, &g[..5]).is_err());
    }

    #[test]
    fn aji_examples() {
        let gt = m(3, 3, vec![1, 1, 0, 1, 1, 0, 0, 0, 0]);
        assert_eq!(aji(&relabel(&gt, &[0, 5]), &gt).unwrap(), 1.0);
        // two of the four gt pixels plus one outside pixel -> 2 / 5
        let pred = m(3, 3, vec![1, 1, 1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(aji(&pred, &gt).unwrap(), 0.4);
        assert_eq!(aji(&InstanceMap::empty(3, 3), &gt).unwrap(), 0.0);
        assert_eq!(aji(&InstanceMap::empty(3, 3), &InstanceMap::empty(3, 3)).unwrap(), 1.0);
        assert!(aji(&InstanceMap::empty(2, 3), &gt).is_err());
    }

    #[test]
    fn aji_counts_unmatched_predictions() {
        let gt = m(1, 4, vec![1, 1, 0, 0]);
        let pred = m(1, 4, vec![1, 1, 0, 2]);
        assert_eq!(aji(&pred, &gt).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn report_averages_images() {
        let a = m(1, 2, vec![1, 0]);
        let b = m(1, 2, vec![0, 1]);
        let r = MetricReport::compute([("x".into(), &a, &a), ("y".into(), &a, &b)]).unwrap();
        assert_eq!(r.dice, 0.5);
        assert_eq!(r.aji, 0.5);
        assert_eq!(r.per_image.len(), 2);
    }

    #[test]
    fn mask_helper() {
        assert_eq!(mask_of(&[0, 3, 0]), vec![false, true, false]);
    }
}
