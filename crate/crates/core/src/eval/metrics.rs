//! Rank-based AUROC.

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::scorers::ScoreMap;

/// Area under the ROC curve via the Mann-Whitney statistic; tied
/// positive/negative pairs count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            found: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum, with tie groups sharing their mid-rank;
    // kept integral so the result is exact.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j; mid-rank (i + 1 + j) / 2.
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += pos_in_group * (i as u128 + 1 + j as u128);
        i = j;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// AUROC over every pixel of every map, with mask pixels above mid-gray
/// as positives.
pub fn pixel_auroc(maps: &[&ScoreMap], masks: &[&Image]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::DimensionMismatch {
            expected: maps.len(),
            found: masks.len(),
        });
    }
    let total: usize = maps.iter().map(|m| m.data.len()).sum();
    let mut scores = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (m, k) in maps.iter().zip(masks) {
        if (m.width, m.height) != (k.width(), k.height()) || k.channels() != 1 {
            return Err(Error::DimensionMismatch {
                expected: m.data.len(),
                found: k.data().len(),
            });
        }
        scores.extend_from_slice(&m.data);
        labels.extend(k.data().iter().map(|&v| v > 127.5));
    }
    auroc(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_cases() {
        let labels = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 0.0);
        assert_eq!(auroc(&[1.0; 4], &labels).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.5, 0.5, 0.9], &labels).unwrap(), 0.875);
        assert!(matches!(auroc(&[1.0, 2.0], &[true, true]), Err(Error::SingleClass)));
        assert!(auroc(&[f64::NAN, 1.0], &[true, false]).is_err());
    }

    #[test]
    fn pixel_map_equal_to_mask() {
        let mut mask = Image::new(4, 4, 1);
        for i in [1, 2, 5, 6] {
            mask.data_mut()[i] = 255.0;
        }
        let map = ScoreMap {
            width: 4,
            height: 4,
            data: mask.data().iter().map(|&v| v as f64).collect(),
        };
        assert_eq!(pixel_auroc(&[&map], &[&mask]).unwrap(), 1.0);
        let inv = ScoreMap {
            data: map.data.iter().map(|v| -v).collect(),
            ..map.clone()
        };
        assert_eq!(pixel_auroc(&[&inv], &[&mask]).unwrap(), 0.0);
    }
}
