//! Ranking metrics.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("AUROC undefined: need at least one positive and one negative (got {positives} / {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {index} is not finite")]
    NonFinite { index: usize },
}

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half.
///
/// Computed from average ranks in `O(n log n)`. Ranks are doubled so the
/// statistic stays an exact integer up to the final division.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite { index });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of the positives, ranks 1-based and tie-averaged
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share the average (i + 1 + j) / 2
        let avg2 = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank2_pos += avg2 * pos_in_group;
        i = j;
    }
    let (np, nn) = (positives as u128, negatives as u128);
    let u2 = rank2_pos - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// O(n²) pair counting with the same exact-integer convention.
    fn pair_count(scores: &[f64], labels: &[bool]) -> f64 {
        let mut twice = 0u128;
        let (mut np, mut nn) = (0u128, 0u128);
        for (i, &li) in labels.iter().enumerate() {
            if li {
                np += 1;
            } else {
                nn += 1;
            }
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
        twice as f64 / (2 * np * nn) as f64
    }

    #[test]
    fn examples() {
        let y = [true, true, false, false];
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &y).unwrap(), 1.0);
        assert_eq!(auroc(&[0.8, 0.4, 0.6, 0.2], &y).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3; 4], &y).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(MetricError::SingleClass { .. })));
        assert!(auroc(&[0.1], &[true, false]).is_err());
        assert!(auroc(&[f64::NAN, 0.1], &[true, false]).is_err());
    }

    proptest! {
        #[test]
        fn equals_pair_counting(data in proptest::collection::vec((0u8..6, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = data.iter().map(|&(s, _)| s as f64 / 5.0).collect();
            let labels: Vec<bool> = data.iter().map(|&(_, l)| l).collect();
            match auroc(&scores, &labels) {
                Ok(a) => prop_assert_eq!(a, pair_count(&scores, &labels)),
                Err(e) => {
                    let single = matches!(e, MetricError::SingleClass { .. });
                    prop_assert!(single);
                }
            }
        }

        #[test]
        fn invariant_under_monotone_maps(data in proptest::collection::vec((-5i32..5, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = data.iter().map(|&(s, _)| s as f64).collect();
            let labels: Vec<bool> = data.iter().map(|&(_, l)| l).collect();
            if let Ok(a) = auroc(&scores, &labels) {
                let mapped: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() * 3.0 - 1.0).collect();
                prop_assert_eq!(auroc(&mapped, &labels).unwrap(), a);
            }
        }
    }
}
