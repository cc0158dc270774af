use crate::error::{Error, Result};

/// Area under the ROC curve via the Mann–Whitney rank statistic; ties
/// count one half. `labels[i]` is true for the positive (fake) class.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, so tied groups stay integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg_rank = (i + 1 + j) as u64;
        let positives = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        rank_sum2 += positives * twice_avg_rank;
        i = j;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn brute(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &p) in scores.iter().enumerate() {
            for (j, &n) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn separated_and_tied_extremes() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]).unwrap(), 0.0);
        assert_eq!(auc(&[0.4; 6], &[true, false, true, false, true, false]).unwrap(), 0.5);
    }

    #[test]
    fn worked_example_matches_pair_enumeration() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, false, true, true];
        assert_eq!(auc(&s, &l).unwrap(), 0.75);
        assert_eq!(brute(&s, &l), 0.75);
    }

    #[test]
    fn single_class_is_metric_error() {
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
        assert!(matches!(auc(&[], &[]), Err(Error::Metric(_))));
        assert!(matches!(auc(&[f64::NAN, 0.2], &[true, false]), Err(Error::Metric(_))));
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..12).prop_map(|v| v as f64 / 4.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
    }

    proptest! {
        #[test]
        fn equals_pair_enumeration((s, l) in scored()) {
            prop_assert!((auc(&s, &l).unwrap() - brute(&s, &l)).abs() < 1e-12);
        }

        #[test]
        fn invariant_under_monotone_maps((s, l) in scored(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let base = auc(&s, &l).unwrap();
            let mapped: Vec<f64> = s.iter().map(|&x| (a * x + b).exp() + x.powi(3)).collect();
            prop_assert_eq!(auc(&mapped, &l).unwrap(), base);
        }
    }
}
