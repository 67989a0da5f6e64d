use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eval::report_from_traces;
use super::*;
use std::path::PathBuf;

/// O(n²) pairwise comparison.
fn pairwise_auc(s: &[f64], l: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] == 1 && l[j] == 0 {
                pairs += 1.0;
                if s[i] > s[j] {
                    wins += 1.0;
                } else if s[i] == s[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Rank of each item computed directly: items strictly above it plus tied
/// items with a lower index, plus one.
fn rank_walk_ap(s: &[f64], l: &[u8]) -> f64 {
    let rank = |i: usize| {
        1 + (0..s.len())
            .filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i))
            .count()
    };
    let pos: Vec<usize> = (0..s.len()).filter(|&i| l[i] == 1).collect();
    let mut total = 0.0;
    for &i in &pos {
        let r = rank(i);
        let hits = pos.iter().filter(|&&p| rank(p) <= r).count();
        total += hits as f64 / r as f64;
    }
    total / pos.len() as f64
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, coarse: bool) -> (Vec<f64>, Vec<u8>) {
    loop {
        let s: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random();
                if coarse {
                    (v * 8.0).floor() / 8.0
                } else {
                    v
                }
            })
            .collect();
        let l: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        if l.contains(&0) && l.contains(&1) {
            return (s, l);
        }
    }
}

#[test]
fn auc_hand_cases() {
    assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.1, 0.2, 0.9, 0.8], &[1, 1, 0, 0]).unwrap(), 0.0);
    assert_eq!(roc_auc(&[0.5; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
    assert_eq!(roc_auc(&[0.3, 0.3, 0.1], &[1, 0, 0]).unwrap(), 0.75);
}

#[test]
fn ap_hand_cases() {
    assert_eq!(
        average_precision(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(),
        1.0
    );
    assert_eq!(average_precision(&[0.2, 0.9], &[1, 0]).unwrap(), 0.5);
    // Ties break by index: the positive at index 0 ranks first.
    assert_eq!(average_precision(&[0.5, 0.5], &[1, 0]).unwrap(), 1.0);
    assert_eq!(average_precision(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
}

#[test]
fn undefined_cases() {
    assert!(matches!(
        roc_auc(&[0.1, 0.2], &[1, 1]),
        Err(Error::UndefinedMetric(_))
    ));
    assert!(matches!(
        roc_auc(&[0.1, 0.2], &[0, 0]),
        Err(Error::UndefinedMetric(_))
    ));
    assert!(matches!(
        average_precision(&[0.1], &[0]),
        Err(Error::UndefinedMetric(_))
    ));
    assert!(matches!(
        roc_auc(&[f64::NAN, 0.2], &[0, 1]),
        Err(Error::UndefinedMetric(_))
    ));
    assert!(matches!(roc_auc(&[0.2], &[0, 1]), Err(Error::Usage(_))));
}

#[test]
fn oracles_agree_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..100 {
        let n = rng.random_range(2..=200);
        let (s, l) = random_instance(&mut rng, n, trial % 2 == 0);
        assert!((roc_auc(&s, &l).unwrap() - pairwise_auc(&s, &l)).abs() < 1e-12);
        assert!((average_precision(&s, &l).unwrap() - rank_walk_ap(&s, &l)).abs() < 1e-12);
    }
}

#[test]
fn curves_are_monotone_and_anchored() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (s, l) = random_instance(&mut rng, 150, true);
    let roc = roc_curve(&s, &l).unwrap();
    assert_eq!(roc[0], (0.0, 0.0));
    assert_eq!(*roc.last().unwrap(), (1.0, 1.0));
    for w in roc.windows(2) {
        assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
    }
    // Trapezoid area under the tie-grouped ROC equals the Mann–Whitney AUC.
    let area: f64 = roc
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    assert!((area - roc_auc(&s, &l).unwrap()).abs() < 1e-12);
    let pr = pr_curve(&s, &l).unwrap();
    assert_eq!(pr.last().unwrap().0, 1.0);
    for w in pr.windows(2) {
        assert!(w[1].0 >= w[0].0);
    }
}

fn trace(label: u8, scores: Vec<f64>, frame_labels: Vec<u8>) -> VideoTrace {
    VideoTrace {
        path: PathBuf::from("v"),
        label,
        original: scores.clone(),
        scores,
        frame_labels,
    }
}

#[test]
fn single_abnormal_video_subset_equals_whole() {
    let t = trace(1, vec![0.1, 0.9, 0.8, 0.3, 0.4], vec![0, 1, 1, 0, 1]);
    let r = report_from_traces(&[t]).unwrap();
    assert_eq!(r.auc, r.auc_sub);
    assert_eq!(r.ap, r.ap_sub);
    assert_eq!((r.n_frames, r.n_positive, r.n_videos), (5, 3, 1));
}

#[test]
fn video_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut traces = Vec::new();
    for i in 0..6 {
        let n = rng.random_range(5..30);
        let label = (i % 2) as u8;
        let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let mut l: Vec<u8> = (0..n)
            .map(|_| label * u8::from(rng.random_bool(0.5)))
            .collect();
        l[0] = label;
        traces.push(trace(label, s, l));
    }
    let a = report_from_traces(&traces).unwrap();
    traces.reverse();
    traces.swap(0, 3);
    let b = report_from_traces(&traces).unwrap();
    for (x, y) in [
        (a.auc, b.auc),
        (a.ap, b.ap),
        (a.auc_sub, b.auc_sub),
        (a.ap_sub, b.ap_sub),
    ] {
        assert!((x - y).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn monotone_transforms_preserve_metrics(seed in any::<u64>(), n in 2usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = random_instance(&mut rng, n, seed % 2 == 0);
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 1.0).collect();
        prop_assert!((roc_auc(&s, &l).unwrap() - roc_auc(&t, &l).unwrap()).abs() < 1e-12);
        prop_assert!((average_precision(&s, &l).unwrap() - average_precision(&t, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn negated_scores_complement_auc(seed in any::<u64>(), n in 2usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = random_instance(&mut rng, n, false);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((roc_auc(&s, &l).unwrap() + roc_auc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_unit_interval(seed in any::<u64>(), n in 2usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = random_instance(&mut rng, n, true);
        let auc = roc_auc(&s, &l).unwrap();
        let ap = average_precision(&s, &l).unwrap();
        prop_assert!((0.0..=1.0).contains(&auc) && (0.0..=1.0).contains(&ap));
    }
}
