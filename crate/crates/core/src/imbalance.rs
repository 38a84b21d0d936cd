//! Exponential long-tail resampling, `N_m = N_max * alpha^(m / (M - 1))`.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::floor_snapped;

#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceProfile {
    alpha: f64,
    /// Class indices from most to least frequent in the source counts.
    ranking: Vec<usize>,
    /// Target count per class index.
    target_counts: Vec<usize>,
}

impl ImbalanceProfile {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Targets indexed by class.
    pub fn target_counts(&self) -> &[usize] {
        &self.target_counts
    }

    pub fn ranking(&self) -> &[usize] {
        &self.ranking
    }

    /// Targets in rank order; non-increasing.
    pub fn ranked_targets(&self) -> Vec<usize> {
        self.ranking
            .iter()
            .map(|&m| self.target_counts[m])
            .collect()
    }

    pub fn total(&self) -> usize {
        self.target_counts.iter().sum()
    }
}

/// Unclamped long-tail target for rank `rank` of `num_classes`.
pub fn longtail_target(n_max: usize, alpha: f64, rank: usize, num_classes: usize) -> usize {
    let exponent = rank as f64 / (num_classes - 1) as f64;
    let raw = n_max as f64 * alpha.powf(exponent);
    (floor_snapped(raw) as usize).max(1)
}

/// Ranks classes by descending count (ties by index) and assigns
/// `max(1, floor(N_max * alpha^(rank / (M - 1))))`, clamped to what each
/// class actually has.
pub fn longtail_counts(class_counts: &[usize], alpha: f64) -> Result<ImbalanceProfile> {
    let m = class_counts.len();
    if m < 2 {
        return Err(Error::Spec(format!("need at least 2 classes, got {m}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Spec(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let n_max = class_counts.iter().copied().max().unwrap_or(0);
    if n_max == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut ranking: Vec<usize> = (0..m).collect();
    ranking.sort_by(|&a, &b| class_counts[b].cmp(&class_counts[a]).then(a.cmp(&b)));

    let mut target_counts = vec![0; m];
    for (rank, &class) in ranking.iter().enumerate() {
        target_counts[class] = longtail_target(n_max, alpha, rank, m).min(class_counts[class]);
    }
    Ok(ImbalanceProfile {
        alpha,
        ranking,
        target_counts,
    })
}

/// Uniformly subsamples each class down to its target and shuffles the result.
pub fn resample(dataset: &Dataset, profile: &ImbalanceProfile, seed: u64) -> Result<Dataset> {
    let m = dataset.num_classes();
    if profile.target_counts.len() != m {
        return Err(Error::Dimension {
            expected: m,
            actual: profile.target_counts.len(),
        });
    }
    let labels = dataset.labels()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, &label) in labels.iter().enumerate() {
        by_class[label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(profile.total());
    for (class, members) in by_class.iter().enumerate() {
        let target = profile.target_counts[class];
        if target > members.len() {
            return Err(Error::Spec(format!(
                "class {class}: target {target} exceeds the {} available records",
                members.len()
            )));
        }
        let mut picks = index::sample(&mut rng, members.len(), target).into_vec();
        picks.sort_unstable();
        chosen.extend(picks.into_iter().map(|j| members[j]));
    }
    chosen.shuffle(&mut rng);
    dataset.with_records(
        chosen
            .into_iter()
            .map(|i| dataset.records()[i].clone())
            .collect(),
    )
}

/// `class,before,after` rows in class-index order.
pub fn histogram_csv(class_names: &[String], before: &[usize], after: &[usize]) -> String {
    let mut out = String::from("class,before,after\n");
    for ((name, b), a) in class_names.iter().zip(before).zip(after) {
        out.push_str(&format!("{name},{b},{a}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EcgRecord;
    use proptest::prelude::*;

    fn dataset(counts: &[usize]) -> Dataset {
        let mut records = Vec::new();
        for (m, &n) in counts.iter().enumerate() {
            for i in 0..n {
                records.push(
                    EcgRecord::new(
                        format!("c{m}-{i}"),
                        vec![vec![i as f64, m as f64]],
                        500.0,
                        Some(m),
                    )
                    .unwrap(),
                );
            }
        }
        let names = (0..counts.len()).map(|m| format!("k{m}")).collect();
        Dataset::new(records, names, 0).unwrap()
    }

    #[test]
    fn alpha_one_keeps_counts_up_to_head() {
        let p = longtail_counts(&[50, 80, 10], 1.0).unwrap();
        assert_eq!(p.target_counts(), &[50, 80, 10]);
    }

    #[test]
    fn nine_class_alpha_001() {
        let p = longtail_counts(&[640; 9], 0.01).unwrap();
        assert_eq!(
            p.ranked_targets(),
            vec![640, 359, 202, 113, 64, 35, 20, 11, 6]
        );
    }

    #[test]
    fn two_class_alpha_005() {
        let p = longtail_counts(&[100, 100], 0.05).unwrap();
        assert_eq!(p.target_counts(), &[100, 5]);
    }

    #[test]
    fn ranking_follows_source_frequency() {
        let p = longtail_counts(&[10, 400, 90], 0.01).unwrap();
        assert_eq!(p.ranking(), &[1, 2, 0]);
        // rank 1 -> floor(400 * 0.1) = 40; rank 2 -> 4.
        assert_eq!(p.target_counts(), &[4, 400, 40]);
    }

    #[test]
    fn clamps_to_availability() {
        let p = longtail_counts(&[100, 99, 2], 0.9).unwrap();
        assert_eq!(p.target_counts(), &[100, 94, 2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            longtail_counts(&[0, 0], 0.5),
            Err(Error::EmptyDataset)
        ));
        assert!(longtail_counts(&[5, 5], 0.0).is_err());
        assert!(longtail_counts(&[5, 5], 1.5).is_err());
        assert!(longtail_counts(&[5], 0.5).is_err());
    }

    #[test]
    fn noop_resample_is_permutation() {
        let d = dataset(&[4, 3, 2]);
        let p = longtail_counts(&[4, 3, 2], 1.0).unwrap();
        let out = resample(&d, &p, 5).unwrap();
        let mut a: Vec<_> = out
            .records()
            .iter()
            .map(|r| r.record_id().to_string())
            .collect();
        let mut b: Vec<_> = d
            .records()
            .iter()
            .map(|r| r.record_id().to_string())
            .collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_pick_different_subsets() {
        let d = dataset(&[640, 640]);
        let p = longtail_counts(&[640, 640], 6.0 / 640.0).unwrap();
        assert_eq!(p.target_counts(), &[640, 6]);
        let tail = |seed| {
            let mut ids: Vec<String> = resample(&d, &p, seed)
                .unwrap()
                .records()
                .iter()
                .filter(|r| r.label() == Some(1))
                .map(|r| r.record_id().to_string())
                .collect();
            ids.sort();
            ids
        };
        let (a, b) = (tail(1), tail(2));
        assert_eq!((a.len(), b.len()), (6, 6));
        assert_ne!(a, b);
    }

    proptest! {
        #[test]
        fn histogram_matches_targets(
            counts in prop::collection::vec(0usize..60, 2..7),
            alpha in 0.001f64..=1.0,
            seed in any::<u64>(),
        ) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let d = dataset(&counts);
            let p = longtail_counts(&counts, alpha).unwrap();
            let out = resample(&d, &p, seed).unwrap();
            prop_assert_eq!(out.class_counts(), p.target_counts().to_vec());
            prop_assert_eq!(resample(&d, &p, seed).unwrap(), out);
            let ranked = p.ranked_targets();
            for w in ranked.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
        }

        #[test]
        fn targets_monotone_in_alpha(
            counts in prop::collection::vec(1usize..500, 2..10),
            a in 0.001f64..=1.0,
            b in 0.001f64..=1.0,
        ) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let p_lo = longtail_counts(&counts, lo).unwrap();
            let p_hi = longtail_counts(&counts, hi).unwrap();
            for (x, y) in p_lo.target_counts().iter().zip(p_hi.target_counts()) {
                prop_assert!(x <= y);
            }
        }
    }
}
