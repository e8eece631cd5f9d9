use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default)]
pub struct SplitOptions {
    /// Permit zero-sized validation/test fractions.
    pub allow_empty: bool,
}

/// Integer sizes summing to `total` whose ratios follow `fractions`, using
/// largest-remainder rounding (ties go to the earlier entry).
pub fn largest_remainder(total: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Assigns whole chapters to train/validation/test. The assignment is a
/// seeded permutation of chapters followed by largest-remainder sizing.
pub fn split_chapters(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
    opts: SplitOptions,
) -> Result<DatasetManifest> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(format!(
            "split fractions must be non-negative: {f:?}"
        )));
    }
    if f[0] <= 0.0 || (!opts.allow_empty && f.iter().any(|v| *v <= 0.0)) {
        return Err(Error::invalid(format!(
            "split fractions must be positive: {f:?}"
        )));
    }
    if (f.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "split fractions must sum to 1: {f:?}"
        )));
    }
    let needed = f.iter().filter(|v| **v > 0.0).count();
    let n = manifest.chapters.len();
    if n < needed {
        return Err(Error::invalid(format!(
            "{n} chapters cannot fill {needed} splits"
        )));
    }
    let mut sizes = largest_remainder(n, &f);
    // Every requested split gets at least one chapter.
    for i in 0..3 {
        if f[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| sizes[j]).unwrap();
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = manifest.clone();
    for (rank, &ci) in order.iter().enumerate() {
        out.chapters[ci].split = if rank < sizes[0] {
            Split::Train
        } else if rank < sizes[0] + sizes[1] {
            Split::Validation
        } else {
            Split::Test
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ChapterEntry;

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            root_path: Default::default(),
            chapters: (0..n)
                .map(|i| ChapterEntry {
                    chapter_id: format!("c{i:03}"),
                    route_id: format!("route_{:02}", i % 27),
                    split: Split::Train,
                    frame_count: 300,
                })
                .collect(),
            resolution: (160, 90),
            n_seg_classes: 20,
            seed: 0,
            frame_stride: 1,
        }
    }

    fn sizes(m: &DatasetManifest) -> (usize, usize, usize) {
        (
            m.chapters_in(Split::Train).count(),
            m.chapters_in(Split::Validation).count(),
            m.chapters_in(Split::Test).count(),
        )
    }

    #[test]
    fn reference_chapter_counts() {
        let m = manifest(682);
        let s = split_chapters(
            &m,
            (548.0 / 682.0, 36.0 / 682.0, 98.0 / 682.0),
            1,
            SplitOptions::default(),
        )
        .unwrap();
        assert_eq!(sizes(&s), (548, 36, 98));
    }

    #[test]
    fn rounded_fractions_follow_largest_remainder() {
        // 682 * (0.80, 0.053, 0.147) = (545.6, 36.146, 100.254).
        assert_eq!(
            largest_remainder(682, &[0.80, 0.053, 0.147]),
            vec![546, 36, 100]
        );
    }

    #[test]
    fn zero_fractions_rejected_by_default() {
        let m = manifest(10);
        assert!(split_chapters(&m, (1.0, 0.0, 0.0), 1, SplitOptions::default()).is_err());
        let s = split_chapters(&m, (1.0, 0.0, 0.0), 1, SplitOptions { allow_empty: true }).unwrap();
        assert_eq!(sizes(&s), (10, 0, 0));
    }

    #[test]
    fn too_few_chapters() {
        assert!(
            split_chapters(&manifest(2), (0.5, 0.25, 0.25), 0, SplitOptions::default()).is_err()
        );
        let s =
            split_chapters(&manifest(3), (0.9, 0.05, 0.05), 0, SplitOptions::default()).unwrap();
        assert_eq!(sizes(&s), (1, 1, 1));
    }

    #[test]
    fn deterministic_partition() {
        let m = manifest(50);
        let a = split_chapters(&m, (0.7, 0.1, 0.2), 9, SplitOptions::default()).unwrap();
        let b = split_chapters(&m, (0.7, 0.1, 0.2), 9, SplitOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(sizes(&a), (35, 5, 10));
        let c = split_chapters(&m, (0.7, 0.1, 0.2), 10, SplitOptions::default()).unwrap();
        assert_ne!(a, c);
    }
}
