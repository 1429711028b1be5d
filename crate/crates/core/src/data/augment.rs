use rand_distr::{Distribution, StandardNormal};

use super::WindowedSample;
use crate::rng;

/// Interleaves each sample with a noisy copy: positions `2k` hold the
/// originals and `2k + 1` hold `original + noise_scale * N(0, 1)` per entry
/// (1-indexed, odd positions are originals). Labels are duplicated.
pub fn augment_pairs(samples: &[WindowedSample], noise_scale: f64, seed: u64) -> Vec<WindowedSample> {
    let mut r = rng::stream(seed, &[rng::domain::AUGMENT]);
    let mut out = Vec::with_capacity(samples.len() * 2);
    for s in samples {
        let mut noisy = s.clone();
        for v in &mut noisy.data {
            let e: f64 = StandardNormal.sample(&mut r);
            *v += noise_scale * e;
        }
        out.push(s.clone());
        out.push(noisy);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{class_counts, Origin};

    fn sample(label: usize, value: f64, n: usize) -> WindowedSample {
        WindowedSample {
            data: vec![value; n],
            height: 1,
            width: n,
            label,
            origin: Origin { series: 0, start: 0 },
        }
    }

    #[test]
    fn zero_noise_duplicates() {
        let input = vec![sample(0, 1.0, 4), sample(1, 2.0, 4)];
        let out = augment_pairs(&input, 0.0, 7);
        assert_eq!(out[0], out[1]);
        assert_eq!(out[2], out[3]);
    }

    #[test]
    fn label_pattern_and_balance() {
        let input = vec![sample(3, 0.0, 2), sample(1, 0.0, 2), sample(3, 0.0, 2)];
        let out = augment_pairs(&input, 1.0, 7);
        assert_eq!(out.iter().map(|s| s.label).collect::<Vec<_>>(), vec![3, 3, 1, 1, 3, 3]);
        let before = class_counts(&input, 4);
        let after = class_counts(&out, 4);
        assert!(before.iter().zip(&after).all(|(b, a)| 2 * b == *a));
    }

    #[test]
    fn deterministic_under_seed() {
        let input = vec![sample(0, 0.0, 8)];
        assert_eq!(augment_pairs(&input, 1.0, 11), augment_pairs(&input, 1.0, 11));
        assert_ne!(augment_pairs(&input, 1.0, 11), augment_pairs(&input, 1.0, 12));
    }

    #[test]
    fn noise_is_standard_normal() {
        let input = vec![sample(0, 5.0, 20_000)];
        let out = augment_pairs(&input, 1.0, 3);
        let diffs: Vec<f64> = out[1].data.iter().zip(&out[0].data).map(|(a, b)| a - b).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((sd - 1.0).abs() < 0.05, "std {sd}");
    }
}
