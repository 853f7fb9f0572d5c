//! Ranking and image-similarity metrics.

use super::MetricError;
use crate::tensor::Array;

fn check_scores(scores: &[f32], labels: &[bool]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length { scores: scores.len(), labels: labels.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// Indices sorted by ascending score; stable, so ties keep input order.
fn ascending(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Consecutive runs of equal scores in `order`.
fn tie_blocks<'a>(scores: &'a [f32], order: &'a [usize]) -> impl Iterator<Item = &'a [usize]> + 'a {
    order.chunk_by(move |&a, &b| scores[a] == scores[b])
}

/// Mann–Whitney AUROC: `P(pos > neg) + ½·P(tie)`.
///
/// Computed from tie blocks as the integer `2·wins + ties` over
/// `2·pos·neg`, so the result is the exact rational rounded once.
pub fn auroc(scores: &[f32], labels: &[bool]) -> Result<f64, MetricError> {
    check_scores(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let order = ascending(scores);
    let (mut twice, mut neg_below) = (0u64, 0u64);
    for block in tie_blocks(scores, &order) {
        let p = block.iter().filter(|&&i| labels[i]).count() as u64;
        let n = block.len() as u64 - p;
        twice += p * (2 * neg_below + n);
        neg_below += n;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Average precision without interpolation. Items with equal scores form
/// one block: the block's positives all receive the precision reached at
/// the end of the block.
pub fn auprc(scores: &[f32], labels: &[bool]) -> Result<f64, MetricError> {
    check_scores(scores, labels)?;
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut order = ascending(scores);
    order.reverse();
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0f64);
    for block in tie_blocks(scores, &order) {
        let p = block.iter().filter(|&&i| labels[i]).count();
        tp += p;
        seen += block.len();
        if p > 0 {
            ap += (tp as f64 / seen as f64) * (p as f64 / total_pos as f64);
        }
    }
    Ok(ap)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::Length { scores: x.len(), labels: y.len() });
    }
    if x.len() < 2 {
        return Err(MetricError::TooFewSamples { need: 2, got: x.len() });
    }
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut start = 0;
        while start < idx.len() {
            let mut end = start + 1;
            while end < idx.len() && v[idx[end]] == v[idx[start]] {
                end += 1;
            }
            let avg = (start + end - 1) as f64 / 2.0;
            for &i in &idx[start..end] {
                r[i] = avg;
            }
            start = end;
        }
        r
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Mean SSIM over all fully contained 7×7 uniform windows.
pub fn ssim(x: &Array, y: &Array) -> Result<f64, MetricError> {
    if x.shape() != y.shape() {
        return Err(MetricError::Shape { left: x.shape().to_vec(), right: y.shape().to_vec() });
    }
    let [h, w] = x.shape()[..] else {
        return Err(MetricError::Shape { left: x.shape().to_vec(), right: vec![SSIM_WINDOW, SSIM_WINDOW] });
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::Shape { left: x.shape().to_vec(), right: vec![SSIM_WINDOW, SSIM_WINDOW] });
    }
    let (xd, yd) = (x.data(), y.data());
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in r..r + SSIM_WINDOW {
                for j in c..c + SSIM_WINDOW {
                    let (a, b) = (xd[i * w + j] as f64, yd[i * w + j] as f64);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx / n - mx * mx).max(0.0);
            let vy = (syy / n - my * my).max(0.0);
            let cxy = sxy / n - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / ((h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)) as f64)
}

fn diag_gaussian(samples: &[Array]) -> Result<(Vec<f64>, Vec<f64>), MetricError> {
    if samples.len() < 2 {
        return Err(MetricError::TooFewSamples { need: 2, got: samples.len() });
    }
    let d = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(MetricError::Shape { left: samples[0].shape().to_vec(), right: bad.shape().to_vec() });
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s.data()) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for s in samples {
        for ((acc, &v), m) in var.iter_mut().zip(s.data()).zip(&mean) {
            *acc += (v as f64 - m).powi(2);
        }
    }
    let sd = var.into_iter().map(|v| (v / n).sqrt()).collect();
    Ok((mean, sd))
}

/// Fréchet distance between diagonal Gaussian fits:
/// `‖μ_r − μ_g‖² + Σ_j (σ_r,j − σ_g,j)²`.
pub fn latent_frechet(real: &[Array], generated: &[Array]) -> Result<f64, MetricError> {
    let (mr, sr) = diag_gaussian(real)?;
    let (mg, sg) = diag_gaussian(generated)?;
    if mr.len() != mg.len() {
        return Err(MetricError::Shape { left: real[0].shape().to_vec(), right: generated[0].shape().to_vec() });
    }
    let mean_term: f64 = mr.iter().zip(&mg).map(|(a, b)| (a - b).powi(2)).sum();
    let sd_term: f64 = sr.iter().zip(&sg).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(mean_term + sd_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Exhaustive pairwise count, the reference for `auroc`.
    fn pairwise_auroc(scores: &[f32], labels: &[bool]) -> f64 {
        let (mut twice, mut pairs) = (0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1;
                    twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auroc_worked_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.8, 0.4, 0.6, 0.4], &[true, true, false, false]).unwrap(), 0.625);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(MetricError::SingleClass)));
    }

    #[test]
    fn auroc_matches_pairwise_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        for _ in 0..200 {
            let n = rng.gen_range(2..=50);
            let levels = rng.gen_range(2..8);
            let scores: Vec<f32> = (0..n).map(|_| rng.gen_range(0..levels) as f32 / levels as f32).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            assert_eq!(auroc(&scores, &labels).unwrap().to_bits(), pairwise_auroc(&scores, &labels).to_bits());
        }
    }

    #[test]
    fn auprc_worked_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        let ap = auprc(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((ap - 0.833_333_333_333).abs() < 1e-9);
        let ap = auprc(&[0.5; 5], &[true, false, false, true, false]).unwrap();
        assert_eq!(ap, 2.0 / 5.0);
        assert!(matches!(auprc(&[0.5], &[false]), Err(MetricError::NoPositives)));
    }

    #[test]
    fn ssim_identities() {
        let x = Array::from_fn(&[16, 12], |i| (i as f32 * 0.37).sin() * 0.5 + 0.5);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let zeros = Array::zeros(&[9, 9]);
        let ones = Array::full(&[9, 9], 1.0);
        let want = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&zeros, &ones).unwrap() - want).abs() < 1e-9);
        assert!(ssim(&zeros, &Array::zeros(&[9, 8])).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let a: Vec<Array> = (0..20).map(|i| Array::from_fn(&[2, 3], |j| ((i * 7 + j) % 5) as f32)).collect();
        assert_eq!(latent_frechet(&a, &a).unwrap(), 0.0);
        let shifted: Vec<Array> = a.iter().map(|x| x.map(|v| v + 1.0)).collect();
        assert!((latent_frechet(&a, &shifted).unwrap() - 6.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n01 = Normal::new(0.0f32, 1.0).unwrap();
        let n14 = Normal::new(1.0f32, 2.0).unwrap();
        let r: Vec<Array> = (0..10_000).map(|_| Array::scalar(n01.sample(&mut rng))).collect();
        let g: Vec<Array> = (0..10_000).map(|_| Array::scalar(n14.sample(&mut rng))).collect();
        assert!((latent_frechet(&r, &g).unwrap() - 2.0).abs() < 0.1);
        assert!(latent_frechet(&r[..1], &g).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap(), 0.0);
    }

    fn scored() -> impl Strategy<Value = (Vec<f32>, Vec<bool>)> {
        (3usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..6).prop_map(|v| v as f32 / 6.0), n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
        .prop_map(|(s, mut l)| {
            l[0] = true;
            l[1] = false;
            (s, l)
        })
    }

    proptest! {
        #[test]
        fn auroc_is_rank_invariant((s, l) in scored()) {
            let t: Vec<f32> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
        }

        #[test]
        fn auroc_complements_under_label_flip((s, l) in scored()) {
            let flipped: Vec<bool> = l.iter().map(|v| !v).collect();
            prop_assert_eq!(auroc(&s, &l).unwrap() + auroc(&s, &flipped).unwrap(), 1.0);
        }

        #[test]
        fn auprc_of_constant_scores_is_prevalence(l in proptest::collection::vec(any::<bool>(), 1..40)) {
            prop_assume!(l.iter().any(|&v| v));
            let p = l.iter().filter(|&&v| v).count() as f64 / l.len() as f64;
            prop_assert_eq!(auprc(&vec![0.3; l.len()], &l).unwrap(), p);
        }

        #[test]
        fn ssim_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array::from_fn(&[10, 9], |_| rng.gen());
            let y = Array::from_fn(&[10, 9], |_| rng.gen());
            prop_assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
            prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn frechet_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<Array> = (0..5).map(|_| Array::from_fn(&[4], |_| rng.gen())).collect();
            let b: Vec<Array> = (0..7).map(|_| Array::from_fn(&[4], |_| rng.gen())).collect();
            prop_assert_eq!(latent_frechet(&a, &b).unwrap(), latent_frechet(&b, &a).unwrap());
        }
    }
}
