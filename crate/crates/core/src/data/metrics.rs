//! Evaluation metrics: PSNR, a single-window SSIM, and an unbiased RBF-kernel
//! MMD^2 estimator (the desk-scale stand-in for classifier-based distribution
//! distances).

use thiserror::Error;

use crate::tensor::Tensor;

/// PSNR reported for a zero-MSE pair; keeps CSV output finite.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("peak must be positive, got {0}")]
    BadPeak(f64),
    #[error("spatial size must be >= {min} elements, got {got}")]
    TooSmall { min: usize, got: usize },
    #[error("need at least 2 samples per side, got {0} and {1}")]
    TooFewSamples(usize, usize),
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
}

fn check_shapes(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(
            a.shape().to_vec(),
            b.shape().to_vec(),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    if peak <= 0.0 {
        return Err(MetricError::BadPeak(peak));
    }
    let mut mse = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x as f64 - y as f64;
        mse += d * d;
    }
    mse /= a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Global single-window SSIM with the conventional constants
/// C1 = (0.01 peak)^2, C2 = (0.03 peak)^2. Returns a value in [-1, 1].
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    if peak <= 0.0 {
        return Err(MetricError::BadPeak(peak));
    }
    if a.numel() < 8 {
        return Err(MetricError::TooSmall {
            min: 8,
            got: a.numel(),
        });
    }
    let n = a.numel() as f64;
    let (mut ma, mut mb) = (0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        ma += x as f64;
        mb += y as f64;
    }
    ma /= n;
    mb /= n;
    let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let dx = x as f64 - ma;
        let dy = y as f64 - mb;
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    va /= n;
    vb /= n;
    cov /= n;
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    Ok(((2.0 * ma * mb + c1) * (2.0 * cov + c2))
        / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
}

fn sq_dist(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let mut d = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let diff = x as f64 - y as f64;
        d += diff * diff;
    }
    d
}

/// Unbiased RBF-kernel MMD^2 between two sample lists. When `bandwidth` is
/// `None` the median pairwise distance over the pooled samples is used;
/// the kernel is exp(-d^2 / (2 h^2)). The unbiased estimator may be slightly
/// negative for close distributions.
pub fn mmd(
    a: &[Tensor<f32>],
    b: &[Tensor<f32>],
    bandwidth: Option<f64>,
) -> Result<f64, MetricError> {
    let (m, n) = (a.len(), b.len());
    if m < 2 || n < 2 {
        return Err(MetricError::TooFewSamples(m, n));
    }
    for t in a.iter().chain(b) {
        check_shapes(t, &a[0])?;
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(MetricError::BadBandwidth(h)),
        None => median_pairwise_distance(a, b),
    };
    let denom = 2.0 * h * h;
    let k = |x: &Tensor<f32>, y: &Tensor<f32>| (-sq_dist(x, y) / denom).exp();

    let mut kaa = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kaa += k(&a[i], &a[j]);
            }
        }
    }
    let mut kbb = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kbb += k(&b[i], &b[j]);
            }
        }
    }
    let mut kab = 0.0;
    for x in a {
        for y in b {
            kab += k(x, y);
        }
    }
    Ok(kaa / (m * (m - 1)) as f64 + kbb / (n * (n - 1)) as f64 - 2.0 * kab / (m * n) as f64)
}

fn median_pairwise_distance(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> f64 {
    let pooled: Vec<&Tensor<f32>> = a.iter().chain(b).collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        (dists[mid - 1] + dists[mid]) / 2.0
    } else {
        dists[mid]
    };
    // Identical sample lists give a zero median; any positive value keeps the
    // kernel defined and the estimator near zero.
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, offset: f32, scale: f32) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..64)
            .map(|_| offset + scale * rng.gen_range(-0.5..0.5))
            .collect();
        Tensor::from_vec(vec![1, 8, 8], data).unwrap()
    }

    #[test]
    fn psnr_of_identical_images_is_capped() {
        let a = image(1, 0.5, 0.4);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_of_constant_offset() {
        let a = image(1, 0.4, 0.2);
        let b = Tensor::raw(
            a.shape().to_vec(),
            a.data().iter().map(|v| v + 0.1).collect(),
        );
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-4, "psnr {p}");
    }

    #[test]
    fn psnr_is_symmetric() {
        let a = image(1, 0.4, 0.3);
        let b = image(2, 0.5, 0.3);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = image(1, 0.4, 0.3);
        let b = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(
            psnr(&a, &b, 1.0),
            Err(MetricError::ShapeMismatch(_, _))
        ));
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a = image(3, 0.5, 0.5);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_negated_structure_is_non_positive() {
        let a = image(4, 0.5, 0.8);
        let mean = a.data().iter().sum::<f32>() / a.numel() as f32;
        let negated = Tensor::raw(
            a.shape().to_vec(),
            a.data().iter().map(|v| 2.0 * mean - v).collect(),
        );
        let s = ssim(&a, &negated, 1.0).unwrap();
        assert!(s <= 0.0, "ssim {s}");
    }

    #[test]
    fn mmd_on_identical_lists_is_tiny() {
        let samples: Vec<Tensor<f32>> = (0..20).map(|i| image(i, 0.5, 0.5)).collect();
        let v = mmd(&samples, &samples, None).unwrap();
        assert!(v <= 1e-6, "mmd {v}");
    }

    #[test]
    fn mmd_separates_well_separated_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<Tensor<f32>> = (0..100)
            .map(|_| Tensor::scalar(rng.gen_range(-0.5..0.5) + rng.gen_range(-0.5..0.5)))
            .collect();
        let b: Vec<Tensor<f32>> = (0..100)
            .map(|_| Tensor::scalar(10.0 + rng.gen_range(-0.5..0.5) + rng.gen_range(-0.5..0.5)))
            .collect();
        let v = mmd(&a, &b, None).unwrap();
        assert!(v > 0.5, "mmd {v}");
    }

    #[test]
    fn mmd_is_symmetric() {
        let a: Vec<Tensor<f32>> = (0..10).map(|i| image(i, 0.3, 0.4)).collect();
        let b: Vec<Tensor<f32>> = (0..10).map(|i| image(i + 50, 0.7, 0.2)).collect();
        let ab = mmd(&a, &b, None).unwrap();
        let ba = mmd(&b, &a, None).unwrap();
        assert!((ab - ba).abs() <= 1e-9);
    }

    #[test]
    fn mmd_matches_brute_force_double_loop() {
        let a: Vec<Tensor<f32>> = (0..12).map(|i| image(i, 0.3, 0.4)).collect();
        let b: Vec<Tensor<f32>> = (0..9).map(|i| image(i + 100, 0.6, 0.3)).collect();
        let h = 2.5;
        let v = mmd(&a, &b, Some(h)).unwrap();

        // Independent oracle: direct elementwise loops, no shared helpers.
        let kernel = |x: &Tensor<f32>, y: &Tensor<f32>| {
            let mut d2 = 0.0f64;
            for i in 0..x.numel() {
                let diff = x.data()[i] as f64 - y.data()[i] as f64;
                d2 += diff * diff;
            }
            (-d2 / (2.0 * h * h)).exp()
        };
        let (m, n) = (a.len() as f64, b.len() as f64);
        let mut expect = 0.0;
        for i in 0..a.len() {
            for j in 0..a.len() {
                if i != j {
                    expect += kernel(&a[i], &a[j]) / (m * (m - 1.0));
                }
            }
        }
        for i in 0..b.len() {
            for j in 0..b.len() {
                if i != j {
                    expect += kernel(&b[i], &b[j]) / (n * (n - 1.0));
                }
            }
        }
        for x in &a {
            for y in &b {
                expect -= 2.0 * kernel(x, y) / (m * n);
            }
        }
        assert!((v - expect).abs() <= 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn mmd_rejects_tiny_sample_lists() {
        let a = vec![image(1, 0.5, 0.5)];
        let b = vec![image(2, 0.5, 0.5), image(3, 0.5, 0.5)];
        assert!(matches!(
            mmd(&a, &b, None),
            Err(MetricError::TooFewSamples(1, 2))
        ));
    }
}
