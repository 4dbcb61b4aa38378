//! Conjoint rotation of image and BEV labels, and the horizontal-flip view
//! used by the consistency losses.

use alloc::format;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::{hflip_image, hflip_intrinsics, homography_for_rotation, rotate_bev_map, warp_image, BorderMode};
use crate::math;
use crate::rng::Rng;
use crate::synthworld::Sample;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Largest rotation magnitude, in degrees.
    pub alpha_max: f64,
    /// Probability of rotating a given sample.
    pub apply_prob: f64,
    pub border: BorderMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            alpha_max: 35.0,
            apply_prob: 0.5,
            border: BorderMode::Replicate,
        }
    }
}

impl AugmentConfig {
    /// Never rotates.
    pub const DISABLED: AugmentConfig = AugmentConfig {
        alpha_max: 0.0,
        apply_prob: 0.0,
        border: BorderMode::Replicate,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=90.0).contains(&self.alpha_max) || !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::InvalidValue(format!(
                "augment needs 0 <= alpha_max <= 90 and 0 <= apply_prob <= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        self.apply_prob == 0.0 || self.alpha_max == 0.0
    }
}

/// Uniform angle in `[−alpha_max, alpha_max]` radians.
pub fn sample_angle(rng: &mut Rng, alpha_max: f64) -> f64 {
    if alpha_max == 0.0 {
        return 0.0;
    }
    rng.gen_range(-alpha_max..=alpha_max)
}

/// Rotates the scene about the camera's vertical axis by `alpha` radians:
/// the image through the pure-rotation homography, the labels (when present)
/// and the visibility mask through the matching planar rotation. Intrinsics
/// are unchanged.
pub fn conjoint_rotate(sample: &Sample, alpha: f64, border: BorderMode) -> Result<Sample> {
    if alpha == 0.0 {
        return Ok(sample.clone());
    }
    let h = homography_for_rotation(&sample.intrinsics, alpha);
    Ok(Sample {
        id: sample.id.clone(),
        image: warp_image(&sample.image, &h, border)?,
        intrinsics: sample.intrinsics,
        gt_bev: sample.gt_bev.as_ref().map(|g| rotate_bev_map(g, alpha)),
        visibility: rotate_bev_map(&sample.visibility, alpha),
    })
}

/// Draws the per-sample rotation decision and applies it; returns the
/// augmented sample and the angle used, if any.
pub fn augment_sample(rng: &mut Rng, sample: &Sample, cfg: &AugmentConfig) -> Result<(Sample, Option<f64>)> {
    // both draws happen unconditionally so the stream advances identically
    let apply = rng.gen::<f64>() < cfg.apply_prob;
    let alpha = sample_angle(rng, math::deg_to_rad(cfg.alpha_max));
    if apply && alpha != 0.0 {
        Ok((conjoint_rotate(sample, alpha, cfg.border)?, Some(alpha)))
    } else {
        Ok((sample.clone(), None))
    }
}

/// The horizontally flipped view: image mirrored, `cx` mirrored, labels and
/// mask untouched.
pub fn flip_pair(sample: &Sample) -> Sample {
    Sample {
        id: sample.id.clone(),
        image: hflip_image(&sample.image),
        intrinsics: hflip_intrinsics(&sample.intrinsics),
        gt_bev: sample.gt_bev.clone(),
        visibility: sample.visibility.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::synthworld::{generate_sample, SceneConfig};

    fn sample(labeled: bool) -> Sample {
        generate_sample(&SceneConfig::default(), 5, 0, labeled).unwrap()
    }

    #[test]
    fn zero_angle_is_identity() {
        let s = sample(true);
        assert_eq!(conjoint_rotate(&s, 0.0, BorderMode::Zero).unwrap(), s);
    }

    #[test]
    fn unlabeled_branch_only_changes_image_and_mask() {
        let s = sample(false);
        let r = conjoint_rotate(&s, 0.3, BorderMode::Replicate).unwrap();
        assert!(r.gt_bev.is_none());
        assert_eq!(r.intrinsics, s.intrinsics);
        assert_ne!(r.image, s.image);
        assert_ne!(r.visibility, s.visibility);
    }

    #[test]
    fn replicate_stays_in_range() {
        let s = sample(true);
        let r = conjoint_rotate(&s, -0.5, BorderMode::Replicate).unwrap();
        let hw = s.image.numel() / 3;
        for c in 0..3 {
            let src = &s.image.data()[c * hw..(c + 1) * hw];
            let (lo, hi) = src.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            assert!(r.image.data()[c * hw..(c + 1) * hw].iter().all(|&v| v >= lo && v <= hi));
        }
    }

    #[test]
    fn angle_statistics() {
        let mut r = rng::stream(9, &[]);
        let amax = math::deg_to_rad(35.0);
        let n = 100_000;
        let draws: alloc::vec::Vec<f64> = (0..n).map(|_| sample_angle(&mut r, amax)).collect();
        assert!(draws.iter().all(|a| a.abs() <= amax));
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sigma = amax / math::sqrt(3.0) / math::sqrt(n as f64);
        assert!(mean.abs() < 3.0 * sigma);
        assert_eq!(sample_angle(&mut r, 0.0), 0.0);
        let mut a = rng::stream(1, &[]);
        let mut b = rng::stream(1, &[]);
        assert_eq!(sample_angle(&mut a, amax), sample_angle(&mut b, amax));
    }

    #[test]
    fn apply_frequency() {
        let s = sample(false);
        let small = Sample {
            image: crate::tensor::Tensor::zeros(&[3, 2, 2]),
            ..s
        };
        let cfg = AugmentConfig::default();
        let mut r = rng::stream(3, &[]);
        let n = 10_000;
        let mut applied = 0;
        for _ in 0..n {
            let apply = r.gen::<f64>() < cfg.apply_prob;
            let _ = sample_angle(&mut r, 1.0);
            applied += apply as usize;
        }
        let sigma = math::sqrt(n as f64 * 0.25);
        assert!((applied as f64 - n as f64 * 0.5).abs() < 3.0 * sigma);
        let (_, a) = augment_sample(&mut r, &small, &AugmentConfig::DISABLED).unwrap();
        assert!(a.is_none());
    }

    #[test]
    fn flip_is_involution() {
        let s = sample(true);
        let f = flip_pair(&s);
        assert_eq!(f.intrinsics.cx, 127.0 - s.intrinsics.cx);
        let ff = flip_pair(&f);
        assert_eq!(ff.image, s.image);
        assert_eq!(ff.intrinsics, s.intrinsics);
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig { alpha_max: 91.0, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { apply_prob: 1.5, ..Default::default() }.validate().is_err());
    }
}
