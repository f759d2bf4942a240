//! Self-supervised photometric objective: SSIM + L1 appearance loss,
//! edge-aware smoothness, per-pixel minimum reprojection, auto-masking and
//! multi-scale averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{synthesize_view, CameraIntrinsics, DepthMap};
use crate::network::{disparity_to_depth, DepthRange};
use crate::tensor::{Pool, Real, Reduce, Tensor};

/// Floor on the disparity mean before normalization.
pub const NORMALIZATION_EPS: f64 = 1e-7;

/// Per-pixel loss assigned to warped pixels that sampled outside the source.
/// Exceeds any attainable photometric loss, so a valid source always wins
/// the minimum.
const INVALID_LOSS: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub scales: usize,
    pub c1: f64,
    pub c2: f64,
    /// Divide disparity by its per-image mean before the smoothness term.
    pub normalize_smoothness: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            beta: 1e-3,
            scales: 4,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            normalize_smoothness: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.scales == 0 {
            return Err(Error::Config("at least one scale is required".into()));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Config("SSIM stabilizers must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar summary of one evaluation of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub photometric: f64,
    pub smoothness: f64,
    pub automask_fraction: Vec<f64>,
}

/// `total = photometric + beta * smoothness`, with `smoothness` already
/// carrying the per-scale `1/2^s` weights.
#[derive(Debug, Clone)]
pub struct LossBreakdown<T: Real = f32> {
    pub total: Tensor<T>,
    pub photometric: Tensor<T>,
    pub smoothness: Tensor<T>,
    /// Fraction of pixels kept by the auto-mask, one entry per scale.
    pub automask_fraction: Vec<f64>,
}

impl<T: Real> LossBreakdown<T> {
    pub fn record(&self) -> LossRecord {
        LossRecord {
            total: self.total.item().to_f64_lossy(),
            photometric: self.photometric.item().to_f64_lossy(),
            smoothness: self.smoothness.item().to_f64_lossy(),
            automask_fraction: self.automask_fraction.clone(),
        }
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Per-pixel structural similarity over 3×3 reflection-padded windows.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, c1: f64, c2: f64) -> Result<Tensor<T>> {
    same_shape(a, b, "ssim")?;
    let window = |x: &Tensor<T>| x.pool(Pool::MeanWindow(3));
    let mu_a = window(a)?;
    let mu_b = window(b)?;
    let mu_ab = mu_a.mul(&mu_b)?;
    let mu_a2 = mu_a.square();
    let mu_b2 = mu_b.square();
    let var_a = window(&a.square())?.sub(&mu_a2)?;
    let var_b = window(&b.square())?.sub(&mu_b2)?;
    let cov = window(&a.mul(b)?)?.sub(&mu_ab)?;
    let (c1, c2) = (T::of(c1), T::of(c2));
    let num = mu_ab
        .mul_scalar(T::of(2.0))
        .add_scalar(c1)
        .mul(&cov.mul_scalar(T::of(2.0)).add_scalar(c2))?;
    let den = mu_a2
        .add(&mu_b2)?
        .add_scalar(c1)
        .mul(&var_a.add(&var_b)?.add_scalar(c2))?;
    num.div(&den)
}

/// `alpha * (1 - SSIM) / 2 + (1 - alpha) * |target - warped|`, averaged over
/// channels to `[N, 1, H, W]`. The SSIM term is clamped to `[0, 1]`.
pub fn photometric_loss<T: Real>(target: &Tensor<T>, warped: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    same_shape(target, warped, "photometric_loss")?;
    let l1 = target.sub(warped)?.abs();
    let per_channel = if cfg.alpha == 0.0 {
        l1
    } else {
        let dssim = ssim(target, warped, cfg.c1, cfg.c2)?
            .neg()
            .add_scalar(T::one())
            .mul_scalar(T::of(0.5))
            .clamp(T::zero(), T::one());
        dssim
            .mul_scalar(T::of(cfg.alpha))
            .add(&l1.mul_scalar(T::of(1.0 - cfg.alpha)))?
    };
    per_channel.reduce_axis(1, Reduce::Mean)
}

fn diff_x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let w = x.shape()[3];
    x.narrow(3, 1, w - 1)?.sub(&x.narrow(3, 0, w - 1)?)
}

fn diff_y<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let h = x.shape()[2];
    x.narrow(2, 1, h - 1)?.sub(&x.narrow(2, 0, h - 1)?)
}

/// Edge-aware first-order smoothness of a `[N, 1, H, W]` disparity against an
/// aligned image. Returns a scalar.
pub fn smoothness_loss<T: Real>(disp: &Tensor<T>, image: &Tensor<T>, normalize: bool) -> Result<Tensor<T>> {
    let (n, c, h, w) = disp.dims4()?;
    let (ni, _, hi, wi) = image.dims4()?;
    if c != 1 || (n, h, w) != (ni, hi, wi) {
        return Err(Error::shape(format!(
            "smoothness_loss: disparity {:?} with image {:?}",
            disp.shape(),
            image.shape()
        )));
    }
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("smoothness_loss needs at least 2x2 pixels, got {h}x{w}")));
    }
    let d = if normalize {
        // A floor rather than an additive epsilon keeps the result exactly
        // invariant to disparity scale.
        let mean = disp.pool(Pool::MeanGlobal)?.clamp(T::of(NORMALIZATION_EPS), T::infinity());
        disp.div(&mean)?
    } else {
        disp.clone()
    };
    let weight = |g: Tensor<T>| -> Result<Tensor<T>> { Ok(g.abs().reduce_axis(1, Reduce::Mean)?.neg().exp()) };
    let gx = diff_x(&d)?.abs().mul(&weight(diff_x(image)?)?)?;
    let gy = diff_y(&d)?.abs().mul(&weight(diff_y(image)?)?)?;
    gx.mean().add(&gy.mean())
}

/// Pixelwise minimum over per-source loss maps. Ties go to the earlier map.
pub fn min_reprojection<T: Real>(losses: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (first, rest) = losses
        .split_first()
        .ok_or_else(|| Error::invalid("min_reprojection needs at least one loss map"))?;
    rest.iter().try_fold(first.clone(), |acc, l| acc.minimum(l))
}

/// Binary `[N, 1, H, W]` mask: 1 where the best warped loss is strictly below
/// the best loss against the unwarped sources.
fn mask_below<T: Real>(min_warped: &Tensor<T>, min_identity: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(min_warped, min_identity, "auto_mask")?;
    let m = min_warped
        .data()
        .iter()
        .zip(min_identity.data().iter())
        .map(|(&a, &b)| if a < b { T::one() } else { T::zero() })
        .collect();
    Tensor::from_vec(min_warped.shape(), m)
}

pub fn auto_mask<T: Real>(
    target: &Tensor<T>,
    sources: &[Tensor<T>],
    warped: &[Tensor<T>],
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    if sources.len() != warped.len() || sources.is_empty() {
        return Err(Error::invalid(format!(
            "auto_mask: {} sources with {} warped views",
            sources.len(),
            warped.len()
        )));
    }
    let per = |imgs: &[Tensor<T>]| -> Result<Vec<Tensor<T>>> {
        imgs.iter().map(|x| Ok(photometric_loss(target, x, cfg)?.detach())).collect()
    };
    mask_below(&min_reprojection(&per(warped)?)?, &min_reprojection(&per(sources)?)?)
}

/// Replaces the loss at invalid pixels by a constant that never wins the minimum.
fn penalize_invalid<T: Real>(loss: &Tensor<T>, valid: &Tensor<T>) -> Result<Tensor<T>> {
    let invalid = valid.neg().add_scalar(T::one()).mul_scalar(T::of(INVALID_LOSS));
    loss.mul(valid)?.add(&invalid)
}

/// Full multi-scale objective.
///
/// `disparities[s]` has resolution `1/2^s` of `target`; `poses[i]` is the
/// `[N, 6]` target-to-`sources[i]` motion.
pub fn total_loss<T: Real>(
    target: &Tensor<T>,
    sources: &[Tensor<T>],
    disparities: &[Tensor<T>],
    poses: &[Tensor<T>],
    k: &CameraIntrinsics,
    range: DepthRange,
    cfg: &LossConfig,
) -> Result<LossBreakdown<T>> {
    cfg.validate()?;
    if disparities.len() != cfg.scales {
        return Err(Error::invalid(format!(
            "expected {} disparity scales, got {}",
            cfg.scales,
            disparities.len()
        )));
    }
    if sources.is_empty() || sources.len() != poses.len() {
        return Err(Error::invalid(format!(
            "{} source frames with {} poses",
            sources.len(),
            poses.len()
        )));
    }
    let (n, _, h, w) = target.dims4()?;
    for s in sources {
        same_shape(target, s, "source frame")?;
    }
    let identity: Vec<Tensor<T>> = sources
        .iter()
        .map(|s| Ok(photometric_loss(target, s, cfg)?.detach()))
        .collect::<Result<_>>()?;
    let min_identity = min_reprojection(&identity)?;

    let mut photometric = Tensor::scalar(T::zero());
    let mut smoothness = Tensor::scalar(T::zero());
    let mut kept = Vec::with_capacity(cfg.scales);
    for (s, disp) in disparities.iter().enumerate() {
        let factor = 1usize << s;
        let (dn, dc, dh, dw) = disp.dims4()?;
        if (dn, dc, dh * factor, dw * factor) != (n, 1, h, w) {
            return Err(Error::shape(format!(
                "disparity at scale {s} has shape {:?}, expected [{n}, 1, {}, {}]",
                disp.shape(),
                h / factor,
                w / factor
            )));
        }
        let depth = DepthMap::new(disparity_to_depth(&disp.upsample_bilinear(factor)?, range))?;
        let mut per_source = Vec::with_capacity(sources.len());
        let mut any_valid = vec![false; n * h * w];
        for (src, pose) in sources.iter().zip(poses) {
            let (warped, valid) = synthesize_view(src, &depth, pose, k)?;
            for (a, &v) in any_valid.iter_mut().zip(valid.data().iter()) {
                *a |= v > T::zero();
            }
            per_source.push(penalize_invalid(&photometric_loss(target, &warped, cfg)?, &valid)?);
        }
        let min_warped = min_reprojection(&per_source)?;
        let mask = mask_below(&min_warped.detach(), &min_identity)?;
        mask.update_data(|m| {
            for (v, &ok) in m.iter_mut().zip(&any_valid) {
                if !ok {
                    *v = T::zero();
                }
            }
        });
        let count = mask.data().iter().filter(|&&v| v > T::zero()).count();
        kept.push(count as f64 / (n * h * w) as f64);
        let scale_photo = min_warped
            .mul(&mask)?
            .sum()
            .mul_scalar(T::of(1.0 / count.max(1) as f64));
        photometric = photometric.add(&scale_photo)?;

        let image = target.downsample_mean(factor)?;
        let scale_smooth = smoothness_loss(disp, &image, cfg.normalize_smoothness)?
            .mul_scalar(T::of(1.0 / factor as f64));
        smoothness = smoothness.add(&scale_smooth)?;
    }
    let inv_scales = T::of(1.0 / cfg.scales as f64);
    let photometric = photometric.mul_scalar(inv_scales);
    let smoothness = smoothness.mul_scalar(inv_scales);
    let total = photometric.add(&smoothness.mul_scalar(T::of(cfg.beta)))?;
    Ok(LossBreakdown {
        total,
        photometric,
        smoothness,
        automask_fraction: kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                let x = (i as f64 + 1.0) * (seed as f64 + 0.618);
                0.5 + 0.45 * (x * 12.9898).sin() * (x * 0.731).cos()
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a = image(&[1, 3, 6, 7], 3);
        let s = ssim(&a, &a, 1e-4, 9e-4).unwrap().to_vec();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ssim_of_constant_images_matches_closed_form() {
        let (x, y) = (0.3, 0.8);
        let (c1, c2) = (1e-4, 9e-4);
        let a = Tensor::<f64>::full(&[1, 1, 5, 5], x);
        let b = Tensor::<f64>::full(&[1, 1, 5, 5], y);
        let expect = (2.0 * x * y + c1) / (x * x + y * y + c1);
        for v in ssim(&a, &b, c1, c2).unwrap().to_vec() {
            assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
        }
    }

    #[test]
    fn photometric_of_identical_images_is_zero() {
        let a = image(&[2, 3, 5, 6], 1);
        let l = photometric_loss(&a, &a, &LossConfig::default()).unwrap();
        assert_eq!(l.shape(), &[2, 1, 5, 6]);
        assert!(l.to_vec().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn alpha_zero_is_mean_absolute_difference() {
        let a = image(&[1, 3, 4, 4], 1);
        let b = image(&[1, 3, 4, 4], 2);
        let cfg = LossConfig { alpha: 0.0, ..Default::default() };
        let l = photometric_loss(&a, &b, &cfg).unwrap().to_vec();
        let (av, bv) = (a.to_vec(), b.to_vec());
        for (p, v) in l.iter().enumerate() {
            let expect = (0..3).map(|c| (av[c * 16 + p] - bv[c * 16 + p]).abs()).sum::<f64>() / 3.0;
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_pair_scalar_oracle() {
        let cfg = LossConfig::default();
        let (x, y) = (0.5, 0.6);
        let a = Tensor::<f64>::full(&[1, 3, 4, 4], x);
        let b = Tensor::<f64>::full(&[1, 3, 4, 4], y);
        let s = (2.0 * x * y + cfg.c1) / (x * x + y * y + cfg.c1);
        let expect = 0.85 * (1.0 - s) / 2.0 + 0.15 * 0.1;
        for v in photometric_loss(&a, &b, &cfg).unwrap().to_vec() {
            assert!((v - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_disparity_is_smooth() {
        let d = Tensor::<f64>::full(&[1, 1, 5, 6], 0.3);
        let i = image(&[1, 3, 5, 6], 4);
        assert!(smoothness_loss(&d, &i, true).unwrap().item().abs() < 1e-15);
    }

    #[test]
    fn horizontal_ramp_on_flat_image() {
        let (h, w) = (4, 8);
        let d: Vec<f64> = (0..h * w).map(|i| 1.0 + 0.5 * (i % w) as f64).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let d = Tensor::from_vec(&[1, 1, h, w], d).unwrap();
        let img = Tensor::<f64>::full(&[1, 3, h, w], 0.4);
        let normalized = smoothness_loss(&d, &img, true).unwrap().item();
        assert!((normalized - 0.5 / mean).abs() < 1e-12);
        let raw = smoothness_loss(&d, &img, false).unwrap().item();
        assert!((raw - 0.5).abs() < 1e-12);
    }

    #[test]
    fn image_edge_attenuates_collinear_disparity_step() {
        let (h, w, step) = (3, 4, 0.7);
        let mut d = vec![1.0; h * w];
        let mut im = vec![0.1; h * w];
        for y in 0..h {
            for x in 2..w {
                d[y * w + x] = 2.0;
                im[y * w + x] = 0.1 + step;
            }
        }
        let d = Tensor::from_vec(&[1, 1, h, w], d).unwrap();
        let flat = Tensor::<f64>::full(&[1, 1, h, w], 0.1);
        let edge = Tensor::from_vec(&[1, 1, h, w], im).unwrap();
        let a = smoothness_loss(&d, &flat, false).unwrap().item();
        let b = smoothness_loss(&d, &edge, false).unwrap().item();
        assert!((b / a - (-step).exp()).abs() < 1e-12);
    }

    #[test]
    fn min_reprojection_rules() {
        let a = image(&[1, 1, 3, 3], 1);
        assert_eq!(min_reprojection(std::slice::from_ref(&a)).unwrap().to_vec(), a.to_vec());
        let b = a.add_scalar(1.0);
        assert_eq!(min_reprojection(&[b, a.clone()]).unwrap().to_vec(), a.to_vec());
        assert!(min_reprojection::<f64>(&[]).is_err());
    }

    #[test]
    fn static_scene_masks_everything() {
        let a = image(&[1, 3, 6, 6], 2);
        let m = auto_mask(&a, &[a.clone(), a.clone()], &[a.clone(), a.clone()], &LossConfig::default()).unwrap();
        assert!(m.to_vec().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn smoothness_ignores_disparity_scale(seed in 0u64..1000, k in 0.05f64..20.0) {
            let d = image(&[1, 1, 5, 7], seed).add_scalar(0.1);
            let i = image(&[1, 3, 5, 7], seed + 1);
            let a = smoothness_loss(&d, &i, true).unwrap().item();
            let b = smoothness_loss(&d.mul_scalar(k), &i, true).unwrap().item();
            prop_assert!((a - b).abs() < 1e-6);
        }

        #[test]
        fn photometric_is_nonnegative(seed in 0u64..1000) {
            let a = image(&[1, 3, 5, 5], seed);
            let b = image(&[1, 3, 5, 5], seed + 7);
            let l = photometric_loss(&a, &b, &LossConfig::default()).unwrap();
            prop_assert!(l.to_vec().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn min_never_exceeds_any_source(seed in 0u64..1000) {
            let a = image(&[1, 1, 4, 4], seed);
            let b = image(&[1, 1, 4, 4], seed + 3);
            let m = min_reprojection(&[a.clone(), b.clone()]).unwrap().to_vec();
            for ((x, y), z) in a.to_vec().iter().zip(b.to_vec()).zip(m) {
                prop_assert_eq!(z, x.min(y));
            }
        }
    }
}
