//! One gradient check per differentiable operation, all at 64-bit.

use depthforge::geometry::{se3_to_matrix, synthesize_view, CameraIntrinsics, DepthMap};
use depthforge::losses::{photometric_loss, smoothness_loss, ssim, total_loss, LossConfig};
use depthforge::network::layers::Attention;
use depthforge::network::{AttentionMode, Model, ModelConfig, ParamBuilder};
use depthforge::tensor::{conv2d, Pool, Reduce};
use depthforge::{geometry::grid_sample, Result, Tensor};
use rand::Rng;

use super::{check_gradients, param, rng, GradReport};

/// Sampled coordinates per operation.
pub const COORDS: usize = 200;
pub const TOLERANCE: f64 = 1e-6;

pub type Case = fn() -> Result<GradReport>;

pub const ALL: [(&str, Case); 12] = [
    ("elementwise", elementwise),
    ("conv", conv),
    ("pool", pool),
    ("upsample", upsample),
    ("grid_sample", grid_sample_case),
    ("ssim", ssim_case),
    ("smoothness", smoothness),
    ("attention", attention),
    ("se3_to_matrix", se3),
    ("view_synthesis", view_synthesis),
    ("total_loss", total_loss_case),
    ("diffnet_forward", diffnet_forward),
];

pub fn elementwise() -> Result<GradReport> {
    let mut r = rng(1);
    let a = param(&mut r, &[2, 3, 4], 0.2, 2.0);
    let b = param(&mut r, &[3, 4], -1.5, 1.5);
    let (a2, b2) = (a.clone(), b.clone());
    check_gradients(
        &[a, b],
        move || {
            let x = a2.mul(&b2)?.add(&a2.log())?.div(&a2.add_scalar(1.0))?;
            let y = b2.sigmoid().mul(&b2.elu())?.sub(&a2.exp().recip())?;
            let z = x.maximum(&y)?.add(&x.minimum(&y.square())?)?.abs();
            Ok(vec![z, b2.clamp(-1.0, 1.0)])
        },
        COORDS,
        11,
    )
}

pub fn conv() -> Result<GradReport> {
    let mut r = rng(2);
    let x = param(&mut r, &[2, 3, 7, 6], -1.0, 1.0);
    let w3 = param(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
    let b3 = param(&mut r, &[4], -0.5, 0.5);
    let w1 = param(&mut r, &[2, 4, 1, 1], -0.5, 0.5);
    let w7 = param(&mut r, &[2, 3, 7, 7], -0.2, 0.2);
    let inputs = [x.clone(), w3.clone(), b3.clone(), w1.clone(), w7.clone()];
    check_gradients(
        &inputs,
        move || {
            let y = conv2d(&x, &w3, Some(&b3), 2, 1)?;
            let z = conv2d(&y, &w1, None, 1, 0)?;
            let big = conv2d(&x, &w7, None, 1, 3)?;
            Ok(vec![z, big])
        },
        COORDS,
        12,
    )
}

pub fn pool() -> Result<GradReport> {
    let mut r = rng(3);
    let x = param(&mut r, &[2, 3, 6, 8], -1.0, 1.0);
    let x2 = x.clone();
    check_gradients(
        &[x],
        move || {
            Ok(vec![
                x2.pool(Pool::MeanGlobal)?,
                x2.pool(Pool::MaxGlobal)?,
                x2.pool(Pool::MeanWindow(3))?,
                x2.downsample_mean(2)?,
                x2.reduce_axis(1, Reduce::Max)?,
                x2.reduce_axis(1, Reduce::Mean)?,
            ])
        },
        COORDS,
        13,
    )
}

pub fn upsample() -> Result<GradReport> {
    let mut r = rng(4);
    let x = param(&mut r, &[2, 3, 4, 5], -1.0, 1.0);
    let x2 = x.clone();
    check_gradients(
        &[x],
        move || Ok(vec![x2.upsample_bilinear(2)?, x2.upsample_bilinear(4)?]),
        COORDS,
        14,
    )
}

pub fn grid_sample_case() -> Result<GradReport> {
    let mut r = rng(5);
    let (h, w) = (6, 7);
    let img = param(&mut r, &[2, 3, h, w], 0.0, 1.0);
    // Mostly interior, some past the border to exercise the clamp.
    let n = 2 * 5 * 6;
    let coords: Vec<f64> = (0..2 * n)
        .map(|i| {
            let extent = if (i / 30) % 2 == 0 { w } else { h } as f64;
            r.gen_range(-0.5..extent - 0.5)
        })
        .collect();
    let coords = Tensor::parameter(&[2, 2, 5, 6], coords)?;
    let (a, b) = (img.clone(), coords.clone());
    check_gradients(
        &[img, coords],
        move || {
            let (s, mask) = grid_sample(&a, &b)?;
            Ok(vec![s.mul(&mask)?])
        },
        COORDS,
        15,
    )
}

pub fn ssim_case() -> Result<GradReport> {
    let mut r = rng(6);
    let a = param(&mut r, &[2, 3, 6, 7], 0.0, 1.0);
    let b = param(&mut r, &[2, 3, 6, 7], 0.0, 1.0);
    let (a2, b2) = (a.clone(), b.clone());
    let cfg = LossConfig::default();
    check_gradients(
        &[a, b],
        move || {
            let s = ssim(&a2, &b2, cfg.c1, cfg.c2)?;
            Ok(vec![s, photometric_loss(&a2, &b2, &cfg)?])
        },
        COORDS,
        16,
    )
}

pub fn smoothness() -> Result<GradReport> {
    let mut r = rng(7);
    let d = param(&mut r, &[2, 1, 6, 7], 0.05, 1.0);
    let img = param(&mut r, &[2, 3, 6, 7], 0.0, 1.0);
    let (d2, i2) = (d.clone(), img.clone());
    check_gradients(
        &[d, img],
        move || Ok(vec![smoothness_loss(&d2, &i2, true)?, smoothness_loss(&d2, &i2, false)?]),
        COORDS,
        17,
    )
}

pub fn attention() -> Result<GradReport> {
    let mut r = rng(8);
    let x = param(&mut r, &[2, 16, 5, 6], -1.0, 1.0);
    let mut b = ParamBuilder::<f64>::new(8);
    let gate = Attention::new(&mut b, AttentionMode::ChannelSpatial, 16);
    let spatial = Attention::new(&mut b, AttentionMode::Spatial, 16);
    let mut inputs = vec![x.clone()];
    inputs.extend(b.finish().into_iter().map(|(_, t)| t));
    check_gradients(
        &inputs,
        move || Ok(vec![gate.forward(&x)?, spatial.forward(&x)?]),
        COORDS,
        18,
    )
}

pub fn se3() -> Result<GradReport> {
    let mut r = rng(9);
    let mut v = Vec::new();
    for i in 0..6 {
        // Angles from near zero up to just below pi.
        let mag = [1e-7, 1e-3, 0.3, 1.0, 2.0, 3.1][i];
        let axis: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let norm = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.extend(axis.iter().map(|a| a / norm * mag));
        v.extend((0..3).map(|_| r.gen_range(-2.0..2.0)));
    }
    let p = Tensor::parameter(&[6, 6], v)?;
    let p2 = p.clone();
    check_gradients(&[p], move || Ok(vec![se3_to_matrix(&p2)?]), COORDS, 19)
}

fn camera(w: usize, h: usize) -> CameraIntrinsics {
    CameraIntrinsics::new(0.9 * w as f64, 0.9 * w as f64, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
}

pub fn view_synthesis() -> Result<GradReport> {
    let mut r = rng(10);
    let (h, w) = (8, 10);
    let src = param(&mut r, &[2, 3, h, w], 0.0, 1.0);
    let depth = param(&mut r, &[2, 1, h, w], 2.0, 6.0);
    let pose: Vec<f64> = (0..12)
        .map(|i| if i % 6 < 3 { r.gen_range(-0.05..0.05) } else { r.gen_range(-0.3..0.3) })
        .collect();
    let pose = Tensor::parameter(&[2, 6], pose)?;
    let k = camera(w, h);
    let (s, d, p) = (src.clone(), depth.clone(), pose.clone());
    check_gradients(
        &[src, depth, pose],
        move || {
            // The validity mask is piecewise constant; only the warp is differentiable.
            let (warped, _) = synthesize_view(&s, &DepthMap::new(d.clone())?, &p, &k)?;
            Ok(vec![warped])
        },
        COORDS,
        20,
    )
}

pub fn total_loss_case() -> Result<GradReport> {
    let mut r = rng(11);
    let (h, w) = (8, 12);
    let target = param(&mut r, &[1, 3, h, w], 0.0, 1.0);
    let sources = [param(&mut r, &[1, 3, h, w], 0.0, 1.0), param(&mut r, &[1, 3, h, w], 0.0, 1.0)];
    let disps = [param(&mut r, &[1, 1, h, w], 0.1, 0.9), param(&mut r, &[1, 1, h / 2, w / 2], 0.1, 0.9)];
    let poses = [param(&mut r, &[1, 6], -0.02, 0.02), param(&mut r, &[1, 6], -0.02, 0.02)];
    let k = camera(w, h);
    let cfg = LossConfig {
        scales: 2,
        beta: 0.1,
        ..LossConfig::default()
    };
    let range = depthforge::network::DepthRange::default();
    let mut inputs = vec![target.clone()];
    inputs.extend(sources.iter().cloned());
    inputs.extend(disps.iter().cloned());
    inputs.extend(poses.iter().cloned());
    check_gradients(
        &inputs,
        move || Ok(vec![total_loss(&target, &sources, &disps, &poses, &k, range, &cfg)?.total]),
        COORDS,
        21,
    )
}

pub fn diffnet_forward() -> Result<GradReport> {
    let mut r = rng(12);
    let cfg = ModelConfig::toy(32, 32);
    let model = Model::<f64>::new(&cfg)?;
    let img = param(&mut r, &[1, 3, 32, 32], 0.0, 1.0);
    let mut inputs = vec![img.clone()];
    inputs.extend(model.depth_parameters().iter().map(|(_, t)| t.clone()));
    check_gradients(
        &inputs,
        move || model.depth.forward(&img),
        COORDS,
        22,
    )
}
