//! Depth accuracy metrics, per-image evaluation of a trained model, and the
//! hard-case union protocol.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Triplet;
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::network::{disparity_to_depth, Model};
use crate::tensor::{no_grad, Tensor};

/// Column order of metric reports.
pub const CSV_HEADER: &str = "abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const NAMES: [&'static str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "d1", "d2", "d3"];

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            abs_rel: a[0],
            sq_rel: a[1],
            rmse: a[2],
            rmse_log: a[3],
            delta1: a[4],
            delta2: a[5],
            delta3: a[6],
        }
    }

    /// Value of the column called `name` in [`CSV_HEADER`].
    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES.iter().position(|&n| n == name).map(|i| self.to_array()[i])
    }

    pub fn csv_row(&self) -> String {
        self.to_array().map(|v| format!("{v:.6}")).join(",")
    }

    /// Per-metric mean.
    pub fn mean(items: &[DepthMetrics]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("no metrics to average"));
        }
        let mut acc = [0.0; 7];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.to_array()) {
                *a += v;
            }
        }
        Ok(Self::from_array(acc.map(|a| a / items.len() as f64)))
    }
}

/// Rectangle kept for evaluation, as fractions of the image height and width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crop {
    pub top: f64,
    pub bottom: f64,
    pub left: f64,
    pub right: f64,
}

impl Crop {
    /// The crop customary for wide driving imagery.
    pub fn garg() -> Self {
        Self {
            top: 0.408_108_11,
            bottom: 0.991_891_89,
            left: 0.035_947_71,
            right: 0.964_052_29,
        }
    }

    fn contains(&self, u: usize, v: usize, width: usize, height: usize) -> bool {
        let (y0, y1) = ((self.top * height as f64) as usize, (self.bottom * height as f64) as usize);
        let (x0, x1) = ((self.left * width as f64) as usize, (self.right * width as f64) as usize);
        (y0..y1).contains(&v) && (x0..x1).contains(&u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Ground truth above this is ignored and predictions are clamped to it.
    pub cap: f64,
    pub floor: f64,
    /// Rescale predictions by `median(gt) / median(pred)`.
    pub median_scale: bool,
    pub crop: Option<Crop>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            cap: 80.0,
            floor: 1e-3,
            median_scale: true,
            crop: None,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Metrics of one `height x width` prediction against sparse ground truth.
/// Pixels whose ground truth lies outside `(floor, cap]`, is non-finite, or
/// falls outside the crop are ignored.
pub fn compute_metrics(
    pred: &[f32],
    gt: &[f32],
    width: usize,
    height: usize,
    opts: &EvalOptions,
) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || gt.len() != width * height {
        return Err(Error::shape(format!(
            "{} predictions and {} ground-truth values for a {width}x{height} image",
            pred.len(),
            gt.len()
        )));
    }
    let (mut p, g): (Vec<f64>, Vec<f64>) = (0..gt.len())
        .filter(|&i| {
            let gi = f64::from(gt[i]);
            gi.is_finite()
                && gi > opts.floor
                && gi <= opts.cap
                && opts.crop.map_or(true, |c| c.contains(i % width, i / width, width, height))
        })
        .map(|i| (f64::from(pred[i]), f64::from(gt[i])))
        .unzip();
    if g.is_empty() {
        return Err(Error::invalid("no valid ground-truth pixels"));
    }
    if let Some(i) = p.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("prediction {} is {}", i, p[i])));
    }
    if opts.median_scale {
        let ratio = median(&mut g.clone()) / median(&mut p.clone());
        p.iter_mut().for_each(|v| *v *= ratio);
    }
    p.iter_mut().for_each(|v| *v = v.clamp(opts.floor, opts.cap));

    let n = g.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| p.iter().zip(&g).map(|(&a, &b)| f(a, b)).sum::<f64>() / n;
    let delta = |k: i32| mean(&|a, b| f64::from(u8::from((a / b).max(b / a) < 1.25f64.powi(k))));
    Ok(DepthMetrics {
        abs_rel: mean(&|a, b| (a - b).abs() / b),
        sq_rel: mean(&|a, b| (a - b) * (a - b) / b),
        rmse: mean(&|a, b| (a - b) * (a - b)).sqrt(),
        rmse_log: mean(&|a, b| (a.ln() - b.ln()).powi(2)).sqrt(),
        delta1: delta(1),
        delta2: delta(2),
        delta3: delta(3),
    })
}

/// One camera for a whole dataset: the mean focal length, with the principal
/// point moved to the image centre.
pub fn universal_intrinsics(cameras: &[CameraIntrinsics], width: usize, height: usize) -> Result<CameraIntrinsics> {
    if cameras.is_empty() {
        return Err(Error::invalid("universal intrinsics need at least one camera"));
    }
    let f = cameras.iter().map(|k| k.fx + k.fy).sum::<f64>() / (2 * cameras.len()) as f64;
    CameraIntrinsics::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
}

/// Indices of the `k` largest errors, largest first; ties go to the smaller
/// index.
pub fn hardest_k(errors: &[(usize, f64)], k: usize) -> Result<Vec<usize>> {
    if k > errors.len() {
        return Err(Error::invalid(format!("asked for {k} hardest of {} images", errors.len())));
    }
    if let Some((i, e)) = errors.iter().find(|(_, e)| !e.is_finite()) {
        return Err(Error::NonFinite(format!("error of image {i} is {e}")));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(sorted.into_iter().take(k).map(|(i, _)| i).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardCaseReport {
    pub method_lists: Vec<Vec<usize>>,
    /// Ascending.
    pub union: Vec<usize>,
    /// Indices present in every list, ascending.
    pub common: Vec<usize>,
}

pub fn challenge_union(method_lists: &[Vec<usize>]) -> HardCaseReport {
    let sets: Vec<BTreeSet<usize>> = method_lists.iter().map(|l| l.iter().copied().collect()).collect();
    let union: BTreeSet<usize> = sets.iter().flatten().copied().collect();
    let common = union
        .iter()
        .copied()
        .filter(|i| sets.iter().all(|s| s.contains(i)))
        .collect();
    HardCaseReport {
        method_lists: method_lists.to_vec(),
        union: union.into_iter().collect(),
        common,
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(format!("spearman needs two equal samples of size >= 2, got {} and {}", a.len(), b.len())));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::invalid("spearman is undefined for a constant sample"));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Full-resolution depth for `[N, 3, H, W]` images.
pub fn predict_depth(model: &Model<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, _, h, w) = images.dims4()?;
    let enc = &model.config.encoder;
    if (w, h) != (enc.width, enc.height) {
        return Err(Error::shape(format!(
            "model expects {}x{} images, got {w}x{h}",
            enc.width, enc.height
        )));
    }
    no_grad(|| {
        let disp = model.depth.forward(images)?;
        Ok(disparity_to_depth(&disp[0], model.config.decoder.depth_range))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// `(image index, metrics)` in evaluation order.
    pub per_image: Vec<(usize, DepthMetrics)>,
    pub mean: DepthMetrics,
    /// Spearman correlation of predicted and true depth over all valid pixels
    /// of all images.
    pub spearman: f64,
}

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let text = format!("{CSV_HEADER}\n{}\n", self.mean.csv_row());
        std::fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    pub fn write_per_image_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "index,{CSV_HEADER}")?;
        for (i, m) in &self.per_image {
            writeln!(out, "{i},{}", m.csv_row())?;
        }
        std::fs::write(path, out).map_err(|e| Error::file(path, e))
    }
}

/// Reads `(index, value)` pairs of column `metric` from a per-image CSV.
pub fn read_per_image_errors(path: &Path, metric: &str) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::file(path, "empty error table"))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|&h| h == name)
            .ok_or_else(|| Error::file(path, format!("no column named {name}")))
    };
    let (ci, cm) = (col("index")?, col(metric)?);
    lines
        .enumerate()
        .map(|(row, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let bad = || Error::file(path, format!("malformed row {}", row + 2));
            let i = f.get(ci).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let v = f.get(cm).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            Ok((i, v))
        })
        .collect()
}

/// Evaluates the centre frame of each triplet that carries ground truth.
/// `indices` labels the triplets in the per-image report.
pub fn evaluate_run(
    model: &Model<f32>,
    triplets: &[Triplet],
    indices: &[usize],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if triplets.len() != indices.len() {
        return Err(Error::invalid("one index per triplet is required"));
    }
    let mut per_image = Vec::new();
    let (mut all_p, mut all_g) = (Vec::new(), Vec::new());
    for (t, &idx) in triplets.iter().zip(indices) {
        let Some(gt) = &t.gt_depth else { continue };
        let (w, h) = t.size();
        let image = t.frames[1].reshape(&[1, 3, h, w])?;
        let pred = predict_depth(model, &image)?.to_vec();
        let gt = gt.to_vec();
        per_image.push((idx, compute_metrics(&pred, &gt, w, h, opts)?));
        for (p, g) in pred.iter().zip(&gt) {
            let g = f64::from(*g);
            if g.is_finite() && g > opts.floor && g <= opts.cap {
                all_p.push(f64::from(*p));
                all_g.push(g);
            }
        }
    }
    if per_image.is_empty() {
        return Err(Error::invalid("no evaluation image has ground-truth depth"));
    }
    let metrics: Vec<DepthMetrics> = per_image.iter().map(|(_, m)| *m).collect();
    Ok(EvalReport {
        mean: DepthMetrics::mean(&metrics)?,
        spearman: spearman(&all_p, &all_g).unwrap_or(0.0),
        per_image,
    })
}
