//! Pinhole camera model, rigid motion and differentiable inverse warping.
//!
//! A target pixel `p` with depth `d` is back-projected to `d · K⁻¹ [u v 1]ᵀ`,
//! moved into the source camera by `T = [R | t]`, projected with `K`, and the
//! source image is sampled bilinearly at the resulting coordinates.

use std::ops::{Add, Mul, Neg, Sub};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Below this rotation magnitude the Rodrigues coefficients use their
/// second-order Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-5;

/// Projected depths are clamped below by this value before division.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-3;

/// Coordinate assigned to points behind the camera.
const INVALID_COORD: f64 = -1e6;

/// Sampling coordinates this far outside the image still count as valid,
/// absorbing round-off at the border.
const BORDER_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid(format!("focal lengths must be positive: {self:?}")));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::invalid(format!("principal point outside the image: {self:?}")));
        }
        Ok(())
    }

    /// Rescales to another image size (pixel units scale with the extents).
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let k: Self = serde_json::from_str(&text).map_err(|e| Error::file(path, e))?;
        k.validate().map_err(|e| Error::file(path, e))?;
        Ok(k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::file(path, e))
    }
}

/// Rigid transform as axis-angle rotation (radians × unit axis) plus translation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self {
            axis_angle: [0.0; 3],
            translation: t,
        }
    }

    pub fn from_vector(v: &[f64]) -> Result<Self> {
        match v {
            [a, b, c, x, y, z] => Ok(Self {
                axis_angle: [*a, *b, *c],
                translation: [*x, *y, *z],
            }),
            _ => Err(Error::shape(format!("a pose has 6 parameters, got {}", v.len()))),
        }
    }

    pub fn to_vector(&self) -> [f64; 6] {
        let [a, b, c] = self.axis_angle;
        let [x, y, z] = self.translation;
        [a, b, c, x, y, z]
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        rodrigues(self.axis_angle)
    }

    pub fn matrix(&self) -> [[f64; 4]; 4] {
        let r = self.rotation();
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation;
        std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i])
    }

    /// Inverse motion: `x = Rᵀ (x' - t)`.
    pub fn inverse(&self) -> Self {
        let r = self.rotation();
        let t = self.translation;
        let ti = std::array::from_fn(|i| -(r[0][i] * t[0] + r[1][i] * t[1] + r[2][i] * t[2]));
        Self {
            axis_angle: self.axis_angle.map(|a| -a),
            translation: ti,
        }
    }

    /// Stacks poses into a `[N, 6]` tensor.
    pub fn stack<T: Real>(poses: &[PoseSE3]) -> Result<Tensor<T>> {
        let data = poses.iter().flat_map(|p| p.to_vector()).map(T::of).collect();
        Tensor::from_vec(&[poses.len(), 6], data)
    }
}

/// Scalar with a three-component forward-mode derivative.
#[derive(Debug, Clone, Copy)]
struct Jet {
    v: f64,
    d: [f64; 3],
}

impl Jet {
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 3] }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }

    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }

    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }

    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }

    fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r)
    }

    fn scale(self, s: f64) -> Self {
        self.chain(self.v * s, s)
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        Jet {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        Jet {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

trait RodriguesScalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> {
    fn lit(v: f64) -> Self;
    fn value(&self) -> f64;
    /// `(sin θ / θ, (1 - cos θ) / θ²)` from `θ²`.
    fn coefficients(theta_sq: Self) -> (Self, Self);
}

impl RodriguesScalar for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn coefficients(t2: f64) -> (f64, f64) {
        if t2 < SMALL_ANGLE * SMALL_ANGLE {
            (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
        } else {
            let t = t2.sqrt();
            (t.sin() / t, (1.0 - t.cos()) / t2)
        }
    }
}

impl RodriguesScalar for Jet {
    fn lit(v: f64) -> Self {
        Jet::constant(v)
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn coefficients(t2: Jet) -> (Jet, Jet) {
        if t2.v < SMALL_ANGLE * SMALL_ANGLE {
            (Jet::lit(1.0) - t2.scale(1.0 / 6.0), Jet::lit(0.5) - t2.scale(1.0 / 24.0))
        } else {
            let t = t2.sqrt();
            (t.sin() * t.recip(), (Jet::lit(1.0) - t.cos()) * t2.recip())
        }
    }
}

/// `R = I + A [w]× + B [w]×²` with `[w]×² = w wᵀ - θ² I`.
fn rodrigues_generic<S: RodriguesScalar>(w: [S; 3]) -> [[S; 3]; 3] {
    let t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b) = S::coefficients(t2);
    let zero = S::lit(0.0);
    let k = [[zero, -w[2], w[1]], [w[2], zero, -w[0]], [-w[1], w[0], zero]];
    std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            let eye = if i == j { S::lit(1.0) } else { zero };
            let k2 = w[i] * w[j] - if i == j { t2 } else { zero };
            eye + a * k[i][j] + b * k2
        })
    })
}

pub fn rodrigues(w: [f64; 3]) -> [[f64; 3]; 3] {
    rodrigues_generic(w)
}

/// Rotation plus its Jacobian: `jac[i][j][k] = ∂R_ij / ∂w_k`.
fn rodrigues_with_jacobian(w: [f64; 3]) -> ([[f64; 3]; 3], [[[f64; 3]; 3]; 3]) {
    let jets = std::array::from_fn(|k| {
        let mut d = [0.0; 3];
        d[k] = 1.0;
        Jet { v: w[k], d }
    });
    let r = rodrigues_generic::<Jet>(jets);
    (r.map(|row| row.map(|j| j.value())), r.map(|row| row.map(|j| j.d)))
}

/// `[N, 6]` pose vectors (axis-angle, translation) to `[N, 4, 4]` matrices.
pub fn se3_to_matrix<T: Real>(poses: &Tensor<T>) -> Result<Tensor<T>> {
    let n = match poses.shape() {
        [n, 6] => *n,
        s => return Err(Error::shape(format!("pose tensor must be [N, 6], got {s:?}"))),
    };
    let mut out = vec![T::zero(); n * 16];
    let mut jacobians = Vec::with_capacity(n);
    {
        let p = poses.data();
        for b in 0..n {
            let v: Vec<f64> = p[b * 6..b * 6 + 6].iter().map(|x| x.to_f64_lossy()).collect();
            let (r, jac) = rodrigues_with_jacobian([v[0], v[1], v[2]]);
            let m = &mut out[b * 16..b * 16 + 16];
            for i in 0..3 {
                for j in 0..3 {
                    m[i * 4 + j] = T::of(r[i][j]);
                }
                m[i * 4 + 3] = T::of(v[3 + i]);
            }
            m[15] = T::one();
            jacobians.push(jac);
        }
    }
    Ok(Tensor::from_op(vec![n, 4, 4], out, vec![poses.clone()], move |ctx| {
        let mut g = vec![T::zero(); n * 6];
        for (b, jac) in jacobians.iter().enumerate() {
            let go = &ctx.grad[b * 16..b * 16 + 16];
            for k in 0..3 {
                let mut acc = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        acc += go[i * 4 + j].to_f64_lossy() * jac[i][j][k];
                    }
                }
                g[b * 6 + k] = T::of(acc);
            }
            for i in 0..3 {
                g[b * 6 + 3 + i] = go[i * 4 + 3];
            }
        }
        vec![Some(g)]
    }))
}

/// Positive depths `[N, 1, H, W]` in scene units.
#[derive(Debug, Clone)]
pub struct DepthMap<T: Real = f32>(Tensor<T>);

impl<T: Real> DepthMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        let (_, c, _, _) = values.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("depth map must have one channel, got {c}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_inner(self) -> Tensor<T> {
        self.0
    }
}

/// Differentiable inverse of `[N, 6]` pose vectors: `(w, t) -> (-w, -R(w)ᵀ t)`.
pub fn invert_pose<T: Real>(poses: &Tensor<T>) -> Result<Tensor<T>> {
    let n = match poses.shape() {
        [n, 6] => *n,
        s => return Err(Error::shape(format!("pose tensor must be [N, 6], got {s:?}"))),
    };
    let w = poses.narrow(1, 0, 3)?.neg();
    let t = poses.narrow(1, 3, 3)?.reshape(&[n, 3, 1, 1])?;
    let rot = se3_to_matrix(&Tensor::concat(&[w.clone(), Tensor::zeros(&[n, 3])], 1)?)?;
    let t = transform_points(&t, &rot)?.neg().reshape(&[n, 3])?;
    Tensor::concat(&[w, t], 1)
}

/// Unit-depth viewing rays `K⁻¹ [u v 1]ᵀ` as `[1, 3, H, W]`.
pub fn camera_rays<T: Real>(k: &CameraIntrinsics, height: usize, width: usize) -> Tensor<T> {
    let mut rays = vec![T::zero(); 3 * height * width];
    let plane = height * width;
    for v in 0..height {
        for u in 0..width {
            let i = v * width + u;
            rays[i] = T::of((u as f64 - k.cx) / k.fx);
            rays[plane + i] = T::of((v as f64 - k.cy) / k.fy);
            rays[2 * plane + i] = T::one();
        }
    }
    Tensor::from_vec(&[1, 3, height, width], rays).expect("ray grid shape")
}

/// Back-projects every pixel to a camera-frame point, `[N, 3, H, W]`.
pub fn reproj<T: Real>(depth: &DepthMap<T>, k: &CameraIntrinsics) -> Result<Tensor<T>> {
    let (_, _, h, w) = depth.values().dims4()?;
    depth.values().mul(&camera_rays(k, h, w))
}

/// Applies `[N, 4, 4]` rigid transforms to `[N, 3, H, W]` points.
pub fn transform_points<T: Real>(points: &Tensor<T>, mats: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = points.dims4()?;
    if c != 3 || mats.shape() != [n, 4, 4] {
        return Err(Error::shape(format!(
            "transform_points: points {:?}, matrices {:?}",
            points.shape(),
            mats.shape()
        )));
    }
    let plane = h * w;
    let mut out = vec![T::zero(); n * 3 * plane];
    {
        let p = points.data();
        let m = mats.data();
        for b in 0..n {
            let mb = &m[b * 16..b * 16 + 16];
            let pb = &p[b * 3 * plane..(b + 1) * 3 * plane];
            let ob = &mut out[b * 3 * plane..(b + 1) * 3 * plane];
            for i in 0..plane {
                let (x, y, z) = (pb[i], pb[plane + i], pb[2 * plane + i]);
                for r in 0..3 {
                    ob[r * plane + i] = mb[r * 4] * x + mb[r * 4 + 1] * y + mb[r * 4 + 2] * z + mb[r * 4 + 3];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, 3, h, w],
        out,
        vec![points.clone(), mats.clone()],
        move |ctx| {
            let p = ctx.inputs[0].data();
            let m = ctx.inputs[1].data();
            let g = ctx.grad;
            let mut gp = ctx.needs(0).then(|| vec![T::zero(); p.len()]);
            let mut gm = ctx.needs(1).then(|| vec![T::zero(); m.len()]);
            for b in 0..n {
                let mb = &m[b * 16..b * 16 + 16];
                let base = b * 3 * plane;
                let mut acc = [T::zero(); 12];
                for i in 0..plane {
                    let go = [g[base + i], g[base + plane + i], g[base + 2 * plane + i]];
                    let pt = [p[base + i], p[base + plane + i], p[base + 2 * plane + i]];
                    if let Some(gp) = gp.as_mut() {
                        for c in 0..3 {
                            gp[base + c * plane + i] =
                                mb[c] * go[0] + mb[4 + c] * go[1] + mb[8 + c] * go[2];
                        }
                    }
                    if gm.is_some() {
                        for r in 0..3 {
                            for c in 0..3 {
                                acc[r * 4 + c] = acc[r * 4 + c] + go[r] * pt[c];
                            }
                            acc[r * 4 + 3] = acc[r * 4 + 3] + go[r];
                        }
                    }
                }
                if let Some(gm) = gm.as_mut() {
                    gm[b * 16..b * 16 + 12].copy_from_slice(&acc);
                }
            }
            vec![gp, gm]
        },
    ))
}

/// Pinhole projection of camera-frame points to pixel coordinates `[N, 2, H, W]`
/// (channel 0 = column, 1 = row). Depth is clamped below by
/// [`MIN_PROJECTION_DEPTH`]; points with non-positive depth are sent far
/// outside the image.
pub fn project<T: Real>(points: &Tensor<T>, k: &CameraIntrinsics) -> Result<Tensor<T>> {
    let (n, c, h, w) = points.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("project expects 3 channels, got {c}")));
    }
    let plane = h * w;
    let eps = T::of(MIN_PROJECTION_DEPTH);
    let (fx, fy, cx, cy) = (T::of(k.fx), T::of(k.fy), T::of(k.cx), T::of(k.cy));
    let invalid = T::of(INVALID_COORD);
    let mut out = vec![T::zero(); n * 2 * plane];
    {
        let p = points.data();
        for b in 0..n {
            let (pb, ob) = (&p[b * 3 * plane..], &mut out[b * 2 * plane..(b + 1) * 2 * plane]);
            for i in 0..plane {
                let (x, y, z) = (pb[i], pb[plane + i], pb[2 * plane + i]);
                if z > T::zero() {
                    let zc = z.max(eps);
                    ob[i] = fx * x / zc + cx;
                    ob[plane + i] = fy * y / zc + cy;
                } else {
                    ob[i] = invalid;
                    ob[plane + i] = invalid;
                }
            }
        }
    }
    Ok(Tensor::from_op(vec![n, 2, h, w], out, vec![points.clone()], move |ctx| {
        let p = ctx.inputs[0].data();
        let g = ctx.grad;
        let mut gp = vec![T::zero(); p.len()];
        for b in 0..n {
            let pb = &p[b * 3 * plane..];
            let gb = &g[b * 2 * plane..];
            let out = &mut gp[b * 3 * plane..(b + 1) * 3 * plane];
            for i in 0..plane {
                let (x, y, z) = (pb[i], pb[plane + i], pb[2 * plane + i]);
                if z <= T::zero() {
                    continue;
                }
                let zc = z.max(eps);
                let (gu, gv) = (gb[i], gb[plane + i]);
                out[i] = gu * fx / zc;
                out[plane + i] = gv * fy / zc;
                if z >= eps {
                    out[2 * plane + i] = -(gu * fx * x + gv * fy * y) / (zc * zc);
                }
            }
        }
        vec![Some(gp)]
    }))
}

/// Transforms back-projected points by `pose` (`[N, 4, 4]`) and projects them.
pub fn proj<T: Real>(points: &Tensor<T>, k: &CameraIntrinsics, pose: &Tensor<T>) -> Result<Tensor<T>> {
    project(&transform_points(points, pose)?, k)
}

/// Identity sampling grid `[N, 2, H, W]`.
pub fn pixel_grid<T: Real>(n: usize, height: usize, width: usize) -> Tensor<T> {
    let plane = height * width;
    let mut g = Vec::with_capacity(n * 2 * plane);
    for _ in 0..n {
        g.extend((0..plane).map(|i| T::of((i % width) as f64)));
        g.extend((0..plane).map(|i| T::of((i / width) as f64)));
    }
    Tensor::from_vec(&[n, 2, height, width], g).expect("grid shape")
}

/// Bilinear sampling of `image` at pixel coordinates.
///
/// Coordinates outside `[0, W-1] × [0, H-1]` are clamped to the border and
/// flagged with 0 in the returned `[N, 1, H', W']` validity mask. Gradients
/// flow to the image and, for unclamped coordinates, to the coordinates.
pub fn grid_sample<T: Real>(image: &Tensor<T>, coords: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = image.dims4()?;
    let (cn, two, ho, wo) = coords.dims4()?;
    if cn != n || two != 2 {
        return Err(Error::shape(format!(
            "grid_sample: image {:?} with coordinates {:?}",
            image.shape(),
            coords.shape()
        )));
    }
    let plane_out = ho * wo;
    let plane_in = h * w;

    #[derive(Clone, Copy)]
    struct Tap<T> {
        x0: usize,
        x1: usize,
        y0: usize,
        y1: usize,
        fx: T,
        fy: T,
        free_x: bool,
        free_y: bool,
    }

    let axis = |v: T, len: usize| -> (usize, usize, T, bool, bool) {
        let hi = T::of((len - 1) as f64);
        let tol = T::of(BORDER_TOLERANCE);
        let inside = v >= -tol && v <= hi + tol;
        let vc = if v.is_nan() { T::zero() } else { v.max(T::zero()).min(hi) };
        if len == 1 {
            return (0, 0, T::zero(), inside, false);
        }
        let i0 = (vc.floor().to_f64_lossy() as usize).min(len - 2);
        let free = v >= T::zero() && v <= hi;
        (i0, i0 + 1, vc - T::of(i0 as f64), inside, free)
    };

    let mut taps = Vec::with_capacity(n * plane_out);
    let mut mask = vec![T::zero(); n * plane_out];
    {
        let cd = coords.data();
        for b in 0..n {
            for i in 0..plane_out {
                let u = cd[b * 2 * plane_out + i];
                let v = cd[b * 2 * plane_out + plane_out + i];
                let (x0, x1, fx, in_x, free_x) = axis(u, w);
                let (y0, y1, fy, in_y, free_y) = axis(v, h);
                if in_x && in_y {
                    mask[b * plane_out + i] = T::one();
                }
                taps.push(Tap { x0, x1, y0, y1, fx, fy, free_x, free_y });
            }
        }
    }
    let mut out = vec![T::zero(); n * c * plane_out];
    {
        let img = image.data();
        for b in 0..n {
            for ch in 0..c {
                let src = &img[(b * c + ch) * plane_in..(b * c + ch + 1) * plane_in];
                let dst = &mut out[(b * c + ch) * plane_out..(b * c + ch + 1) * plane_out];
                for (i, t) in taps[b * plane_out..(b + 1) * plane_out].iter().enumerate() {
                    let top = src[t.y0 * w + t.x0] * (T::one() - t.fx) + src[t.y0 * w + t.x1] * t.fx;
                    let bot = src[t.y1 * w + t.x0] * (T::one() - t.fx) + src[t.y1 * w + t.x1] * t.fx;
                    dst[i] = top * (T::one() - t.fy) + bot * t.fy;
                }
            }
        }
    }
    let sampled = Tensor::from_op(
        vec![n, c, ho, wo],
        out,
        vec![image.clone(), coords.clone()],
        move |ctx| {
            let img = ctx.inputs[0].data();
            let g = ctx.grad;
            let mut gi = ctx.needs(0).then(|| vec![T::zero(); img.len()]);
            let mut gc = ctx.needs(1).then(|| vec![T::zero(); n * 2 * plane_out]);
            for b in 0..n {
                for ch in 0..c {
                    let off_in = (b * c + ch) * plane_in;
                    let off_out = (b * c + ch) * plane_out;
                    for (i, t) in taps[b * plane_out..(b + 1) * plane_out].iter().enumerate() {
                        let go = g[off_out + i];
                        if let Some(gi) = gi.as_mut() {
                            let (a, bb) = (go * (T::one() - t.fy), go * t.fy);
                            gi[off_in + t.y0 * w + t.x0] = gi[off_in + t.y0 * w + t.x0] + a * (T::one() - t.fx);
                            gi[off_in + t.y0 * w + t.x1] = gi[off_in + t.y0 * w + t.x1] + a * t.fx;
                            gi[off_in + t.y1 * w + t.x0] = gi[off_in + t.y1 * w + t.x0] + bb * (T::one() - t.fx);
                            gi[off_in + t.y1 * w + t.x1] = gi[off_in + t.y1 * w + t.x1] + bb * t.fx;
                        }
                        if let Some(gc) = gc.as_mut() {
                            let p00 = img[off_in + t.y0 * w + t.x0];
                            let p01 = img[off_in + t.y0 * w + t.x1];
                            let p10 = img[off_in + t.y1 * w + t.x0];
                            let p11 = img[off_in + t.y1 * w + t.x1];
                            let base = b * 2 * plane_out + i;
                            if t.free_x {
                                let d = (p01 - p00) * (T::one() - t.fy) + (p11 - p10) * t.fy;
                                gc[base] = gc[base] + go * d;
                            }
                            if t.free_y {
                                let d = (p10 - p00) * (T::one() - t.fx) + (p11 - p01) * t.fx;
                                gc[base + plane_out] = gc[base + plane_out] + go * d;
                            }
                        }
                    }
                }
            }
            vec![gi, gc]
        },
    );
    let mask = Tensor::from_vec(&[n, 1, ho, wo], mask)?;
    Ok((sampled, mask))
}

/// Synthesises the target view from `source` given the target depth and the
/// target-to-source motion (`[N, 6]` pose vectors). Returns the warped image
/// and its validity mask.
pub fn synthesize_view<T: Real>(
    source: &Tensor<T>,
    depth: &DepthMap<T>,
    pose: &Tensor<T>,
    k: &CameraIntrinsics,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, _, h, w) = source.dims4()?;
    let (dn, _, dh, dw) = depth.values().dims4()?;
    if (dn, dh, dw) != (n, h, w) {
        return Err(Error::shape(format!(
            "synthesize_view: source {:?} and depth {:?} are not aligned",
            source.shape(),
            depth.values().shape()
        )));
    }
    let mats = se3_to_matrix(pose)?;
    let coords = proj(&reproj(depth, k)?, k, &mats)?;
    grid_sample(source, &coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(50.0, 48.0, 20.0, 10.0, 40, 24).unwrap()
    }

    #[test]
    fn tensor_inverse_matches_pose_inverse() {
        let p = PoseSE3::from_vector(&[0.1, -0.3, 0.2, 1.0, -2.0, 0.5]).unwrap();
        let inv = invert_pose(&PoseSE3::stack::<f64>(&[p]).unwrap()).unwrap().to_vec();
        for (a, b) in inv.iter().zip(p.inverse().to_vector()) {
            assert!((a - b).abs() < 1e-12, "{inv:?}");
        }
    }

    #[test]
    fn zero_pose_is_identity() {
        let m = PoseSE3::identity().matrix();
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
        let t = se3_to_matrix(&Tensor::<f64>::zeros(&[1, 6])).unwrap().to_vec();
        assert_eq!(t, vec![1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.]);
    }

    #[test]
    fn quarter_turn_about_z() {
        let pose = PoseSE3 {
            axis_angle: [0.0, 0.0, std::f64::consts::FRAC_PI_2],
            translation: [0.0; 3],
        };
        let p = pose.transform_point([1.0, 0.0, 0.0]);
        assert!((p[0]).abs() < 1e-9 && (p[1] - 1.0).abs() < 1e-9 && p[2].abs() < 1e-9);
    }

    #[test]
    fn taylor_branch_matches_closed_form_near_threshold() {
        let w = [SMALL_ANGLE * 0.999, 0.0, 0.0];
        let w2 = [SMALL_ANGLE * 1.001, 0.0, 0.0];
        let (a, b) = (rodrigues(w), rodrigues(w2));
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[i][j] - b[i][j]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn inverse_composes_to_identity() {
        let pose = PoseSE3 {
            axis_angle: [0.1, -0.3, 0.2],
            translation: [0.5, -1.0, 2.0],
        };
        let p = [0.3, 0.7, 4.0];
        let back = pose.inverse().transform_point(pose.transform_point(p));
        for i in 0..3 {
            assert!((back[i] - p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn principal_axis_point() {
        let k = k();
        let depth = vec![5.0; 24 * 40];
        let d = DepthMap::new(Tensor::<f64>::from_vec(&[1, 1, 24, 40], depth).unwrap()).unwrap();
        let pts = reproj(&d, &k).unwrap().to_vec();
        let i = 10 * 40 + 20;
        let plane = 24 * 40;
        assert_eq!((pts[i], pts[plane + i], pts[2 * plane + i]), (0.0, 0.0, 5.0));
    }

    #[test]
    fn hand_evaluated_back_projection() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4).unwrap();
        let d = DepthMap::new(Tensor::<f64>::full(&[1, 1, 4, 4], 4.0)).unwrap();
        let pts = reproj(&d, &k).unwrap().to_vec();
        let i = 3 * 4 + 2; // row 3, column 2
        assert_eq!((pts[i], pts[16 + i], pts[32 + i]), (8.0, 12.0, 4.0));

        let d2 = DepthMap::new(Tensor::<f64>::full(&[1, 1, 4, 4], 8.0)).unwrap();
        let pts2 = reproj(&d2, &k).unwrap().to_vec();
        assert!(pts.iter().zip(&pts2).all(|(a, b)| (2.0 * a - b).abs() < 1e-12));
    }

    #[test]
    fn point_on_axis_projects_to_principal_point() {
        let k = k();
        let p = Tensor::<f64>::from_vec(&[1, 3, 1, 1], vec![0.0, 0.0, 5.0]).unwrap();
        let c = project(&p, &k).unwrap().to_vec();
        assert_eq!(c, vec![20.0, 10.0]);
    }

    #[test]
    fn points_behind_the_camera_are_invalid() {
        let img = Tensor::<f64>::full(&[1, 1, 4, 4], 1.0);
        let p = Tensor::<f64>::from_vec(&[1, 3, 1, 1], vec![0.0, 0.0, -2.0]).unwrap();
        let k = CameraIntrinsics::new(1.0, 1.0, 1.0, 1.0, 4, 4).unwrap();
        let coords = project(&p, &k).unwrap();
        let (_, mask) = grid_sample(&img, &coords).unwrap();
        assert_eq!(mask.to_vec(), vec![0.0]);
    }

    #[test]
    fn identity_grid_reproduces_image() {
        let data: Vec<f64> = (0..2 * 3 * 5 * 7).map(|i| (i as f64 * 0.37).sin()).collect();
        let img = Tensor::from_vec(&[2, 3, 5, 7], data).unwrap();
        let (out, mask) = grid_sample(&img, &pixel_grid(2, 5, 7)).unwrap();
        assert_eq!(out.to_vec(), img.to_vec());
        assert!(mask.to_vec().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn constant_image_samples_constant() {
        let img = Tensor::<f64>::full(&[1, 2, 6, 6], 0.42);
        let coords: Vec<f64> = (0..2 * 9).map(|i| (i as f64 * 1.618).sin() * 8.0).collect();
        let coords = Tensor::from_vec(&[1, 2, 3, 3], coords).unwrap();
        let (out, _) = grid_sample(&img, &coords).unwrap();
        assert!(out.to_vec().iter().all(|v| (v - 0.42).abs() < 1e-15));
    }

    #[test]
    fn round_trip_with_identity_pose() {
        let k = k();
        let depth: Vec<f64> = (0..24 * 40).map(|i| 1.0 + (i % 17) as f64 * 0.73).collect();
        let d = DepthMap::new(Tensor::from_vec(&[1, 1, 24, 40], depth).unwrap()).unwrap();
        let mats = se3_to_matrix(&Tensor::<f64>::zeros(&[1, 6])).unwrap();
        let c = proj(&reproj(&d, &k).unwrap(), &k, &mats).unwrap().to_vec();
        let grid = pixel_grid::<f64>(1, 24, 40).to_vec();
        let err = c.iter().zip(&grid).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "max deviation {err}");
    }

    #[test]
    fn lateral_translation_shifts_by_focal_times_baseline_over_depth() {
        let k = k();
        let (depth, tx) = (4.0, 0.3);
        let d = DepthMap::new(Tensor::<f64>::full(&[1, 1, 24, 40], depth)).unwrap();
        let mats = se3_to_matrix(&PoseSE3::stack(&[PoseSE3::from_translation([tx, 0., 0.])]).unwrap()).unwrap();
        let c = proj(&reproj(&d, &k).unwrap(), &k, &mats).unwrap().to_vec();
        let grid = pixel_grid::<f64>(1, 24, 40).to_vec();
        let plane = 24 * 40;
        for i in 0..plane {
            assert!((c[i] - grid[i] - k.fx * tx / depth).abs() < 1e-9);
            assert!((c[plane + i] - grid[plane + i]).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_pose_warp_returns_source() {
        let k = k();
        let data: Vec<f64> = (0..3 * 24 * 40).map(|i| (i as f64 * 0.11).cos() * 0.5 + 0.5).collect();
        let src = Tensor::from_vec(&[1, 3, 24, 40], data).unwrap();
        let d = DepthMap::new(Tensor::<f64>::full(&[1, 1, 24, 40], 3.0)).unwrap();
        let (warped, mask) = synthesize_view(&src, &d, &Tensor::zeros(&[1, 6]), &k).unwrap();
        let err = warped.to_vec().iter().zip(src.to_vec()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
        assert!(mask.to_vec().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn huge_translation_invalidates_everything() {
        let k = k();
        let src = Tensor::<f64>::full(&[1, 3, 24, 40], 0.5);
        let d = DepthMap::new(Tensor::<f64>::full(&[1, 1, 24, 40], 2.0)).unwrap();
        let pose = PoseSE3::stack(&[PoseSE3::from_translation([100.0, 0., 0.])]).unwrap();
        let (_, mask) = synthesize_view(&src, &d, &pose, &k).unwrap();
        assert!(mask.to_vec().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        let k = k();
        let json = serde_json::to_string(&k).unwrap();
        for key in ["fx", "fy", "cx", "cy", "width", "height"] {
            assert!(json.contains(&format!("\"{key}\"")));
        }
    }
}
