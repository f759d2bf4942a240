//! Procedural scenes with exact ground truth.
//!
//! Each triplet is ray-cast from three cameras spaced `motion` apart along
//! the x axis. Surface textures live in world coordinates, so a surface point
//! has the same colour in every frame. When `motion` is a whole multiple of
//! `baseline` and every fronto-parallel surface sits at `fx · baseline / k`
//! for an integer `k`, frame-to-frame displacements are whole pixels and
//! warping a neighbour with the true depth and pose reproduces the centre
//! frame exactly wherever the surface is visible in both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Triplet;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Far backdrop with nearer axis-aligned rectangles.
    FrontoPlanes,
    /// Ground plane receding to a far wall; displacements are fractional,
    /// so the closed loop holds only up to interpolation error.
    SlantedPlanes,
    /// Horizontal bands whose depth decreases from top to bottom.
    DepthRamp,
}

impl Layout {
    pub const ALL: [Layout; 3] = [Layout::FrontoPlanes, Layout::SlantedPlanes, Layout::DepthRamp];

    pub fn name(self) -> &'static str {
        match self {
            Layout::FrontoPlanes => "fronto_planes",
            Layout::SlantedPlanes => "slanted_planes",
            Layout::DepthRamp => "depth_ramp",
        }
    }

    /// Whether every displacement is a whole number of pixels.
    pub fn is_exact(self) -> bool {
        self != Layout::SlantedPlanes
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown layout {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureParams {
    pub octaves: usize,
    /// Apparent horizontal period of the finest octave on the farthest
    /// fronto-parallel surface, in pixels.
    pub finest_period_px: f64,
    /// Amplitude ratio of each octave to the next finer one.
    pub persistence: f64,
    /// Gain applied to the noise around mid-grey before clipping to `[0, 1]`.
    pub contrast: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            octaves: 4,
            finest_period_px: 2.5,
            persistence: 0.6,
            contrast: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub layout: Layout,
    pub texture: TextureParams,
    /// Surfaces with a one-pixel displacement lie at depth `fx · baseline`.
    pub baseline: f64,
    /// Camera displacement along x between consecutive frames.
    pub motion: f64,
    /// Largest displacement (in units of `motion / baseline` pixels) of any surface.
    pub max_shift: usize,
    /// Extinction depth of aerial-perspective haze, as a multiple of the
    /// farthest surface depth; 0 disables haze. Depth along the optical axis
    /// is unchanged by lateral camera motion, so haze keeps frames
    /// photometrically consistent while giving single frames a depth cue.
    pub haze: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            layout: Layout::DepthRamp,
            texture: TextureParams::default(),
            baseline: 0.5,
            motion: 0.5,
            max_shift: 3,
            haze: 1.0,
        }
    }
}

/// Intrinsics with focal lengths proportional to the image size and a
/// centred principal point.
pub fn default_intrinsics(width: usize, height: usize) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 0.58 * width as f64,
        fy: 1.92 * height as f64,
        cx: 0.5 * width as f64,
        cy: 0.5 * height as f64,
        width,
        height,
    }
}

impl SceneSpec {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.baseline > 0.0 && self.baseline.is_finite()) {
            return Err(Error::Config(format!("baseline must be positive, got {}", self.baseline)));
        }
        let t = &self.texture;
        let texture_ok = t.octaves > 0 && t.finest_period_px > 0.0 && t.persistence > 0.0 && t.contrast > 0.0;
        let haze_ok = self.haze.is_finite() && self.haze >= 0.0;
        if !self.motion.is_finite() || self.max_shift < 2 || !texture_ok || !haze_ok {
            return Err(Error::Config(format!("invalid scene parameters {self:?}")));
        }
        if width < 8 || height < 8 {
            return Err(Error::Config(format!("image {width}x{height} is too small")));
        }
        let widest = self.motion.abs() / self.baseline * self.max_shift as f64;
        if widest >= width as f64 {
            return Err(Error::InvalidArgument(format!(
                "camera motion displaces surfaces by {widest} px, leaving no overlap in a {width} px frame"
            )));
        }
        Ok(())
    }

    /// Camera positions of frames -1, 0 and +1 in the centre frame's coordinates.
    pub fn camera_path(&self) -> [PoseSE3; 3] {
        [-1.0, 0.0, 1.0].map(|t| PoseSE3::from_translation([t * self.motion, 0.0, 0.0]))
    }

    /// Motions from the centre frame to frames -1 and +1.
    pub fn gt_poses(&self) -> [PoseSE3; 2] {
        let [prev, _, next] = self.camera_path();
        [prev.inverse(), next.inverse()]
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Lattice value in `[0, 1)`.
fn lattice(key: u64, ix: i64, iy: i64) -> f64 {
    let h = mix(key ^ mix((ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ mix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(key: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (s(x - fx), s(y - fy));
    let a = lattice(key, ix, iy) * (1.0 - tx) + lattice(key, ix + 1, iy) * tx;
    let b = lattice(key, ix, iy + 1) * (1.0 - tx) + lattice(key, ix + 1, iy + 1) * tx;
    a * (1.0 - ty) + b * ty
}

#[derive(Debug, Clone)]
struct Texture {
    key: u64,
    contrast: f64,
    /// World units per texture unit. Shared by all surfaces, so apparent
    /// grain shrinks with distance and carries a monocular depth cue.
    texel: f64,
    finest: f64,
    octaves: usize,
    persistence: f64,
}

impl Texture {
    /// Multi-octave noise in `[0, 1]`.
    fn sample(&self, surface: u64, channel: u64, x: f64, y: f64) -> f64 {
        let key = mix(self.key ^ mix(surface * 4 + channel));
        let (mut sum, mut norm, mut amp) = (0.0, 0.0, 1.0);
        for o in 0..self.octaves {
            let period = self.finest * (1u64 << o) as f64;
            sum += amp * value_noise(mix(key + o as u64), x / period, y / period);
            norm += amp;
            amp *= self.persistence;
        }
        sum / norm
    }
}

#[derive(Debug, Clone)]
enum Shape {
    /// `z = depth`, bounded in world x and y (half-open).
    Fronto { depth: f64, x: (f64, f64), y: (f64, f64) },
    /// `y = height` (below the camera), up to depth `far`.
    Ground { height: f64, far: f64 },
}

#[derive(Debug, Clone)]
struct Surface {
    shape: Shape,
    tint: [f64; 3],
}

/// Colour that distant surfaces fade into.
const HAZE_COLOUR: [f64; 3] = [0.72, 0.76, 0.82];

struct Scene {
    surfaces: Vec<Surface>,
    texture: Texture,
    /// Extinction depth in scene units; `None` disables haze.
    haze: Option<f64>,
}

impl Scene {
    /// Depth and colour seen through pixel `(u, v)` of a camera at `cam_x`.
    fn trace(&self, k: &CameraIntrinsics, cam_x: f64, u: f64, v: f64) -> Option<(f64, [f64; 3])> {
        let (rx, ry) = ((u - k.cx) / k.fx, (v - k.cy) / k.fy);
        let mut best: Option<(f64, usize, f64, f64)> = None;
        for (i, s) in self.surfaces.iter().enumerate() {
            let hit = match s.shape {
                Shape::Fronto { depth, x, y } => {
                    let (wx, wy) = (cam_x + depth * rx, depth * ry);
                    (x.0 <= wx && wx < x.1 && y.0 <= wy && wy < y.1).then_some((depth, wx, wy))
                }
                Shape::Ground { height, far } => {
                    let z = if ry > 0.0 { height / ry } else { f64::INFINITY };
                    (z <= far).then(|| (z, cam_x + z * rx, z))
                }
            };
            if let Some((z, a, b)) = hit {
                if best.map_or(true, |(bz, ..)| z < bz) {
                    best = Some((z, i, a, b));
                }
            }
        }
        best.map(|(z, i, a, b)| {
            let s = &self.surfaces[i];
            let rgb = std::array::from_fn(|c| {
                let n = self.texture.sample(i as u64, c as u64, a / self.texture.texel, b / self.texture.texel);
                let n = (0.5 + self.texture.contrast * (n - 0.5)).clamp(0.0, 1.0);
                let albedo = 0.08 + 0.84 * (0.35 * s.tint[c] + 0.65 * n);
                match self.haze {
                    Some(d) => {
                        let keep = (-z / d).exp();
                        keep * albedo + (1.0 - keep) * HAZE_COLOUR[c]
                    }
                    None => albedo,
                }
            });
            (z, rgb)
        })
    }

    fn render(&self, k: &CameraIntrinsics, cam_x: f64) -> Result<(Tensor<f32>, Vec<f32>)> {
        let (w, h) = (k.width, k.height);
        let mut img = vec![0.0f32; 3 * w * h];
        let mut depth = vec![0.0f32; w * h];
        for v in 0..h {
            for u in 0..w {
                let (z, rgb) = self
                    .trace(k, cam_x, u as f64, v as f64)
                    .ok_or_else(|| Error::InvalidArgument(format!("ray through pixel ({u}, {v}) hits nothing")))?;
                let i = v * w + u;
                depth[i] = z as f32;
                for c in 0..3 {
                    img[c * w * h + i] = rgb[c] as f32;
                }
            }
        }
        Ok((Tensor::from_vec(&[3, h, w], img)?, depth))
    }
}

fn tint(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.gen_range(0.0..1.0))
}

fn build_scene(spec: &SceneSpec, k: &CameraIntrinsics, rng: &mut ChaCha8Rng) -> Scene {
    let unit = k.fx * spec.baseline;
    let depth_of = |shift: usize| unit / shift as f64;
    let (w, h) = (k.width as f64, k.height as f64);
    // World extent of a frame-0 pixel interval at depth d.
    let wx = |d: f64, u: f64| d * (u - 0.5 - k.cx) / k.fx;
    let wy = |d: f64, v: f64| d * (v - 0.5 - k.cy) / k.fy;
    let inf = (f64::NEG_INFINITY, f64::INFINITY);
    let mut surfaces = Vec::new();
    match spec.layout {
        Layout::FrontoPlanes => {
            surfaces.push(Surface {
                shape: Shape::Fronto { depth: unit, x: inf, y: inf },
                tint: tint(rng),
            });
            for _ in 0..rng.gen_range(2..=4) {
                let d = depth_of(rng.gen_range(2..=spec.max_shift));
                let (bw, bh) = (rng.gen_range(0.15..0.4) * w, rng.gen_range(0.25..0.6) * h);
                let u0 = rng.gen_range(0.0..w - bw).round();
                let v0 = rng.gen_range(0.0..h - bh).round();
                surfaces.push(Surface {
                    shape: Shape::Fronto {
                        depth: d,
                        x: (wx(d, u0), wx(d, u0 + bw.round())),
                        y: (wy(d, v0), wy(d, v0 + bh.round())),
                    },
                    tint: tint(rng),
                });
            }
        }
        Layout::DepthRamp => {
            let bands = rng.gen_range(3..=spec.max_shift.min(5));
            let mut shifts: Vec<usize> = Vec::new();
            let mut pool: Vec<usize> = (2..=spec.max_shift).collect();
            while shifts.len() + 1 < bands {
                shifts.push(pool.swap_remove(rng.gen_range(0..pool.len())));
            }
            shifts.push(1);
            shifts.sort_unstable();
            let min_rows = (k.height / (2 * bands)).max(2);
            let mut cuts: Vec<usize> = Vec::new();
            while cuts.len() + 1 < bands {
                let c = rng.gen_range(min_rows..k.height - min_rows);
                if cuts.iter().all(|&o| o.abs_diff(c) >= min_rows) {
                    cuts.push(c);
                }
            }
            cuts.sort_unstable();
            let mut edges = vec![f64::NEG_INFINITY];
            edges.extend(cuts.iter().map(|&c| c as f64));
            edges.push(f64::INFINITY);
            for (b, &shift) in shifts.iter().enumerate() {
                let d = depth_of(shift);
                let y = (
                    if b == 0 { f64::NEG_INFINITY } else { wy(d, edges[b]) },
                    if b + 1 == bands { f64::INFINITY } else { wy(d, edges[b + 1]) },
                );
                surfaces.push(Surface {
                    shape: Shape::Fronto { depth: d, x: inf, y },
                    tint: tint(rng),
                });
            }
        }
        Layout::SlantedPlanes => {
            let far = unit * rng.gen_range(0.6..1.0);
            let nearest = depth_of(spec.max_shift);
            let height = nearest * (h - 1.0 - k.cy) / k.fy;
            surfaces.push(Surface {
                shape: Shape::Fronto { depth: far, x: inf, y: inf },
                tint: tint(rng),
            });
            surfaces.push(Surface {
                shape: Shape::Ground { height, far },
                tint: tint(rng),
            });
        }
    }
    let texture = Texture {
        key: rng.gen(),
        texel: unit / k.fx,
        contrast: spec.texture.contrast,
        finest: spec.texture.finest_period_px,
        octaves: spec.texture.octaves,
        persistence: spec.texture.persistence,
    };
    let haze = (spec.haze > 0.0).then_some(spec.haze * unit);
    Scene { surfaces, texture, haze }
}

/// Renders triplet `index` of the sequence defined by `spec`.
pub fn generate_triplet(spec: &SceneSpec, k: &CameraIntrinsics, index: u64) -> Result<Triplet> {
    spec.validate(k.width, k.height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let scene = build_scene(spec, k, &mut rng);
    let path = spec.camera_path();
    let mut frames = Vec::with_capacity(3);
    let mut centre_depth = Vec::new();
    for (t, cam) in path.iter().enumerate() {
        let (img, depth) = scene.render(k, cam.translation[0])?;
        if t == 1 {
            centre_depth = depth;
        }
        frames.push(img);
    }
    let frames: [Tensor<f32>; 3] = frames.try_into().expect("three frames");
    Ok(Triplet {
        frames,
        intrinsics: *k,
        gt_depth: Some(Tensor::from_vec(&[1, k.height, k.width], centre_depth)?),
        gt_poses: Some(spec.gt_poses()),
    })
}

pub fn generate_scene(spec: &SceneSpec, width: usize, height: usize, n_triplets: usize) -> Result<Vec<Triplet>> {
    let k = default_intrinsics(width, height);
    (0..n_triplets as u64).map(|j| generate_triplet(spec, &k, j)).collect()
}
