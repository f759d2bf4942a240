//! Triplet datasets: in-memory batches, on-disk sequences and the synthetic
//! scene generator.

pub mod image_io;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::tensor::Tensor;
use image_io::{read_pgm16, read_ppm, write_pgm16, write_ppm, DEPTH_SCALE};

/// Three consecutive frames centred on `frames[1]`.
#[derive(Debug, Clone)]
pub struct Triplet {
    /// `[3, H, W]` images with values in `[0, 1]`, ordered -1, 0, +1.
    pub frames: [Tensor<f32>; 3],
    pub intrinsics: CameraIntrinsics,
    /// `[1, H, W]` depth of the centre frame; 0 marks missing values.
    pub gt_depth: Option<Tensor<f32>>,
    /// Motions from the centre frame to frames -1 and +1.
    pub gt_poses: Option<[PoseSE3; 2]>,
}

impl Triplet {
    pub fn size(&self) -> (usize, usize) {
        let s = self.frames[1].shape();
        (s[2], s[1])
    }
}

/// Frames of several triplets stacked along the batch axis.
#[derive(Debug, Clone)]
pub struct Batch {
    pub target: Tensor<f32>,
    /// Frames -1 and +1.
    pub sources: [Tensor<f32>; 2],
}

impl Batch {
    pub fn from_triplets(triplets: &[&Triplet]) -> Result<Self> {
        let first = triplets.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let shape = first.frames[1].shape().to_vec();
        let stack = |f: usize| -> Result<Tensor<f32>> {
            let mut data = Vec::with_capacity(triplets.len() * first.frames[f].numel());
            for t in triplets {
                if t.frames[f].shape() != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "frame shape {:?} differs from {:?}",
                        t.frames[f].shape(),
                        shape
                    )));
                }
                data.extend_from_slice(&t.frames[f].data());
            }
            let mut s = vec![triplets.len()];
            s.extend_from_slice(&shape);
            Tensor::from_vec(&s, data)
        };
        Ok(Self {
            target: stack(1)?,
            sources: [stack(0)?, stack(2)?],
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DepthScale {
    scale: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PosePair {
    prev: PoseSE3,
    next: PoseSE3,
}

fn frame_path(root: &Path, i: usize) -> PathBuf {
    root.join("frames").join(format!("{i:06}.ppm"))
}

fn depth_path(root: &Path, i: usize) -> PathBuf {
    root.join("depth").join(format!("{i:06}.pgm"))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::file(p, e))
}

/// Writes triplets as a numbered sequence; triplet `j` occupies frames
/// `3j .. 3j + 2` and is listed by its centre index in the given splits.
///
/// All triplets must share one camera.
pub fn save_dataset(root: &Path, triplets: &[Triplet], splits: &[(&str, std::ops::Range<usize>)]) -> Result<()> {
    let k = triplets
        .first()
        .map(|t| t.intrinsics)
        .ok_or_else(|| Error::invalid("no triplets to save"))?;
    if triplets.iter().any(|t| t.intrinsics != k) {
        return Err(Error::invalid("triplets use different intrinsics"));
    }
    for d in ["frames", "depth", "splits"] {
        create_dir(&root.join(d))?;
    }
    k.save(&root.join("intrinsics.json"))?;
    let scale_path = root.join("depth").join("scale.json");
    std::fs::write(&scale_path, serde_json::to_string_pretty(&DepthScale { scale: DEPTH_SCALE })?)
        .map_err(|e| Error::file(&scale_path, e))?;
    let mut poses = BTreeMap::new();
    for (j, t) in triplets.iter().enumerate() {
        for (f, img) in t.frames.iter().enumerate() {
            write_ppm(&frame_path(root, 3 * j + f), img)?;
        }
        let centre = 3 * j + 1;
        if let Some(d) = &t.gt_depth {
            let (w, h) = t.size();
            write_pgm16(&depth_path(root, centre), &d.data(), w, h, DEPTH_SCALE)?;
        }
        if let Some([prev, next]) = t.gt_poses {
            poses.insert(centre.to_string(), PosePair { prev, next });
        }
    }
    if !poses.is_empty() {
        let p = root.join("poses.json");
        std::fs::write(&p, serde_json::to_string_pretty(&poses)?).map_err(|e| Error::file(&p, e))?;
    }
    for (name, range) in splits {
        if range.end > triplets.len() {
            return Err(Error::invalid(format!("split {name} exceeds {} triplets", triplets.len())));
        }
        let text: String = range.clone().map(|j| format!("{}\n", 3 * j + 1)).collect();
        let p = root.join("splits").join(format!("{name}.txt"));
        std::fs::write(&p, text).map_err(|e| Error::file(&p, e))?;
    }
    Ok(())
}

/// Triplets of one split, with the centre indices that had to be skipped.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub triplets: Vec<Triplet>,
    pub indices: Vec<usize>,
    pub skipped: Vec<usize>,
}

pub fn read_split(root: &Path, split: &str) -> Result<Vec<usize>> {
    let p = root.join("splits").join(format!("{split}.txt"));
    let text = std::fs::read_to_string(&p).map_err(|e| Error::file(&p, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse().map_err(|_| Error::file(&p, format!("bad frame index {l:?}"))))
        .collect()
}

/// Loads the triplets centred on each index listed in `splits/<split>.txt`.
/// Indices whose neighbour frames are absent are skipped with a warning.
pub fn load_sequence(root: &Path, split: &str) -> Result<LoadedSplit> {
    let k = CameraIntrinsics::load(&root.join("intrinsics.json"))?;
    let scale_path = root.join("depth").join("scale.json");
    let scale = if scale_path.exists() {
        let text = std::fs::read_to_string(&scale_path).map_err(|e| Error::file(&scale_path, e))?;
        serde_json::from_str::<DepthScale>(&text)
            .map_err(|e| Error::file(&scale_path, e))?
            .scale
    } else {
        DEPTH_SCALE
    };
    let pose_path = root.join("poses.json");
    let poses: BTreeMap<String, PosePair> = if pose_path.exists() {
        let text = std::fs::read_to_string(&pose_path).map_err(|e| Error::file(&pose_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::file(&pose_path, e))?
    } else {
        BTreeMap::new()
    };
    let mut out = LoadedSplit {
        triplets: Vec::new(),
        indices: Vec::new(),
        skipped: Vec::new(),
    };
    for i in read_split(root, split)? {
        let neighbours_exist = i > 0 && (i - 1..=i + 1).all(|f| frame_path(root, f).exists());
        if !neighbours_exist {
            log::warn!("skipping frame {i} of split {split}: a neighbouring frame is missing");
            out.skipped.push(i);
            continue;
        }
        let frames = [i - 1, i, i + 1].map(|f| read_ppm(&frame_path(root, f)));
        let [a, b, c] = frames;
        let frames = [a?, b?, c?];
        for (f, img) in frames.iter().enumerate() {
            if img.shape()[1..] != [k.height, k.width] {
                return Err(Error::file(
                    frame_path(root, i + f - 1),
                    format!("frame is {:?}, intrinsics describe {}x{}", img.shape(), k.width, k.height),
                ));
            }
        }
        let dp = depth_path(root, i);
        let gt_depth = if dp.exists() {
            let (values, w, h) = read_pgm16(&dp, scale)?;
            if (w, h) != (k.width, k.height) {
                return Err(Error::file(&dp, format!("depth map is {w}x{h}")));
            }
            Some(Tensor::from_vec(&[1, h, w], values)?)
        } else {
            None
        };
        out.triplets.push(Triplet {
            frames,
            intrinsics: k,
            gt_depth,
            gt_poses: poses.get(&i.to_string()).map(|p| [p.prev, p.next]),
        });
        out.indices.push(i);
    }
    Ok(out)
}
