//! JSON dataset manifest: posed views plus an optional seed point cloud.
//!
//! ```json
//! {
//!   "frames": [
//!     { "image": "images/000.png",
//!       "pose": [[1,0,0,0],[0,1,0,0],[0,0,1,4]],
//!       "intrinsics": {"fx": 300, "fy": 300, "cx": 128, "cy": 128},
//!       "width": 256, "height": 256 }
//!   ],
//!   "point_cloud": "points.ply",
//!   "train": [0], "test": []
//! }
//! ```
//!
//! `pose` is the 3x4 world-to-camera matrix `[R | t]` (+z forward, +y down).
//! Paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::tracer::{Camera, Intrinsics};
use crate::training::{Dataset, View};

use super::{image_io::load_png, read_file, IoError};

pub const ROTATION_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFrame {
    pub image: PathBuf,
    pub pose: [[f64; 4]; 3],
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

impl ManifestFrame {
    pub fn camera(&self) -> Camera {
        let p = &self.pose;
        let rotation = Matrix3::from_fn(|r, c| p[r][c]);
        let translation = Vec3::new(p[0][3], p[1][3], p[2][3]);
        Camera::new(
            rotation,
            translation,
            self.intrinsics,
            self.width,
            self.height,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub frames: Vec<ManifestFrame>,
    #[serde(default)]
    pub point_cloud: Option<PathBuf>,
    /// Defaults to every frame not listed in `test`.
    #[serde(default)]
    pub train: Option<Vec<usize>>,
    #[serde(default)]
    pub test: Vec<usize>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn train_indices(&self) -> Vec<usize> {
        match &self.train {
            Some(t) => t.clone(),
            None => (0..self.frames.len())
                .filter(|i| !self.test.contains(i))
                .collect(),
        }
    }

    pub fn point_cloud_path(&self) -> Option<PathBuf> {
        self.point_cloud.as_ref().map(|p| self.resolve(p))
    }

    /// Checks poses, intrinsics, split indices and that every referenced
    /// file exists.
    pub fn validate(&self) -> Result<(), IoError> {
        let invalid = |m: String| Err(IoError::InvalidManifest(m));
        if self.frames.is_empty() {
            return invalid("no frames".into());
        }
        for (i, f) in self.frames.iter().enumerate() {
            let cam = f.camera();
            let r = cam.rotation;
            let err = (r.transpose() * r - Matrix3::identity()).abs().max();
            if !(err <= ROTATION_TOLERANCE) || !(r.determinant() > 0.0) {
                return invalid(format!(
                    "frame {i}: pose rotation is not a proper rotation (|R^T R - I| = {err:.2e})"
                ));
            }
            if !cam.translation.iter().all(|v| v.is_finite()) {
                return invalid(format!("frame {i}: translation is not finite"));
            }
            let k = &f.intrinsics;
            if ![k.fx, k.fy, k.cx, k.cy].iter().all(|v| v.is_finite()) || !cam.is_valid() {
                return invalid(format!("frame {i}: intrinsics or size invalid"));
            }
            let path = self.resolve(&f.image);
            if !path.is_file() {
                return Err(IoError::NotFound(path));
            }
        }
        for (split, idx) in [("train", self.train_indices()), ("test", self.test.clone())] {
            if let Some(bad) = idx.iter().find(|&&i| i >= self.frames.len()) {
                return invalid(format!(
                    "{split} index {bad} out of range ({} frames)",
                    self.frames.len()
                ));
            }
        }
        if let Some(p) = self.point_cloud_path() {
            if !p.is_file() {
                return Err(IoError::NotFound(p));
            }
        }
        Ok(())
    }
}

pub fn parse_manifest(text: &[u8], root: &Path) -> Result<DatasetManifest, IoError> {
    let mut m: DatasetManifest =
        serde_json::from_slice(text).map_err(|e| IoError::InvalidManifest(e.to_string()))?;
    m.root = root.to_path_buf();
    Ok(m)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, IoError> {
    let root = path.parent().unwrap_or(Path::new("."));
    let m = parse_manifest(&read_file(path)?, root)?;
    m.validate()?;
    Ok(m)
}

/// Loads every image of the manifest (in parallel) into train/test views.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Dataset, IoError> {
    let load = |indices: Vec<usize>| -> Result<Vec<View>, IoError> {
        indices
            .par_iter()
            .map(|&i| {
                let f = &manifest.frames[i];
                let path = manifest.resolve(&f.image);
                let image = load_png(&path)?;
                if image.width != f.width || image.height != f.height {
                    return Err(IoError::InvalidManifest(format!(
                        "{}: image is {}x{} but frame {i} says {}x{}",
                        path.display(),
                        image.width,
                        image.height,
                        f.width,
                        f.height
                    )));
                }
                Ok(View {
                    name: f.image.display().to_string(),
                    camera: f.camera(),
                    image,
                })
            })
            .collect()
    };
    Ok(Dataset {
        train: load(manifest.train_indices())?,
        test: load(manifest.test.clone())?,
    })
}
