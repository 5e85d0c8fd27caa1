//! Checkpoints, triangle-soup PLY interchange, point clouds, images and
//! dataset manifests.

pub mod checkpoint;
pub mod image_io;
pub mod init;
pub mod manifest;
pub mod ply;

use std::path::{Path, PathBuf};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use image_io::{load_png, save_image, save_png, save_ppm};
pub use init::{init_from_pointcloud, InitConfig};
pub use manifest::{load_dataset, load_manifest, DatasetManifest};
pub use ply::{load_point_cloud, load_triangle_ply, save_triangle_ply, PlyImport, PointCloud};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}: no such file")]
    NotFound(PathBuf),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("{path}: {message}")]
    InFile { path: PathBuf, message: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("missing property {0}")]
    MissingProperty(String),
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("need at least {needed} points, found {found}")]
    TooFewPoints { found: usize, needed: usize },
}

impl IoError {
    /// Prefixes parse errors with the file they came from.
    pub fn at(self, path: &Path) -> IoError {
        match self {
            IoError::Malformed(m) => IoError::InFile {
                path: path.to_path_buf(),
                message: format!("malformed input: {m}"),
            },
            IoError::MissingProperty(p) => IoError::InFile {
                path: path.to_path_buf(),
                message: format!("missing property {p}"),
            },
            other => other,
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            IoError::NotFound(path.to_path_buf())
        } else {
            IoError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

/// Writes via a sibling temporary file and a rename, so readers never see a
/// partially written file.
pub(crate) fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let io_err = |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}
