//! Plain-text point clouds, sequence manifests and correspondence files.
//!
//! A point-cloud file holds one point per line as three whitespace-separated
//! decimals; `#` starts a comment. A manifest is a JSON document listing the
//! frame files of one sequence in order, plus optional correspondence and
//! geodesic-cache entries. Relative paths resolve against the manifest's
//! directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pcloud::{CloudError, Correspondence, Point3, PointCloud, SequenceWindow};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: invalid manifest: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Cloud {
        path: PathBuf,
        #[source]
        source: CloudError,
    },
}

impl FormatError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub fn parse_points(text: &str, path: &Path) -> Result<Vec<Point3>, FormatError> {
    let mut points = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(FormatError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|e| FormatError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("bad coordinate {f:?}: {e}"),
            })?;
        }
        points.push(p);
    }
    Ok(points)
}

pub fn read_cloud(path: &Path, frame_id: usize) -> Result<PointCloud, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    let points = parse_points(&text, path)?;
    PointCloud::new(points, frame_id).map_err(|source| FormatError::Cloud {
        path: path.to_path_buf(),
        source,
    })
}

/// Shortest round-trip decimal representation, so reading back is exact.
pub fn format_points(points: &[Point3]) -> String {
    let mut out = String::with_capacity(points.len() * 48);
    for p in points {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    out
}

pub fn write_points(path: &Path, points: &[Point3]) -> Result<(), FormatError> {
    write_atomic(path, format_points(points).as_bytes())
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| FormatError::io(path, e))
}

/// Correspondence file: one integer per line. Either `(T-1)·N` lines, one
/// block of `N` per consecutive frame pair, or exactly `N` lines applied to
/// every pair.
pub fn read_correspondences(path: &Path, n: usize, n_frames: usize) -> Result<Vec<Correspondence>, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    let mut values = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        values.push(line.parse::<usize>().map_err(|e| FormatError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: format!("bad index {line:?}: {e}"),
        })?);
    }
    let pairs = n_frames.saturating_sub(1);
    let blocks: Vec<Vec<usize>> = if values.len() == n * pairs {
        values.chunks(n.max(1)).map(<[usize]>::to_vec).collect()
    } else if values.len() == n {
        vec![values; pairs]
    } else {
        return Err(FormatError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("expected {} or {} indices, found {}", n * pairs, n, values.len()),
        });
    };
    blocks
        .into_iter()
        .map(|b| {
            Correspondence::new(b).map_err(|source| FormatError::Cloud {
                path: path.to_path_buf(),
                source,
            })
        })
        .collect()
}

pub fn write_correspondences(path: &Path, maps: &[Correspondence]) -> Result<(), FormatError> {
    let mut out = String::new();
    for m in maps {
        for i in m.as_slice() {
            out.push_str(&format!("{i}\n"));
        }
    }
    write_atomic(path, out.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub frames: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correspondences: Option<PathBuf>,
    /// Geodesic cache files, one per frame, added by preprocessing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geodesics: Option<Vec<PathBuf>>,
}

/// A manifest together with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct ManifestFile {
    pub path: PathBuf,
    pub manifest: Manifest,
}

impl ManifestFile {
    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
        let manifest = serde_json::from_str(&text).map_err(|source| FormatError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            manifest,
        })
    }

    pub fn save(&self) -> Result<(), FormatError> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.path, text.as_bytes())
    }

    pub fn base_dir(&self) -> PathBuf {
        self.path.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir().join(p)
        }
    }

    pub fn frame_paths(&self) -> Vec<PathBuf> {
        self.manifest.frames.iter().map(|p| self.resolve(p)).collect()
    }

    pub fn geodesic_paths(&self) -> Option<Vec<PathBuf>> {
        self.manifest
            .geodesics
            .as_ref()
            .map(|g| g.iter().map(|p| self.resolve(p)).collect())
    }

    /// Loads every frame plus correspondences when listed.
    pub fn load_sequence(&self) -> Result<SequenceWindow, FormatError> {
        let frames = self
            .frame_paths()
            .iter()
            .enumerate()
            .map(|(t, p)| read_cloud(p, t))
            .collect::<Result<Vec<_>, _>>()?;
        let n = frames.first().map_or(0, PointCloud::len);
        let t = frames.len();
        let correspondences = match &self.manifest.correspondences {
            Some(p) => Some(read_correspondences(&self.resolve(p), n, t)?),
            None => None,
        };
        SequenceWindow::new(frames, correspondences).map_err(|source| FormatError::Cloud {
            path: self.path.clone(),
            source,
        })
    }
}

/// Writes `sequence` as `frame_NNNN.xyz` files plus `manifest.json` into `dir`
/// and returns the manifest path.
pub fn write_sequence(dir: &Path, sequence: &SequenceWindow) -> Result<PathBuf, FormatError> {
    fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    let mut frames = Vec::with_capacity(sequence.len());
    for (t, frame) in sequence.frames().iter().enumerate() {
        let name = PathBuf::from(format!("frame_{t:04}.xyz"));
        write_points(&dir.join(&name), frame.points())?;
        frames.push(name);
    }
    let correspondences = match sequence.correspondences() {
        Some(maps) if !maps.is_empty() => {
            let name = PathBuf::from("correspondences.txt");
            write_correspondences(&dir.join(&name), maps)?;
            Some(name)
        }
        _ => None,
    };
    let file = ManifestFile {
        path: dir.join("manifest.json"),
        manifest: Manifest {
            frames,
            correspondences,
            geodesics: None,
        },
    };
    file.save()?;
    Ok(file.path)
}
