//! Sequence manifests: a TOML file listing frames with calibration, pose,
//! image path and optional ground truth, plus an optional sparse point file.
//! See `docs/formats.md` for the grammar.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::pfm::{load_disparity, save_disparity};
use super::png::{load_image, save_image};
use super::scene::GeneratedScene;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, CameraView};
use crate::maps::DisparityMap;
use crate::sweep::SparsePoint;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub id: u32,
    pub image: PathBuf,
    /// `[fx, fy, cx, cy]` in pixels.
    pub intrinsics: [f64; 4],
    /// World-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_disparity: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparse_points: Option<PathBuf>,
    #[serde(rename = "frame", default)]
    pub frames: Vec<FrameRecord>,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::format(path, e.to_string().trim_end()))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("unsupported manifest version {}", m.version)));
        }
        let mut seen = BTreeSet::new();
        for f in &m.frames {
            if !seen.insert(f.id) {
                return Err(Error::Load { frame: f.id.to_string(), reason: "duplicate frame id".into() });
            }
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest fields always serialize")
    }
}

/// Frames of one sequence in manifest order.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub views: Vec<CameraView>,
    pub ground_truth: Vec<Option<DisparityMap>>,
    pub points: Option<Vec<SparsePoint>>,
}

impl Sequence {
    pub fn index_of(&self, id: u32) -> Result<usize> {
        self.views.iter().position(|v| v.id == id).ok_or_else(|| Error::Load {
            frame: id.to_string(),
            reason: "no such frame in the sequence".into(),
        })
    }

    pub fn view(&self, id: u32) -> Result<&CameraView> {
        Ok(&self.views[self.index_of(id)?])
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_frame(base: &Path, f: &FrameRecord) -> Result<(CameraView, Option<DisparityMap>)> {
    let fail = |reason: String| Error::Load { frame: f.id.to_string(), reason };
    let image_path = resolve(base, &f.image);
    if !image_path.is_file() {
        return Err(fail(format!("image {} does not exist", image_path.display())));
    }
    let image = load_image(&image_path).map_err(|e| fail(e.to_string()))?;
    let [fx, fy, cx, cy] = f.intrinsics;
    let k = CameraIntrinsics::new(fx, fy, cx, cy).map_err(|e| fail(e.to_string()))?;
    let rotation = Matrix3::from_row_slice(&f.rotation);
    let pose = CameraPose::new(rotation, Vector3::from(f.translation)).map_err(|e| fail(format!("bad pose: {e}")))?;
    let view = CameraView::new(f.id, image, k, pose).map_err(|e| fail(e.to_string()))?;
    let gt = match &f.gt_disparity {
        Some(p) => {
            let path = resolve(base, p);
            if !path.is_file() {
                return Err(fail(format!("ground truth {} does not exist", path.display())));
            }
            let map = load_disparity(&path).map_err(|e| fail(e.to_string()))?;
            if (map.width, map.height) != (view.width(), view.height()) {
                return Err(fail(format!(
                    "ground truth is {}x{}, image is {}x{}",
                    map.width,
                    map.height,
                    view.width(),
                    view.height()
                )));
            }
            Some(map)
        }
        None => None,
    };
    Ok((view, gt))
}

/// Reads a manifest and everything it references. Relative paths are
/// resolved against the manifest's directory.
pub fn load_sequence(path: &Path) -> Result<Sequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = Manifest::parse(&text, path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut views = Vec::with_capacity(manifest.frames.len());
    let mut ground_truth = Vec::with_capacity(manifest.frames.len());
    for f in &manifest.frames {
        let (v, g) = load_frame(base, f)?;
        views.push(v);
        ground_truth.push(g);
    }
    let points = match &manifest.sparse_points {
        Some(p) => {
            let p = resolve(base, p);
            let ids: BTreeSet<u32> = views.iter().map(|v| v.id).collect();
            Some(load_points(&p, &ids)?)
        }
        None => None,
    };
    Ok(Sequence { views, ground_truth, points })
}

/// Sparse points, one per line: `x y z id [id ...]`; `#` starts a comment.
pub fn parse_points(text: &str, path: &Path, frame_ids: &BTreeSet<u32>) -> Result<Vec<SparsePoint>> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(bad("expected x y z and at least one observer id"));
        }
        let mut xyz = [0.0; 3];
        for (k, v) in xyz.iter_mut().enumerate() {
            *v = fields[k].parse().map_err(|_| bad("bad coordinate"))?;
        }
        let mut ids = Vec::new();
        for s in &fields[3..] {
            let id: u32 = s.parse().map_err(|_| bad("bad observer id"))?;
            if !frame_ids.contains(&id) {
                return Err(bad(&format!("observer {id} is not a frame of the sequence")));
            }
            ids.push(id);
        }
        points.push(SparsePoint::new(Vector3::from(xyz), ids)?);
    }
    Ok(points)
}

pub fn load_points(path: &Path, frame_ids: &BTreeSet<u32>) -> Result<Vec<SparsePoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_points(&text, path, frame_ids)
}

pub fn format_points(points: &[SparsePoint]) -> String {
    let mut s = String::from("# x y z observer_ids...\n");
    for p in points {
        let _ = write!(s, "{} {} {}", p.position.x, p.position.y, p.position.z);
        for id in &p.observers {
            let _ = write!(s, " {id}");
        }
        s.push('\n');
    }
    s
}

/// Writes images (16-bit PNG), ground truth, points and `manifest.toml`
/// into `dir`; returns the manifest path.
pub fn save_sequence(
    dir: &Path,
    views: &[CameraView],
    ground_truth: &[Option<DisparityMap>],
    points: Option<&[SparsePoint]>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let image = PathBuf::from(format!("frame_{:04}.png", v.id));
        save_image(&dir.join(&image), &v.image)?;
        let gt_disparity = match ground_truth.get(i).and_then(Option::as_ref) {
            Some(g) => {
                let p = PathBuf::from(format!("frame_{:04}.pfm", v.id));
                save_disparity(&dir.join(&p), g)?;
                Some(p)
            }
            None => None,
        };
        let k = &v.intrinsics;
        let r = v.pose.rotation();
        let t = v.pose.translation();
        frames.push(FrameRecord {
            id: v.id,
            image,
            intrinsics: [k.fx, k.fy, k.cx, k.cy],
            rotation: std::array::from_fn(|j| r[(j / 3, j % 3)]),
            translation: [t.x, t.y, t.z],
            gt_disparity,
        });
    }
    let sparse_points = match points {
        Some(pts) => {
            let p = PathBuf::from("points.txt");
            fs::write(dir.join(&p), format_points(pts)).map_err(|e| Error::io(dir.join(&p), e))?;
            Some(p)
        }
        None => None,
    };
    let manifest = Manifest { version: MANIFEST_VERSION, sparse_points, frames };
    let path = dir.join("manifest.toml");
    fs::write(&path, manifest.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn save_generated(dir: &Path, scene: &GeneratedScene) -> Result<PathBuf> {
    let gt: Vec<Option<DisparityMap>> = scene.ground_truth.iter().cloned().map(Some).collect();
    save_sequence(dir, &scene.views, &gt, Some(&scene.points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_manifest() {
        let text = r#"
version = 1

[[frame]]
id = 3
image = "a.png"
intrinsics = [100.0, 100.0, 31.5, 23.5]
rotation = [1, 0, 0, 0, 1, 0, 0, 0, 1]
translation = [0.0, 0.0, 0.0]
"#;
        let m = Manifest::parse(text, Path::new("m.toml")).unwrap();
        assert_eq!(m.frames[0].id, 3);
        assert_eq!(m.frames[0].rotation[4], 1.0);
        assert!(m.sparse_points.is_none());
        let again = Manifest::parse(&m.to_toml(), Path::new("m.toml")).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn rejects_unknown_keys_and_duplicates() {
        let frame = "[[frame]]\nid = 1\nimage = \"a\"\nintrinsics = [1,1,0,0]\nrotation = [1,0,0,0,1,0,0,0,1]\ntranslation = [0,0,0]\n";
        let twice = format!("version = 1\n{frame}{frame}");
        assert!(matches!(Manifest::parse(&twice, Path::new("m")), Err(Error::Load { .. })));
        let unknown = format!("version = 1\nextra = 2\n{frame}");
        assert!(matches!(Manifest::parse(&unknown, Path::new("m")), Err(Error::Format { .. })));
    }

    #[test]
    fn point_lines() {
        let ids: BTreeSet<u32> = [0, 1, 2].into();
        let pts = parse_points("# c\n1 2 3.5 0 2\n\n-1e-3 0 4 1 # tail\n", Path::new("p"), &ids).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0].observers, [0, 2].into());
        assert!(parse_points("1 2 3\n", Path::new("p"), &ids).is_err());
        assert!(parse_points("1 2 3 9\n", Path::new("p"), &ids).is_err());
        let back = parse_points(&format_points(&pts), Path::new("p"), &ids).unwrap();
        assert_eq!(back, pts);
    }
}
