//! Plane-sweep volumes and disparity distributions as array archives.
//!
//! Volume: metadata `{"kind": "volume", "ref_id", "neighbor_ids", "grid",
//! "width", "height"}`, arrays `data` (f32, N×D×H×W×3) and `mask`
//! (u8 0/1, N×D×H×W). Distribution: metadata `{"kind": "distribution",
//! "grid", "width", "height"}`, array `probs` (f32, D×H×W).

use std::path::Path;

use serde_json::json;

use crate::archive::{Archive, NamedArray};
use crate::error::{Error, Result};
use crate::maps::DisparityDistribution;
use crate::sweep::{DisparityGrid, PlaneSweepVolume};

fn expect_kind(a: &Archive, kind: &str, path: &Path) -> Result<()> {
    match a.metadata.get("kind").and_then(|k| k.as_str()) {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::format(path, format!("expected a {kind} archive, found {other:?}"))),
    }
}

fn field<T: serde::de::DeserializeOwned>(a: &Archive, key: &str, path: &Path) -> Result<T> {
    let v = a.metadata.get(key).cloned().ok_or_else(|| Error::format(path, format!("metadata lacks {key}")))?;
    serde_json::from_value(v).map_err(|e| Error::format(path, format!("metadata {key}: {e}")))
}

pub fn volume_to_archive(v: &PlaneSweepVolume) -> Archive {
    let mut a = Archive::new(json!({
        "kind": "volume",
        "ref_id": v.ref_id,
        "neighbor_ids": v.neighbor_ids,
        "grid": v.grid,
        "width": v.width,
        "height": v.height,
    }));
    let (n, d) = (v.num_neighbors(), v.levels());
    a.insert("data", NamedArray::f32(&[n, d, v.height, v.width, 3], v.data.clone()));
    a.insert("mask", NamedArray::u8(&[n, d, v.height, v.width], v.mask.iter().map(|&m| m as u8).collect()));
    a
}

pub fn volume_from_archive(a: &Archive, path: &Path) -> Result<PlaneSweepVolume> {
    expect_kind(a, "volume", path)?;
    let ref_id: u32 = field(a, "ref_id", path)?;
    let neighbor_ids: Vec<u32> = field(a, "neighbor_ids", path)?;
    let grid: DisparityGrid = field(a, "grid", path)?;
    let width: usize = field(a, "width", path)?;
    let height: usize = field(a, "height", path)?;
    let want = [neighbor_ids.len(), grid.levels(), height, width];
    let (ds, data) = a.get_f32("data", path)?;
    let (ms, mask) = a.get_u8("mask", path)?;
    if ds != [want[0], want[1], want[2], want[3], 3] || ms != want {
        return Err(Error::format(path, format!("array shapes {ds:?} / {ms:?} disagree with metadata")));
    }
    Ok(PlaneSweepVolume {
        ref_id,
        neighbor_ids,
        grid,
        width,
        height,
        data: data.to_vec(),
        mask: mask.iter().map(|&m| m != 0).collect(),
    })
}

pub fn distribution_to_archive(d: &DisparityDistribution) -> Archive {
    let mut a = Archive::new(json!({"kind": "distribution", "grid": d.grid, "width": d.width, "height": d.height}));
    a.insert("probs", NamedArray::f32(&[d.levels(), d.height, d.width], d.probs.clone()));
    a
}

pub fn distribution_from_archive(a: &Archive, path: &Path) -> Result<DisparityDistribution> {
    expect_kind(a, "distribution", path)?;
    let grid: DisparityGrid = field(a, "grid", path)?;
    let width: usize = field(a, "width", path)?;
    let height: usize = field(a, "height", path)?;
    let (shape, probs) = a.get_f32("probs", path)?;
    if shape != [grid.levels(), height, width] {
        return Err(Error::format(path, format!("probs shape {shape:?} disagrees with metadata")));
    }
    DisparityDistribution::new(width, height, grid, probs.to_vec())
}
