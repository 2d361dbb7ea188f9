//! Scalar volumes on an axis-aligned grid, world-coordinate trilinear
//! sampling and the JSON + raw float32 on-disk format.
//!
//! World and index coordinates are related by
//! `index = (p - origin) / spacing` per axis; there is no direction matrix.
//! The sampling domain is the box spanned by the first and last voxel
//! centers. Anything outside it samples as `0.0`.

use crate::error::{Error, Result};
use crate::geometry::PointMm;
use crate::rawio;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const INDEX_SNAP: f64 = 1e-9;

/// A 3D intensity grid stored x-fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    voxels: Vec<f64>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], voxels: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::InvalidVolume(format!("dims {dims:?} must all be >= 2")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidVolume(format!("spacing {spacing:?} must be positive")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidVolume(format!("origin {origin:?} not finite")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::InvalidVolume(format!("{} voxels for dims {dims:?} (expected {n})", voxels.len())));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite intensity".into()));
        }
        Ok(Self { dims, spacing, origin, voxels })
    }

    /// A volume whose voxel at index `(i, j, k)` holds `f(world position)`.
    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], f: impl Fn(PointMm) -> f64) -> Result<Self> {
        let mut voxels = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    voxels.push(f(PointMm::new(
                        origin[0] + i as f64 * spacing[0],
                        origin[1] + j as f64 * spacing[1],
                        origin[2] + k as f64 * spacing[2],
                    )));
                }
            }
        }
        Self::new(dims, spacing, origin, voxels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.voxels[self.index(i, j, k)]
    }

    /// World position of a voxel center.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> PointMm {
        PointMm::new(
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        )
    }

    /// World coordinates of the last voxel center.
    pub fn extent_max(&self) -> PointMm {
        self.voxel_center(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1)
    }

    /// Continuous index coordinates of a world point.
    pub fn to_index(&self, p: PointMm) -> [f64; 3] {
        [
            (p.x - self.origin[0]) / self.spacing[0],
            (p.y - self.origin[1]) / self.spacing[1],
            (p.z - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Trilinear interpolation at a world point.
    ///
    /// Points outside the sampling domain return exactly `0.0`.
    pub fn sample_trilinear(&self, p: PointMm) -> Result<f64> {
        if !p.is_finite() {
            return Err(Error::InvalidCoordinate(p.x, p.y, p.z));
        }
        Ok(self.sample_index(self.to_index(p)))
    }

    /// Trilinear interpolation at continuous index coordinates. Callers must
    /// pass finite coordinates.
    pub(crate) fn sample_index(&self, idx: [f64; 3]) -> f64 {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            // snap round-off from the world->index division onto voxel centers
            let r = idx[a].round();
            let x = if (idx[a] - r).abs() < INDEX_SNAP { r } else { idx[a] };
            let hi = (self.dims[a] - 1) as f64;
            if !(0.0..=hi).contains(&x) {
                return 0.0;
            }
            // the last cell owns its upper face
            let b = (x.floor() as usize).min(self.dims[a] - 2);
            base[a] = b;
            frac[a] = x - b as f64;
        }
        let [i, j, k] = base;
        let [fx, fy, fz] = frac;
        let sx = 1;
        let sy = self.dims[0];
        let sz = self.dims[0] * self.dims[1];
        let o = self.index(i, j, k);
        let v = &self.voxels;
        let c00 = v[o] * (1.0 - fx) + v[o + sx] * fx;
        let c10 = v[o + sy] * (1.0 - fx) + v[o + sy + sx] * fx;
        let c01 = v[o + sz] * (1.0 - fx) + v[o + sz + sx] * fx;
        let c11 = v[o + sz + sy] * (1.0 - fx) + v[o + sz + sy + sx] * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }
}

/// JSON sidecar describing a raw volume file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeManifest {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    /// Raw voxel file, relative to the manifest's directory.
    pub raw: String,
}

/// Loads a volume from its JSON manifest and the raw float32 file it names.
pub fn load_volume(manifest_path: &Path) -> Result<Volume3D> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::BadManifest(format!("{}: {e}", manifest_path.display())))?;
    let m: VolumeManifest =
        serde_json::from_str(&text).map_err(|e| Error::BadManifest(format!("{}: {e}", manifest_path.display())))?;
    let raw_path = rawio::sibling(manifest_path, &m.raw);
    let expected = m.dims.iter().product::<usize>();
    let voxels = rawio::read_f32_le(&raw_path)?.filter(|v| v.len() == expected).ok_or_else(|| {
        Error::CorruptVolume(format!("{} does not hold {expected} float32 values", raw_path.display()))
    })?;
    Volume3D::new(m.dims, m.spacing_mm, m.origin_mm, voxels.into_iter().map(f64::from).collect())
        .map_err(|e| Error::CorruptVolume(e.to_string()))
}

/// Writes `<stem>.json` and the raw file `<stem>.raw` next to it.
///
/// Voxels are narrowed to float32; volumes whose intensities are already
/// float32-representable round-trip bit-exactly.
pub fn store_volume(vol: &Volume3D, manifest_path: &Path) -> Result<()> {
    let raw_name = raw_name_for(manifest_path);
    let raw_path = rawio::sibling(manifest_path, &raw_name);
    rawio::write_f32_le(&raw_path, vol.voxels.iter().map(|&v| v as f32))?;
    let m = VolumeManifest { dims: vol.dims, spacing_mm: vol.spacing, origin_mm: vol.origin, raw: raw_name };
    fs::write(manifest_path, serde_json::to_string_pretty(&m).expect("manifest serializes"))?;
    Ok(())
}

fn raw_name_for(manifest_path: &Path) -> String {
    let stem = manifest_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "volume".into());
    format!("{stem}.raw")
}
