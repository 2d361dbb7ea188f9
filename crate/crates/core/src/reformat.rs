//! Multi-planar reformatting along a centerline.
//!
//! Slice `ℓ` of an MPR stack is the plane through centerline point
//! `start + ℓ` spanned by that point's normal and binormal. Pixel `(i, j)`
//! of an `H × W` slice sits at in-plane offset `((i − H/2)·s, (j − W/2)·s)`,
//! so pixel `(H/2, W/2)` lies exactly on the centerline.
//!
//! Frames are rotation-minimizing (discrete parallel transport), which keeps the
//! slices from twisting about the vessel axis on straight and curved
//! segments alike.

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::phantom::{Centerline, LesionRecord};
use crate::rawio;
use crate::volume::Volume3D;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Default number of rotated views (20° steps).
pub const DEFAULT_VIEWS: usize = 18;

/// Orthonormal frame per centerline point.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub tangents: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub binormals: Vec<Vec3>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.tangents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tangents.is_empty()
    }

    /// Frames spun about their tangents by `angle` radians:
    /// `n' = cos·n + sin·b`, `b' = −sin·n + cos·b`.
    pub fn rotated(&self, angle: f64) -> FrameSequence {
        let (s, c) = angle.sin_cos();
        let normals = self.normals.iter().zip(&self.binormals).map(|(&n, &b)| n * c + b * s).collect();
        let binormals = self.normals.iter().zip(&self.binormals).map(|(&n, &b)| b * c - n * s).collect();
        FrameSequence { tangents: self.tangents.clone(), normals, binormals }
    }
}

fn tangents(cl: &Centerline) -> Result<Vec<Vec3>> {
    let p = &cl.points;
    let n = p.len();
    if n < 2 {
        return Err(Error::DegenerateCenterline(format!("{n} point(s)")));
    }
    (0..n)
        .map(|i| {
            let (a, b) = match i {
                0 => (p[0], p[1]),
                i if i == n - 1 => (p[n - 2], p[n - 1]),
                i => (p[i - 1], p[i + 1]),
            };
            let d = b - a;
            let len = d.norm();
            if !(len > 1e-12) {
                return Err(Error::DegenerateCenterline(format!("zero-length segment at point {i}")));
            }
            Ok(d * (1.0 / len))
        })
        .collect()
}

/// Rotation-minimizing frames: each normal is carried to the next point by
/// the smallest rotation between consecutive tangents.
///
/// The first binormal is the world axis most orthogonal to the first
/// tangent (ties: x, then y, then z), projected off the tangent; the normal
/// completes a right-handed `(t, n, b)`. For a planar curve that starts
/// in a coordinate plane this makes the binormal the plane normal.
pub fn build_frames(cl: &Centerline) -> Result<FrameSequence> {
    for (i, w) in cl.points.windows(2).enumerate() {
        if !((w[1] - w[0]).norm() > 1e-12) {
            return Err(Error::DegenerateCenterline(format!("zero-length segment {i}")));
        }
    }
    let t = tangents(cl)?;
    let t0 = t[0];
    let axis =
        [Vec3::X, Vec3::Y, Vec3::Z].into_iter().min_by(|a, b| a.dot(t0).abs().total_cmp(&b.dot(t0).abs())).unwrap();
    let b0 = (axis - t0 * axis.dot(t0)).normalized();
    let mut normals = Vec::with_capacity(t.len());
    normals.push(b0.cross(t0).normalized());
    for i in 0..t.len() - 1 {
        let (r, a, c) = (normals[i], t[i], t[i + 1]);
        let axis = a.cross(c);
        let sin = axis.norm();
        let cos = a.dot(c);
        let r_next = if sin < 1e-12 && cos > 0.0 {
            r
        } else {
            // smallest rotation taking t[i] onto t[i + 1]
            let k = if sin < 1e-12 { r.cross(a).normalized() } else { axis * (1.0 / sin) };
            let rot = r * cos + k.cross(r) * sin + k * (k.dot(r) * (1.0 - cos));
            // clean up round-off so each frame stays orthonormal to 1e-9
            (rot - c * rot.dot(c)).normalized()
        };
        normals.push(r_next);
    }
    let binormals = t.iter().zip(&normals).map(|(&t, &n)| t.cross(n).normalized()).collect();
    Ok(FrameSequence { tangents: t, normals, binormals })
}

/// Identity and augmentation state of a stack.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StackMeta {
    pub lesion_id: String,
    pub view_k: usize,
    pub masked: bool,
}

/// `L × H × W` reformatted image stack, slice-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MprStack {
    pub dims: [usize; 3],
    pub in_plane_spacing_mm: f64,
    pub step_mm: f64,
    pub pixels: Vec<f64>,
    pub meta: StackMeta,
}

impl MprStack {
    pub fn new(dims: [usize; 3], in_plane_spacing_mm: f64, step_mm: f64, pixels: Vec<f64>) -> Result<Self> {
        let [l, h, w] = dims;
        if l == 0 || h == 0 || w == 0 || pixels.len() != l * h * w {
            return Err(Error::InvalidStack(format!("{} pixels for dims {dims:?}", pixels.len())));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidStack("non-finite pixel".into()));
        }
        Ok(Self { dims, in_plane_spacing_mm, step_mm, pixels, meta: StackMeta::default() })
    }

    pub fn len(&self) -> usize {
        self.dims[0]
    }

    pub fn is_empty(&self) -> bool {
        self.dims[0] == 0
    }

    pub fn slice(&self, l: usize) -> &[f64] {
        let n = self.dims[1] * self.dims[2];
        &self.pixels[l * n..(l + 1) * n]
    }

    #[inline]
    pub fn at(&self, l: usize, i: usize, j: usize) -> f64 {
        self.pixels[(l * self.dims[1] + i) * self.dims[2] + j]
    }

    /// `max − min` over all pixels.
    pub fn dynamic_range(&self) -> f64 {
        let (lo, hi) =
            self.pixels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        hi - lo
    }
}

/// Samples the MPR stack of a lesion: `L = end − start + 1` square slices
/// of `size × size` pixels at `in_plane_spacing_mm`.
pub fn extract_mpr(
    vol: &Volume3D,
    cl: &Centerline,
    frames: &FrameSequence,
    lesion: &LesionRecord,
    size: usize,
    in_plane_spacing_mm: f64,
) -> Result<MprStack> {
    let n = cl.len();
    if lesion.start_idx >= lesion.end_idx || lesion.end_idx >= n || frames.len() != n {
        return Err(Error::LesionOutOfRange { start: lesion.start_idx, end: lesion.end_idx, len: n });
    }
    if size == 0 || !size.is_multiple_of(2) || !(in_plane_spacing_mm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "slice size {size} must be even and spacing {in_plane_spacing_mm} positive"
        )));
    }
    let l = lesion.end_idx - lesion.start_idx + 1;
    let c = (size / 2) as f64;
    let s = in_plane_spacing_mm;
    let mut pixels = Vec::with_capacity(l * size * size);
    for idx in lesion.start_idx..=lesion.end_idx {
        let p = cl.points[idx];
        let (nrm, bin) = (frames.normals[idx], frames.binormals[idx]);
        for i in 0..size {
            let du = (i as f64 - c) * s;
            for j in 0..size {
                let dv = (j as f64 - c) * s;
                pixels.push(vol.sample_trilinear(p + nrm * du + bin * dv)?);
            }
        }
    }
    let mut stack = MprStack::new([l, size, size], s, cl.step_mm, pixels)?;
    stack.meta.lesion_id = lesion.lesion_id.clone();
    Ok(stack)
}

fn require_square(stack: &MprStack) -> Result<()> {
    let [_, h, w] = stack.dims;
    if h != w {
        return Err(Error::InvalidStack(format!("slices must be square, got {h}×{w}")));
    }
    Ok(())
}

/// Zeroes everything outside the inscribed cylinder: pixels whose in-plane
/// distance from the slice center is `≥ H/2` pixels.
///
/// The kept disk is symmetric under 90° rotations of the pixel grid, so
/// quarter and half turns never rotate kept pixels off the grid.
pub fn cylinder_mask(stack: &MprStack) -> Result<MprStack> {
    require_square(stack)?;
    let [l, h, w] = stack.dims;
    let c = (h / 2) as f64;
    let radius = (h / 2) as f64;
    let keep: Vec<bool> = (0..h * w)
        .map(|p| {
            let (i, j) = ((p / w) as f64 - c, (p % w) as f64 - c);
            (i * i + j * j).sqrt() < radius
        })
        .collect();
    let mut out = stack.clone();
    for sl in 0..l {
        for (v, &k) in out.pixels[sl * h * w..(sl + 1) * h * w].iter_mut().zip(&keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
    out.meta.masked = true;
    Ok(out)
}

fn bilinear(slice: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    let (y, x) = (snap(y), snap(x));
    if !(0.0..=(h - 1) as f64).contains(&y) || !(0.0..=(w - 1) as f64).contains(&x) {
        return 0.0;
    }
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| if yy < h && xx < w { slice[yy * w + xx] } else { 0.0 };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Rotates every slice about its center pixel by `angle` radians with
/// bilinear interpolation and zero fill: output offset `(u, v)` reads the
/// input at `(u cos − v sin, u sin + v cos)`. This matches extracting with
/// frames from [`FrameSequence::rotated`] by the same angle.
pub fn rotate_slices(stack: &MprStack, angle: f64) -> Result<MprStack> {
    require_square(stack)?;
    let [l, h, w] = stack.dims;
    let c = (h / 2) as f64;
    let (sn, cs) = angle.sin_cos();
    let mut out = stack.clone();
    for sl in 0..l {
        let src = stack.slice(sl);
        let dst = &mut out.pixels[sl * h * w..(sl + 1) * h * w];
        for i in 0..h {
            let u = i as f64 - c;
            for j in 0..w {
                let v = j as f64 - c;
                let (ru, rv) = (u * cs - v * sn, u * sn + v * cs);
                dst[i * w + j] = bilinear(src, h, w, ru + c, rv + c);
            }
        }
    }
    Ok(out)
}

/// View `k` of `n_views` evenly spaced rotations (`k · 360°/n_views`) of a
/// cylinder-masked stack. View 0 is returned unchanged.
pub fn rotate_view_of(stack: &MprStack, k: usize, n_views: usize) -> Result<MprStack> {
    if n_views == 0 || k >= n_views {
        return Err(Error::InvalidViewIndex(k));
    }
    if !stack.meta.masked {
        return Err(Error::InvalidStack("rotate_view needs a cylinder-masked stack".into()));
    }
    let mut out =
        if k == 0 { stack.clone() } else { rotate_slices(stack, std::f64::consts::TAU * k as f64 / n_views as f64)? };
    out.meta.view_k = k;
    Ok(out)
}

/// View `k` (0..=17) in 20° steps.
pub fn rotate_view(stack: &MprStack, k: usize) -> Result<MprStack> {
    rotate_view_of(stack, k, DEFAULT_VIEWS)
}

#[derive(Debug, Serialize, Deserialize)]
struct StackSidecar {
    dims: [usize; 3],
    in_plane_spacing_mm: f64,
    step_mm: f64,
    lesion_id: String,
    view_k: usize,
    raw: String,
}

/// Writes `<stem>.json` + `<stem>.f32`.
pub fn save_stack(stack: &MprStack, json_path: &Path) -> Result<()> {
    let stem = json_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let raw = format!("{stem}.f32");
    rawio::write_f32_le(&rawio::sibling(json_path, &raw), stack.pixels.iter().map(|&v| v as f32))?;
    let side = StackSidecar {
        dims: stack.dims,
        in_plane_spacing_mm: stack.in_plane_spacing_mm,
        step_mm: stack.step_mm,
        lesion_id: stack.meta.lesion_id.clone(),
        view_k: stack.meta.view_k,
        raw,
    };
    fs::write(json_path, serde_json::to_string_pretty(&side).expect("sidecar serializes"))?;
    Ok(())
}

pub fn load_stack(json_path: &Path) -> Result<MprStack> {
    let text =
        fs::read_to_string(json_path).map_err(|e| Error::BadManifest(format!("{}: {e}", json_path.display())))?;
    let side: StackSidecar =
        serde_json::from_str(&text).map_err(|e| Error::BadManifest(format!("{}: {e}", json_path.display())))?;
    let raw = rawio::sibling(json_path, &side.raw);
    let n = side.dims.iter().product::<usize>();
    let px = rawio::read_f32_le(&raw)?
        .filter(|v| v.len() == n)
        .ok_or_else(|| Error::CorruptVolume(format!("{} does not hold {n} float32 values", raw.display())))?;
    let mut stack =
        MprStack::new(side.dims, side.in_plane_spacing_mm, side.step_mm, px.into_iter().map(f64::from).collect())?;
    stack.meta.lesion_id = side.lesion_id;
    stack.meta.view_k = side.view_k;
    Ok(stack)
}
