//! Synthetic contrast-filled vessels with a single Gaussian-shaped stenosis.
//!
//! A vessel is a tube of radius
//!
//! ```text
//! r(s) = r0 · (1 − d · exp(−(s − s0)² / (2σ²)))
//! ```
//!
//! around a planar quadratic Bézier centerline (`s` is arc length). Voxels
//! whose center lies within `r(s)` of the centerline get `lumen_hu`, all
//! others `background_hu`; i.i.d. Gaussian noise is added on top. The
//! stored stenosis grade is the area complement `1 − (1 − d)²`.

use crate::error::{Error, Result};
use crate::geometry::{PointMm, Vec3};
use crate::labels::{binarize_stenosis, Branch, DatasetManifest, LesionEntry, Patient};
use crate::seed;
use crate::volume::{store_volume, Volume3D};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Grid the phantom is rasterised on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    /// Isotropic voxel spacing (mm).
    pub spacing_mm: f64,
}

impl Default for Grid {
    /// 128³ voxels at 0.5 mm.
    fn default() -> Self {
        Self { dims: [128, 128, 128], spacing_mm: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub healthy_radius_mm: f64,
    /// Stenosis center as a fraction of centerline length.
    pub stenosis_center_t: f64,
    pub stenosis_sigma_mm: f64,
    /// Fractional diameter reduction at the stenosis center, in `[0, 1)`.
    pub diameter_reduction: f64,
    pub lumen_hu: f64,
    pub background_hu: f64,
    pub noise_sigma_hu: f64,
    /// Lateral offset of the Bézier control point relative to the chord
    /// length; `0` gives a straight vessel.
    pub curvature: f64,
    /// Centerline sampling step (mm).
    pub step_mm: f64,
    pub grid: Grid,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            healthy_radius_mm: 2.0,
            stenosis_center_t: 0.5,
            stenosis_sigma_mm: 3.0,
            diameter_reduction: 0.0,
            lumen_hu: 400.0,
            background_hu: 0.0,
            noise_sigma_hu: 20.0,
            curvature: 0.0,
            step_mm: 0.5,
            grid: Grid::default(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPhantomSpec(m));
        let g = &self.grid;
        if g.dims.iter().any(|&n| n < 2) || !(g.spacing_mm > 0.0) {
            return bad(format!("grid {g:?}"));
        }
        if !(self.healthy_radius_mm >= 2.0 * g.spacing_mm) {
            return bad(format!(
                "healthy radius {} mm below two voxels ({} mm)",
                self.healthy_radius_mm,
                2.0 * g.spacing_mm
            ));
        }
        if !(0.0..=1.0).contains(&self.stenosis_center_t) {
            return bad(format!("stenosis center {} outside [0, 1]", self.stenosis_center_t));
        }
        if !(self.stenosis_sigma_mm > 0.0) {
            return bad(format!("stenosis sigma {}", self.stenosis_sigma_mm));
        }
        if !(0.0..1.0).contains(&self.diameter_reduction) {
            return bad(format!("diameter reduction {} outside [0, 1)", self.diameter_reduction));
        }
        if !(self.noise_sigma_hu >= 0.0) || !(self.curvature >= 0.0) || !(self.step_mm > 0.0) {
            return bad("noise, curvature and step must be non-negative / positive".into());
        }
        if !self.lumen_hu.is_finite() || !self.background_hu.is_finite() {
            return bad("intensities must be finite".into());
        }
        Ok(())
    }

    /// Area stenosis grade `1 − (r_min / r0)²`.
    pub fn stenosis_grade(&self) -> f64 {
        let keep = 1.0 - self.diameter_reduction;
        1.0 - keep * keep
    }

    /// Lumen radius at arc length `s` along a centerline of length `len`.
    pub fn radius_at(&self, s: f64, len: f64) -> f64 {
        let s0 = self.stenosis_center_t * len;
        let z = (s - s0) / self.stenosis_sigma_mm;
        self.healthy_radius_mm * (1.0 - self.diameter_reduction * (-0.5 * z * z).exp())
    }

    /// Diameter reduction that yields a given area grade.
    pub fn reduction_for_grade(grade: f64) -> f64 {
        1.0 - (1.0 - grade).sqrt()
    }
}

/// Ordered centerline points with (chordal) spacing `step_mm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centerline {
    pub points: Vec<PointMm>,
    pub step_mm: f64,
}

impl Centerline {
    pub fn new(points: Vec<PointMm>, step_mm: f64) -> Result<Self> {
        let cl = Self { points, step_mm };
        cl.validate()?;
        Ok(cl)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::DegenerateCenterline(m));
        if self.points.len() < 2 {
            return bad(format!("{} point(s)", self.points.len()));
        }
        if !(self.step_mm > 0.0) {
            return bad(format!("step {}", self.step_mm));
        }
        for (i, w) in self.points.windows(2).enumerate() {
            let d = (w[1] - w[0]).norm();
            if d == 0.0 {
                return bad(format!("points {i} and {} coincide", i + 1));
            }
            if (d - self.step_mm).abs() > 1e-6 {
                return bad(format!("segment {i} has length {d}, step is {}", self.step_mm));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Arc length of the polyline.
    pub fn length_mm(&self) -> f64 {
        (self.points.len() - 1) as f64 * self.step_mm
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::BrokenReference(path.to_path_buf()))?;
        let cl: Centerline =
            serde_json::from_str(&text).map_err(|e| Error::BadManifest(format!("{}: {e}", path.display())))?;
        cl.validate()?;
        Ok(cl)
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self).expect("centerline serializes"))?;
        Ok(())
    }
}

/// Ground truth for one annotated lesion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub patient_id: String,
    pub branch_id: String,
    pub lesion_id: String,
    pub start_idx: usize,
    pub end_idx: usize,
    pub stenosis_grade: f64,
    pub significant: bool,
    pub revascularised: bool,
}

fn bezier(p0: Vec3, p1: Vec3, p2: Vec3, t: f64) -> Vec3 {
    let u = 1.0 - t;
    p0 * (u * u) + p1 * (2.0 * u * t) + p2 * (t * t)
}

/// Samples a quadratic Bézier so that consecutive points are exactly `step`
/// apart (Euclidean), stopping before the end point is overshot.
fn resample_bezier(p0: Vec3, p1: Vec3, p2: Vec3, step: f64) -> Vec<Vec3> {
    let mut pts = vec![p0];
    let mut t = 0.0;
    loop {
        let cur = *pts.last().unwrap();
        if (p2 - cur).norm() < step {
            break;
        }
        // the chord from `cur` grows monotonically in t on these gentle arcs
        let (mut lo, mut hi) = (t, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (bezier(p0, p1, p2, mid) - cur).norm() < step {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        t = 0.5 * (lo + hi);
        let next = bezier(p0, p1, p2, t);
        // land exactly on the step length
        let dir = (next - cur).normalized();
        pts.push(cur + dir * step);
    }
    pts
}

/// Vessel centerline for a spec: a Bézier arc along +z in the x–z plane,
/// centred in the grid with enough clearance for the tube.
pub fn phantom_centerline(spec: &PhantomSpec) -> Result<Centerline> {
    let g = spec.grid;
    let s = g.spacing_mm;
    let extent = g.dims.map(|n| (n - 1) as f64 * s);
    let clearance = spec.healthy_radius_mm + 2.0 * s;
    let margin = clearance + s;
    let chord = extent[2] - 2.0 * margin;
    if chord < 2.0 * spec.step_mm {
        return Err(Error::PhantomOutOfBounds(format!(
            "grid z extent {} mm leaves no room for a centerline",
            extent[2]
        )));
    }
    let offset = spec.curvature * chord;
    // the arc bulges by offset/2 at its middle; centre the bulge laterally
    let cx = 0.5 * extent[0] - 0.25 * offset;
    let cy = 0.5 * extent[1];
    let p0 = Vec3::new(cx, cy, margin);
    let p2 = Vec3::new(cx, cy, margin + chord);
    let p1 = Vec3::new(cx + offset, cy, margin + 0.5 * chord);
    let points = resample_bezier(p0, p1, p2, spec.step_mm);
    let cl = Centerline::new(points, spec.step_mm)?;
    for p in &cl.points {
        let lo = [p.x, p.y, p.z];
        for a in 0..3 {
            if lo[a] < clearance || lo[a] > extent[a] - clearance {
                return Err(Error::PhantomOutOfBounds(format!(
                    "centerline point {p:?} closer than {clearance} mm to the grid boundary"
                )));
            }
        }
    }
    Ok(cl)
}

/// Distance from `q` to the polyline and the arc length of the closest point.
fn closest_on_polyline(cl: &Centerline, q: PointMm, reach: f64) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for (i, w) in cl.points.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        // cheap reject along z, the arc's monotone axis
        if q.z < a.z.min(b.z) - reach || q.z > a.z.max(b.z) + reach {
            continue;
        }
        let ab = b - a;
        let t = ((q - a).dot(ab) / ab.dot(ab)).clamp(0.0, 1.0);
        let d = (q - (a + ab * t)).norm();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, (i as f64 + t) * cl.step_mm));
        }
    }
    best
}

/// Rasterises a phantom vessel. Deterministic in `(spec, seed)`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Volume3D, Centerline, LesionRecord)> {
    spec.validate()?;
    let cl = phantom_centerline(spec)?;
    let g = spec.grid;
    let s = g.spacing_mm;
    let len = cl.length_mm();
    let reach = spec.healthy_radius_mm + s;

    // bounding box of the tube in voxel indices
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cl.points {
        for (a, v) in p.to_array().into_iter().enumerate() {
            lo[a] = lo[a].min(v - reach);
            hi[a] = hi[a].max(v + reach);
        }
    }
    let lo_i = lo.map(|v| (v / s).floor().max(0.0) as usize);
    let hi_i: Vec<usize> = (0..3).map(|a| ((hi[a] / s).ceil() as usize).min(g.dims[a] - 1)).collect();

    let [nx, ny, nz] = g.dims;
    let mut voxels = vec![spec.background_hu; nx * ny * nz];
    voxels.par_chunks_mut(nx * ny).enumerate().for_each(|(k, plane)| {
        if k < lo_i[2] || k > hi_i[2] {
            return;
        }
        for j in lo_i[1]..=hi_i[1] {
            for i in lo_i[0]..=hi_i[0] {
                let q = PointMm::new(i as f64 * s, j as f64 * s, k as f64 * s);
                if let Some((d, at)) = closest_on_polyline(&cl, q, reach) {
                    if d <= spec.radius_at(at, len) {
                        plane[i + nx * j] = spec.lumen_hu;
                    }
                }
            }
        }
    });
    if spec.noise_sigma_hu > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma_hu).expect("valid noise sigma");
        let mut rng = seed::rng(&[seed, 0x0015E]);
        for v in &mut voxels {
            *v += normal.sample(&mut rng);
        }
    }
    // the on-disk format is float32; keep memory and disk identical
    for v in &mut voxels {
        *v = f64::from(*v as f32);
    }
    let vol = Volume3D::new(g.dims, [s; 3], [0.0; 3], voxels)?;

    let s0 = spec.stenosis_center_t * len;
    let last = cl.len() - 1;
    let to_idx = |x: f64| ((x / cl.step_mm).round().max(0.0) as usize).min(last);
    let mut start = to_idx(s0 - 3.0 * spec.stenosis_sigma_mm);
    let mut end = to_idx(s0 + 3.0 * spec.stenosis_sigma_mm);
    if start == end {
        if end < last {
            end += 1;
        } else {
            start -= 1;
        }
    }
    let grade = spec.stenosis_grade();
    let record = LesionRecord {
        patient_id: "P000".into(),
        branch_id: "P000-B00".into(),
        lesion_id: "P000-B00-L0".into(),
        start_idx: start,
        end_idx: end,
        stenosis_grade: grade,
        significant: binarize_stenosis(grade)?,
        revascularised: false,
    };
    Ok((vol, cl, record))
}

/// How many lesions a cohort holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionCount {
    PerPatient(usize),
    /// Spread over patients as evenly as possible; the remainder goes to
    /// randomly chosen patients.
    Total(usize),
}

/// Cohort sampling parameters. Each lesion lives on its own branch, i.e. in
/// its own vessel volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortOptions {
    pub n_patients: usize,
    pub lesions: LesionCount,
    /// Area grades are drawn uniformly from this range.
    pub grade_range: (f64, f64),
    pub seed: u64,
    pub grid: Grid,
    pub radius_range_mm: (f64, f64),
    pub sigma_range_mm: (f64, f64),
    pub center_t_range: (f64, f64),
    pub curvature_range: (f64, f64),
    pub noise_sigma_hu: f64,
    pub lumen_hu: f64,
    pub background_hu: f64,
    /// The maximal-grade lesion of a branch is revascularised iff its grade
    /// reaches this value...
    pub revasc_threshold: f64,
    /// ...then the decision is flipped with this probability (only for
    /// branches that are narrowed at all).
    pub revasc_flip_prob: f64,
}

impl Default for CohortOptions {
    fn default() -> Self {
        Self {
            n_patients: 20,
            lesions: LesionCount::PerPatient(3),
            grade_range: (0.0, 0.9),
            seed: 0,
            grid: Grid::default(),
            radius_range_mm: (1.8, 2.4),
            sigma_range_mm: (2.0, 4.0),
            center_t_range: (0.4, 0.6),
            curvature_range: (0.0, 0.25),
            noise_sigma_hu: 20.0,
            lumen_hu: 400.0,
            background_hu: 0.0,
            revasc_threshold: 0.45,
            revasc_flip_prob: 0.05,
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn lesion_allocation(opts: &CohortOptions) -> Result<Vec<usize>> {
    let p = opts.n_patients;
    match opts.lesions {
        LesionCount::PerPatient(m) if m >= 1 => Ok(vec![m; p]),
        LesionCount::Total(n) if n >= p => {
            let mut counts = vec![n / p; p];
            let mut order: Vec<usize> = (0..p).collect();
            order.shuffle(&mut seed::rng(&[opts.seed, 0xA110C]));
            for &i in order.iter().take(n % p) {
                counts[i] += 1;
            }
            Ok(counts)
        }
        other => Err(Error::InvalidArgument(format!("{other:?} leaves patients without lesions ({p} patients)"))),
    }
}

/// Generates a cohort under `out_dir`: one volume + centerline per branch in
/// `vessels/` and the dataset manifest `manifest.json`.
pub fn generate_cohort(opts: &CohortOptions, out_dir: &Path) -> Result<DatasetManifest> {
    if opts.n_patients == 0 {
        return Err(Error::InvalidArgument("n_patients must be >= 1".into()));
    }
    let (glo, ghi) = opts.grade_range;
    if !(0.0 <= glo && glo <= ghi && ghi <= 0.95) {
        return Err(Error::InvalidArgument(format!("grade range {:?} not within [0, 0.95]", opts.grade_range)));
    }
    let counts = lesion_allocation(opts)?;
    let vessel_dir = out_dir.join("vessels");
    fs::create_dir_all(&vessel_dir)?;

    let patients: Vec<Patient> = counts
        .par_iter()
        .enumerate()
        .map(|(p, &n_lesions)| -> Result<Patient> {
            let patient_id = format!("P{p:03}");
            let mut rng = seed::rng(&[opts.seed, 0x9A71E47, p as u64]);
            let mut branches = Vec::with_capacity(n_lesions);
            for b in 0..n_lesions {
                let branch_id = format!("{patient_id}-B{b:02}");
                let grade = uniform(&mut rng, opts.grade_range);
                let spec = PhantomSpec {
                    healthy_radius_mm: uniform(&mut rng, opts.radius_range_mm),
                    stenosis_center_t: uniform(&mut rng, opts.center_t_range),
                    stenosis_sigma_mm: uniform(&mut rng, opts.sigma_range_mm),
                    diameter_reduction: PhantomSpec::reduction_for_grade(grade),
                    lumen_hu: opts.lumen_hu,
                    background_hu: opts.background_hu,
                    noise_sigma_hu: opts.noise_sigma_hu,
                    curvature: uniform(&mut rng, opts.curvature_range),
                    step_mm: opts.grid.spacing_mm,
                    grid: opts.grid,
                };
                let flip = rng.random::<f64>() < opts.revasc_flip_prob;
                let phantom_seed = rng.random::<u64>();
                let (vol, cl, rec) = generate_phantom(&spec, phantom_seed)?;
                let vol_name = format!("{branch_id}.json");
                let cl_name = format!("{branch_id}-centerline.json");
                store_volume(&vol, &vessel_dir.join(&vol_name))?;
                cl.store(&vessel_dir.join(&cl_name))?;
                // single lesion per branch: it is the branch maximum
                let mut revascularised = rec.stenosis_grade >= opts.revasc_threshold;
                if flip && rec.stenosis_grade > 0.0 {
                    revascularised = !revascularised;
                }
                branches.push(Branch {
                    branch_id: branch_id.clone(),
                    centerline: format!("vessels/{cl_name}"),
                    volume: format!("vessels/{vol_name}"),
                    revascularised,
                    lesions: vec![LesionEntry {
                        lesion_id: format!("{branch_id}-L0"),
                        start_idx: rec.start_idx,
                        end_idx: rec.end_idx,
                        stenosis_grade: rec.stenosis_grade,
                    }],
                });
            }
            Ok(Patient { patient_id, branches })
        })
        .collect::<Result<_>>()?;

    let manifest = DatasetManifest { patients };
    manifest.store(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(d: f64) -> PhantomSpec {
        PhantomSpec {
            diameter_reduction: d,
            noise_sigma_hu: 0.0,
            grid: Grid { dims: [32, 32, 64], spacing_mm: 0.5 },
            ..Default::default()
        }
    }

    #[test]
    fn centerline_spacing_is_exact() {
        for curvature in [0.0, 0.1, 0.3] {
            let spec = PhantomSpec { curvature, grid: Grid { dims: [64, 48, 96], spacing_mm: 0.5 }, ..small(0.0) };
            let cl = phantom_centerline(&spec).unwrap();
            for w in cl.points.windows(2) {
                assert!(((w[1] - w[0]).norm() - 0.5).abs() < 1e-9);
            }
            assert!(cl.len() > 60);
        }
    }

    #[test]
    fn no_narrowing_means_grade_zero() {
        let (_, _, rec) = generate_phantom(&small(0.0), 1).unwrap();
        assert_eq!(rec.stenosis_grade, 0.0);
        assert!(!rec.significant);
    }

    #[test]
    fn area_grade_closed_form() {
        let spec = small(0.3);
        assert!((spec.stenosis_grade() - 0.51).abs() < 1e-12);
        let (_, _, rec) = generate_phantom(&spec, 1).unwrap();
        assert!(rec.significant);
        assert!((PhantomSpec::reduction_for_grade(0.51) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn lesion_bounds_cover_three_sigma() {
        let spec = small(0.5);
        let (_, cl, rec) = generate_phantom(&spec, 1).unwrap();
        let s0 = 0.5 * cl.length_mm();
        assert_eq!(rec.start_idx, ((s0 - 9.0) / 0.5).round() as usize);
        assert_eq!(rec.end_idx, ((s0 + 9.0) / 0.5).round() as usize);
    }

    #[test]
    fn determinism_and_seed_dependence() {
        let spec = PhantomSpec { noise_sigma_hu: 20.0, ..small(0.4) };
        let (a, _, _) = generate_phantom(&spec, 5).unwrap();
        let (b, _, _) = generate_phantom(&spec, 5).unwrap();
        let (c, _, _) = generate_phantom(&spec, 6).unwrap();
        assert!(a.voxels().iter().zip(b.voxels()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a.voxels(), c.voxels());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_phantom(&PhantomSpec { diameter_reduction: 1.0, ..small(0.0) }, 0).is_err());
        assert!(generate_phantom(&PhantomSpec { healthy_radius_mm: 0.9, ..small(0.0) }, 0).is_err());
        let err = generate_phantom(&PhantomSpec { healthy_radius_mm: 7.0, ..small(0.0) }, 0).unwrap_err();
        assert!(err.to_string().starts_with("phantom out of bounds"), "{err}");
        let err = generate_phantom(&PhantomSpec { curvature: 2.0, ..small(0.0) }, 0).unwrap_err();
        assert!(err.to_string().starts_with("phantom out of bounds"), "{err}");
    }

    #[test]
    fn allocation_of_total_lesions() {
        let opts = CohortOptions { n_patients: 95, lesions: LesionCount::Total(345), ..Default::default() };
        let counts = lesion_allocation(&opts).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 345);
        assert!(counts.iter().all(|&c| c == 3 || c == 4));
        let opts = CohortOptions { n_patients: 10, lesions: LesionCount::Total(5), ..Default::default() };
        assert!(lesion_allocation(&opts).is_err());
    }
}
