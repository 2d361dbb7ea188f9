//! Dataset manifests, binary targets and the reformatted sample cache.
//!
//! A manifest lists patients, their branches and the annotated lesions of
//! each branch. Revascularisation is recorded per branch and credited to the
//! branch's highest-grade lesion.

use crate::error::{Error, Result};
use crate::phantom::{Centerline, LesionRecord};
use crate::rawio;
use crate::reformat::{build_frames, cylinder_mask, extract_mpr, rotate_view_of};
use crate::shaping::{apply_padding, cube_sequence, downscale_inplane, slice_pair, PaddingStrategy, CUBE_SIZE};
use crate::volume::load_volume;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Binary target a model is trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Significant,
    Revascularised,
}

impl Target {
    pub const ALL: [Target; 2] = [Target::Significant, Target::Revascularised];

    pub fn name(&self) -> &'static str {
        match self {
            Target::Significant => "significant",
            Target::Revascularised => "revascularised",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "significant" => Ok(Target::Significant),
            "revascularised" | "revascularized" => Ok(Target::Revascularised),
            other => Err(Error::InvalidArgument(format!("unknown target {other:?}"))),
        }
    }
}

/// Significant stenosis: area grade of at least 50 %.
pub fn binarize_stenosis(grade: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&grade) {
        return Err(Error::InvalidGrade(grade));
    }
    Ok(grade >= 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionEntry {
    pub lesion_id: String,
    pub start_idx: usize,
    pub end_idx: usize,
    pub stenosis_grade: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub branch_id: String,
    /// Centerline JSON, relative to the manifest's directory.
    pub centerline: String,
    /// Volume manifest JSON, relative to the manifest's directory.
    pub volume: String,
    pub revascularised: bool,
    pub lesions: Vec<LesionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub patient_id: String,
    pub branches: Vec<Branch>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub patients: Vec<Patient>,
}

impl DatasetManifest {
    /// Unique patient ids, grades in `[0, 1]`, `start < end` per lesion.
    /// Lesion bounds against the centerline are checked when it is loaded.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut lesion_ids = HashSet::new();
        for p in &self.patients {
            if !seen.insert(p.patient_id.as_str()) {
                return Err(Error::BadManifest(format!("duplicate patient id {}", p.patient_id)));
            }
            for b in &p.branches {
                for l in &b.lesions {
                    if !(0.0..=1.0).contains(&l.stenosis_grade) {
                        return Err(Error::InvalidGrade(l.stenosis_grade));
                    }
                    if l.start_idx >= l.end_idx {
                        return Err(Error::BadManifest(format!(
                            "lesion {} has start {} >= end {}",
                            l.lesion_id, l.start_idx, l.end_idx
                        )));
                    }
                    if !lesion_ids.insert(l.lesion_id.as_str()) {
                        return Err(Error::BadManifest(format!("duplicate lesion id {}", l.lesion_id)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::BrokenReference(path.to_path_buf()))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::BadManifest(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        Ok(())
    }

    pub fn n_lesions(&self) -> usize {
        self.patients.iter().flat_map(|p| &p.branches).map(|b| b.lesions.len()).sum()
    }

    /// Every lesion with both labels resolved, in manifest order.
    pub fn lesion_records(&self) -> Result<Vec<LesionRecord>> {
        let mut out = Vec::with_capacity(self.n_lesions());
        for p in &self.patients {
            for b in &p.branches {
                let revasc = propagate_revascularisation(b)?;
                for (l, r) in b.lesions.iter().zip(revasc) {
                    out.push(LesionRecord {
                        patient_id: p.patient_id.clone(),
                        branch_id: b.branch_id.clone(),
                        lesion_id: l.lesion_id.clone(),
                        start_idx: l.start_idx,
                        end_idx: l.end_idx,
                        stenosis_grade: l.stenosis_grade,
                        significant: binarize_stenosis(l.stenosis_grade)?,
                        revascularised: r,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Per-lesion revascularisation labels of a branch: all false unless the
/// branch was revascularised, then true only at the maximal-grade lesion
/// (ties go to the most proximal, i.e. smallest `start_idx`).
pub fn propagate_revascularisation(branch: &Branch) -> Result<Vec<bool>> {
    let mut out = vec![false; branch.lesions.len()];
    if !branch.revascularised {
        return Ok(out);
    }
    let best = branch
        .lesions
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| b.stenosis_grade.total_cmp(&a.stenosis_grade).then(a.start_idx.cmp(&b.start_idx)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::UnassignableLabel(branch.branch_id.clone()))?;
    out[best] = true;
    Ok(out)
}

/// Which model input is produced from a padded stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pathway {
    /// Two orthogonal longitudinal planes, `[2, L, W]`.
    #[serde(rename = "2.5d")]
    TwoFiveD,
    /// Overlapping cubes after in-plane downscaling, `[n, 25, 25, 25]`.
    #[serde(rename = "cubes")]
    Cubes,
}

impl fmt::Display for Pathway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pathway::TwoFiveD => "2.5d",
            Pathway::Cubes => "cubes",
        })
    }
}

impl FromStr for Pathway {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2.5d" | "2.5D" => Ok(Pathway::TwoFiveD),
            "cubes" => Ok(Pathway::Cubes),
            other => Err(Error::InvalidArgument(format!("unknown pathway {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssembleOptions {
    pub n_views: usize,
    pub padding: PaddingStrategy,
    pub pathway: Pathway,
    /// In-plane slice size `H = W`.
    pub slice_size: usize,
    pub in_plane_spacing_mm: f64,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        Self {
            n_views: 18,
            padding: PaddingStrategy::intermediate(),
            pathway: Pathway::TwoFiveD,
            slice_size: 32,
            in_plane_spacing_mm: 0.5,
        }
    }
}

impl AssembleOptions {
    /// Tensor shape every sample will have.
    pub fn sample_shape(&self) -> Vec<usize> {
        let t = self.padding.target_len();
        match self.pathway {
            Pathway::TwoFiveD => vec![2, t, self.slice_size],
            Pathway::Cubes => vec![crate::shaping::CubeSequence::count_for(t), CUBE_SIZE, CUBE_SIZE, CUBE_SIZE],
        }
    }
}

/// One (lesion, view) model input with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub patient_id: String,
    pub branch_id: String,
    pub lesion_id: String,
    pub view_k: usize,
    pub significant: bool,
    pub revascularised: bool,
    pub shape: Vec<usize>,
    pub tensor: Vec<f32>,
}

impl LabeledSample {
    pub fn label(&self, target: Target) -> bool {
        match target {
            Target::Significant => self.significant,
            Target::Revascularised => self.revascularised,
        }
    }
}

/// Lesion and positive counts of a cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CohortSummary {
    pub patients: usize,
    pub lesions: usize,
    pub samples: usize,
    pub significant: usize,
    pub revascularised: usize,
}

impl CohortSummary {
    /// Counts from the manifest alone (`samples = lesions · n_views`).
    pub fn from_manifest(manifest: &DatasetManifest, n_views: usize) -> Result<Self> {
        let recs = manifest.lesion_records()?;
        Ok(Self {
            patients: manifest.patients.len(),
            lesions: recs.len(),
            samples: recs.len() * n_views,
            significant: recs.iter().filter(|r| r.significant).count(),
            revascularised: recs.iter().filter(|r| r.revascularised).count(),
        })
    }
}

fn resolve(base: &Path, rel: &str) -> Result<PathBuf> {
    let p = base.join(rel);
    if !p.is_file() {
        return Err(Error::BrokenReference(p));
    }
    Ok(p)
}

fn branch_samples(
    base: &Path,
    branch: &Branch,
    records: &[&LesionRecord],
    opts: &AssembleOptions,
) -> Result<Vec<LabeledSample>> {
    let vol_path = resolve(base, &branch.volume)?;
    let cl = Centerline::load(&resolve(base, &branch.centerline)?)?;
    let vol = load_volume(&vol_path).map_err(|e| match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::BrokenReference(vol_path.clone()),
        other => other,
    })?;
    let frames = build_frames(&cl)?;
    let mut out = Vec::with_capacity(records.len() * opts.n_views);
    for rec in records {
        let stack = extract_mpr(&vol, &cl, &frames, rec, opts.slice_size, opts.in_plane_spacing_mm)?;
        let masked = cylinder_mask(&stack)?;
        for k in 0..opts.n_views {
            let view = rotate_view_of(&masked, k, opts.n_views)?;
            let padded = apply_padding(&view, opts.padding)?;
            let (shape, tensor) = match opts.pathway {
                Pathway::TwoFiveD => {
                    let pair = slice_pair(&padded);
                    (pair.shape().to_vec(), pair.to_f32())
                }
                Pathway::Cubes => {
                    let cubes = cube_sequence(&downscale_inplane(&padded, CUBE_SIZE)?)?;
                    (
                        vec![cubes.len(), CUBE_SIZE, CUBE_SIZE, CUBE_SIZE],
                        cubes.flatten().into_iter().map(|v| v as f32).collect(),
                    )
                }
            };
            out.push(LabeledSample {
                patient_id: rec.patient_id.clone(),
                branch_id: rec.branch_id.clone(),
                lesion_id: rec.lesion_id.clone(),
                view_k: k,
                significant: rec.significant,
                revascularised: rec.revascularised,
                shape,
                tensor,
            });
        }
    }
    Ok(out)
}

fn check_options(opts: &AssembleOptions) -> Result<()> {
    if opts.n_views == 0 {
        return Err(Error::InvalidArgument("n_views must be >= 1".into()));
    }
    Ok(())
}

/// Runs `f` on the samples of every branch in parallel; results come back
/// in manifest order.
fn for_each_branch<T: Send>(
    manifest: &DatasetManifest,
    base: &Path,
    opts: &AssembleOptions,
    f: impl Fn(Vec<LabeledSample>) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    check_options(opts)?;
    manifest.validate()?;
    let records = manifest.lesion_records()?;
    let mut by_branch: BTreeMap<(usize, usize), Vec<&LesionRecord>> = BTreeMap::new();
    let mut it = records.iter();
    let mut jobs = Vec::new();
    for (pi, p) in manifest.patients.iter().enumerate() {
        for (bi, b) in p.branches.iter().enumerate() {
            let recs: Vec<&LesionRecord> = it.by_ref().take(b.lesions.len()).collect();
            if !recs.is_empty() {
                by_branch.insert((pi, bi), recs);
                jobs.push((pi, bi));
            }
        }
    }
    jobs.par_iter()
        .map(|&(pi, bi)| {
            let branch = &manifest.patients[pi].branches[bi];
            f(branch_samples(base, branch, &by_branch[&(pi, bi)], opts)?)
        })
        .collect()
}

/// Reformats and shapes every lesion of a manifest: `n_views` samples per
/// lesion, lesions in manifest order, views in order. Relative references
/// are resolved against `base` (the manifest's directory).
pub fn assemble_dataset(
    manifest: &DatasetManifest,
    base: &Path,
    opts: &AssembleOptions,
) -> Result<(Vec<LabeledSample>, CohortSummary)> {
    let samples: Vec<LabeledSample> = for_each_branch(manifest, base, opts, Ok)?.into_iter().flatten().collect();
    let mut summary = CohortSummary::from_manifest(manifest, opts.n_views)?;
    summary.samples = samples.len();
    Ok((samples, summary))
}

/// One row of the cache index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub lesion_id: String,
    pub view_k: usize,
    pub significant: bool,
    pub revascularised: bool,
    /// Tensor sidecar JSON, relative to the cache directory.
    pub tensor: String,
    pub patient_id: String,
    pub branch_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub options: AssembleOptions,
    pub summary: CohortSummary,
    pub samples: Vec<CacheEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorSidecar {
    shape: Vec<usize>,
    raw: String,
}

pub const CACHE_INDEX: &str = "index.json";

fn write_sample(dir: &Path, s: &LabeledSample) -> Result<CacheEntry> {
    let stem = format!("{}-v{:02}", s.lesion_id, s.view_k);
    let raw = format!("{stem}.f32");
    rawio::write_f32_le(&dir.join("tensors").join(&raw), s.tensor.iter().copied())?;
    let side = TensorSidecar { shape: s.shape.clone(), raw };
    let rel = format!("tensors/{stem}.json");
    fs::write(dir.join(&rel), serde_json::to_string(&side).expect("sidecar serializes"))?;
    Ok(CacheEntry {
        lesion_id: s.lesion_id.clone(),
        view_k: s.view_k,
        significant: s.significant,
        revascularised: s.revascularised,
        tensor: rel,
        patient_id: s.patient_id.clone(),
        branch_id: s.branch_id.clone(),
    })
}

fn store_index(dir: &Path, index: &CacheIndex) -> Result<()> {
    fs::write(dir.join(CACHE_INDEX), serde_json::to_string_pretty(index).expect("index serializes"))?;
    Ok(())
}

/// Assembles a manifest straight into a cache directory: one tensor file per
/// (lesion, view) under `tensors/` and `index.json`. Samples never pile up
/// in memory beyond one branch per worker.
pub fn build_cache(manifest: &DatasetManifest, base: &Path, opts: &AssembleOptions, dir: &Path) -> Result<CacheIndex> {
    fs::create_dir_all(dir.join("tensors"))?;
    let entries: Vec<CacheEntry> = for_each_branch(manifest, base, opts, |samples| {
        samples.iter().map(|s| write_sample(dir, s)).collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    let mut summary = CohortSummary::from_manifest(manifest, opts.n_views)?;
    summary.samples = entries.len();
    let index = CacheIndex { options: *opts, summary, samples: entries };
    store_index(dir, &index)?;
    Ok(index)
}

/// Writes already assembled samples as a cache.
pub fn write_cache(
    samples: &[LabeledSample],
    opts: &AssembleOptions,
    summary: CohortSummary,
    dir: &Path,
) -> Result<CacheIndex> {
    fs::create_dir_all(dir.join("tensors"))?;
    let entries = samples.iter().map(|s| write_sample(dir, s)).collect::<Result<Vec<_>>>()?;
    let index = CacheIndex { options: *opts, summary, samples: entries };
    store_index(dir, &index)?;
    Ok(index)
}

pub fn load_cache_index(dir: &Path) -> Result<CacheIndex> {
    let path = dir.join(CACHE_INDEX);
    let text = fs::read_to_string(&path).map_err(|_| Error::BrokenReference(path.clone()))?;
    serde_json::from_str(&text).map_err(|e| Error::BadManifest(format!("{}: {e}", path.display())))
}

/// Reads one cached tensor through its sidecar.
pub fn load_tensor(dir: &Path, rel: &str) -> Result<(Vec<usize>, Vec<f32>)> {
    let side_path = resolve(dir, rel)?;
    let text = fs::read_to_string(&side_path)?;
    let side: TensorSidecar =
        serde_json::from_str(&text).map_err(|e| Error::BadManifest(format!("{}: {e}", side_path.display())))?;
    let raw = resolve(side_path.parent().unwrap_or(dir), &side.raw)?;
    let n = side.shape.iter().product::<usize>();
    let data = rawio::read_f32_le(&raw)?
        .filter(|v| v.len() == n)
        .ok_or_else(|| Error::CorruptVolume(format!("{} does not hold {n} float32 values", raw.display())))?;
    Ok((side.shape, data))
}

/// Loads every sample of a cache, in index order.
pub fn load_cache(dir: &Path) -> Result<(CacheIndex, Vec<LabeledSample>)> {
    let index = load_cache_index(dir)?;
    let samples = index
        .samples
        .iter()
        .map(|e| {
            let (shape, tensor) = load_tensor(dir, &e.tensor)?;
            Ok(LabeledSample {
                patient_id: e.patient_id.clone(),
                branch_id: e.branch_id.clone(),
                lesion_id: e.lesion_id.clone(),
                view_k: e.view_k,
                significant: e.significant,
                revascularised: e.revascularised,
                shape,
                tensor,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, samples))
}
