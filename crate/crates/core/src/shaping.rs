//! Fixed-size model inputs from variable-length MPR stacks.
//!
//! Length resampling and in-plane downscaling both use linear interpolation
//! with aligned end points: output index `o` of `T` reads the source at
//! `o · (N − 1)/(T − 1)`, so first and last samples are kept exactly.

use crate::error::{Error, Result};
use crate::reformat::MprStack;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Cube edge length of the cube sequence.
pub const CUBE_SIZE: usize = 25;
/// Slice stride between consecutive cubes.
pub const CUBE_STRIDE: usize = 5;

/// How stacks of different lengths are brought to a common length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PaddingStrategy {
    /// Center the lesion and pad with zero slices.
    ZeroPad { target_len: usize },
    /// Stretch to the longest lesion length.
    StretchToLongest { target_len: usize },
    /// Resize every lesion to an intermediate length.
    IntermediateResize { target_len: usize },
}

impl PaddingStrategy {
    pub const fn zero() -> Self {
        Self::ZeroPad { target_len: 170 }
    }

    pub const fn stretch() -> Self {
        Self::StretchToLongest { target_len: 170 }
    }

    pub const fn intermediate() -> Self {
        Self::IntermediateResize { target_len: 64 }
    }

    pub fn target_len(&self) -> usize {
        match *self {
            Self::ZeroPad { target_len }
            | Self::StretchToLongest { target_len }
            | Self::IntermediateResize { target_len } => target_len,
        }
    }

    /// Same strategy with another target length.
    pub fn with_target(self, target_len: usize) -> Self {
        match self {
            Self::ZeroPad { .. } => Self::ZeroPad { target_len },
            Self::StretchToLongest { .. } => Self::StretchToLongest { target_len },
            Self::IntermediateResize { .. } => Self::IntermediateResize { target_len },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ZeroPad { .. } => "zero",
            Self::StretchToLongest { .. } => "stretch",
            Self::IntermediateResize { .. } => "intermediate",
        }
    }
}

impl Default for PaddingStrategy {
    fn default() -> Self {
        Self::intermediate()
    }
}

impl fmt::Display for PaddingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PaddingStrategy {
    type Err = Error;

    /// `zero`, `stretch` or `intermediate`, with default target lengths.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::zero()),
            "stretch" => Ok(Self::stretch()),
            "intermediate" => Ok(Self::intermediate()),
            other => Err(Error::InvalidArgument(format!("unknown padding strategy {other:?}"))),
        }
    }
}

/// Linear interpolation taps `(i0, i1, w)` mapping `n` samples onto `t`:
/// `out[o] = (1 − w)·in[i0] + w·in[i1]`.
fn taps(n: usize, t: usize) -> Vec<(usize, usize, f64)> {
    (0..t)
        .map(|o| {
            if t == 1 || n == 1 {
                return (0, 0, 0.0);
            }
            let src = (o * (n - 1)) as f64 / (t - 1) as f64;
            let i0 = (src.floor() as usize).min(n - 1);
            let w = src - i0 as f64;
            if w == 0.0 || i0 == n - 1 {
                (i0, i0, 0.0)
            } else {
                (i0, i0 + 1, w)
            }
        })
        .collect()
}

/// Resamples the slice axis of a `[n, plane]` array to `t` slices.
fn resample_rows(data: &[f64], n: usize, plane: usize, t: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * plane);
    for (i0, i1, w) in taps(n, t) {
        let (a, b) = (&data[i0 * plane..(i0 + 1) * plane], &data[i1 * plane..(i1 + 1) * plane]);
        if w == 0.0 {
            out.extend_from_slice(a);
        } else {
            out.extend(a.iter().zip(b).map(|(&x, &y)| (1.0 - w) * x + w * y));
        }
    }
    out
}

/// Brings a stack to the strategy's target length. `H` and `W` are kept.
pub fn apply_padding(stack: &MprStack, strategy: PaddingStrategy) -> Result<MprStack> {
    let [l, h, w] = stack.dims;
    let t = strategy.target_len();
    if t == 0 {
        return Err(Error::InvalidArgument("padding target length must be >= 1".into()));
    }
    if l < 2 {
        return Err(Error::InvalidStack(format!("{l} slice(s); padding needs at least 2")));
    }
    let plane = h * w;
    let pixels = match strategy {
        PaddingStrategy::ZeroPad { .. } => {
            if l > t {
                return Err(Error::LesionLongerThanPadTarget { len: l, target: t });
            }
            let before = (t - l) / 2;
            let mut px = vec![0.0; t * plane];
            px[before * plane..(before + l) * plane].copy_from_slice(&stack.pixels);
            px
        }
        PaddingStrategy::StretchToLongest { .. } | PaddingStrategy::IntermediateResize { .. } => {
            resample_rows(&stack.pixels, l, plane, t)
        }
    };
    let step_mm = match strategy {
        PaddingStrategy::ZeroPad { .. } => stack.step_mm,
        _ if t > 1 => stack.step_mm * (l - 1) as f64 / (t - 1) as f64,
        _ => stack.step_mm,
    };
    Ok(MprStack { dims: [t, h, w], step_mm, pixels, ..stack.clone() })
}

/// Overlapping `25³` cubes along the slice axis.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeSequence {
    pub stride: usize,
    /// First slice of every cube.
    pub starts: Vec<usize>,
    /// Slice-major `25 × 25 × 25` blocks.
    pub cubes: Vec<Vec<f64>>,
}

impl CubeSequence {
    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    /// Number of cubes for a stack of `l` slices.
    pub fn count_for(l: usize) -> usize {
        if l < CUBE_SIZE {
            0
        } else {
            (l - CUBE_SIZE) / CUBE_STRIDE + 1
        }
    }

    /// All cubes back to back, `[n, 25, 25, 25]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.cubes.concat()
    }
}

/// Cube `i` covers slices `[5i, 5i + 25)`; a trailing remainder shorter than
/// the stride is dropped. Expects a `25 × 25` in-plane size.
pub fn cube_sequence(stack: &MprStack) -> Result<CubeSequence> {
    let [l, h, w] = stack.dims;
    if h != CUBE_SIZE || w != CUBE_SIZE {
        return Err(Error::InvalidStack(format!("cube sequencing needs 25×25 slices, got {h}×{w}")));
    }
    if l < CUBE_SIZE {
        return Err(Error::StackTooShort(l));
    }
    let plane = h * w;
    let starts: Vec<usize> = (0..CubeSequence::count_for(l)).map(|i| i * CUBE_STRIDE).collect();
    let cubes = starts.iter().map(|&s| stack.pixels[s * plane..(s + CUBE_SIZE) * plane].to_vec()).collect();
    Ok(CubeSequence { stride: CUBE_STRIDE, starts, cubes })
}

/// Separable linear resampling of every slice to `target × target`.
pub fn downscale_inplane(stack: &MprStack, target: usize) -> Result<MprStack> {
    let [l, h, w] = stack.dims;
    if target == 0 {
        return Err(Error::InvalidArgument("downscale target must be >= 1".into()));
    }
    if h < target || w < target {
        return Err(Error::CannotDownscaleUpward { from: h.min(w), to: target });
    }
    let ty = taps(h, target);
    let tx = taps(w, target);
    let mut pixels = Vec::with_capacity(l * target * target);
    let mut rows = vec![0.0; target * w];
    for sl in 0..l {
        let src = stack.slice(sl);
        // rows first, then columns
        for (o, &(i0, i1, f)) in ty.iter().enumerate() {
            for x in 0..w {
                rows[o * w + x] = (1.0 - f) * src[i0 * w + x] + f * src[i1 * w + x];
            }
        }
        for o in 0..target {
            let row = &rows[o * w..(o + 1) * w];
            pixels.extend(tx.iter().map(|&(j0, j1, f)| (1.0 - f) * row[j0] + f * row[j1]));
        }
    }
    let spacing = if target > 1 {
        stack.in_plane_spacing_mm * (h - 1) as f64 / (target - 1) as f64
    } else {
        stack.in_plane_spacing_mm
    };
    Ok(MprStack { dims: [l, target, target], in_plane_spacing_mm: spacing, pixels, ..stack.clone() })
}

/// Two orthogonal longitudinal planes through the centerline, stacked as
/// channels: `[2, L, W]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    /// `(L, W)` of each channel.
    pub dims: [usize; 2],
    pub pixels: Vec<f64>,
}

impl SlicePair {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.dims[0] * self.dims[1];
        &self.pixels[c * n..(c + 1) * n]
    }

    /// Model input shape `[2, L, W]`.
    pub fn shape(&self) -> [usize; 3] {
        [2, self.dims[0], self.dims[1]]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&v| v as f32).collect()
    }

    /// Linear resampling along `L`, channel by channel.
    pub fn resample_length(&self, target: usize) -> SlicePair {
        let [l, w] = self.dims;
        let mut pixels = resample_rows(self.channel(0), l, w, target);
        pixels.extend(resample_rows(self.channel(1), l, w, target));
        SlicePair { dims: [target, w], pixels }
    }
}

/// Channel 0 is row `H/2` of every slice, channel 1 is column `W/2`. When
/// `H ≠ W`, channel 1 is center-cropped or zero-padded to `W` samples.
pub fn slice_pair(stack: &MprStack) -> SlicePair {
    let [l, h, w] = stack.dims;
    let mut pixels = Vec::with_capacity(2 * l * w);
    for sl in 0..l {
        pixels.extend((0..w).map(|j| stack.at(sl, h / 2, j)));
    }
    let shift = (h / 2) as isize - (w / 2) as isize;
    for sl in 0..l {
        pixels.extend((0..w).map(|o| {
            let i = o as isize + shift;
            if (0..h as isize).contains(&i) {
                stack.at(sl, i as usize, w / 2)
            } else {
                0.0
            }
        }));
    }
    SlicePair { dims: [l, w], pixels }
}

/// Intensity normalisation statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

const MIN_STD: f64 = 1e-12;

impl NormStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !mean.is_finite() || !(std > MIN_STD) || !std.is_finite() {
            return Err(Error::DegenerateStatistics(std));
        }
        Ok(Self { mean, std })
    }

    /// Mean and population standard deviation over all values of all
    /// samples.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let (mut n, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
        for s in samples {
            for &v in s {
                // Welford
                n += 1;
                let x = f64::from(v);
                let d = x - mean;
                mean += d / n as f64;
                m2 += d * (x - mean);
            }
        }
        if n == 0 {
            return Err(Error::NoSamples);
        }
        Self::new(mean, (m2 / n as f64).sqrt())
    }
}

/// `(x − mean)/std` elementwise.
pub fn normalize(pixels: &[f64], stats: NormStats) -> Result<Vec<f64>> {
    let s = NormStats::new(stats.mean, stats.std)?;
    Ok(pixels.iter().map(|&x| (x - s.mean) / s.std).collect())
}

pub fn denormalize(pixels: &[f64], stats: NormStats) -> Result<Vec<f64>> {
    let s = NormStats::new(stats.mean, stats.std)?;
    Ok(pixels.iter().map(|&x| x * s.std + s.mean).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(l: usize, hw: usize, f: impl Fn(usize, usize, usize) -> f64) -> MprStack {
        let mut px = Vec::with_capacity(l * hw * hw);
        for a in 0..l {
            for i in 0..hw {
                for j in 0..hw {
                    px.push(f(a, i, j));
                }
            }
        }
        MprStack::new([l, hw, hw], 0.5, 0.5, px).unwrap()
    }

    #[test]
    fn intermediate_resize_shape_and_identity() {
        let s = stack(100, 4, |l, i, j| (l * 3 + i + j) as f64);
        assert_eq!(apply_padding(&s, PaddingStrategy::intermediate()).unwrap().dims, [64, 4, 4]);
        let s = stack(64, 4, |l, i, j| (l * l + i * j) as f64);
        assert_eq!(apply_padding(&s, PaddingStrategy::intermediate()).unwrap().pixels, s.pixels);
    }

    #[test]
    fn zero_pad_centers() {
        let s = stack(60, 2, |l, _, _| l as f64 + 1.0);
        let p = apply_padding(&s, PaddingStrategy::zero()).unwrap();
        assert_eq!(p.dims, [170, 2, 2]);
        for l in 0..170 {
            let v = p.slice(l)[0];
            if (55..115).contains(&l) {
                assert_eq!(v, (l - 55) as f64 + 1.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
        let long = stack(171, 2, |_, _, _| 1.0);
        let err = apply_padding(&long, PaddingStrategy::zero()).unwrap_err();
        assert!(err.to_string().starts_with("lesion longer than pad target"));
    }

    #[test]
    fn stretch_keeps_end_slices() {
        let s = stack(37, 2, |l, i, _| (l * 2 + i) as f64);
        let p = apply_padding(&s, PaddingStrategy::stretch()).unwrap();
        assert_eq!(p.slice(0), s.slice(0));
        assert_eq!(p.slice(169), s.slice(36));
        // linear in l stays linear
        for o in 0..170 {
            let src = o as f64 * 36.0 / 169.0;
            assert!((p.slice(o)[0] - 2.0 * src).abs() < 1e-9);
        }
    }

    #[test]
    fn cube_counts() {
        for (l, n) in [(25, 1), (29, 1), (30, 2), (145, 25), (170, 30)] {
            let s = stack(l, 25, |l, _, _| l as f64);
            let c = cube_sequence(&s).unwrap();
            assert_eq!(c.len(), n);
            assert_eq!(c.cubes[0].len(), 25 * 25 * 25);
        }
        let s = stack(25, 25, |l, i, j| (l + i * j) as f64);
        assert_eq!(cube_sequence(&s).unwrap().cubes[0], s.pixels);
        let err = cube_sequence(&stack(24, 25, |_, _, _| 0.0)).unwrap_err();
        assert_eq!(err.to_string(), "stack too short for cube sequencing: 24 < 25");
    }

    #[test]
    fn downscale_constant_and_ramp() {
        let s = stack(3, 32, |_, _, _| 7.5);
        let d = downscale_inplane(&s, 25).unwrap();
        assert_eq!(d.dims, [3, 25, 25]);
        assert!(d.pixels.iter().all(|&v| (v - 7.5).abs() < 1e-12));
        let s = stack(1, 32, |_, i, j| (i + j) as f64);
        let d = downscale_inplane(&s, 25).unwrap();
        for i in 0..25 {
            for j in 0..25 {
                let want = (i + j) as f64 * 31.0 / 24.0;
                assert!((d.at(0, i, j) - want).abs() < 1e-9);
            }
        }
        assert!(downscale_inplane(&stack(1, 16, |_, _, _| 0.0), 25).is_err());
    }

    #[test]
    fn pair_of_slice_constant_stack() {
        let s = stack(5, 8, |l, _, _| l as f64 * 2.0);
        let p = slice_pair(&s);
        assert_eq!(p.shape(), [2, 5, 8]);
        for c in 0..2 {
            for l in 0..5 {
                assert!(p.channel(c)[l * 8..(l + 1) * 8].iter().all(|&v| v == l as f64 * 2.0));
            }
        }
    }

    #[test]
    fn pair_channels_pick_row_and_column() {
        let s = stack(2, 8, |l, i, j| (100 * l + 10 * i + j) as f64);
        let p = slice_pair(&s);
        assert_eq!(&p.channel(0)[..8], &[40.0, 41.0, 42.0, 43.0, 44.0, 45.0, 46.0, 47.0]);
        assert_eq!(&p.channel(1)[8..16], &[104.0, 114.0, 124.0, 134.0, 144.0, 154.0, 164.0, 174.0]);
    }

    #[test]
    fn normalisation() {
        let st = NormStats::from_samples([&[0.0f32, 400.0, 0.0, 400.0][..]]).unwrap();
        assert_eq!((st.mean, st.std), (200.0, 200.0));
        assert_eq!(normalize(&[0.0, 400.0], st).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(normalize(&[200.0; 3], st).unwrap(), vec![0.0; 3]);
        let x = [1.5, -3.25, 1e3];
        let back = denormalize(&normalize(&x, st).unwrap(), st).unwrap();
        assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-7));
        let err = NormStats::from_samples([&[3.0f32; 4][..]]).unwrap_err();
        assert!(err.to_string().starts_with("degenerate statistics"));
    }

    #[test]
    fn padding_names_parse() {
        for name in ["zero", "stretch", "intermediate"] {
            assert_eq!(name.parse::<PaddingStrategy>().unwrap().name(), name);
        }
        assert!("mirror".parse::<PaddingStrategy>().is_err());
    }
}
