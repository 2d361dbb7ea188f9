use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// Message strings are stable: the CLI and the tests match on them.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid coordinate: ({0}, {1}, {2})")]
    InvalidCoordinate(f64, f64, f64),
    #[error("corrupt volume: {0}")]
    CorruptVolume(String),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("invalid phantom spec: {0}")]
    InvalidPhantomSpec(String),
    #[error("phantom out of bounds: {0}")]
    PhantomOutOfBounds(String),
    #[error("degenerate centerline: {0}")]
    DegenerateCenterline(String),
    #[error("lesion out of range: start {start}, end {end}, centerline length {len}")]
    LesionOutOfRange { start: usize, end: usize, len: usize },
    #[error("invalid view index: {0}")]
    InvalidViewIndex(usize),
    #[error("invalid stack: {0}")]
    InvalidStack(String),
    #[error("lesion longer than pad target: {len} > {target}")]
    LesionLongerThanPadTarget { len: usize, target: usize },
    #[error("stack too short for cube sequencing: {0} < 25")]
    StackTooShort(usize),
    #[error("cannot downscale upward: {from} -> {to}")]
    CannotDownscaleUpward { from: usize, to: usize },
    #[error("degenerate statistics: std = {0}")]
    DegenerateStatistics(f64),
    #[error("invalid grade: {0}")]
    InvalidGrade(f64),
    #[error("unassignable label: revascularised branch {0} has no lesions")]
    UnassignableLabel(String),
    #[error("broken manifest reference: {}", .0.display())]
    BrokenReference(PathBuf),
    #[error("architecture/input mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("batch too small for batchnorm: {0} sample(s)")]
    BatchTooSmall(usize),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("corrupt gradient: {0}")]
    CorruptGradient(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("no views")]
    NoViews,
    #[error("AUC undefined: labels contain a single class")]
    AucUndefined,
    #[error("no samples")]
    NoSamples,
    #[error("too few patients: {patients} for {folds} folds")]
    TooFewPatients { patients: usize, folds: usize },
    #[error("patient leakage in split rep {rep} fold {fold}: {patient}")]
    PatientLeakage { rep: usize, fold: usize, patient: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
