use super::metrics::{compute_metrics, Metrics};
use super::splits::{Split, SplitPlan};
use crate::error::{Error, Result};
use crate::labels::{LabeledSample, Target};
use crate::nn::{build_25d_model, predict_many, train, ModelState, NormStats, TrainConfig, TrainSet};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

/// Something that can be trained on samples and then score new ones.
pub trait Learner: Sync {
    fn fit(&self, train: &[&LabeledSample], target: Target, seed: u64) -> Result<Box<dyn Scorer>>;
}

pub trait Scorer: Send + Sync {
    /// Positive-class probability of every view.
    fn score_views(&self, views: &[&LabeledSample]) -> Result<Vec<f64>>;
}

/// The 2.5D CNN, trained from scratch per split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CnnLearner {
    /// `seed` and `target` are replaced per split.
    pub config: TrainConfig,
}

impl CnnLearner {
    /// Builds, normalises and trains a model on `train`.
    pub fn fit_model(&self, train_samples: &[&LabeledSample], target: Target, seed: u64) -> Result<ModelState> {
        let first = train_samples.first().ok_or(Error::NoSamples)?;
        let input: [usize; 3] = first.shape.as_slice().try_into().map_err(|_| {
            Error::ArchitectureMismatch(format!("2.5D model needs [C, H, W] samples, got {:?}", first.shape))
        })?;
        let mut model = build_25d_model(input, seed)?;
        let inputs: Vec<&[f32]> = train_samples.iter().map(|s| s.tensor.as_slice()).collect();
        model.norm = Some(NormStats::from_samples(inputs.iter().copied())?);
        let labels = train_samples.iter().map(|s| f64::from(u8::from(s.label(target)))).collect();
        let cfg = TrainConfig { seed, target, ..self.config };
        train(&mut model, &TrainSet { inputs, labels }, &cfg)?;
        Ok(model)
    }
}

struct CnnScorer(ModelState);

impl Scorer for CnnScorer {
    fn score_views(&self, views: &[&LabeledSample]) -> Result<Vec<f64>> {
        let inputs: Vec<&[f32]> = views.iter().map(|s| s.tensor.as_slice()).collect();
        predict_many(&self.0, &inputs)
    }
}

impl Learner for CnnLearner {
    fn fit(&self, train: &[&LabeledSample], target: Target, seed: u64) -> Result<Box<dyn Scorer>> {
        Ok(Box::new(CnnScorer(self.fit_model(train, target, seed)?)))
    }
}

/// Scores every view with its true label; a harness check.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleLearner;

struct OracleScorer(Target);

impl Scorer for OracleScorer {
    fn score_views(&self, views: &[&LabeledSample]) -> Result<Vec<f64>> {
        Ok(views.iter().map(|s| if s.label(self.0) { 1.0 } else { 0.0 }).collect())
    }
}

impl Learner for OracleLearner {
    fn fit(&self, _: &[&LabeledSample], target: Target, _: u64) -> Result<Box<dyn Scorer>> {
        Ok(Box::new(OracleScorer(target)))
    }
}

/// Scores everything with one constant.
#[derive(Debug, Clone, Copy)]
pub struct ConstantLearner(pub f64);

impl Scorer for ConstantLearner {
    fn score_views(&self, views: &[&LabeledSample]) -> Result<Vec<f64>> {
        Ok(vec![self.0; views.len()])
    }
}

impl Learner for ConstantLearner {
    fn fit(&self, _: &[&LabeledSample], _: Target, _: u64) -> Result<Box<dyn Scorer>> {
        Ok(Box::new(*self))
    }
}

/// All views of one lesion, ordered by view index.
#[derive(Debug, Clone)]
pub struct LesionViews<'a> {
    pub patient_id: &'a str,
    pub lesion_id: &'a str,
    pub views: Vec<&'a LabeledSample>,
}

impl LesionViews<'_> {
    pub fn label(&self, target: Target) -> bool {
        self.views[0].label(target)
    }
}

/// Groups samples by lesion, lesions in order of first appearance.
pub fn group_lesions(samples: &[LabeledSample]) -> Result<Vec<LesionViews<'_>>> {
    let mut at: HashMap<&str, usize> = HashMap::new();
    let mut out: Vec<LesionViews<'_>> = Vec::new();
    for s in samples {
        let i = *at.entry(s.lesion_id.as_str()).or_insert_with(|| {
            out.push(LesionViews { patient_id: &s.patient_id, lesion_id: &s.lesion_id, views: Vec::new() });
            out.len() - 1
        });
        let first = out[i].views.first();
        if let Some(f) = first {
            if f.significant != s.significant || f.revascularised != s.revascularised || f.patient_id != s.patient_id {
                return Err(Error::InvalidArgument(format!("views of lesion {} disagree on labels", s.lesion_id)));
            }
        }
        out[i].views.push(s);
    }
    for l in &mut out {
        l.views.sort_by_key(|s| s.view_k);
    }
    Ok(out)
}

/// Which lesion-level prediction rows to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TtaMode {
    On,
    Off,
    Both,
}

impl TtaMode {
    fn flags(self) -> &'static [bool] {
        match self {
            TtaMode::On => &[true],
            TtaMode::Off => &[false],
            TtaMode::Both => &[false, true],
        }
    }
}

impl std::str::FromStr for TtaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(TtaMode::On),
            "off" => Ok(TtaMode::Off),
            "both" => Ok(TtaMode::Both),
            other => Err(Error::InvalidArgument(format!("tta must be on, off or both, not {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub targets: Vec<Target>,
    pub tta: TtaMode,
    pub threshold: f64,
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { targets: Target::ALL.to_vec(), tta: TtaMode::Both, threshold: 0.5, jobs: None }
    }
}

/// Metrics of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub target: Target,
    pub tta: bool,
    pub split_rep: usize,
    pub split_fold: usize,
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub mcc: f64,
}

impl SplitRow {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            auc: self.auc,
            accuracy: self.accuracy,
            f1: self.f1,
            sensitivity: self.sensitivity,
            specificity: self.specificity,
            mcc: self.mcc,
        }
    }
}

/// Mean and sample standard deviation of one metric over the splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub target: Target,
    pub tta: bool,
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

/// Lesion-level test score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub target: Target,
    pub tta: bool,
    pub split_rep: usize,
    pub split_fold: usize,
    pub patient_id: String,
    pub lesion_id: String,
    pub label: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CvReport {
    pub splits: Vec<SplitRow>,
    pub summary: Vec<SummaryRow>,
    pub predictions: Vec<PredictionRow>,
}

impl CvReport {
    pub fn summary_value(&self, target: Target, tta: bool, metric: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.target == target && r.tta == tta && r.metric == metric)
    }

    /// Mean AUC of a (target, tta) group.
    pub fn mean_auc(&self, target: Target, tta: bool) -> Option<f64> {
        self.summary_value(target, tta, "auc").and_then(|r| r.mean)
    }
}

/// Training samples and test lesions of a split, after checking that no
/// patient is on both sides.
pub fn partition<'a>(
    samples: &'a [LabeledSample],
    lesions: &[LesionViews<'a>],
    split: &Split,
) -> Result<(Vec<&'a LabeledSample>, Vec<LesionViews<'a>>)> {
    let train_ids: HashSet<&str> = split.train_patients.iter().map(String::as_str).collect();
    let test_ids: HashSet<&str> = split.test_patients.iter().map(String::as_str).collect();
    let train: Vec<&LabeledSample> = samples.iter().filter(|s| train_ids.contains(s.patient_id.as_str())).collect();
    let test: Vec<LesionViews<'a>> = lesions.iter().filter(|l| test_ids.contains(l.patient_id)).cloned().collect();
    let seen: HashSet<&str> = train.iter().map(|s| s.patient_id.as_str()).collect();
    if let Some(l) = test.iter().find(|l| seen.contains(l.patient_id)) {
        return Err(Error::PatientLeakage {
            rep: split.repetition,
            fold: split.fold,
            patient: l.patient_id.to_string(),
        });
    }
    Ok((train, test))
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some(var.sqrt()))
}

/// Summary rows for every (target, tta) group present in `rows`, groups
/// in first-appearance order.
pub fn summarize(rows: &[SplitRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<(Target, bool)> = Vec::new();
    for r in rows {
        if !groups.contains(&(r.target, r.tta)) {
            groups.push((r.target, r.tta));
        }
    }
    let mut out = Vec::new();
    for (target, tta) in groups {
        let members: Vec<Metrics> =
            rows.iter().filter(|r| r.target == target && r.tta == tta).map(SplitRow::metrics).collect();
        for (m, name) in Metrics::NAMES.iter().enumerate() {
            let vals: Vec<f64> = members.iter().filter_map(|x| x.values()[m]).collect();
            if vals.len() < members.len() {
                log::warn!(
                    "{target} tta={tta}: {name} missing in {} of {} splits (single-class test fold); excluded from the mean",
                    members.len() - vals.len(),
                    members.len()
                );
            }
            let (mean, std) = mean_std(&vals);
            out.push(SummaryRow { target, tta, metric: name.to_string(), mean, std });
        }
    }
    out
}

struct JobResult {
    rows: Vec<SplitRow>,
    predictions: Vec<PredictionRow>,
}

fn run_job(
    samples: &[LabeledSample],
    lesions: &[LesionViews<'_>],
    split: &Split,
    target: Target,
    learner: &dyn Learner,
    opts: &CvOptions,
) -> Result<JobResult> {
    let (train, test) = partition(samples, lesions, split)?;
    if test.is_empty() {
        return Err(Error::NoSamples);
    }
    let scorer = learner.fit(&train, target, split.init_seed)?;
    let per_lesion: Vec<Vec<f64>> = test.iter().map(|l| scorer.score_views(&l.views)).collect::<Result<_>>()?;
    let labels: Vec<bool> = test.iter().map(|l| l.label(target)).collect();
    let mut rows = Vec::new();
    let mut predictions = Vec::new();
    for &tta in opts.tta.flags() {
        let scores: Vec<f64> =
            per_lesion.iter().map(|p| if tta { p.iter().sum::<f64>() / p.len() as f64 } else { p[0] }).collect();
        let m = compute_metrics(&labels, &scores, opts.threshold)?;
        if m.auc.is_none() {
            log::warn!(
                "{target} split {}/{}: test fold holds a single class; AUC recorded as missing",
                split.repetition,
                split.fold
            );
        }
        rows.push(SplitRow {
            target,
            tta,
            split_rep: split.repetition,
            split_fold: split.fold,
            auc: m.auc,
            accuracy: m.accuracy,
            f1: m.f1,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            mcc: m.mcc,
        });
        for ((l, &y), &s) in test.iter().zip(&labels).zip(&scores) {
            predictions.push(PredictionRow {
                target,
                tta,
                split_rep: split.repetition,
                split_fold: split.fold,
                patient_id: l.patient_id.to_string(),
                lesion_id: l.lesion_id.to_string(),
                label: y,
                score: s,
            });
        }
    }
    Ok(JobResult { rows, predictions })
}

/// Trains one model per (split, target) and evaluates it at lesion level on
/// the split's test patients. Jobs run in parallel; results are merged in
/// (target, tta, split) order, so the report does not depend on
/// scheduling.
pub fn cross_validate(
    samples: &[LabeledSample],
    plan: &SplitPlan,
    learner: &dyn Learner,
    opts: &CvOptions,
) -> Result<CvReport> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    if !(opts.threshold > 0.0 && opts.threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {} outside (0, 1)", opts.threshold)));
    }
    let lesions = group_lesions(samples)?;
    let jobs: Vec<(Target, &Split)> =
        opts.targets.iter().flat_map(|&t| plan.splits.iter().map(move |s| (t, s))).collect();
    let run = || -> Result<Vec<JobResult>> {
        jobs.par_iter().map(|&(t, s)| run_job(samples, &lesions, s, t, learner, opts)).collect()
    };
    let results = match opts.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let mut report = CvReport::default();
    for &target in &opts.targets {
        for &tta in opts.tta.flags() {
            for r in &results {
                report.splits.extend(r.rows.iter().filter(|x| x.target == target && x.tta == tta).cloned());
                report.predictions.extend(r.predictions.iter().filter(|x| x.target == target && x.tta == tta).cloned());
            }
        }
    }
    report.summary = summarize(&report.splits);
    Ok(report)
}
