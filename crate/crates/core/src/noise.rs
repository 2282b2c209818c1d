//! Suspicion scoring and re-measurement for noisy records.
//!
//! Training data is cleaned by re-measuring every record whose score is a
//! robust outlier and replacing it with the average observation. Test
//! instances go through the same detector, but their re-measurements are
//! first compared with each other: only a spread-out set of measurements
//! confirms noise and triggers averaging.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{parse_caption, DatasetManifest, DatasetRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::patchify;

/// Consistency factor turning a MAD into a normal-theory standard deviation.
pub const MAD_SCALE: f64 = 1.4826;
pub const MIN_FIT_RECORDS: usize = 8;

/// Median/MAD statistics of suspicion scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuspicionStats {
    pub tau: f64,
    fitted: Option<(f64, f64)>,
}

impl SuspicionStats {
    pub fn unfitted(tau: f64) -> Self {
        SuspicionStats { tau, fitted: None }
    }

    /// Fits location and scale. A zero MAD (more than half the scores
    /// identical) falls back to the mean absolute deviation and then to a
    /// tiny positive floor, so the scale is always positive.
    pub fn fit(scores: &[f64], tau: f64) -> Result<Self> {
        if scores.len() < MIN_FIT_RECORDS {
            return Err(Error::TooFewSamples {
                needed: MIN_FIT_RECORDS,
                got: scores.len(),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite { op: "suspicion scores" });
        }
        let m = median(scores);
        let dev: Vec<f64> = scores.iter().map(|s| (s - m).abs()).collect();
        let mut scale = MAD_SCALE * median(&dev);
        if scale <= 0.0 {
            scale = dev.iter().sum::<f64>() / dev.len() as f64 * (std::f64::consts::PI / 2.0).sqrt();
        }
        if scale <= 0.0 {
            scale = f64::EPSILON * m.abs().max(1.0);
        }
        Ok(SuspicionStats {
            tau,
            fitted: Some((m, scale)),
        })
    }

    pub fn median(&self) -> Option<f64> {
        self.fitted.map(|f| f.0)
    }

    pub fn scale(&self) -> Option<f64> {
        self.fitted.map(|f| f.1)
    }

    /// Robust z-score `|score - median| / scale`.
    pub fn z(&self, score: f64) -> Result<f64> {
        let (m, s) = self.fitted.ok_or(Error::UnfittedStats)?;
        Ok((score - m).abs() / s)
    }

    pub fn is_suspicious(&self, score: f64) -> Result<bool> {
        Ok(self.z(score)? > self.tau)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// How a suspicious test instance is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AveragingRule {
    /// Average only when the re-measurements disagree by more than `delta`.
    WhenDispersed,
    /// Average every suspicious instance.
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemeasurePolicy {
    pub rounds: usize,
    /// Relative dispersion threshold.
    pub delta: f64,
    pub rule: AveragingRule,
}

impl Default for RemeasurePolicy {
    fn default() -> Self {
        RemeasurePolicy {
            rounds: 3,
            delta: 0.15,
            rule: AveragingRule::WhenDispersed,
        }
    }
}

impl RemeasurePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 2 {
            return Err(Error::OutOfRange(format!("rounds {} < 2", self.rounds)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::OutOfRange(format!("delta {} must be > 0", self.delta)));
        }
        Ok(())
    }
}

pub fn suspicion_score(
    record: &DatasetRecord,
    scorer: &mut dyn FnMut(&DatasetRecord) -> Result<f64>,
    stats: &SuspicionStats,
) -> Result<(f64, bool)> {
    // Check the fit first so an unfitted detector never runs the scorer.
    stats.z(0.0)?;
    let score = scorer(record)?;
    if !score.is_finite() {
        return Err(Error::NonFinite { op: "suspicion score" });
    }
    Ok((score, stats.is_suspicious(score)?))
}

/// Elementwise mean of equally shaped images.
pub fn mean_image(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyBatch)?;
    let mut acc = vec![0.0; first.len()];
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "mean_image",
                left: first.shape().to_vec(),
                right: im.shape().to_vec(),
            });
        }
        for (a, v) in acc.iter_mut().zip(im.data()) {
            *a += v;
        }
    }
    let n = images.len() as f64;
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|a| a / n).collect())
}

fn rms(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    (values.map(|v| v * v).sum::<f64>() / n as f64).sqrt()
}

/// Mean pairwise per-pixel RMS distance divided by the mean per-pixel RMS
/// magnitude of the measurements. Zero for identical measurements.
pub fn relative_dispersion(images: &[Tensor]) -> f64 {
    if images.len() < 2 {
        return 0.0;
    }
    let n = images[0].len();
    let mut dist = 0.0;
    let mut pairs = 0usize;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let d = images[i].data().iter().zip(images[j].data()).map(|(a, b)| a - b);
            dist += rms(d, n);
            pairs += 1;
        }
    }
    let mag = images.iter().map(|im| rms(im.data().iter().copied(), n)).sum::<f64>() / images.len() as f64;
    if mag == 0.0 {
        return if dist == 0.0 { 0.0 } else { f64::INFINITY };
    }
    dist / pairs as f64 / mag
}

/// Most frequent caption among the measurements; a tie for the top count
/// keeps `original`.
pub fn majority_caption(original: &str, measured: &[&str]) -> String {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for &c in measured {
        match counts.iter_mut().find(|(k, _)| *k == c) {
            Some(e) => e.1 += 1,
            None => counts.push((c, 1)),
        }
    }
    let best = counts.iter().map(|e| e.1).max().unwrap_or(0);
    let top: Vec<&str> = counts.iter().filter(|e| e.1 == best).map(|e| e.0).collect();
    if top.len() == 1 {
        top[0].to_string()
    } else {
        original.to_string()
    }
}

fn remeasure_all(
    record: &DatasetRecord,
    rounds: usize,
    remeasure: &mut dyn FnMut(&DatasetRecord) -> Result<DatasetRecord>,
) -> Result<Vec<DatasetRecord>> {
    (0..rounds)
        .map(|_| {
            remeasure(record).map_err(|e| Error::Remeasure {
                record_id: record.record_id,
                message: e.to_string(),
            })
        })
        .collect()
}

fn averaged(record: &DatasetRecord, measurements: &[DatasetRecord]) -> Result<DatasetRecord> {
    let images: Vec<Tensor> = measurements.iter().map(|m| m.image.clone()).collect();
    let captions: Vec<&str> = measurements.iter().map(|m| m.caption.as_str()).collect();
    let mut out = record.clone();
    out.image = mean_image(&images)?;
    out.caption = majority_caption(&record.caption, &captions);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Kept,
    Replaced,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Kept => "kept",
            Action::Replaced => "replaced",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleaningRow {
    pub record_id: u64,
    pub score: f64,
    pub z: f64,
    pub action: Action,
    pub dispersion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CleaningReport {
    pub rows: Vec<CleaningRow>,
}

impl CleaningReport {
    pub const HEADER: &'static str = "record_id\tscore\tz\taction\tdispersion";

    pub fn replaced(&self) -> usize {
        self.rows.iter().filter(|r| r.action == Action::Replaced).count()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let disp = r.dispersion.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.record_id, r.score, r.z, r.action.as_str(), disp);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

/// Scores every record, fits the detector on those scores, and replaces
/// each suspicious record with the average of `policy.rounds`
/// re-measurements (majority caption). Record order and ids are preserved.
pub fn clean_training_set(
    manifest: &DatasetManifest,
    policy: &RemeasurePolicy,
    scorer: &mut dyn FnMut(&DatasetRecord) -> Result<f64>,
    remeasure: &mut dyn FnMut(&DatasetRecord) -> Result<DatasetRecord>,
    tau: f64,
) -> Result<(DatasetManifest, CleaningReport, SuspicionStats)> {
    policy.validate()?;
    let scores = manifest.records.iter().map(&mut *scorer).collect::<Result<Vec<f64>>>()?;
    let stats = SuspicionStats::fit(&scores, tau)?;
    let mut out = manifest.clone();
    let mut report = CleaningReport::default();
    for (rec, &score) in out.records.iter_mut().zip(&scores) {
        let z = stats.z(score)?;
        let mut row = CleaningRow {
            record_id: rec.record_id,
            score,
            z,
            action: Action::Kept,
            dispersion: None,
        };
        if z > tau {
            let ms = remeasure_all(rec, policy.rounds, remeasure)?;
            let images: Vec<Tensor> = ms.iter().map(|m| m.image.clone()).collect();
            row.dispersion = Some(relative_dispersion(&images));
            *rec = averaged(rec, &ms)?;
            row.action = Action::Replaced;
        }
        report.rows.push(row);
    }
    Ok((out, report, stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionTrace {
    pub score: f64,
    pub z: f64,
    pub suspicious: bool,
    pub dispersion: Option<f64>,
    pub action: Action,
}

pub fn resolve_test_instance(
    q: &DatasetRecord,
    policy: &RemeasurePolicy,
    scorer: &mut dyn FnMut(&DatasetRecord) -> Result<f64>,
    stats: &SuspicionStats,
    remeasure: &mut dyn FnMut(&DatasetRecord) -> Result<DatasetRecord>,
) -> Result<(DatasetRecord, ResolutionTrace)> {
    policy.validate()?;
    let (score, suspicious) = suspicion_score(q, scorer, stats)?;
    let mut trace = ResolutionTrace {
        score,
        z: stats.z(score)?,
        suspicious,
        dispersion: None,
        action: Action::Kept,
    };
    if !suspicious {
        return Ok((q.clone(), trace));
    }
    let ms = remeasure_all(q, policy.rounds, remeasure)?;
    let images: Vec<Tensor> = ms.iter().map(|m| m.image.clone()).collect();
    let dispersion = relative_dispersion(&images);
    trace.dispersion = Some(dispersion);
    if policy.rule == AveragingRule::Always || dispersion > policy.delta {
        trace.action = Action::Replaced;
        return Ok((averaged(q, &ms)?, trace));
    }
    Ok((q.clone(), trace))
}

/// Model-free scorer: distance from a record's mean patch vector to the
/// centroid of all records sharing its caption. Classes with fewer than
/// three records, where one bad record would drag the centroid onto
/// itself, use the clean render of the caption's scene instead.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidScorer {
    centroids: HashMap<String, Vec<f64>>,
}

fn patch_mean(image: &Tensor) -> Result<Vec<f64>> {
    let grid = patchify(image)?;
    let mut m = vec![0.0; grid.patches[0].len()];
    for p in &grid.patches {
        for (a, v) in m.iter_mut().zip(p) {
            *a += v;
        }
    }
    let n = grid.patches.len() as f64;
    Ok(m.into_iter().map(|v| v / n).collect())
}

impl CentroidScorer {
    pub fn fit(records: &[DatasetRecord]) -> Result<Self> {
        let mut sums: HashMap<String, (Vec<f64>, usize)> = HashMap::new();
        for r in records {
            parse_caption(&r.caption)?;
            let f = patch_mean(&r.image)?;
            let e = sums.entry(r.caption.clone()).or_insert_with(|| (vec![0.0; f.len()], 0));
            for (a, v) in e.0.iter_mut().zip(&f) {
                *a += v;
            }
            e.1 += 1;
        }
        let centroids = sums
            .into_iter()
            .filter(|(_, (_, n))| *n >= 3)
            .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        Ok(CentroidScorer { centroids })
    }

    pub fn score(&self, record: &DatasetRecord) -> Result<f64> {
        let f = patch_mean(&record.image)?;
        let c = match self.centroids.get(&record.caption) {
            Some(c) => c.clone(),
            None => patch_mean(&crate::data::render(&parse_caption(&record.caption)?))?,
        };
        Ok(f.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }
}
