//! Parcellation scoring: accuracy, macro-F1, tract identification rate and
//! atlas-to-tract distance, broken down by cut status.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tract::{CutStatus, Point, Tractogram};

pub const DEFAULT_MIN_STREAMLINES: usize = 20;

fn check_aligned(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("no predictions".into()));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_aligned(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// `counts[truth][pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Confusion {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Confusion {
        Confusion { num_classes, counts: vec![vec![0; num_classes]; num_classes] }
    }

    pub fn from_labels(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<Confusion> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        let mut c = Confusion::new(num_classes);
        for (&p, &t) in pred.iter().zip(truth) {
            if p.max(t) >= num_classes {
                return Err(Error::LabelOutOfRange { label: p.max(t), num_classes });
            }
            c.counts[t][p] += 1;
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&self, other: &Confusion) -> Result<Confusion> {
        if self.num_classes != other.num_classes {
            return Err(Error::ShapeMismatch("confusion matrices of different size".into()));
        }
        let mut c = self.clone();
        for (row, orow) in c.counts.iter_mut().zip(&other.counts) {
            for (x, y) in row.iter_mut().zip(orow) {
                *x += y;
            }
        }
        Ok(c)
    }

    pub fn class_scores(&self, class: usize) -> ClassScores {
        let tp = self.counts[class][class];
        let support: u64 = self.counts[class].iter().sum();
        let predicted: u64 = self.counts.iter().map(|r| r[class]).sum();
        let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        ClassScores { class, support, predicted, precision, recall, f1 }
    }

    /// Mean F1 over `scope`, skipping classes with no true and no predicted
    /// instances.
    pub fn macro_f1(&self, scope: &[usize]) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0;
        for &c in scope {
            if c >= self.num_classes {
                return Err(Error::LabelOutOfRange { label: c, num_classes: self.num_classes });
            }
            let s = self.class_scores(c);
            if s.support == 0 && s.predicted == 0 {
                continue;
            }
            sum += s.f1;
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyInput("no scoped class occurs in truth or predictions".into()));
        }
        Ok(sum / n as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassScores {
    pub class: usize,
    pub support: u64,
    pub predicted: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Every class except `0`, the "other" class.
pub fn default_scope(num_classes: usize) -> Vec<usize> {
    (1..num_classes).collect()
}

pub fn macro_f1(pred: &[usize], truth: &[usize], scope: &[usize]) -> Result<f64> {
    check_aligned(pred, truth)?;
    let num_classes = pred.iter().chain(truth).chain(scope).max().map_or(0, |m| m + 1);
    Confusion::from_labels(pred, truth, num_classes)?.macro_f1(scope)
}

/// Streamline ids per predicted class for one subject.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parcellation {
    pub subject_id: String,
    pub class_names: Vec<String>,
    pub parcels: Vec<Vec<usize>>,
}

impl Parcellation {
    pub fn from_predictions(subject_id: &str, class_names: &[String], pred: &[usize]) -> Result<Parcellation> {
        let mut parcels = vec![Vec::new(); class_names.len()];
        for (id, &p) in pred.iter().enumerate() {
            let parcel = parcels
                .get_mut(p)
                .ok_or(Error::LabelOutOfRange { label: p, num_classes: class_names.len() })?;
            parcel.push(id);
        }
        Ok(Parcellation { subject_id: subject_id.to_string(), class_names: class_names.to_vec(), parcels })
    }

    pub fn count(&self, class: usize) -> usize {
        self.parcels.get(class).map_or(0, Vec::len)
    }
}

/// Fraction of `expected` tracts with at least `min_streamlines` streamlines.
pub fn tir(parcellation: &Parcellation, expected: &[usize], min_streamlines: usize) -> Result<f64> {
    if expected.is_empty() {
        return Err(Error::EmptyInput("expected tract list is empty".into()));
    }
    let identified = expected.iter().filter(|&&c| parcellation.count(c) >= min_streamlines).count();
    Ok(identified as f64 / expected.len() as f64)
}

/// Reference point sets per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Atlas {
    pub tracts: Vec<Vec<Point>>,
}

impl Atlas {
    /// Pools the points of every labeled streamline by class.
    pub fn from_tractogram(t: &Tractogram, num_classes: usize) -> Result<Atlas> {
        let mut tracts = vec![Vec::new(); num_classes];
        for s in t.streamlines() {
            if let Some(label) = s.label {
                tracts
                    .get_mut(label)
                    .ok_or(Error::LabelOutOfRange { label, num_classes })?
                    .extend_from_slice(s.points());
            }
        }
        Ok(Atlas { tracts })
    }
}

/// Mean distance from each point of `tract` to its nearest point of
/// `reference`, scanned exhaustively.
pub fn tract_to_atlas_distance(tract: &[Point], reference: &[Point]) -> Result<f64> {
    if tract.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput("tract or atlas reference has no points".into()));
    }
    let mut total = 0.0;
    for p in tract {
        let mut best = f64::INFINITY;
        for q in reference {
            best = best.min((p - q).norm_squared());
        }
        total += best.sqrt();
    }
    Ok(total / tract.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TractDistance {
    pub class: usize,
    pub streamlines: usize,
    /// `None` when the tract was not identified or has no atlas reference.
    pub atd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtdReport {
    pub tracts: Vec<TractDistance>,
    /// Mean over scored tracts; `None` when no tract was scored.
    pub mean: Option<f64>,
    pub missing: Vec<usize>,
}

/// Atlas-to-tract distance for each of `classes` that has at least
/// `min_streamlines` predicted streamlines in `t`.
pub fn atd(
    parcellation: &Parcellation,
    t: &Tractogram,
    atlas: &Atlas,
    classes: &[usize],
    min_streamlines: usize,
) -> Result<AtdReport> {
    let mut tracts = Vec::with_capacity(classes.len());
    let mut missing = Vec::new();
    let mut scored = Vec::new();
    for &c in classes {
        let ids = parcellation.parcels.get(c).map_or(&[][..], Vec::as_slice);
        let reference = atlas.tracts.get(c).filter(|r| !r.is_empty());
        let value = match reference {
            Some(r) if !ids.is_empty() && ids.len() >= min_streamlines => {
                let mut points = Vec::new();
                for &id in ids {
                    let s = t
                        .streamlines()
                        .get(id)
                        .ok_or(Error::IndexOutOfRange { index: id, len: t.len() })?;
                    points.extend_from_slice(s.points());
                }
                Some(tract_to_atlas_distance(&points, r)?)
            }
            _ => None,
        };
        match value {
            Some(v) => scored.push(v),
            None => missing.push(c),
        }
        tracts.push(TractDistance { class: c, streamlines: ids.len(), atd: value });
    }
    let mean = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(AtdReport { tracts, mean, missing })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupMetrics {
    pub count: usize,
    /// `None` for an empty group.
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub per_class: Vec<ClassScores>,
    pub confusion: Confusion,
}

impl GroupMetrics {
    pub fn from_confusion(confusion: Confusion, scope: &[usize]) -> GroupMetrics {
        let count = confusion.total() as usize;
        let hits: u64 = (0..confusion.num_classes).map(|c| confusion.counts[c][c]).sum();
        let accuracy = (count > 0).then(|| hits as f64 / count as f64);
        let macro_f1 = if count > 0 { confusion.macro_f1(scope).ok() } else { None };
        let per_class = (0..confusion.num_classes).map(|c| confusion.class_scores(c)).collect();
        GroupMetrics { count, accuracy, macro_f1, per_class, confusion }
    }
}

/// Metrics for all streamlines and for the cut and unaffected groups.
/// Streamlines of unknown status are treated as unaffected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitMetrics {
    pub all: GroupMetrics,
    pub cut: GroupMetrics,
    pub unaffected: GroupMetrics,
}

pub fn evaluate_split(
    pred: &[usize],
    truth: &[usize],
    status: &[CutStatus],
    num_classes: usize,
    scope: &[usize],
) -> Result<SplitMetrics> {
    check_aligned(pred, truth)?;
    if status.len() != pred.len() {
        return Err(Error::ShapeMismatch(format!("{} cut statuses for {} predictions", status.len(), pred.len())));
    }
    let mut cut = Confusion::new(num_classes);
    let mut unaffected = Confusion::new(num_classes);
    for ((&p, &t), &s) in pred.iter().zip(truth).zip(status) {
        if p.max(t) >= num_classes {
            return Err(Error::LabelOutOfRange { label: p.max(t), num_classes });
        }
        let target = match s {
            CutStatus::Cut => &mut cut,
            CutStatus::Unaffected | CutStatus::Unknown => &mut unaffected,
            CutStatus::Removed => {
                return Err(Error::InvalidStreamline("a removed streamline cannot be classified".into()))
            }
        };
        target.counts[t][p] += 1;
    }
    let all = cut.add(&unaffected)?;
    Ok(SplitMetrics {
        all: GroupMetrics::from_confusion(all, scope),
        cut: GroupMetrics::from_confusion(cut, scope),
        unaffected: GroupMetrics::from_confusion(unaffected, scope),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectReport {
    pub subject: String,
    pub streamlines: usize,
    pub tir: f64,
    pub atd: Option<AtdReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub f1_scope: Vec<usize>,
    pub tir_tracts: Vec<usize>,
    pub min_streamlines: usize,
    pub metrics: SplitMetrics,
    pub subjects: Vec<SubjectReport>,
    pub mean_tir: f64,
    pub mean_atd: Option<f64>,
}

/// Predicted and true labels of one subject's tractogram, carried on the
/// streamlines of `truth` and `pred` in the same order.
pub struct SubjectEval<'a> {
    pub pred: &'a Tractogram,
    pub truth: &'a Tractogram,
}

pub struct EvalOptions<'a> {
    pub f1_scope: Vec<usize>,
    pub tir_tracts: Vec<usize>,
    pub min_streamlines: usize,
    pub atlas: Option<&'a Atlas>,
}

/// Scores a cohort. Group metrics pool streamlines over subjects; TIR and
/// ATD are per subject and averaged in subject order.
pub fn evaluate(class_names: &[String], subjects: &[SubjectEval<'_>], opts: &EvalOptions<'_>) -> Result<EvalReport> {
    if subjects.is_empty() {
        return Err(Error::EmptyInput("no subjects to evaluate".into()));
    }
    let c = class_names.len();
    let (mut pred, mut truth, mut status) = (Vec::new(), Vec::new(), Vec::new());
    let mut reports = Vec::with_capacity(subjects.len());
    for s in subjects {
        if s.pred.len() != s.truth.len() {
            return Err(Error::ShapeMismatch(format!(
                "subject {}: {} predictions for {} streamlines",
                s.truth.subject_id(),
                s.pred.len(),
                s.truth.len()
            )));
        }
        let p = labels_of(s.pred)?;
        pred.extend_from_slice(&p);
        truth.extend(labels_of(s.truth)?);
        status.extend(s.truth.streamlines().iter().map(|x| x.cut_status));
        let parcellation = Parcellation::from_predictions(s.truth.subject_id(), class_names, &p)?;
        let subject_tir = tir(&parcellation, &opts.tir_tracts, opts.min_streamlines)?;
        let subject_atd = match opts.atlas {
            Some(a) => Some(atd(&parcellation, s.pred, a, &opts.tir_tracts, opts.min_streamlines)?),
            None => None,
        };
        reports.push(SubjectReport {
            subject: s.truth.subject_id().to_string(),
            streamlines: s.truth.len(),
            tir: subject_tir,
            atd: subject_atd,
        });
    }
    let metrics = evaluate_split(&pred, &truth, &status, c, &opts.f1_scope)?;
    let mean_tir = reports.iter().map(|r| r.tir).sum::<f64>() / reports.len() as f64;
    let atds: Vec<f64> = reports.iter().filter_map(|r| r.atd.as_ref().and_then(|a| a.mean)).collect();
    let mean_atd = (!atds.is_empty()).then(|| atds.iter().sum::<f64>() / atds.len() as f64);
    Ok(EvalReport {
        class_names: class_names.to_vec(),
        f1_scope: opts.f1_scope.clone(),
        tir_tracts: opts.tir_tracts.clone(),
        min_streamlines: opts.min_streamlines,
        metrics,
        subjects: reports,
        mean_tir,
        mean_atd,
    })
}

fn labels_of(t: &Tractogram) -> Result<Vec<usize>> {
    t.streamlines()
        .iter()
        .enumerate()
        .map(|(i, s)| s.label.ok_or(Error::MissingLabel { index: i }))
        .collect()
}

pub const TABLE_HEADER: &str =
    "method,original_acc,original_f1,all_acc,all_f1,cut_acc,cut_f1,unaffected_acc,unaffected_f1";

/// One method's row: metrics on complete tractograms (when evaluated) and
/// on cut tractograms.
pub struct TableRow<'a> {
    pub method: &'a str,
    pub original: Option<&'a SplitMetrics>,
    pub cut: Option<&'a SplitMetrics>,
}

/// Percentages with two decimals; empty cells where a group is missing.
pub fn table_csv(rows: &[TableRow<'_>]) -> String {
    let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_default();
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in rows {
        let orig = r.original.map(|m| &m.all);
        let groups = [orig, r.cut.map(|m| &m.all), r.cut.map(|m| &m.cut), r.cut.map(|m| &m.unaffected)];
        let _ = write!(out, "{}", r.method.replace(',', ";"));
        for g in groups {
            let _ = write!(out, ",{},{}", pct(g.and_then(|g| g.accuracy)), pct(g.and_then(|g| g.macro_f1)));
        }
        out.push('\n');
    }
    out
}
