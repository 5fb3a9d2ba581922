//! Streamlines, tractograms, arc-length resampling and the MDF distance.

use std::collections::HashSet;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A position in millimeters, RAS world space.
pub type Point = Point3<f64>;

/// Default number of points every streamline is resampled to.
pub const DEFAULT_N_POINTS: usize = 15;

/// What a cutting plane did to a streamline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutStatus {
    Unaffected,
    Cut,
    Removed,
    #[default]
    Unknown,
}

impl CutStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CutStatus::Unaffected => "unaffected",
            CutStatus::Cut => "cut",
            CutStatus::Removed => "removed",
            CutStatus::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<CutStatus> {
        match s {
            "unaffected" => Some(CutStatus::Unaffected),
            "cut" => Some(CutStatus::Cut),
            "removed" => Some(CutStatus::Removed),
            "unknown" => Some(CutStatus::Unknown),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Streamline {
    points: Vec<Point>,
    pub label: Option<usize>,
    pub cut_status: CutStatus,
    pub source_index: Option<usize>,
}

impl Streamline {
    /// Validates and wraps a polyline: at least two finite points with
    /// non-zero total length.
    pub fn new(points: Vec<Point>) -> Result<Streamline> {
        check_polyline(&points)?;
        Ok(Streamline {
            points,
            label: None,
            cut_status: CutStatus::Unknown,
            source_index: None,
        })
    }

    pub fn with_label(mut self, label: Option<usize>) -> Streamline {
        self.label = label;
        self
    }

    pub fn with_cut_status(mut self, status: CutStatus) -> Streamline {
        self.cut_status = status;
        self
    }

    pub fn with_source_index(mut self, index: Option<usize>) -> Streamline {
        self.source_index = index;
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn arc_length(&self) -> f64 {
        arc_length(&self.points)
    }

    /// Points flattened as `x0, y0, z0, x1, ...`.
    pub fn flat_coords(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z])
    }

    /// Resamples the geometry, keeping label, cut status and source index.
    pub fn resampled(&self, n: usize) -> Result<Streamline> {
        let mut s = resample_streamline(&self.points, n)?;
        s.label = self.label;
        s.cut_status = self.cut_status;
        s.source_index = self.source_index;
        Ok(s)
    }

    /// Same metadata, new geometry.
    pub(crate) fn with_points(&self, points: Vec<Point>) -> Result<Streamline> {
        check_polyline(&points)?;
        Ok(Streamline {
            points,
            label: self.label,
            cut_status: self.cut_status,
            source_index: self.source_index,
        })
    }
}

fn check_polyline(points: &[Point]) -> Result<()> {
    if points.len() < 2 {
        return Err(Error::InvalidStreamline(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::InvalidStreamline("non-finite coordinate".into()));
    }
    if points.iter().all(|p| *p == points[0]) {
        return Err(Error::InvalidStreamline("zero-length polyline".into()));
    }
    Ok(())
}

pub fn arc_length(points: &[Point]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tractogram {
    streamlines: Vec<Streamline>,
    subject_id: String,
    space_tag: String,
    class_names: Vec<String>,
}

impl Tractogram {
    /// Builds a tractogram, checking that class names are unique and that
    /// every label indexes into them. An empty class list disables the
    /// label check (unlabeled formats such as trk).
    pub fn new(
        streamlines: Vec<Streamline>,
        subject_id: impl Into<String>,
        space_tag: impl Into<String>,
        class_names: Vec<String>,
    ) -> Result<Tractogram> {
        let mut seen = HashSet::new();
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidSpec(format!("duplicate class name `{name}`")));
            }
        }
        if !class_names.is_empty() {
            for s in &streamlines {
                if let Some(label) = s.label {
                    if label >= class_names.len() {
                        return Err(Error::LabelOutOfRange {
                            label,
                            num_classes: class_names.len(),
                        });
                    }
                }
            }
        }
        Ok(Tractogram {
            streamlines,
            subject_id: subject_id.into(),
            space_tag: space_tag.into(),
            class_names,
        })
    }

    /// A tractogram with the same metadata and different streamlines.
    pub fn derive(&self, streamlines: Vec<Streamline>) -> Result<Tractogram> {
        Tractogram::new(
            streamlines,
            self.subject_id.clone(),
            self.space_tag.clone(),
            self.class_names.clone(),
        )
    }

    pub fn streamlines(&self) -> &[Streamline] {
        &self.streamlines
    }

    pub fn len(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn space_tag(&self) -> &str {
        &self.space_tag
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// The common point count, or `None` for mixed or empty tractograms.
    pub fn uniform_n_points(&self) -> Option<usize> {
        let n = self.streamlines.first()?.n_points();
        self.streamlines
            .iter()
            .all(|s| s.n_points() == n)
            .then_some(n)
    }

    pub fn resampled(&self, n: usize) -> Result<Tractogram> {
        let streamlines = self
            .streamlines
            .iter()
            .map(|s| s.resampled(n))
            .collect::<Result<Vec<_>>>()?;
        self.derive(streamlines)
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.streamlines.iter().map(|s| s.label).collect()
    }

    pub fn bounding_box(&self) -> Result<(Point, Point)> {
        let mut points = self.streamlines.iter().flat_map(|s| s.points.iter());
        let first = points.next().ok_or(Error::EmptyTractogram)?;
        let (mut lo, mut hi) = (*first, *first);
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Ok((lo, hi))
    }
}

/// Resamples a polyline to `n` points spaced at equal arc length. The first
/// and last output points are the input endpoints, bit for bit.
pub fn resample_streamline(points: &[Point], n: usize) -> Result<Streamline> {
    check_polyline(points)?;
    if n < 2 {
        return Err(Error::InvalidStreamline(format!(
            "target point count must be at least 2, got {n}"
        )));
    }
    let mut cumulative = Vec::with_capacity(points.len());
    let mut total = 0.0;
    cumulative.push(0.0);
    for w in points.windows(2) {
        total += (w[1] - w[0]).norm();
        cumulative.push(total);
    }

    let mut out = Vec::with_capacity(n);
    out.push(points[0]);
    let mut seg = 0;
    for i in 1..n - 1 {
        let target = total * i as f64 / (n - 1) as f64;
        while seg + 2 < points.len() && cumulative[seg + 1] < target {
            seg += 1;
        }
        let len = cumulative[seg + 1] - cumulative[seg];
        let t = if len > 0.0 {
            ((target - cumulative[seg]) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let a = points[seg];
        let b = points[seg + 1];
        out.push(a + (b - a) * t);
    }
    out.push(points[points.len() - 1]);
    Streamline::new(out)
}

/// Minimum average direct-flip distance between equal-length polylines.
///
/// Summation pairs term `i` with term `n-1-i` so that swapping or reversing
/// either argument reproduces the same floating-point result.
pub fn mdf_points(a: &[Point], b: &[Point]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let direct = paired_mean(n, |i| (a[i] - b[i]).norm());
    let flipped = paired_mean(n, |i| (a[i] - b[n - 1 - i]).norm());
    direct.min(flipped)
}

fn paired_mean(n: usize, term: impl Fn(usize) -> f64) -> f64 {
    let mut sum = 0.0;
    for i in 0..n / 2 {
        sum += term(i) + term(n - 1 - i);
    }
    if n % 2 == 1 {
        sum += term(n / 2);
    }
    sum / n as f64
}

pub fn mdf_distance(a: &Streamline, b: &Streamline) -> Result<f64> {
    if a.n_points() != b.n_points() {
        return Err(Error::ShapeMismatch(format!(
            "mdf needs equal point counts, got {} and {}",
            a.n_points(),
            b.n_points()
        )));
    }
    Ok(mdf_points(&a.points, &b.points))
}

/// Midpoint of the axis-aligned bounding box of all points.
pub fn brain_center(t: &Tractogram) -> Result<Point> {
    let (lo, hi) = t.bounding_box()?;
    Ok(nalgebra::center(&lo, &hi))
}
