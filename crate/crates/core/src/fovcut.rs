//! Field-of-view cut augmentation.
//!
//! An inferior cutoff is modelled as a plane below the brain center. Points
//! with negative signed distance are outside the field of view. Streamlines
//! entirely inside are unaffected, those entirely outside are removed, and
//! the rest are clipped to their longest surviving run and resampled.

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tract::{arc_length, brain_center, CutStatus, Point, Streamline, Tractogram};

pub const Z_OFFSET_RANGE: (f64, f64) = (-50.0, -30.0);
pub const MAX_TILT_DEG: f64 = 30.0;
pub const DEFAULT_PLANES_PER_SUBJECT: usize = 10;
pub const DEFAULT_MIN_SURVIVING_POINTS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutPlane {
    pub anchor: Point,
    /// Unit normal pointing superior, toward the kept half-space.
    pub normal: Vector3<f64>,
    pub z_offset: f64,
    pub tilt_deg: f64,
    pub azimuth_deg: f64,
    pub space_tag: String,
}

impl CutPlane {
    /// Plane through `center + (0, 0, z_offset)` whose normal is the z axis
    /// tilted by `tilt_deg` toward azimuth `azimuth_deg`.
    pub fn from_angles(
        center: Point,
        z_offset: f64,
        tilt_deg: f64,
        azimuth_deg: f64,
        space_tag: impl Into<String>,
    ) -> CutPlane {
        let (st, ct) = tilt_deg.to_radians().sin_cos();
        let (sa, ca) = azimuth_deg.to_radians().sin_cos();
        CutPlane {
            anchor: center + Vector3::new(0.0, 0.0, z_offset),
            normal: Vector3::new(st * ca, st * sa, ct),
            z_offset,
            tilt_deg,
            azimuth_deg,
            space_tag: space_tag.into(),
        }
    }

    pub fn signed_distance(&self, p: &Point) -> f64 {
        (p - self.anchor).dot(&self.normal)
    }
}

/// Draws a plane 30 to 50 mm below `center`, tilted at most 30 degrees.
pub fn sample_cut_plane(rng: &mut impl Rng, center: Point, space_tag: &str) -> CutPlane {
    let z_offset = rng.random_range(Z_OFFSET_RANGE.0..=Z_OFFSET_RANGE.1);
    let tilt = rng.random_range(0.0..=MAX_TILT_DEG);
    let azimuth = rng.random_range(0.0..360.0);
    CutPlane::from_angles(center, z_offset, tilt, azimuth, space_tag)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutCounts {
    pub unaffected: usize,
    pub cut: usize,
    pub removed: usize,
}

impl CutCounts {
    pub fn total(&self) -> usize {
        self.unaffected + self.cut + self.removed
    }
}

#[derive(Clone, Debug)]
pub struct CutResult {
    pub tractogram: Tractogram,
    pub counts: CutCounts,
    pub plane: CutPlane,
}

/// Splits a polyline into its maximal runs in the half-space `s >= 0`.
/// Crossing edges contribute the interpolated intersection point.
pub fn clip_runs(points: &[Point], plane: &CutPlane) -> Vec<Vec<Point>> {
    let s: Vec<f64> = points.iter().map(|p| plane.signed_distance(p)).collect();
    let mut runs = Vec::new();
    let mut current: Vec<Point> = Vec::new();
    for i in 0..points.len() {
        if i > 0 {
            let (sa, sb) = (s[i - 1], s[i]);
            let (a, b) = (points[i - 1], points[i]);
            if sa >= 0.0 && sb < 0.0 {
                if sa > 0.0 {
                    current.push(a + (b - a) * (sa / (sa - sb)));
                }
                runs.push(std::mem::take(&mut current));
            } else if sa < 0.0 && sb > 0.0 {
                current.push(a + (b - a) * (sa / (sa - sb)));
            }
        }
        if s[i] >= 0.0 {
            current.push(points[i]);
        }
    }
    if !current.is_empty() {
        runs.push(current);
    }
    runs
}

pub fn apply_cut(t: &Tractogram, plane: &CutPlane, min_surviving_points: usize) -> Result<CutResult> {
    if t.space_tag() != plane.space_tag {
        return Err(Error::SpaceMismatch {
            tractogram: t.space_tag().to_string(),
            plane: plane.space_tag.clone(),
        });
    }
    let mut counts = CutCounts::default();
    let mut kept = Vec::with_capacity(t.len());
    for s in t.streamlines() {
        match cut_streamline(s, plane, min_surviving_points)? {
            Some(c) => {
                match c.cut_status {
                    CutStatus::Cut => counts.cut += 1,
                    _ => counts.unaffected += 1,
                }
                kept.push(c);
            }
            None => counts.removed += 1,
        }
    }
    Ok(CutResult {
        tractogram: t.derive(kept)?,
        counts,
        plane: plane.clone(),
    })
}

/// Cuts one streamline. `None` means the streamline is removed.
pub fn cut_streamline(
    s: &Streamline,
    plane: &CutPlane,
    min_surviving_points: usize,
) -> Result<Option<Streamline>> {
    let pts = s.points();
    let above = pts.iter().filter(|p| plane.signed_distance(p) >= 0.0).count();
    if above == pts.len() {
        return Ok(Some(s.clone().with_cut_status(CutStatus::Unaffected)));
    }
    if above == 0 {
        return Ok(None);
    }
    let mut best: Option<(f64, Vec<Point>)> = None;
    for run in clip_runs(pts, plane) {
        let len = arc_length(&run);
        if best.as_ref().is_none_or(|(b, _)| len > *b) {
            best = Some((len, run));
        }
    }
    let Some((len, run)) = best else {
        return Ok(None);
    };
    if run.len() < min_surviving_points.max(2) || len <= 0.0 {
        return Ok(None);
    }
    let clipped = s.with_points(run)?.with_cut_status(CutStatus::Cut);
    Ok(Some(clipped.resampled(s.n_points())?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneRecord {
    pub subject: String,
    pub subject_index: usize,
    pub plane_index: usize,
    pub plane: CutPlane,
    pub counts: CutCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationReport {
    pub seed: u64,
    pub planes_per_subject: usize,
    pub min_surviving_points: usize,
    pub planes: Vec<PlaneRecord>,
    /// Streamlines fed to cutting planes, summed over planes.
    pub total_input: usize,
    pub total_unaffected: usize,
    pub total_cut: usize,
    pub total_removed: usize,
    /// `total_cut / total_input`, zero when no plane was applied.
    pub cut_fraction: f64,
    /// Streamlines in the augmented output, originals included.
    pub total_output: usize,
}

#[derive(Clone, Debug)]
pub struct AugmentedTractogram {
    pub subject_index: usize,
    /// `None` for the original tractogram.
    pub plane_index: Option<usize>,
    pub tractogram: Tractogram,
}

#[derive(Clone, Debug)]
pub struct AugmentedSet {
    pub tractograms: Vec<AugmentedTractogram>,
    pub report: AugmentationReport,
}

/// Cut plane `plane_index` for subject `subject_index`, drawn from its own
/// substream of `seed`.
pub fn plane_for(seed: u64, subject_index: usize, plane_index: usize, t: &Tractogram) -> Result<CutPlane> {
    let center = brain_center(t)?;
    let mut rng = substream(seed, "fovcut-plane", &[subject_index as u64, plane_index as u64]);
    Ok(sample_cut_plane(&mut rng, center, t.space_tag()))
}

/// Each subject yields its original tractogram followed by
/// `planes_per_subject` cut versions.
pub fn augment_training_set(
    subjects: &[Tractogram],
    planes_per_subject: usize,
    seed: u64,
    min_surviving_points: usize,
) -> Result<AugmentedSet> {
    for t in subjects {
        if let Some(index) = t.streamlines().iter().position(|s| s.label.is_none()) {
            return Err(Error::MissingLabel { index });
        }
    }
    let jobs: Vec<(usize, usize)> = (0..subjects.len())
        .flat_map(|s| (0..planes_per_subject).map(move |p| (s, p)))
        .collect();
    let cuts = jobs
        .par_iter()
        .map(|&(si, pi)| {
            let plane = plane_for(seed, si, pi, &subjects[si])?;
            apply_cut(&subjects[si], &plane, min_surviving_points).map(|r| (si, pi, r))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut tractograms = Vec::with_capacity(subjects.len() * (planes_per_subject + 1));
    let mut planes = Vec::with_capacity(cuts.len());
    let mut cuts = cuts.into_iter().peekable();
    for (si, t) in subjects.iter().enumerate() {
        tractograms.push(AugmentedTractogram {
            subject_index: si,
            plane_index: None,
            tractogram: t.clone(),
        });
        while let Some((_, pi, r)) = cuts.next_if(|(s, _, _)| *s == si) {
            planes.push(PlaneRecord {
                subject: t.subject_id().to_string(),
                subject_index: si,
                plane_index: pi,
                plane: r.plane,
                counts: r.counts,
            });
            tractograms.push(AugmentedTractogram {
                subject_index: si,
                plane_index: Some(pi),
                tractogram: r.tractogram,
            });
        }
    }
    let sum = |f: fn(&CutCounts) -> usize| planes.iter().map(|p| f(&p.counts)).sum::<usize>();
    let total_input = sum(CutCounts::total);
    let total_cut = sum(|c| c.cut);
    let report = AugmentationReport {
        seed,
        planes_per_subject,
        min_surviving_points,
        total_input,
        total_unaffected: sum(|c| c.unaffected),
        total_cut,
        total_removed: sum(|c| c.removed),
        cut_fraction: if total_input == 0 { 0.0 } else { total_cut as f64 / total_input as f64 },
        total_output: tractograms.iter().map(|a| a.tractogram.len()).sum(),
        planes,
    };
    Ok(AugmentedSet { tractograms, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::tract::resample_streamline;
    use proptest::prelude::*;

    fn origin_plane(z: f64) -> CutPlane {
        CutPlane::from_angles(Point::origin(), z, 0.0, 0.0, "ras")
    }

    fn vertical(z0: f64, z1: f64, n: usize) -> Streamline {
        resample_streamline(&[Point::new(0., 0., z0), Point::new(0., 0., z1)], n).unwrap()
    }

    fn single(s: Streamline) -> Tractogram {
        Tractogram::new(vec![s.with_label(Some(1))], "s", "ras", vec!["o".into(), "a".into()]).unwrap()
    }

    /// Oracle: clip a dense resampling point by point, keeping the longest
    /// contiguous run of above-plane samples.
    pub(crate) fn dense_clip_extent(s: &Streamline, plane: &CutPlane, dense: usize) -> (CutStatus, f64) {
        let d = s.resampled(dense).unwrap();
        let flags: Vec<bool> = d.points().iter().map(|p| plane.signed_distance(p) >= 0.0).collect();
        if flags.iter().all(|f| *f) {
            return (CutStatus::Unaffected, d.arc_length());
        }
        if flags.iter().all(|f| !*f) {
            return (CutStatus::Removed, 0.0);
        }
        let mut best: f64 = 0.0;
        let mut i = 0;
        while i < flags.len() {
            if flags[i] {
                let start = i;
                while i < flags.len() && flags[i] {
                    i += 1;
                }
                best = best.max(arc_length(&d.points()[start..i]));
            } else {
                i += 1;
            }
        }
        (CutStatus::Cut, best)
    }

    #[test]
    fn streamline_above_plane_is_unaffected() {
        let s = resample_streamline(&[Point::new(-10., 0., 0.), Point::new(10., 5., 0.)], 15).unwrap();
        let r = apply_cut(&single(s.clone()), &origin_plane(-40.0), 2).unwrap();
        assert_eq!(r.counts, CutCounts { unaffected: 1, cut: 0, removed: 0 });
        assert_eq!(r.tractogram.streamlines()[0].points(), s.points());
        assert_eq!(r.tractogram.streamlines()[0].cut_status, CutStatus::Unaffected);
    }

    #[test]
    fn streamline_below_plane_is_removed() {
        let r = apply_cut(&single(vertical(-60.0, -45.0, 15)), &origin_plane(-40.0), 2).unwrap();
        assert_eq!(r.counts, CutCounts { unaffected: 0, cut: 0, removed: 1 });
        assert!(r.tractogram.is_empty());
    }

    #[test]
    fn crossing_streamline_is_cut_at_the_plane() {
        let s = vertical(-60.0, 0.0, 15);
        let plane = origin_plane(-40.0);
        let r = apply_cut(&single(s.clone()), &plane, 2).unwrap();
        assert_eq!(r.counts.cut, 1);
        let c = &r.tractogram.streamlines()[0];
        assert_eq!(c.cut_status, CutStatus::Cut);
        assert_eq!(c.label, Some(1));
        assert_eq!(c.n_points(), 15);
        assert!((c.points()[0].z + 40.0).abs() < 1e-9);
        assert!((c.points()[14].z - 0.0).abs() < 1e-12);
        assert!((c.arc_length() - 40.0).abs() < 1e-6);
        let (status, extent) = dense_clip_extent(&s, &plane, 10_000);
        assert_eq!(status, CutStatus::Cut);
        assert!((extent - 40.0).abs() < 0.01);
    }

    #[test]
    fn longest_run_wins_for_multi_crossing() {
        // U shape dipping below z = -40 twice; right arm is longer.
        let pts = [
            Point::new(0., 0., -30.),
            Point::new(1., 0., -50.),
            Point::new(2., 0., -35.),
            Point::new(3., 0., -50.),
            Point::new(4., 0., 0.),
        ];
        let s = Streamline::new(pts.to_vec()).unwrap().with_label(Some(1));
        let c = cut_streamline(&s, &origin_plane(-40.0), 2).unwrap().unwrap();
        assert!(c.points().iter().all(|p| p.z >= -40.0 - 1e-9));
        assert!((c.points()[c.n_points() - 1] - Point::new(4., 0., 0.)).norm() < 1e-12);
        assert_eq!(c.n_points(), 5);
    }

    #[test]
    fn short_fragments_are_removed() {
        let pts = [Point::new(0., 0., -40.), Point::new(0., 0., -60.), Point::new(0., 0., -61.)];
        let s = Streamline::new(pts.to_vec()).unwrap();
        // Only the touching endpoint survives: a single point.
        assert!(cut_streamline(&s, &origin_plane(-40.0), 2).unwrap().is_none());

        let pts = [Point::new(0., 0., -39.), Point::new(0., 0., -60.), Point::new(0., 0., -61.)];
        let s = Streamline::new(pts.to_vec()).unwrap();
        assert!(cut_streamline(&s, &origin_plane(-40.0), 2).unwrap().is_some());
        assert!(cut_streamline(&s, &origin_plane(-40.0), 3).unwrap().is_none());
    }

    #[test]
    fn space_mismatch_is_reported() {
        let mut plane = origin_plane(-40.0);
        plane.space_tag = "voxmm".into();
        assert!(matches!(
            apply_cut(&single(vertical(0., 1., 3)), &plane, 2),
            Err(Error::SpaceMismatch { .. })
        ));
    }

    #[test]
    fn untilted_normal_is_exactly_z() {
        let p = CutPlane::from_angles(Point::new(1., 2., 3.), -35.0, 0.0, 123.0, "ras");
        assert_eq!(p.normal, Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(p.anchor, Point::new(1., 2., -32.));
    }

    #[test]
    fn sampler_respects_constraints_and_moments() {
        let mut rng = substream(11, "plane-test", &[]);
        let n = 100_000;
        let (mut zsum, mut tsum) = (0.0, 0.0);
        for _ in 0..n {
            let p = sample_cut_plane(&mut rng, Point::origin(), "ras");
            assert!((-50.0..=-30.0).contains(&p.z_offset));
            assert!((0.0..=30.0).contains(&p.tilt_deg));
            assert!((0.0..360.0).contains(&p.azimuth_deg));
            assert!((p.normal.norm() - 1.0).abs() < 1e-9);
            assert!((p.normal.z - p.tilt_deg.to_radians().cos()).abs() < 1e-9);
            zsum += p.z_offset;
            tsum += p.tilt_deg;
        }
        // Uniform moments: standard error of each mean is about 0.018.
        assert!((zsum / n as f64 + 40.0).abs() < 0.2);
        assert!((tsum / n as f64 - 15.0).abs() < 0.2);
    }

    #[test]
    fn zero_planes_is_identity() {
        let t = single(vertical(-60.0, 0.0, 15));
        let out = augment_training_set(std::slice::from_ref(&t), 0, 3, 2).unwrap();
        assert_eq!(out.tractograms.len(), 1);
        assert_eq!(out.tractograms[0].tractogram, t);
        assert_eq!(out.report.total_cut, 0);
        assert_eq!(out.report.cut_fraction, 0.0);
    }

    #[test]
    fn unlabeled_input_is_rejected() {
        let t = Tractogram::new(vec![vertical(0., 1., 3)], "s", "ras", vec![]).unwrap();
        assert!(matches!(
            augment_training_set(&[t], 2, 0, 2),
            Err(Error::MissingLabel { index: 0 })
        ));
    }

    #[test]
    fn augmentation_layout_and_report() {
        let t = Tractogram::new(
            (0..20)
                .map(|i| vertical(-70.0 + i as f64 * 3.0, 40.0, 15).with_label(Some(i % 2)))
                .collect(),
            "s",
            "ras",
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let out = augment_training_set(&[t.clone(), t.clone()], 3, 9, 2).unwrap();
        assert_eq!(out.tractograms.len(), 8);
        let idx: Vec<_> = out.tractograms.iter().map(|a| (a.subject_index, a.plane_index)).collect();
        assert_eq!(idx[0], (0, None));
        assert_eq!(idx[3], (0, Some(2)));
        assert_eq!(idx[4], (1, None));
        assert_eq!(out.report.planes.len(), 6);
        assert_eq!(out.report.total_input, 6 * 20);
        for (rec, aug) in out.report.planes.iter().zip(out.tractograms.iter().filter(|a| a.plane_index.is_some())) {
            assert_eq!(rec.counts.total(), 20);
            assert_eq!(aug.tractogram.len(), rec.counts.unaffected + rec.counts.cut);
            // Independent recount: a streamline is touched iff some point is below.
            let touched = t
                .streamlines()
                .iter()
                .filter(|s| s.points().iter().any(|p| rec.plane.signed_distance(p) < 0.0))
                .count();
            assert_eq!(touched, rec.counts.cut + rec.counts.removed);
        }
        let again = augment_training_set(&[t.clone(), t], 3, 9, 2).unwrap();
        assert_eq!(again.report, out.report);
    }

    fn arb_polyline() -> impl Strategy<Value = Streamline> {
        prop::collection::vec((-40.0..40.0f64, -40.0..40.0f64, -80.0..40.0f64), 2..20).prop_filter_map(
            "degenerate",
            |v| Streamline::new(v.into_iter().map(|(x, y, z)| Point::new(x, y, z)).collect()).ok(),
        )
    }

    fn arb_plane() -> impl Strategy<Value = CutPlane> {
        (-50.0..=-30.0f64, 0.0..=30.0f64, 0.0..360.0f64)
            .prop_map(|(z, t, a)| CutPlane::from_angles(Point::new(0., 0., 0.), z, t, a, "ras"))
    }

    proptest! {
        #[test]
        fn partition_and_labels_are_preserved(
            lines in prop::collection::vec(arb_polyline(), 1..15),
            plane in arb_plane(),
        ) {
            let n = lines.len();
            let lines: Vec<_> = lines.into_iter().enumerate()
                .map(|(i, s)| s.with_label(Some(i % 3)).with_source_index(Some(i)))
                .collect();
            let t = Tractogram::new(lines, "s", "ras", vec!["a".into(), "b".into(), "c".into()]).unwrap();
            let r = apply_cut(&t, &plane, 2).unwrap();
            prop_assert_eq!(r.counts.total(), n);
            prop_assert_eq!(r.tractogram.len(), r.counts.unaffected + r.counts.cut);
            for s in r.tractogram.streamlines() {
                for p in s.points() {
                    prop_assert!(plane.signed_distance(p) >= -1e-9);
                }
                let src = s.source_index.unwrap();
                prop_assert_eq!(s.label, t.streamlines()[src].label);
            }
        }

        #[test]
        fn lowering_the_plane_is_monotone(
            lines in prop::collection::vec(arb_polyline(), 1..15),
            z in -50.0..-30.0f64,
            dz in 0.0..20.0f64,
        ) {
            let lines: Vec<_> = lines.into_iter().map(|s| s.with_label(Some(0))).collect();
            let t = Tractogram::new(lines, "s", "ras", vec!["a".into()]).unwrap();
            let high = apply_cut(&t, &origin_plane(z), 2).unwrap().counts;
            let low = apply_cut(&t, &origin_plane(z - dz), 2).unwrap().counts;
            prop_assert!(low.unaffected >= high.unaffected);
            prop_assert!(low.removed <= high.removed);
        }
    }
}
