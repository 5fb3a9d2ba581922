//! Deterministic synthetic cohorts of labeled tractograms.
//!
//! Each bundle is a parametric centerline. A streamline is the centerline
//! shifted by one Gaussian offset perpendicular to the local tangent, then
//! resampled. Every subject gets its own small rigid motion. Bundles flagged
//! `inferior` reach into the band 30 to 50 mm below the brain center, where
//! cutting planes fall; the others stay clear of every admissible plane.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tract::{resample_streamline, Point, Streamline, Tractogram, DEFAULT_N_POINTS};

/// Samples per centerline before resampling.
const DENSE_SAMPLES: usize = 96;
/// Offsets are redrawn beyond this many sigmas, which bounds the geometry.
const OFFSET_TRUNCATION: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Centerline {
    Straight {
        start: [f64; 3],
        end: [f64; 3],
    },
    /// `center + radius * (cos θ u + sin θ v)` for θ from `start_deg` to
    /// `end_deg`; `u` and `v` are normalized and must not be parallel.
    Arc {
        center: [f64; 3],
        radius: f64,
        u: [f64; 3],
        v: [f64; 3],
        start_deg: f64,
        end_deg: f64,
    },
    /// `turns` windows of radius `radius` around the axis from `base`,
    /// rising `pitch` mm per turn.
    Helix {
        base: [f64; 3],
        axis: [f64; 3],
        radius: f64,
        pitch: f64,
        turns: f64,
    },
    /// A fresh random polyline per streamline through `control_points`
    /// uniform draws inside the box. The bundle's sigma is unused.
    Random {
        min: [f64; 3],
        max: [f64; 3],
        control_points: usize,
    },
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn p3(a: [f64; 3]) -> Point {
    Point::new(a[0], a[1], a[2])
}

/// Two unit vectors completing `axis` to an orthonormal basis.
fn perpendicular_basis(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = axis.normalize();
    let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = a.cross(&helper).normalize();
    (e1, a.cross(&e1))
}

impl Centerline {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        let finite = |a: &[f64]| a.iter().all(|v| v.is_finite());
        match self {
            Centerline::Straight { start, end } => {
                if !finite(start) || !finite(end) || v3(*start) == v3(*end) {
                    return bad("straight centerline needs distinct finite endpoints".into());
                }
            }
            Centerline::Arc { center, radius, u, v, start_deg, end_deg } => {
                let (u, v) = (v3(*u), v3(*v));
                let parallel = u.norm() == 0.0 || v.norm() == 0.0 || u.normalize().cross(&v.normalize()).norm() < 1e-9;
                let span_ok = start_deg.is_finite() && end_deg.is_finite() && start_deg != end_deg;
                if !finite(center) || !radius.is_finite() || *radius <= 0.0 || parallel || !span_ok {
                    return bad("arc needs positive radius, a non-parallel u/v pair and a non-empty span".into());
                }
            }
            Centerline::Helix { base, axis, radius, pitch, turns } => {
                let positive = radius.is_finite() && *radius >= 0.0 && turns.is_finite() && *turns > 0.0;
                if !finite(base) || v3(*axis).norm() == 0.0 || !positive || !pitch.is_finite() {
                    return bad("helix needs a non-zero axis, radius >= 0 and turns > 0".into());
                }
                if *radius == 0.0 && *pitch == 0.0 {
                    return bad("helix has zero length".into());
                }
            }
            Centerline::Random { min, max, control_points } => {
                if *control_points < 2 || (0..3).any(|i| !min[i].is_finite() || !max[i].is_finite() || min[i] >= max[i]) {
                    return bad("random bundle needs at least 2 control points and min < max".into());
                }
            }
        }
        Ok(())
    }

    /// Dense template polyline; `None` for random bundles.
    fn dense(&self) -> Option<Vec<Point>> {
        let n = DENSE_SAMPLES;
        let t = |i: usize| i as f64 / (n - 1) as f64;
        Some(match self {
            Centerline::Straight { start, end } => {
                let (a, b) = (p3(*start), p3(*end));
                (0..n).map(|i| a + (b - a) * t(i)).collect()
            }
            Centerline::Arc { center, radius, u, v, start_deg, end_deg } => {
                let u = v3(*u).normalize();
                let v = v3(*v).normalize();
                let c = p3(*center);
                (0..n)
                    .map(|i| {
                        let th = (start_deg + (end_deg - start_deg) * t(i)).to_radians();
                        c + (u * th.cos() + v * th.sin()) * *radius
                    })
                    .collect()
            }
            Centerline::Helix { base, axis, radius, pitch, turns } => {
                let a = v3(*axis).normalize();
                let (e1, e2) = perpendicular_basis(&a);
                let b = p3(*base);
                (0..n)
                    .map(|i| {
                        let s = turns * t(i);
                        let th = std::f64::consts::TAU * s;
                        b + a * (pitch * s) + (e1 * th.cos() + e2 * th.sin()) * *radius
                    })
                    .collect()
            }
            Centerline::Random { .. } => return None,
        })
    }

    /// Axis-aligned extent of every centerline this family can produce.
    fn extent(&self) -> (Point, Point) {
        match self {
            Centerline::Random { min, max, .. } => (p3(*min), p3(*max)),
            _ => {
                let pts = self.dense().expect("parametric");
                let mut lo = pts[0];
                let mut hi = pts[0];
                for p in &pts {
                    lo = lo.inf(p);
                    hi = hi.sup(p);
                }
                // Dense sampling can miss an arc's extreme by a sliver.
                let slack = match self {
                    Centerline::Arc { radius, .. } | Centerline::Helix { radius, .. } => {
                        radius * (1.0 - (std::f64::consts::PI * 4.0 / DENSE_SAMPLES as f64).cos())
                    }
                    _ => 0.0,
                };
                (lo - Vector3::repeat(slack), hi + Vector3::repeat(slack))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSpec {
    pub class_id: usize,
    pub name: String,
    pub centerline: Centerline,
    /// RMS perpendicular offset of a streamline from the centerline, mm.
    pub sigma_mm: f64,
    pub streamlines: usize,
    /// Placed to reach the band 30 to 50 mm below the brain center.
    pub inferior: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitProportions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub seed: u64,
    pub subjects: usize,
    pub split: SplitProportions,
    pub n_points: usize,
    pub max_rotation_deg: f64,
    pub max_translation_mm: f64,
    pub bundles: Vec<BundleSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Subjects per split by largest remainder; remainder ties go to the
/// earlier split in train, val, test order.
pub fn split_counts(n: usize, p: &SplitProportions) -> Result<[usize; 3]> {
    let props = [p.train, p.val, p.test];
    if props.iter().any(|x| !x.is_finite() || *x < 0.0) || (props.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSpec("split proportions must be non-negative and sum to 1".into()));
    }
    let quotas: Vec<f64> = props.iter().map(|x| x * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for i in 0..3 {
        counts[i] = quotas[i].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    for i in 0..3 {
        if props[i] > 0.0 && counts[i] == 0 {
            return Err(Error::InvalidSpec(format!(
                "{} subjects cannot fill the {} split",
                n,
                Split::ALL[i].as_str()
            )));
        }
    }
    Ok(counts)
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.bundles.is_empty() {
            return bad("no bundles".into());
        }
        let mut ids: Vec<usize> = self.bundles.iter().map(|b| b.class_id).collect();
        ids.sort_unstable();
        if ids != (0..self.bundles.len()).collect::<Vec<_>>() {
            return bad("class ids must be 0..n, each used once".into());
        }
        if !self.bundles.iter().any(|b| b.inferior) {
            return bad("at least one bundle must be inferior".into());
        }
        for b in &self.bundles {
            if !b.sigma_mm.is_finite() || b.sigma_mm < 0.0 {
                return bad(format!("bundle `{}`: sigma must be >= 0", b.name));
            }
            if b.streamlines == 0 {
                return bad(format!("bundle `{}`: needs at least one streamline", b.name));
            }
            b.centerline.validate().or_else(|e| bad(format!("bundle `{}`: {e}", b.name)))?;
        }
        if self.n_points < 2 {
            return bad("n_points must be at least 2".into());
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_translation_mm >= 0.0) {
            return bad("jitter ranges must be non-negative".into());
        }
        if self.subjects == 0 {
            return bad("no subjects".into());
        }
        split_counts(self.subjects, &self.split)?;
        Ok(())
    }

    /// Class names ordered by class id.
    pub fn class_names(&self) -> Vec<String> {
        let mut b: Vec<&BundleSpec> = self.bundles.iter().collect();
        b.sort_by_key(|b| b.class_id);
        b.into_iter().map(|b| b.name.clone()).collect()
    }

    pub fn inferior_classes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.bundles.iter().filter(|b| b.inferior).map(|b| b.class_id).collect();
        v.sort_unstable();
        v
    }

    pub fn streamlines_per_subject(&self) -> usize {
        self.bundles.iter().map(|b| b.streamlines).sum()
    }

    /// Box that holds every generated point: the template extents grown by
    /// the offset truncation and the largest rigid motion.
    pub fn declared_bounds(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        let mut sigma: f64 = 0.0;
        for b in &self.bundles {
            let (a, c) = b.centerline.extent();
            lo = lo.inf(&a);
            hi = hi.sup(&c);
            if !matches!(b.centerline, Centerline::Random { .. }) {
                sigma = sigma.max(b.sigma_mm);
            }
        }
        let reach = lo.coords.abs().sup(&hi.coords.abs()).norm() + OFFSET_TRUNCATION * sigma;
        let motion = 2.0 * reach * (self.max_rotation_deg.to_radians() / 2.0).sin() + self.max_translation_mm;
        let margin = OFFSET_TRUNCATION * sigma + motion + 1e-9;
        (lo - Vector3::repeat(margin), hi + Vector3::repeat(margin))
    }

    /// Plausible per-plane cut fraction: at most the share of streamlines in
    /// inferior bundles (nothing else can be cut), at least half of it.
    pub fn designed_cut_fraction(&self) -> (f64, f64) {
        let inferior: usize = self.bundles.iter().filter(|b| b.inferior).map(|b| b.streamlines).sum();
        let f = inferior as f64 / self.streamlines_per_subject() as f64;
        (0.5 * f, f)
    }
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{index:03}")
}

fn gaussian_offset(rng: &mut impl Rng, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    // Isotropic 3D noise with per-axis variance sigma^2 / 2 leaves RMS
    // sigma once the tangential component is removed.
    let s = sigma / 2f64.sqrt();
    loop {
        let o = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ) * s;
        if o.norm() <= OFFSET_TRUNCATION * sigma {
            return o;
        }
    }
}

fn offset_streamline(dense: &[Point], offset: &Vector3<f64>) -> Vec<Point> {
    let n = dense.len();
    (0..n)
        .map(|i| {
            let (a, b) = if i == 0 {
                (dense[0], dense[1])
            } else if i + 1 == n {
                (dense[n - 2], dense[n - 1])
            } else {
                (dense[i - 1], dense[i + 1])
            };
            let tangent = (b - a).normalize();
            dense[i] + (offset - tangent * offset.dot(&tangent))
        })
        .collect()
}

fn random_polyline(rng: &mut impl Rng, min: &[f64; 3], max: &[f64; 3], control_points: usize) -> Vec<Point> {
    loop {
        let pts: Vec<Point> = (0..control_points)
            .map(|_| {
                Point::new(
                    rng.random_range(min[0]..=max[0]),
                    rng.random_range(min[1]..=max[1]),
                    rng.random_range(min[2]..=max[2]),
                )
            })
            .collect();
        if pts.windows(2).any(|w| w[0] != w[1]) {
            return pts;
        }
    }
}

/// Rigid motion of one subject: rotation about a random axis by at most
/// `max_rotation_deg`, then a translation inside a ball.
pub fn subject_motion(spec: &CohortSpec, index: usize) -> (Rotation3<f64>, Vector3<f64>) {
    let mut rng = substream(spec.seed, "synth-motion", &[index as u64]);
    let axis = loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if v.norm() > 1e-6 {
            break Unit::new_normalize(v);
        }
    };
    let angle = rng.random_range(0.0..=spec.max_rotation_deg).to_radians();
    let translation = loop {
        let v = Vector3::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        if v.norm() <= 1.0 {
            break v * spec.max_translation_mm;
        }
    };
    (Rotation3::from_axis_angle(&axis, angle), translation)
}

/// One labeled subject. Bundles are emitted in class-id order.
pub fn generate_subject(spec: &CohortSpec, index: usize) -> Result<Tractogram> {
    spec.validate()?;
    let (rotation, translation) = subject_motion(spec, index);
    let mut bundles: Vec<&BundleSpec> = spec.bundles.iter().collect();
    bundles.sort_by_key(|b| b.class_id);
    let mut streamlines = Vec::with_capacity(spec.streamlines_per_subject());
    for b in bundles {
        let mut rng = substream(spec.seed, "synth-bundle", &[index as u64, b.class_id as u64]);
        let dense = b.centerline.dense();
        for _ in 0..b.streamlines {
            let raw = match (&dense, &b.centerline) {
                (Some(d), _) => offset_streamline(d, &gaussian_offset(&mut rng, b.sigma_mm)),
                (None, Centerline::Random { min, max, control_points }) => {
                    random_polyline(&mut rng, min, max, *control_points)
                }
                (None, _) => unreachable!("only random bundles lack a template"),
            };
            let moved: Vec<Point> = raw.iter().map(|p| rotation * p + translation).collect();
            let s = resample_streamline(&moved, spec.n_points)?.with_label(Some(b.class_id));
            let id = streamlines.len();
            streamlines.push(s.with_source_index(Some(id)));
        }
    }
    Tractogram::new(streamlines, subject_id(index), "ras", spec.class_names())
}

/// Streamlines of every parametric bundle in the template frame, with no
/// subject motion: `per_bundle` jittered copies each.
pub fn generate_atlas(spec: &CohortSpec, per_bundle: usize) -> Result<Tractogram> {
    spec.validate()?;
    let mut streamlines: Vec<Streamline> = Vec::new();
    let mut bundles: Vec<&BundleSpec> = spec.bundles.iter().collect();
    bundles.sort_by_key(|b| b.class_id);
    for b in bundles {
        let Some(dense) = b.centerline.dense() else { continue };
        let mut rng = substream(spec.seed, "synth-atlas", &[b.class_id as u64]);
        for _ in 0..per_bundle {
            let raw = offset_streamline(&dense, &gaussian_offset(&mut rng, b.sigma_mm));
            streamlines.push(resample_streamline(&raw, spec.n_points)?.with_label(Some(b.class_id)));
        }
    }
    Tractogram::new(streamlines, "atlas", "ras", spec.class_names())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub subject: String,
    pub index: usize,
    pub split: Split,
    pub streamlines: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub class_names: Vec<String>,
    pub inferior_classes: Vec<usize>,
    pub declared_bounds: [[f64; 3]; 2],
    pub subjects: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub manifest: CohortManifest,
    pub train: Vec<Tractogram>,
    pub val: Vec<Tractogram>,
    pub test: Vec<Tractogram>,
}

impl Cohort {
    pub fn split(&self, s: Split) -> &[Tractogram] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Subjects `0..n` in index order fill train, then val, then test.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let counts = split_counts(spec.subjects, &spec.split)?;
    let subjects = (0..spec.subjects)
        .into_par_iter()
        .map(|i| generate_subject(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(spec.subjects);
    let mut splits: [Vec<Tractogram>; 3] = Default::default();
    let mut next = 0;
    for (k, &count) in counts.iter().enumerate() {
        for t in &subjects[next..next + count] {
            entries.push(ManifestEntry {
                subject: t.subject_id().to_string(),
                index: next + splits[k].len(),
                split: Split::ALL[k],
                streamlines: t.len(),
            });
            splits[k].push(t.clone());
        }
        next += count;
    }
    let (lo, hi) = spec.declared_bounds();
    let [train, val, test] = splits;
    Ok(Cohort {
        manifest: CohortManifest {
            class_names: spec.class_names(),
            inferior_classes: spec.inferior_classes(),
            declared_bounds: [[lo.x, lo.y, lo.z], [hi.x, hi.y, hi.z]],
            subjects: entries,
        },
        train,
        val,
        test,
    })
}

fn bundle(class_id: usize, name: &str, centerline: Centerline, sigma_mm: f64, streamlines: usize, inferior: bool) -> BundleSpec {
    BundleSpec { class_id, name: name.to_string(), centerline, sigma_mm, streamlines, inferior }
}

/// Eight classes, three of them inferior, 2,000 streamlines per subject and
/// ten subjects split 7/1/2.
///
/// The two inferior tracts `cst_left`/`cst_right` run from z = -68 up to
/// z = 45. Their superior continuations `fpt_left`/`fpt_right` start where
/// a typical cutting plane falls, so a cut streamline of the former looks
/// much like an intact one of the latter.
pub fn default_spec(seed: u64) -> CohortSpec {
    let yz = |u: [f64; 3], v: [f64; 3]| (u, v);
    let (u, v) = yz([0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
    let straight = |start: [f64; 3], end: [f64; 3]| Centerline::Straight { start, end };
    let bundles = vec![
        bundle(
            0,
            "other",
            Centerline::Random { min: [-45.0, -45.0, 22.0], max: [45.0, 45.0, 60.0], control_points: 4 },
            0.0,
            80,
            false,
        ),
        bundle(1, "cst_left", straight([-12.0, 0.0, -68.0], [-20.0, 5.0, 45.0]), 1.5, 300, true),
        bundle(2, "cst_right", straight([12.0, 0.0, -68.0], [20.0, 5.0, 45.0]), 1.5, 300, true),
        bundle(
            3,
            "cerebellar_arc",
            Centerline::Arc { center: [0.0, -30.0, -30.0], radius: 30.0, u, v, start_deg: 150.0, end_deg: 390.0 },
            1.5,
            300,
            true,
        ),
        bundle(4, "fpt_left", straight([-16.5, 2.8, -15.0], [-21.5, 9.0, 50.0]), 1.5, 260, false),
        bundle(5, "fpt_right", straight([16.5, 2.8, -15.0], [21.5, 9.0, 50.0]), 1.5, 260, false),
        bundle(
            6,
            "callosal_arc",
            Centerline::Arc { center: [0.0, 10.0, 10.0], radius: 45.0, u, v, start_deg: 30.0, end_deg: 150.0 },
            1.5,
            250,
            false,
        ),
        bundle(
            7,
            "association_helix",
            Centerline::Helix { base: [35.0, -30.0, 25.0], axis: [0.0, 1.0, 0.0], radius: 6.0, pitch: 20.0, turns: 3.0 },
            1.5,
            250,
            false,
        ),
    ];
    CohortSpec {
        seed,
        subjects: 10,
        split: SplitProportions { train: 0.7, val: 0.1, test: 0.2 },
        n_points: DEFAULT_N_POINTS,
        max_rotation_deg: 5.0,
        max_translation_mm: 2.0,
        bundles,
    }
}
