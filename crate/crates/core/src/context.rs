//! Local-global context for each streamline.
//!
//! A streamline is described together with its `k_local` nearest neighbors
//! under MDF and `k_global` streamlines drawn uniformly from the whole
//! tractogram. Each context row pairs the anchor's coordinates with one
//! context streamline's coordinates; row 0 pairs the anchor with itself.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tract::{mdf_points, CutStatus, Point, Tractogram};

pub const DEFAULT_K_LOCAL: usize = 20;
pub const DEFAULT_K_GLOBAL: usize = 500;

/// Affine input scaling: subtract `center`, divide by `scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Normalization {
        Normalization { center: [0.0; 3], scale: 1.0 }
    }

    /// Bounding-box midpoint and half diagonal of the union of `tractograms`.
    pub fn fit<'a>(tractograms: impl IntoIterator<Item = &'a Tractogram>) -> Result<Normalization> {
        let mut bbox: Option<(Point, Point)> = None;
        for t in tractograms {
            if t.is_empty() {
                continue;
            }
            let (lo, hi) = t.bounding_box()?;
            bbox = Some(match bbox {
                None => (lo, hi),
                Some((a, b)) => (a.inf(&lo), b.sup(&hi)),
            });
        }
        let (lo, hi) = bbox.ok_or(Error::EmptyTractogram)?;
        let center = nalgebra::center(&lo, &hi);
        let scale = (hi - lo).norm() / 2.0;
        if scale <= 0.0 || !scale.is_finite() {
            return Err(Error::EmptyInput("bounding box has no extent".into()));
        }
        Ok(Normalization { center: [center.x, center.y, center.z], scale })
    }

    pub fn apply(&self, p: &Point) -> [f64; 3] {
        [
            (p.x - self.center[0]) / self.scale,
            (p.y - self.center[1]) / self.scale,
            (p.z - self.center[2]) / self.scale,
        ]
    }

    pub fn flatten(&self, points: &[Point]) -> Vec<f64> {
        points.iter().flat_map(|p| self.apply(p)).collect()
    }
}

/// Exact MDF nearest-neighbor index over one tractogram.
///
/// The centroid distance is a lower bound on MDF (flipping does not move
/// the centroid), and its projection on one axis is a lower bound on the
/// centroid distance. Queries sweep outward along that axis and stop once
/// the bound exceeds the current k-th best distance.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    n_points: usize,
    points: Vec<Point>,
    centroids: Vec<Point>,
    axis: usize,
    /// Streamline ids sorted by centroid coordinate on `axis`.
    order: Vec<usize>,
    /// Position of each id in `order`.
    rank: Vec<usize>,
}

pub fn build_index(t: &Tractogram) -> Result<NeighborIndex> {
    let n_points = match t.streamlines().first() {
        None => 0,
        Some(s) => s.n_points(),
    };
    if let Some(bad) = t.streamlines().iter().find(|s| s.n_points() != n_points) {
        return Err(Error::ShapeMismatch(format!(
            "index needs one point count, found {n_points} and {}",
            bad.n_points()
        )));
    }
    let points: Vec<Point> = t.streamlines().iter().flat_map(|s| s.points().iter().copied()).collect();
    let centroids: Vec<Point> = t
        .streamlines()
        .iter()
        .map(|s| {
            let sum = s.points().iter().fold(nalgebra::Vector3::zeros(), |acc, p| acc + p.coords);
            Point::from(sum / n_points as f64)
        })
        .collect();
    let axis = (0..3)
        .max_by(|&a, &b| {
            let spread = |k: usize| {
                let (lo, hi) = centroids
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c[k]), hi.max(c[k])));
                hi - lo
            };
            spread(a).total_cmp(&spread(b))
        })
        .unwrap_or(0);
    let mut order: Vec<usize> = (0..centroids.len()).collect();
    order.sort_by(|&a, &b| centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b)));
    let mut rank = vec![0; order.len()];
    for (pos, &id) in order.iter().enumerate() {
        rank[id] = pos;
    }
    Ok(NeighborIndex { n_points, points, centroids, axis, order, rank })
}

fn rank_cmp(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn streamline(&self, id: usize) -> &[Point] {
        &self.points[id * self.n_points..(id + 1) * self.n_points]
    }

    /// The `k` nearest other streamlines as `(distance, id)`, ascending by
    /// distance then id. Returns fewer when the tractogram is small.
    pub fn knn(&self, query: usize, k: usize) -> Result<Vec<(f64, usize)>> {
        if query >= self.len() {
            return Err(Error::IndexOutOfRange { index: query, len: self.len() });
        }
        let k = k.min(self.len() - 1);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k == 0 {
            return Ok(best);
        }
        let q = self.streamline(query);
        let qc = self.centroids[query];
        let qa = qc[self.axis];
        let pos = self.rank[query];
        let (mut left, mut right) = (pos, pos + 1);
        // Rounding slack so that bound-equals-distance ties are never pruned.
        let slack = |d: f64| d * (1.0 + 1e-12) + 1e-12;
        loop {
            let dl = (left > 0).then(|| qa - self.centroids[self.order[left - 1]][self.axis]);
            let dr = (right < self.order.len()).then(|| self.centroids[self.order[right]][self.axis] - qa);
            let (gap, id) = match (dl, dr) {
                (None, None) => break,
                (Some(l), Some(r)) if l <= r => {
                    left -= 1;
                    (l, self.order[left])
                }
                (Some(l), None) => {
                    left -= 1;
                    (l, self.order[left])
                }
                (_, Some(r)) => {
                    right += 1;
                    (r, self.order[right - 1])
                }
            };
            let full = best.len() == k;
            if full && gap > slack(best[k - 1].0) {
                break;
            }
            if full && (self.centroids[id] - qc).norm() > slack(best[k - 1].0) {
                continue;
            }
            let cand = (mdf_points(q, self.streamline(id)), id);
            if full && rank_cmp(&cand, &best[k - 1]) != Ordering::Less {
                continue;
            }
            let at = best.partition_point(|b| rank_cmp(b, &cand) == Ordering::Less);
            best.insert(at, cand);
            best.truncate(k);
        }
        Ok(best)
    }
}

/// The `k_local` nearest neighbors of `query`, self excluded. When fewer
/// than `k_local` others exist the ranked list repeats cyclically; a lone
/// streamline is padded with itself.
pub fn local_context(index: &NeighborIndex, query: usize, k_local: usize) -> Result<Vec<usize>> {
    let ranked: Vec<usize> = index.knn(query, k_local)?.into_iter().map(|(_, id)| id).collect();
    if ranked.is_empty() {
        return Ok(vec![query; k_local]);
    }
    Ok(ranked.iter().copied().cycle().take(k_local).collect())
}

/// `k_global` ids drawn uniformly with replacement.
pub fn global_context(rng: &mut impl Rng, t: &Tractogram, k_global: usize) -> Result<Vec<usize>> {
    if t.is_empty() {
        return Err(Error::EmptyTractogram);
    }
    Ok((0..k_global).map(|_| rng.random_range(0..t.len())).collect())
}

/// One network input: the anchor's normalized coordinates and the
/// coordinates of every context streamline. Row `j` of the pairwise matrix
/// is `anchor ++ context(j)`; `context(0)` is the anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextInput {
    n_points: usize,
    contexts: Vec<f64>,
}

impl ContextInput {
    /// `anchor` and each entry of `others` hold `3 * n_points` values.
    pub fn new(anchor: &[f64], others: &[&[f64]]) -> Result<ContextInput> {
        if !anchor.len().is_multiple_of(3) || anchor.is_empty() {
            return Err(Error::ShapeMismatch(format!("anchor holds {} values", anchor.len())));
        }
        let width = anchor.len();
        let mut contexts = Vec::with_capacity(width * (others.len() + 1));
        contexts.extend_from_slice(anchor);
        for o in others {
            if o.len() != width {
                return Err(Error::ShapeMismatch(format!(
                    "context streamline holds {} values, anchor {width}",
                    o.len()
                )));
            }
            contexts.extend_from_slice(o);
        }
        if contexts.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(ContextInput { n_points: width / 3, contexts })
    }

    /// Rebuilds an input from its `rows x 2H` pairwise matrix.
    pub fn from_matrix(matrix: &[f64], rows: usize) -> Result<ContextInput> {
        if rows == 0 || !matrix.len().is_multiple_of(rows) || !(matrix.len() / rows).is_multiple_of(6) {
            return Err(Error::ShapeMismatch(format!("{} values in {rows} rows", matrix.len())));
        }
        let width = matrix.len() / rows;
        let half = width / 2;
        let anchor = &matrix[..half];
        let mut others = Vec::with_capacity(rows - 1);
        for j in 0..rows {
            let row = &matrix[j * width..(j + 1) * width];
            if row[..half] != *anchor {
                return Err(Error::ShapeMismatch(format!("row {j} has a different anchor half")));
            }
            if j == 0 && row[half..] != *anchor {
                return Err(Error::ShapeMismatch("row 0 must pair the anchor with itself".into()));
            }
            if j > 0 {
                others.push(&row[half..]);
            }
        }
        ContextInput::new(anchor, &others)
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// `3 * n_points`.
    pub fn half_width(&self) -> usize {
        3 * self.n_points
    }

    pub fn rows(&self) -> usize {
        self.contexts.len() / self.half_width()
    }

    pub fn anchor(&self) -> &[f64] {
        self.context(0)
    }

    pub fn context(&self, j: usize) -> &[f64] {
        let h = self.half_width();
        &self.contexts[j * h..(j + 1) * h]
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        let mut r = self.anchor().to_vec();
        r.extend_from_slice(self.context(j));
        r
    }

    /// Row-major `rows x (2 * 3 * n_points)` matrix.
    pub fn matrix(&self) -> Vec<f64> {
        (0..self.rows()).flat_map(|j| self.row(j)).collect()
    }

    /// Context rows reordered: row `j >= 1` becomes old row `perm[j - 1]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<ContextInput> {
        if perm.len() + 1 != self.rows() {
            return Err(Error::ShapeMismatch("permutation length".into()));
        }
        let others: Vec<&[f64]> = perm.iter().map(|&j| self.context(j)).collect();
        ContextInput::new(self.anchor(), &others)
    }
}

/// Context rows in draw order: self, locals by rank, globals by draw.
pub fn assemble_input(
    anchor: usize,
    local: &[usize],
    global: &[usize],
    t: &Tractogram,
    norm: &Normalization,
) -> Result<ContextInput> {
    let get = |id: usize| {
        t.streamlines()
            .get(id)
            .ok_or(Error::IndexOutOfRange { index: id, len: t.len() })
    };
    let a = get(anchor)?;
    let a_flat = norm.flatten(a.points());
    let mut others = Vec::with_capacity(local.len() + global.len());
    for &id in local.iter().chain(global) {
        let s = get(id)?;
        if s.n_points() != a.n_points() {
            return Err(Error::ShapeMismatch(format!(
                "streamline {id} has {} points, anchor {}",
                s.n_points(),
                a.n_points()
            )));
        }
        others.push(norm.flatten(s.points()));
    }
    let refs: Vec<&[f64]> = others.iter().map(Vec::as_slice).collect();
    ContextInput::new(&a_flat, &refs)
}

/// Anything the network can read context rows from.
pub trait ContextSource: Sync {
    fn half_width(&self) -> usize;
    fn num_samples(&self) -> usize;
    fn num_rows(&self, sample: usize) -> usize;
    fn anchor(&self, sample: usize) -> &[f64];
    fn context(&self, sample: usize, row: usize) -> &[f64];
}

impl ContextSource for [ContextInput] {
    fn half_width(&self) -> usize {
        self.first().map_or(0, ContextInput::half_width)
    }
    fn num_samples(&self) -> usize {
        self.len()
    }
    fn num_rows(&self, sample: usize) -> usize {
        self[sample].rows()
    }
    fn anchor(&self, sample: usize) -> &[f64] {
        self[sample].anchor()
    }
    fn context(&self, sample: usize, row: usize) -> &[f64] {
        self[sample].context(row)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextParams {
    pub k_local: usize,
    pub k_global: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleInfo {
    pub tractogram: usize,
    pub streamline: usize,
    pub label: Option<usize>,
    pub cut_status: CutStatus,
}

/// Context for every streamline of a set of tractograms, stored as ids into
/// normalized coordinate tables rather than materialized matrices.
#[derive(Clone, Debug)]
pub struct ContextDataset {
    half_width: usize,
    rows: usize,
    coords: Vec<Vec<f64>>,
    samples: Vec<SampleInfo>,
    context_ids: Vec<u32>,
}

impl ContextDataset {
    /// Neighbors are searched within each streamline's own tractogram, so a
    /// cut tractogram yields contexts built from cut geometry. Global draws
    /// for streamline `s` of tractogram `t` come from substream `(t, s)`.
    pub fn build(tractograms: &[Tractogram], params: ContextParams, norm: &Normalization) -> Result<ContextDataset> {
        let n_points = tractograms
            .iter()
            .find_map(|t| t.streamlines().first().map(|s| s.n_points()))
            .ok_or(Error::EmptyDataset)?;
        let rows = 1 + params.k_local + params.k_global;
        let per_tract = tractograms
            .par_iter()
            .enumerate()
            .map(|(ti, t)| -> Result<_> {
                if t.is_empty() {
                    return Ok((Vec::new(), Vec::new(), Vec::new()));
                }
                let index = build_index(t)?;
                if index.n_points() != n_points {
                    return Err(Error::ShapeMismatch(format!(
                        "tractogram {ti} has {} points per streamline, expected {n_points}",
                        index.n_points()
                    )));
                }
                let coords: Vec<f64> = t.streamlines().iter().flat_map(|s| norm.flatten(s.points())).collect();
                let mut ids = Vec::with_capacity(t.len() * rows);
                let mut samples = Vec::with_capacity(t.len());
                for (si, s) in t.streamlines().iter().enumerate() {
                    let local = local_context(&index, si, params.k_local)?;
                    let mut rng = substream(params.seed, "global-context", &[ti as u64, si as u64]);
                    let global = global_context(&mut rng, t, params.k_global)?;
                    ids.push(si as u32);
                    ids.extend(local.iter().chain(&global).map(|&i| i as u32));
                    samples.push(SampleInfo { tractogram: ti, streamline: si, label: s.label, cut_status: s.cut_status });
                }
                Ok((coords, samples, ids))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut coords = Vec::with_capacity(per_tract.len());
        let mut samples = Vec::new();
        let mut context_ids = Vec::new();
        for (c, s, ids) in per_tract {
            coords.push(c);
            samples.extend(s);
            context_ids.extend(ids);
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(ContextDataset { half_width: 3 * n_points, rows, coords, samples, context_ids })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn samples(&self) -> &[SampleInfo] {
        &self.samples
    }

    pub fn context_ids(&self, sample: usize) -> &[u32] {
        &self.context_ids[sample * self.rows..(sample + 1) * self.rows]
    }

    fn streamline_coords(&self, tractogram: usize, id: usize) -> &[f64] {
        let h = self.half_width;
        &self.coords[tractogram][id * h..(id + 1) * h]
    }

    /// Materializes one sample.
    pub fn input(&self, sample: usize) -> ContextInput {
        let others: Vec<&[f64]> = (1..self.rows).map(|j| ContextSource::context(self, sample, j)).collect();
        ContextInput::new(ContextSource::anchor(self, sample), &others).expect("dataset rows are consistent")
    }
}

impl ContextSource for ContextDataset {
    fn half_width(&self) -> usize {
        self.half_width
    }
    fn num_samples(&self) -> usize {
        self.samples.len()
    }
    fn num_rows(&self, _sample: usize) -> usize {
        self.rows
    }
    fn anchor(&self, sample: usize) -> &[f64] {
        let s = &self.samples[sample];
        self.streamline_coords(s.tractogram, s.streamline)
    }
    fn context(&self, sample: usize, row: usize) -> &[f64] {
        let s = &self.samples[sample];
        self.streamline_coords(s.tractogram, self.context_ids[sample * self.rows + row] as usize)
    }
}

/// Sidecar describing a flat little-endian f32 cache of assembled inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextCacheMeta {
    pub samples: usize,
    pub rows: usize,
    pub row_width: usize,
    pub n_points: usize,
    pub dtype: String,
    pub normalization: Normalization,
    pub seed: u64,
}

/// Writes `<stem>.bin` (pairwise matrices, f32 LE) and `<stem>.json`.
pub fn write_context_cache(stem: &Path, inputs: &[ContextInput], norm: &Normalization, seed: u64) -> Result<()> {
    let first = inputs.first().ok_or(Error::EmptyDataset)?;
    let (rows, n_points) = (first.rows(), first.n_points());
    if let Some(bad) = inputs.iter().find(|i| i.rows() != rows || i.n_points() != n_points) {
        return Err(Error::ShapeMismatch(format!(
            "cache needs uniform shapes, found {}x{} and {}x{}",
            rows,
            n_points,
            bad.rows(),
            bad.n_points()
        )));
    }
    let mut w = BufWriter::new(File::create(stem.with_extension("bin"))?);
    for input in inputs {
        for v in input.matrix() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    let meta = ContextCacheMeta {
        samples: inputs.len(),
        rows,
        row_width: 6 * n_points,
        n_points,
        dtype: "f32le".into(),
        normalization: *norm,
        seed,
    };
    std::fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn read_context_cache(stem: &Path) -> Result<(ContextCacheMeta, Vec<ContextInput>)> {
    let meta: ContextCacheMeta = serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
    if meta.dtype != "f32le" || meta.row_width != 6 * meta.n_points {
        return Err(Error::ShapeMismatch("unsupported cache layout".into()));
    }
    let per_sample = meta.rows * meta.row_width;
    let mut bytes = Vec::new();
    BufReader::new(File::open(stem.with_extension("bin"))?).read_to_end(&mut bytes)?;
    if bytes.len() != 4 * per_sample * meta.samples {
        return Err(Error::TruncatedFile(format!(
            "cache holds {} bytes, sidecar implies {}",
            bytes.len(),
            4 * per_sample * meta.samples
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let inputs = values
        .chunks_exact(per_sample)
        .map(|m| ContextInput::from_matrix(m, meta.rows))
        .collect::<Result<Vec<_>>>()?;
    Ok((meta, inputs))
}
