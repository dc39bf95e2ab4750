//! Segmentation and geometry metrics.

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{LabelMap, Mask};
use crate::mesh::TriangleMesh;

/// Default boundary band width as a fraction of the image diagonal.
pub const DEFAULT_BAND_FRAC: f64 = 0.02;

/// Below this many reference points the neighbor search is brute force.
pub const GRID_MIN_POINTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdScore {
    pub id: u8,
    pub iou: f64,
    /// Number of views in which the ID was present in prediction or truth.
    pub views: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub per_id: Vec<IdScore>,
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeomScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
}

fn check_views(pred: &[LabelMap], gt: &[LabelMap]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted views, {} ground-truth views",
            pred.len(),
            gt.len()
        )));
    }
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if (p.width, p.height) != (g.width, g.height) {
            return Err(Error::ShapeMismatch(format!(
                "view {i}: prediction {}x{}, truth {}x{}",
                p.width, p.height, g.width, g.height
            )));
        }
    }
    Ok(())
}

fn score(pred: &[LabelMap], gt: &[LabelMap], ids: &[u8], iou: impl Fn(&Mask, &Mask) -> f64) -> Result<SegScore> {
    check_views(pred, gt)?;
    let mut per_id = Vec::new();
    for &id in ids {
        let (mut sum, mut views) = (0.0, 0usize);
        for (p, g) in pred.iter().zip(gt) {
            let (pm, gm) = (p.mask_of(id), g.mask_of(id));
            if pm.is_empty() && gm.is_empty() {
                continue;
            }
            sum += iou(&pm, &gm);
            views += 1;
        }
        if views > 0 {
            per_id.push(IdScore {
                id,
                iou: sum / views as f64,
                views,
            });
        }
    }
    if per_id.is_empty() {
        return Err(Error::NoEvaluableIds);
    }
    let mean = per_id.iter().map(|s| s.iou).sum::<f64>() / per_id.len() as f64;
    Ok(SegScore { per_id, mean })
}

/// Per-ID IoU averaged over views, then over IDs. Views where an ID is
/// absent from both prediction and truth are skipped.
pub fn miou(pred: &[LabelMap], gt: &[LabelMap], ids: &[u8]) -> Result<SegScore> {
    score(pred, gt, ids, |p, g| p.iou(g))
}

/// Pixels of `mask` within `radius` of a pixel outside it.
pub fn inner_band(mask: &Mask, radius: f64) -> Mask {
    let eroded = mask.erode(radius);
    Mask {
        width: mask.width,
        height: mask.height,
        data: mask.data.iter().zip(&eroded.data).map(|(&m, &e)| m && !e).collect(),
    }
}

/// IoU of the two masks restricted to the union of their inner boundary bands.
pub fn boundary_iou(pred: &Mask, gt: &Mask, radius: f64) -> f64 {
    let (bp, bg) = (inner_band(pred, radius), inner_band(gt, radius));
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..pred.data.len() {
        if !(bp.data[i] || bg.data[i]) {
            continue;
        }
        inter += (pred.data[i] && gt.data[i]) as usize;
        union += (pred.data[i] || gt.data[i]) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Boundary variant of [`miou`] with a band of `band_frac` times the image
/// diagonal.
pub fn mbiou(pred: &[LabelMap], gt: &[LabelMap], ids: &[u8], band_frac: f64) -> Result<SegScore> {
    if !(band_frac > 0.0) {
        return Err(Error::InvalidArgument(format!("band fraction must be positive, got {band_frac}")));
    }
    score(pred, gt, ids, |p, g| {
        let diag = ((p.width as f64).powi(2) + (p.height as f64).powi(2)).sqrt();
        boundary_iou(p, g, band_frac * diag)
    })
}

/// Uniform-grid index answering "is any point within r" queries exactly.
pub struct PointIndex<'a> {
    points: &'a [Vector3<f64>],
    radius: f64,
    cells: Option<HashMap<[i64; 3], Vec<usize>>>,
}

impl<'a> PointIndex<'a> {
    pub fn new(points: &'a [Vector3<f64>], radius: f64) -> Self {
        let cells = (points.len() >= GRID_MIN_POINTS).then(|| {
            let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
            for (i, p) in points.iter().enumerate() {
                cells.entry(cell_of(p, radius)).or_default().push(i);
            }
            cells
        });
        PointIndex { points, radius, cells }
    }

    pub fn has_neighbor(&self, q: &Vector3<f64>) -> bool {
        let r2 = self.radius * self.radius;
        let Some(cells) = &self.cells else {
            return self.points.iter().any(|p| (p - q).norm_squared() <= r2);
        };
        let c = cell_of(q, self.radius);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(ids) = cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        if ids.iter().any(|&i| (self.points[i] - q).norm_squared() <= r2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

fn cell_of(p: &Vector3<f64>, size: f64) -> [i64; 3] {
    [0, 1, 2].map(|k| (p[k] / size).floor() as i64)
}

fn fraction_within(from: &[Vector3<f64>], to: &[Vector3<f64>], tau: f64) -> f64 {
    let index = PointIndex::new(to, tau);
    from.iter().filter(|p| index.has_neighbor(p)).count() as f64 / from.len() as f64
}

/// Precision, recall and F1 of `pred` against `gt` at distance `tau`.
pub fn f1_geometry(pred: &[Vector3<f64>], gt: &[Vector3<f64>], tau: f64) -> Result<GeomScore> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::InvalidArgument("f1 needs nonempty point sets".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("threshold must be positive, got {tau}")));
    }
    let precision = fraction_within(pred, gt, tau);
    let recall = fraction_within(gt, pred, tau);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(GeomScore {
        precision,
        recall,
        f1,
        threshold: tau,
    })
}

/// Points sampled uniformly by area over the mesh surface.
pub fn sample_mesh<R: Rng + ?Sized>(mesh: &TriangleMesh, count: usize, rng: &mut R) -> Result<Vec<Vector3<f64>>> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("cannot sample a mesh with zero area".into()));
    }
    Ok((0..count)
        .map(|_| {
            let x = rng.random::<f64>() * total;
            let t = cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1);
            let [a, b, c] = mesh.triangle(t);
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            a + (b - a) * u + (c - a) * v
        })
        .collect())
}
