//! Depth-map fusion into a truncated signed distance volume and iso-surface
//! extraction.

pub mod table;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::SplatModel;
use crate::raster::{render_depth, RenderOptions};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl TriangleMesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(Error::Mesh(format!("triangle {t:?} indexes past {n} vertices")));
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Mesh("non-finite vertex coordinate".into()));
        }
        if let Some(ns) = &self.normals {
            if ns.len() != n {
                return Err(Error::Mesh(format!("{} normals for {n} vertices", ns.len())));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vector3<f64>; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Undirected edges used by exactly one triangle.
    pub fn boundary_edges(&self) -> usize {
        let mut count: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().filter(|&&c| c == 1).count()
    }

    /// Area-weighted vertex normals.
    pub fn compute_normals(&mut self) {
        let mut ns = vec![Vector3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| self.vertices[i as usize]);
            let n = (b - a).cross(&(c - a));
            for &i in t {
                ns[i as usize] += n;
            }
        }
        for n in &mut ns {
            let l = n.norm();
            if l > 0.0 {
                *n /= l;
            }
        }
        self.normals = Some(ns);
    }

    /// Keeps only triangles whose connected component (through shared
    /// vertices) has at least `min_triangles` members, then drops unused
    /// vertices. Relative order of what remains is preserved.
    pub fn remove_small_components(&self, min_triangles: usize) -> TriangleMesh {
        let n = self.vertices.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for t in &self.triangles {
            let a = find(&mut parent, t[0] as usize);
            for &v in &t[1..] {
                let b = find(&mut parent, v as usize);
                if a != b {
                    let (lo, hi) = (a.min(b), a.max(b));
                    parent[hi] = lo;
                }
            }
        }
        let mut size = vec![0usize; n];
        let roots: Vec<usize> = self
            .triangles
            .iter()
            .map(|t| find(&mut parent, t[0] as usize))
            .collect();
        for &r in &roots {
            size[r] += 1;
        }
        let mut remap = vec![u32::MAX; n];
        let mut out = TriangleMesh::default();
        for (t, &r) in self.triangles.iter().zip(&roots) {
            if size[r] < min_triangles {
                continue;
            }
            let tri = t.map(|v| {
                let v = v as usize;
                if remap[v] == u32::MAX {
                    remap[v] = out.vertices.len() as u32;
                    out.vertices.push(self.vertices[v]);
                }
                remap[v]
            });
            out.triangles.push(tri);
        }
        if let Some(ns) = &self.normals {
            let mut kept = vec![Vector3::zeros(); out.vertices.len()];
            for (old, &new) in remap.iter().enumerate() {
                if new != u32::MAX {
                    kept[new as usize] = ns[old];
                }
            }
            out.normals = Some(kept);
        }
        out
    }
}

/// Truncated signed distance voxel grid. Samples sit at
/// `origin + voxel_size * (i, j, k)`; positive values lie in front of the
/// observed surface.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub truncation: f64,
    pub max_weight: f64,
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3], truncation: f64) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidArgument(format!("volume dims {dims:?} must be >= 2 per axis")));
        }
        if !(voxel_size > 0.0 && truncation > 0.0) {
            return Err(Error::InvalidArgument("voxel size and truncation must be positive".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(TsdfVolume {
            origin,
            voxel_size,
            dims,
            truncation,
            max_weight: 64.0,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
        })
    }

    /// Volume covering `lo..hi` plus a margin of one truncation band.
    pub fn covering(lo: Vector3<f64>, hi: Vector3<f64>, voxel_size: f64, truncation: f64) -> Result<Self> {
        let pad = truncation + voxel_size;
        let origin = lo - Vector3::repeat(pad);
        let span = hi - lo + Vector3::repeat(2.0 * pad);
        let dims = [0, 1, 2].map(|k| ((span[k] / voxel_size).ceil() as usize + 1).max(2));
        Self::new(origin, voxel_size, dims, truncation)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.voxel_size
    }

    /// Fuses one depth map (0 marks missing depth).
    pub fn integrate(&mut self, depth: &[f64], camera: &Camera) -> Result<()> {
        camera.validate()?;
        if depth.len() != camera.pixel_count() {
            return Err(Error::ShapeMismatch(format!(
                "depth map has {} pixels, camera {}x{}",
                depth.len(),
                camera.width,
                camera.height
            )));
        }
        let [nx, ny, _] = self.dims;
        let (origin, vs, tau, cap) = (self.origin, self.voxel_size, self.truncation, self.max_weight);
        let slab = nx * ny;
        self.tsdf
            .par_chunks_mut(slab)
            .zip(self.weight.par_chunks_mut(slab))
            .enumerate()
            .for_each(|(k, (tsdf, weight))| {
                for j in 0..ny {
                    for i in 0..nx {
                        let p = origin + Vector3::new(i as f64, j as f64, k as f64) * vs;
                        let Some((x, y, z)) = camera.project(&p) else {
                            continue;
                        };
                        if z <= 0.0 || x < 0.0 || y < 0.0 {
                            continue;
                        }
                        let (px, py) = (x as usize, y as usize);
                        if px >= camera.width as usize || py >= camera.height as usize {
                            continue;
                        }
                        let d = depth[py * camera.width as usize + px];
                        if !(d > 0.0) {
                            continue;
                        }
                        let sdf = d - z;
                        if sdf <= -tau {
                            continue;
                        }
                        let idx = j * nx + i;
                        let w = weight[idx];
                        tsdf[idx] = (w * tsdf[idx] + (sdf / tau).clamp(-1.0, 1.0)) / (w + 1.0);
                        weight[idx] = (w + 1.0).min(cap);
                    }
                }
            });
        Ok(())
    }

    /// Writes the grid as raw little-endian doubles (tsdf then weights) with
    /// a JSON header next to it at `<path>.json`.
    pub fn dump(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            origin: [f64; 3],
            voxel_size: f64,
            dims: &'a [usize; 3],
            truncation: f64,
            layout: &'static str,
        }
        let header = Header {
            origin: self.origin.into(),
            voxel_size: self.voxel_size,
            dims: &self.dims,
            truncation: self.truncation,
            layout: "f64 le, x fastest; tsdf block then weight block",
        };
        let hp = path.with_extension("json");
        std::fs::write(&hp, serde_json::to_string_pretty(&header).expect("header serializes"))
            .map_err(|e| Error::io(&hp, e))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for v in self.tsdf.iter().chain(&self.weight) {
            f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }
}

/// Iso-surface of the volume. Cells touching an unobserved voxel are
/// skipped, and vertices on shared edges are created once.
pub fn marching_cubes(volume: &TsdfVolume, iso: f64) -> TriangleMesh {
    let [nx, ny, nz] = volume.dims;
    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut case = 0usize;
                let mut values = [0.0; 8];
                let mut observed = true;
                for c in 0..8 {
                    let [di, dj, dk] = table::corner_offset(c);
                    let idx = volume.index(i + di, j + dj, k + dk);
                    if volume.weight[idx] <= 0.0 {
                        observed = false;
                        break;
                    }
                    values[c] = volume.tsdf[idx];
                    if values[c] < iso {
                        case |= 1 << c;
                    }
                }
                if !observed || case == 0 || case == 255 {
                    continue;
                }
                for tri in table::triangles(case) {
                    let ids = tri.map(|e| {
                        let (a, b) = table::EDGES[e];
                        let oa = table::corner_offset(a);
                        let ob = table::corner_offset(b);
                        let axis = (0..3).find(|&q| oa[q] != ob[q]).expect("edge spans one axis");
                        let base = volume.index(i + oa[0], j + oa[1], k + oa[2]);
                        *edge_vertex.entry((base, axis)).or_insert_with(|| {
                            let pa = volume.position(i + oa[0], j + oa[1], k + oa[2]);
                            let pb = volume.position(i + ob[0], j + ob[1], k + ob[2]);
                            let t = (iso - values[a]) / (values[b] - values[a]);
                            mesh.vertices.push(pa + (pb - pa) * t);
                            (mesh.vertices.len() - 1) as u32
                        })
                    });
                    mesh.triangles.push(ids);
                }
            }
        }
    }
    mesh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    /// Voxel edge length; by default the bounds diagonal over `resolution`.
    pub voxel_size: Option<f64>,
    pub resolution: usize,
    /// Truncation distance in voxels.
    pub truncation_voxels: f64,
    pub max_weight: f64,
    pub min_component_triangles: usize,
    pub render: RenderOptions,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            voxel_size: None,
            resolution: 256,
            truncation_voxels: 4.0,
            max_weight: 64.0,
            min_component_triangles: 50,
            render: RenderOptions::default(),
        }
    }
}

/// Bounds of the splat disks: centers padded by three times the largest scale.
pub fn model_bounds(model: &SplatModel) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let (lo, hi) = model.center_bounds()?;
    let pad = Vector3::repeat(3.0 * model.max_scale());
    Some((lo - pad, hi + pad))
}

/// Renders median depth from every camera, fuses it and extracts the surface.
pub fn fuse_depth(model: &SplatModel, cameras: &[Camera], config: &MeshConfig) -> Result<TsdfVolume> {
    if model.is_empty() {
        return Err(Error::InvalidArgument("cannot mesh an empty model".into()));
    }
    if cameras.is_empty() {
        return Err(Error::InvalidArgument("meshing needs at least one camera".into()));
    }
    let (lo, hi) = model_bounds(model).expect("nonempty model");
    let voxel = config
        .voxel_size
        .unwrap_or_else(|| (hi - lo).norm() / config.resolution.max(1) as f64);
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid voxel size {voxel}")));
    }
    let mut volume = TsdfVolume::covering(lo, hi, voxel, config.truncation_voxels * voxel)?;
    volume.max_weight = config.max_weight;
    for cam in cameras {
        let (depth, _) = render_depth(model, cam, &config.render)?;
        volume.integrate(&depth, cam)?;
    }
    Ok(volume)
}

pub fn extract_mesh(model: &SplatModel, cameras: &[Camera], config: &MeshConfig) -> Result<TriangleMesh> {
    let volume = fuse_depth(model, cameras, config)?;
    let raw = marching_cubes(&volume, 0.0);
    let mut mesh = raw.remove_small_components(config.min_component_triangles);
    if mesh.is_empty() {
        return Err(Error::EmptySurface(format!(
            "no surface at voxel size {:.4} ({} raw triangles); try a smaller voxel size or a larger truncation",
            volume.voxel_size,
            raw.triangles.len()
        )));
    }
    mesh.compute_normals();
    Ok(mesh)
}
