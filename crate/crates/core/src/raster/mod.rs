//! Tile-binned ray/disk rasterization with front-to-back alpha compositing.
//!
//! Every pixel casts a ray through its center, intersects it with each
//! overlapping disk's tangent plane, and blends color, identity, depth and
//! coverage with the same compositing weights. The object-space kernel is
//! floored by a screen-space Gaussian around the projected center so that
//! disks seen edge-on still cover about a pixel.

mod backward;

pub use backward::{backward, RenderGrad};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::sh::{sh_basis_with_grad, sh_coeff_count};
use crate::gaussian::{Splat, SplatModel, ID_DIM};
use crate::imaging::ColorImage;

pub const TILE_SIZE: usize = 16;

/// Rays closer to parallel with the disk plane than this are treated as misses.
pub const PARALLEL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterParams {
    /// Screen-space standard deviation in pixels.
    pub sigma_screen: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            sigma_screen: 0.7071,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// Depth of the contributor at which transmittance first drops below 0.5.
    Median,
    /// Alpha-normalized weighted mean of contributor depths.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    pub filter: FilterParams,
    pub background: [f64; 3],
    /// Contributions with a filtered kernel value below this are skipped.
    /// Zero disables both the cutoff and the tile culling it enables.
    pub kernel_cutoff: f64,
    /// Compositing stops once transmittance falls below this.
    pub min_transmittance: f64,
    pub depth_mode: DepthMode,
    /// Splats and intersections closer than this camera depth are ignored.
    pub near: f64,
    /// Use the rayon pool for tiles. Results are identical either way.
    pub parallel: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            filter: FilterParams::default(),
            background: [0.0; 3],
            kernel_cutoff: 1.0 / 255.0,
            min_transmittance: 1e-4,
            depth_mode: DepthMode::Median,
            near: 0.01,
            parallel: false,
        }
    }
}

impl RenderOptions {
    /// No cutoffs and no early termination: the rendered quantities are smooth
    /// functions of the parameters away from branch switches.
    pub fn exact() -> Self {
        RenderOptions {
            kernel_cutoff: 0.0,
            min_transmittance: 0.0,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.filter.sigma_screen > 0.0) {
            return Err(Error::InvalidArgument("sigma_screen must be positive".into()));
        }
        if !(self.kernel_cutoff >= 0.0 && self.kernel_cutoff < 1.0) {
            return Err(Error::InvalidArgument("kernel_cutoff must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    pub color: Vec<[f64; 3]>,
    pub identity: Vec<[f64; ID_DIM]>,
    /// Camera-space depth; 0 where no depth is defined.
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub contributors: Vec<u32>,
}

impl RenderOutput {
    pub fn color_image(&self) -> ColorImage {
        ColorImage {
            width: self.width,
            height: self.height,
            data: self.color.clone(),
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Per-view state of one splat that survived culling.
#[derive(Debug, Clone)]
pub(crate) struct Projected {
    pub index: usize,
    /// Camera-space center and tangent frame.
    pub p: Vector3<f64>,
    pub tu: Vector3<f64>,
    pub tv: Vector3<f64>,
    pub n: Vector3<f64>,
    pub su: f64,
    pub sv: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Channels whose raw color left [0, 1] and got clamped.
    pub clamped: [bool; 3],
    /// Projected center in pixels.
    pub cx: f64,
    pub cy: f64,
    pub bbox: [usize; 4],
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Hit {
    pub g: f64,
    pub object_branch: bool,
    pub u: f64,
    pub v: f64,
    pub lambda: f64,
    pub depth: f64,
}

/// Forward intermediates needed by [`backward`].
#[derive(Debug, Clone)]
pub struct RenderTrace {
    pub(crate) camera: Camera,
    pub(crate) options: RenderOptions,
    pub(crate) splat_count: usize,
    pub(crate) projected: Vec<Projected>,
    pub(crate) tiles: Vec<Vec<u32>>,
    pub(crate) signature: u64,
}

impl RenderTrace {
    /// Hash of every discrete decision taken in the forward pass: draw
    /// order, culling, contributor sets, kernel branches, clamping and
    /// median selection. Two renders with equal signatures lie in the same
    /// smooth piece of the rendering function.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    /// Splat indices that were not culled for this view.
    pub fn visible_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.projected.iter().map(|p| p.index)
    }
}

pub(crate) fn evaluate(ps: &Projected, ray: &Vector3<f64>, x: f64, y: f64, sigma: f64, near: f64) -> Hit {
    let dx = x - ps.cx;
    let dy = y - ps.cy;
    let g_screen = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
    let denom = ray.dot(&ps.n);
    if denom.abs() >= PARALLEL_EPS {
        let lambda = ps.p.dot(&ps.n) / denom;
        if lambda > near {
            let r = ray * lambda - ps.p;
            let u = r.dot(&ps.tu) / ps.su;
            let v = r.dot(&ps.tv) / ps.sv;
            let g_obj = (-(u * u + v * v) / 2.0).exp();
            if g_obj >= g_screen {
                return Hit {
                    g: g_obj,
                    object_branch: true,
                    u,
                    v,
                    lambda,
                    depth: lambda,
                };
            }
        }
    }
    Hit {
        g: g_screen,
        object_branch: false,
        u: 0.0,
        v: 0.0,
        lambda: 0.0,
        depth: ps.p.z,
    }
}

/// Low-pass filtered kernel: the larger of the object-space value and a
/// screen-space Gaussian of the pixel's offset from the projected center.
pub fn filtered_weight(g_uv: f64, x: [f64; 2], c: [f64; 2], sigma: f64) -> f64 {
    let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
    g_uv.max((-d2 / (2.0 * sigma * sigma)).exp())
}

/// Intersects the ray through pixel coordinate `pixel` (continuous, pixel
/// centers at +0.5) with the splat's plane. Returns scale-normalized local
/// coordinates and camera depth.
pub fn ray_splat_intersect(camera: &Camera, pixel: [f64; 2], splat: &Splat) -> Option<(f64, f64, f64)> {
    let rot = camera.rotation();
    let frame = rot * splat.frame();
    let p = camera.to_camera(&splat.center);
    let n = frame.column(2);
    let ray = camera.ray(pixel[0], pixel[1]);
    let denom = ray.dot(&n);
    if denom.abs() < PARALLEL_EPS {
        return None;
    }
    let lambda = p.dot(&n) / denom;
    if lambda <= 0.0 {
        return None;
    }
    let r = ray * lambda - p;
    let s = splat.scales();
    Some((r.dot(&frame.column(0)) / s.x, r.dot(&frame.column(1)) / s.y, lambda))
}

pub(crate) fn splat_color(
    splat: &Splat,
    degree: usize,
    cam_center: &Vector3<f64>,
) -> ([f64; 3], [bool; 3]) {
    let v = splat.center - cam_center;
    let norm = v.norm();
    let dir = if norm > 0.0 { v / norm } else { Vector3::z() };
    let (basis, _) = sh_basis_with_grad(&dir, degree);
    let mut raw = [0.5; 3];
    for (k, b) in basis.iter().enumerate().take(sh_coeff_count(degree)) {
        for (c, out) in raw.iter_mut().enumerate() {
            *out += splat.sh[k][c] * b;
        }
    }
    let clamped = raw.map(|v| !(0.0..=1.0).contains(&v));
    (raw.map(|v| v.clamp(0.0, 1.0)), clamped)
}

fn project_splats(model: &SplatModel, camera: &Camera, options: &RenderOptions) -> Vec<Projected> {
    let rot: Matrix3<f64> = camera.rotation();
    let trans = camera.translation();
    let cam_center = camera.center();
    let (w, h) = (camera.width as usize, camera.height as usize);
    let sigma = options.filter.sigma_screen;
    let radius = if options.kernel_cutoff > 0.0 {
        Some((-2.0 * options.kernel_cutoff.ln()).sqrt())
    } else {
        None
    };

    let mut out = Vec::with_capacity(model.len());
    for (index, splat) in model.splats.iter().enumerate() {
        let p = rot * splat.center + trans;
        if p.z <= options.near {
            continue;
        }
        let frame = rot * splat.frame();
        let s = splat.scales();
        let cx = camera.fx * p.x / p.z + camera.cx;
        let cy = camera.fy * p.y / p.z + camera.cy;

        let bbox = match radius {
            None => [0, 0, w, h],
            Some(r) => {
                let mut lo = [cx - sigma * r, cy - sigma * r];
                let mut hi = [cx + sigma * r, cy + sigma * r];
                let mut full = false;
                for (su, sv) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                    let q = p + frame.column(0) * (su * r * s.x) + frame.column(1) * (sv * r * s.y);
                    if q.z <= options.near {
                        full = true;
                        break;
                    }
                    let qx = camera.fx * q.x / q.z + camera.cx;
                    let qy = camera.fy * q.y / q.z + camera.cy;
                    lo = [lo[0].min(qx), lo[1].min(qy)];
                    hi = [hi[0].max(qx), hi[1].max(qy)];
                }
                if full {
                    [0, 0, w, h]
                } else {
                    // pixel i is sampled at i + 0.5
                    let x0 = (lo[0] - 0.5).ceil().max(0.0);
                    let y0 = (lo[1] - 0.5).ceil().max(0.0);
                    let x1 = ((hi[0] - 0.5).floor() + 1.0).min(w as f64);
                    let y1 = ((hi[1] - 0.5).floor() + 1.0).min(h as f64);
                    if !(x1 > x0 && y1 > y0) {
                        continue;
                    }
                    [x0 as usize, y0 as usize, x1 as usize, y1 as usize]
                }
            }
        };
        let (color, clamped) = splat_color(splat, model.sh_degree, &cam_center);
        out.push(Projected {
            index,
            p,
            tu: frame.column(0).into_owned(),
            tv: frame.column(1).into_owned(),
            n: frame.column(2).into_owned(),
            su: s.x,
            sv: s.y,
            opacity: splat.opacity(),
            color,
            clamped,
            cx,
            cy,
            bbox,
        });
    }
    // front-to-back by center depth, stable on splat index
    out.sort_by(|a, b| a.p.z.total_cmp(&b.p.z).then(a.index.cmp(&b.index)));
    out
}

fn bin_tiles(projected: &[Projected], width: usize, height: usize) -> Vec<Vec<u32>> {
    let tw = width.div_ceil(TILE_SIZE);
    let th = height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tw * th];
    for (pos, ps) in projected.iter().enumerate() {
        let [x0, y0, x1, y1] = ps.bbox;
        for ty in y0 / TILE_SIZE..y1.div_ceil(TILE_SIZE) {
            for tx in x0 / TILE_SIZE..x1.div_ceil(TILE_SIZE) {
                tiles[ty * tw + tx].push(pos as u32);
            }
        }
    }
    tiles
}

pub(crate) fn tile_pixels(tile: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let tw = width.div_ceil(TILE_SIZE);
    let (tx, ty) = (tile % tw, tile / tw);
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    let x1 = (x0 + TILE_SIZE).min(width);
    let y1 = (y0 + TILE_SIZE).min(height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

struct PixelResult {
    idx: usize,
    color: [f64; 3],
    identity: [f64; ID_DIM],
    alpha: f64,
    depth: f64,
    contributors: u32,
}

const FNV_PRIME: u64 = 0x100_0000_01b3;

fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(FNV_PRIME)
}

fn render_tile(
    tile: usize,
    list: &[u32],
    projected: &[Projected],
    model: &SplatModel,
    camera: &Camera,
    options: &RenderOptions,
) -> (Vec<PixelResult>, u64) {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let sigma = options.filter.sigma_screen;
    let mut sig = 0xcbf2_9ce4_8422_2325u64;
    let mut results = Vec::with_capacity(TILE_SIZE * TILE_SIZE);
    for (px, py) in tile_pixels(tile, w, h) {
        let x = px as f64 + 0.5;
        let y = py as f64 + 0.5;
        let ray = camera.ray(x, y);
        let mut t = 1.0;
        let mut color = [0.0; 3];
        let mut identity = [0.0; ID_DIM];
        let mut alpha = 0.0;
        let mut depth_acc = 0.0;
        let mut median_depth = 0.0;
        let mut median = u32::MAX;
        let mut count = 0u32;
        let mut end = list.len() as u32;
        for (k, &pos) in list.iter().enumerate() {
            let ps = &projected[pos as usize];
            let [x0, y0, x1, y1] = ps.bbox;
            if px < x0 || px >= x1 || py < y0 || py >= y1 {
                continue;
            }
            let hit = evaluate(ps, &ray, x, y, sigma, options.near);
            if hit.g < options.kernel_cutoff {
                continue;
            }
            let a = ps.opacity * hit.g;
            let wgt = a * t;
            for c in 0..3 {
                color[c] += wgt * ps.color[c];
            }
            let id = &model.splats[ps.index].identity;
            for c in 0..ID_DIM {
                identity[c] += wgt * id[c];
            }
            alpha += wgt;
            depth_acc += wgt * hit.depth;
            count += 1;
            sig = mix(sig, ((pos as u64) << 1) | hit.object_branch as u64);
            let next_t = t * (1.0 - a);
            if median == u32::MAX && next_t < 0.5 {
                median = k as u32;
                median_depth = hit.depth;
            }
            t = next_t;
            if t < options.min_transmittance {
                end = k as u32 + 1;
                break;
            }
        }
        sig = mix(sig, ((end as u64) << 32) | median as u64);
        for c in 0..3 {
            color[c] += t * options.background[c];
        }
        let depth = match options.depth_mode {
            DepthMode::Median => median_depth,
            DepthMode::Mean => {
                if alpha > 0.0 {
                    depth_acc / alpha
                } else {
                    0.0
                }
            }
        };
        results.push(PixelResult {
            idx: py * w + px,
            color,
            identity,
            alpha,
            depth,
            contributors: count,
        });
    }
    (results, sig)
}

/// Renders the model and keeps the intermediates needed for [`backward`].
pub fn render_traced(
    model: &SplatModel,
    camera: &Camera,
    options: &RenderOptions,
) -> Result<(RenderOutput, RenderTrace)> {
    camera.validate()?;
    options.validate()?;
    let (w, h) = (camera.width as usize, camera.height as usize);
    let projected = project_splats(model, camera, options);
    let tiles = bin_tiles(&projected, w, h);

    let run = |tile: usize| render_tile(tile, &tiles[tile], &projected, model, camera, options);
    let tile_results: Vec<(Vec<PixelResult>, u64)> = if options.parallel {
        (0..tiles.len()).into_par_iter().map(run).collect()
    } else {
        (0..tiles.len()).map(run).collect()
    };

    let n = w * h;
    let mut out = RenderOutput {
        width: camera.width,
        height: camera.height,
        color: vec![[0.0; 3]; n],
        identity: vec![[0.0; ID_DIM]; n],
        depth: vec![0.0; n],
        alpha: vec![0.0; n],
        contributors: vec![0; n],
    };
    let mut signature = mix(0xcbf2_9ce4_8422_2325, projected.len() as u64);
    for ps in &projected {
        signature = mix(signature, ps.index as u64);
        signature = mix(signature, ps.clamped.iter().fold(0, |acc, &b| (acc << 1) | b as u64));
    }
    for (results, sig) in tile_results {
        signature = mix(signature, sig);
        for r in results {
            out.color[r.idx] = r.color;
            out.identity[r.idx] = r.identity;
            out.alpha[r.idx] = r.alpha;
            out.depth[r.idx] = r.depth;
            out.contributors[r.idx] = r.contributors;
        }
    }
    let trace = RenderTrace {
        camera: camera.clone(),
        options: options.clone(),
        splat_count: model.len(),
        projected,
        tiles,
        signature,
    };
    Ok((out, trace))
}

pub fn render(model: &SplatModel, camera: &Camera, options: &RenderOptions) -> Result<RenderOutput> {
    render_traced(model, camera, options).map(|(out, _)| out)
}

/// Depth map for surface fusion: zero wherever coverage is below 0.5.
pub fn render_depth(model: &SplatModel, camera: &Camera, options: &RenderOptions) -> Result<(Vec<f64>, Vec<f64>)> {
    let out = render(model, camera, options)?;
    let depth = out
        .depth
        .iter()
        .zip(&out.alpha)
        .map(|(&d, &a)| if a >= 0.5 { d } else { 0.0 })
        .collect();
    Ok((depth, out.alpha))
}
