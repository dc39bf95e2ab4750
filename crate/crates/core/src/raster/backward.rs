use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::{evaluate, tile_pixels, DepthMode, Hit, Projected, RenderTrace};
use crate::error::{Error, Result};
use crate::gaussian::sh::{sh_basis_with_grad, sh_coeff_count};
use crate::gaussian::{quat_matrix_backward, SplatGrad, SplatModel, ID_DIM};

/// Upstream gradients of a scalar loss with respect to a [`super::RenderOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrad {
    pub color: Vec<[f64; 3]>,
    pub identity: Vec<[f64; ID_DIM]>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

impl RenderGrad {
    pub fn zeros(pixels: usize) -> Self {
        RenderGrad {
            color: vec![[0.0; 3]; pixels],
            identity: vec![[0.0; ID_DIM]; pixels],
            alpha: vec![0.0; pixels],
            depth: vec![0.0; pixels],
        }
    }

    fn check(&self, pixels: usize) -> Result<()> {
        if self.color.len() != pixels
            || self.identity.len() != pixels
            || self.alpha.len() != pixels
            || self.depth.len() != pixels
        {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient buffers must all have {pixels} pixels"
            )));
        }
        Ok(())
    }
}

/// Camera-space gradient of one projected splat.
#[derive(Debug, Clone, Copy, Default)]
struct LocalGrad {
    p: Vector3<f64>,
    tu: Vector3<f64>,
    tv: Vector3<f64>,
    n: Vector3<f64>,
    log_s: [f64; 2],
    opacity: f64,
    color: [f64; 3],
    identity: [f64; ID_DIM],
}

impl LocalGrad {
    fn add(&mut self, o: &LocalGrad) {
        self.p += o.p;
        self.tu += o.tu;
        self.tv += o.tv;
        self.n += o.n;
        for k in 0..2 {
            self.log_s[k] += o.log_s[k];
        }
        self.opacity += o.opacity;
        for k in 0..3 {
            self.color[k] += o.color[k];
        }
        for k in 0..ID_DIM {
            self.identity[k] += o.identity[k];
        }
    }
}

struct Contribution {
    k: usize,
    hit: Hit,
    a: f64,
    t: f64,
}

/// Gradients of a scalar loss with respect to every splat parameter, given
/// the loss's gradients on the rendered maps. The returned vector is indexed
/// like `model.splats`; culled splats receive zeros.
///
/// The screen-space floor of the kernel and the object-space kernel are
/// differentiated through whichever branch produced the value, with ties
/// going to the object-space branch.
pub fn backward(
    model: &SplatModel,
    trace: &RenderTrace,
    upstream: &RenderGrad,
) -> Result<Vec<SplatGrad>> {
    if model.len() != trace.splat_count {
        return Err(Error::MissingForward(format!(
            "trace was recorded for {} splats, model has {}",
            trace.splat_count,
            model.len()
        )));
    }
    let cam = &trace.camera;
    let (w, h) = (cam.width as usize, cam.height as usize);
    upstream.check(w * h)?;

    let run = |tile: usize| backward_tile(tile, model, trace, upstream);
    let per_tile: Vec<Vec<LocalGrad>> = if trace.options.parallel {
        (0..trace.tiles.len()).into_par_iter().map(run).collect()
    } else {
        (0..trace.tiles.len()).map(run).collect()
    };

    // fixed reduction order keeps serial and parallel results identical
    let mut local = vec![LocalGrad::default(); trace.projected.len()];
    for (tile, grads) in per_tile.iter().enumerate() {
        for (k, g) in grads.iter().enumerate() {
            local[trace.tiles[tile][k] as usize].add(g);
        }
    }

    let rot = cam.rotation();
    let cam_center = cam.center();
    let mut out = vec![SplatGrad::default(); model.len()];
    for (ps, g) in trace.projected.iter().zip(&local) {
        out[ps.index] = to_world(model, ps, g, &rot, &cam_center);
    }
    Ok(out)
}

fn backward_tile(tile: usize, model: &SplatModel, trace: &RenderTrace, up: &RenderGrad) -> Vec<LocalGrad> {
    let list = &trace.tiles[tile];
    let mut grads = vec![LocalGrad::default(); list.len()];
    if list.is_empty() {
        return grads;
    }
    let cam = &trace.camera;
    let opts = &trace.options;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let sigma = opts.filter.sigma_screen;
    let mut contribs: Vec<Contribution> = Vec::new();

    for (px, py) in tile_pixels(tile, w, h) {
        let idx = py * w + px;
        let g_color = up.color[idx];
        let g_id = &up.identity[idx];
        let g_depth = up.depth[idx];
        let mut g_alpha = up.alpha[idx];
        let has_id = g_id.iter().any(|&v| v != 0.0);
        if g_color == [0.0; 3] && !has_id && g_alpha == 0.0 && g_depth == 0.0 {
            continue;
        }
        let x = px as f64 + 0.5;
        let y = py as f64 + 0.5;
        let ray = cam.ray(x, y);

        // replay the forward pass for this pixel
        contribs.clear();
        let mut t = 1.0;
        let mut median = None;
        let mut alpha = 0.0;
        let mut depth_acc = 0.0;
        for (k, &pos) in list.iter().enumerate() {
            let ps = &trace.projected[pos as usize];
            let [x0, y0, x1, y1] = ps.bbox;
            if px < x0 || px >= x1 || py < y0 || py >= y1 {
                continue;
            }
            let hit = evaluate(ps, &ray, x, y, sigma, opts.near);
            if hit.g < opts.kernel_cutoff {
                continue;
            }
            let a = ps.opacity * hit.g;
            contribs.push(Contribution { k, hit, a, t });
            alpha += a * t;
            depth_acc += a * t * hit.depth;
            let next_t = t * (1.0 - a);
            if median.is_none() && next_t < 0.5 {
                median = Some(contribs.len() - 1);
            }
            t = next_t;
            if t < opts.min_transmittance {
                break;
            }
        }
        if contribs.is_empty() {
            continue;
        }

        // mean depth D = S/A contributes through S and A
        let g_depth_sum = match opts.depth_mode {
            DepthMode::Mean if alpha > 0.0 => {
                g_alpha -= g_depth * (depth_acc / alpha) / alpha;
                g_depth / alpha
            }
            _ => 0.0,
        };

        let mut b: f64 = (0..3).map(|c| g_color[c] * opts.background[c]).sum();
        for (ci, c) in contribs.iter().enumerate().rev() {
            let pos = list[c.k] as usize;
            let ps = &trace.projected[pos];
            let splat = &model.splats[ps.index];
            let wgt = c.a * c.t;

            let mut gf = g_alpha + g_depth_sum * c.hit.depth;
            for ch in 0..3 {
                gf += g_color[ch] * ps.color[ch];
            }
            if has_id {
                for ch in 0..ID_DIM {
                    gf += g_id[ch] * splat.identity[ch];
                }
            }
            let d_a = c.t * (gf - b);
            b = c.a * gf + (1.0 - c.a) * b;

            let g = &mut grads[c.k];
            for ch in 0..3 {
                if !ps.clamped[ch] {
                    g.color[ch] += wgt * g_color[ch];
                }
            }
            if has_id {
                for ch in 0..ID_DIM {
                    g.identity[ch] += wgt * g_id[ch];
                }
            }
            g.opacity += d_a * c.hit.g;
            let d_g = d_a * ps.opacity;
            let mut d_depth = wgt * g_depth_sum;
            if opts.depth_mode == DepthMode::Median && median == Some(ci) {
                d_depth += g_depth;
            }
            hit_backward(ps, &c.hit, &ray, x, y, sigma, d_g, d_depth, cam.fx, cam.fy, g);
        }
    }
    grads
}

#[allow(clippy::too_many_arguments)]
fn hit_backward(
    ps: &Projected,
    hit: &Hit,
    ray: &Vector3<f64>,
    x: f64,
    y: f64,
    sigma: f64,
    d_g: f64,
    d_depth: f64,
    fx: f64,
    fy: f64,
    g: &mut LocalGrad,
) {
    if hit.object_branch {
        let du = -d_g * hit.g * hit.u;
        let dv = -d_g * hit.g * hit.v;
        let r = ray * hit.lambda - ps.p;
        let dr = ps.tu * (du / ps.su) + ps.tv * (dv / ps.sv);
        g.tu += r * (du / ps.su);
        g.tv += r * (dv / ps.sv);
        g.log_s[0] -= du * hit.u;
        g.log_s[1] -= dv * hit.v;
        let d_lambda = d_depth + dr.dot(ray);
        let denom = ray.dot(&ps.n);
        g.p += ps.n * (d_lambda / denom) - dr;
        g.n -= r * (d_lambda / denom);
    } else {
        let s2 = sigma * sigma;
        let dcx = d_g * hit.g * (x - ps.cx) / s2;
        let dcy = d_g * hit.g * (y - ps.cy) / s2;
        let z = ps.p.z;
        g.p.x += dcx * fx / z;
        g.p.y += dcy * fy / z;
        g.p.z += -(dcx * fx * ps.p.x + dcy * fy * ps.p.y) / (z * z) + d_depth;
    }
}

fn to_world(
    model: &SplatModel,
    ps: &Projected,
    g: &LocalGrad,
    rot: &Matrix3<f64>,
    cam_center: &Vector3<f64>,
) -> SplatGrad {
    let splat = &model.splats[ps.index];
    let rt = rot.transpose();
    let mut out = SplatGrad {
        center: rt * g.p,
        ..Default::default()
    };
    let d_frame_cam = Matrix3::from_columns(&[g.tu, g.tv, g.n]);
    out.rotation = quat_matrix_backward(&splat.rotation, &(rt * d_frame_cam));
    out.log_scales.x = g.log_s[0];
    out.log_scales.y = g.log_s[1];
    out.opacity_logit = g.opacity * ps.opacity * (1.0 - ps.opacity);
    out.identity = g.identity;

    if g.color.iter().any(|&v| v != 0.0) {
        let v = splat.center - cam_center;
        let norm = v.norm();
        let dir = if norm > 0.0 { v / norm } else { Vector3::z() };
        let (basis, dbasis) = sh_basis_with_grad(&dir, model.sh_degree);
        let mut d_dir = Vector3::zeros();
        for k in 0..sh_coeff_count(model.sh_degree) {
            let mut s = 0.0;
            for c in 0..3 {
                out.sh[k][c] = g.color[c] * basis[k];
                s += g.color[c] * splat.sh[k][c];
            }
            d_dir += Vector3::from(dbasis[k]) * s;
        }
        if norm > 0.0 {
            out.center += (d_dir - dir * dir.dot(&d_dir)) / norm;
        }
    }
    out
}
