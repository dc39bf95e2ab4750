//! Finding under-reconstructed regions of a target model in novel views and
//! patching them through an inpainting service.

pub mod client;
pub mod mock;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::SplatModel;
use crate::imaging::{ColorImage, Mask};
use crate::optim::train::{train, LogRow, TrainConfig, TrainView};
use crate::raster::{render, RenderOutput};
use crate::seg::SegHead;
pub use client::{InpaintClient, Inpainter};

/// Averaged residual magnitudes below this are treated as no signal.
pub const RESIDUAL_FLOOR: f64 = 1e-6;

/// Dilation radius applied to binarized residual masks, in pixels.
pub const MASK_DILATION: f64 = 3.0;

/// Cumulative signal levels ᾱ_t for t in 0..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() || (alpha_bar[0] - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("schedule must start at 1".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] > w[0]) || alpha_bar.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::InvalidArgument("schedule must be nonincreasing within [0, 1]".into()));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    /// The 1000-step "scaled linear" latent-diffusion schedule
    /// (betas from 0.00085 to 0.012 linear in sqrt). Index t matches the
    /// usual timestep numbering for t >= 1; t = 0 is the clean latent.
    pub fn scaled_linear() -> Self {
        let steps = 1000;
        let (b0, b1) = (0.00085f64.sqrt(), 0.012f64.sqrt());
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for i in 0..steps {
            let b = b0 + (b1 - b0) * i as f64 / (steps - 1) as f64;
            prod *= 1.0 - b * b;
            alpha_bar.push(prod);
        }
        alpha_bar[0] = 1.0;
        NoiseSchedule { alpha_bar }
    }

    pub fn max_t(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("timestep {t} outside 0..={}", self.max_t()))
        })
    }
}

/// Channel-last latent tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Latent {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Standard normal entries drawn from a seeded generator.
    pub fn gaussian(shape: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h, w, c] = shape;
        Latent {
            width: w,
            height: h,
            channels: c,
            data: (0..w * h * c).map(|_| StandardNormal.sample(&mut rng)).collect(),
        }
    }

    fn check_same(&self, other: &Latent) -> Result<()> {
        if self.shape() != other.shape() || self.data.len() != other.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "latent shapes {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Predicts the noise in a perturbed latent.
pub trait Denoiser: Send + Sync {
    fn predict_noise(&self, z_t: &Latent, prompt: &str, t: usize) -> Result<Latent>;
}

/// Maps images to latents and back.
pub trait LatentCodec: Send + Sync {
    fn encode(&self, image: &ColorImage) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<ColorImage>;
}

/// z_t = sqrt(ᾱ_t) z0 + sqrt(1 - ᾱ_t) ε.
pub fn perturb_latent(z0: &Latent, t: usize, eps: &Latent, schedule: &NoiseSchedule) -> Result<Latent> {
    z0.check_same(eps)?;
    let a = schedule.alpha_bar(t)?;
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(Latent {
        data: z0.data.iter().zip(&eps.data).map(|(z, e)| sa * z + sn * e).collect(),
        ..z0.clone()
    })
}

/// Predicted noise minus the injected noise.
pub fn noise_residual(denoiser: &dyn Denoiser, z_t: &Latent, prompt: &str, t: usize, eps: &Latent) -> Result<Latent> {
    let pred = denoiser.predict_noise(z_t, prompt, t)?;
    pred.check_same(eps)?;
    Ok(Latent {
        data: pred.data.iter().zip(&eps.data).map(|(p, e)| p - e).collect(),
        ..pred
    })
}

/// Threshold maximizing the between-class variance of a 256-bin histogram.
/// Values strictly above the returned level form the foreground.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return None;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let bin = |v: f64| (((v - lo) / width) as usize).min(BINS - 1);
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[bin(v)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 0);
    for (k, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += k as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    // Every value in bins 0..=best_k lies below this level.
    Some(lo + width * (best_k + 1) as f64 - width * 1e-9)
}

/// Binarizes a per-pixel magnitude map with Otsu's threshold (and the
/// absolute floor), then dilates.
pub fn binarize(magnitude: &[f64], width: u32, height: u32) -> Mask {
    let mut mask = Mask::new(width, height);
    let max = magnitude.iter().copied().fold(0.0, f64::max);
    if max < RESIDUAL_FLOOR {
        return mask;
    }
    let level = otsu_threshold(magnitude).unwrap_or(0.0).max(RESIDUAL_FLOOR);
    for (m, &v) in mask.data.iter_mut().zip(magnitude) {
        *m = v > level;
    }
    mask.dilate(MASK_DILATION)
}

/// Seed-averaged decoded residual magnitude of an image, one value per pixel.
pub fn residual_magnitude(
    image: &ColorImage,
    codec: &dyn LatentCodec,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    t: usize,
    seeds: &[u64],
    prompt: &str,
) -> Result<Vec<f64>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    schedule.alpha_bar(t)?;
    let z0 = codec.encode(image)?;
    let per_seed: Vec<Vec<f64>> = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<f64>> {
            let eps = Latent::gaussian(z0.shape(), seed);
            let z_t = perturb_latent(&z0, t, &eps, schedule)?;
            let mut r = noise_residual(denoiser, &z_t, prompt, t, &eps)?;
            r.data.iter_mut().for_each(|v| *v = v.abs());
            let decoded = codec.decode(&r)?;
            if (decoded.width, decoded.height) != (image.width, image.height) {
                return Err(Error::Diffusion(format!(
                    "decoded residual is {}x{}, image {}x{}",
                    decoded.width, decoded.height, image.width, image.height
                )));
            }
            Ok(decoded.data.iter().map(|p| (p[0].abs() + p[1].abs() + p[2].abs()) / 3.0).collect())
        })
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; image.data.len()];
    for m in &per_seed {
        for (a, v) in mean.iter_mut().zip(m) {
            *a += v;
        }
    }
    let n = seeds.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    Ok(mean)
}

/// Residual-based mask of regions the denoiser disagrees with.
pub fn make_inpaint_mask(
    image: &ColorImage,
    codec: &dyn LatentCodec,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    t: usize,
    seeds: &[u64],
    prompt: &str,
) -> Result<Mask> {
    let magnitude = residual_magnitude(image, codec, denoiser, schedule, t, seeds, prompt)?;
    Ok(binarize(&magnitude, image.width, image.height))
}

/// Pixel rectangle `[x0, y0, x1, y1)` covering the projection of the
/// model's disk bounds, clipped to the image.
pub fn projected_rect(model: &SplatModel, camera: &Camera) -> Option<[u32; 4]> {
    let (lo, hi) = crate::mesh::model_bounds(model)?;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in 0..8 {
        let p = Vector3::new(
            if c & 1 == 0 { lo.x } else { hi.x },
            if c & 2 == 0 { lo.y } else { hi.y },
            if c & 4 == 0 { lo.z } else { hi.z },
        );
        let Some((x, y, _)) = camera.project(&p) else {
            return Some([0, 0, camera.width, camera.height]);
        };
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let clip = |v: f64, max: u32| v.clamp(0.0, max as f64) as u32;
    let rect = [
        clip(x0.floor(), camera.width),
        clip(y0.floor(), camera.height),
        clip(x1.ceil(), camera.width),
        clip(y1.ceil(), camera.height),
    ];
    (rect[0] < rect[2] && rect[1] < rect[3]).then_some(rect)
}

/// Pixels inside `rect` whose rendered coverage is below `tau_alpha`.
pub fn coverage_mask(out: &RenderOutput, tau_alpha: f64, rect: [u32; 4]) -> Mask {
    let mut mask = Mask::new(out.width, out.height);
    for y in rect[1]..rect[3].min(out.height) {
        for x in rect[0]..rect[2].min(out.width) {
            let i = (y * out.width + x) as usize;
            mask.data[i] = out.alpha[i] < tau_alpha;
        }
    }
    mask
}

/// Cameras on a Fibonacci sphere around the opacity-weighted centroid at
/// `radius_factor` times the bounding radius, all looking at the centroid.
pub fn sample_novel_views(
    target: &SplatModel,
    count: usize,
    width: u32,
    height: u32,
    fov_deg: f64,
    radius_factor: f64,
) -> Result<Vec<Camera>> {
    let centroid = target
        .weighted_centroid()
        .ok_or_else(|| Error::Degenerate("target has no splats".into()))?;
    let bound = target
        .splats
        .iter()
        .map(|s| (s.center - centroid).norm())
        .fold(0.0, f64::max);
    if !(bound > 1e-12) {
        return Err(Error::Degenerate("target has zero extent".into()));
    }
    let radius = radius_factor * bound;
    let focal = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / count as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            let dir = Vector3::new(r * phi.cos(), r * phi.sin(), z);
            Camera::look_at(centroid + dir * radius, centroid, Vector3::z(), width, height, focal)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Denoiser residual procedure.
    #[default]
    Residual,
    /// Low rendered coverage inside the target's projected bounds.
    Coverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplenishConfig {
    pub novel_views: usize,
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
    pub radius_factor: f64,
    pub mask_mode: MaskMode,
    pub coverage_alpha: f64,
    pub timestep: usize,
    pub seeds: Vec<u64>,
    pub prompt: String,
    /// Base seed of inpainting requests; view `i` sends `request_seed + i`.
    pub request_seed: u64,
    /// Views with requests in flight at the same time.
    pub concurrency: usize,
    pub train: TrainConfig,
}

impl Default for ReplenishConfig {
    fn default() -> Self {
        ReplenishConfig {
            novel_views: 16,
            width: 128,
            height: 128,
            fov_deg: 50.0,
            radius_factor: 1.5,
            mask_mode: MaskMode::Residual,
            coverage_alpha: 0.5,
            timestep: 991,
            seeds: (0..10).collect(),
            prompt: String::new(),
            request_seed: 0,
            concurrency: 2,
            train: TrainConfig {
                iterations: 3000,
                ..TrainConfig::default()
            },
        }
    }
}

/// Residual-mode components.
pub struct ResidualModel<'a> {
    pub codec: &'a dyn LatentCodec,
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
}

#[derive(Debug, Clone, Default)]
pub struct ReplenishReport {
    pub cameras: Vec<Camera>,
    pub masks: Vec<Mask>,
    pub requests: usize,
    pub skipped_empty: usize,
    pub train_log: Vec<LogRow>,
}

/// Inpaints novel views of the target and trains it further on them with
/// photometric supervision only.
pub fn replenish_loop(
    target: &SplatModel,
    head: &SegHead,
    config: &ReplenishConfig,
    inpainter: &dyn Inpainter,
    residual: Option<&ResidualModel<'_>>,
) -> Result<(SplatModel, ReplenishReport)> {
    let mut report = ReplenishReport::default();
    if config.novel_views == 0 {
        return Ok((target.clone(), report));
    }
    let cameras = sample_novel_views(
        target,
        config.novel_views,
        config.width,
        config.height,
        config.fov_deg,
        config.radius_factor,
    )?;
    let opts = config.train.render.clone();
    let mut images = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let out = render(target, cam, &opts)?;
        let image = out.color_image().quantized();
        let mask = match config.mask_mode {
            MaskMode::Coverage => match projected_rect(target, cam) {
                Some(rect) => coverage_mask(&out, config.coverage_alpha, rect),
                None => Mask::new(cam.width, cam.height),
            },
            MaskMode::Residual => {
                let r = residual.ok_or_else(|| {
                    Error::InvalidArgument("residual mask mode needs a codec and a denoiser".into())
                })?;
                make_inpaint_mask(&image, r.codec, r.denoiser, r.schedule, config.timestep, &config.seeds, &config.prompt)?
            }
        };
        report.masks.push(mask);
        images.push(image);
    }

    let jobs: Vec<usize> = (0..cameras.len()).filter(|&i| !report.masks[i].is_empty()).collect();
    report.skipped_empty = cameras.len() - jobs.len();
    report.requests = jobs.len();
    log::info!(
        "replenish: {} views, {} inpaint requests, {} empty masks",
        cameras.len(),
        jobs.len(),
        report.skipped_empty
    );
    let mut repaired: Vec<Option<ColorImage>> = vec![None; cameras.len()];
    for chunk in jobs.chunks(config.concurrency.max(1)) {
        let results: Vec<Result<ColorImage>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let (image, mask) = (&images[i], &report.masks[i]);
                    let seed = config.request_seed + i as u64;
                    s.spawn(move || client::request_inpaint(inpainter, image, mask, &config.prompt, seed))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("inpaint worker panicked"))
                .collect()
        });
        for (&i, r) in chunk.iter().zip(results) {
            repaired[i] = Some(r?);
        }
    }
    report.cameras = cameras.clone();
    if jobs.is_empty() {
        return Ok((target.clone(), report));
    }
    let views: Vec<TrainView> = cameras
        .into_iter()
        .zip(repaired.into_iter().zip(images))
        .map(|(camera, (fixed, original))| TrainView {
            camera,
            image: fixed.unwrap_or(original),
            labels: None,
        })
        .collect();
    let out = train(&views, target.clone(), head.clone(), &config.train, None)?;
    report.train_log = out.log;
    Ok((out.model, report))
}

#[cfg(test)]
mod tests;
