//! The optimization loop: view sampling, rendering, loss, backward, Adam and
//! periodic densification.

use std::io::Write;
use std::path::Path;

use nalgebra::{Vector2, Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    adam_step, densify_and_prune, DensifyConfig, GradStats, GradientBuffer, LearningRates, OptimState, StepRates,
};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::sh::{rgb_to_dc, MAX_SH_DEGREE};
use crate::gaussian::{logit, ParamGroup, Splat, SplatModel, ID_DIM};
use crate::imaging::{ColorImage, LabelMap};
use crate::raster::{backward, render_traced, RenderOptions};
use crate::seg::{splat_tree, total_loss, CosinePairs, KdTree, LossWeights, SegHead};

/// Standard deviation of freshly initialized identity vectors.
pub const IDENTITY_INIT_STD: f64 = 0.01;

/// One supervised view. Views without labels only drive the photometric term.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: Camera,
    pub image: ColorImage,
    pub labels: Option<LabelMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Single-threaded rendering with a fixed reduction order.
    pub deterministic: bool,
    pub sh_degree: usize,
    /// Only color and identity parameters (and the head) are optimized.
    pub freeze_geometry: bool,
    /// Splat count for random initialization when no seed points are given.
    pub init_count: usize,
    pub loss: LossWeights,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub render: RenderOptions,
    /// Rebuild interval of the neighbor index while geometry is trained.
    pub knn_rebuild_interval: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 30_000,
            seed: 0,
            deterministic: true,
            sh_degree: 3,
            freeze_geometry: false,
            init_count: 5_000,
            loss: LossWeights::default(),
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            render: RenderOptions::default(),
            knn_rebuild_interval: 100,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::InvalidArgument(format!(
                "sh_degree must be at most {MAX_SH_DEGREE}"
            )));
        }
        if self.densify.interval == 0 || self.knn_rebuild_interval == 0 {
            return Err(Error::InvalidArgument("intervals must be positive".into()));
        }
        self.loss.validate()?;
        self.lr.validate()
    }

    fn render_options(&self) -> RenderOptions {
        RenderOptions {
            parallel: !self.deterministic,
            ..self.render.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub gs: f64,
    pub oe: f64,
    pub cs: f64,
    pub total: f64,
    pub splats: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: SplatModel,
    pub head: SegHead,
    pub log: Vec<LogRow>,
}

/// Writes the loss log as comma-separated rows with a header.
pub fn write_loss_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut out = String::from("iteration,L_gs,L_oe,L_cs,total\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.iteration, r.gs, r.oe, r.cs, r.total));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn random_identity<R: Rng + ?Sized>(rng: &mut R) -> [f64; ID_DIM] {
    let normal = Normal::new(0.0, IDENTITY_INIT_STD).expect("valid std");
    std::array::from_fn(|_| rng.sample(normal))
}

/// Redraws every identity vector from the initialization distribution.
pub fn reset_identities<R: Rng + ?Sized>(model: &mut SplatModel, rng: &mut R) {
    for s in &mut model.splats {
        s.identity = random_identity(rng);
    }
}

/// Mean distance to the nearest other point, used to size initial splats.
fn mean_spacing(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 2 {
        return 0.01;
    }
    let tree = KdTree::build(points);
    let mut sum = 0.0;
    for (i, p) in points.iter().enumerate() {
        let nb = tree.nearest(p, 1, Some(i));
        sum += (points[nb[0]] - p).norm();
    }
    (sum / points.len() as f64).max(1e-6)
}

/// Splats at the given points with random orientation, isotropic scale
/// matched to the point spacing, opacity 0.1 and the given colors.
pub fn model_from_points<R: Rng + ?Sized>(
    points: &[Vector3<f64>],
    colors: &[[f64; 3]],
    sh_degree: usize,
    rng: &mut R,
) -> SplatModel {
    let spacing = mean_spacing(points);
    let mut model = SplatModel::new(sh_degree);
    for (i, p) in points.iter().enumerate() {
        let q = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let mut s = Splat::new(*p, q, Vector2::repeat(spacing), 0.1);
        s.opacity_logit = logit(0.1);
        let c = colors.get(i).copied().unwrap_or([0.5; 3]);
        s.sh[0] = c.map(rgb_to_dc);
        s.identity = random_identity(rng);
        model.splats.push(s);
    }
    model
}

/// Uniformly random points inside the bounds with gray color.
pub fn random_init<R: Rng + ?Sized>(
    bounds: (Vector3<f64>, Vector3<f64>),
    count: usize,
    sh_degree: usize,
    rng: &mut R,
) -> SplatModel {
    let (lo, hi) = bounds;
    let points: Vec<_> = (0..count)
        .map(|_| Vector3::from_fn(|k, _| lo[k] + (hi[k] - lo[k]) * rng.random::<f64>()))
        .collect();
    model_from_points(&points, &[], sh_degree, rng)
}

/// Radius of the camera centers around their mean, padded by 10%.
pub fn camera_extent(cameras: &[&Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<_> = cameras.iter().map(|c| c.center()).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// Optimizes `model` and `head` against `views`.
///
/// When `dump` is given and the loss becomes non-finite, the last finite
/// state is written there as a checkpoint before returning the error.
pub fn train(
    views: &[TrainView],
    model: SplatModel,
    head: SegHead,
    config: &TrainConfig,
    dump: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one view".into()));
    }
    for (i, v) in views.iter().enumerate() {
        v.camera.validate().map_err(|e| Error::InvalidView {
            view: i,
            message: e.to_string(),
        })?;
        if v.image.width != v.camera.width || v.image.height != v.camera.height {
            return Err(Error::InvalidView {
                view: i,
                message: "image size differs from camera".into(),
            });
        }
    }
    model.validate()?;
    head.validate()?;

    let mut model = model;
    let mut head = head;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let opts = config.render_options();
    let extent = camera_extent(&views.iter().map(|v| &v.camera).collect::<Vec<_>>());
    let groups: Vec<ParamGroup> = if config.freeze_geometry {
        vec![ParamGroup::Sh, ParamGroup::Identity]
    } else {
        ParamGroup::ALL.to_vec()
    };
    let densify = config.densify.enabled && !config.freeze_geometry;
    let use_cs = config.loss.lambda_cs > 0.0;

    let mut state = OptimState::new(model.len());
    let mut stats = GradStats::new(model.len());
    let mut tree: Option<KdTree> = None;
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let view = &views[order.pop().expect("refilled above")];

        let rebuild = !config.freeze_geometry && it % config.knn_rebuild_interval == 0;
        if use_cs && (tree.is_none() || rebuild) {
            tree = Some(splat_tree(&model));
        }
        let pairs = match (&tree, &view.labels) {
            (Some(t), Some(_)) if t.len() > config.loss.neighbor_count_n => Some(CosinePairs::sample(
                t,
                config.loss.sample_count_m,
                config.loss.neighbor_count_n,
                &mut rng,
            )?),
            _ => None,
        };

        let (out, trace) = render_traced(&model, &view.camera, &opts)?;
        let eval = total_loss(
            &out,
            &view.image,
            view.labels.as_ref(),
            &model,
            &head,
            &config.loss,
            pairs.as_ref(),
        )?;
        let c = eval.components;
        if !c.total.is_finite() {
            let dump_path = match dump {
                Some(p) => {
                    crate::io::save_checkpoint(&model, &head, p)?;
                    Some(p.to_path_buf())
                }
                None => None,
            };
            return Err(Error::Diverged {
                iteration: it,
                loss: c.total,
                dump: dump_path,
            });
        }
        log.push(LogRow {
            iteration: it,
            gs: c.gs,
            oe: c.oe,
            cs: c.cs,
            total: c.total,
            splats: model.len(),
        });
        if config.log_every > 0 && it % config.log_every == 0 {
            log::info!(
                "iter {it}: total {:.5} gs {:.5} oe {:.5} cs {:.5} splats {}",
                c.total,
                c.gs,
                c.oe,
                c.cs,
                model.len()
            );
        }

        let mut splat_grads = backward(&model, &trace, &eval.render_grad)?;
        for (g, id) in splat_grads.iter_mut().zip(&eval.identity_grad) {
            for k in 0..ID_DIM {
                g.identity[k] += id[k];
            }
        }

        if densify && it < config.densify.until_iter {
            let rot = view.camera.rotation();
            let (w, h) = (view.camera.width as f64, view.camera.height as f64);
            for i in trace.visible_indices() {
                let s = &model.splats[i];
                let z = view.camera.to_camera(&s.center).z;
                let g = rot * splat_grads[i].center;
                let gx = g.x * z / view.camera.fx * w / 2.0;
                let gy = g.y * z / view.camera.fy * h / 2.0;
                stats.sum[i] += (gx * gx + gy * gy).sqrt();
                stats.count[i] += 1;
            }
        }

        let grads = GradientBuffer {
            splats: splat_grads,
            head: eval.head_grad,
        };
        let rates = StepRates::at(&config.lr, it, config.iterations, extent);
        adam_step(&mut model, &mut head, &grads, &mut state, &rates, &groups, true)?;

        let step = it + 1;
        if densify
            && step >= config.densify.from_iter
            && step <= config.densify.until_iter
            && step % config.densify.interval == 0
        {
            let before = model.len();
            let sources = densify_and_prune(&mut model, &stats, &config.densify, extent, &mut rng);
            state.remap(&sources);
            stats = GradStats::new(model.len());
            if use_cs {
                tree = Some(splat_tree(&model));
            }
            log::debug!("densify at {step}: {before} -> {} splats", model.len());
        }
    }
    Ok(TrainOutput { model, head, log })
}
