//! Adam updates and adaptive density control.

pub mod train;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{ParamGroup, SplatGrad, SplatModel};
use crate::seg::{HeadGrad, SegHead};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Initial center rate, multiplied by the scene extent.
    pub center: f64,
    /// Center rate at the last iteration relative to the initial one.
    pub center_final_factor: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh: f64,
    pub identity: f64,
    pub head: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            center: 1.6e-4,
            center_final_factor: 0.01,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
            identity: 0.0025,
            head: 0.0005,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.center,
            self.center_final_factor,
            self.rotation,
            self.scale,
            self.opacity,
            self.sh,
            self.identity,
            self.head,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("learning rates must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-step learning rate of every group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRates {
    pub center: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh: f64,
    pub identity: f64,
    pub head: f64,
}

impl StepRates {
    /// Rates at iteration `it` of `total`, with an exponentially decayed
    /// center rate scaled by `extent`.
    pub fn at(lr: &LearningRates, it: usize, total: usize, extent: f64) -> Self {
        let frac = if total > 1 {
            it as f64 / (total - 1) as f64
        } else {
            0.0
        };
        StepRates {
            center: lr.center * extent * lr.center_final_factor.powf(frac),
            rotation: lr.rotation,
            scale: lr.scale,
            opacity: lr.opacity,
            sh: lr.sh,
            identity: lr.identity,
            head: lr.head,
        }
    }

    pub fn uniform(v: f64) -> Self {
        StepRates {
            center: v,
            rotation: v,
            scale: v,
            opacity: v,
            sh: v,
            identity: v,
            head: v,
        }
    }

    fn group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Center => self.center,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Scale => self.scale,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Sh => self.sh,
            ParamGroup::Identity => self.identity,
        }
    }
}

/// Gradients for every model and head parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub splats: Vec<SplatGrad>,
    pub head: HeadGrad,
}

impl GradientBuffer {
    pub fn zeros(splats: usize) -> Self {
        GradientBuffer {
            splats: vec![SplatGrad::default(); splats],
            head: SegHead::zeros(),
        }
    }

    /// First non-finite entry as (group name, splat index).
    pub fn check_finite(&self) -> Result<()> {
        for (i, g) in self.splats.iter().enumerate() {
            for group in ParamGroup::ALL {
                if g.group(group).iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        group: group.name(),
                        index: i,
                    });
                }
            }
        }
        if self.head.params().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { group: "head", index: 0 });
        }
        Ok(())
    }
}

/// Adam moments for a model and its head.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<SplatGrad>,
    pub v: Vec<SplatGrad>,
    pub head_m: HeadGrad,
    pub head_v: HeadGrad,
    pub step: u64,
}

impl OptimState {
    pub fn new(splats: usize) -> Self {
        OptimState {
            m: vec![SplatGrad::default(); splats],
            v: vec![SplatGrad::default(); splats],
            head_m: SegHead::zeros(),
            head_v: SegHead::zeros(),
            step: 0,
        }
    }

    /// Reorders moments to follow a model edit: `sources[k]` is the old
    /// index of new splat `k`, or `None` for a fresh splat with zero moments.
    pub fn remap(&mut self, sources: &[Option<usize>]) {
        let pick = |old: &[SplatGrad]| -> Vec<SplatGrad> {
            sources
                .iter()
                .map(|s| s.map(|i| old[i].clone()).unwrap_or_default())
                .collect()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}

fn adam_update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, bc1: f64, bc2: f64) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
}

/// One Adam step over the groups in `groups` (others keep their values and
/// moments), followed by quaternion re-normalization.
pub fn adam_step(
    model: &mut SplatModel,
    head: &mut SegHead,
    grads: &GradientBuffer,
    state: &mut OptimState,
    rates: &StepRates,
    groups: &[ParamGroup],
    update_head: bool,
) -> Result<()> {
    if grads.splats.len() != model.len() || state.m.len() != model.len() || state.v.len() != model.len() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} splats, gradients {}, moments {}",
            model.len(),
            grads.splats.len(),
            state.m.len()
        )));
    }
    grads.check_finite()?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, splat) in model.splats.iter_mut().enumerate() {
        let g = &grads.splats[i];
        let rotation = splat.rotation;
        for &group in groups {
            let lr = rates.group(group);
            let gv = g.group(group);
            let ms = state.m[i].group_mut(group);
            let vs = state.v[i].group_mut(group);
            for (k, p) in splat.group_mut(group).iter_mut().enumerate() {
                adam_update(p, gv[k], &mut ms[k], &mut vs[k], lr, bc1, bc2);
            }
        }
        if splat.rotation != rotation {
            splat.renormalize();
        }
    }
    if update_head {
        let lr = rates.head;
        let gs: Vec<f64> = grads.head.params().collect();
        for (((p, m), v), g) in head
            .params_mut()
            .zip(state.head_m.params_mut())
            .zip(state.head_v.params_mut())
            .zip(gs)
        {
            adam_update(p, g, m, v, lr, bc1, bc2);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub from_iter: usize,
    pub until_iter: usize,
    pub interval: usize,
    /// Threshold on the mean screen-space positional gradient norm.
    pub grad_threshold: f64,
    pub min_opacity: f64,
    /// Splats whose larger scale exceeds this fraction of the scene extent are
    /// split; smaller ones are cloned.
    pub percent_dense: f64,
    pub split_factor: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            enabled: true,
            from_iter: 500,
            until_iter: 15_000,
            interval: 100,
            grad_threshold: 2e-4,
            min_opacity: 0.005,
            percent_dense: 0.01,
            split_factor: 1.6,
        }
    }
}

/// Accumulated positional gradient statistics since the last densification.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        GradStats {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

/// Clones or splits splats with a large mean positional gradient and drops
/// nearly transparent ones. Returns, for every splat of the new model, the
/// index of the splat it was copied from (`None` for split children).
pub fn densify_and_prune<R: Rng + ?Sized>(
    model: &mut SplatModel,
    stats: &GradStats,
    config: &DensifyConfig,
    extent: f64,
    rng: &mut R,
) -> Vec<Option<usize>> {
    let n = model.len();
    let split_size = config.percent_dense * extent;
    let mut kept: Vec<(crate::gaussian::Splat, Option<usize>)> = Vec::with_capacity(n);
    let mut added = Vec::new();
    for (i, s) in model.splats.iter().enumerate() {
        let hot = stats.mean(i) > config.grad_threshold;
        let big = s.log_scales.max().exp() > split_size;
        if hot && big {
            let frame = s.frame();
            let scales = s.scales();
            for _ in 0..2 {
                let mut child = s.clone();
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                let offset: Vector3<f64> = frame.column(0) * (a * scales.x) + frame.column(1) * (b * scales.y);
                child.center += offset;
                child.log_scales -= Vector2::repeat(config.split_factor.ln());
                added.push(child);
            }
            continue;
        }
        kept.push((s.clone(), Some(i)));
        if hot {
            added.push(s.clone());
        }
    }
    let mut splats = Vec::with_capacity(kept.len() + added.len());
    let mut sources = Vec::with_capacity(kept.len() + added.len());
    for (s, src) in kept {
        splats.push(s);
        sources.push(src);
    }
    for s in added {
        splats.push(s);
        sources.push(None);
    }
    let (splats, sources): (Vec<_>, Vec<_>) = splats
        .into_iter()
        .zip(sources)
        .filter(|(s, _)| s.opacity() >= config.min_opacity)
        .unzip();
    model.splats = splats;
    sources
}
