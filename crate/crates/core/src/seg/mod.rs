//! Identity classification, segmentation losses and target extraction.

pub mod knn;
pub mod photometric;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{SplatModel, ID_DIM};
use crate::imaging::{ColorImage, LabelMap, Mask};
use crate::raster::{render, RenderGrad, RenderOptions, RenderOutput};
pub use knn::{knn_neighbors, KdTree};

/// Number of object classes; label values are 0..=255.
pub const NUM_CLASSES: usize = 256;

/// Coverage at or above which a pixel counts as covered.
pub const MASK_ALPHA: f64 = 0.5;

/// Linear layer from identity vectors to class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegHead {
    pub weights: Vec<[f64; ID_DIM]>,
    pub biases: Vec<f64>,
}

/// Gradient (or optimizer moment) laid out like a [`SegHead`].
pub type HeadGrad = SegHead;

impl SegHead {
    pub fn zeros() -> Self {
        SegHead {
            weights: vec![[0.0; ID_DIM]; NUM_CLASSES],
            biases: vec![0.0; NUM_CLASSES],
        }
    }

    /// Uniform in +-1/sqrt(fan_in), for weights and biases alike.
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let bound = 1.0 / (ID_DIM as f64).sqrt();
        let mut head = SegHead::zeros();
        for row in &mut head.weights {
            for w in row.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        for b in &mut head.biases {
            *b = rng.random_range(-bound..bound);
        }
        head
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != NUM_CLASSES || self.biases.len() != NUM_CLASSES {
            return Err(Error::ShapeMismatch(format!(
                "head must have {NUM_CLASSES} rows, got {} weights and {} biases",
                self.weights.len(),
                self.biases.len()
            )));
        }
        if !self.params().all(f64::is_finite) {
            return Err(Error::InvalidArgument("head has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.as_flattened().iter().chain(&self.biases).copied()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.weights
            .as_flattened_mut()
            .iter_mut()
            .chain(self.biases.iter_mut())
    }

    pub fn add_assign(&mut self, other: &SegHead) {
        for (a, b) in self.params_mut().zip(other.params()) {
            *a += b;
        }
    }

    pub fn logits(&self, o: &[f64; ID_DIM]) -> [f64; NUM_CLASSES] {
        let mut z = [0.0; NUM_CLASSES];
        for (k, out) in z.iter_mut().enumerate() {
            let w = &self.weights[k];
            let mut acc = self.biases[k];
            for c in 0..ID_DIM {
                acc += w[c] * o[c];
            }
            *out = acc;
        }
        z
    }

    /// Class probabilities for one identity vector.
    pub fn classify(&self, o: &[f64; ID_DIM]) -> [f64; NUM_CLASSES] {
        softmax(&self.logits(o))
    }

    pub fn argmax(&self, o: &[f64; ID_DIM]) -> u8 {
        let z = self.logits(o);
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if z[k] > z[best] {
                best = k;
            }
        }
        best as u8
    }

    /// Accumulates the gradient of `d_logits . (W o + b)` into `grad` and returns d/do.
    fn backward_into(&self, o: &[f64; ID_DIM], d_logits: &[f64; NUM_CLASSES], grad: &mut HeadGrad) -> [f64; ID_DIM] {
        let mut d_o = [0.0; ID_DIM];
        for k in 0..NUM_CLASSES {
            let dz = d_logits[k];
            if dz == 0.0 {
                continue;
            }
            grad.biases[k] += dz;
            let w = &self.weights[k];
            let gw = &mut grad.weights[k];
            for c in 0..ID_DIM {
                gw[c] += dz * o[c];
                d_o[c] += dz * w[c];
            }
        }
        d_o
    }
}

pub fn softmax(z: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = z.map(|v| (v - max).exp());
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    p
}

fn log_softmax_at(z: &[f64; NUM_CLASSES], k: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z[k] - lse
}

/// Per-element class probabilities of a rendered identity field.
pub fn classify_field(field: &[[f64; ID_DIM]], head: &SegHead) -> Vec<[f64; NUM_CLASSES]> {
    field.iter().map(|o| head.classify(o)).collect()
}

/// Mean cross-entropy over pixels with a nonzero label.
pub fn loss_oe(identity: &[[f64; ID_DIM]], labels: &LabelMap, head: &SegHead) -> Result<f64> {
    check_len(identity.len(), labels.data.len())?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (o, &l) in identity.iter().zip(&labels.data) {
        if l == 0 {
            continue;
        }
        sum -= log_softmax_at(&head.logits(o), l as usize);
        count += 1;
    }
    if count == 0 {
        log::warn!("no supervised pixels; cross-entropy defined as 0");
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// Cross-entropy with gradients on the identity field and the head.
pub fn loss_oe_with_grad(
    identity: &[[f64; ID_DIM]],
    labels: &LabelMap,
    head: &SegHead,
    head_grad: &mut HeadGrad,
    scale: f64,
) -> Result<(f64, Vec<[f64; ID_DIM]>)> {
    check_len(identity.len(), labels.data.len())?;
    let count = labels.data.iter().filter(|&&l| l != 0).count();
    let mut d_field = vec![[0.0; ID_DIM]; identity.len()];
    if count == 0 {
        log::warn!("no supervised pixels; cross-entropy defined as 0");
        return Ok((0.0, d_field));
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for (i, (o, &l)) in identity.iter().zip(&labels.data).enumerate() {
        if l == 0 {
            continue;
        }
        let z = head.logits(o);
        sum -= log_softmax_at(&z, l as usize);
        let mut d = softmax(&z);
        d[l as usize] -= 1.0;
        for v in &mut d {
            *v *= inv * scale;
        }
        d_field[i] = head.backward_into(o, &d, head_grad);
    }
    Ok((sum * inv, d_field))
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!(
            "identity field has {a} pixels, label map {b}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineMode {
    /// 1 - mean cosine; minimizing pulls neighbors together.
    OneMinusCosine,
    /// Mean cosine as a raw quantity.
    RawCosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_oe: f64,
    pub lambda_cs: f64,
    pub sample_count_m: usize,
    pub neighbor_count_n: usize,
    pub cosine_mode: CosineMode,
    /// Weight of the (1 - SSIM) term; L1 gets the rest.
    pub ssim_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_oe: 1.0,
            lambda_cs: 1.0,
            sample_count_m: 1000,
            neighbor_count_n: 5,
            cosine_mode: CosineMode::OneMinusCosine,
            ssim_weight: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_oe >= 0.0 && self.lambda_cs >= 0.0) {
            return Err(Error::InvalidArgument("loss weights must be nonnegative".into()));
        }
        if self.sample_count_m < 1 || self.neighbor_count_n < 1 {
            return Err(Error::InvalidArgument(
                "sample_count_m and neighbor_count_n must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ssim_weight) {
            return Err(Error::InvalidArgument("ssim_weight must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Sampled (query, neighbor) pairs for the neighbor-consistency term.
#[derive(Debug, Clone, PartialEq)]
pub struct CosinePairs {
    pub pairs: Vec<(usize, usize)>,
}

impl CosinePairs {
    /// Samples `m` distinct splats (all of them if fewer) and pairs each with
    /// its `n` nearest neighbors.
    pub fn sample<R: Rng + ?Sized>(tree: &KdTree, m: usize, n: usize, rng: &mut R) -> Result<Self> {
        let count = tree.len();
        if count <= n {
            return Err(Error::ModelTooSmall(format!(
                "neighbor term needs more than {n} splats, model has {count}"
            )));
        }
        let mut queries = rand::seq::index::sample(rng, count, m.min(count)).into_vec();
        queries.sort_unstable();
        Self::for_queries(tree, &queries, n)
    }

    pub fn for_queries(tree: &KdTree, queries: &[usize], n: usize) -> Result<Self> {
        let mut pairs = Vec::with_capacity(queries.len() * n);
        for &j in queries {
            for i in knn_neighbors(tree, j, n)? {
                pairs.push((j, i));
            }
        }
        Ok(CosinePairs { pairs })
    }
}

pub fn splat_tree(model: &SplatModel) -> KdTree {
    let centers: Vec<_> = model.splats.iter().map(|s| s.center).collect();
    KdTree::build(&centers)
}

/// Neighbor-consistency loss over randomly sampled splats.
pub fn loss_cs<R: Rng + ?Sized>(
    model: &SplatModel,
    head: &SegHead,
    sample_count_m: usize,
    neighbor_count_n: usize,
    mode: CosineMode,
    rng: &mut R,
) -> Result<f64> {
    let tree = splat_tree(model);
    let pairs = CosinePairs::sample(&tree, sample_count_m, neighbor_count_n, rng)?;
    Ok(loss_cs_with_grad(model, head, &pairs, mode, None, 1.0))
}

fn cosine(a: &[f64; NUM_CLASSES], b: &[f64; NUM_CLASSES]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..NUM_CLASSES {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    (dot / (na * nb), na, nb)
}

/// Neighbor-consistency loss on fixed pairs. When `grads` is given, adds
/// `scale` times the gradient to the per-splat identity buffer and the head.
pub fn loss_cs_with_grad(
    model: &SplatModel,
    head: &SegHead,
    pairs: &CosinePairs,
    mode: CosineMode,
    grads: Option<(&mut [[f64; ID_DIM]], &mut HeadGrad)>,
    scale: f64,
) -> f64 {
    if pairs.pairs.is_empty() {
        return 0.0;
    }
    let mut slot = vec![usize::MAX; model.len()];
    let mut members = Vec::new();
    for &(j, i) in &pairs.pairs {
        for k in [j, i] {
            if slot[k] == usize::MAX {
                slot[k] = members.len();
                members.push(k);
            }
        }
    }
    let feats: Vec<_> = members
        .iter()
        .map(|&k| head.classify(&model.splats[k].identity))
        .collect();
    let p = pairs.pairs.len() as f64;
    let mut mean_cos = 0.0;
    let want_grad = grads.is_some();
    let mut d_feat = if want_grad {
        vec![[0.0; NUM_CLASSES]; members.len()]
    } else {
        Vec::new()
    };
    let d_cos = match mode {
        CosineMode::OneMinusCosine => -scale / p,
        CosineMode::RawCosine => scale / p,
    };
    for &(j, i) in &pairs.pairs {
        let (a, b) = (&feats[slot[j]], &feats[slot[i]]);
        let (c, na, nb) = cosine(a, b);
        mean_cos += c;
        if want_grad {
            for k in 0..NUM_CLASSES {
                d_feat[slot[j]][k] += d_cos * (b[k] / (na * nb) - c * a[k] / (na * na));
                d_feat[slot[i]][k] += d_cos * (a[k] / (na * nb) - c * b[k] / (nb * nb));
            }
        }
    }
    mean_cos /= p;
    if let Some((id_grad, head_grad)) = grads {
        for (s, &k) in members.iter().enumerate() {
            let f = &feats[s];
            let df = &d_feat[s];
            let dot: f64 = (0..NUM_CLASSES).map(|c| f[c] * df[c]).sum();
            let mut dz = [0.0; NUM_CLASSES];
            for c in 0..NUM_CLASSES {
                dz[c] = f[c] * (df[c] - dot);
            }
            let d_o = head.backward_into(&model.splats[k].identity, &dz, head_grad);
            for c in 0..ID_DIM {
                id_grad[k][c] += d_o[c];
            }
        }
    }
    let value = match mode {
        CosineMode::OneMinusCosine => 1.0 - mean_cos,
        CosineMode::RawCosine => mean_cos,
    };
    value
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossComponents {
    pub l1: f64,
    pub ssim: f64,
    pub gs: f64,
    pub oe: f64,
    pub cs: f64,
    pub total: f64,
}

/// Loss value with gradients on the rendered maps, the head and (from the
/// neighbor term) the per-splat identity vectors.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub components: LossComponents,
    pub render_grad: RenderGrad,
    pub head_grad: HeadGrad,
    pub identity_grad: Vec<[f64; ID_DIM]>,
}

/// L = L_gs + lambda_oe L_oe + lambda_cs L_cs, with
/// L_gs = (1 - w) L1 + w (1 - SSIM).
///
/// The cross-entropy term is skipped without labels; the neighbor term is
/// skipped without `pairs`.
pub fn total_loss(
    render: &RenderOutput,
    image: &ColorImage,
    labels: Option<&LabelMap>,
    model: &SplatModel,
    head: &SegHead,
    weights: &LossWeights,
    pairs: Option<&CosinePairs>,
) -> Result<LossEval> {
    let n = render.pixel_count();
    if image.width != render.width || image.height != render.height {
        return Err(Error::ShapeMismatch(format!(
            "render is {}x{}, target image {}x{}",
            render.width, render.height, image.width, image.height
        )));
    }
    let mut c = LossComponents::default();
    let mut render_grad = RenderGrad::zeros(n);
    let mut head_grad = SegHead::zeros();
    let mut identity_grad = vec![[0.0; ID_DIM]; model.len()];

    let w_ssim = weights.ssim_weight;
    let (l1, g_l1) = photometric::l1_loss(&render.color, &image.data);
    let (ssim, g_ssim) =
        photometric::ssim(&render.color, &image.data, render.width as usize, render.height as usize);
    c.l1 = l1;
    c.ssim = ssim;
    c.gs = (1.0 - w_ssim) * l1 + w_ssim * (1.0 - ssim);
    for i in 0..n {
        for ch in 0..3 {
            render_grad.color[i][ch] = (1.0 - w_ssim) * g_l1[i][ch] - w_ssim * g_ssim[i][ch];
        }
    }

    if let (Some(labels), true) = (labels, weights.lambda_oe > 0.0) {
        let (oe, d_field) = loss_oe_with_grad(&render.identity, labels, head, &mut head_grad, weights.lambda_oe)?;
        c.oe = oe;
        render_grad.identity = d_field;
    }
    if let (Some(pairs), true) = (pairs, weights.lambda_cs > 0.0) {
        let cs = loss_cs_with_grad(
            model,
            head,
            pairs,
            weights.cosine_mode,
            Some((&mut identity_grad, &mut head_grad)),
            weights.lambda_cs,
        );
        c.cs = cs;
    }
    c.total = c.gs + weights.lambda_oe * c.oe + weights.lambda_cs * c.cs;
    Ok(LossEval {
        components: c,
        render_grad,
        head_grad,
        identity_grad,
    })
}

/// Splits the model into splats whose confidence for `target_id` reaches
/// `p_ex` and the rest, preserving order.
pub fn extract_target(
    model: &SplatModel,
    head: &SegHead,
    target_id: u8,
    p_ex: f64,
) -> Result<(SplatModel, SplatModel)> {
    if target_id == 0 {
        return Err(Error::InvalidArgument("target id must be in 1..=255".into()));
    }
    let mut target = SplatModel::new(model.sh_degree);
    let mut rest = SplatModel::new(model.sh_degree);
    let mut max_conf: f64 = 0.0;
    for s in &model.splats {
        let conf = head.classify(&s.identity)[target_id as usize];
        max_conf = max_conf.max(conf);
        if conf >= p_ex {
            target.splats.push(s.clone());
        } else {
            rest.splats.push(s.clone());
        }
    }
    if target.is_empty() {
        return Err(Error::EmptyTarget {
            target_id,
            p_ex,
            max_confidence: max_conf,
        });
    }
    Ok((target, rest))
}

/// Pixels where the rendered coverage reaches [`MASK_ALPHA`].
pub fn alpha_mask(out: &RenderOutput) -> Mask {
    Mask {
        width: out.width,
        height: out.height,
        data: out.alpha.iter().map(|&a| a >= MASK_ALPHA).collect(),
    }
}

pub fn render_target_mask(target: &SplatModel, camera: &Camera, options: &RenderOptions) -> Result<Mask> {
    Ok(alpha_mask(&render(target, camera, options)?))
}

/// Per-pixel argmax class of the rendered identity field; 0 where coverage
/// is below [`MASK_ALPHA`].
pub fn id_label_map(out: &RenderOutput, head: &SegHead) -> LabelMap {
    LabelMap {
        width: out.width,
        height: out.height,
        data: out
            .identity
            .iter()
            .zip(&out.alpha)
            .map(|(o, &a)| if a >= MASK_ALPHA { head.argmax(o) } else { 0 })
            .collect(),
    }
}
