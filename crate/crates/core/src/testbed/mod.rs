//! Synthetic scenes with known geometry, labels and cameras.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::sh::rgb_to_dc;
use crate::gaussian::{quat_from_normal, Splat, SplatModel, ID_DIM};
use crate::imaging::{ColorImage, LabelMap, Mask};
use crate::io::{self, Bounds, SceneManifest, ViewEntry};
use crate::optim::train::{reset_identities, TrainView};
use crate::raster::{render, RenderOptions};
use crate::seg::{SegHead, MASK_ALPHA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Axis-aligned box surface; `open_bottom` leaves out the -z face.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        #[serde(default)]
        open_bottom: bool,
    },
    /// Square through `center` facing `normal`.
    Plane {
        center: [f64; 3],
        normal: [f64; 3],
        half_size: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub splats: usize,
    pub id: u8,
    pub color: [f64; 3],
    /// When set, color blends linearly from `color` at the lowest point of
    /// the shape to this at the highest.
    #[serde(default)]
    pub top_color: Option<[f64; 3]>,
}

/// Cameras on horizontal rings around `look_at`, spread evenly over the
/// given elevations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRig {
    pub count: usize,
    pub radius: f64,
    pub elevations_deg: Vec<f64>,
    pub look_at: [f64; 3],
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            count: 24,
            radius: 4.0,
            elevations_deg: vec![-30.0, 10.0, 45.0],
            look_at: [0.0; 3],
            width: 64,
            height: 64,
            fov_deg: 50.0,
        }
    }
}

impl CameraRig {
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        if self.count == 0 || self.elevations_deg.is_empty() {
            return Err(Error::InvalidArgument("camera rig needs cameras and elevations".into()));
        }
        if !(self.radius > 0.0) || !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::InvalidArgument("camera rig radius and fov must be positive".into()));
        }
        let rings = self.elevations_deg.len();
        let target = Vector3::from(self.look_at);
        let focal = 0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan();
        let mut out = Vec::with_capacity(self.count);
        for (r, elev) in self.elevations_deg.iter().enumerate() {
            let n = self.count / rings + usize::from(r < self.count % rings);
            let e = elev.to_radians();
            for k in 0..n {
                let az = std::f64::consts::TAU * (k as f64 + 0.5 * r as f64 / rings as f64) / n as f64;
                let dir = Vector3::new(e.cos() * az.cos(), e.cos() * az.sin(), e.sin());
                out.push(Camera::look_at(
                    target + dir * self.radius,
                    target,
                    Vector3::z(),
                    self.width,
                    self.height,
                    focal,
                )?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub objects: Vec<ObjectSpec>,
    pub cameras: CameraRig,
    /// Standard deviation of splat offsets along the surface normal.
    pub position_noise: f64,
    /// Standard deviation of additive pixel noise.
    pub image_noise: f64,
    /// Disk standard deviation as a multiple of the sample spacing.
    pub splat_scale: f64,
    pub opacity: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            objects: Vec::new(),
            cameras: CameraRig::default(),
            position_noise: 0.0,
            image_noise: 0.0,
            splat_scale: 0.7,
            opacity: 0.95,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Sphere, box and plane side by side with IDs 1, 2 and 3.
    pub fn three_objects(splats_per_object: usize) -> Self {
        SynthSpec {
            objects: vec![
                ObjectSpec {
                    shape: Shape::Sphere {
                        center: [-1.1, 0.0, 0.0],
                        radius: 0.5,
                    },
                    splats: splats_per_object,
                    id: 1,
                    color: [0.85, 0.25, 0.2],
                    top_color: None,
                },
                ObjectSpec {
                    shape: Shape::Box {
                        center: [0.2, 0.6, 0.0],
                        half_extents: [0.4, 0.3, 0.45],
                        open_bottom: false,
                    },
                    splats: splats_per_object,
                    id: 2,
                    color: [0.2, 0.7, 0.3],
                    top_color: None,
                },
                ObjectSpec {
                    shape: Shape::Plane {
                        center: [0.5, -0.8, 0.0],
                        normal: [0.3, -1.0, 0.2],
                        half_size: 0.5,
                    },
                    splats: splats_per_object,
                    id: 3,
                    color: [0.25, 0.3, 0.9],
                    top_color: None,
                },
            ],
            cameras: CameraRig {
                count: 24,
                radius: 4.5,
                ..CameraRig::default()
            },
            ..SynthSpec::default()
        }
    }

    /// Unit sphere seen from all around.
    pub fn unit_sphere(splats: usize, views: usize) -> Self {
        SynthSpec {
            objects: vec![ObjectSpec {
                shape: Shape::Sphere {
                    center: [0.0; 3],
                    radius: 1.0,
                },
                splats,
                id: 1,
                color: [0.7, 0.6, 0.5],
                top_color: None,
            }],
            cameras: CameraRig {
                count: views,
                radius: 3.5,
                elevations_deg: vec![-60.0, -20.0, 20.0, 60.0],
                width: 96,
                height: 96,
                ..CameraRig::default()
            },
            ..SynthSpec::default()
        }
    }

    /// Open-bottomed box whose top face no camera sees: every camera is
    /// below the top plane.
    pub fn truck(splats: usize, views: usize) -> Self {
        SynthSpec {
            objects: vec![ObjectSpec {
                shape: Shape::Box {
                    center: [0.0, 0.0, 0.0],
                    half_extents: [0.8, 0.5, 0.5],
                    open_bottom: true,
                },
                splats,
                id: 1,
                color: [0.3, 0.35, 0.6],
                top_color: Some([0.9, 0.8, 0.3]),
            }],
            cameras: CameraRig {
                count: views,
                radius: 3.5,
                elevations_deg: vec![-5.0, 5.0],
                width: 64,
                height: 64,
                ..CameraRig::default()
            },
            ..SynthSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::InvalidArgument("scene has no objects".into()));
        }
        let mut seen = BTreeSet::new();
        for (i, o) in self.objects.iter().enumerate() {
            if o.id == 0 {
                return Err(Error::InvalidArgument(format!("object {i}: id must be in 1..=255")));
            }
            if !seen.insert(o.id) {
                return Err(Error::InvalidArgument(format!("object {i}: duplicate id {}", o.id)));
            }
            if o.splats == 0 {
                return Err(Error::InvalidArgument(format!("object {i}: splat count must be positive")));
            }
            let ok = match &o.shape {
                Shape::Sphere { radius, .. } => *radius > 0.0,
                Shape::Box { half_extents, .. } => half_extents.iter().all(|&h| h > 0.0),
                Shape::Plane { normal, half_size, .. } => {
                    *half_size > 0.0 && Vector3::from(*normal).norm() > 1e-12
                }
            };
            if !ok {
                return Err(Error::InvalidArgument(format!("object {i}: degenerate shape")));
            }
        }
        if !(self.splat_scale > 0.0) || !(self.opacity > 0.0 && self.opacity < 1.0) {
            return Err(Error::InvalidArgument("splat_scale must be positive and opacity in (0, 1)".into()));
        }
        if self.position_noise < 0.0 || self.image_noise < 0.0 {
            return Err(Error::InvalidArgument("noise levels must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A surface sample: position, outward normal, and sample spacing.
struct Sample {
    p: Vector3<f64>,
    n: Vector3<f64>,
    spacing: f64,
}

/// Low-discrepancy points in the unit square (Roberts' R2 sequence).
fn r2(i: usize) -> (f64, f64) {
    const G: f64 = 1.324_717_957_244_746;
    let (a1, a2) = (1.0 / G, 1.0 / (G * G));
    ((0.5 + a1 * i as f64).fract(), (0.5 + a2 * i as f64).fract())
}

/// Largest-remainder split of `n` proportional to `weights`.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = n - out.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

fn rect_samples(
    center: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    half: (f64, f64),
    normal: Vector3<f64>,
    n: usize,
) -> Vec<Sample> {
    let spacing = (4.0 * half.0 * half.1 / n.max(1) as f64).sqrt();
    (0..n)
        .map(|i| {
            let (a, b) = r2(i);
            Sample {
                p: center + u * ((2.0 * a - 1.0) * half.0) + v * ((2.0 * b - 1.0) * half.1),
                n: normal,
                spacing,
            }
        })
        .collect()
}

fn shape_samples(shape: &Shape, n: usize) -> Vec<Sample> {
    match shape {
        Shape::Sphere { center, radius } => {
            let c = Vector3::from(*center);
            let spacing = (4.0 * std::f64::consts::PI * radius * radius / n as f64).sqrt();
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|i| {
                    let z = 1.0 - (2 * i + 1) as f64 / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * i as f64;
                    let d = Vector3::new(r * phi.cos(), r * phi.sin(), z);
                    Sample {
                        p: c + d * *radius,
                        n: d,
                        spacing,
                    }
                })
                .collect()
        }
        Shape::Box {
            center,
            half_extents: h,
            open_bottom,
        } => {
            let c = Vector3::from(*center);
            let mut faces = Vec::new();
            for axis in 0..3 {
                for sign in [-1.0, 1.0] {
                    if axis == 2 && sign < 0.0 && *open_bottom {
                        continue;
                    }
                    let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
                    let mut normal = Vector3::zeros();
                    normal[axis] = sign;
                    let mut u = Vector3::zeros();
                    u[ua] = 1.0;
                    let mut v = Vector3::zeros();
                    v[va] = 1.0;
                    faces.push((c + normal * h[axis], u, v, (h[ua], h[va]), normal));
                }
            }
            let areas: Vec<f64> = faces.iter().map(|f| f.3 .0 * f.3 .1).collect();
            let counts = apportion(n, &areas);
            faces
                .into_iter()
                .zip(counts)
                .flat_map(|((fc, u, v, half, normal), m)| rect_samples(fc, u, v, half, normal, m))
                .collect()
        }
        Shape::Plane {
            center,
            normal,
            half_size,
        } => {
            let nrm = Vector3::from(*normal).normalize();
            let helper = if nrm.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let u = nrm.cross(&helper).normalize();
            let v = nrm.cross(&u);
            rect_samples(Vector3::from(*center), u, v, (*half_size, *half_size), nrm, n)
        }
    }
}

/// Generated scene with per-splat ground-truth IDs.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub model: SplatModel,
    pub labels: Vec<u8>,
    pub cameras: Vec<Camera>,
    pub images: Vec<ColorImage>,
    pub label_maps: Vec<LabelMap>,
}

impl SynthScene {
    pub fn ids(&self) -> Vec<u8> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn train_views(&self) -> Vec<TrainView> {
        self.cameras
            .iter()
            .zip(self.images.iter().zip(&self.label_maps))
            .map(|(c, (i, l))| TrainView {
                camera: c.clone(),
                image: i.clone(),
                labels: Some(l.clone()),
            })
            .collect()
    }

    /// Splats carrying `id`, in model order.
    pub fn object(&self, id: u8) -> SplatModel {
        let idx: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i] == id).collect();
        self.model.subset(&idx)
    }
}

/// Options used for every supervision render.
pub fn render_options() -> RenderOptions {
    RenderOptions {
        parallel: true,
        ..RenderOptions::default()
    }
}

pub fn generate_scene(spec: &SynthSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut model = SplatModel::new(0);
    let mut labels = Vec::new();
    for o in &spec.objects {
        let samples = shape_samples(&o.shape, o.splats);
        let zs = samples.iter().map(|s| s.p.z);
        let (zlo, zhi) = zs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), z| (a.min(z), b.max(z)));
        let noise = Normal::new(0.0, spec.position_noise.max(f64::MIN_POSITIVE)).expect("valid std");
        for s in samples {
            let t = if zhi > zlo { (s.p.z - zlo) / (zhi - zlo) } else { 0.0 };
            let offset = if spec.position_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let scale = spec.splat_scale * s.spacing;
            let mut splat = Splat::new(s.p + s.n * offset, quat_from_normal(&s.n), Vector2::repeat(scale), spec.opacity);
            let color = match o.top_color {
                Some(top) => std::array::from_fn(|k| o.color[k] + (top[k] - o.color[k]) * t),
                None => o.color,
            };
            splat.sh[0] = color.map(rgb_to_dc);
            model.splats.push(splat);
            labels.push(o.id);
        }
    }
    reset_identities(&mut model, &mut rng);
    let cameras = spec.cameras.cameras()?;
    let (images, label_maps) = render_supervision(&model, &labels, &cameras, spec.image_noise, &mut rng)?;
    Ok(SynthScene {
        model,
        labels,
        cameras,
        images,
        label_maps,
    })
}

fn render_supervision<R: Rng + ?Sized>(
    model: &SplatModel,
    labels: &[u8],
    cameras: &[Camera],
    image_noise: f64,
    rng: &mut R,
) -> Result<(Vec<ColorImage>, Vec<LabelMap>)> {
    let opts = render_options();
    let mut images = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let mut img = render(model, cam, &opts)?.color_image();
        if image_noise > 0.0 {
            let noise = Normal::new(0.0, image_noise).expect("valid std");
            for p in &mut img.data {
                for c in p.iter_mut() {
                    *c = (*c + noise.sample(rng)).clamp(0.0, 1.0);
                }
            }
        }
        images.push(img);
    }
    let label_maps = cameras
        .iter()
        .map(|c| ground_truth_labels(model, labels, c, &opts))
        .collect::<Result<_>>()?;
    Ok((images, label_maps))
}

/// Logit given to an object's own channel by [`truth_segmentation`].
pub const TRUTH_LOGIT: f64 = 20.0;

/// Identities and head that reproduce the ground-truth labels: object `k`
/// (in ID order) gets the one-hot identity `e_k` and the head maps channel
/// `k` to its ID. `None` for scenes with more objects than identity channels.
pub fn truth_segmentation(model: &SplatModel, labels: &[u8]) -> Option<(SplatModel, SegHead)> {
    let ids: Vec<u8> = labels.iter().copied().filter(|&l| l != 0).collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() > ID_DIM || labels.len() != model.len() {
        return None;
    }
    let mut coded = model.clone();
    for (s, l) in coded.splats.iter_mut().zip(labels) {
        s.identity = [0.0; ID_DIM];
        if let Some(k) = ids.iter().position(|i| i == l) {
            s.identity[k] = 1.0;
        }
    }
    let mut head = SegHead::zeros();
    for (k, &id) in ids.iter().enumerate() {
        head.weights[id as usize][k] = TRUTH_LOGIT;
    }
    Some((coded, head))
}

/// Label map of the object with the largest compositing weight at each
/// pixel, 0 where coverage is below [`MASK_ALPHA`]. Rendered through the
/// identity channels, eight objects per pass.
pub fn ground_truth_labels(model: &SplatModel, labels: &[u8], camera: &Camera, opts: &RenderOptions) -> Result<LabelMap> {
    if labels.len() != model.len() {
        return Err(Error::ShapeMismatch(format!("{} labels for {} splats", labels.len(), model.len())));
    }
    let ids: Vec<u8> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let n = camera.pixel_count();
    let mut best = vec![(0.0f64, 0u8); n];
    let mut alpha = vec![0.0; n];
    for batch in ids.chunks(ID_DIM) {
        let mut coded = model.clone();
        for (s, &l) in coded.splats.iter_mut().zip(labels) {
            s.identity = [0.0; ID_DIM];
            if let Some(k) = batch.iter().position(|&b| b == l) {
                s.identity[k] = 1.0;
            }
        }
        let out = render(&coded, camera, opts)?;
        for (i, o) in out.identity.iter().enumerate() {
            for (k, &id) in batch.iter().enumerate() {
                if o[k] > best[i].0 {
                    best[i] = (o[k], id);
                }
            }
        }
        alpha = out.alpha;
    }
    Ok(LabelMap {
        width: camera.width,
        height: camera.height,
        data: best
            .iter()
            .zip(&alpha)
            .map(|(&(_, id), &a)| if a >= MASK_ALPHA { id } else { 0 })
            .collect(),
    })
}

/// Pixels whose center ray hits the sphere.
pub fn sphere_mask(camera: &Camera, center: &Vector3<f64>, radius: f64) -> Mask {
    let eye = camera.center();
    let rt = camera.rotation().transpose();
    let mut mask = Mask::new(camera.width, camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let d = (rt * camera.ray(x as f64 + 0.5, y as f64 + 0.5)).normalize();
            let oc = eye - center;
            let b = oc.dot(&d);
            let disc = b * b - (oc.norm_squared() - radius * radius);
            mask.data[(y * camera.width + x) as usize] = disc >= 0.0 && -b + disc.sqrt() > 0.0;
        }
    }
    mask
}

/// Which `points` are seen unoccluded: the rendered median depth at their
/// projection is within `tol` of their own depth.
pub fn visible_points(model: &SplatModel, camera: &Camera, points: &[Vector3<f64>], tol: f64) -> Result<Vec<bool>> {
    let out = render(model, camera, &render_options())?;
    Ok(points
        .iter()
        .map(|p| {
            let Some((x, y, z)) = camera.project(p) else {
                return false;
            };
            if x < 0.0 || y < 0.0 || x >= camera.width as f64 || y >= camera.height as f64 {
                return false;
            }
            let i = (y as u32 * camera.width + x as u32) as usize;
            out.alpha[i] >= MASK_ALPHA && (out.depth[i] - z).abs() <= tol
        })
        .collect())
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Region {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|k| !(self.min[k] <= self.max[k])) {
            return Err(Error::InvalidArgument(format!("region {:?}..{:?} is empty", self.min, self.max)));
        }
        Ok(())
    }
}

/// What [`plant_hole`] took out.
#[derive(Debug, Clone)]
pub struct Hole {
    pub region: Region,
    /// Removed splats and their labels.
    pub removed: SplatModel,
    pub removed_labels: Vec<u8>,
    pub removed_cameras: Vec<Camera>,
    /// The scene before removal.
    pub original: SplatModel,
}

/// Removes the splats inside `region` and every camera that sees one of
/// them unoccluded, then re-renders the supervision of the remaining views.
/// A region containing no splats leaves the scene unchanged.
pub fn plant_hole(scene: &SynthScene, region: &Region) -> Result<(SynthScene, Hole)> {
    region.validate()?;
    let inside: Vec<usize> = (0..scene.model.len())
        .filter(|&i| region.contains(&scene.model.splats[i].center))
        .collect();
    let mut hole = Hole {
        region: *region,
        removed: scene.model.subset(&inside),
        removed_labels: inside.iter().map(|&i| scene.labels[i]).collect(),
        removed_cameras: Vec::new(),
        original: scene.model.clone(),
    };
    if inside.is_empty() {
        return Ok((scene.clone(), hole));
    }
    let points: Vec<_> = hole.removed.splats.iter().map(|s| s.center).collect();
    let tol = 2.0 * hole.removed.max_scale();
    let mut keep_views = Vec::new();
    for (v, cam) in scene.cameras.iter().enumerate() {
        if visible_points(&scene.model, cam, &points, tol)?.iter().any(|&b| b) {
            hole.removed_cameras.push(cam.clone());
        } else {
            keep_views.push(v);
        }
    }
    let keep: Vec<usize> = (0..scene.model.len()).filter(|i| inside.binary_search(i).is_err()).collect();
    let model = scene.model.subset(&keep);
    let labels: Vec<u8> = keep.iter().map(|&i| scene.labels[i]).collect();
    let cameras: Vec<Camera> = keep_views.iter().map(|&v| scene.cameras[v].clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (images, label_maps) = render_supervision(&model, &labels, &cameras, 0.0, &mut rng)?;
    Ok((
        SynthScene {
            model,
            labels,
            cameras,
            images,
            label_maps,
        },
        hole,
    ))
}

/// File names inside a written scene directory.
pub const MANIFEST_FILE: &str = "scene.json";
pub const POINTS_FILE: &str = "points.ply";
pub const TRUTH_MODEL_FILE: &str = "truth.ply";
pub const TRUTH_LABELS_FILE: &str = "truth_labels.json";

/// Writes images, label maps, seed points, the ground-truth model and its
/// per-splat labels, and the manifest.
pub fn write_scene(scene: &SynthScene, dir: &Path) -> Result<SceneManifest> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut views = Vec::with_capacity(scene.cameras.len());
    for (i, cam) in scene.cameras.iter().enumerate() {
        let image = Path::new("images").join(format!("{i:03}.png"));
        let labels = Path::new("labels").join(format!("{i:03}.png"));
        scene.images[i].save_png(&dir.join(&image))?;
        scene.label_maps[i].save_png(&dir.join(&labels))?;
        views.push(ViewEntry {
            image,
            labels: Some(labels),
            camera: cam.clone(),
        });
    }
    let (lo, hi) = crate::mesh::model_bounds(&scene.model)
        .ok_or_else(|| Error::InvalidArgument("scene has no splats".into()))?;
    let centers: Vec<_> = scene.model.splats.iter().map(|s| s.center).collect();
    let colors: Vec<[f64; 3]> = scene
        .model
        .splats
        .iter()
        .map(|s| s.eval_color(&Vector3::z(), 0))
        .collect();
    io::write_points(&centers, Some(&colors), &dir.join(POINTS_FILE))?;
    let (truth, head) =
        truth_segmentation(&scene.model, &scene.labels).unwrap_or_else(|| (scene.model.clone(), SegHead::zeros()));
    io::save_checkpoint(&truth, &head, &dir.join(TRUTH_MODEL_FILE))?;
    let p = dir.join(TRUTH_LABELS_FILE);
    std::fs::write(&p, serde_json::to_string(&scene.labels).expect("labels serialize")).map_err(|e| Error::io(&p, e))?;
    let manifest = SceneManifest {
        views,
        bounds: Bounds {
            min: lo.into(),
            max: hi.into(),
        },
        init_points: Some(POINTS_FILE.into()),
        root: dir.to_path_buf(),
    };
    io::write_manifest(&manifest, &dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
