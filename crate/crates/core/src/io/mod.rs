//! Scene manifests, model checkpoints, meshes and point clouds on disk.

pub mod ply;

use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::sh::{sh_coeff_count, MAX_SH_COEFFS, MAX_SH_DEGREE};
use crate::gaussian::{Splat, SplatModel, ID_DIM};
use crate::imaging::{ColorImage, LabelMap};
use crate::mesh::TriangleMesh;
use crate::optim::train::{model_from_points, random_init, TrainConfig, TrainView};
use crate::seg::SegHead;
use ply::{Element, PlyFile, ScalarType};

/// Version written into every checkpoint header.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub camera: Camera,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn min(&self) -> Vector3<f64> {
        Vector3::from(self.min)
    }

    pub fn max(&self) -> Vector3<f64> {
        Vector3::from(self.max)
    }

    pub fn diagonal(&self) -> f64 {
        (self.max() - self.min()).norm()
    }
}

/// Posed views of one scene. Relative paths resolve against `root`, the
/// directory holding the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub views: Vec<ViewEntry>,
    pub bounds: Bounds,
    /// Optional point cloud used to seed the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_points: Option<PathBuf>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl SceneManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }

    /// Checks every stated invariant; file checks are skipped when
    /// `check_files` is false.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Manifest {
                path: self.root.clone(),
                message: "empty scene".into(),
            });
        }
        let (lo, hi) = (self.bounds.min, self.bounds.max);
        if (0..3).any(|k| !(lo[k].is_finite() && hi[k].is_finite() && lo[k] <= hi[k])) {
            return Err(Error::Manifest {
                path: self.root.clone(),
                message: format!("bounds: min {lo:?} must not exceed max {hi:?}"),
            });
        }
        for (i, v) in self.views.iter().enumerate() {
            let bad = |message: String| Error::InvalidView { view: i, message };
            v.camera.validate().map_err(|e| bad(format!("camera: {e}")))?;
            if !check_files {
                continue;
            }
            let (w, h) = (v.camera.width, v.camera.height);
            let image = self.resolve(&v.image);
            let dims = image::image_dimensions(&image)
                .map_err(|e| bad(format!("image {}: {e}", image.display())))?;
            if dims != (w, h) {
                return Err(bad(format!(
                    "image: {} is {}x{}, camera declares {w}x{h}",
                    image.display(),
                    dims.0,
                    dims.1
                )));
            }
            if let Some(l) = &v.labels {
                let labels = self.resolve(l);
                let dims = image::image_dimensions(&labels)
                    .map_err(|e| bad(format!("labels {}: {e}", labels.display())))?;
                if dims != (w, h) {
                    return Err(bad(format!(
                        "labels: {} is {}x{}, camera declares {w}x{h}",
                        labels.display(),
                        dims.0,
                        dims.1
                    )));
                }
            }
        }
        if let Some(p) = &self.init_points {
            let p = self.resolve(p);
            if !p.is_file() {
                return Err(Error::Manifest {
                    path: self.root.clone(),
                    message: format!("init_points: {} does not exist", p.display()),
                });
            }
        }
        Ok(())
    }
}

/// Reads and validates a JSON scene manifest.
pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: SceneManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate(true).map_err(|e| match e {
        Error::Manifest { message, .. } => Error::Manifest {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })?;
    Ok(m)
}

pub fn write_manifest(manifest: &SceneManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every image and label map of a manifest.
pub fn load_training_views(manifest: &SceneManifest) -> Result<Vec<TrainView>> {
    manifest
        .views
        .iter()
        .map(|v| {
            Ok(TrainView {
                camera: v.camera.clone(),
                image: ColorImage::load_png(&manifest.resolve(&v.image))?,
                labels: v
                    .labels
                    .as_ref()
                    .map(|l| LabelMap::load_png(&manifest.resolve(l)))
                    .transpose()?,
            })
        })
        .collect()
}

/// Starting model and head for training on a scene: one splat per seed
/// point when the manifest has them, otherwise random splats in the bounds.
pub fn initial_model(manifest: &SceneManifest, config: &TrainConfig) -> Result<(SplatModel, SegHead)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = match &manifest.init_points {
        Some(p) => {
            let (points, colors) = read_points(&manifest.resolve(p))?;
            if points.is_empty() {
                return Err(Error::Manifest {
                    path: manifest.resolve(p),
                    message: "seed point cloud is empty".into(),
                });
            }
            model_from_points(&points, colors.as_deref().unwrap_or(&[]), config.sh_degree, &mut rng)
        }
        None => random_init(
            (manifest.bounds.min(), manifest.bounds.max()),
            config.init_count,
            config.sh_degree,
            &mut rng,
        ),
    };
    Ok((model, SegHead::init(&mut rng)))
}

/// Sidecar path holding the head weights of a checkpoint.
pub fn head_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("head.json")
}

const GEOMETRY_PROPS: [&str; 10] = [
    "x",
    "y",
    "z",
    "rot_0",
    "rot_1",
    "rot_2",
    "rot_3",
    "log_s_u",
    "log_s_v",
    "opacity_logit",
];

/// Writes the model as a PLY point cloud of doubles plus a JSON head sidecar.
pub fn save_checkpoint(model: &SplatModel, head: &SegHead, path: &Path) -> Result<()> {
    model.validate()?;
    head.validate()?;
    let n = model.len();
    let coeffs = sh_coeff_count(model.sh_degree);
    let mut e = Element::new("vertex", n);
    let column = |f: &dyn Fn(&Splat) -> f64| model.splats.iter().map(f).collect::<Vec<_>>();
    e.add_scalar("x", ScalarType::F64, column(&|s| s.center.x));
    e.add_scalar("y", ScalarType::F64, column(&|s| s.center.y));
    e.add_scalar("z", ScalarType::F64, column(&|s| s.center.z));
    for k in 0..4 {
        e.add_scalar(&format!("rot_{k}"), ScalarType::F64, column(&|s| s.rotation[k]));
    }
    e.add_scalar("log_s_u", ScalarType::F64, column(&|s| s.log_scales.x));
    e.add_scalar("log_s_v", ScalarType::F64, column(&|s| s.log_scales.y));
    e.add_scalar("opacity_logit", ScalarType::F64, column(&|s| s.opacity_logit));
    for k in 0..coeffs {
        for c in 0..3 {
            e.add_scalar(&format!("sh_{}", 3 * k + c), ScalarType::F64, column(&|s| s.sh[k][c]));
        }
    }
    for k in 0..ID_DIM {
        e.add_scalar(&format!("id_{k}"), ScalarType::F64, column(&|s| s.identity[k]));
    }
    let ply = PlyFile {
        comments: vec![
            format!("splatseg_checkpoint {CHECKPOINT_VERSION}"),
            format!("sh_degree {}", model.sh_degree),
        ],
        elements: vec![e],
    };
    ply.write(path)?;
    let sidecar = head_path(path);
    let text = serde_json::to_string(head).expect("head serializes");
    std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(SplatModel, SegHead)> {
    let fail = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let ply = PlyFile::read(path).map_err(|e| fail(e.to_string()))?;
    let version = ply
        .comment_value("splatseg_checkpoint")
        .ok_or_else(|| fail("missing checkpoint version comment".into()))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(fail(format!(
            "version mismatch: file has {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let sh_degree: usize = ply
        .comment_value("sh_degree")
        .and_then(|v| v.parse().ok())
        .filter(|&d| d <= MAX_SH_DEGREE)
        .ok_or_else(|| fail("missing or invalid sh_degree".into()))?;
    let e = ply.element("vertex").ok_or_else(|| fail("no vertex element".into()))?;
    let ids = e.property_names().filter(|p| p.starts_with("id_")).count();
    if ids != ID_DIM {
        return Err(fail(format!("expected {ID_DIM} identity attributes, found {ids}")));
    }
    let coeffs = sh_coeff_count(sh_degree);
    let expected = GEOMETRY_PROPS.len() + 3 * coeffs + ID_DIM;
    let found = e.properties.len();
    if found != expected {
        return Err(fail(format!(
            "attribute count mismatch: expected {expected} for sh_degree {sh_degree}, found {found}"
        )));
    }
    let col = |name: &str| -> Result<&[f64]> {
        e.scalar(name)
            .ok_or_else(|| fail(format!("missing attribute {name}")))
    };
    let geo: Vec<&[f64]> = GEOMETRY_PROPS.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let sh: Vec<&[f64]> = (0..3 * coeffs)
        .map(|k| col(&format!("sh_{k}")))
        .collect::<Result<_>>()?;
    let id: Vec<&[f64]> = (0..ID_DIM)
        .map(|k| col(&format!("id_{k}")))
        .collect::<Result<_>>()?;
    let mut model = SplatModel::new(sh_degree);
    for i in 0..e.count {
        let mut s = Splat {
            center: Vector3::new(geo[0][i], geo[1][i], geo[2][i]),
            rotation: Vector4::new(geo[3][i], geo[4][i], geo[5][i], geo[6][i]),
            log_scales: Vector2::new(geo[7][i], geo[8][i]),
            opacity_logit: geo[9][i],
            sh: [[0.0; 3]; MAX_SH_COEFFS],
            identity: [0.0; ID_DIM],
        };
        for k in 0..coeffs {
            for c in 0..3 {
                s.sh[k][c] = sh[3 * k + c][i];
            }
        }
        for k in 0..ID_DIM {
            s.identity[k] = id[k][i];
        }
        model.splats.push(s);
    }
    let sidecar = head_path(path);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let head: SegHead = serde_json::from_str(&text).map_err(|e| fail(format!("head sidecar: {e}")))?;
    head.validate().map_err(|e| fail(format!("head sidecar: {e}")))?;
    Ok((model, head))
}

/// Writes a binary PLY with float vertices and int triangle lists.
pub fn export_mesh(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    mesh.validate()?;
    let mut v = Element::new("vertex", mesh.vertices.len());
    for (k, name) in ["x", "y", "z"].iter().enumerate() {
        v.add_scalar(name, ScalarType::F32, mesh.vertices.iter().map(|p| p[k] as f32 as f64).collect());
    }
    let mut f = Element::new("face", mesh.triangles.len());
    f.add_list(
        "vertex_indices",
        ScalarType::U8,
        ScalarType::I32,
        mesh.triangles.iter().map(|t| t.map(|i| i as f64).to_vec()).collect(),
    );
    PlyFile {
        comments: vec![],
        elements: vec![v, f],
    }
    .write(path)
}

/// Reads a triangle mesh; polygons with more than three corners are fanned.
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let ply = PlyFile::read(path)?;
    let vertices = read_xyz(&ply).map_err(|m| Error::Mesh(format!("{}: {m}", path.display())))?;
    let mut triangles = Vec::new();
    if let Some(f) = ply.element("face") {
        let lists = f
            .list("vertex_indices")
            .or_else(|| f.list("vertex_index"))
            .ok_or_else(|| Error::Mesh(format!("{}: face element without vertex_indices", path.display())))?;
        for poly in lists {
            for k in 1..poly.len().saturating_sub(1) {
                triangles.push([poly[0] as u32, poly[k] as u32, poly[k + 1] as u32]);
            }
        }
    }
    let mesh = TriangleMesh {
        vertices,
        triangles,
        normals: None,
    };
    mesh.validate()?;
    Ok(mesh)
}

fn read_xyz(ply: &PlyFile) -> std::result::Result<Vec<Vector3<f64>>, String> {
    let Some(v) = ply.element("vertex") else {
        return Ok(Vec::new());
    };
    let x = v.scalar("x").ok_or("vertex element without x")?;
    let y = v.scalar("y").ok_or("vertex element without y")?;
    let z = v.scalar("z").ok_or("vertex element without z")?;
    Ok((0..v.count).map(|i| Vector3::new(x[i], y[i], z[i])).collect())
}

/// Writes points (and optional 8-bit colors) as a binary PLY of doubles.
pub fn write_points(points: &[Vector3<f64>], colors: Option<&[[f64; 3]]>, path: &Path) -> Result<()> {
    let mut v = Element::new("vertex", points.len());
    for (k, name) in ["x", "y", "z"].iter().enumerate() {
        v.add_scalar(name, ScalarType::F64, points.iter().map(|p| p[k]).collect());
    }
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(Error::ShapeMismatch(format!("{} points, {} colors", points.len(), c.len())));
        }
        for (k, name) in ["red", "green", "blue"].iter().enumerate() {
            v.add_scalar(
                name,
                ScalarType::U8,
                c.iter().map(|rgb| crate::imaging::quantize(rgb[k]) as f64).collect(),
            );
        }
    }
    PlyFile {
        comments: vec![],
        elements: vec![v],
    }
    .write(path)
}

/// Reads point positions and, when present, 8-bit colors scaled to [0, 1].
pub fn read_points(path: &Path) -> Result<(Vec<Vector3<f64>>, Option<Vec<[f64; 3]>>)> {
    let ply = PlyFile::read(path)?;
    let points = read_xyz(&ply).map_err(|m| Error::Mesh(format!("{}: {m}", path.display())))?;
    let colors = ply.element("vertex").and_then(|v| {
        let (r, g, b) = (v.scalar("red")?, v.scalar("green")?, v.scalar("blue")?);
        Some((0..v.count).map(|i| [r[i] / 255.0, g[i] / 255.0, b[i] / 255.0]).collect())
    });
    Ok((points, colors))
}
