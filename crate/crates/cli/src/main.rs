mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use splatseg::eval::{f1_geometry, mbiou, miou, sample_mesh};
use splatseg::imaging::LabelMap;
use splatseg::io::{self, SceneManifest};
use splatseg::optim::train::{train, write_loss_log};
use splatseg::raster::render;
use splatseg::replenish::mock::IdentityCodec;
use splatseg::replenish::{replenish_loop, InpaintClient, MaskMode, NoiseSchedule, ResidualModel};
use splatseg::seg::{extract_target, id_label_map};
use splatseg::testbed::{self, SynthSpec};
use splatseg::{Camera, SplatModel};

use config::RunConfig;

#[derive(Parser)]
#[command(version, about = "Segment, replenish and mesh objects in 2D Gaussian splat scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene directory.
    Synth(SynthArgs),
    /// Fit a model with identity features to a scene.
    Train(TrainArgs),
    /// Render color images and ID maps of a checkpoint at the scene cameras.
    Render(RenderArgs),
    /// Split a checkpoint into a target object and the remainder.
    Extract(ExtractArgs),
    /// Inpaint novel views of a target and train on them.
    Replenish(ReplenishArgs),
    /// Fuse rendered depth into a triangle mesh.
    Mesh(MeshArgs),
    /// Score label maps and geometry against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if self.seed.is_some() {
            c.seed = self.seed;
        }
        c.apply_seed();
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    ThreeObjects,
    Sphere,
    Truck,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "three-objects")]
    preset: Preset,
    /// JSON scene description; replaces the preset.
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,
    /// Splats per object for presets.
    #[arg(long, default_value_t = 1000)]
    splats: usize,
    /// Camera count for presets.
    #[arg(long, default_value_t = 24)]
    views: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene directory or manifest file.
    #[arg(long)]
    scene: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    iterations: Option<usize>,
    /// Single-threaded rendering with a fixed reduction order.
    #[arg(long)]
    deterministic: bool,
    /// Start from this checkpoint instead of the scene's seed points.
    #[arg(long, value_name = "FILE")]
    init: Option<PathBuf>,
    /// Train only colors, identities and the head.
    #[arg(long)]
    freeze_geometry: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Output directory; receives color/ and ids/.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    target_id: Option<u8>,
    /// Confidence threshold for target membership.
    #[arg(long)]
    p_ex: Option<f64>,
    /// Output directory for target.ply and remainder.ply.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskModeArg {
    Residual,
    Coverage,
}

#[derive(Args)]
struct ReplenishArgs {
    /// Target checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "OMEGAS_INPAINT_URL")]
    inpaint_url: Option<String>,
    #[arg(long, value_enum)]
    mask_mode: Option<MaskModeArg>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    deterministic: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene whose cameras render the depth maps.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Extra cameras on a sphere around the model.
    #[arg(long, default_value_t = 0)]
    orbit: usize,
    #[arg(long)]
    voxel_size: Option<f64>,
    /// Output mesh file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted label PNGs.
    #[arg(long, requires = "gt_labels")]
    pred_labels: Option<PathBuf>,
    /// Directory of ground-truth label PNGs with matching file names.
    #[arg(long, requires = "pred_labels")]
    gt_labels: Option<PathBuf>,
    /// IDs to score; all IDs in the ground truth by default.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<u8>,
    /// Predicted mesh or point cloud.
    #[arg(long, requires = "gt_geometry")]
    pred_geometry: Option<PathBuf>,
    #[arg(long, requires = "pred_geometry")]
    gt_geometry: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn manifest_path(scene: &Path) -> PathBuf {
    if scene.is_dir() {
        scene.join(testbed::MANIFEST_FILE)
    } else {
        scene.to_path_buf()
    }
}

fn load_scene(scene: &Path) -> Result<SceneManifest> {
    let path = manifest_path(scene);
    ensure!(path.exists(), "scene {} does not exist", path.display());
    io::load_manifest(&path).with_context(|| format!("loading scene {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<(SplatModel, splatseg::seg::SegHead)> {
    io::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn ensure_distinct(input: &Path, output: &Path) -> Result<()> {
    let same = input == output
        || matches!((input.canonicalize(), output.canonicalize()), (Ok(a), Ok(b)) if a == b);
    ensure!(!same, "output {} would overwrite the input", output.display());
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<SynthSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => match a.preset {
            Preset::ThreeObjects => {
                let mut s = SynthSpec::three_objects(a.splats);
                s.cameras.count = a.views;
                s
            }
            Preset::Sphere => SynthSpec::unit_sphere(a.splats, a.views),
            Preset::Truck => SynthSpec::truck(a.splats, a.views),
        },
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let scene = testbed::generate_scene(&spec).context("generating scene")?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    testbed::write_scene(&scene, &a.out)?;
    let p = a.out.join("synth.json");
    std::fs::write(&p, serde_json::to_string_pretty(&spec)?).with_context(|| format!("writing {}", p.display()))?;
    log::info!(
        "wrote {} views of {} splats to {}",
        scene.cameras.len(),
        scene.model.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let manifest = load_scene(&a.scene)?;
    let mut rc = a.common.load()?;
    if let Some(n) = a.iterations {
        rc.train.iterations = n;
    }
    if a.deterministic {
        rc.train.deterministic = true;
    }
    if a.freeze_geometry {
        rc.train.freeze_geometry = true;
    }
    let (model, head) = match &a.init {
        Some(p) => load_checkpoint(p)?,
        None => io::initial_model(&manifest, &rc.train)?,
    };
    let model = SplatModel {
        sh_degree: rc.train.sh_degree,
        ..model
    };
    let views = io::load_training_views(&manifest)?;
    log::info!("training {} splats on {} views for {} iterations", model.len(), views.len(), rc.train.iterations);
    create_parent(&a.out)?;
    let dump = a.out.with_extension("diverged.ply");
    let out = train(&views, model, head, &rc.train, Some(&dump)).context("training")?;
    io::save_checkpoint(&out.model, &out.head, &a.out)?;
    write_loss_log(&out.log, &a.out.with_extension("loss.csv"))?;
    log::info!("saved {} splats to {}", out.model.len(), a.out.display());
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let manifest = load_scene(&a.scene)?;
    let rc = a.common.load()?;
    let (model, head) = load_checkpoint(&a.checkpoint)?;
    let (color_dir, id_dir) = (a.out.join("color"), a.out.join("ids"));
    for d in [&color_dir, &id_dir] {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    for (i, cam) in manifest.cameras().iter().enumerate() {
        let out = render(&model, cam, &rc.train.render)?;
        let name = format!("{i:03}.png");
        out.color_image().save_png(&color_dir.join(&name))?;
        id_label_map(&out, &head).save_png(&id_dir.join(&name))?;
    }
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let (model, head) = load_checkpoint(&a.checkpoint)?;
    let rc = a.common.load()?;
    let target_id = a
        .target_id
        .or(rc.extract.target_id)
        .context("no target id given (use --target-id or [extract] target_id)")?;
    let p_ex = a.p_ex.unwrap_or(rc.extract.p_ex);
    let available: BTreeSet<u8> = model
        .splats
        .iter()
        .map(|s| head.argmax(&s.identity))
        .filter(|&id| id != 0)
        .collect();
    if !available.contains(&target_id) {
        let list: Vec<String> = available.iter().map(u8::to_string).collect();
        bail!("object {target_id} is not in the model; available ids: [{}]", list.join(", "));
    }
    let (target, rest) = extract_target(&model, &head, target_id, p_ex)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (tp, rp) = (a.out.join("target.ply"), a.out.join("remainder.ply"));
    ensure_distinct(&a.checkpoint, &tp)?;
    ensure_distinct(&a.checkpoint, &rp)?;
    io::save_checkpoint(&target, &head, &tp)?;
    io::save_checkpoint(&rest, &head, &rp)?;
    log::info!("object {target_id}: {} splats, remainder {}", target.len(), rest.len());
    Ok(())
}

fn cmd_replenish(a: ReplenishArgs) -> Result<()> {
    ensure_distinct(&a.checkpoint, &a.out)?;
    let url = a
        .inpaint_url
        .clone()
        .context("no inpainting service (use --inpaint-url or OMEGAS_INPAINT_URL)")?;
    let (model, head) = load_checkpoint(&a.checkpoint)?;
    let mut rc = a.common.load()?;
    let mut config = rc.replenish.clone();
    if let Some(m) = a.mask_mode {
        config.mask_mode = match m {
            MaskModeArg::Residual => MaskMode::Residual,
            MaskModeArg::Coverage => MaskMode::Coverage,
        };
    }
    if let Some(n) = a.iterations {
        config.train.iterations = n;
    }
    if a.deterministic {
        config.train.deterministic = true;
    }
    config.train.sh_degree = model.sh_degree;
    rc.replenish = config.clone();
    let client = InpaintClient::new(&url)?;
    let schedule = NoiseSchedule::scaled_linear();
    let residual = ResidualModel {
        codec: &IdentityCodec,
        denoiser: &client,
        schedule: &schedule,
    };
    let (updated, report) = replenish_loop(&model, &head, &config, &client, Some(&residual)).context("replenishing")?;
    create_parent(&a.out)?;
    io::save_checkpoint(&updated, &head, &a.out)?;
    if !report.train_log.is_empty() {
        write_loss_log(&report.train_log, &a.out.with_extension("loss.csv"))?;
    }
    log::info!(
        "{} inpainted views, {} empty masks; {} -> {} splats",
        report.requests,
        report.skipped_empty,
        model.len(),
        updated.len()
    );
    Ok(())
}

fn cmd_mesh(a: MeshArgs) -> Result<()> {
    ensure_distinct(&a.checkpoint, &a.out)?;
    let mut cameras: Vec<Camera> = match &a.scene {
        Some(s) => load_scene(s)?.cameras(),
        None => Vec::new(),
    };
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let mut rc = a.common.load()?;
    if let Some(v) = a.voxel_size {
        rc.mesh.voxel_size = Some(v);
    }
    if a.orbit > 0 {
        let r = &rc.replenish;
        cameras.extend(splatseg::replenish::sample_novel_views(
            &model,
            a.orbit,
            r.width,
            r.height,
            r.fov_deg,
            r.radius_factor,
        )?);
    }
    ensure!(!cameras.is_empty(), "no cameras: give --scene or --orbit");
    let mesh = splatseg::mesh::extract_mesh(&model, &cameras, &rc.mesh).context("meshing")?;
    create_parent(&a.out)?;
    io::export_mesh(&mesh, &a.out)?;
    log::info!(
        "{} vertices, {} triangles to {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        a.out.display()
    );
    Ok(())
}

fn label_dir(dir: &Path) -> Result<Vec<(String, LabelMap)>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            Ok((name, LabelMap::load_png(&p)?))
        })
        .collect()
}

/// Mesh surfaces are sampled; files without faces are used as points.
fn geometry_points(path: &Path, samples: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    let mesh = io::read_mesh(path).with_context(|| format!("reading {}", path.display()))?;
    if mesh.triangles.is_empty() {
        return Ok(mesh.vertices);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_mesh(&mesh, samples, &mut rng)?)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let rc = a.common.load()?;
    ensure!(
        a.pred_labels.is_some() || a.pred_geometry.is_some(),
        "nothing to evaluate: give --pred-labels/--gt-labels or --pred-geometry/--gt-geometry"
    );
    let mut report = serde_json::Map::new();
    if let (Some(pd), Some(gd)) = (&a.pred_labels, &a.gt_labels) {
        let gt = label_dir(gd)?;
        let pred = label_dir(pd)?;
        let mut p = Vec::new();
        let mut g = Vec::new();
        for (name, lm) in gt {
            let Some((_, pm)) = pred.iter().find(|(n, _)| *n == name) else {
                bail!("no prediction for {name} in {}", pd.display());
            };
            p.push(pm.clone());
            g.push(lm);
        }
        let ids: Vec<u8> = if a.ids.is_empty() {
            g.iter()
                .flat_map(|l| l.ids())
                .filter(|&i| i != 0)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        } else {
            a.ids.clone()
        };
        report.insert("miou".into(), serde_json::to_value(miou(&p, &g, &ids)?)?);
        report.insert("mbiou".into(), serde_json::to_value(mbiou(&p, &g, &ids, rc.eval.band_frac)?)?);
        report.insert("band_frac".into(), json!(rc.eval.band_frac));
    }
    if let (Some(pf), Some(gf)) = (&a.pred_geometry, &a.gt_geometry) {
        let seed = rc.seed.unwrap_or(0);
        let pred = geometry_points(pf, rc.eval.mesh_samples, seed)?;
        let gt = geometry_points(gf, rc.eval.mesh_samples, seed.wrapping_add(1))?;
        let tau = a.threshold.unwrap_or(rc.eval.f1_threshold);
        report.insert("geometry".into(), serde_json::to_value(f1_geometry(&pred, &gt, tau)?)?);
    }
    let text = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => {
            create_parent(p)?;
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => cmd_synth(a).context("synth"),
        Command::Train(a) => cmd_train(a).context("train"),
        Command::Render(a) => cmd_render(a).context("render"),
        Command::Extract(a) => cmd_extract(a).context("extract"),
        Command::Replenish(a) => cmd_replenish(a).context("replenish"),
        Command::Mesh(a) => cmd_mesh(a).context("mesh"),
        Command::Eval(a) => cmd_eval(a).context("eval"),
    }
}
