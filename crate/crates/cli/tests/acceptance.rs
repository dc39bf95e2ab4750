//! Acceptance run. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any fails. `ACCEPTANCE_ONLY=3,7` restricts the run to some criteria.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatseg::eval::{boundary_iou, f1_geometry, mbiou, miou};
use splatseg::gaussian::{quat_from_normal, ParamGroup, Splat, ID_DIM};
use splatseg::imaging::{ColorImage, LabelMap, Mask};
use splatseg::io;
use splatseg::mesh::{extract_mesh, MeshConfig, TriangleMesh};
use splatseg::optim::train::{reset_identities, train, TrainConfig};
use splatseg::optim::DensifyConfig;
use splatseg::raster::{backward, filtered_weight, render, render_traced, RenderOptions};
use splatseg::replenish::mock::{IdentityCodec, InpaintHandler, MockServer, MockService, ScriptedDenoiser};
use splatseg::replenish::{
    make_inpaint_mask, replenish_loop, sample_novel_views, InpaintClient, LatentCodec, MaskMode, NoiseSchedule,
    ReplenishConfig,
};
use splatseg::seg::{
    extract_target, id_label_map, loss_cs, loss_cs_with_grad, loss_oe, render_target_mask, splat_tree, total_loss,
    CosineMode, CosinePairs, LossWeights, SegHead,
};
use splatseg::testbed::{generate_scene, plant_hole, render_options, Region, SynthSpec};
use splatseg::{Camera, SplatModel};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(t: Instant, limit: Duration) -> bool {
    t.elapsed() < limit
}

// 1. Gradient suite

fn fd_camera() -> Camera {
    Camera::look_at(Vector3::new(0.1, -0.2, -0.4), Vector3::new(0.0, 0.0, 3.0), -Vector3::y(), 16, 16, 14.0).unwrap()
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> SplatModel {
    let mut m = SplatModel::new(3);
    for _ in 0..n {
        let normal = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -1.0);
        let q = quat_from_normal(&normal) + Vector4::new(0.0, 0.0, 0.0, rng.random_range(-0.3..0.3));
        let mut s = Splat::new(
            Vector3::new(
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(2.5..4.0),
            ),
            q,
            Vector2::new(rng.random_range(0.1..0.5), rng.random_range(0.1..0.5)),
            rng.random_range(0.2..0.9),
        );
        for k in 0..16 {
            for c in 0..3 {
                s.sh[k][c] = rng.random_range(-0.15..0.15);
            }
        }
        for c in 0..ID_DIM {
            s.identity[c] = rng.random_range(-1.0..1.0);
        }
        m.splats.push(s);
    }
    m
}

struct FdScene {
    model: SplatModel,
    head: SegHead,
    image: ColorImage,
    labels: LabelMap,
    pairs: CosinePairs,
}

impl FdScene {
    fn loss(&self, model: &SplatModel, head: &SegHead, opts: &RenderOptions) -> (f64, u64) {
        let (out, trace) = render_traced(model, &fd_camera(), opts).unwrap();
        let weights = LossWeights::default();
        let e = total_loss(&out, &self.image, Some(&self.labels), model, head, &weights, Some(&self.pairs)).unwrap();
        (e.components.total, trace.signature())
    }
}

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-4)
}

/// Returns (checked, skipped at a kink, worst relative error, worst label).
fn fd_scene(seed: u64) -> (usize, usize, f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(4..=20);
    let model = random_scene(&mut rng, n);
    let mut head = SegHead::init(&mut rng);
    for v in head.params_mut() {
        *v *= 4.0;
    }
    let image = ColorImage {
        width: 16,
        height: 16,
        data: (0..256).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
    };
    let labels = LabelMap {
        width: 16,
        height: 16,
        data: (0..256).map(|_| rng.random_range(0..5u8)).collect(),
    };
    let pairs = CosinePairs::sample(&splat_tree(&model), 8, 3, &mut rng).unwrap();
    let scene = FdScene {
        model,
        head,
        image,
        labels,
        pairs,
    };
    let opts = RenderOptions::exact();
    let (out, trace) = render_traced(&scene.model, &fd_camera(), &opts).unwrap();
    let weights = LossWeights::default();
    let e = total_loss(
        &out,
        &scene.image,
        Some(&scene.labels),
        &scene.model,
        &scene.head,
        &weights,
        Some(&scene.pairs),
    )
    .unwrap();
    let mut grads = backward(&scene.model, &trace, &e.render_grad).unwrap();
    for (g, d) in grads.iter_mut().zip(&e.identity_grad) {
        for c in 0..ID_DIM {
            g.identity[c] += d[c];
        }
    }
    let base_sig = trace.signature();
    let h = 1e-6;
    let (mut checked, mut skipped, mut worst, mut label) = (0, 0, 0.0f64, String::new());
    let mut record = |an: f64, plus: (f64, u64), minus: (f64, u64), name: String| {
        if plus.1 != base_sig || minus.1 != base_sig {
            skipped += 1;
            return;
        }
        let fd = (plus.0 - minus.0) / (2.0 * h);
        let err = rel_err(an, fd);
        checked += 1;
        if err > worst {
            worst = err;
            label = format!("{name}: analytic {an:e} fd {fd:e}");
        }
    };
    for (i, g) in grads.iter().enumerate() {
        for group in ParamGroup::ALL {
            for k in 0..g.group(group).len() {
                let at = |d: f64| {
                    let mut m = scene.model.clone();
                    m.splats[i].group_mut(group)[k] += d;
                    scene.loss(&m, &scene.head, &opts)
                };
                record(g.group(group)[k], at(h), at(-h), format!("splat {i} {}[{k}]", group.name()));
            }
        }
    }
    let head_grad: Vec<f64> = e.head_grad.params().collect();
    let count = head_grad.len();
    for _ in 0..48 {
        let k = rng.random_range(0..count);
        let at = |d: f64| {
            let mut hd = scene.head.clone();
            *hd.params_mut().nth(k).unwrap() += d;
            // the render does not depend on the head
            let weights = LossWeights::default();
            let e = total_loss(&out, &scene.image, Some(&scene.labels), &scene.model, &hd, &weights, Some(&scene.pairs))
                .unwrap();
            (e.components.total, base_sig)
        };
        record(head_grad[k], at(h), at(-h), format!("head[{k}]"));
    }
    (checked, skipped, worst, label)
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let (mut checked, mut skipped, mut worst, mut label) = (0, 0, 0.0f64, String::new());
    for seed in 0..20 {
        let (c, s, w, l) = fd_scene(1000 + seed);
        checked += c;
        skipped += s;
        if w > worst {
            worst = w;
            label = format!("scene {seed} {l}");
        }
    }
    let pass = worst < 1e-4 && checked > 0 && within(t, Duration::from_secs(120));
    verdict(
        pass,
        format!(
            "20 scenes, {checked} parameters checked, {skipped} at kinks skipped, max rel err {worst:.2e} ({label}), {:.1?}",
            t.elapsed()
        ),
    )
}

// 2. Compositing

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cam = Camera::look_at(Vector3::zeros(), Vector3::new(0.0, 0.0, 3.0), -Vector3::y(), 32, 32, 28.0).unwrap();
    // Black splats over a white background leave T_final in the color;
    // unit identities accumulate the weight sum.
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let mut m = random_scene(&mut rng, 50);
        m.sh_degree = 0;
        for s in &mut m.splats {
            s.sh[0] = [splatseg::gaussian::sh::rgb_to_dc(0.0); 3];
            s.identity = [1.0; ID_DIM];
        }
        let opts = RenderOptions {
            background: [1.0; 3],
            ..RenderOptions::default()
        };
        let out = render(&m, &cam, &opts).unwrap();
        for i in 0..out.pixel_count() {
            worst = worst.max(out.identity[i][0] + out.color[i][0] - 1.0);
        }
    }
    let telescoping = worst <= 1e-5;

    let sigma = RenderOptions::default().filter.sigma_screen;
    let mut dominance = true;
    for gi in 0..=20 {
        let g = gi as f64 / 20.0;
        for dx in -12..=12 {
            for dy in -12..=12 {
                let x = [10.0 + dx as f64 * 0.25, 7.0 + dy as f64 * 0.25];
                let c = [10.0, 7.0];
                let w = filtered_weight(g, x, c, sigma);
                let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
                dominance &= w >= g && w >= (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }

    let one = Camera::look_at(Vector3::zeros(), Vector3::z(), -Vector3::y(), 1, 1, 1.0).unwrap();
    let disk = |z: f64, o: [f64; ID_DIM]| {
        let mut s = Splat::new(Vector3::new(0.0, 0.0, z), Vector4::new(1.0, 0.0, 0.0, 0.0), Vector2::new(0.3, 0.3), 0.5);
        s.identity = o;
        s
    };
    let (o1, o2) = ([1.0, 0.5, 0.0, -1.0, 2.0, 0.25, 0.75, 4.0], [0.5, 2.0, 1.0, 1.0, -4.0, 0.5, 0.25, 8.0]);
    let m = SplatModel {
        splats: vec![disk(3.0, o2), disk(2.0, o1)],
        sh_degree: 0,
    };
    let out = render(&m, &one, &RenderOptions::exact()).unwrap();
    let expected: Vec<f64> = (0..ID_DIM).map(|c| 0.5 * o1[c] + 0.25 * o2[c]).collect();
    let closed_form = out.identity[0].to_vec() == expected;

    verdict(
        telescoping && dominance && closed_form,
        format!(
            "max(sum w + T_final - 1) {worst:.1e}, max-dominance on grid {dominance}, two-splat identity exact {closed_form}"
        ),
    )
}

// 3. Synthetic segmentation

fn center_key(s: &Splat) -> [u64; 3] {
    [s.center.x.to_bits(), s.center.y.to_bits(), s.center.z.to_bits()]
}

fn criterion_3() -> Verdict {
    let t = Instant::now();
    let spec = SynthSpec::three_objects(1000);
    let scene = generate_scene(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = scene.model.clone();
    reset_identities(&mut model, &mut rng);
    let head = SegHead::init(&mut rng);
    let config = TrainConfig {
        iterations: 2000,
        seed: 3,
        deterministic: false,
        sh_degree: scene.model.sh_degree,
        freeze_geometry: true,
        render: render_options(),
        log_every: 500,
        ..TrainConfig::default()
    };
    let out = train(&scene.train_views(), model, head, &config, None).unwrap();

    let pred: Vec<LabelMap> = scene
        .cameras
        .iter()
        .map(|c| id_label_map(&render(&out.model, c, &render_options()).unwrap(), &out.head))
        .collect();
    let score = miou(&pred, &scene.label_maps, &scene.ids()).unwrap().mean;

    let mut worst_recall: f64 = 1.0;
    let mut foreign = 0;
    for id in scene.ids() {
        let planted: HashSet<[u64; 3]> = scene
            .model
            .splats
            .iter()
            .zip(&scene.labels)
            .filter(|(_, &l)| l == id)
            .map(|(s, _)| center_key(s))
            .collect();
        let got = match extract_target(&out.model, &out.head, id, 0.95) {
            Ok((target, _)) => target,
            Err(_) => SplatModel::new(0),
        };
        let hits = got.splats.iter().filter(|s| planted.contains(&center_key(s))).count();
        foreign += got.len() - hits;
        worst_recall = worst_recall.min(hits as f64 / planted.len() as f64);
    }
    let pass = score >= 0.95 && worst_recall >= 0.99 && foreign == 0 && within(t, Duration::from_secs(900));
    verdict(
        pass,
        format!(
            "mIoU {score:.4}, worst extraction recall {:.2}%, foreign splats {foreign}, {:.1?}",
            100.0 * worst_recall,
            t.elapsed()
        ),
    )
}

// 4. Loss closed forms

fn brute_cs(model: &SplatModel, head: &SegHead, queries: &[usize], n: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for &j in queries {
        let mut d: Vec<(f64, usize)> = (0..model.len())
            .filter(|&i| i != j)
            .map(|i| ((model.splats[i].center - model.splats[j].center).norm_squared(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let fj = head.classify(&model.splats[j].identity);
        for &(_, i) in d.iter().take(n) {
            let fi = head.classify(&model.splats[i].identity);
            let dot: f64 = fj.iter().zip(&fi).map(|(a, b)| a * b).sum();
            let nj = fj.iter().map(|a| a * a).sum::<f64>().sqrt();
            let ni = fi.iter().map(|a| a * a).sum::<f64>().sqrt();
            total += dot / (nj * ni);
            count += 1;
        }
    }
    1.0 - total / count as f64
}

fn point_model(rng: &mut ChaCha8Rng, n: usize, identity: Option<[f64; ID_DIM]>) -> SplatModel {
    SplatModel {
        splats: (0..n)
            .map(|_| {
                let p = Vector3::new(rng.random(), rng.random(), rng.random());
                let mut s = Splat::new(p, Vector4::new(1.0, 0.0, 0.0, 0.0), Vector2::new(0.1, 0.1), 0.5);
                s.identity = identity.unwrap_or_else(|| std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
                s
            })
            .collect(),
        sh_degree: 0,
    }
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let field = vec![[0.0; ID_DIM]; 64];
    let labels = LabelMap {
        width: 8,
        height: 8,
        data: (0..64).map(|i| 1 + (i % 200) as u8).collect(),
    };
    let ce = loss_oe(&field, &labels, &SegHead::zeros()).unwrap();
    let ce_err = (ce - 256f64.ln()).abs();

    let head = SegHead::init(&mut rng);
    let o: [f64; ID_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let uniform = point_model(&mut rng, 50, Some(o));
    let cs_uniform = loss_cs(&uniform, &head, 1000, 5, CosineMode::OneMinusCosine, &mut rng).unwrap();

    let m = point_model(&mut rng, 50, None);
    let pairs = CosinePairs::sample(&splat_tree(&m), 20, 5, &mut ChaCha8Rng::seed_from_u64(44)).unwrap();
    let queries: Vec<usize> = pairs.pairs.iter().step_by(5).map(|p| p.0).collect();
    let fast = loss_cs_with_grad(&m, &head, &pairs, CosineMode::OneMinusCosine, None, 1.0);
    let oracle = brute_cs(&m, &head, &queries, 5);
    let direct = loss_cs(&m, &head, 20, 5, CosineMode::OneMinusCosine, &mut ChaCha8Rng::seed_from_u64(44)).unwrap();

    let pass = ce_err <= 1e-6 && cs_uniform.abs() < 1e-12 && fast == oracle && direct == fast;
    verdict(
        pass,
        format!(
            "|CE - ln 256| {ce_err:.1e}, L_cs uniform {cs_uniform:.1e}, L_cs {fast} vs brute force {oracle} (diff {:.1e})",
            (fast - oracle).abs()
        ),
    )
}

// 5. Meshing

fn sphere_error(mesh: &TriangleMesh) -> f64 {
    mesh.vertices.iter().map(|v| (v.norm() - 1.0).abs()).sum::<f64>() / mesh.vertices.len() as f64
}

fn criterion_5() -> Verdict {
    let t = Instant::now();
    let scene = generate_scene(&SynthSpec::unit_sphere(5000, 32)).unwrap();
    let mesh_at = |voxel: f64| {
        let config = MeshConfig {
            voxel_size: Some(voxel),
            render: render_options(),
            ..MeshConfig::default()
        };
        extract_mesh(&scene.model, &scene.cameras, &config).unwrap()
    };
    let coarse = mesh_at(0.02);
    let (err, open) = (sphere_error(&coarse), coarse.boundary_edges());
    let fine = mesh_at(0.01);
    let (fine_err, fine_open) = (sphere_error(&fine), fine.boundary_edges());
    let pass = err < 0.02 && open == 0 && fine_err <= err && within(t, Duration::from_secs(300));
    verdict(
        pass,
        format!(
            "voxel 0.02: {} triangles, mean radial error {err:.5}, {open} boundary edges; voxel 0.01: error {fine_err:.5}, {fine_open} boundary edges; {:.1?}",
            coarse.triangles.len(),
            t.elapsed()
        ),
    )
}

// 6. Replenishment

fn coverage(model: &SplatModel, cam: &Camera, footprint: &Mask) -> f64 {
    let out = render(model, cam, &RenderOptions::default()).unwrap();
    let inside: Vec<f64> = (0..footprint.data.len())
        .filter(|&i| footprint.data[i])
        .map(|i| out.alpha[i])
        .collect();
    inside.iter().sum::<f64>() / inside.len() as f64
}

fn triangles_in(mesh: &TriangleMesh, region: &Region) -> usize {
    (0..mesh.triangles.len())
        .filter(|&t| {
            let [a, b, c] = mesh.triangle(t);
            region.contains(&((a + b + c) / 3.0))
        })
        .count()
}

fn criterion_6() -> Verdict {
    let t = Instant::now();
    let scene = generate_scene(&SynthSpec::truck(3000, 16)).unwrap();
    let region = Region {
        min: [-0.5, -0.3, 0.45],
        max: [0.5, 0.3, 0.55],
    };
    let (holed, hole) = plant_hole(&scene, &region).unwrap();
    let top = Camera::look_at(Vector3::new(0.0, 0.0, 10.0), Vector3::zeros(), Vector3::y(), 64, 64, 213.0).unwrap();
    let footprint = render_target_mask(&hole.removed, &top, &RenderOptions::default()).unwrap().erode(1.0);
    let before = coverage(&holed.model, &top, &footprint);

    let iterations = 3000;
    let mut config = ReplenishConfig {
        novel_views: 16,
        width: 64,
        height: 64,
        mask_mode: MaskMode::Coverage,
        ..ReplenishConfig::default()
    };
    config.train = TrainConfig {
        iterations,
        sh_degree: 0,
        loss: LossWeights {
            lambda_oe: 0.0,
            lambda_cs: 0.0,
            ..LossWeights::default()
        },
        densify: DensifyConfig {
            from_iter: 100,
            interval: 100,
            until_iter: iterations * 4 / 5,
            ..DensifyConfig::default()
        },
        log_every: 500,
        ..TrainConfig::default()
    };
    // The oracle service answers each request with the unholed scene seen
    // from the novel view that request belongs to.
    let views = sample_novel_views(&holed.model, 16, 64, 64, config.fov_deg, config.radius_factor).unwrap();
    let truth: Vec<ColorImage> = views
        .iter()
        .map(|c| render(&hole.original, c, &RenderOptions::default()).unwrap().color_image())
        .collect();
    let base = config.request_seed;
    let handler: Arc<InpaintHandler> = Arc::new(move |_, _, _, seed| truth[(seed - base) as usize].clone());
    let server = MockServer::start(MockService {
        inpaint: Some(handler),
        ..Default::default()
    })
    .unwrap();
    let client = InpaintClient::new(server.url()).unwrap();
    let (filled, report) = replenish_loop(&holed.model, &SegHead::zeros(), &config, &client, None).unwrap();
    let after = coverage(&filled, &top, &footprint);

    let mut cameras = holed.cameras.clone();
    cameras.extend(sample_novel_views(&holed.model, 24, 96, 96, config.fov_deg, config.radius_factor).unwrap());
    let mesh_config = MeshConfig {
        voxel_size: Some(0.02),
        render: render_options(),
        ..MeshConfig::default()
    };
    // Triangles of the rim splats reach into the hole's edge, so the census
    // counts the interior only.
    let census = Region {
        min: [-0.4, -0.2, 0.45],
        max: [0.4, 0.2, 0.55],
    };
    let with = extract_mesh(&filled, &cameras, &mesh_config).map(|m| triangles_in(&m, &census)).unwrap_or(0);
    let without = extract_mesh(&holed.model, &cameras, &mesh_config)
        .map(|m| triangles_in(&m, &census))
        .unwrap_or(0);
    let pass = before < 0.1 && after > 0.9 && with > 0 && without == 0 && within(t, Duration::from_secs(1200));
    verdict(
        pass,
        format!(
            "hole coverage {before:.3} -> {after:.3} ({} requests, {} -> {} splats); hole triangles {with} vs {without} without replenishment; {:.1?}",
            report.requests,
            holed.model.len(),
            filled.len(),
            t.elapsed()
        ),
    )
}

// 7. Mask procedure

fn gradient_image(w: u32, h: u32) -> ColorImage {
    ColorImage {
        width: w,
        height: h,
        data: (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64 / w as f64, (i / w) as f64 / h as f64);
                [x, y, 0.5 * (x + y)]
            })
            .collect(),
    }
}

fn criterion_7() -> Verdict {
    let schedule = NoiseSchedule::scaled_linear();
    let seeds: Vec<u64> = (0..10).collect();
    let scripted = |img: &ColorImage, offset: f64, rect: Option<[usize; 4]>| ScriptedDenoiser {
        clean: IdentityCodec.encode(img).unwrap(),
        schedule: schedule.clone(),
        offset,
        rect,
    };
    let img = gradient_image(64, 48);
    let zero = make_inpaint_mask(&img, &IdentityCodec, &scripted(&img, 0.0, None), &schedule, 991, &seeds, "").unwrap();

    let (w, h) = (160u32, 128u32);
    let rect = [40, 32, 120, 96];
    let img = gradient_image(w, h);
    let m = make_inpaint_mask(&img, &IdentityCodec, &scripted(&img, 0.5, Some(rect)), &schedule, 991, &seeds, "")
        .unwrap();
    let mut truth = Mask::new(w, h);
    for y in rect[1]..rect[3] {
        for x in rect[0]..rect[2] {
            truth.data[y * w as usize + x] = true;
        }
    }
    let iou = m.iou(&truth);
    verdict(
        zero.is_empty() && iou >= 0.8,
        format!("zero-residual mask pixels {}, planted rectangle IoU {iou:.3}", zero.count()),
    )
}

// 8. Metric oracles

fn brute_fraction(a: &[Vector3<f64>], b: &[Vector3<f64>], tau: f64) -> f64 {
    let hits = a
        .iter()
        .filter(|p| b.iter().map(|q| (*p - q).norm()).fold(f64::INFINITY, f64::min) <= tau)
        .count();
    hits as f64 / a.len() as f64
}

fn band_oracle(m: &Mask, r: f64) -> Vec<bool> {
    let (w, h) = (m.width as i64, m.height as i64);
    let reach = r.ceil() as i64 + 1;
    let mut out = vec![false; m.data.len()];
    for y in 0..h {
        for x in 0..w {
            if !m.get(x, y) {
                continue;
            }
            let mut best = f64::INFINITY;
            for qy in -reach..h + reach {
                for qx in -reach..w + reach {
                    if !m.get(qx, qy) {
                        best = best.min((((qx - x).pow(2) + (qy - y).pow(2)) as f64).sqrt());
                    }
                }
            }
            out[(y * w + x) as usize] = best <= r;
        }
    }
    out
}

fn square(w: u32, x0: u32, y0: u32, side: u32) -> LabelMap {
    LabelMap {
        width: w,
        height: w,
        data: (0..w * w)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                (x >= x0 && x < x0 + side && y >= y0 && y < y0 + side) as u8
            })
            .collect(),
    }
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cloud = |rng: &mut ChaCha8Rng| -> Vec<Vector3<f64>> {
        (0..100).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect()
    };
    let mut f1_ok = true;
    for tau in [0.05, 0.2, 0.5] {
        let (a, b) = (cloud(&mut rng), cloud(&mut rng));
        let s = f1_geometry(&a, &b, tau).unwrap();
        let (p, r) = (brute_fraction(&a, &b, tau), brute_fraction(&b, &a, tau));
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        f1_ok &= s.precision == p && s.recall == r && s.f1 == f;
    }
    let a = cloud(&mut rng);
    let identical = f1_geometry(&a, &a, 1e-9).unwrap().f1;

    let mut band_ok = true;
    for (shift, frac) in [(1u32, 0.05), (2, 0.07), (3, 0.06)] {
        let gt = square(32, 8, 8, 14);
        let pred = square(32, 8 + shift, 8, 14);
        let r = frac * (2.0f64 * 32.0 * 32.0).sqrt();
        let (ga, pa) = (gt.mask_of(1), pred.mask_of(1));
        let (bg, bp) = (band_oracle(&ga, r), band_oracle(&pa, r));
        let (mut inter, mut union) = (0, 0);
        for i in 0..ga.data.len() {
            if bg[i] || bp[i] {
                inter += (ga.data[i] && pa.data[i]) as usize;
                union += (ga.data[i] || pa.data[i]) as usize;
            }
        }
        let expected = inter as f64 / union as f64;
        let got = mbiou(&[pred], &[gt], &[1], frac).unwrap().mean;
        band_ok &= got == expected && boundary_iou(&pa, &ga, r) == expected;
    }
    verdict(
        f1_ok && identical == 1.0 && band_ok,
        format!("F1 equals all-pairs oracle {f1_ok}, identical clouds F1 {identical}, mBIoU equals distance oracle {band_ok}"),
    )
}

// 9. Determinism

fn pipeline(dir: &Path) -> (Vec<u8>, Vec<u8>) {
    let mut spec = SynthSpec::three_objects(150);
    spec.cameras.count = 8;
    spec.cameras.width = 32;
    spec.cameras.height = 32;
    let scene = generate_scene(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = scene.model.clone();
    reset_identities(&mut model, &mut rng);
    let config = TrainConfig {
        iterations: 200,
        seed: 9,
        deterministic: true,
        sh_degree: 1,
        densify: DensifyConfig {
            from_iter: 50,
            interval: 50,
            ..DensifyConfig::default()
        },
        log_every: 0,
        ..TrainConfig::default()
    };
    let head = SegHead::init(&mut rng);
    let out = train(&scene.train_views(), model, head, &config, None).unwrap();
    let mut conf: Vec<f64> = out.model.splats.iter().map(|s| out.head.classify(&s.identity)[1]).collect();
    conf.sort_by(f64::total_cmp);
    let (target, _) = extract_target(&out.model, &out.head, 1, conf[conf.len() / 2]).unwrap();
    let cameras = sample_novel_views(&target, 12, 48, 48, 50.0, 1.5).unwrap();
    let mesh_config = MeshConfig {
        voxel_size: Some(0.03),
        ..MeshConfig::default()
    };
    let mesh = extract_mesh(&target, &cameras, &mesh_config).unwrap();
    let (ck, mp) = (dir.join("model.ply"), dir.join("mesh.ply"));
    io::save_checkpoint(&out.model, &out.head, &ck).unwrap();
    io::export_mesh(&mesh, &mp).unwrap();
    let mut ckpt = std::fs::read(&ck).unwrap();
    ckpt.extend(std::fs::read(io::head_path(&ck)).unwrap());
    (ckpt, std::fs::read(&mp).unwrap())
}

fn criterion_9() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ck1, mesh1) = pipeline(a.path());
    let (ck2, mesh2) = pipeline(b.path());
    verdict(
        ck1 == ck2 && mesh1 == mesh2,
        format!(
            "checkpoints identical {} ({} bytes), meshes identical {} ({} bytes)",
            ck1 == ck2,
            ck1.len(),
            mesh1 == mesh2,
            mesh1.len()
        ),
    )
}

// 10. End-to-end smoke

fn criterion_10() -> Verdict {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_splatseg"))
            .args(args)
            .current_dir(d)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
        }
    };
    let steps = [
        vec!["synth", "--out", "scene", "--splats", "500", "--views", "12", "--seed", "1"],
        vec!["train", "--scene", "scene", "--out", "ck/model.ply", "--iterations", "500", "--seed", "1"],
        vec!["extract", "--checkpoint", "ck/model.ply", "--target-id", "1", "--p-ex", "0.5", "--out", "ex"],
        vec!["mesh", "--checkpoint", "ex/target.ply", "--orbit", "24", "--voxel-size", "0.03", "--out", "mesh.ply"],
    ];
    for s in &steps {
        if let Err(e) = run(s) {
            return verdict(false, e.trim().to_string());
        }
    }
    match io::read_mesh(&d.join("mesh.ply")) {
        Ok(m) => verdict(
            !m.triangles.is_empty() && within(t, Duration::from_secs(600)),
            format!(
                "synth, train 500, extract, mesh exit 0; mesh {} vertices {} triangles; {:.1?}",
                m.vertices.len(),
                m.triangles.len(),
                t.elapsed()
            ),
        ),
        Err(e) => verdict(false, format!("mesh unreadable: {e}")),
    }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Verdict); 10] = [
        (1, "gradient suite", criterion_1),
        (2, "compositing invariants", criterion_2),
        (3, "synthetic segmentation", criterion_3),
        (4, "loss closed forms", criterion_4),
        (5, "meshing", criterion_5),
        (6, "replenishment", criterion_6),
        (7, "mask procedure", criterion_7),
        (8, "metric oracles", criterion_8),
        (9, "determinism", criterion_9),
        (10, "end-to-end smoke", criterion_10),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let v = f();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag}  {name}: {}", v.detail);
        failed += !v.pass as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
