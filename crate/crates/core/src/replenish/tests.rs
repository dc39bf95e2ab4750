use std::sync::{Arc, Mutex};

use nalgebra::{Vector2, Vector4};

use super::mock::{IdentityCodec, MockServer, MockService, ScriptedDenoiser};
use super::*;
use crate::gaussian::Splat;
use crate::optim::DensifyConfig;
use crate::raster::RenderOptions;
use crate::seg::LossWeights;

#[test]
fn schedule_matches_product_of_betas() {
    let s = NoiseSchedule::scaled_linear();
    assert_eq!(s.max_t(), 999);
    assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    // Independent evaluation through a log-sum.
    let beta = |i: usize| {
        let x = 0.00085f64.sqrt() + (0.012f64.sqrt() - 0.00085f64.sqrt()) * i as f64 / 999.0;
        x * x
    };
    for t in [1usize, 10, 500, 991, 999] {
        let expected = (0..=t).map(|i| (1.0 - beta(i)).ln()).sum::<f64>().exp();
        let got = s.alpha_bar(t).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected.max(1e-3), "t {t}: {got} vs {expected}");
    }
    assert!(s.alpha_bar(1000).is_err());
    assert!(NoiseSchedule::new(vec![1.0, 0.5, 0.7]).is_err());
    assert!(NoiseSchedule::new(vec![0.9]).is_err());
}

fn latent(seed: u64) -> Latent {
    Latent::gaussian([6, 5, 3], seed)
}

#[test]
fn perturbation_endpoints() {
    let (z0, eps) = (latent(1), latent(2));
    let s = NoiseSchedule::new(vec![1.0, 0.25, 0.0]).unwrap();
    assert_eq!(perturb_latent(&z0, 0, &eps, &s).unwrap(), z0);
    assert_eq!(perturb_latent(&z0, 2, &eps, &s).unwrap(), eps);
    let mid = perturb_latent(&z0, 1, &eps, &s).unwrap();
    for i in 0..z0.data.len() {
        let expected = 0.5 * z0.data[i] + 0.75f64.sqrt() * eps.data[i];
        assert!((mid.data[i] - expected).abs() < 1e-15);
    }
    assert!(perturb_latent(&z0, 3, &eps, &s).is_err());
    assert!(perturb_latent(&z0, 1, &Latent::zeros(6, 6, 3), &s).is_err());
}

#[test]
fn perturbation_preserves_unit_variance() {
    let s = NoiseSchedule::scaled_linear();
    let z0 = Latent::gaussian([100, 100, 1], 7);
    let eps = Latent::gaussian([100, 100, 1], 8);
    for t in [1, 250, 600, 991] {
        let z = perturb_latent(&z0, t, &eps, &s).unwrap();
        let n = z.data.len() as f64;
        let mean = z.data.iter().sum::<f64>() / n;
        let var = z.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.05, "t {t}: variance {var}");
    }
}

fn scripted(z0: &Latent, offset: f64, rect: Option<[usize; 4]>) -> ScriptedDenoiser {
    ScriptedDenoiser {
        clean: z0.clone(),
        schedule: NoiseSchedule::scaled_linear(),
        offset,
        rect,
    }
}

#[test]
fn exact_denoiser_has_zero_residual_and_offset_shows_up() {
    let s = NoiseSchedule::scaled_linear();
    let (z0, eps) = (latent(3), latent(4));
    let zt = perturb_latent(&z0, 991, &eps, &s).unwrap();
    let r = noise_residual(&scripted(&z0, 0.0, None), &zt, "", 991, &eps).unwrap();
    assert!(r.data.iter().all(|v| v.abs() < 1e-9));
    let r = noise_residual(&scripted(&z0, 0.3, None), &zt, "", 991, &eps).unwrap();
    assert!(r.data.iter().all(|v| (v - 0.3).abs() < 1e-9));
}

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

fn rect_mask(w: u32, h: u32, r: [usize; 4]) -> Mask {
    let mut m = Mask::new(w, h);
    for y in r[1]..r[3] {
        for x in r[0]..r[2] {
            m.data[y * w as usize + x] = true;
        }
    }
    m
}

#[test]
fn residual_mask_is_empty_for_an_exact_denoiser() {
    let img = gradient_image(40, 30);
    let z0 = IdentityCodec.encode(&img).unwrap();
    let s = NoiseSchedule::scaled_linear();
    let seeds: Vec<u64> = (0..10).collect();
    let m = make_inpaint_mask(&img, &IdentityCodec, &scripted(&z0, 0.0, None), &s, 991, &seeds, "").unwrap();
    assert!(m.is_empty());
}

#[test]
fn residual_mask_recovers_planted_region() {
    let (w, h) = (160u32, 128u32);
    let rect = [40, 32, 120, 96];
    let img = gradient_image(w, h);
    let z0 = IdentityCodec.encode(&img).unwrap();
    let s = NoiseSchedule::scaled_linear();
    let seeds: Vec<u64> = (0..10).collect();
    let d = scripted(&z0, 0.5, Some(rect));
    let m = make_inpaint_mask(&img, &IdentityCodec, &d, &s, 991, &seeds, "").unwrap();
    let iou = m.iou(&rect_mask(w, h, rect));
    assert!(iou >= 0.8, "iou {iou}");
}

#[test]
fn otsu_splits_two_clusters() {
    let mut v = vec![0.1; 300];
    v.extend(vec![0.9; 100]);
    let t = otsu_threshold(&v).unwrap();
    assert!(t > 0.1 && t < 0.9, "{t}");
    assert!(otsu_threshold(&[0.4; 10]).is_none());
}

#[test]
fn coverage_mask_marks_uncovered_pixels_inside_rect() {
    let cam = Camera::look_at(Vector3::new(0.0, 0.0, 3.0), Vector3::zeros(), Vector3::y(), 24, 20, 20.0).unwrap();
    let out = render(&SplatModel::new(0), &cam, &RenderOptions::default()).unwrap();
    let m = coverage_mask(&out, 0.5, [2, 3, 10, 7]);
    assert_eq!(m, rect_mask(24, 20, [2, 3, 10, 7]));
}

fn ring_model() -> SplatModel {
    let mut m = SplatModel::new(0);
    for k in 0..6 {
        let a = k as f64 * std::f64::consts::TAU / 6.0;
        let mut s = Splat::new(
            Vector3::new(a.cos(), a.sin(), 0.2 * (k % 2) as f64),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            Vector2::new(0.3, 0.3),
            0.9,
        );
        s.sh[0] = [0.5, -0.2, 0.1];
        m.splats.push(s);
    }
    m
}

#[test]
fn novel_views_surround_and_face_the_target() {
    let model = ring_model();
    let c = model.weighted_centroid().unwrap();
    let bound = model.splats.iter().map(|s| (s.center - c).norm()).fold(0.0, f64::max);
    let cams = sample_novel_views(&model, 12, 32, 24, 60.0, 1.5).unwrap();
    assert_eq!(cams.len(), 12);
    for cam in &cams {
        assert!(((cam.center() - c).norm() - 1.5 * bound).abs() < 1e-9);
        let (x, y, z) = cam.project(&c).unwrap();
        assert!((x - 16.0).abs() < 1e-9 && (y - 12.0).abs() < 1e-9 && z > 0.0);
    }
    assert!(sample_novel_views(&SplatModel::new(0), 3, 8, 8, 60.0, 1.5).is_err());
}

fn fill(color: [f64; 3]) -> Arc<mock::InpaintHandler> {
    Arc::new(move |img: &ColorImage, mask: &Mask, _: &str, _: u64| {
        let mut out = img.clone();
        for (p, &m) in out.data.iter_mut().zip(&mask.data) {
            if m {
                *p = color;
            }
        }
        out
    })
}

fn quick_client(server: &MockServer) -> InpaintClient {
    let mut c = InpaintClient::new(server.url()).unwrap();
    c.backoff = std::time::Duration::from_millis(1);
    c
}

#[test]
fn client_replaces_only_masked_pixels() {
    // The service paints the whole frame; the client must keep unmasked pixels.
    let paint_all: Arc<mock::InpaintHandler> = Arc::new(|img, _, _, _| ColorImage::filled(img.width, img.height, [1.0, 0.0, 0.0]));
    let server = MockServer::start(MockService {
        inpaint: Some(paint_all),
        ..Default::default()
    })
    .unwrap();
    let client = quick_client(&server);
    let img = gradient_image(20, 10).quantized();
    let mask = rect_mask(20, 10, [3, 2, 9, 6]);
    let out = client::request_inpaint(&client, &img, &mask, "", 4).unwrap();
    for i in 0..img.data.len() {
        let expected = if mask.data[i] { [1.0, 0.0, 0.0] } else { img.data[i] };
        assert_eq!(out.data[i], expected);
    }
    assert_eq!(server.requests(), 1);
}

#[test]
fn empty_mask_skips_the_request() {
    let server = MockServer::start(MockService::default()).unwrap();
    let client = quick_client(&server);
    let img = gradient_image(8, 8);
    let out = client::request_inpaint(&client, &img, &Mask::new(8, 8), "", 0).unwrap();
    assert_eq!(out, img);
    assert_eq!(server.requests(), 0);
}

#[test]
fn server_errors_are_retried() {
    let server = MockServer::start(MockService {
        fail_first: 2,
        ..Default::default()
    })
    .unwrap();
    let client = quick_client(&server);
    let img = gradient_image(8, 8).quantized();
    let out = client::request_inpaint(&client, &img, &rect_mask(8, 8, [0, 0, 4, 4]), "", 0).unwrap();
    assert_eq!(out, img);
    assert_eq!(server.requests(), 3);
}

#[test]
fn persistent_server_errors_give_up_after_four_attempts() {
    let server = MockServer::start(MockService {
        fail_first: 100,
        ..Default::default()
    })
    .unwrap();
    let client = quick_client(&server);
    let img = gradient_image(8, 8);
    let err = client::request_inpaint(&client, &img, &rect_mask(8, 8, [0, 0, 4, 4]), "", 0).unwrap_err();
    assert!(matches!(err, Error::Service(_)), "{err}");
    assert_eq!(server.requests(), 4);
}

#[test]
fn malformed_responses_are_protocol_errors() {
    let server = MockServer::start(MockService {
        garbage: true,
        ..Default::default()
    })
    .unwrap();
    let client = quick_client(&server);
    let mask = rect_mask(8, 8, [0, 0, 4, 4]);
    let err = client::request_inpaint(&client, &gradient_image(8, 8), &mask, "", 0).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
    assert_eq!(server.requests(), 1);

    let shrink: Arc<mock::InpaintHandler> = Arc::new(|_, _, _, _| ColorImage::filled(4, 4, [0.0; 3]));
    let server = MockServer::start(MockService {
        inpaint: Some(shrink),
        ..Default::default()
    })
    .unwrap();
    let err = client::request_inpaint(&quick_client(&server), &gradient_image(8, 8), &mask, "", 0).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[test]
fn unreachable_service_is_a_service_error() {
    let url = {
        let server = MockServer::start(MockService::default()).unwrap();
        server.url().to_string()
    };
    let mut client = InpaintClient::new(&url).unwrap();
    client.backoff = std::time::Duration::from_millis(1);
    let err = client::request_inpaint(&client, &gradient_image(8, 8), &rect_mask(8, 8, [0, 0, 2, 2]), "", 0)
        .unwrap_err();
    assert!(matches!(err, Error::Service(_)), "{err}");
}

#[test]
fn remote_denoiser_matches_local_within_wire_precision() {
    let img = gradient_image(12, 10);
    let z0 = IdentityCodec.encode(&img).unwrap();
    let local = scripted(&z0, 0.0, Some([2, 2, 6, 6]));
    let server = MockServer::start(MockService {
        denoiser: Some(Arc::new(local.clone())),
        ..Default::default()
    })
    .unwrap();
    let client = quick_client(&server);
    let s = NoiseSchedule::scaled_linear();
    let eps = Latent::gaussian(z0.shape(), 9);
    let zt = perturb_latent(&z0, 500, &eps, &s).unwrap();
    let a = local.predict_noise(&zt, "", 500).unwrap();
    let b = client.predict_noise(&zt, "", 500).unwrap();
    for (x, y) in a.data.iter().zip(&b.data) {
        assert!((x - y).abs() < 1e-5 * (1.0 + x.abs()), "{x} vs {y}");
    }
}

/// z_t = ε under a one-step schedule ending at ᾱ = 0, so echoing z_t is exact.
struct EchoDenoiser;

impl Denoiser for EchoDenoiser {
    fn predict_noise(&self, z_t: &Latent, _: &str, _: usize) -> Result<Latent> {
        Ok(z_t.clone())
    }
}

fn small_config(views: usize, mode: MaskMode) -> ReplenishConfig {
    ReplenishConfig {
        novel_views: views,
        width: 24,
        height: 24,
        mask_mode: mode,
        timestep: 1,
        seeds: vec![0, 1],
        request_seed: 100,
        train: TrainConfig {
            iterations: 5,
            sh_degree: 0,
            loss: LossWeights {
                lambda_oe: 0.0,
                lambda_cs: 0.0,
                ..LossWeights::default()
            },
            densify: DensifyConfig {
                enabled: false,
                ..DensifyConfig::default()
            },
            log_every: 0,
            ..TrainConfig::default()
        },
        ..ReplenishConfig::default()
    }
}

#[test]
fn zero_novel_views_leave_the_model_unchanged() {
    let model = ring_model();
    let server = MockServer::start(MockService::default()).unwrap();
    let (out, report) = replenish_loop(
        &model,
        &SegHead::zeros(),
        &small_config(0, MaskMode::Coverage),
        &quick_client(&server),
        None,
    )
    .unwrap();
    assert_eq!(out, model);
    assert_eq!(report.requests, 0);
    assert_eq!(server.requests(), 0);
}

#[test]
fn all_empty_residual_masks_issue_no_requests() {
    let model = ring_model();
    let server = MockServer::start(MockService::default()).unwrap();
    let schedule = NoiseSchedule::new(vec![1.0, 0.0]).unwrap();
    let residual = ResidualModel {
        codec: &IdentityCodec,
        denoiser: &EchoDenoiser,
        schedule: &schedule,
    };
    let (out, report) = replenish_loop(
        &model,
        &SegHead::zeros(),
        &small_config(4, MaskMode::Residual),
        &quick_client(&server),
        Some(&residual),
    )
    .unwrap();
    assert_eq!(out, model);
    assert_eq!((report.requests, report.skipped_empty), (0, 4));
    assert_eq!(server.requests(), 0);
}

#[test]
fn residual_mode_requires_diffusion_components() {
    let server = MockServer::start(MockService::default()).unwrap();
    let err = replenish_loop(
        &ring_model(),
        &SegHead::zeros(),
        &small_config(2, MaskMode::Residual),
        &quick_client(&server),
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn coverage_mode_inpaints_and_trains_with_per_view_seeds() {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let record = seen.clone();
    let paint = fill([0.2, 0.6, 0.3]);
    let handler: Arc<mock::InpaintHandler> = Arc::new(move |img, mask, prompt, seed| {
        record.lock().unwrap().push(seed);
        paint(img, mask, prompt, seed)
    });
    let server = MockServer::start(MockService {
        inpaint: Some(handler),
        ..Default::default()
    })
    .unwrap();
    let model = ring_model();
    let config = small_config(4, MaskMode::Coverage);
    let (out, report) = replenish_loop(&model, &SegHead::zeros(), &config, &quick_client(&server), None).unwrap();
    assert!(report.requests > 0);
    assert_eq!(report.requests + report.skipped_empty, 4);
    assert_eq!(report.train_log.len(), 5);
    assert_ne!(out, model);
    let mut seeds = seen.lock().unwrap().clone();
    seeds.sort();
    let expected: Vec<u64> = (0..4).filter(|&i| !report.masks[i].is_empty()).map(|i| 100 + i as u64).collect();
    assert_eq!(seeds, expected);
}

#[test]
fn duplicate_seeds_give_the_single_seed_mask() {
    let (w, h) = (48u32, 40u32);
    let img = gradient_image(w, h);
    let z0 = IdentityCodec.encode(&img).unwrap();
    let s = NoiseSchedule::scaled_linear();
    let d = scripted(&z0, 0.4, Some([10, 8, 30, 24]));
    let one = make_inpaint_mask(&img, &IdentityCodec, &d, &s, 991, &[3], "").unwrap();
    let many = make_inpaint_mask(&img, &IdentityCodec, &d, &s, 991, &[3, 3, 3, 3], "").unwrap();
    assert_eq!(one, many);
    assert!(!one.is_empty());
}

#[test]
fn fully_covered_render_gives_an_empty_coverage_mask() {
    let cam = Camera::look_at(Vector3::new(0.0, 0.0, 3.0), Vector3::zeros(), Vector3::y(), 16, 16, 16.0).unwrap();
    let mut m = SplatModel::new(0);
    m.splats.push(Splat::new(Vector3::zeros(), Vector4::new(1.0, 0.0, 0.0, 0.0), Vector2::new(5.0, 5.0), 0.9999));
    let out = render(&m, &cam, &RenderOptions::default()).unwrap();
    assert!(coverage_mask(&out, 0.5, [0, 0, 16, 16]).is_empty());
}

#[test]
fn sphere_target_views_sit_at_one_and_a_half_radii() {
    let mut m = SplatModel::new(0);
    let n = 200;
    for i in 0..n {
        let z = 1.0 - (2 * i + 1) as f64 / n as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = 2.399963 * i as f64;
        m.splats.push(Splat::new(
            Vector3::new(r * phi.cos(), r * phi.sin(), z),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            Vector2::new(0.05, 0.05),
            0.8,
        ));
    }
    // Symmetrize so that the centroid is exactly the origin.
    let mirrored: Vec<Splat> = m
        .splats
        .iter()
        .map(|s| {
            let mut t = s.clone();
            t.center = -s.center;
            t
        })
        .collect();
    m.splats.extend(mirrored);
    let c = m.weighted_centroid().unwrap();
    assert!(c.norm() < 1e-12);
    let cams = sample_novel_views(&m, 100, 16, 16, 60.0, 1.5).unwrap();
    let bound = m.splats.iter().map(|s| (s.center - c).norm()).fold(0.0, f64::max);
    for cam in &cams {
        assert!(((cam.center() - c).norm() - 1.5 * bound).abs() < 1e-9);
    }
    for i in 0..cams.len() {
        for j in 0..i {
            let (a, b) = ((cams[i].center() - c).normalize(), (cams[j].center() - c).normalize());
            assert!(a.dot(&b) < 1.0 - 1e-6, "views {i} and {j} coincide");
        }
    }
    let single = sample_novel_views(&m, 1, 16, 16, 60.0, 1.5).unwrap();
    let (x, y, _) = single[0].project(&c).unwrap();
    assert!((x - 8.0).abs() < 1e-9 && (y - 8.0).abs() < 1e-9);
}
