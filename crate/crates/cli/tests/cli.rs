use std::path::Path;
use std::process::{Command, Output};

use splatseg::io;
use splatseg::replenish::mock::{MockServer, MockService};
use splatseg::replenish::{Denoiser, Latent};

/// Predicts no noise at all, so every residual is the sampled noise itself.
struct Blind;

impl Denoiser for Blind {
    fn predict_noise(&self, z_t: &Latent, _: &str, _: usize) -> splatseg::Result<Latent> {
        Ok(Latent::zeros(z_t.width, z_t.height, z_t.channels))
    }
}

fn splatseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatseg"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env("RUST_BACKTRACE", "0")
        .env_remove("OMEGAS_INPAINT_URL")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = splatseg(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn failure(dir: &Path, args: &[&str]) -> String {
    let out = splatseg(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small scene plus a short training run starting from the true geometry.
fn trained(dir: &Path) {
    ok(dir, &["synth", "--out", "scene", "--splats", "120", "--views", "6", "--seed", "5"]);
    ok(
        dir,
        &["train", "--scene", "scene", "--out", "ck/m.ply", "--iterations", "30", "--init", "scene/truth.ply"],
    );
}

#[test]
fn missing_scene_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let err = failure(dir.path(), &["train", "--scene", "nowhere", "--out", "m.ply"]);
    assert!(err.contains("does not exist"), "{err}");
    assert!(!dir.path().join("m.ply").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[train]\niteration = 3\n").unwrap();
    ok(dir.path(), &["synth", "--out", "scene", "--splats", "30", "--views", "2"]);
    let err = failure(dir.path(), &["train", "--scene", "scene", "--out", "m.ply", "--config", "run.toml"]);
    assert!(err.contains("iteration"), "{err}");
}

#[test]
fn train_writes_checkpoint_head_and_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let ck = dir.path().join("ck");
    assert!(ck.join("m.head.json").exists());
    let log = std::fs::read_to_string(ck.join("m.loss.csv")).unwrap();
    assert!(log.lines().count() > 1);
    let (model, _) = io::load_checkpoint(&ck.join("m.ply")).unwrap();
    assert_eq!(model.len(), 360);
}

#[test]
fn unknown_target_lists_available_ids() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let err = failure(dir.path(), &["extract", "--checkpoint", "ck/m.ply", "--target-id", "42", "--out", "ex"]);
    assert!(err.contains("available ids: [1, 2, 3]"), "{err}");
}

#[test]
fn outputs_never_overwrite_inputs() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let before = std::fs::read(dir.path().join("ck/m.ply")).unwrap();
    let err = failure(dir.path(), &["mesh", "--checkpoint", "ck/m.ply", "--orbit", "4", "--out", "ck/../ck/m.ply"]);
    assert!(err.contains("overwrite"), "{err}");
    let err = failure(
        dir.path(),
        &["replenish", "--checkpoint", "ck/m.ply", "--out", "ck/m.ply", "--inpaint-url", "http://127.0.0.1:9"],
    );
    assert!(err.contains("overwrite"), "{err}");
    assert_eq!(std::fs::read(dir.path().join("ck/m.ply")).unwrap(), before);
}

#[test]
fn render_and_eval_score_the_truth_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "scene", "--splats", "150", "--views", "4"]);
    ok(d, &["render", "--checkpoint", "scene/truth.ply", "--scene", "scene", "--out", "rend"]);
    assert!(d.join("rend/color/000.png").exists());
    ok(d, &["eval", "--pred-labels", "rend/ids", "--gt-labels", "scene/labels", "--out", "report.json"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert!(report["miou"]["mean"].as_f64().unwrap() > 0.99, "{report}");
    assert!(report["mbiou"]["mean"].as_f64().is_some());
}

#[test]
fn eval_scores_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "scene", "--preset", "sphere", "--splats", "800", "--views", "8"]);
    ok(d, &["mesh", "--checkpoint", "scene/truth.ply", "--scene", "scene", "--voxel-size", "0.05", "--out", "s.ply"]);
    let out = splatseg(d, &["eval", "--pred-geometry", "s.ply", "--gt-geometry", "scene/points.ply", "--threshold", "0.1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["geometry"]["f1"].as_f64().unwrap() > 0.8, "{report}");
}

#[test]
fn replenish_needs_a_service() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let err = failure(dir.path(), &["replenish", "--checkpoint", "ck/m.ply", "--out", "r.ply"]);
    assert!(err.contains("OMEGAS_INPAINT_URL"), "{err}");
}

#[test]
fn replenish_talks_to_the_service_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(d, &["extract", "--checkpoint", "ck/m.ply", "--target-id", "2", "--p-ex", "0.001", "--out", "ex"]);
    std::fs::write(
        d.join("run.toml"),
        "[replenish]\nnovel_views = 3\nwidth = 24\nheight = 24\nconcurrency = 3\nseeds = [0, 1]\n",
    )
    .unwrap();
    let server = MockServer::start(MockService {
        denoiser: Some(std::sync::Arc::new(Blind)),
        ..Default::default()
    })
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_splatseg"))
        .args([
            "replenish",
            "--checkpoint",
            "ex/target.ply",
            "--out",
            "r.ply",
            "--mask-mode",
            "residual",
            "--iterations",
            "5",
            "--config",
            "run.toml",
        ])
        .current_dir(d)
        .env("OMEGAS_INPAINT_URL", server.url())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(server.requests() > 0);
    io::load_checkpoint(&d.join("r.ply")).unwrap();
}
