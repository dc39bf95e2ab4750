//! Stand-ins for the diffusion components: a pass-through codec, a denoiser
//! with a known answer, and a loopback HTTP service.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::client::{
    decode_image, decode_latent, decode_mask, encode_image, encode_latent, InpaintRequest, InpaintResponse,
    NoiseRequest, NoiseResponse,
};
use super::{Denoiser, Latent, LatentCodec, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::{ColorImage, Mask};

/// Latent = image, one channel per color.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, image: &ColorImage) -> Result<Latent> {
        Ok(Latent {
            width: image.width as usize,
            height: image.height as usize,
            channels: 3,
            data: image.data.iter().flatten().copied().collect(),
        })
    }

    fn decode(&self, latent: &Latent) -> Result<ColorImage> {
        if latent.channels != 3 {
            return Err(Error::Diffusion(format!("expected 3 channels, got {}", latent.channels)));
        }
        Ok(ColorImage {
            width: latent.width as u32,
            height: latent.height as u32,
            data: latent.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }
}

/// Recovers the exact injected noise from `z_t` given the clean latent, and
/// adds `offset` inside `rect` (`[x0, y0, x1, y1)` in latent pixels).
#[derive(Debug, Clone)]
pub struct ScriptedDenoiser {
    pub clean: Latent,
    pub schedule: NoiseSchedule,
    pub offset: f64,
    pub rect: Option<[usize; 4]>,
}

impl Denoiser for ScriptedDenoiser {
    fn predict_noise(&self, z_t: &Latent, _prompt: &str, t: usize) -> Result<Latent> {
        if z_t.shape() != self.clean.shape() {
            return Err(Error::ShapeMismatch("latent does not match the scripted scene".into()));
        }
        let a = self.schedule.alpha_bar(t)?;
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let c = z_t.channels;
        let mut out = z_t.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            let eps = if sn > 0.0 { (*v - sa * self.clean.data[i]) / sn } else { 0.0 };
            let px = i / c;
            let (x, y) = (px % z_t.width, px / z_t.width);
            let inside = self.rect.is_none_or(|r| x >= r[0] && x < r[2] && y >= r[1] && y < r[3]);
            *v = eps + if inside { self.offset } else { 0.0 };
        }
        Ok(out)
    }
}

/// Produces the repainted image for an inpainting request.
pub type InpaintHandler = dyn Fn(&ColorImage, &Mask, &str, u64) -> ColorImage + Send + Sync;

/// Behavior of a [`MockServer`].
#[derive(Clone, Default)]
pub struct MockService {
    /// `None` echoes the input image.
    pub inpaint: Option<Arc<InpaintHandler>>,
    pub denoiser: Option<Arc<dyn Denoiser>>,
    /// The first this-many requests get a 500.
    pub fail_first: usize,
    /// Answer every successful request with a body that is not JSON.
    pub garbage: bool,
}

/// Loopback HTTP server speaking the inpainting protocol.
pub struct MockServer {
    url: String,
    server: Arc<tiny_http::Server>,
    hits: Arc<AtomicUsize>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(service: MockService) -> Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0")
            .map_err(|e| Error::Service(format!("cannot bind mock server: {e}")))?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| Error::Service("mock server has no IP address".into()))?;
        let server = Arc::new(server);
        let hits = Arc::new(AtomicUsize::new(0));
        let thread = {
            let (server, hits) = (server.clone(), hits.clone());
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let n = hits.fetch_add(1, Ordering::SeqCst);
                    let (status, body) = if n < service.fail_first {
                        (500, r#"{"error":"scripted failure"}"#.to_string())
                    } else if service.garbage {
                        (200, "not json".to_string())
                    } else {
                        let mut body = String::new();
                        let _ = req.as_reader().read_to_string(&mut body);
                        match handle(&service, req.url(), &body) {
                            Ok(b) => (200, b),
                            Err(e) => (400, serde_json::json!({ "error": e.to_string() }).to_string()),
                        }
                    };
                    let resp = tiny_http::Response::from_string(body).with_status_code(status);
                    let _ = req.respond(resp);
                }
            })
        };
        Ok(MockServer {
            url: format!("http://127.0.0.1:{port}"),
            server,
            hits,
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Requests received so far, including failed ones.
    pub fn requests(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn handle(service: &MockService, route: &str, body: &str) -> Result<String> {
    let bad = |e: serde_json::Error| Error::Protocol(e.to_string());
    match route {
        "/inpaint" => {
            let req: InpaintRequest = serde_json::from_str(body).map_err(bad)?;
            let image = decode_image(&req.image)?;
            let mask = decode_mask(&req.mask)?;
            let out = match &service.inpaint {
                Some(f) => f(&image, &mask, &req.prompt, req.seed),
                None => image,
            };
            serde_json::to_string(&InpaintResponse {
                image: encode_image(&out),
                model_info: "mock".into(),
            })
            .map_err(bad)
        }
        "/predict_noise" => {
            let req: NoiseRequest = serde_json::from_str(body).map_err(bad)?;
            let d = service
                .denoiser
                .as_ref()
                .ok_or_else(|| Error::Service("no denoiser configured".into()))?;
            let z = decode_latent(&req.latent, req.shape)?;
            let noise = d.predict_noise(&z, &req.prompt, req.timestep)?;
            serde_json::to_string(&NoiseResponse {
                noise: encode_latent(&noise),
            })
            .map_err(bad)
        }
        other => Err(Error::Service(format!("unknown route {other}"))),
    }
}
