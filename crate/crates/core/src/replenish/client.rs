//! JSON-over-HTTP protocol for the inpainting and noise-prediction service.
//!
//! `POST /inpaint` takes `{image, mask, prompt, seed}` where `image` is a
//! base64 RGB PNG and `mask` a base64 grayscale PNG (nonzero = repaint), and
//! returns `{image, model_info}` of the same size. `POST /predict_noise` takes
//! `{latent, shape, timestep, prompt}` with the latent as base64 little-endian
//! f32 in height-width-channel order, and returns `{noise}` in the same form.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Denoiser, Latent};
use crate::error::{Error, Result};
use crate::imaging::{decode_png, encode_png, ColorImage, Mask};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InpaintRequest {
    pub image: String,
    pub mask: String,
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub image: String,
    #[serde(default)]
    pub model_info: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseRequest {
    pub latent: String,
    pub shape: [usize; 3],
    pub timestep: usize,
    pub prompt: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseResponse {
    pub noise: String,
}

pub fn encode_image(image: &ColorImage) -> String {
    B64.encode(encode_png(&image::DynamicImage::ImageRgb8(image.to_rgb8())))
}

pub fn decode_image(data: &str) -> Result<ColorImage> {
    let bytes = B64
        .decode(data)
        .map_err(|e| Error::Protocol(format!("image is not base64: {e}")))?;
    let img = decode_png(&bytes).map_err(|e| Error::Protocol(format!("image is not a PNG: {e}")))?;
    Ok(ColorImage::from_rgb8(&img.to_rgb8()))
}

pub fn encode_mask(mask: &Mask) -> String {
    B64.encode(mask.to_png_bytes())
}

pub fn decode_mask(data: &str) -> Result<Mask> {
    let bytes = B64
        .decode(data)
        .map_err(|e| Error::Protocol(format!("mask is not base64: {e}")))?;
    let img = decode_png(&bytes)
        .map_err(|e| Error::Protocol(format!("mask is not a PNG: {e}")))?
        .to_luma8();
    Ok(Mask {
        width: img.width(),
        height: img.height(),
        data: img.pixels().map(|p| p.0[0] != 0).collect(),
    })
}

pub fn encode_latent(latent: &Latent) -> String {
    let bytes: Vec<u8> = latent.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_latent(data: &str, shape: [usize; 3]) -> Result<Latent> {
    let bytes = B64
        .decode(data)
        .map_err(|e| Error::Protocol(format!("latent is not base64: {e}")))?;
    let [h, w, c] = shape;
    if bytes.len() != 4 * h * w * c {
        return Err(Error::Protocol(format!(
            "latent has {} bytes, shape {shape:?} needs {}",
            bytes.len(),
            4 * h * w * c
        )));
    }
    Ok(Latent {
        width: w,
        height: h,
        channels: c,
        data: bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
    })
}

/// Fills the masked pixels of an image.
pub trait Inpainter: Sync {
    fn inpaint(&self, image: &ColorImage, mask: &Mask, prompt: &str, seed: u64) -> Result<ColorImage>;
}

/// Inpaints `image` under `mask`, keeping every unmasked pixel of the input.
/// An empty mask returns the input without calling the inpainter.
pub fn request_inpaint(
    inpainter: &dyn Inpainter,
    image: &ColorImage,
    mask: &Mask,
    prompt: &str,
    seed: u64,
) -> Result<ColorImage> {
    if (mask.width, mask.height) != (image.width, image.height) {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} for image {}x{}",
            mask.width, mask.height, image.width, image.height
        )));
    }
    if mask.is_empty() {
        return Ok(image.clone());
    }
    let filled = inpainter.inpaint(image, mask, prompt, seed)?;
    if (filled.width, filled.height) != (image.width, image.height) {
        return Err(Error::Protocol(format!(
            "returned image is {}x{}, sent {}x{}",
            filled.width, filled.height, image.width, image.height
        )));
    }
    let mut out = image.clone();
    for ((o, f), &m) in out.data.iter_mut().zip(&filled.data).zip(&mask.data) {
        if m {
            *o = *f;
        }
    }
    Ok(out)
}

/// Blocking client for a remote service.
pub struct InpaintClient {
    base_url: String,
    http: reqwest::blocking::Client,
    /// Retries after the first attempt on 5xx or transport errors.
    pub retries: usize,
    pub backoff: Duration,
}

impl InpaintClient {
    pub fn new(base_url: &str) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Service(format!("http client: {e}")))?;
        Ok(InpaintClient {
            base_url: base_url.trim_end_matches('/').to_string(),
            http,
            retries: 3,
            backoff: Duration::from_millis(200),
        })
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, route: &str, body: &Req) -> Result<Resp> {
        let url = format!("{}/{route}", self.base_url);
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * (1 << (attempt - 1)) as u32);
            }
            match self.http.post(&url).json(body).send() {
                Ok(resp) if resp.status().is_server_error() => {
                    last = format!("{url} returned {}", resp.status());
                    log::warn!("{last} (attempt {})", attempt + 1);
                }
                Ok(resp) if !resp.status().is_success() => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    return Err(Error::Service(format!("{url} returned {status}: {text}")));
                }
                Ok(resp) => {
                    let text = resp
                        .text()
                        .map_err(|e| Error::Protocol(format!("reading {url}: {e}")))?;
                    return serde_json::from_str(&text)
                        .map_err(|e| Error::Protocol(format!("malformed response from {url}: {e}")));
                }
                Err(e) => {
                    last = format!("{url}: {e}");
                    log::warn!("{last} (attempt {})", attempt + 1);
                }
            }
        }
        Err(Error::Service(format!("giving up after {} attempts: {last}", self.retries + 1)))
    }
}

impl Inpainter for InpaintClient {
    fn inpaint(&self, image: &ColorImage, mask: &Mask, prompt: &str, seed: u64) -> Result<ColorImage> {
        let req = InpaintRequest {
            image: encode_image(image),
            mask: encode_mask(mask),
            prompt: prompt.to_string(),
            seed,
        };
        let resp: InpaintResponse = self.post("inpaint", &req)?;
        decode_image(&resp.image)
    }
}

impl Denoiser for InpaintClient {
    fn predict_noise(&self, z_t: &Latent, prompt: &str, t: usize) -> Result<Latent> {
        let req = NoiseRequest {
            latent: encode_latent(z_t),
            shape: z_t.shape(),
            timestep: t,
            prompt: prompt.to_string(),
        };
        let resp: NoiseResponse = self.post("predict_noise", &req)?;
        decode_latent(&resp.noise, z_t.shape())
    }
}
