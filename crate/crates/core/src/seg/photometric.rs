//! L1 and windowed SSIM on RGB images, with gradients.

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut taps = [0.0; WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.map(|t| t / sum)
}

/// Separable "same" convolution with the normalized Gaussian window and
/// zero padding. The window is symmetric, so this is also its adjoint.
fn blur(src: &[f64], w: usize, h: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let sx = x as isize + k as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += t * src[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let sy = y as isize + k as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += t * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean absolute difference over all pixels and channels, and its gradient
/// with respect to `x`.
pub fn l1_loss(x: &[[f64; 3]], y: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
    let n = (x.len() * 3) as f64;
    let mut sum = 0.0;
    let mut grad = vec![[0.0; 3]; x.len()];
    for (i, (a, b)) in x.iter().zip(y).enumerate() {
        for c in 0..3 {
            let d = a[c] - b[c];
            sum += d.abs();
            grad[i][c] = if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
    }
    (sum / n, grad)
}

/// Mean SSIM over all pixels and channels, and its gradient with respect to `x`.
pub fn ssim(x: &[[f64; 3]], y: &[[f64; 3]], width: usize, height: usize) -> (f64, Vec<[f64; 3]>) {
    let taps = gaussian_taps();
    let n = width * height;
    let mut total = 0.0;
    let mut grad = vec![[0.0; 3]; n];
    for c in 0..3 {
        let xc: Vec<f64> = x.iter().map(|p| p[c]).collect();
        let yc: Vec<f64> = y.iter().map(|p| p[c]).collect();
        let xx: Vec<f64> = xc.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = yc.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xc.iter().zip(&yc).map(|(a, b)| a * b).collect();
        let mx = blur(&xc, width, height, &taps);
        let my = blur(&yc, width, height, &taps);
        let exx = blur(&xx, width, height, &taps);
        let eyy = blur(&yy, width, height, &taps);
        let exy = blur(&xy, width, height, &taps);

        let scale = 1.0 / (3 * n) as f64;
        let mut d_mx = vec![0.0; n];
        let mut d_exx = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        for p in 0..n {
            let sxx = exx[p] - mx[p] * mx[p];
            let syy = eyy[p] - my[p] * my[p];
            let sxy = exy[p] - mx[p] * my[p];
            let a1 = 2.0 * mx[p] * my[p] + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = mx[p] * mx[p] + my[p] * my[p] + C1;
            let b2 = sxx + syy + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            let ds_dsxx = -s / b2;
            let ds_dsxy = 2.0 * a1 / (b1 * b2);
            let ds_dmx_direct = 2.0 * my[p] * a2 / (b1 * b2) - s * 2.0 * mx[p] / b1;
            d_mx[p] = scale * (ds_dmx_direct - 2.0 * mx[p] * ds_dsxx - my[p] * ds_dsxy);
            d_exx[p] = scale * ds_dsxx;
            d_exy[p] = scale * ds_dsxy;
        }
        let g_mx = blur(&d_mx, width, height, &taps);
        let g_exx = blur(&d_exx, width, height, &taps);
        let g_exy = blur(&d_exy, width, height, &taps);
        for q in 0..n {
            grad[q][c] = g_mx[q] + 2.0 * xc[q] * g_exx[q] + yc[q] * g_exy[q];
        }
    }
    (total / (3 * n) as f64, grad)
}
