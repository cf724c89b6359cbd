//! Photometric and geometric view augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::SILHOUETTE;
use crate::geometry::CameraView;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    /// Per-channel gain for the non-mask channels.
    pub gain: Vec<f64>,
    /// Per-channel bias for the non-mask channels.
    pub bias: Vec<f64>,
    /// Gaussian blur std in pixels (0 disables).
    pub blur_sigma: f64,
    /// Crop side as a fraction of the image (1 disables).
    pub zoom_scale: f64,
    /// Crop origin in pixels.
    pub zoom_offset: [f64; 2],
}

impl AugmentParams {
    pub fn identity(channels: usize) -> Self {
        AugmentParams {
            gain: vec![1.0; channels],
            bias: vec![0.0; channels],
            blur_sigma: 0.0,
            zoom_scale: 1.0,
            zoom_offset: [0.0, 0.0],
        }
    }

    /// gain ∈ [0.8, 1.2], bias ∈ [−0.1, 0.1], σ ∈ [0, 1] px, crop scale ∈ [0.9, 1].
    pub fn sample(channels: usize, width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (0..channels).map(|_| rng.random_range(0.8..=1.2)).collect();
        let bias = (0..channels).map(|_| rng.random_range(-0.1..=0.1)).collect();
        let blur_sigma = rng.random_range(0.0..=1.0);
        let zoom_scale: f64 = rng.random_range(0.9..=1.0);
        let zoom_offset = [
            rng.random_range(0.0..=(1.0 - zoom_scale) * width as f64),
            rng.random_range(0.0..=(1.0 - zoom_scale) * height as f64),
        ];
        AugmentParams {
            gain,
            bias,
            blur_sigma,
            zoom_scale,
            zoom_offset,
        }
    }
}

/// Augment with parameters drawn from `seed`.
pub fn augment(view: &CameraView, seed: u64) -> CameraView {
    let p = AugmentParams::sample(view.image.shape()[0], view.width(), view.height(), seed);
    augment_with(view, &p)
}

fn bilinear_at(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    // (x, y) in texel-index units; clamped to the border
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let a = plane[y0 * w + x0];
    let b = plane[y0 * w + x1];
    let c = plane[y1 * w + x0];
    let d = plane[y1 * w + x1];
    (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|x| x / s).collect()
}

fn blur_plane(plane: &mut [f64], w: usize, h: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let sx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                s += kv * plane[y * w + sx];
            }
            tmp[y * w + x] = s;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let sy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                s += kv * tmp[sy * w + x];
            }
            plane[y * w + x] = s;
        }
    }
}

/// Crop-zoom (geometric, with intrinsics adjusted), then blur and per-channel
/// affine on the photometric channels. The mask and the silhouette channel are
/// only resampled, with nearest neighbour so they stay binary.
pub fn augment_with(view: &CameraView, p: &AugmentParams) -> CameraView {
    let c = view.image.shape()[0];
    let (w, h) = (view.width(), view.height());
    let hw = w * h;
    let (s, o) = (p.zoom_scale, p.zoom_offset);
    let src = view.image.data();
    let msrc = view.mask.data();
    let mut img = vec![0.0; c * hw];
    let mut mask = vec![0.0; hw];
    for y in 0..h {
        for x in 0..w {
            // destination pixel center ↦ source continuous pixel coordinate
            let sx = o[0] + s * (x as f64 + 0.5);
            let sy = o[1] + s * (y as f64 + 0.5);
            let nx = (sx.floor() as usize).min(w - 1);
            let ny = (sy.floor() as usize).min(h - 1);
            mask[y * w + x] = msrc[ny * w + nx];
            for ch in 0..c {
                let plane = &src[ch * hw..(ch + 1) * hw];
                img[ch * hw + y * w + x] = if ch == SILHOUETTE {
                    plane[ny * w + nx]
                } else {
                    bilinear_at(plane, w, h, sx - 0.5, sy - 0.5)
                };
            }
        }
    }
    if p.blur_sigma > 0.0 {
        let k = gaussian_kernel(p.blur_sigma);
        for ch in (0..c).filter(|ch| *ch != SILHOUETTE) {
            blur_plane(&mut img[ch * hw..(ch + 1) * hw], w, h, &k);
        }
    }
    for ch in (0..c).filter(|ch| *ch != SILHOUETTE) {
        let (g, b) = (p.gain[ch], p.bias[ch]);
        if g != 1.0 || b != 0.0 {
            for v in &mut img[ch * hw..(ch + 1) * hw] {
                *v = g * *v + b;
            }
        }
    }
    let mut out = view.clone();
    out.image = Tensor::new(vec![c, h, w], img).expect("sized");
    out.mask = Tensor::new(vec![1, h, w], mask).expect("sized");
    out.intrinsics.fx /= s;
    out.intrinsics.fy /= s;
    out.intrinsics.cx = (view.intrinsics.cx - o[0]) / s;
    out.intrinsics.cy = (view.intrinsics.cy - o[1]) / s;
    out
}
