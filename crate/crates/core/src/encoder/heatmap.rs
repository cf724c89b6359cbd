//! Keypoint heatmap surrogate and the keypoint feature fusion network.

use rand::Rng;

use super::Hourglass;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::nn::{Conv2d, ConvBlock};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Gaussian width of the heatmap targets, in pixels of a 64×64 map.
pub const HEATMAP_SIGMA_AT_64: f64 = 2.0;

/// Per-keypoint maps `[K, R, R]` with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapSet {
    pub maps: Tensor,
}

impl HeatmapSet {
    pub fn k(&self) -> usize {
        self.maps.shape()[0]
    }
}

/// Normalized-coordinate planes `[2, R, R]` (x then y) at texel centers.
fn coord_planes(res: usize) -> Tensor {
    let mut d = vec![0.0; 2 * res * res];
    for y in 0..res {
        for x in 0..res {
            d[y * res + x] = (2 * x + 1) as f64 / res as f64 - 1.0;
            d[res * res + y * res + x] = (2 * y + 1) as f64 / res as f64 - 1.0;
        }
    }
    Tensor::new(vec![2, res, res], d).expect("sized")
}

/// Small U-shaped conv net: three conv blocks at full, half and quarter
/// resolution, nearest upsampling with skips, and a 1×1 head.
#[derive(Clone, Debug)]
pub struct HeatmapNet {
    b1: ConvBlock,
    b2: ConvBlock,
    b3: ConvBlock,
    head: Conv2d,
    k: usize,
    res: usize,
}

impl HeatmapNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.heatmap_channels;
        let g = cfg.norm_groups;
        HeatmapNet {
            // image, mask and two coordinate planes
            b1: ConvBlock::new(store, "heatmap.b1", cfg.in_channels + 3, c, g, rng),
            b2: ConvBlock::new(store, "heatmap.b2", c, c, g, rng),
            b3: ConvBlock::new(store, "heatmap.b3", c, c, g, rng),
            head: Conv2d::new(store, "heatmap.head", c, cfg.num_keypoints, 1, rng),
            k: cfg.num_keypoints,
            res: cfg.feature_res,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Logits `[K, R, R]` from input planes `[C_in + 1, R, R]`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, planes: Var) -> Result<Var> {
        let coords = tape.constant(coord_planes(self.res));
        let x = tape.concat0(&[planes, coords])?;
        let h1 = self.b1.forward(tape, store, x)?;
        let p = tape.max_pool2(h1)?;
        let h2 = self.b2.forward(tape, store, p)?;
        let p = tape.max_pool2(h2)?;
        let h3 = self.b3.forward(tape, store, p)?;
        let u = tape.upsample2(h3)?;
        let u = tape.add(u, h2)?;
        let u = tape.upsample2(u)?;
        let u = tape.add(u, h1)?;
        self.head.forward(tape, store, u)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, planes: Var) -> Result<Var> {
        let z = self.logits(tape, store, planes)?;
        Ok(tape.sigmoid(z))
    }

    /// Heatmaps of one view without recording gradients.
    pub fn predict(&self, store: &ParamStore, planes: &Tensor) -> Result<HeatmapSet> {
        let mut tape = Tape::new();
        let p = tape.constant(planes.clone());
        let h = self.forward(&mut tape, store, p)?;
        Ok(HeatmapSet {
            maps: tape.value(h).clone(),
        })
    }
}

/// Gaussian targets `[K, R, R]` for keypoints at `pixels` (image pixel
/// units of an image `image_size` wide). `None` marks a keypoint with no
/// target (behind the camera); off-image centers produce their clipped tail.
pub fn heatmap_targets(pixels: &[Option<[f64; 2]>], image_size: usize, res: usize) -> Vec<f64> {
    let scale = res as f64 / image_size as f64;
    let sigma = HEATMAP_SIGMA_AT_64 * res as f64 / 64.0;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = vec![0.0; pixels.len() * res * res];
    for (k, p) in pixels.iter().enumerate() {
        let Some(p) = p else { continue };
        let (cx, cy) = (p[0] * scale, p[1] * scale);
        for y in 0..res {
            for x in 0..res {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                out[(k * res + y) * res + x] = (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    out
}

/// Peak location of every map, in image pixel units (texel centers).
pub fn heatmap_argmax(set: &HeatmapSet, image_size: usize) -> Vec<[f64; 2]> {
    let s = set.maps.shape();
    let (k, h, w) = (s[0], s[1], s[2]);
    let scale = image_size as f64 / w as f64;
    let d = set.maps.data();
    (0..k)
        .map(|j| {
            let m = &d[j * h * w..(j + 1) * h * w];
            let mut best = 0;
            for i in 1..m.len() {
                if m[i] > m[best] {
                    best = i;
                }
            }
            [((best % w) as f64 + 0.5) * scale, ((best / w) as f64 + 0.5) * scale]
        })
        .collect()
}

/// The keypoint fusion network f_s: input planes, heatmaps and the first
/// f_v stack through a single hourglass.
#[derive(Clone, Debug)]
pub struct FusionNet {
    stem: ConvBlock,
    hourglass: Hourglass,
    k: usize,
}

impl FusionNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let heat = if cfg.heatmap_prior { cfg.num_keypoints } else { 0 };
        let cin = cfg.in_channels + 1 + heat + cfg.feature_channels;
        FusionNet {
            stem: ConvBlock::new(store, "f_s.stem", cin, cfg.keypoint_channels, cfg.norm_groups, rng),
            hourglass: Hourglass::new(store, "f_s.stack", cfg.keypoint_channels, cfg.norm_groups, rng),
            k: heat,
        }
    }

    /// Keypoint feature map `[C_k, R, R]`. `heatmaps` is `None` exactly when
    /// the model runs without the heatmap prior.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, planes: Var, heatmaps: Option<Var>, fv_first: Var) -> Result<Var> {
        let k = heatmaps.map_or(0, |h| tape.value(h).shape()[0]);
        if k != self.k {
            return Err(Error::shape("f_k", format!("{k} heatmaps for {} expected", self.k)));
        }
        let x = match heatmaps {
            Some(h) => tape.concat0(&[planes, h, fv_first])?,
            None => tape.concat0(&[planes, fv_first])?,
        };
        let x = self.stem.forward(tape, store, x)?;
        self.hourglass.forward(tape, store, x)
    }
}
