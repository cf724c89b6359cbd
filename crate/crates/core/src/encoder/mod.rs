//! Image encoders: the stacked-hourglass vertex feature network, the keypoint
//! heatmap surrogate, keypoint feature fusion and the SDF pretraining head.

mod heatmap;
mod sdf;

pub use heatmap::{heatmap_argmax, heatmap_targets, FusionNet, HeatmapNet, HeatmapSet, HEATMAP_SIGMA_AT_64};
pub use sdf::{sdf_losses, NetworkSdf, SdfHead, SignedDistance, EIKONAL_WEIGHT};

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{projection_jacobian, CameraView, Projection, Vec3};
use crate::tensor::nn::{Conv2d, ConvBlock};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Box-downsample `[C, H, W]` by an integer factor.
fn box_downsample(t: &Tensor, factor: usize) -> Tensor {
    if factor == 1 {
        return t.clone();
    }
    let s = t.shape();
    let (c, h, w) = (s[0], s[1] / factor, s[2] / factor);
    let src = t.data();
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = (ch * s[1] + y * factor + dy) * s[2] + x * factor;
                    acc += src[row..row + factor].iter().sum::<f64>();
                }
                out[(ch * h + y) * w + x] = acc * norm;
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("sized")
}

/// Image and mask stacked as `[C_in + 1, res, res]`, box-filtered down to `res`.
pub fn input_planes(image: &Tensor, mask: &Tensor, res: usize) -> Result<Tensor> {
    let (is, ms) = (image.shape(), mask.shape());
    if is.len() != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
        return Err(Error::shape("f_v", format!("image {is:?} and mask {ms:?} are not aligned")));
    }
    let (h, w) = (is[1], is[2]);
    if h != w || h % res != 0 {
        return Err(Error::shape(
            "f_v",
            format!("{h}x{w} input cannot be pooled to {res}x{res} feature maps"),
        ));
    }
    let mut data = image.data().to_vec();
    data.extend_from_slice(mask.data());
    let stacked = Tensor::new(vec![is[0] + 1, h, w], data)?;
    Ok(box_downsample(&stacked, h / res))
}

/// One hourglass of depth 2: two pooled levels, a bottleneck, and nearest
/// upsampling with skip additions back to full resolution.
#[derive(Clone, Debug)]
pub struct Hourglass {
    down1: ConvBlock,
    down2: ConvBlock,
    bottleneck: ConvBlock,
    up1: ConvBlock,
    up0: ConvBlock,
    head: Conv2d,
}

impl Hourglass {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, groups: usize, rng: &mut R) -> Self {
        let block = |store: &mut ParamStore, part: &str, rng: &mut R| {
            ConvBlock::new(store, &format!("{name}.{part}"), channels, channels, groups, rng)
        };
        Hourglass {
            down1: block(store, "down1", rng),
            down2: block(store, "down2", rng),
            bottleneck: block(store, "bottleneck", rng),
            up1: block(store, "up1", rng),
            up0: block(store, "up0", rng),
            head: Conv2d::new(store, &format!("{name}.head"), channels, channels, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let p1 = tape.max_pool2(x)?;
        let d1 = self.down1.forward(tape, store, p1)?;
        let p2 = tape.max_pool2(d1)?;
        let d2 = self.down2.forward(tape, store, p2)?;
        let b = self.bottleneck.forward(tape, store, d2)?;
        let u = tape.upsample2(b)?;
        let u = tape.add(u, d1)?;
        let u1 = self.up1.forward(tape, store, u)?;
        let u = tape.upsample2(u1)?;
        let u = tape.add(u, x)?;
        let u0 = self.up0.forward(tape, store, u)?;
        self.head.forward(tape, store, u0)
    }
}

/// Per-stack feature maps `[C, R, R]` of one view.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    pub per_stack: Vec<Var>,
}

/// The vertex feature network f_v.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    stem: ConvBlock,
    stacks: Vec<Hourglass>,
    res: usize,
}

impl FeatureNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.feature_channels;
        FeatureNet {
            stem: ConvBlock::new(store, "f_v.stem", cfg.in_channels + 1, c, cfg.norm_groups, rng),
            stacks: (0..cfg.stacks)
                .map(|s| Hourglass::new(store, &format!("f_v.stack{s}"), c, cfg.norm_groups, rng))
                .collect(),
            res: cfg.feature_res,
        }
    }

    pub fn res(&self) -> usize {
        self.res
    }

    /// Feature maps from precomputed [`input_planes`].
    pub fn forward_planes(&self, tape: &mut Tape, store: &ParamStore, planes: Var) -> Result<FeatureMaps> {
        let s = tape.value(planes).shape().to_vec();
        if s.len() != 3 || s[1] % 4 != 0 || s[2] % 4 != 0 {
            return Err(Error::shape("f_v", format!("input {s:?} is not divisible by 4")));
        }
        let mut x = self.stem.forward(tape, store, planes)?;
        let mut per_stack = Vec::with_capacity(self.stacks.len());
        for hg in &self.stacks {
            let out = hg.forward(tape, store, x)?;
            per_stack.push(out);
            x = tape.add(x, out)?;
        }
        Ok(FeatureMaps { per_stack })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, mask: &Tensor) -> Result<FeatureMaps> {
        if self.res % 4 != 0 {
            return Err(Error::shape("f_v", format!("feature resolution {} is not divisible by 4", self.res)));
        }
        let planes = tape.constant(input_planes(image, mask, self.res)?);
        self.forward_planes(tape, store, planes)
    }
}

/// Normalized lookup coordinates and behind-camera flags for `pts`.
pub fn project_points(pts: &[Vec3], view: &CameraView) -> (Vec<f64>, Vec<bool>) {
    let mut coords = Vec::with_capacity(2 * pts.len());
    let mut behind = Vec::with_capacity(pts.len());
    for p in pts {
        let Projection { norm, behind: b, .. } = crate::geometry::project(*p, view);
        coords.extend_from_slice(&if b { [0.0, 0.0] } else { norm });
        behind.push(b);
    }
    (coords, behind)
}

fn zero_rows(tape: &mut Tape, x: Var, behind: &[bool]) -> Result<Var> {
    if !behind.iter().any(|b| *b) {
        return Ok(x);
    }
    let width = tape.value(x).shape()[1];
    let mask = behind
        .iter()
        .flat_map(|b| std::iter::repeat_n(if *b { 0.0 } else { 1.0 }, width))
        .collect();
    tape.mul_const(x, mask)
}

/// Bilinear lookup in each map, concatenated to `[P, Σ C]`; rows of
/// behind-camera points are exactly zero.
pub fn sample_maps(tape: &mut Tape, maps: &[Var], coords: &[f64], behind: &[bool]) -> Result<Var> {
    let pts = tape.constant(Tensor::new(vec![behind.len(), 2], coords.to_vec())?);
    let parts = maps
        .iter()
        .map(|m| tape.bilinear(*m, pts))
        .collect::<Result<Vec<_>>>()?;
    let cat = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts)? };
    zero_rows(tape, cat, behind)
}

/// Stacked descriptor `[P, C·stacks]` at normalized coordinates.
pub fn sample_descriptor(tape: &mut Tape, maps: &FeatureMaps, coords: &[f64], behind: &[bool]) -> Result<Var> {
    sample_maps(tape, &maps.per_stack, coords, behind)
}

/// Derivatives of [`sample_maps`] along each scene axis: three `[P, Σ C]`
/// tangents, `∂desc/∂x_a` through the projection of `pts` into `view`.
pub fn sample_maps_tangents(tape: &mut Tape, maps: &[Var], pts: &[Vec3], view: &CameraView) -> Result<[Var; 3]> {
    let (coords, behind) = project_points(pts, view);
    let jac: Vec<[[f64; 3]; 2]> = pts.iter().map(|p| projection_jacobian(*p, view)).collect();
    let mut out = Vec::with_capacity(3);
    for a in 0..3 {
        let dpts: Vec<f64> = jac
            .iter()
            .zip(&behind)
            .flat_map(|(j, b)| if *b { [0.0, 0.0] } else { [j[0][a], j[1][a]] })
            .collect();
        let parts = maps
            .iter()
            .map(|m| tape.bilinear_tangent(*m, &coords, &dpts))
            .collect::<Result<Vec<_>>>()?;
        let cat = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts)? };
        out.push(zero_rows(tape, cat, &behind)?);
    }
    Ok([out[0], out[1], out[2]])
}
