//! SDF pretraining of the vertex feature network.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_batch, batch_seed, epoch_order, training_sample, TrainConfig};
use crate::config::ModelConfig;
use crate::encoder::{sdf_losses, FeatureNet, NetworkSdf, SdfHead, EIKONAL_WEIGHT};
use crate::error::{Error, Result};
use crate::geometry::{Scene, Vec3};
use crate::parallel::{derive_seed, map_indexed};
use crate::synthdata::single_view_scene;
use crate::tensor::{read_tensor_file, write_tensor_file, ParamStore, Tape, TensorFile};

pub const ENCODER_FORMAT: &str = "glvd-encoder-v1";

/// f_v with its signed-distance head.
#[derive(Clone, Debug)]
pub struct SdfEncoder {
    pub cfg: ModelConfig,
    pub net: FeatureNet,
    pub head: SdfHead,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    format: String,
    model: ModelConfig,
}

impl SdfEncoder {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = FeatureNet::new(&mut store, cfg, &mut rng);
        let head = SdfHead::new(&mut store, cfg, &mut rng);
        Ok(SdfEncoder {
            cfg: cfg.clone(),
            net,
            head,
            store,
        })
    }

    /// `(L_Surf, L_Eik)` of the single view of `scene`.
    pub fn losses(&self, scene: &Scene, surface: &[Vec3], volume: &[Vec3]) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let view = &scene.views[0];
        let maps = self.net.forward(&mut tape, &self.store, &view.image, &view.mask)?;
        let sdf = NetworkSdf {
            head: &self.head,
            store: &self.store,
            maps: &maps,
            view,
        };
        let (ls, le) = sdf_losses(&mut tape, &sdf, surface, volume)?;
        Ok((tape.value(ls).item(), tape.value(le).item()))
    }

    pub fn save(&self, path: &Path, fingerprint: &str) -> Result<()> {
        let mut file = TensorFile::new(fingerprint);
        file.meta = serde_json::to_value(EncoderMeta {
            format: ENCODER_FORMAT.into(),
            model: self.cfg.clone(),
        })?;
        file.tensors = self.store.named_tensors();
        write_tensor_file(path, &file)
    }

    pub fn load(path: &Path, fingerprint: Option<&str>) -> Result<Self> {
        let file = read_tensor_file(path, fingerprint)?;
        let meta: EncoderMeta = serde_json::from_value(file.meta.clone()).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            detail: format!("encoder header: {e}"),
        })?;
        if meta.format != ENCODER_FORMAT {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                detail: format!("format `{}` is not {ENCODER_FORMAT}", meta.format),
            });
        }
        let mut enc = SdfEncoder::new(&meta.model, 0)?;
        enc.store.load_named(&file.tensors)?;
        Ok(enc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdfReport {
    /// Mean training loss `L_Surf + w·L_Eik` per epoch.
    pub train_loss: Vec<f64>,
    /// Validation `L_Surf` after each epoch.
    pub val_surface: Vec<f64>,
    /// Validation `L_Eik` of the untrained network.
    pub init_eikonal: f64,
}

fn sdf_samples(scene: &Scene, n_surface: usize, n_volume: usize, seed: u64) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surface = scene.gt_mesh.sample_surface(n_surface, &mut rng);
    let volume = (0..n_volume)
        .map(|_| {
            [
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
            ]
        })
        .collect();
    (surface, volume)
}

/// Mean validation `(L_Surf, L_Eik)` on the front view of every scene with
/// fixed samples.
pub fn sdf_validation(enc: &SdfEncoder, scenes: &[Scene], cfg: &TrainConfig, workers: usize) -> Result<(f64, f64)> {
    if scenes.is_empty() {
        return Err(Error::Invalid("no validation scenes".into()));
    }
    let per = map_indexed(scenes.len(), workers, |i| -> Result<(f64, f64)> {
        let s = single_view_scene(&scenes[i], 0)?;
        let (surf, vol) = sdf_samples(&s, cfg.sdf_surface_samples, cfg.sdf_volume_samples, derive_seed(0x5df, &[i as u64]));
        enc.losses(&s, &surf, &vol)
    });
    let (mut a, mut b) = (0.0, 0.0);
    for r in per {
        let (x, y) = r?;
        a += x;
        b += y;
    }
    let n = scenes.len() as f64;
    Ok((a / n, b / n))
}

/// Train f_v and the SDF head under `L_Surf + w·L_Eik`.
pub fn pretrain_sdf(
    train: &[Scene],
    val: &[Scene],
    model: &ModelConfig,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<(SdfEncoder, SdfReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no training scenes".into()));
    }
    let mut enc = SdfEncoder::new(model, derive_seed(cfg.seed, &[0x5df]))?;
    let init_eikonal = sdf_validation(&enc, val, cfg, workers)?.1;
    let seed = derive_seed(cfg.seed, &[0x5df, 1]);
    let mut train_loss = Vec::with_capacity(cfg.sdf_epochs);
    let mut val_surface = Vec::with_capacity(cfg.sdf_epochs);
    for epoch in 0..cfg.sdf_epochs {
        let order = epoch_order(train.len(), seed, epoch);
        let mut sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_scenes).enumerate() {
            let bseed = batch_seed(seed, epoch, b);
            let enc_ref = &enc;
            let results = map_indexed(batch.len(), workers, |slot| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
                let sseed = derive_seed(bseed, &[slot as u64]);
                let sample = training_sample(&train[batch[slot]], cfg, sseed)?;
                let (surf, vol) = sdf_samples(&sample, cfg.sdf_surface_samples, cfg.sdf_volume_samples, derive_seed(sseed, &[2]));
                let mut tape = Tape::new();
                let view = &sample.views[0];
                let maps = enc_ref.net.forward(&mut tape, &enc_ref.store, &view.image, &view.mask)?;
                let sdf = NetworkSdf {
                    head: &enc_ref.head,
                    store: &enc_ref.store,
                    maps: &maps,
                    view,
                };
                let (ls, le) = sdf_losses(&mut tape, &sdf, &surf, &vol)?;
                let le = tape.scale(le, EIKONAL_WEIGHT);
                let loss = tape.add(ls, le)?;
                let grads = tape.backward(loss)?;
                Ok((tape.value(loss).item(), enc_ref.store.collect_grads(&tape, &grads)))
            });
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (l, g) = r?;
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { seed: bseed });
                }
                sum += l;
                grads.push(g);
            }
            apply_batch(&mut enc.store, grads, cfg.lr, bseed)?;
        }
        train_loss.push(sum / train.len() as f64);
        val_surface.push(sdf_validation(&enc, val, cfg, workers)?.0);
    }
    Ok((
        enc,
        SdfReport {
            train_loss,
            val_surface,
            init_eikonal,
        },
    ))
}
