//! Training and guided sampling of the full fusion model.

mod sample;
pub mod synth;
mod train;

pub use sample::{sample, Denoiser, SampleConfig};
pub use train::{evaluate_loss_ref, train, Adam, LogRow, TrainConfig, Trainer};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bridge::BridgeSchedule;
use crate::error::{Error, Result};
use crate::moe::{init_mit, load_balance_loss, project_var, unproject_var, MappingTensor, MitConfig, RouterState};
use crate::net::{init_unet, UNetConfig, Variant};
use crate::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::raster::{upsample_bicubic, Raster};
use crate::tensor::{Prng, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub mit: MitConfig,
    pub unet: UNetConfig,
    pub schedule_steps: usize,
    pub lambda: f64,
    pub theta0: f64,
    pub ratio: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        let mit = MitConfig::default();
        let unet = UNetConfig::variant(variant, mit.latent);
        ModelConfig { variant, mit, unet, schedule_steps: 1000, lambda: 0.001, theta0: 1.0, ratio: 4 }
    }

    pub fn schedule(&self) -> Result<BridgeSchedule> {
        BridgeSchedule::new(self.schedule_steps, self.lambda, self.theta0)
    }
}

/// MiT and denoiser parameters in one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    pub trained_steps: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    trained_steps: u64,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut prng = Prng::new(seed);
        let mut params = init_mit(&cfg.mit, &mut prng)?;
        params.extend(init_unet(&cfg.unet, &mut prng)?)?;
        Ok(Model { cfg, params, trained_steps: 0 })
    }

    pub fn meta_json(&self) -> serde_json::Value {
        serde_json::to_value(CheckpointMeta { model: self.cfg.clone(), trained_steps: self.trained_steps })
            .expect("config serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.params, &self.meta_json())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        crate::params::encode_checkpoint(&self.params, &self.meta_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint(path)?;
        let meta: CheckpointMeta =
            serde_json::from_value(meta).map_err(|e| Error::format(0, format!("bad checkpoint config: {e}")))?;
        Ok(Model { cfg: meta.model, params, trained_steps: meta.trained_steps })
    }
}

/// Bicubic `x↑` as a `[B, H, W]` tensor.
pub fn upsampled_ms(ms: &Raster, ratio: usize) -> Result<Tensor<f32>> {
    Ok(upsample_bicubic(ms, ratio)?.to_tensor())
}

/// `mean|ẑ0 − project(y)| + mean|unproject(ẑ0) − y|` on a tape.
pub fn loss_ref_var<T: Real>(tape: &Tape<T>, z0_hat: Var, y: Var, t: Var, t_star: Var) -> Result<Var> {
    let zy = project_var(tape, y, t)?;
    if tape.shape(zy) != tape.shape(z0_hat) {
        return Err(Error::dim(format!("prediction {:?} vs target latent {:?}", tape.shape(z0_hat), tape.shape(zy))));
    }
    let a = tape.mean(tape.abs(tape.sub(z0_hat, zy)?)?)?;
    let yh = unproject_var(tape, z0_hat, t_star)?;
    let b = tape.mean(tape.abs(tape.sub(yh, y)?)?)?;
    tape.add(a, b)
}

pub fn loss_ref(z0_hat: &Tensor<f32>, y: &Tensor<f32>, mt: &MappingTensor) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let (z, yv) = (tape.constant(z0_hat.cast()), tape.constant(y.cast()));
    let (t, ts) = (tape.constant(mt.t.cast()), tape.constant(mt.t_star.cast()));
    Ok(tape.item(loss_ref_var(&tape, z, yv, t, ts)?))
}

/// `loss_ref + γ Σ P_k f_k`.
pub fn loss_total(z0_hat: &Tensor<f32>, y: &Tensor<f32>, mt: &MappingTensor, rs: &RouterState, gamma: f64) -> Result<f64> {
    if gamma < 0.0 {
        return Err(Error::config("gamma must be nonnegative"));
    }
    Ok(loss_ref(z0_hat, y, mt)? + gamma * load_balance_loss(rs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_ref_zero_at_projection() {
        let mut p = Prng::new(3);
        let mt = MappingTensor::from_rows(&p.gaussian_tensor(&[4, 16])).unwrap();
        let y = p.uniform_tensor::<f32>(&[4, 8, 8], 0.0, 1.0);
        let z = mt.project(&y).unwrap();
        assert!(loss_ref(&z, &y, &mt).unwrap() < 1e-6);
        let zero = Tensor::zeros(&[4, 8, 8]);
        let zl = Tensor::zeros(&[16, 8, 8]);
        assert_eq!(loss_ref(&zl, &zero, &mt).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_composition() {
        let mt = MappingTensor::from_rows(&Tensor::zeros(&[4, 16])).unwrap();
        let y = Tensor::<f32>::full(&[4, 8, 8], 0.3);
        let z = mt.project(&y).unwrap();
        let rs = RouterState { p: vec![1.0 / 16.0; 16], f: vec![1.0 / 16.0; 16] };
        assert!((loss_total(&z, &y, &mt, &rs, 0.001).unwrap() - 6.25e-5).abs() < 1e-9);
        assert_eq!(loss_total(&z, &y, &mt, &rs, 0.0).unwrap(), loss_ref(&z, &y, &mt).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip_model() {
        let m = Model::init(ModelConfig::new(Variant::Micro), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        assert_eq!(Model::load(&p).unwrap(), m);
    }
}
