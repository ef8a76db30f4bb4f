use serde::{Deserialize, Serialize};

use super::{upsampled_ms, Model};
use crate::bridge::{bps_guidance, eps_from_z0, nfe_grid, reverse_step_eps, reverse_step_z0, DegradeOp, GuidanceMode};
use crate::error::{Error, Result};
use crate::moe::{mit_forward, MappingTensor};
use crate::net::unet_forward;
use crate::raster::Raster;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub nfe: usize,
    pub eta: f64,
    pub mode: GuidanceMode,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { nfe: 3, eta: 0.0, mode: GuidanceMode::State }
    }
}

/// Source of `ẑ0` predictions.
#[derive(Clone, Copy, Debug)]
pub enum Denoiser<'a> {
    /// The trained UNet.
    Model,
    /// `project(reference)` at every step, whatever the state.
    Oracle(&'a Raster),
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub fused: Raster,
    pub mapping: MappingTensor,
}

/// Fuses `ms` and `pan` by reverse-bridge sampling from `project(x↑)`.
pub fn sample(model: &Model, ms: &Raster, pan: &Raster, denoiser: Denoiser, scfg: &SampleConfig) -> Result<SampleOutput> {
    let ratio = model.cfg.ratio;
    if pan.bands() != 1 {
        return Err(Error::dim(format!("pan must have one band, has {}", pan.bands())));
    }
    if pan.width() != ms.width() * ratio || pan.height() != ms.height() * ratio {
        return Err(Error::contract(format!(
            "pan {}x{} is not {ratio}x ms {}x{}",
            pan.width(),
            pan.height(),
            ms.width(),
            ms.height()
        )));
    }
    if !(scfg.eta >= 0.0) || !scfg.eta.is_finite() {
        return Err(Error::config(format!("eta must be a finite nonnegative number, got {}", scfg.eta)));
    }
    if let Denoiser::Model = denoiser {
        if model.trained_steps == 0 {
            log::warn!("sampling with an untrained model; output is not meaningful");
        }
    }
    let (h, w) = (pan.height(), pan.width());
    let sched = model.cfg.schedule()?;
    let grid = nfe_grid(sched.steps(), scfg.nfe)?;
    let x_up = upsampled_ms(ms, ratio)?;
    let pan_t = pan.to_tensor().reshape(&[1, 1, h, w])?;

    let mapping = {
        let tape = Tape::<f32>::new();
        let p = model.params.bind_const(&tape);
        let out = mit_forward(&tape, &p, &model.cfg.mit, tape.constant(x_up.clone()))?;
        MappingTensor::from_output(&tape, &out)
    };
    let z_end = mapping.project(&x_up)?;
    let oracle = match denoiser {
        Denoiser::Oracle(r) => {
            if r.bands() != ms.bands() || r.width() != w || r.height() != h {
                return Err(Error::dim("oracle reference must match the fused output shape"));
            }
            Some(mapping.project(&r.to_tensor())?)
        }
        Denoiser::Model => None,
    };
    let c = mapping.latent();
    let op = if scfg.eta != 0.0 { Some(DegradeOp::new(h, w, ratio)?) } else { None };

    let mut z = z_end.clone();
    for pair in grid.windows(2) {
        let (t, s) = (pair[0], pair[1]);
        let tape = Tape::<f32>::new();
        let guided = op.is_some() && oracle.is_none();
        let zv = if guided { tape.leaf(z.clone()) } else { tape.constant(z.clone()) };
        let zev = tape.constant(z_end.clone());
        let z0v = match &oracle {
            Some(z0) => tape.constant(z0.clone()),
            None => {
                let p = model.params.bind_const(&tape);
                let shape4 = [1, c, h, w];
                let pred = unet_forward(
                    &tape,
                    &p,
                    &model.cfg.unet,
                    tape.reshape(zv, &shape4)?,
                    tape.reshape(zev, &shape4)?,
                    tape.constant(pan_t.clone()),
                    &[t],
                )?;
                tape.reshape(pred, &[c, h, w])?
            }
        };
        let z0_hat = tape.value(z0v);
        let Some(op) = op.as_ref().filter(|_| guided) else {
            z = reverse_step_z0(&z, &z_end, &z0_hat, t, s, &sched)?;
            continue;
        };
        let tv = tape.constant(mapping.t.clone());
        let tsv = tape.constant(mapping.t_star.clone());
        let guide = |target: &Tensor<f32>| bps_guidance(&tape, zv, zev, z0v, tv, tsv, op, scfg.eta, target);
        let eps_ok = sched.sigma(t) != 0.0 && sched.big_theta(t) != 0.0;
        z = match scfg.mode {
            GuidanceMode::Z0 => reverse_step_z0(&z, &z_end, &guide(&z0_hat)?, t, s, &sched)?,
            GuidanceMode::Eps if eps_ok => {
                let eps = eps_from_z0(&z, &z_end, &z0_hat, t, &sched)?;
                reverse_step_eps(&z, &z_end, &guide(&eps)?, t, s, &sched)?
            }
            GuidanceMode::Eps => reverse_step_z0(&z, &z_end, &guide(&z0_hat)?, t, s, &sched)?,
            GuidanceMode::State => guide(&reverse_step_z0(&z, &z_end, &z0_hat, t, s, &sched)?)?,
        };
        if z.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { msg: format!("non-finite latent after step {t} -> {s}"), condition: f64::NAN });
        }
    }
    let y = mapping.unproject(&z)?;
    let fused = Raster::from_tensor(&y)?
        .with_names(ms.names().to_vec())?
        .with_scale(ms.scale())
        .clamp01();
    Ok(SampleOutput { fused, mapping })
}
