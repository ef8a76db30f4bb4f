use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{project_var, unproject_var};
use crate::raster::resample::degrade_reupsample_map;
use crate::tensor::{AxisMap, Real, Tape, Tensor, Var};

/// Which quantity the measurement-consistency correction is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    /// The `ẑ0` prediction.
    Z0,
    /// The implied noise prediction.
    Eps,
    /// The state after the reverse step.
    #[default]
    State,
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z0" => Ok(GuidanceMode::Z0),
            "eps" => Ok(GuidanceMode::Eps),
            "state" => Ok(GuidanceMode::State),
            _ => Err(Error::config(format!("unknown guidance mode {s:?} (expected z0, eps or state)"))),
        }
    }
}

/// Spatial degradation followed by bicubic re-upsampling at latent
/// resolution, as separable maps.
#[derive(Clone, Debug)]
pub struct DegradeOp {
    pub ratio: usize,
    map_h: Rc<AxisMap>,
    map_w: Rc<AxisMap>,
}

impl DegradeOp {
    pub fn new(height: usize, width: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || height % ratio != 0 || width % ratio != 0 {
            return Err(Error::dim(format!("ratio {ratio} does not divide latent size {height}x{width}")));
        }
        Ok(DegradeOp {
            ratio,
            map_h: Rc::new(degrade_reupsample_map(height, ratio)?),
            map_w: Rc::new(degrade_reupsample_map(width, ratio)?),
        })
    }

    /// Applies the operator to a `[B, H, W]` variable.
    pub fn apply<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let y = tape.axis_map(x, 1, Rc::clone(&self.map_h))?;
        tape.axis_map(y, 2, Rc::clone(&self.map_w))
    }
}

/// `R = ‖zT − project(D(unproject(ẑ0)))‖₂` over all elements.
pub fn measurement_residual<T: Real>(
    tape: &Tape<T>,
    z0_hat: Var,
    z_t_end: Var,
    t: Var,
    t_star: Var,
    op: &DegradeOp,
) -> Result<Var> {
    let y = unproject_var(tape, z0_hat, t_star)?;
    let yd = op.apply(tape, y)?;
    let zp = project_var(tape, yd, t)?;
    let diff = tape.sub(z_t_end, zp)?;
    tape.norm2(diff)
}

/// Returns `target − η ∇_{z_t} R`, where `R` is the measurement residual of
/// `z0_hat` and the gradient is taken through whatever computation links
/// `z_t` to `z0_hat` on `tape`. With `η = 0` the target is returned as is.
#[allow(clippy::too_many_arguments)]
pub fn bps_guidance<T: Real>(
    tape: &Tape<T>,
    z_t: Var,
    z_t_end: Var,
    z0_hat: Var,
    t: Var,
    t_star: Var,
    op: &DegradeOp,
    eta: f64,
    target: &Tensor<T>,
) -> Result<Tensor<T>> {
    if eta == 0.0 {
        return Ok(target.clone());
    }
    for v in [z_t, z_t_end, z0_hat, t, t_star] {
        if !tape.owns(v) {
            return Err(Error::contract("guidance inputs are not recorded on the given tape"));
        }
    }
    if tape.shape(z_t) != target.shape() {
        return Err(Error::dim(format!("guidance target {:?} vs state {:?}", target.shape(), tape.shape(z_t))));
    }
    let r = measurement_residual(tape, z0_hat, z_t_end, t, t_star, op)?;
    let grads = tape.backward(r)?;
    let g = grads.get_or_zeros(z_t);
    target.zip_with(&g, |a, b| T::lit(a.as_f64() - eta * b.as_f64()))
}
