//! Latent diffusion bridge between a high-quality latent `z0` and a
//! low-quality latent `zT`: schedule tables, closed-form marginals,
//! deterministic reverse steps and posterior-sampling guidance.

mod guidance;

pub use guidance::{bps_guidance, measurement_residual, DegradeOp, GuidanceMode};

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Prng, Real, Tensor};

/// Tabulated bridge coefficients for a constant-θ schedule over normalised
/// time `[0, 1]` split into `steps` intervals.
#[derive(Clone, Debug)]
pub struct BridgeSchedule {
    steps: usize,
    lambda: f64,
    theta0: f64,
    theta_bar: Vec<f64>,
    big_theta: Vec<f64>,
    sigma: Vec<f64>,
}

impl BridgeSchedule {
    pub fn new(steps: usize, lambda: f64, theta0: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::config(format!("lambda must be positive, got {lambda}")));
        }
        if !(theta0 > 0.0) || !theta0.is_finite() {
            return Err(Error::config(format!("theta0 must be positive, got {theta0}")));
        }
        let tn = steps as f64;
        let total = theta0.sinh();
        let mut theta_bar = Vec::with_capacity(steps + 1);
        let mut big_theta = Vec::with_capacity(steps + 1);
        let mut sigma = Vec::with_capacity(steps + 1);
        for t in 0..=steps {
            let head = theta0 * (t as f64 / tn);
            let tail = theta0 * ((steps - t) as f64 / tn);
            theta_bar.push(head);
            big_theta.push(tail.sinh() / total);
            sigma.push((2.0 * lambda * head.sinh() * tail.sinh() / total).sqrt());
        }
        Ok(BridgeSchedule { steps, lambda, theta0, theta_bar, big_theta, sigma })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn theta0(&self) -> f64 {
        self.theta0
    }
    /// `θ_t`, constant by construction.
    pub fn theta(&self, _t: usize) -> f64 {
        self.theta0
    }
    /// `θ̄_{0:t}`.
    pub fn theta_bar(&self, t: usize) -> f64 {
        self.theta_bar[t]
    }
    /// Mean interpolation weight `Θ_t`.
    pub fn big_theta(&self, t: usize) -> f64 {
        self.big_theta[t]
    }
    /// Marginal standard deviation `Σ_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(Error::contract(format!("time index {t} outside 0..={}", self.steps)))
        } else {
            Ok(())
        }
    }

    /// CSV with columns `t,theta,theta_bar,Theta,Sigma`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,theta,theta_bar,Theta,Sigma\n");
        for t in 0..=self.steps {
            let _ = writeln!(
                s,
                "{t},{:e},{:e},{:e},{:e}",
                self.theta(t),
                self.theta_bar[t],
                self.big_theta[t],
                self.sigma[t]
            );
        }
        s
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("{what}: shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `z_t = zT + (z0 - zT) Θ_t + Σ_t ε` for a given noise draw.
pub fn forward_sample_with<T: Real>(
    z0: &Tensor<T>,
    z_t_end: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    sched: &BridgeSchedule,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    same_shape(z0, z_t_end, "bridge endpoints")?;
    same_shape(z0, eps, "bridge noise")?;
    let (th, sg) = (sched.big_theta(t), sched.sigma(t));
    let data = z0
        .data()
        .iter()
        .zip(z_t_end.data())
        .zip(eps.data())
        .map(|((&a, &b), &e)| T::lit(b.as_f64() + (a.as_f64() - b.as_f64()) * th + sg * e.as_f64()))
        .collect();
    Tensor::new(z0.shape(), data)
}

/// Draws `z_t` from the bridge marginal. Returns the state and the noise used.
pub fn forward_sample<T: Real>(
    z0: &Tensor<T>,
    z_t_end: &Tensor<T>,
    t: usize,
    sched: &BridgeSchedule,
    prng: &mut Prng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let eps = prng.gaussian_tensor::<T>(z0.shape());
    let zt = forward_sample_with(z0, z_t_end, &eps, t, sched)?;
    Ok((zt, eps))
}

/// Euler–Maruyama integration of the bridge SDE started at `z0`, recording
/// the state at every schedule index. `noise_scale = 0` integrates the
/// mean ODE.
pub fn simulate_sde(
    z0: f64,
    z_t_end: f64,
    sched: &BridgeSchedule,
    n_substeps: usize,
    noise_scale: f64,
    prng: &mut Prng,
) -> Result<Vec<f64>> {
    if n_substeps < sched.steps() || n_substeps % sched.steps() != 0 {
        return Err(Error::config(format!(
            "substeps {n_substeps} must be a positive multiple of {} schedule steps",
            sched.steps()
        )));
    }
    let per = n_substeps / sched.steps();
    let dt = 1.0 / n_substeps as f64;
    let th = sched.theta0();
    let diffusion = noise_scale * (2.0 * sched.lambda() * th * dt).sqrt();
    let mut z = z0;
    let mut out = Vec::with_capacity(sched.steps() + 1);
    out.push(z);
    for k in 0..n_substeps {
        let remaining = th * (1.0 - k as f64 * dt);
        let drift = th / remaining.tanh() * (z_t_end - z);
        z += drift * dt;
        if diffusion > 0.0 {
            z += diffusion * prng.gaussian();
        }
        if (k + 1) % per == 0 {
            out.push(z);
        }
    }
    Ok(out)
}

/// Coefficients `(a, b, c)` of the deterministic jump `t -> s`:
/// `z_s = a z_t + b ẑ0 + c zT`.
pub fn z0_step_coeffs(t: usize, s: usize, sched: &BridgeSchedule) -> Result<(f64, f64, f64)> {
    sched.check_t(t)?;
    if s >= t {
        return Err(Error::contract(format!("reverse step must go backwards, got {t} -> {s}")));
    }
    let st = sched.sigma(t);
    let a = if st == 0.0 { 0.0 } else { sched.sigma(s) / st };
    let b = sched.big_theta(s) - sched.big_theta(t) * a;
    Ok((a, b, 1.0 - a - b))
}

/// Deterministic reverse jump from `t` to `s < t` using an `ẑ0` prediction.
pub fn reverse_step_z0<T: Real>(
    z_t: &Tensor<T>,
    z_t_end: &Tensor<T>,
    z0_hat: &Tensor<T>,
    t: usize,
    s: usize,
    sched: &BridgeSchedule,
) -> Result<Tensor<T>> {
    same_shape(z_t, z_t_end, "reverse step")?;
    same_shape(z_t, z0_hat, "reverse step")?;
    let (a, b, c) = z0_step_coeffs(t, s, sched)?;
    if s == 0 && a == 0.0 && c == 0.0 {
        return Ok(z0_hat.clone());
    }
    let data = z_t
        .data()
        .iter()
        .zip(z0_hat.data())
        .zip(z_t_end.data())
        .map(|((&zt, &z0), &ze)| T::lit(a * zt.as_f64() + b * z0.as_f64() + c * ze.as_f64()))
        .collect();
    Tensor::new(z_t.shape(), data)
}

/// Reverse jump from `t` to `s < t` using a noise prediction.
pub fn reverse_step_eps<T: Real>(
    z_t: &Tensor<T>,
    z_t_end: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    s: usize,
    sched: &BridgeSchedule,
) -> Result<Tensor<T>> {
    same_shape(z_t, z_t_end, "reverse step")?;
    same_shape(z_t, eps_hat, "reverse step")?;
    sched.check_t(t)?;
    if s >= t {
        return Err(Error::contract(format!("reverse step must go backwards, got {t} -> {s}")));
    }
    let th_t = sched.big_theta(t);
    if th_t == 0.0 {
        return Err(Error::contract("noise-prediction step undefined where Theta_t = 0; use the z0 step"));
    }
    let ratio = sched.big_theta(s) / th_t;
    let k = ratio * sched.sigma(t) - sched.sigma(s);
    let data = z_t
        .data()
        .iter()
        .zip(z_t_end.data())
        .zip(eps_hat.data())
        .map(|((&zt, &ze), &e)| {
            let ze = ze.as_f64();
            T::lit(ze + ratio * (zt.as_f64() - ze) - k * e.as_f64())
        })
        .collect();
    Tensor::new(z_t.shape(), data)
}

/// Noise implied by an `ẑ0` prediction at state `z_t`.
pub fn eps_from_z0<T: Real>(
    z_t: &Tensor<T>,
    z_t_end: &Tensor<T>,
    z0_hat: &Tensor<T>,
    t: usize,
    sched: &BridgeSchedule,
) -> Result<Tensor<T>> {
    same_shape(z_t, z0_hat, "eps conversion")?;
    same_shape(z_t, z_t_end, "eps conversion")?;
    sched.check_t(t)?;
    let sg = sched.sigma(t);
    if sg == 0.0 {
        return Err(Error::contract(format!("noise is undefined at t = {t} where Sigma_t = 0")));
    }
    let th = sched.big_theta(t);
    let data = z_t
        .data()
        .iter()
        .zip(z_t_end.data())
        .zip(z0_hat.data())
        .map(|((&zt, &ze), &z0)| {
            let ze = ze.as_f64();
            T::lit((zt.as_f64() - ze - (z0.as_f64() - ze) * th) / sg)
        })
        .collect();
    Tensor::new(z_t.shape(), data)
}

/// Decreasing schedule indices `T, T(k-1)/k, …, T/k, 0` rounded to the
/// nearest integer.
pub fn nfe_grid(steps: usize, nfe: usize) -> Result<Vec<usize>> {
    if nfe == 0 {
        return Err(Error::config("nfe must be at least 1"));
    }
    let mut g: Vec<usize> = (0..nfe).map(|i| ((steps * (nfe - i)) as f64 / nfe as f64).round() as usize).collect();
    g.push(0);
    g.dedup();
    Ok(g)
}

/// Upper bound on the Jensen gap of the posterior approximation.
pub fn jensen_gap_bound(sigma: f64, m: f64, grad_norm: f64, d: f64) -> f64 {
    if sigma == 0.0 || !sigma.is_finite() {
        return 0.0;
    }
    let s2 = sigma * sigma;
    d / (2.0 * std::f64::consts::PI * s2).sqrt() * (-1.0 / (2.0 * s2)).exp() * grad_norm * m
}
