use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{loss_ref_var, upsampled_ms, Model, ModelConfig};
use crate::bridge::BridgeSchedule;
use crate::error::{Error, Result};
use crate::moe::{mit_forward, project_var};
use crate::net::unet_forward;
use crate::params::{Bound, ParamStore};
use crate::raster::WaldPair;
use crate::tensor::{Gradients, Prng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-4, batch: 4, steps: 500, gamma: 0.001, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_ref: f64,
    pub loss_aux: f64,
    pub loss_total: f64,
    pub wall_ms: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,loss_ref,loss_aux,loss_total,wall_ms";

    pub fn csv(&self) -> String {
        format!("{},{:e},{:e},{:e},{:.3}", self.step, self.loss_ref, self.loss_aux, self.loss_total, self.wall_ms)
    }
}

/// Adam with bias correction; moments kept in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamStore<f32>, bound: &Bound, grads: &Gradients<f32>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (name, p)) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(bound.get(name)?) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &gi), (mi, vi)) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                let gi = gi as f64;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let upd = self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w = (*w as f64 - upd) as f32;
            }
        }
        Ok(())
    }
}

/// A training triple with its bicubic upsampling precomputed.
pub(crate) struct Prepared {
    pub x_up: Tensor<f32>,
    pub pan: Tensor<f32>,
    pub y: Tensor<f32>,
}

pub(crate) fn prepare(pair: &WaldPair, cfg: &ModelConfig) -> Result<Prepared> {
    if pair.ratio != cfg.ratio {
        return Err(Error::contract(format!("pair ratio {} differs from model ratio {}", pair.ratio, cfg.ratio)));
    }
    let (h, w) = (pair.pan.height(), pair.pan.width());
    if h != pair.ms.height() * cfg.ratio || w != pair.ms.width() * cfg.ratio {
        return Err(Error::contract(format!(
            "pan {h}x{w} is not {}x ms {}x{}",
            cfg.ratio,
            pair.ms.height(),
            pair.ms.width()
        )));
    }
    if pair.reference.height() != h || pair.reference.width() != w {
        return Err(Error::contract("reference must be at pan resolution"));
    }
    Ok(Prepared {
        x_up: upsampled_ms(&pair.ms, cfg.ratio)?,
        pan: pair.pan.to_tensor().reshape(&[1, 1, h, w])?,
        y: pair.reference.to_tensor(),
    })
}

pub(crate) struct Losses {
    pub loss_ref: Var,
    pub aux: Var,
    pub total: Var,
}

/// Training losses for a batch with given times and noise draws.
pub(crate) fn forward_losses(
    tape: &Tape<f32>,
    p: &Bound,
    cfg: &ModelConfig,
    sched: &BridgeSchedule,
    items: &[&Prepared],
    ts: &[usize],
    eps: &[Tensor<f32>],
    gamma: f64,
) -> Result<Losses> {
    let n = items.len();
    let mut zts = Vec::with_capacity(n);
    let mut zes = Vec::with_capacity(n);
    let mut pans = Vec::with_capacity(n);
    let mut maps = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    let mut counts = vec![0.0f64; cfg.mit.experts];
    let mut picks = 0usize;
    for ((it, &t), e) in items.iter().zip(ts).zip(eps) {
        let x = tape.constant(it.x_up.clone());
        let y = tape.constant(it.y.clone());
        let out = mit_forward(tape, p, &cfg.mit, x)?;
        let z_end = project_var(tape, x, out.t)?;
        let z0 = project_var(tape, y, out.t)?;
        let d = tape.mul_scalar(tape.sub(z0, z_end)?, sched.big_theta(t))?;
        let noise = tape.constant(e.clone());
        let zt = tape.add(tape.add(z_end, d)?, tape.mul_scalar(noise, sched.sigma(t))?)?;
        let s = tape.shape(zt);
        let shape4 = [1, s[0], s[1], s[2]];
        zts.push(tape.reshape(zt, &shape4)?);
        zes.push(tape.reshape(z_end, &shape4)?);
        pans.push(tape.constant(it.pan.clone()));
        for &k in &out.selected {
            counts[k] += 1.0;
        }
        picks += out.selected.len();
        probs.push(out.probs);
        maps.push((out.t, out.t_star, y));
    }
    let zt = tape.concat(&zts, 0)?;
    let ze = tape.concat(&zes, 0)?;
    let pan = tape.concat(&pans, 0)?;
    let pred = unet_forward(tape, p, &cfg.unet, zt, ze, pan, ts)?;
    let c = tape.shape(pred)[1..].to_vec();
    let mut per = Vec::with_capacity(n);
    for (i, (t, ts_, y)) in maps.into_iter().enumerate() {
        let zi = tape.reshape(tape.slice(pred, 0, i, 1)?, &c)?;
        per.push(loss_ref_var(tape, zi, y, t, ts_)?);
    }
    let sum = tape.sum(tape.concat(&per, 0)?)?;
    let loss_ref = tape.mul_scalar(sum, 1.0 / n as f64)?;
    let pk = tape.mul_scalar(tape.sum_axis(tape.concat(&probs, 0)?, 0)?, 1.0 / n as f64)?;
    let l = counts.len();
    let f = tape.constant(Tensor::new(&[1, l], counts.iter().map(|c| (c / picks.max(1) as f64) as f32).collect())?);
    let aux = tape.sum(tape.mul(pk, f)?)?;
    let total = tape.add(loss_ref, tape.mul_scalar(aux, gamma)?)?;
    Ok(Losses { loss_ref, aux, total })
}

/// Stateful training loop.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    adam: Adam,
    sched: BridgeSchedule,
    prng: Prng,
    data: Vec<Prepared>,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, data: &[WaldPair]) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let prepared = data.iter().map(|p| prepare(p, &model.cfg)).collect::<Result<Vec<_>>>()?;
        let sched = model.cfg.schedule()?;
        let adam = Adam::new(cfg.lr, &model.params);
        Ok(Trainer {
            prng: Prng::new(cfg.seed),
            adam,
            sched,
            order: Vec::new(),
            cursor: 0,
            step: 0,
            data: prepared,
            model,
            cfg,
        })
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cfg.batch);
        while out.len() < self.cfg.batch.min(self.data.len()) {
            if self.cursor >= self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.prng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One optimisation step; returns the logged losses.
    pub fn step(&mut self) -> Result<LogRow> {
        let start = Instant::now();
        let idx = self.next_batch();
        let items: Vec<&Prepared> = idx.iter().map(|&i| &self.data[i]).collect();
        let steps = self.sched.steps();
        let ts: Vec<usize> = items.iter().map(|_| self.prng.int_inclusive(1, steps)).collect();
        let c = self.model.cfg.mit.latent;
        let eps: Vec<Tensor<f32>> = items
            .iter()
            .map(|it| self.prng.gaussian_tensor(&[c, it.y.shape()[1], it.y.shape()[2]]))
            .collect();
        let tape = Tape::<f32>::new();
        let bound = self.model.params.bind(&tape);
        let l = forward_losses(&tape, &bound, &self.model.cfg, &self.sched, &items, &ts, &eps, self.cfg.gamma)?;
        let total = tape.item(l.total) as f64;
        if !total.is_finite() {
            return Err(Error::Numeric { msg: format!("loss became {total} at step {}", self.step + 1), condition: f64::NAN });
        }
        let grads = tape.backward(l.total)?;
        self.adam.step(&mut self.model.params, &bound, &grads)?;
        self.model.trained_steps += 1;
        self.step += 1;
        Ok(LogRow {
            step: self.step,
            loss_ref: tape.item(l.loss_ref) as f64,
            loss_aux: tape.item(l.aux) as f64,
            loss_total: total,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Runs `cfg.steps` iterations, reporting each row to `on_row`.
pub fn train(model: Model, data: &[WaldPair], cfg: &TrainConfig, mut on_row: impl FnMut(&LogRow)) -> Result<(Model, Vec<LogRow>)> {
    let mut tr = Trainer::new(model, cfg.clone(), data)?;
    let mut rows = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let row = tr.step()?;
        on_row(&row);
        rows.push(row);
    }
    Ok((tr.model, rows))
}

/// Mean `loss_ref` over `data` with times and noise fixed by `seed`, so
/// that two models can be compared on identical draws.
pub fn evaluate_loss_ref(model: &Model, data: &[WaldPair], seed: u64) -> Result<f64> {
    let prepared = data.iter().map(|p| prepare(p, &model.cfg)).collect::<Result<Vec<_>>>()?;
    let sched = model.cfg.schedule()?;
    let mut prng = Prng::new(seed);
    let c = model.cfg.mit.latent;
    let mut total = 0.0;
    for it in &prepared {
        let t = prng.int_inclusive(1, sched.steps());
        let e = prng.gaussian_tensor(&[c, it.y.shape()[1], it.y.shape()[2]]);
        let tape = Tape::<f32>::new();
        let bound = model.params.bind_const(&tape);
        let l = forward_losses(&tape, &bound, &model.cfg, &sched, &[it], &[t], &[e], 0.0)?;
        total += tape.item(l.loss_ref) as f64;
    }
    Ok(total / prepared.len() as f64)
}
