//! Infinite-UNet denoiser: time-conditioned residual blocks, PAN-guided
//! interaction blocks with geometric and exponential kernels, and
//! interleaved linear and softmax attention.

pub mod kernels;

pub use kernels::{exp_kernel, geo_kernel, interaction_space_dim, truncated_hadamard_series, SeriesKind};

use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{he_normal, normal, Bound, ParamStore};
use crate::tensor::{AxisMap, Prng, Real, Tape, Tensor, Var};

/// Bound on the geometric-branch pre-activation.
pub const GEO_BOUND: f64 = 0.99;
const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnKind {
    /// Kernelised attention with the `elu(x) + 1` feature map.
    Linear,
    /// Single-head softmax attention.
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Micro,
    T,
    S,
    B,
    L,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "micro" => Ok(Variant::Micro),
            "t" => Ok(Variant::T),
            "s" => Ok(Variant::S),
            "b" => Ok(Variant::B),
            "l" => Ok(Variant::L),
            _ => Err(Error::config(format!("unknown variant {s:?} (expected micro, t, s, b or l)"))),
        }
    }
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Micro => "micro",
            Variant::T => "t",
            Variant::S => "s",
            Variant::B => "b",
            Variant::L => "l",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base: usize,
    pub mults: [usize; 4],
    pub latent: usize,
    pub attn: [AttnKind; 4],
}

impl UNetConfig {
    pub fn variant(v: Variant, latent: usize) -> Self {
        let (base, mults) = match v {
            Variant::Micro => (8, [1, 1, 1, 1]),
            Variant::T => (32, [1, 1, 1, 1]),
            Variant::S => (64, [1, 1, 1, 1]),
            Variant::B => (32, [1, 2, 2, 4]),
            Variant::L => (64, [1, 2, 2, 4]),
        };
        UNetConfig {
            base,
            mults,
            latent,
            attn: [AttnKind::Linear, AttnKind::Standard, AttnKind::Standard, AttnKind::Linear],
        }
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base
    }

    fn ch(&self, i: usize) -> usize {
        self.base * self.mults[i]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base < 4 || self.mults.contains(&0) || self.latent == 0 {
            return Err(Error::config("unet needs base >= 4, positive multipliers and latent width"));
        }
        Ok(())
    }
}

/// Sinusoidal embedding `(sin(t/10000^{2i/dim}), cos(…))` pairs.
pub fn sinusoidal_time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!("time embedding dimension must be even, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let f = t / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out.push(f.sin());
        out.push(f.cos());
    }
    Ok(out)
}

// ------------------------------------------------------------------ parameters

struct Init<'a> {
    s: ParamStore<f32>,
    prng: &'a mut Prng,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> Result<()> {
        let w = he_normal(self.prng, &[cout, cin, k, k], cin * k * k);
        self.s.insert(format!("{name}.w"), w)?;
        self.s.insert(format!("{name}.b"), Tensor::zeros(&[cout]))
    }

    fn conv_scaled(&mut self, name: &str, cout: usize, cin: usize, k: usize, std: f64) -> Result<()> {
        let w = normal(self.prng, &[cout, cin, k, k], std);
        self.s.insert(format!("{name}.w"), w)?;
        self.s.insert(format!("{name}.b"), Tensor::zeros(&[cout]))
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize, std: f64) -> Result<()> {
        let w = normal(self.prng, &[fin, fout], std);
        self.s.insert(format!("{name}.w"), w)?;
        self.s.insert(format!("{name}.b"), Tensor::zeros(&[fout]))
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, tdim: usize) -> Result<()> {
        self.conv(&format!("{name}.conv1"), cout, cin, 3)?;
        self.linear(&format!("{name}.film"), tdim, 2 * cout, 0.02)?;
        self.conv_scaled(&format!("{name}.conv2"), cout, cout, 3, 0.5 * (2.0 / (9 * cout) as f64).sqrt())?;
        if cin != cout {
            self.conv(&format!("{name}.skip"), cout, cin, 1)?;
        }
        Ok(())
    }

    fn idi(&mut self, name: &str, pan_ch: usize, ch: usize) -> Result<()> {
        self.conv(&format!("{name}.lat"), ch, ch, 1)?;
        let std = (1.0 / (pan_ch + ch) as f64).sqrt();
        self.conv_scaled(&format!("{name}.g"), ch, pan_ch + ch, 1, std)?;
        self.conv_scaled(&format!("{name}.e"), ch, pan_ch + ch, 1, 0.5 * std)?;
        self.conv_scaled(&format!("{name}.o"), ch, ch, 1, 0.1 * (1.0 / ch as f64).sqrt())
    }

    fn attn(&mut self, name: &str, ch: usize) -> Result<()> {
        let std = (1.0 / ch as f64).sqrt();
        for part in ["q", "k", "v"] {
            self.linear(&format!("{name}.{part}"), ch, ch, std)?;
        }
        self.linear(&format!("{name}.o"), ch, ch, 0.1 * std)
    }
}

pub fn init_unet(cfg: &UNetConfig, prng: &mut Prng) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let (d, c, e) = (cfg.base, cfg.latent, cfg.time_dim());
    let mut it = Init { s: ParamStore::new(), prng };
    it.linear("unet.temb1", e, e, (1.0 / e as f64).sqrt())?;
    it.linear("unet.temb2", e, e, (1.0 / e as f64).sqrt())?;
    it.conv("unet.stem", d, 2 * c, 3)?;
    it.conv("unet.pan0", d, 1, 3)?;
    for i in 1..4 {
        it.conv(&format!("unet.pan{i}"), d, d, 3)?;
    }
    let mut prev = d;
    for i in 0..4 {
        let ch = cfg.ch(i);
        it.res(&format!("unet.enc{i}.res"), prev, ch, e)?;
        it.idi(&format!("unet.enc{i}.idi"), d, ch)?;
        it.attn(&format!("unet.enc{i}.attn"), ch)?;
        if i < 3 {
            it.conv(&format!("unet.enc{i}.down"), ch, ch, 3)?;
        }
        prev = ch;
    }
    it.res("unet.mid", prev, prev, e)?;
    for i in (0..4).rev() {
        let ch = cfg.ch(i);
        it.res(&format!("unet.dec{i}.res"), prev + ch, ch, e)?;
        it.idi(&format!("unet.dec{i}.idi"), d, ch)?;
        prev = ch;
        if i > 0 {
            let next = cfg.ch(i - 1);
            it.conv(&format!("unet.dec{i}.up"), next, ch, 3)?;
            prev = next;
        }
    }
    it.conv_scaled("unet.head", c, d, 3, 0.0)?;
    Ok(it.s)
}

// ------------------------------------------------------------------ layers

/// Thin helper pairing a tape with bound parameters.
pub struct Layers<'a, T: Real> {
    pub tape: &'a Tape<T>,
    pub p: &'a Bound,
}

impl<'a, T: Real> Layers<'a, T> {
    pub fn new(tape: &'a Tape<T>, p: &'a Bound) -> Self {
        Layers { tape, p }
    }

    pub fn conv(&self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.p.get(&format!("{name}.w"))?;
        let b = self.p.get(&format!("{name}.b"))?;
        let k = self.tape.shape(w)[2];
        let y = self.tape.conv2d(x, w, stride, (k - 1) / 2)?;
        let f = self.tape.shape(b)[0];
        let b = self.tape.reshape(b, &[1, f, 1, 1])?;
        self.tape.add(y, b)
    }

    /// Parameter-free RMS normalisation over the channel axis of `[N, C, H, W]`.
    pub fn rms_norm(&self, x: Var) -> Result<Var> {
        let t = self.tape;
        let c = t.shape(x)[1];
        let ms = t.mul_scalar(t.sum_axis(t.mul(x, x)?, 1)?, 1.0 / c as f64)?;
        let r = t.sqrt(t.add_scalar(ms, RMS_EPS)?)?;
        t.div(x, r)
    }

    pub fn linear(&self, name: &str, x: Var) -> Result<Var> {
        let y = self.tape.matmul(x, self.p.get(&format!("{name}.w"))?)?;
        self.tape.add(y, self.p.get(&format!("{name}.b"))?)
    }

    /// Residual block with FiLM-style time conditioning.
    pub fn res_block(&self, name: &str, x: Var, temb: Var) -> Result<Var> {
        let t = self.tape;
        let h = t.silu(self.rms_norm(x)?)?;
        let h = self.conv(&format!("{name}.conv1"), h, 1)?;
        let co = t.shape(h)[1];
        let n = t.shape(h)[0];
        let ss = self.linear(&format!("{name}.film"), t.silu(temb)?)?;
        let ss = t.reshape(ss, &[n, 2 * co, 1, 1])?;
        let scale = t.slice(ss, 1, 0, co)?;
        let shift = t.slice(ss, 1, co, co)?;
        let hs = t.mul(h, scale)?;
        let h = t.add(t.add(h, hs)?, shift)?;
        let h = t.silu(h)?;
        let h = self.conv(&format!("{name}.conv2"), h, 1)?;
        let skip = if t.shape(x)[1] == co { x } else { self.conv(&format!("{name}.skip"), x, 1)? };
        t.add(skip, h)
    }

    /// Interaction block. Returns the output and the bounded
    /// geometric-branch pre-activation.
    pub fn idi_block_traced(&self, name: &str, pan_feat: Var, latent: Var) -> Result<(Var, Var)> {
        let t = self.tape;
        let (ps, ls) = (t.shape(pan_feat), t.shape(latent));
        if ps.len() != 4 || ls.len() != 4 || ps[0] != ls[0] || ps[2..] != ls[2..] {
            return Err(Error::dim(format!("pan features {ps:?} not aligned with latent {ls:?}")));
        }
        let lat = self.conv(&format!("{name}.lat"), latent, 1)?;
        let v = self.rms_norm(t.concat(&[pan_feat, lat], 1)?)?;
        let g = self.conv(&format!("{name}.g"), v, 1)?;
        let u = t.mul_scalar(t.tanh(g)?, GEO_BOUND)?;
        let geo = geo_kernel(t, u)?;
        let e = self.conv(&format!("{name}.e"), v, 1)?;
        let ex = exp_kernel(t, e)?;
        let fused = t.mul(geo, ex)?;
        let out = self.conv(&format!("{name}.o"), fused, 1)?;
        Ok((t.add(out, latent)?, u))
    }

    pub fn idi_block(&self, name: &str, pan_feat: Var, latent: Var) -> Result<Var> {
        Ok(self.idi_block_traced(name, pan_feat, latent)?.0)
    }

    /// Residual attention over spatial tokens of `[N, C, H, W]`.
    pub fn attention(&self, name: &str, x: Var, kind: AttnKind) -> Result<Var> {
        let t = self.tape;
        let s = t.shape(x);
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let tok = t.permute(t.reshape(x, &[n, c, hw])?, &[0, 2, 1])?;
        let q = self.linear(&format!("{name}.q"), tok)?;
        let k = self.linear(&format!("{name}.k"), tok)?;
        let v = self.linear(&format!("{name}.v"), tok)?;
        let y = match kind {
            AttnKind::Standard => {
                let a = crate::moe::attention_weights(t, q, k)?;
                t.matmul(a, v)?
            }
            AttnKind::Linear => linear_attention(t, q, k, v)?,
        };
        let y = self.linear(&format!("{name}.o"), y)?;
        let y = t.reshape(t.permute(y, &[0, 2, 1])?, &s)?;
        t.add(x, y)
    }
}

/// `φ(q_i)·Σ_j φ(k_j) v_jᵀ / φ(q_i)·Σ_j φ(k_j)` with `φ = elu + 1`.
pub fn linear_attention<T: Real>(tape: &Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let fq = tape.add_scalar(tape.elu(q)?, 1.0)?;
    let fk = tape.add_scalar(tape.elu(k)?, 1.0)?;
    let kv = tape.matmul(tape.transpose(fk)?, v)?;
    let num = tape.matmul(fq, kv)?;
    let tok_axis = tape.shape(fk).len() - 2;
    let ksum = tape.transpose(tape.sum_axis(fk, tok_axis)?)?;
    let den = tape.matmul(fq, ksum)?;
    tape.div(num, den)
}

/// Implicit attention weights of [`linear_attention`], `[.., n_q, n_k]`.
pub fn linear_attention_weights<T: Real>(tape: &Tape<T>, q: Var, k: Var) -> Result<Var> {
    let fq = tape.add_scalar(tape.elu(q)?, 1.0)?;
    let fk = tape.add_scalar(tape.elu(k)?, 1.0)?;
    let s = tape.matmul(fq, tape.transpose(fk)?)?;
    let z = tape.sum_axis(s, tape.shape(s).len() - 1)?;
    tape.div(s, z)
}

fn nearest_up_map(n: usize) -> AxisMap {
    let mut dense = vec![0.0; 2 * n * n];
    for i in 0..2 * n {
        dense[i * n + i / 2] = 1.0;
    }
    AxisMap::from_dense(2 * n, n, &dense)
}

fn upsample_nearest<T: Real>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let y = tape.axis_map(x, 2, Rc::new(nearest_up_map(s[2])))?;
    tape.axis_map(y, 3, Rc::new(nearest_up_map(s[3])))
}

/// Predicts `ẑ0` from `z_t`, `z_T` (both `[N, C, H, W]`), PAN `[N, 1, H, W]`
/// and one time index per batch element.
pub fn unet_forward<T: Real>(
    tape: &Tape<T>,
    p: &Bound,
    cfg: &UNetConfig,
    z_t: Var,
    z_end: Var,
    pan: Var,
    t: &[usize],
) -> Result<Var> {
    let s = tape.shape(z_t);
    if s.len() != 4 || s[1] != cfg.latent {
        return Err(Error::dim(format!("latent must be [N,{},H,W], got {s:?}", cfg.latent)));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    if tape.shape(z_end) != s {
        return Err(Error::dim(format!("z_T {:?} does not match z_t {s:?}", tape.shape(z_end))));
    }
    if tape.shape(pan) != [n, 1, h, w] {
        return Err(Error::dim(format!("pan {:?} must be [{n},1,{h},{w}]", tape.shape(pan))));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::dim(format!("latent size {h}x{w} must be divisible by 8")));
    }
    if t.len() != n {
        return Err(Error::dim(format!("{} time indices for batch of {n}", t.len())));
    }
    let l = Layers::new(tape, p);
    let e = cfg.time_dim();
    let mut emb = Vec::with_capacity(n * e);
    for &ti in t {
        emb.extend(sinusoidal_time_embed(ti as f64, e)?.into_iter().map(T::lit));
    }
    let temb = tape.constant(Tensor::new(&[n, e], emb)?);
    let temb = l.linear("unet.temb1", temb)?;
    let temb = l.linear("unet.temb2", tape.silu(temb)?)?;

    let mut pans = Vec::with_capacity(4);
    let mut pf = l.conv("unet.pan0", pan, 1)?;
    pans.push(pf);
    for i in 1..4 {
        pf = l.conv(&format!("unet.pan{i}"), tape.silu(pf)?, 2)?;
        pans.push(pf);
    }

    let x = tape.concat(&[z_t, z_end], 1)?;
    let mut hcur = l.conv("unet.stem", x, 1)?;
    let mut skips = Vec::with_capacity(4);
    for i in 0..4 {
        hcur = l.res_block(&format!("unet.enc{i}.res"), hcur, temb)?;
        hcur = l.idi_block(&format!("unet.enc{i}.idi"), pans[i], hcur)?;
        hcur = l.attention(&format!("unet.enc{i}.attn"), hcur, cfg.attn[i])?;
        skips.push(hcur);
        if i < 3 {
            hcur = l.conv(&format!("unet.enc{i}.down"), hcur, 2)?;
        }
    }
    hcur = l.res_block("unet.mid", hcur, temb)?;
    for i in (0..4).rev() {
        let cat = tape.concat(&[hcur, skips[i]], 1)?;
        hcur = l.res_block(&format!("unet.dec{i}.res"), cat, temb)?;
        hcur = l.idi_block(&format!("unet.dec{i}.idi"), pans[i], hcur)?;
        if i > 0 {
            let up = upsample_nearest(tape, hcur)?;
            hcur = l.conv(&format!("unet.dec{i}.up"), up, 1)?;
        }
    }
    l.conv("unet.head", tape.silu(hcur)?, 1)
}
