//! Modality-interleaved transformer: band-wise patch tokens, attention
//! pooling, top-B expert routing, and the reversible spectral mapping
//! tensor that carries any band count into a fixed latent width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal, Bound, ParamStore};
use crate::tensor::{Prng, Real, Tape, Tensor, Var};

/// Number of learned band-slot embeddings; also the largest band count.
pub const BAND_SLOTS: usize = 10;
const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MitConfig {
    pub patch: usize,
    pub latent: usize,
    pub experts: usize,
    pub expert_hidden: usize,
    pub router_hidden: usize,
    pub attn_layers: usize,
}

impl Default for MitConfig {
    fn default() -> Self {
        MitConfig { patch: 8, latent: 16, experts: 16, expert_hidden: 64, router_hidden: 64, attn_layers: 2 }
    }
}

impl MitConfig {
    pub fn embed_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.attn_layers == 0 || self.expert_hidden == 0 || self.router_hidden == 0 {
            return Err(Error::config("mit sizes must be positive"));
        }
        if self.latent < BAND_SLOTS || self.experts < BAND_SLOTS {
            return Err(Error::config(format!(
                "latent width {} and expert count {} must both be at least {BAND_SLOTS}",
                self.latent, self.experts
            )));
        }
        Ok(())
    }
}

pub fn init_mit(cfg: &MitConfig, prng: &mut Prng) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let d = cfg.embed_dim();
    let mut s = ParamStore::new();
    s.insert("mit.embed.w", normal(prng, &[d, d], 1.0 / (d as f64).sqrt()))?;
    s.insert("mit.embed.b", Tensor::zeros(&[d]))?;
    s.insert("mit.band_embed", normal(prng, &[BAND_SLOTS, d], 0.02))?;
    s.insert("mit.query", normal(prng, &[d], 0.02))?;
    s.insert("mit.router.w1", normal(prng, &[d, cfg.router_hidden], 1.0 / (d as f64).sqrt()))?;
    s.insert("mit.router.b1", Tensor::zeros(&[cfg.router_hidden]))?;
    s.insert("mit.router.w2", normal(prng, &[cfg.router_hidden, cfg.experts], 0.01))?;
    s.insert("mit.router.b2", Tensor::zeros(&[cfg.experts]))?;
    let h = cfg.expert_hidden;
    for k in 0..cfg.experts {
        s.insert(format!("mit.expert{k}.gate"), normal(prng, &[d, h], 1.0 / (d as f64).sqrt()))?;
        s.insert(format!("mit.expert{k}.up"), normal(prng, &[d, h], 1.0 / (d as f64).sqrt()))?;
        s.insert(format!("mit.expert{k}.down"), normal(prng, &[h, cfg.latent], 1.0 / (h as f64).sqrt()))?;
    }
    Ok(s)
}

/// Fixed 2-D sinusoidal code for a `gh x gw` patch grid, shape `[gh*gw, d]`.
/// The first half of the channels encodes the row, the second the column.
pub fn grid_positional_encoding<T: Real>(gh: usize, gw: usize, d: usize) -> Tensor<T> {
    let half = d / 2;
    let mut out = Tensor::zeros(&[gh * gw, d]);
    let data = out.data_mut();
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut data[(gy * gw + gx) * d..(gy * gw + gx + 1) * d];
            for (off, pos) in [(0, gy), (half, gx)] {
                for i in 0..half / 2 {
                    let f = (pos as f64) / 10000f64.powf(2.0 * i as f64 / half as f64);
                    row[off + 2 * i] = T::lit(f.sin());
                    row[off + 2 * i + 1] = T::lit(f.cos());
                }
            }
        }
    }
    out
}

fn linear<T: Real>(tape: &Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Band-wise patch tokens `[B*(H/p)*(W/p), p²]` from `x_up: [B, H, W]`.
pub fn patch_embed<T: Real>(tape: &Tape<T>, p: &Bound, cfg: &MitConfig, x_up: Var) -> Result<Var> {
    let shape = tape.shape(x_up);
    let [b, h, w] = shape[..] else {
        return Err(Error::dim(format!("mit input must be [B,H,W], got {shape:?}")));
    };
    let ps = cfg.patch;
    if h % ps != 0 || w % ps != 0 {
        return Err(Error::dim(format!("patch size {ps} does not divide {h}x{w}")));
    }
    if b == 0 || b > BAND_SLOTS {
        return Err(Error::config(format!("band count {b} outside 1..={BAND_SLOTS}")));
    }
    let (gh, gw, d) = (h / ps, w / ps, cfg.embed_dim());
    let x = tape.reshape(x_up, &[b, gh, ps, gw, ps])?;
    let x = tape.permute(x, &[0, 1, 3, 2, 4])?;
    let x = tape.reshape(x, &[b * gh * gw, d])?;
    let e = linear(tape, x, p.get("mit.embed.w")?, p.get("mit.embed.b")?)?;
    let grid = tape.constant(grid_positional_encoding::<T>(gh, gw, d).reshape(&[1, gh * gw, d])?);
    let slots = tape.slice(p.get("mit.band_embed")?, 0, 0, b)?;
    let slots = tape.reshape(slots, &[b, 1, d])?;
    let pe = tape.add(grid, slots)?;
    let pe = tape.reshape(pe, &[b * gh * gw, d])?;
    tape.add(e, pe)
}

/// Row-stochastic attention weights `softmax(Q Kᵀ / √d)`.
pub fn attention_weights<T: Real>(tape: &Tape<T>, q: Var, k: Var) -> Result<Var> {
    let d = *tape.shape(q).last().unwrap_or(&1);
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.mul_scalar(s, 1.0 / (d as f64).sqrt())?;
    tape.softmax(s)
}

/// Parameter-free single-head self-attention `softmax(E Eᵀ/√d) E`.
pub fn self_attention<T: Real>(tape: &Tape<T>, e: Var) -> Result<Var> {
    let a = attention_weights(tape, e, e)?;
    tape.matmul(a, e)
}

/// Query-cached pooling. Every row of `Q` is the learned query `q`, so all
/// rows of `H_p` coincide and `h_p = N (q + softmax(q Hᵀ/√d) H)`. Shape `[1, d]`.
pub fn attention_pool<T: Real>(tape: &Tape<T>, h: Var, q: Var) -> Result<Var> {
    let hs = tape.shape(h);
    let (n, d) = (hs[0], hs[1]);
    let q = tape.reshape(q, &[1, d])?;
    let a = attention_weights(tape, q, h)?;
    let ah = tape.matmul(a, h)?;
    let row = tape.add(q, ah)?;
    tape.mul_scalar(row, n as f64)
}

/// Indices of the `b` largest probabilities, descending, ties by index.
pub fn top_b(probs: &[f64], b: usize) -> Result<Vec<usize>> {
    if b > probs.len() {
        return Err(Error::config(format!("cannot select {b} of {} experts", probs.len())));
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&i, &j| probs[j].total_cmp(&probs[i]).then(i.cmp(&j)));
    idx.truncate(b);
    Ok(idx)
}

/// Gate probabilities `softmax(G(h_p))`, shape `[1, L]`.
pub fn router_probs<T: Real>(tape: &Tape<T>, p: &Bound, h_p: Var) -> Result<Var> {
    let z = linear(tape, h_p, p.get("mit.router.w1")?, p.get("mit.router.b1")?)?;
    let z = tape.silu(z)?;
    let z = linear(tape, z, p.get("mit.router.w2")?, p.get("mit.router.b2")?)?;
    tape.softmax(z)
}

/// Gated expert `(silu(h W_g) ⊙ h W_u) W_d`, `[1, p²] -> [1, C]`.
pub fn expert<T: Real>(tape: &Tape<T>, p: &Bound, k: usize, h_p: Var) -> Result<Var> {
    let g = tape.matmul(h_p, p.get(&format!("mit.expert{k}.gate"))?)?;
    let g = tape.silu(g)?;
    let u = tape.matmul(h_p, p.get(&format!("mit.expert{k}.up"))?)?;
    let gu = tape.mul(g, u)?;
    tape.matmul(gu, p.get(&format!("mit.expert{k}.down"))?)
}

/// Turns raw expert rows `[B, C]` into `(T, T*)`: unit rows (zero rows stay
/// zero), leading `B x B` block replaced by the identity, and
/// `T* = Tᵀ (T Tᵀ)⁻¹`.
pub fn mapping_from_rows<T: Real>(tape: &Tape<T>, rows: Var) -> Result<(Var, Var)> {
    let s = tape.shape(rows);
    let [b, c] = s[..] else {
        return Err(Error::dim(format!("expert rows must be [B,C], got {s:?}")));
    };
    if b > c {
        return Err(Error::config(format!("band count {b} exceeds latent width {c}")));
    }
    let unit = tape.normalize_rows(rows, NORM_EPS)?;
    let mask = tape.constant(Tensor::from_fn(&[b, c], |i| if i % c < b { T::zero() } else { T::one() }));
    let eye = tape.constant(Tensor::from_fn(&[b, c], |i| if i % c == i / c { T::one() } else { T::zero() }));
    let kept = tape.mul(unit, mask)?;
    let t = tape.add(kept, eye)?;
    let tt = tape.transpose(t)?;
    let gram = tape.matmul(t, tt)?;
    let inv = tape.inverse(gram)?;
    let t_star = tape.matmul(tt, inv)?;
    Ok((t, t_star))
}

/// Latent `[C, H, W]` from an image `[B, H, W]`: per pixel `z = Tᵀ x`.
pub fn project_var<T: Real>(tape: &Tape<T>, x: Var, t: Var) -> Result<Var> {
    let (xs, ts) = (tape.shape(x), tape.shape(t));
    if xs.len() != 3 || ts.len() != 2 || xs[0] != ts[0] {
        return Err(Error::dim(format!("project: image {xs:?} does not match mapping {ts:?}")));
    }
    let x2 = tape.reshape(x, &[xs[0], xs[1] * xs[2]])?;
    let tt = tape.transpose(t)?;
    let z = tape.matmul(tt, x2)?;
    tape.reshape(z, &[ts[1], xs[1], xs[2]])
}

/// Image `[B, H, W]` from a latent `[C, H, W]`: per pixel `ŷ = T*ᵀ z`.
pub fn unproject_var<T: Real>(tape: &Tape<T>, z: Var, t_star: Var) -> Result<Var> {
    let (zs, ts) = (tape.shape(z), tape.shape(t_star));
    if zs.len() != 3 || ts.len() != 2 || zs[0] != ts[0] {
        return Err(Error::dim(format!("unproject: latent {zs:?} does not match inverse {ts:?}")));
    }
    let z2 = tape.reshape(z, &[zs[0], zs[1] * zs[2]])?;
    let tt = tape.transpose(t_star)?;
    let y = tape.matmul(tt, z2)?;
    tape.reshape(y, &[ts[1], zs[1], zs[2]])
}

/// MiT output recorded on a tape.
#[derive(Clone, Debug)]
pub struct MitOutput {
    pub t: Var,
    pub t_star: Var,
    /// Gate probabilities, `[1, L]`.
    pub probs: Var,
    pub selected: Vec<usize>,
    pub h_p: Var,
}

pub fn mit_forward<T: Real>(tape: &Tape<T>, p: &Bound, cfg: &MitConfig, x_up: Var) -> Result<MitOutput> {
    let b = tape.shape(x_up)[0];
    if b > cfg.latent {
        return Err(Error::config(format!("band count {b} exceeds latent width {}", cfg.latent)));
    }
    let mut h = patch_embed(tape, p, cfg, x_up)?;
    for _ in 0..cfg.attn_layers {
        h = self_attention(tape, h)?;
    }
    let h_p = attention_pool(tape, h, p.get("mit.query")?)?;
    let probs = router_probs(tape, p, h_p)?;
    let pv: Vec<f64> = tape.value(probs).data().iter().map(|v| v.as_f64()).collect();
    let selected = top_b(&pv, b)?;
    let rows = selected.iter().map(|&k| expert(tape, p, k, h_p)).collect::<Result<Vec<_>>>()?;
    let rows = tape.concat(&rows, 0)?;
    let (t, t_star) = mapping_from_rows(tape, rows)?;
    Ok(MitOutput { t, t_star, probs, selected, h_p })
}

/// Detached mapping tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingTensor {
    /// `[B, C]`
    pub t: Tensor<f32>,
    /// `[C, B]`
    pub t_star: Tensor<f32>,
    pub selected: Vec<usize>,
    pub probs: Vec<f32>,
}

impl MappingTensor {
    pub fn from_output<T: Real>(tape: &Tape<T>, out: &MitOutput) -> Self {
        MappingTensor {
            t: tape.value(out.t).cast(),
            t_star: tape.value(out.t_star).cast(),
            selected: out.selected.clone(),
            probs: tape.value(out.probs).data().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    /// Builds `(T, T*)` from raw expert rows in double precision.
    pub fn from_rows(rows: &Tensor<f32>) -> Result<Self> {
        let tape = Tape::<f64>::new();
        let r = tape.constant(rows.cast());
        let (t, ts) = mapping_from_rows(&tape, r)?;
        let b = rows.shape()[0];
        Ok(MappingTensor {
            t: tape.value(t).cast(),
            t_star: tape.value(ts).cast(),
            selected: (0..b).collect(),
            probs: Vec::new(),
        })
    }

    pub fn bands(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn latent(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn project(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::<f32>::new();
        let (xv, t) = (tape.constant(x.clone()), tape.constant(self.t.clone()));
        Ok(tape.value(project_var(&tape, xv, t)?))
    }

    pub fn unproject(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::<f32>::new();
        let (zv, ts) = (tape.constant(z.clone()), tape.constant(self.t_star.clone()));
        Ok(tape.value(unproject_var(&tape, zv, ts)?))
    }
}

/// Batch routing statistics: mean gate probability `P_k` and routed
/// fraction `f_k` per expert.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterState {
    pub p: Vec<f64>,
    pub f: Vec<f64>,
}

impl RouterState {
    pub fn from_routes(routes: &[(Vec<f64>, Vec<usize>)]) -> Result<Self> {
        let Some(l) = routes.first().map(|r| r.0.len()) else {
            return Err(Error::config("router state needs at least one routed sample"));
        };
        let mut p = vec![0.0; l];
        let mut f = vec![0.0; l];
        let mut picks = 0usize;
        for (probs, sel) in routes {
            if probs.len() != l {
                return Err(Error::dim("inconsistent expert counts across samples"));
            }
            for (a, v) in p.iter_mut().zip(probs) {
                *a += v;
            }
            for &k in sel {
                f[k] += 1.0;
            }
            picks += sel.len();
        }
        p.iter_mut().for_each(|v| *v /= routes.len() as f64);
        f.iter_mut().for_each(|v| *v /= picks.max(1) as f64);
        Ok(RouterState { p, f })
    }
}

/// `Σ_k P_k f_k`.
pub fn load_balance_loss(rs: &RouterState) -> f64 {
    rs.p.iter().zip(&rs.f).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_of_zero_hidden_is_n_times_query() {
        let tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::zeros(&[5, 4]));
        let q = tape.constant(Tensor::new(&[4], vec![0.1, -0.2, 0.3, 0.4]).unwrap());
        let hp = tape.value(attention_pool(&tape, h, q).unwrap());
        let want = [0.5, -1.0, 1.5, 2.0];
        for (a, b) in hp.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_attention_is_identity() {
        let tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::new(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap());
        assert_eq!(tape.value(self_attention(&tape, e).unwrap()), tape.value(e));
    }

    #[test]
    fn top_b_tie_break() {
        assert_eq!(top_b(&[0.25; 4], 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(top_b(&[0.0, 0.0, 1.0, 0.0], 1).unwrap(), vec![2]);
        assert_eq!(top_b(&[0.1, 0.4, 0.1, 0.4], 3).unwrap(), vec![1, 3, 0]);
        assert!(matches!(top_b(&[0.5, 0.5], 3), Err(Error::Config(_))));
    }

    #[test]
    fn zero_rows_give_identity_block() {
        let mt = MappingTensor::from_rows(&Tensor::zeros(&[4, 16])).unwrap();
        let want = Tensor::<f32>::from_fn(&[4, 16], |i| if i % 16 == i / 16 { 1.0 } else { 0.0 });
        assert_eq!(mt.t, want);
        let ws = Tensor::<f32>::from_fn(&[16, 4], |i| if i % 4 == i / 4 { 1.0 } else { 0.0 });
        assert_eq!(mt.t_star, ws);
        let sq = MappingTensor::from_rows(&Tensor::ones(&[3, 3])).unwrap();
        assert_eq!(sq.t, Tensor::eye(3));
        assert_eq!(sq.t_star, Tensor::eye(3));
    }

    #[test]
    fn load_balance_values() {
        let u = RouterState { p: vec![1.0 / 16.0; 16], f: vec![1.0 / 16.0; 16] };
        assert!((load_balance_loss(&u) - 0.0625).abs() < 1e-15);
        let mut one = vec![0.0; 16];
        one[3] = 1.0;
        assert_eq!(load_balance_loss(&RouterState { p: one.clone(), f: one }), 1.0);
    }

    #[test]
    fn router_state_from_routes() {
        let rs = RouterState::from_routes(&[
            (vec![0.5, 0.25, 0.25], vec![0, 1]),
            (vec![0.25, 0.25, 0.5], vec![2, 0]),
        ])
        .unwrap();
        assert_eq!(rs.p, vec![0.375, 0.25, 0.375]);
        assert_eq!(rs.f, vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn mit_forward_shapes_and_identity_block() {
        let cfg = MitConfig::default();
        let mut prng = Prng::new(9);
        let params = init_mit(&cfg, &mut prng).unwrap();
        let tape = Tape::<f32>::new();
        let p = params.bind_const(&tape);
        let x = tape.constant(prng.uniform_tensor(&[4, 16, 16], 0.0, 1.0));
        let out = mit_forward(&tape, &p, &cfg, x).unwrap();
        let mt = MappingTensor::from_output(&tape, &out);
        assert_eq!(mt.t.shape(), &[4, 16]);
        assert_eq!(mt.selected.len(), 4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(mt.t.data()[i * 16 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
        let s: f32 = mt.probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}
