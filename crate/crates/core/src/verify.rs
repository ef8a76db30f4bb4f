//! Runtime invariant suites behind `bridgepan verify`.

use std::rc::Rc;
use std::time::Instant;

use serde::Serialize;

use crate::bridge::{
    eps_from_z0, measurement_residual, nfe_grid, reverse_step_eps, reverse_step_z0, simulate_sde, BridgeSchedule,
    DegradeOp,
};
use crate::error::{Error, Result};
use crate::moe::{attention_pool, load_balance_loss, mapping_from_rows, top_b, MappingTensor, RouterState};
use crate::net::{
    init_unet, interaction_space_dim, linear_attention, truncated_hadamard_series, unet_forward, Layers, SeriesKind,
    UNetConfig, Variant,
};
use crate::params::{he_normal, Bound, ParamStore};
use crate::raster::resample::{bicubic_map, degrade_map};
use crate::tensor::{Prng, Tape, Tensor, UnaryKind, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Bridge,
    Kernels,
    Grad,
    Moe,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bridge" => Ok(Suite::Bridge),
            "kernels" => Ok(Suite::Kernels),
            "grad" => Ok(Suite::Grad),
            "moe" => Ok(Suite::Moe),
            "all" => Ok(Suite::All),
            _ => Err(Error::config(format!("unknown suite {s:?} (expected bridge, kernels, grad, moe or all)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn check(suite: &'static str, name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Check { suite, name: name.to_string(), passed, detail, seconds: start.elapsed().as_secs_f64() }
}

pub fn run(suite: Suite) -> Vec<Check> {
    match suite {
        Suite::Bridge => bridge_suite(),
        Suite::Kernels => kernel_suite(),
        Suite::Grad => grad_suite(),
        Suite::Moe => moe_suite(),
        Suite::All => [bridge_suite(), kernel_suite(), grad_suite(), moe_suite()].concat(),
    }
}

/// Plain-text table of check results.
pub fn format_table(checks: &[Check]) -> String {
    let mut s = format!("{:<8} {:<28} {:<5} {:>8}  detail\n", "suite", "check", "ok", "seconds");
    for c in checks {
        s.push_str(&format!(
            "{:<8} {:<28} {:<5} {:>8.3}  {}\n",
            c.suite,
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.seconds,
            c.detail
        ));
    }
    s
}

// ------------------------------------------------------------------ bridge

fn bridge_suite() -> Vec<Check> {
    const S: &str = "bridge";
    vec![
        check(S, "boundary", || {
            let mut worst = 0.0f64;
            for n in [10, 100, 1000] {
                let s = BridgeSchedule::new(n, 0.001, 1.0)?;
                worst = worst
                    .max((s.big_theta(0) - 1.0).abs())
                    .max(s.big_theta(n).abs())
                    .max(s.sigma(0).abs())
                    .max(s.sigma(n).abs());
            }
            Ok((worst <= 1e-12, format!("max deviation {worst:.1e}")))
        }),
        check(S, "sde_monte_carlo", || sde_vs_closed_form(10_000, 1000, 7)),
        check(S, "oracle_recovery", || {
            let sched = BridgeSchedule::new(1000, 0.001, 1.0)?;
            let mut p = Prng::new(11);
            let z0: Tensor<f32> = p.gaussian_tensor(&[16, 16, 16]);
            let ze: Tensor<f32> = p.gaussian_tensor(&[16, 16, 16]);
            let mut worst = 0.0f64;
            for nfe in [1, 3, 5, 10] {
                let mut z = ze.clone();
                for w in nfe_grid(1000, nfe)?.windows(2) {
                    z = reverse_step_z0(&z, &ze, &z0, w[0], w[1], &sched)?;
                }
                worst = worst.max(z.max_abs_diff(&z0));
            }
            Ok((worst < 1e-5, format!("max error {worst:.1e}")))
        }),
        check(S, "mode_equivalence", || {
            let sched = BridgeSchedule::new(1000, 0.001, 1.0)?;
            let mut p = Prng::new(12);
            let mut worst = 0.0f64;
            for _ in 0..100 {
                let t = p.int_inclusive(2, 999);
                let s = p.int_inclusive(0, t - 1);
                let zt: Tensor<f64> = p.gaussian_tensor(&[4, 4, 4]);
                let ze: Tensor<f64> = p.gaussian_tensor(&[4, 4, 4]);
                let z0: Tensor<f64> = p.gaussian_tensor(&[4, 4, 4]);
                let eps = eps_from_z0(&zt, &ze, &z0, t, &sched)?;
                let a = reverse_step_z0(&zt, &ze, &z0, t, s, &sched)?;
                let b = reverse_step_eps(&zt, &ze, &eps, t, s, &sched)?;
                worst = worst.max(a.max_abs_diff(&b));
            }
            Ok((worst < 1e-8, format!("max disagreement {worst:.1e}")))
        }),
    ]
}

/// Compares Euler–Maruyama paths against the closed-form marginal at a
/// quarter, half and three quarters of the horizon.
pub fn sde_vs_closed_form(paths: usize, substeps: usize, seed: u64) -> Result<(bool, String)> {
    let sched = BridgeSchedule::new(100, 0.5, 1.0)?;
    let (z0, ze) = (1.0, -0.5);
    let mut p = Prng::new(seed);
    let probes = [25usize, 50, 75];
    let mut samples = vec![Vec::with_capacity(paths); probes.len()];
    for _ in 0..paths {
        let path = simulate_sde(z0, ze, &sched, substeps, 1.0, &mut p)?;
        for (k, &t) in probes.iter().enumerate() {
            samples[k].push(path[t]);
        }
    }
    let mut ok = true;
    let mut detail = String::new();
    for (k, &t) in probes.iter().enumerate() {
        let v = &samples[k];
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        let want_m = ze + (z0 - ze) * sched.big_theta(t);
        let want_v = sched.sigma(t).powi(2);
        let se_m = (want_v / n).sqrt();
        let se_v = want_v * (2.0 / (n - 1.0)).sqrt();
        let (zm, zv) = ((m - want_m).abs() / se_m, (var - want_v).abs() / se_v);
        ok &= zm < 4.0 && zv < 4.0;
        detail.push_str(&format!("t={t}: mean {zm:.2}se var {zv:.2}se; "));
    }
    Ok((ok, detail.trim_end_matches("; ").to_string()))
}

// ------------------------------------------------------------------ kernels

fn kernel_suite() -> Vec<Check> {
    const S: &str = "kernels";
    vec![
        check(S, "geometric_tail_bound", || {
            let u: Vec<f64> = (0..=180).map(|i| -0.9 + 0.01 * i as f64).collect();
            let tape = Tape::<f64>::new();
            let uv = tape.constant(Tensor::new(&[u.len()], u.clone())?);
            let s = tape.value(truncated_hadamard_series(&tape, uv, 30, SeriesKind::Geometric)?);
            let closed = tape.value(tape.unary(UnaryKind::Geometric, uv)?);
            let mut worst = f64::NEG_INFINITY;
            for (i, &x) in u.iter().enumerate() {
                let bound = x.abs().powi(31) / (1.0 - x.abs());
                worst = worst.max((closed.data()[i] - s.data()[i]).abs() - bound);
            }
            Ok((worst <= 1e-12, format!("max excess over bound {worst:.1e}")))
        }),
        check(S, "exponential_remainder", || {
            let u: Vec<f64> = (0..=600).map(|i| -3.0 + 0.01 * i as f64).collect();
            let tape = Tape::<f64>::new();
            let uv = tape.constant(Tensor::new(&[u.len()], u.clone())?);
            let s = tape.value(truncated_hadamard_series(&tape, uv, 20, SeriesKind::Exponential)?);
            let fact21: f64 = (1..=21).map(|k| k as f64).product();
            let mut worst = f64::NEG_INFINITY;
            let mut max_err = 0.0f64;
            for (i, &x) in u.iter().enumerate() {
                let err = (x.exp() - s.data()[i]).abs();
                let bound = x.abs().powi(21) / fact21 * x.max(0.0).exp();
                worst = worst.max(err - bound);
                max_err = max_err.max(err);
            }
            Ok((worst <= 1e-13, format!("max error {max_err:.2e}, max excess over remainder bound {worst:.1e}")))
        }),
        check(S, "interaction_dim_enumeration", || {
            let mut bad = Vec::new();
            for d in 1..=4u64 {
                for k in 0..=4u64 {
                    let n = count_monomials(d as usize, k as usize);
                    if interaction_space_dim(d, k)? != n {
                        bad.push((d, k));
                    }
                }
            }
            Ok((bad.is_empty(), format!("mismatches {bad:?}")))
        }),
        check(S, "interaction_dim_pascal", || {
            let mut bad = Vec::new();
            for d in 2..=8u64 {
                for k in 1..=8u64 {
                    let lhs = interaction_space_dim(d, k)?;
                    if lhs != interaction_space_dim(d - 1, k)? + interaction_space_dim(d, k - 1)? {
                        bad.push((d, k));
                    }
                }
            }
            Ok((bad.is_empty(), format!("mismatches {bad:?}")))
        }),
    ]
}

/// Number of non-decreasing `k`-tuples over `d` symbols.
pub fn count_monomials(d: usize, k: usize) -> u64 {
    fn go(d: usize, k: usize, lo: usize) -> u64 {
        if k == 0 {
            return 1;
        }
        (lo..d).map(|v| go(d, k - 1, v)).sum()
    }
    go(d, k, 0)
}

// ------------------------------------------------------------------ moe

fn moe_suite() -> Vec<Check> {
    const S: &str = "moe";
    vec![
        check(S, "projection_round_trip", || {
            let mut p = Prng::new(21);
            let (mut worst_rt, mut worst_id) = (0.0f64, 0.0f64);
            for b in [4usize, 7, 8, 10] {
                for _ in 0..50 {
                    let rows: Tensor<f32> = p.gaussian_tensor(&[b, 16]);
                    let mt = MappingTensor::from_rows(&rows)?;
                    let x: Tensor<f32> = p.uniform_tensor(&[b, 8, 8], 0.0, 1.0);
                    let back = mt.unproject(&mt.project(&x)?)?;
                    worst_rt = worst_rt.max(back.max_abs_diff(&x));
                    worst_id = worst_id.max(gram_identity_error(&mt));
                }
            }
            Ok((worst_rt < 1e-5 && worst_id < 1e-5, format!("round trip {worst_rt:.1e}, |T T* - I|_F {worst_id:.1e}")))
        }),
        check(S, "load_balance_uniform", || {
            let rs = RouterState { p: vec![1.0 / 16.0; 16], f: vec![1.0 / 16.0; 16] };
            let v = load_balance_loss(&rs);
            Ok(((v - 0.0625).abs() < 1e-12, format!("loss {v}")))
        }),
        check(S, "top_b_ordering", || {
            let sel = top_b(&[0.1, 0.3, 0.3, 0.2, 0.1], 4)?;
            Ok((sel == [1, 2, 3, 0], format!("selected {sel:?}")))
        }),
    ]
}

/// Frobenius norm of `T T* − I`, computed in double precision.
pub fn gram_identity_error(mt: &MappingTensor) -> f64 {
    let (b, c) = (mt.bands(), mt.latent());
    let mut acc = 0.0;
    for i in 0..b {
        for j in 0..b {
            let v: f64 = (0..c).map(|k| mt.t.data()[i * c + k] as f64 * mt.t_star.data()[k * b + j] as f64).sum();
            let e = v - if i == j { 1.0 } else { 0.0 };
            acc += e * e;
        }
    }
    acc.sqrt()
}

// ------------------------------------------------------------------ gradients

type Builder<'a> = dyn Fn(&Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Norm-wise relative error between the tape gradient of `sum(w ⊙ f(x))`
/// and central differences. `sample` restricts the finite differences to
/// the listed `(input, index)` pairs.
pub fn gradient_error(inputs: &[Tensor<f64>], f: &Builder, sample: Option<&[(usize, usize)]>, seed: u64) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let w: Tensor<f64> = Prng::new(!seed).gaussian_tensor(&tape.shape(out));
    let loss = tape.sum(tape.mul(out, tape.constant(w.clone()))?)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(tape.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
    };
    let all: Vec<(usize, usize)>;
    let pairs = match sample {
        Some(s) => s,
        None => {
            all = inputs.iter().enumerate().flat_map(|(i, x)| (0..x.numel()).map(move |j| (i, j))).collect();
            &all
        }
    };
    let mut xs = inputs.to_vec();
    let (mut num2, mut den_a, mut den_n) = (0.0, 0.0, 0.0);
    for &(i, j) in pairs {
        let x0 = xs[i].data()[j];
        let h = 1e-6 * x0.abs().max(1.0);
        xs[i].data_mut()[j] = x0 + h;
        let lp = eval(&xs)?;
        xs[i].data_mut()[j] = x0 - h;
        let lm = eval(&xs)?;
        xs[i].data_mut()[j] = x0;
        let n = (lp - lm) / (2.0 * h);
        let a = analytic[i].data()[j];
        num2 += (a - n).powi(2);
        den_a += a * a;
        den_n += n * n;
    }
    Ok(num2.sqrt() / den_a.sqrt().max(den_n.sqrt()).max(1e-12))
}

fn rand(p: &mut Prng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    p.uniform_tensor(shape, lo, hi)
}

/// `(name, inputs, builder)` cases covering every differentiable tape op.
#[allow(clippy::type_complexity)]
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Box<Builder<'static>>)> {
    let mut p = Prng::new(31);
    let mut v: Vec<(&'static str, Vec<Tensor<f64>>, Box<Builder<'static>>)> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($inp:expr),*], $f:expr) => {
            v.push(($name, vec![$($inp),*], Box::new($f)));
        };
    }
    let a = rand(&mut p, &[3, 4], -1.0, 1.0);
    let b = rand(&mut p, &[3, 4], -1.0, 1.0);
    let pos = rand(&mut p, &[3, 4], 0.5, 2.0);
    let row = rand(&mut p, &[4], -1.0, 1.0);
    case!("add_broadcast", [a.clone(), row.clone()], |t, x| t.add(x[0], x[1]));
    case!("sub", [a.clone(), b.clone()], |t, x| t.sub(x[0], x[1]));
    case!("mul_broadcast", [a.clone(), row.clone()], |t, x| t.mul(x[0], x[1]));
    case!("div", [a.clone(), pos.clone()], |t, x| t.div(x[0], x[1]));
    case!("pow", [pos.clone(), b.clone()], |t, x| t.pow(x[0], x[1]));
    case!("add_scalar", [a.clone()], |t, x| t.add_scalar(x[0], 0.7));
    case!("mul_scalar", [a.clone()], |t, x| t.mul_scalar(x[0], -1.3));
    case!("pow_scalar", [pos.clone()], |t, x| t.pow_scalar(x[0], 2.5));
    case!("neg", [a.clone()], |t, x| t.neg(x[0]));
    case!("exp", [a.clone()], |t, x| t.exp(x[0]));
    case!("ln", [pos.clone()], |t, x| t.ln(x[0]));
    case!("tanh", [a.clone()], |t, x| t.tanh(x[0]));
    case!("recip", [pos.clone()], |t, x| t.recip(x[0]));
    case!("abs", [pos.map(|v| if v > 1.2 { v } else { -v })], |t, x| t.abs(x[0]));
    case!("sqrt", [pos.clone()], |t, x| t.sqrt(x[0]));
    case!("sigmoid", [a.clone()], |t, x| t.sigmoid(x[0]));
    case!("silu", [a.clone()], |t, x| t.silu(x[0]));
    case!("relu", [pos.map(|v| if v > 1.2 { v } else { -v })], |t, x| t.relu(x[0]));
    case!("elu", [pos.map(|v| if v > 1.2 { v } else { -v })], |t, x| t.elu(x[0]));
    case!("geometric", [a.map(|v| 0.9 * v)], |t, x| t.unary(UnaryKind::Geometric, x[0]));
    case!("matmul", [rand(&mut p, &[3, 5], -1.0, 1.0), rand(&mut p, &[5, 2], -1.0, 1.0)], |t, x| t.matmul(x[0], x[1]));
    case!(
        "matmul_batched_broadcast",
        [rand(&mut p, &[2, 3, 4], -1.0, 1.0), rand(&mut p, &[4, 2], -1.0, 1.0)],
        |t, x| t.matmul(x[0], x[1])
    );
    case!("transpose", [rand(&mut p, &[2, 3, 4], -1.0, 1.0)], |t, x| t.transpose(x[0]));
    let m = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 2.0 } else { 0.0 });
    let m = m.zip_with(&rand(&mut p, &[3, 3], -0.3, 0.3), |a, b| a + b).expect("same shape");
    case!("inverse", [m], |t, x| t.inverse(x[0]));
    let img = rand(&mut p, &[2, 3, 6, 6], -1.0, 1.0);
    let ker = rand(&mut p, &[4, 3, 3, 3], -0.5, 0.5);
    case!("conv2d_s1", [img.clone(), ker.clone()], |t, x| t.conv2d(x[0], x[1], 1, 1));
    case!("conv2d_s2", [img.clone(), ker.clone()], |t, x| t.conv2d(x[0], x[1], 2, 1));
    case!("conv2d_1x1", [img.clone(), rand(&mut p, &[2, 3, 1, 1], -0.5, 0.5)], |t, x| t.conv2d(x[0], x[1], 1, 0));
    case!("axis_map_bicubic", [rand(&mut p, &[2, 4, 3], -1.0, 1.0)], |t, x| {
        t.axis_map(x[0], 1, Rc::new(bicubic_map(4, 2)?))
    });
    case!("axis_map_degrade", [rand(&mut p, &[2, 3, 8], -1.0, 1.0)], |t, x| {
        t.axis_map(x[0], 2, Rc::new(degrade_map(8, 2)?))
    });
    case!("sum", [a.clone()], |t, x| t.sum(x[0]));
    case!("mean", [a.clone()], |t, x| t.mean(x[0]));
    case!("sum_axis", [rand(&mut p, &[2, 3, 4], -1.0, 1.0)], |t, x| t.sum_axis(x[0], 1));
    case!("softmax", [a.clone()], |t, x| t.softmax(x[0]));
    case!("norm2", [a.clone()], |t, x| t.norm2(x[0]));
    case!("normalize_rows", [a.clone()], |t, x| t.normalize_rows(x[0], 1e-8));
    case!("reshape", [a.clone()], |t, x| t.reshape(x[0], &[2, 6]));
    case!("permute", [rand(&mut p, &[2, 3, 4], -1.0, 1.0)], |t, x| t.permute(x[0], &[2, 0, 1]));
    case!("concat", [a.clone(), rand(&mut p, &[2, 4], -1.0, 1.0)], |t, x| t.concat(&[x[0], x[1]], 0));
    case!("slice", [rand(&mut p, &[2, 5, 3], -1.0, 1.0)], |t, x| t.slice(x[0], 1, 1, 3));
    case!("series_geometric", [a.map(|v| 0.8 * v)], |t, x| {
        truncated_hadamard_series(t, x[0], 6, SeriesKind::Geometric)
    });
    case!("series_exponential", [a.clone()], |t, x| {
        truncated_hadamard_series(t, x[0], 6, SeriesKind::Exponential)
    });
    case!("linear_attention", [
        rand(&mut p, &[5, 3], -1.0, 1.0),
        rand(&mut p, &[5, 3], -1.0, 1.0),
        rand(&mut p, &[5, 2], -1.0, 1.0)
    ], |t, x| linear_attention(t, x[0], x[1], x[2]));
    case!("attention_pool", [rand(&mut p, &[5, 4], -1.0, 1.0), rand(&mut p, &[4], -1.0, 1.0)], |t, x| {
        attention_pool(t, x[0], x[1])
    });
    case!("mapping_tensor", [rand(&mut p, &[3, 6], -1.0, 1.0)], |t, x| {
        let (a, b) = mapping_from_rows(t, x[0])?;
        t.add(t.sum(a)?, t.sum(b)?)
    });
    v
}

/// Parameters with a randomised head so every layer receives gradient.
pub fn gradcheck_params(cfg: &UNetConfig, seed: u64) -> Result<ParamStore<f64>> {
    let mut prng = Prng::new(seed);
    let mut ps = init_unet(cfg, &mut prng)?;
    let shape = ps.get("unet.head.w")?.shape().to_vec();
    let fan = shape[1] * shape[2] * shape[3];
    *ps.get_mut("unet.head.w")? = he_normal(&mut prng, &shape, fan);
    Ok(ps.cast())
}

/// Relative gradient error of the micro denoiser over a `fraction` sample of
/// its parameters.
pub fn denoiser_gradient_error(fraction: f64, seed: u64) -> Result<f64> {
    let cfg = UNetConfig::variant(Variant::Micro, 16);
    let ps = gradcheck_params(&cfg, seed)?;
    let names: Vec<String> = ps.iter().map(|(n, _)| n.clone()).collect();
    let inputs: Vec<Tensor<f64>> = ps.iter().map(|(_, t)| t.clone()).collect();
    let mut p = Prng::new(seed ^ 0x5eed);
    let zt: Tensor<f64> = p.gaussian_tensor(&[1, 16, 8, 8]);
    let ze: Tensor<f64> = p.gaussian_tensor(&[1, 16, 8, 8]);
    let pan: Tensor<f64> = p.uniform_tensor(&[1, 1, 8, 8], 0.0, 1.0);
    let total: usize = inputs.iter().map(|t| t.numel()).sum();
    let want = ((total as f64 * fraction).ceil() as usize).max(1);
    let mut sample = Vec::with_capacity(want);
    for _ in 0..want {
        let mut k = p.int_inclusive(0, total - 1);
        let mut i = 0;
        while k >= inputs[i].numel() {
            k -= inputs[i].numel();
            i += 1;
        }
        sample.push((i, k));
    }
    let f = move |tape: &Tape<f64>, vars: &[Var]| -> Result<Var> {
        let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        unet_forward(tape, &bound, &cfg, tape.constant(zt.clone()), tape.constant(ze.clone()), tape.constant(pan.clone()), &[300])
    };
    gradient_error(&inputs, &f, Some(&sample), seed)
}

/// Gradient of the measurement residual through a smooth stand-in
/// denoiser `ẑ0 = tanh(A ⊙ z_t) + z_t`, as used by the guidance step.
pub fn guidance_gradient_error(seed: u64) -> Result<f64> {
    let mut p = Prng::new(seed);
    let b = 4;
    let mt = MappingTensor::from_rows(&p.gaussian_tensor(&[b, 16]))?;
    let (t, ts) = (mt.t.cast::<f64>(), mt.t_star.cast::<f64>());
    let ze: Tensor<f64> = p.gaussian_tensor(&[16, 8, 8]);
    let a: Tensor<f64> = p.uniform_tensor(&[16, 8, 8], 0.5, 1.5);
    let zt: Tensor<f64> = p.gaussian_tensor(&[16, 8, 8]);
    let op = DegradeOp::new(8, 8, 4)?;
    let f = move |tape: &Tape<f64>, x: &[Var]| -> Result<Var> {
        let z0 = tape.add(tape.tanh(tape.mul(x[0], tape.constant(a.clone()))?)?, x[0])?;
        measurement_residual(tape, z0, tape.constant(ze.clone()), tape.constant(t.clone()), tape.constant(ts.clone()), &op)
    };
    gradient_error(&[zt], &f, None, seed)
}

fn grad_suite() -> Vec<Check> {
    const S: &str = "grad";
    let mut out: Vec<Check> = op_cases()
        .into_iter()
        .map(|(name, inputs, f)| {
            check(S, name, || {
                let e = gradient_error(&inputs, &*f, None, 41)?;
                Ok((e < 1e-4, format!("rel err {e:.1e}")))
            })
        })
        .collect();
    out.push(check(S, "layers", || {
        let mut worst = 0.0f64;
        for (name, e) in layer_gradient_errors(43)? {
            if e >= worst {
                worst = e;
            }
            if e >= 1e-4 {
                return Ok((false, format!("{name}: rel err {e:.1e}")));
            }
        }
        Ok((true, format!("max rel err {worst:.1e}")))
    }));
    out.push(check(S, "bps_guidance", || {
        let e = guidance_gradient_error(44)?;
        Ok((e < 1e-4, format!("rel err {e:.1e}")))
    }));
    out.push(check(S, "denoiser_end_to_end", || {
        let e = denoiser_gradient_error(0.01, 45)?;
        Ok((e < 1e-3, format!("rel err {e:.1e} over 1% of parameters")))
    }));
    out
}

/// Gradient errors for the composite UNet layers with random parameters.
pub fn layer_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let cfg = UNetConfig::variant(Variant::Micro, 16);
    let ps = gradcheck_params(&cfg, seed)?;
    let mut p = Prng::new(seed);
    let x: Tensor<f64> = p.gaussian_tensor(&[1, 8, 4, 4]);
    let pan: Tensor<f64> = p.gaussian_tensor(&[1, 8, 4, 4]);
    let temb: Tensor<f64> = p.gaussian_tensor(&[1, 32]);
    let mut out = Vec::new();
    let layer = |name: &'static str, f: &dyn Fn(&Layers<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]| {
        let g = |tape: &Tape<f64>, v: &[Var]| -> Result<Var> {
            let b = ps.bind_const(tape);
            f(&Layers::new(tape, &b), v)
        };
        gradient_error(inputs, &g, None, seed).map(|e| (name, e))
    };
    out.push(layer("rms_norm", &|l, v| l.rms_norm(v[0]), &[x.clone()])?);
    out.push(layer("res_block", &|l, v| l.res_block("unet.enc0.res", v[0], v[1]), &[x.clone(), temb.clone()])?);
    out.push(layer("idi_block", &|l, v| l.idi_block("unet.enc0.idi", v[0], v[1]), &[pan.clone(), x.clone()])?);
    out.push(layer("attention_linear", &|l, v| l.attention("unet.enc0.attn", v[0], crate::net::AttnKind::Linear), &[x.clone()])?);
    out.push(layer("attention_standard", &|l, v| l.attention("unet.enc1.attn", v[0], crate::net::AttnKind::Standard), &[x])?);
    Ok(out)
}
