//! Batch workflows behind the command-line front end. Every command writes
//! its outputs through temp-then-rename and records its resolved
//! configuration as `config.json` (or `<out>.config.json`) beside them.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baselines::{classical_pansharpen, Method};
use crate::bridge::GuidanceMode;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{aggregate_csv, no_reference_metrics, reference_metrics, MetricReport};
use crate::net::Variant;
use crate::pipeline::synth::synth_wald_pairs;
use crate::pipeline::{sample, train, Denoiser, LogRow, Model, ModelConfig, SampleConfig, TrainConfig};
use crate::raster::{make_wald_pair, read_png, read_raster, write_png_preview, write_raster, Raster, WaldPair};
use crate::verify::{self, Check, Suite};

pub const MANIFEST: &str = "manifest.json";

/// Reads a `.png` through the PNG importer and anything else as BPR.
pub fn load_raster(path: &Path) -> Result<Raster> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => read_png(path),
        _ => read_raster(path),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::config(format!("serialising {}: {e}", path.display())))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn write_config(path: &Path, command: &str, args: &impl Serialize) -> Result<()> {
    write_json(path, &json!({ "command": command, "version": env!("CARGO_PKG_VERSION"), "args": args }))
}

/// Sibling path `<file>.config.json`.
fn config_beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    out.with_file_name(name)
}

// ------------------------------------------------------------------ pairs

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairManifest {
    pub ratio: usize,
    pub ms: String,
    pub pan: String,
    pub reference: String,
    /// `[width, height, bands]` of each file.
    pub ms_dims: [usize; 3],
    pub pan_dims: [usize; 3],
    pub reference_dims: [usize; 3],
}

fn dims(r: &Raster) -> [usize; 3] {
    [r.width(), r.height(), r.bands()]
}

/// Writes `ms.bpr`, `pan.bpr`, `reference.bpr` and the manifest into `dir`.
pub fn write_pair(dir: &Path, pair: &WaldPair) -> Result<PairManifest> {
    ensure_dir(dir)?;
    write_raster(&dir.join("ms.bpr"), &pair.ms)?;
    write_raster(&dir.join("pan.bpr"), &pair.pan)?;
    write_raster(&dir.join("reference.bpr"), &pair.reference)?;
    let m = PairManifest {
        ratio: pair.ratio,
        ms: "ms.bpr".into(),
        pan: "pan.bpr".into(),
        reference: "reference.bpr".into(),
        ms_dims: dims(&pair.ms),
        pan_dims: dims(&pair.pan),
        reference_dims: dims(&pair.reference),
    };
    write_json(&dir.join(MANIFEST), &m)?;
    Ok(m)
}

pub fn read_pair(dir: &Path) -> Result<WaldPair> {
    let path = dir.join(MANIFEST);
    let bytes = crate::io::read_file(&path)?;
    let m: PairManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(e.column() as u64, format!("{}: {e}", path.display())))?;
    WaldPair::new(
        read_raster(&dir.join(&m.ms))?,
        read_raster(&dir.join(&m.pan))?,
        read_raster(&dir.join(&m.reference))?,
        m.ratio,
    )
}

/// A pair directory, or a directory whose sub-directories (in name order)
/// are pair directories.
pub fn read_dataset(dir: &Path) -> Result<Vec<WaldPair>> {
    if dir.join(MANIFEST).is_file() {
        return Ok(vec![read_pair(dir)?]);
    }
    let mut subs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    subs.sort();
    subs.iter().map(|p| read_pair(p)).collect()
}

// ------------------------------------------------------------------ degrade

#[derive(Clone, Debug, Serialize)]
pub struct DegradeArgs {
    pub ms: PathBuf,
    pub pan: PathBuf,
    pub ratio: usize,
    pub out: PathBuf,
}

pub fn cmd_degrade(a: &DegradeArgs) -> Result<PairManifest> {
    let ms = load_raster(&a.ms)?;
    let pan = load_raster(&a.pan)?;
    if pan.bands() != 1 {
        return Err(Error::dim(format!("{}: pan must have one band, has {}", a.pan.display(), pan.bands())));
    }
    let pair = make_wald_pair(&ms, &pan, a.ratio)?;
    let m = write_pair(&a.out, &pair)?;
    write_config(&a.out.join("config.json"), "degrade", a)?;
    Ok(m)
}

// ------------------------------------------------------------------ synth

#[derive(Clone, Debug, Serialize)]
pub struct SynthArgs {
    pub out: PathBuf,
    pub count: usize,
    pub bands: usize,
    pub size: usize,
    pub ratio: usize,
    pub seed: u64,
}

pub fn cmd_synth(a: &SynthArgs) -> Result<Vec<PathBuf>> {
    if a.count == 0 {
        return Err(Error::config("count must be positive"));
    }
    let pairs = synth_wald_pairs(a.count, a.bands, a.size, a.ratio, a.seed)?;
    ensure_dir(&a.out)?;
    let mut dirs = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let d = a.out.join(format!("pair{i:03}"));
        write_pair(&d, p)?;
        dirs.push(d);
    }
    write_config(&a.out.join("config.json"), "synth", a)?;
    Ok(dirs)
}

// ------------------------------------------------------------------ train

#[derive(Clone, Debug, Serialize)]
pub struct TrainArgs {
    pub data_dir: PathBuf,
    pub variant: Variant,
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
    pub gamma: f64,
    pub out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub rows: Vec<LogRow>,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutcome> {
    let data = read_dataset(&a.data_dir)?;
    if data.is_empty() {
        return Err(Error::config(format!("{} contains no training pairs", a.data_dir.display())));
    }
    let mut cfg = ModelConfig::new(a.variant);
    cfg.ratio = data[0].ratio;
    let model = Model::init(cfg, a.seed)?;
    let tcfg = TrainConfig { lr: a.lr, batch: a.batch, steps: a.steps, gamma: a.gamma, seed: a.seed };
    let (model, rows) = train(model, &data, &tcfg, |r| {
        if r.step == 1 || r.step % 50 == 0 {
            log::info!("step {} loss_ref {:.5} loss_aux {:.5}", r.step, r.loss_ref, r.loss_aux);
        }
    })?;
    ensure_dir(&a.out)?;
    let checkpoint = a.out.join("model.ckpt");
    model.save(&checkpoint)?;
    let mut csv = format!("{}\n", LogRow::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    let log = a.out.join("loss.csv");
    write_atomic(&log, csv.as_bytes())?;
    write_config(&a.out.join("config.json"), "train", &json!({ "cli": a, "model": model.cfg, "train": tcfg }))?;
    Ok(TrainOutcome { checkpoint, log, rows })
}

// ------------------------------------------------------------------ sharpen

#[derive(Clone, Debug, Serialize)]
pub struct SharpenArgs {
    pub ms: PathBuf,
    pub pan: PathBuf,
    pub ckpt: PathBuf,
    pub variant: Option<Variant>,
    pub nfe: usize,
    pub eta: f64,
    pub mode: GuidanceMode,
    pub oracle: Option<PathBuf>,
    pub preview: Option<PathBuf>,
    pub out: PathBuf,
}

/// RGB band indices when the names allow it, otherwise the first band.
pub fn preview_bands(r: &Raster) -> Vec<usize> {
    match (r.band_index("R"), r.band_index("G"), r.band_index("B")) {
        (Some(a), Some(b), Some(c)) => vec![a, b, c],
        _ => vec![0],
    }
}

pub fn cmd_sharpen(a: &SharpenArgs) -> Result<Raster> {
    let model = Model::load(&a.ckpt)?;
    if let Some(v) = a.variant {
        if v != model.cfg.variant {
            return Err(Error::config(format!(
                "checkpoint holds variant {} but {} was requested",
                model.cfg.variant.name(),
                v.name()
            )));
        }
    }
    let ms = load_raster(&a.ms)?;
    let pan = load_raster(&a.pan)?;
    if ms.bands() > model.cfg.mit.latent {
        return Err(Error::config(format!("{} bands exceed latent width {}", ms.bands(), model.cfg.mit.latent)));
    }
    let oracle = a.oracle.as_deref().map(load_raster).transpose()?;
    let denoiser = match &oracle {
        Some(r) => Denoiser::Oracle(r),
        None => Denoiser::Model,
    };
    let scfg = SampleConfig { nfe: a.nfe, eta: a.eta, mode: a.mode };
    let out = sample(&model, &ms, &pan, denoiser, &scfg)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_raster(&a.out, &out.fused)?;
    if let Some(p) = &a.preview {
        write_png_preview(p, &out.fused, &preview_bands(&out.fused))?;
    }
    write_config(
        &config_beside(&a.out),
        "sharpen",
        &json!({ "cli": a, "sample": scfg, "selected_experts": out.mapping.selected }),
    )?;
    Ok(out.fused)
}

// ------------------------------------------------------------------ eval

#[derive(Clone, Debug, Serialize)]
pub struct EvalArgs {
    pub fused: PathBuf,
    pub reference: Option<PathBuf>,
    pub ms: Option<PathBuf>,
    pub pan: Option<PathBuf>,
    pub ratio: Option<usize>,
    pub out: PathBuf,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<MetricReport> {
    let no_ref = a.ms.is_some() || a.pan.is_some();
    if a.reference.is_some() && no_ref {
        return Err(Error::Usage("--ref cannot be combined with --ms/--pan".into()));
    }
    let ratio = a.ratio.ok_or_else(|| Error::Usage("--ratio is required".into()))?;
    let fused = load_raster(&a.fused)?;
    let report = match (&a.reference, &a.ms, &a.pan) {
        (Some(r), None, None) => reference_metrics(&fused, &load_raster(r)?, ratio)?,
        (None, Some(m), Some(p)) => no_reference_metrics(&fused, &load_raster(m)?, &load_raster(p)?, ratio)?,
        _ => return Err(Error::Usage("give either --ref, or both --ms and --pan".into())),
    };
    ensure_dir(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    write_atomic(&a.out.join("report.csv"), aggregate_csv(std::slice::from_ref(&report)).as_bytes())?;
    write_config(&a.out.join("config.json"), "eval", a)?;
    Ok(report)
}

// ------------------------------------------------------------------ verify

pub fn cmd_verify(suite: Suite, out: Option<&Path>) -> Result<Vec<Check>> {
    let checks = verify::run(suite);
    if let Some(p) = out {
        write_json(p, &checks)?;
    }
    Ok(checks)
}

// ------------------------------------------------------------------ baseline

#[derive(Clone, Debug, Serialize)]
pub struct BaselineArgs {
    pub ms: PathBuf,
    pub pan: PathBuf,
    pub ratio: usize,
    /// `None` runs every method.
    pub method: Option<Method>,
    pub reference: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn cmd_baseline(a: &BaselineArgs) -> Result<Vec<(Method, MetricReport)>> {
    let ms = load_raster(&a.ms)?;
    let pan = load_raster(&a.pan)?;
    let reference = a.reference.as_deref().map(load_raster).transpose()?;
    let methods: Vec<Method> = match a.method {
        Some(m) => vec![m],
        None => Method::ALL.to_vec(),
    };
    let results = methods
        .par_iter()
        .map(|&m| {
            let fused = classical_pansharpen(&ms, &pan, a.ratio, m)?;
            let mut rep = no_reference_metrics(&fused, &ms, &pan, a.ratio)?;
            if let Some(r) = &reference {
                rep = reference_metrics(&fused, r, a.ratio)?.merge(rep);
            }
            Ok((m, fused, rep))
        })
        .collect::<Result<Vec<_>>>()?;
    ensure_dir(&a.out)?;
    let mut csv = String::from("method,psnr,ssim,ergas,sam,d_lambda,d_s,qnr\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (m, fused, rep) in &results {
        write_raster(&a.out.join(format!("{}.bpr", m.name())), fused)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.name(),
            cell(rep.psnr),
            cell(rep.ssim),
            cell(rep.ergas),
            cell(rep.sam),
            cell(rep.d_lambda),
            cell(rep.d_s),
            cell(rep.qnr)
        ));
    }
    write_atomic(&a.out.join("baselines.csv"), csv.as_bytes())?;
    write_config(&a.out.join("config.json"), "baseline", a)?;
    Ok(results.into_iter().map(|(m, _, r)| (m, r)).collect())
}
