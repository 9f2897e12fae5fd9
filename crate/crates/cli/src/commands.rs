//! The six subcommands. Each writes its files, reports progress to `out`
//! and returns what it measured.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use idm_core::data::{self, volume_file_name};
use idm_core::diffusion::{self, cosine_schedule, AdamW, COSINE_S};
use idm_core::iunet::{checkpoint_config, IUNet, IUNetConfig, TimeCond};
use idm_core::metrics::{self, MetricReport};
use idm_core::revgraph::{Mode, Node};
use idm_core::tensor::meter;
use idm_core::{DType, Prng, Scalar, Tensor};

use crate::config::{scaled_model, RunConfig};
use crate::{CliError, Result};

fn say(out: &mut dyn Write, line: std::fmt::Arguments) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn write_row(w: &mut impl Write, path: &Path, row: std::fmt::Arguments) -> Result<()> {
    writeln!(w, "{row}").map_err(|e| CliError::io(path, e))
}

fn flush(w: &mut impl Write, path: &Path) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

// ---------------------------------------------------------------- gen-data

pub const MANIFEST: &str = "manifest.txt";

/// Writes `n` phantoms and a manifest of per-file SHA-256 digests. Returns
/// the digest of the manifest itself.
pub fn gen_data(dir: &Path, n: usize, edge: usize, seed: u64, out: &mut dyn Write) -> Result<String> {
    create_dir(dir)?;
    let vols = data::gen_dataset::<f32>(seed, n, edge)?;
    let mut manifest = String::new();
    for (i, v) in vols.iter().enumerate() {
        let name = volume_file_name(i);
        let path = dir.join(&name);
        let bytes = data::volume_bytes(&v.tensor, &path)?;
        std::fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
        manifest.push_str(&format!("{}  {name}\n", hex::encode(Sha256::digest(&bytes))));
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, &manifest).map_err(|e| CliError::io(&path, e))?;
    let digest = hex::encode(Sha256::digest(manifest.as_bytes()));
    say(out, format_args!("wrote {n} volumes of edge {edge} to {}", dir.display()))?;
    say(out, format_args!("manifest sha256 {digest}"))?;
    Ok(digest)
}

// ------------------------------------------------------------------- train

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub mode: Option<Mode>,
    pub out: PathBuf,
    pub log: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub peak_bytes: Vec<usize>,
    pub flops_per_step: u64,
    /// Largest `‖QᵀQ − I‖` over the resampling blocks after each step.
    pub orthogonality_errors: Vec<f64>,
}

impl TrainSummary {
    /// Mean loss of the last `k` steps over the mean of the first `k`.
    pub fn loss_ratio(&self, k: usize) -> f64 {
        let k = k.min(self.losses.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        mean(&self.losses[self.losses.len() - k..]) / mean(&self.losses[..k])
    }
}

pub const TRAIN_LOG_HEADER: &str = "step,loss,lr,peak_bytes";

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> Result<TrainSummary> {
    let mut cfg = RunConfig::load(&args.config, &args.overrides)?;
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    match cfg.model.dtype {
        DType::F32 => train_typed::<f32>(&cfg, args, out),
        DType::F64 => train_typed::<f64>(&cfg, args, out),
    }
}

fn load_volumes<T: Scalar>(dir: &Path, edge: usize) -> Result<Vec<Tensor<T>>> {
    let files = data::list_volumes(dir)?;
    if files.is_empty() {
        return Err(CliError::Config(format!("no .idmv volumes in {}", dir.display())));
    }
    files
        .iter()
        .map(|f| {
            let v = data::volume_read::<T>(f)?;
            if v.shape() != [1, edge, edge, edge] {
                return Err(CliError::Config(format!(
                    "{} has shape {:?}, the model expects edge {edge}",
                    f.display(),
                    &v.shape()[1..]
                )));
            }
            Ok(v)
        })
        .collect()
}

fn train_typed<T: Scalar>(cfg: &RunConfig, args: &TrainArgs, out: &mut dyn Write) -> Result<TrainSummary> {
    let dir = cfg.data_dir.as_ref().expect("required key checked at parse time");
    let volumes = load_volumes::<T>(dir, cfg.model.volume_edge)?;
    let sched = cosine_schedule(cfg.model.timesteps, COSINE_S)?;
    let mut model = IUNet::<T>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut opt = AdamW::new(&model.params, &cfg.train);
    let mut log = create_file(&args.log)?;
    write_row(&mut log, &args.log, format_args!("{TRAIN_LOG_HEADER}"))?;
    say(
        out,
        format_args!(
            "training {} parameters on {} volumes, {} steps, mode {}",
            model.params.scalar_count(),
            volumes.len(),
            cfg.train.steps,
            cfg.mode.name()
        ),
    )?;
    let every = (cfg.train.steps / 10).max(1);
    let mut orthogonality_errors = Vec::with_capacity(cfg.train.steps);
    let result = diffusion::train(&mut model, &mut opt, &volumes, &cfg.train, &sched, cfg.mode, |m, r| {
        orthogonality_errors.push(m.orthogonality_error());
        write_row(&mut log, &args.log, format_args!("{},{},{},{}", r.step, r.loss.total, r.lr, r.peak_bytes))
            .map_err(|e| idm_core::Error::Io {
                path: args.log.clone(),
                source: std::io::Error::other(e.to_string()),
            })?;
        if r.step % every == 0 || r.step + 1 == cfg.train.steps {
            let _ = writeln!(out, "step {:>6}  loss {:.6}  lr {:.3e}  peak {} B", r.step, r.loss.total, r.lr, r.peak_bytes);
        }
        Ok(())
    });
    flush(&mut log, &args.log)?;
    let reports = result?;
    model.checkpoint_save(&args.out)?;
    let summary = TrainSummary {
        losses: reports.iter().map(|r| r.loss.total).collect(),
        peak_bytes: reports.iter().map(|r| r.peak_bytes).collect(),
        flops_per_step: reports.iter().map(|r| r.flops).max().unwrap_or(0),
        orthogonality_errors,
    };
    say(out, format_args!("checkpoint written to {}", args.out.display()))?;
    Ok(summary)
}

// ------------------------------------------------------------------ sample

/// Volumes generated per sampler batch.
const SAMPLE_CHUNK: usize = 4;

pub fn sample(ckpt: &Path, n: usize, seed: u64, dir: &Path, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let config = checkpoint_config(ckpt)?;
    match config.dtype {
        DType::F32 => sample_typed::<f32>(ckpt, n, seed, dir, out),
        DType::F64 => sample_typed::<f64>(ckpt, n, seed, dir, out),
    }
}

fn sample_typed<T: Scalar>(ckpt: &Path, n: usize, seed: u64, dir: &Path, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let model = IUNet::<T>::checkpoint_load(ckpt)?;
    let sched = cosine_schedule(model.config.timesteps, COSINE_S)?;
    let e = model.config.volume_edge;
    create_dir(dir)?;
    let mut prng = Prng::new(seed);
    let mut paths = Vec::with_capacity(n);
    while paths.len() < n {
        let b = SAMPLE_CHUNK.min(n - paths.len());
        let batch: Tensor<T> = diffusion::p_sample_loop(&model, &[b, 1, e, e, e], &mut prng, &sched)?;
        for i in 0..b {
            let path = dir.join(volume_file_name(paths.len()));
            data::volume_write(&path, &data::unstack(&batch, i)?)?;
            paths.push(path);
        }
        say(out, format_args!("sampled {}/{n}", paths.len()))?;
    }
    Ok(paths)
}

// --------------------------------------------------------------- roundtrip

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Parameters as constructed: every invertible block is the identity.
    Identity,
    /// Zero-initialized parameters filled with random values.
    Random,
}

#[derive(Debug, Clone)]
pub struct RoundtripArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub trials: usize,
    pub dtype: DType,
    pub init: Init,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundtripReport {
    /// Worst error per block type, keyed by type name.
    pub blocks: BTreeMap<String, f64>,
    pub trunk: f64,
    pub tolerance: f64,
}

pub fn roundtrip_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-4,
        DType::F64 => 1e-9,
    }
}

fn block_type(label: &str) -> &'static str {
    if label.contains(".c") {
        "coupling"
    } else if label.starts_with("down") {
        "split_down"
    } else {
        "merge_up"
    }
}

/// Model config from an optional config file; the data keys are not needed.
fn model_config(path: Option<&Path>, overrides: &[String]) -> Result<IUNetConfig> {
    let mut lines = vec!["data_dir=.".to_string()];
    lines.extend(overrides.iter().cloned());
    let cfg = match path {
        Some(p) => RunConfig::load(p, &lines)?,
        None => RunConfig::parse("", &lines)?,
    };
    Ok(cfg.model)
}

pub fn roundtrip(args: &RoundtripArgs, out: &mut dyn Write) -> Result<RoundtripReport> {
    let mut model_cfg = model_config(args.config.as_deref(), &args.overrides)?;
    model_cfg.dtype = args.dtype;
    let report = match args.dtype {
        DType::F32 => roundtrip_typed::<f32>(model_cfg, args)?,
        DType::F64 => roundtrip_typed::<f64>(model_cfg, args)?,
    };
    for (name, err) in &report.blocks {
        say(out, format_args!("{name:<12} max rel err {err:.3e}"))?;
    }
    say(
        out,
        format_args!("{:<12} max rel err {:.3e} (tolerance {:.0e})", "trunk", report.trunk, report.tolerance),
    )?;
    if !(report.trunk <= report.tolerance) {
        return Err(CliError::Numeric(format!(
            "trunk roundtrip error {:.3e} exceeds {:.0e}",
            report.trunk, report.tolerance
        )));
    }
    Ok(report)
}

fn roundtrip_typed<T: Scalar>(config: IUNetConfig, args: &RoundtripArgs) -> Result<RoundtripReport> {
    let mut model = IUNet::<T>::new(config, args.seed)?;
    if args.init == Init::Random {
        model.randomize_identity_params(args.seed ^ 0xA5A5, 1.0);
    }
    let c = &model.config;
    let (e, c0, timesteps) = (c.volume_edge, c.channels(0), c.timesteps);
    let mut prng = Prng::new(args.seed);
    let mut blocks = BTreeMap::new();
    let mut trunk = 0.0f64;
    for _ in 0..args.trials {
        let t = 1 + prng.below(timesteps);
        let h: Tensor<T> = prng.randn(&[1, c0, e, e, e])?;
        let v = model.trunk_forward(&h, t)?;
        let back = model.trunk_inverse(&v, TimeCond::Same(t))?;
        trunk = trunk.max(back.max_rel_diff(&h));

        // Same pass again, one node at a time.
        let (ctx, _) = model.conditioning(t)?;
        let mut state = vec![h];
        for i in model.trunk_range() {
            let node: &dyn Node<T> = model.graph().node(i);
            let (n_in, _) = node.arity();
            let inputs = state.split_off(state.len() - n_in);
            let outputs = node.forward(&model.params, &ctx, &inputs)?;
            let rebuilt = node.inverse(&model.params, &ctx, &outputs)?;
            let err = rebuilt.iter().zip(&inputs).map(|(r, x)| r.max_rel_diff(x)).fold(0.0, f64::max);
            let slot = blocks.entry(block_type(&node.label()).to_string()).or_insert(0.0f64);
            *slot = slot.max(err);
            state.extend(outputs);
        }
    }
    Ok(RoundtripReport {
        blocks,
        trunk,
        tolerance: roundtrip_tolerance(T::DTYPE),
    })
}

// --------------------------------------------------------------- bench-mem

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub edge: usize,
    pub levels: usize,
    pub blocks: Vec<usize>,
    pub modes: Vec<Mode>,
    pub batch: usize,
    pub seed: u64,
    pub dtype: DType,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchRow {
    pub mode: Mode,
    pub blocks: usize,
    pub peak_bytes: usize,
    pub flops: u64,
}

pub const BENCH_HEADER: &str = "mode,blocks,peak_bytes,flops";

/// Peak activation bytes and FLOPs of one training step (loss plus
/// backward) for every requested depth and mode.
pub fn bench_mem(args: &BenchArgs, out: &mut dyn Write) -> Result<Vec<BenchRow>> {
    if args.blocks.is_empty() || args.modes.is_empty() {
        return Err(CliError::Config("bench-mem needs at least one depth and one mode".into()));
    }
    let mut rows = Vec::new();
    for &blocks in &args.blocks {
        let mut model_cfg = scaled_model(args.edge, args.levels, blocks);
        model_cfg.dtype = args.dtype;
        for &mode in &args.modes {
            let row = match args.dtype {
                DType::F32 => bench_one::<f32>(&model_cfg, mode, args)?,
                DType::F64 => bench_one::<f64>(&model_cfg, mode, args)?,
            };
            say(
                out,
                format_args!("{:<10} blocks {:>2}  peak {:>12} B  flops {:>14}", mode.name(), blocks, row.peak_bytes, row.flops),
            )?;
            rows.push(row);
        }
    }
    let mut csv = create_file(&args.out)?;
    write_row(&mut csv, &args.out, format_args!("{BENCH_HEADER}"))?;
    for r in &rows {
        write_row(&mut csv, &args.out, format_args!("{},{},{},{}", r.mode.name(), r.blocks, r.peak_bytes, r.flops))?;
    }
    flush(&mut csv, &args.out)?;
    Ok(rows)
}

fn bench_one<T: Scalar>(config: &IUNetConfig, mode: Mode, args: &BenchArgs) -> Result<BenchRow> {
    let mut model = IUNet::<T>::new(config.clone(), args.seed)?;
    let vols = data::gen_dataset::<T>(args.seed, args.batch, args.edge)?;
    let x0 = data::stack(&vols.iter().map(|v| &v.tensor).collect::<Vec<_>>())?;
    let sched = cosine_schedule(config.timesteps, COSINE_S)?;
    let mut prng = Prng::new(args.seed);
    let t = config.timesteps / 2;
    let eps: Tensor<T> = prng.randn(x0.shape())?;
    let x_t = diffusion::q_sample(&x0, t, &eps, &sched)?;
    drop(x0);
    let (res, flops) = meter::count_flops(|| diffusion::loss_and_grads(&mut model, &x_t, &eps, t, 0.0, 0.0, mode));
    let (_, report) = res?;
    Ok(BenchRow {
        mode,
        blocks: config.blocks_per_level,
        peak_bytes: report.peak_bytes,
        flops,
    })
}

// ----------------------------------------------------------------- metrics

pub const METRICS_HEADER: &str = "name,psnr,ssim,mae";

/// Compares same-named volumes in two directories; the last CSV row is the mean.
pub fn metrics(a: &Path, b: &Path, csv_path: &Path, out: &mut dyn Write) -> Result<(Vec<(String, MetricReport)>, MetricReport)> {
    let names = |dir: &Path| -> Result<Vec<String>> {
        Ok(data::list_volumes(dir)?
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect())
    };
    let (na, nb) = (names(a)?, names(b)?);
    if na != nb {
        return Err(CliError::Format(format!(
            "{} holds {} volumes and {} holds {}; names must pair up",
            a.display(),
            na.len(),
            b.display(),
            nb.len()
        )));
    }
    if na.is_empty() {
        return Err(CliError::Format(format!("no .idmv volumes in {}", a.display())));
    }
    let mut rows = Vec::with_capacity(na.len());
    for name in &na {
        let va = data::volume_read::<f64>(&a.join(name))?;
        let vb = data::volume_read::<f64>(&b.join(name))?;
        rows.push((name.clone(), metrics::evaluate(&va, &vb)?));
    }
    let mean = metrics::mean_report(&rows.iter().map(|r| r.1).collect::<Vec<_>>()).expect("non-empty");
    let mut csv = create_file(csv_path)?;
    write_row(&mut csv, csv_path, format_args!("{METRICS_HEADER}"))?;
    for (name, r) in rows.iter().map(|(n, r)| (n.as_str(), r)).chain(std::iter::once(("mean", &mean))) {
        write_row(&mut csv, csv_path, format_args!("{name},{},{},{}", r.psnr_db, r.ssim, r.mae))?;
    }
    flush(&mut csv, csv_path)?;
    say(
        out,
        format_args!("{} pairs: psnr {:.3} dB  ssim {:.4}  mae {:.4}", rows.len(), mean.psnr_db, mean.ssim, mean.mae),
    )?;
    Ok((rows, mean))
}
