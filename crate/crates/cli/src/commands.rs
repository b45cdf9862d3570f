//! The five verbs. Each returns `Ok` or a [`Failure`] carrying its exit
//! status; tables go to `out`, diagnostics to `err`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use colormamba::bench::{self, BenchRow};
use colormamba::checkpoint::Checkpoint;
use colormamba::data::{self, Pair};
use colormamba::gradcheck::{self, SuiteEntry};
use colormamba::metrics::{self, MetricReport};
use colormamba::networks::Colorizer;
use colormamba::ssm::ScanKernel;
use colormamba::train::{self, Trainer};
use colormamba::{ParamStore, Scalar};

use crate::config::{Precision, RunConfig};
use crate::{BenchMode, CmdResult, Command, Failure, EXIT_CHECKPOINT, EXIT_GRADCHECK, EXIT_USAGE};

type Out<'a> = &'a mut (dyn Write + Send);

pub fn dispatch(cmd: &Command, cfg: &RunConfig, out: Out, err: Out) -> CmdResult {
    match cmd {
        Command::Infer {
            nir,
            out: dst,
            checkpoint,
        } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
            cmd_infer(&ckpt, nir, dst, err)
        }
        Command::Train { resume, data, out: dir } => {
            let mut cfg = cfg.clone();
            if let Some(d) = data {
                cfg.data_dir = Some(d.clone());
            }
            if let Some(o) = dir {
                cfg.out_dir = o.clone();
            }
            cmd_train(&cfg, resume.as_deref(), out, err)
        }
        Command::Bench { mode } => cmd_bench(cfg, *mode, out),
        Command::Gradcheck => cmd_gradcheck(&gradcheck::suite(), cfg, out, err),
        Command::Eval { pred_dir, gt_dir, csv } => cmd_eval(pred_dir, gt_dir, *csv, out),
    }
}

/// Loads a checkpoint, mapping every failure to the checkpoint status.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.is_file() {
        return Err(Failure::new(
            EXIT_CHECKPOINT,
            format!("checkpoint not found: {}", path.display()),
        ));
    }
    Checkpoint::load(path).map_err(|e| {
        Failure::new(
            EXIT_CHECKPOINT,
            format!("cannot read checkpoint {}: {e}", path.display()),
        )
    })
}

fn checkpoint_failure(path: &Path) -> impl Fn(colormamba::Error) -> Failure + '_ {
    move |e| {
        Failure::new(
            EXIT_CHECKPOINT,
            format!("checkpoint {} does not fit: {e}", path.display()),
        )
    }
}

fn infer_typed<T: Scalar>(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    path: &Path,
    nir: &colormamba::Tensor64,
) -> Result<colormamba::Tensor64, Failure> {
    let mut store = ParamStore::<T>::new();
    let model = Colorizer::new(&mut store, &cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    ckpt.restore_store("gen", &mut store)
        .map_err(checkpoint_failure(path))?;
    Ok(train::predict(&model, &store, nir)?)
}

pub fn cmd_infer(checkpoint: &Path, nir_path: &Path, dst: &Path, err: Out) -> CmdResult {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = RunConfig::from_manifest(&ckpt).map_err(checkpoint_failure(checkpoint))?;
    let nir = data::read_gray(nir_path)?;
    let rgb = match cfg.precision {
        Precision::F64 => infer_typed::<f64>(&cfg, &ckpt, checkpoint, &nir)?,
        Precision::F32 => infer_typed::<f32>(&cfg, &ckpt, checkpoint, &nir)?,
    };
    data::write_rgb_png(dst, &rgb)?;
    let _ = writeln!(err, "wrote {}", dst.display());
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<Vec<Pair>, Failure> {
    if cfg.synthetic > 0 {
        return Ok(data::synthetic_pairs(cfg.synthetic, cfg.synthetic_size, cfg.seed));
    }
    let dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| Failure::new(EXIT_USAGE, "no training data: set paths.data, --data or data.synthetic"))?;
    Ok(data::load_pairs(dir)?)
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, out: Out, err: Out) -> CmdResult {
    let pairs = load_corpus(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    match cfg.precision {
        Precision::F64 => train_typed::<f64>(cfg, &pairs, resume, out, err),
        Precision::F32 => train_typed::<f32>(cfg, &pairs, resume, out, err),
    }
}

fn save(trainer_ckpt: Checkpoint, cfg: &RunConfig, path: &Path) -> CmdResult {
    let mut c = trainer_ckpt;
    cfg.write_manifest(&mut c);
    c.save(path)?;
    Ok(())
}

fn train_typed<T: Scalar>(cfg: &RunConfig, pairs: &[Pair], resume: Option<&Path>, out: Out, err: Out) -> CmdResult {
    let tc = cfg.train_config();
    let mut cfg = cfg.clone();
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let saved = RunConfig::from_manifest(&ckpt).map_err(checkpoint_failure(path))?;
            if saved.model != cfg.model {
                let _ = writeln!(err, "warning: using the model settings stored in {}", path.display());
            }
            cfg.model = saved.model;
            Trainer::<T>::from_checkpoint(&cfg.model, &tc, &cfg.loss, &ckpt).map_err(checkpoint_failure(path))?
        }
        None => Trainer::<T>::new(&cfg.model, &tc, &cfg.loss, pairs)?,
    };
    let _ = writeln!(
        err,
        "training {} pairs, {} generator parameters, surrogate mse {:.5}",
        pairs.len(),
        trainer.gen.numel(),
        trainer.surrogate.final_mse
    );
    let log_path = cfg.out_dir.join("train.log");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)?;
    let ckpt_path = cfg.checkpoint_path();
    while trainer.epoch < cfg.epochs {
        let stats = trainer.train_epoch(pairs)?;
        writeln!(out, "{stats}")?;
        writeln!(log, "{stats}")?;
        if cfg.checkpoint_every > 0 && trainer.epoch % cfg.checkpoint_every == 0 {
            save(trainer.to_checkpoint(), &cfg, &ckpt_path)?;
        }
    }
    save(trainer.to_checkpoint(), &cfg, &ckpt_path)?;
    let psnr = trainer.evaluate_psnr(pairs)?;
    let summary = format!(
        "final epoch={} step={} psnr_eval={psnr:.3}",
        trainer.epoch, trainer.counters.g_steps
    );
    writeln!(out, "{summary}")?;
    writeln!(log, "{summary}")?;
    let _ = writeln!(err, "checkpoint {}", ckpt_path.display());
    Ok(())
}

/// `t(L_i) / t(L_{i-1})` lines for each kernel.
pub fn scaling_lines(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    for kernel in [ScanKernel::Sequential, ScanKernel::Parallel] {
        let name = bench::kernel_name(kernel);
        let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.kernel == name).collect();
        for w in mine.windows(2) {
            s.push_str(&format!(
                "scaling {name} t({})/t({}) = {:.3}\n",
                w[1].len,
                w[0].len,
                w[1].seconds / w[0].seconds
            ));
        }
    }
    s
}

pub fn cmd_bench(cfg: &RunConfig, mode: BenchMode, out: Out) -> CmdResult {
    match mode {
        BenchMode::Scan => {
            let mut b = cfg.bench.clone();
            b.seed = cfg.seed;
            let rows = bench::bench_scan(&b)?;
            write!(out, "{}{}", bench::format_table(&rows), scaling_lines(&rows))?;
        }
        BenchMode::Scan2d => {
            let mut b = cfg.scan2d.clone();
            b.seed = cfg.seed;
            let rows = bench::bench_scan2d(&b)?;
            writeln!(
                out,
                "scan2d {}x{} N={} C={}",
                b.height, b.width, b.state_size, b.channels
            )?;
            write!(out, "{}", bench::format_table(&rows))?;
        }
    }
    Ok(())
}

/// Runs `entries` and prints one row per block. Fails with the gradient
/// status, naming every block over tolerance.
pub fn cmd_gradcheck(entries: &[SuiteEntry], cfg: &RunConfig, out: Out, err: Out) -> CmdResult {
    let mut gc = cfg.gradcheck.clone();
    gc.seed = cfg.seed;
    writeln!(
        out,
        "{:<28} {:>12} {:>8}  {:<6} worst",
        "block", "max_rel_err", "checked", "status"
    )?;
    let mut failed = Vec::new();
    for entry in entries {
        let r = gradcheck::run_suite(std::slice::from_ref(entry), &gc)?.remove(0);
        let ok = r.passed(gc.tolerance);
        writeln!(
            out,
            "{:<28} {:>12.3e} {:>8}  {:<6} {}",
            r.name,
            r.max_rel_err,
            r.checked,
            if ok { "ok" } else { "FAIL" },
            r.worst
        )?;
        if !ok {
            let _ = writeln!(
                err,
                "{} exceeds tolerance {:e}: {:e} at {}",
                r.name, gc.tolerance, r.max_rel_err, r.worst
            );
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_GRADCHECK,
            format!("gradient check failed for {}", failed.join(", ")),
        ))
    }
}

const IMAGE_EXTS: [&str; 3] = ["png", "pgm", "ppm"];

pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path, csv: bool, out: Out) -> CmdResult {
    let pred = data::list_images(pred_dir, &IMAGE_EXTS)?;
    let gt = data::list_images(gt_dir, &IMAGE_EXTS)?;
    let pairs = data::match_names(pred, gt, "pred", "gt")?;
    let rows = pairs
        .par_iter()
        .map(|(name, p, g)| {
            let r = MetricReport::compute(&data::read_rgb(p)?, &data::read_rgb(g)?)?;
            Ok((name.clone(), r))
        })
        .collect::<colormamba::Result<Vec<_>>>()?;
    let text = if csv {
        metrics::format_csv(&rows)
    } else {
        metrics::format_table(&rows)
    };
    write!(out, "{text}")?;
    Ok(())
}
