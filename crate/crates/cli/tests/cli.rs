use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use colormamba::checkpoint::Checkpoint;
use colormamba::data::{synthetic_pairs, write_gray, write_pairs, write_rgb_png};
use colormamba::gradcheck::{check, GradReport, GradcheckConfig, SuiteEntry};
use colormamba::{ParamStore, Tensor};
use colormamba_cli::commands::cmd_gradcheck;
use colormamba_cli::*;

const TINY: &str = "\
model.depth = 2
model.widths = 4,4
model.state_size = 2
model.expand = 1
model.agent_count = 4
model.tex_channels = 2
model.disc_widths = 2,2,2
train.epochs = 2
train.batch = 2
augment.enabled = false
surrogate.target_mse = 0.05
";

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn run(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["colormamba"];
    full.extend_from_slice(args);
    let code = run_with(full, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the tiny config plus `extra` lines and returns its path.
fn config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.conf");
    fs::write(&p, format!("{TINY}paths.out = {}\n{extra}", dir.join("out").display())).unwrap();
    p
}

/// Trains the tiny model on 2 synthetic pairs; returns the config path.
fn trained(dir: &Path) -> PathBuf {
    let cfg = config(dir, "data.synthetic = 2\ndata.size = 8\n");
    let r = run(&["--config", s(&cfg), "train"]);
    assert_eq!(r.code, 0, "{}", r.err);
    cfg
}

fn nir_image(dir: &Path, name: &str, side: usize) -> PathBuf {
    let p = dir.join(name);
    let data = (0..side * side).map(|i| (i % 7) as f64 / 7.0).collect();
    write_gray(&p, &Tensor::new(&[side, side, 1], data).unwrap()).unwrap();
    p
}

#[test]
fn train_writes_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "data.synthetic = 2\ndata.size = 8\n");
    let r = run(&["--config", s(&cfg), "train"]);
    assert_eq!(r.code, 0, "{}", r.err);
    let epochs: Vec<&str> = r.out.lines().filter(|l| l.starts_with("epoch=")).collect();
    assert_eq!(epochs.len(), 2);
    assert!(epochs[1].starts_with("epoch=2 step=2 loss_d="), "{}", epochs[1]);
    assert!(r.out.lines().last().unwrap().starts_with("final epoch=2"));
    let log = fs::read_to_string(dir.path().join("out/train.log")).unwrap();
    assert_eq!(log, r.out);
    let ckpt = Checkpoint::load(&dir.path().join("out/model.ckpt")).unwrap();
    assert_eq!(ckpt.get("g_steps").unwrap(), "2");
    assert_eq!(ckpt.get("config.model.widths").unwrap(), "4,4");
}

#[test]
fn infer_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let nir = nir_image(dir.path(), "in.pgm", 8);
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    for dst in [&a, &b] {
        let r = run(&["--config", s(&cfg), "infer", s(&nir), s(dst)]);
        assert_eq!(r.code, 0, "{}", r.err);
        assert!(r.out.is_empty());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let img = image::open(&a).unwrap();
    assert_eq!((img.width(), img.height()), (8, 8));
    assert_eq!(img.color(), image::ColorType::Rgb8);
}

#[test]
fn infer_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let dst = dir.path().join("o.png");
    let ok = nir_image(dir.path(), "ok.pgm", 8);

    let r = run(&[
        "infer",
        s(&ok),
        s(&dst),
        "--checkpoint",
        s(&dir.path().join("none.ckpt")),
    ]);
    assert_eq!(r.code, EXIT_CHECKPOINT);
    assert!(r.err.contains("checkpoint not found"), "{}", r.err);

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(
        run(&["infer", s(&ok), s(&dst), "--checkpoint", s(&garbage)]).code,
        EXIT_CHECKPOINT
    );

    let junk = dir.path().join("junk.pgm");
    fs::write(&junk, b"junk").unwrap();
    assert_eq!(run(&["--config", s(&cfg), "infer", s(&junk), s(&dst)]).code, EXIT_IMAGE);
    let missing = dir.path().join("missing.pgm");
    assert_eq!(
        run(&["--config", s(&cfg), "infer", s(&missing), s(&dst)]).code,
        EXIT_IMAGE
    );

    let odd = nir_image(dir.path(), "odd.pgm", 6);
    let r = run(&["--config", s(&cfg), "infer", s(&odd), s(&dst)]);
    assert_eq!(r.code, EXIT_SHAPE);
    assert!(r.err.contains("divisible"), "{}", r.err);
    assert!(!dst.exists());
}

#[test]
fn resume_continues_step_counter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let ckpt = dir.path().join("out/model.ckpt");
    let before = Checkpoint::load(&ckpt).unwrap();
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("train.epochs = 2", "train.epochs = 4");
    fs::write(&cfg, text).unwrap();
    let r = run(&["--config", s(&cfg), "train", "--resume", s(&ckpt)]);
    assert_eq!(r.code, 0, "{}", r.err);
    let first = r.out.lines().next().unwrap();
    assert!(first.starts_with("epoch=3 step=3 "), "{first}");
    let after = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(after.get("g_steps").unwrap(), "4");
    assert_eq!(after.get("d_steps").unwrap(), "4");
    let gen = |c: &Checkpoint| {
        c.arrays
            .iter()
            .filter(|(n, _)| n.starts_with("gen/"))
            .cloned()
            .collect::<Vec<_>>()
    };
    assert_eq!(gen(&before).len(), gen(&after).len());
    assert_ne!(gen(&before), gen(&after));
    let log = fs::read_to_string(dir.path().join("out/train.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 4);

    let r = run(&[
        "--config",
        s(&cfg),
        "train",
        "--resume",
        s(&dir.path().join("gone.ckpt")),
    ]);
    assert_eq!(r.code, EXIT_CHECKPOINT);
}

#[test]
fn train_corpus_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let empty = dir.path().join("empty");
    fs::create_dir_all(empty.join("nir")).unwrap();
    let r = run(&["--config", s(&cfg), "train", "--data", s(&empty)]);
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("empty corpus"), "{}", r.err);

    let corpus = dir.path().join("corpus");
    write_pairs(&corpus, &synthetic_pairs(2, 8, 0)).unwrap();
    fs::remove_file(corpus.join("rgb/toy01.png")).unwrap();
    write_rgb_png(&corpus.join("rgb/stray.png"), &Tensor::zeros(&[8, 8, 3])).unwrap();
    let r = run(&["--config", s(&cfg), "train", "--data", s(&corpus)]);
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("nir/toy01") && r.err.contains("rgb/stray"), "{}", r.err);

    assert_eq!(run(&["--config", s(&cfg), "train"]).code, EXIT_USAGE);
}

#[test]
fn train_on_corpus_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "train.epochs = 1\n");
    let corpus = dir.path().join("corpus");
    write_pairs(&corpus, &synthetic_pairs(2, 8, 3)).unwrap();
    let r = run(&["--config", s(&cfg), "--seed", "5", "train", "--data", s(&corpus)]);
    assert_eq!(r.code, 0, "{}", r.err);
    let ckpt = Checkpoint::load(&dir.path().join("out/model.ckpt")).unwrap();
    assert_eq!(ckpt.get("seed").unwrap(), "5");
}

#[test]
fn preset_lands_in_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "data.synthetic = 2\ndata.size = 8\ntrain.epochs = 1\n");
    let r = run(&["--config", s(&cfg), "--preset", "wo-mamba", "train"]);
    assert_eq!(r.code, 0, "{}", r.err);
    let ckpt = Checkpoint::load(&dir.path().join("out/model.ckpt")).unwrap();
    assert_eq!(ckpt.get("config.ablation.mamba").unwrap(), "false");
    assert_eq!(ckpt.get("config.ablation.attention").unwrap(), "false");
    assert_eq!(ckpt.get("config.ablation.padding_tokens").unwrap(), "false");
}

fn rgb_file(path: &Path, seed: u64) {
    let data = (0..768)
        .map(|i| ((i as u64 * 7 + seed * 13) % 17) as f64 / 16.0)
        .collect();
    write_rgb_png(path, &Tensor::new(&[16, 16, 3], data).unwrap()).unwrap();
}

#[test]
fn eval_identity_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("imgs");
    fs::create_dir_all(&d).unwrap();
    rgb_file(&d.join("a.png"), 1);
    rgb_file(&d.join("b.png"), 2);
    let r = run(&["eval", s(&d), s(&d)]);
    assert_eq!(r.code, 0, "{}", r.err);
    let lines: Vec<&str> = r.out.lines().collect();
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(header, ["image", "PSNR", "SSIM", "AE", "SAM", "ERGAS"]);
    assert_eq!(lines.len(), 4);
    for row in &lines[1..] {
        let v: Vec<f64> = row.split_whitespace().skip(1).map(|x| x.parse().unwrap()).collect();
        assert_eq!(v, [100.0, 1.0, 0.0, 0.0, 0.0], "{row}");
    }
    assert!(lines[3].starts_with("mean"));

    let r = run(&["eval", "--csv", s(&d), s(&d)]);
    assert!(r.out.starts_with("image,PSNR,SSIM,AE,SAM,ERGAS\n"), "{}", r.out);
}

#[test]
fn eval_single_pair_and_orphans() {
    let dir = tempfile::tempdir().unwrap();
    let (p, g) = (dir.path().join("p"), dir.path().join("g"));
    fs::create_dir_all(&p).unwrap();
    fs::create_dir_all(&g).unwrap();
    rgb_file(&p.join("x.png"), 1);
    rgb_file(&g.join("x.png"), 2);
    let r = run(&["eval", s(&p), s(&g)]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(r.out.lines().count(), 3);
    rgb_file(&p.join("y.png"), 1);
    let r = run(&["eval", s(&p), s(&g)]);
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("pred/y"), "{}", r.err);
}

#[test]
fn bench_table_has_one_row_per_kernel_and_length() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.conf");
    fs::write(
        &cfg,
        "bench.lengths = 32,64,128\nbench.state_size = 2\nbench.repeats = 3\nbench.min_elements = 512\n",
    )
    .unwrap();
    let r = run(&["--config", s(&cfg), "bench"]);
    assert_eq!(r.code, 0, "{}", r.err);
    let rows: Vec<(String, usize)> = r
        .out
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("sequential") || l.starts_with("parallel"))
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f[0].to_string(), f[1].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 6);
    for k in ["sequential", "parallel"] {
        for l in [32, 64, 128] {
            assert_eq!(rows.iter().filter(|r| r.0 == k && r.1 == l).count(), 1);
        }
    }
    assert_eq!(r.out.lines().filter(|l| l.starts_with("scaling")).count(), 4);

    fs::write(
        &cfg,
        "bench.height = 4\nbench.width = 4\nbench.channels = 2\nbench.scan2d_state_size = 2\n",
    )
    .unwrap();
    let r = run(&["--config", s(&cfg), "bench", "--mode", "scan2d"]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.starts_with("scan2d 4x4 N=2 C=2"), "{}", r.out);
}

#[test]
fn gradcheck_lists_every_block_once() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.conf");
    fs::write(&cfg, "gradcheck.max_entries = 1\n").unwrap();
    let r = run(&["--config", s(&cfg), "gradcheck"]);
    assert_eq!(r.code, 0, "{}{}", r.out, r.err);
    let names: Vec<&str> = r
        .out
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    let expected: Vec<&str> = colormamba::gradcheck::suite().iter().map(|e| e.name).collect();
    assert_eq!(names, expected);
}

fn corrupted_square(cfg: &GradcheckConfig) -> colormamba::Result<GradReport> {
    let x = Tensor::new(&[3], vec![0.3, -1.2, 0.7])?;
    check("corrupted_square", &ParamStore::new(), &[x], cfg, |g, _, v| {
        let value = g.value(v[0]).map(|a| a * a);
        // backward deliberately drops the factor 2x
        g.custom("bad_square", &[v[0]], value, |gy, _| vec![Some(gy.clone())])
    })
}

#[test]
fn corrupted_backward_fails_with_block_name() {
    let entries = [
        colormamba::gradcheck::suite()[0],
        SuiteEntry {
            name: "corrupted_square",
            run: corrupted_square,
        },
    ];
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let f = cmd_gradcheck(&entries, &RunConfig::default(), &mut out, &mut err).unwrap_err();
    assert_eq!(f.code, EXIT_GRADCHECK);
    assert!(f.message.contains("corrupted_square"));
    assert!(!f.message.contains("selective_scan"));
    let out = String::from_utf8(out).unwrap();
    assert!(
        out.lines()
            .any(|l| l.starts_with("corrupted_square") && l.contains("FAIL")),
        "{out}"
    );
    assert!(String::from_utf8(err).unwrap().contains("corrupted_square"));
}

#[test]
fn usage_errors() {
    assert_eq!(run(&[]).code, EXIT_USAGE);
    assert_eq!(run(&["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(run(&["--preset", "nope", "bench"]).code, EXIT_USAGE);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "model.unknown = 1\n").unwrap();
    let r = run(&["--config", s(&cfg), "bench"]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("model.unknown"), "{}", r.err);
    let help = run(&["--help"]);
    assert_eq!(help.code, 0);
    for verb in ["infer", "train", "bench", "gradcheck", "eval"] {
        assert!(help.out.contains(verb), "{verb}");
    }
}

#[test]
fn binary_separates_streams_and_honors_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.conf");
    fs::write(
        &cfg,
        "bench.lengths = 16\nbench.state_size = 2\nbench.repeats = 1\nbench.min_elements = 16\n",
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_colormamba");
    let o = Command::new(bin)
        .args(["--config", s(&cfg), "bench"])
        .env(THREADS_ENV, "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("kernel"));
    let o = Command::new(bin)
        .args(["bench"])
        .env(THREADS_ENV, "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
    assert!(o.stdout.is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).contains(THREADS_ENV));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let overfit = RunConfig::load(&root.join("overfit.conf")).unwrap();
    assert_eq!(
        (overfit.synthetic, overfit.synthetic_size, overfit.loss.lambda_adv),
        (4, 16, 0.0)
    );
    let full = RunConfig::load(&root.join("full.conf")).unwrap();
    assert_eq!(
        (full.loss.lambda_mse, full.loss.lambda_fea, full.loss.lambda_adv),
        (15.0, 15.0, 1.0)
    );
    assert_eq!(
        (full.optimizer.beta1, full.optimizer.beta2, full.optimizer.weight_decay),
        (0.5, 0.999, 0.5)
    );
    assert!(full.augment_enabled);
}
