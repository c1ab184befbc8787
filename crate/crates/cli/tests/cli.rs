use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use liteseg::data::{NiftiDtype, NiftiImage};
use tempfile::TempDir;

fn liteseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_liteseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(out: Output) -> String {
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(out.stderr.is_empty(), "stderr on success: {}", stderr(&out));
    stdout(&out)
}

const SMALL: &str = "seed = 4\n\
model.base-depth = 4\n\
train.iterations = 6\n\
train.batch-size = 2\n\
train.eval-every = 3\n\
data.resize = 32\n";

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn train_small(dir: &Path, name: &str, config: &Path) -> PathBuf {
    let out = dir.join(name);
    ok(liteseg(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        "phantoms:8x32",
        "--out",
        out.to_str().unwrap(),
    ]));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn params_baseline_total_is_around_thirty_million() {
    let text = ok(liteseg(&["params", "--variant", "baseline-unet", "--base-depth", "64", "--csv"]));
    let total: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("total,"))
        .and_then(|r| r.split(',').nth(1))
        .and_then(|c| c.parse().ok())
        .expect("total row");
    assert!((28_000_000..=35_000_000).contains(&total), "{total}");
}

#[test]
fn params_compare_prints_ratio() {
    let text = ok(liteseg(&["params", "--compare", "--base-depth", "64"]));
    let ratio: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("ratio"))
        .map(|r| r.trim().trim_end_matches('x').parse().unwrap())
        .expect("ratio line");
    assert!(ratio >= 5.0, "{text}");
    assert!(text.contains("proposed") && text.contains("baseline-unet"));
}

#[test]
fn params_total_is_sum_of_rows() {
    let text = ok(liteseg(&["params", "--variant", "proposed", "--base-depth", "8", "--csv"]));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("name,shape,count,kind"));
    let (mut sum, mut total) = (0usize, None);
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        let count: usize = cols[2].parse().unwrap();
        if cols[0] == "total" {
            total = Some(count);
        } else {
            sum += count;
        }
    }
    assert_eq!(Some(sum), total);
    let text = ok(liteseg(&["params", "--variant", "proposed", "--base-depth", "8"]));
    assert!(text.lines().last().unwrap().ends_with(&sum.to_string()));
}

#[test]
fn gradcheck_layers_and_block_pass() {
    for scope in ["layers", "block"] {
        let text = ok(liteseg(&["gradcheck", scope]));
        assert!(text.contains("within 1e-4"), "{text}");
        assert!(!text.contains("FAIL"));
    }
    let text = ok(liteseg(&["gradcheck", "block"]));
    assert!(text.contains("block.projection"));
}

#[test]
fn gradcheck_corrupted_rule_exits_5_naming_it() {
    let out = liteseg(&["gradcheck", "layers", "--corrupt-op", "depthwise_conv2d"]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("depthwise_conv2d"), "{}", stderr(&out));
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn usage_and_config_errors_exit_1() {
    assert_eq!(code(&liteseg(&["bogus"])), 1);
    assert_eq!(code(&liteseg(&["gradcheck", "everything"])), 1);
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "model.depth = 3\n");
    let out = liteseg(&["train", "--config", s(&config), "--data", "phantoms:8x32", "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("depth"), "{}", stderr(&out));
    assert_eq!(code(&liteseg(&["--help"])), 0);
}

#[test]
fn train_writes_run_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), SMALL);
    let a = train_small(dir.path(), "a", &config);
    for f in ["best.ckpt", "final.ckpt", "log.csv", "timing.csv", "config.toml"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(a.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);
    assert!(log.starts_with("iteration,loss,train_dice,val_dice,val_paper_score\n"));

    let b = train_small(dir.path(), "b", &config);
    for f in ["best.ckpt", "final.ckpt", "log.csv", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    // the snapshot reproduces the run
    let c = train_small(dir.path(), "c", &a.join("config.toml"));
    assert_eq!(fs::read(a.join("log.csv")).unwrap(), fs::read(c.join("log.csv")).unwrap());
    assert_eq!(fs::read(a.join("best.ckpt")).unwrap(), fs::read(c.join("best.ckpt")).unwrap());
}

fn pgm_values(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let header = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).into_owned();
    let mut fields = header.split_ascii_whitespace();
    assert_eq!(fields.next(), Some("P5"));
    let w: usize = fields.next().unwrap().parse().unwrap();
    let h: usize = fields.next().unwrap().parse().unwrap();
    assert_eq!(fields.next(), Some("255"));
    let pixels = bytes[bytes.len() - w * h..].to_vec();
    (w, h, pixels)
}

#[test]
fn infer_writes_binary_graymaps() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), SMALL);
    let run = train_small(dir.path(), "run", &config);
    let masks = dir.path().join("masks");
    let text = ok(liteseg(&[
        "infer",
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--input",
        "phantoms:3x32",
        "--out",
        s(&masks),
    ]));
    assert!(text.contains("3 slices of 32x32"), "{text}");
    for z in 0..3 {
        let (w, h, px) = pgm_values(&masks.join(format!("slice-{z:04}.pgm")));
        assert_eq!((w, h), (32, 32));
        assert!(px.iter().all(|&v| v == 0 || v == 255));
    }
    let summary = fs::read_to_string(masks.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
}

#[test]
fn infer_nifti_volume_at_full_resolution() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), &SMALL.replace("data.resize = 32", "data.resize = 256"));
    // an untrained checkpoint is enough for the output contract
    let run = dir.path().join("run");
    let config_text = fs::read_to_string(&config).unwrap().replace("train.iterations = 6", "train.iterations = 1");
    fs::write(&config, config_text).unwrap();
    ok(liteseg(&["train", "--config", s(&config), "--data", "phantoms:4x32", "--out", s(&run)]));
    let raw: Vec<f64> = (0..40 * 40 * 2).map(|i| ((i * 37) % 400) as f64 - 150.0).collect();
    let volume = dir.path().join("volume-7.nii");
    NiftiImage::new([40, 40, 2], NiftiDtype::I16, raw).write(&volume).unwrap();
    let masks = dir.path().join("masks");
    ok(liteseg(&[
        "infer",
        "--checkpoint",
        s(&run.join("final.ckpt")),
        "--input",
        s(&volume),
        "--out",
        s(&masks),
    ]));
    let (w, h, px) = pgm_values(&masks.join("slice-0001.pgm"));
    assert_eq!((w, h), (256, 256));
    assert!(px.iter().all(|&v| v == 0 || v == 255));
}

#[test]
fn mismatched_checkpoint_exits_4() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), SMALL);
    let run = train_small(dir.path(), "run", &config);
    let other = dir.path().join("other.toml");
    fs::write(&other, SMALL.replace("base-depth = 4", "base-depth = 8")).unwrap();
    let out = liteseg(&[
        "infer",
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--config",
        s(&other),
        "--input",
        "phantoms:1x32",
        "--out",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("encoder."), "{}", stderr(&out));
}

#[test]
fn missing_mask_exits_2_naming_volume() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    let raw = vec![0.0; 32 * 32 * 2];
    for id in ["0", "1"] {
        NiftiImage::new([32, 32, 2], NiftiDtype::I16, raw.clone())
            .write(&data.join(format!("volume-{id}.nii")))
            .unwrap();
    }
    NiftiImage::new([32, 32, 2], NiftiDtype::U8, raw)
        .write(&data.join("segmentation-0.nii"))
        .unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = liteseg(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("volume 1"), "{}", stderr(&out));
    assert!(stderr(&out).contains("segmentation-1.nii"));
}

#[test]
fn eval_prints_both_score_columns() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), SMALL);
    let run = train_small(dir.path(), "run", &config);
    let ckpt = run.join("best.ckpt");
    let text = ok(liteseg(&["eval", "--checkpoint", s(&ckpt), "--data", "phantoms:4x32"]));
    assert!(text.contains("paper_score") && text.contains("dice"), "{text}");
    let csv = ok(liteseg(&["eval", "--checkpoint", s(&ckpt), "--data", "phantoms:4x32", "--csv"]));
    assert!(csv.starts_with("volume_id,paper_score,dice,jaccard"));
    assert_eq!(csv.lines().count(), 6);
    assert_eq!(csv, ok(liteseg(&["eval", "--checkpoint", s(&ckpt), "--data", "phantoms:4x32", "--csv"])));
}
