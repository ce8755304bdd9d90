mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

use humanrf::config::Config;
use humanrf::eval::frame_metrics;
use humanrf::image::Image;
use humanrf::synthcap::Dataset;

use common::tiny_config;

fn humanrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_humanrf")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = humanrf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    humanrf(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny config file with a small split, plus its path.
fn tiny_run(dir: &Path, views: usize) -> (Config, PathBuf) {
    let mut cfg = tiny_config();
    cfg.train_subjects = 1;
    cfg.test_subjects = 1;
    cfg.poses = 2;
    cfg.views = views;
    cfg.max_steps = 2;
    cfg.dataset = s(&dir.join("data")).to_string();
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, cfg.canonical_text()).unwrap();
    (cfg, path)
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn default_gen_writes_the_full_grid_with_checksums() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let msg = ok(&["gen", "--out", s(&data)]);
    assert!(msg.contains("6 subjects x 4 poses x 8 views"), "{msg}");
    let ds = Dataset::load(&data).unwrap();
    assert_eq!((ds.subjects.len(), ds.poses, ds.views, ds.resolution), (6, 4, 8, 64));
    assert_eq!(ds.split(humanrf::synthcap::Split::Train).len(), 4);
    assert!(ds.subjects.iter().all(|s| s.frames.len() == 32));

    let manifest = std::fs::read_to_string(data.join("manifest.tsv")).unwrap();
    let files = tree(&data);
    let mut listed = 0;
    for line in manifest.lines() {
        let (rel, sum) = line.split_once('\t').unwrap();
        let bytes = &files[Path::new(rel)];
        assert_eq!(hex::encode(Sha256::digest(bytes)), sum, "{rel}");
        listed += 1;
    }
    // Every file except the manifest itself is listed; 3 files per frame.
    assert_eq!(listed, files.len() - 1);
    assert_eq!(listed, 1 + 6 + 6 * 32 * 3);
}

#[test]
fn gen_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = tiny_run(dir.path(), 4);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    ok(&["gen", "--config", s(&cfg), "--seed", "7", "--out", s(&a)]);
    ok(&["gen", "--config", s(&cfg), "--seed", "7", "--out", s(&b)]);
    ok(&["gen", "--config", s(&cfg), "--seed", "8", "--out", s(&c)]);
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["train", "--jitter", "maybe"]), 1);
    assert_eq!(code(&["render"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn bad_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\nsamples_per_rya = 12\n").unwrap();
    let out = humanrf(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("samples_per_rya"));
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&["train", "--data", s(&empty), "--out", s(&dir.path().join("r"))]), 2);
    let missing = dir.path().join("none.ckpt");
    assert_eq!(code(&["eval", "--checkpoint", s(&missing)]), 2);
}

#[test]
fn train_render_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, cfg_path) = tiny_run(dir.path(), 4);
    ok(&["gen", "--config", s(&cfg_path)]);
    let run = dir.path().join("run");
    let msg = ok(&["train", "--config", s(&cfg_path), "--out", s(&run), "--jitter", "off"]);
    let mut off = cfg.clone();
    off.jitter = false;
    assert!(msg.contains(&format!("config_hash {} steps 2", off.hash())), "{msg}");
    let log = std::fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2 + 2);
    let ckpt = run.join("last.ckpt");

    let render = |out: &Path| {
        ok(&[
            "render",
            "--checkpoint",
            s(&ckpt),
            "--subject",
            "1",
            "--input-view",
            "0",
            "--target-view",
            "2",
            "--target-pose",
            "1",
            "--out",
            s(out),
        ])
    };
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    let m1 = render(&r1);
    let m2 = render(&r2);
    assert_eq!(m1.replace(s(&r1), ""), m2.replace(s(&r2), ""));
    let t1 = tree(&r1);
    assert_eq!(t1.len(), 2);
    assert_eq!(t1, tree(&r2));
    assert_eq!(
        code(&["render", "--checkpoint", s(&ckpt), "--subject", "9", "--out", s(&r1)]),
        2
    );

    let ev = dir.path().join("ev");
    ok(&["eval", "--checkpoint", s(&ckpt), "--out", s(&ev)]);
    let text = std::fs::read_to_string(ev.join("eval.tsv")).unwrap();
    let tables: Vec<&str> = text.split("\n\n").collect();
    assert_eq!(tables.len(), 2);
    for t in tables {
        let lines: Vec<&str> = t.lines().collect();
        let rows: Vec<Vec<&str>> = lines[2..].iter().map(|l| l.split('\t').collect()).collect();
        let (body, mean) = rows.split_at(rows.len() - 1);
        // One test subject: poses × views frames.
        assert_eq!(body.len(), cfg.poses * cfg.views);
        let avg = |k: usize| body.iter().map(|r| r[k].parse::<f64>().unwrap()).sum::<f64>() / body.len() as f64;
        assert_eq!(mean[0][0], "mean");
        for k in [1, 2] {
            let m: f64 = mean[0][k].parse().unwrap();
            // Rows and mean are printed with 6 decimals.
            assert!((m - avg(k)).abs() <= 1e-6, "{m} vs {}", avg(k));
        }
    }
}

#[test]
fn ground_truth_against_itself_is_perfect() {
    let cfg = tiny_config();
    let sc = common::scene(&cfg, 1, 0, 8);
    let model = humanrf::model::Model::new(&cfg).unwrap();
    let rect = model.bounds(&sc.state).project_rect(&sc.cam);
    let m = frame_metrics("gt", &sc.frame.image, &sc.frame.image, &rect).unwrap();
    assert_eq!(m.psnr, f64::INFINITY);
    assert_eq!(m.ssim, 1.0);
    let blank = Image::new(32, 32);
    let m = frame_metrics("blank", &blank, &sc.frame.image, &rect).unwrap();
    assert!(m.psnr.is_finite() && m.ssim < 1.0);
}

#[test]
fn sweep_needs_a_twelve_view_ring_and_pools_symmetric_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg_path) = tiny_run(dir.path(), 4);
    ok(&["gen", "--config", s(&cfg_path)]);
    let ckpt = dir.path().join("init.ckpt");
    let cfg = Config::load(&cfg_path).unwrap();
    let model = humanrf::model::Model::new(&cfg).unwrap();
    humanrf::model::Checkpoint::new(&model, 0, 0, None).save(&ckpt).unwrap();
    assert_eq!(code(&["sweep-views", "--checkpoint", s(&ckpt), "--out", s(dir.path())]), 2);

    let ring = dir.path().join("ring");
    ok(&["gen", "--config", s(&cfg_path), "--views", "12", "--out", s(&ring)]);
    let sw = dir.path().join("sw");
    let text = ok(&[
        "sweep-views",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&ring),
        "--poses",
        "0",
        "--out",
        s(&sw),
    ]);
    assert_eq!(text, std::fs::read_to_string(sw.join("sweep.tsv")).unwrap());
    let (views, buckets) = text.split_once("\n\n").unwrap();
    let views: Vec<Vec<&str>> = views.lines().skip(2).map(|l| l.split('\t').collect()).collect();
    assert_eq!(views.len(), 12);
    assert!(views.iter().all(|r| r[3] == "11"));
    let buckets: Vec<Vec<&str>> = buckets.lines().skip(2).map(|l| l.split('\t').collect()).collect();
    let deltas: Vec<&str> = buckets.iter().map(|r| r[0]).collect();
    assert_eq!(deltas, ["30.0", "60.0", "90.0", "120.0", "150.0", "180.0"]);
    let counts: Vec<&str> = buckets.iter().map(|r| r[2]).collect();
    assert_eq!(counts, ["24", "24", "24", "24", "24", "12"]);
}
