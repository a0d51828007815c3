use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adosim::eval::SUMMARY_HEADER;
use adosim::raster::RgbImage;
use adosim::tasks::TaskKind;
use adosim::trace::{RoadConfig, RoadSegment};
use adosim_cli::{RunConfig, TraceSource};
use tempfile::TempDir;

fn adosim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adosim"))
        .args(args)
        .env("ADO_SIM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_road() -> RoadConfig {
    RoadConfig {
        segments: vec![
            RoadSegment { length: 60.0, curvature: 0.0 },
            RoadSegment { length: 100.0, curvature: 0.02 },
            RoadSegment { length: 80.0, curvature: 0.0 },
        ],
        image_width: 32,
        image_height: 20,
        ..RoadConfig::default()
    }
}

fn run_config(dir: &Path, task: TaskKind) -> RunConfig {
    let mut cfg = RunConfig {
        trace: TraceSource::Synthetic { road: small_road(), seed: 3 },
        output_dir: dir.join("run"),
        seed: 7,
        ..RunConfig::default()
    };
    cfg.env.task = adosim::tasks::TaskSpec {
        max_steps: 60,
        ..adosim::tasks::TaskSpec::with_task(task)
    };
    cfg.network.hidden = vec![16];
    cfg.network.recurrent = 8;
    cfg.ppo.num_envs = 2;
    cfg.ppo.capacity = 512;
    cfg.ppo.total_steps = 1024;
    cfg.ppo.minibatch = 128;
    cfg.ppo.epochs = 2;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, cfg.materialized()).unwrap();
    p
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn gen_trace_spacing_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let road = tmp.path().join("road.json");
    let cfg = RoadConfig {
        image_width: 24,
        image_height: 16,
        ..RoadConfig::default()
    };
    fs::write(&road, serde_json::to_string(&cfg).unwrap()).unwrap();
    let outs: Vec<PathBuf> = (0..2).map(|k| tmp.path().join(format!("t{k}"))).collect();
    for out in &outs {
        let o = adosim(&["gen-trace", "--road", road.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "5"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("400 frames"));
    }
    let a = files_under(&outs[0]);
    let b = files_under(&outs[1]);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.strip_prefix(&outs[0]).unwrap(), y.strip_prefix(&outs[1]).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
    let o = adosim(&["inspect-trace", outs[0].to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("frames: 400"));
}

#[test]
fn gen_trace_argument_and_config_errors() {
    let tmp = TempDir::new().unwrap();
    let road = tmp.path().join("road.json");
    fs::write(&road, "{}").unwrap();
    assert_eq!(code(&adosim(&["gen-trace", "--road", road.to_str().unwrap()])), 2);

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"lane_widht": 3.0}"#).unwrap();
    let o = adosim(&["gen-trace", "--road", bad.to_str().unwrap(), "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lane_widht"));

    let blocker = tmp.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = adosim(&["gen-trace", "--road", road.to_str().unwrap(), "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn tiny_training_run_logs_two_updates() {
    let tmp = TempDir::new().unwrap();
    let cfg = run_config(tmp.path(), TaskKind::LaneFollow);
    let path = write_config(tmp.path(), "cfg.json", &cfg);
    let o = adosim(&["train", "--config", path.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(cfg.output_dir.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], adosim::ppo::LOG_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(cfg.output_dir.join("checkpoints/ckpt_000002.bin").exists());
    let saved = RunConfig::from_json(&fs::read_to_string(cfg.output_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let full = run_config(&tmp.path().join("a"), TaskKind::Overtake);
    let split = run_config(&tmp.path().join("b"), TaskKind::Overtake);
    let pf = write_config(tmp.path(), "a.json", &full);
    let ps = write_config(tmp.path(), "b.json", &split);

    assert_eq!(code(&adosim(&["train", "--config", pf.to_str().unwrap(), "--quiet"])), 0);
    let o = adosim(&["train", "--config", ps.to_str().unwrap(), "--quiet", "--max-updates", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!split.output_dir.join("checkpoints/ckpt_000002.bin").exists());
    let ck1 = split.output_dir.join("checkpoints/ckpt_000001.bin");
    let o = adosim(&["train", "--config", ps.to_str().unwrap(), "--quiet", "--resume", ck1.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let read = |c: &RunConfig, f: &str| fs::read(c.output_dir.join(f)).unwrap();
    assert_eq!(read(&full, "checkpoints/ckpt_000002.bin"), read(&split, "checkpoints/ckpt_000002.bin"));
    assert_eq!(read(&full, "train_log.csv"), read(&split, "train_log.csv"));
}

#[test]
fn invalid_config_key_is_named() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("cfg.json");
    fs::write(&p, r#"{"ppo": {"clip": 0.2, "learning_rate": 0.001}}"#).unwrap();
    let o = adosim(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn non_finite_training_aborts_with_diagnostic() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = run_config(tmp.path(), TaskKind::LaneFollow);
    cfg.ppo.lr = 1e300;
    cfg.ppo.max_grad_norm = 0.0;
    cfg.ppo.target_kl = 0.0;
    let p = write_config(tmp.path(), "cfg.json", &cfg);
    let o = adosim(&["train", "--config", p.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(cfg.output_dir.join("diagnostic.json").exists());
}

/// Trains one update and returns the config path and checkpoint.
fn trained(tmp: &Path) -> (RunConfig, PathBuf, PathBuf) {
    let mut cfg = run_config(tmp, TaskKind::Overtake);
    cfg.ppo.total_steps = 512;
    let p = write_config(tmp, "cfg.json", &cfg);
    let o = adosim(&["train", "--config", p.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = cfg.output_dir.join("checkpoints/ckpt_000001.bin");
    (cfg, p, ck)
}

#[test]
fn eval_outputs() {
    let tmp = TempDir::new().unwrap();
    let (cfg, p, ck) = trained(tmp.path());
    let (p, ck) = (p.to_str().unwrap(), ck.to_str().unwrap());
    let eval_dir = cfg.output_dir.join("eval");

    let o = adosim(&["eval", "--config", p, "--ckpt", ck, "--episodes", "0", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(eval_dir.join("summary.csv")).unwrap(), format!("{SUMMARY_HEADER}\n"));
    assert_eq!(fs::read_to_string(eval_dir.join("records.jsonl")).unwrap(), "");

    let mut summaries = Vec::new();
    for _ in 0..2 {
        let o = adosim(&["eval", "--config", p, "--ckpt", ck, "--episodes", "10", "--seed", "4"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        summaries.push(fs::read_to_string(eval_dir.join("summary.csv")).unwrap());
    }
    assert_eq!(summaries[0], summaries[1]);
    let mut lines = summaries[0].lines();
    assert_eq!(lines.next(), Some("intervention,min_clearance,max_deviation,max_yaw"));
    assert_eq!(lines.next().unwrap().split(',').count(), 4);
    for f in ["breakdown.csv", "clearance_histogram.csv", "clearance_recall.csv", "per_position.csv"] {
        assert!(eval_dir.join(f).exists(), "{f}");
    }
    let jsonl = fs::read_to_string(eval_dir.join("records.jsonl")).unwrap();
    let headers = jsonl
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["type"] == "episode")
        .count();
    assert_eq!(headers, 10);

    let mut other = cfg.clone();
    other.network.hidden = vec![32];
    let q = write_config(tmp.path(), "other.json", &other);
    let o = adosim(&["eval", "--config", q.to_str().unwrap(), "--ckpt", ck, "--episodes", "1"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

fn pngs(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    v.sort();
    v
}

#[test]
fn replay_frames() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = run_config(tmp.path(), TaskKind::Overtake);
    cfg.env.task.max_steps = 50;
    cfg.env.task.z_lat = 5.0;
    let p = write_config(tmp.path(), "cfg.json", &cfg);
    let p = p.to_str().unwrap();
    let dirs: Vec<PathBuf> = ["a", "b", "bare"].iter().map(|d| tmp.path().join(d)).collect();
    for (d, extra) in dirs.iter().zip([&[][..], &[][..], &["--no-ado"][..]]) {
        let mut args = vec!["replay", "--config", p, "--seed", "3", "--out", d.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = adosim(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }

    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dirs[0].join("meta.json")).unwrap()).unwrap();
    let steps = meta["steps"].as_array().unwrap().len();
    let names = pngs(&dirs[0]);
    assert_eq!(names.len(), steps);
    let expect: Vec<String> = (0..steps).map(|k| format!("{k:04}.png")).collect();
    assert_eq!(names, expect);
    if meta["terminal"] == "timeout" {
        assert_eq!(steps, 50);
    }

    let mut fg_pixels = 0;
    for n in &names {
        assert_eq!(fs::read(dirs[0].join(n)).unwrap(), fs::read(dirs[1].join(n)).unwrap());
        let with = RgbImage::load_png(&dirs[0].join(n)).unwrap();
        let without = RgbImage::load_png(&dirs[2].join(n)).unwrap();
        let mask = RgbImage::load_png(&dirs[0].join("fg").join(n)).unwrap();
        for i in 0..with.pixel_count() {
            let in_fg = mask.get(i) != [0, 0, 0];
            fg_pixels += in_fg as usize;
            if !in_fg {
                assert_eq!(with.get(i), without.get(i), "{n} pixel {i} outside the mask");
            }
        }
    }
    assert!(fg_pixels > 0);
}
