use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tadiff::data::{load_case, load_tgv, write_case, BinaryMask, LongitudinalCase, Session, TgvArray};
use tadiff::denoiser::Treatment;
use tadiff::diffusion::{ImageTensor, Shape};
use tadiff::rng::{normal_vec, seeded};

const TINY: &str = r#"{
  "data.grid": 16,
  "data.radius_min": 3.0,
  "data.radius_max": 5.0,
  "model.widths": [8, 8],
  "model.blocks_per_level": 1,
  "model.embed_dim": 8,
  "model.groups": 4,
  "train.total_steps": 10,
  "train.warmup_steps": 2,
  "train.batch_size": 2,
  "train.accum_steps": 1,
  "schedule.T": 50,
  "sampler.ensembles": 2
}"#;

fn tadiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tadiff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tadiff(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

struct Setup {
    dir: tempfile::TempDir,
}

impl Setup {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synth(&self, name: &str, cases: usize) -> PathBuf {
        let out = self.p(name);
        let n = cases.to_string();
        ok(&["synth", "--cases", &n, "--seed", "7", "--out", s(&out), "--config", s(&self.p("tiny.json"))]);
        out
    }

    fn train(&self, data: &Path, out: &str, extra: &[&str]) -> PathBuf {
        let ck = self.p(out);
        let cfg = self.p("tiny.json");
        let mut args = vec!["train", "--data", s(data), "--config", s(&cfg), "--out", s(&ck)];
        args.extend_from_slice(extra);
        ok(&args);
        ck
    }
}

#[test]
fn synth_is_deterministic_and_counts_sessions() {
    let st = Setup::new();
    let a = st.synth("a", 1);
    let b = st.synth("b", 1);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));

    let out = st.p("four");
    let res = ok(&["synth", "--cases", "4", "--seed", "1", "--out", s(&out)]);
    let text = String::from_utf8(res.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    let dirs: Vec<_> = fs::read_dir(&out).unwrap().collect();
    assert_eq!(dirs.len(), 4);
    for d in dirs {
        let case = load_case(&d.unwrap().path()).unwrap();
        assert!((3..=6).contains(&case.len()));
    }
}

#[test]
fn synth_usage_errors() {
    let st = Setup::new();
    let out = tadiff(&["synth", "--cases", "0", "--out", s(&st.p("x"))]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(st.p("bad.json"), r#"{"data.gird": 32}"#).unwrap();
    let out = tadiff(&["synth", "--out", s(&st.p("x")), "--config", s(&st.p("bad.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.gird"));
}

#[test]
fn train_rejects_empty_data() {
    let st = Setup::new();
    fs::create_dir_all(st.p("empty")).unwrap();
    let out = tadiff(&["train", "--data", s(&st.p("empty")), "--out", s(&st.p("m.ckpt"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no eligible cases"));
}

fn log_without_timing(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn training_is_reproducible_and_resumable() {
    let st = Setup::new();
    let data = st.synth("data", 3);
    let a = st.train(&data, "a.ckpt", &[]);
    let b = st.train(&data, "b.ckpt", &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let log = st.p("a.ckpt.csv");
    assert_eq!(log_without_timing(&log), log_without_timing(&st.p("b.ckpt.csv")));
    let lines = log_without_timing(&log);
    assert_eq!(lines[0], "step,lr,total,weighted_mse,seg");
    assert_eq!(lines.len(), 11);

    let half = st.train(&data, "half.ckpt", &["--stop-at", "5", "--log", s(&st.p("r.csv"))]);
    let resumed = st.train(&data, "resumed.ckpt", &["--resume", s(&half), "--log", s(&st.p("r.csv"))]);
    assert_eq!(fs::read(&resumed).unwrap(), fs::read(&a).unwrap());
    assert_eq!(log_without_timing(&st.p("r.csv")), lines);
}

#[test]
fn sample_outputs_and_determinism() {
    let st = Setup::new();
    let data = st.synth("data", 2);
    let ck = st.train(&data, "m.ckpt", &[]);
    let case = data.join("case_000");
    let run = |out: &str, extra: &[&str]| {
        let o = st.p(out);
        let mut args = vec![
            "sample",
            "--ckpt",
            s(&ck),
            "--case",
            s(&case),
            "--target-day",
            "400",
            "--target-treatment",
            "TMZ",
            "--seed",
            "3",
            "--out",
            s(&o),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        o
    };
    let a = run("s1", &["--sources", "1"]);
    let b = run("s2", &["--sources", "1"]);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(a.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["sources"], serde_json::json!([1, 1, 1]));
    assert_eq!(meta["ensembles"], 2);
    assert_eq!(meta["T"], 50);
    assert_eq!(meta["T_m"], 10);
    assert_eq!(meta["pairs"][3], serde_json::json!({"treatment": 2, "day": 400}));
    let masks = load_tgv(&a.join("mask_mean.tgv")).unwrap();
    assert_eq!(masks.dims, vec![4, 16, 16]);
    assert!(masks.to_f64().iter().all(|&m| (0.0..=1.0).contains(&m)));
    assert!(load_tgv(&a.join("image_std.tgv")).unwrap().to_f64().iter().any(|&v| v > 0.0));

    let one = run("s3", &["--sources", "1,2", "--ensembles", "1"]);
    for name in ["image_std.tgv", "mask_std.tgv"] {
        assert!(load_tgv(&one.join(name)).unwrap().to_f64().iter().all(|&v| v == 0.0));
    }
    let out = tadiff(&[
        "sample", "--ckpt", s(&ck), "--case", s(&case), "--sources", "1,9", "--target-day", "400",
        "--target-treatment", "CRT", "--out", s(&st.p("bad")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("source session 9"));
    let out = tadiff(&[
        "sample", "--ckpt", s(&ck), "--case", s(&case), "--sources", "1", "--target-day", "400",
        "--target-treatment", "XRT", "--out", s(&st.p("bad")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

/// Case with a lesion square and sessions on the given days.
fn handmade_case(id: &str, days: &[u32]) -> LongitudinalCase {
    let shape = Shape::new(3, 16, 16);
    let sessions = days
        .iter()
        .enumerate()
        .map(|(i, &day)| {
            let image = ImageTensor::new(shape, normal_vec(&mut seeded(i as u64), shape.len())).unwrap();
            let mask = (0..256).map(|p| u8::from((p / 16) % 16 >= 4 && (p / 16) < 10 && p % 16 >= 4 && p % 16 < 10)).collect();
            Session {
                image,
                mask: BinaryMask::new(16, 16, mask).unwrap(),
                treatment: if i == 0 { Treatment::Crt } else { Treatment::Tmz },
                day,
            }
        })
        .collect();
    LongitudinalCase::new(id.into(), sessions).unwrap()
}

fn write_prediction(dir: &Path, case_id: &str, day: u32, image: &ImageTensor, mask: &BinaryMask) {
    fs::create_dir_all(dir).unwrap();
    let s = image.shape();
    let img = TgvArray::f32(vec![3, s.height, s.width], image.data().iter().map(|&v| v as f32).collect()).unwrap();
    tadiff::data::save_tgv(&img, &dir.join("image_mean.tgv")).unwrap();
    let mut m = vec![0.0f32; 3 * 256];
    m.extend(mask.data().iter().map(|&v| f32::from(v)));
    tadiff::data::save_tgv(&TgvArray::f32(vec![4, 16, 16], m).unwrap(), &dir.join("mask_mean.tgv")).unwrap();
    let meta = serde_json::json!({
        "case_id": case_id, "sources": [1, 1, 1],
        "pairs": [{"treatment": 1, "day": 0}, {"treatment": 1, "day": 0}, {"treatment": 1, "day": 0}, {"treatment": 2, "day": day}],
        "target_day": day, "target_treatment": 2, "seed": 0, "ensembles": 1, "T": 600, "T_m": 10, "checkpoint_step": 0
    });
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta).unwrap()).unwrap();
}

#[test]
fn eval_scores_perfect_predictions_and_bins_days() {
    let st = Setup::new();
    let gt = st.p("gt");
    let case = handmade_case("p1", &[0, 60, 221]);
    write_case(&gt, &case).unwrap();
    let loaded = load_case(&gt.join("case_p1")).unwrap();
    let pred = st.p("pred");
    for (i, day) in [(1, 60u32), (2, 221)] {
        let s = &loaded.sessions[i];
        write_prediction(&pred.join(format!("p{day}")), "p1", day, &s.image, &s.mask);
    }
    let report = st.p("report.csv");
    let out = ok(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--report", s(&report), "--min-area", "1"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("threshold 0.05"));
    let mut r = csv::Reader::from_path(&report).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        assert_eq!(&row[4], "1");
        assert_eq!(&row[5], "0");
        let mse: f64 = row[8].parse().unwrap();
        assert!(mse < 1e-10, "{mse}");
    }
    let by_day = fs::read_to_string(st.p("report_by_day-range.csv")).unwrap();
    assert!(by_day.starts_with("# threshold=0.05\n"));
    assert!(by_day.contains("\n51-220,1,"));
    assert!(by_day.contains("\n221-365,1,"));
    assert!(st.p("report_by_patient.csv").is_file());
    assert!(st.p("report_by_treatment.csv").is_file());

    let fixed = ok(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--report", s(&report), "--min-area", "1", "--threshold", "0.5"]);
    assert!(String::from_utf8_lossy(&fixed.stdout).contains("threshold 0.5"));
}

#[test]
fn eval_lists_inventory_mismatches() {
    let st = Setup::new();
    let gt = st.p("gt");
    let case = handmade_case("p1", &[0, 60]);
    write_case(&gt, &case).unwrap();
    let s0 = &case.sessions[1];
    let pred = st.p("pred");
    write_prediction(&pred.join("a"), "p1", 61, &s0.image, &s0.mask);
    write_prediction(&pred.join("b"), "p9", 60, &s0.image, &s0.mask);
    let out = tadiff(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--report", s(&st.p("r.csv"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no session on day 61"), "{err}");
    assert!(err.contains("no ground-truth case `p9`"), "{err}");
}
