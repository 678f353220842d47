use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use apo_core::{ParamSet, Tensor};
use tempfile::TempDir;

fn apo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apo")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &str = r#"{
  "log_every": 1,
  "eval": {"n_eval": 16, "grid_steps": 4, "every": 2},
  "data": {"n_pos": 20, "n_neg": 20},
  "stages": {
    "pretrain": {"steps": 3, "batch": 8},
    "online": {"steps": 2, "pairs_per_window": 2},
    "half_online": {"steps": 2, "pairs_per_window": 2},
    "offline": {"steps": 2, "pairs_per_window": 2},
    "distill": {"steps": 2, "batch": 8},
    "distill_aware": {"steps": 2, "pairs_per_window": 2}
  }
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_empty_counts_write_headers_only() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"data": {"n_pos": 0, "n_neg": 0}}"#);
    let out_dir = tmp.path().join("data");
    let out = apo(&["gen-data", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("config hash: "));
    assert_eq!(fs::read_to_string(out_dir.join("offline_records.tsv")).unwrap().lines().count(), 1);
    assert_eq!(fs::read_to_string(out_dir.join("offline_pairs.tsv")).unwrap().lines().count(), 1);
}

#[test]
fn gen_data_defaults_match_counts_and_regenerate_identically() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = apo(&["gen-data", "--out", s(&a)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("records: 4000"), "{text}");
    let records = fs::read_to_string(a.join("offline_records.tsv")).unwrap();
    assert_eq!(records.lines().count() - 1, 4000);
    let pairs = fs::read_to_string(a.join("offline_pairs.tsv")).unwrap();
    let n_pairs = pairs.lines().count() - 1;
    assert!(text.contains(&format!("pairs: {n_pairs} ")), "{text}");

    assert_eq!(code(&apo(&["gen-data", "--out", s(&b)])), 0);
    assert_eq!(fs::read(a.join("offline_records.tsv")).unwrap(), fs::read(b.join("offline_records.tsv")).unwrap());
    assert_eq!(fs::read(a.join("offline_pairs.tsv")).unwrap(), fs::read(b.join("offline_pairs.tsv")).unwrap());

    let c = tmp.path().join("c");
    assert_eq!(code(&apo(&["gen-data", "--seed", "5", "--out", s(&c)])), 0);
    assert_ne!(fs::read(a.join("offline_pairs.tsv")).unwrap(), fs::read(c.join("offline_pairs.tsv")).unwrap());
}

#[test]
fn unwritable_output_exits_2() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let out = apo(&["gen-data", "--out", s(&blocker.join("sub"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("cannot write"));
}

#[test]
fn invalid_config_is_rejected_before_work() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"stages": {"offline": {"bta": 2}}}"#);
    let out_dir = tmp.path().join("out");
    let out = apo(&["gen-data", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 1);
    assert!(!out_dir.exists());
    let bad = write_config(tmp.path(), "d.json", r#"{"eval": {"n_eval": 0}}"#);
    assert_eq!(code(&apo(&["run", "--all", "--config", s(&bad), "--out", s(&out_dir)])), 1);
}

#[test]
fn seed_override_changes_config_hash() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"data": {"n_pos": 0, "n_neg": 0}}"#);
    let out_dir = tmp.path().join("o");
    let hash = |extra: &[&str]| {
        let mut args = vec!["gen-data", "--config", s(&cfg), "--out", s(&out_dir)];
        args.extend_from_slice(extra);
        let text = stdout(&apo(&args));
        text.lines().find(|l| l.starts_with("config hash: ")).unwrap().to_string()
    };
    assert_eq!(hash(&[]), hash(&[]));
    assert_ne!(hash(&[]), hash(&["--seed", "1"]));
    assert_eq!(hash(&["--seed", "0"]), hash(&[]));
}

#[test]
fn mid_pipeline_stage_without_checkpoint_exits_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL);
    let out = apo(&["run", "--stage", "offline", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("half_online"));
}

#[test]
fn unknown_stage_and_missing_mode_are_usage_errors() {
    assert_eq!(code(&apo(&["run", "--stage", "finetune"])), 1);
    assert_eq!(code(&apo(&["run"])), 1);
    assert_eq!(code(&apo(&["run", "--all", "--stage", "online"])), 1);
}

#[test]
fn zero_step_run_leaves_checkpoint_unchanged() {
    let tmp = TempDir::new().unwrap();
    let init_dir = tmp.path().join("init");
    let zero = r#"{"eval": {"n_eval": 8, "grid_steps": 2}, "data": {"n_pos": 4, "n_neg": 4},
        "stages": {"pretrain": {"steps": 0}, "online": {"steps": 0}, "half_online": {"steps": 0},
                   "offline": {"steps": 0}, "distill": {"steps": 0}, "distill_aware": {"steps": 0}}}"#;
    let cfg = write_config(tmp.path(), "zero.json", zero);
    let out = apo(&["run", "--stage", "pretrain", "--config", s(&cfg), "--out", s(&init_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let init = init_dir.join("pretrain.apockpt");

    let with_init = zero.replacen('{', &format!("{{\"init_checkpoint\": {:?},", s(&init)), 1);
    let cfg = write_config(tmp.path(), "zero_init.json", &with_init);
    let run_dir = tmp.path().join("run");
    let out = apo(&["run", "--all", "--config", s(&cfg), "--out", s(&run_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let original = fs::read(&init).unwrap();
    for stage in ["pretrain", "online", "half_online", "offline", "distill", "distill_aware"] {
        assert_eq!(fs::read(run_dir.join(format!("{stage}.apockpt"))).unwrap(), original, "{stage}");
    }
}

#[test]
fn full_run_is_reproducible_and_stages_chain() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = apo(&["run", "--all", "--config", s(&cfg), "--out", s(dir)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(stdout(&out).contains("distill_aware"));
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,stage,loss,margin,defect_rate,follow_rate,mean_quality,nfe\n"));
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("distill_aware.apockpt")).unwrap(),
        fs::read(b.join("distill_aware.apockpt")).unwrap()
    );

    // a single stage picks up from the previous checkpoint
    let out = apo(&["run", "--stage", "offline", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(a.join("metrics.offline.csv").is_file());

    // eval of the guided teacher and the distilled student
    let out = apo(&["eval", "--checkpoint", s(&a.join("offline.apockpt")), "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("nfe=12"), "{}", stdout(&out));
    let out = apo(&["eval", "--checkpoint", s(&a.join("distill.apockpt")), "--config", s(&cfg), "--out", s(&a)]);
    assert!(stdout(&out).contains("nfe=4"), "{}", stdout(&out));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("eval_distill.json")).unwrap()).unwrap();
    assert_eq!(json["guided"], false);
    assert_eq!(json["nfe"], 4);
}

#[test]
fn non_finite_training_exits_4_with_step() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"eval": {"n_eval": 8, "grid_steps": 2}, "data": {"n_pos": 4, "n_neg": 4},
            "stages": {"pretrain": {"steps": 20, "batch": 8, "lr": 1e300}}}"#,
    );
    let out = apo(&["run", "--stage", "pretrain", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("at step "), "{}", stderr(&out));
}

fn stub_checkpoint(path: &Path) {
    let rows: Vec<[f64; 2]> = (0..8)
        .map(|c| {
            let a = 2.0 * std::f64::consts::PI * c as f64 / 8.0;
            [2.0 * a.cos(), 2.0 * a.sin()]
        })
        .collect();
    let mut params = ParamSet::new();
    params.insert("oracle.centers", Tensor::from_rows(&rows)).unwrap();
    params.save(path).unwrap();
}

#[test]
fn eval_stub_checkpoint_and_json_determinism() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tmp.path().join("centers.apockpt");
    stub_checkpoint(&ckpt);
    let run = || {
        let out = apo(&["eval", "--checkpoint", s(&ckpt), "--out", s(tmp.path())]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        (stdout(&out), fs::read(tmp.path().join("eval_centers.json")).unwrap())
    };
    let (text, first) = run();
    assert!(text.contains("defect_rate=0.000000"), "{text}");
    assert!(text.contains("follow_rate=1.000000"), "{text}");
    let (_, second) = run();
    assert_eq!(first, second);
    let json: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(json["defect_rate"], 0.0);
    let hash = text.lines().next().unwrap().trim_start_matches("config hash: ");
    assert_eq!(json["config_hash"], hash);
}

#[test]
fn corrupt_checkpoints_exit_5() {
    let tmp = TempDir::new().unwrap();
    let ckpt = tmp.path().join("centers.apockpt");
    stub_checkpoint(&ckpt);
    let bytes = fs::read(&ckpt).unwrap();

    let truncated = tmp.path().join("trunc.apockpt");
    fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let out = apo(&["eval", "--checkpoint", s(&truncated), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    let bad = tmp.path().join("magic.apockpt");
    fs::write(&bad, magic).unwrap();
    assert_eq!(code(&apo(&["eval", "--checkpoint", s(&bad), "--out", s(tmp.path())])), 5);

    let missing = tmp.path().join("nope.apockpt");
    assert_eq!(code(&apo(&["eval", "--checkpoint", s(&missing), "--out", s(tmp.path())])), 5);
}

const HEADER: &str = "step,stage,loss,margin,defect_rate,follow_rate,mean_quality,nfe\n";

#[test]
fn report_header_only_gives_empty_axes() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("empty.csv");
    fs::write(&csv, HEADER).unwrap();
    let out_dir = tmp.path().join("plots");
    let out = apo(&["report", s(&csv), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["loss.svg", "defect_rate.svg", "comparison.svg"] {
        let doc = fs::read_to_string(out_dir.join(f)).unwrap();
        assert!(doc.starts_with("<svg") && doc.contains("<rect"), "{f}");
        assert!(!doc.contains("<polyline"), "{f}");
    }
}

#[test]
fn report_two_runs_overlay_with_legend_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let apo_csv = tmp.path().join("apo_arm.csv");
    let uni_csv = tmp.path().join("uniform_arm.csv");
    fs::write(
        &apo_csv,
        format!("{HEADER}0,offline,,,0.3,0.9,-0.4,60\n10,offline,0.69,0.01,,,,\n20,offline,0.6,0.05,0.1,0.95,-0.3,60\n"),
    )
    .unwrap();
    fs::write(
        &uni_csv,
        format!("{HEADER}0,offline,,,0.3,0.9,-0.4,60\n10,offline,0.7,0.0,,,,\n20,offline,0.65,0.02,0.2,0.9,-0.35,60\n"),
    )
    .unwrap();
    let (d1, d2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    for d in [&d1, &d2] {
        let out = apo(&["report", s(&apo_csv), s(&uni_csv), "--out", s(d)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for f in ["loss.svg", "defect_rate.svg", "comparison.svg"] {
        let a = fs::read_to_string(d1.join(f)).unwrap();
        assert_eq!(a, fs::read_to_string(d2.join(f)).unwrap(), "{f}");
        assert!(a.contains(">apo_arm.csv<") && a.contains(">uniform_arm.csv<"), "{f}");
    }
    let loss = fs::read_to_string(d1.join("loss.svg")).unwrap();
    assert_eq!(loss.matches("<polyline").count(), 2);
}

#[test]
fn report_malformed_row_exits_6_with_line() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("bad.csv");
    fs::write(&csv, format!("{HEADER}0,pretrain,1.0,,,,,\n10,pretrain,oops,,,,,\n")).unwrap();
    let out = apo(&["report", s(&csv), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 6);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    fs::write(&csv, "a,b,c\n").unwrap();
    assert_eq!(code(&apo(&["report", s(&csv), "--out", s(tmp.path())])), 6);
}
