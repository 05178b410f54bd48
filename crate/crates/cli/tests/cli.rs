use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use fallsafe_core::config::Config;
use serde_json::Value;

fn fallsafe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fallsafe")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> String {
    let mut v: Value = serde_json::from_str(&Config::shipped().to_json()).unwrap();
    edit(&mut v);
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p(&path).to_string()
}

#[test]
fn calibrate_counts_combinations_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = dir.path().join("vocab.txt");
    fs::write(&vocab, (0..10).map(|i| format!("concept {i}\n")).collect::<String>()).unwrap();
    let out = |name: &str| dir.path().join(name);
    let run = |o: &str| {
        fallsafe(&["calibrate", "--vocabulary", p(&vocab), "--max-combo", "2", "--alpha", "0.95", "--out", o])
    };
    let a = run(p(&out("a")));
    assert!(a.status.success(), "{}", stderr(&a));
    let text = stdout(&a);
    assert!(text.contains("N = 55"), "{text}");
    assert!(text.contains("tau = "), "{text}");
    let b = run(p(&out("b")));
    assert!(b.status.success());
    for f in ["detector.json", "cache.emb"] {
        assert_eq!(fs::read(out("a").join(f)).unwrap(), fs::read(out("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = p(dir.path());
    let bad_alpha = fallsafe(&["calibrate", "--alpha", "1.5", "--out", o]);
    assert_eq!(bad_alpha.status.code(), Some(2));
    let bad_method = fallsafe(&["simulate", "--method", "mpc", "--out", o]);
    assert_eq!(bad_method.status.code(), Some(2));
    assert!(stderr(&bad_method).contains("unknown method"));
    let no_scenario = fallsafe(&["simulate", "--scenario", "nowhere", "--out", o]);
    assert_eq!(no_scenario.status.code(), Some(2));
    let missing = fallsafe(&["simulate", "--config", p(&dir.path().join("absent.json")), "--out", o]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn simulate_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let quiet = dir.path().join("quiet");
    let o = fallsafe(&["simulate", "--scenario", "quiet flight", "--method", "aesop", "--out", p(&quiet)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&fs::read_to_string(quiet.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["outcome"]["kind"], "reached_goal");
    let csv = fs::read_to_string(quiet.join("trace.csv")).unwrap();
    assert!(csv.starts_with("t,x0,x1,x2,x3,x4,x5,u0,u1,u2,mode,score,flag,Y,y\n"));
    assert_eq!(csv.lines().count(), summary["ticks"].as_u64().unwrap() as usize + 1);

    // a violated outcome is data, not an error
    let west = dir.path().join("west");
    let o = fallsafe(&["simulate", "--scenario", "fire ahead, land west", "--method", "naive", "--out", p(&west)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&fs::read_to_string(west.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["outcome"]["kind"], "violated");
}

#[test]
fn infeasible_start_is_a_precondition_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |v| {
        v["scenarios"]["named"]["quiet flight"]["x0"] = serde_json::json!([10.0, 5.0, 2.0, 0.0, 2.0, 0.0]);
    });
    let o = fallsafe(&["simulate", "--config", &cfg, "--scenario", "quiet flight", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("precondition"), "{}", stderr(&o));
}

#[test]
fn ablate_smoke_run_is_quick_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let start = Instant::now();
    let o = fallsafe(&["ablate", "--n", "10", "--seed", "4", "--jobs", "2", "--out", p(&a)]);
    let secs = start.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(secs < 30.0, "took {secs:.1} s");
    let o = fallsafe(&["ablate", "--n", "10", "--seed", "4", "--jobs", "1", "--out", p(&b)]);
    assert!(o.status.success());
    for f in ["ablation.csv", "ablation.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rows: Value = serde_json::from_str(&fs::read_to_string(a.join("ablation.json")).unwrap()).unwrap();
    let methods: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["aesop", "naive", "fsmpc"]);
    assert_eq!(fs::read_to_string(a.join("ablation.csv")).unwrap().lines().count(), 4);
    let zero = fallsafe(&["ablate", "--n", "0", "--out", p(&a)]);
    assert_eq!(zero.status.code(), Some(2));
}

#[test]
fn selftest_passes_and_names_failures() {
    let o = fallsafe(&["selftest"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    for check in ["config", "qp oracle", "region invariance", "calibration fpr"] {
        assert!(text.contains(&format!("PASS {check}")), "{text}");
    }
    assert!(text.contains(" s "), "per-check wall time: {text}");

    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.json");
    let mut json = Config::shipped().to_json();
    json.truncate(json.len() / 2);
    fs::write(&broken, json).unwrap();
    let o = fallsafe(&["selftest", "--config", p(&broken)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL config"), "{}", stdout(&o));
}
