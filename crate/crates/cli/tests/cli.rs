use std::path::PathBuf;
use std::process::{Command, Output};

use guided_core::harness::EvalReport;
use guided_core::read_guideline;
use guided_core::testkit::{script, six_four_task, MockTask};

/// Temp workspace holding a mock script, a config and one dataset per task.
struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new(tasks: &[MockTask]) -> Env {
        let dir = tempfile::tempdir().unwrap();
        let s = serde_json::to_string_pretty(&script(tasks)).unwrap();
        std::fs::write(dir.path().join("mock.json"), s).unwrap();
        std::fs::write(
            dir.path().join("guided.toml"),
            "runs_dir = \"runs\"\ncache_dir = \"cache\"\nconcurrency = 2\n\n\
             [models.mini]\nmock_script = \"mock.json\"\n\n\
             [models.big]\nmock_script = \"mock.json\"\n",
        )
        .unwrap();
        for t in tasks {
            std::fs::write(dir.path().join(format!("{}.jsonl", t.task_id)), t.to_jsonl()).unwrap();
        }
        Env { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_guided"))
            .current_dir(self.dir.path())
            .env("SOURCE_DATE_EPOCH", "1700000000")
            .env_remove("GUIDED_CONFIG")
            .env_remove("RUST_LOG")
            .arg("--config")
            .arg(self.path("guided.toml"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
        out
    }

    fn reports(&self, runs: &str) -> Vec<EvalReport> {
        let mut out: Vec<EvalReport> = std::fs::read_dir(self.path(runs))
            .unwrap()
            .flatten()
            .map(|e| e.path().join("report.json"))
            .filter(|p| p.is_file())
            .map(|p| EvalReport::load(&p).unwrap())
            .collect();
        out.sort_by(|a, b| a.method.cmp(&b.method));
        out
    }
}

fn data(task: &str) -> Vec<String> {
    ["--data", &format!("{task}.jsonl"), "--task", task, "--kind", "numeric"]
        .map(String::from)
        .to_vec()
}

fn args<'a>(head: &[&'a str], data: &'a [String], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(data.iter().map(String::as_str)).chain(tail.iter().copied()).collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn learn_writes_valid_guideline_and_warm_cache_is_free() {
    let env = Env::new(&[six_four_task("ST")]);
    let d = data("ST");
    let first = env.ok(&args(&["learn"], &d, &["--model", "mini", "--out", "g1.json"]));
    assert!(stdout(&first).contains("guideline with 5 steps learned from 3 samples"));
    assert!(!stderr(&first).contains(" 0 live calls"));
    let g = read_guideline(&env.path("g1.json")).unwrap();
    assert_eq!(g.task_id, "ST");
    assert_eq!(g.provenance.source_model, "mini");
    assert!(!env.path("g1.json.buffer.json").exists());

    let second = env.ok(&args(&["learn"], &d, &["--model", "mini", "--out", "g2.json"]));
    assert!(stderr(&second).contains("provider: 0 live calls, 0 cache inserts"), "{}", stderr(&second));
    assert_eq!(std::fs::read(env.path("g1.json")).unwrap(), std::fs::read(env.path("g2.json")).unwrap());
}

#[test]
fn missing_dataset_and_unknown_model_are_usage_errors() {
    let env = Env::new(&[six_four_task("ST")]);
    let d = data("NOPE");
    let out = env.run(&args(&["learn"], &d, &["--model", "mini", "--out", "g.json"]));
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("NOPE.jsonl"));

    let d = data("ST");
    let out = env.run(&args(&["eval"], &d, &["--model", "absent"]));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("absent"));

    assert_eq!(code(&env.run(&["eval", "--bogus"])), 2);
    assert_eq!(code(&env.run(&["--help"])), 0);
}

#[test]
fn cot_baseline_costs_one_call_per_sample() {
    let env = Env::new(&[six_four_task("ST")]);
    let d = data("ST");
    let out = env.ok(&args(&["eval"], &d, &["--model", "mini", "--baseline", "cot", "--no-cache"]));
    assert!(stderr(&out).contains("provider: 7 live calls"), "{}", stderr(&out));
    assert!(stdout(&out).contains("accuracy 0.7143 (5/7)"));
    let r = &env.reports("runs")[0];
    assert!(r.per_sample.iter().all(|s| s.provider_calls == 1));
    assert_eq!(r.method, "CoT [mini]");
}

#[test]
fn baseline_with_guided_flags_is_rejected() {
    let env = Env::new(&[six_four_task("ST")]);
    let d = data("ST");
    env.ok(&args(&["learn"], &d, &["--model", "mini", "--out", "g.json"]));
    let out = env.run(&args(&["eval"], &d, &["--model", "mini", "--baseline", "cot", "--guideline", "g.json"]));
    assert_eq!(code(&out), 2);
    let out = env.run(&args(&["eval"], &d, &["--model", "mini", "--no-learn", "--guideline", "g.json"]));
    assert_eq!(code(&out), 2);
    let out = env.run(&args(&["eval"], &d, &["--model", "mini", "--rounds", "9"]));
    assert_eq!(code(&out), 2, "rounds above the cap");
}

#[test]
fn executor_refiner_pairing_is_recorded() {
    let env = Env::new(&[six_four_task("ST")]);
    let d = data("ST");
    let out = env.ok(&args(&["eval"], &d, &["--executor", "mini", "--refiner", "big"]));
    assert!(stdout(&out).contains("[mini/big]"));
    let r = &env.reports("runs")[0];
    assert_eq!(r.config.executor_model, "mini");
    assert_eq!(r.config.refiner_model, "big");
}

#[test]
fn zero_rounds_equals_no_refine() {
    let env = Env::new(&[six_four_task("ST")]);
    let d = data("ST");
    env.ok(&args(&["eval"], &d, &["--model", "mini", "--rounds", "0", "--runs-dir", "a"]));
    env.ok(&args(&["eval"], &d, &["--model", "mini", "--no-refine", "--runs-dir", "b"]));
    let (a, b) = (env.reports("a"), env.reports("b"));
    assert_eq!(a[0].to_json_bytes().unwrap(), b[0].to_json_bytes().unwrap());
    assert!(a[0].method.contains("refine=✗"));
    assert!(a[0].per_sample.iter().all(|s| s.provider_calls == 6));
}

#[test]
fn transfer_labels_source_and_target() {
    let env = Env::new(&[six_four_task("ST"), six_four_task("HY")]);
    env.ok(&args(&["learn"], &data("ST"), &["--model", "mini", "--out", "st.json"]));
    let hy = data("HY");
    let out = env.ok(&args(&["transfer"], &hy, &["--model", "mini", "--guideline", "st.json"]));
    assert!(stdout(&out).contains("on ST→HY"), "{}", stdout(&out));
    let r = &env.reports("runs")[0];
    assert_eq!(r.task_id, "HY");
    assert_eq!(r.source_task.as_deref(), Some("ST"));
    assert_eq!(r.per_sample.len(), 7);

    let out = env.run(&args(&["transfer"], &hy, &["--model", "mini"]));
    assert_eq!(code(&out), 2, "transfer without a guideline");
}

#[test]
fn malformed_guideline_is_usage_error() {
    let env = Env::new(&[six_four_task("ST")]);
    std::fs::write(env.path("bad.json"), r#"{"task_id":"ST","steps":[]}"#).unwrap();
    let out = env.run(&args(&["transfer"], &data("ST"), &["--model", "mini", "--guideline", "bad.json"]));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad.json"));
    assert!(!env.path("runs").exists());
}

#[test]
fn self_transfer_matches_task_specific_eval() {
    let env = Env::new(&[six_four_task("ST")]);
    let d = data("ST");
    env.ok(&args(&["learn"], &d, &["--model", "mini", "--out", "st.json"]));
    env.ok(&args(&["eval"], &d, &["--model", "mini", "--runs-dir", "a"]));
    env.ok(&args(&["transfer"], &d, &["--model", "mini", "--guideline", "st.json", "--runs-dir", "b"]));
    let (a, b) = (env.reports("a"), env.reports("b"));
    assert_eq!(a[0].to_json_bytes().unwrap(), b[0].to_json_bytes().unwrap());
    assert_eq!(a[0].task_label(), "ST");
}

#[test]
fn sweep_and_report_build_summary() {
    let env = Env::new(&[six_four_task("ST")]);
    let d = data("ST");
    env.ok(&args(&["sweep"], &d, &["--model", "mini", "--axis", "refine_rounds", "--values", "0,1,2"]));
    let reports = env.reports("runs");
    assert_eq!(reports.len(), 3);
    let mut calls: Vec<usize> = reports.iter().map(|r| r.total_provider_calls()).collect();
    calls.sort();
    assert_eq!(calls, [42, 77, 112]);

    env.ok(&args(&["eval"], &d, &["--model", "mini", "--baseline", "few_shot_cot"]));
    std::fs::remove_file(env.path("runs/summary.md")).unwrap();
    let out = env.ok(&["report"]);
    assert!(stdout(&out).contains("4 reports"));
    let summary = std::fs::read_to_string(env.path("runs/summary.md")).unwrap();
    assert!(summary.starts_with("| Method | ST | Avg |"), "{summary}");
    assert_eq!(summary.lines().count(), 2 + 4);

    let out = env.run(&args(&["sweep"], &d, &["--model", "mini", "--axis", "width", "--values", "1"]));
    assert_eq!(code(&out), 2);
    assert_eq!(code(&env.run(&["report", "--runs-dir", "empty"])), 2);
}

#[test]
fn record_then_replay_reproduces_report() {
    let env = Env::new(&[six_four_task("ST")]);
    let d = data("ST");
    // 3 train samples at 2 calls, one aggregation, 7 test samples at 11 calls
    env.ok(&args(&["eval"], &d, &["--model", "mini", "--record", "tape.json", "--no-cache", "--runs-dir", "a"]));
    let out = env.ok(&args(&["--replay", "tape.json", "eval"], &d, &["--model", "mini", "--runs-dir", "b"]));
    assert!(stderr(&out).contains("provider: 84 replayed calls"), "{}", stderr(&out));
    let (a, b) = (env.reports("a"), env.reports("b"));
    assert_eq!(a[0].to_json_bytes().unwrap(), b[0].to_json_bytes().unwrap());
}

#[test]
fn dump_trajectories_writes_one_file_per_sample() {
    let env = Env::new(&[six_four_task("ST")]);
    let d = data("ST");
    env.ok(&args(&["eval"], &d, &["--model", "mini", "--dump-trajectories"]));
    let r = &env.reports("runs")[0];
    let n = std::fs::read_dir(env.path("runs/trajectories").join(&r.run_id)).unwrap().count();
    assert_eq!(n, 7);
}
