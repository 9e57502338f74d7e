mod common;

use std::fs;

use common::*;

fn eval_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "eval",
        "--task",
        "task.json",
        "--dataset",
        "data.jsonl",
        "--mock-script",
        "script.jsonl",
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn missing_dataset_is_config_error() {
    let fx = classification_fixture();
    let out = run(
        fx.root(),
        &[
            "eval",
            "--task",
            "task.json",
            "--mock-script",
            "script.jsonl",
        ],
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("dataset path"), "{}", stderr(&out));
}

#[test]
fn nonexistent_dataset_is_data_error() {
    let fx = classification_fixture();
    let out = run(
        fx.root(),
        &[
            "eval",
            "--task",
            "task.json",
            "--dataset",
            "nope.jsonl",
            "--mock-script",
            "script.jsonl",
        ],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("nope.jsonl"));
}

#[test]
fn unreachable_endpoint_exits_2() {
    let fx = classification_fixture();
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let url = format!("http://127.0.0.1:{port}/v1");
    let out = bin()
        .current_dir(fx.root())
        .env("OPENAI_API_KEY", "test")
        .args([
            "eval",
            "--task",
            "task.json",
            "--dataset",
            "data.jsonl",
            "--base-url",
            &url,
            "--model",
            "m",
            "--set",
            "max_retries=0",
            "--set",
            "timeout_secs=2",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn both_backends_is_config_error() {
    let fx = classification_fixture();
    let out = run(fx.root(), &eval_args(&["--base-url", "http://localhost:1"]));
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn eval_writes_outputs() {
    let fx = classification_fixture();
    let out = run(fx.root(), &eval_args(&["--out", "o", "--bins", "2"]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(
        stdout(&out).starts_with("cqa: n=4 accuracy=0.750000"),
        "{}",
        stdout(&out)
    );

    let records = fx.read("o/records.jsonl");
    assert_eq!(records.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(records.lines().next().unwrap()).unwrap();
    assert_eq!(first["id"], "q1");
    assert_eq!(first["prediction"], "B");
    assert_eq!(first["correct"], true);
    assert!((first["confidence"].as_f64().unwrap() - 0.6).abs() < 1e-9);

    let report: serde_json::Value = serde_json::from_str(&fx.read("o/report.json")).unwrap();
    assert_eq!(report["n"], 4);
    assert!(report.get("raw_auroc").is_none());
    assert_eq!(report["bins"].as_array().unwrap().len(), 2);
    assert!(fx
        .read("o/calibration.csv")
        .starts_with("bin,count,mean_confidence,mean_accuracy\n"));
    assert!(!fx.path("o/records_raw.jsonl").exists());
}

#[test]
fn eval_mode_both_adds_raw_outputs() {
    let fx = classification_fixture();
    let out = run(fx.root(), &eval_args(&["--out", "o", "--mode", "both"]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("raw_auroc="));
    let report: serde_json::Value = serde_json::from_str(&fx.read("o/report.json")).unwrap();
    assert!(report.get("raw_auroc").is_some());
    assert!(report["raw_ece"].is_number());
    let raw = fx.read("o/records_raw.jsonl");
    // q3: normalized 0.75 vs raw 0.3
    let q3: serde_json::Value = raw
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .nth(2)
        .unwrap();
    assert_eq!(q3["id"], "q3");
    assert!((q3["confidence"].as_f64().unwrap() - 0.3).abs() < 1e-9);
}

#[test]
fn eval_config_file_and_env_layering() {
    let fx = classification_fixture();
    fs::write(
        fx.path("run.conf"),
        "# run\ntask = task.json\ndataset = data.jsonl\nmock_script = script.jsonl\nbins = 3\n",
    )
    .unwrap();
    let out = bin()
        .current_dir(fx.root())
        .env("ANCHORCONF_BINS", "2")
        .args(["eval", "--config", "run.conf", "--out", "o"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&fx.read("o/report.json")).unwrap();
    assert_eq!(report["bins"].as_array().unwrap().len(), 2);

    let out = bin()
        .current_dir(fx.root())
        .env("ANCHORCONF_BINS", "2")
        .args(["eval", "--config", "run.conf", "--out", "o", "--bins", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_str(&fx.read("o/report.json")).unwrap();
    assert_eq!(report["bins"].as_array().unwrap().len(), 1);
}

#[test]
fn unknown_config_key_is_rejected() {
    let fx = classification_fixture();
    fs::write(fx.path("run.conf"), "tasks = task.json\n").unwrap();
    let out = run(fx.root(), &["eval", "--config", "run.conf"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("tasks"), "{}", stderr(&out));
}

#[test]
fn malformed_dataset_reports_every_line() {
    let fx = classification_fixture();
    fs::write(fx.path("bad.jsonl"), "{\"id\":\"a\",\"input\":\"x\",\"gold\":\"A\"}\nnot json\n{\"id\":\"a\",\"input\":\"y\",\"gold\":\"B\"}\n")
        .unwrap();
    let out = run(
        fx.root(),
        &[
            "eval",
            "--task",
            "task.json",
            "--dataset",
            "bad.jsonl",
            "--mock-script",
            "script.jsonl",
        ],
    );
    assert_eq!(code(&out), 3);
    let err = stderr(&out);
    assert!(
        err.contains("line 2:") && err.contains("line 3: duplicate id"),
        "{err}"
    );
}

#[test]
fn report_subcommand_renders_bins() {
    let fx = classification_fixture();
    assert_eq!(code(&run(fx.root(), &eval_args(&["--out", "o"]))), 0);
    let out = run(fx.root(), &["report", "o/report.json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out), fx.read("o/calibration.csv"));
    let out = run(
        fx.root(),
        &["report", "o/report.json", "--csv", "curve.csv"],
    );
    assert_eq!(code(&out), 0);
    assert_eq!(fx.read("curve.csv"), fx.read("o/calibration.csv"));
    assert_eq!(code(&run(fx.root(), &["report", "missing.json"])), 3);
}

fn sweep_args(taus: &str) -> Vec<&str> {
    vec![
        "sweep",
        "--task",
        "task.json",
        "--dataset",
        "data.jsonl",
        "--mock-script",
        "script.jsonl",
        "--taus",
        taus,
        "--out",
        "o",
    ]
}

/// Four questions: two confident and right, two unsure, wrong, and fixed by
/// retrieval.
fn four_items() -> Vec<Item> {
    let item = |id: &str, right: bool, c1: f64| Item {
        id: id.into(),
        gold: format!("gold-{id}"),
        a1: if right {
            format!("gold-{id}")
        } else {
            "nope".into()
        },
        c1,
        a2: format!("gold-{id}"),
        c2: 0.9,
    };
    vec![
        item("r1", true, 0.9),
        item("r2", true, 0.8),
        item("r3", false, 0.4),
        item("r4", false, 0.4),
    ]
}

#[test]
fn sweep_scripted_scenario() {
    let fx = generation_fixture(&four_items());
    let out = run(fx.root(), &sweep_args("0,0.5,1.01"));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fx.read("o/sweep.csv");
    assert_eq!(stdout(&out), csv);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "tau,retrieval_pct,accuracy_pct,gain_pp,efficiency");
    assert_eq!(rows[1], "0.000000,0.000000,50.000000,0.000000,undefined");
    assert_eq!(rows[2], "0.500000,50.000000,100.000000,50.000000,1.000000");
    assert_eq!(rows[3], "1.010000,100.000000,100.000000,50.000000,0.500000");
}

#[test]
fn sweep_tau_zero_only() {
    let fx = generation_fixture(&four_items());
    let out = run(fx.root(), &sweep_args("0"));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fx.read("o/sweep.csv");
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(
        csv.lines().nth(1).unwrap(),
        "0.000000,0.000000,50.000000,0.000000,undefined"
    );
}

#[test]
fn sweep_requires_taus() {
    let fx = generation_fixture(&four_items());
    let out = run(
        fx.root(),
        &[
            "sweep",
            "--task",
            "task.json",
            "--dataset",
            "data.jsonl",
            "--mock-script",
            "script.jsonl",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("taus"), "{}", stderr(&out));
    let out = run(fx.root(), &sweep_args("0.5,abc"));
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

fn write_bins(fx: &Fixture, name: &str, rows: &[(f64, f64, f64)]) {
    let mut text = String::from("count,mean_accuracy,mean_confidence\n");
    for (n, a, c) in rows {
        text += &format!("{n},{a},{c}\n");
    }
    fs::write(fx.path(name), text).unwrap();
}

#[test]
fn ece_from_bins_commands() {
    let fx = classification_fixture();
    write_bins(&fx, "even.csv", &[(10.0, 0.2, 0.2), (30.0, 0.7, 0.7)]);
    let out = run(fx.root(), &["ece-from-bins", "even.csv"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out), "ece: 0.000000\naccuracy: 0.575000\n");

    write_bins(&fx, "pct.csv", &[(1.0, 50.0, 0.4), (1.0, 100.0, 0.9)]);
    let out = run(fx.root(), &["ece-from-bins", "pct.csv"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("--percent"), "{}", stderr(&out));
    let out = run(fx.root(), &["ece-from-bins", "pct.csv", "--percent"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out), "ece: 0.100000\naccuracy: 0.750000\n");

    fs::write(fx.path("cols.csv"), "count,mean_confidence\n1,0.5\n").unwrap();
    let out = run(fx.root(), &["ece-from-bins", "cols.csv"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("mean_accuracy"));
    fs::write(
        fx.path("junk.csv"),
        "count,mean_accuracy,mean_confidence\n1,x,0.5\n",
    )
    .unwrap();
    assert_eq!(code(&run(fx.root(), &["ece-from-bins", "junk.csv"])), 3);
    assert_eq!(code(&run(fx.root(), &["ece-from-bins", "absent.csv"])), 3);
}

#[test]
fn sandbox_is_deterministic() {
    let fx = classification_fixture();
    let args = |dir: &'static str| {
        vec![
            "sandbox",
            "--out",
            dir,
            "--set",
            "ce_steps=200",
            "--set",
            "adv_steps=50",
            "--set",
            "dpo_steps=100",
        ]
    };
    let a = run(fx.root(), &args("a"));
    let b = run(fx.root(), &args("b"));
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(fx.read("a/trace.csv"), fx.read("b/trace.csv"));
    assert_eq!(fx.read("a/summary.json"), fx.read("b/summary.json"));
    assert!(fx
        .read("a/trace.csv")
        .starts_with("step,method,kl,max_prob,ece_proxy\n"));

    let c = run(
        fx.root(),
        &[
            "sandbox",
            "--out",
            "c",
            "--seed",
            "7",
            "--set",
            "ce_steps=200",
            "--set",
            "adv_steps=50",
            "--set",
            "dpo_steps=100",
        ],
    );
    assert_eq!(code(&c), 0);
    assert_ne!(fx.read("a/trace.csv"), fx.read("c/trace.csv"));
}

#[test]
fn sandbox_rejects_bad_distributions() {
    let fx = classification_fixture();
    for p in ["1.0", "0.6,0.6", "1.2,-0.2"] {
        let out = run(fx.root(), &["sandbox", "--out", "o", "--p-data", p]);
        assert_eq!(code(&out), 1, "{p}: {}", stderr(&out));
    }
}
