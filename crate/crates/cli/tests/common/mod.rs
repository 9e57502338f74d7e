#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anchorconf::client::mock::{
    prob_response, text_response, to_jsonl, yes_no_response, ScriptEntry,
};

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_anchorconf"));
    // keep the caller's environment from leaking config into tests
    for (k, _) in std::env::vars() {
        if k.starts_with("ANCHORCONF_") {
            cmd.env_remove(k);
        }
    }
    cmd
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// One synthetic question: first answer and confidence without context,
/// second answer and confidence with it.
pub struct Item {
    pub id: String,
    pub gold: String,
    pub a1: String,
    pub c1: f64,
    pub a2: String,
    pub c2: f64,
}

/// Deterministic synthetic set: confidences on a 0.05 grid, roughly 60%
/// first-pass accuracy, retrieval usually fixing wrong answers.
pub fn synthetic(n: usize) -> Vec<Item> {
    (0..n)
        .map(|i| {
            let gold = format!("answer {i}");
            let wrong = format!("guess {i}");
            let h = (i * 37 + 11) % 100;
            let first_right = h < 60;
            let c1 = if first_right {
                0.5 + (h % 10) as f64 * 0.05
            } else {
                0.05 + (h % 12) as f64 * 0.05
            };
            let second_right = (i * 13) % 10 < 8;
            Item {
                id: format!("s{i:03}"),
                a1: if first_right {
                    gold.clone()
                } else {
                    wrong.clone()
                },
                c1,
                a2: if second_right { gold.clone() } else { wrong },
                c2: if second_right { 0.9 } else { 0.3 },
                gold,
            }
        })
        .collect()
}

pub fn generation_script(items: &[Item]) -> Vec<ScriptEntry> {
    let judge = "Is this answer correct".to_string();
    let mut entries = Vec::new();
    for e in items {
        let tag = format!("[{}]", e.id);
        entries.push(ScriptEntry::containing(
            [tag.clone(), "Context:".into(), judge.clone()],
            &yes_no_response(e.c2, 1.0 - e.c2),
        ));
        entries.push(ScriptEntry::containing(
            [tag.clone(), judge.clone()],
            &yes_no_response(e.c1, 1.0 - e.c1),
        ));
        entries.push(ScriptEntry::containing(
            [tag.clone(), "Context:".into()],
            &text_response(&e.a2),
        ));
        entries.push(ScriptEntry::containing([tag], &text_response(&e.a1)));
    }
    entries
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn read(&self, name: &str) -> String {
        fs::read_to_string(self.path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }
}

/// task.json, data.jsonl and script.jsonl for a generation task.
pub fn generation_fixture(items: &[Item]) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("task.json"),
        r#"{"task_id":"triviaqa","kind":"generation","matcher":"substring","prompt_template":"{input}"}"#,
    )
    .unwrap();
    let data: String = items
        .iter()
        .map(|e| {
            serde_json::json!({
                "id": e.id,
                "input": format!("[{}] Who or what is it?", e.id),
                "gold": [e.gold],
                "context": [format!("Reference passage for {}.", e.id)],
            })
            .to_string()
                + "\n"
        })
        .collect();
    fs::write(dir.path().join("data.jsonl"), data).unwrap();
    fs::write(
        dir.path().join("script.jsonl"),
        to_jsonl(&generation_script(items)),
    )
    .unwrap();
    Fixture { dir }
}

/// Four-question multiple-choice task with hand-checkable confidences.
pub fn classification_fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("task.json"),
        r#"{"task_id":"cqa","kind":"classification","matcher":"exact",
            "label_set":[{"label":"A"},{"label":"B"},{"label":"C"},{"label":"D"}],
            "prompt_template":"{input}\n{choices}\nAnswer:"}"#,
    )
    .unwrap();
    let rows = [
        (r#"{"id":"q1","input":"[q1] pick","choices":["w","x","y","z"],"gold":"B"}"#),
        (r#"{"id":"q2","input":"[q2] pick","choices":["w","x","y","z"],"gold":"A"}"#),
        (r#"{"id":"q3","input":"[q3] pick","choices":["w","x","y","z"],"gold":"D"}"#),
        (r#"{"id":"q4","input":"[q4] pick","choices":["w","x","y","z"],"gold":"C"}"#),
    ];
    fs::write(dir.path().join("data.jsonl"), rows.join("\n") + "\n").unwrap();
    let script = vec![
        ScriptEntry::containing(
            ["[q1]"],
            &prob_response(&[("B", 0.6), ("A", 0.2), ("C", 0.1), ("D", 0.1)]),
        ),
        ScriptEntry::containing(["[q2]"], &prob_response(&[("A", 0.6), ("B", 0.4)])),
        ScriptEntry::containing(
            ["[q3]"],
            &prob_response(&[("C", 0.3), ("D", 0.1), ("The", 0.6)]),
        ),
        ScriptEntry::containing(["[q4]"], &prob_response(&[("C", 0.9), ("A", 0.1)])),
    ];
    fs::write(dir.path().join("script.jsonl"), to_jsonl(&script)).unwrap();
    Fixture { dir }
}
