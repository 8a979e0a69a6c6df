mod common;

use std::io::Write;
use std::process::{Command, Output, Stdio};

use common::{REFGUEST, SUPERVISOR};
use serde_json::Value;

fn dummy_file() -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, r#"{{"op":"bench","dirty":1}}"#).unwrap();
    f
}

fn run(args: &[&str], guest: &[&str], input: &str) -> Output {
    let mut child = Command::new(SUPERVISOR)
        .args(args)
        .arg("--")
        .args(guest)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn empty_input_shuts_down_cleanly() {
    let d = dummy_file();
    for mode in ["base", "gh", "gh-nop", "fork"] {
        let out = run(&["--mode", mode, "--dummy-input", d.path().to_str().unwrap()], &[REFGUEST], "");
        assert_eq!(out.status.code(), Some(0), "{mode}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out.stdout.is_empty());
    }
}

#[test]
fn configuration_errors_exit_4() {
    let d = dummy_file();
    let p = d.path().to_str().unwrap();
    assert_eq!(run(&["--mode", "snapshot", "--dummy-input", p], &[REFGUEST], "").status.code(), Some(4));
    assert_eq!(run(&["--mode", "gh", "--dummy-input", "/nonexistent"], &[REFGUEST], "").status.code(), Some(4));
    assert_eq!(run(&["--mode", "gh"], &[REFGUEST], "").status.code(), Some(4));
    let out = run(&["--mode", "fork", "--dummy-input", p], &[REFGUEST, "--background-thread"], "");
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn spawn_failures_exit_3() {
    let d = dummy_file();
    let p = d.path().to_str().unwrap();
    assert_eq!(run(&["--mode", "gh", "--dummy-input", p], &["/nonexistent/guest"], "").status.code(), Some(3));
    let mut bad = tempfile::NamedTempFile::new().unwrap();
    writeln!(bad, r#"{{"op":"fail"}}"#).unwrap();
    let out = run(&["--mode", "gh", "--dummy-input", bad.path().to_str().unwrap()], &[REFGUEST], "");
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergence_exits_2_after_answering() {
    let d = dummy_file();
    let input = concat!(
        r#"{"id":"a","value":{"op":"open_file"}}"#,
        "\n",
        r#"{"id":"b","value":{"op":"echo"}}"#,
        "\n"
    );
    let out = run(&["--mode", "gh", "--strict-fds", "--dummy-input", d.path().to_str().unwrap()], &[REFGUEST], input);
    assert_eq!(out.status.code(), Some(2));
    let got = lines(&out);
    assert_eq!(got[0]["id"], "a");
    assert!(got[0]["result"]["fd"].is_number());
    // the queued request gets a terminal error instead of silence
    if let Some(b) = got.get(1) {
        assert_eq!(b["error"]["code"], 502);
    }
}

#[test]
fn responses_and_stats_for_every_request() {
    let d = dummy_file();
    let stats = tempfile::NamedTempFile::new().unwrap();
    let input: String = (0..10).map(|i| format!("{{\"id\":\"q{i}\",\"value\":{{\"op\":\"bench\",\"dirty\":{i}}}}}\n")).collect();
    let out = run(
        &[
            "--mode",
            "gh",
            "--dummy-input",
            d.path().to_str().unwrap(),
            "--stats-out",
            stats.path().to_str().unwrap(),
        ],
        &[REFGUEST, "--arena-pages", "64"],
        &format!("not json\n{input}"),
    );
    assert_eq!(out.status.code(), Some(0));
    let got = lines(&out);
    assert_eq!(got[0]["error"]["code"], 400);
    let ids: Vec<_> = got[1..].iter().map(|v| v["id"].as_str().unwrap().to_owned()).collect();
    assert_eq!(ids, (0..10).map(|i| format!("q{i}")).collect::<Vec<_>>());
    let recs: Vec<Value> = std::fs::read_to_string(stats.path())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(recs.len(), 10);
    for r in &recs {
        assert_eq!(r["mode"], "gh");
        assert!(r["restore_us"].as_u64().unwrap() > 0);
        assert!(r["restore"]["pages_restored"].as_u64().is_some());
    }
}

#[test]
fn full_queue_is_answered_with_503() {
    let d = dummy_file();
    let input: String = (0..6).map(|i| format!("{{\"id\":\"w{i}\",\"value\":{{\"op\":\"work\",\"ms\":100}}}}\n")).collect();
    let out = run(
        &["--mode", "gh", "--max-queue", "1", "--dummy-input", d.path().to_str().unwrap()],
        &[REFGUEST],
        &input,
    );
    assert_eq!(out.status.code(), Some(0));
    let got = lines(&out);
    assert_eq!(got.len(), 6);
    let full = got.iter().filter(|v| v["error"]["code"] == 503).count();
    assert!((1..6).contains(&full), "{got:?}");
}

#[test]
fn arbitrary_programs_can_be_supervised() {
    // A shell guest: logs to stderr once, then answers every request with 1.
    let script = r#"echo booted >&2; exec sed -u 's/.*"id":"\([^"]*\)".*/{"id":"\1","result":1}/'"#;
    let d = dummy_file();
    for mode in ["base", "gh"] {
        let out = run(
            &["--mode", mode, "--dummy-input", d.path().to_str().unwrap()],
            &["/bin/sh", "-c", script],
            "{\"id\":\"x\",\"value\":2}\n{\"id\":\"y\",\"value\":3}\n",
        );
        assert_eq!(out.status.code(), Some(0), "{mode}: {}", String::from_utf8_lossy(&out.stderr));
        let got = lines(&out);
        assert_eq!(got, vec![serde_json::json!({"id":"x","result":1}), serde_json::json!({"id":"y","result":1})]);
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.lines().any(|l| l.starts_with('[') && l.ends_with("] booted")), "{err}");
    }
}
