//! Helpers for driving the `scot` binary.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn scot(dir: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scot"));
    c.current_dir(dir).env("RUST_LOG", "warn").env_remove("SCOT_LLM_API_KEY");
    c
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    scot(dir).args(args).output().expect("spawn scot")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// The JSON error line on stderr, if any.
pub fn error_line(o: &Output) -> Option<serde_json::Value> {
    String::from_utf8_lossy(&o.stderr)
        .lines()
        .rev()
        .find_map(|l| serde_json::from_str::<serde_json::Value>(l).ok().filter(|v| v.get("error").is_some()))
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Fails with the command's stderr when it did not exit 0.
pub fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

/// `key=value` lines from a report, as a lookup.
pub fn report_value(text: &str, key: &str) -> Option<f64> {
    text.lines()
        .filter_map(|l| l.rsplit_once('='))
        .find(|(k, _)| *k == key)
        .and_then(|(_, v)| v.parse().ok())
}

/// Every regular file under `dir`, relative path to bytes, sorted.
pub fn snapshot_dir(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Metrics log with the wall-clock field removed from every record.
pub fn metrics_without_time(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

/// A small synthetic dataset written by the CLI.
pub fn tiny_synth(dir: &Path, name: &str, seed: u64, gallery: usize, extra: &[&str]) -> PathBuf {
    let (seed, gallery) = (seed.to_string(), gallery.to_string());
    let mut args = vec![
        "synth", "--out", name, "--concepts", "4", "--dim", "8", "--n-train", "40", "--n-eval", "10",
        "--gallery-size", &gallery, "--seed", &seed,
    ];
    args.extend_from_slice(extra);
    ok(run(dir, &args));
    dir.join(name)
}
