//! CLI-level acceptance: end-to-end determinism of the desk experiment.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

fn skinseg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_skinseg"))
}

/// Every artifact below the experiment root, sorted for stable comparison.
fn artifact_listing(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    files
}

#[test]
fn criterion_09_end_to_end_determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let run_a = dir.path().join("run_a");
    let run_b = dir.path().join("run_b");
    for out in [&run_a, &run_b] {
        let status = skinseg()
            .args(["reproduce-desk", "--seed", "17", "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success(), "reproduce-desk failed");
    }

    let a = artifact_listing(&run_a);
    let b = artifact_listing(&run_b);
    assert_eq!(
        a.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        b.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        "artifact sets differ"
    );
    let mut mismatched = Vec::new();
    for ((name, bytes_a), (_, bytes_b)) in a.iter().zip(&b) {
        if bytes_a != bytes_b {
            mismatched.push(name.clone());
        }
    }
    assert!(mismatched.is_empty(), "artifacts differ between runs: {mismatched:?}");
    assert!(a.iter().any(|(n, _)| n == "results.csv"));
    assert!(a.iter().any(|(n, _)| n == "pr_curves.json"));

    let elapsed = started.elapsed();
    println!(
        "[acceptance] criterion  9 (end-to-end determinism): PASS in {:.1}s ({} artifacts byte-identical)",
        elapsed.as_secs_f64(),
        a.len()
    );
    assert!(elapsed <= Duration::from_secs(1800), "two desk runs exceeded 30 minutes");
}
