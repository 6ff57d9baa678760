use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mqa"))
        .args(args)
        .output()
        .unwrap()
}

fn configs(name: &str) -> String {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    dir.join(name).to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn parity_prints_solved_widths() {
    for (file, want) in [
        ("parity_wmt_multi_query.json", 5440),
        ("parity_wmt_one_head.json", 6784),
        ("parity_lm_multi_query.json", 9088),
    ] {
        let out = mqa(&["parity", "--config", &configs(file)]);
        assert!(out.status.success());
        assert!(
            stdout(&out).starts_with(&format!("d_ff {want}\n")),
            "{file}"
        );
    }
}

#[test]
fn cost_defaults_to_the_toy_shape() {
    let out = mqa(&["cost"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("flops 320\n"));
    assert!(text.contains("words 144 (sum of tensor sizes)\n"));
    let out = mqa(&["cost", "--set", "h=4", "--set", "d=8"]);
    assert!(out.status.success());
    assert_ne!(stdout(&out), text);
}

#[test]
fn verify_passes_and_exits_zero() {
    let out = mqa(&["verify"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 10);
    assert!(text.ends_with("10 passed, 0 failed\n"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(mqa(&["cost", "--set", "colour=3"]).status.code(), Some(2));
    assert_eq!(mqa(&["cost", "--set", "novalue"]).status.code(), Some(2));
    assert_eq!(mqa(&["parity"]).status.code(), Some(2));
    assert_eq!(mqa(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        mqa(&["report", "--config", "/nonexistent/report.csv"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        mqa(&[
            "bench",
            "--format",
            "html",
            "--config",
            &configs("bench_small.json")
        ])
        .status
        .code(),
        Some(2)
    );
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn train_then_decode_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    let out = mqa(&[
        "train",
        "--config",
        &configs("toy_copy_multi_query.json"),
        "--set",
        "train.steps=5",
        "--set",
        "train.eval_samples=4",
        "--set",
        "model.layers=1",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).starts_with("steps 5\n"));
    let curve = std::fs::read_to_string(ckpt.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 6);
    assert!(ckpt.join("manifest.json").exists());

    let seq = "[2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17]";
    for (decode, check) in [
        (
            r#"{"strategy":"greedy","beam_size":1,"alpha":0.0,"max_steps":16,"cache":"padded"}"#,
            None,
        ),
        (
            r#"{"strategy":"beam","beam_size":3,"alpha":0.6,"max_steps":16,"cache":"growing"}"#,
            Some("score"),
        ),
    ] {
        let doc = dir.path().join("decode.json");
        write(
            &doc,
            &format!(r#"{{"checkpoint":"ckpt","decode":{decode},"sequences":[{seq}]}}"#),
        );
        let out = mqa(&["decode", "--config", doc.to_str().unwrap()]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let text = stdout(&out);
        let line = text.lines().next().unwrap();
        let tokens: Vec<u32> = line
            .split(' ')
            .take_while(|t| t.parse::<u32>().is_ok())
            .map(|t| t.parse().unwrap())
            .collect();
        assert_eq!(tokens.len(), 16);
        assert!(tokens.iter().all(|&t| t < 32));
        if let Some(word) = check {
            assert!(line.contains(word));
        }
    }
}

#[test]
fn bench_csv_renders_as_markdown() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("report.csv");
    let out = mqa(&[
        "bench",
        "--config",
        &configs("bench_small.json"),
        "--format",
        "csv",
        "--no-beam",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text, stdout(&out));
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect();
    let labels: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(
        labels,
        [
            "multi-head",
            "multi-query",
            "multi-head local",
            "multi-query local"
        ]
    );

    let out = mqa(&["report", "--config", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let md = stdout(&out);
    assert!(md.starts_with("CPU: "));
    assert!(md.contains("| multi-query local |"));
    let again = mqa(&[
        "report",
        "--config",
        csv.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert_eq!(stdout(&again), text);
}
