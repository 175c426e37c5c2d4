use std::fs;
use std::process::{Command, Output};

fn teds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teds")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn perfect_predictions_score_100() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = teds(&[
        "--set",
        "data.num_subjects=2",
        "--set",
        "data.videos_per_subject=1",
        "--seed",
        "3",
        "gen-data",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let annotations = data.join("annotations.tsv");
    let mut preds = String::new();
    for line in fs::read_to_string(&annotations).unwrap().lines() {
        let f: Vec<&str> = line.split('\t').collect();
        if f[3] != "-" {
            preds.push_str(&format!("{}\t{}\t{}\t1.000000\t{}\n", f[0], f[3], f[4], f[6]));
        }
    }
    let pred_path = dir.path().join("perfect.tsv");
    fs::write(&pred_path, preds).unwrap();
    let out = teds(&[
        "score",
        "--predictions",
        pred_path.to_str().unwrap(),
        "--annotations",
        annotations.to_str().unwrap(),
        "--format",
        "tsv",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[4], "100.0", "{text}");
    assert_eq!(row[5], "100.0", "{text}");
    assert_eq!(row[6], "1000", "{text}");
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let cases: [&[&str]; 4] = [
        &["frobnicate"],
        &[
            "score",
            "--predictions",
            "/nonexistent/p.tsv",
            "--annotations",
            "/nonexistent/a.tsv",
        ],
        &["--set", "train.no_such_field=1", "gen-data", "--out", "/tmp/unused"],
        &["--set", "data.max_events=50", "gen-data", "--out", "/tmp/unused"],
    ];
    for args in cases {
        let out = teds(args);
        assert!(!out.status.success(), "{args:?} succeeded");
        let err = stderr(&out);
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
    }
}

#[test]
fn detect_rejects_mismatched_features() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg_args = ["--set", "data.num_subjects=1", "--set", "data.videos_per_subject=1"];
    let mut args: Vec<&str> = cfg_args.to_vec();
    args.extend(["gen-data", "--out", data.to_str().unwrap()]);
    assert!(teds(&args).status.success());
    // A checkpoint for 16-dimensional input against 64-dimensional features.
    let run = dir.path().join("run");
    let mut args: Vec<&str> = cfg_args.to_vec();
    let dims = [
        "--set",
        "network.input_dim=16",
        "--set",
        "data.feature_dim=16",
        "--set",
        "network.segments=32",
        "--set",
        "network.frames_per_segment=4",
        "--set",
        "network.frame_overlap=2",
        "--set",
        "network.neck_dim=16",
        "--set",
        "network.head_dim=8",
        "--set",
        "train.max_steps=1",
    ];
    args.extend(dims);
    let small = dir.path().join("small");
    let mut gen = args.clone();
    gen.extend(["gen-data", "--out", small.to_str().unwrap()]);
    assert!(teds(&gen).status.success());
    args.extend([
        "train",
        "--data",
        small.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    let out = teds(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = teds(&[
        "detect",
        "--checkpoint",
        run.join("checkpoint.json").to_str().unwrap(),
        "--features",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("p.tsv").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("16"), "{}", stderr(&out));
}
