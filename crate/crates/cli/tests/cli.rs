use std::path::Path;
use std::process::{Command, Output};

fn sincnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sincnet"))
        .args(args)
        .output()
        .expect("spawn sincnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes() {
    let o = sincnet(&["gradcheck", "--seed", "3", "--count", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("# gradcheck\n"));
    assert!(out.trim_end().ends_with("PASS"), "{out}");
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(sincnet(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(sincnet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sincnet(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let bad = sincnet(&["train", "--out", s(dir.path()), "--manifest", "m.csv", "--set", "learning_rate=1"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("learning_rate"));
}

#[test]
fn missing_manifest_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = sincnet(&["train", "--out", s(dir.path()), "--manifest", s(&dir.path().join("absent.csv"))]);
    assert_eq!(o.status.code(), Some(2));
}

fn pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let corpus = root.join("corpus");
    let run = root.join("run");
    let ok = |o: Output| {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    ok(sincnet(&[
        "synth", "--speakers", "3", "--utts", "2", "--test-utts", "1", "--impostor-speakers", "1",
        "--impostor-utts", "2", "--seconds", "0.6", "--out", s(&corpus),
    ]));
    let manifest = corpus.join("manifest.csv");
    let out = ok(sincnet(&[
        "train", "--manifest", s(&manifest), "--out", s(&run), "--epochs", "2", "--set", "filters=6",
        "--set", "filter_len=33", "--set", "conv_channels=4", "--set", "dense=8", "--minibatch", "4",
    ]));
    assert!(out.contains("filters = 6"), "resolved config echoed: {out}");
    let model = run.join("model.snc");
    let id = ok(sincnet(&["eval-id", "--checkpoint", s(&model), "--manifest", s(&manifest)]));
    assert!(id.contains("over 3 utterances"), "{id}");
    for scoring in ["dvector", "posterior"] {
        ok(sincnet(&[
            "eval-verif", "--checkpoint", s(&model), "--manifest", s(&manifest), "--scoring", scoring,
            "--impostors", "2", "--out", s(&run.join(scoring)),
        ]));
    }
    let analysis = run.join("analysis");
    ok(sincnet(&["analyze", "--checkpoint", s(&model), "--out", s(&analysis), "--nfft", "256"]));
    let log = run.join("train_log.csv");
    ok(sincnet(&["analyze", "--out", s(&analysis), "--compare", s(&log), s(&log)]));

    let text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().next(), Some("epoch,loss,train_fer,eval_fer"));
    assert_eq!(text.lines().count(), 3);
    assert!(analysis.join("cumulative.csv").exists());
    assert!(analysis.join("filter_005_taps.csv").exists());
    assert!(analysis.join("convergence.csv").exists());

    [
        "train_log.csv",
        "config.resolved",
        "dvector/trials.csv",
        "dvector/eer.json",
        "posterior/eer.json",
        "analysis/cumulative.csv",
    ]
    .iter()
    .map(|f| (f.to_string(), std::fs::read(run.join(f)).unwrap()))
    .collect()
}

#[test]
fn synth_train_evaluate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    for ((name, x), (_, y)) in ra.iter().zip(&rb) {
        if name == "config.resolved" {
            continue; // holds the run's own paths
        }
        assert_eq!(x, y, "{name} differs between identical runs");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    let o = sincnet(&["synth", "--speakers", "3", "--utts", "2", "--test-utts", "1", "--seconds", "0.6", "--out", s(&corpus)]);
    assert!(o.status.success());
    let manifest = corpus.join("manifest.csv");
    let mut logs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("r{threads}"));
        let o = sincnet(&[
            "--threads", threads, "train", "--manifest", s(&manifest), "--out", s(&out), "--epochs", "2",
            "--set", "filters=6", "--set", "filter_len=33", "--set", "conv_channels=4", "--set", "dense=8",
            "--minibatch", "4",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        logs.push((std::fs::read(out.join("train_log.csv")).unwrap(), std::fs::read(out.join("model.snc")).unwrap()));
    }
    assert_eq!(logs[0], logs[1]);
}
