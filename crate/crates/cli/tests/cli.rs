use std::path::Path;
use std::process::Command;

fn cfd(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cfd")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn identify_exit_codes() {
    let (code, out, _) = cfd(&[
        "identify",
        "--builtin",
        "knowledge",
        "--criterion",
        "conditional",
        "--z",
        "C",
        "--w",
        "E",
    ]);
    assert_eq!(code, 0);
    assert!(out.contains("SATISFIED"));

    let (code, out, _) = cfd(&[
        "identify",
        "--builtin",
        "knowledge",
        "--criterion",
        "standard",
        "--z",
        "C",
    ]);
    assert_eq!(code, 1);
    assert!(out.contains("witness: Q←E→C"));

    let (code, out, _) = cfd(&["identify", "--builtin", "knowledge", "--criterion", "audit"]);
    assert_eq!(code, 0);
    assert_eq!(out.matches("... ok").count(), 4);
}

#[test]
fn malformed_graph_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.json");
    std::fs::write(&g, "{\"nodes\": [\"A\", \"B\"],\n \"edges\": [[\"A\" \"B\"]]}").unwrap();
    let (code, _, err) = cfd(&[
        "identify",
        "--graph",
        p(&g),
        "--criterion",
        "backdoor",
        "--x",
        "A",
        "--y",
        "B",
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn graph_file_with_cycle_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.json");
    std::fs::write(&g, r#"{"nodes":["A","B"],"edges":[["A","B"],["B","A"]],"latent":[]}"#).unwrap();
    let (code, _, err) = cfd(&[
        "identify",
        "--graph",
        p(&g),
        "--criterion",
        "backdoor",
        "--x",
        "A",
        "--y",
        "B",
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("error:"));
}

#[test]
fn oracle_flags_only_the_biased_estimator() {
    let (code, out, _) = cfd(&["oracle", "--random", "20", "--seed", "3", "--json"]);
    assert_eq!(code, 0);
    let rows: serde_json::Value = serde_json::from_str(&out).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows[2]["max_deviation"].as_f64().unwrap() <= 1e-10);
    assert_eq!(rows[1]["applicable"], false);
    assert!(rows[3]["max_deviation"].as_f64().unwrap() > 1e-3);
}

#[test]
fn oracle_fails_when_tolerance_is_exceeded() {
    let (code, _, _) = cfd(&["oracle", "--random", "5", "--tolerance", "1e-300"]);
    assert_eq!(code, 1);
}

#[test]
fn run_eval_and_perturb_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world");
    assert_eq!(cfd(&["fixture", "--out", p(&world)]).0, 0);
    let data = world.join("dataset.jsonl");
    let fixture = world.join("fixture.json");
    let out = dir.path().join("run");
    let (code, stdout, err) = cfd(&[
        "run",
        "--dataset",
        p(&data),
        "--fixture",
        p(&fixture),
        "--out",
        p(&out),
        "--method",
        "icl",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("EM=0.2000"));
    for f in [
        "predictions.jsonl",
        "reports.jsonl",
        "metrics.json",
        "trace.jsonl",
        "failures.jsonl",
        "config.toml",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let (code, stdout, _) = cfd(&[
        "eval",
        "--predictions",
        p(&out.join("predictions.jsonl")),
        "--dataset",
        p(&data),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("records=20"));

    let shuffled = dir.path().join("shuffled.jsonl");
    assert_eq!(
        cfd(&[
            "perturb",
            "--dataset",
            p(&data),
            "--kind",
            "shuffle",
            "--seed",
            "9",
            "--out",
            p(&shuffled)
        ])
        .0,
        0
    );
    let a = std::fs::read_to_string(&data).unwrap();
    let b = std::fs::read_to_string(&shuffled).unwrap();
    assert_ne!(a, b);
    assert_eq!(a.lines().count(), b.lines().count());
}

#[test]
fn missing_fixture_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world");
    cfd(&["fixture", "--out", p(&world)]);
    let (code, _, err) = cfd(&[
        "run",
        "--dataset",
        p(&world.join("dataset.jsonl")),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("fixture"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "m = 10\nbogus = 1\n").unwrap();
    let (code, _, err) = cfd(&["run", "--dataset", "x", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(code, 2);
    assert!(err.contains("bogus"), "{err}");
}

#[test]
fn import_musique_drops_short_chains() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("m.jsonl");
    let rec = |id: &str, hops: usize| {
        serde_json::json!({
            "id": id,
            "question": "q?",
            "answer": "a",
            "answer_aliases": [],
            "paragraphs": [{"paragraph_text": "Some text."}],
            "question_decomposition": (0..hops).map(|_| serde_json::json!({"question": "x"})).collect::<Vec<_>>(),
        })
        .to_string()
    };
    std::fs::write(&input, format!("{}\n{}\n", rec("2hop_x", 2), rec("4hop_y", 4))).unwrap();
    let out = dir.path().join("o.jsonl");
    let (code, stdout, err) = cfd(&["import", "--source", "musique", "--input", p(&input), "--out", p(&out)]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("loaded 1"), "{stdout}");
}
