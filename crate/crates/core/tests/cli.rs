use std::path::Path;

use xraygan::cli::{run, EXIT_OK, EXIT_USER};

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_data_counts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = run([
            "xraygan",
            "synth-data",
            "--n",
            "64",
            "--size",
            "32",
            "--seed",
            "1",
            "--out",
            s(out),
        ]);
        assert_eq!(r.exit_code, EXIT_OK, "{}", r.summary);
        assert_eq!(r.artifacts.len(), 1 + 128);
        assert_eq!(r.details["studies"], 64);
    }
    let lines = std::fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 64);
    let pngs = std::fs::read_dir(a.join("images")).unwrap().count();
    assert_eq!(pngs, 128);
    for f in ["manifest.jsonl", "images/study-00007_lateral.png"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn every_subcommand_documents_its_flags() {
    let cases: [(&str, &[&str]); 7] = [
        ("synth-data", &["--n", "--size", "--seed", "--out"]),
        (
            "train-vcn",
            &["--manifest", "--out", "--stage", "--preset", "--config", "--seed"],
        ),
        (
            "train",
            &["--manifest", "--out", "--resume", "--stop-after-stage", "--quiet"],
        ),
        ("generate", &["--report", "--checkpoint", "--out"]),
        (
            "evaluate",
            &[
                "--manifest",
                "--checkpoint",
                "--eval-vcn",
                "--extractor",
                "--is-splits",
                "--seed",
                "--out",
            ],
        ),
        (
            "train-extractor",
            &["--manifest", "--out", "--resolution", "--epochs", "--seed"],
        ),
        ("validate-config", &["--config", "--preset", "--seed"]),
    ];
    for (cmd, flags) in cases {
        let r = run(["xraygan", cmd, "--help"]);
        assert_eq!(r.exit_code, EXIT_OK);
        for f in flags.iter().chain(&["--json"]) {
            assert!(r.summary.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn user_errors_exit_one_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "n_stages = 2\nbatch_sizes = [8]\n").unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["xraygan"],
        vec!["xraygan", "synth-data", "--n", "0", "--out", s(dir.path())],
        vec![
            "xraygan",
            "synth-data",
            "--n",
            "4",
            "--size",
            "30",
            "--out",
            s(dir.path()),
        ],
        vec!["xraygan", "synth-data", "--n", "four", "--out", s(dir.path())],
        vec!["xraygan", "validate-config", "--config", s(&cfg)],
        vec!["xraygan", "validate-config", "--config", "/no/such/file.toml"],
        vec![
            "xraygan",
            "train-vcn",
            "--manifest",
            "/no/such.jsonl",
            "--out",
            s(dir.path()),
            "--preset",
            "desk",
        ],
        vec![
            "xraygan",
            "train-extractor",
            "--manifest",
            "/no/such.jsonl",
            "--out",
            "x.bin",
        ],
    ];
    for argv in cases {
        let r = run(argv.clone());
        assert_eq!(r.exit_code, EXIT_USER, "{argv:?}: {}", r.summary);
        assert!(!r.summary.trim().is_empty(), "{argv:?}");
    }
    let r = run(["xraygan", "validate-config", "--config", s(&cfg)]);
    assert!(r.summary.contains("batch_sizes"), "{}", r.summary);
}

#[test]
fn json_summary_and_config_normalization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 5\n[gan]\nalpha = 0.25\n").unwrap();
    let r = run([
        "xraygan",
        "validate-config",
        "--preset",
        "desk",
        "--config",
        s(&cfg),
        "--json",
    ]);
    assert!(r.success(), "{}", r.summary);
    assert!(r.json);
    let j = r.to_json();
    assert_eq!(j["exit_code"], 0);
    assert_eq!(j["details"]["seed"], 5);
    assert_eq!(j["details"]["gan"]["alpha"], 0.25);
    assert_eq!(j["details"]["n_stages"], 2);
    let normalized = dir.path().join("n.toml");
    std::fs::write(&normalized, &r.summary).unwrap();
    let again = run(["xraygan", "validate-config", "--config", s(&normalized)]);
    assert_eq!(again.details, r.details);
}
