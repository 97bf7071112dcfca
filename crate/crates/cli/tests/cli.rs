use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn cvgl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvgl"))
        .args(args)
        .current_dir(dir)
        .env_remove("CVGL_SEED")
        .env_remove("CVGL_DATA")
        .env_remove("CVGL_OUT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn synth(dir: &Path, name: &str, count: usize, seed: u64) {
    let out = cvgl(&["synth", "--count", &count.to_string(), "--seed", &seed.to_string(), "--out", name], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_and_version_succeed() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&cvgl(&["--help"], dir.path())), 0);
    assert_eq!(code(&cvgl(&["train", "--help"], dir.path())), 0);
    assert_eq!(code(&cvgl(&["--version"], dir.path())), 0);
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&cvgl(&[], dir.path())), 1);
    assert_eq!(code(&cvgl(&["bogus"], dir.path())), 1);
    assert_eq!(code(&cvgl(&["train", "--out", "o", "--precision", "16"], dir.path())), 1);
    assert_eq!(code(&cvgl(&["train", "--out", "o", "--preset", "huge"], dir.path())), 1);
    assert_eq!(code(&cvgl(&["synth", "--count", "0", "--out", "d"], dir.path())), 1);
}

#[test]
fn missing_inputs_exit_one() {
    let dir = TempDir::new().unwrap();
    let no_data = cvgl(&["train", "--out", "o"], dir.path());
    assert_eq!(code(&no_data), 1);
    assert!(String::from_utf8_lossy(&no_data.stderr).contains("--data"));
    assert_eq!(code(&cvgl(&["train", "--data", "absent", "--out", "o"], dir.path())), 1);
    synth(dir.path(), "d", 4, 0);
    assert_eq!(code(&cvgl(&["eval", "--checkpoint", "nope", "--data", "d", "--out", "e"], dir.path())), 1);
    assert_eq!(code(&cvgl(&["train", "--data", "d", "--out", "o", "--resume", "nope"], dir.path())), 1);
    assert_eq!(code(&cvgl(&["train", "--data", "d", "--out", "o", "--config", "nope.toml"], dir.path())), 1);
}

#[test]
fn invalid_config_exits_one() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "d", 4, 0);
    for (name, body) in [
        ("syntax.toml", "[train\nepochs = 1"),
        ("unknown.toml", "[train]\nmomentum = 0.9"),
        ("range.toml", "[train]\nbatch_size = 1"),
    ] {
        fs::write(dir.path().join(name), body).unwrap();
        let out = cvgl(&["train", "--data", "d", "--out", "o", "--config", name], dir.path());
        assert_eq!(code(&out), 1, "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn divergent_training_is_an_internal_error() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "d", 4, 0);
    fs::write(dir.path().join("hot.toml"), "[train]\nlr = 1e300\nepochs = 3\nprecision = 64\n").unwrap();
    let out = cvgl(&["train", "--data", "d", "--out", "o", "--config", "hot.toml"], dir.path());
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "a", 5, 3);
    synth(dir.path(), "b", 5, 3);
    synth(dir.path(), "c", 5, 4);
    let files = |name: &str| {
        let mut out = Vec::new();
        for sub in ["ground", "aerial"] {
            let mut entries: Vec<_> = fs::read_dir(dir.path().join(name).join(sub))
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            entries.sort();
            out.extend(entries.iter().map(|p| fs::read(p).unwrap()));
        }
        out
    };
    let manifest = |name: &str| fs::read(dir.path().join(name).join("manifest.jsonl")).unwrap();
    assert_eq!(manifest("a"), manifest("b"));
    assert_eq!(files("a"), files("b"));
    assert_ne!(files("a"), files("c"));
}

#[test]
fn train_resume_and_eval() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    synth(d, "data", 6, 1);
    let train = |out: &str, epochs: &str, extra: &[&str]| {
        let mut args = vec!["train", "--data", "data", "--out", out, "--epochs", epochs, "--precision", "64", "--deterministic"];
        args.extend_from_slice(extra);
        let o = cvgl(&args, d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    train("full", "3", &[]);
    train("again", "3", &[]);
    let log = |out: &str| fs::read_to_string(d.join(out).join("train_log.jsonl")).unwrap();
    assert_eq!(log("full"), log("again"));
    assert_eq!(log("full").lines().count(), 3);

    train("split", "1", &[]);
    train("split", "3", &["--resume", "split"]);
    assert_eq!(log("split"), log("full"));
    assert_eq!(fs::read(d.join("split/ckpt_0003.bin")).unwrap(), fs::read(d.join("full/ckpt_0003.bin")).unwrap());
    assert_eq!(fs::read_to_string(d.join("full/latest")).unwrap().trim(), "ckpt_0003.bin");
    let config = fs::read_to_string(d.join("full/config.toml")).unwrap();
    assert!(config.contains("precision = 64") && config.contains("epochs = 3"));

    // A fresh run into the same directory replaces the log instead of appending.
    train("full", "3", &[]);
    assert_eq!(log("full").lines().count(), 3);

    let o = cvgl(&["eval", "--checkpoint", "full", "--data", "data", "--out", "ev", "--attention-trace"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let recall: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/recall.json")).unwrap()).unwrap();
    assert_eq!(recall["n_queries"], 6);
    assert_eq!(recall["r_at"].as_array().unwrap().len(), 4);
    let complexity: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("ev/complexity.json")).unwrap()).unwrap();
    assert!(complexity["total_params"].as_u64().unwrap() > 0);
    assert!(fs::read_to_string(d.join("ev/report.txt")).unwrap().starts_with("Method"));
    let trace = fs::read_to_string(d.join("ev/attention_trace.jsonl")).unwrap();
    // Two steps, two branches, two heads.
    assert_eq!(trace.lines().count(), 8);
}

#[test]
fn config_file_and_preset_flag_compose() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    synth(d, "data", 4, 0);
    fs::write(d.join("c.toml"), "[train]\nepochs = 1\nlr = 0.01\n").unwrap();
    let o = cvgl(&["train", "--data", "data", "--out", "o", "--config", "c.toml", "--seed", "9", "--deterministic"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let written = fs::read_to_string(d.join("o/config.toml")).unwrap();
    assert!(written.contains("lr = 0.01") && written.contains("seed = 9") && written.contains("epochs = 1"));
}

#[test]
fn list_file_datasets_load() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    synth(d, "data", 3, 0);
    let manifest = fs::read_to_string(d.join("data/manifest.jsonl")).unwrap();
    let lines: Vec<String> = manifest
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            format!("{},{}", v["aerial"].as_str().unwrap(), v["ground"].as_str().unwrap())
        })
        .collect();
    fs::write(d.join("data/pairs.csv"), lines.join("\n")).unwrap();
    let o = cvgl(&["train", "--data", "data", "--list", "pairs.csv", "--out", "o", "--epochs", "1"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_reports_codes_in_process() {
    assert_eq!(cvgl_cli::run(["cvgl", "--help"]), cvgl_cli::EXIT_OK);
    assert_eq!(cvgl_cli::run(["cvgl", "nope"]), cvgl_cli::EXIT_USER);
}

#[test]
fn paper_preset_dry_run_reports_its_schedule() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "data", 2, 0);
    let o = cvgl(&["train", "--preset", "paper", "--data", "data", "--out", "o", "--dry-run"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("for 150 epochs"));
    assert!(dir.path().join("o/config.toml").is_file());
    assert!(!dir.path().join("o/latest").exists());
}

#[test]
fn repeated_runs_rewrite_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    synth(d, "data", 4, 2);
    let snapshot = |sub: &str| {
        let mut files: Vec<_> = fs::read_dir(d.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.into_iter().map(|p| (p.file_name().unwrap().to_owned(), fs::read(&p).unwrap())).collect::<Vec<_>>()
    };
    let train = ["train", "--data", "data", "--out", "o", "--epochs", "2", "--deterministic"];
    assert_eq!(code(&cvgl(&train, d)), 0);
    let first = snapshot("o");
    assert_eq!(code(&cvgl(&train, d)), 0);
    assert_eq!(snapshot("o"), first);

    let ablate = [
        "ablate", "--out", "ab", "--epochs", "1", "--seeds", "1", "--steps", "1",
        "--train-count", "4", "--test-count", "3",
    ];
    let o = cvgl(&ablate, d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(d.join("ab/ablation.json")).unwrap();
    assert_eq!(code(&cvgl(&ablate, d)), 0);
    assert_eq!(fs::read(d.join("ab/ablation.json")).unwrap(), first);
    let table = fs::read_to_string(d.join("ab/cmi_table.txt")).unwrap();
    assert_eq!(table.lines().count(), 2 + 3, "{table}");
    assert!(fs::read_to_string(d.join("ab/recurrence_table.txt")).unwrap().starts_with("Metric"));
}

#[test]
fn every_command_documents_its_flags() {
    let dir = TempDir::new().unwrap();
    let expect: [(&str, &[&str]); 4] = [
        ("synth", &["--count", "--seed", "--out", "--noise"]),
        ("train", &["--config", "--data", "--out", "--seed", "--preset", "--resume", "--precision", "--epochs"]),
        ("eval", &["--checkpoint", "--data", "--out"]),
        ("ablate", &["--config", "--data", "--out", "--seed", "--preset", "--precision", "--seeds", "--steps"]),
    ];
    for (cmd, flags) in expect {
        let o = cvgl(&[cmd, "--help"], dir.path());
        assert_eq!(code(&o), 0);
        let help = String::from_utf8_lossy(&o.stdout);
        for flag in flags {
            assert!(help.contains(flag), "{cmd} --help lacks {flag}");
        }
        assert_eq!(code(&cvgl(&[cmd, "--no-such-flag"], dir.path())), 1);
    }
}
