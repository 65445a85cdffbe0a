//! End-to-end tests of the `jobshop` binary: subcommand contracts, file
//! outputs, exit codes, and the config-file/flag precedence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_jobshop")
}

fn run(args: &[&str]) -> Output {
    Command::new(binary()).args(args).output().unwrap()
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn gen_tiny_set(dir: &Path, count: usize) {
    let out = Command::new(binary())
        .args([
            "gen",
            "--jobs",
            "3",
            "--machines",
            "3",
            "--dist",
            "gaussian:50:10",
            "--count",
            &count.to_string(),
            "--seed",
            "5",
        ])
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small-width training config reused by the slower tests.
fn train_args(data: &Path, out: &Path, episodes: &str) -> Vec<String> {
    [
        "train",
        "--episodes",
        episodes,
        "--rollouts",
        "2",
        "--seed",
        "3",
        "--hidden1",
        "5",
        "--hidden2",
        "6",
        "--ffn",
        "8,5,3",
        "--quiet",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([
        "--data".to_string(),
        data.display().to_string(),
        "--out".to_string(),
        out.display().to_string(),
    ])
    .collect()
}

fn train_tiny(data: &Path, out: &Path, episodes: &str) -> Output {
    let out = Command::new(binary())
        .args(train_args(data, out, episodes))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn version_names_the_checkpoint_format() {
    let out = run(&["--version"]);
    assert!(out.status.success());
    assert!(
        stdout(&out).contains("checkpoint format v1"),
        "{}",
        stdout(&out)
    );
}

#[test]
fn gen_is_deterministic_and_validates_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let output = Command::new(binary())
            .args([
                "gen",
                "--jobs",
                "2",
                "--machines",
                "2",
                "--dist",
                "poisson:40",
                "--count",
                "3",
                "--seed",
                "1",
            ])
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(output.status.success());
        // Manifest lists every file.
        assert_eq!(
            stdout(&output).lines().count(),
            4,
            "3 file lines plus a summary"
        );
    }
    let read_all = |dir: &PathBuf| {
        let mut names: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        names
            .iter()
            .map(|p| (p.file_name().unwrap().to_owned(), fs::read(p).unwrap()))
            .collect::<Vec<_>>()
    };
    assert_eq!(read_all(&a), read_all(&b));
    let names = read_all(&a);
    assert_eq!(names[0].0.to_string_lossy(), "p2x2_1_0000.jssp");

    // count 0 is a config error (exit 2).
    let bad = run(&[
        "gen",
        "--jobs",
        "2",
        "--machines",
        "2",
        "--dist",
        "poisson:40",
        "--count",
        "0",
        "--seed",
        "1",
    ]);
    assert_eq!(bad.status.code(), Some(2));
    // Unknown distributions are config errors too.
    let bad = run(&[
        "gen",
        "--jobs",
        "2",
        "--machines",
        "2",
        "--dist",
        "weibull:1",
        "--count",
        "1",
        "--seed",
        "1",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn errors_are_machine_readable() {
    let out = run(&[
        "gen",
        "--jobs",
        "2",
        "--machines",
        "2",
        "--dist",
        "poisson:40",
        "--count",
        "0",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let line = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value = serde_json::from_str(line.trim()).expect("json error line");
    assert_eq!(parsed["error"]["code"], 2);
    assert_eq!(parsed["error"]["kind"], "config");
}

#[test]
fn train_smoke_writes_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny_set(&data, 2);
    let out_dir = dir.path().join("run");
    train_tiny(&data, &out_dir, "3");

    let log = fs::read_to_string(out_dir.join("log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "episode,instance_id,mean_return,best_return,phi,critic_loss,kl,beta,epsilon"
    );
    assert_eq!(lines.count(), 3);

    // The checkpoint drives solve.
    let instance = fs::read_dir(&data).unwrap().next().unwrap().unwrap().path();
    let solve = Command::new(binary())
        .args(["solve"])
        .arg("--checkpoint")
        .arg(out_dir.join("checkpoint.json"))
        .arg("--instance")
        .arg(&instance)
        .arg("--out")
        .arg(dir.path().join("solved"))
        .output()
        .unwrap();
    assert!(
        solve.status.success(),
        "{}",
        String::from_utf8_lossy(&solve.stderr)
    );
    assert!(
        stdout(&solve).starts_with("makespan="),
        "{}",
        stdout(&solve)
    );
    let schedule = fs::read_to_string(dir.path().join("solved/schedule.csv")).unwrap();
    assert!(schedule.starts_with("job,machine,start,completion\n"));
    assert_eq!(schedule.lines().count(), 1 + 9);
}

#[test]
fn train_rejects_zero_episodes_and_empty_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny_set(&data, 1);
    let out = Command::new(binary())
        .args(train_args(&data, &dir.path().join("r"), "0"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "episodes 0 is a config error");

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = Command::new(binary())
        .args(train_args(&empty, &dir.path().join("r2"), "1"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "empty dataset is a data error");
}

#[test]
fn resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny_set(&data, 1);
    let out_dir = dir.path().join("run");
    train_tiny(&data, &out_dir, "2");

    let mut args = train_args(&data, &out_dir, "4");
    args.push("--resume".into());
    args.push(out_dir.join("checkpoint.json").display().to_string());
    let resumed = Command::new(binary()).args(args).output().unwrap();
    assert!(
        resumed.status.success(),
        "{}",
        String::from_utf8_lossy(&resumed.stderr)
    );
    let log = fs::read_to_string(out_dir.join("log.csv")).unwrap();
    let episodes: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(episodes, vec!["0", "1", "2", "3"], "{log}");
}

#[test]
fn exact_prints_summary_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny_set(&data, 1);
    let instance = fs::read_dir(&data).unwrap().next().unwrap().unwrap().path();
    let out = Command::new(binary())
        .args(["exact", "--time-limit", "10"])
        .arg("--instance")
        .arg(&instance)
        .arg("--out")
        .arg(dir.path().join("exact"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.starts_with("makespan="), "{text}");
    assert!(text.contains("optimal=true"), "{text}");
    assert!(text.contains("nodes="), "{text}");
    assert!(dir.path().join("exact/schedule.csv").exists());
}

#[test]
fn export_writes_lp_with_sections() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny_set(&data, 1);
    let instance = fs::read_dir(&data).unwrap().next().unwrap().unwrap().path();
    let out = Command::new(binary())
        .args(["export"])
        .arg("--instance")
        .arg(&instance)
        .arg("--out")
        .arg(dir.path().join("lp"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let stem = instance.file_stem().unwrap().to_string_lossy();
    let lp = fs::read_to_string(dir.path().join("lp").join(format!("{stem}.lp"))).unwrap();
    for section in ["Minimize", "Subject To", "Binary", "End"] {
        assert!(lp.contains(section), "missing {section}:\n{lp}");
    }
    assert!(lp.contains(" obj: Cmax"));
}

#[test]
fn bench_emits_records_summaries_and_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    // 5 tiny instances; a default-width untrained checkpoint keeps the
    // policy slow enough that the exact solver finishes within its budget.
    gen_tiny_set(&data, 5);
    let ckpt_dir = dir.path().join("ckpt");
    fs::create_dir_all(&ckpt_dir).unwrap();
    {
        use jobshop::checkpoint::Checkpoint;
        use jobshop::models::ModelConfig;
        use jobshop::ppo::{TrainConfig, TrainState};
        let config = TrainConfig {
            seed: 2,
            ..TrainConfig::default()
        };
        let state = TrainState::fresh(ModelConfig::default(), &config).unwrap();
        let f = fs::File::create(ckpt_dir.join("checkpoint.json")).unwrap();
        Checkpoint::from_state(&state, &config)
            .write(std::io::BufWriter::new(f))
            .unwrap();
    }
    let out = Command::new(binary())
        .args(["bench", "--time-limit", "20"])
        .arg("--data")
        .arg(&data)
        .arg("--checkpoint")
        .arg(ckpt_dir.join("checkpoint.json"))
        .arg("--out")
        .arg(dir.path().join("bench"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let records = fs::read_to_string(dir.path().join("bench/records.csv")).unwrap();
    assert_eq!(
        records.lines().count(),
        1 + 10,
        "2 records per instance:\n{records}"
    );
    assert!(records.starts_with("instance_id,method,objective,time_s,optimal\n"));

    // The exact baseline solves 3x3 to optimality within any sane budget,
    // so its objective never exceeds the policy's.
    let mut by_instance: std::collections::HashMap<&str, (u64, u64)> = Default::default();
    for line in records.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let entry = by_instance.entry(fields[0]).or_default();
        let objective: u64 = fields[2].parse().unwrap();
        match fields[1] {
            "rl" => entry.0 = objective,
            "exact" => entry.1 = objective,
            other => panic!("unexpected method {other}"),
        }
    }
    for (id, (rl, exact)) in &by_instance {
        assert!(exact <= rl, "{id}: exact {exact} vs rl {rl}");
    }

    let summary = fs::read_to_string(dir.path().join("bench/summary.csv")).unwrap();
    assert!(summary.starts_with("class,method,mean,std,max,min,avg_tau,avg_rho\n"));
    assert_eq!(summary.lines().count(), 1 + 2, "one class, two methods");
    for profile in ["profile_time.csv", "profile_objective.csv"] {
        let text = fs::read_to_string(dir.path().join("bench").join(profile)).unwrap();
        assert!(text.starts_with("method,eta,gamma\n"));
    }

    // Summary means recompute from the raw records.
    let mean_of = |method: &str| {
        let values: Vec<f64> = records
            .lines()
            .skip(1)
            .filter(|l| l.split(',').nth(1).unwrap() == method)
            .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
            .collect();
        values.iter().sum::<f64>() / values.len() as f64
    };
    for line in summary.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let mean: f64 = fields[2].parse().unwrap();
        assert!((mean - mean_of(fields[1])).abs() < 1e-9);
    }

    let missing = Command::new(binary())
        .args(["bench", "--checkpoint", "/nonexistent.json"])
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn config_file_applies_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny_set(&data, 1);
    let config_path = dir.path().join("cfg.toml");
    fs::write(
        &config_path,
        "episodes = 2\nrollouts = 2\nseed = 3\nhidden1 = 5\nhidden2 = 6\nffn = [8, 5, 3]\n",
    )
    .unwrap();

    // File only: 2 episodes.
    let out_a = dir.path().join("a");
    let status = Command::new(binary())
        .args(["train", "--quiet"])
        .arg("--config")
        .arg(&config_path)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out_a)
        .status()
        .unwrap();
    assert!(status.success());
    let log = fs::read_to_string(out_a.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2);

    // Flag beats the file: 3 episodes.
    let out_b = dir.path().join("b");
    let status = Command::new(binary())
        .args(["train", "--quiet", "--episodes", "3"])
        .arg("--config")
        .arg(&config_path)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out_b)
        .status()
        .unwrap();
    assert!(status.success());
    let log = fs::read_to_string(out_b.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);

    // Unknown keys are config errors.
    fs::write(&config_path, "episodes = 2\nnot_a_key = 1\n").unwrap();
    let out = Command::new(binary())
        .args(["train", "--quiet"])
        .arg("--config")
        .arg(&config_path)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("c"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
