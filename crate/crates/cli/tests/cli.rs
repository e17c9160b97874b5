use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn steallab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steallab"))
        .args(args)
        .env("STEALLAB_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_task_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = steallab(&["attack", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("task.family"), "{}", stderr(&out));
}

#[test]
fn unknown_task_and_tiny_budget_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(code(&steallab(&["attack", "--task", "spirals", "--out", d])), 2);
    let out = steallab(&["attack", "--task", "blobs-4", "--budget", "10", "--out", d]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("budget"));
}

#[test]
fn exploding_learning_rate_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[attack]\nbudget = 6400\nclone_lr = 1e200\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = steallab(&["attack", "--task", "blobs-4", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(out_dir.join("transcript.csv").exists());
}

#[test]
fn report_rejects_missing_column() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "run_id,budget\nx,10\n").unwrap();
    let out = steallab(&["report", bad.to_str().unwrap()]);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("column"), "{}", stderr(&out));
}

fn rows(path: &Path) -> Vec<csv_row::Row> {
    csv_row::read(path)
}

mod csv_row {
    use std::path::Path;

    pub struct Row {
        pub fields: Vec<(String, String)>,
    }

    impl Row {
        pub fn get(&self, key: &str) -> &str {
            &self.fields.iter().find(|(k, _)| k == key).expect("column").1
        }
    }

    pub fn read(path: &Path) -> Vec<Row> {
        let text = std::fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_string).collect();
        lines
            .map(|l| Row {
                fields: header.iter().cloned().zip(l.split(',').map(str::to_string)).collect(),
            })
            .collect()
    }
}

#[test]
fn ratio_sweep_shares_one_victim_and_summarizes_each_cell() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.toml");
    fs::write(&grid, "task = \"blobs-4\"\nseeds = [0, 1]\n[grid]\nn_c = [1, 4]\n").unwrap();
    let out_dir = dir.path().join("sweep");
    let out = steallab(&[
        "sweep",
        grid.to_str().unwrap(),
        "--budget",
        "2560",
        "--jobs",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    assert_eq!(fs::read_dir(out_dir.join("victims")).unwrap().count(), 2);
    for cell in ["n_c=1", "n_c=4"] {
        for seed in [0, 1] {
            assert!(out_dir.join(cell).join(format!("seed-{seed}")).join("metrics.csv").exists());
        }
    }
    let summary = rows(&out_dir.join("summary.csv"));
    assert_eq!(summary.len(), 2);
    assert_ne!(summary[0].get("config_fingerprint"), summary[1].get("config_fingerprint"));

    let combined = rows(&out_dir.join("combined.csv"));
    assert!(combined.iter().all(|r| r.get("queries_used").parse::<u64>().unwrap() <= 2560));
}
