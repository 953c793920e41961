use std::path::Path;
use std::process::{Command, Output};

use cpv_core::planner::{Dataset, DatasetMeta};

fn cpv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpv")).args(args).env("CPV_LOG", "error").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, name: &str, seed: &str, pairs: &str) -> String {
    let out = dir.join(name).to_string_lossy().into_owned();
    let o = cpv(&["gen-data", "--seed", seed, "--pairs", pairs, "--kmin", "1", "--kmax", "2", "--noise", "0.1", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(cpv(&["train"]).status.code(), Some(2));
    assert_eq!(cpv(&["eval", "--skills", "4", "--criterion", "bogus"]).status.code(), Some(2));
    assert_eq!(cpv(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cpv(&["gen-data", "--seed", "1", "--pairs", "2", "--out", "x", "--colour", "red"]).status.code(), Some(2));
    assert_eq!(cpv(&["compose", "--arm", "1"]).status.code(), Some(2));
}

#[test]
fn gen_data_prints_config_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d.cpvd").to_string_lossy().into_owned();
    let o = cpv(&["gen-data", "--seed", "7", "--pairs", "12", "--kmin", "2", "--kmax", "4", "--noise", "0.1", "--out", &d]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("seed: 7") && text.contains("kmax: 4") && text.contains("workers: 1"), "{text}");
    let r = cpv(&["replay-check", "--dataset", &d]);
    assert!(r.status.success());
    assert!(stdout(&r).contains("12/12 pairs passed, 0 failed"));
}

#[test]
fn corrupted_action_flags_exactly_that_pair() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen(dir.path(), "d.cpvd", "3", "6");
    let bytes = std::fs::read(&d).unwrap();
    // Header is 30 bytes; pair 0 has its task, the reference (seed, length,
    // two frames) and then the demonstration's seed and length.
    let task_len = bytes[30] as usize;
    let offset = 30 + 1 + task_len + 12 + 2 * 2970 + 12;
    let original = bytes[offset];
    let mut flagged_once = false;
    for alt in (0u8..6).filter(|&a| a != original) {
        let mut b = bytes.clone();
        b[offset] = alt;
        let bad = dir.path().join("bad.cpvd");
        std::fs::write(&bad, &b).unwrap();
        let o = cpv(&["replay-check", "--dataset", bad.to_str().unwrap()]);
        let text = stdout(&o);
        let flagged: Vec<&str> = text.lines().filter(|l| l.starts_with("pair ")).collect();
        assert!(flagged.iter().all(|l| l.starts_with("pair 0:")), "{text}");
        if !flagged.is_empty() {
            assert_eq!(flagged.len(), 1);
            assert!(!o.status.success());
            assert!(text.contains("5/6 pairs passed, 1 failed"));
            flagged_once = true;
        }
    }
    assert!(flagged_once);
}

#[test]
fn empty_dataset_passes_with_zero_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.cpvd");
    Dataset { meta: DatasetMeta { seed: 0, k_min: 1, k_max: 1, noise: 0.1 }, pairs: vec![] }.save(&path).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cpv"))
        .args(["replay-check", "--dataset", path.to_str().unwrap()])
        .env("CPV_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(stdout(&o).contains("0/0 pairs passed"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("holds no pairs"));
}

#[test]
fn train_eval_compose_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen(dir.path(), "d.cpvd", "5", "12");
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    let cfg = format!(
        "mode = cpv\nvariant = full\ndim = 8\nlr = 1e-3\nbatch_size = 4\nepochs = 1\nseed = 2\n\
         dataset = {d}\ncheckpoint = {}\nmetrics = {}\neval_batches = 1\nacc_pairs = 2\n",
        p("m.cpvm"),
        p("metrics.csv")
    );
    std::fs::write(p("train.cfg"), cfg).unwrap();
    let o = cpv(&["train", "--config", &p("train.cfg")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("lambda_hom = 1"));
    assert!(Path::new(&p("m.cpvm")).exists() && Path::new(&p("m.cpvm.last")).exists());

    let o = cpv(&["eval", "--checkpoint", &p("m.cpvm"), "--skills", "1", "--episodes", "4", "--out", &p("r.csv")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(p("r.csv")).unwrap();
    assert!(csv.starts_with("condition,episodes,successes,rate,mean_steps\ncpv/skills=1/contain,4,"));

    let o = cpv(&["compose", "--checkpoint", &p("m.cpvm"), "--arm", "1+1", "--episodes", "3", "--criterion", "exact"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("cpv/compose=1+1/exact"));
    assert!(!cpv(&["eval", "--skills", "1", "--episodes", "2"]).status.success());
}

#[test]
fn render_writes_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen(dir.path(), "d.cpvd", "1", "2");
    let out = dir.path().join("f.ppm");
    assert!(cpv(&["render", "--dataset", &d, "--pair", "1", "--frame", "2", "--out", out.to_str().unwrap()]).status.success());
    let bytes = std::fs::read(&out).unwrap();
    assert!(bytes.starts_with(b"P6\n30 33\n255\n"));
    assert_eq!(bytes.len(), 13 + 2970);
    assert!(!cpv(&["render", "--dataset", &d, "--pair", "9", "--out", out.to_str().unwrap()]).status.success());
}

#[test]
fn grad_check_command_passes() {
    let o = cpv(&["grad-check", "--samples", "5"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("all gradients within tolerance"));
}
