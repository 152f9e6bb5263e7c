use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use referral::metrics::{EvalReport, Metric};

fn referral(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_referral"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("REFERRAL_OUTPUT_DIR")
        .env_remove("REFERRAL_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const MINIMAL: &str = r#"
seed = 7
output_dir = "out"
scenarios = ["S1"]

[dataset.generator]
n_patients = 300
n_doctors = 60
n_hospitals = 8

[[models]]
type = "popularity"
"#;

fn write_manifest(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("manifest.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn minimal_manifest_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), MINIMAL);
    let o = referral(&["--manifest", "manifest.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    for f in [
        "data/interactions.csv",
        "split/split.json",
        "features/S1/labels_test_seen.txt",
        "models/popularity_none.bin",
        "predictions/popularity_none_test_seen.txt",
        "predictions/popularity_none_test_new.txt",
        "evaluation/report.csv",
        "evaluation/report.json",
        "evaluation/diversity/popularity_none_test_seen_doctors.csv",
        "report/tables.md",
        "report/all_patients.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let tables = fs::read_to_string(out.join("report/tables.md")).unwrap();
    assert!(tables.contains("### test_seen / All"));
    assert!(tables.contains("### test_new / All"));
    assert!(tables.contains("| popularity | none |"));
    let report = EvalReport::load_csv(&out.join("evaluation/report.csv")).unwrap();
    let p1 = report.find("popularity", "none", "test_seen", "All", Metric::Precision, 1).unwrap();
    assert!(p1.n_patients > 0);
    assert!((0.0..=1.0).contains(&p1.value.unwrap()));
}

#[test]
fn split_summary_is_printed() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), MINIMAL);
    let o = referral(&["--manifest", "manifest.toml", "--stage", "split"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("Train"), "{text}");
    assert!(text.contains("Test seen"));
    assert!(text.contains("Test new"));
    assert!(text.contains("Interactions"));
    assert!(!dir.path().join("out/features").exists());
}

#[test]
fn rerun_is_cached_and_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), MINIMAL);
    assert!(referral(&["--manifest", "manifest.toml"], dir.path()).status.success());
    let tables = dir.path().join("out/report/tables.md");
    let csv = dir.path().join("out/report/all_patients.csv");
    let first = (fs::read(&tables).unwrap(), fs::read(&csv).unwrap());
    let mtime = fs::metadata(&tables).unwrap().modified().unwrap();

    let o = Command::new(env!("CARGO_BIN_EXE_referral"))
        .args(["--manifest", "manifest.toml"])
        .current_dir(dir.path())
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert!(o.status.success());
    let log = stderr(&o);
    assert!(log.contains("stage=report cached"), "{log}");
    assert!(log.contains("0 stages run"), "{log}");
    assert_eq!(fs::metadata(&tables).unwrap().modified().unwrap(), mtime);
    assert_eq!((fs::read(&tables).unwrap(), fs::read(&csv).unwrap()), first);

    fs::remove_dir_all(dir.path().join("out")).unwrap();
    assert!(referral(&["--manifest", "manifest.toml", "--strict"], dir.path()).status.success());
    assert_eq!((fs::read(&tables).unwrap(), fs::read(&csv).unwrap()), first);
}

#[test]
fn changed_config_invalidates_downstream_only() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), MINIMAL);
    assert!(referral(&["--manifest", "manifest.toml"], dir.path()).status.success());
    write_manifest(dir.path(), &MINIMAL.replace("scenarios = [\"S1\"]", "scenarios = [\"S1\"]\ntop_b = 5"));
    let o = Command::new(env!("CARGO_BIN_EXE_referral"))
        .args(["--manifest", "manifest.toml"])
        .current_dir(dir.path())
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert!(o.status.success());
    let log = stderr(&o);
    assert!(log.contains("stage=train_popularity_none cached"), "{log}");
    assert!(!log.contains("stage=predict_popularity_none cached"), "{log}");
    let preds = fs::read_to_string(dir.path().join("out/predictions/popularity_none_test_seen.txt")).unwrap();
    assert!(preds.lines().all(|l| l.split_whitespace().count() <= 6));
}

#[test]
fn invalid_scenario_encoding_is_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), &MINIMAL.replace("[\"S1\"]", "[\"S1\", \"S3:distances\"]"));
    let o = referral(&["--manifest", "manifest.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("S3"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_model_field_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), &format!("{MINIMAL}\n[[models]]\ntype = \"mf\"\nlr = 0.1\n"));
    let o = referral(&["run", "manifest.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = referral(&["split", "--data", "nowhere", "--out", "split"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

fn write_toy_dataset(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("patients.csv"), "patient_id,sex,age,loc_x,loc_y\np0,F,30,,\np1,M,50,,\n").unwrap();
    fs::write(
        dir.join("doctors.csv"),
        "doctor_id,sex,age,specialties,institutions\nd0,M,40,A,\nd1,M,40,A,\nd2,F,40,B,\nd3,F,40,B,\n",
    )
    .unwrap();
    fs::write(dir.join("hospitals.csv"), "hospital_id,loc_x,loc_y\nh,0,0\n").unwrap();
    fs::write(
        dir.join("interactions.csv"),
        "patient_id,doctor_id,hospital_id,timestamp\np0,d0,h,1\np1,d1,h,2\n",
    )
    .unwrap();
}

#[test]
fn evaluate_matches_hand_computed_values() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_dataset(&dir.path().join("data"));
    fs::write(dir.path().join("preds.txt"), "p0 d0:0.9 d1:0.8 d2:0.7\np1 d3:0.9 d0:0.8\n").unwrap();
    fs::write(dir.path().join("labels.txt"), "p0 d0 d2\np1 d1\n").unwrap();
    fs::write(dir.path().join("eval.toml"), "ks = [1, 3]\n").unwrap();
    let o = referral(
        &[
            "evaluate",
            "--data",
            "data",
            "--predictions",
            "preds.txt",
            "--labels",
            "labels.txt",
            "--config",
            "eval.toml",
            "--out",
            "report.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("P@1\t0.500000"), "{text}");
    assert!(text.contains("nDCG@3\t0.459860"), "{text}");

    let report = EvalReport::load_csv(&dir.path().join("report.csv")).unwrap();
    let get = |m, k| report.find("model", "-", "test_seen", "All", m, k).unwrap().value.unwrap();
    let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    close(get(Metric::Precision, 1), 0.5);
    close(get(Metric::Precision, 3), 1.0 / 3.0);
    close(get(Metric::Recall, 3), 0.5);
    close(get(Metric::Ndcg, 3), 0.4598603945740938);
    close(get(Metric::PsPrecision, 3), 1.0 / 3.0);
    close(get(Metric::PsNdcg, 3), 0.4598603945740938);
    let b = report.find("model", "-", "test_seen", "B", Metric::Precision, 1).unwrap();
    assert_eq!(b.value, None);
    assert_eq!(b.n_patients, 0);
}

#[test]
fn report_renders_a_single_cell() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("r.csv"),
        "method,scenario,partition,specialty,metric,K,value,n_patients\nxml,S1,test_seen,All,P,1,0.25,4\n",
    )
    .unwrap();
    let o = referral(&["report", "--input", "r.csv", "--out", "rep"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let md = fs::read_to_string(dir.path().join("rep/tables.md")).unwrap();
    assert_eq!(
        md,
        "### test_seen / All\n\n| method | scenario | P@1 | patients |\n|---|---|---|---|\n| xml | S1 | 25.00 | 4 |\n\n"
    );
    let csv = fs::read_to_string(dir.path().join("rep/all_patients.csv")).unwrap();
    assert_eq!(csv, "partition,method,scenario,P@1\ntest_seen,xml,S1,0.25\n");
}

#[test]
fn subcommands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("gen.toml"), "n_patients = 300\nn_doctors = 60\nn_hospitals = 8\n").unwrap();
    let run = |args: &[&str]| {
        let o = referral(args, d);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    run(&["generate", "--config", "gen.toml", "--out", "data", "--seed", "2"]);
    run(&["split", "--data", "data", "--out", "split", "--seed", "2"]);
    run(&["encode", "--data", "data", "--split", "split/split.json", "--scenario", "S4", "--out", "f"]);
    fs::write(d.join("xml.toml"), "epochs = 2\ntree_epochs = 2\n").unwrap();
    run(&[
        "train", "--data", "data", "--split", "split/split.json", "--features", "f", "--method", "xml", "--config",
        "xml.toml", "--out", "m.bin",
    ]);
    run(&["predict", "--data", "data", "--features", "f", "--model", "m.bin", "--partition", "test_new", "--top-b", "5", "--out", "p.txt"]);
    let ids = fs::read_to_string(d.join("f/test_new.ids")).unwrap();
    let preds = fs::read_to_string(d.join("p.txt")).unwrap();
    assert_eq!(ids.lines().count(), preds.lines().count());
    let o = run(&[
        "evaluate", "--data", "data", "--predictions", "p.txt", "--labels", "f/labels_test_new.txt", "--train-labels",
        "f/labels_train.txt", "--partition", "test_new",
    ]);
    assert!(stdout(&o).contains("PSP@10"));

    let o = referral(&["train", "--data", "data", "--split", "split/split.json", "--method", "xml", "--out", "x.bin"], d);
    assert_eq!(o.status.code(), Some(2));
}
