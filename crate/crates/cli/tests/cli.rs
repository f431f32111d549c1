use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn densesfm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densesfm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_match_export_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let o = densesfm(&["synth", "--images", "5", "--targets", "2", "--out", "scene"], dir);
    assert!(o.status.success(), "{o:?}");

    fs::write(dir.join("config.json"), r#"{"best_n_pairs": 2, "rng_seed": 3}"#).unwrap();
    let o = densesfm(&["match", "scene/pyramids", "--config", "config.json", "--jobs", "2", "--out", "m"], dir);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("matched 10 pair(s)"));
    let summary = fs::read_to_string(dir.join("m/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 11);

    let o = densesfm(&["export", "m/matches.dmar", "--config", "config.json", "--out", "x"], dir);
    assert!(o.status.success(), "{o:?}");
    let matches = fs::read_to_string(dir.join("x/matches.txt")).unwrap();
    assert!(matches.starts_with("img0"));
    assert!(dir.join("x/img00.txt").exists());

    let o = densesfm(
        &[
            "evaluate",
            "--estimated",
            "scene/estimated_poses.txt",
            "--reference",
            "scene/reference_poses.txt",
            "--day",
            "scene/day.txt",
            "--night",
            "scene/night.txt",
            "--out",
            "ev",
        ],
        dir,
    );
    assert!(o.status.success(), "{o:?}");
    let sweep = fs::read_to_string(dir.join("ev/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 6);
    assert!(sweep.contains("\n1,100.00\n"));
    assert!(dir.join("ev/night_errors.csv").exists());
    assert!(dir.join("ev/counts.csv").exists());
}

#[test]
fn seed_flag_gives_repeatable_archives() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(densesfm(&["synth", "--images", "3", "--targets", "0", "--out", "s"], dir).status.success());
    for out in ["r1", "r2"] {
        let o = densesfm(&["match", "s/pyramids", "--seed", "9", "--out", out], dir);
        assert!(o.status.success(), "{o:?}");
    }
    assert_eq!(
        fs::read(dir.join("r1/matches.dmar")).unwrap(),
        fs::read(dir.join("r2/matches.dmar")).unwrap()
    );
}

#[test]
fn one_pyramid_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(densesfm(&["synth", "--images", "2", "--targets", "0", "--out", "s"], dir).status.success());
    fs::remove_file(dir.join("s/pyramids/img01.dpyr")).unwrap();
    let o = densesfm(&["match", "s/pyramids", "--out", "m"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 2"));
}

#[test]
fn failed_pair_gives_nonzero_exit_but_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(densesfm(&["synth", "--images", "3", "--targets", "0", "--out", "s"], dir).status.success());
    fs::write(dir.join("s/pyramids/img02.dpyr"), b"DPYR").unwrap();
    let o = densesfm(&["match", "s/pyramids", "--out", "m"], dir);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("2 failed"));
    assert!(dir.join("m/matches.dmar").exists());
    assert!(fs::read_to_string(dir.join("m/summary.csv")).unwrap().contains("error"));
}

#[test]
fn extract_config_writes_effective_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = densesfm(&["extract-config", "--seed", "7", "--out", "cfg"], dir);
    assert!(o.status.success(), "{o:?}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("cfg/config.json")).unwrap()).unwrap();
    assert_eq!(json["rng_seed"], 7);
    assert_eq!(json["k_window"], 2);
    assert_eq!(json["ransac_threshold_px"], 10.0);
    assert_eq!(json["max_homographies"], 5);
    assert_eq!(json["best_n_pairs"], serde_json::Value::Null);

    fs::write(dir.join("bad.json"), r#"{"k_window": 0}"#).unwrap();
    let o = densesfm(&["extract-config", "--config", "bad.json", "--out", "cfg2"], dir);
    assert_eq!(o.status.code(), Some(1));
}
