use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use super::*;

const SMALL: &str = "\
d_out = 8
d_in = 8
num_samples = 64
eval_samples = 32
true_rank = 1
num_clients = 3
rounds = 5
eta = 1e-3
rank = 2
seed = 4
";

struct Outcome {
    code: u8,
    stdout: String,
    stderr: String,
}

fn florg(args: &[&dyn AsRef<std::ffi::OsStr>], env_seed: Option<&str>) -> Outcome {
    let argv: Vec<OsString> = std::iter::once(OsString::from("florg"))
        .chain(args.iter().map(|a| a.as_ref().to_os_string()))
        .collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_cli(argv, env_seed, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn run_in(dir: &Path, cfg: &Path, extra: &[&str], env_seed: Option<&str>) -> Outcome {
    let mut args: Vec<&dyn AsRef<std::ffi::OsStr>> =
        vec![&"run", &"--config", &cfg, &"--out", &dir];
    args.extend(extra.iter().map(|a| a as &dyn AsRef<std::ffi::OsStr>));
    florg(&args, env_seed)
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn run_writes_one_row_per_round() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.cfg", SMALL);
    let out_dir = tmp.path().join("out");
    let out = run_in(&out_dir, &cfg, &[], None);
    assert_eq!(out.code, exit::OK, "{}", out.stderr);
    assert!(out.stdout.starts_with("5 rounds"), "{}", out.stdout);
    let mut reader = csv::Reader::from_path(out_dir.join(METRICS_FILE)).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, florg::federation::metrics::METRIC_COLUMNS);
    assert_eq!(rows(&out_dir.join(METRICS_FILE)).len(), 5);
    for file in [DIAGNOSTICS_FILE, CHECKPOINT_FILE, MANIFEST_FILE] {
        assert!(out_dir.join(file).is_file(), "{file}");
    }
    let manifest = fs::read_to_string(out_dir.join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains("seed_source = file"), "{manifest}");
    assert!(manifest.contains("status = ok"), "{manifest}");
}

#[test]
fn existing_outputs_are_not_clobbered() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.cfg", SMALL);
    assert_eq!(run_in(tmp.path(), &cfg, &[], None).code, exit::OK);
    let before = fs::read(tmp.path().join(METRICS_FILE)).unwrap();
    let again = run_in(tmp.path(), &cfg, &["--seed", "99"], None);
    assert_eq!(again.code, exit::CONFIG);
    assert_eq!(fs::read(tmp.path().join(METRICS_FILE)).unwrap(), before);
    let forced = run_in(tmp.path(), &cfg, &["--overwrite", "--seed", "99"], None);
    assert_eq!(forced.code, exit::OK);
    assert_ne!(fs::read(tmp.path().join(METRICS_FILE)).unwrap(), before);
}

#[test]
fn seed_flag_beats_environment_beats_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.cfg", SMALL);
    let metrics = |dir: &Path| fs::read(dir.join(METRICS_FILE)).unwrap();
    let dir = |name: &str| tmp.path().join(name);

    assert_eq!(run_in(&dir("env"), &cfg, &[], Some("11")).code, exit::OK);
    assert_eq!(
        run_in(&dir("flag"), &cfg, &["--seed", "11"], None).code,
        exit::OK
    );
    assert_eq!(
        run_in(&dir("both"), &cfg, &["--seed", "11"], Some("12")).code,
        exit::OK
    );
    assert_eq!(run_in(&dir("file"), &cfg, &[], None).code, exit::OK);

    assert_eq!(metrics(&dir("env")), metrics(&dir("flag")));
    assert_eq!(metrics(&dir("both")), metrics(&dir("flag")));
    assert_ne!(metrics(&dir("file")), metrics(&dir("flag")));
    let manifest = fs::read_to_string(dir("env").join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains("seed_source = env"));
}

#[test]
fn bad_inputs_exit_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.cfg", SMALL);
    let out_dir = tmp.path().join("o");
    let bad_env = run_in(&out_dir, &cfg, &[], Some("xyz"));
    assert_eq!(bad_env.code, exit::CONFIG);
    assert!(bad_env.stderr.contains(SEED_ENV), "{}", bad_env.stderr);
    let missing = run_in(&out_dir, &tmp.path().join("missing.cfg"), &[], None);
    assert_eq!(missing.code, exit::CONFIG);
    let typo = write_config(tmp.path(), "typo.cfg", &format!("{SMALL}etaa = 1\n"));
    let unknown = run_in(&out_dir, &typo, &[], None);
    assert_eq!(unknown.code, exit::CONFIG);
    assert!(unknown.stderr.contains("etaa"), "{}", unknown.stderr);
    assert_eq!(florg(&[&"launch"], None).code, exit::CONFIG);
    assert!(!out_dir.join(METRICS_FILE).exists());
}

#[test]
fn help_is_not_an_error() {
    let out = florg(&[&"--help"], None);
    assert_eq!(out.code, exit::OK);
    assert!(out.stdout.contains("compare"));
}

#[test]
fn divergence_keeps_earlier_rows_and_names_the_round() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "hot.cfg",
        &SMALL.replace("eta = 1e-3", "eta = 1e3"),
    );
    let out = run_in(tmp.path(), &cfg, &[], None);
    assert_eq!(out.code, exit::DIVERGED);
    assert!(out.stderr.contains("round"), "{}", out.stderr);
    assert!(rows(&tmp.path().join(METRICS_FILE)).len() < 5);
    let manifest = fs::read_to_string(tmp.path().join(MANIFEST_FILE)).unwrap();
    assert!(!manifest.contains("status = ok"), "{manifest}");
}

#[test]
fn compare_writes_every_cell_and_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.cfg", SMALL);
    let out = florg(
        &[
            &"compare",
            &"--config",
            &cfg,
            &"--schemes",
            &"florg,fedit",
            &"--seeds",
            &"1,2",
            &"--workers",
            &"2",
            &"--out",
            &tmp.path(),
        ],
        Some("77"),
    );
    assert_eq!(out.code, exit::OK, "{}", out.stderr);
    for scheme in [SchemeId::Florg, SchemeId::FedIt] {
        for seed in [1, 2] {
            assert_eq!(rows(&tmp.path().join(cell_file(scheme, seed))).len(), 5);
        }
    }
    let mut reader = csv::Reader::from_path(tmp.path().join(SUMMARY_FILE)).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, SUMMARY_COLUMNS);
    let summary: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(summary.len(), 2);
    assert_eq!(&summary[0][0], "florg");
    assert_eq!(&summary[0][1], "2");
    assert_eq!(&summary[0][2], "0");
}

#[test]
fn compare_cells_match_single_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.cfg", SMALL);
    let grid = tmp.path().join("grid");
    let out = florg(
        &[
            &"compare",
            &"--config",
            &cfg,
            &"--schemes",
            &"florg",
            &"--seeds",
            &"3",
            &"--out",
            &grid,
        ],
        None,
    );
    assert_eq!(out.code, exit::OK, "{}", out.stderr);
    let single = tmp.path().join("single");
    assert_eq!(run_in(&single, &cfg, &["--seed", "3"], None).code, exit::OK);
    assert_eq!(
        fs::read(grid.join(cell_file(SchemeId::Florg, 3))).unwrap(),
        fs::read(single.join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn verify_reports_each_property() {
    let out = florg(&[&"verify", &"--quick", &"--seed", &"3"], None);
    assert_eq!(out.code, exit::OK, "{}", out.stdout);
    assert!(out.stdout.starts_with("verify seed 3"));
    let passes = out
        .stdout
        .lines()
        .filter(|l| l.starts_with("PASS "))
        .count();
    assert_eq!(passes, florg::verify::PROPERTY_NAMES.len());
}
