use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use reflseg::episodes::pnm;

fn reflseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reflseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = reflseg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_dataset(dir: &Path) {
    ok(&["gen-data", "--seed", "3", "--n-per-class", "8", "--dataset-dir", p(dir)]);
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-data", "--seed", "7", "--n-per-class", "50", "--dataset-dir", p(&a)]);
    ok(&["gen-data", "--seed", "7", "--n-per-class", "50", "--dataset-dir", p(&b)]);
    // The settings echo names the output directory, so it is compared apart.
    let data_files = |root: &Path| tree_bytes(root).into_iter().filter(|(n, _)| !n.ends_with(".config")).collect::<Vec<_>>();
    let (ta, tb) = (data_files(&a), data_files(&b));
    assert_eq!(ta.len(), 2 * 1000 + 1);
    assert!(ta == tb, "dataset bytes differ between runs");
}

#[test]
fn config_echo_reads_back_to_the_same_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--seed", "5", "--n-per-class", "4", "--dataset-dir", p(&data)]);
    let echo = fs::read_to_string(data.join("gen-data.config")).unwrap();
    assert!(echo.contains("seed = 5") && echo.contains("n-per-class = 4"));
    let again = tmp.path().join("again");
    let cfg = tmp.path().join("run.config");
    fs::write(&cfg, echo.replace(p(&data), p(&again))).unwrap();
    ok(&["gen-data", "--config", p(&cfg)]);
    assert_eq!(tree_bytes(&data).into_iter().filter(|(n, _)| !n.ends_with(".config")).collect::<Vec<_>>(),
        tree_bytes(&again).into_iter().filter(|(n, _)| !n.ends_with(".config")).collect::<Vec<_>>());
    // Flags on the command line win over the file.
    ok(&["gen-data", "--config", p(&cfg), "--seed", "6"]);
    assert!(fs::read_to_string(again.join("gen-data.config")).unwrap().contains("seed = 6"));
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(reflseg(&["eval", "--fold", "7"]).status.code(), Some(2));
    assert_eq!(reflseg(&["no-such-command"]).status.code(), Some(2));
    let cfg = tmp.path().join("bad.config");
    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    assert_eq!(reflseg(&["eval", "--config", p(&cfg)]).status.code(), Some(2));
    assert_eq!(reflseg(&["train-meta", "--lr", "-1"]).status.code(), Some(2));
    let missing = tmp.path().join("missing");
    let out = reflseg(&["eval", "--dataset-dir", p(&missing), "--oracle", "gt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn ground_truth_oracle_scores_one_hundred() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let out = tmp.path().join("eval");
    ok(&["eval", "--oracle", "gt", "--dataset-dir", p(&data), "--out-dir", p(&out)]);
    let mut r = csv::Reader::from_path(out.join("eval.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    // Every fold at both shot counts by default.
    assert_eq!(rows.len(), 8);
    for row in rows {
        assert_eq!(&row[2], "1000");
        assert_eq!(row[3].parse::<f64>().unwrap(), 100.0);
        assert_eq!(row[4].parse::<f64>().unwrap(), 100.0);
    }
}

#[test]
fn ablate_writes_every_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let out = tmp.path().join("abl");
    let args = ["--dataset-dir", p(&data), "--out-dir", p(&out), "--epochs", "1", "--episodes-per-epoch", "8", "--n-episodes-eval", "10"];
    ok(&[&["ablate", "--fold", "0", "--seeds", "3"][..], &args[..]].concat());
    let mut r = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    let fold0: Vec<_> = rows.iter().filter(|row| &row[4] == "0").collect();
    assert_eq!(fold0.len(), 5);
    let mut combos: Vec<(String, String, String)> =
        fold0.iter().map(|row| (row[1].to_string(), row[2].to_string(), row[3].to_string())).collect();
    combos.sort();
    let expect = [("off", "off", "off"), ("off", "off", "on"), ("off", "on", "off"), ("on", "off", "off"), ("on", "on", "off")];
    assert_eq!(combos, expect.map(|(a, b, c)| (a.to_string(), b.to_string(), c.to_string())));
    assert!(fold0.iter().all(|row| &row[5] == "3"));
}

#[test]
fn demo_writes_priors_and_binary_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let run = tmp.path().join("run");
    ok(&["train-meta", "--dataset-dir", p(&data), "--out-dir", p(&run), "--epochs", "1", "--episodes-per-epoch", "16", "--val-episodes", "5"]);
    assert!(run.join("meta.ckpt").exists() && run.join("train_log.csv").exists());
    let demo = tmp.path().join("demo");
    ok(&["demo", "--dataset-dir", p(&data), "--out-dir", p(&demo), "--checkpoint", p(&run.join("meta.ckpt"))]);
    for name in ["prior_orig", "prior_refl", "prior_fused"] {
        let img = pnm::read_pgm(&demo.join(format!("{name}.pgm"))).unwrap();
        assert_eq!(img.data.len(), 64 * 64);
    }
    for name in ["pred_orig", "pred_refl", "pred_fused"] {
        let img = pnm::read_pgm(&demo.join(format!("{name}.pgm"))).unwrap();
        assert!(img.data.iter().all(|&v| v == 0 || v == 255), "{name} is not binary");
    }
    assert!(demo.join("query.ppm").exists() && demo.join("support0_mask.pgm").exists());
}

#[test]
fn gradcheck_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&["gradcheck", "--out-dir", p(tmp.path())]);
    assert!(stdout.contains("PASS"));
    assert!(tmp.path().join("gradcheck.csv").exists());
}
