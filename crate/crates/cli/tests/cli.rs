use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crfgat_core::fixtures::{random_model, t1};
use crfgat_core::io::{load_artifact, load_dataset, load_labelings, save_model, AnyModel, Artifact};
use crfgat_core::{decode_argmin, KernelSpec, PotentialField};
use tempfile::TempDir;

fn crfgat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crfgat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = crfgat(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const GRID_SPEC: &str = r#"{"topology": {"type": "grid", "width": 5, "height": 4},
    "labels": 3, "noise_sigma": 0.7, "blob_count": 3, "seed": 9, "items": 3}"#;

fn gen_grid(dir: &TempDir) -> PathBuf {
    let data = path(dir, "data.json");
    ok(&["gen", "--spec", GRID_SPEC, "--out", s(&data)]);
    data
}

#[test]
fn gen_is_deterministic_and_reads_spec_files() {
    let dir = TempDir::new().unwrap();
    let a = gen_grid(&dir);
    let spec = path(&dir, "spec.json");
    fs::write(&spec, GRID_SPEC).unwrap();
    let b = path(&dir, "b.json");
    ok(&["gen", "--spec", s(&spec), "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let data = load_dataset(&a).unwrap();
    assert_eq!(data.len(), 3);
    assert_eq!(data.items()[0].sequence.len(), 20);
}

#[test]
fn mf_on_zero_kernel_decodes_unary_argmin() {
    let dir = TempDir::new().unwrap();
    let base = random_model(3, 7, 3, true);
    let model = base.with_kernel(KernelSpec::zero(7)).unwrap();
    let model_path = path(&dir, "model.json");
    save_model(&model_path, &AnyModel::Crf(model.clone())).unwrap();
    let out = path(&dir, "pred.json");
    ok(&["infer", "--model", s(&model_path), "--algo", "mf", "--out", s(&out)]);
    let expected = decode_argmin(&PotentialField::from(model.unary()));
    assert_eq!(load_labelings(&out).unwrap(), vec![expected]);
}

#[test]
fn compare_on_t1_agrees_with_exact_map() {
    let dir = TempDir::new().unwrap();
    let model_path = path(&dir, "t1.json");
    save_model(&model_path, &AnyModel::Crf(t1())).unwrap();
    let report = path(&dir, "report.csv");
    ok(&[
        "compare", "--model", s(&model_path), "--algos", "mf,exact", "--report", s(&report),
    ]);
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "item,algo,labeling,accuracy,energy,marginal_linf_error,wall_ms"
    );
    assert_eq!(lines.len(), 3);
    for (line, algo) in lines[1..].iter().zip(["mf", "exact"]) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], "1");
        assert_eq!(cols[1], algo);
        assert_eq!(cols[2], "1 2");
        assert_eq!(cols[3], "");
        assert!((cols[4].parse::<f64>().unwrap() - 0.5).abs() < 1e-12);
    }
    let exact_err: f64 = lines[2].split(',').nth(5).unwrap().parse().unwrap();
    assert_eq!(exact_err, 0.0);
}

#[test]
fn eval_prints_accuracy() {
    let dir = TempDir::new().unwrap();
    let data = gen_grid(&dir);
    let out = ok(&["eval", "--pred", s(&data), "--gold", s(&data)]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "1.0");
}

#[test]
fn shared_single_layer_gat_matches_one_mean_field_step() {
    let dir = TempDir::new().unwrap();
    let data = gen_grid(&dir);
    let model = path(&dir, "model.json");
    ok(&[
        "init", "--data", s(&data), "--depth", "1", "--shared", "--seed", "4", "--out", s(&model),
    ]);
    let gat = path(&dir, "gat.json");
    let mf = path(&dir, "mf.json");
    let common = ["--model", s(&model), "--data", s(&data)];
    ok(&[&["infer"], &common[..], &["--algo", "gat", "--out", s(&gat)]].concat());
    ok(&[&["infer"], &common[..], &["--algo", "mf", "--max-iter", "1", "--out", s(&mf)]].concat());
    assert_eq!(load_labelings(&gat).unwrap(), load_labelings(&mf).unwrap());
}

#[test]
fn gibbs_is_deterministic_given_seed() {
    let dir = TempDir::new().unwrap();
    let model_path = path(&dir, "m.json");
    save_model(&model_path, &AnyModel::Crf(random_model(5, 6, 2, true))).unwrap();
    let run = |seed: &str, name: &str| {
        let out = path(&dir, name);
        ok(&[
            "infer", "--model", s(&model_path), "--algo", "gibbs", "--sweeps", "2000",
            "--burn-in", "100", "--seed", seed, "--out", s(&out),
        ]);
        fs::read(out).unwrap()
    };
    assert_eq!(run("3", "a.json"), run("3", "b.json"));
    assert_ne!(run("3", "a.json"), run("4", "c.json"));
}

#[test]
fn infer_writes_traces_and_grid_csv() {
    let dir = TempDir::new().unwrap();
    let model_path = path(&dir, "m.json");
    save_model(&model_path, &AnyModel::Crf(random_model(6, 5, 2, true))).unwrap();
    let trace = path(&dir, "trace.csv");
    let kl = path(&dir, "kl.csv");
    let out = path(&dir, "pred.json");
    ok(&[
        "infer", "--model", s(&model_path), "--algo", "mf-seq", "--out", s(&out),
        "--trace", s(&trace), "--kl-trace", s(&kl),
    ]);
    let t = fs::read_to_string(&trace).unwrap();
    assert!(t.starts_with("step,value\n1,"));
    let k = fs::read_to_string(&kl).unwrap();
    let values: Vec<f64> = k.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] <= w[0] + 1e-10));
    assert!(matches!(load_artifact(&out).unwrap(), Artifact::Predictions { marginals: Some(_), .. }));

    let data = gen_grid(&dir);
    let gat_model = path(&dir, "g.json");
    ok(&["init", "--data", s(&data), "--depth", "2", "--out", s(&gat_model)]);
    let grid = path(&dir, "labels.csv");
    let gtrace = path(&dir, "gtrace.csv");
    ok(&[
        "infer", "--model", s(&gat_model), "--data", s(&data), "--algo", "gat", "--out", s(&out),
        "--labels-csv", s(&grid), "--trace", s(&gtrace),
    ]);
    let g = fs::read_to_string(&grid).unwrap();
    assert_eq!(g.lines().count(), 4);
    assert!(g.lines().all(|l| l.split(',').count() == 5));
    assert_eq!(fs::read_to_string(&gtrace).unwrap().lines().count(), 3);
}

#[test]
fn train_writes_model_and_loss_trace() {
    let dir = TempDir::new().unwrap();
    let data = gen_grid(&dir);
    let model = path(&dir, "m.json");
    ok(&["init", "--data", s(&data), "--depth", "1", "--out", s(&model)]);
    let trained = path(&dir, "t.json");
    let trace = path(&dir, "loss.csv");
    ok(&[
        "train", "--model", s(&model), "--data", s(&data), "--config",
        r#"{"learning_rate": 0.1, "epochs": 5}"#, "--out", s(&trained), "--loss-trace", s(&trace),
    ]);
    let text = fs::read_to_string(&trace).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0,"));
    assert!(matches!(load_artifact(&trained).unwrap(), Artifact::CrfGatModel { .. }));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(crfgat(&["infer", "--bogus"]).status.code(), Some(1));
    assert_eq!(crfgat(&["train", "--model", "m.json"]).status.code(), Some(1));
    assert_eq!(crfgat(&["--help"]).status.code(), Some(0));

    let missing = path(&dir, "missing.json");
    let out = crfgat(&["eval", "--pred", s(&missing), "--gold", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    let model_path = path(&dir, "big.json");
    save_model(&model_path, &AnyModel::Crf(random_model(1, 30, 2, true))).unwrap();
    let out = crfgat(&[
        "infer", "--model", s(&model_path), "--algo", "exact", "--out", s(&path(&dir, "p.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("2^30"));
}
