use std::fs;
use std::path::Path;
use std::process::Command;

use hecnn::analyzer::CostReport;
use hecnn::bench::{PARAMS_CSV_HEADER, THREADS_CSV_HEADER};
use hecnn::dataset::{random_images, save_images};
use hecnn::layers::PolyActivation;
use hecnn::model::{argmax, save_model, Manifest};
use hecnn::{plaintext_forward, ModelDesc};

fn hecnn(args: &[&str]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_hecnn")).args(args).output().unwrap();
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) -> String {
    let (success, stdout, stderr) = hecnn(args);
    assert!(success, "hecnn {args:?} failed: {stderr}");
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn three_party_round_trip(backend: &str, params: &str) {
    let dir = tempfile::tempdir().unwrap();
    let (user, server) = (dir.path().join("user"), dir.path().join("server"));
    let model_dir = dir.path().join("model");
    let model = ModelDesc::random(&Manifest::canonical(8, 8, 2, 3, 3, true, true, PolyActivation::default()), 3).unwrap();
    save_model(&model, &model_dir).unwrap();
    let images = random_images(8, 8, 6, 4);
    let img_path = dir.path().join("images.bin");
    save_images(&img_path, &images).unwrap();
    let global = ["--backend", backend, "--params", params, "--allow-insecure"];
    let run = |rest: &[&str]| ok(&[&global[..], rest].concat());

    run(&["keygen", "--out", s(&user)]);
    run(&["encrypt-model", "--keys", s(&user), "--model", s(&model_dir), "--out", s(&dir.path().join("model.enc"))]);
    run(&["encrypt-input", "--keys", s(&user), "--images", s(&img_path), "--out", s(&dir.path().join("x.enc"))]);

    // The server sees parameters and the evaluation key only.
    fs::create_dir_all(&server).unwrap();
    for f in ["params.json", "eval.key"] {
        fs::copy(user.join(f), server.join(f)).unwrap();
    }
    run(&[
        "infer",
        "--keys",
        s(&server),
        "--model",
        s(&dir.path().join("model.enc")),
        "--input",
        s(&dir.path().join("x.enc")),
        "--out",
        s(&dir.path().join("y.enc")),
        "--plan",
        "2,2,3,1",
    ]);
    let csv = run(&["decrypt-output", "--keys", s(&user), "--input", s(&dir.path().join("y.enc"))]);
    let want = plaintext_forward(&model, &images).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "image,class_0,class_1,class_2");
    for (line, w) in lines.zip(&want) {
        let got: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        for (g, w) in got.iter().zip(w) {
            assert!((g - w).abs() < 1e-3, "{g} vs {w}");
        }
    }
    let pred = run(&["predict", "--keys", s(&user), "--input", s(&dir.path().join("y.enc"))]);
    let classes: Vec<usize> = pred.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let margins_ok: Vec<bool> = want.iter().map(|w| hecnn::model::top2_margin(w) > 1e-2).collect();
    for ((c, w), m) in classes.iter().zip(&want).zip(margins_ok) {
        if m {
            assert_eq!(*c, argmax(w));
        }
    }
}

#[test]
fn reference_workflow_with_server_holding_only_the_eval_key() {
    three_party_round_trip("ref", "2^8,300,30");
}

#[test]
fn ckks_workflow_with_server_holding_only_the_eval_key() {
    three_party_round_trip("ckks", "2^11,240,35");
}

#[test]
fn insecure_parameters_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (success, _, stderr) = hecnn(&["--params", "2^11,240,35", "keygen", "--out", s(dir.path())]);
    assert!(!success);
    assert!(stderr.contains("--allow-insecure"), "{stderr}");
    let (success, _, _) = hecnn(&["--backend", "ref", "--params", "2^16,600,35", "keygen", "--out", s(dir.path())]);
    assert!(!success);
}

#[test]
fn analyze_mnist_topology() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cost.csv");
    let out = ok(&["analyze", "--mnist", "--csv", s(&csv)]);
    assert!(out.contains("600"), "{out}");
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), CostReport::CSV_HEADER);
}

#[test]
fn bench_csv_headers() {
    let out = ok(&[
        "--backend", "ref", "--params", "2^8,200,30", "--allow-insecure", "bench-params", "--sweep", "200,300", "--trials", "30",
    ]);
    assert_eq!(out.lines().next().unwrap(), PARAMS_CSV_HEADER);
    assert_eq!(out.lines().count(), 5);

    let out = ok(&[
        "--backend", "ref", "--params", "2^14,240,35", "--allow-insecure", "bench-threads", "--batch", "4", "--plans", "1,1,1,1;2,1,2,1",
    ]);
    assert_eq!(out.lines().next().unwrap(), THREADS_CSV_HEADER);
    assert_eq!(out.lines().count(), 3);
}

#[test]
fn analyze_needs_a_model() {
    let (success, _, stderr) = hecnn(&["analyze"]);
    assert!(!success && stderr.contains("--mnist"));
}

#[test]
fn malformed_plan_is_an_error() {
    let (success, _, _) = hecnn(&[
        "--backend", "ref", "--params", "2^14,240,35", "--allow-insecure", "bench-threads", "--batch", "2", "--plans", "1,1,1",
    ]);
    assert!(!success);
}
