use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use isosplat_cli::commands::bench::FIXTURE_PNG;
use isosplat_cli::formats::{decode_png, write_png, ParticleSetFile, Records};
use serde_json::Value;

fn isosplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isosplat"))
        .args(args)
        .env_remove("ISOSPLAT_THREADS")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_image(dir: &Path) -> PathBuf {
    let path = dir.join("small.png");
    write_png(&path, &decode_png(FIXTURE_PNG).unwrap().downsample(8).unwrap()).unwrap();
    path
}

#[test]
fn render3d_matches_golden_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.png");
    let o = isosplat(&["render3d", s(&fixture("three_splats.json")), "--camera", s(&fixture("camera.json")), "--out", s(&out), "--oracle"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(fixture("three_splats_golden.png")).unwrap());
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["max_deviation"], 0.0);
}

#[test]
fn empty_scene_renders_background() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("empty.ispl");
    ParticleSetFile::new(Records::Iso3D(vec![]), None).save(&scene, false).unwrap();
    let out = dir.path().join("bg.png");
    let o = isosplat(&["render3d", s(&scene), "--camera", s(&fixture("camera.json")), "--out", s(&out), "--background", "1,0,0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let img = decode_png(&std::fs::read(&out).unwrap()).unwrap();
    for y in 0..img.height() {
        for x in 0..img.width() {
            assert_eq!([img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2)], [1.0, 0.0, 0.0]);
        }
    }
}

#[test]
fn zero_epoch_fit_keeps_initial_particles() {
    let dir = tempfile::tempdir().unwrap();
    let image = small_image(dir.path());
    let out = dir.path().join("fit");
    let o = isosplat(&["fit", s(&image), "--epochs", "0", "--out", s(&out), "--tree-depth", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["initial_loss"], report["final_loss"]);
    assert_eq!(report["particles_initial"], report["particles_final"]);
    for f in ["particles.ispl", "loss.csv", "init.png", "final.png", "fit.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert_eq!(std::fs::read(out.join("init.png")).unwrap(), std::fs::read(out.join("final.png")).unwrap());
}

#[test]
fn fit_output_is_inspectable() {
    let dir = tempfile::tempdir().unwrap();
    let image = small_image(dir.path());
    let out = dir.path().join("fit");
    let o = isosplat(&["fit", s(&image), "--epochs", "5", "--out", s(&out), "--kernel", "aniso", "--init", "random", "--k", "20", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = isosplat(&["inspect", s(&out.join("particles.json"))]);
    assert!(o.status.success());
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["count"], 20);
    assert_eq!(report["geometric_dof_total"], 100);
    assert_eq!(report["metadata"]["epoch"], 5);
}

#[test]
fn inspect_image_reports_tree() {
    let dir = tempfile::tempdir().unwrap();
    let image = small_image(dir.path());
    let o = isosplat(&["inspect", s(&image), "--tree-depth", "3", "--no-tree"]);
    assert!(o.status.success());
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["type"], "image");
    assert!(report["leaves"].as_u64().unwrap() <= 64);
    assert!(report.get("tree").is_none());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let image = small_image(dir.path());
    let code = |o: Output| o.status.code().unwrap();

    assert_eq!(code(isosplat(&["--help"])), 0);
    assert_eq!(code(isosplat(&["fit", s(&dir.path().join("missing.png"))])), 2);
    assert_eq!(code(isosplat(&["fit", s(&image), "--bogus"])), 3);
    assert_eq!(code(isosplat(&["fit", s(&image), "--lambda", "2", "--out", s(&dir.path().join("o"))])), 3);
    assert_eq!(code(isosplat(&["fit", s(&image), "--threads", "0", "--out", s(&dir.path().join("o"))])), 3);

    let bad = dir.path().join("v2.ispl");
    let mut bytes = ParticleSetFile::new(Records::Iso3D(vec![]), None).to_binary();
    bytes[4] = 2;
    std::fs::write(&bad, bytes).unwrap();
    assert_eq!(code(isosplat(&["inspect", s(&bad)])), 2);

    let budget = isosplat(&[
        "bench", "--downsample", "8", "--epochs", "50", "--d", "15", "--k", "50", "--reps", "1", "--budget", "0.001",
        "--out", s(&dir.path().join("b.csv")),
    ]);
    assert_eq!(code(budget), 5);
    let csv = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert!(csv.contains("# truncated"));
}
