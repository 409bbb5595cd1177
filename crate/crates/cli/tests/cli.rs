use std::path::Path;
use std::process::{Command, Output};

use quasilod::coefficient::SpatialField;
use quasilod::corrector::CorrectorSet;
use quasilod::harness::table::{read_study, STUDY_HEADER};
use quasilod::solver::read_solution;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quasilod"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, "fine_n = 64\ncoarse_n = [4, 8]\nk = [1, 2]\nmax_iter = 40\n").unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn study_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = run(&["study", "--config", &cfg, "--k-list", "1,2,3", "--output-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let table = out_dir.join("study.csv");
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.starts_with(&format!("{STUDY_HEADER}\n")));
    let rows = read_study(&table).unwrap();
    // Flag overrides the file: three k values on two meshes.
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.wall_ms == 0.0));
    assert!(out_dir.join("timings.csv").exists());

    let svg = dir.path().join("plot.svg");
    let out = run(&["plot", "--table", table.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert!(out.status.success());
    let svg = std::fs::read_to_string(svg).unwrap();
    assert_eq!(svg.matches("class=\"series\"").count(), 3);
    assert_eq!(svg.matches("class=\"marker\"").count(), 6);
}

#[test]
fn artifacts_and_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cache = dir.path().join("cache");
    let cache = cache.to_str().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();

    assert!(run(&["gen-coefficient", "--config", &cfg, "--out", &p("c.lodf")]).status.success());
    let field = SpatialField::read(Path::new(&p("c.lodf"))).unwrap();
    assert_eq!(field.mesh().n(), 64);
    assert_eq!(field.max(), 50.0);
    assert!(field.min() >= 0.05 && field.contrast() > 500.0, "{}", field.contrast());

    let out = run(&["correctors", "--config", &cfg, "--cache-dir", cache, "--coarse", "8", "--k", "2", "--linearization", "frechet", "--p-star", "g", "--out", &p("q.lodc")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let set = CorrectorSet::read(Path::new(&p("q.lodc"))).unwrap();
    assert_eq!((set.pair.coarse.n(), set.k, set.correctors.len()), (8, 2, 49));

    let out = run(&["solve-lod", "--config", &cfg, "--cache-dir", cache, "--coarse", "8", "--k", "2", "--errors", "--out", &p("u.lodu")]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("e_lod = "));
    assert_eq!(read_solution(Path::new(&p("u.lodu"))).unwrap().mesh().n(), 64);

    let listing = run(&["cache", "inspect", "--cache-dir", cache]);
    let listing = String::from_utf8_lossy(&listing.stdout).into_owned();
    assert!(listing.contains("H=1/8 h=1/64 k=2 frechet"), "{listing}");
    assert!(listing.contains("H=1/8 h=1/64 k=2 kacanov"), "{listing}");
    let cleared = run(&["cache", "clear", "--cache-dir", cache]);
    assert!(String::from_utf8_lossy(&cleared.stdout).starts_with("removed 3 files"));
}

#[test]
fn bad_input_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "fine_n = 64\nsmoothing = 3\n").unwrap();
    let out = run(&["study", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("smoothing"));

    let out = run(&["study", "--fine-n", "64", "--coarse-n", "3"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["study", "--p-star", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unconverged_solves_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["solve-reference", "--fine-n", "64", "--reference-max-iter", "2", "--out", dir.path().join("u.lodu").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
