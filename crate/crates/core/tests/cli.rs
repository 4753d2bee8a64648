use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lowsplat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowsplat"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn synth_then_evaluate_identical_trees() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lowsplat(tmp.path(), &["--out", "ds", "--seed", "3", "synth", "--scenes", "2", "--size", "24"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = lowsplat(tmp.path(), &["--out", "ev", "evaluate", "--pred", "ds", "--target", "ds", "--condition", "same"]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(tmp.path().join("ev/metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 4);
    for r in rows {
        assert!(r.starts_with("same,synth_00000"), "{r}");
        assert!(r.ends_with(",99.000000,1.000000"), "{r}");
    }
}

#[test]
fn run_echo_records_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.toml"), "seed = 11\n[pipeline]\nstride = 3\n").unwrap();
    let o = lowsplat(
        tmp.path(),
        &["--config", "run.toml", "--set", "pipeline.stride=4", "--out", "o", "synth", "--scenes", "1", "--size", "16"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("o/run.json")).unwrap()).unwrap();
    assert_eq!(echo["command"]["command"], "synth");
    assert_eq!(echo["config"]["seed"], 11);
    assert_eq!(echo["config"]["pipeline"]["stride"], 4);
    assert_eq!(echo["config"]["synth"]["size"], 16);
}

#[test]
fn exit_codes_by_category() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lowsplat(tmp.path(), &["--no-such-flag"]);
    assert_eq!(code(&o), 2);
    let o = lowsplat(tmp.path(), &["--set", "pipeline.strde=2", "gradcheck"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[invalid-config]"));
    let o = lowsplat(tmp.path(), &["--set", "lowlight.probability=3", "gradcheck"]);
    assert_eq!(code(&o), 2);
    let o = lowsplat(tmp.path(), &["--out", "r", "reconstruct", "--scene", "missing"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[missing-input]"));
    // Inputs are checked before any output is produced.
    assert!(!tmp.path().join("r").exists());
    fs::create_dir(tmp.path().join("empty")).unwrap();
    let o = lowsplat(tmp.path(), &["--out", "b", "build-benchmark", "--dataset", "empty"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn gradcheck_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lowsplat(tmp.path(), &["--out", "g", "gradcheck", "--scenes", "4", "--samples", "10"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.matches("PASS").count(), 3, "{stdout}");
    assert!(tmp.path().join("g/gradcheck.json").exists());
}

#[test]
fn benchmark_reconstruct_render_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let o = lowsplat(tmp.path(), args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["--out", "ds", "synth", "--scenes", "1", "--size", "24"]);
    run(&["--out", "bench", "build-benchmark", "--dataset", "ds", "--level", "blur"]);
    run(&["--out", "ad", "--set", "adapter.train.epochs=2", "train-adapter", "--dataset", "ds"]);
    let scene = "bench/synth_000000";
    run(&["--out", "rec", "--set", "pipeline.refine.steps=3", "reconstruct", "--scene", scene, "--adapter", "ad/adapter.txt"]);
    for f in ["scene.lsc", "trace.csv", "renders/view_002.png", "renders/view_003.png"] {
        assert!(tmp.path().join("rec").join(f).exists(), "{f}");
    }
    run(&["--out", "rend", "render", "--scene", "rec/scene.lsc", "--cameras", "bench/synth_000000/cameras.json"]);
    assert!(tmp.path().join("rend/view_000.png").exists());
    // Same seed, same bytes.
    run(&["--out", "bench2", "build-benchmark", "--dataset", "ds", "--level", "blur"]);
    let a = fs::read(tmp.path().join(scene).join("images/view_000.png")).unwrap();
    let b = fs::read(tmp.path().join("bench2/synth_000000/images/view_000.png")).unwrap();
    assert_eq!(a, b);
}
