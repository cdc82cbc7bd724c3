use std::path::PathBuf;
use std::process::Command;

fn example(name: &str) -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let debug = exe.parent().and_then(|deps| deps.parent()).unwrap();
    debug
        .join("examples")
        .join(format!("{name}{}", std::env::consts::EXE_SUFFIX))
}

fn run(name: &str, args: &[&str]) -> String {
    let path = example(name);
    assert!(path.is_file(), "{} was not built", path.display());
    let out = Command::new(&path).args(args).output().unwrap();
    assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn autodiff_example() {
    assert!(run("autodiff", &[]).contains("max relative gradient error"));
}

#[test]
fn bcos_unit_example() {
    assert!(run("bcos_unit", &[]).contains("W(x) applied to x"));
}

#[test]
fn window_attention_example() {
    assert!(run("window_attention", &[]).contains("window 4 shift 0: max difference from global 0.000e0"));
}

#[test]
fn model_zoo_example() {
    let out = run("model_zoo", &[]);
    assert!(out.contains("checkpoint round trip identical: true"), "{out}");
}

#[test]
fn synthetic_data_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("synthetic_data", &[dir.path().to_str().unwrap()]);
    assert!(out.contains("wrote 60 images"), "{out}");
    assert!(dir.path().join("labels.csv").is_file());
}

#[test]
fn cka_layers_example() {
    assert!(run("cka_layers", &[]).contains("layer,block0,block1,block2,block3"));
}

#[test]
fn train_shapes_example() {
    assert!(run("train_shapes", &["2"]).contains("best epoch"));
}

#[test]
fn explain_shapes_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("explain_shapes", &[dir.path().to_str().unwrap()]);
    assert!(out.contains("rollout"), "{out}");
    assert!(dir.path().join("ta.pgm").is_file());
}
