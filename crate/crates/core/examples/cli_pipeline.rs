//! Drives the command-line interface in-process: generate data, train from a
//! JSON config, evaluate, explain and compare layers.

use std::fs;

fn bvt(args: &[&str]) {
    let mut argv = vec!["bvt"];
    argv.extend_from_slice(args);
    println!("$ {}", argv.join(" "));
    let code = bvt::cli::run(argv);
    assert_eq!(code, 0, "command failed");
}

fn main() {
    let root = std::env::temp_dir().join("bvt-cli-pipeline");
    let _ = fs::remove_dir_all(&root);
    let p = |s: &str| root.join(s).display().to_string();
    fs::create_dir_all(&root).unwrap();
    let config = format!(
        r#"{{"model": {{"preset": "desk", "family": "bvt", "num_classes": 3}},
            "train": {{"epochs": 4, "batch_size": 16}},
            "data": {{"kind": "folder", "root": "{}"}}}}"#,
        p("data")
    );
    fs::write(root.join("run.json"), config).unwrap();

    bvt(&["gen-data", "--out", &p("data"), "--per-class", "30", "--seed", "1"]);
    bvt(&["--config", &p("run.json"), "train", "--out", &p("run")]);
    bvt(&[
        "--config",
        &p("run.json"),
        "evaluate",
        "--checkpoint",
        &p("run/best.ckpt"),
        "--out",
        &p("eval"),
    ]);
    bvt(&[
        "explain",
        "--checkpoint",
        &p("run/best.ckpt"),
        "--image",
        &p("data/s000000.ppm"),
        "--methods",
        "attn-last,rollout,lrp",
        "--out",
        &p("explain"),
    ]);
    bvt(&[
        "cka",
        "--checkpoint",
        &p("run/best.ckpt"),
        "--data",
        &p("data"),
        "--split",
        "train",
        "--samples",
        "32",
        "--out",
        &p("cka"),
    ]);
    bvt(&[
        "param-count",
        "--preset",
        "tiny",
        "--family",
        "bvt",
        "--classes",
        "1000",
    ]);
}
