//! End-to-end CLI smoke: synth-to-disk, tiny train on the directory
//! dataset, calibrate, infer with a grid panel, reject.

use std::path::Path;
use std::process::Command;

fn tryon_bin() -> &'static str {
    env!("CARGO_BIN_EXE_tryon")
}

fn run(args: &[&str]) -> String {
    let out = Command::new(tryon_bin())
        .args(args)
        .output()
        .expect("spawn tryon");
    assert!(
        out.status.success(),
        "tryon {:?} failed:\n{}\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn pipeline_round_trip_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    // small everything: 32x32 conditions, 64x64 outputs, narrow nets
    let small: Vec<String> = [
        "--set",
        "condition_height=32",
        "--set",
        "condition_width=32",
        "--set",
        "output_height=64",
        "--set",
        "output_width=64",
        "--set",
        "cond_widths=4,8,8,8,8",
        "--set",
        "toig_widths=8,8,8,8",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let small: Vec<&str> = small.iter().map(|s| s.as_str()).collect();

    // write a dataset to disk
    let data = d("data");
    let out = run(&[
        &["make-synth", "--out", &data, "--synth-n", "3", "--seed", "5"],
        &small[..],
    ]
    .concat());
    assert!(out.contains("wrote 3 records"));
    for sub in ["person", "cloth", "cloth_mask", "parse", "pose"] {
        assert!(Path::new(&data).join(sub).join("00000.png").exists());
    }

    // train both stages briefly on the directory dataset
    let dataset_args = ["--set", "dataset=directory", "--set"];
    let root_kv = format!("data_root={data}
");
    let root_kv = root_kv.trim();
    let tocg = d("tocg.ckpt");
    run(&[
        &["train-tocg", "--iterations", "2", "--seed", "5", "--out", &tocg],
        &dataset_args[..],
        &[root_kv],
        &small[..],
    ]
    .concat());
    let toig = d("toig.ckpt");
    run(&[
        &[
            "train-toig",
            "--tocg",
            &tocg,
            "--iterations",
            "2",
            "--seed",
            "5",
            "--out",
            &toig,
        ],
        &dataset_args[..],
        &[root_kv],
        &small[..],
    ]
    .concat());

    // calibrate, infer with a panel, and gate the dataset
    let calib = d("calib.json");
    let out = run(&[
        &["calibrate-reject", "--tocg", &tocg, "--out", &calib, "--tau", "0.0"],
        &dataset_args[..],
        &[root_kv],
        &small[..],
    ]
    .concat());
    assert!(out.contains("calibrated over 3 samples"));

    let img = d("result.png");
    let grid = d("panel.png");
    let out = run(&[
        &[
            "infer", "--tocg", &tocg, "--toig", &toig, "--calib", &calib,
            "--person-idx", "0", "--cloth-idx", "2", "--out", &img, "--grid", &grid,
        ],
        &dataset_args[..],
        &[root_kv],
        &small[..],
    ]
    .concat());
    assert!(out.contains("accepted"), "tau 0 must accept: {out}");
    assert!(Path::new(&img).exists());
    assert!(Path::new(&grid).exists());

    let out = run(&[
        &["reject", "--tocg", &tocg, "--calib", &calib],
        &dataset_args[..],
        &[root_kv],
        &small[..],
    ]
    .concat());
    assert!(out.contains("3 / 3 accepted"), "{out}");

    // paired eval prints a mean SSIM line
    let out = run(&[
        &["eval", "--tocg", &tocg, "--toig", &toig],
        &dataset_args[..],
        &[root_kv],
        &small[..],
    ]
    .concat());
    assert!(out.contains("paired ssim mean over 3 samples"), "{out}");
}
