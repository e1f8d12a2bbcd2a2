//! End-to-end command tests on a tiny procedural run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use gmmunit::cli::{exit_code, run};
use gmmunit::pipeline::split_grid;

const TINY: &str = r#"
toy_domains = 3
toy_images_per_domain = 20
image_size = 32
base_channels = 4
mlp_dim = 16
batch_size = 4
steps = 5
probe_steps = 20
eval_inputs = 2
eval_samples = 2
interp_frames = 3
"#;

/// Trains one tiny zero-variance run shared by the tests below.
fn sigma0_run() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli_sigma0");
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root).unwrap();
        let cfg = root.join("tiny.toml");
        fs::write(&cfg, format!("out = {:?}\nvariant = \"sigma0\"\n{TINY}", root.join("run"))).unwrap();
        run(["gmmunit", "--config", cfg.to_str().unwrap(), "train"]).unwrap();
        root.join("run")
    })
}

fn input_image(run: &Path) -> PathBuf {
    run.join("toy_data").join("d0_plain").join("00000.png")
}

fn out_args(run: &Path) -> Vec<String> {
    vec!["gmmunit".into(), "--out".into(), run.to_str().unwrap().into()]
}

#[test]
fn sigma0_translation_is_reproducible() {
    let run_dir = sigma0_run();
    let input = input_image(run_dir);
    let translate = |samples: &str| {
        let mut args = out_args(run_dir);
        args.extend(["translate", "--input", input.to_str().unwrap(), "--domain", "d1_textured", "--samples", samples].map(String::from));
        run(args).unwrap();
        fs::read(run_dir.join("translate.png")).unwrap()
    };
    let first = translate("1");
    let second = translate("1");
    assert_eq!(first, second);

    // every sample of a zero-variance prior is the component mean
    translate("3");
    let img = image::open(run_dir.join("translate.png")).unwrap().to_rgb8();
    let cells = split_grid(&img, 32, 32).unwrap();
    assert_eq!(cells.len(), 3);
    assert!(cells.iter().all(|row| row[0] == cells[0][0]));
}

#[test]
fn interpolation_with_equal_endpoints_is_constant() {
    let run_dir = sigma0_run();
    let input = input_image(run_dir);
    let mut args = out_args(run_dir);
    args.extend(
        [
            "interpolate", "--input", input.to_str().unwrap(), "--from", "d2_street", "--to", "d2_street", "--steps", "5",
            "--t-min", "-0.5", "--t-max", "1.5",
        ]
        .map(String::from),
    );
    run(args).unwrap();
    let img = image::open(run_dir.join("interpolate.png")).unwrap().to_rgb8();
    let cells = split_grid(&img, 32, 32).unwrap();
    assert_eq!(cells[0].len(), 5);
    assert!(cells[0].iter().all(|c| *c == cells[0][0]));
    let csv = fs::read_to_string(run_dir.join("interpolate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn remaining_commands_write_their_artifacts() {
    let run_dir = sigma0_run();
    let input = input_image(run_dir);
    let reference = run_dir.join("toy_data").join("d2_street").join("00000.png");
    let cases: Vec<(Vec<&str>, &str)> = vec![
        (vec!["sample-grid", "--inputs", "2", "--samples", "2"], "sample_grid"),
        (
            vec!["style-transfer", "--input", input.to_str().unwrap(), "--reference", reference.to_str().unwrap()],
            "style_transfer.png",
        ),
        (vec!["export-latents", "--samples", "10"], "latents.csv"),
        (vec!["eval"], "report.json"),
    ];
    for (cmd, artifact) in cases {
        let mut args = out_args(run_dir);
        args.extend(cmd.iter().map(|s| s.to_string()));
        run(args).unwrap();
        assert!(run_dir.join(artifact).exists(), "{artifact} missing");
    }
    let latents = gmmunit::eval::read_latents(&run_dir.join("latents.csv")).unwrap();
    assert!(!latents.is_empty());
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "steps = 3\nno_such_key = 1\n").unwrap();
    let e = run(["gmmunit", "--config", bad.to_str().unwrap(), "train"]).unwrap_err();
    assert_eq!((e.class(), exit_code(&e)), ("config", 3));

    let invalid = dir.path().join("invalid.toml");
    fs::write(&invalid, "lr = -1.0\neval_samples = 1\n").unwrap();
    match run(["gmmunit", "--config", invalid.to_str().unwrap(), "train"]).unwrap_err() {
        gmmunit::Error::Config(errs) => assert!(errs.len() >= 3, "{errs:?}"),
        other => panic!("expected an aggregated config error, got {other}"),
    }

    let missing = dir.path().join("missing.toml");
    fs::write(
        &missing,
        format!("out = {:?}\ndata_root = {:?}\n", dir.path().join("o"), dir.path().join("nowhere")),
    )
    .unwrap();
    let e = run(["gmmunit", "--config", missing.to_str().unwrap(), "train"]).unwrap_err();
    assert_eq!((e.class(), exit_code(&e)), ("data", 4));

    let e = run(["gmmunit", "--out", dir.path().to_str().unwrap(), "eval"]).unwrap_err();
    assert_eq!((e.class(), exit_code(&e)), ("checkpoint", 5));

    let e = run(["gmmunit", "frobnicate"]).unwrap_err();
    assert_eq!(exit_code(&e), 2);
}

#[test]
fn binary_prints_a_parsable_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gmmunit"))
        .args(["--out", dir.path().to_str().unwrap(), "eval"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.lines().any(|l| l.starts_with("error[checkpoint]: ")), "{stderr}");
}
