use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dualharmony::imaging::{save_mask_png, ImageTensor};
use ndarray::Array2;
use tempfile::TempDir;

fn dh(args: &[&str]) -> Output {
    dh_in(args, Path::new("."))
}

fn dh_in(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualharmony"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DUALHARMONY_CHECKPOINT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn help_output_matches_golden_files() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let cases: [(&str, &[&str]); 8] = [
        ("root", &["--help"]),
        ("dataset_synth", &["dataset", "synth", "--help"]),
        ("dataset_build", &["dataset", "build", "--help"]),
        ("train", &["train", "--help"]),
        ("harmonize", &["harmonize", "--help"]),
        ("freqmap", &["freqmap", "--help"]),
        ("btrank", &["btrank", "--help"]),
        ("btrank_fit", &["btrank", "fit", "--help"]),
    ];
    for (name, args) in cases {
        let out = dh(args);
        assert_eq!(out.status.code(), Some(0), "{name}");
        let path = golden.join(format!("{name}.txt"));
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            fs::write(&path, stdout(&out)).unwrap();
        }
        let expected = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(stdout(&out), expected, "help for `{}` changed", args.join(" "));
    }
}

#[test]
fn usage_errors_exit_with_one() {
    for args in [
        &["train"][..],
        &["freqmap", "--image", "a.png", "--out", "b.png", "--bogus"],
        &["nonsense"],
        &["train", "--config", "x.toml", "--preset", "V9"],
    ] {
        let out = dh(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn missing_inputs_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let out = dh(&["freqmap", "--image", "/nonexistent/x.png", "--out", tmp.path().join("f.png").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/nonexistent/x.png"), "{}", stderr(&out));
    let out = dh(&["btrank", "fit", "--tally", "/nonexistent/t.csv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn btrank_ranks_the_fixture() {
    let out = dh_in(&["btrank", "fit", "--tally", "fixtures/study_tally.txt"], &workspace_root());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let order: Vec<String> = stdout(&out)
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().to_string())
        .collect();
    assert_eq!(order, ["PHDNet", "DPH", "StyTr2", "AdaAttN", "SANet", "E2STN"]);
}

#[test]
fn btrank_names_a_diverging_method() {
    let tmp = TempDir::new().unwrap();
    let tally = tmp.path().join("t.csv");
    fs::write(&tally, "winner,loser,count\nA,B,3\nA,C,2\nB,C,1\nC,B,1\n").unwrap();
    let out = dh(&["btrank", "fit", "--tally", tally.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("`A`"), "{}", stderr(&out));
}

fn gray(path: &Path) -> image::GrayImage {
    image::open(path).unwrap().to_luma8()
}

#[test]
fn freqmap_of_constant_image_is_a_single_center_spot() {
    let tmp = TempDir::new().unwrap();
    let input = tmp.path().join("flat.png");
    ImageTensor::filled(64, 48, [0.4, 0.5, 0.6]).save_png(&input).unwrap();
    let out_path = tmp.path().join("map.png");
    let out = dh(&["freqmap", "--image", input.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let map = gray(&out_path);
    for (x, y, p) in map.enumerate_pixels() {
        if (x, y) == (24, 32) {
            assert_eq!(p[0], 255);
        } else {
            assert!(p[0] < 128, "({x}, {y}) = {}", p[0]);
        }
    }
}

#[test]
fn freqmap_of_stripes_has_spots_at_the_stripe_frequency() {
    let tmp = TempDir::new().unwrap();
    let input = tmp.path().join("stripes.png");
    // 8 vertical periods across 64 columns.
    let img = ImageTensor::from_fn(64, 64, |(_, x, _)| 0.5 + 0.5 * (2.0 * std::f64::consts::PI * 8.0 * x as f64 / 64.0).cos());
    img.save_png(&input).unwrap();
    let a = tmp.path().join("a.png");
    let b = tmp.path().join("b.png");
    for out_path in [&a, &b] {
        let out = dh(&["freqmap", "--image", input.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    let map = gray(&a);
    for x in [32 - 8, 32 + 8] {
        assert!(map.get_pixel(x, 32)[0] as f64 > 0.9 * 255.0, "column {x}: {}", map.get_pixel(x, 32)[0]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

/// Builds a tiny dataset and trains two iterations through the CLI.
fn trained_run(tmp: &Path, preset: Option<&str>) -> PathBuf {
    let synth = dh(&["dataset", "synth", "--out", tmp.join("raw").to_str().unwrap(), "--photos", "4", "--paintings", "4", "--size", "128", "--seed", "3"]);
    assert_eq!(synth.status.code(), Some(0), "{}", stderr(&synth));
    let build = dh(&[
        "dataset", "build",
        "--photos", tmp.join("raw/photos").to_str().unwrap(),
        "--paintings", tmp.join("raw/paintings").to_str().unwrap(),
        "--out", tmp.join("data").to_str().unwrap(),
        "--seed", "4",
    ]);
    assert_eq!(build.status.code(), Some(0), "{}", stderr(&build));
    assert!(stdout(&build).contains("composites written"));
    let config = tmp.join("smoke.toml");
    fs::write(
        &config,
        "image_size = 128\nn = 2\nwidth = 0.125\nbatch_size = 2\niterations = 2\nseed = 3\n\
         manifest = \"data/manifest.jsonl\"\noutput_dir = \"run\"\n",
    )
    .unwrap();
    let mut args = vec!["train", "--config", config.to_str().unwrap()];
    if let Some(p) = preset {
        args.extend(["--preset", p]);
    }
    let train = dh(&args);
    assert_eq!(train.status.code(), Some(0), "{}", stderr(&train));
    assert!(stdout(&train).contains("final checkpoint"));
    tmp.join("run")
}

fn write_triple(dir: &Path, h: usize, w: usize) -> [PathBuf; 3] {
    let comp = ImageTensor::from_fn(h, w, |(y, x, c)| ((x * 3 + y * 5 + c * 7) % 23) as f64 / 23.0);
    let bg = ImageTensor::from_fn(h, w, |(y, x, c)| 0.5 + 0.4 * ((x + c) as f64 * 0.3).sin() * ((y as f64) * 0.2).cos());
    let mask = Array2::from_shape_fn((h, w), |(y, x)| if y > h / 4 && y < h / 2 && x > w / 3 && x < 2 * w / 3 { 1.0 } else { 0.0 });
    let paths = [dir.join("comp.png"), dir.join("bg.png"), dir.join("mask.png")];
    comp.save_png(&paths[0]).unwrap();
    bg.save_png(&paths[1]).unwrap();
    save_mask_png(&mask, &paths[2]).unwrap();
    paths
}

#[test]
fn train_then_harmonize_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let run = trained_run(tmp.path(), None);
    let checkpoint = run.join("final");
    assert!(checkpoint.join("meta.json").is_file());
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.contains("\"d_adv\":"));

    // Sides that are not multiples of 8 are padded and cropped back.
    let [comp, bg, mask] = write_triple(tmp.path(), 90, 100);
    let out_path = tmp.path().join("out.png");
    let soft_path = tmp.path().join("soft.png");
    let out = Command::new(env!("CARGO_BIN_EXE_dualharmony"))
        .args(["harmonize", "--composite", comp.to_str().unwrap(), "--mask", mask.to_str().unwrap()])
        .args(["--background", bg.to_str().unwrap(), "--out", out_path.to_str().unwrap()])
        .args(["--soft-mask-out", soft_path.to_str().unwrap(), "--size-check"])
        .env("DUALHARMONY_CHECKPOINT_DIR", &checkpoint)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let result = ImageTensor::load_png(&out_path).unwrap();
    assert_eq!((result.height(), result.width()), (90, 100));
    assert_eq!(gray(&soft_path).dimensions(), (100, 90));

    // Deterministic output bytes.
    let again = tmp.path().join("again.png");
    let out = dh(&[
        "harmonize", "--composite", comp.to_str().unwrap(), "--mask", mask.to_str().unwrap(),
        "--background", bg.to_str().unwrap(), "--out", again.to_str().unwrap(),
        "--checkpoint", checkpoint.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(fs::read(&out_path).unwrap(), fs::read(&again).unwrap());

    // A mask of the wrong size is an input error naming both sizes.
    let small = tmp.path().join("small_mask.png");
    save_mask_png(&Array2::zeros((10, 12)), &small).unwrap();
    let out = dh(&[
        "harmonize", "--composite", comp.to_str().unwrap(), "--mask", small.to_str().unwrap(),
        "--background", bg.to_str().unwrap(), "--out", again.to_str().unwrap(),
        "--checkpoint", checkpoint.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("12x10") && stderr(&out).contains("100x90"), "{}", stderr(&out));

    // No checkpoint anywhere.
    let out = dh(&[
        "harmonize", "--composite", comp.to_str().unwrap(), "--mask", mask.to_str().unwrap(),
        "--background", bg.to_str().unwrap(), "--out", again.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("DUALHARMONY_CHECKPOINT_DIR"));
}

#[test]
fn preset_flag_overrides_config_ablation() {
    let tmp = TempDir::new().unwrap();
    let run = trained_run(tmp.path(), Some("V1"));
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().all(|l| l.contains("\"d_adv\":null") && l.contains("\"updates\":[\"generator\"]")), "{metrics}");
}

#[test]
fn config_errors_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "image_size = 128\nn = 2\nbatchsize = 4\n").unwrap();
    let out = dh(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("batchsize") && err.contains("line 3"), "{err}");
}
