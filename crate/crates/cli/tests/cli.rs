use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hdrplus_cli::config::{parse_config, PipelineConfig, Settings};
use hdrplus_core::align::Norm;
use hdrplus_core::burst_io::{read_metadata, read_raw16, read_rgb8, save_burst};
use hdrplus_core::synthbench::{synthesize_burst, SynthSpec};

fn hdrplus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdrplus")).args(args).output().unwrap()
}

fn small_burst(dir: &Path) {
    let spec = SynthSpec {
        width: 256,
        height: 192,
        ..SynthSpec::default()
    }
    .with_frames(3);
    save_burst(&synthesize_burst(&spec).unwrap().burst, dir).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn defaults_match_the_tuned_parameter_set() {
    let cfg = parse_config(None, Settings::default()).unwrap();
    assert_eq!(cfg.merge.tau, 75.0);
    assert_eq!(cfg.merge.spatial_strength, 0.1);
    assert_eq!(cfg.merge.tile_size, 16);
    assert_eq!(cfg.align.tile_sizes, vec![8, 16, 16, 16]);
    assert_eq!(cfg.align.search_radii, vec![4; 4]);
    assert_eq!(cfg.align.norms, vec![Norm::L2, Norm::L2, Norm::L2, Norm::L1]);
    assert_eq!(cfg.finish.gain, 8.0);
    assert_eq!(cfg.finish.contrast_alpha, 0.08);
    assert_eq!(cfg, PipelineConfig::default());
}

#[test]
fn flags_override_file_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("cfg.toml");
    fs::write(&file, "tau = 10\ns = 0.3\nnorms = [1, 1, 2, 2]\n").unwrap();
    let flags = Settings {
        tau: Some(20.0),
        ..Default::default()
    };
    let cfg = parse_config(Some(&file), flags).unwrap();
    assert_eq!(cfg.merge.tau, 20.0);
    assert_eq!(cfg.merge.spatial_strength, 0.3);
    assert_eq!(cfg.align.norms, vec![Norm::L1, Norm::L1, Norm::L2, Norm::L2]);
    assert_eq!(cfg.finish.gain, 8.0);
}

#[test]
fn invalid_values_and_unknown_keys_are_rejected() {
    assert!(parse_config(
        None,
        Settings {
            tau: Some(-1.0),
            ..Default::default()
        }
    )
    .is_err());
    assert!(parse_config(
        None,
        Settings {
            s: Some(-0.1),
            ..Default::default()
        }
    )
    .is_err());
    assert!(parse_config(
        None,
        Settings {
            norms: Some(vec![2, 3, 2, 1]),
            ..Default::default()
        }
    )
    .is_err());
    assert!(parse_config(
        None,
        Settings {
            threads: Some(0),
            ..Default::default()
        }
    )
    .is_err());
    assert!(Settings::from_toml("tau = 5\ntua = 3\n").is_err());

    let out = hdrplus(&["merge", "nowhere", "--tau=-3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));
}

#[test]
fn log_resolves_to_the_same_config() {
    let flags = Settings {
        tau: Some(12.5),
        tile_size: Some(32),
        search_radius: Some(3),
        minimal: Some(true),
        threads: Some(2),
        ref_index: Some(1),
        ..Default::default()
    };
    let cfg = parse_config(None, flags).unwrap();
    let back = PipelineConfig::resolve(&Settings::from_toml(&cfg.to_toml()).unwrap()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn bad_arguments_exit_with_usage() {
    let out = hdrplus(&["full", "somewhere", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(hdrplus(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(hdrplus(&[]).status.code(), Some(2));
    assert_eq!(hdrplus(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_burst_is_a_pipeline_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hdrplus(&["full", s(&dir.path().join("absent")), "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("burst.json"));
}

#[test]
fn full_writes_outputs_log_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let burst = dir.path().join("burst");
    small_burst(&burst);
    let out = dir.path().join("out");
    let res = hdrplus(&[
        "full",
        s(&burst),
        "-o",
        s(&out),
        "--dump-intermediates",
        "--ref-index",
        "1",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let meta = read_metadata(out.join("burst.json")).unwrap();
    let merged = read_raw16(out.join("merged.pgm"), meta.cfa).unwrap();
    assert_eq!((merged.width(), merged.height()), (256, 192));
    let png = read_rgb8(out.join("final.png")).unwrap();
    assert_eq!((png.width, png.height), (256, 192));

    let log = fs::read_to_string(out.join("reproducibility.toml")).unwrap();
    assert!(log.contains("ref-index = 1") && log.contains("tau = 75"));
    for f in [
        "pyramid_frame1_level0.pgm",
        "pyramid_frame0_level3.pgm",
        "motion_frame0_level3.csv",
        "motion_frame2_level0.png",
    ] {
        assert!(out.join("intermediates").join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(out.join("intermediates/motion_frame2_level3.csv")).unwrap();
    assert!(csv.starts_with("tile_x,tile_y,u,v"));

    // re-running from the log alone reproduces the outputs
    let again = dir.path().join("again");
    fs::create_dir_all(&again).unwrap();
    fs::copy(out.join("reproducibility.toml"), again.join("run.toml")).unwrap();
    let res = hdrplus(&[
        "full",
        s(&burst),
        "-o",
        s(&again),
        "--config",
        s(&again.join("run.toml")),
    ]);
    assert!(res.status.success());
    for f in ["merged.pgm", "final.png"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn merge_then_finish_equals_full() {
    let dir = tempfile::tempdir().unwrap();
    let burst = dir.path().join("burst");
    small_burst(&burst);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(hdrplus(&["merge", s(&burst), "-o", s(&a), "--minimal"])
        .status
        .success());
    assert!(a.join("merged.pgm").is_file() && !a.join("final.png").exists());
    assert!(hdrplus(&["finish", s(&a.join("merged.pgm")), "-o", s(&a), "--minimal"])
        .status
        .success());
    assert!(hdrplus(&["full", s(&burst), "-o", s(&b), "--minimal"]).status.success());
    assert_eq!(
        fs::read(a.join("final.png")).unwrap(),
        fs::read(b.join("final.png")).unwrap()
    );
}

#[test]
fn synthbench_reports_key_values_and_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let res = hdrplus(&[
        "synthbench",
        "--n",
        "3",
        "--seed",
        "1",
        "--width",
        "256",
        "--height",
        "192",
        "--sweep",
        "--sweep-tau",
        "0,75",
        "--sweep-s",
        "0.1",
        "--sweep-n",
        "2,3",
        "-o",
        s(dir.path()),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report = fs::read_to_string(dir.path().join("synthbench.txt")).unwrap();
    let gain: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("gain_db="))
        .expect("gain_db line")
        .parse()
        .unwrap();
    assert!(gain > 0.0, "{report}");
    assert!(report.lines().all(|l| l.split_once('=').is_some()));
    let log = fs::read_to_string(dir.path().join("reproducibility.toml")).unwrap();
    assert!(log.contains("hdrplus synthbench --n 3 --seed 1 --width 256 --height 192 --config"), "{log}");
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(csv.starts_with("frames,tau,s,"));
}

#[test]
fn emitted_burst_loads_with_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let burst = dir.path().join("burst");
    let res = hdrplus(&[
        "synthbench",
        "--n",
        "2",
        "--width",
        "128",
        "--height",
        "96",
        "--emit-burst",
        s(&burst),
        "-o",
        s(dir.path()),
    ]);
    assert!(res.status.success());
    let loaded = hdrplus_core::burst_io::load_burst(&burst).unwrap();
    assert_eq!(loaded.len(), 2);
    assert!(burst.join("clean.pgm").is_file());
}
