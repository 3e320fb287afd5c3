use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sweepdemod"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 8] = [
    "--set",
    "width=32",
    "--set",
    "height=32",
    "--set",
    "num_frames=6",
    "--set",
    "snr_db=20",
];

fn simulate(dir: &Path, out: &str) {
    let mut args = vec!["simulate"];
    args.extend(SMALL);
    args.extend(["--out", out]);
    ok(dir, &args);
}

fn leftovers(dir: &Path) -> Vec<String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with('.'))
        .collect()
}

#[test]
fn simulate_solve_eval_pipeline() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "sim");
    for f in [
        "frames.raw",
        "meta.txt",
        "truth.txt",
        "true_distortions.raw",
        "frame_0000.pgm",
    ] {
        assert!(d.join("sim").join(f).is_file(), "missing {f}");
    }
    let summary = ok(
        d,
        &[
            "solve",
            "--stack",
            "sim",
            "--subspace",
            "oracle",
            "--set",
            "rho0=0.3",
            "--set",
            "rho1=0.1",
            "--out",
            "sol",
        ],
    );
    assert!(summary.starts_with("solve: "), "{summary}");
    for f in [
        "rho.raw",
        "rho.pgm",
        "labels.pgm",
        "trace.csv",
        "solve.txt",
        "distortions/frames.raw",
    ] {
        assert!(d.join("sol").join(f).is_file(), "missing {f}");
    }
    let trace = fs::read_to_string(d.join("sol/trace.csv")).unwrap();
    assert!(trace.lines().count() >= 2);

    let score = ok(
        d,
        &[
            "eval",
            "--stack",
            "sim",
            "--result",
            "sol",
            "--out",
            "score.csv",
        ],
    );
    assert!(score.contains("misclassification 0.0000%"), "{score}");
    let csv = fs::read_to_string(d.join("score.csv")).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("mse_raw,mse_rounded,misclassification")
    );
}

#[test]
fn exported_subspaces_feed_the_solver() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "sim");
    ok(
        d,
        &[
            "subspace",
            "--stack",
            "sim",
            "--set",
            "subspace_dim=12",
            "--out",
            "sub",
        ],
    );
    assert!(d.join("sub/subspace_0005.raw").is_file());
    ok(
        d,
        &[
            "solve",
            "--stack",
            "sim",
            "--subspace",
            "sub",
            "--set",
            "rho0=0.3",
            "--set",
            "rho1=0.1",
            "--out",
            "sol",
        ],
    );
    ok(d, &["eval", "--stack", "sim", "--result", "sol"]);
}

#[test]
fn baseline_and_render_write_images() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "sim");
    ok(
        d,
        &[
            "baseline",
            "--stack",
            "sim",
            "--subspace",
            "oracle",
            "--set",
            "rho0=0.3",
            "--set",
            "rho1=0.1",
            "--set",
            "iters=30",
            "--out",
            "bl",
        ],
    );
    for f in [
        "x.raw",
        "beta.raw",
        "alpha.txt",
        "rho.raw",
        "trace.csv",
        "baseline.txt",
    ] {
        assert!(d.join("bl").join(f).is_file(), "missing {f}");
    }
    let alpha = fs::read_to_string(d.join("bl/alpha.txt")).unwrap();
    assert_eq!(alpha.lines().count(), 6);

    ok(
        d,
        &[
            "render",
            "--stack",
            "sim",
            "--normalize",
            "global",
            "--out",
            "r",
        ],
    );
    assert_eq!(fs::read_dir(d.join("r")).unwrap().count(), 7);
    let first = fs::read(d.join("r/frame_0000.pgm")).unwrap();
    assert!(first.starts_with(b"P5\n32 32\n65535\n"));
}

#[test]
fn unknown_subcommand_and_keys_fail() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert!(!run_in(d, &["demodulate"]).status.success());
    let out = run_in(d, &["simulate", "--set", "widht=8", "--out", "sim"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("widht"));
    let out = run_in(d, &["simulate", "--workers", "0", "--out", "sim"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn overrides_beat_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("sim.cfg"),
        "width = 16\nheight = 16\nnum_frames = 3\n",
    )
    .unwrap();
    ok(
        d,
        &[
            "simulate",
            "--config",
            "sim.cfg",
            "--set",
            "num_frames=4",
            "--out",
            "sim",
        ],
    );
    let meta = fs::read_to_string(d.join("sim/meta.txt")).unwrap();
    assert!(meta.contains("16"), "{meta}");
    assert!(d.join("sim/frame_0003.pgm").is_file());
    assert!(!d.join("sim/frame_0004.pgm").exists());
}

#[test]
fn seed_flag_changes_the_noise() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    for (out, seed) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let mut args = vec!["simulate"];
        args.extend(SMALL);
        args.extend(["--seed", seed, "--out", out]);
        ok(d, &args);
    }
    let read = |n: &str| fs::read(d.join(n).join("frames.raw")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn sweeps_are_reproducible() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("sweep.cfg"),
        "width = 24\nheight = 24\nframe_counts = 3, 4\ntrials = 2\npool_frames = 6\nsnr_values = 5, 10\nfixed_frames = 4\n",
    )
    .unwrap();
    for kind in ["frames-sweep", "snr-sweep"] {
        ok(d, &[kind, "--config", "sweep.cfg", "--out", "out/a.csv"]);
        ok(d, &[kind, "--config", "sweep.cfg", "--out", "out/b.csv"]);
        let a = fs::read(d.join("out/a.csv")).unwrap();
        assert_eq!(a, fs::read(d.join("out/b.csv")).unwrap(), "{kind}");
        assert_eq!(String::from_utf8_lossy(&a).lines().count(), 3);
        ok(
            d,
            &[
                kind,
                "--config",
                "sweep.cfg",
                "--seed",
                "9",
                "--out",
                "out/c.csv",
            ],
        );
        assert_ne!(a, fs::read(d.join("out/c.csv")).unwrap(), "{kind}");
    }
}

#[test]
fn failures_leave_no_partial_output() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, "sim");
    fs::create_dir(d.join("sol")).unwrap();
    fs::write(d.join("sol/keep.txt"), "old").unwrap();
    let out = run_in(
        d,
        &[
            "solve",
            "--stack",
            "sim",
            "--subspace",
            "missing",
            "--set",
            "rho0=0.3",
            "--set",
            "rho1=0.1",
            "--out",
            "sol",
        ],
    );
    assert!(!out.status.success());
    assert_eq!(fs::read_to_string(d.join("sol/keep.txt")).unwrap(), "old");

    let out = run_in(d, &["render", "--stack", "nowhere.raw", "--out", "r"]);
    assert!(!out.status.success());
    assert!(!d.join("r").exists());
    assert!(leftovers(d).is_empty(), "{:?}", leftovers(d));

    // Oracle subspaces need truth files, so a copied stack without them fails.
    fs::create_dir(d.join("bare")).unwrap();
    for entry in fs::read_dir(d.join("sim")).unwrap() {
        let name = entry.unwrap().file_name().to_string_lossy().into_owned();
        if name == "meta.txt" || name.starts_with("frame") {
            fs::copy(d.join("sim").join(&name), d.join("bare").join(&name)).unwrap();
        }
    }
    let out = run_in(
        d,
        &[
            "solve",
            "--stack",
            "bare",
            "--subspace",
            "oracle",
            "--set",
            "rho0=0.3",
            "--set",
            "rho1=0.1",
            "--out",
            "x",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("true_distortions.raw"));
    assert!(!d.join("x").exists());
    assert!(leftovers(d).is_empty());
}
