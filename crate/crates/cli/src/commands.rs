use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sweepdemod::altmin::{self, SolverOptions};
use sweepdemod::config::{ConfigEntries, FromConfig, PriorSpec};
use sweepdemod::eval::{self, BaselineOptions, SubspaceMode, SubspaceSpec, SweepExperimentConfig};
use sweepdemod::forward::{self, SimConfig};
use sweepdemod::nalgebra::DMatrix;
use sweepdemod::persist;
use sweepdemod::subspace::{self, SweepSubspace};
use sweepdemod::wavelet::WaveletBank;
use sweepdemod::FrameStack;

use crate::outdir::StagedDir;
use crate::{Command, ConfigArgs, Normalize};

pub const TRUTH_META: &str = "truth.txt";
pub const TRUTH_REFLECTANCE: &str = "truth_reflectance.raw";
pub const TRUTH_LABELS: &str = "truth_labels.raw";
pub const TRUTH_LABELS_PGM: &str = "truth_labels.pgm";
pub const TRUE_DISTORTIONS: &str = "true_distortions.raw";

pub fn run(command: Command) -> Result<String> {
    match command {
        Command::Simulate { cfg, out } => simulate(&cfg, &out).context("simulate"),
        Command::Subspace {
            cfg,
            stack,
            subspace,
            out,
        } => export_subspaces(&cfg, &stack, &subspace, &out).context("subspace"),
        Command::Solve {
            cfg,
            stack,
            subspace,
            out,
        } => solve(&cfg, &stack, subspace.as_deref(), &out).context("solve"),
        Command::Baseline {
            cfg,
            stack,
            subspace,
            out,
        } => baseline(&cfg, &stack, subspace.as_deref(), &out).context("baseline"),
        Command::Eval { stack, result, out } => {
            evaluate(&stack, &result, out.as_deref()).context("eval")
        }
        Command::FramesSweep { cfg, subspace, out } => {
            sweep(&cfg, subspace.as_deref(), &out, SweepKind::Frames).context("frames-sweep")
        }
        Command::SnrSweep { cfg, subspace, out } => {
            sweep(&cfg, subspace.as_deref(), &out, SweepKind::Snr).context("snr-sweep")
        }
        Command::Render {
            stack,
            out,
            normalize,
        } => render(&stack, &out, normalize).context("render"),
    }
}

/// File entries with command-line overrides applied on top.
fn load_entries(args: &ConfigArgs, allowed: &[&[&str]]) -> Result<ConfigEntries> {
    let mut entries = match &args.config {
        Some(path) => ConfigEntries::from_path(path)?,
        None => ConfigEntries::default(),
    };
    for o in &args.overrides {
        entries.set_override(o)?;
    }
    let keys: Vec<&str> = allowed.iter().flat_map(|k| k.iter().copied()).collect();
    entries.reject_unknown(&keys)?;
    Ok(entries)
}

fn simulate(args: &ConfigArgs, out: &Path) -> Result<String> {
    let entries = load_entries(args, &[SimConfig::KEYS])?;
    let mut cfg = SimConfig::from_entries(&entries)?;
    if let Some(seed) = args.seed {
        cfg.rng_seed = seed;
    }
    let sim = forward::simulate_stack(&cfg)?;
    let stage = StagedDir::new(out)?;
    let dir = stage.path();
    let grid = &sim.truth.reflectance;
    let (w, h) = (grid.width, grid.height);
    persist::write_frame_stack(&sim.stack, dir)?;
    persist::write_raw_matrix(
        &dir.join(TRUTH_REFLECTANCE),
        w,
        h,
        &DMatrix::from_column_slice(w * h, 1, grid.values()),
    )?;
    let labels: Vec<f64> = sim.truth.labels.iter().map(|&l| f64::from(l)).collect();
    persist::write_raw_matrix(
        &dir.join(TRUTH_LABELS),
        w,
        h,
        &DMatrix::from_vec(w * h, 1, labels.clone()),
    )?;
    persist::write_pgm(&dir.join(TRUTH_LABELS_PGM), w, h, &labels)?;
    persist::write_raw_matrix(&dir.join(TRUE_DISTORTIONS), w, h, &sim.distortions)?;
    let (rho0, rho1) = class_levels(&sim.truth);
    let mut meta = format!(
        "rho0={rho0}\nrho1={rho1}\nforeground={}\nnoise_sigma_sq={}\nrng_seed={}\n",
        sim.truth.foreground_count(),
        sim.noise_sigma_sq(),
        cfg.rng_seed
    );
    for (j, v) in sim.noise_variances.iter().enumerate() {
        let _ = writeln!(meta, "noise_variance_{j}={v}");
    }
    persist::write_atomic(&dir.join(TRUTH_META), meta.as_bytes())?;
    let target = stage.commit()?;
    Ok(format!(
        "simulate: {w}x{h} pixels, {} frames, {} foreground pixels, noise variance {:.6e} -> {}",
        sim.stack.num_frames(),
        sim.truth.foreground_count(),
        sim.noise_sigma_sq(),
        target.display()
    ))
}

fn class_levels(truth: &forward::SlabPhantom) -> (f64, f64) {
    let v = truth.reflectance.values();
    let level = |class: u8| {
        truth
            .labels
            .iter()
            .position(|&l| l == class)
            .map(|i| v[i])
            .unwrap_or(f64::NAN)
    };
    (level(0), level(1))
}

fn read_truth_distortions(stack_dir: &Path, stack: &FrameStack) -> Result<DMatrix<f64>> {
    let path = stack_dir.join(TRUE_DISTORTIONS);
    if !path.exists() {
        bail!(
            "oracle subspaces need {} from a simulated stack",
            path.display()
        );
    }
    let (w, h, u) = persist::read_raw_matrix(&path)?;
    if (w, h, u.ncols()) != (stack.width, stack.height, stack.num_frames()) {
        bail!(
            "{} is {w}x{h}x{} but the stack is {}x{}x{}",
            path.display(),
            u.ncols(),
            stack.width,
            stack.height,
            stack.num_frames()
        );
    }
    Ok(u)
}

/// Subspaces named by `--subspace` (falling back to the config's
/// `subspace_mode`, then wavelets).
fn resolve_subspaces(
    entries: &ConfigEntries,
    flag: Option<&str>,
    stack_dir: &Path,
    stack: &FrameStack,
) -> Result<(Vec<SweepSubspace>, String)> {
    let mut spec = SubspaceSpec::from_entries(entries)?;
    let choice = match flag {
        Some(f) => f.to_string(),
        None => match entries.raw("subspace_mode") {
            Some((v, _)) if !v.is_empty() => v.to_string(),
            _ => "wavelet".to_string(),
        },
    };
    let m = stack.num_frames();
    match choice.as_str() {
        "wavelet" | "oracle" => {
            spec.mode = SubspaceMode::parse(&choice)?;
            let spaces = match spec.mode {
                SubspaceMode::Oracle => {
                    let u = read_truth_distortions(stack_dir, stack)?;
                    (0..m)
                        .map(|j| subspace::oracle_subspace(&u, j))
                        .collect::<sweepdemod::Result<Vec<_>>>()?
                }
                SubspaceMode::Wavelet => {
                    let bank = WaveletBank::new(spec.family);
                    bank.validate()?;
                    (0..m)
                        .map(|j| {
                            subspace::build_subspace(
                                &stack.frame_grid(j),
                                &bank,
                                spec.dim,
                                j,
                                spec.rule,
                            )
                        })
                        .collect::<sweepdemod::Result<Vec<_>>>()?
                }
            };
            Ok((spaces, choice))
        }
        path => {
            let dir = Path::new(path);
            let spaces = (0..m)
                .map(|j| subspace::read_subspace(dir, j))
                .collect::<sweepdemod::Result<Vec<_>>>()
                .with_context(|| format!("reading subspaces from {}", dir.display()))?;
            Ok((spaces, format!("files in {}", dir.display())))
        }
    }
}

fn export_subspaces(args: &ConfigArgs, stack_dir: &Path, mode: &str, out: &Path) -> Result<String> {
    if mode != "wavelet" && mode != "oracle" {
        bail!("--subspace must be wavelet or oracle, got {mode:?}");
    }
    let entries = load_entries(args, &[SubspaceSpec::KEYS])?;
    let stack = persist::read_frame_stack(stack_dir)?;
    let (spaces, label) = resolve_subspaces(&entries, Some(mode), stack_dir, &stack)?;
    let stage = StagedDir::new(out)?;
    for s in &spaces {
        subspace::write_subspace(s, stack.width, stack.height, stage.path())?;
    }
    let target = stage.commit()?;
    let dims: Vec<usize> = spaces.iter().map(SweepSubspace::dim).collect();
    Ok(format!(
        "subspace: {} {label} subspaces of dimension {} -> {}",
        spaces.len(),
        summarize_dims(&dims),
        target.display()
    ))
}

fn summarize_dims(dims: &[usize]) -> String {
    let min = dims.iter().min().copied().unwrap_or(0);
    let max = dims.iter().max().copied().unwrap_or(0);
    if min == max {
        min.to_string()
    } else {
        format!("{min}..{max}")
    }
}

fn write_image(dir: &Path, stem: &str, stack: &FrameStack, values: &[f64]) -> Result<()> {
    let (w, h) = (stack.width, stack.height);
    persist::write_raw_matrix(
        &dir.join(format!("{stem}.raw")),
        w,
        h,
        &DMatrix::from_column_slice(w * h, 1, values),
    )?;
    persist::write_pgm(&dir.join(format!("{stem}.pgm")), w, h, values)?;
    Ok(())
}

fn solve(args: &ConfigArgs, stack_dir: &Path, flag: Option<&str>, out: &Path) -> Result<String> {
    let entries = load_entries(
        args,
        &[PriorSpec::KEYS, SolverOptions::KEYS, SubspaceSpec::KEYS],
    )?;
    let prior_spec = PriorSpec::from_entries(&entries)?;
    let opts = SolverOptions::from_entries(&entries)?;
    let stack = persist::read_frame_stack(stack_dir)?;
    let prior = prior_spec.resolve(&stack)?;
    let (spaces, label) = resolve_subspaces(&entries, flag, stack_dir, &stack)?;
    let state = altmin::solve(&stack, &spaces, &prior, &opts)?;

    let stage = StagedDir::new(out)?;
    let dir = stage.path();
    write_image(dir, "rho", &stack, &state.rho)?;
    let labels: Vec<f64> = state.labels.iter().map(|&l| f64::from(l)).collect();
    write_image(dir, "labels", &stack, &labels)?;
    let u = FrameStack::with_pitch(
        stack.width,
        stack.height,
        stack.pixel_pitch_x,
        stack.pixel_pitch_y,
        state.distortions.clone(),
        stack.sample_times().map(<[f64]>::to_vec),
    )?;
    persist::write_frame_stack(&u, &dir.join("distortions"))?;
    persist::write_atomic(&dir.join("trace.csv"), altmin::trace_csv(&state).as_bytes())?;
    let objective = state.objective_trace.last().copied().unwrap_or(f64::NAN);
    let rank_deficient: Vec<String> = state.rank_deficient.iter().map(usize::to_string).collect();
    let report = format!(
        "iterations={}\nconverged={}\nobjective={objective:e}\nnoise_sigma_sq={:e}\nsubspaces={label}\nrank_deficient_frames={}\n",
        state.iteration,
        state.converged,
        prior.noise_sigma_sq,
        rank_deficient.join(",")
    );
    persist::write_atomic(&dir.join("solve.txt"), report.as_bytes())?;
    let target = stage.commit()?;
    let class1 = state.labels.iter().filter(|&&l| l == 1).count();
    Ok(format!(
        "solve: {} iterations ({}), objective {objective:.6e}, {class1} class-1 pixels -> {}",
        state.iteration,
        if state.converged {
            "converged"
        } else {
            "iteration limit"
        },
        target.display()
    ))
}

fn baseline(args: &ConfigArgs, stack_dir: &Path, flag: Option<&str>, out: &Path) -> Result<String> {
    let entries = load_entries(
        args,
        &[PriorSpec::KEYS, BaselineOptions::KEYS, SubspaceSpec::KEYS],
    )?;
    let prior = PriorSpec::from_entries(&entries)?;
    let mut opts = BaselineOptions::from_entries(&entries)?;
    if let Some(seed) = args.seed {
        opts.nuclear.seed = seed;
    }
    let stack = persist::read_frame_stack(stack_dir)?;
    let (spaces, _) = resolve_subspaces(&entries, flag, stack_dir, &stack)?;
    let result = eval::run_baseline(&stack, spaces, prior.rho0, prior.rho1, &opts)?;
    let sol = &result.solution;

    let stage = StagedDir::new(out)?;
    let dir = stage.path();
    write_image(dir, "rho", &stack, &result.rho)?;
    let labels: Vec<f64> = eval::round_labels(&result.rho, prior.rho0, prior.rho1)
        .into_iter()
        .map(f64::from)
        .collect();
    write_image(dir, "labels", &stack, &labels)?;
    persist::write_raw_matrix(&dir.join("x.raw"), stack.width, stack.height, &sol.x)?;
    write_image(dir, "beta", &stack, sol.beta.as_slice())?;
    let alpha: String = sol.alpha.iter().map(|a| format!("{a:e}\n")).collect();
    persist::write_atomic(&dir.join("alpha.txt"), alpha.as_bytes())?;
    let mut trace = String::from("iteration,stage,objective\n");
    for (k, (obj, stage_ix)) in sol.objective_trace.iter().zip(&sol.stage_of).enumerate() {
        let _ = writeln!(trace, "{},{stage_ix},{obj:e}", k + 1);
    }
    persist::write_atomic(&dir.join("trace.csv"), trace.as_bytes())?;
    let report = format!(
        "iterations={}\nlambda={:e}\nresidual={:e}\nnuclear_norm={:e}\nused_fallback={}\n",
        sol.iterations, result.lambda, sol.residual, sol.nuclear_norm, sol.used_fallback
    );
    persist::write_atomic(&dir.join("baseline.txt"), report.as_bytes())?;
    let target = stage.commit()?;
    Ok(format!(
        "baseline: {} iterations, lambda {:.3e}, residual {:.6e}, nuclear norm {:.6e}{} -> {}",
        sol.iterations,
        result.lambda,
        sol.residual,
        sol.nuclear_norm,
        if sol.used_fallback {
            ", singular-pair factors"
        } else {
            ""
        },
        target.display()
    ))
}

fn evaluate(stack_dir: &Path, result_dir: &Path, out: Option<&Path>) -> Result<String> {
    let meta = ConfigEntries::from_path(&stack_dir.join(TRUTH_META))?;
    let rho0: f64 = meta.require("rho0")?;
    let rho1: f64 = meta.require("rho1")?;
    let (w, h, truth) = persist::read_raw_matrix(&stack_dir.join(TRUTH_REFLECTANCE))?;
    let (_, _, labels) = persist::read_raw_matrix(&stack_dir.join(TRUTH_LABELS))?;
    let (rw, rh, rho) = persist::read_raw_matrix(&result_dir.join("rho.raw"))?;
    if (rw, rh) != (w, h) || rho.ncols() != 1 {
        bail!(
            "reconstruction is {rw}x{rh}x{} but the truth is {w}x{h}",
            rho.ncols()
        );
    }
    let truth = sweepdemod::ImageGrid::new(w, h, truth.as_slice().to_vec())?;
    let labels: Vec<u8> = labels.iter().map(|&l| u8::from(l > 0.5)).collect();
    let s = eval::score(rho.as_slice(), &truth, &labels, rho0, rho1)?;
    if let Some(path) = out {
        let csv = format!(
            "mse_raw,mse_rounded,misclassification\n{:e},{:e},{:e}\n",
            s.mse_raw, s.mse_rounded, s.misclassification
        );
        persist::write_atomic(path, csv.as_bytes())?;
    }
    Ok(format!(
        "eval: mse_raw {:.6e}, mse_rounded {:.6e}, misclassification {:.4}%",
        s.mse_raw,
        s.mse_rounded,
        100.0 * s.misclassification
    ))
}

#[derive(Clone, Copy)]
enum SweepKind {
    Frames,
    Snr,
}

fn sweep(args: &ConfigArgs, flag: Option<&str>, out: &Path, kind: SweepKind) -> Result<String> {
    let mut entries = load_entries(
        args,
        &[
            SimConfig::KEYS,
            SweepExperimentConfig::KEYS,
            PriorSpec::KEYS,
            SolverOptions::KEYS,
        ],
    )?;
    let sim = SimConfig::from_entries(&entries)?;
    // The prior's class means default to the phantom's.
    let (rho0, rho1) = class_levels(&sim.phantom);
    for (key, v) in [("rho0", rho0), ("rho1", rho1)] {
        if entries.raw(key).is_none() && v.is_finite() {
            entries.set(key, &v.to_string());
        }
    }
    let prior = PriorSpec::from_entries(&entries)?;
    let opts = SolverOptions::from_entries(&entries)?;
    let mut cfg = SweepExperimentConfig::from_entries(&entries)?;
    if let Some(mode) = flag {
        cfg.subspace.mode = SubspaceMode::parse(mode)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let (rows, name, point) = match kind {
        SweepKind::Frames => (
            eval::run_frames_sweep(&cfg, &sim, &prior, &opts)?,
            "frames-sweep",
            "M",
        ),
        SweepKind::Snr => (
            eval::run_snr_sweep(&cfg, &sim, &prior, &opts)?,
            "snr-sweep",
            "snr_db",
        ),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    persist::write_atomic(out, eval::sweep_csv(point, &rows).as_bytes())?;
    let failed: usize = rows.iter().map(|r| r.failed).sum();
    Ok(format!(
        "{name}: {} points x {} trials ({} mode, {failed} failed) -> {}",
        rows.len(),
        cfg.trials,
        cfg.subspace.mode.name(),
        out.display()
    ))
}

fn render(input: &Path, out: &Path, normalize: Normalize) -> Result<String> {
    let raw = if input.is_dir() {
        input.join(persist::RAW_FILE)
    } else {
        input.to_path_buf()
    };
    let (w, h, m) = persist::read_raw_matrix(&raw)?;
    let stage = StagedDir::new(out)?;
    let (global_scale, global_offset) = match normalize {
        Normalize::Global => {
            let (_, scale, offset) = persist::pgm_scale(m.as_slice());
            (scale, offset)
        }
        Normalize::Frame => (0.0, 0.0),
    };
    let mut meta = format!(
        "normalize={}\n",
        match normalize {
            Normalize::Frame => "frame",
            Normalize::Global => "global",
        }
    );
    for (j, col) in m.column_iter().enumerate() {
        let values: Vec<f64> = col.iter().copied().collect();
        let (pixels, scale, offset) = match normalize {
            Normalize::Frame => persist::pgm_scale(&values),
            Normalize::Global => (
                persist::quantize(&values, global_scale, global_offset),
                global_scale,
                global_offset,
            ),
        };
        persist::write_atomic(
            &stage.path().join(persist::frame_pgm_name(j)),
            &persist::encode_pgm(w, h, &pixels),
        )?;
        let _ = writeln!(meta, "scale_{j}={scale}\noffset_{j}={offset}");
    }
    persist::write_atomic(&stage.path().join("render.txt"), meta.as_bytes())?;
    let target = stage.commit()?;
    Ok(format!(
        "render: {} images of {w}x{h} -> {}",
        m.ncols(),
        target.display()
    ))
}
