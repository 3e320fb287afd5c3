//! Reconstruction metrics and the MSE-versus-frames / MSE-versus-SNR
//! experiments.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::altmin::{self, SolverOptions};
use crate::config::{ConfigEntries, FromConfig, PriorSpec};
use crate::error::{Error, Result};
use crate::forward::{self, SimConfig, Simulation, Snr};
use crate::lowrank::{self, MeasurementOperator, NuclearOptions};
use crate::subspace::{self, SelectionRule, SweepSubspace};
use crate::types::{ImageGrid, PriorConfig};
use crate::wavelet::{Family, WaveletBank};

/// Mean squared difference of two equally sized images.
pub fn mse(estimate: &ImageGrid, reference: &ImageGrid) -> Result<f64> {
    if !estimate.same_shape(reference) {
        return Err(Error::Contract(format!(
            "cannot compare {}x{} with {}x{}",
            estimate.width, estimate.height, reference.width, reference.height
        )));
    }
    mse_values(estimate.values(), reference.values())
}

pub fn mse_values(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() || estimate.is_empty() {
        return Err(Error::Contract(format!(
            "cannot compare {} values with {}",
            estimate.len(),
            reference.len()
        )));
    }
    let sum: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / estimate.len() as f64)
}

/// Class of the nearer level; the exact midpoint goes to class 0.
pub fn nearest_class(value: f64, rho0: f64, rho1: f64) -> u8 {
    if (value - rho1).abs() < (value - rho0).abs() {
        1
    } else {
        0
    }
}

pub fn round_labels(values: &[f64], rho0: f64, rho1: f64) -> Vec<u8> {
    values
        .iter()
        .map(|&v| nearest_class(v, rho0, rho1))
        .collect()
}

/// Snap every pixel to the nearer of `rho0` and `rho1` (ties to `rho0`).
pub fn binary_round(estimate: &ImageGrid, rho0: f64, rho1: f64) -> ImageGrid {
    let values = estimate
        .values()
        .iter()
        .map(|&v| {
            if nearest_class(v, rho0, rho1) == 1 {
                rho1
            } else {
                rho0
            }
        })
        .collect();
    estimate
        .with_values(values)
        .expect("levels are finite and the shape is unchanged")
}

/// Fraction of pixels whose labels differ.
pub fn misclassification_rate(estimate: &[u8], truth: &[u8]) -> Result<f64> {
    if estimate.len() != truth.len() || truth.is_empty() {
        return Err(Error::Contract(format!(
            "label maps differ in size: {} vs {}",
            estimate.len(),
            truth.len()
        )));
    }
    let wrong = estimate.iter().zip(truth).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / truth.len() as f64)
}

/// Scale `c` minimizing `sum_i min_C (c v_i - rho^C)^2`, used to put a
/// reconstruction known only up to a multiplicative constant on the prior's
/// levels. For fixed `c` the inner minimum is a threshold labeling in `v`,
/// so scanning every split of the sorted values finds the global optimum.
pub fn fit_two_level_scale(values: &[f64], rho0: f64, rho1: f64) -> Result<f64> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("scale fit needs finite values".into()));
    }
    let (hi, lo) = if rho0 >= rho1 {
        (rho0, rho1)
    } else {
        (rho1, rho0)
    };
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    // Prefix sums over the sorted values: the lowest k take `lo`.
    let mut pre_v = vec![0.0; n + 1];
    let mut pre_v2 = vec![0.0; n + 1];
    for (k, x) in v.iter().enumerate() {
        pre_v[k + 1] = pre_v[k] + x;
        pre_v2[k + 1] = pre_v2[k] + x * x;
    }
    let total_v2 = pre_v2[n];
    if total_v2 == 0.0 {
        return Err(Error::Domain("cannot scale an all-zero image".into()));
    }
    let mut best = (f64::INFINITY, 1.0);
    for k in 0..=n {
        let lo_sum = pre_v[k];
        let hi_sum = pre_v[n] - pre_v[k];
        let cross = lo * lo_sum + hi * hi_sum;
        let c = cross / total_v2;
        let levels_sq = lo * lo * k as f64 + hi * hi * (n - k) as f64;
        let cost = levels_sq - cross * cross / total_v2;
        if c > 0.0 && cost < best.0 {
            best = (cost, c);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::Domain("no positive scale fits the image".into()));
    }
    Ok(best.1)
}

/// Raw and binary-rounded errors of a reconstruction against the phantom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub mse_raw: f64,
    pub mse_rounded: f64,
    pub misclassification: f64,
}

pub fn score(
    rho: &[f64],
    truth: &ImageGrid,
    labels: &[u8],
    rho0: f64,
    rho1: f64,
) -> Result<Scores> {
    let estimate = truth.with_values(rho.to_vec())?;
    let rounded = binary_round(&estimate, rho0, rho1);
    Ok(Scores {
        mse_raw: mse(&estimate, truth)?,
        mse_rounded: mse(&rounded, truth)?,
        misclassification: misclassification_rate(&round_labels(rho, rho0, rho1), labels)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubspaceMode {
    Oracle,
    Wavelet,
}

impl SubspaceMode {
    pub fn name(self) -> &'static str {
        match self {
            SubspaceMode::Oracle => "oracle",
            SubspaceMode::Wavelet => "wavelet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(SubspaceMode::Oracle),
            "wavelet" => Ok(SubspaceMode::Wavelet),
            other => Err(Error::Domain(format!(
                "unknown subspace mode {other:?}; expected oracle or wavelet"
            ))),
        }
    }
}

/// How the per-frame distortion subspaces are obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceSpec {
    pub mode: SubspaceMode,
    pub dim: usize,
    pub family: Family,
    pub rule: SelectionRule,
}

impl SubspaceSpec {
    pub fn oracle() -> Self {
        Self {
            mode: SubspaceMode::Oracle,
            ..Self::wavelet(100)
        }
    }

    pub fn wavelet(dim: usize) -> Self {
        Self {
            mode: SubspaceMode::Wavelet,
            dim,
            family: Family::Symlet4,
            rule: SelectionRule::default(),
        }
    }

    /// Subspaces for every frame of `sim`: spans of the true distortions,
    /// or top wavelet atoms of the observed frames.
    pub fn build(&self, sim: &Simulation) -> Result<Vec<SweepSubspace>> {
        let m = sim.stack.num_frames();
        match self.mode {
            SubspaceMode::Oracle => (0..m)
                .map(|j| subspace::oracle_subspace(&sim.distortions, j))
                .collect(),
            SubspaceMode::Wavelet => {
                let bank = WaveletBank::new(self.family);
                (0..m)
                    .into_par_iter()
                    .map(|j| {
                        subspace::build_subspace(
                            &sim.stack.frame_grid(j),
                            &bank,
                            self.dim,
                            j,
                            self.rule,
                        )
                    })
                    .collect()
            }
        }
    }
}

impl FromConfig for SubspaceSpec {
    const KEYS: &'static [&'static str] =
        &["subspace_mode", "subspace_dim", "wavelet", "force_scaling"];

    fn from_entries(e: &ConfigEntries) -> Result<Self> {
        let d = Self::oracle();
        let mode = match e.raw("subspace_mode") {
            Some((v, _)) if !v.is_empty() => {
                SubspaceMode::parse(v).map_err(|err| e.invalid("subspace_mode", err.to_string()))?
            }
            _ => d.mode,
        };
        let family = match e.raw("wavelet") {
            Some((v, _)) if !v.is_empty() => {
                Family::parse(v).map_err(|err| e.invalid("wavelet", err.to_string()))?
            }
            _ => d.family,
        };
        let dim = e.get_or("subspace_dim", d.dim)?;
        if dim < 1 {
            return Err(e.invalid("subspace_dim", "must be at least 1"));
        }
        Ok(Self {
            mode,
            dim,
            family,
            rule: SelectionRule {
                force_scaling: e.get_bool("force_scaling")?.unwrap_or(false),
            },
        })
    }
}

/// Noise level handed to the solver: the configured value, else the
/// simulator's known variance, floored for noiseless data.
pub fn solver_prior(spec: &PriorSpec, sim: &Simulation) -> Result<PriorConfig> {
    let known = sim.noise_sigma_sq();
    let sigma_sq = match spec.noise_sigma_sq {
        Some(v) => v,
        None if known > 0.0 => known,
        None => NOISELESS_VARIANCE_FLOOR * mean_square(sim.stack.frames().as_slice()),
    };
    spec.with_noise(sigma_sq)
}

/// Relative noise floor (against the mean squared observation) used when
/// the data carry no noise.
pub const NOISELESS_VARIANCE_FLOOR: f64 = 1e-6;

fn mean_square(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub scores: Option<Scores>,
    pub iterations: usize,
    pub converged: bool,
    /// Failure description for trials whose solve did not complete.
    pub failure: Option<String>,
}

/// Build subspaces, solve, and score one simulated stack.
pub fn run_trial(
    sim: &Simulation,
    subspaces: &SubspaceSpec,
    prior: &PriorSpec,
    opts: &SolverOptions,
) -> TrialOutcome {
    let attempt = || -> Result<(Scores, usize, bool)> {
        let spaces = subspaces.build(sim)?;
        let p = solver_prior(prior, sim)?;
        let state = altmin::solve(&sim.stack, &spaces, &p, opts)?;
        let s = score(
            &state.rho,
            &sim.truth.reflectance,
            &sim.truth.labels,
            p.rho0,
            p.rho1,
        )?;
        Ok((s, state.iteration, state.converged))
    };
    match attempt() {
        Ok((s, iterations, converged)) => TrialOutcome {
            scores: Some(s),
            iterations,
            converged,
            failure: None,
        },
        Err(e) => TrialOutcome {
            scores: None,
            iterations: 0,
            converged: false,
            failure: Some(e.to_string()),
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepExperimentConfig {
    pub frame_counts: Vec<usize>,
    pub snr_values: Vec<f64>,
    pub trials: usize,
    pub subspace: SubspaceSpec,
    pub seed: u64,
    /// Frames simulated per trial in the frames sweep.
    pub pool_frames: usize,
    /// Frames per stack in the SNR sweep.
    pub fixed_frames: usize,
}

impl Default for SweepExperimentConfig {
    fn default() -> Self {
        Self {
            frame_counts: (3..=20).collect(),
            snr_values: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0],
            trials: 10,
            subspace: SubspaceSpec::oracle(),
            seed: 0,
            pool_frames: 20,
            fixed_frames: 10,
        }
    }
}

impl SweepExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::Contract("trials must be at least 1".into()));
        }
        if self.pool_frames < 1 || self.fixed_frames < 1 {
            return Err(Error::Contract("frame pools must be non-empty".into()));
        }
        if let Some(&m) = self
            .frame_counts
            .iter()
            .find(|&&m| m < 1 || m > self.pool_frames)
        {
            return Err(Error::Contract(format!(
                "frame count {m} outside [1, {}]",
                self.pool_frames
            )));
        }
        if self.subspace.dim < 1 {
            return Err(Error::Contract("subspace_dim must be at least 1".into()));
        }
        Ok(())
    }
}

impl FromConfig for SweepExperimentConfig {
    const KEYS: &'static [&'static str] = &[
        "frame_counts",
        "snr_values",
        "trials",
        "subspace_mode",
        "subspace_dim",
        "wavelet",
        "force_scaling",
        "seed",
        "pool_frames",
        "fixed_frames",
    ];

    fn from_entries(e: &ConfigEntries) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            frame_counts: e.get_list("frame_counts")?.unwrap_or(d.frame_counts),
            snr_values: e.get_list("snr_values")?.unwrap_or(d.snr_values),
            trials: e.get_or("trials", d.trials)?,
            subspace: SubspaceSpec::from_entries(e)?,
            seed: e.get_or("seed", d.seed)?,
            pool_frames: e.get_or("pool_frames", d.pool_frames)?,
            fixed_frames: e.get_or("fixed_frames", d.fixed_frames)?,
        };
        if cfg.snr_values.iter().any(|v: &f64| !v.is_finite()) {
            return Err(e.invalid("snr_values", "values must be finite"));
        }
        cfg.validate().map_err(|err| {
            let key = match &err {
                Error::Contract(m) if m.starts_with("trials") => "trials",
                Error::Contract(m) if m.starts_with("frame count") => "frame_counts",
                _ => "pool_frames",
            };
            e.invalid(key, err.to_string())
        })?;
        Ok(cfg)
    }
}

/// Deterministic per-trial seed, independent of scheduling order.
pub fn trial_seed(base: u64, point: usize, trial: usize) -> u64 {
    let mut z = base
        .wrapping_add((point as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add((trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` distinct frame indices out of `pool`, sorted.
pub fn sample_frames(pool: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 || count > pool {
        return Err(Error::Contract(format!(
            "cannot draw {count} of {pool} frames"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, pool, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Averages over the trials of one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Number of frames (frames sweep) or SNR in dB (SNR sweep).
    pub point: f64,
    pub mode: SubspaceMode,
    pub mse_raw: f64,
    pub mse_rounded: f64,
    pub misclassification: f64,
    pub trials: usize,
    /// Trials whose rounded reconstruction matched the phantom exactly.
    pub perfect: usize,
    pub failed: usize,
    pub outcomes: Vec<TrialOutcome>,
}

fn aggregate(point: f64, mode: SubspaceMode, outcomes: Vec<TrialOutcome>) -> SweepRow {
    let ok: Vec<Scores> = outcomes.iter().filter_map(|o| o.scores).collect();
    let mean = |f: fn(&Scores) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(f).sum::<f64>() / ok.len() as f64
        }
    };
    SweepRow {
        point,
        mode,
        mse_raw: mean(|s| s.mse_raw),
        mse_rounded: mean(|s| s.mse_rounded),
        misclassification: mean(|s| s.misclassification),
        trials: outcomes.len(),
        perfect: ok.iter().filter(|s| s.mse_rounded == 0.0).count(),
        failed: outcomes.len() - ok.len(),
        outcomes,
    }
}

fn window(sim: &SimConfig) -> (f64, f64) {
    let t = &sim.sample_times;
    (t[0], t[t.len() - 1])
}

/// MSE against the number of frames: per trial a fresh noisy stack of
/// `pool_frames` uniform samples, from which `M` frames are drawn at random.
pub fn run_frames_sweep(
    cfg: &SweepExperimentConfig,
    sim: &SimConfig,
    prior: &PriorSpec,
    opts: &SolverOptions,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    sim.validate()?;
    let (start, end) = window(sim);
    let mut base = sim.clone();
    base.sample_times = forward::uniform_samples(start, end, cfg.pool_frames);
    cfg.frame_counts
        .iter()
        .enumerate()
        .map(|(point, &m)| {
            let outcomes = (0..cfg.trials)
                .into_par_iter()
                .map(|trial| {
                    let seed = trial_seed(cfg.seed, point, trial);
                    let mut trial_sim = base.clone();
                    trial_sim.rng_seed = seed;
                    let run = || -> Result<Simulation> {
                        let frames = sample_frames(cfg.pool_frames, m, seed.rotate_left(17))?;
                        forward::simulate_stack(&trial_sim)?.select(&frames)
                    };
                    match run() {
                        Ok(s) => run_trial(&s, &cfg.subspace, prior, opts),
                        Err(e) => failed(e),
                    }
                })
                .collect();
            Ok(aggregate(m as f64, cfg.subspace.mode, outcomes))
        })
        .collect()
}

/// MSE against SNR with `fixed_frames` uniform samples and fresh noise per
/// trial.
pub fn run_snr_sweep(
    cfg: &SweepExperimentConfig,
    sim: &SimConfig,
    prior: &PriorSpec,
    opts: &SolverOptions,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    sim.validate()?;
    let (start, end) = window(sim);
    let mut base = sim.clone();
    base.sample_times = forward::uniform_samples(start, end, cfg.fixed_frames);
    cfg.snr_values
        .iter()
        .enumerate()
        .map(|(point, &snr)| {
            let outcomes = (0..cfg.trials)
                .into_par_iter()
                .map(|trial| {
                    let mut trial_sim = base.clone();
                    trial_sim.snr = Snr::Db(snr);
                    trial_sim.rng_seed = trial_seed(cfg.seed, point, trial);
                    match forward::simulate_stack(&trial_sim) {
                        Ok(s) => run_trial(&s, &cfg.subspace, prior, opts),
                        Err(e) => failed(e),
                    }
                })
                .collect();
            Ok(aggregate(snr, cfg.subspace.mode, outcomes))
        })
        .collect()
}

fn failed(e: Error) -> TrialOutcome {
    TrialOutcome {
        scores: None,
        iterations: 0,
        converged: false,
        failure: Some(e.to_string()),
    }
}

/// CSV with header `<point_name>,subspace_mode,mse_raw,mse_rounded,trials,
/// misclassification,perfect_trials,failed_trials`.
pub fn sweep_csv(point_name: &str, rows: &[SweepRow]) -> String {
    let mut out = format!(
        "{point_name},subspace_mode,mse_raw,mse_rounded,trials,misclassification,perfect_trials,failed_trials\n"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{},{:e},{},{}",
            r.point,
            r.mode.name(),
            r.mse_raw,
            r.mse_rounded,
            r.trials,
            r.misclassification,
            r.perfect,
            r.failed
        );
    }
    out
}

/// Settings of the nuclear-norm comparison run.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOptions {
    /// Final `lambda` as a fraction of `||A*(Y)||_op`.
    pub lambda_rel: f64,
    pub nuclear: NuclearOptions,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            lambda_rel: 0.1,
            nuclear: NuclearOptions::default(),
        }
    }
}

impl FromConfig for BaselineOptions {
    const KEYS: &'static [&'static str] = &[
        "lambda_rel",
        "iters",
        "continuation_steps",
        "continuation_factor",
        "power_iters",
        "seed",
    ];

    fn from_entries(e: &ConfigEntries) -> Result<Self> {
        let d = Self::default();
        let opts = Self {
            lambda_rel: e.get_f64("lambda_rel")?.unwrap_or(d.lambda_rel),
            nuclear: NuclearOptions {
                iters: e.get_or("iters", d.nuclear.iters)?,
                continuation_steps: e.get_or("continuation_steps", d.nuclear.continuation_steps)?,
                continuation_factor: e
                    .get_f64("continuation_factor")?
                    .unwrap_or(d.nuclear.continuation_factor),
                power_iters: e.get_or("power_iters", d.nuclear.power_iters)?,
                seed: e.get_or("seed", d.nuclear.seed)?,
                ..d.nuclear
            },
        };
        if !(opts.lambda_rel > 0.0) {
            return Err(e.invalid("lambda_rel", "must be positive"));
        }
        if !(opts.nuclear.continuation_factor > 0.0 && opts.nuclear.continuation_factor <= 1.0) {
            return Err(e.invalid("continuation_factor", "must lie in (0, 1]"));
        }
        if opts.nuclear.iters < 1 {
            return Err(e.invalid("iters", "must be at least 1"));
        }
        Ok(opts)
    }
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub solution: lowrank::LiftedSolution,
    pub lambda: f64,
    /// `beta` rescaled onto the prior's two levels.
    pub rho: Vec<f64>,
}

/// Nuclear-norm reconstruction with `Q = I`, scaled to the class levels.
pub fn run_baseline(
    stack: &crate::types::FrameStack,
    subspaces: Vec<SweepSubspace>,
    rho0: f64,
    rho1: f64,
    opts: &BaselineOptions,
) -> Result<BaselineResult> {
    let op = MeasurementOperator::new(subspaces, None)?;
    let lambda = opts.lambda_rel * lowrank::adjoint_spectral_norm(&op, stack, opts.nuclear.seed)?;
    let solution = lowrank::solve_nuclear(stack, &op, lambda, &opts.nuclear)?;
    let mut beta: Vec<f64> = solution.beta.iter().copied().collect();
    if beta.iter().sum::<f64>() < 0.0 {
        beta.iter_mut().for_each(|b| *b = -*b);
    }
    let rho = if beta.iter().all(|&b| b == 0.0) {
        beta
    } else {
        let c = fit_two_level_scale(&beta, rho0, rho1)?;
        beta.iter().map(|b| c * b).collect()
    };
    Ok(BaselineResult {
        solution,
        lambda,
        rho,
    })
}
