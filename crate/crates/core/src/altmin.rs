//! Alternating MAP demodulation.
//!
//! Each iteration first fits every frame's distortion coefficients by least
//! squares with the image held fixed, then re-estimates every pixel's
//! reflectance and class in closed form with the distortions held fixed.
//! Both half-steps minimize the same separable objective
//!
//! ```text
//! J = sum_i  log(sigma_C / p_C) + (rho_i - rho^C)^2 / (2 sigma_C^2)
//!          + sum_j (y_ji - rho_i u_ji)^2 / (2 sigma^2)
//! ```
//!
//! so `J` never increases from one iteration to the next.

use nalgebra::{DMatrix, DVector, DVectorView};
use rayon::prelude::*;

use crate::config::{ConfigEntries, FromConfig};
use crate::error::{Error, Result};
use crate::subspace::SweepSubspace;
use crate::types::{FrameStack, PriorConfig};
use crate::wavelet::{self, Orientation, WaveletBank};

/// Normal-consistency factor of the median absolute deviation.
pub const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub rho_floor: f64,
    pub exact_truncation_constants: bool,
    /// Warm start; `None` starts from the all-ones image.
    pub init: Option<Vec<f64>>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rel_tol: 1e-6,
            rho_floor: 1e-8,
            exact_truncation_constants: false,
            init: None,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Contract("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Contract("rel_tol must be positive".into()));
        }
        if !(self.rho_floor >= 0.0) {
            return Err(Error::Contract("rho_floor must be non-negative".into()));
        }
        Ok(())
    }
}

impl FromConfig for SolverOptions {
    const KEYS: &'static [&'static str] = &[
        "max_iters",
        "rel_tol",
        "rho_floor",
        "exact_truncation_constants",
    ];

    fn from_entries(e: &ConfigEntries) -> Result<Self> {
        let d = Self::default();
        let opts = Self {
            max_iters: e.get_or("max_iters", d.max_iters)?,
            rel_tol: e.get_f64("rel_tol")?.unwrap_or(d.rel_tol),
            rho_floor: e.get_f64("rho_floor")?.unwrap_or(d.rho_floor),
            exact_truncation_constants: e
                .get_bool("exact_truncation_constants")?
                .unwrap_or(d.exact_truncation_constants),
            init: None,
        };
        if opts.max_iters < 1 {
            return Err(e.invalid("max_iters", "must be at least 1"));
        }
        if !(opts.rel_tol > 0.0) {
            return Err(e.invalid("rel_tol", "must be positive"));
        }
        if !(opts.rho_floor >= 0.0) {
            return Err(e.invalid("rho_floor", "must be non-negative"));
        }
        Ok(opts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub rho: Vec<f64>,
    pub labels: Vec<u8>,
    pub alphas: Vec<DVector<f64>>,
    /// `P x M`, column `j` equals `S^j alpha_j`.
    pub distortions: DMatrix<f64>,
    pub iteration: usize,
    pub objective_trace: Vec<f64>,
    pub rel_changes: Vec<f64>,
    pub converged: bool,
    /// Frames whose last least-squares solve was rank deficient.
    pub rank_deficient: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepFit {
    pub alpha: DVector<f64>,
    pub rank_deficient: bool,
}

/// Largest pixel-weight ratio for which the sweep fit solves the normal
/// equations instead of factoring `diag(rho) S`.
pub const GRAM_CONDITION_LIMIT: f64 = 1e3;

/// Least-squares coefficients of `y ~ diag(rho) S alpha`, minimum-norm when
/// `diag(rho) S` loses rank. The diagonal is clamped to `rho_floor` from
/// below so zero pixels do not collapse the system.
pub fn sweep_update(
    y: DVectorView<'_, f64>,
    rho: &[f64],
    subspace: &SweepSubspace,
    rho_floor: f64,
) -> Result<SweepFit> {
    let s = subspace.basis();
    let (p, n) = s.shape();
    if y.len() != p || rho.len() != p {
        return Err(Error::Contract(format!(
            "frame has {} pixels, image {}, subspace {p}",
            y.len(),
            rho.len()
        )));
    }
    let mut a = s.clone();
    let (mut dmin, mut dmax) = (f64::INFINITY, 0.0f64);
    for (mut row, &r) in a.row_iter_mut().zip(rho) {
        let d = r.max(rho_floor);
        dmin = dmin.min(d.abs());
        dmax = dmax.max(d.abs());
        row *= d;
    }
    // With orthonormal S, cond(A) <= dmax / dmin.
    if n <= p && dmin > 0.0 && dmax <= GRAM_CONDITION_LIMIT * dmin {
        let at = a.transpose();
        let gram = &at * &a;
        if let Some(chol) = gram.cholesky() {
            return Ok(SweepFit {
                alpha: chol.solve(&(&at * y)),
                rank_deficient: false,
            });
        }
    }
    // A = QR, so A^+ y = R^+ Q^T y.
    let qr = a.qr();
    let mut qty = y.clone_owned();
    qr.q_tr_mul(&mut qty);
    let k = n.min(p);
    let r = qr.r();
    let rhs = qty.rows(0, k).into_owned();
    let svd = r.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (p.max(n) as f64) * f64::EPSILON;
    let rank_deficient = svd.singular_values.iter().any(|&sv| sv <= tol);
    let alpha = svd
        .solve(&rhs, tol)
        .map_err(|e| Error::Contract(format!("least-squares solve failed: {e}")))?;
    Ok(SweepFit {
        alpha,
        rank_deficient,
    })
}

/// Minimizer over `rho >= 0` of the per-pixel cost for a fixed class.
pub fn map_pixel_update(y_row: &[f64], u_row: &[f64], prior: &PriorConfig, class: u8) -> f64 {
    let (mut yu, mut uu) = (0.0, 0.0);
    for (&y, &u) in y_row.iter().zip(u_row) {
        yu += y * u;
        uu += u * u;
    }
    let noise = prior.noise_sigma_sq;
    let var = prior.variance(class);
    ((noise * prior.mean(class) + var * yu) / (noise + var * uu)).max(0.0)
}

/// Class-dependent part of the truncated-normal normalizer:
/// `log Phi(rho^C / sigma_C)`, the probability mass the untruncated normal
/// puts on the positive half-line.
pub fn truncation_log_mass(prior: &PriorConfig, class: u8) -> f64 {
    let z = prior.mean(class) / prior.variance(class).sqrt();
    (0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)).ln()
}

/// Per-pixel negative log posterior (up to a class-independent constant).
/// Negative reflectance is infeasible and costs `+inf`.
pub fn pixel_cost(
    rho_i: f64,
    class: u8,
    y_row: &[f64],
    u_row: &[f64],
    prior: &PriorConfig,
    exact_truncation: bool,
) -> f64 {
    if rho_i < 0.0 {
        return f64::INFINITY;
    }
    let var = prior.variance(class);
    let mut cost = (var.sqrt() / prior.probability(class)).ln()
        + (rho_i - prior.mean(class)).powi(2) / (2.0 * var);
    if exact_truncation {
        cost += truncation_log_mass(prior, class);
    }
    let data: f64 = y_row
        .iter()
        .zip(u_row)
        .map(|(&y, &u)| (y - rho_i * u).powi(2))
        .sum();
    cost + data / (2.0 * prior.noise_sigma_sq)
}

/// Pick the cheaper class; ties go to class 0.
pub fn classify_pixel(w0: f64, cost0: f64, w1: f64, cost1: f64) -> (f64, u8) {
    if cost0 <= cost1 {
        (w0, 0)
    } else {
        (w1, 1)
    }
}

/// Closed-form MAP update of one pixel: both class candidates, then the
/// binary comparison. Returns `(rho_i, C_i, g(rho_i, C_i))`.
pub fn update_pixel(
    y_row: &[f64],
    u_row: &[f64],
    prior: &PriorConfig,
    exact_truncation: bool,
) -> (f64, u8, f64) {
    let w0 = map_pixel_update(y_row, u_row, prior, 0);
    let w1 = map_pixel_update(y_row, u_row, prior, 1);
    let g0 = pixel_cost(w0, 0, y_row, u_row, prior, exact_truncation);
    let g1 = pixel_cost(w1, 1, y_row, u_row, prior, exact_truncation);
    let (rho, class) = classify_pixel(w0, g0, w1, g1);
    (rho, class, if class == 0 { g0 } else { g1 })
}

/// Row-major `P x M` copy so each pixel's observations are contiguous.
fn pixel_rows(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// `sum_i g(rho_i, C_i)` with the supplied distortions.
pub fn total_objective(
    rho: &[f64],
    labels: &[u8],
    distortions: &DMatrix<f64>,
    stack: &FrameStack,
    prior: &PriorConfig,
    exact_truncation: bool,
) -> Result<f64> {
    let p = stack.num_pixels();
    let m = stack.num_frames();
    if rho.len() != p || labels.len() != p || distortions.shape() != (p, m) {
        return Err(Error::Contract(
            "state dimensions do not match the frame stack".into(),
        ));
    }
    let yt = pixel_rows(stack.frames());
    let ut = pixel_rows(distortions);
    Ok(objective_from_rows(
        rho,
        labels,
        &yt,
        &ut,
        m,
        prior,
        exact_truncation,
    ))
}

fn objective_from_rows(
    rho: &[f64],
    labels: &[u8],
    yt: &[f64],
    ut: &[f64],
    m: usize,
    prior: &PriorConfig,
    exact: bool,
) -> f64 {
    (0..rho.len())
        .map(|i| {
            let rows = i * m..(i + 1) * m;
            pixel_cost(
                rho[i],
                labels[i],
                &yt[rows.clone()],
                &ut[rows],
                prior,
                exact,
            )
        })
        .sum()
}

impl SolverState {
    pub fn objective(
        &self,
        stack: &FrameStack,
        prior: &PriorConfig,
        exact_truncation: bool,
    ) -> Result<f64> {
        total_objective(
            &self.rho,
            &self.labels,
            &self.distortions,
            stack,
            prior,
            exact_truncation,
        )
    }
}

fn check_inputs(
    stack: &FrameStack,
    subspaces: &[SweepSubspace],
    opts: &SolverOptions,
) -> Result<()> {
    opts.validate()?;
    if subspaces.len() != stack.num_frames() {
        return Err(Error::Contract(format!(
            "{} subspaces for {} frames",
            subspaces.len(),
            stack.num_frames()
        )));
    }
    if let Some((j, s)) = subspaces
        .iter()
        .enumerate()
        .find(|(_, s)| s.num_pixels() != stack.num_pixels())
    {
        return Err(Error::Contract(format!(
            "subspace {j} has {} rows, frames have {} pixels",
            s.num_pixels(),
            stack.num_pixels()
        )));
    }
    if let Some(init) = &opts.init {
        if init.len() != stack.num_pixels() || init.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::Contract(
                "warm start must be a non-negative image of matching size".into(),
            ));
        }
    }
    Ok(())
}

/// Alternate distortion fits and pixel MAP updates until the relative image
/// change drops below `rel_tol` or `max_iters` iterations have run.
pub fn solve(
    stack: &FrameStack,
    subspaces: &[SweepSubspace],
    prior: &PriorConfig,
    opts: &SolverOptions,
) -> Result<SolverState> {
    check_inputs(stack, subspaces, opts)?;
    prior.validate()?;
    let p = stack.num_pixels();
    let m = stack.num_frames();
    let exact = opts.exact_truncation_constants;
    let yt = pixel_rows(stack.frames());

    let mut rho = opts.init.clone().unwrap_or_else(|| vec![1.0; p]);
    let mut labels = vec![0u8; p];
    let mut alphas = Vec::new();
    let mut distortions = DMatrix::zeros(p, m);
    let mut trace = Vec::new();
    let mut rel_changes = Vec::new();
    let mut rank_deficient = Vec::new();
    let mut converged = false;
    let mut iteration = 0;

    while iteration < opts.max_iters {
        iteration += 1;

        let fits = (0..m)
            .into_par_iter()
            .map(|j| sweep_update(stack.frame(j), &rho, &subspaces[j], opts.rho_floor))
            .collect::<Result<Vec<_>>>()?;
        rank_deficient = fits
            .iter()
            .enumerate()
            .filter_map(|(j, f)| f.rank_deficient.then_some(j))
            .collect();
        alphas = fits.into_iter().map(|f| f.alpha).collect();
        for (j, alpha) in alphas.iter().enumerate() {
            distortions.set_column(j, &(subspaces[j].basis() * alpha));
        }

        let ut = pixel_rows(&distortions);
        let updates: Vec<(f64, u8, f64)> = (0..p)
            .into_par_iter()
            .map(|i| {
                let rows = i * m..(i + 1) * m;
                update_pixel(&yt[rows.clone()], &ut[rows], prior, exact)
            })
            .collect();

        let objective: f64 = updates.iter().map(|u| u.2).sum();
        if !objective.is_finite() {
            return Err(Error::Divergence {
                iteration,
                message: "objective is not finite".into(),
            });
        }
        let (mut diff, mut base) = (0.0, 0.0);
        for (i, &(value, class, _)) in updates.iter().enumerate() {
            diff += (value - rho[i]).powi(2);
            base += rho[i] * rho[i];
            rho[i] = value;
            labels[i] = class;
        }
        let rel = if base > 0.0 {
            (diff / base).sqrt()
        } else {
            diff.sqrt()
        };
        trace.push(objective);
        rel_changes.push(rel);
        if rel < opts.rel_tol {
            converged = true;
            break;
        }
    }

    Ok(SolverState {
        rho,
        labels,
        alphas,
        distortions,
        iteration,
        objective_trace: trace,
        rel_changes,
        converged,
        rank_deficient,
    })
}

/// Noise variance guess from the finest diagonal wavelet band of the first
/// frame: `(1.4826 * MAD)^2`.
pub fn estimate_noise_variance(stack: &FrameStack) -> Result<f64> {
    let frame = stack.frame_grid(0);
    let levels = if frame.width >= 2 && frame.height >= 2 {
        1
    } else {
        0
    };
    if levels == 0 {
        return Err(Error::Domain("frame too small to estimate noise".into()));
    }
    let bank = WaveletBank::symlet4().with_levels(levels);
    let coeffs = wavelet::dwt2_forward(&frame, &bank);
    let band: Vec<f64> = coeffs
        .layout
        .band(1, Orientation::Diagonal)
        .into_iter()
        .map(|k| coeffs.values[k])
        .collect();
    let med = median(&band);
    let deviations: Vec<f64> = band.iter().map(|v| (v - med).abs()).collect();
    let sigma = MAD_SCALE * median(&deviations);
    if !(sigma > 0.0) {
        return Err(Error::Domain(
            "noise estimate is zero; set noise_sigma_sq explicitly".into(),
        ));
    }
    Ok(sigma * sigma)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Write the objective trace as CSV: `iteration,objective,rel_change`.
pub fn trace_csv(state: &SolverState) -> String {
    let mut out = String::from("iteration,objective,rel_change\n");
    for (k, (j, r)) in state
        .objective_trace
        .iter()
        .zip(&state.rel_changes)
        .enumerate()
    {
        out.push_str(&format!("{},{j:e},{r:e}\n", k + 1));
    }
    out
}
