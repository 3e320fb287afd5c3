//! Convex baseline: lift `rho (.) u_j = (Q beta) (.) (S^j alpha_j)` to the
//! rank-one matrix `X = beta alpha^T`, whose measurements
//! `A(X)_{ij} = <X, Q_{i,:}^T S^j_{i,:} P_j>` are linear, and recover `X` by
//! nuclear-norm regularized least squares
//! `min 1/2 ||Y - A(X)||_F^2 + lambda ||X||_*` with proximal gradient steps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::forward::GaussianStream;
use crate::subspace::SweepSubspace;
use crate::types::FrameStack;

/// Matrix-free lifted measurement operator.
#[derive(Debug, Clone)]
pub struct MeasurementOperator {
    /// `P x K` image subspace; `None` is the identity (`K = P`).
    image_basis: Option<DMatrix<f64>>,
    subspaces: Vec<SweepSubspace>,
    /// `offsets[j]..offsets[j+1]` are the columns of `X` selected by `P_j`.
    offsets: Vec<usize>,
    pixels: usize,
}

impl MeasurementOperator {
    pub fn new(subspaces: Vec<SweepSubspace>, image_basis: Option<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = subspaces.first() else {
            return Err(Error::Contract(
                "operator needs at least one subspace".into(),
            ));
        };
        let pixels = first.num_pixels();
        if subspaces.iter().any(|s| s.num_pixels() != pixels) {
            return Err(Error::Contract(
                "all subspaces must share the pixel grid".into(),
            ));
        }
        if let Some(q) = &image_basis {
            if q.nrows() != pixels || q.ncols() == 0 {
                return Err(Error::Contract(format!(
                    "image basis must be {pixels} x K, got {} x {}",
                    q.nrows(),
                    q.ncols()
                )));
            }
        }
        let mut offsets = vec![0];
        for s in &subspaces {
            offsets.push(offsets.last().unwrap() + s.dim());
        }
        Ok(Self {
            image_basis,
            subspaces,
            offsets,
            pixels,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.pixels
    }

    pub fn num_frames(&self) -> usize {
        self.subspaces.len()
    }

    /// Row dimension `K` of `X`.
    pub fn image_dim(&self) -> usize {
        self.image_basis.as_ref().map_or(self.pixels, |q| q.ncols())
    }

    /// Column dimension `sum_j N_j` of `X`.
    pub fn coeff_dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn subspaces(&self) -> &[SweepSubspace] {
        &self.subspaces
    }

    pub fn image_basis(&self) -> Option<&DMatrix<f64>> {
        self.image_basis.as_ref()
    }

    fn check_x(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.shape() != (self.image_dim(), self.coeff_dim()) {
            return Err(Error::Contract(format!(
                "X must be {} x {}, got {} x {}",
                self.image_dim(),
                self.coeff_dim(),
                x.nrows(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// `A(X)`, a `P x M` matrix.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_x(x)?;
        let lifted;
        let qx = match &self.image_basis {
            Some(q) => {
                lifted = q * x;
                &lifted
            }
            None => x,
        };
        let mut out = DMatrix::zeros(self.pixels, self.num_frames());
        for (j, s) in self.subspaces.iter().enumerate() {
            let mut col = out.column_mut(j);
            for n in 0..s.dim() {
                col += qx
                    .column(self.offsets[j] + n)
                    .component_mul(&s.basis().column(n));
            }
        }
        Ok(out)
    }

    /// `A*(R) = sum_{ij} R_ij Q_{i,:}^T S^j_{i,:} P_j`.
    pub fn adjoint(&self, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if r.shape() != (self.pixels, self.num_frames()) {
            return Err(Error::Contract(format!(
                "residual must be {} x {}, got {} x {}",
                self.pixels,
                self.num_frames(),
                r.nrows(),
                r.ncols()
            )));
        }
        let mut w = DMatrix::zeros(self.pixels, self.coeff_dim());
        for (j, s) in self.subspaces.iter().enumerate() {
            for n in 0..s.dim() {
                w.set_column(
                    self.offsets[j] + n,
                    &r.column(j).component_mul(&s.basis().column(n)),
                );
            }
        }
        Ok(match &self.image_basis {
            Some(q) => q.tr_mul(&w),
            None => w,
        })
    }

    /// Power-method estimate of `||A||_op^2`, the largest eigenvalue of `A*A`.
    pub fn norm_sq_estimate(&self, iters: usize, seed: u64) -> Result<f64> {
        let mut g = GaussianStream::new(seed);
        let mut x = DMatrix::from_fn(self.image_dim(), self.coeff_dim(), |_, _| g.next());
        x /= x.norm();
        let mut estimate = 0.0;
        for _ in 0..iters.max(1) {
            let next = self.adjoint(&self.apply(&x)?)?;
            estimate = next.norm();
            if estimate == 0.0 {
                return Ok(0.0);
            }
            x = next / estimate;
        }
        Ok(estimate)
    }
}

pub fn apply_operator(op: &MeasurementOperator, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    op.apply(x)
}

pub fn apply_adjoint(op: &MeasurementOperator, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    op.adjoint(r)
}

/// Largest singular value of `A*(Y)`, the smallest `lambda` for which the
/// zero matrix solves the regularized problem.
pub fn adjoint_spectral_norm(
    op: &MeasurementOperator,
    stack: &FrameStack,
    seed: u64,
) -> Result<f64> {
    let w = op.adjoint(stack.frames())?;
    Ok(spectral_norm(&w, 100, seed))
}

/// Power-iteration estimate of `||W||_2`.
pub fn spectral_norm(w: &DMatrix<f64>, iters: usize, seed: u64) -> f64 {
    let mut g = GaussianStream::new(seed);
    let mut v = DVector::from_fn(w.ncols(), |_, _| g.next());
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let norm = v.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v /= norm;
        let u = w * &v;
        sigma = u.norm();
        v = w.tr_mul(&u);
    }
    sigma
}

/// Result of a singular value thresholding step.
#[derive(Debug, Clone)]
pub struct Thresholded {
    pub matrix: DMatrix<f64>,
    /// Nuclear norm of `matrix`.
    pub nuclear_norm: f64,
    pub rank: usize,
}

fn compose(
    u: &DMatrix<f64>,
    s: &[f64],
    v_t: &DMatrix<f64>,
    rows: usize,
    cols: usize,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, cols);
    for (k, &sk) in s.iter().enumerate() {
        if sk > 0.0 {
            out.ger(sk, &u.column(k), &v_t.row(k).transpose(), 1.0);
        }
    }
    out
}

/// Exact proximal map of `tau ||.||_*` through a full SVD.
pub fn svt_full(x: &DMatrix<f64>, tau: f64) -> Thresholded {
    let (rows, cols) = x.shape();
    if rows == 0 || cols == 0 {
        return Thresholded {
            matrix: x.clone(),
            nuclear_norm: 0.0,
            rank: 0,
        };
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let v_t = svd.v_t.as_ref().unwrap();
    let shrunk: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|&s| (s - tau).max(0.0))
        .collect();
    Thresholded {
        matrix: compose(u, &shrunk, v_t, rows, cols),
        nuclear_norm: shrunk.iter().sum(),
        rank: shrunk.iter().filter(|&&s| s > 0.0).count(),
    }
}

pub fn svt(x: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    svt_full(x, tau).matrix
}

/// Below this many rows/columns the full SVD is always used.
const PARTIAL_SVT_MIN_SIDE: usize = 200;
const OVERSAMPLE: usize = 6;
const POWER_STEPS: usize = 3;

/// Thresholding through the eigendecomposition of the smaller Gram matrix:
/// with `X^T X = V S^2 V^T`, `svt(X) = X V diag(max(1 - tau / s, 0)) V^T`.
/// Singular values are accurate to about `sqrt(eps) * s_max`, far below any
/// useful `tau`.
pub fn svt_gram(x: &DMatrix<f64>, tau: f64) -> Thresholded {
    let (rows, cols) = x.shape();
    if rows < cols {
        let t = svt_gram(&x.transpose(), tau);
        return Thresholded {
            matrix: t.matrix.transpose(),
            ..t
        };
    }
    if cols == 0 {
        return Thresholded {
            matrix: x.clone(),
            nuclear_norm: 0.0,
            rank: 0,
        };
    }
    let xt = x.transpose();
    let eig = (&xt * x).symmetric_eigen();
    let kept: Vec<(usize, f64)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(k, &l)| (k, l.max(0.0).sqrt()))
        .filter(|&(_, sv)| sv > tau)
        .collect();
    let mut v = DMatrix::zeros(cols, kept.len());
    let mut vw = DMatrix::zeros(cols, kept.len());
    for (c, &(k, sv)) in kept.iter().enumerate() {
        let col = eig.eigenvectors.column(k);
        v.set_column(c, &col);
        vw.set_column(c, &(col * (1.0 - tau / sv)));
    }
    let matrix = if kept.is_empty() {
        DMatrix::zeros(rows, cols)
    } else {
        (x * v) * vw.transpose()
    };
    Thresholded {
        matrix,
        nuclear_norm: kept.iter().map(|&(_, sv)| sv - tau).sum(),
        rank: kept.len(),
    }
}

/// Thresholding through a randomized truncated SVD, enlarging the sketch
/// until its smallest singular value falls below `tau`. Small matrices use
/// the full SVD; sketches beyond an eighth of the shorter side switch to
/// [`svt_gram`].
pub fn svt_partial(x: &DMatrix<f64>, tau: f64, rank_hint: usize, seed: u64) -> Thresholded {
    let (rows, cols) = x.shape();
    let side = rows.min(cols);
    if side < PARTIAL_SVT_MIN_SIDE {
        return svt_full(x, tau);
    }
    let mut rank = rank_hint.max(1);
    loop {
        let width = rank + OVERSAMPLE;
        if 8 * width >= side {
            return svt_gram(x, tau);
        }
        let mut g = GaussianStream::new(seed ^ (width as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let omega = DMatrix::from_fn(cols, width, |_, _| g.next());
        let mut range = (x * omega).qr().q();
        for _ in 0..POWER_STEPS {
            let back = (x.transpose() * &range).qr().q();
            range = (x * back).qr().q();
        }
        let small = range.transpose() * x;
        let svd = small.svd(true, true);
        let s = &svd.singular_values;
        let smallest = s.iter().copied().fold(f64::INFINITY, f64::min);
        if smallest > tau {
            rank *= 2;
            continue;
        }
        let u = &range * svd.u.as_ref().unwrap();
        let v_t = svd.v_t.as_ref().unwrap();
        let shrunk: Vec<f64> = s.iter().map(|&sv| (sv - tau).max(0.0)).collect();
        return Thresholded {
            matrix: compose(&u, &shrunk, v_t, rows, cols),
            nuclear_norm: shrunk.iter().sum(),
            rank: shrunk.iter().filter(|&&v| v > 0.0).count(),
        };
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuclearOptions {
    /// Total proximal-gradient iterations across all continuation stages.
    pub iters: usize,
    /// Number of geometrically decreasing `lambda` values ending at the
    /// target; 1 disables continuation.
    pub continuation_steps: usize,
    pub continuation_factor: f64,
    pub power_iters: usize,
    /// Step is `1 / (safety * ||A||^2)`.
    pub step_safety: f64,
    /// A stage ends early once `||X_k+1 - X_k|| <= stage_tol ||X_k+1||`.
    pub stage_tol: f64,
    pub seed: u64,
}

impl Default for NuclearOptions {
    fn default() -> Self {
        Self {
            iters: 100,
            continuation_steps: 10,
            continuation_factor: 0.5,
            power_iters: 50,
            step_safety: 1.05,
            stage_tol: 1e-10,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LiftedSolution {
    pub x: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub alpha: DVector<f64>,
    /// `||Y - A(X)||_F` at the returned iterate.
    pub residual: f64,
    pub nuclear_norm: f64,
    /// Lagrangian objective after every iteration, with the stage's `lambda`.
    pub objective_trace: Vec<f64>,
    /// Stage index of each trace entry.
    pub stage_of: Vec<usize>,
    pub iterations: usize,
    pub used_fallback: bool,
}

pub fn solve_nuclear(
    stack: &FrameStack,
    op: &MeasurementOperator,
    lambda: f64,
    opts: &NuclearOptions,
) -> Result<LiftedSolution> {
    if !(lambda > 0.0) {
        return Err(Error::Contract("lambda must be positive".into()));
    }
    if stack.num_pixels() != op.num_pixels() || stack.num_frames() != op.num_frames() {
        return Err(Error::Contract(
            "frame stack does not match the operator".into(),
        ));
    }
    let steps = opts.continuation_steps.max(1);
    let y = stack.frames();
    let lipschitz = op.norm_sq_estimate(opts.power_iters, opts.seed)?;
    if !(lipschitz > 0.0) {
        return Err(Error::Domain(
            "measurement operator is identically zero".into(),
        ));
    }
    let eta = 1.0 / (opts.step_safety * lipschitz);

    let mut x = DMatrix::zeros(op.image_dim(), op.coeff_dim());
    let mut trace = Vec::new();
    let mut stage_of = Vec::new();
    let mut nuclear = 0.0;
    let mut rank_hint = 1;
    let mut iteration = 0;
    for stage in 0..steps {
        let stage_lambda = lambda * opts.continuation_factor.powi(-((steps - 1 - stage) as i32));
        // Iterations left unused by earlier stages carry over.
        let budget = (opts.iters.saturating_sub(iteration) / (steps - stage)).max(1);
        for _ in 0..budget {
            iteration += 1;
            let residual = op.apply(&x)? - y;
            let z = &x - op.adjoint(&residual)? * eta;
            let t = svt_partial(
                &z,
                eta * stage_lambda,
                rank_hint + 1,
                opts.seed.wrapping_add(iteration as u64),
            );
            if t.matrix.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    iteration,
                    message: "non-finite iterate".into(),
                });
            }
            rank_hint = t.rank.max(1);
            let change = (&t.matrix - &x).norm();
            x = t.matrix;
            nuclear = t.nuclear_norm;
            let misfit = (op.apply(&x)? - y).norm_squared();
            trace.push(0.5 * misfit + stage_lambda * nuclear);
            stage_of.push(stage);
            if change <= opts.stage_tol * x.norm() {
                break;
            }
        }
    }

    let residual = (op.apply(&x)? - y).norm();
    let (beta, alpha, used_fallback) = if x.iter().all(|&v| v == 0.0) {
        (DVector::zeros(x.nrows()), DVector::zeros(x.ncols()), false)
    } else {
        let f = extract_factors(&x)?;
        (f.beta, f.alpha, f.used_fallback)
    };
    Ok(LiftedSolution {
        x,
        beta,
        alpha,
        residual,
        nuclear_norm: nuclear,
        objective_trace: trace,
        stage_of,
        iterations: iteration,
        used_fallback,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factors {
    pub beta: DVector<f64>,
    pub alpha: DVector<f64>,
    pub used_fallback: bool,
}

/// Pivot magnitude, relative to `max |X|`, below which the first-row /
/// first-column rule is replaced by the leading singular pair.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Rank-one factors with `X ~ beta alpha^T`: `beta = X[:, 0]`,
/// `alpha = X[0, :] / X[0, 0]`, or the leading singular pair when the pivot
/// is negligible.
pub fn extract_factors(x: &DMatrix<f64>) -> Result<Factors> {
    let scale = x.amax();
    if !(scale > 0.0) {
        return Err(Error::Domain("cannot factor the zero matrix".into()));
    }
    let pivot = x[(0, 0)];
    if pivot.abs() >= PIVOT_TOLERANCE * scale {
        return Ok(Factors {
            beta: x.column(0).into_owned(),
            alpha: x.row(0).transpose() / pivot,
            used_fallback: false,
        });
    }
    let svd = x.clone().svd(true, true);
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap();
    let sigma = svd.singular_values[k];
    let beta = svd.u.as_ref().unwrap().column(k) * sigma;
    let alpha = svd.v_t.as_ref().unwrap().row(k).transpose();
    Ok(Factors {
        beta,
        alpha,
        used_fallback: true,
    })
}

/// Random orthonormal `p x n` basis.
pub fn random_subspace(
    p: usize,
    n: usize,
    frame_index: usize,
    rng_seed: u64,
) -> Result<SweepSubspace> {
    let mut g = GaussianStream::new(rng_seed);
    let m = DMatrix::from_fn(p, n, |_, _| g.next());
    let q = m.qr().q();
    SweepSubspace::from_basis(q, crate::subspace::Provenance::Oracle, frame_index)
}
