//! Independent reference computations for the integration and acceptance
//! tests. Nothing here calls into the solvers under test.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sweepdemod::lowrank::{random_subspace, MeasurementOperator};
use sweepdemod::subspace::SweepSubspace;
use sweepdemod::{FrameStack, PriorConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(r: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - r.random::<f64>();
    let u2: f64 = r.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn gaussian_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| gaussian(r))
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Minimizer of a unimodal `f` on `[lo, hi]`: golden-section narrowing to a
/// small bracket, then the vertex of the parabola through three bracket
/// points (exact for quadratics), clamped to the bracket.
pub fn golden_section_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let width = hi - lo;
    let mut a = hi - INV_PHI * (hi - lo);
    let mut b = lo + INV_PHI * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > 1e-4 * width {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - INV_PHI * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + INV_PHI * (hi - lo);
            fb = f(b);
        }
    }
    let (x0, x1, x2) = (lo, 0.5 * (lo + hi), hi);
    let (f0, f1, f2) = (f(x0), f(x1), f(x2));
    if !(f0.is_finite() && f1.is_finite() && f2.is_finite()) {
        return if fa <= fb { a } else { b };
    }
    let num = (x1 - x0).powi(2) * (f1 - f2) - (x1 - x2).powi(2) * (f1 - f0);
    let den = (x1 - x0) * (f1 - f2) - (x1 - x2) * (f1 - f0);
    if den == 0.0 {
        return x1;
    }
    (x1 - 0.5 * num / den).clamp(lo, hi)
}

/// Solve `G x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut g: DMatrix<f64>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&i, &j| g[(i, c)].abs().total_cmp(&g[(j, c)].abs()))
            .unwrap();
        g.swap_rows(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = g[(r, c)] / g[(c, c)];
            for k in c..n {
                g[(r, k)] -= f * g[(c, k)];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| g[(r, k)] * x[k]).sum();
        x[r] = (b[r] - s) / g[(r, r)];
    }
    x
}

/// `(S^T D^2 S)^{-1} S^T D y` with `D = diag(d)`, assembled entrywise.
pub fn normal_equations(s: &DMatrix<f64>, d: &[f64], y: &[f64]) -> Vec<f64> {
    let (p, n) = s.shape();
    let mut g = DMatrix::zeros(n, n);
    let mut b = vec![0.0; n];
    for a in 0..n {
        for c in 0..n {
            g[(a, c)] = (0..p).map(|i| s[(i, a)] * d[i] * d[i] * s[(i, c)]).sum();
        }
        b[a] = (0..p).map(|i| s[(i, a)] * d[i] * y[i]).sum();
    }
    gauss_solve(g, b)
}

/// Explicit `K x sum N_j` measurement matrix `Q_{i,:}^T S^j_{i,:} P_j`.
pub fn measurement_matrix(op: &MeasurementOperator, i: usize, j: usize) -> DMatrix<f64> {
    let k = op.image_dim();
    let q_row: Vec<f64> = match op.image_basis() {
        Some(q) => q.row(i).iter().copied().collect(),
        None => (0..k).map(|c| if c == i { 1.0 } else { 0.0 }).collect(),
    };
    let s = op.subspaces()[j].basis();
    let off = op.offsets()[j];
    let mut m = DMatrix::zeros(k, op.coeff_dim());
    for r in 0..k {
        for n in 0..s.ncols() {
            m[(r, off + n)] = q_row[r] * s[(i, n)];
        }
    }
    m
}

pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `A(X)` by brute-force inner products with the assembled matrices.
pub fn brute_force_apply(op: &MeasurementOperator, x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(op.num_pixels(), op.num_frames(), |i, j| {
        frobenius_inner(x, &measurement_matrix(op, i, j))
    })
}

/// Consecutive increases beyond `slack * max(1, |value|)`.
pub fn increases(trace: &[f64], slack: f64) -> Vec<(usize, f64)> {
    trace
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0] + slack * w[0].abs().max(1.0))
        .map(|(k, w)| (k + 1, w[1] - w[0]))
        .collect()
}

/// Binary image times random low-dimensional distortions plus white noise.
pub fn random_instance(seed: u64) -> (FrameStack, Vec<SweepSubspace>, PriorConfig) {
    let mut r = rng(seed);
    let w = r.random_range(2..=16);
    let h = r.random_range(2..=256 / w);
    let p = w * h;
    let m = r.random_range(1..=10);
    let snr_db = 30.0 * r.random::<f64>();
    let labels: Vec<u8> = (0..p).map(|_| u8::from(r.random_bool(0.4))).collect();
    let rho: Vec<f64> = labels
        .iter()
        .map(|&c| if c == 1 { 0.1 } else { 0.3 })
        .collect();
    let spaces: Vec<SweepSubspace> = (0..m)
        .map(|j| {
            random_subspace(p, r.random_range(1..=4.min(p)), j, seed * 131 + j as u64).unwrap()
        })
        .collect();
    let mut y = DMatrix::zeros(p, m);
    for (j, s) in spaces.iter().enumerate() {
        let alpha = DVector::from_fn(s.dim(), |_, _| gaussian(&mut r));
        let u = s.basis() * alpha;
        for i in 0..p {
            y[(i, j)] = rho[i] * u[i];
        }
    }
    let noise = y.norm_squared() / (p * m) as f64 / 10f64.powf(snr_db / 10.0);
    y.iter_mut()
        .for_each(|v| *v += noise.sqrt() * gaussian(&mut r));
    let sigma = 10f64.powf(-5.0 + 4.0 * r.random::<f64>());
    let stack = FrameStack::new(w, h, y, None).unwrap();
    (
        stack,
        spaces,
        PriorConfig::new(
            0.3,
            0.1,
            sigma * sigma,
            sigma * sigma,
            0.5,
            0.5,
            noise.max(1e-12),
        )
        .unwrap(),
    )
}
