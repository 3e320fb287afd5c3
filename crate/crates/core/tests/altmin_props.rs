mod common;

use common::*;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;
use sweepdemod::altmin::{self, SolverOptions};
use sweepdemod::config::PriorSpec;
use sweepdemod::eval;
use sweepdemod::forward::{self, make_letter_phantom, SimConfig, Snr};
use sweepdemod::lowrank::random_subspace;
use sweepdemod::subspace::{self, SweepSubspace};
use sweepdemod::{FrameStack, PriorConfig};

fn prior(noise: f64, sigma: f64) -> PriorConfig {
    PriorConfig::new(0.3, 0.1, sigma * sigma, sigma * sigma, 0.5, 0.5, noise).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn closed_form_matches_numeric_minimum(
        seed in any::<u64>(),
        m in 0usize..8,
        class in 0u8..2,
        log_noise in -3.0f64..0.0,
        log_sigma in -2.0f64..0.0,
    ) {
        let mut r = rng(seed);
        let y: Vec<f64> = (0..m).map(|_| 0.3 * gaussian(&mut r)).collect();
        let u: Vec<f64> = (0..m).map(|_| gaussian(&mut r)).collect();
        let sigma = 10f64.powf(log_sigma);
        let p = prior(10f64.powf(log_noise), sigma);
        let w = altmin::map_pixel_update(&y, &u, &p, class);
        let yu: f64 = y.iter().zip(&u).map(|(a, b)| a * b).sum();
        let uu: f64 = u.iter().map(|b| b * b).sum::<f64>().max(1e-12);
        let hi = 2.0 * (p.mean(class) + yu.abs() / uu + 1.0);
        let g = |rho: f64| altmin::pixel_cost(rho, class, &y, &u, &p, false);
        let numeric = golden_section_min(g, 0.0, hi);
        prop_assert!((w - numeric).abs() <= 1e-8, "closed form {w}, numeric {numeric}");
    }

    #[test]
    fn sweep_update_matches_normal_equations(seed in any::<u64>(), n in 1usize..7, spread in 0.0f64..3.3) {
        let mut r = rng(seed);
        let s = random_subspace(50, n, 0, seed).unwrap();
        let rho: Vec<f64> = (0..50).map(|_| 10f64.powf(-spread * r.random::<f64>())).collect();
        let y: Vec<f64> = (0..50).map(|_| gaussian(&mut r)).collect();
        let fit = altmin::sweep_update(DVector::from_vec(y.clone()).as_view(), &rho, &s, 0.0).unwrap();
        let oracle = normal_equations(s.basis(), &rho, &y);
        let err: f64 = fit.alpha.iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = oracle.iter().map(|b| b * b).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-8 * norm, "relative error {}", err / norm);
    }
}

#[test]
fn consistent_sweep_is_recovered() {
    let mut r = rng(5);
    let s = random_subspace(40, 5, 0, 8).unwrap();
    let rho: Vec<f64> = (0..40).map(|_| 0.1 + r.random::<f64>()).collect();
    let alpha = DVector::from_fn(5, |_, _| gaussian(&mut r));
    let u = s.basis() * &alpha;
    let y = DVector::from_fn(40, |i, _| rho[i] * u[i]);
    let fit = altmin::sweep_update(y.as_view(), &rho, &s, 0.0).unwrap();
    assert!((fit.alpha - alpha).amax() < 1e-10);
}

#[test]
fn objective_never_increases_on_random_instances() {
    for seed in 0..25 {
        let (stack, spaces, p) = random_instance(1000 + seed);
        let opts = SolverOptions {
            max_iters: 30,
            ..SolverOptions::default()
        };
        let state = altmin::solve(&stack, &spaces, &p, &opts).unwrap();
        let bad = increases(&state.objective_trace, 1e-12);
        assert!(bad.is_empty(), "seed {seed}: {bad:?}");
    }
}

fn small_sim(snr: Snr, frames: usize, seed: u64) -> forward::Simulation {
    let phantom = make_letter_phantom(32, 32, "M", 0.3, 0.1).unwrap();
    let mut cfg = SimConfig::reference(phantom, frames);
    cfg.snr = snr;
    cfg.rng_seed = seed;
    forward::simulate_stack(&cfg).unwrap()
}

fn oracle_spaces(sim: &forward::Simulation) -> Vec<SweepSubspace> {
    (0..sim.stack.num_frames())
        .map(|j| subspace::oracle_subspace(&sim.distortions, j).unwrap())
        .collect()
}

#[test]
fn noiseless_oracle_recovery_is_exact() {
    let sim = small_sim(Snr::Noiseless, 8, 0);
    let out = eval::run_trial(
        &sim,
        &eval::SubspaceSpec::oracle(),
        &PriorSpec::default(),
        &SolverOptions::default(),
    );
    let s = out.scores.expect("trial solved");
    assert!(s.mse_raw <= 1e-6, "raw mse {}", s.mse_raw);
    assert_eq!(s.misclassification, 0.0);
}

#[test]
fn truth_is_a_fixed_point() {
    let sim = small_sim(Snr::Noiseless, 6, 0);
    let p = eval::solver_prior(&PriorSpec::default(), &sim).unwrap();
    let truth = sim.truth.reflectance.values().to_vec();
    let opts = SolverOptions {
        init: Some(truth.clone()),
        ..SolverOptions::default()
    };
    let state = altmin::solve(&sim.stack, &oracle_spaces(&sim), &p, &opts).unwrap();
    assert_eq!(state.iteration, 1);
    assert!(state.converged);
    assert_eq!(state.labels, sim.truth.labels);
    let dev = state
        .rho
        .iter()
        .zip(&truth)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(dev < 1e-9, "{dev}");
}

#[test]
fn perfect_fit_objective_is_the_constant_term() {
    let sim = small_sim(Snr::Noiseless, 4, 0);
    let p = prior(1.0, 1e-3);
    let labels = sim.truth.labels.clone();
    let rho = sim.truth.reflectance.values().to_vec();
    let j =
        altmin::total_objective(&rho, &labels, &sim.distortions, &sim.stack, &p, false).unwrap();
    let expected: f64 = labels
        .iter()
        .map(|&c| (p.variance(c).sqrt() / p.probability(c)).ln())
        .sum();
    assert!(
        (j - expected).abs() <= 1e-9 * expected.abs(),
        "{j} vs {expected}"
    );
}

#[test]
fn labels_survive_a_common_rescaling() {
    let sim = small_sim(Snr::Db(15.0), 8, 4);
    let spaces = oracle_spaces(&sim);
    let p = eval::solver_prior(&PriorSpec::default(), &sim).unwrap();
    let base = altmin::solve(&sim.stack, &spaces, &p, &SolverOptions::default()).unwrap();
    for c in [1e-3, 7.5, 1e4] {
        let scaled = FrameStack::new(
            sim.stack.width,
            sim.stack.height,
            sim.stack.frames() * c,
            None,
        )
        .unwrap();
        let pc = PriorConfig {
            noise_sigma_sq: p.noise_sigma_sq * c * c,
            ..p
        };
        let state = altmin::solve(&scaled, &spaces, &pc, &SolverOptions::default()).unwrap();
        assert_eq!(state.labels, base.labels, "scale {c}");
    }
}

#[test]
fn measured_snr_matches_the_setting() {
    let phantom = make_letter_phantom(16, 16, "M", 0.3, 0.1).unwrap();
    let mut cfg = SimConfig::reference(phantom, 5);
    cfg.snr = Snr::Noiseless;
    let clean = forward::simulate_stack(&cfg)
        .unwrap()
        .stack
        .frames()
        .clone();
    let signal = clean.norm_squared();
    let mut total_db = 0.0;
    for seed in 0..100 {
        cfg.snr = Snr::Db(10.0);
        cfg.rng_seed = seed;
        let noisy = forward::simulate_stack(&cfg)
            .unwrap()
            .stack
            .frames()
            .clone();
        total_db += 10.0 * (signal / (noisy - &clean).norm_squared()).log10();
    }
    let mean = total_db / 100.0;
    assert!((mean - 10.0).abs() <= 0.5, "mean measured SNR {mean} dB");
}

#[test]
fn tilt_free_oracle_subspace_is_constant() {
    let phantom = make_letter_phantom(8, 8, " ", 0.3, 0.1).unwrap();
    // Four frames, so none falls on the pulse zero crossing.
    let mut cfg = SimConfig::reference(phantom, 4);
    cfg.tilt_alpha1 = 0.0;
    cfg.tilt_alpha2 = 0.0;
    cfg.snr = Snr::Noiseless;
    let sim = forward::simulate_stack(&cfg).unwrap();
    for j in 0..4 {
        let s = subspace::oracle_subspace(&sim.distortions, j).unwrap();
        assert_eq!(s.dim(), 1);
        let b = s.basis().column(0);
        let spread = b.max() - b.min();
        assert!(spread < 1e-12 * b.amax(), "frame {j}");
    }
}
