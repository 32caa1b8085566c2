use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::functionals::Observable;
use crate::integrator::gaussian_cloud;
use crate::models::make_mean_field_ou;

fn ou_model(theta: f64, eta: f64, sigma0: f64) -> Arc<Model> {
    Arc::new(make_mean_field_ou(theta, eta, sigma0, 1).unwrap().into())
}

/// Stationary law of `dX = −X dt + dW`: N(0, 1/2).
fn ou_stationary(n: usize, seed: u64) -> EmpiricalMeasure {
    gaussian_cloud(1, n, seed).unwrap().scaled(0.5f64.sqrt()).unwrap()
}

fn moderate(horizons: Vec<f64>, replicas: usize, n: usize, engine: Engine) -> ModerateParams {
    ModerateParams {
        horizons,
        replicas,
        n_particles: n,
        dt: 0.05,
        seed: 11,
        engine,
    }
}

#[test]
fn wilson_zero_hits_has_closed_form_upper_end() {
    let n = 100u64;
    let z2 = WILSON_Z * WILSON_Z;
    let (lo, hi) = wilson_interval(0, n);
    assert_eq!(lo, 0.0);
    assert!((hi - z2 / (n as f64 + z2)).abs() < 1e-15);
    let (lo, hi) = wilson_interval(n, n);
    assert!((lo - n as f64 / (n as f64 + z2)).abs() < 1e-15);
    assert_eq!(hi, 1.0);
}

#[test]
fn wilson_half_matches_textbook_value() {
    // 50/100: centre 0.5, half-width z·sqrt(0.25/n + z²/4n²)/(1 + z²/n)
    let (lo, hi) = wilson_interval(50, 100);
    assert!((lo - 0.403831).abs() < 1e-6, "{lo}");
    assert!((hi - 0.596169).abs() < 1e-6, "{hi}");
}

proptest! {
    #[test]
    fn wilson_brackets_the_estimate(n in 1u64..5000, frac in 0.0f64..=1.0) {
        let k = ((n as f64) * frac).floor() as u64;
        let (lo, hi) = wilson_interval(k, n);
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
    }

    #[test]
    fn tail_counts_are_monotone_in_the_threshold(
        ls in proptest::collection::vec(-5.0f64..5.0, 1..300),
        y in 0.0f64..3.0,
    ) {
        let a = ScalingFunction::new(0.75).unwrap();
        let s = vec![ls];
        let r1 = tail_rows(&s, &[10.0], y, &a);
        let r2 = tail_rows(&s, &[10.0], 2.0 * y, &a);
        prop_assert!(r2[0].hits <= r1[0].hits);
    }
}

#[test]
fn saturated_tail_uses_the_upper_wilson_end() {
    let a = ScalingFunction::new(0.75).unwrap();
    let r = TailEstimate::from_counts(16.0, 1000, 0, &a);
    assert!(r.saturated);
    assert_eq!(r.p_hat, 0.0);
    assert!((r.normalized_log_tail - a.speed(16.0) * r.wilson_high.ln()).abs() < 1e-12);
    assert!(r.normalized_log_tail.is_finite());
}

#[test]
fn contraction_ratio_starts_at_one() {
    let model = ou_model(1.0, 0.0, 1.0);
    let mu = ou_stationary(200, 3);
    let nu0 = mu.scaled(3.0).unwrap();
    let rows = contraction_experiment(
        model,
        &nu0,
        &mu,
        &ContractionParams {
            horizons: vec![0.0, 1.0],
            n_particles: 200,
            dt: 0.05,
            seed: 5,
        },
    )
    .unwrap();
    assert!((rows[0].ratio - 1.0).abs() < 1e-12);
    assert!(rows[1].observed < rows[0].observed);
}

#[test]
fn pathwise_bound_holds_for_mean_field_ou() {
    let model = ou_model(1.0, 0.5, 1.0);
    let mu = ou_stationary(300, 4);
    let nu = gaussian_cloud(1, 300, 9).unwrap().scaled(2.0).unwrap();
    let r = pathwise_contraction_check(
        model,
        &nu,
        &mu,
        PathwiseParams {
            n_pairs: 16,
            horizon: 3.0,
            dt: 0.01,
            seed: 1,
        },
    )
    .unwrap();
    assert_eq!(r.trials, 16);
    assert!(r.pass, "{r:?}");
}

#[test]
fn reduced_and_full_engines_coincide_for_one_particle() {
    let model = ou_model(1.0, 0.5, 1.0);
    let mu = ou_stationary(100, 2);
    let a = ScalingFunction::new(0.75).unwrap();
    let obs = Observable::identity();
    let r = moderate_samples(&model, &obs, &mu, &a, &moderate(vec![1.0, 2.0], 8, 1, Engine::Auto)).unwrap();
    let f = moderate_samples(&model, &obs, &mu, &a, &moderate(vec![1.0, 2.0], 8, 1, Engine::Full)).unwrap();
    for (x, y) in r.iter().flatten().zip(f.iter().flatten()) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn reduced_and_full_engines_agree_in_law() {
    let model = ou_model(1.0, 0.5, 1.0);
    let mu = ou_stationary(200, 2);
    let a = ScalingFunction::new(0.75).unwrap();
    let obs = Observable::identity();
    let stats = |e| {
        let s = moderate_samples(&model, &obs, &mu, &a, &moderate(vec![4.0], 400, 8, e)).unwrap();
        let v = &s[0];
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
    };
    let (mr, vr) = stats(Engine::Auto);
    let (mf, vf) = stats(Engine::Full);
    assert!((mr - mf).abs() < 0.25, "{mr} {mf}");
    assert!((vr / vf - 1.0).abs() < 0.3, "{vr} {vf}");
}

#[test]
fn clt_variance_matches_twice_green_kubo() {
    // plain OU with θ = σ = 1 has V̄ = 1/2
    let model = ou_model(1.0, 0.0, 1.0);
    let mu = ou_stationary(2000, 7);
    let d = clt_diagnostic(&model, &Observable::identity(), &mu, 0.5, 50.0, &moderate(vec![], 400, 1, Engine::Auto))
        .unwrap();
    assert_eq!(d.target, 1.0);
    assert!((d.variance - 1.0).abs() < 3.0 * d.variance_stderr + 0.05, "{d:?}");
}

#[test]
fn mdp_tail_reports_both_rates() {
    let model = ou_model(1.0, 0.0, 1.0);
    let mu = ou_stationary(500, 7);
    let r = mdp_tail_experiment(
        &model,
        &Observable::identity(),
        &mu,
        0.5,
        &MdpParams {
            y: 0.5,
            kappa: 0.75,
            moderate: moderate(vec![5.0, 10.0], 300, 1, Engine::Auto),
            cramer_z_max: 2.0,
            cramer_points: 9,
        },
    )
    .unwrap();
    assert_eq!(r.rows.len(), 2);
    assert!((r.rate8 + 0.0625).abs() < 1e-15);
    assert!((r.rate4 + 0.125).abs() < 1e-15);
    assert_eq!(r.cramer.len(), 18);
    assert_eq!(r.legendre.len(), 2);
    for row in &r.rows {
        assert!(row.hits > 0 && row.normalized_log_tail < 0.0);
    }
    let csv = tail_table(&r.rows, r.rate8, r.rate4).to_csv_string();
    assert!(csv.starts_with("t,replicas,hits,p_hat,wilson_low,wilson_high,norm_log_tail,saturated,rate8,rate4\n"));
}

#[test]
fn mdp_rejects_clt_scaling() {
    let model = ou_model(1.0, 0.0, 1.0);
    let mu = ou_stationary(50, 7);
    let p = MdpParams {
        y: 0.5,
        kappa: 0.5,
        moderate: moderate(vec![1.0], 4, 1, Engine::Auto),
        cramer_z_max: 1.0,
        cramer_points: 3,
    };
    assert!(mdp_tail_experiment(&model, &Observable::identity(), &mu, 0.5, &p).is_err());
}

fn equivalence(epsilon: f64, engine: Engine) -> Vec<TailEstimate> {
    let model = ou_model(1.0, 0.5, 1.0);
    let mu = ou_stationary(64, 1);
    let nu = gaussian_cloud(1, 64, 2).unwrap();
    let setup = CouplingSetup::new(nu, mu, 0).unwrap();
    exp_equivalence_experiment(
        &model,
        &Observable::identity(),
        &setup,
        &EquivalenceParams {
            epsilon,
            kappa: 0.75,
            horizons: vec![1.0, 4.0],
            replicas: 64,
            dt: 0.05,
            seed: 3,
            engine,
        },
    )
    .unwrap()
}

#[test]
fn equivalence_hits_shrink_with_epsilon() {
    let small = equivalence(1e-3, Engine::Auto);
    let large = equivalence(1e3, Engine::Auto);
    for (s, l) in small.iter().zip(&large) {
        assert!(l.hits <= s.hits);
        assert_eq!(l.hits, 0);
        assert!(l.saturated);
    }
    assert!(small[1].hits > 0);
}

#[test]
fn equivalence_runs_on_the_full_engine() {
    let rows = equivalence(1e-3, Engine::Full);
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.replicas == 64));
}

fn probe(kind: ProbeKind, deltas: Vec<f64>) -> ProbeResult {
    let model = ou_model(1.0, 0.5, 1.0);
    let mu = ou_stationary(32, 1);
    let nu = gaussian_cloud(1, 32, 2).unwrap();
    let setup = CouplingSetup::new(nu, mu, 0).unwrap();
    integrability_probe(
        &model,
        kind,
        &setup,
        &ProbeParams {
            deltas,
            horizons: vec![1.0, 2.0],
            replicas: 32,
            dt: 0.05,
            seed: 4,
            engine: Engine::Auto,
        },
    )
    .unwrap()
}

#[test]
fn probe_at_zero_delta_is_exactly_zero() {
    for kind in [
        ProbeKind::Abs,
        ProbeKind::Hoelder { alpha: 0.5 },
        ProbeKind::Logmod { p: 2.0 },
        ProbeKind::Supexp,
    ] {
        let r = probe(kind, vec![0.0, 0.5]);
        assert_eq!(r.rows.len(), 4);
        for row in r.rows.iter().filter(|r| r.delta == 0.0) {
            assert_eq!(row.log_mean_exp, 0.0);
            assert!(!row.saturated);
        }
        for row in r.rows.iter().filter(|r| r.delta > 0.0) {
            assert!(row.log_mean_exp > 0.0, "{kind}: {row:?}");
        }
    }
}

#[test]
fn probe_saturates_for_huge_delta() {
    let r = probe(ProbeKind::Supexp, vec![1e6]);
    assert_eq!(r.all_saturated, vec![1e6]);
}

#[test]
fn probe_rejects_bad_exponents() {
    let model = ou_model(1.0, 0.5, 1.0);
    let mu = ou_stationary(8, 1);
    let setup = CouplingSetup::new(mu.clone(), mu, 0).unwrap();
    let p = ProbeParams {
        deltas: vec![0.1],
        horizons: vec![1.0],
        replicas: 2,
        dt: 0.1,
        seed: 0,
        engine: Engine::Auto,
    };
    assert!(integrability_probe(&model, ProbeKind::Logmod { p: 1.0 }, &setup, &p).is_err());
    assert!(integrability_probe(&model, ProbeKind::Hoelder { alpha: 1.0 }, &setup, &p).is_err());
}

#[test]
fn probe_integrands_at_known_points() {
    assert_eq!(ProbeKind::Abs.integrand(&[3.0, 0.0], &[0.0, 4.0]), 5.0);
    let h = ProbeKind::Hoelder { alpha: 0.5 }.integrand(&[1.0], &[0.0]);
    assert!((h - 2.0f64.powf(1.5)).abs() < 1e-14);
    assert_eq!(ProbeKind::Logmod { p: 2.0 }.integrand(&[1.0], &[1.0]), 0.0);
    assert_eq!(ProbeKind::Hoelder { alpha: 0.25 }.to_string(), "hoelder(0.25)");
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let model = ou_model(1.0, 0.5, 1.0);
    let mu = ou_stationary(100, 2);
    let a = ScalingFunction::new(0.75).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| moderate_samples(&model, &Observable::identity(), &mu, &a, &moderate(vec![2.0], 37, 5, Engine::Auto)))
            .unwrap()
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn ls_slope_of_a_line() {
    assert!((ls_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]) - 2.0).abs() < 1e-14);
}

#[test]
fn coupling_targets_follow_the_cloud_size() {
    let mu = ou_stationary(50, 1);
    let nu = gaussian_cloud(1, 20, 2).unwrap();
    let setup = CouplingSetup::new(nu.clone(), mu.clone(), 5).unwrap();
    assert_eq!(setup.targets.len(), 20);
    assert_eq!(setup.mu_bar_hat.len(), 50);
    let again = CouplingSetup::new(nu, mu.clone(), 5).unwrap();
    assert_eq!(setup.targets, again.targets);
    assert_eq!(matching_targets(&mu, 50, 9).unwrap(), mu);
}
