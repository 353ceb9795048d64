use std::f64::consts::PI;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use leris_core::config::{RangingModel, ScenarioConfig};
use leris_core::experiments::{build_scenario, monte_carlo, run_rate_vs_snr, UePose};
use leris_core::optical::NoiseMode;
use leris_core::{LerisError, Vec3};

fn small() -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.mmwave.m_rows = 4;
    c.mmwave.n_cols = 4;
    c.mmwave.quadrature_deg = 2.0;
    c
}

fn toward(from: Vec3, to: Vec3) -> f64 {
    (to.y - from.y).atan2(to.x - from.x)
}

#[test]
fn config_canonical_form_is_a_fixed_point() {
    let c = ScenarioConfig::from_json(r#"{"seed": 5, "mmwave": {"m_rows": 8}}"#).unwrap();
    assert_eq!(c.seed, 5);
    assert_eq!(c.mmwave.n_cols, 50);
    let text = c.canonical_json();
    let back = ScenarioConfig::from_json(&text).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.canonical_json(), text);
    assert_eq!(back.fingerprint(), c.fingerprint());
    assert_ne!(c.fingerprint(), ScenarioConfig::default().fingerprint());
}

#[test]
fn invalid_config_reports_every_violation() {
    let mut c = ScenarioConfig::default();
    c.mmwave.wavelength_m = -1.0;
    c.optical.pd_fov_deg = 120.0;
    match build_scenario(&c) {
        Err(LerisError::Validation(v)) => assert!(v.len() >= 2, "{v:?}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("accepted an invalid config"),
    }
}

#[test]
fn noise_free_pose_and_single_panel_budget() {
    let mut cfg = small();
    cfg.optical.noise_mode = NoiseMode::Off;
    let sc = build_scenario(&cfg).unwrap();
    let p = Vec3::new(4.0, 6.0, 1.5);
    let pose = UePose::facing(p, toward(p, Vec3::new(0.0, 5.0, 1.5)), 0.0);
    let set = sc.active(&[1]).unwrap();
    let est = sc.localize::<ChaCha8Rng>(&set, &pose, None).unwrap();
    assert!((est.position() - p).norm() < 1e-9);
    assert!((est.orientation() - pose.normal()).norm() < 1e-9);

    let b = sc.link_budget(&set, &pose, &est.position()).unwrap();
    assert!(b.feasible);
    let route = b.route.as_ref().unwrap();
    assert_eq!(route.panel_ids, vec![1]);
    let g = b.gain.unwrap();
    assert_eq!(g.cascaded, 1.0);
    assert!((g.aperture - 16.0 * 1e-4 / (4.0 * PI)).abs() < 1e-15);
    // the panel is inside the user's cone, so G_r = 2 pi / (pi / 3)
    assert!((g.ue_gain - 6.0).abs() < 1e-12);

    // hand budget: C0 per hop, inverse square in metres
    let ap = Vec3::new(5.0, -1.0, 1.5);
    let c1 = Vec3::new(0.0, 5.0, 1.5);
    let (d1, d2) = ((c1 - ap).norm(), (p - c1).norm());
    let c0 = (0.01 / (4.0 * PI)).powi(2);
    let lp = c0 / (d1 * d1) * c0 / (d2 * d2);
    assert!(((b.path_loss - lp) / lp).abs() < 1e-12);
    let snr = 1e13 * 10.0 * lp * g.total();
    let want = (1.0 + snr).log2();
    assert!((b.spectral_efficiency - want).abs() < 1e-9 * want.max(1.0));
}

#[test]
fn fixed_noise_costs_millimetres() {
    let sc = build_scenario(&small()).unwrap();
    let p = Vec3::new(4.0, 6.0, 1.5);
    let pose = UePose::facing(p, toward(p, Vec3::new(0.0, 5.0, 1.5)), 0.0);
    let est = sc.localize::<ChaCha8Rng>(&sc.all_panels(), &pose, None).unwrap();
    let err = (est.position() - p).norm();
    assert!(err > 0.0 && err < 5e-3, "{err}");
}

#[test]
fn dual_mode_ranging_is_exact_without_noise() {
    let mut cfg = small();
    cfg.optical.noise_mode = NoiseMode::Off;
    cfg.optical.ranging_model = RangingModel::DualMode;
    let sc = build_scenario(&cfg).unwrap();
    let p = Vec3::new(6.5, 3.0, 1.5);
    let pose = UePose::facing(p, toward(p, Vec3::new(10.0, 5.0, 1.5)), 0.0);
    let est = sc.localize::<ChaCha8Rng>(&sc.all_panels(), &pose, None).unwrap();
    assert!((est.position() - p).norm() < 1e-6);
}

#[test]
fn small_rate_sweep_shape() {
    let cfg = small();
    let sc = build_scenario(&cfg).unwrap();
    let snr = [90.0, 110.0, 130.0];
    let r = run_rate_vs_snr(&sc, &cfg.sweeps.panel_sets, &snr, 30, 11, Some(2)).unwrap();
    assert_eq!(r.rows.len(), 9);
    for l in [1, 2, 4] {
        let s = r.series(l);
        assert!(s.iter().all(|x| x.stats.unwrap().n == 30));
        let m: Vec<f64> = s.iter().map(|x| x.stats.unwrap().mean).collect();
        assert!(m.windows(2).all(|w| w[1] >= w[0]), "{m:?}");
    }
    let csv = r.to_csv().unwrap();
    assert!(csv.starts_with("snr_db,L,mean_R,p5,p50,p95,n,seed\n"));
    assert!(run_rate_vs_snr(&sc, &cfg.sweeps.panel_sets, &[100.0, 90.0], 2, 11, None).is_err());
}

#[test]
fn monte_carlo_counts_errors_independent_of_workers() {
    let kernel = |i: u64, rng: &mut ChaCha8Rng| {
        if i % 7 == 3 {
            Err(LerisError::NoFeasibleRoot)
        } else {
            Ok(vec![rng.random::<f64>(), i as f64])
        }
    };
    let a = monte_carlo(100, 3, 1, 2, kernel).unwrap();
    let b = monte_carlo(100, 3, 4, 2, kernel).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.errors, 14);
    assert_eq!(a.columns[1].unwrap().n, 86);
}
