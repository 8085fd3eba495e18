use diffq::codec;
use diffq::diffq::{DiffqConfig, NoiseKind};
use diffq::harness::{self, LmsConfig, LmsMethod, Method, OptimizerConfig, OptimizerKind, ToyTask};
use diffq::Error;
use proptest::prelude::*;

fn toy_cfg() -> DiffqConfig {
    DiffqConfig {
        skip_threshold_mb: 0.0,
        ..DiffqConfig::default()
    }
}

fn fixed_bits(bits: f64, noise: NoiseKind) -> DiffqConfig {
    DiffqConfig {
        b_min: bits as u32 - 1,
        b_max: bits as u32 + 1,
        b_init: bits,
        freeze_bits: true,
        noise,
        ..toy_cfg()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn fp32_learns_the_blobs() {
    let run = harness::train_toy(&ToyTask::default(), &Method::Fp32, &OptimizerConfig::default()).unwrap();
    assert!(run.report.accuracy >= 0.95, "{}", run.report.accuracy);
    assert_eq!(run.report.accuracy, run.report.float_accuracy);
    assert_eq!(run.report.mean_bits, 32.0);
    assert_eq!(run.report.curves.len(), 200);
}

#[test]
fn noise_training_without_penalty_matches_fp32() {
    let task = ToyTask::default();
    let opt = OptimizerConfig::default();
    let fp = harness::train_toy(&task, &Method::Fp32, &opt).unwrap().report;
    let dq = harness::train_toy(&task, &Method::Diffq(toy_cfg()), &opt).unwrap().report;
    assert!((fp.accuracy - dq.accuracy).abs() <= 0.02, "{} vs {}", fp.accuracy, dq.accuracy);
    assert!(dq.mean_bits >= 7.0, "{}", dq.mean_bits);
}

#[test]
fn training_is_bit_reproducible() {
    let task = ToyTask {
        epochs: 30,
        seed: 5,
        ..ToyTask::default()
    };
    let opt = OptimizerConfig::default();
    let cfg = DiffqConfig { lambda: 50.0, ..toy_cfg() };
    let a = harness::train_toy(&task, &Method::Diffq(cfg.clone()), &opt).unwrap();
    let b = harness::train_toy(&task, &Method::Diffq(cfg), &opt).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.packed, b.packed);
    let other = harness::train_toy(&ToyTask { seed: 6, ..task }, &Method::Fp32, &opt).unwrap();
    assert_ne!(other.report.curves, a.report.curves);
}

#[test]
fn packed_model_reproduces_hardened_accuracy() {
    let task = ToyTask {
        epochs: 40,
        ..ToyTask::default()
    };
    let cfg = DiffqConfig { lambda: 200.0, ..toy_cfg() };
    let run = harness::train_toy(&task, &Method::Diffq(cfg), &OptimizerConfig::default()).unwrap();
    let back = codec::unpack(&run.packed).unwrap();
    assert_eq!(back, run.model);
    assert_eq!(run.report.true_size_mb, back.true_size_mb());
    assert_eq!(run.report.packed_bytes, run.packed.len());
}

#[test]
fn gaussian_noise_hardens_no_worse_than_uniform() {
    let opt = OptimizerConfig::default();
    let mut drops = [Vec::new(), Vec::new()];
    for seed in 0..5 {
        let task = ToyTask { seed, ..ToyTask::default() };
        for (k, noise) in [NoiseKind::Gaussian, NoiseKind::Uniform].into_iter().enumerate() {
            let r = harness::train_toy(&task, &Method::Diffq(fixed_bits(2.0, noise)), &opt).unwrap().report;
            drops[k].push(r.hardening_drop());
        }
    }
    let (g, u) = (median(drops[0].clone()), median(drops[1].clone()));
    assert!(g <= u, "gaussian {g} ({:?}) vs uniform {u} ({:?})", drops[0], drops[1]);
}

#[test]
fn strong_penalties_shrink_the_model() {
    let rows = harness::sweep_lambda(
        &ToyTask::default(),
        &toy_cfg(),
        &OptimizerConfig::default(),
        &[1.0, 100.0, 1e4],
        &[8],
    )
    .unwrap();
    let sizes: Vec<f64> = rows.iter().map(|r| r.size_mb).collect();
    assert!(sizes.windows(2).all(|w| w[1] <= w[0]), "{sizes:?}");
    assert!(sizes[2] < sizes[0], "{sizes:?}");
    assert!(rows[2].mean_bits < rows[0].mean_bits);
}

#[test]
fn group_overhead_falls_with_group_size() {
    // 32 is the largest tensor, so it means one group per tensor.
    let rows = harness::sweep_lambda(
        &ToyTask::default(),
        &toy_cfg(),
        &OptimizerConfig::default(),
        &[100.0],
        &[1, 8, 32],
    )
    .unwrap();
    let overhead: Vec<u64> = rows.iter().map(|r| r.overhead_bits).collect();
    assert!(overhead.windows(2).all(|w| w[1] < w[0]), "{overhead:?}");
    assert_eq!(rows.iter().map(|r| r.g).collect::<Vec<_>>(), vec![1, 8, 32]);
}

#[test]
fn sweep_edge_cases() {
    let task = ToyTask {
        epochs: 2,
        ..ToyTask::default()
    };
    let opt = OptimizerConfig::default();
    assert_eq!(harness::sweep_lambda(&task, &toy_cfg(), &opt, &[0.1], &[8]).unwrap().len(), 1);
    assert!(harness::sweep_lambda(&task, &toy_cfg(), &opt, &[], &[8]).is_err());
}

#[test]
fn divergence_reports_the_epoch() {
    let opt = OptimizerConfig {
        kind: OptimizerKind::Sgd,
        lr: 1e300,
        momentum: 0.0,
        ..OptimizerConfig::default()
    };
    let err = harness::train_toy(&ToyTask::default(), &Method::Fp32, &opt).err().unwrap();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn pqn_settles_on_target() {
    let traj = harness::run_lms(&LmsConfig {
        method: LmsMethod::Pqn,
        noise: NoiseKind::Uniform,
        lr: 0.05,
        steps: 10_000,
        ..LmsConfig::default()
    })
    .unwrap();
    let mean = traj.points[traj.points.len() - 1000..].iter().map(|p| p.w).sum::<f64>() / 1000.0;
    assert!((mean - 0.11).abs() < 0.01, "{mean}");
}

fn q(w: f64, bits: u32) -> f64 {
    let levels = (2f64).powi(bits as i32) - 1.0;
    (w * levels).round() / levels
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectories_stay_in_domain(
        w_star in 0.0f64..=1.0,
        bits in 1u32..=8,
        lr in 0.0f64..2.0,
        steps in 0usize..300,
        pqn in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let cfg = LmsConfig {
            w_star,
            bits,
            lr,
            steps,
            method: if pqn { LmsMethod::Pqn } else { LmsMethod::Ste },
            seed,
            ..LmsConfig::default()
        };
        let t = harness::run_lms(&cfg).unwrap();
        prop_assert_eq!(t.points.len(), steps + 1);
        prop_assert_eq!(t.points[0].w, w_star);
        for p in &t.points {
            prop_assert!((0.0..=1.0).contains(&p.w));
            prop_assert!((p.q_w - q(p.w, bits)).abs() < 1e-12);
        }
    }

    #[test]
    fn ste_never_moves_off_a_grid_target(k in 0u32..16, lr in 0.0f64..1.0) {
        let w_star = k as f64 / 15.0;
        let t = harness::run_lms(&LmsConfig { w_star, lr, steps: 50, ..LmsConfig::default() }).unwrap();
        prop_assert!(t.points.iter().all(|p| p.w == w_star));
        prop_assert!(!harness::detect_oscillation(&t, 25).unwrap().oscillating);
    }

    #[test]
    fn noisy_gradient_mean_is_the_true_gradient(
        w in 0.0f64..=1.0,
        w_star in 0.0f64..=1.0,
        sigma2 in 0.1f64..4.0,
        seed in any::<u64>(),
    ) {
        let (m, se) = harness::mc_gradient_estimate(w, w_star, 3.0, sigma2, NoiseKind::Gaussian, 20_000, seed).unwrap();
        prop_assert!((m - sigma2 * (w - w_star)).abs() < 5.0 * se, "{} vs {}", m, sigma2 * (w - w_star));
    }
}
