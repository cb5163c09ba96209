//! Stability boundaries of plain and heavy-ball gradient descent on
//! quadratics, and the training loop's divergence detector.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use warmup_core::harness::{train, RunStatus, TrainConfig};
use warmup_core::optim::{apply_step, OptimizerConfig, OptimizerState};
use warmup_core::probe::{sharpness, EigConfig};
use warmup_core::{QuadraticOracle, RngStream, Samples, ScheduleSpec, SymMatrix};

/// Runs `steps` iterations from `theta0`; true when the iterates blow up.
fn blows_up(q: &QuadraticOracle, opt: &OptimizerConfig, lr: f64, steps: usize) -> bool {
    let mut theta = vec![1.0; q.a.dim()];
    let mut state = OptimizerState::init(opt, theta.len(), None, None).unwrap();
    for _ in 0..steps {
        let g = q.a.matvec(&theta);
        apply_step(opt, &mut state, &mut theta, &g, lr);
    }
    !(theta.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e3)
}

/// Bisects the divergence boundary between `lo` (stable) and `hi`.
fn boundary(q: &QuadraticOracle, opt: &OptimizerConfig, mut lo: f64, mut hi: f64) -> f64 {
    assert!(!blows_up(q, opt, lo, 20_000) && blows_up(q, opt, hi, 20_000));
    while hi - lo > 1e-5 {
        let mid = 0.5 * (lo + hi);
        if blows_up(q, opt, mid, 20_000) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn quadratics() -> Vec<QuadraticOracle> {
    let mut rng = RngStream::new(12);
    let mut out = vec![
        QuadraticOracle::diagonal(&[4.0, 1.0]),
        QuadraticOracle::diagonal(&[10.0, 3.0, 0.5]),
    ];
    // A non-diagonal positive definite instance: BᵀB + I.
    let b: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(4)).collect();
    out.push(QuadraticOracle::new(SymMatrix::from_fn(4, |i, j| {
        (0..4).map(|k| b[k][i] * b[k][j]).sum::<f64>() + if i == j { 1.0 } else { 0.0 }
    })));
    out
}

#[test]
fn gd_boundary_is_two_over_lambda() {
    for q in quadratics() {
        let lambda = sharpness(
            &q,
            &vec![0.0; q.a.dim()],
            &EigConfig::default(),
            &mut RngStream::new(0),
            None,
        )
        .unwrap()
        .value;
        let b = boundary(&q, &OptimizerConfig::sgd(), 0.5 / lambda, 4.0 / lambda);
        assert!(
            (b - 2.0 / lambda).abs() <= 1e-3,
            "boundary {b} vs {}",
            2.0 / lambda
        );
    }
}

#[test]
fn heavy_ball_boundary() {
    for beta in [0.5, 0.9] {
        for q in quadratics() {
            let lambda = sharpness(
                &q,
                &vec![0.0; q.a.dim()],
                &EigConfig::default(),
                &mut RngStream::new(0),
                None,
            )
            .unwrap()
            .value;
            let want = (2.0 + 2.0 * beta) / lambda;
            let b = boundary(&q, &OptimizerConfig::sgdm(beta), 0.5 * want, 1.5 * want);
            assert!(
                (b - want).abs() <= 1e-3,
                "beta {beta}: boundary {b} vs {want}"
            );
        }
    }
}

#[test]
fn divergence_detector_matches_two_over_lambda() {
    // λ_max = 4: the detector's boundary on a 10⁻³ grid sits within one
    // step of 0.5.
    let q = QuadraticOracle::diagonal(&[4.0, 1.0]);
    let empty = Samples::empty();
    let status = |lr: f64| {
        let cfg = TrainConfig {
            schedule: ScheduleSpec::constant(lr),
            steps: 20_000,
            probe_every: 0,
            eval_every: 0,
            ..Default::default()
        };
        train(&q, &empty, &empty, &[1.0, 1.0], &cfg)
            .unwrap()
            .summary
            .status
    };
    let grid: Vec<f64> = (400..=600).map(|k| k as f64 * 1e-3).collect();
    let first_diverged = grid
        .iter()
        .copied()
        .find(|&lr| status(lr) == RunStatus::Diverged)
        .unwrap();
    assert!(
        (first_diverged - 0.5).abs() <= 1e-3 + 1e-12,
        "first diverged lr {first_diverged}"
    );
    assert!(grid
        .iter()
        .filter(|&&lr| lr < first_diverged)
        .all(|&lr| status(lr) == RunStatus::Converged));
}
