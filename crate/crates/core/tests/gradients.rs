//! Backprop and Hessian-vector products against derivative-free oracles.

use ndarray::Array2;
use warmup_core::numerics::{dense_top_eig, dot, norm};
use warmup_core::probe::{hvp, sharpness, EigConfig};
use warmup_core::{
    Bound, Fcn, LossKind, Model, NetworkSpec, Objective, Parameterization, QuadraticOracle,
    RngStream, Samples, SymMatrix,
};

fn instance(seed: u64) -> (Fcn, Samples, Vec<f64>) {
    let mut rng = RngStream::new(seed);
    let parameterization = [
        Parameterization::Sp,
        Parameterization::Mup,
        Parameterization::SimpleMup,
    ][seed as usize % 3];
    let loss = if seed.is_multiple_of(2) {
        LossKind::Mse
    } else {
        LossKind::Xent
    };
    let spec = NetworkSpec {
        depth: 2 + (seed as usize % 3),
        width: 6 + (seed as usize % 5),
        in_dim: 5,
        out_dim: 3,
        parameterization,
        ..Default::default()
    };
    let model = Fcn::new(spec, loss).unwrap();
    let mut theta = model.init_params(&mut rng).values;
    // Nonzero biases so every parameter block is exercised.
    for layer in &model.layout().layers {
        for b in &mut theta[layer.bias_range()] {
            *b = 0.1 * rng.standard_normal();
        }
    }
    let n = 12;
    let x = Array2::from_shape_fn((n, 5), |_| rng.standard_normal());
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    (model, Samples::classification(x, labels, 3).unwrap(), theta)
}

#[test]
fn directional_derivatives_match_central_differences() {
    let h = 1e-4;
    for seed in 0..20 {
        let (model, data, theta) = instance(seed);
        let (_, g) = model.loss_and_grad(&theta, &data);
        let v = RngStream::new(1000 + seed).unit_vector(theta.len());
        let shifted = |s: f64| -> f64 {
            let p: Vec<f64> = theta.iter().zip(&v).map(|(t, d)| t + s * d).collect();
            model.loss(&p, &data)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let analytic = dot(&g, &v);
        let rel = (fd - analytic).abs() / analytic.abs().max(1e-12);
        assert!(
            rel <= 1e-5,
            "seed {seed}: fd {fd} vs backprop {analytic} (rel {rel:e})"
        );
    }
}

#[test]
fn hvp_is_exact_on_quadratics() {
    let a = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
    let q = QuadraticOracle::new(a);
    for eps in [1e-1, 1e-4, 1e-7] {
        assert_eq!(
            hvp(&q, &[0.3, -2.0], &[1.0, 0.0], eps).unwrap(),
            vec![2.0, 1.0]
        );
    }
    let mut rng = RngStream::new(4);
    let q = QuadraticOracle::new(SymMatrix::random(&mut rng, 9));
    let theta = rng.normal_vec(9);
    let v = rng.normal_vec(9);
    let once = hvp(&q, &theta, &v, 1e-4).unwrap();
    let twice = hvp(
        &q,
        &theta,
        &v.iter().map(|x| 2.0 * x).collect::<Vec<_>>(),
        1e-4,
    )
    .unwrap();
    assert_eq!(twice, once.iter().map(|x| 2.0 * x).collect::<Vec<_>>());
}

/// Hides the closed-form curvature so `hvp` takes the finite-difference path.
struct GradientOnly<'a>(&'a QuadraticOracle);

impl Objective for GradientOnly<'_> {
    fn dim(&self) -> usize {
        Objective::dim(self.0)
    }
    fn loss(&self, theta: &[f64]) -> f64 {
        Objective::loss(self.0, theta)
    }
    fn loss_and_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        Objective::loss_and_grad(self.0, theta)
    }
}

#[test]
fn finite_difference_hvp_on_quadratics_is_rounding_limited() {
    let mut rng = RngStream::new(4);
    let a = SymMatrix::random(&mut rng, 9);
    let q = QuadraticOracle::new(a.clone());
    let theta = rng.normal_vec(9);
    let v = rng.normal_vec(9);
    let want = a.matvec(&v);
    for eps in [1e-2, 1e-4] {
        let got = hvp(&GradientOnly(&q), &theta, &v, eps).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-9 * norm(&want), "eps {eps}: {g} vs {w}");
        }
    }
}

#[test]
fn hvp_error_is_second_order_in_eps() {
    let (model, data, theta) = instance(0);
    let obj = Bound::new(&model, &data).unwrap();
    let v = RngStream::new(77).unit_vector(theta.len());
    let eps = 2e-2;
    let h1 = hvp(&obj, &theta, &v, eps).unwrap();
    let h2 = hvp(&obj, &theta, &v, eps / 2.0).unwrap();
    let h4 = hvp(&obj, &theta, &v, eps / 4.0).unwrap();
    let diff =
        |a: &[f64], b: &[f64]| norm(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
    let ratio = diff(&h1, &h2) / diff(&h2, &h4);
    assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
}

/// Dense Hessian from loss values only (no gradients).
fn hessian_from_losses(obj: &dyn Objective, theta: &[f64], h: f64) -> SymMatrix {
    let n = theta.len();
    let f = |di: usize, si: f64, dj: usize, sj: f64| {
        let mut p = theta.to_vec();
        p[di] += si * h;
        p[dj] += sj * h;
        obj.loss(&p)
    };
    let f0 = obj.loss(theta);
    SymMatrix::from_fn(n, |i, j| {
        if i == j {
            let mut p = theta.to_vec();
            p[i] += h;
            let up = obj.loss(&p);
            p[i] -= 2.0 * h;
            (up - 2.0 * f0 + obj.loss(&p)) / (h * h)
        } else {
            (f(i, 1.0, j, 1.0) - f(i, 1.0, j, -1.0) - f(i, -1.0, j, 1.0) + f(i, -1.0, j, -1.0))
                / (4.0 * h * h)
        }
    })
}

#[test]
fn fcn_sharpness_matches_dense_hessian() {
    let mut rng = RngStream::new(21);
    let spec = NetworkSpec {
        depth: 3,
        width: 10,
        in_dim: 6,
        out_dim: 3,
        ..Default::default()
    };
    let model = Fcn::new(spec, LossKind::Mse).unwrap();
    let theta = model.init_params(&mut rng).values;
    assert!((190..=220).contains(&theta.len()));
    let x = Array2::from_shape_fn((16, 6), |_| rng.standard_normal());
    let y = Array2::from_shape_fn((16, 3), |_| rng.standard_normal());
    let data = Samples::regression(x, y).unwrap();
    let obj = Bound::new(&model, &data).unwrap();

    let dense = hessian_from_losses(&obj, &theta, 1e-4);
    let (want, _) = dense_top_eig(&dense).unwrap();
    let est = sharpness(
        &obj,
        &theta,
        &EigConfig::default(),
        &mut RngStream::new(3),
        None,
    )
    .unwrap();
    assert!(est.converged);
    let rel = (est.value - want).abs() / want.abs();
    assert!(
        rel <= 1e-4,
        "power {} vs dense {want} (rel {rel:e})",
        est.value
    );
}

#[test]
fn deep_linear_chain_hessian() {
    // L(w₁, w₂) = (w₂w₁x - y)² on a single sample, with a 1-1-1 network
    // and positive pre-activations so the ReLU is the identity.
    let spec = NetworkSpec {
        depth: 2,
        width: 1,
        in_dim: 1,
        out_dim: 1,
        ..Default::default()
    };
    let model = Fcn::new(spec, LossKind::Mse).unwrap();
    let layout = model.layout().clone();
    let (w1, w2, x, y) = (0.8, 1.3, 1.5, 0.2);
    let mut theta = vec![0.0; layout.len];
    theta[layout.layers[0].weight_range()][0] = w1;
    theta[layout.layers[1].weight_range()][0] = w2;
    let data =
        Samples::regression(Array2::from_elem((1, 1), x), Array2::from_elem((1, 1), y)).unwrap();
    let obj = Bound::new(&model, &data).unwrap();

    // Closed-form Hessian over (w₁, b₁, w₂, b₂), r = w₂(w₁x + b₁) + b₂ - y.
    let h = w1 * x;
    let r = w2 * h - y;
    let idx = [
        layout.layers[0].weight_range().start,
        layout.layers[0].bias_range().start,
        layout.layers[1].weight_range().start,
        layout.layers[1].bias_range().start,
    ];
    let d = [w2 * x, w2, h, 1.0];
    let mut exact = SymMatrix::from_fn(4, |i, j| 2.0 * d[i] * d[j]);
    exact.set(0, 2, exact.get(0, 2) + 2.0 * r * x);
    exact.set(1, 2, exact.get(1, 2) + 2.0 * r);
    let (want, _) = dense_top_eig(&exact).unwrap();

    let embedded = |v: &[f64]| -> Vec<f64> {
        let mut full = vec![0.0; layout.len];
        for (k, &i) in idx.iter().enumerate() {
            full[i] = v[k];
        }
        let hv = hvp(&obj, &theta, &full, 1e-5).unwrap();
        idx.iter().map(|&i| hv[i]).collect()
    };
    for k in 0..4 {
        let mut e = vec![0.0; 4];
        e[k] = 1.0;
        let col = embedded(&e);
        for (i, c) in col.iter().enumerate() {
            assert!(
                (c - exact.get(i, k)).abs() < 1e-6,
                "H[{i},{k}] = {c}, want {}",
                exact.get(i, k)
            );
        }
    }
    let est = warmup_core::probe::top_eigen(
        |v| Ok(embedded(v)),
        4,
        &mut RngStream::new(0),
        &EigConfig::default(),
        None,
    )
    .unwrap();
    assert!((est.value - want).abs() < 1e-6 * want.abs().max(1.0));
}
