use gapfill::autodiff::{finite_difference, relative_error};
use gapfill::training::{gradient_check, Sample};
use gapfill::var_solver::{
    cost, grad_cost, ConvNetPrior, ConvNetShape, PriorModel, Problem, SolverSpec,
    VariationalModel,
};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "support/quadratic.rs"]
mod quadratic;

use quadratic::{instance, Quadratic};

fn random_state(seed: u64, dims: (usize, usize, usize)) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    Array3::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn priors(seed: u64) -> Vec<PriorModel> {
    vec![
        PriorModel::Zero,
        PriorModel::Diffusion { nu: 0.3 },
        PriorModel::ConvNet(ConvNetPrior::new(
            ConvNetShape {
                channels: 4,
                kt: 3,
                k: 3,
            },
            seed,
        )),
    ]
}

#[test]
fn cost_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let inst = instance(seed, (2, 8, 8), 0.4, seed % 2 == 1);
        let p = Problem::new(&inst.y, &inst.ocean).unwrap();
        let x = random_state(seed, (2, 8, 8));
        for prior in priors(seed) {
            let g = grad_cost(&x, &p, &prior, 1.3, 0.7).unwrap();
            let fd = finite_difference(x.as_slice().unwrap(), 1e-4, |v| {
                let xs = Array3::from_shape_vec((2, 8, 8), v.to_vec()).unwrap();
                cost(&xs, &p, &prior, 1.3, 0.7).unwrap()
            });
            let err = relative_error(g.as_slice().unwrap(), &fd);
            assert!(err < 1e-5, "seed {seed} prior {}: {err:e}", prior.kind());
        }
    }
}

fn toy_sample(seed: u64) -> Sample {
    let inst = instance(seed, (2, 8, 8), 0.3, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    Sample::from_target(&inst.y, &inst.ocean, |_| {
        Array2::from_shape_fn((8, 8), |_| rng.random::<f64>() < 0.4)
    })
}

#[test]
fn unrolled_training_gradient_matches_finite_differences() {
    let prior = PriorModel::ConvNet(ConvNetPrior::new(
        ConvNetShape {
            channels: 3,
            kt: 3,
            k: 3,
        },
        5,
    ));
    let mut spec = SolverSpec::learned(3, 0.2, 2, 6);
    if let gapfill::var_solver::UpdateRule::Learned(l) = &mut spec.update {
        // Nonzero output map so every parameter influences the loss.
        l.wt = gapfill::autodiff::Tensor::new(vec![1, 2, 1, 1, 1], vec![0.3, -0.2]);
    }
    let model = VariationalModel::new(prior, spec).unwrap();
    let err = gradient_check(&model, &toy_sample(1), 1e-5, None).unwrap();
    assert!(err < 1e-5, "{err:e}");

    let plain = VariationalModel::new(
        PriorModel::ConvNet(ConvNetPrior::new(ConvNetShape::default(), 2)),
        SolverSpec::plain(1.0, 1.0, 3, 0.1),
    )
    .unwrap();
    let err = gradient_check(&plain, &toy_sample(2), 1e-5, None).unwrap();
    assert!(err < 1e-5, "{err:e}");
}

fn linear_priors() -> [(PriorModel, Option<f64>); 2] {
    [
        (PriorModel::Zero, None),
        (PriorModel::Diffusion { nu: 0.5 }, Some(0.5)),
    ]
}

#[test]
fn library_cost_equals_dense_quadratic() {
    let inst = instance(3, (3, 6, 7), 0.3, true);
    let p = Problem::new(&inst.y, &inst.ocean).unwrap();
    let x = random_state(4, (3, 6, 7));
    for (prior, nu) in linear_priors() {
        let q = Quadratic::build(&inst, nu, 0.8, 1.7);
        let u = cost(&x, &p, &prior, 0.8, 1.7).unwrap();
        assert!((u - q.value(x.as_slice().unwrap())).abs() < 1e-10 * u.max(1.0));
    }
}

#[test]
fn plain_solver_reaches_conjugate_gradient_minimum() {
    for seed in 0..10 {
        let inst = instance(seed, (3, 16, 16), 0.3, seed % 3 == 0);
        let p = Problem::new(&inst.y, &inst.ocean).unwrap();
        for (prior, nu) in linear_priors() {
            let q = Quadratic::build(&inst, nu, 1.0, 1.0);
            let best = q.value(&q.conjugate_gradient());
            let alpha = 1.0 / q.lipschitz();
            let model =
                VariationalModel::new(prior.clone(), SolverSpec::plain(1.0, 1.0, 500, alpha)).unwrap();
            let x = model.solve(&p).unwrap();
            let u = cost(&x, &p, &prior, 1.0, 1.0).unwrap();
            let rel = (u - best).abs() / best.abs();
            assert!(rel < 1e-6, "seed {seed} prior {}: {rel:e}", prior.kind());
            let grad = grad_cost(&x, &p, &prior, 1.0, 1.0).unwrap();
            let gmin = grad_cost(
                &Array3::from_shape_vec((3, 16, 16), q.conjugate_gradient()).unwrap(),
                &p,
                &prior,
                1.0,
                1.0,
            )
            .unwrap();
            assert!(gmin.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8);
            assert!(grad.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn small_step_cost_never_increases() {
    let inst = instance(7, (2, 10, 10), 0.35, true);
    let p = Problem::new(&inst.y, &inst.ocean).unwrap();
    let (prior, nu) = (PriorModel::Diffusion { nu: 0.4 }, Some(0.4));
    let q = Quadratic::build(&inst, nu, 1.0, 2.0);
    let alpha = 0.99 / q.lipschitz();
    let mut last = f64::INFINITY;
    for k in 1..=40 {
        let model = VariationalModel::new(prior.clone(), SolverSpec::plain(1.0, 2.0, k, alpha)).unwrap();
        let u = cost(&model.solve(&p).unwrap(), &p, &prior, 1.0, 2.0).unwrap();
        assert!(u <= last + 1e-12, "iteration {k}: {u} > {last}");
        last = u;
    }
}

#[test]
fn scaling_both_weights_scales_cost_and_keeps_argmin() {
    let inst = instance(11, (2, 8, 8), 0.3, false);
    let p = Problem::new(&inst.y, &inst.ocean).unwrap();
    let x = random_state(12, (2, 8, 8));
    for c in [0.1, 3.0, 17.0] {
        for prior in priors(1) {
            let u = cost(&x, &p, &prior, 0.6, 1.1).unwrap();
            let uc = cost(&x, &p, &prior, 0.6 * c, 1.1 * c).unwrap();
            assert!((uc - c * u).abs() < 1e-12 * uc.abs().max(1.0));
            let g = grad_cost(&x, &p, &prior, 0.6, 1.1).unwrap();
            let gc = grad_cost(&x, &p, &prior, 0.6 * c, 1.1 * c).unwrap();
            for (a, b) in g.iter().zip(&gc) {
                assert!((b - c * a).abs() < 1e-12 * b.abs().max(1.0));
            }
        }
        for (_, nu) in linear_priors() {
            let a = Quadratic::build(&inst, nu, 0.6, 1.1).conjugate_gradient();
            let b = Quadratic::build(&inst, nu, 0.6 * c, 1.1 * c).conjugate_gradient();
            assert!(relative_error(&a, &b) < 1e-9);
        }
    }
}
