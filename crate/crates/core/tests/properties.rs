use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdeguard_core::autodiff::{exact_generator_trace, hessian_vector_product, input_gradient, ScalarField};
use sdeguard_core::dynamics::{make_system, Controller, SdeModel, SystemOptions};
use sdeguard_core::generator::vector_identity_trace;
use sdeguard_core::kernel::KernelController;
use sdeguard_core::nets::{Activation, ClassKNet, ControllerNet, ModelDoc, PotentialNet};
use sdeguard_core::projection::{project_safe, project_stable, LinearClassK};

fn potential(d: usize, seed: u64) -> PotentialNet {
    PotentialNet::new(&[d, 8, 8, 1], 1e-3, 2.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn controller(d: usize, seed: u64) -> ControllerNet {
    ControllerNet::new(&[d, 8, 8, d], Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn point(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, d)
}

fn shifted(x: &[f64], i: usize, h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[i] += h;
    y
}

/// Central differences of `field` along each axis.
fn numeric_gradient(field: &dyn ScalarField, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| (field.value(&shifted(x, i, h)) - field.value(&shifted(x, i, -h))) / (2.0 * h))
        .collect()
}

/// Hessian from second central differences.
fn numeric_hessian(field: &dyn ScalarField, x: &[f64], h: f64) -> DMatrix<f64> {
    let d = x.len();
    DMatrix::from_fn(d, d, |i, j| {
        let pp = field.value(&shifted(&shifted(x, i, h), j, h));
        let pm = field.value(&shifted(&shifted(x, i, h), j, -h));
        let mp = field.value(&shifted(&shifted(x, i, -h), j, h));
        let mm = field.value(&shifted(&shifted(x, i, -h), j, -h));
        (pp - pm - mp + mm) / (4.0 * h * h)
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn input_gradient_matches_differences(seed in 0u64..1000, x in point(4)) {
        let v = potential(4, seed);
        let g = input_gradient(&v, &x).unwrap();
        let n = numeric_gradient(&v, &x, 1e-6);
        for (a, b) in g.iter().zip(&n) {
            prop_assert!(close(*a, *b, 1e-6), "{a} vs {b}");
        }
    }

    #[test]
    fn hvp_matches_numeric_hessian(seed in 0u64..1000, x in point(3), w in point(3)) {
        let v = potential(3, seed);
        let hv = hessian_vector_product(&v, &x, &w).unwrap();
        let h = numeric_hessian(&v, &x, 1e-4);
        let want = &h * DMatrix::from_column_slice(3, 1, &w);
        for i in 0..3 {
            prop_assert!(close(hv[i], want[i], 1e-4), "{} vs {}", hv[i], want[i]);
        }
    }

    #[test]
    fn exact_trace_matches_numeric_hessian(seed in 0u64..1000, x in point(3), gv in prop::collection::vec(-1.0f64..1.0, 6)) {
        let v = potential(3, seed);
        let g = Array2::from_shape_vec((3, 2), gv.clone()).unwrap();
        let tr = exact_generator_trace(&v, &x, &g).unwrap();
        let gm = DMatrix::from_row_slice(3, 2, &gv);
        let want = (gm.transpose() * numeric_hessian(&v, &x, 1e-4) * &gm).trace();
        prop_assert!(close(tr, want, 1e-4), "{tr} vs {want}");
    }

    #[test]
    fn vector_identity_equals_exact_trace(seed in 0u64..1000, x in point(4), g in prop::collection::vec(-1.0f64..1.0, 4)) {
        let v = potential(4, seed);
        let a = vector_identity_trace(&v, &x, &g).unwrap();
        let b = exact_generator_trace(&v, &x, &Array2::from_shape_vec((4, 1), g).unwrap()).unwrap();
        prop_assert!(close(a, b, 1e-10), "{a} vs {b}");
    }

    #[test]
    fn stability_projection_is_feasible_and_minimal(seed in 0u64..1000, x in point(4)) {
        let sys = make_system("double_pendulum", &SystemOptions::default()).unwrap();
        let (u, v) = (controller(4, seed), potential(4, seed + 1));
        let p = project_stable(&u, &v, -0.1, sys.model.as_ref(), &x).unwrap();
        let scale = 1.0 + p.residual_before.abs();
        prop_assert!(p.residual_after <= 1e-9 * scale, "{}", p.residual_after);
        if p.residual_before <= 0.0 {
            prop_assert_eq!(p.correction_norm, 0.0);
        } else if !p.degenerate {
            // a single step along the gradient is the smallest feasible change
            let grad = input_gradient(&v, &x).unwrap();
            let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            prop_assert!(close(p.correction_norm, p.residual_before / norm, 1e-9));
        }
    }

    #[test]
    fn safety_projection_is_feasible(seed in 0u64..1000, r in 0.0f64..1.99, w in 0.0f64..6.28, rest in point(2)) {
        let sys = make_system("bicycle", &SystemOptions::default()).unwrap();
        let x = [r * w.cos(), r * w.sin(), rest[0], rest[1]];
        let u = controller(4, seed);
        let p = project_safe(&u, sys.safe_region.barrier.as_ref(), &LinearClassK(1.0), sys.model.as_ref(), &x).unwrap();
        prop_assert!(p.residual_after >= -1e-9 * (1.0 + p.residual_before.abs()), "{}", p.residual_after);
        if p.residual_before >= 0.0 {
            prop_assert_eq!(&p.u, &u.control(0.0, &x).unwrap());
        }
    }

    #[test]
    fn controller_vanishes_at_origin_and_respects_mask(seed in 0u64..1000, x in point(4)) {
        let u = controller(4, seed).with_mask(vec![false, false, true, true]).unwrap();
        prop_assert!(u.eval(&[0.0; 4]).unwrap().iter().all(|&v| v == 0.0));
        let ux = u.eval(&x).unwrap();
        prop_assert_eq!(ux[0], 0.0);
        prop_assert_eq!(ux[1], 0.0);
    }

    #[test]
    fn potential_is_pinned_and_floored(seed in 0u64..1000, x in point(5)) {
        let v = potential(5, seed);
        prop_assert!(v.eval(&[0.0; 5]).unwrap().abs() < 1e-14);
        let floor = 1e-3 * x.iter().map(|a| a * a).sum::<f64>();
        prop_assert!(v.eval(&x).unwrap() >= floor - 1e-14);
    }

    #[test]
    fn class_k_is_increasing(seed in 0u64..1000, a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let k = ClassKNet::new(&[1, 6, 6, 1], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(k.eval(0.0).unwrap(), 0.0);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if hi - lo > 1e-9 {
            prop_assert!(k.eval(lo).unwrap() < k.eval(hi).unwrap());
        }
    }

    #[test]
    fn serialized_models_round_trip(seed in 0u64..1000, x in point(3)) {
        let u = controller(3, seed);
        let u2 = ControllerNet::from_doc(&ModelDoc::from_json(&u.to_doc().to_json().unwrap()).unwrap()).unwrap();
        prop_assert_eq!(u.eval(&x).unwrap(), u2.eval(&x).unwrap());
        let v = potential(3, seed);
        let v2 = PotentialNet::from_doc(&ModelDoc::from_json(&v.to_doc().to_json().unwrap()).unwrap()).unwrap();
        prop_assert_eq!(v.eval(&x).unwrap(), v2.eval(&x).unwrap());
        let k = ClassKNet::new(&[1, 4, 1], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let k2 = ClassKNet::from_doc(&ModelDoc::from_json(&k.to_doc().to_json().unwrap()).unwrap()).unwrap();
        prop_assert_eq!(k.eval(x[0].abs()).unwrap(), k2.eval(x[0].abs()).unwrap());
    }

    #[test]
    fn kernel_weights_are_convex(seed in 0u64..1000, t in 0.0f64..0.99, h in 1e-4f64..10.0) {
        let sys = make_system("three_link", &SystemOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kc = KernelController::from_region(&sys, 30, h, 20.0, &mut rng).unwrap();
        let z = sys.safe_region.sampler.sample_point(&mut rng);
        let (w, _) = kc.weights(&z, t);
        prop_assert!(w.iter().all(|&a| a >= 0.0 && a.is_finite()));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn models_share_the_state_dimension() {
    for name in ["gbm", "double_pendulum", "bicycle", "fhn", "three_link"] {
        let sys = make_system(name, &SystemOptions::default()).unwrap();
        let d = sys.dim();
        assert_eq!(sys.model.state_dim(), d);
        assert_eq!(sys.safe_region.barrier.dim(), d);
        assert_eq!(sys.safe_region.sampler.dim(), d);
        assert_eq!(sys.control_mask.len(), d);
        let model: Arc<dyn SdeModel> = sys.model.clone();
        assert_eq!(model.diffusion(&vec![0.1; d]).nrows(), d);
    }
}
