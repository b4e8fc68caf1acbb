use idp_core::gradients::rel_err;
use idp_core::planners::vin_step;
use idp_core::solvers::{solve, SolverConfig, SolverKind};
use idp_core::tape::Eager;
use idp_core::Tensor;
use proptest::prelude::*;

fn tensor(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::from_vec(shape, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bellman_step_is_monotone_for_nonnegative_kernels(
        v in tensor(&[6, 6], -2.0, 2.0),
        bump in tensor(&[6, 6], 0.0, 1.0),
        r in tensor(&[4, 6, 6], -1.0, 1.0),
        w in tensor(&[4, 1, 3, 3], 0.0, 0.2),
    ) {
        let higher = v.zip_map(&bump, "add", |a, b| a + b).unwrap();
        let lo = vin_step(&mut Eager, &v, &r, &w).unwrap();
        let hi = vin_step(&mut Eager, &higher, &r, &w).unwrap();
        for (a, b) in lo.data().iter().zip(hi.data()) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn equilibrium_does_not_depend_on_the_initial_value(
        v0 in tensor(&[7, 7], -5.0, 5.0),
        r in tensor(&[4, 7, 7], -1.0, 1.0),
        w in tensor(&[4, 1, 3, 3], -0.05, 0.05),
        anderson in any::<bool>(),
    ) {
        let tol = 1e-9;
        let cfg = SolverConfig {
            kind: if anderson { SolverKind::Anderson } else { SolverKind::ForwardIteration },
            max_iter: 500,
            tol,
            ..SolverConfig::forward_default()
        };
        let step = |v: &Tensor| vin_step(&mut Eager, v, &r, &w);
        let from_zero = solve(step, &Tensor::zeros(&[7, 7]), &cfg).unwrap();
        let from_random = solve(step, &v0, &cfg).unwrap();
        prop_assume!(from_zero.converged && from_random.converged);
        prop_assert!(rel_err(&from_zero.solution, &from_random.solution) <= 10.0 * tol);
    }
}
