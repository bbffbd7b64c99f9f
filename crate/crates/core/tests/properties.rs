//! Randomized structural properties: norm inequalities, transpose dualities,
//! partition re-verification, and linearity of the solvers.

use nalgebra::DMatrix;
use proptest::prelude::*;

use svie_core::ebsvie::{solve_ebsvie, DualityData};
use svie_core::fields::TriField;
use svie_core::forward::{simulate_brownian, solve_closed_loop_direct};
use svie_core::grid::TimeGrid;
use svie_core::instances::{random_instance, InstanceRng, KernelFlavor};
use svie_core::kernels::{KernelSpec, SampleMode};
use svie_core::lyapunov::PiSpec;
use svie_core::norms::{discrete_norms, find_partition, subinterval_bound, wellposedness_constant};
use svie_core::pi::{assemble_rint, lint, rint};

fn random_field(rng: &mut InstanceRng, n: usize, rows: usize, cols: usize) -> TriField {
    let mut f = TriField::zeros(n, rows, cols, false);
    for i in 1..=n {
        for j in 0..i {
            f.set(i, j, rng.matrix(rows, cols, 1.0));
        }
    }
    f
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cauchy_schwarz_bound_on_rint(seed in 0u64..1_000_000, n in 2usize..7, d in 1usize..3) {
        let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
        let mut rng = InstanceRng::new(seed);
        let p = PiSpec::random(rng.uniform(0.0, 1e6) as u64, d).sample(&grid);
        let m = random_field(&mut rng, n, d, d);
        let composed = assemble_rint(&p, &m, &grid);
        let lhs = discrete_norms(&composed, &grid).unwrap().l2_triangle;
        let bound = p.norm(&grid) * discrete_norms(&m, &grid).unwrap().l2_triangle;
        prop_assert!(lhs <= bound * (1.0 + 1e-9) + 1e-12, "lhs {lhs} bound {bound}");
    }

    #[test]
    fn lint_is_transpose_dual_to_rint(seed in 0u64..1_000_000, n in 2usize..7, d in 1usize..3) {
        let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
        let mut rng = InstanceRng::new(seed);
        let p = PiSpec::random(rng.uniform(0.0, 1e6) as u64, d).sample(&grid);
        let m = random_field(&mut rng, n, d, d);
        let mt = m.map(|b| b.transpose());
        for k in 0..n {
            let left = lint(&m, &p, k, &grid);
            let right = rint(&p, &mt, k, &grid);
            for (a, b) in left.iter().zip(right.iter()) {
                prop_assert!((a - b.transpose()).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_spec_modes_agree(seed in 0u64..1_000_000, n in 2usize..9) {
        let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
        let mut rng = InstanceRng::new(seed);
        let spec = KernelSpec::Constant(rng.matrix(2, 2, 1.0));
        let point = spec.sample(&grid, SampleMode::Point).unwrap();
        let avg = spec.sample(&grid, SampleMode::CellAverage).unwrap();
        for (i, j, v) in point.iter_strict() {
            let w = avg.get(i, j);
            prop_assert!((v - w).amax() <= 1e-6 * (1.0 + w.amax()));
        }
    }

    #[test]
    fn partitions_reverify_the_half_bound(a in 0.0f64..2.5, c in 0.0f64..1.5, n in 16usize..48) {
        let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
        let a_spec = KernelSpec::Constant(DMatrix::from_element(1, 1, a));
        let c_spec = KernelSpec::Constant(DMatrix::from_element(1, 1, c));
        match find_partition(&a_spec, &c_spec, &grid) {
            Err(_) => {} // too coarse for these sizes; nothing to re-verify
            Ok(cuts) => {
                prop_assert_eq!(cuts[0], 0);
                prop_assert_eq!(*cuts.last().unwrap(), n);
                let a_field = a_spec.sample(&grid, SampleMode::Point).unwrap();
                let c_field = c_spec.sample(&grid, SampleMode::Point).unwrap();
                for w in cuts.windows(2) {
                    let b = subinterval_bound(&a_field, &c_field, &grid, w[0], w[1]);
                    prop_assert!(b <= 0.5 + 1e-12, "bound {b} on [{}, {}]", w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn wellposedness_constant_is_monotone(m in 1usize..30, l in 0.0f64..5.0) {
        let base = wellposedness_constant(m, l);
        prop_assert!(wellposedness_constant(m + 1, l) >= base);
        prop_assert!(wellposedness_constant(m, l + 0.1) >= base);
        prop_assert!(base >= 2.0);
    }

    #[test]
    fn ebsvie_is_linear_in_data(seed in 0u64..1_000_000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let inst = random_instance(seed, 1, 1, KernelFlavor::Smooth).sample(6).unwrap();
        let mut rng = InstanceRng::new(seed ^ 0x5bd1e995);
        let d1 = DualityData {
            psi: (0..=6).map(|_| rng.matrix(1, 1, 1.0)).collect(),
            chi: random_field(&mut rng, 6, 1, 1),
        };
        let d2 = DualityData {
            psi: (0..=6).map(|_| rng.matrix(1, 1, 1.0)).collect(),
            chi: random_field(&mut rng, 6, 1, 1),
        };
        let mix = DualityData {
            psi: d1.psi.iter().zip(&d2.psi).map(|(a, b)| a * alpha + b * beta).collect(),
            chi: {
                let mut f = TriField::zeros(6, 1, 1, false);
                for i in 1..=6usize {
                    for j in 0..i {
                        f.set(i, j, d1.chi.get(i, j) * alpha + d2.chi.get(i, j) * beta);
                    }
                }
                f
            },
        };
        let s1 = solve_ebsvie(&inst.kernels, &inst.strategy, &d1, 0).unwrap();
        let s2 = solve_ebsvie(&inst.kernels, &inst.strategy, &d2, 0).unwrap();
        let sm = solve_ebsvie(&inst.kernels, &inst.strategy, &mix, 0).unwrap();
        for j in 0..=6usize {
            for i in j..=6usize {
                let want = s1.eta.get(i, j) * alpha + s2.eta.get(i, j) * beta;
                prop_assert!((sm.eta.get(i, j) - want).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_loop_scales_with_the_free_term(seed in 0u64..1_000_000, alpha in -3.0f64..3.0) {
        // kernels fixed, (x, b, sigma, v) == (x, 0, 0, 0) scaled by alpha
        let mut spec = random_instance(seed, 1, 1, KernelFlavor::Smooth);
        spec.kernels.drift = KernelSpec::zero(1, 1);
        spec.kernels.sigma = KernelSpec::zero(1, 1);
        spec.v = svie_core::kernels::NodeFn::Zero { rows: 1, cols: 1 };
        let inst = spec.sample(8).unwrap();
        let path = simulate_brownian(9, seed, &inst.grid);
        let base = solve_closed_loop_direct(&inst.kernels, &inst.strategy, &inst.input, &path).unwrap();
        let scaled_input = svie_core::forward::InputCondition::new(
            0,
            inst.input.x.iter().map(|m| m * alpha).collect(),
        );
        let scaled =
            solve_closed_loop_direct(&inst.kernels, &inst.strategy, &scaled_input, &path).unwrap();
        for i in 0..=8usize {
            prop_assert!((&scaled.x[i] - &base.x[i] * alpha).amax() < 1e-12);
            prop_assert!((&scaled.u[i] - &base.u[i] * alpha).amax() < 1e-12);
        }
    }
}
