//! Seeded Monte Carlo estimation of the linear and quadratic functionals.
//! Batches run in parallel, each over a contiguous block of path ids; the
//! merge is a pairwise tree over batch partials in fixed order, so results
//! are bitwise identical under any thread count.

use rayon::prelude::*;

use crate::ebsvie::DualityData;
use crate::error::{Result, SvieError};
use crate::forward::{
    simulate_brownian, solve_closed_loop_direct, BrownianPath, FeedbackSolution,
    InputCondition, Strategy,
};
use crate::grid::TimeGrid;
use crate::kernels::SampledKernels;
use crate::lyapunov::QuadraticWeights;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub n_paths: u64,
    pub seed: u64,
    pub batch_size: u64,
    pub antithetic: bool,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(SvieError::Unsupported("need n_paths >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(SvieError::Unsupported("need batch_size >= 1".into()));
        }
        if self.antithetic && self.n_paths % 2 != 0 {
            return Err(SvieError::Unsupported(
                "antithetic estimation needs an even n_paths".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: u64,
}

fn negated(path: &BrownianPath) -> BrownianPath {
    BrownianPath {
        increments: path.increments.iter().map(|w| -w).collect(),
        seed: path.seed,
        path_id: path.path_id,
    }
}

/// Sum and sum of squares over one block of sample values.
fn batch_partial(
    grid: &TimeGrid,
    cfg: &McConfig,
    ids: std::ops::Range<u64>,
    f: &(impl Fn(&BrownianPath) -> Result<f64> + Sync),
) -> Result<(f64, f64)> {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for id in ids {
        let path = simulate_brownian(cfg.seed, id, grid);
        let tag = |e: SvieError| SvieError::Unsupported(format!("path {id}: {e}"));
        let value = if cfg.antithetic {
            let plus = f(&path).map_err(tag)?;
            let minus = f(&negated(&path)).map_err(tag)?;
            0.5 * (plus + minus)
        } else {
            f(&path).map_err(tag)?
        };
        sum += value;
        sum_sq += value * value;
    }
    Ok((sum, sum_sq))
}

fn tree_sum(parts: &[(f64, f64)]) -> (f64, f64) {
    match parts.len() {
        0 => (0.0, 0.0),
        1 => parts[0],
        len => {
            let (a, b) = parts.split_at(len.div_ceil(2));
            let (s1, q1) = tree_sum(a);
            let (s2, q2) = tree_sum(b);
            (s1 + s2, q1 + q2)
        }
    }
}

/// Runs the estimator for one per-path functional. With antithetics each
/// sample is the average over `(dW, -dW)`, so `n_paths / 2` path ids are
/// consumed and the reported `n` stays `n_paths`.
pub fn estimate(
    grid: &TimeGrid,
    cfg: &McConfig,
    f: impl Fn(&BrownianPath) -> Result<f64> + Sync,
) -> Result<McEstimate> {
    cfg.validate()?;
    let samples = if cfg.antithetic {
        cfg.n_paths / 2
    } else {
        cfg.n_paths
    };
    let batches = samples.div_ceil(cfg.batch_size);
    let partials: Vec<Result<(f64, f64)>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let lo = b * cfg.batch_size;
            let hi = samples.min(lo + cfg.batch_size);
            batch_partial(grid, cfg, lo..hi, &f)
        })
        .collect();
    let mut ordered = Vec::with_capacity(partials.len());
    for p in partials {
        ordered.push(p?);
    }
    let (sum, sum_sq) = tree_sum(&ordered);
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
        n: cfg.n_paths,
    })
}

/// `sum_j <psi[j], X[j]> h + sum_{j < i} <chi[(i,j)], Theta[(i,j)]> h^2`
/// on one sample path, strict indices past the start node.
pub fn linear_functional_path(
    sol: &FeedbackSolution,
    data: &DualityData,
    grid: &TimeGrid,
) -> f64 {
    let n = grid.n;
    let h = grid.h;
    let m0 = sol.start_index;
    let mut out = 0.0;
    for i in (m0 + 1)..=n {
        out += (data.psi[i].transpose() * &sol.x[i])[(0, 0)] * h;
        for r in (m0 + 1)..i {
            out += (data.chi.get(i, r).transpose() * sol.theta.get(i, r))[(0, 0)] * h * h;
        }
    }
    out
}

/// The quadratic functional on one sample path, same index conventions as
/// the exact second-moment evaluation.
pub fn quadratic_functional_path(
    sol: &FeedbackSolution,
    q: &QuadraticWeights,
    grid: &TimeGrid,
) -> f64 {
    let n = grid.n;
    let h = grid.h;
    let m0 = sol.start_index;
    let mut out = 0.0;
    for j in (m0 + 1)..=n {
        let xj = &sol.x[j];
        let mut level = (xj.transpose() * &q.q1[j] * xj)[(0, 0)];
        for i in (j + 1)..=n {
            level += 2.0 * h * (sol.theta.get(i, j).transpose() * q.q2.get(i, j) * xj)[(0, 0)];
        }
        for i1 in (j + 1)..=n {
            let th1 = sol.theta.get(i1, j);
            for i2 in (j + 1)..=n {
                level += h
                    * h
                    * (th1.transpose() * q.q3.get(i1, i2, j) * sol.theta.get(i2, j))[(0, 0)];
            }
        }
        out += level * h;
    }
    out
}

pub fn estimate_linear_functional(
    kernels: &SampledKernels,
    strat: &Strategy,
    data: &DualityData,
    input: &InputCondition,
    cfg: &McConfig,
) -> Result<McEstimate> {
    estimate(&kernels.grid, cfg, |path| {
        let sol = solve_closed_loop_direct(kernels, strat, input, path)?;
        Ok(linear_functional_path(&sol, data, &kernels.grid))
    })
}

pub fn estimate_quadratic_functional(
    kernels: &SampledKernels,
    strat: &Strategy,
    q: &QuadraticWeights,
    input: &InputCondition,
    cfg: &McConfig,
) -> Result<McEstimate> {
    estimate(&kernels.grid, cfg, |path| {
        let sol = solve_closed_loop_direct(kernels, strat, input, path)?;
        Ok(quadratic_functional_path(&sol, q, &kernels.grid))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ebsvie::duality_lhs_exact;
    use crate::fields::TriField;
    use crate::instances::{random_instance, random_instance_with, KernelFlavor};
    use crate::kernels::{KernelSpec, KernelSet, NodeFn};
    use crate::lyapunov::{random_quadratic_spec, representation_lhs_exact};
    use nalgebra::DMatrix;

    fn cfg(n_paths: u64, antithetic: bool) -> McConfig {
        McConfig {
            n_paths,
            seed: 11,
            batch_size: 256,
            antithetic,
        }
    }

    #[test]
    fn zero_data_zero_estimate() {
        let inst = random_instance(1, 1, 1, KernelFlavor::Smooth).sample(6).unwrap();
        let data = DualityData {
            psi: vec![DMatrix::zeros(1, 1); 7],
            chi: TriField::zeros(6, 1, 1, false),
        };
        let est =
            estimate_linear_functional(&inst.kernels, &inst.strategy, &data, &inst.input, &cfg(64, false))
                .unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.std_error, 0.0);
        assert_eq!(est.n, 64);
    }

    #[test]
    fn no_noise_matches_mean_oracle_exactly() {
        let mut spec = random_instance(2, 2, 1, KernelFlavor::Smooth);
        spec.kernels.c = KernelSpec::zero(2, 2);
        spec.kernels.d = KernelSpec::zero(2, 1);
        spec.kernels.sigma = KernelSpec::zero(2, 1);
        let inst = spec.sample(8).unwrap();
        let data = DualityData {
            psi: inst.psi.clone(),
            chi: inst.chi.clone(),
        };
        let exact =
            duality_lhs_exact(&inst.kernels, &inst.strategy, &data, &inst.input).unwrap();
        let est =
            estimate_linear_functional(&inst.kernels, &inst.strategy, &data, &inst.input, &cfg(8, false))
                .unwrap();
        assert_eq!(est.std_error, 0.0);
        assert!((est.mean - exact).abs() < 1e-14);
    }

    #[test]
    fn linear_estimate_within_four_se_of_oracle() {
        let inst = random_instance(3, 1, 1, KernelFlavor::Smooth).sample(8).unwrap();
        let data = DualityData {
            psi: inst.psi.clone(),
            chi: inst.chi.clone(),
        };
        let exact =
            duality_lhs_exact(&inst.kernels, &inst.strategy, &data, &inst.input).unwrap();
        let est = estimate_linear_functional(
            &inst.kernels,
            &inst.strategy,
            &data,
            &inst.input,
            &cfg(20_000, false),
        )
        .unwrap();
        assert!(est.std_error > 0.0);
        assert!(
            (est.mean - exact).abs() < 4.0 * est.std_error,
            "mean {} exact {exact} se {}",
            est.mean,
            est.std_error
        );
    }

    #[test]
    fn quadratic_unit_weights_unit_state() {
        // Q1 = I, kernels = 0, x = 1 on [0, 1], dyadic step: every path
        // value is exactly 1
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let kernels = KernelSet::zero(1, 1).sample(&grid).unwrap();
        let strat = Strategy::zero(8, 1, 1);
        let input = InputCondition::new(0, vec![nalgebra::dmatrix![1.0]; 9]);
        let mut q = QuadraticWeights::zero(8, 1);
        for m in &mut q.q1 {
            m[(0, 0)] = 1.0;
        }
        let est =
            estimate_quadratic_functional(&kernels, &strat, &q, &input, &cfg(16, false)).unwrap();
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.std_error, 0.0);

        let zero_input = InputCondition::new(0, vec![DMatrix::zeros(1, 1); 9]);
        let est =
            estimate_quadratic_functional(&kernels, &strat, &q, &zero_input, &cfg(16, false))
                .unwrap();
        assert_eq!(est.mean, 0.0);
    }

    #[test]
    fn quadratic_estimate_within_four_se_of_oracle() {
        let mut spec = random_instance_with(5, 1, 1, KernelFlavor::Smooth, 1.0);
        spec.kernels.drift = KernelSpec::zero(1, 1);
        spec.kernels.sigma = KernelSpec::zero(1, 1);
        spec.v = NodeFn::Zero { rows: 1, cols: 1 };
        let inst = spec.sample(6).unwrap();
        let q = random_quadratic_spec(6, 1).sample(&inst.grid).unwrap();
        let exact =
            representation_lhs_exact(&inst.kernels, &inst.strategy, &q, &inst.input).unwrap();
        let est = estimate_quadratic_functional(
            &inst.kernels,
            &inst.strategy,
            &q,
            &inst.input,
            &cfg(20_000, false),
        )
        .unwrap();
        assert!(
            (est.mean - exact).abs() < 4.0 * est.std_error,
            "mean {} exact {exact} se {}",
            est.mean,
            est.std_error
        );
    }

    #[test]
    fn bitwise_reproducible_across_thread_counts() {
        let inst = random_instance(7, 1, 1, KernelFlavor::Smooth).sample(8).unwrap();
        let data = DualityData {
            psi: inst.psi.clone(),
            chi: inst.chi.clone(),
        };
        let run = || {
            estimate_linear_functional(
                &inst.kernels,
                &inst.strategy,
                &data,
                &inst.input,
                &McConfig {
                    n_paths: 4_000,
                    seed: 3,
                    batch_size: 128,
                    antithetic: false,
                },
            )
            .unwrap()
        };
        let parallel = run();
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(run);
        assert_eq!(parallel, single);
        assert_eq!(parallel, run());
    }

    #[test]
    fn antithetic_agrees_with_plain_within_four_se() {
        let inst = random_instance(8, 1, 1, KernelFlavor::Smooth).sample(8).unwrap();
        let data = DualityData {
            psi: inst.psi.clone(),
            chi: inst.chi.clone(),
        };
        let plain = estimate_linear_functional(
            &inst.kernels,
            &inst.strategy,
            &data,
            &inst.input,
            &cfg(20_000, false),
        )
        .unwrap();
        let anti = estimate_linear_functional(
            &inst.kernels,
            &inst.strategy,
            &data,
            &inst.input,
            &cfg(20_000, true),
        )
        .unwrap();
        assert_eq!(anti.n, 20_000);
        let se = (plain.std_error.powi(2) + anti.std_error.powi(2)).sqrt();
        assert!(
            (plain.mean - anti.mean).abs() < 4.0 * se,
            "plain {} anti {} se {se}",
            plain.mean,
            anti.mean
        );
    }

    #[test]
    fn config_validation() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let bad = McConfig {
            n_paths: 1,
            seed: 0,
            batch_size: 8,
            antithetic: false,
        };
        assert!(estimate(&grid, &bad, |_| Ok(0.0)).is_err());
        let odd = McConfig {
            n_paths: 7,
            seed: 0,
            batch_size: 8,
            antithetic: true,
        };
        assert!(estimate(&grid, &odd, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn blow_up_reports_path_id() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let c = McConfig {
            n_paths: 8,
            seed: 0,
            batch_size: 2,
            antithetic: false,
        };
        let err = estimate(&grid, &c, |path| {
            if path.path_id == 5 {
                Err(SvieError::NonFinite { i: 2, j: 0 })
            } else {
                Ok(1.0)
            }
        })
        .unwrap_err();
        assert!(err.to_string().contains("path 5"), "{err}");
    }
}
