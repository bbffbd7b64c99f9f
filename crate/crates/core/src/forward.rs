//! Forward simulation: Brownian paths from a counter-based generator, the
//! plain (uncontrolled) SVIE recursion, the coupled closed-loop system for
//! `(X, Theta, u)` under a causal feedback strategy, the augmented-SVIE
//! reduction, restarts, and exact first/second moment propagation.

use nalgebra::DMatrix;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SvieError};
use crate::fields::TriField;
use crate::grid::TimeGrid;
use crate::kernels::SampledKernels;
use crate::pi::{compose_feedback, xi_gamma_transform_field, xi_gamma_transform_nodes};

/// Causal feedback strategy `(Xi, Gamma, v)`: instantaneous gain `Xi[j]`,
/// anticipating-kernel gain `Gamma[(i, j)]` paired against `Theta[(i, j)]`,
/// and a deterministic open-loop term `v[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub xi: Vec<DMatrix<f64>>,
    pub gamma: TriField,
    pub v: Vec<DMatrix<f64>>,
}

impl Strategy {
    pub fn zero(n: usize, dim_state: usize, dim_control: usize) -> Self {
        Self {
            xi: vec![DMatrix::zeros(dim_control, dim_state); n + 1],
            gamma: TriField::zeros(n, dim_control, dim_state, false),
            v: vec![DMatrix::zeros(dim_control, 1); n + 1],
        }
    }
}

/// Start node `m0` and free term `x[i]` for `i >= m0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputCondition {
    pub start_index: usize,
    pub x: Vec<DMatrix<f64>>,
}

impl InputCondition {
    pub fn new(start_index: usize, x: Vec<DMatrix<f64>>) -> Self {
        Self { start_index, x }
    }
}

/// One discrete Brownian path: increments `dW[j] ~ Normal(0, h)`,
/// reproducible from `(seed, path_id, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    pub increments: Vec<f64>,
    pub seed: u64,
    pub path_id: u64,
}

impl BrownianPath {
    pub fn zeros(n: usize) -> Self {
        Self {
            increments: vec![0.0; n],
            seed: 0,
            path_id: 0,
        }
    }

    /// Path on the half-resolution grid driven by the same Brownian motion:
    /// paired increments are summed.
    pub fn coarsen(&self) -> Self {
        assert!(self.increments.len() % 2 == 0, "need an even step count");
        Self {
            increments: self
                .increments
                .chunks(2)
                .map(|c| c[0] + c[1])
                .collect(),
            seed: self.seed,
            path_id: self.path_id,
        }
    }
}

/// One standard normal from the 8 counter words reserved for `(path, step)`.
/// Box-Muller with a fixed draw count so any `(seed, path_id, j)` cell is
/// computable independently of all others.
fn normal_at(rng: &mut ChaCha8Rng, path_id: u64, step: u128) -> f64 {
    rng.set_stream(path_id);
    rng.set_word_pos(step * 8);
    let u1 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let u1 = (1.0 - u1).max(f64::MIN_POSITIVE); // avoid log(0)
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Increments `Normal(0, h)` keyed by `(seed, path_id, j)`.
pub fn simulate_brownian(seed: u64, path_id: u64, grid: &TimeGrid) -> BrownianPath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = grid.h.sqrt();
    let increments = (0..grid.n)
        .map(|j| s * normal_at(&mut rng, path_id, j as u128))
        .collect();
    BrownianPath {
        increments,
        seed,
        path_id,
    }
}

/// Explicit recursion for `X(t) = phi(t) + int A X ds + int C X dW`,
/// active on nodes `i >= start_index`:
/// `X[i] = phi[i] + sum_{j<i} A[(i,j)] X[j] h + sum_{j<i} C[(i,j)] X[j] dW_j`.
pub fn solve_svie(
    freeterm: &[DMatrix<f64>],
    a: &TriField,
    c: &TriField,
    path: &BrownianPath,
    grid: &TimeGrid,
    start_index: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let n = grid.n;
    let dim = freeterm[start_index].nrows();
    let mut x = vec![DMatrix::zeros(dim, 1); n + 1];
    for i in start_index..=n {
        let mut v = freeterm[i].clone();
        for j in start_index..i {
            v += a.get(i, j) * &x[j] * grid.h;
            v += c.get(i, j) * &x[j] * path.increments[j];
        }
        if v.iter().any(|e| !e.is_finite()) {
            return Err(SvieError::NonFinite { i, j: start_index });
        }
        x[i] = v;
    }
    Ok(x)
}

/// Sample-path solution of the closed-loop system: `Theta[(i, j)]` for
/// `m0 <= j <= i <= N`, the diagonal state `X[i] = Theta[(i, i)]` and the
/// control `u[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSolution {
    pub start_index: usize,
    pub theta: TriField,
    pub x: Vec<DMatrix<f64>>,
    pub u: Vec<DMatrix<f64>>,
}

fn feedback_control(
    strat: &Strategy,
    theta: &TriField,
    x_j: &DMatrix<f64>,
    j: usize,
    n: usize,
    h: f64,
) -> DMatrix<f64> {
    let mut u = &strat.xi[j] * x_j + &strat.v[j];
    for i in (j + 1)..=n {
        u += strat.gamma.get(i, j) * theta.get(i, j) * h;
    }
    u
}

/// Column-by-column recursion of the coupled system: initialize
/// `Theta[(i, m0)] = x[i]`, then for each step `j` compute `u[j]` from the
/// feedback relation on column `j` and advance every row
/// `Theta[(i, j+1)] = Theta[(i, j)] + (A X + B u + b) h + (C X + D u + sigma) dW_j`.
pub fn solve_closed_loop_direct(
    kernels: &SampledKernels,
    strat: &Strategy,
    input: &InputCondition,
    path: &BrownianPath,
) -> Result<FeedbackSolution> {
    let grid = &kernels.grid;
    let n = grid.n;
    let h = grid.h;
    let m0 = input.start_index;
    let d = kernels.dim_state;
    let l = kernels.dim_control;

    let mut theta = TriField::zeros(n, d, 1, true);
    for i in m0..=n {
        theta.set(i, m0, input.x[i].clone());
    }
    let mut x = vec![DMatrix::zeros(d, 1); n + 1];
    let mut u = vec![DMatrix::zeros(l, 1); n + 1];
    x[m0] = input.x[m0].clone();

    for j in m0..n {
        u[j] = feedback_control(strat, &theta, &x[j], j, n, h);
        let dw = path.increments[j];
        for i in (j + 1)..=n {
            let drift = kernels.a.get(i, j) * &x[j]
                + kernels.b.get(i, j) * &u[j]
                + kernels.drift.get(i, j);
            let diff = kernels.c.get(i, j) * &x[j]
                + kernels.d.get(i, j) * &u[j]
                + kernels.sigma.get(i, j);
            let next = theta.get(i, j) + drift * h + diff * dw;
            if next.iter().any(|e| !e.is_finite()) {
                return Err(SvieError::NonFinite { i, j });
            }
            theta.set(i, j + 1, next);
        }
        x[j + 1] = theta.get(j + 1, j + 1).clone();
    }
    u[n] = feedback_control(strat, &theta, &x[n], n, n, h);
    Ok(FeedbackSolution {
        start_index: m0,
        theta,
        x,
        u,
    })
}

/// The stacked system for `(X; u)`: block kernels and the path-dependent free
/// term. Top block rows reproduce the state equation; bottom block rows carry
/// the strategy-transformed kernels so that the control solves its own SVIE.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSystem {
    pub start_index: usize,
    pub ba: TriField,
    pub bc: TriField,
    dim_state: usize,
    dim_control: usize,
    grid: TimeGrid,
    x_upper: Vec<DMatrix<f64>>,
    x_lower: Vec<DMatrix<f64>>, // x^{Xi,Gamma} + v
    drift_upper: TriField,
    sigma_upper: TriField,
    drift_lower: TriField, // b^{Xi,Gamma}
    sigma_lower: TriField, // sigma^{Xi,Gamma}
}

impl AugmentedSystem {
    /// Free term `(x + int b + int sigma dW ; x^{Xi,Gamma} + v + int b^{Xi,Gamma} + int sigma^{Xi,Gamma} dW)`.
    pub fn phi(&self, path: &BrownianPath) -> Vec<DMatrix<f64>> {
        let n = self.grid.n;
        let h = self.grid.h;
        let d = self.dim_state;
        let l = self.dim_control;
        let mut out = vec![DMatrix::zeros(d + l, 1); n + 1];
        for i in self.start_index..=n {
            let mut upper = self.x_upper[i].clone();
            let mut lower = self.x_lower[i].clone();
            for j in self.start_index..i {
                upper += self.drift_upper.get(i, j) * h;
                upper += self.sigma_upper.get(i, j) * path.increments[j];
                lower += self.drift_lower.get(i, j) * h;
                lower += self.sigma_lower.get(i, j) * path.increments[j];
            }
            let mut phi = DMatrix::zeros(d + l, 1);
            phi.rows_mut(0, d).copy_from(&upper);
            phi.rows_mut(d, l).copy_from(&lower);
            out[i] = phi;
        }
        out
    }
}

fn stack_blocks(
    top_left: &TriField,
    top_right: &TriField,
    bot_left: &TriField,
    bot_right: &TriField,
    d: usize,
    l: usize,
) -> TriField {
    let n = top_left.n();
    let mut out = TriField::zeros(n, d + l, d + l, false);
    for i in 1..=n {
        for j in 0..i {
            let mut m = DMatrix::zeros(d + l, d + l);
            m.view_mut((0, 0), (d, d)).copy_from(top_left.get(i, j));
            m.view_mut((0, d), (d, l)).copy_from(top_right.get(i, j));
            m.view_mut((d, 0), (l, d)).copy_from(bot_left.get(i, j));
            m.view_mut((d, d), (l, l)).copy_from(bot_right.get(i, j));
            out.set(i, j, m);
        }
    }
    out
}

/// Builds the stacked kernels and free term of the augmented SVIE.
pub fn build_augmented(
    kernels: &SampledKernels,
    strat: &Strategy,
    input: &InputCondition,
) -> AugmentedSystem {
    let grid = kernels.grid;
    let d = kernels.dim_state;
    let l = kernels.dim_control;
    let a_xg = xi_gamma_transform_field(&kernels.a, &strat.xi, &strat.gamma, &grid);
    let b_xg = xi_gamma_transform_field(&kernels.b, &strat.xi, &strat.gamma, &grid);
    let c_xg = xi_gamma_transform_field(&kernels.c, &strat.xi, &strat.gamma, &grid);
    let d_xg = xi_gamma_transform_field(&kernels.d, &strat.xi, &strat.gamma, &grid);
    let ba = stack_blocks(&kernels.a, &kernels.b, &a_xg, &b_xg, d, l);
    let bc = stack_blocks(&kernels.c, &kernels.d, &c_xg, &d_xg, d, l);

    let x_lower = xi_gamma_transform_nodes(&input.x, &strat.xi, &strat.gamma, &grid)
        .into_iter()
        .enumerate()
        .map(|(i, m)| m + &strat.v[i])
        .collect();
    AugmentedSystem {
        start_index: input.start_index,
        ba,
        bc,
        dim_state: d,
        dim_control: l,
        grid,
        x_upper: input.x.clone(),
        x_lower,
        drift_upper: kernels.drift.clone(),
        sigma_upper: kernels.sigma.clone(),
        drift_lower: xi_gamma_transform_field(&kernels.drift, &strat.xi, &strat.gamma, &grid),
        sigma_lower: xi_gamma_transform_field(&kernels.sigma, &strat.xi, &strat.gamma, &grid),
    }
}

/// Solves the augmented SVIE for the stacked `(X; u)` and reconstructs
/// `Theta` by forward accumulation of the state-row integrands. Agrees with
/// the direct solver up to floating-point summation order.
pub fn solve_closed_loop_augmented(
    kernels: &SampledKernels,
    strat: &Strategy,
    input: &InputCondition,
    path: &BrownianPath,
) -> Result<FeedbackSolution> {
    let grid = &kernels.grid;
    let n = grid.n;
    let h = grid.h;
    let m0 = input.start_index;
    let d = kernels.dim_state;
    let l = kernels.dim_control;

    let aug = build_augmented(kernels, strat, input);
    let phi = aug.phi(path);
    let stacked = solve_svie(&phi, &aug.ba, &aug.bc, path, grid, m0)?;

    let x_of = |i: usize| stacked[i].rows(0, d).into_owned();
    let u_of = |i: usize| stacked[i].rows(d, l).into_owned();

    let mut theta = TriField::zeros(n, d, 1, true);
    for i in m0..=n {
        theta.set(i, m0, input.x[i].clone());
    }
    for j in m0..n {
        let xj = x_of(j);
        let uj = u_of(j);
        let dw = path.increments[j];
        for i in (j + 1)..=n {
            let drift =
                kernels.a.get(i, j) * &xj + kernels.b.get(i, j) * &uj + kernels.drift.get(i, j);
            let diff =
                kernels.c.get(i, j) * &xj + kernels.d.get(i, j) * &uj + kernels.sigma.get(i, j);
            let next = theta.get(i, j) + drift * h + diff * dw;
            theta.set(i, j + 1, next);
        }
    }
    let x = (0..=n)
        .map(|i| {
            if i >= m0 {
                theta.get(i, i).clone()
            } else {
                DMatrix::zeros(d, 1)
            }
        })
        .collect();
    let u = (0..=n)
        .map(|i| {
            if i >= m0 {
                u_of(i)
            } else {
                DMatrix::zeros(l, 1)
            }
        })
        .collect();
    Ok(FeedbackSolution {
        start_index: m0,
        theta,
        x,
        u,
    })
}

/// Restarts the closed-loop recursion at `m1` with free term
/// `Theta[(., m1)]` and the same path tail. Coincides with the original
/// solution on indices `>= m1` (generalized flow property).
pub fn flow_restart(
    sol: &FeedbackSolution,
    kernels: &SampledKernels,
    strat: &Strategy,
    restart_index: usize,
    path: &BrownianPath,
) -> Result<FeedbackSolution> {
    let n = kernels.grid.n;
    if restart_index < sol.start_index || restart_index > n {
        return Err(SvieError::OutOfDomain(format!(
            "restart index {restart_index} outside [{}, {n}]",
            sol.start_index
        )));
    }
    let d = kernels.dim_state;
    let mut x = vec![DMatrix::zeros(d, 1); n + 1];
    for (i, xi) in x.iter_mut().enumerate().take(n + 1).skip(restart_index) {
        *xi = sol.theta.get(i, restart_index).clone();
    }
    solve_closed_loop_direct(kernels, strat, &InputCondition::new(restart_index, x), path)
}

/// Exact expectation of the discrete closed-loop solution: all data are
/// deterministic and every dW integrand is adapted, so dropping the noise
/// terms propagates the mean exactly.
pub fn propagate_mean(
    kernels: &SampledKernels,
    strat: &Strategy,
    input: &InputCondition,
) -> Result<FeedbackSolution> {
    let silent = BrownianPath::zeros(kernels.grid.n);
    solve_closed_loop_direct(kernels, strat, input, &silent)
}

/// Per-step covariance `S_j = E[Z_j Z_j^T]` of the stacked column
/// `Z_j = (Theta[(i, j)])_{i = j..N}` for the homogeneous system.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMoments {
    pub start_index: usize,
    pub dim_state: usize,
    pub n: usize,
    /// `blocks[j - start_index]` is the `(N - j + 1) d` square matrix `S_j`.
    pub blocks: Vec<DMatrix<f64>>,
}

impl SecondMoments {
    /// `E[Theta[(i1, j)] Theta[(i2, j)]^T]`, for `i1, i2 >= j`.
    pub fn theta_cov(&self, j: usize, i1: usize, i2: usize) -> DMatrix<f64> {
        let d = self.dim_state;
        let s = &self.blocks[j - self.start_index];
        s.view(((i1 - j) * d, (i2 - j) * d), (d, d)).into_owned()
    }

    /// `E[X_j X_j^T]`.
    pub fn state_cov(&self, j: usize) -> DMatrix<f64> {
        self.theta_cov(j, j, j)
    }
}

/// Exact second-moment propagation for the homogeneous closed-loop system
/// (`b = sigma = 0`, `v = 0`): writes the column update as
/// `Z_{j+1} = (E_j + h M_j) Z_j + G_j Z_j dW_j` and pushes
/// `S_{j+1} = (E + hM) S (E + hM)^T + h G S G^T` from `S_{m0} = x x^T`.
pub fn propagate_second_moment(
    kernels: &SampledKernels,
    strat: &Strategy,
    input: &InputCondition,
) -> Result<SecondMoments> {
    if !(kernels.drift.max_abs() == 0.0 && kernels.sigma.max_abs() == 0.0) {
        return Err(SvieError::Unsupported(
            "second-moment oracle needs b = sigma = 0".into(),
        ));
    }
    if strat.v.iter().any(|m| m.amax() != 0.0) {
        return Err(SvieError::Unsupported(
            "second-moment oracle needs v = 0".into(),
        ));
    }
    let grid = &kernels.grid;
    let n = grid.n;
    let h = grid.h;
    let m0 = input.start_index;
    let d = kernels.dim_state;

    let mut z0 = DMatrix::zeros((n - m0 + 1) * d, 1);
    for i in m0..=n {
        z0.rows_mut((i - m0) * d, d).copy_from(&input.x[i]);
    }
    let mut blocks = Vec::with_capacity(n - m0 + 1);
    let mut s = &z0 * z0.transpose();
    blocks.push(s.clone());

    for j in m0..n {
        let rows = (n - j) * d;
        let cols = (n - j + 1) * d;
        // L_j: u_j = Xi[j] X_j + sum_{i>j} Gamma[(i,j)] Theta[(i,j)] h
        let l = kernels.dim_control;
        let mut lj = DMatrix::zeros(l, cols);
        lj.view_mut((0, 0), (l, d)).copy_from(&strat.xi[j]);
        for i in (j + 1)..=n {
            lj.view_mut((0, (i - j) * d), (l, d))
                .copy_from(&(strat.gamma.get(i, j) * h));
        }
        let mut t = DMatrix::zeros(rows, cols); // E_j + h M_j
        let mut g = DMatrix::zeros(rows, cols);
        for i in (j + 1)..=n {
            let r0 = (i - j - 1) * d;
            // drift row: carried Theta[(i,j)] plus h (A e_0 + B L_j)
            let mut mrow = kernels.b.get(i, j) * &lj;
            {
                let mut tl = mrow.view_mut((0, 0), (d, d));
                tl += kernels.a.get(i, j);
            }
            let mut trow = mrow * h;
            {
                let mut carry = trow.view_mut((0, (i - j) * d), (d, d));
                carry += DMatrix::identity(d, d);
            }
            t.rows_mut(r0, d).copy_from(&trow);
            // diffusion row: C e_0 + D L_j
            let mut grow = kernels.d.get(i, j) * &lj;
            {
                let mut tl = grow.view_mut((0, 0), (d, d));
                tl += kernels.c.get(i, j);
            }
            g.rows_mut(r0, d).copy_from(&grow);
        }
        s = &t * &s * t.transpose() + (&g * &s * g.transpose()) * h;
        blocks.push(s.clone());
    }
    Ok(SecondMoments {
        start_index: m0,
        dim_state: d,
        n,
        blocks,
    })
}

/// The feedback-composed kernels `A + B Xi` etc. at the second argument.
pub fn closed_kernels(kernels: &SampledKernels, strat: &Strategy) -> (TriField, TriField) {
    let a_cl = {
        let bx = compose_feedback(&kernels.b, &strat.xi);
        let mut out = kernels.a.clone();
        for i in 1..=kernels.grid.n {
            for j in 0..i {
                let v = out.get(i, j) + bx.get(i, j);
                out.set(i, j, v);
            }
        }
        out
    };
    let c_cl = {
        let dx = compose_feedback(&kernels.d, &strat.xi);
        let mut out = kernels.c.clone();
        for i in 1..=kernels.grid.n {
            for j in 0..i {
                let v = out.get(i, j) + dx.get(i, j);
                out.set(i, j, v);
            }
        }
        out
    };
    (a_cl, c_cl)
}
