//! Backward adjoint equation for linear functionals of the closed-loop
//! solution, solved under deterministic data (the martingale part is then
//! identically zero), and the two sides of the duality identity.

use nalgebra::DMatrix;

use crate::error::{Result, SvieError};
use crate::fields::TriField;
use crate::forward::{propagate_mean, InputCondition, Strategy};
use crate::instances::InstanceSpec;
use crate::kernels::SampledKernels;
use crate::pi::compose_feedback;

/// Deterministic data `(psi, chi)` of the target linear functional
/// `E[ int <psi, X> dt + int int <chi, Theta> ds dt ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualityData {
    pub psi: Vec<DMatrix<f64>>,
    pub chi: TriField,
}

/// Adjoint field `eta[(i, j)]` for `j <= i` (diagonal included). With
/// deterministic data the martingale component is identically zero and is
/// not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct EbsvieSolution {
    pub start_index: usize,
    pub eta: TriField,
}

/// Backward sweep over columns `j = N-1 .. m0`. Column `j` is produced from
/// column `j+1` by the explicit rule
/// `eta[(i,j)] = eta[(i,j+1)] + h (chi[(i,j+1)] + Gamma[(i,j+1)]^T w_{j+1})`
/// with `w_{j+1} = sum_{r>j+1} B[(r,j+1)]^T eta[(r,j+1)] h` (values at the
/// column's own diagonal slot count as zero), then the diagonal condition
/// `eta[(j,j)] = psi[j] + sum_{r>j} (A + B Xi)[(r,j)]^T eta[(r,j)] h`.
pub fn solve_ebsvie(
    kernels: &SampledKernels,
    strat: &Strategy,
    data: &DualityData,
    start_index: usize,
) -> Result<EbsvieSolution> {
    let grid = &kernels.grid;
    let n = grid.n;
    let h = grid.h;
    let m0 = start_index;
    let d = kernels.dim_state;

    let a_closed = {
        let bx = compose_feedback(&kernels.b, &strat.xi);
        let mut out = kernels.a.clone();
        for i in 1..=n {
            for j in 0..i {
                let v = out.get(i, j) + bx.get(i, j);
                out.set(i, j, v);
            }
        }
        out
    };

    let mut eta = TriField::zeros(n, d, 1, true);
    eta.set(n, n, data.psi[n].clone());

    for j in (m0..n).rev() {
        let col = j + 1;
        let mut w = DMatrix::zeros(kernels.dim_control, 1);
        for r in (col + 1)..=n {
            w += kernels.b.get(r, col).transpose() * eta.get(r, col) * h;
        }
        for i in col..=n {
            let mut v = eta.get(i, col).clone();
            if i > col {
                v += data.chi.get(i, col) * h;
                v += strat.gamma.get(i, col).transpose() * &w * h;
            }
            if v.iter().any(|e| !e.is_finite()) {
                return Err(SvieError::NonFinite { i, j });
            }
            eta.set(i, j, v);
        }
        let mut diag = data.psi[j].clone();
        for r in (j + 1)..=n {
            diag += a_closed.get(r, j).transpose() * eta.get(r, j) * h;
        }
        eta.set(j, j, diag);
    }
    Ok(EbsvieSolution {
        start_index: m0,
        eta,
    })
}

/// Pairing of the adjoint field against the input data:
/// `sum_{i>m0} <eta[(i,m0)], x[i]> h`
/// `+ sum_{j>=m0} sum_{i>j} <eta[(i,j)], b[(i,j)]> h^2`
/// `+ sum_{j>=m0} <sum_{i>j} B[(i,j)]^T eta[(i,j)] h, v[j]> h`.
pub fn duality_rhs(
    kernels: &SampledKernels,
    strat: &Strategy,
    sol: &EbsvieSolution,
    input: &InputCondition,
) -> f64 {
    let grid = &kernels.grid;
    let n = grid.n;
    let h = grid.h;
    let m0 = sol.start_index;
    let mut out = 0.0;
    for i in (m0 + 1)..=n {
        out += (sol.eta.get(i, m0).transpose() * &input.x[i])[(0, 0)] * h;
    }
    for j in m0..n {
        let mut bv = DMatrix::zeros(kernels.dim_control, 1);
        for i in (j + 1)..=n {
            out += (sol.eta.get(i, j).transpose() * kernels.drift.get(i, j))[(0, 0)] * h * h;
            bv += kernels.b.get(i, j).transpose() * sol.eta.get(i, j) * h;
        }
        out += (bv.transpose() * &strat.v[j])[(0, 0)] * h;
    }
    out
}

/// The target functional evaluated on the exact mean of the discrete scheme:
/// `sum_{i>m0} <psi[i], E X[i]> h + sum_{i>m0} sum_{m0<r<i} <chi[(i,r)], E Theta[(i,r)]> h^2`.
pub fn duality_lhs_exact(
    kernels: &SampledKernels,
    strat: &Strategy,
    data: &DualityData,
    input: &InputCondition,
) -> Result<f64> {
    let grid = &kernels.grid;
    let n = grid.n;
    let h = grid.h;
    let m0 = input.start_index;
    let mean = propagate_mean(kernels, strat, input)?;
    let mut out = 0.0;
    for i in (m0 + 1)..=n {
        out += (data.psi[i].transpose() * &mean.x[i])[(0, 0)] * h;
        for r in (m0 + 1)..i {
            out += (data.chi.get(i, r).transpose() * mean.theta.get(i, r))[(0, 0)] * h * h;
        }
    }
    Ok(out)
}

/// Both sides of the identity at one resolution.
pub fn duality_sides(inst: &crate::instances::SampledInstance) -> Result<(f64, f64)> {
    let data = DualityData {
        psi: inst.psi.clone(),
        chi: inst.chi.clone(),
    };
    let lhs = duality_lhs_exact(&inst.kernels, &inst.strategy, &data, &inst.input)?;
    let sol = solve_ebsvie(&inst.kernels, &inst.strategy, &data, inst.input.start_index)?;
    let rhs = duality_rhs(&inst.kernels, &inst.strategy, &sol, &inst.input);
    Ok((lhs, rhs))
}

/// Gap of the identity at `N` and `2N`, plus the observed convergence order.
/// `order` is `None` when the fine gap is already at the noise floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub gap_coarse: f64,
    pub gap_fine: f64,
    pub order: Option<f64>,
}

impl GapReport {
    pub fn from_gaps(gap_coarse: f64, gap_fine: f64) -> Self {
        let order = if gap_fine < 1e-13 {
            None // converged to the floor; ratio is meaningless
        } else {
            Some((gap_coarse / gap_fine).log2())
        };
        Self {
            gap_coarse,
            gap_fine,
            order,
        }
    }
}

/// Evaluates the duality gap on an analytic instance at `N` and `2N`.
pub fn duality_gap(spec: &InstanceSpec, n: usize) -> Result<GapReport> {
    let coarse = spec.sample(n)?;
    let fine = spec.sample(2 * n)?;
    let (lc, rc) = duality_sides(&coarse)?;
    let (lf, rf) = duality_sides(&fine)?;
    Ok(GapReport::from_gaps((lc - rc).abs(), (lf - rf).abs()))
}
