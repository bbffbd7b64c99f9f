//! Discrete analogues of the triangle-domain norms and the partition argument
//! behind well-posedness: the interval is cut into pieces on which the
//! relevant kernel norms are at most 1/2, so the per-piece Picard map is a
//! contraction.

use crate::error::{Result, SvieError};
use crate::fields::TriField;
use crate::grid::TimeGrid;
use crate::kernels::KernelSpec;

fn frob(m: &nalgebra::DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `l2_triangle`: sqrt(ΣΣ |f|² h²) over j < i.
/// `sl2`: max over j of sqrt(Σ_{i>j} |f|² h).
/// `l21`: sqrt(Σ_i (Σ_{j<i} |f| h)² h).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteNorms {
    pub l2_triangle: f64,
    pub sl2: f64,
    pub l21: f64,
}

pub fn discrete_norms(field: &TriField, grid: &TimeGrid) -> Result<DiscreteNorms> {
    if field.n() == 0 {
        return Err(SvieError::EmptyField);
    }
    let n = field.n();
    let h = grid.h;
    let mut l2_sq = 0.0;
    let mut l21_sq = 0.0;
    let mut sl2 = 0.0_f64;
    for j in 0..n {
        let mut col_sq = 0.0;
        for i in (j + 1)..=n {
            col_sq += frob(field.get(i, j)).powi(2) * h;
        }
        sl2 = sl2.max(col_sq.sqrt());
    }
    for i in 1..=n {
        let mut row_l1 = 0.0;
        for j in 0..i {
            let f = frob(field.get(i, j));
            l2_sq += f * f * h * h;
            row_l1 += f * h;
        }
        l21_sq += row_l1 * row_l1 * h;
    }
    Ok(DiscreteNorms {
        l2_triangle: l2_sq.sqrt(),
        sl2,
        l21: l21_sq.sqrt(),
    })
}

/// `2 m² (1 + 2L)^{m-1}`: a-priori bound on the solution map norm given `m`
/// contraction subintervals and combined kernel size `L`.
pub fn wellposedness_constant(m: usize, l: f64) -> f64 {
    2.0 * (m * m) as f64 * (1.0 + 2.0 * l).powi(m as i32 - 1)
}

/// Combined size of one subinterval `[t_a, t_b]`: the l2-triangle norm of `A`
/// restricted to it plus the sL² norm of `C` restricted to it.
pub fn subinterval_bound(a_field: &TriField, c_field: &TriField, grid: &TimeGrid, lo: usize, hi: usize) -> f64 {
    let h = grid.h;
    let mut l2_sq = 0.0;
    for i in (lo + 1)..=hi {
        for j in lo..i {
            l2_sq += frob(a_field.get(i, j)).powi(2) * h * h;
        }
    }
    let mut sl2 = 0.0_f64;
    for j in lo..hi {
        let mut col_sq = 0.0;
        for i in (j + 1)..=hi {
            col_sq += frob(c_field.get(i, j)).powi(2) * h;
        }
        sl2 = sl2.max(col_sq.sqrt());
    }
    l2_sq.sqrt() + sl2
}

/// Greedy left-to-right partition of the grid nodes such that each
/// subinterval satisfies `subinterval_bound <= 1/2`. Returns the node indices
/// `U_0 = 0 < U_1 < ... < U_m = N`.
pub fn find_partition(
    a_spec: &KernelSpec,
    c_spec: &KernelSpec,
    grid: &TimeGrid,
) -> Result<Vec<usize>> {
    let a_field = a_spec.sample(grid, a_spec.default_mode())?;
    let c_field = c_spec.sample(grid, c_spec.default_mode())?;
    let mut cuts = vec![0usize];
    let mut lo = 0;
    while lo < grid.n {
        // widest hi with bound(lo, hi) <= 1/2; the bound is monotone in hi
        let mut hi = lo + 1;
        if subinterval_bound(&a_field, &c_field, grid, lo, hi) > 0.5 {
            return Err(SvieError::GridTooCoarse);
        }
        while hi < grid.n && subinterval_bound(&a_field, &c_field, grid, lo, hi + 1) <= 0.5 {
            hi += 1;
        }
        cuts.push(hi);
        lo = hi;
    }
    Ok(cuts)
}
