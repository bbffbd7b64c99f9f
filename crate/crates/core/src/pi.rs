//! The quadratic-pair type `(P1, P2)` and the kernel-operator algebra built
//! on it: right composition `P ▷ M`, left composition `M ⌊ P`, the scalarized
//! sandwich `M1 ⌊ P ⌋ M2`, feedback composition, and the `(Ξ, Γ)` transform
//! used to close the loop.

use nalgebra::DMatrix;

use crate::fields::{PyrTensor, TriField};
use crate::grid::TimeGrid;

/// Pair of a per-node symmetric matrix `P1[i]` (i = 0..N) and a symmetric
/// pyramid tensor `P2[(i, j, k)]`. The derivative of `P2` in its level index
/// is not stored; it is read off as a forward finite difference.
#[derive(Debug, Clone, PartialEq)]
pub struct PiPair {
    pub p1: Vec<DMatrix<f64>>,
    pub p2: PyrTensor,
}

impl PiPair {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            p1: vec![DMatrix::zeros(dim, dim); n + 1],
            p2: PyrTensor::zeros(n, dim, true),
        }
    }

    pub fn n(&self) -> usize {
        self.p1.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.p1[0].nrows()
    }

    /// Forward difference of `P2` in the level index at `(i, j, k)`,
    /// defined for `k < min(i, j)`.
    pub fn p2_dot(&self, i: usize, j: usize, k: usize, h: f64) -> DMatrix<f64> {
        (self.p2.get(i, j, k + 1) - self.p2.get(i, j, k)) / h
    }

    /// Worst deviation from symmetry across both members.
    pub fn symmetry_residual(&self) -> f64 {
        let p1_res = self
            .p1
            .iter()
            .map(|m| (m - m.transpose()).amax())
            .fold(0.0_f64, f64::max);
        p1_res.max(self.p2.symmetry_residual())
    }

    pub fn symmetrize(&mut self) {
        for m in &mut self.p1 {
            let sym = (&*m + m.transpose()) * 0.5;
            *m = sym;
        }
        self.p2.symmetrize();
    }

    /// Norm surrogate under which right composition is bounded:
    /// `max_i |P1[i]|_F + max_k sqrt(ΣΣ_{i,j>k} |P2[(i,j,k)]|_F² h²)`.
    pub fn norm(&self, grid: &TimeGrid) -> f64 {
        let n = self.n();
        let p1_max = self
            .p1
            .iter()
            .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0_f64, f64::max);
        let mut p2_max = 0.0_f64;
        for k in 0..n {
            let mut sq = 0.0;
            for i in (k + 1)..=n {
                for j in (k + 1)..=n {
                    sq += self
                        .p2
                        .get(i, j, k)
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        * grid.h
                        * grid.h;
                }
            }
            p2_max = p2_max.max(sq.sqrt());
        }
        p1_max + p2_max
    }
}

/// `out[(i, j)] = K[(i, j)] Xi[j]`: composes a `d x l` kernel with a per-node
/// feedback gain at the second time argument.
pub fn compose_feedback(kernel: &TriField, xi: &[DMatrix<f64>]) -> TriField {
    let n = kernel.n();
    assert_eq!(xi.len(), n + 1, "need one gain per node");
    let (rows, _) = kernel.entry_shape();
    let cols = xi[0].ncols();
    let mut out = TriField::zeros(n, rows, cols, false);
    for (i, j, k) in kernel.iter_strict() {
        out.set(i, j, k * &xi[j]);
    }
    out
}

/// `out[(i, j)] = Xi[i] f[(i, j)] + Σ_{r>i} Gamma[(r, i)] f[(r, j)] h`:
/// the strategy applied to a triangular kernel at its first argument.
pub fn xi_gamma_transform_field(
    f: &TriField,
    xi: &[DMatrix<f64>],
    gamma: &TriField,
    grid: &TimeGrid,
) -> TriField {
    let n = f.n();
    let (_, fcols) = f.entry_shape();
    let rows = xi[0].nrows();
    let mut out = TriField::zeros(n, rows, fcols, false);
    for i in 1..=n {
        for j in 0..i {
            let mut v = &xi[i] * f.get(i, j);
            for r in (i + 1)..=n {
                v += gamma.get(r, i) * f.get(r, j) * grid.h;
            }
            out.set(i, j, v);
        }
    }
    out
}

/// Per-node variant: `out[i] = Xi[i] x[i] + Σ_{r>i} Gamma[(r, i)] x[r] h`.
pub fn xi_gamma_transform_nodes(
    x: &[DMatrix<f64>],
    xi: &[DMatrix<f64>],
    gamma: &TriField,
    grid: &TimeGrid,
) -> Vec<DMatrix<f64>> {
    let n = x.len() - 1;
    (0..=n)
        .map(|i| {
            let mut v = &xi[i] * &x[i];
            for r in (i + 1)..=n {
                v += gamma.get(r, i) * &x[r] * grid.h;
            }
            v
        })
        .collect()
}

/// Right composition `(P ▷ M)` at level `k`: returns the values for
/// `i = k+1 ..= N` (index 0 of the result is `i = k+1`):
/// `out_i = P1[i] M[(i,k)] + Σ_{r>k} P2[(i,r,k)] M[(r,k)] h`.
pub fn rint(p: &PiPair, m: &TriField, k: usize, grid: &TimeGrid) -> Vec<DMatrix<f64>> {
    let n = m.n();
    assert!(k < n, "level {k} out of range for N={n}");
    (k + 1..=n)
        .map(|i| {
            let mut v = &p.p1[i] * m.get(i, k);
            for r in (k + 1)..=n {
                v += p.p2.get(i, r, k) * m.get(r, k) * grid.h;
            }
            v
        })
        .collect()
}

/// Left composition `(M ⌊ P)` at level `k`, transpose-dual to `rint`:
/// `out_i = M[(i,k)] P1[i] + Σ_{r>k} M[(r,k)] P2[(r,i,k)] h`.
pub fn lint(m: &TriField, p: &PiPair, k: usize, grid: &TimeGrid) -> Vec<DMatrix<f64>> {
    let n = m.n();
    assert!(k < n, "level {k} out of range for N={n}");
    (k + 1..=n)
        .map(|i| {
            let mut v = m.get(i, k) * &p.p1[i];
            for r in (k + 1)..=n {
                v += m.get(r, k) * p.p2.get(r, i, k) * grid.h;
            }
            v
        })
        .collect()
}

/// Sandwich `(M1 ⌊ P ⌋ M2)` at level `k`:
/// `Σ_{i>k} M1ᵀ P1 M2 h + Σ_{i,j>k} M1[(i,k)]ᵀ P2[(i,j,k)] M2[(j,k)] h²`.
pub fn lint_rint(
    m1: &TriField,
    p: &PiPair,
    m2: &TriField,
    k: usize,
    grid: &TimeGrid,
) -> DMatrix<f64> {
    let n = m1.n();
    let (_, c1) = m1.entry_shape();
    let (_, c2) = m2.entry_shape();
    let mut out = DMatrix::zeros(c1, c2);
    if k >= n {
        return out;
    }
    let h = grid.h;
    for i in (k + 1)..=n {
        out += m1.get(i, k).transpose() * &p.p1[i] * m2.get(i, k) * h;
        for j in (k + 1)..=n {
            out += m1.get(i, k).transpose() * p.p2.get(i, j, k) * m2.get(j, k) * (h * h);
        }
    }
    out
}

/// `rint` applied at every level, assembled into a strict triangular field.
pub fn assemble_rint(p: &PiPair, m: &TriField, grid: &TimeGrid) -> TriField {
    let n = m.n();
    let (_, mcols) = m.entry_shape();
    let mut out = TriField::zeros(n, p.dim(), mcols, false);
    for k in 0..n {
        let col = rint(p, m, k, grid);
        for (idx, v) in col.into_iter().enumerate() {
            out.set(k + 1 + idx, k, v);
        }
    }
    out
}
