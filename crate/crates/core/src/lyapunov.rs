//! The quadratic side: `F`-coefficient assembly, the backward
//! Lyapunov-Volterra solve for `(P1, P2)`, and both sides of the quadratic
//! representation formula, plus the residual-weight form of the Ito
//! computation identity for arbitrary pairs.

use nalgebra::DMatrix;

use crate::error::{Result, SvieError};
use crate::fields::{PyrTensor, TriField};
use crate::forward::{propagate_second_moment, InputCondition, Strategy};
use crate::grid::TimeGrid;
use crate::instances::{InstanceRng, InstanceSpec, PyrSpec};
use crate::kernels::{KernelSpec, NodeFn, SampledKernels};
use crate::pi::{lint_rint, PiPair};

/// Weights `(Q1, Q2, Q3)` of the quadratic functional.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticWeights {
    pub q1: Vec<DMatrix<f64>>,
    pub q2: TriField,
    pub q3: PyrTensor,
}

impl QuadraticWeights {
    pub fn zero(n: usize, dim: usize) -> Self {
        Self {
            q1: vec![DMatrix::zeros(dim, dim); n + 1],
            q2: TriField::zeros(n, dim, dim, false),
            q3: PyrTensor::zeros(n, dim, true),
        }
    }

    /// Symmetrizes `Q1` and `Q3` in place; rejects inputs that are farther
    /// than `1e-8` from symmetric.
    pub fn validate(&mut self) -> Result<()> {
        for (k, m) in self.q1.iter_mut().enumerate() {
            let res = (&*m - m.transpose()).amax();
            if res > 1e-8 {
                return Err(SvieError::Unsupported(format!(
                    "Q1[{k}] asymmetry {res:.2e} exceeds 1e-8"
                )));
            }
            let sym = (&*m + m.transpose()) * 0.5;
            *m = sym;
        }
        if self.q3.symmetry_residual() > 1e-8 {
            return Err(SvieError::Unsupported(
                "Q3 violates the pairwise-transpose symmetry".into(),
            ));
        }
        self.q3.symmetrize();
        Ok(())
    }
}

/// Grid-independent description of quadratic weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSpec {
    pub q1: NodeFn,
    pub q2: KernelSpec,
    pub q3: PyrSpec,
}

impl QuadraticSpec {
    pub fn zero(dim: usize) -> Self {
        Self {
            q1: NodeFn::Zero {
                rows: dim,
                cols: dim,
            },
            q2: KernelSpec::zero(dim, dim),
            q3: PyrSpec::Zero { dim },
        }
    }

    pub fn sample(&self, grid: &TimeGrid) -> Result<QuadraticWeights> {
        let mut w = QuadraticWeights {
            q1: self.q1.sample(grid),
            q2: self.q2.sample(grid, self.q2.default_mode())?,
            q3: self.q3.sample(grid),
        };
        w.validate()?;
        Ok(w)
    }
}

/// Random symmetric weight spec with smooth node dependence; `Q1` is kept
/// diagonally dominant so the functional stays bounded away from zero on
/// nondegenerate inputs.
pub fn random_quadratic_spec(seed: u64, dim: usize) -> QuadraticSpec {
    let mut rng = InstanceRng::new(seed);
    let q1_base = rng.symmetric(dim, 0.5) + DMatrix::identity(dim, dim) * 1.5;
    QuadraticSpec {
        q1: NodeFn::Expr {
            base: q1_base,
            expr: rng.poly(0.3),
        },
        q2: KernelSpec::Constant(rng.matrix(dim, dim, 0.4)),
        q3: PyrSpec::Separable {
            base: rng.symmetric(dim, 0.5),
            s_expr: rng.poly(0.3),
            t_expr: rng.poly(0.3),
        },
    }
}

/// The `F`-coefficients of the Lyapunov-Volterra system at one level `k`:
/// `f1` pairs with `P1(k)`, `f2[i - k - 1]` with the diagonal boundary
/// `P2(i, k, k)`, and `f3[s1 - k][s2 - k]` is the transport forcing on the
/// level slab (slots with `s = k` carry the boundary-trace values; the
/// strategy kernel itself counts as zero on the diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct FSlices {
    pub f1: DMatrix<f64>,
    pub f2: Vec<DMatrix<f64>>,
    pub f3: Vec<Vec<DMatrix<f64>>>,
}

/// Evaluates `F1/F2/F3` at level `k` from a pair defined on levels `>= k`.
/// All integrals use strict indices `> k`.
pub fn assemble_f(
    p: &PiPair,
    kernels: &SampledKernels,
    strat: &Strategy,
    k: usize,
) -> FSlices {
    let grid = &kernels.grid;
    let n = grid.n;
    let h = grid.h;
    let d = kernels.dim_state;
    let l = kernels.dim_control;
    let xi = &strat.xi[k];

    // sandwich blocks at level k
    let cpc = lint_rint(&kernels.c, p, &kernels.c, k, grid);
    let cpd = lint_rint(&kernels.c, p, &kernels.d, k, grid);
    let dpc = lint_rint(&kernels.d, p, &kernels.c, k, grid);
    let dpd = lint_rint(&kernels.d, p, &kernels.d, k, grid);

    let f1 = &cpc + xi.transpose() * &dpc + &cpd * xi + xi.transpose() * &dpd * xi;

    // left/right compositions with B, including the boundary slot s = k
    // (multiplicative part absent there; only the P2 integral survives)
    let mut bp = vec![DMatrix::zeros(l, d); n - k + 1]; // (B^T lfloor P)(s, k)
    let mut pb = vec![DMatrix::zeros(d, l); n - k + 1]; // (P rint B)(s, k)
    if k < n {
        for s in k..=n {
            // the tensor has no slots with a zero space index; the s = 0
            // boundary trace is never consumed downstream
            if s == 0 {
                continue;
            }
            let mut left = DMatrix::zeros(l, d);
            let mut right = DMatrix::zeros(d, l);
            if s > k {
                left += kernels.b.get(s, k).transpose() * &p.p1[s];
                right += &p.p1[s] * kernels.b.get(s, k);
            }
            for r in (k + 1)..=n {
                left += kernels.b.get(r, k).transpose() * p.p2.get(r, s, k) * h;
                right += p.p2.get(s, r, k) * kernels.b.get(r, k) * h;
            }
            bp[s - k] = left;
            pb[s - k] = right;
        }
    }

    let mut f2 = Vec::with_capacity(n.saturating_sub(k));
    let mut pa = vec![DMatrix::zeros(d, d); n + 1];
    for i in (k + 1)..=n {
        let mut v = &p.p1[i] * kernels.a.get(i, k);
        for r in (k + 1)..=n {
            v += p.p2.get(i, r, k) * kernels.a.get(r, k) * h;
        }
        pa[i] = v;
    }
    for i in (k + 1)..=n {
        let gamma_i = strat.gamma.get(i, k);
        let v = &pa[i]
            + &pb[i - k] * xi
            + gamma_i.transpose() * &dpc
            + gamma_i.transpose() * &dpd * xi;
        f2.push(v);
    }

    let gamma_at = |s: usize| -> DMatrix<f64> {
        if s > k {
            strat.gamma.get(s, k).clone()
        } else {
            DMatrix::zeros(l, d)
        }
    };
    let mut f3 = vec![vec![DMatrix::zeros(d, d); n - k + 1]; n - k + 1];
    for s1 in k..=n {
        let g1 = gamma_at(s1);
        for s2 in k..=n {
            let g2 = gamma_at(s2);
            f3[s1 - k][s2 - k] =
                g1.transpose() * &bp[s2 - k] + &pb[s1 - k] * &g2 + g1.transpose() * &dpd * &g2;
        }
    }
    FSlices { f1, f2, f3 }
}

/// Backward sweep `k = N .. m0`. Per level: (1) transport the strictly
/// interior slots `P2(i, j, k) = P2(i, j, k+1) + h (F3(i, j; level k+1) +
/// Q3(i, j, k+1))`; (2) diagonal boundary `P2(i, k, k) = F2(i; level k) +
/// Q2(i, k)` with its transpose mirror; (3) `P1(k) = F1(level k) + Q1(k)`.
pub fn solve_lyapunov(
    kernels: &SampledKernels,
    strat: &Strategy,
    q: &QuadraticWeights,
    start_index: usize,
) -> Result<PiPair> {
    let grid = &kernels.grid;
    let n = grid.n;
    let h = grid.h;
    let d = kernels.dim_state;
    let m0 = start_index;

    let mut p = PiPair::zeros(n, d);
    p.p1[n] = q.q1[n].clone();

    for k in (m0..n).rev() {
        let col = k + 1;
        let f_up = assemble_f(&p, kernels, strat, col);
        // (1) strictly interior: min(i, j) > k
        for i in col..=n {
            for j in col..=n {
                let q3 = if col < i.min(j) {
                    q.q3.get(i, j, col).clone()
                } else {
                    DMatrix::zeros(d, d)
                };
                let v = p.p2.get(i, j, col) + (&f_up.f3[i - col][j - col] + q3) * h;
                if v.iter().any(|e| !e.is_finite()) {
                    return Err(SvieError::NonFinite { i, j: k });
                }
                p.p2.set(i, j, k, v);
            }
        }
        // (2) diagonal boundary, using the freshly written level-k interior;
        // the boundary writes touch no strict level-k sum, so the same
        // assembly also serves step (3)
        let f_here = assemble_f(&p, kernels, strat, k);
        if k >= 1 {
            for i in (k + 1)..=n {
                let v = &f_here.f2[i - k - 1] + q.q2.get(i, k);
                p.p2.set(i, k, k, v.clone());
                p.p2.set(k, i, k, v.transpose());
            }
        }
        // (3) pointwise, symmetrized
        let p1 = &f_here.f1 + &q.q1[k];
        p.p1[k] = (&p1 + p1.transpose()) * 0.5;
    }
    Ok(p)
}

/// `sum_{i>m0} <P1(i) x(i), x(i)> h + sum_{i,j>m0} <P2(i,j,m0) x(j), x(i)> h^2`.
pub fn representation_rhs(p: &PiPair, input: &InputCondition, grid: &TimeGrid) -> f64 {
    let n = grid.n;
    let h = grid.h;
    let m0 = input.start_index;
    let mut out = 0.0;
    for i in (m0 + 1)..=n {
        out += (input.x[i].transpose() * &p.p1[i] * &input.x[i])[(0, 0)] * h;
        for j in (m0 + 1)..=n {
            out += (input.x[i].transpose() * p.p2.get(i, j, m0) * &input.x[j])[(0, 0)] * h * h;
        }
    }
    out
}

/// The quadratic functional on the exact second moments of the homogeneous
/// scheme: per column `j`, traces of the weights against
/// `S_j = E[Z_j Z_j^T]`.
pub fn representation_lhs_exact(
    kernels: &SampledKernels,
    strat: &Strategy,
    q: &QuadraticWeights,
    input: &InputCondition,
) -> Result<f64> {
    let grid = &kernels.grid;
    let n = grid.n;
    let h = grid.h;
    let m0 = input.start_index;
    let s = propagate_second_moment(kernels, strat, input)?;
    let mut out = 0.0;
    for j in (m0 + 1)..=n {
        let mut level = (&q.q1[j] * s.theta_cov(j, j, j)).trace();
        for i in (j + 1)..=n {
            // 2 <Q2(i,j) X_j, Theta(i,j)> = 2 tr(Q2 E[X_j Theta^T])
            level += 2.0 * h * (q.q2.get(i, j) * s.theta_cov(j, j, i)).trace();
        }
        for i1 in (j + 1)..=n {
            for i2 in (j + 1)..=n {
                level += h * h * (q.q3.get(i1, i2, j) * s.theta_cov(j, i2, i1)).trace();
            }
        }
        out += level * h;
    }
    Ok(out)
}

/// Matrix of the self-adjoint operator `x -> P1 x + int P2(., r, m0) x(r) dr`
/// in the node basis, blocks `P1[i] delta_ij + P2[(i,j,m0)] h`, `i, j >= m0`.
pub fn operator_matrix(p: &PiPair, start_index: usize, grid: &TimeGrid) -> DMatrix<f64> {
    let n = grid.n;
    let d = p.dim();
    let m0 = start_index;
    let size = (n - m0 + 1) * d;
    let mut m = DMatrix::zeros(size, size);
    for i in m0..=n {
        for j in m0..=n {
            let mut block = if i == 0 || j == 0 {
                DMatrix::zeros(d, d)
            } else {
                p.p2.get(i, j, m0) * grid.h
            };
            if i == j {
                block += &p.p1[i];
            }
            m.view_mut(((i - m0) * d, (j - m0) * d), (d, d)).copy_from(&block);
        }
    }
    m
}

/// Effective weights whose quadratic functional reproduces
/// `representation_rhs(P)` for an arbitrary pair `P`: `Q1 = P1 - F1`,
/// `Q2 = P2(., k, k) - F2`, `Q3 = -(P2dot + F3)` with the same finite
/// differences and level conventions as the solver.
pub fn ito_residual_weights(
    p: &PiPair,
    kernels: &SampledKernels,
    strat: &Strategy,
    start_index: usize,
) -> QuadraticWeights {
    let grid = &kernels.grid;
    let n = grid.n;
    let h = grid.h;
    let d = kernels.dim_state;
    let mut q = QuadraticWeights::zero(n, d);
    for k in start_index..=n {
        let f = assemble_f(p, kernels, strat, k);
        q.q1[k] = &p.p1[k] - &f.f1;
        if k >= 1 {
            for i in (k + 1)..=n {
                q.q2.set(i, k, p.p2.get(i, k, k) - &f.f2[i - k - 1]);
            }
        }
        if k > start_index {
            // slot level k of Q3 pairs with the transport step from k-1 to k
            for i in k..=n {
                for j in k..=n {
                    if k < i.min(j) {
                        let dot = (p.p2.get(i, j, k) - p.p2.get(i, j, k - 1)) / h;
                        q.q3.set(i, j, k, -(dot + &f.f3[i - k][j - k]));
                    }
                }
            }
        }
    }
    q
}

/// Both sides of the representation identity on one sampled instance.
pub fn representation_sides(
    inst: &crate::instances::SampledInstance,
    qspec: &QuadraticSpec,
) -> Result<(f64, f64)> {
    let q = qspec.sample(&inst.grid)?;
    let m0 = inst.input.start_index;
    let lhs = representation_lhs_exact(&inst.kernels, &inst.strategy, &q, &inst.input)?;
    let p = solve_lyapunov(&inst.kernels, &inst.strategy, &q, m0)?;
    let rhs = representation_rhs(&p, &inst.input, &inst.grid);
    Ok((lhs, rhs))
}

/// Representation gap at `N` and `2N` (homogeneous instance expected).
pub fn representation_gap(
    spec: &InstanceSpec,
    qspec: &QuadraticSpec,
    n: usize,
) -> Result<crate::ebsvie::GapReport> {
    let coarse = spec.sample(n)?;
    let fine = spec.sample(2 * n)?;
    let (lc, rc) = representation_sides(&coarse, qspec)?;
    let (lf, rf) = representation_sides(&fine, qspec)?;
    Ok(crate::ebsvie::GapReport::from_gaps(
        (lc - rc).abs(),
        (lf - rf).abs(),
    ))
}

/// Grid-independent random pair in `Pi`: symmetric `P1` nodes and a smooth
/// separable symmetric `P2`, for exercising the Ito identity off the solver
/// manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct PiSpec {
    pub p1: NodeFn,
    pub p2: PyrSpec,
}

impl PiSpec {
    pub fn random(seed: u64, dim: usize) -> Self {
        let mut rng = InstanceRng::new(seed);
        Self {
            p1: NodeFn::Expr {
                base: rng.symmetric(dim, 1.0),
                expr: rng.poly(0.3),
            },
            p2: PyrSpec::Separable {
                base: rng.symmetric(dim, 0.8),
                s_expr: rng.poly(0.3),
                t_expr: rng.poly(0.3),
            },
        }
    }

    /// Samples on all slots, including the diagonal boundary and corners.
    pub fn sample(&self, grid: &TimeGrid) -> PiPair {
        let n = grid.n;
        let dim = match &self.p1 {
            NodeFn::Zero { rows, .. } => *rows,
            NodeFn::Constant(m) => m.nrows(),
            NodeFn::Expr { base, .. } => base.nrows(),
        };
        let mut p = PiPair::zeros(n, dim);
        p.p1 = self.p1.sample(grid);
        for i in 1..=n {
            for j in 1..=n {
                for k in 0..=i.min(j) {
                    p.p2.set(
                        i,
                        j,
                        k,
                        match &self.p2 {
                            PyrSpec::Zero { dim } => DMatrix::zeros(*dim, *dim),
                            other => other.value(grid.node(i), grid.node(j), grid.node(k)),
                        },
                    );
                }
            }
        }
        p.symmetrize();
        p
    }
}

/// Gap of the Ito computation identity for a fixed analytic pair, at `N`
/// and `2N`.
pub fn ito_gap(
    spec: &InstanceSpec,
    pspec: &PiSpec,
    n: usize,
) -> Result<crate::ebsvie::GapReport> {
    let mut gaps = [0.0f64; 2];
    for (slot, steps) in [n, 2 * n].into_iter().enumerate() {
        let inst = spec.sample(steps)?;
        let p = pspec.sample(&inst.grid);
        let q = ito_residual_weights(&p, &inst.kernels, &inst.strategy, 0);
        let lhs = representation_lhs_exact(&inst.kernels, &inst.strategy, &q, &inst.input)?;
        let rhs = representation_rhs(&p, &inst.input, &inst.grid);
        gaps[slot] = (lhs - rhs).abs();
    }
    Ok(crate::ebsvie::GapReport::from_gaps(gaps[0], gaps[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{random_instance_with, KernelFlavor};
    use crate::kernels::KernelSet;
    use nalgebra::dmatrix;

    fn homogeneous(seed: u64, coupling: f64) -> InstanceSpec {
        let mut spec = random_instance_with(seed, 1, 1, KernelFlavor::Smooth, coupling);
        spec.kernels.drift = KernelSpec::zero(1, 1);
        spec.kernels.sigma = KernelSpec::zero(1, 1);
        spec.v = NodeFn::Zero { rows: 1, cols: 1 };
        spec
    }

    #[test]
    fn f_is_linear_in_p_and_zero_at_zero() {
        let spec = homogeneous(2, 1.0);
        let inst = spec.sample(6).unwrap();
        let f = assemble_f(&PiPair::zeros(6, 1), &inst.kernels, &inst.strategy, 2);
        assert_eq!(f.f1.amax(), 0.0);
        assert!(f.f2.iter().all(|m| m.amax() == 0.0));
        assert!(f.f3.iter().flatten().all(|m| m.amax() == 0.0));
    }

    #[test]
    fn f_strategy_free_reduction() {
        // Xi = Gamma = 0: F1 = C^T |_ P _| C, F2 = P |> A, F3 = 0
        let mut spec = homogeneous(3, 1.0);
        spec.xi = NodeFn::Zero { rows: 1, cols: 1 };
        spec.gamma = KernelSpec::zero(1, 1);
        let inst = spec.sample(5).unwrap();
        let p = PiSpec::random(7, 1).sample(&inst.grid);
        let k = 1;
        let f = assemble_f(&p, &inst.kernels, &inst.strategy, k);
        let cpc = lint_rint(&inst.kernels.c, &p, &inst.kernels.c, k, &inst.grid);
        assert!((f.f1.clone() - cpc).amax() < 1e-14);
        assert!(f.f3.iter().flatten().all(|m| m.amax() < 1e-15));
        let pa = crate::pi::rint(&p, &inst.kernels.a, k, &inst.grid);
        for (idx, v) in pa.iter().enumerate() {
            assert!((&f.f2[idx] - v).amax() < 1e-14);
        }
    }

    #[test]
    fn f_matches_dense_oracle_all_ones() {
        // d = l = 1, N = 3, k = 1, all kernels, strategy entries, P1, P2 == 1
        let grid = TimeGrid::new(0.0, 1.0, 3).unwrap();
        let mut set = KernelSet::zero(1, 1);
        set.a = KernelSpec::Constant(dmatrix![1.0]);
        set.b = KernelSpec::Constant(dmatrix![1.0]);
        set.c = KernelSpec::Constant(dmatrix![1.0]);
        set.d = KernelSpec::Constant(dmatrix![1.0]);
        let kernels = set.sample(&grid).unwrap();
        let mut strat = Strategy::zero(3, 1, 1);
        strat.xi = vec![dmatrix![1.0]; 4];
        for i in 1..=3usize {
            for j in 0..i {
                strat.gamma.set(i, j, dmatrix![1.0]);
            }
        }
        let mut p = PiPair::zeros(3, 1);
        for m in &mut p.p1 {
            m[(0, 0)] = 1.0;
        }
        for i in 1..=3usize {
            for j in 1..=3usize {
                for k in 0..=i.min(j) {
                    p.p2.set(i, j, k, dmatrix![1.0]);
                }
            }
        }
        let f = assemble_f(&p, &kernels, &strat, 1);
        let h = 1.0 / 3.0;
        // sandwich: sum_{i>1} h + sum_{i,j>1} h^2, identical for every block
        let sand = 2.0 * h + 4.0 * h * h;
        let f1_want = 4.0 * sand;
        assert!((f.f1[(0, 0)] - f1_want).abs() < 1e-14);
        // bp(s) = [s>1] + sum_{r>1} h, same for pb and pa
        let bp = 1.0 + 2.0 * h;
        for i in [2usize, 3] {
            let want = bp + bp + sand + sand;
            assert!((f.f2[i - 2][(0, 0)] - want).abs() < 1e-14);
        }
        // interior slab slots s1, s2 > 1: bp + bp + sand
        let want = bp + bp + sand;
        assert!((f.f3[1][1][(0, 0)] - want).abs() < 1e-14);
        // boundary slot s1 = 1: gamma counts as zero there, pb(1) = 2h
        let want_boundary = 2.0 * h;
        assert!((f.f3[0][1][(0, 0)] - want_boundary).abs() < 1e-14);
    }

    #[test]
    fn zero_weights_give_zero_pair() {
        let spec = homogeneous(4, 1.0);
        let inst = spec.sample(6).unwrap();
        let q = QuadraticWeights::zero(6, 1);
        let p = solve_lyapunov(&inst.kernels, &inst.strategy, &q, 0).unwrap();
        assert_eq!(p.p2.max_abs(), 0.0);
        assert!(p.p1.iter().all(|m| m.amax() == 0.0));
    }

    #[test]
    fn decoupled_solution_matches_closed_form() {
        // all kernels zero: P1 = Q1, boundary P2 = Q2, interior accumulates Q3
        let grid = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let kernels = KernelSet::zero(1, 1).sample(&grid).unwrap();
        let strat = Strategy::zero(5, 1, 1);
        let qspec = random_quadratic_spec(11, 1);
        let q = qspec.sample(&grid).unwrap();
        let p = solve_lyapunov(&kernels, &strat, &q, 0).unwrap();
        let h = grid.h;
        for k in 0..=5usize {
            assert!((&p.p1[k] - &q.q1[k]).amax() < 1e-14);
        }
        for i in 1..=5usize {
            for j in 1..=5usize {
                for k in 0..=i.min(j) {
                    let mut want = if i == j.min(i) && j == i {
                        DMatrix::zeros(1, 1) // corner of the (i, i) pair
                    } else {
                        DMatrix::zeros(1, 1)
                    };
                    if i > j && k <= j {
                        want = q.q2.get(i, j).clone();
                    } else if j > i && k <= i {
                        want = q.q2.get(j, i).transpose();
                    }
                    let boundary = i.min(j);
                    if k < boundary {
                        let mut acc = want.clone();
                        for r in (k + 1)..boundary {
                            acc += q.q3.get(i, j, r) * h;
                        }
                        want = acc;
                    }
                    if k == boundary && i == j {
                        want = DMatrix::zeros(1, 1);
                    }
                    assert!(
                        (p.p2.get(i, j, k) - &want).amax() < 1e-13,
                        "({i},{j},{k})"
                    );
                }
            }
        }
    }

    #[test]
    fn scalar_constant_instance_matches_dense_oracle() {
        // d = l = 1, N = 4, constant kernels, Q1 = 1, Q2 = Q3 = 0; re-derive
        // the sweep with plain nested scalar loops
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let n = 4usize;
        let h = grid.h;
        let (ka, kb, kc, kd) = (0.7, 0.4, -0.5, 0.3);
        let (xi, ga) = (0.6, -0.4);
        let mut set = KernelSet::zero(1, 1);
        set.a = KernelSpec::Constant(dmatrix![ka]);
        set.b = KernelSpec::Constant(dmatrix![kb]);
        set.c = KernelSpec::Constant(dmatrix![kc]);
        set.d = KernelSpec::Constant(dmatrix![kd]);
        let kernels = set.sample(&grid).unwrap();
        let mut strat = Strategy::zero(n, 1, 1);
        strat.xi = vec![dmatrix![xi]; n + 1];
        for i in 1..=n {
            for j in 0..i {
                strat.gamma.set(i, j, dmatrix![ga]);
            }
        }
        let mut q = QuadraticWeights::zero(n, 1);
        for m in &mut q.q1 {
            m[(0, 0)] = 1.0;
        }
        let p = solve_lyapunov(&kernels, &strat, &q, 0).unwrap();

        // oracle: scalar arrays p1[k], p2[i][j][k]
        let mut p1 = vec![0.0f64; n + 1];
        let mut p2 = vec![vec![vec![0.0f64; n + 1]; n + 1]; n + 1];
        p1[n] = 1.0;
        let gam = |s: usize, t: usize| if s > t { ga } else { 0.0 };
        let assemble = |p1: &Vec<f64>, p2: &Vec<Vec<Vec<f64>>>, k: usize| {
            let mut cpc = 0.0;
            let mut cpd = 0.0;
            let mut dpc = 0.0;
            let mut dpd = 0.0;
            for i in (k + 1)..=n {
                cpc += kc * p1[i] * kc * h;
                cpd += kc * p1[i] * kd * h;
                dpc += kd * p1[i] * kc * h;
                dpd += kd * p1[i] * kd * h;
                for j in (k + 1)..=n {
                    cpc += kc * p2[i][j][k] * kc * h * h;
                    cpd += kc * p2[i][j][k] * kd * h * h;
                    dpc += kd * p2[i][j][k] * kc * h * h;
                    dpd += kd * p2[i][j][k] * kd * h * h;
                }
            }
            let mut bp = vec![0.0f64; n + 1];
            let mut pb = vec![0.0f64; n + 1];
            let mut pa = vec![0.0f64; n + 1];
            for s in k..=n {
                if s > k {
                    bp[s] += kb * p1[s];
                    pb[s] += p1[s] * kb;
                    pa[s] += p1[s] * ka;
                }
                for r in (k + 1)..=n {
                    bp[s] += kb * p2[r][s][k] * h;
                    pb[s] += p2[s][r][k] * kb * h;
                    if s > k {
                        pa[s] += p2[s][r][k] * ka * h;
                    }
                }
            }
            (cpc, cpd, dpc, dpd, bp, pb, pa)
        };
        for k in (0..n).rev() {
            let col = k + 1;
            {
                let (_, _, _, dpd, bp, pb, _) = assemble(&p1, &p2, col);
                let mut next = p2.clone();
                for i in col..=n {
                    for j in col..=n {
                        let f3 = gam(i, col) * bp[j] + pb[i] * gam(j, col)
                            + gam(i, col) * dpd * gam(j, col);
                        next[i][j][k] = p2[i][j][col] + h * f3;
                    }
                }
                p2 = next;
            }
            {
                let (_, _, dpc, dpd, _, pb, pa) = assemble(&p1, &p2, k);
                for i in (k + 1)..=n {
                    let f2 = pa[i] + pb[i] * xi + gam(i, k) * dpc + gam(i, k) * dpd * xi;
                    p2[i][k][k] = f2;
                    p2[k][i][k] = f2;
                }
            }
            let (cpc, cpd, dpc, dpd, _, _, _) = assemble(&p1, &p2, k);
            p1[k] = cpc + xi * dpc + cpd * xi + xi * dpd * xi + 1.0;
        }
        for k in 0..=n {
            assert!((p.p1[k][(0, 0)] - p1[k]).abs() < 1e-13, "p1[{k}]");
        }
        for i in 1..=n {
            for j in 1..=n {
                for k in 0..=i.min(j) {
                    assert!(
                        (p.p2.get(i, j, k)[(0, 0)] - p2[i][j][k]).abs() < 1e-13,
                        "p2[{i}][{j}][{k}]"
                    );
                }
            }
        }
    }

    #[test]
    fn solved_pair_is_symmetric_and_operator_self_adjoint() {
        let spec = homogeneous(6, 1.0);
        let inst = spec.sample(8).unwrap();
        let q = random_quadratic_spec(13, 1).sample(&inst.grid).unwrap();
        let p = solve_lyapunov(&inst.kernels, &inst.strategy, &q, 0).unwrap();
        assert!(p.symmetry_residual() < 1e-12);
        let m = operator_matrix(&p, 0, &inst.grid);
        assert!((m.clone() - m.transpose()).amax() < 1e-12);
    }

    #[test]
    fn solver_is_linear_in_weights() {
        let spec = homogeneous(14, 1.0);
        let inst = spec.sample(6).unwrap();
        let qa = random_quadratic_spec(1, 1).sample(&inst.grid).unwrap();
        let qb = random_quadratic_spec(2, 1).sample(&inst.grid).unwrap();
        let mut qs = QuadraticWeights::zero(6, 1);
        for k in 0..=6usize {
            qs.q1[k] = &qa.q1[k] + &qb.q1[k];
        }
        for i in 1..=6usize {
            for j in 0..i {
                qs.q2.set(i, j, qa.q2.get(i, j) + qb.q2.get(i, j));
            }
            for j in 1..=6usize {
                for k in 0..=i.min(j) {
                    qs.q3.set(i, j, k, qa.q3.get(i, j, k) + qb.q3.get(i, j, k));
                }
            }
        }
        let pa = solve_lyapunov(&inst.kernels, &inst.strategy, &qa, 0).unwrap();
        let pb = solve_lyapunov(&inst.kernels, &inst.strategy, &qb, 0).unwrap();
        let ps = solve_lyapunov(&inst.kernels, &inst.strategy, &qs, 0).unwrap();
        for k in 0..=6usize {
            assert!((&ps.p1[k] - (&pa.p1[k] + &pb.p1[k])).amax() < 1e-12);
        }
        for i in 1..=6usize {
            for j in 1..=6usize {
                for k in 0..=i.min(j) {
                    let want = pa.p2.get(i, j, k) + pb.p2.get(i, j, k);
                    assert!((ps.p2.get(i, j, k) - want).amax() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn representation_rhs_identity_form() {
        // P1 = I, P2 = 0, x = 1 on [0, 1]: value sums to 1
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let mut p = PiPair::zeros(10, 1);
        for m in &mut p.p1 {
            m[(0, 0)] = 1.0;
        }
        let input = InputCondition::new(0, vec![dmatrix![1.0]; 11]);
        let v = representation_rhs(&p, &input, &grid);
        assert!((v - 1.0).abs() < 1e-14);
    }

    #[test]
    fn representation_rhs_equals_operator_pairing() {
        let grid = TimeGrid::new(0.0, 1.0, 6).unwrap();
        let p = PiSpec::random(17, 2).sample(&grid);
        let x: Vec<_> = (0..=6)
            .map(|i| nalgebra::dmatrix![1.0 + 0.2 * i as f64; (i as f64).cos()])
            .collect();
        let input = InputCondition::new(0, x.clone());
        let m = operator_matrix(&p, 0, &grid);
        // stacked x with the start slot zeroed matches the strict-index sums
        let mut xv = DMatrix::zeros(7 * 2, 1);
        for i in 1..=6usize {
            xv.rows_mut(i * 2, 2).copy_from(&x[i]);
        }
        let pairing = (xv.transpose() * &m * &xv)[(0, 0)] * grid.h;
        let rhs = representation_rhs(&p, &input, &grid);
        assert!((pairing - rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
    }

    #[test]
    fn representation_exact_for_decoupled_case() {
        // zero kernels: both sides reduce to the same finite sums
        let mut spec = InstanceSpec::trivial(0.0, 1.0, 1, 1);
        let mut rng = InstanceRng::new(3);
        spec.x = NodeFn::Expr {
            base: rng.positive_matrix(1, 1, 0.5, 1.5),
            expr: rng.poly(0.3),
        };
        let qspec = random_quadratic_spec(5, 1);
        let inst = spec.sample(12).unwrap();
        let (lhs, rhs) = representation_sides(&inst, &qspec).unwrap();
        assert!(
            (lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()),
            "lhs {lhs} rhs {rhs}"
        );
    }

    #[test]
    fn representation_gap_converges() {
        let spec = homogeneous(9, 0.3);
        let qspec = random_quadratic_spec(21, 1);
        let report = representation_gap(&spec, &qspec, 16).unwrap();
        if let Some(order) = report.order {
            assert!(order >= 0.8, "order {order}, {report:?}");
        }
    }

    #[test]
    fn ito_identity_converges_for_fixed_pair() {
        let spec = homogeneous(25, 0.3);
        let pspec = PiSpec::random(31, 1);
        let report = ito_gap(&spec, &pspec, 16).unwrap();
        if let Some(order) = report.order {
            assert!(order >= 0.8, "order {order}, {report:?}");
        }
    }

    #[test]
    fn lhs_matches_monte_carlo() {
        use crate::forward::{simulate_brownian, solve_closed_loop_direct};
        let spec = homogeneous(40, 1.0);
        let inst = spec.sample(4).unwrap();
        let q = random_quadratic_spec(41, 1).sample(&inst.grid).unwrap();
        let exact =
            representation_lhs_exact(&inst.kernels, &inst.strategy, &q, &inst.input).unwrap();

        let grid = inst.grid;
        let h = grid.h;
        let paths = 100_000u64;
        let mut acc = 0.0;
        let mut acc_sq = 0.0;
        for id in 0..paths {
            let path = simulate_brownian(7, id, &grid);
            let sol =
                solve_closed_loop_direct(&inst.kernels, &inst.strategy, &inst.input, &path)
                    .unwrap();
            let mut f = 0.0;
            for j in 1..=4usize {
                let xj = &sol.x[j];
                f += (xj.transpose() * &q.q1[j] * xj)[(0, 0)] * h;
                for i in (j + 1)..=4 {
                    f += 2.0
                        * (sol.theta.get(i, j).transpose() * q.q2.get(i, j) * xj)[(0, 0)]
                        * h
                        * h;
                }
                for i1 in (j + 1)..=4 {
                    for i2 in (j + 1)..=4 {
                        f += (sol.theta.get(i1, j).transpose()
                            * q.q3.get(i1, i2, j)
                            * sol.theta.get(i2, j))[(0, 0)]
                            * h
                            * h
                            * h;
                    }
                }
            }
            acc += f;
            acc_sq += f * f;
        }
        let mc = acc / paths as f64;
        let se = ((acc_sq / paths as f64 - mc * mc) / paths as f64).sqrt();
        assert!(
            (mc - exact).abs() < 4.0 * se,
            "mc {mc} exact {exact} se {se}"
        );
    }
}
