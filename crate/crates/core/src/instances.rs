//! Grid-independent problem descriptions. A single `InstanceSpec` can be
//! sampled at any resolution, which is what the refinement experiments
//! (duality gap, representation gap, weak-convergence orders) need.

use nalgebra::DMatrix;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::expr::ScalarExpr;
use crate::fields::PyrTensor;
use crate::forward::{InputCondition, Strategy};
use crate::grid::TimeGrid;
use crate::kernels::{KernelSet, KernelSpec, NodeFn, SampledKernels};

/// Analytic description of a pyramid-domain weight `(s1, s2, t)`, sampled at
/// nodes with the boundary level `k = min(i, j)` left zero (the quadrature
/// never touches it).
#[derive(Debug, Clone, PartialEq)]
pub enum PyrSpec {
    Zero {
        dim: usize,
    },
    Constant(DMatrix<f64>),
    /// `base * s_expr(s1) * s_expr(s2) * t_expr(t)`; symmetric whenever
    /// `base` is.
    Separable {
        base: DMatrix<f64>,
        s_expr: ScalarExpr,
        t_expr: ScalarExpr,
    },
}

impl PyrSpec {
    pub fn dim(&self) -> usize {
        match self {
            PyrSpec::Zero { dim } => *dim,
            PyrSpec::Constant(m) => m.nrows(),
            PyrSpec::Separable { base, .. } => base.nrows(),
        }
    }

    pub fn value(&self, s1: f64, s2: f64, t: f64) -> DMatrix<f64> {
        match self {
            PyrSpec::Zero { dim } => DMatrix::zeros(*dim, *dim),
            PyrSpec::Constant(m) => m.clone(),
            PyrSpec::Separable {
                base,
                s_expr,
                t_expr,
            } => base * (s_expr.eval(s1) * s_expr.eval(s2) * t_expr.eval(t)),
        }
    }

    pub fn sample(&self, grid: &TimeGrid) -> PyrTensor {
        let n = grid.n;
        let mut out = PyrTensor::zeros(n, self.dim(), true);
        for i in 1..=n {
            for j in 1..=n {
                for k in 0..i.min(j) {
                    out.set(
                        i,
                        j,
                        k,
                        self.value(grid.node(i), grid.node(j), grid.node(k)),
                    );
                }
            }
        }
        out
    }
}

/// Everything needed to pose one closed-loop problem with a linear target
/// functional, independently of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSpec {
    pub t0: f64,
    pub t_end: f64,
    pub kernels: KernelSet,
    pub xi: NodeFn,
    pub gamma: KernelSpec,
    pub v: NodeFn,
    pub x: NodeFn,
    pub psi: NodeFn,
    pub chi: KernelSpec,
}

/// One `InstanceSpec` realized on a concrete grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledInstance {
    pub grid: TimeGrid,
    pub kernels: SampledKernels,
    pub strategy: Strategy,
    pub input: InputCondition,
    pub psi: Vec<DMatrix<f64>>,
    pub chi: crate::fields::TriField,
}

impl InstanceSpec {
    pub fn dims(&self) -> (usize, usize) {
        (self.kernels.dim_state, self.kernels.dim_control)
    }

    pub fn trivial(t0: f64, t_end: f64, d: usize, l: usize) -> Self {
        Self {
            t0,
            t_end,
            kernels: KernelSet::zero(d, l),
            xi: NodeFn::Zero { rows: l, cols: d },
            gamma: KernelSpec::zero(l, d),
            v: NodeFn::Zero { rows: l, cols: 1 },
            x: NodeFn::Zero { rows: d, cols: 1 },
            psi: NodeFn::Zero { rows: d, cols: 1 },
            chi: KernelSpec::zero(d, 1),
        }
    }

    pub fn sample(&self, n: usize) -> Result<SampledInstance> {
        let grid = TimeGrid::new(self.t0, self.t_end, n)?;
        let (d, l) = self.dims();
        let kernels = self.kernels.sample(&grid)?;
        let strategy = Strategy {
            xi: self.xi.sample(&grid),
            gamma: self.gamma.sample(&grid, self.gamma.default_mode())?,
            v: self.v.sample(&grid),
        };
        debug_assert_eq!(self.xi.shape(), (l, d));
        let input = InputCondition::new(0, self.x.sample(&grid));
        let psi = self.psi.sample(&grid);
        let chi = self.chi.sample(&grid, self.chi.default_mode())?;
        Ok(SampledInstance {
            grid,
            kernels,
            strategy,
            input,
            psi,
            chi,
        })
    }
}

/// Small deterministic PRNG helpers for instance generation.
pub struct InstanceRng(ChaCha8Rng);

impl InstanceRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| self.uniform(-scale, scale))
    }

    pub fn positive_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| self.uniform(lo, hi))
    }

    pub fn symmetric(&mut self, dim: usize, scale: f64) -> DMatrix<f64> {
        let m = self.matrix(dim, dim, scale);
        (&m + m.transpose()) * 0.5
    }

    pub fn poly(&mut self, scale: f64) -> ScalarExpr {
        let a = self.uniform(-scale, scale);
        let b = self.uniform(-scale, scale);
        let c = self.uniform(0.5, 1.5);
        ScalarExpr::parse(&format!("{c} + {a}*t + {b}*t^2")).unwrap()
    }
}

/// Whether generated kernels are smooth or carry a fractional singularity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelFlavor {
    Smooth,
    Fractional { hurst: f64 },
}

/// Moderately-sized random instance on `[0, 1]`; scales chosen so that the
/// explicit schemes stay stable at `N >= 8`.
pub fn random_instance(seed: u64, d: usize, l: usize, flavor: KernelFlavor) -> InstanceSpec {
    random_instance_with(seed, d, l, flavor, 1.0)
}

/// Same generator with every coupling term (`A, B, C, D, Xi, Gamma`) scaled
/// by `coupling`; the data terms keep their size. Small couplings shrink the
/// discretization-mismatch constant in the identity checks without making
/// the identities trivial.
pub fn random_instance_with(
    seed: u64,
    d: usize,
    l: usize,
    flavor: KernelFlavor,
    coupling: f64,
) -> InstanceSpec {
    let mut rng = InstanceRng::new(seed);
    let mut spec = InstanceSpec::trivial(0.0, 1.0, d, l);
    let g = coupling;

    let a_base = rng.matrix(d, d, 0.5 * g);
    spec.kernels.a = match flavor {
        KernelFlavor::Smooth => KernelSpec::Constant(a_base),
        KernelFlavor::Fractional { hurst } => KernelSpec::FractionalConvolution {
            c: rng.uniform(0.2, 0.5),
            hurst,
            modulation: NodeFn::Expr {
                base: a_base,
                expr: rng.poly(0.3),
            },
        },
    };
    spec.kernels.b = KernelSpec::Constant(rng.matrix(d, l, 0.4 * g));
    spec.kernels.c = match flavor {
        KernelFlavor::Smooth => KernelSpec::Constant(rng.matrix(d, d, 0.4 * g)),
        KernelFlavor::Fractional { .. } => KernelSpec::Constant(rng.matrix(d, d, 0.3 * g)),
    };
    spec.kernels.d = KernelSpec::Constant(rng.matrix(d, l, 0.3 * g));
    spec.kernels.drift = KernelSpec::Constant(rng.matrix(d, 1, 0.3));
    spec.kernels.sigma = KernelSpec::Constant(rng.matrix(d, 1, 0.3));

    spec.xi = NodeFn::Expr {
        base: rng.matrix(l, d, 0.3 * g),
        expr: rng.poly(0.2),
    };
    spec.gamma = KernelSpec::Constant(rng.matrix(l, d, 0.3 * g));
    spec.v = NodeFn::Expr {
        base: rng.matrix(l, 1, 0.3),
        expr: rng.poly(0.2),
    };
    spec.x = NodeFn::Expr {
        base: rng.positive_matrix(d, 1, 0.5, 1.5),
        expr: rng.poly(0.3),
    };
    spec.psi = NodeFn::Expr {
        base: rng.positive_matrix(d, 1, 0.5, 1.5),
        expr: rng.poly(0.3),
    };
    spec.chi = KernelSpec::Constant(rng.matrix(d, 1, 0.5));
    spec
}
