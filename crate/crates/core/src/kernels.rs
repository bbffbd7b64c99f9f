use nalgebra::DMatrix;

use crate::error::{Result, SvieError};
use crate::expr::ScalarExpr;
use crate::fields::TriField;
use crate::grid::TimeGrid;

/// Per-node deterministic function of `t`, matrix-valued.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeFn {
    Zero { rows: usize, cols: usize },
    Constant(DMatrix<f64>),
    /// `base * expr(t)` entrywise.
    Expr { base: DMatrix<f64>, expr: ScalarExpr },
}

impl NodeFn {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            NodeFn::Zero { rows, cols } => (*rows, *cols),
            NodeFn::Constant(m) => (m.nrows(), m.ncols()),
            NodeFn::Expr { base, .. } => (base.nrows(), base.ncols()),
        }
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        match self {
            NodeFn::Zero { rows, cols } => DMatrix::zeros(*rows, *cols),
            NodeFn::Constant(m) => m.clone(),
            NodeFn::Expr { base, expr } => base * expr.eval(t),
        }
    }

    /// Values at every grid node `t_0..t_N`.
    pub fn sample(&self, grid: &TimeGrid) -> Vec<DMatrix<f64>> {
        (0..=grid.n).map(|i| self.eval(grid.node(i))).collect()
    }
}

/// How a kernel spec is turned into values on the discrete triangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Evaluate at the node pair `(t_i, t_j)`.
    Point,
    /// Average over the quadrature cell `[t_j, t_{j+1})` at fixed `t_i`.
    CellAverage,
}

/// Analytic description of a two-time kernel on the triangle `t > s`.
///
/// `FractionalConvolution { c, hurst, modulation }` is the singular kernel
/// `k(t, s) = c (t - s)^{H - 1/2} m(s)`; square-integrable on the triangle
/// for every `H` in `(0, 1)`. With `H = 1/2` it degenerates to the smooth
/// separable kernel `c m(s)`.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    Zero { rows: usize, cols: usize },
    Constant(DMatrix<f64>),
    Tabulated(TriField),
    FractionalConvolution {
        c: f64,
        hurst: f64,
        modulation: NodeFn,
    },
    Sum(Vec<KernelSpec>),
}

impl KernelSpec {
    pub fn zero(rows: usize, cols: usize) -> Self {
        KernelSpec::Zero { rows, cols }
    }

    pub fn shape(&self) -> Result<(usize, usize)> {
        match self {
            KernelSpec::Zero { rows, cols } => Ok((*rows, *cols)),
            KernelSpec::Constant(m) => Ok((m.nrows(), m.ncols())),
            KernelSpec::Tabulated(f) => Ok(f.entry_shape()),
            KernelSpec::FractionalConvolution { modulation, .. } => Ok(modulation.shape()),
            KernelSpec::Sum(terms) => {
                let mut shape = None;
                for t in terms {
                    let s = t.shape()?;
                    match shape {
                        None => shape = Some(s),
                        Some(prev) if prev == s => {}
                        Some(prev) => {
                            return Err(SvieError::DimensionMismatch(format!(
                                "sum terms have shapes {prev:?} and {s:?}"
                            )))
                        }
                    }
                }
                shape.ok_or_else(|| SvieError::InvalidKernel("empty sum".into()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::FractionalConvolution { c, hurst, .. } => {
                if !c.is_finite() {
                    return Err(SvieError::InvalidKernel(format!("non-finite c = {c}")));
                }
                if !(*hurst > 0.0 && *hurst < 1.0) {
                    return Err(SvieError::InvalidKernel(format!(
                        "Hurst parameter H = {hurst} outside (0, 1)"
                    )));
                }
                Ok(())
            }
            KernelSpec::Sum(terms) => {
                self.shape()?;
                terms.iter().try_for_each(|t| t.validate())
            }
            _ => Ok(()),
        }
    }

    /// Preferred sampling mode: cell averages for singular kernels, point
    /// values otherwise.
    pub fn default_mode(&self) -> SampleMode {
        match self {
            KernelSpec::FractionalConvolution { hurst, .. } if *hurst < 0.5 => {
                SampleMode::CellAverage
            }
            KernelSpec::Sum(terms) => {
                if terms
                    .iter()
                    .any(|t| t.default_mode() == SampleMode::CellAverage)
                {
                    SampleMode::CellAverage
                } else {
                    SampleMode::Point
                }
            }
            _ => SampleMode::Point,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            KernelSpec::Zero { .. } => true,
            KernelSpec::Sum(terms) => terms.iter().all(|t| t.is_zero()),
            _ => false,
        }
    }

    /// Values on the strict triangle `(i, j)`, `j < i`.
    pub fn sample(&self, grid: &TimeGrid, mode: SampleMode) -> Result<TriField> {
        self.validate()?;
        let (rows, cols) = self.shape()?;
        let mut out = TriField::zeros(grid.n, rows, cols, false);
        match self {
            KernelSpec::Zero { .. } => {}
            KernelSpec::Constant(m) => {
                for i in 1..=grid.n {
                    for j in 0..i {
                        out.set(i, j, m.clone());
                    }
                }
            }
            KernelSpec::Tabulated(f) => {
                if f.n() != grid.n {
                    return Err(SvieError::InvalidKernel(format!(
                        "tabulated field has N={}, grid has N={}",
                        f.n(),
                        grid.n
                    )));
                }
                for (i, j, v) in f.iter_strict() {
                    out.set(i, j, v.clone());
                }
            }
            KernelSpec::FractionalConvolution {
                c,
                hurst,
                modulation,
            } => {
                let mods = modulation.sample(grid);
                for i in 1..=grid.n {
                    let ti = grid.node(i);
                    for j in 0..i {
                        let weight = match mode {
                            SampleMode::Point => *c * (ti - grid.node(j)).powf(hurst - 0.5),
                            SampleMode::CellAverage => {
                                // (1/h) * int_{t_j}^{t_{j+1}} c (t_i - s)^{H-1/2} ds
                                let p = hurst + 0.5;
                                let a = (ti - grid.node(j)).powf(p);
                                let b = (ti - grid.node(j + 1)).max(0.0).powf(p);
                                *c * (a - b) / (p * grid.h)
                            }
                        };
                        out.set(i, j, &mods[j] * weight);
                    }
                }
            }
            KernelSpec::Sum(terms) => {
                for term in terms {
                    let part = term.sample(grid, mode)?;
                    for i in 1..=grid.n {
                        for j in 0..i {
                            let v = out.get(i, j) + part.get(i, j);
                            out.set(i, j, v);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// The coefficient and inhomogeneous-term specs of the controlled equation:
/// `A (d x d)`, `B (d x l)`, `C (d x d)`, `D (d x l)` and the deterministic
/// drift/diffusion inhomogeneities (`d x 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    pub a: KernelSpec,
    pub b: KernelSpec,
    pub c: KernelSpec,
    pub d: KernelSpec,
    pub drift: KernelSpec,
    pub sigma: KernelSpec,
    pub dim_state: usize,
    pub dim_control: usize,
}

impl KernelSet {
    pub fn zero(dim_state: usize, dim_control: usize) -> Self {
        Self {
            a: KernelSpec::zero(dim_state, dim_state),
            b: KernelSpec::zero(dim_state, dim_control),
            c: KernelSpec::zero(dim_state, dim_state),
            d: KernelSpec::zero(dim_state, dim_control),
            drift: KernelSpec::zero(dim_state, 1),
            sigma: KernelSpec::zero(dim_state, 1),
            dim_state,
            dim_control,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim_state;
        let l = self.dim_control;
        let checks = [
            ("A", &self.a, (d, d)),
            ("B", &self.b, (d, l)),
            ("C", &self.c, (d, d)),
            ("D", &self.d, (d, l)),
            ("b", &self.drift, (d, 1)),
            ("sigma", &self.sigma, (d, 1)),
        ];
        for (name, spec, want) in checks {
            spec.validate()?;
            let got = spec.shape()?;
            if got != want {
                return Err(SvieError::DimensionMismatch(format!(
                    "kernel {name}: expected {want:?}, got {got:?}"
                )));
            }
        }
        Ok(())
    }

    /// Samples every member with its default mode.
    pub fn sample(&self, grid: &TimeGrid) -> Result<SampledKernels> {
        self.validate()?;
        Ok(SampledKernels {
            a: self.a.sample(grid, self.a.default_mode())?,
            b: self.b.sample(grid, self.b.default_mode())?,
            c: self.c.sample(grid, self.c.default_mode())?,
            d: self.d.sample(grid, self.d.default_mode())?,
            drift: self.drift.sample(grid, self.drift.default_mode())?,
            sigma: self.sigma.sample(grid, self.sigma.default_mode())?,
            dim_state: self.dim_state,
            dim_control: self.dim_control,
            grid: *grid,
        })
    }
}

/// Grid samples of a `KernelSet`, shared read-only by the solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledKernels {
    pub a: TriField,
    pub b: TriField,
    pub c: TriField,
    pub d: TriField,
    pub drift: TriField,
    pub sigma: TriField,
    pub dim_state: usize,
    pub dim_control: usize,
    pub grid: TimeGrid,
}
