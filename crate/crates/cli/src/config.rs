//! Config schema: one TOML file describes the grid, kernels, strategy,
//! input, optional weights/duality data, and Monte Carlo settings. Unknown
//! keys are rejected; every expression string is parsed up front.

use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use svie_core::expr::ScalarExpr;
use svie_core::fields::TriField;
use svie_core::instances::{InstanceSpec, PyrSpec};
use svie_core::kernels::{KernelSpec, NodeFn};
use svie_core::lyapunov::QuadraticSpec;
use svie_core::montecarlo::McConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridCfg,
    pub dims: DimsCfg,
    #[serde(default)]
    pub kernels: KernelsCfg,
    #[serde(default)]
    pub strategy: StrategyCfg,
    pub input: InputCfg,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightsCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duality: Option<DualityCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputCfg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCfg {
    pub t0: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    #[serde(rename = "N")]
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsCfg {
    pub d: usize,
    pub l: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelsCfg {
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<FieldCfg>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b_ctrl: Option<FieldCfg>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub c: Option<FieldCfg>,
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    pub d_ctrl: Option<FieldCfg>,
    #[serde(rename = "b", default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<FieldCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<FieldCfg>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyCfg {
    #[serde(rename = "Xi", default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<NodeCfg>,
    #[serde(rename = "Gamma", default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<FieldCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<NodeCfg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputCfg {
    #[serde(default)]
    pub start: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<NodeCfg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsCfg {
    #[serde(rename = "Q1", default, skip_serializing_if = "Option::is_none")]
    pub q1: Option<NodeCfg>,
    #[serde(rename = "Q2", default, skip_serializing_if = "Option::is_none")]
    pub q2: Option<FieldCfg>,
    #[serde(rename = "Q3", default, skip_serializing_if = "Option::is_none")]
    pub q3: Option<PyrCfg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualityCfg {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<NodeCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi: Option<FieldCfg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McCfg {
    pub n_paths: u64,
    pub seed: u64,
    pub batch_size: u64,
    #[serde(default)]
    pub antithetic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputCfg {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formats: Option<Vec<String>>,
}

/// Triangle-kernel description: constant, fractional-convolution, or a
/// tabulated CSV (columns `i,j,row,col,value`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldCfg {
    Zero,
    Constant {
        value: Vec<Vec<f64>>,
    },
    Fractional {
        c: f64,
        hurst: f64,
        base: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expr: Option<String>,
    },
    Tabulated {
        path: String,
    },
}

/// Per-node function: constant or an expression over `t` applied to a base
/// matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum NodeCfg {
    Zero,
    Constant { value: Vec<Vec<f64>> },
    Expr { base: Vec<Vec<f64>>, expr: String },
}

/// Pyramid weight description for `Q3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PyrCfg {
    Zero,
    Constant {
        value: Vec<Vec<f64>>,
    },
    Separable {
        base: Vec<Vec<f64>>,
        s_expr: String,
        t_expr: String,
    },
}

fn to_matrix(value: &[Vec<f64>], rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>> {
    if value.len() != rows || value.iter().any(|r| r.len() != cols) {
        bail!("{what}: expected a {rows}x{cols} matrix");
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| value[i][j]))
}

fn parse_expr(src: &str, what: &str) -> Result<ScalarExpr> {
    ScalarExpr::parse(src).with_context(|| format!("{what}: bad expression {src:?}"))
}

fn node_fn(cfg: &Option<NodeCfg>, rows: usize, cols: usize, what: &str) -> Result<NodeFn> {
    Ok(match cfg {
        None | Some(NodeCfg::Zero) => NodeFn::Zero { rows, cols },
        Some(NodeCfg::Constant { value }) => NodeFn::Constant(to_matrix(value, rows, cols, what)?),
        Some(NodeCfg::Expr { base, expr }) => NodeFn::Expr {
            base: to_matrix(base, rows, cols, what)?,
            expr: parse_expr(expr, what)?,
        },
    })
}

/// Loads a tabulated triangle field from CSV: header line, then rows
/// `i,j,row,col,value` with `0 <= j < i <= N`.
pub fn load_tri_csv(path: &Path, n: usize, rows: usize, cols: usize) -> Result<TriField> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading tabulated field {}", path.display()))?;
    let mut field = TriField::zeros(n, rows, cols, false);
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            bail!("{}:{}: expected i,j,row,col,value", path.display(), lineno + 1);
        }
        let parse = |s: &str| -> Result<usize> {
            s.trim()
                .parse()
                .with_context(|| format!("{}:{}: bad index {s:?}", path.display(), lineno + 1))
        };
        let (i, j, r, c) = (parse(cells[0])?, parse(cells[1])?, parse(cells[2])?, parse(cells[3])?);
        let value: f64 = cells[4]
            .trim()
            .parse()
            .with_context(|| format!("{}:{}: bad value", path.display(), lineno + 1))?;
        if j >= i || i > n || r >= rows || c >= cols {
            bail!("{}:{}: entry ({i},{j})[{r},{c}] out of domain", path.display(), lineno + 1);
        }
        let mut m = field.get(i, j).clone();
        m[(r, c)] = value;
        field.set(i, j, m);
    }
    Ok(field)
}

fn field_spec(
    cfg: &Option<FieldCfg>,
    rows: usize,
    cols: usize,
    n: usize,
    base_dir: &Path,
    what: &str,
) -> Result<KernelSpec> {
    Ok(match cfg {
        None | Some(FieldCfg::Zero) => KernelSpec::zero(rows, cols),
        Some(FieldCfg::Constant { value }) => {
            KernelSpec::Constant(to_matrix(value, rows, cols, what)?)
        }
        Some(FieldCfg::Fractional { c, hurst, base, expr }) => KernelSpec::FractionalConvolution {
            c: *c,
            hurst: *hurst,
            modulation: match expr {
                None => NodeFn::Constant(to_matrix(base, rows, cols, what)?),
                Some(src) => NodeFn::Expr {
                    base: to_matrix(base, rows, cols, what)?,
                    expr: parse_expr(src, what)?,
                },
            },
        },
        Some(FieldCfg::Tabulated { path }) => {
            KernelSpec::Tabulated(load_tri_csv(&base_dir.join(path), n, rows, cols)?)
        }
    })
}

fn pyr_spec(cfg: &Option<PyrCfg>, dim: usize, what: &str) -> Result<PyrSpec> {
    Ok(match cfg {
        None | Some(PyrCfg::Zero) => PyrSpec::Zero { dim },
        Some(PyrCfg::Constant { value }) => PyrSpec::Constant(to_matrix(value, dim, dim, what)?),
        Some(PyrCfg::Separable { base, s_expr, t_expr }) => PyrSpec::Separable {
            base: to_matrix(base, dim, dim, what)?,
            s_expr: parse_expr(s_expr, what)?,
            t_expr: parse_expr(t_expr, what)?,
        },
    })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("parsing config")?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }

    fn check(&self) -> Result<()> {
        if self.grid.n == 0 || !(self.grid.t_end > self.grid.t0) {
            bail!("grid: need N >= 1 and T > t0");
        }
        if self.dims.d == 0 || self.dims.l == 0 {
            bail!("dims: need d >= 1 and l >= 1");
        }
        if self.input.start > self.grid.n {
            bail!("input.start {} exceeds N {}", self.input.start, self.grid.n);
        }
        Ok(())
    }

    /// Whether any kernel is tabulated (tabulated fields cannot be resampled
    /// on a refined grid).
    pub fn has_tabulated(&self) -> bool {
        let tab = |f: &Option<FieldCfg>| matches!(f, Some(FieldCfg::Tabulated { .. }));
        tab(&self.kernels.a)
            || tab(&self.kernels.b_ctrl)
            || tab(&self.kernels.c)
            || tab(&self.kernels.d_ctrl)
            || tab(&self.kernels.drift)
            || tab(&self.kernels.sigma)
            || tab(&self.strategy.gamma)
            || self
                .duality
                .as_ref()
                .is_some_and(|du| tab(&du.chi))
            || self
                .weights
                .as_ref()
                .is_some_and(|w| tab(&w.q2))
    }

    /// Grid-independent instance description; `base_dir` anchors tabulated
    /// CSV paths.
    pub fn to_instance_spec(&self, base_dir: &Path) -> Result<InstanceSpec> {
        let (d, l) = (self.dims.d, self.dims.l);
        let n = self.grid.n;
        let mut spec = InstanceSpec::trivial(self.grid.t0, self.grid.t_end, d, l);
        spec.kernels.a = field_spec(&self.kernels.a, d, d, n, base_dir, "kernels.A")?;
        spec.kernels.b = field_spec(&self.kernels.b_ctrl, d, l, n, base_dir, "kernels.B")?;
        spec.kernels.c = field_spec(&self.kernels.c, d, d, n, base_dir, "kernels.C")?;
        spec.kernels.d = field_spec(&self.kernels.d_ctrl, d, l, n, base_dir, "kernels.D")?;
        spec.kernels.drift = field_spec(&self.kernels.drift, d, 1, n, base_dir, "kernels.b")?;
        spec.kernels.sigma = field_spec(&self.kernels.sigma, d, 1, n, base_dir, "kernels.sigma")?;
        spec.xi = node_fn(&self.strategy.xi, l, d, "strategy.Xi")?;
        spec.gamma = field_spec(&self.strategy.gamma, l, d, n, base_dir, "strategy.Gamma")?;
        spec.v = node_fn(&self.strategy.v, l, 1, "strategy.v")?;
        spec.x = node_fn(&self.input.x, d, 1, "input.x")?;
        if let Some(du) = &self.duality {
            spec.psi = node_fn(&du.psi, d, 1, "duality.psi")?;
            spec.chi = field_spec(&du.chi, d, 1, n, base_dir, "duality.chi")?;
        }
        Ok(spec)
    }

    pub fn to_quadratic_spec(&self) -> Result<Option<QuadraticSpec>> {
        let Some(w) = &self.weights else {
            return Ok(None);
        };
        let d = self.dims.d;
        let q2 = match &w.q2 {
            None | Some(FieldCfg::Zero) => KernelSpec::zero(d, d),
            Some(FieldCfg::Constant { value }) => {
                KernelSpec::Constant(to_matrix(value, d, d, "weights.Q2")?)
            }
            Some(other) => bail!("weights.Q2: unsupported spec {other:?}"),
        };
        Ok(Some(QuadraticSpec {
            q1: node_fn(&w.q1, d, d, "weights.Q1")?,
            q2,
            q3: pyr_spec(&w.q3, d, "weights.Q3")?,
        }))
    }

    pub fn to_mc_config(&self, seed_override: Option<u64>) -> Option<McConfig> {
        self.mc.as_ref().map(|m| McConfig {
            n_paths: m.n_paths,
            seed: seed_override.unwrap_or(m.seed),
            batch_size: m.batch_size,
            antithetic: m.antithetic,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
[grid]
t0 = 0.0
T = 1.0
N = 8

[dims]
d = 1
l = 1

[kernels.A]
type = "constant"
value = [[0.5]]

[kernels.C]
type = "fractional"
c = 0.3
hurst = 0.3
base = [[1.0]]
expr = "1 + 0.1*t"

[strategy.Xi]
type = "expr"
base = [[0.2]]
expr = "1 - 0.5*t"

[strategy.Gamma]
type = "constant"
value = [[0.1]]

[input]
start = 0

[input.x]
type = "constant"
value = [[1.0]]

[duality.psi]
type = "constant"
value = [[1.0]]

[weights.Q1]
type = "constant"
value = [[1.0]]

[weights.Q3]
type = "separable"
base = [[0.5]]
s_expr = "1 + t"
t_expr = "1"

[mc]
n_paths = 100
seed = 7
batch_size = 16
"#;

    #[test]
    fn round_trip_is_identity() {
        let cfg = ExperimentConfig::parse(FULL).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let again = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = format!("{FULL}\n[grid2]\nx = 1\n");
        assert!(ExperimentConfig::parse(&bad).is_err());
        let bad = FULL.replace("[dims]", "[dims]\nextra = 3");
        assert!(ExperimentConfig::parse(&bad).is_err());
    }

    #[test]
    fn builds_core_specs() {
        let cfg = ExperimentConfig::parse(FULL).unwrap();
        let spec = cfg.to_instance_spec(Path::new(".")).unwrap();
        let inst = spec.sample(8).unwrap();
        assert_eq!(inst.kernels.dim_state, 1);
        let q = cfg.to_quadratic_spec().unwrap().unwrap();
        assert!(q.sample(&inst.grid).is_ok());
        let mc = cfg.to_mc_config(None).unwrap();
        assert_eq!(mc.seed, 7);
        assert_eq!(cfg.to_mc_config(Some(9)).unwrap().seed, 9);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let bad = FULL.replace("value = [[0.5]]", "value = [[0.5, 1.0]]");
        let cfg = ExperimentConfig::parse(&bad).unwrap();
        assert!(cfg.to_instance_spec(Path::new(".")).is_err());
    }

    #[test]
    fn tabulated_field_loads() {
        let dir = std::env::temp_dir().join("svie-cfg-test");
        std::fs::create_dir_all(&dir).unwrap();
        let csv = "i,j,row,col,value\n1,0,0,0,0.5\n2,1,0,0,-0.25\n";
        std::fs::write(dir.join("a.csv"), csv).unwrap();
        let f = load_tri_csv(&dir.join("a.csv"), 3, 1, 1).unwrap();
        assert_eq!(f.get(1, 0)[(0, 0)], 0.5);
        assert_eq!(f.get(2, 1)[(0, 0)], -0.25);
        assert_eq!(f.get(3, 1)[(0, 0)], 0.0);
        assert!(load_tri_csv(&dir.join("a.csv"), 1, 1, 1).is_err());
    }
}
