//! Command implementations. Every command is a pure function of
//! (config, flags): all CSV output is deterministic, and human-readable
//! status goes to stdout only.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use svie_core::ebsvie::{duality_sides, DualityData, GapReport};
use svie_core::forward::{
    flow_restart, simulate_brownian, solve_closed_loop_augmented, solve_closed_loop_direct,
};
use svie_core::grid::TimeGrid;
use svie_core::instances::InstanceSpec;
use svie_core::kernels::KernelSpec;
use svie_core::lyapunov::{
    operator_matrix, representation_sides, solve_lyapunov, QuadraticSpec,
};
use svie_core::montecarlo::{
    estimate_linear_functional, estimate_quadratic_functional, McEstimate,
};
use svie_core::norms::{discrete_norms, find_partition, subinterval_bound, wellposedness_constant};
use svie_core::SvieError;

use crate::config::ExperimentConfig;

/// Exit classification: 1 verification fail, 2 config error, 3 numeric
/// blow-up.
#[derive(Debug)]
pub enum Failure {
    Verification(String),
    Config(String),
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Verification(m) | Failure::Config(m) | Failure::Numeric(m) => m,
        }
    }
}

fn numeric(e: SvieError) -> Failure {
    match e {
        SvieError::NonFinite { .. } => Failure::Numeric(e.to_string()),
        SvieError::GridTooCoarse => Failure::Config(e.to_string()),
        other => Failure::Config(other.to_string()),
    }
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Config(format!("creating {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, content)
        .map_err(|e| Failure::Config(format!("writing {}: {e}", path.display())))
}

pub struct Context {
    pub config: ExperimentConfig,
    pub spec: InstanceSpec,
    pub out_dir: PathBuf,
    pub seed_override: Option<u64>,
}

impl Context {
    pub fn build(
        config_path: &Path,
        out_flag: Option<PathBuf>,
        seed_override: Option<u64>,
    ) -> Result<Self, Failure> {
        let config = ExperimentConfig::load(config_path)
            .map_err(|e| Failure::Config(format!("{e:#}")))?;
        let base_dir = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let spec = config
            .to_instance_spec(&base_dir)
            .map_err(|e| Failure::Config(format!("{e:#}")))?;
        let out_dir = out_flag.unwrap_or_else(|| {
            config
                .output
                .as_ref()
                .and_then(|o| o.dir.as_ref())
                .map(|d| base_dir.join(d))
                .unwrap_or_else(|| base_dir.clone())
        });
        Ok(Self {
            config,
            spec,
            out_dir,
            seed_override,
        })
    }

    fn mc_seed(&self) -> u64 {
        self.seed_override
            .or(self.config.mc.as_ref().map(|m| m.seed))
            .unwrap_or(0)
    }
}

fn estimates_csv(rows: &[(&str, McEstimate, u64)]) -> String {
    let mut out = String::from("quantity,mean,std_error,n,seed\n");
    for (name, est, seed) in rows {
        let _ = writeln!(out, "{name},{},{},{},{seed}", est.mean, est.std_error, est.n);
    }
    out
}

pub fn simulate(
    ctx: &Context,
    paths: u64,
    dump_theta: bool,
    restart: Option<usize>,
) -> Result<(), Failure> {
    let inst = ctx.spec.sample(ctx.config.grid.n).map_err(numeric)?;
    let grid = &inst.grid;
    let n = grid.n;
    let m0 = inst.input.start_index;
    let seed = ctx.mc_seed();
    let restart_index = restart.unwrap_or((m0 + n).div_ceil(2));
    if restart_index < m0 || restart_index > n {
        return Err(Failure::Config(format!(
            "restart index {restart_index} outside [{m0}, {n}]"
        )));
    }

    let mut paths_csv = String::from("path_id,i,t,quantity,row,value\n");
    let mut theta_csv = String::from("path_id,i,j,row,value\n");
    let mut equivalence = 0.0f64;
    let mut flow = 0.0f64;
    for id in 0..paths {
        let path = simulate_brownian(seed, id, grid);
        let sol = solve_closed_loop_direct(&inst.kernels, &inst.strategy, &inst.input, &path)
            .map_err(numeric)?;
        let aug = solve_closed_loop_augmented(&inst.kernels, &inst.strategy, &inst.input, &path)
            .map_err(numeric)?;
        for i in m0..=n {
            equivalence = equivalence.max((&sol.x[i] - &aug.x[i]).amax());
            for j in m0..=i {
                equivalence = equivalence.max((sol.theta.get(i, j) - aug.theta.get(i, j)).amax());
            }
        }
        let restarted = flow_restart(&sol, &inst.kernels, &inst.strategy, restart_index, &path)
            .map_err(numeric)?;
        for i in restart_index..=n {
            flow = flow.max((&sol.x[i] - &restarted.x[i]).amax());
        }
        for i in m0..=n {
            let t = grid.node(i);
            for r in 0..sol.x[i].nrows() {
                let _ = writeln!(paths_csv, "{id},{i},{t},x,{r},{}", sol.x[i][(r, 0)]);
            }
            for r in 0..sol.u[i].nrows() {
                let _ = writeln!(paths_csv, "{id},{i},{t},u,{r},{}", sol.u[i][(r, 0)]);
            }
        }
        if dump_theta {
            for j in m0..=n {
                for i in j..=n {
                    for r in 0..inst.kernels.dim_state {
                        let _ = writeln!(
                            theta_csv,
                            "{id},{i},{j},{r},{}",
                            sol.theta.get(i, j)[(r, 0)]
                        );
                    }
                }
            }
        }
    }

    write_file(&ctx.out_dir, "paths.csv", &paths_csv)?;
    if dump_theta {
        write_file(&ctx.out_dir, "theta.csv", &theta_csv)?;
    }
    let mut report = String::from("quantity,value\n");
    let _ = writeln!(report, "equivalence_residual,{equivalence}");
    let _ = writeln!(report, "flow_residual,{flow}");
    let _ = writeln!(report, "restart_index,{restart_index}");
    write_file(&ctx.out_dir, "simulate_report.csv", &report)?;
    println!(
        "simulate: {paths} path(s), equivalence residual {equivalence:.3e}, flow residual {flow:.3e}"
    );
    Ok(())
}

fn order_row(report: &GapReport) -> String {
    match report.order {
        Some(o) => format!("order,{o}\n"),
        None => "order,\n".to_string(),
    }
}

pub fn verify_duality(ctx: &Context, refine: bool) -> Result<(), Failure> {
    if ctx.config.duality.is_none() {
        return Err(Failure::Config("verify-duality needs a [duality] section".into()));
    }
    if refine && ctx.config.has_tabulated() {
        return Err(Failure::Config(
            "tabulated kernels cannot be resampled on the refined grid".into(),
        ));
    }
    let n = ctx.config.grid.n;
    let coarse = ctx.spec.sample(n).map_err(numeric)?;
    let (lhs, rhs) = duality_sides(&coarse).map_err(numeric)?;
    let gap = (lhs - rhs).abs();

    let mut csv = String::from("quantity,value\n");
    let _ = writeln!(csv, "n,{n}");
    let _ = writeln!(csv, "lhs,{lhs}");
    let _ = writeln!(csv, "rhs,{rhs}");
    let _ = writeln!(csv, "gap,{gap}");
    let mut pass = true;
    let mut summary = format!("duality: N={n} gap {gap:.3e}");
    if refine {
        let fine = ctx.spec.sample(2 * n).map_err(numeric)?;
        let (lhs2, rhs2) = duality_sides(&fine).map_err(numeric)?;
        let gap2 = (lhs2 - rhs2).abs();
        let report = GapReport::from_gaps(gap, gap2);
        let _ = writeln!(csv, "n_fine,{}", 2 * n);
        let _ = writeln!(csv, "lhs_fine,{lhs2}");
        let _ = writeln!(csv, "rhs_fine,{rhs2}");
        let _ = writeln!(csv, "gap_fine,{gap2}");
        csv.push_str(&order_row(&report));
        let order = report.order.unwrap_or(f64::INFINITY);
        pass = !(order < 0.5 && gap2 > 1e-6);
        let _ = write!(summary, ", N={} gap {gap2:.3e}, order {order:.3}", 2 * n);
    }
    write_file(&ctx.out_dir, "duality.csv", &csv)?;

    if let Some(mc) = ctx.config.to_mc_config(ctx.seed_override) {
        let data = DualityData {
            psi: coarse.psi.clone(),
            chi: coarse.chi.clone(),
        };
        let est = estimate_linear_functional(
            &coarse.kernels,
            &coarse.strategy,
            &data,
            &coarse.input,
            &mc,
        )
        .map_err(numeric)?;
        write_file(
            &ctx.out_dir,
            "estimates.csv",
            &estimates_csv(&[("linear_functional", est, mc.seed)]),
        )?;
    }
    println!("{summary}: {}", if pass { "pass" } else { "FAIL" });
    if pass {
        Ok(())
    } else {
        Err(Failure::Verification("duality gap failed the order/threshold rule".into()))
    }
}

pub fn verify_representation(ctx: &Context, refine: bool) -> Result<(), Failure> {
    let qspec: QuadraticSpec = ctx
        .config
        .to_quadratic_spec()
        .map_err(|e| Failure::Config(format!("{e:#}")))?
        .ok_or_else(|| Failure::Config("verify-representation needs a [weights] section".into()))?;
    let homogeneous = matches!(ctx.spec.kernels.drift, KernelSpec::Zero { .. })
        && matches!(ctx.spec.kernels.sigma, KernelSpec::Zero { .. })
        && matches!(ctx.spec.v, svie_core::kernels::NodeFn::Zero { .. });
    if !homogeneous {
        return Err(Failure::Config(
            "verify-representation needs a homogeneous instance (b = sigma = 0, v = 0)".into(),
        ));
    }
    if refine && ctx.config.has_tabulated() {
        return Err(Failure::Config(
            "tabulated kernels cannot be resampled on the refined grid".into(),
        ));
    }

    let n = ctx.config.grid.n;
    let coarse = ctx.spec.sample(n).map_err(numeric)?;
    let (lhs, rhs) = representation_sides(&coarse, &qspec).map_err(numeric)?;
    let gap = (lhs - rhs).abs();
    let q = qspec.sample(&coarse.grid).map_err(numeric)?;
    let p = solve_lyapunov(&coarse.kernels, &coarse.strategy, &q, coarse.input.start_index)
        .map_err(numeric)?;
    let sym = p.symmetry_residual();
    let op = operator_matrix(&p, coarse.input.start_index, &coarse.grid);
    let op_asym = (&op - op.transpose()).amax();

    let mut csv = String::from("quantity,value\n");
    let _ = writeln!(csv, "n,{n}");
    let _ = writeln!(csv, "lhs,{lhs}");
    let _ = writeln!(csv, "rhs,{rhs}");
    let _ = writeln!(csv, "gap,{gap}");
    let _ = writeln!(csv, "symmetry_residual,{sym}");
    let _ = writeln!(csv, "operator_asymmetry,{op_asym}");
    let mut pass = sym <= 1e-12 && op_asym <= 1e-12;
    let mut summary = format!("representation: N={n} gap {gap:.3e}, symmetry {sym:.3e}");
    if refine {
        let fine = ctx.spec.sample(2 * n).map_err(numeric)?;
        let (lhs2, rhs2) = representation_sides(&fine, &qspec).map_err(numeric)?;
        let gap2 = (lhs2 - rhs2).abs();
        let report = GapReport::from_gaps(gap, gap2);
        let _ = writeln!(csv, "n_fine,{}", 2 * n);
        let _ = writeln!(csv, "lhs_fine,{lhs2}");
        let _ = writeln!(csv, "rhs_fine,{rhs2}");
        let _ = writeln!(csv, "gap_fine,{gap2}");
        csv.push_str(&order_row(&report));
        let order = report.order.unwrap_or(f64::INFINITY);
        pass = pass && !(order < 0.5 && gap2 > 1e-6);
        let _ = write!(summary, ", N={} gap {gap2:.3e}, order {order:.3}", 2 * n);
    }
    write_file(&ctx.out_dir, "representation.csv", &csv)?;

    if let Some(mc) = ctx.config.to_mc_config(ctx.seed_override) {
        let est = estimate_quadratic_functional(
            &coarse.kernels,
            &coarse.strategy,
            &q,
            &coarse.input,
            &mc,
        )
        .map_err(numeric)?;
        write_file(
            &ctx.out_dir,
            "estimates.csv",
            &estimates_csv(&[("quadratic_functional", est, mc.seed)]),
        )?;
    }
    println!("{summary}: {}", if pass { "pass" } else { "FAIL" });
    if pass {
        Ok(())
    } else {
        Err(Failure::Verification(
            "representation residuals failed the order/threshold rule".into(),
        ))
    }
}

pub fn partition(ctx: &Context) -> Result<(), Failure> {
    let grid = TimeGrid::new(ctx.spec.t0, ctx.spec.t_end, ctx.config.grid.n).map_err(numeric)?;
    let cuts = find_partition(&ctx.spec.kernels.a, &ctx.spec.kernels.c, &grid).map_err(numeric)?;
    let m = cuts.len() - 1;
    let a_field = ctx
        .spec
        .kernels
        .a
        .sample(&grid, ctx.spec.kernels.a.default_mode())
        .map_err(numeric)?;
    let c_field = ctx
        .spec
        .kernels
        .c
        .sample(&grid, ctx.spec.kernels.c.default_mode())
        .map_err(numeric)?;
    let a_norms = discrete_norms(&a_field, &grid).map_err(numeric)?;
    let c_norms = discrete_norms(&c_field, &grid).map_err(numeric)?;
    let l = a_norms.l2_triangle + c_norms.sl2;
    let constant = wellposedness_constant(m, l);

    let mut csv = String::from("k,node,t\n");
    for (k, node) in cuts.iter().enumerate() {
        let _ = writeln!(csv, "{k},{node},{}", grid.node(*node));
    }
    write_file(&ctx.out_dir, "partition.csv", &csv)?;
    let mut summary = String::from("quantity,value\n");
    let _ = writeln!(summary, "m,{m}");
    let _ = writeln!(summary, "L,{l}");
    let _ = writeln!(summary, "wellposedness_constant,{constant}");
    write_file(&ctx.out_dir, "partition_summary.csv", &summary)?;
    for w in cuts.windows(2) {
        let b = subinterval_bound(&a_field, &c_field, &grid, w[0], w[1]);
        if b > 0.5 + 1e-12 {
            return Err(Failure::Verification(format!(
                "subinterval [{}, {}] re-verification failed: bound {b}",
                w[0], w[1]
            )));
        }
    }
    println!(
        "partition: m={m}, L={l:.6}, K(m,L)={constant:.6}, nodes {:?}",
        cuts
    );
    Ok(())
}
