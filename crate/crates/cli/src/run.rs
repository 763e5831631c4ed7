use std::time::Instant;

use stochavg_core::averaging::exit_probability_experiment;
use stochavg_core::models::reduce_angle;
use stochavg_core::sde::integrate_observed;
use stochavg_core::second_order::{assemble_diffusion, LevelGrid};
use stochavg_core::{
    apply_generator, averaged_rhs, rate_experiment, solve_averaged_ode, solve_poisson,
    weak_convergence_experiment, Error, Executor, GeneratorSpec, MonteCarloSettings, NoisePath,
    SeedDescriptor, SimulationParams, TorusFunction, TorusGrid, WeakSettings,
};

use crate::config::{Experiment, ExperimentConfig, Setup};
use crate::table::{fmt_f64, Table};
use crate::HarnessError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything an experiment produced, ready to be written out.
#[derive(Debug, Clone)]
pub struct ResultBundle {
    pub config: ExperimentConfig,
    pub tables: Vec<Table>,
    /// Extra files as `(name, contents)`.
    pub documents: Vec<(String, String)>,
    /// Experiment-level conditions such as early exits or eigenvalue clamps.
    pub flags: Vec<String>,
    pub wall_clock_seconds: f64,
    /// Sample paths simulated, summed over every epsilon.
    pub paths: usize,
    pub version: &'static str,
    pub seed: u64,
}

impl ResultBundle {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

#[derive(Default)]
struct Output {
    tables: Vec<Table>,
    documents: Vec<(String, String)>,
    flags: Vec<String>,
    paths: usize,
}

/// Validates `config` and runs the experiment it names.
pub fn run(config: &ExperimentConfig) -> Result<ResultBundle, HarnessError> {
    config.validate()?;
    let start = Instant::now();
    let setup = config.setup()?;
    let ex = Executor::new(config.workers)?;
    let out = match config.experiment()? {
        Experiment::Simulate => simulate(config, &setup, &ex)?,
        Experiment::Average => average(config, &setup)?,
        Experiment::Rate => rate(config, &setup, &ex)?,
        Experiment::Exitprob => exitprob(config, &setup, &ex)?,
        Experiment::Limit2 => limit2(config, &setup, &ex)?,
        Experiment::Weak2 => weak2(config, &setup, &ex)?,
        Experiment::PoissonCheck => poisson_check(config, &setup)?,
    };
    Ok(ResultBundle {
        config: config.clone(),
        tables: out.tables,
        documents: out.documents,
        flags: out.flags,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        paths: out.paths,
        version: VERSION,
        seed: config.seed,
    })
}

fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn mc_settings(cfg: &ExperimentConfig) -> MonteCarloSettings {
    MonteCarloSettings {
        n_paths: cfg.n_paths,
        master_seed: cfg.seed,
        step: cfg.step_policy(),
        scheme: cfg.scheme,
        torus_nodes: cfg.torus_nodes,
        ode_dt: cfg.ode_dt,
    }
}

struct PathSummary {
    dt: f64,
    steps: usize,
    exit_time: Option<f64>,
    levels: Vec<f64>,
    angles: Vec<f64>,
    drift: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

fn simulate(cfg: &ExperimentConfig, s: &Setup, ex: &Executor) -> Result<Output, HarnessError> {
    let (model, pert, y0) = (&s.model, &s.pert, &s.y0);
    let n = model.n();
    let h0 = model.levels(y0.as_slice());
    let mut header = vec!["epsilon".to_string(), "path".into(), "t".into()];
    header.extend(indexed("q", n));
    header.extend(indexed("p", n));
    header.extend(indexed("H", n));
    let mut traj = Table::new("trajectory.csv", header);
    let mut header = vec![
        "epsilon".to_string(),
        "path".into(),
        "dt".into(),
        "steps".into(),
        "exit_time".into(),
    ];
    header.extend(indexed("H", n));
    header.extend(indexed("theta", n));
    header.extend(indexed("max_rel_drift_H", n));
    let mut summary = Table::new("summary.csv", header);
    let mut out = Output::default();
    let mut exits = 0usize;

    for &eps in &cfg.epsilons {
        let (dt, steps) = cfg.step_policy().fit(eps, cfg.t)?;
        let params = SimulationParams::new(eps, steps as f64 * dt).scheme(cfg.scheme);
        let stride = cfg.record_stride;
        let keep = cfg.trajectory_paths;
        let paths = ex.try_map(cfg.n_paths, |i| {
            let noise = NoisePath::new(SeedDescriptor::family(cfg.seed, 0, i as u64), n, dt, steps)?;
            let mut rows = Vec::new();
            let mut row = |t: f64, y: &[f64]| {
                let mut r = vec![t];
                r.extend_from_slice(y);
                r.extend(model.levels(y));
                rows.push(r);
            };
            if i < keep {
                row(0.0, y0.as_slice());
            }
            let mut drift = vec![0.0f64; n];
            let mut last = y0.as_slice().to_vec();
            let exit_time = integrate_observed(model, pert, &params, y0, &noise, |step, t, y, done| {
                for (k, h) in model.levels(y).iter().enumerate() {
                    let rel = (h - h0[k]).abs() / h0[k].abs().max(f64::MIN_POSITIVE);
                    drift[k] = drift[k].max(rel);
                }
                if i < keep && (done || step % stride == 0) {
                    row(t, y);
                }
                if done {
                    last = y.to_vec();
                }
            })?;
            let aa = model.chart().to_action_angle(&last);
            Ok::<_, Error>(PathSummary {
                dt,
                steps,
                exit_time,
                levels: model.levels(&last),
                angles: aa.angles.iter().map(|a| reduce_angle(*a)).collect(),
                drift,
                rows,
            })
        })?;
        for (i, p) in paths.into_iter().enumerate() {
            for r in &p.rows {
                let mut cells = vec![fmt_f64(eps), i.to_string()];
                cells.extend(r.iter().map(|v| fmt_f64(*v)));
                traj.push(cells);
            }
            exits += p.exit_time.is_some() as usize;
            let mut cells = vec![
                fmt_f64(eps),
                i.to_string(),
                fmt_f64(p.dt),
                p.steps.to_string(),
                fmt_f64(p.exit_time.unwrap_or(f64::INFINITY)),
            ];
            cells.extend(p.levels.iter().chain(&p.angles).chain(&p.drift).map(|v| fmt_f64(*v)));
            summary.push(cells);
        }
        out.paths += cfg.n_paths;
    }
    if exits > 0 {
        out.flags.push(format!("early-exit: {exits} paths left the chart ball"));
    }
    out.tables = vec![traj, summary];
    Ok(out)
}

fn average(cfg: &ExperimentConfig, s: &Setup) -> Result<Output, HarnessError> {
    let n = s.model.n();
    let grid = TorusGrid::new(n, cfg.torus_nodes)?;
    let ode = averaged_rhs(&s.model, &s.pert, grid)?;
    let path = solve_averaged_ode(&ode, cfg.t, cfg.ode_dt)?;
    let mut header = vec!["t".to_string()];
    header.extend(indexed("Hbar", n));
    header.extend(indexed("rhs", n));
    let mut table = Table::new("averaged_path.csv", header);
    for ((t, h), d) in path.times.iter().zip(&path.levels).zip(&path.slopes) {
        let mut cells = vec![fmt_f64(*t)];
        cells.extend(h.iter().chain(d).map(|v| fmt_f64(*v)));
        table.push(cells);
    }
    let mut out = Output {
        tables: vec![table],
        ..Default::default()
    };
    if let Some(te) = path.exit_time {
        out.flags.push(format!("early-exit: averaged path leaves the chart ball at {te}"));
    }
    Ok(out)
}

fn rate(cfg: &ExperimentConfig, s: &Setup, ex: &Executor) -> Result<Output, HarnessError> {
    let settings = mc_settings(cfg);
    let r = rate_experiment(&s.model, &s.pert, &s.y0, cfg.t, cfg.beta, &cfg.epsilons, &settings, ex)?;
    let mut table = Table::new("rate.csv", ["epsilon", "error", "stderr", "n_paths"]);
    let mut exits = Table::new("rate_exits.csv", ["epsilon", "dt", "exit_fraction"]);
    let mut out = Output::default();
    for i in 0..r.epsilons.len() {
        table.push(vec![
            fmt_f64(r.epsilons[i]),
            fmt_f64(r.errors[i]),
            fmt_f64(r.stderrs[i]),
            r.n_paths[i].to_string(),
        ]);
        exits.push(vec![
            fmt_f64(r.epsilons[i]),
            fmt_f64(r.dts[i]),
            fmt_f64(r.exit_fractions[i]),
        ]);
        if r.exit_fractions[i] > 0.0 {
            out.flags.push(format!(
                "early-exit: fraction {} at epsilon {}",
                r.exit_fractions[i], r.epsilons[i]
            ));
        }
        out.paths += r.n_paths[i];
    }
    let mut fit = Table::new("rate_fit.csv", ["beta", "slope", "intercept", "slope_ci95"]);
    fit.push(vec![
        fmt_f64(r.beta),
        fmt_f64(r.slope),
        fmt_f64(r.intercept),
        fmt_f64(r.slope_ci95),
    ]);
    out.tables = vec![table, fit, exits];
    Ok(out)
}

fn exitprob(cfg: &ExperimentConfig, s: &Setup, ex: &Executor) -> Result<Output, HarnessError> {
    let radius = cfg.radius.unwrap_or_else(|| s.model.chart_radius());
    let delta = cfg.delta.unwrap_or(radius / 4.0);
    let settings = mc_settings(cfg);
    let r = exit_probability_experiment(
        &s.model,
        &s.pert,
        &s.y0,
        radius,
        delta,
        &cfg.epsilons,
        &settings,
        ex,
    )?;
    let mut table = Table::new("exitprob.csv", ["epsilon", "probability", "stderr", "n_paths"]);
    let mut out = Output::default();
    for row in &r.rows {
        table.push(vec![
            fmt_f64(row.epsilon),
            fmt_f64(row.probability),
            fmt_f64(row.stderr),
            row.n_paths.to_string(),
        ]);
        out.paths += row.n_paths;
    }
    let mut params = Table::new("exitprob_params.csv", ["radius", "delta", "t_delta"]);
    params.push(vec![fmt_f64(r.radius), fmt_f64(r.delta), fmt_f64(r.t_delta)]);
    out.tables = vec![table, params];
    Ok(out)
}

fn diffusion_table(dm: &stochavg_core::DiffusionModel) -> Table {
    let n = dm.n;
    let mut header = indexed("H", n);
    for prefix in ["a", "sigma"] {
        for i in 1..=n {
            for j in 1..=n {
                header.push(format!("{prefix}_{i}{j}"));
            }
        }
    }
    header.extend(indexed("b_", n));
    let mut table = Table::new("diffusion.csv", header);
    let sigma = dm.sigma_nodes();
    for (idx, levels) in dm.grid.nodes().iter().enumerate() {
        let cells = levels
            .iter()
            .chain(&dm.a[idx])
            .chain(&sigma[idx])
            .chain(&dm.b[idx])
            .map(|v| fmt_f64(*v))
            .collect();
        table.push(cells);
    }
    table
}

fn limit2(cfg: &ExperimentConfig, s: &Setup, ex: &Executor) -> Result<Output, HarnessError> {
    let m = &s.model;
    let grid = LevelGrid::covering_ball(m.chart_center(), m.chart_radius(), cfg.level_margin, cfg.level_nodes)?;
    let torus = TorusGrid::new(m.n(), cfg.torus_nodes)?;
    let dm = assemble_diffusion(m, &s.pert, &grid, torus, ex)?;
    Ok(Output {
        tables: vec![diffusion_table(&dm)],
        documents: vec![("diffusion.json".into(), dm.to_json())],
        flags: dm.warnings.clone(),
        paths: 0,
    })
}

fn weak2(cfg: &ExperimentConfig, s: &Setup, ex: &Executor) -> Result<Output, HarnessError> {
    let n = s.model.n();
    let settings = WeakSettings {
        n_paths: cfg.n_paths,
        master_seed: cfg.seed,
        step: cfg.step_policy(),
        scheme: cfg.scheme,
        limit_dt: cfg.limit_dt,
        reading: cfg.reading,
        torus_nodes: cfg.torus_nodes,
        level_nodes: cfg.level_nodes,
        level_margin: cfg.level_margin,
    };
    let r = weak_convergence_experiment(&s.model, &s.pert, &s.y0, cfg.t, &cfg.epsilons, &settings, ex)?;
    let moment_cols = ["mean", "mean_se", "var", "var_se"];
    let mut header = vec!["epsilon", "component"];
    header.extend(moment_cols);
    header.push("cdf_distance");
    let mut moments = Table::new("moments.csv", header);
    let mut header = vec!["component"];
    header.extend(moment_cols);
    let mut limit = Table::new("limit_moments.csv", header);
    for row in &r.rows {
        let p = &row.perturbed;
        moments.push(vec![
            fmt_f64(row.epsilon),
            (row.component + 1).to_string(),
            fmt_f64(p.mean),
            fmt_f64(p.mean_se),
            fmt_f64(p.var),
            fmt_f64(p.var_se),
            fmt_f64(row.cdf_distance),
        ]);
    }
    for c in 0..n {
        let l = &r.rows_for(c)[0].limit;
        limit.push(vec![
            (c + 1).to_string(),
            fmt_f64(l.mean),
            fmt_f64(l.mean_se),
            fmt_f64(l.var),
            fmt_f64(l.var_se),
        ]);
    }
    let mut exits = Table::new("weak_exits.csv", ["epsilon", "dt", "exit_fraction"]);
    let mut cov = Table::new("covariance.csv", ["source", "i", "j", "value"]);
    let mut out = Output::default();
    let mut push_cov = |source: String, values: &[f64]| {
        for i in 0..n {
            for j in 0..n {
                cov.push(vec![
                    source.clone(),
                    (i + 1).to_string(),
                    (j + 1).to_string(),
                    fmt_f64(values[i * n + j]),
                ]);
            }
        }
    };
    for e in &r.per_epsilon {
        exits.push(vec![fmt_f64(e.epsilon), fmt_f64(e.dt), fmt_f64(e.exit_fraction)]);
        push_cov(fmt_f64(e.epsilon), &e.covariance);
        if e.early_exit {
            out.flags.push(format!(
                "early-exit: fraction {} at epsilon {}",
                e.exit_fraction, e.epsilon
            ));
        }
        out.paths += cfg.n_paths;
    }
    push_cov("limit".into(), &r.limit_covariance);
    exits.push(vec!["limit".into(), fmt_f64(cfg.limit_dt), fmt_f64(r.limit_exit_fraction)]);
    out.paths += cfg.n_paths;
    out.flags.extend(r.diffusion.warnings.iter().cloned());
    out.flags.push(format!("limit-reading: {:?}", r.reading).to_lowercase());
    out.tables = vec![moments, limit, exits, cov];
    out.documents.push(("diffusion.json".into(), r.diffusion.to_json()));
    Ok(out)
}

/// Centered trigonometric polynomial with modes `|k_i| <= band`, coefficients
/// drawn from `seed`.
pub fn random_trig(grid: TorusGrid, band: i64, seed: SeedDescriptor) -> TorusFunction {
    let n = grid.n();
    let width = (2 * band + 1) as usize;
    let total = width.pow(n as u32);
    let modes: Vec<(Vec<i64>, f64, f64)> = (0..total)
        .filter_map(|mut idx| {
            let mut k = vec![0i64; n];
            for d in (0..n).rev() {
                k[d] = (idx % width) as i64 - band;
                idx /= width;
            }
            // one representative of each +-k pair
            let lead = k.iter().find(|c| **c != 0).copied()?;
            (lead > 0).then_some(k)
        })
        .enumerate()
        .map(|(j, k)| {
            let j = 2 * j as u64;
            (k, seed.normal_at(j), seed.normal_at(j + 1))
        })
        .collect();
    TorusFunction::from_fn(grid, Vec::new(), |theta| {
        modes
            .iter()
            .map(|(k, a, b)| {
                let phase: f64 = k.iter().zip(theta).map(|(k, t)| *k as f64 * t).sum();
                a * phase.cos() + b * phase.sin()
            })
            .sum()
    })
}

fn sup_diff(a: &TorusFunction, b: &TorusFunction) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn poisson_check(cfg: &ExperimentConfig, s: &Setup) -> Result<Output, HarnessError> {
    let m = &s.model;
    let n = m.n();
    let actions = match &cfg.poisson_actions {
        Some(a) => a.clone(),
        None => m.chart().to_action_angle(s.y0.as_slice()).actions,
    };
    let gen = GeneratorSpec::from_model(m, &actions)?;
    let grid = TorusGrid::new(n, cfg.torus_nodes)?;
    let band = (cfg.torus_nodes / 8).max(1) as i64;
    let mut table = Table::new("poisson.csv", ["case", "residual_inf"]);
    for trial in 0..cfg.trials {
        let f = random_trig(grid, band, SeedDescriptor::new(cfg.seed, trial as u64));
        let h = solve_poisson(&f, &gen)?;
        let back = apply_generator(&h, &gen)?;
        table.push(vec![format!("roundtrip-{trial}"), fmt_f64(sup_diff(&back, &f))]);
    }
    for axis in 0..n {
        let f = TorusFunction::from_fn(grid, Vec::new(), |t| t[axis].cos());
        let mut mode = vec![0i64; n];
        mode[axis] = 1;
        let lambda = gen.eigenvalue(&mode);
        let h = solve_poisson(&f, &gen)?;
        // L0 cos = Re(lambda) cos - Im(lambda) sin
        let den = lambda.norm_sqr();
        let exact = TorusFunction::from_fn(grid, Vec::new(), |t| {
            (lambda.re * t[axis].cos() + lambda.im * t[axis].sin()) / den
        });
        table.push(vec![format!("cosine-{}", axis + 1), fmt_f64(sup_diff(&h, &exact))]);
    }
    Ok(Output {
        tables: vec![table],
        ..Default::default()
    })
}
