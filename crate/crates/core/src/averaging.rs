//! First order averaging at the time scale `1/eps`.
//!
//! The energies of the perturbed system, read at slow time `s = eps t`,
//! follow the averaged equations
//!
//! ```text
//! d/ds Hbar_i = int_{T^n} dH_i(K)(Hbar, theta) dtheta
//! ```
//!
//! up to the first exit from the chart ball.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{IntegrableModel, Perturbation};
use crate::noise::{NoisePath, SeedDescriptor};
use crate::parallel::Executor;
use crate::sde::{integrate_observed, Scheme, SimulationParams};
use crate::stats::{fit_log_slope, MomentSummary};
use crate::symplectic::PhasePoint;
use crate::torus::TorusGrid;

/// Default angle nodes per torus dimension.
pub const DEFAULT_TORUS_NODES: usize = 64;

fn check_fiber(model: &IntegrableModel, actions: &[f64], grid: &TorusGrid) -> Result<()> {
    if grid.n() != model.n() || actions.len() != model.n() {
        return Err(Error::DimensionMismatch {
            expected: model.n(),
            got: grid.n().max(actions.len()),
        });
    }
    if !model.chart().actions_regular(actions) {
        return Err(Error::NotInChart(format!("actions {actions:?}")));
    }
    Ok(())
}

/// Visits the fiber over `actions` at every grid node.
fn for_each_node(
    model: &IntegrableModel,
    actions: &[f64],
    grid: &TorusGrid,
    mut visit: impl FnMut(&[f64]) -> Result<()>,
) -> Result<()> {
    check_fiber(model, actions, grid)?;
    let mut theta = vec![0.0; grid.n()];
    let mut x = vec![0.0; 2 * grid.n()];
    for idx in 0..grid.len() {
        grid.angles_into(idx, &mut theta);
        model.chart().from_action_angle_into(actions, &theta, &mut x);
        visit(&x)?;
    }
    Ok(())
}

/// Uniform quadrature of `g` over the fiber with the given actions.
pub fn torus_average(
    g: impl Fn(&[f64]) -> f64,
    model: &IntegrableModel,
    actions: &[f64],
    grid: &TorusGrid,
) -> Result<f64> {
    let mut sum = 0.0;
    for_each_node(model, actions, grid, |x| {
        let v = g(x);
        if !v.is_finite() {
            return Err(Error::NonFinite("integrand on the fiber"));
        }
        sum += v;
        Ok(())
    })?;
    Ok(sum * grid.weight())
}

/// `int dH_i(K) dtheta` for every `i` on the fiber with the given actions.
pub fn pairing_average(
    model: &IntegrableModel,
    pert: &Perturbation,
    actions: &[f64],
    grid: &TorusGrid,
) -> Result<Vec<f64>> {
    let n = model.n();
    let mut sums = vec![0.0; n];
    if pert.is_zero() {
        check_fiber(model, actions, grid)?;
        return Ok(sums);
    }
    let mut k = vec![0.0; 2 * n];
    let mut grad = vec![0.0; 2 * n];
    for_each_node(model, actions, grid, |x| {
        if !pert.in_domain(x) {
            return Err(Error::OutsideDomain(pert.name().to_string()));
        }
        pert.field().try_eval_into(x, &mut k)?;
        for (s, h) in sums.iter_mut().zip(model.hamiltonians()) {
            h.gradient_into(x, &mut grad);
            *s += grad.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(())
    })?;
    let w = grid.weight();
    sums.iter_mut().for_each(|s| *s *= w);
    Ok(sums)
}

type RhsFn = Arc<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>;

/// Averaged equations on level space, with the chart ball they live in.
#[derive(Clone)]
pub struct AveragedODE {
    rhs: RhsFn,
    pub initial: Vec<f64>,
    pub center: Vec<f64>,
    pub radius: f64,
}

impl std::fmt::Debug for AveragedODE {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AveragedODE")
            .field("initial", &self.initial)
            .field("center", &self.center)
            .field("radius", &self.radius)
            .finish_non_exhaustive()
    }
}

impl AveragedODE {
    pub fn from_fn(
        rhs: impl Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
        initial: Vec<f64>,
        center: Vec<f64>,
        radius: f64,
    ) -> Result<Self> {
        if initial.len() != center.len() {
            return Err(Error::DimensionMismatch {
                expected: center.len(),
                got: initial.len(),
            });
        }
        if !(radius > 0.0) {
            return Err(invalid("radius", "must be positive"));
        }
        Ok(Self {
            rhs: Arc::new(rhs),
            initial,
            center,
            radius,
        })
    }

    pub fn n(&self) -> usize {
        self.initial.len()
    }

    pub fn rhs(&self, levels: &[f64]) -> Result<Vec<f64>> {
        let v = (self.rhs)(levels)?;
        if v.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: v.len(),
            });
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("averaged rhs"));
        }
        Ok(v)
    }

    pub fn with_radius(&self, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(invalid("radius", "must be positive"));
        }
        Ok(Self {
            radius,
            ..self.clone()
        })
    }
}

/// Averaged equations of `pert` on `model`, started at the chart center.
pub fn averaged_rhs(
    model: &IntegrableModel,
    pert: &Perturbation,
    grid: TorusGrid,
) -> Result<AveragedODE> {
    if grid.n() != model.n() || pert.n() != model.n() {
        return Err(Error::DimensionMismatch {
            expected: model.n(),
            got: grid.n(),
        });
    }
    let m = model.clone();
    let k = pert.clone();
    AveragedODE::from_fn(
        move |levels| {
            let actions = m.chart().actions_from_levels(levels);
            pairing_average(&m, &k, &actions, &grid)
        },
        model.chart_center().to_vec(),
        model.chart_center().to_vec(),
        model.chart_radius(),
    )
}

/// RK4 solution of an [`AveragedODE`], stopped at the chart ball boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedPath {
    pub times: Vec<f64>,
    pub levels: Vec<Vec<f64>>,
    pub slopes: Vec<Vec<f64>>,
    /// First time `|Hbar - center| = radius`, located on the last chord.
    pub exit_time: Option<f64>,
}

impl AveragedPath {
    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("path holds the initial point")
    }

    /// Cubic Hermite interpolation; times past the end return the end point.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let last = self.times.len() - 1;
        if t <= self.times[0] {
            return self.levels[0].clone();
        }
        if t >= self.times[last] {
            return self.levels[last].clone();
        }
        let j = self.times.partition_point(|&s| s <= t).min(last) - 1;
        let (t0, t1) = (self.times[j], self.times[j + 1]);
        let h = t1 - t0;
        let u = (t - t0) / h;
        let (u2, u3) = (u * u, u * u * u);
        let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
        let h10 = u3 - 2.0 * u2 + u;
        let h01 = -2.0 * u3 + 3.0 * u2;
        let h11 = u3 - u2;
        (0..self.levels[j].len())
            .map(|i| {
                h00 * self.levels[j][i]
                    + h10 * h * self.slopes[j][i]
                    + h01 * self.levels[j + 1][i]
                    + h11 * h * self.slopes[j + 1][i]
            })
            .collect()
    }
}

fn axpy(a: &[f64], s: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Fraction `s` in `[0, 1]` at which the chord `from -> to` leaves the ball
/// of radius `radius` around `center`, for `from` inside the ball.
pub fn chord_exit(from: &[f64], to: &[f64], center: &[f64], radius: f64) -> f64 {
    let d: Vec<f64> = to.iter().zip(from).map(|(x, y)| x - y).collect();
    let qa: f64 = d.iter().map(|v| v * v).sum();
    if qa == 0.0 {
        return 1.0;
    }
    let qb: f64 = 2.0 * from.iter().zip(center).zip(&d).map(|((x, c), v)| (x - c) * v).sum::<f64>();
    let qc = dist2(from, center) - radius * radius;
    ((-qb + (qb * qb - 4.0 * qa * qc).max(0.0).sqrt()) / (2.0 * qa)).clamp(0.0, 1.0)
}

/// `from + s (to - from)`.
pub fn chord_point(from: &[f64], to: &[f64], s: f64) -> Vec<f64> {
    from.iter().zip(to).map(|(a, b)| a + s * (b - a)).collect()
}

/// Classical RK4 from `ode.initial` up to `horizon` (the last step is
/// shortened to land on it), stopping when the path leaves the ball.
pub fn solve_averaged_ode(ode: &AveragedODE, horizon: f64, dt: f64) -> Result<AveragedPath> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt", "must be positive and finite"));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon", "must be finite and non-negative"));
    }
    let r2 = ode.radius * ode.radius;
    if dist2(&ode.initial, &ode.center) >= r2 {
        return Err(Error::NotInChart("initial levels outside the chart ball".into()));
    }
    let mut a = ode.initial.clone();
    let mut k1 = ode.rhs(&a)?;
    let mut path = AveragedPath {
        times: vec![0.0],
        levels: vec![a.clone()],
        slopes: vec![k1.clone()],
        exit_time: None,
    };
    let n_steps = (horizon / dt).ceil() as usize;
    let mut t = 0.0;
    for step in 1..=n_steps {
        let h = if step == n_steps { horizon - t } else { dt };
        if h <= 0.0 {
            break;
        }
        let k2 = ode.rhs(&axpy(&a, 0.5 * h, &k1))?;
        let k3 = ode.rhs(&axpy(&a, 0.5 * h, &k2))?;
        let k4 = ode.rhs(&axpy(&a, h, &k3))?;
        let next: Vec<f64> = (0..a.len())
            .map(|i| a[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        if dist2(&next, &ode.center) >= r2 {
            let s = chord_exit(&a, &next, &ode.center, ode.radius);
            let hit = chord_point(&a, &next, s);
            let slope = ode.rhs(&hit).unwrap_or_else(|_| k4.clone());
            let te = t + s * h;
            path.times.push(te);
            path.levels.push(hit);
            path.slopes.push(slope);
            path.exit_time = Some(te);
            return Ok(path);
        }
        a = next;
        t = if step == n_steps { horizon } else { t + h };
        k1 = ode.rhs(&a)?;
        path.times.push(t);
        path.levels.push(a.clone());
        path.slopes.push(k1.clone());
    }
    Ok(path)
}

/// Step size rule `dt = min(cap, factor * eps^power)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepPolicy {
    pub cap: f64,
    pub factor: f64,
    pub power: f64,
}

impl Default for StepPolicy {
    fn default() -> Self {
        Self {
            cap: 1e-3,
            factor: 0.1,
            power: 2.0,
        }
    }
}

impl StepPolicy {
    pub fn fixed(dt: f64) -> Self {
        Self {
            cap: dt,
            factor: dt,
            power: 0.0,
        }
    }

    pub fn target(&self, epsilon: f64) -> f64 {
        self.cap.min(self.factor * epsilon.powf(self.power))
    }

    /// The largest step not above the target that divides `horizon` evenly.
    pub fn fit(&self, epsilon: f64, horizon: f64) -> Result<(f64, usize)> {
        let dt = self.target(epsilon);
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt", format!("step policy gives {dt}")));
        }
        if horizon == 0.0 {
            return Ok((dt, 0));
        }
        let steps = (horizon / dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        Ok((horizon / steps as f64, steps))
    }
}

/// Settings shared by the first-scaling Monte Carlo experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSettings {
    pub n_paths: usize,
    pub master_seed: u64,
    pub step: StepPolicy,
    pub scheme: Scheme,
    pub torus_nodes: usize,
    /// Step for the RK4 solution of the averaged equations.
    pub ode_dt: f64,
}

impl Default for MonteCarloSettings {
    fn default() -> Self {
        Self {
            n_paths: 200,
            master_seed: 0,
            step: StepPolicy::default(),
            scheme: Scheme::default(),
            torus_nodes: DEFAULT_TORUS_NODES,
            ode_dt: 1e-3,
        }
    }
}

fn check_epsilons(epsilons: &[f64]) -> Result<()> {
    if epsilons.is_empty() {
        return Err(invalid("epsilons", "must not be empty"));
    }
    if epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(invalid("epsilons", "must be positive and finite"));
    }
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("epsilons", "must be strictly decreasing"));
    }
    Ok(())
}

fn check_y0(model: &IntegrableModel, y0: &PhasePoint) -> Result<()> {
    model.check_point(y0)?;
    if !model.in_chart(y0.as_slice()) {
        return Err(Error::NotInChart("y0 lies outside the chart ball".into()));
    }
    Ok(())
}

/// Monte Carlo estimates of `(E sup_s |H^eps(s) - Hbar(s)|^beta)^(1/beta)` with
/// the fitted log-log slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFitResult {
    pub epsilons: Vec<f64>,
    pub errors: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub n_paths: Vec<usize>,
    /// Fraction of paths that left the chart ball before `t`.
    pub exit_fractions: Vec<f64>,
    pub dts: Vec<f64>,
    pub beta: f64,
    pub slope: f64,
    pub intercept: f64,
    /// Half-width of the 95% confidence interval of the slope.
    pub slope_ci95: f64,
}

/// First-scaling error against the averaged path at slow time `t`.
pub fn rate_experiment(
    model: &IntegrableModel,
    pert: &Perturbation,
    y0: &PhasePoint,
    t: f64,
    beta: f64,
    epsilons: &[f64],
    settings: &MonteCarloSettings,
    executor: &Executor,
) -> Result<RateFitResult> {
    check_epsilons(epsilons)?;
    if !(beta > 1.0 && beta.is_finite()) {
        return Err(invalid("beta", "must exceed 1"));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(invalid("t", "must be positive"));
    }
    if settings.n_paths < 2 {
        return Err(invalid("n_paths", "need at least two paths"));
    }
    let model = model.centered_at(y0)?;
    check_y0(&model, y0)?;
    let grid = TorusGrid::new(model.n(), settings.torus_nodes)?;
    let ode = averaged_rhs(&model, pert, grid)?;
    let avg = solve_averaged_ode(&ode, t, settings.ode_dt)?;
    if avg.exit_time.is_some() {
        return Err(invalid("t", "averaged path leaves the chart ball before t"));
    }

    let mut out = RateFitResult {
        epsilons: epsilons.to_vec(),
        errors: Vec::new(),
        stderrs: Vec::new(),
        n_paths: Vec::new(),
        exit_fractions: Vec::new(),
        dts: Vec::new(),
        beta,
        slope: f64::NAN,
        intercept: f64::NAN,
        slope_ci95: f64::NAN,
    };
    for (e_idx, &eps) in epsilons.iter().enumerate() {
        let horizon = t / eps;
        let (dt, n_steps) = settings.step.fit(eps, horizon)?;
        let params = SimulationParams::new(eps, n_steps as f64 * dt).scheme(settings.scheme);
        let samples = executor.try_map(settings.n_paths, |i| {
            let desc = SeedDescriptor::family(settings.master_seed, e_idx as u64, i as u64);
            let noise = NoisePath::new(desc, model.n(), dt, n_steps)?;
            let mut sup = 0.0f64;
            let exit = integrate_observed(&model, pert, &params, y0, &noise, |_, tau, y, _| {
                let bar = avg.at(eps * tau);
                let d: f64 = model
                    .hamiltonians()
                    .iter()
                    .zip(&bar)
                    .map(|(h, b)| (h.value(y) - b).powi(2))
                    .sum();
                sup = sup.max(d.sqrt());
            })?;
            Ok::<_, Error>((sup.powf(beta), exit.is_some()))
        })?;
        let exits = samples.iter().filter(|s| s.1).count();
        if exits == samples.len() {
            return Err(Error::AllPathsExited(exits));
        }
        let powers: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let m = MomentSummary::from_samples(&powers);
        let err = m.mean.powf(1.0 / beta);
        // delta method for m^(1/beta)
        let se = if m.mean > 0.0 {
            m.mean_se * err / (beta * m.mean)
        } else {
            0.0
        };
        out.errors.push(err);
        out.stderrs.push(se);
        out.n_paths.push(samples.len());
        out.exit_fractions.push(exits as f64 / samples.len() as f64);
        out.dts.push(dt);
    }
    if out.epsilons.len() >= 2 && out.errors.iter().all(|e| *e > 0.0) {
        let fit = fit_log_slope(&out.epsilons, &out.errors, &out.stderrs)?;
        out.slope = fit.slope;
        out.intercept = fit.intercept;
        out.slope_ci95 = fit.ci95;
    }
    Ok(out)
}

/// One row of the exit probability table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitEstimate {
    pub epsilon: f64,
    pub probability: f64,
    pub stderr: f64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitProbabilityResult {
    pub radius: f64,
    pub delta: f64,
    /// First slow time with `|Hbar - H(y0)| >= r - delta`.
    pub t_delta: f64,
    pub rows: Vec<ExitEstimate>,
}

/// Fraction of perturbed paths leaving the chart ball before slow time `s_max`.
pub fn exit_probability_at(
    model: &IntegrableModel,
    pert: &Perturbation,
    y0: &PhasePoint,
    s_max: f64,
    epsilon: f64,
    seed_family: u64,
    settings: &MonteCarloSettings,
    executor: &Executor,
) -> Result<ExitEstimate> {
    if settings.n_paths == 0 {
        return Err(invalid("n_paths", "must be positive"));
    }
    let horizon = s_max / epsilon;
    let (dt, n_steps) = settings.step.fit(epsilon, horizon)?;
    let params = SimulationParams::new(epsilon, n_steps as f64 * dt).scheme(settings.scheme);
    let exits = executor.try_map(settings.n_paths, |i| {
        if n_steps == 0 {
            return Ok(false);
        }
        let desc = SeedDescriptor::family(settings.master_seed, seed_family, i as u64);
        let noise = NoisePath::new(desc, model.n(), dt, n_steps)?;
        let exit = integrate_observed(model, pert, &params, y0, &noise, |_, _, _, _| {})?;
        Ok::<_, Error>(exit.is_some_and(|te| te < horizon))
    })?;
    let n = exits.len();
    let p = exits.iter().filter(|e| **e).count() as f64 / n as f64;
    Ok(ExitEstimate {
        epsilon,
        probability: p,
        stderr: (p * (1.0 - p) / n as f64).sqrt(),
        n_paths: n,
    })
}

/// Estimates `P(T^eps < T_delta)` over the `epsilons` grid, with the chart
/// ball of radius `radius` around `H(y0)`.
#[allow(clippy::too_many_arguments)]
pub fn exit_probability_experiment(
    model: &IntegrableModel,
    pert: &Perturbation,
    y0: &PhasePoint,
    radius: f64,
    delta: f64,
    epsilons: &[f64],
    settings: &MonteCarloSettings,
    executor: &Executor,
) -> Result<ExitProbabilityResult> {
    check_epsilons(epsilons)?;
    if !(delta > 0.0 && delta < radius) {
        return Err(invalid("delta", "must lie in (0, r)"));
    }
    let model = model.centered_at(y0)?.with_chart_radius(radius)?;
    check_y0(&model, y0)?;
    if pert.is_zero() {
        return Err(Error::NotApplicable(
            "averaged path is constant, so T_delta is infinite".into(),
        ));
    }
    let grid = TorusGrid::new(model.n(), settings.torus_nodes)?;
    let ode = averaged_rhs(&model, pert, grid)?.with_radius(radius - delta)?;
    let speed: f64 = ode.rhs(&ode.initial)?.iter().map(|v| v * v).sum::<f64>().sqrt();
    if speed < 1e-12 {
        return Err(Error::NotApplicable(
            "averaged path is constant, so T_delta is infinite".into(),
        ));
    }
    // Generous bound: a few straight-line crossing times.
    let horizon = 10.0 * (radius - delta) / speed;
    let avg = solve_averaged_ode(&ode, horizon, settings.ode_dt)?;
    let t_delta = avg.exit_time.ok_or_else(|| {
        Error::NotApplicable("averaged path stays inside r - delta".into())
    })?;
    let rows = epsilons
        .iter()
        .enumerate()
        .map(|(i, &eps)| exit_probability_at(&model, pert, y0, t_delta, eps, i as u64, settings, executor))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExitProbabilityResult {
        radius,
        delta,
        t_delta,
        rows,
    })
}

/// Mean over paths of `sup_{s <= t} |H(y^eps_s) - H(x_s)|` for coupled
/// perturbed and unperturbed trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationEstimate {
    pub epsilon: f64,
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
}

/// Coupled deviation at fast time `t` for each `epsilon`, on a common set of
/// Brownian paths.
pub fn coupled_deviation_experiment(
    model: &IntegrableModel,
    pert: &Perturbation,
    y0: &PhasePoint,
    t: f64,
    epsilons: &[f64],
    settings: &MonteCarloSettings,
    executor: &Executor,
) -> Result<Vec<DeviationEstimate>> {
    check_epsilons(epsilons)?;
    if settings.n_paths < 2 {
        return Err(invalid("n_paths", "need at least two paths"));
    }
    let model = model.centered_at(y0)?;
    check_y0(&model, y0)?;
    let (dt, n_steps) = settings.step.fit(epsilons[epsilons.len() - 1], t)?;
    let horizon = n_steps as f64 * dt;
    epsilons
        .iter()
        .map(|&eps| {
            let params = SimulationParams::new(eps, horizon).scheme(settings.scheme);
            let base = SimulationParams {
                epsilon: 0.0,
                ..params
            };
            let sups = executor.try_map(settings.n_paths, |i| {
                let desc = SeedDescriptor::family(settings.master_seed, 0, i as u64);
                let noise = NoisePath::new(desc, model.n(), dt, n_steps)?;
                let mut free = Vec::with_capacity(n_steps + 1);
                free.push(model.levels(y0.as_slice()));
                integrate_observed(&model, pert, &base, y0, &noise, |_, _, y, _| {
                    free.push(model.levels(y));
                })?;
                let mut sup = 0.0f64;
                integrate_observed(&model, pert, &params, y0, &noise, |step, _, y, _| {
                    let d: f64 = model
                        .hamiltonians()
                        .iter()
                        .zip(&free[step])
                        .map(|(h, f)| (h.value(y) - f).powi(2))
                        .sum();
                    sup = sup.max(d.sqrt());
                })?;
                Ok::<_, Error>(sup)
            })?;
            let m = MomentSummary::from_samples(&sups);
            Ok(DeviationEstimate {
                epsilon: eps,
                mean: m.mean,
                stderr: m.mean_se,
                n_paths: sups.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_1dof_case, build_r4_example, energy_squared_perturbation, linear_q1_perturbation};

    fn y(v: &[f64]) -> PhasePoint {
        PhasePoint::new(v.to_vec()).unwrap()
    }

    #[test]
    fn exponentials_average_exactly() {
        let (m, _) = build_r4_example();
        let grid = TorusGrid::new(2, 16).unwrap();
        for k1 in -7i64..8 {
            for k2 in -7i64..8 {
                // theta is recovered from the chart, so this also exercises the round trip.
                let chart = m.chart();
                let phase = |x: &[f64]| {
                    let aa = chart.to_action_angle(x);
                    k1 as f64 * aa.angles[0] + k2 as f64 * aa.angles[1]
                };
                let re = torus_average(|x| phase(x).cos(), &m, &[1.3, 0.7], &grid).unwrap();
                let im = torus_average(|x| phase(x).sin(), &m, &[1.3, 0.7], &grid).unwrap();
                let expect = if k1 == 0 && k2 == 0 { 1.0 } else { 0.0 };
                assert!((re - expect).abs() < 1e-12, "{k1} {k2} {re}");
                assert!(im.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cos_squared_and_k1_pairing() {
        let (m, [k1, ..]) = build_r4_example();
        let grid = TorusGrid::new(2, 64).unwrap();
        let c2 = torus_average(
            |x| m.chart().to_action_angle(x).angles[1].cos().powi(2),
            &m,
            &[2.0, 0.5],
            &grid,
        )
        .unwrap();
        assert!((c2 - 0.5).abs() < 1e-12);
        // Independent dense midpoint rule for x2^2 / (x2^2 + x4^2) over theta_2.
        let dense: f64 = (0..100_000)
            .map(|j| {
                let t = std::f64::consts::TAU * (j as f64 + 0.5) / 100_000.0;
                let (x2, x4) = (t.cos(), t.sin());
                x2 * x2 / (x2 * x2 + x4 * x4)
            })
            .sum::<f64>()
            / 100_000.0;
        for actions in [[2.0, 2.0], [0.3, 1.7], [5.0, 0.2]] {
            let rhs = pairing_average(&m, &k1, &actions, &grid).unwrap();
            assert!((rhs[0] - dense).abs() < 1e-9 && (rhs[1] - dense).abs() < 1e-9, "{rhs:?}");
        }
    }

    #[test]
    fn hamiltonian_perturbations_average_to_zero() {
        let (r4, _) = build_r4_example();
        let (one, k) = build_1dof_case();
        for model in [&r4, &one] {
            let grid = TorusGrid::new(model.n(), 64).unwrap();
            for pert in [linear_q1_perturbation(model.n()), energy_squared_perturbation(model)] {
                for a in [0.4, 1.0, 2.5] {
                    let actions = vec![a; model.n()];
                    let v = pairing_average(model, &pert, &actions, &grid).unwrap();
                    assert!(v.iter().all(|c| c.abs() <= 1e-10), "{} {v:?}", pert.name());
                }
            }
        }
        let grid = TorusGrid::new(1, 64).unwrap();
        assert!(pairing_average(&one, &k, &[1.0], &grid).unwrap()[0].abs() < 1e-12);
    }

    #[test]
    fn averaged_rhs_for_k1_and_zero() {
        let (m, [k1, ..]) = build_r4_example();
        let grid = TorusGrid::new(2, 64).unwrap();
        let ode = averaged_rhs(&m, &k1, grid).unwrap();
        for levels in [[4.0, 2.0], [4.3, 2.2], [3.7, 1.8]] {
            let v = ode.rhs(&levels).unwrap();
            assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12);
        }
        let zero = averaged_rhs(&m, &Perturbation::none(2), grid).unwrap();
        assert_eq!(zero.rhs(&[4.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    fn constant_ode(v: [f64; 2], a0: [f64; 2], r: f64) -> AveragedODE {
        AveragedODE::from_fn(move |_| Ok(v.to_vec()), a0.to_vec(), a0.to_vec(), r).unwrap()
    }

    #[test]
    fn linear_solution_and_exit() {
        let ode = constant_ode([0.5, 0.5], [1.0, 1.0], 10.0);
        let path = solve_averaged_ode(&ode, 1.0, 0.1).unwrap();
        for (t, l) in path.times.iter().zip(&path.levels) {
            assert!((l[0] - 1.0 - t / 2.0).abs() < 1e-13 && (l[1] - 1.0 - t / 2.0).abs() < 1e-13);
        }
        assert!((path.at(0.537)[1] - (1.0 + 0.537 / 2.0)).abs() < 1e-13);
        assert!(path.exit_time.is_none());

        let exiting = constant_ode([0.5, 0.5], [1.0, 1.0], 0.5);
        let p = solve_averaged_ode(&exiting, 5.0, 0.01).unwrap();
        assert!((p.exit_time.unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-12);

        let still = constant_ode([0.0, 0.0], [1.0, 1.0], 0.5);
        let p = solve_averaged_ode(&still, 2.0, 0.1).unwrap();
        assert!(p.levels.iter().all(|l| l == &vec![1.0, 1.0]));
        assert!((p.end_time() - 2.0).abs() < 1e-12);
        assert!(solve_averaged_ode(&still, 1.0, 0.0).is_err());
    }

    #[test]
    fn rk4_matches_exponential() {
        let ode = AveragedODE::from_fn(|a| Ok(vec![-a[0]]), vec![1.0], vec![1.0], 10.0).unwrap();
        let p = solve_averaged_ode(&ode, 1.0, 0.01).unwrap();
        assert!((p.levels.last().unwrap()[0] - (-1f64).exp()).abs() < 1e-10);
        assert!((p.at(0.505)[0] - (-0.505f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn step_policy_divides_horizon() {
        let p = StepPolicy::default();
        assert_eq!(p.target(0.1), 1e-3);
        assert!((p.target(0.05) - 2.5e-4).abs() < 1e-18);
        let (dt, n) = StepPolicy::fixed(1e-3).fit(0.07, 0.5 / 0.07).unwrap();
        assert!((dt * n as f64 - 0.5 / 0.07).abs() < 1e-12 && dt <= 1e-3);
        let (dt, n) = StepPolicy::fixed(1e-3).fit(0.1, 5.0).unwrap();
        assert_eq!(n, 5000);
        assert!((dt - 1e-3).abs() < 1e-15);
    }

    fn quick() -> MonteCarloSettings {
        MonteCarloSettings {
            n_paths: 16,
            step: StepPolicy::fixed(1e-2),
            torus_nodes: 32,
            ode_dt: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_perturbation_rate_is_at_floor() {
        let (m, _) = build_r4_example();
        let y0 = y(&[2.0, 2.0, 0.0, 0.0]);
        let res = rate_experiment(&m, &Perturbation::none(2), &y0, 0.5, 2.0, &[0.1, 0.05], &quick(), &Executor::default()).unwrap();
        assert!(res.errors.iter().all(|e| *e <= 1e-3), "{:?}", res.errors);
    }

    #[test]
    fn rate_validation() {
        let (m, [k1, ..]) = build_r4_example();
        let y0 = y(&[2.0, 2.0, 0.0, 0.0]);
        let ex = Executor::default();
        assert!(rate_experiment(&m, &k1, &y0, 0.5, 2.0, &[0.05, 0.1], &quick(), &ex).is_err());
        assert!(rate_experiment(&m, &k1, &y0, 0.5, 1.0, &[0.1], &quick(), &ex).is_err());
        let none = MonteCarloSettings { n_paths: 0, ..quick() };
        assert!(rate_experiment(&m, &k1, &y0, 0.5, 2.0, &[0.1], &none, &ex).is_err());
    }

    #[test]
    fn exit_probability_edge_cases() {
        let (m, [k1, ..]) = build_r4_example();
        let y0 = y(&[2.0, 2.0, 0.0, 0.0]);
        let ex = Executor::default();
        let s = quick();
        let zero = exit_probability_at(&m.centered_at(&y0).unwrap(), &Perturbation::none(2), &y0, 1.0, 0.1, 0, &s, &ex).unwrap();
        assert_eq!(zero.probability, 0.0);
        assert!(matches!(
            exit_probability_experiment(&m, &Perturbation::none(2), &y0, 0.7, 0.1, &[0.1], &s, &ex),
            Err(Error::NotApplicable(_))
        ));
        let near = exit_probability_experiment(&m, &k1, &y0, 0.7, 0.7 - 1e-6, &[0.5, 0.1], &s, &ex).unwrap();
        assert!(near.t_delta < 1e-5);
        assert!(near.rows.iter().all(|r| r.probability == 0.0));
        assert!(exit_probability_experiment(&m, &k1, &y0, 0.7, 0.8, &[0.1], &s, &ex).is_err());
    }

    #[test]
    fn coupled_deviation_is_linear_in_epsilon_for_k1() {
        let (m, [k1, ..]) = build_r4_example();
        let y0 = y(&[2.0, 2.0, 0.0, 0.0]);
        let rows = coupled_deviation_experiment(&m, &k1, &y0, 1.0, &[0.1, 0.05], &quick(), &Executor::default()).unwrap();
        let ratio = rows[0].mean / rows[1].mean;
        assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
    }
}
