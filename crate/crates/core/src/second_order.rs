//! Diffusive limit at the time scale `1/eps^2` for Hamiltonian perturbations.
//!
//! On each fiber the solutions `h_i = L_0^{-1} f_i` of the Poisson equation
//! with `f_i = -dH_i(K)` give
//!
//! ```text
//! a_ij = -int f_j h_i dtheta,      b_j = 1/2 int L_K (-h_j) dtheta
//! ```
//!
//! and these fields, interpolated over a grid of levels, drive the limit SDE
//! for the energies.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{IntegrableModel, Perturbation};
use crate::noise::{NoisePath, SeedDescriptor};
use crate::parallel::Executor;
use crate::poisson::{solve_poisson, GeneratorSpec};
use crate::sde::{integrate_observed, Scheme, SimulationParams};
use crate::stats::{covariance, ks_two_sample, MomentSummary};
use crate::symplectic::PhasePoint;
use crate::averaging::{chord_exit, chord_point, StepPolicy};
use crate::torus::{TorusFunction, TorusGrid};

/// Eigenvalues below `-NEGATIVE_EIGEN_WARN` are reported when taking square roots.
pub const NEGATIVE_EIGEN_WARN: f64 = 1e-8;

const ROUNDING_FLOOR: f64 = 64.0 * f64::EPSILON;

/// Relative step of the centered action differences used for `dh/dI`.
pub const ACTION_STEP: f64 = 1e-4;

/// Tensor grid of level values `H = c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelGrid {
    pub axes: Vec<Vec<f64>>,
}

impl LevelGrid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(invalid("axes", "need at least one axis"));
        }
        for axis in &axes {
            if axis.len() < 2 {
                return Err(invalid("axes", "every axis needs at least two nodes"));
            }
            if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(invalid("axes", "nodes must be finite and strictly increasing"));
            }
        }
        Ok(Self { axes })
    }

    /// `count` equispaced nodes on `[lo_i, hi_i]` per axis.
    pub fn uniform(lo: &[f64], hi: &[f64], count: usize) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if count < 2 {
            return Err(invalid("count", "need at least two nodes per axis"));
        }
        let axes = lo
            .iter()
            .zip(hi)
            .map(|(&a, &b)| {
                (0..count)
                    .map(|j| a + (b - a) * j as f64 / (count - 1) as f64)
                    .collect()
            })
            .collect();
        Self::new(axes)
    }

    /// Box `center +- margin * radius` around a chart ball.
    pub fn covering_ball(center: &[f64], radius: f64, margin: f64, count: usize) -> Result<Self> {
        let lo: Vec<f64> = center.iter().map(|c| c - margin * radius).collect();
        let hi: Vec<f64> = center.iter().map(|c| c + margin * radius).collect();
        Self::uniform(&lo, &hi, count)
    }

    pub fn n(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Node `idx` in flat order (last axis fastest).
    pub fn node(&self, mut idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        for d in (0..self.n()).rev() {
            let len = self.axes[d].len();
            out[d] = self.axes[d][idx % len];
            idx /= len;
        }
        out
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    /// Multilinear weights for `levels`, extrapolating up to one cell past
    /// the box.
    fn stencil(&self, levels: &[f64]) -> Result<Vec<(usize, f64)>> {
        if levels.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: levels.len(),
            });
        }
        let mut cells = Vec::with_capacity(self.n());
        for (axis, &c) in self.axes.iter().zip(levels) {
            let last = axis.len() - 1;
            let lo_gap = axis[1] - axis[0];
            let hi_gap = axis[last] - axis[last - 1];
            if !(c >= axis[0] - lo_gap && c <= axis[last] + hi_gap) {
                return Err(Error::OutsideDomain(format!(
                    "level {c} outside the diffusion grid [{}, {}]",
                    axis[0], axis[last]
                )));
            }
            let j = axis[1..last].partition_point(|&v| v <= c);
            let u = (c - axis[j]) / (axis[j + 1] - axis[j]);
            cells.push((j, u));
        }
        let mut out = Vec::with_capacity(1 << self.n());
        for corner in 0..(1usize << self.n()) {
            let mut idx = 0;
            let mut w = 1.0;
            for (d, &(j, u)) in cells.iter().enumerate() {
                let up = (corner >> (self.n() - 1 - d)) & 1 == 1;
                idx = idx * self.axes[d].len() + j + usize::from(up);
                w *= if up { u } else { 1.0 - u };
            }
            out.push((idx, w));
        }
        Ok(out)
    }
}

/// Symmetric square root with negative eigenvalues clamped to zero. Also
/// returns the smallest eigenvalue.
pub fn sym_sqrt(a: &[f64], n: usize) -> (Vec<f64>, f64) {
    if n == 1 {
        return (vec![a[0].max(0.0).sqrt()], a[0]);
    }
    let m = DMatrix::from_row_slice(n, n, a);
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let s = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    // Row-major and exactly symmetric.
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (s[(i, j)] + s[(j, i)]);
        }
    }
    (out, min)
}

/// Second order coefficients over a level grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub model: String,
    pub perturbation: String,
    pub n: usize,
    pub torus_nodes: usize,
    pub grid: LevelGrid,
    /// Row-major `n x n` symmetrized `a` per node.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// Largest `|a_ij - a_ji|` seen before symmetrization.
    pub asymmetry: f64,
    pub min_eigenvalue: f64,
    pub chart_center: Vec<f64>,
    pub chart_radius: f64,
    pub warnings: Vec<String>,
}

/// Per-node values for the JSON export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionNode {
    pub levels: Vec<f64>,
    pub a: Vec<f64>,
    pub sigma: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionExport {
    pub model: String,
    pub perturbation: String,
    pub n: usize,
    pub torus_nodes: usize,
    pub axes: Vec<Vec<f64>>,
    pub symmetrized: bool,
    pub asymmetry: f64,
    pub min_eigenvalue: f64,
    pub warnings: Vec<String>,
    pub nodes: Vec<DiffusionNode>,
}

impl DiffusionModel {
    fn interpolate(&self, values: &[Vec<f64>], levels: &[f64]) -> Result<Vec<f64>> {
        let stencil = self.grid.stencil(levels)?;
        let mut out = vec![0.0; values[0].len()];
        for (idx, w) in stencil {
            for (o, v) in out.iter_mut().zip(&values[idx]) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    pub fn a_at(&self, levels: &[f64]) -> Result<Vec<f64>> {
        self.interpolate(&self.a, levels)
    }

    pub fn b_at(&self, levels: &[f64]) -> Result<Vec<f64>> {
        self.interpolate(&self.b, levels)
    }

    pub fn sigma_at(&self, levels: &[f64]) -> Result<Vec<f64>> {
        Ok(sym_sqrt(&self.a_at(levels)?, self.n).0)
    }

    pub fn sigma_nodes(&self) -> Vec<Vec<f64>> {
        self.a.iter().map(|a| sym_sqrt(a, self.n).0).collect()
    }

    pub fn export(&self) -> DiffusionExport {
        let nodes = self
            .grid
            .nodes()
            .into_iter()
            .zip(self.a.iter().zip(&self.b))
            .map(|(levels, (a, b))| DiffusionNode {
                levels,
                a: a.clone(),
                sigma: sym_sqrt(a, self.n).0,
                b: b.clone(),
            })
            .collect();
        DiffusionExport {
            model: self.model.clone(),
            perturbation: self.perturbation.clone(),
            n: self.n,
            torus_nodes: self.torus_nodes,
            axes: self.grid.axes.clone(),
            symmetrized: true,
            asymmetry: self.asymmetry,
            min_eigenvalue: self.min_eigenvalue,
            warnings: self.warnings.clone(),
            nodes,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.export()).expect("plain data serializes")
    }
}

/// `f_i = -dH_i(K)` on the fiber over `actions`, one torus function per `i`.
fn forcing(
    model: &IntegrableModel,
    pert: &Perturbation,
    actions: &[f64],
    grid: TorusGrid,
    points: &mut Vec<Vec<f64>>,
) -> Result<Vec<TorusFunction>> {
    let n = model.n();
    if !model.chart().actions_regular(actions) {
        return Err(Error::NotInChart(format!("actions {actions:?}")));
    }
    let mut theta = vec![0.0; n];
    let mut k = vec![0.0; 2 * n];
    let mut grad = vec![0.0; 2 * n];
    let mut values = vec![vec![0.0; grid.len()]; n];
    points.clear();
    for idx in 0..grid.len() {
        grid.angles_into(idx, &mut theta);
        let mut x = vec![0.0; 2 * n];
        model.chart().from_action_angle_into(actions, &theta, &mut x);
        if !pert.in_domain(&x) {
            return Err(Error::OutsideDomain(pert.name().to_string()));
        }
        pert.field().try_eval_into(&x, &mut k)?;
        for (i, h) in model.hamiltonians().iter().enumerate() {
            h.gradient_into(&x, &mut grad);
            let (dot, mag) = grad
                .iter()
                .zip(&k)
                .fold((0.0, 0.0), |(d, m), (a, b)| (d + a * b, m + (a * b).abs()));
            // Cancellation down to rounding is an exact zero.
            values[i][idx] = if dot.abs() <= ROUNDING_FLOOR * mag { 0.0 } else { -dot };
        }
        points.push(x);
    }
    let levels = model.chart().levels_from_actions(actions);
    Ok(values
        .into_iter()
        .map(|v| TorusFunction {
            grid,
            values: v,
            levels: levels.clone(),
        })
        .collect())
}

fn solutions(
    model: &IntegrableModel,
    pert: &Perturbation,
    actions: &[f64],
    grid: TorusGrid,
    shift: f64,
    points: &mut Vec<Vec<f64>>,
) -> Result<(Vec<TorusFunction>, Vec<TorusFunction>)> {
    let gen = GeneratorSpec::from_model(model, actions)?;
    let f = forcing(model, pert, actions, grid, points)?;
    let h = f
        .iter()
        .map(|fi| {
            let mut hi = solve_poisson(fi, &gen)?;
            hi.values.iter_mut().for_each(|v| *v += shift);
            Ok(hi)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((f, h))
}

/// `(a, b, asymmetry)` on one fiber. `shift` is added to every Poisson
/// solution, which must leave the result unchanged.
fn fiber_coefficients(
    model: &IntegrableModel,
    pert: &Perturbation,
    actions: &[f64],
    grid: TorusGrid,
    shift: f64,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let n = model.n();
    let mut points = Vec::new();
    let mut scratch = Vec::new();
    let (f, h) = solutions(model, pert, actions, grid, shift, &mut points)?;
    let w = grid.weight();

    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = -w * f[j].values.iter().zip(&h[i].values).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            let (x, y) = (a[i * n + j], a[j * n + i]);
            asym = asym.max((x - y).abs());
            a[i * n + j] = 0.5 * (x + y);
            a[j * n + i] = 0.5 * (x + y);
        }
    }

    // dh/dI by centered differences on neighboring fibers at the same angles.
    let mut dh_di = vec![vec![vec![0.0; grid.len()]; n]; n]; // [l][j][node]
    for l in 0..n {
        let step = ACTION_STEP * actions[l].abs().max(1.0);
        let mut up = actions.to_vec();
        let mut down = actions.to_vec();
        up[l] += step;
        down[l] -= step;
        let (_, hu) = solutions(model, pert, &up, grid, shift, &mut scratch)?;
        let (_, hd) = solutions(model, pert, &down, grid, shift, &mut scratch)?;
        for j in 0..n {
            for idx in 0..grid.len() {
                dh_di[l][j][idx] = (hu[j].values[idx] - hd[j].values[idx]) / (2.0 * step);
            }
        }
    }
    let dh_dtheta: Vec<Vec<TorusFunction>> = h
        .iter()
        .map(|hj| (0..n).map(|l| hj.derivative(l)).collect())
        .collect();

    let mut k = vec![0.0; 2 * n];
    let mut b = vec![0.0; n];
    for (idx, x) in points.iter().enumerate() {
        pert.field().eval_into(x, &mut k);
        let (k_i, k_theta) = model.chart().pushforward(x, &k);
        for j in 0..n {
            let mut lk = 0.0;
            for l in 0..n {
                lk += dh_di[l][j][idx] * k_i[l] + dh_dtheta[j][l].values[idx] * k_theta[l];
            }
            // b_j = 1/2 int L_K(-h_j)
            b[j] -= 0.5 * w * lk;
        }
    }
    Ok((a, b, asym))
}

/// Assembles `a`, `sigma` and `b` on every node of `levels`.
pub fn assemble_diffusion(
    model: &IntegrableModel,
    pert: &Perturbation,
    levels: &LevelGrid,
    torus: TorusGrid,
    executor: &Executor,
) -> Result<DiffusionModel> {
    assemble_with_shift(model, pert, levels, torus, executor, 0.0)
}

fn assemble_with_shift(
    model: &IntegrableModel,
    pert: &Perturbation,
    levels: &LevelGrid,
    torus: TorusGrid,
    executor: &Executor,
    shift: f64,
) -> Result<DiffusionModel> {
    let n = model.n();
    if pert.hamiltonian_k().is_none() {
        return Err(Error::NotHamiltonian(pert.name().to_string()));
    }
    if levels.n() != n || torus.n() != n || pert.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: levels.n(),
        });
    }
    let nodes = levels.nodes();
    let per_node = executor.try_map(nodes.len(), |i| {
        let actions = model.chart().actions_from_levels(&nodes[i]);
        fiber_coefficients(model, pert, &actions, torus, shift)
    })?;
    let mut out = DiffusionModel {
        model: model.name().to_string(),
        perturbation: pert.name().to_string(),
        n,
        torus_nodes: torus.m(),
        grid: levels.clone(),
        a: Vec::with_capacity(nodes.len()),
        b: Vec::with_capacity(nodes.len()),
        asymmetry: 0.0,
        min_eigenvalue: f64::INFINITY,
        chart_center: model.chart_center().to_vec(),
        chart_radius: model.chart_radius(),
        warnings: Vec::new(),
    };
    for (node, (a, b, asym)) in nodes.iter().zip(per_node) {
        let (_, min) = sym_sqrt(&a, n);
        if min < -NEGATIVE_EIGEN_WARN {
            out.warnings.push(format!(
                "a has eigenvalue {min:e} at levels {node:?}; clamped to zero"
            ));
        }
        out.asymmetry = out.asymmetry.max(asym);
        out.min_eigenvalue = out.min_eigenvalue.min(min);
        out.a.push(a);
        out.b.push(b);
    }
    Ok(out)
}

/// How the coefficients enter the limit SDE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LimitReading {
    /// `dz = sigma o dB + b dt`.
    Stratonovich,
    /// `dz = sigma dB + b dt`.
    Ito,
    /// `dz = sqrt(2) sigma dB - 2 b dt`, the generator `a_ij d_i d_j - 2 b_j d_j`.
    #[default]
    Homogenized,
}

/// Sampled path of the limit SDE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitPath {
    pub times: Vec<f64>,
    pub levels: Vec<Vec<f64>>,
    pub exit_time: Option<f64>,
}

impl LimitPath {
    pub fn final_levels(&self) -> &[f64] {
        self.levels.last().expect("path holds the initial point")
    }
}

fn limit_coefficients(dm: &DiffusionModel, z: &[f64], reading: LimitReading) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut sigma = dm.sigma_at(z)?;
    let mut b = dm.b_at(z)?;
    if reading == LimitReading::Homogenized {
        sigma.iter_mut().for_each(|s| *s *= std::f64::consts::SQRT_2);
        b.iter_mut().for_each(|v| *v *= -2.0);
    }
    Ok((sigma, b))
}

fn limit_increment(sigma: &[f64], b: &[f64], dw: &[f64], dt: f64) -> Vec<f64> {
    let n = b.len();
    (0..n)
        .map(|j| b[j] * dt + (0..n).map(|i| sigma[j * n + i] * dw[i]).sum::<f64>())
        .collect()
}

/// Heun steps for the limit SDE from `z0`, stopped on the chart ball boundary
/// (the exit step is cut back to the crossing of its chord).
/// For the Ito readings the noise coefficient is frozen at the start of the
/// step and only the drift is averaged.
pub fn simulate_limit_sde(
    dm: &DiffusionModel,
    z0: &[f64],
    horizon: f64,
    noise: &NoisePath,
    reading: LimitReading,
    record_stride: usize,
) -> Result<LimitPath> {
    let n = dm.n;
    if z0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: z0.len(),
        });
    }
    if noise.n_streams() != n {
        return Err(invalid("noise", format!("need {n} Brownian streams")));
    }
    if record_stride == 0 {
        return Err(invalid("record_stride", "must be positive"));
    }
    let dt = noise.dt();
    let n_steps = crate::sde::step_count(horizon, dt)?;
    if noise.n_steps() < n_steps {
        return Err(invalid("noise", "path shorter than horizon"));
    }
    let r2 = dm.chart_radius * dm.chart_radius;
    let outside = |z: &[f64]| {
        z.iter()
            .zip(&dm.chart_center)
            .map(|(a, c)| (a - c).powi(2))
            .sum::<f64>()
            >= r2
    };
    if outside(z0) {
        return Err(Error::NotInChart("z0 outside the chart ball".into()));
    }
    let mut z = z0.to_vec();
    let mut path = LimitPath {
        times: vec![0.0],
        levels: vec![z.clone()],
        exit_time: None,
    };
    let mut dw = vec![0.0; n];
    let mut cursor = noise.cursor();
    for step in 1..=n_steps {
        cursor.next_into(&mut dw);
        let (s0, b0) = limit_coefficients(dm, &z, reading)?;
        let inc0 = limit_increment(&s0, &b0, &dw, dt);
        let pred: Vec<f64> = z.iter().zip(&inc0).map(|(a, d)| a + d).collect();
        let (s1, b1) = limit_coefficients(dm, &pred, reading)?;
        let inc1 = match reading {
            LimitReading::Stratonovich => limit_increment(&s1, &b1, &dw, dt),
            _ => limit_increment(&s0, &b1, &dw, dt),
        };
        let prev = z.clone();
        for j in 0..n {
            z[j] += 0.5 * (inc0[j] + inc1[j]);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("limit state"));
        }
        let t = step as f64 * dt;
        if outside(&z) {
            let s = chord_exit(&prev, &z, &dm.chart_center, dm.chart_radius);
            let te = t - (1.0 - s) * dt;
            path.times.push(te);
            path.levels.push(chord_point(&prev, &z, s));
            path.exit_time = Some(te);
            return Ok(path);
        }
        if step % record_stride == 0 || step == n_steps {
            path.times.push(t);
            path.levels.push(z.clone());
        }
    }
    Ok(path)
}

/// Settings of the weak convergence experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakSettings {
    pub n_paths: usize,
    pub master_seed: u64,
    /// Steps of the perturbed system in fast time.
    pub step: StepPolicy,
    pub scheme: Scheme,
    pub limit_dt: f64,
    pub reading: LimitReading,
    pub torus_nodes: usize,
    /// Level nodes per axis of the diffusion grid.
    pub level_nodes: usize,
    /// The diffusion grid covers `center +- level_margin * r`.
    pub level_margin: f64,
}

impl Default for WeakSettings {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            master_seed: 0,
            step: StepPolicy::fixed(1e-2),
            scheme: Scheme::default(),
            limit_dt: 1e-3,
            reading: LimitReading::default(),
            torus_nodes: 64,
            level_nodes: 17,
            level_margin: 1.25,
        }
    }
}

/// Moments of one energy component on both sides at one `eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakRow {
    pub epsilon: f64,
    pub component: usize,
    pub perturbed: MomentSummary,
    pub limit: MomentSummary,
    /// Two-sample Kolmogorov-Smirnov distance.
    pub cdf_distance: f64,
    pub mean_z: f64,
    pub var_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakEpsilon {
    pub epsilon: f64,
    pub dt: f64,
    pub exit_fraction: f64,
    /// More than half of the perturbed paths left the chart early.
    pub early_exit: bool,
    /// Row-major covariance of the perturbed energies.
    pub covariance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakConvergenceResult {
    pub t: f64,
    pub reading: LimitReading,
    pub rows: Vec<WeakRow>,
    pub per_epsilon: Vec<WeakEpsilon>,
    pub limit_exit_fraction: f64,
    pub limit_covariance: Vec<f64>,
    pub diffusion: DiffusionModel,
}

impl WeakConvergenceResult {
    pub fn rows_for(&self, component: usize) -> Vec<&WeakRow> {
        self.rows.iter().filter(|r| r.component == component).collect()
    }
}

fn cov_matrix(samples: &[Vec<f64>], n: usize) -> Vec<f64> {
    let cols: Vec<Vec<f64>> = (0..n).map(|i| samples.iter().map(|s| s[i]).collect()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = covariance(&cols[i], &cols[j]);
        }
    }
    out
}

/// Final (stopped) limit SDE samples at time `t`. Stopped samples lie on the
/// ball boundary.
pub fn limit_samples(
    dm: &DiffusionModel,
    z0: &[f64],
    t: f64,
    settings: &WeakSettings,
    executor: &Executor,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let (dt, n_steps) = StepPolicy::fixed(settings.limit_dt).fit(1.0, t)?;
    let horizon = n_steps as f64 * dt;
    let family = u64::MAX;
    let paths = executor.try_map(settings.n_paths, |i| {
        let desc = SeedDescriptor::family(settings.master_seed, family, i as u64);
        let noise = NoisePath::new(desc, dm.n, dt, n_steps)?;
        let path = simulate_limit_sde(dm, z0, horizon, &noise, settings.reading, n_steps.max(1))?;
        Ok::<_, Error>((path.final_levels().to_vec(), path.exit_time.is_some()))
    })?;
    let exits = paths.iter().filter(|p| p.1).count();
    Ok((paths.into_iter().map(|p| p.0).collect(), exits))
}

/// Final (stopped) energies of the perturbed system at fast time `t/eps^2`.
/// A path that exits is stopped where its last step crosses the boundary in
/// level space.
pub fn perturbed_samples(
    model: &IntegrableModel,
    pert: &Perturbation,
    y0: &PhasePoint,
    t: f64,
    epsilon: f64,
    seed_family: u64,
    settings: &WeakSettings,
    executor: &Executor,
) -> Result<(Vec<Vec<f64>>, usize, f64)> {
    let horizon = t / (epsilon * epsilon);
    let (dt, n_steps) = settings.step.fit(epsilon, horizon)?;
    let params = SimulationParams::new(epsilon, n_steps as f64 * dt).scheme(settings.scheme);
    let out = executor.try_map(settings.n_paths, |i| {
        let desc = SeedDescriptor::family(settings.master_seed, seed_family, i as u64);
        let noise = NoisePath::new(desc, model.n(), dt, n_steps)?;
        let center = model.levels(y0.as_slice());
        let mut prev = center.clone();
        let mut last = prev.clone();
        let exit = integrate_observed(model, pert, &params, y0, &noise, |_, _, y, done| {
            if done {
                last = model.levels(y);
            } else {
                prev = model.levels(y);
            }
        })?;
        if exit.is_some() {
            let s = chord_exit(&prev, &last, &center, model.chart_radius());
            last = chord_point(&prev, &last, s);
        }
        Ok::<_, Error>((last, exit.is_some()))
    })?;
    let exits = out.iter().filter(|p| p.1).count();
    Ok((out.into_iter().map(|p| p.0).collect(), exits, dt))
}

/// Compares the law of `H(y^eps_{t/eps^2})` with that of the limit SDE at
/// time `t`, both stopped at the chart boundary.
#[allow(clippy::too_many_arguments)]
pub fn weak_convergence_experiment(
    model: &IntegrableModel,
    pert: &Perturbation,
    y0: &PhasePoint,
    t: f64,
    epsilons: &[f64],
    settings: &WeakSettings,
    executor: &Executor,
) -> Result<WeakConvergenceResult> {
    if pert.hamiltonian_k().is_none() {
        return Err(Error::NotHamiltonian(pert.name().to_string()));
    }
    if epsilons.is_empty() || epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(invalid("epsilons", "must be a non-empty list of positive values"));
    }
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("epsilons", "must be strictly decreasing"));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(invalid("t", "must be positive"));
    }
    if settings.n_paths < 2 {
        return Err(invalid("n_paths", "need at least two paths"));
    }
    let model = model.centered_at(y0)?;
    if !model.in_chart(y0.as_slice()) {
        return Err(Error::NotInChart("y0 lies outside the chart ball".into()));
    }
    let n = model.n();
    let levels = LevelGrid::covering_ball(
        model.chart_center(),
        model.chart_radius(),
        settings.level_margin,
        settings.level_nodes,
    )?;
    let torus = TorusGrid::new(n, settings.torus_nodes)?;
    let dm = assemble_diffusion(&model, pert, &levels, torus, executor)?;
    let z0 = model.levels(y0.as_slice());
    let (limit, limit_exits) = limit_samples(&dm, &z0, t, settings, executor)?;
    let limit_cols: Vec<Vec<f64>> = (0..n).map(|i| limit.iter().map(|s| s[i]).collect()).collect();

    let mut rows = Vec::new();
    let mut per_epsilon = Vec::new();
    for (e_idx, &eps) in epsilons.iter().enumerate() {
        let (samples, exits, dt) =
            perturbed_samples(&model, pert, y0, t, eps, e_idx as u64, settings, executor)?;
        for (i, lim) in limit_cols.iter().enumerate() {
            let col: Vec<f64> = samples.iter().map(|s| s[i]).collect();
            let p = MomentSummary::from_samples(&col);
            let l = MomentSummary::from_samples(lim);
            rows.push(WeakRow {
                epsilon: eps,
                component: i,
                perturbed: p,
                limit: l,
                cdf_distance: ks_two_sample(&col, lim),
                mean_z: p.mean_z(&l),
                var_z: p.var_z(&l),
            });
        }
        let frac = exits as f64 / samples.len() as f64;
        per_epsilon.push(WeakEpsilon {
            epsilon: eps,
            dt,
            exit_fraction: frac,
            early_exit: frac > 0.5,
            covariance: cov_matrix(&samples, n),
        });
    }
    Ok(WeakConvergenceResult {
        t,
        reading: settings.reading,
        rows,
        per_epsilon,
        limit_exit_fraction: limit_exits as f64 / limit.len() as f64,
        limit_covariance: cov_matrix(&limit, n),
        diffusion: dm,
    })
}
