//! Shipped integrable systems with exact action-angle charts.
//!
//! Every shipped model is a product of planar oscillators: plane `i` is the
//! pair `(q_i, p_i)` with action `I_i = (a_i q_i^2 + p_i^2 / a_i) / 2` and
//! angle `theta_i = atan2(p_i / sqrt(a_i), sqrt(a_i) q_i)`. The Hamiltonians
//! are linear in the actions, `H = F I`, where row `k` of `F` is the
//! frequency vector `dH_k/dI`.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::symplectic::{PhasePoint, ScalarFunction, SmoothField};

/// Action-angle coordinates of a point in the chart.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionAngle {
    pub actions: Vec<f64>,
    pub angles: Vec<f64>,
}

impl ActionAngle {
    pub fn new(actions: Vec<f64>, angles: Vec<f64>) -> Result<Self> {
        if actions.len() != angles.len() {
            return Err(Error::DimensionMismatch {
                expected: actions.len(),
                got: angles.len(),
            });
        }
        Ok(Self {
            actions,
            angles: angles.into_iter().map(reduce_angle).collect(),
        })
    }
}

/// Reduces an angle into `[0, 2pi)`.
pub fn reduce_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Wraps an angle difference into `(-pi, pi]`.
pub fn wrap_difference(d: f64) -> f64 {
    let r = (d + std::f64::consts::PI).rem_euclid(TAU) - std::f64::consts::PI;
    if r == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        r
    }
}

/// An action-angle chart `phi^{-1}: U_0 -> D x T^n` together with the level map
/// `I -> H(phi(I, theta))` (which does not depend on `theta`).
pub trait ActionAngleChart: Send + Sync {
    fn n(&self) -> usize;

    fn to_action_angle(&self, x: &[f64]) -> ActionAngle;

    fn from_action_angle_into(&self, actions: &[f64], angles: &[f64], out: &mut [f64]);

    /// Row-major `n x n`; row `k` is `dH_k/dI`.
    fn freq_matrix(&self, actions: &[f64]) -> Vec<f64>;

    /// Angular velocity of the drift field `V`.
    fn drift_freq(&self, actions: &[f64]) -> Vec<f64>;

    fn levels_from_actions(&self, actions: &[f64]) -> Vec<f64>;

    fn actions_from_levels(&self, levels: &[f64]) -> Vec<f64>;

    /// Whether the actions lie in the regular region `D`.
    fn actions_regular(&self, actions: &[f64]) -> bool;

    /// Distance, in level space, from `levels` to the critical values.
    fn critical_distance(&self, levels: &[f64]) -> f64;

    /// Components `(dI(v), dtheta(v))` of the tangent vector `v` at `x`.
    fn pushforward(&self, x: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        let n = self.n();
        if norm == 0.0 {
            return (vec![0.0; n], vec![0.0; n]);
        }
        let scale = x.iter().fold(1.0f64, |m, c| m.max(c.abs()));
        let h = 1e-5 * scale / norm;
        let up: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
        let down: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
        let (u, d) = (self.to_action_angle(&up), self.to_action_angle(&down));
        let di = (0..n)
            .map(|i| (u.actions[i] - d.actions[i]) / (2.0 * h))
            .collect();
        let dt = (0..n)
            .map(|i| wrap_difference(u.angles[i] - d.angles[i]) / (2.0 * h))
            .collect();
        (di, dt)
    }
}

/// Product of planar oscillator charts with linear level map `H = F I`.
#[derive(Debug, Clone)]
pub struct PlanarChart {
    scales: Vec<f64>,
    level_matrix: DMatrix<f64>,
    level_inverse: DMatrix<f64>,
    drift_freq: Vec<f64>,
}

impl PlanarChart {
    pub fn new(scales: Vec<f64>, level_matrix: DMatrix<f64>) -> Result<Self> {
        let n = scales.len();
        if level_matrix.nrows() != n || level_matrix.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: level_matrix.nrows(),
            });
        }
        let det = level_matrix.determinant();
        if det.abs() < 1e-12 {
            return Err(Error::NotElliptic(det));
        }
        let level_inverse = level_matrix
            .clone()
            .try_inverse()
            .ok_or(Error::NotElliptic(det))?;
        Ok(Self {
            scales,
            level_matrix,
            level_inverse,
            drift_freq: vec![0.0; n],
        })
    }
}

impl ActionAngleChart for PlanarChart {
    fn n(&self) -> usize {
        self.scales.len()
    }

    fn to_action_angle(&self, x: &[f64]) -> ActionAngle {
        let n = self.n();
        let mut actions = Vec::with_capacity(n);
        let mut angles = Vec::with_capacity(n);
        for (i, &a) in self.scales.iter().enumerate() {
            let (q, p) = (x[i], x[n + i]);
            actions.push(0.5 * (a * q * q + p * p / a));
            let s = a.sqrt();
            angles.push(reduce_angle((p / s).atan2(s * q)));
        }
        ActionAngle { actions, angles }
    }

    fn from_action_angle_into(&self, actions: &[f64], angles: &[f64], out: &mut [f64]) {
        let n = self.n();
        for (i, &a) in self.scales.iter().enumerate() {
            let r = (2.0 * actions[i].max(0.0)).sqrt();
            let (s, c) = angles[i].sin_cos();
            out[i] = r / a.sqrt() * c;
            out[n + i] = r * a.sqrt() * s;
        }
    }

    fn freq_matrix(&self, _actions: &[f64]) -> Vec<f64> {
        self.level_matrix.transpose().as_slice().to_vec()
    }

    fn drift_freq(&self, _actions: &[f64]) -> Vec<f64> {
        self.drift_freq.clone()
    }

    fn levels_from_actions(&self, actions: &[f64]) -> Vec<f64> {
        let v = &self.level_matrix * nalgebra::DVector::from_column_slice(actions);
        v.as_slice().to_vec()
    }

    fn actions_from_levels(&self, levels: &[f64]) -> Vec<f64> {
        let v = &self.level_inverse * nalgebra::DVector::from_column_slice(levels);
        v.as_slice().to_vec()
    }

    fn actions_regular(&self, actions: &[f64]) -> bool {
        actions.iter().all(|&i| i > 0.0 && i.is_finite())
    }

    fn critical_distance(&self, levels: &[f64]) -> f64 {
        // Critical values are the hyperplanes I_i(H) = 0.
        let actions = self.actions_from_levels(levels);
        (0..self.n())
            .map(|i| {
                let row = self.level_inverse.row(i);
                actions[i].abs() / row.norm()
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn pushforward(&self, x: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let mut di = Vec::with_capacity(n);
        let mut dt = Vec::with_capacity(n);
        for (i, &a) in self.scales.iter().enumerate() {
            let (q, p) = (x[i], x[n + i]);
            let (vq, vp) = (v[i], v[n + i]);
            let two_i = a * q * q + p * p / a;
            di.push(a * q * vq + p * vp / a);
            dt.push((q * vp - p * vq) / two_i);
        }
        (di, dt)
    }
}

/// A completely integrable family `{H_i}` with its action-angle chart and the
/// chart ball `U_0 = { x : |H(x) - center| <= radius }`.
#[derive(Clone)]
pub struct IntegrableModel {
    name: String,
    hamiltonians: Vec<ScalarFunction>,
    diffusion_fields: Vec<SmoothField>,
    drift: SmoothField,
    chart: Arc<dyn ActionAngleChart>,
    chart_center: Vec<f64>,
    chart_radius: f64,
}

impl fmt::Debug for IntegrableModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IntegrableModel")
            .field("name", &self.name)
            .field("n", &self.n())
            .field("chart_center", &self.chart_center)
            .field("chart_radius", &self.chart_radius)
            .finish()
    }
}

impl IntegrableModel {
    pub fn new(
        name: impl Into<String>,
        hamiltonians: Vec<ScalarFunction>,
        chart: Arc<dyn ActionAngleChart>,
        reference_actions: &[f64],
    ) -> Result<Self> {
        let n = chart.n();
        if hamiltonians.len() != n || hamiltonians.iter().any(|h| h.n() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: hamiltonians.len(),
            });
        }
        let diffusion_fields = hamiltonians.iter().map(SmoothField::hamiltonian).collect();
        let mut model = Self {
            name: name.into(),
            hamiltonians,
            diffusion_fields,
            drift: SmoothField::zero(n),
            chart,
            chart_center: vec![0.0; n],
            chart_radius: 0.0,
        };
        let levels = model.chart.levels_from_actions(reference_actions);
        model.set_center(levels)?;
        Ok(model)
    }

    fn set_center(&mut self, levels: Vec<f64>) -> Result<()> {
        let d = self.chart.critical_distance(&levels);
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::NotInChart(format!(
                "levels {levels:?} lie on the critical set"
            )));
        }
        self.chart_center = levels;
        self.chart_radius = 0.5 * d;
        Ok(())
    }

    /// Recenters the chart ball on `H(y0)` with the default radius.
    pub fn centered_at(&self, y0: &PhasePoint) -> Result<Self> {
        self.check_point(y0)?;
        let aa = self.chart.to_action_angle(y0.as_slice());
        if !self.chart.actions_regular(&aa.actions) {
            return Err(Error::NotInChart(format!("actions {:?}", aa.actions)));
        }
        let mut m = self.clone();
        m.set_center(self.levels(y0.as_slice()))?;
        Ok(m)
    }

    pub fn with_chart_radius(&self, radius: f64) -> Result<Self> {
        let d = self.chart.critical_distance(&self.chart_center);
        if !(radius > 0.0 && radius < d) {
            return Err(invalid(
                "chart_radius",
                format!("must lie in (0, {d}) so the ball avoids critical values"),
            ));
        }
        let mut m = self.clone();
        m.chart_radius = radius;
        Ok(m)
    }

    /// Adds the drift `V = sum_k c_k X_{H_k}`, which commutes with the family.
    pub fn with_drift_combination(&self, coeffs: &[f64]) -> Result<Self> {
        let n = self.n();
        if coeffs.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: coeffs.len(),
            });
        }
        let fields = self.diffusion_fields.clone();
        let c = coeffs.to_vec();
        let drift = SmoothField::new("V", n, move |x, out| {
            out.fill(0.0);
            let mut tmp = vec![0.0; out.len()];
            for (f, &ck) in fields.iter().zip(&c) {
                f.eval_into(x, &mut tmp);
                for (o, t) in out.iter_mut().zip(&tmp) {
                    *o += ck * t;
                }
            }
        });
        let chart = DriftedChart {
            inner: self.chart.clone(),
            coeffs: coeffs.to_vec(),
        };
        let mut m = self.clone();
        m.drift = drift;
        m.chart = Arc::new(chart);
        Ok(m)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.chart.n()
    }

    pub fn hamiltonians(&self) -> &[ScalarFunction] {
        &self.hamiltonians
    }

    /// `X_{H_k}`, the fields driven by the Brownian motions.
    pub fn diffusion_fields(&self) -> &[SmoothField] {
        &self.diffusion_fields
    }

    pub fn drift(&self) -> &SmoothField {
        &self.drift
    }

    pub fn chart(&self) -> &dyn ActionAngleChart {
        self.chart.as_ref()
    }

    pub fn chart_center(&self) -> &[f64] {
        &self.chart_center
    }

    pub fn chart_radius(&self) -> f64 {
        self.chart_radius
    }

    pub fn levels(&self, x: &[f64]) -> Vec<f64> {
        self.hamiltonians.iter().map(|h| h.value(x)).collect()
    }

    /// `|H(x) - center|`.
    pub fn level_offset(&self, x: &[f64]) -> f64 {
        self.hamiltonians
            .iter()
            .zip(&self.chart_center)
            .map(|(h, c)| (h.value(x) - c).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_action_angle(&self, x: &PhasePoint) -> Result<ActionAngle> {
        self.check_point(x)?;
        Ok(self.chart.to_action_angle(x.as_slice()))
    }

    pub fn from_action_angle(&self, aa: &ActionAngle) -> Result<PhasePoint> {
        if aa.actions.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: aa.actions.len(),
            });
        }
        if !self.chart.actions_regular(&aa.actions) {
            return Err(Error::NotInChart(format!("actions {:?}", aa.actions)));
        }
        let mut out = vec![0.0; 2 * self.n()];
        self.chart
            .from_action_angle_into(&aa.actions, &aa.angles, &mut out);
        PhasePoint::new(out)
    }

    pub fn freq_matrix(&self, actions: &[f64]) -> Vec<f64> {
        self.chart.freq_matrix(actions)
    }

    pub fn drift_freq(&self, actions: &[f64]) -> Vec<f64> {
        self.chart.drift_freq(actions)
    }

    pub fn check_point(&self, x: &PhasePoint) -> Result<()> {
        if x.n() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: 2 * self.n(),
                got: x.as_slice().len(),
            });
        }
        Ok(())
    }

    /// Whether `x` lies in `U_0` (strictly inside the chart ball).
    pub fn in_chart(&self, x: &[f64]) -> bool {
        let aa = self.chart.to_action_angle(x);
        self.chart.actions_regular(&aa.actions) && self.level_offset(x) < self.chart_radius
    }
}

/// Wraps a chart to account for a drift `V = sum_k c_k X_{H_k}`.
struct DriftedChart {
    inner: Arc<dyn ActionAngleChart>,
    coeffs: Vec<f64>,
}

impl ActionAngleChart for DriftedChart {
    fn n(&self) -> usize {
        self.inner.n()
    }
    fn to_action_angle(&self, x: &[f64]) -> ActionAngle {
        self.inner.to_action_angle(x)
    }
    fn from_action_angle_into(&self, actions: &[f64], angles: &[f64], out: &mut [f64]) {
        self.inner.from_action_angle_into(actions, angles, out)
    }
    fn freq_matrix(&self, actions: &[f64]) -> Vec<f64> {
        self.inner.freq_matrix(actions)
    }
    fn drift_freq(&self, actions: &[f64]) -> Vec<f64> {
        // Angles decrease along X_{H_k} at rate dH_k/dI.
        let n = self.n();
        let f = self.inner.freq_matrix(actions);
        let base = self.inner.drift_freq(actions);
        (0..n)
            .map(|i| base[i] - (0..n).map(|k| self.coeffs[k] * f[k * n + i]).sum::<f64>())
            .collect()
    }
    fn levels_from_actions(&self, actions: &[f64]) -> Vec<f64> {
        self.inner.levels_from_actions(actions)
    }
    fn actions_from_levels(&self, levels: &[f64]) -> Vec<f64> {
        self.inner.actions_from_levels(levels)
    }
    fn actions_regular(&self, actions: &[f64]) -> bool {
        self.inner.actions_regular(actions)
    }
    fn critical_distance(&self, levels: &[f64]) -> f64 {
        self.inner.critical_distance(levels)
    }
    fn pushforward(&self, x: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.inner.pushforward(x, v)
    }
}

/// The perturbing field `K`, optionally generated by a Hamiltonian `k`.
#[derive(Debug, Clone)]
pub struct Perturbation {
    name: String,
    field: SmoothField,
    hamiltonian_k: Option<ScalarFunction>,
    note: Option<&'static str>,
}

impl Perturbation {
    pub fn from_field(name: impl Into<String>, field: SmoothField) -> Self {
        Self {
            name: name.into(),
            field,
            hamiltonian_k: None,
            note: None,
        }
    }

    /// `K = X_k`.
    pub fn from_hamiltonian(name: impl Into<String>, k: ScalarFunction) -> Self {
        Self {
            name: name.into(),
            field: SmoothField::hamiltonian(&k),
            hamiltonian_k: Some(k),
            note: None,
        }
    }

    pub fn none(n: usize) -> Self {
        Self::from_field("none", SmoothField::zero(n))
    }

    pub fn with_note(mut self, note: &'static str) -> Self {
        self.note = Some(note);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.field.n()
    }

    pub fn field(&self) -> &SmoothField {
        &self.field
    }

    pub fn hamiltonian_k(&self) -> Option<&ScalarFunction> {
        self.hamiltonian_k.as_ref()
    }

    pub fn note(&self) -> Option<&'static str> {
        self.note
    }

    pub fn is_zero(&self) -> bool {
        self.field.is_zero()
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        self.field.in_domain(x)
    }
}

/// Oscillator `F_i = (a q_i^2 + p_i^2 / a) / 2` on plane `i` of R^(2n).
fn plane_oscillator(name: String, n: usize, i: usize, a: f64) -> ScalarFunction {
    ScalarFunction::new(name, n, move |x| {
        0.5 * (a * x[i] * x[i] + x[n + i] * x[n + i] / a)
    })
    .with_gradient(move |x, g| {
        g.fill(0.0);
        g[i] = a * x[i];
        g[n + i] = x[n + i] / a;
    })
}

/// The harmonic family `H_1 = sum a_i^2 q_i^2 / 2 + sum p_i^2 / 2`,
/// `H_k = a_k q_k^2 / 2 + p_k^2 / (2 a_k)` for `k >= 2`.
pub fn build_harmonic_family(a: &[f64]) -> Result<IntegrableModel> {
    if a.is_empty() {
        return Err(invalid("a", "need at least one frequency"));
    }
    if let Some(bad) = a.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(invalid("a", format!("frequencies must be positive, got {bad}")));
    }
    let n = a.len();
    let coeffs = a.to_vec();
    let g = coeffs.clone();
    let h1 = ScalarFunction::new("H1", n, move |x| {
        (0..n)
            .map(|i| 0.5 * (coeffs[i] * coeffs[i] * x[i] * x[i] + x[n + i] * x[n + i]))
            .sum()
    })
    .with_gradient(move |x, out| {
        for i in 0..n {
            out[i] = g[i] * g[i] * x[i];
            out[n + i] = x[n + i];
        }
    });
    let mut hamiltonians = vec![h1];
    for (k, &ak) in a.iter().enumerate().skip(1) {
        hamiltonians.push(plane_oscillator(format!("H{}", k + 1), n, k, ak));
    }
    // Recomputed in the chart: H_1 = sum a_i I_i, H_k = I_k.
    let mut f = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        f[(0, i)] = a[i];
    }
    for k in 1..n {
        f[(k, k)] = 1.0;
    }
    let chart = PlanarChart::new(a.to_vec(), f)?;
    IntegrableModel::new("harmonic", hamiltonians, Arc::new(chart), &vec![1.0; n])
}

fn r4_plane_radius2(x: &[f64], plane: usize) -> f64 {
    // plane 0: (x1, x3); plane 1: (x2, x4)
    x[plane] * x[plane] + x[2 + plane] * x[2 + plane]
}

const SINGULAR_RADIUS2: f64 = 1e-16;

/// R^4 example with `G_1 = |x|^2 / 2`, `G_2 = (x_2^2 + x_4^2) / 2`, coordinates
/// `(x_1, x_2, x_3, x_4) = (q_1, q_2, p_1, p_2)`, and perturbations `K_1..K_3`.
pub fn build_r4_example() -> (IntegrableModel, [Perturbation; 3]) {
    let g1 = ScalarFunction::new("G1", 2, |x| 0.5 * x.iter().map(|v| v * v).sum::<f64>())
        .with_gradient(|x, g| g.copy_from_slice(x));
    let g2 = plane_oscillator("G2".into(), 2, 1, 1.0);
    let f = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
    let chart = PlanarChart::new(vec![1.0, 1.0], f).expect("constant nonsingular level map");
    let model = IntegrableModel::new("r4", vec![g1, g2], Arc::new(chart), &[2.0, 2.0])
        .expect("reference actions are regular");

    let k1 = SmoothField::new("K1", 2, |x, out| {
        out.fill(0.0);
        out[1] = x[1] / r4_plane_radius2(x, 1);
    })
    .with_domain(|x| r4_plane_radius2(x, 1) > SINGULAR_RADIUS2);
    let k2 = SmoothField::new("K2", 2, |x, out| {
        let r2 = r4_plane_radius2(x, 0);
        out.fill(0.0);
        out[0] = x[2] / (r2 * r2);
        out[2] = x[0] / (r2 * r2);
    })
    .with_domain(|x| r4_plane_radius2(x, 0) > SINGULAR_RADIUS2);
    let k3 = SmoothField::new("K3", 2, |x, out| {
        let r2 = r4_plane_radius2(x, 0);
        let r3 = r2 * r2.sqrt();
        out.fill(0.0);
        out[0] = x[2] * x[2] / r3;
        out[2] = -x[0] / r3;
    })
    .with_domain(|x| r4_plane_radius2(x, 0) > SINGULAR_RADIUS2);

    let unverified = "recorded as printed; not verified to be locally Hamiltonian";
    (
        model,
        [
            Perturbation::from_field("k1", k1),
            Perturbation::from_field("k2", k2).with_note(unverified),
            Perturbation::from_field("k3", k3).with_note(unverified),
        ],
    )
}

/// `k = q_1` on an n-degree-of-freedom model, so `K = X_{q_1} = -e_{p_1}`.
pub fn linear_q1_perturbation(n: usize) -> Perturbation {
    let k = ScalarFunction::new("q1", n, |x| x[0]).with_gradient(|_, g| {
        g.fill(0.0);
        g[0] = 1.0;
    });
    Perturbation::from_hamiltonian("q1", k)
}

/// `k = H_1^2`, which Poisson-commutes with the whole family.
pub fn energy_squared_perturbation(model: &IntegrableModel) -> Perturbation {
    let h1 = &model.hamiltonians()[0];
    Perturbation::from_hamiltonian("h1-squared", h1.product(h1))
}

/// `k = c`, so `K = 0`.
pub fn constant_perturbation(n: usize, c: f64) -> Perturbation {
    let k = ScalarFunction::new("constant", n, move |_| c).with_gradient(|_, g| g.fill(0.0));
    Perturbation::from_hamiltonian("constant", k)
}

/// One degree of freedom, `H = (q^2 + p^2) / 2`, perturbed by `k = q`.
pub fn build_1dof_case() -> (IntegrableModel, Perturbation) {
    let mut model = build_harmonic_family(&[1.0]).expect("unit frequency is valid");
    model.name = "1dof".into();
    (model, linear_q1_perturbation(1))
}

pub const MODEL_NAMES: [&str; 3] = ["harmonic", "r4", "1dof"];

pub fn model_by_name(name: &str, params: &[f64]) -> Result<IntegrableModel> {
    match name {
        "harmonic" => {
            if params.is_empty() {
                build_harmonic_family(&[1.0, 1.0])
            } else {
                build_harmonic_family(params)
            }
        }
        "r4" => Ok(build_r4_example().0),
        "1dof" => Ok(build_1dof_case().0),
        other => Err(invalid("model", format!("unknown model `{other}`"))),
    }
}

pub fn perturbation_by_name(model: &IntegrableModel, name: &str) -> Result<Perturbation> {
    let n = model.n();
    match name {
        "none" => Ok(Perturbation::none(n)),
        "q1" => Ok(linear_q1_perturbation(n)),
        "h1-squared" => Ok(energy_squared_perturbation(model)),
        "constant" => Ok(constant_perturbation(n, 1.0)),
        "k1" | "k2" | "k3" => {
            if model.name() != "r4" {
                return Err(Error::WrongModel {
                    expected: "r4",
                    got: model.name().to_string(),
                });
            }
            let [k1, k2, k3] = build_r4_example().1;
            Ok(match name {
                "k1" => k1,
                "k2" => k2,
                _ => k3,
            })
        }
        other => Err(invalid(
            "perturbation",
            format!("unknown perturbation `{other}`"),
        )),
    }
}

/// Short descriptions for `--list-models`.
pub fn model_catalog() -> Vec<(&'static str, &'static str)> {
    vec![
        (
            "harmonic",
            "harmonic family on R^(2n); params = frequencies a_i > 0 (default [1, 1]); perturbations: none, q1, h1-squared, constant",
        ),
        (
            "r4",
            "two coupled planes on R^4 driven by B and B+W; perturbations: none, k1, k2, k3, q1, h1-squared, constant",
        ),
        (
            "1dof",
            "unit oscillator H = (q^2 + p^2)/2; perturbations: none, q1 (default second-order case), constant",
        ),
    ]
}
