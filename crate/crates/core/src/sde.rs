//! Stratonovich integration of the unperturbed and perturbed systems
//!
//! ```text
//! dy = sum_k X_{H_k}(y) o dB^k + V(y) dt + eps K(y) dt
//! ```
//!
//! Two derivative-free Stratonovich schemes are provided. [`Scheme::Heun`]
//! is the explicit predictor-corrector. [`Scheme::Midpoint`] is the implicit
//! midpoint rule, solved by fixed-point iteration; it conserves every
//! quadratic first integral of the driving fields exactly, which is what the
//! shipped systems need over long horizons.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{IntegrableModel, Perturbation};
use crate::noise::NoisePath;
use crate::symplectic::PhasePoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Heun,
    #[default]
    Midpoint,
}

const MIDPOINT_MAX_ITER: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationParams {
    pub epsilon: f64,
    pub horizon: f64,
    /// Record every `record_stride`-th step (the final or exit step is always recorded).
    pub record_stride: usize,
    pub scheme: Scheme,
    /// Stop at the first step where `|H(y) - H(y_0)| >= r`.
    pub stop_at_exit: bool,
}

impl SimulationParams {
    pub fn new(epsilon: f64, horizon: f64) -> Self {
        Self {
            epsilon,
            horizon,
            record_stride: 1,
            scheme: Scheme::default(),
            stop_at_exit: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }

    pub fn scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn no_exit(mut self) -> Self {
        self.stop_at_exit = false;
        self
    }
}

/// Number of whole steps of size `dt` in `horizon`.
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon", "must be finite and non-negative"));
    }
    let n = (horizon / dt).round();
    if (n * dt - horizon).abs() > 1e-9 * horizon.max(dt) {
        return Err(invalid(
            "horizon",
            format!("{horizon} is not a multiple of dt = {dt}"),
        ));
    }
    Ok(n as usize)
}

/// Sampled path of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub energies: Vec<Vec<f64>>,
    /// First time `|H(y_t) - H(y_0)| >= r`; `None` when the path never exits.
    pub exit_time: Option<f64>,
    pub epsilon: f64,
}

impl TrajectoryRecord {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("record holds the initial state")
    }

    pub fn final_energies(&self) -> &[f64] {
        self.energies.last().expect("record holds the initial state")
    }

    pub fn exited(&self) -> bool {
        self.exit_time.is_some()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

struct Workspace {
    incr: Vec<f64>,
    field: Vec<f64>,
    f0: Vec<f64>,
    f1: Vec<f64>,
    stage: Vec<f64>,
    next: Vec<f64>,
}

struct System<'a> {
    model: &'a IntegrableModel,
    pert: &'a Perturbation,
    epsilon: f64,
    use_drift: bool,
    use_pert: bool,
}

impl System<'_> {
    /// `out = sum_k X_k(y) dB_k + (V(y) + eps K(y)) dt`.
    #[inline]
    fn increment(&self, y: &[f64], db: &[f64], dt: f64, tmp: &mut [f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        for (field, &dbk) in self.model.diffusion_fields().iter().zip(db) {
            if dbk == 0.0 {
                continue;
            }
            field.eval_into(y, tmp);
            for (o, t) in out.iter_mut().zip(tmp.iter()) {
                *o += t * dbk;
            }
        }
        if self.use_drift {
            self.model.drift().eval_into(y, tmp);
            for (o, t) in out.iter_mut().zip(tmp.iter()) {
                *o += t * dt;
            }
        }
        if self.use_pert {
            if !self.pert.in_domain(y) {
                return Err(Error::OutsideDomain(self.pert.name().to_string()));
            }
            self.pert.field().eval_into(y, tmp);
            let c = self.epsilon * dt;
            for (o, t) in out.iter_mut().zip(tmp.iter()) {
                *o += t * c;
            }
        }
        Ok(())
    }

    fn step(&self, scheme: Scheme, y: &mut [f64], dt: f64, ws: &mut Workspace) -> Result<()> {
        let Workspace {
            incr,
            field,
            f0,
            f1,
            stage,
            next,
        } = ws;
        self.increment(y, incr, dt, field, f0)?;
        for i in 0..y.len() {
            stage[i] = y[i] + f0[i];
        }
        match scheme {
            Scheme::Heun => {
                self.increment(stage, incr, dt, field, f1)?;
                for i in 0..y.len() {
                    y[i] += 0.5 * (f0[i] + f1[i]);
                }
            }
            Scheme::Midpoint => {
                // next holds the current guess for y_{n+1}; stage the midpoint.
                next.copy_from_slice(stage);
                let scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                let tol = 4.0 * f64::EPSILON * scale;
                let mut converged = false;
                for _ in 0..MIDPOINT_MAX_ITER {
                    for i in 0..y.len() {
                        stage[i] = 0.5 * (y[i] + next[i]);
                    }
                    self.increment(stage, incr, dt, field, f1)?;
                    let mut change = 0.0f64;
                    for i in 0..y.len() {
                        let v = y[i] + f1[i];
                        change = change.max((v - next[i]).abs());
                        next[i] = v;
                    }
                    if change <= tol {
                        converged = true;
                        break;
                    }
                }
                if !converged {
                    return Err(Error::NonConvergence(MIDPOINT_MAX_ITER));
                }
                y.copy_from_slice(next);
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state"));
        }
        Ok(())
    }
}

/// Integrates the perturbed system from `y0` driven by `noise` up to
/// `params.horizon`, stopping at the first exit from the chart ball.
pub fn integrate(
    model: &IntegrableModel,
    pert: &Perturbation,
    params: &SimulationParams,
    y0: &PhasePoint,
    noise: &NoisePath,
) -> Result<TrajectoryRecord> {
    if params.record_stride == 0 {
        return Err(invalid("record_stride", "must be positive"));
    }
    let dt = noise.dt();
    let n_steps = step_count(params.horizon, dt)?;
    let capacity = n_steps / params.record_stride + 2;
    let mut record = TrajectoryRecord {
        times: Vec::with_capacity(capacity),
        states: Vec::with_capacity(capacity),
        energies: Vec::with_capacity(capacity),
        exit_time: None,
        epsilon: params.epsilon,
    };
    let push = |record: &mut TrajectoryRecord, t: f64, y: &[f64]| {
        record.times.push(t);
        record.states.push(y.to_vec());
        record.energies.push(model.levels(y));
    };
    push(&mut record, 0.0, y0.as_slice());
    let stride = params.record_stride;
    record.exit_time = integrate_observed(model, pert, params, y0, noise, |step, t, y, last| {
        if last || step % stride == 0 {
            push(&mut record, t, y);
        }
    })?;
    Ok(record)
}

/// Like [`integrate`] but hands every state to `observe(step, t, y, last)`
/// instead of recording it; `last` marks the final or exit step. Returns the
/// exit time.
pub fn integrate_observed(
    model: &IntegrableModel,
    pert: &Perturbation,
    params: &SimulationParams,
    y0: &PhasePoint,
    noise: &NoisePath,
    mut observe: impl FnMut(usize, f64, &[f64], bool),
) -> Result<Option<f64>> {
    model.check_point(y0)?;
    let n = model.n();
    if pert.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: pert.n(),
        });
    }
    if noise.n_streams() != n {
        return Err(invalid(
            "noise",
            format!("need {n} Brownian streams, got {}", noise.n_streams()),
        ));
    }
    if !(params.epsilon >= 0.0 && params.epsilon.is_finite()) {
        return Err(invalid("epsilon", "must be finite and non-negative"));
    }
    let dt = noise.dt();
    let n_steps = step_count(params.horizon, dt)?;
    if noise.n_steps() < n_steps {
        return Err(invalid(
            "noise",
            format!("path has {} steps, horizon needs {n_steps}", noise.n_steps()),
        ));
    }
    let use_pert = params.epsilon > 0.0 && !pert.is_zero();
    if use_pert && !pert.in_domain(y0.as_slice()) {
        return Err(Error::OutsideDomain(pert.name().to_string()));
    }
    let system = System {
        model,
        pert,
        epsilon: params.epsilon,
        use_drift: !model.drift().is_zero(),
        use_pert,
    };

    let dim = 2 * n;
    let mut ws = Workspace {
        incr: vec![0.0; n],
        field: vec![0.0; dim],
        f0: vec![0.0; dim],
        f1: vec![0.0; dim],
        stage: vec![0.0; dim],
        next: vec![0.0; dim],
    };
    let mut y = y0.as_slice().to_vec();
    let center = model.levels(y0.as_slice());
    let r2 = model.chart_radius().powi(2);
    let mut cursor = noise.cursor();
    for step in 1..=n_steps {
        cursor.next_into(&mut ws.incr);
        system.step(params.scheme, &mut y, dt, &mut ws)?;
        let t = step as f64 * dt;
        let exited = params.stop_at_exit
            && model
                .hamiltonians()
                .iter()
                .zip(&center)
                .map(|(h, c)| (h.value(&y) - c).powi(2))
                .sum::<f64>()
                >= r2;
        if exited {
            observe(step, t, &y, true);
            return Ok(Some(t));
        }
        observe(step, t, &y, step == n_steps);
    }
    Ok(None)
}

/// Perturbed (`y^eps`) and unperturbed (`x`) trajectories driven by the same
/// Brownian path.
pub fn integrate_coupled(
    model: &IntegrableModel,
    pert: &Perturbation,
    params: &SimulationParams,
    y0: &PhasePoint,
    noise: &NoisePath,
) -> Result<(TrajectoryRecord, TrajectoryRecord)> {
    let perturbed = integrate(model, pert, params, y0, noise)?;
    let base = SimulationParams {
        epsilon: 0.0,
        ..*params
    };
    let unperturbed = integrate(model, pert, &base, y0, noise)?;
    Ok((perturbed, unperturbed))
}

/// `sup_s |f(y_s) - f(x_s)|` over the common recorded samples, with `f`
/// given on the recorded energies.
pub fn sup_deviation(
    a: &TrajectoryRecord,
    b: &TrajectoryRecord,
    f: impl Fn(&[f64], &[f64]) -> f64,
) -> f64 {
    a.energies
        .iter()
        .zip(&b.energies)
        .map(|(ea, eb)| f(ea, eb))
        .fold(0.0, f64::max)
}

/// Closed-form solution of the unperturbed R^4 example: the plane `(x_1, x_3)`
/// turns by `-B_t` and the plane `(x_2, x_4)` by `-(B_t + W_t)`.
pub fn exact_rotation_sample(
    model: &IntegrableModel,
    y0: &PhasePoint,
    t: f64,
    noise: &NoisePath,
) -> Result<PhasePoint> {
    if model.name() != "r4" {
        return Err(Error::WrongModel {
            expected: "r4",
            got: model.name().to_string(),
        });
    }
    model.check_point(y0)?;
    let n_steps = step_count(t, noise.dt())?;
    if noise.n_steps() < n_steps {
        return Err(invalid("noise", "path shorter than requested time"));
    }
    let w = noise.with_steps(n_steps).endpoint();
    let x = y0.as_slice();
    let rotate = |re: f64, im: f64, phi: f64| {
        let (s, c) = phi.sin_cos();
        (c * re - s * im, s * re + c * im)
    };
    let (x1, x3) = rotate(x[0], x[2], -w[0]);
    let (x2, x4) = rotate(x[1], x[3], -(w[0] + w[1]));
    PhasePoint::new(vec![x1, x2, x3, x4])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_1dof_case, build_r4_example, ActionAngle};
    use crate::noise::SeedDescriptor;

    fn y(v: &[f64]) -> PhasePoint {
        PhasePoint::new(v.to_vec()).unwrap()
    }

    #[test]
    fn silent_noise_without_perturbation_is_constant() {
        let (m, [k1, ..]) = build_r4_example();
        let y0 = y(&[2.0, 2.0, 0.0, 0.0]);
        let noise = NoisePath::zero(2, 1e-2, 100).unwrap();
        for scheme in [Scheme::Heun, Scheme::Midpoint] {
            let rec = integrate(&m, &k1, &SimulationParams::new(0.0, 1.0).scheme(scheme), &y0, &noise).unwrap();
            assert_eq!(rec.len(), 101);
            assert!(rec.states.iter().all(|s| s == y0.as_slice()));
        }
    }

    #[test]
    fn quarter_turn_oracle() {
        // B = pi/2, W = 0 carries (1, 0, 0, 0) to (0, 0, -1, 0).
        let (m, _) = build_r4_example();
        let noise = NoisePath::recorded(2, 1.0, vec![std::f64::consts::FRAC_PI_2, 0.0]).unwrap();
        let out = exact_rotation_sample(&m, &y(&[1.0, 0.0, 0.0, 0.0]), 1.0, &noise).unwrap();
        let expect = [0.0, 0.0, -1.0, 0.0];
        for (a, b) in out.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_sample_preserves_radii_and_starts_at_y0() {
        let (m, _) = build_r4_example();
        let y0 = y(&[0.3, -1.2, 0.8, 0.5]);
        let noise = NoisePath::new(SeedDescriptor::new(1, 2), 2, 1e-2, 300).unwrap();
        assert_eq!(exact_rotation_sample(&m, &y0, 0.0, &noise).unwrap(), y0);
        let out = exact_rotation_sample(&m, &y0, 3.0, &noise).unwrap();
        let (a, b) = (out.as_slice(), y0.as_slice());
        assert!(((a[0] * a[0] + a[2] * a[2]) - (b[0] * b[0] + b[2] * b[2])).abs() < 1e-14);
        assert!(((a[1] * a[1] + a[3] * a[3]) - (b[1] * b[1] + b[3] * b[3])).abs() < 1e-14);
        let (one, _) = build_1dof_case();
        assert!(matches!(
            exact_rotation_sample(&one, &y(&[1.0, 0.0]), 1.0, &noise),
            Err(Error::WrongModel { .. })
        ));
    }

    #[test]
    fn heun_tracks_rotation_oracle() {
        let (m, _) = build_r4_example();
        let y0 = y(&[2.0, 1.0, 0.0, 1.0]);
        let noise = NoisePath::new(SeedDescriptor::new(9, 0), 2, 1e-3, 1000).unwrap();
        let exact = exact_rotation_sample(&m, &y0, 1.0, &noise).unwrap();
        for scheme in [Scheme::Heun, Scheme::Midpoint] {
            let rec = integrate(&m, &Perturbation::none(2), &SimulationParams::new(0.0, 1.0).scheme(scheme).stride(1000), &y0, &noise).unwrap();
            let err = rec
                .final_state()
                .iter()
                .zip(exact.as_slice())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err < 1e-2, "{scheme:?}: {err}");
        }
    }

    #[test]
    fn midpoint_conserves_quadratic_energies_exactly() {
        let (m, _) = build_r4_example();
        let y0 = y(&[2.0, 2.0, 0.0, 0.0]);
        let noise = NoisePath::new(SeedDescriptor::new(4, 1), 2, 1e-2, 1000).unwrap();
        let rec = integrate(&m, &Perturbation::none(2), &SimulationParams::new(0.0, 10.0).stride(10), &y0, &noise).unwrap();
        for e in &rec.energies {
            assert!((e[0] - 4.0).abs() < 1e-12 && (e[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn action_increment_is_eps_times_action_component() {
        // Over one step, the change in I equals eps K_I dt at the midpoint.
        let (m, [k1, ..]) = build_r4_example();
        let y0 = y(&[2.0, 1.5, 0.3, 0.7]);
        let dt = 1e-3;
        let noise = NoisePath::new(SeedDescriptor::new(2, 2), 2, dt, 1).unwrap();
        let eps = 0.1;
        let rec = integrate(&m, &k1, &SimulationParams::new(eps, dt), &y0, &noise).unwrap();
        let y1 = rec.final_state();
        let mid: Vec<f64> = y0.as_slice().iter().zip(y1).map(|(a, b)| 0.5 * (a + b)).collect();
        let mut kv = [0.0; 4];
        k1.field().eval_into(&mid, &mut kv);
        let (ki, _) = m.chart().pushforward(&mid, &kv);
        let a0 = m.chart().to_action_angle(y0.as_slice()).actions;
        let a1 = m.chart().to_action_angle(y1).actions;
        for i in 0..2 {
            assert!(((a1[i] - a0[i]) - eps * ki[i] * dt).abs() < 1e-14);
        }
    }

    #[test]
    fn exit_stops_the_record() {
        let (m, [k1, ..]) = build_r4_example();
        let m = m.with_chart_radius(0.05).unwrap();
        let y0 = y(&[2.0, 2.0, 0.0, 0.0]);
        let noise = NoisePath::new(SeedDescriptor::new(3, 3), 2, 1e-2, 2000).unwrap();
        let rec = integrate(&m, &k1, &SimulationParams::new(0.5, 20.0).stride(7), &y0, &noise).unwrap();
        let t = rec.exit_time.expect("K1 pushes the energies out of a small ball");
        assert_eq!(*rec.times.last().unwrap(), t);
        let offset = |e: &[f64]| ((e[0] - 4.0).powi(2) + (e[1] - 2.0).powi(2)).sqrt();
        let (last, before) = rec.energies.split_last().unwrap();
        assert!(offset(last) >= 0.05);
        assert!(before.iter().all(|e| offset(e) < 0.05));
    }

    #[test]
    fn singularity_is_reported() {
        let (m, [k1, ..]) = build_r4_example();
        let noise = NoisePath::zero(2, 1e-2, 10).unwrap();
        let err = integrate(&m, &k1, &SimulationParams::new(0.1, 0.1), &y(&[1.0, 0.0, 0.0, 0.0]), &noise).unwrap_err();
        assert!(matches!(err, Error::OutsideDomain(_)));
    }

    #[test]
    fn parameter_validation() {
        let (m, k) = build_1dof_case();
        let y0 = y(&[1.0, 0.0]);
        let noise = NoisePath::zero(1, 0.1, 10).unwrap();
        assert!(integrate(&m, &k, &SimulationParams::new(0.1, 0.25), &y0, &noise).is_err());
        assert!(integrate(&m, &k, &SimulationParams::new(0.1, 2.0), &y0, &noise).is_err());
        assert!(integrate(&m, &k, &SimulationParams::new(-1.0, 1.0), &y0, &noise).is_err());
        assert!(integrate(&m, &k, &SimulationParams::new(0.1, 1.0).stride(0), &y0, &noise).is_err());
        let wrong = NoisePath::zero(2, 0.1, 10).unwrap();
        assert!(integrate(&m, &k, &SimulationParams::new(0.1, 1.0), &y0, &wrong).is_err());
    }

    #[test]
    fn same_seed_same_record() {
        let (m, [k1, ..]) = build_r4_example();
        let y0 = m
            .from_action_angle(&ActionAngle::new(vec![2.0, 2.0], vec![0.4, 1.1]).unwrap())
            .unwrap();
        let make = || NoisePath::new(SeedDescriptor::new(77, 5), 2, 1e-3, 2000).unwrap();
        let p = SimulationParams::new(0.1, 2.0).stride(50);
        let a = integrate(&m, &k1, &p, &y0, &make()).unwrap();
        let b = integrate(&m, &k1, &p, &y0, &make()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn coupled_with_zero_epsilon_is_identical() {
        let (m, [k1, ..]) = build_r4_example();
        let y0 = y(&[2.0, 2.0, 0.0, 0.0]);
        let noise = NoisePath::new(SeedDescriptor::new(8, 0), 2, 1e-3, 1000).unwrap();
        let (a, b) = integrate_coupled(&m, &k1, &SimulationParams::new(0.0, 1.0).stride(10), &y0, &noise).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(sup_deviation(&a, &b, |x, y| (x[0] - y[0]).abs()), 0.0);
    }

    #[test]
    fn energies_recomputable_from_states() {
        let (m, [k1, ..]) = build_r4_example();
        let y0 = y(&[2.0, 2.0, 0.0, 0.0]);
        let noise = NoisePath::new(SeedDescriptor::new(8, 1), 2, 1e-3, 1000).unwrap();
        let rec = integrate(&m, &k1, &SimulationParams::new(0.2, 1.0).stride(10).scheme(Scheme::Heun), &y0, &noise).unwrap();
        for (s, e) in rec.states.iter().zip(&rec.energies) {
            let again = m.levels(s);
            for (a, b) in again.iter().zip(e) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
