use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use stochavg_core::{
    model_by_name, perturbation_by_name, ActionAngle, Error, IntegrableModel, LimitReading,
    Perturbation, PhasePoint, Scheme, StepPolicy,
};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Simulate,
    Average,
    Rate,
    Exitprob,
    Limit2,
    Weak2,
    PoissonCheck,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::Simulate,
        Experiment::Average,
        Experiment::Rate,
        Experiment::Exitprob,
        Experiment::Limit2,
        Experiment::Weak2,
        Experiment::PoissonCheck,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Average => "average",
            Experiment::Rate => "rate",
            Experiment::Exitprob => "exitprob",
            Experiment::Limit2 => "limit2",
            Experiment::Weak2 => "weak2",
            Experiment::PoissonCheck => "poisson-check",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment `{s}`"))
    }
}

/// One experiment run, read from a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: Option<Experiment>,
    pub model: String,
    pub model_params: Vec<f64>,
    /// Coefficients `c_k` of a drift `V = sum c_k X_{H_k}`.
    pub drift: Option<Vec<f64>>,
    pub perturbation: String,
    /// Initial point `(q, p)`; alternatively `actions0` with `angles0`.
    pub y0: Option<Vec<f64>>,
    pub actions0: Option<Vec<f64>>,
    pub angles0: Option<Vec<f64>>,
    pub epsilons: Vec<f64>,
    /// Horizon: fast time for `simulate`, slow time otherwise.
    pub t: f64,
    /// Step rule for the perturbed system; experiment default when absent.
    pub dt: Option<StepPolicy>,
    pub scheme: Scheme,
    pub record_stride: usize,
    /// Paths of `simulate` whose trajectories are written out.
    pub trajectory_paths: usize,
    pub beta: f64,
    pub n_paths: usize,
    pub torus_nodes: usize,
    pub ode_dt: f64,
    /// Chart ball radius; half the distance to the critical set when absent.
    pub radius: Option<f64>,
    /// Defaults to a quarter of the radius.
    pub delta: Option<f64>,
    pub level_nodes: usize,
    pub level_margin: f64,
    pub limit_dt: f64,
    pub reading: LimitReading,
    /// Action point for `poisson-check`.
    pub poisson_actions: Option<Vec<f64>>,
    /// Random right-hand sides tried by `poisson-check`.
    pub trials: usize,
    pub seed: u64,
    pub workers: usize,
    pub out: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            model: "r4".into(),
            model_params: Vec::new(),
            drift: None,
            perturbation: "none".into(),
            y0: None,
            actions0: None,
            angles0: None,
            epsilons: vec![0.1],
            t: 1.0,
            dt: None,
            scheme: Scheme::default(),
            record_stride: 1,
            trajectory_paths: 1,
            beta: 2.0,
            n_paths: 200,
            torus_nodes: 64,
            ode_dt: 1e-3,
            radius: None,
            delta: None,
            level_nodes: 17,
            level_margin: 1.25,
            limit_dt: 1e-3,
            reading: LimitReading::default(),
            poisson_actions: None,
            trials: 20,
            seed: 0,
            workers: 1,
            out: "out".into(),
        }
    }
}

fn bad(name: &'static str, reason: impl Into<String>) -> HarnessError {
    HarnessError::Core(Error::InvalidParameter {
        name,
        reason: reason.into(),
    })
}

/// Model, perturbation and initial point resolved from a config.
pub struct Setup {
    pub model: IntegrableModel,
    pub pert: Perturbation,
    pub y0: PhasePoint,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn experiment(&self) -> Result<Experiment, HarnessError> {
        self.experiment
            .ok_or_else(|| bad("experiment", "no experiment given"))
    }

    /// Step rule for the perturbed system.
    pub fn step_policy(&self) -> StepPolicy {
        self.dt.unwrap_or(match self.experiment {
            Some(Experiment::Rate) | Some(Experiment::Exitprob) => StepPolicy::default(),
            Some(Experiment::Weak2) => StepPolicy::fixed(1e-2),
            _ => StepPolicy::fixed(1e-3),
        })
    }

    /// Builds the model (recentered on `y0`), perturbation and `y0`.
    pub fn setup(&self) -> Result<Setup, HarnessError> {
        let mut model = model_by_name(&self.model, &self.model_params)?;
        if let Some(c) = &self.drift {
            model = model.with_drift_combination(c)?;
        }
        let pert = perturbation_by_name(&model, &self.perturbation)?;
        let y0 = if let Some(y) = &self.y0 {
            if self.actions0.is_some() || self.angles0.is_some() {
                return Err(bad("y0", "give either y0 or actions0/angles0, not both"));
            }
            PhasePoint::new(y.clone())?
        } else {
            let actions = self
                .actions0
                .clone()
                .unwrap_or_else(|| model.chart().actions_from_levels(model.chart_center()));
            let angles = self.angles0.clone().unwrap_or_else(|| vec![0.0; actions.len()]);
            model.from_action_angle(&ActionAngle::new(actions, angles)?)?
        };
        model.check_point(&y0)?;
        let mut model = model.centered_at(&y0)?;
        if let Some(r) = self.radius {
            model = model.with_chart_radius(r)?;
        }
        if !model.in_chart(y0.as_slice()) {
            return Err(bad("y0", "must lie inside the chart"));
        }
        Ok(Setup { model, pert, y0 })
    }

    /// Field-level checks run before any work starts.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let exp = self.experiment()?;
        let mc = matches!(
            exp,
            Experiment::Simulate | Experiment::Rate | Experiment::Exitprob | Experiment::Weak2
        );
        if mc && self.n_paths == 0 {
            return Err(bad("n_paths", "must be positive"));
        }
        if exp == Experiment::Rate && self.n_paths < 2 {
            return Err(bad("n_paths", "need at least two paths"));
        }
        if self.workers == 0 {
            return Err(bad("workers", "must be positive"));
        }
        if self.record_stride == 0 {
            return Err(bad("record_stride", "must be positive"));
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(bad("t", "must be positive and finite"));
        }
        if !self.torus_nodes.is_power_of_two() || self.torus_nodes < 4 {
            return Err(bad("torus_nodes", "must be a power of two >= 4"));
        }
        if self.level_nodes < 2 {
            return Err(bad("level_nodes", "must be at least 2"));
        }
        if !(self.level_margin >= 1.0 && self.level_margin.is_finite()) {
            return Err(bad("level_margin", "must be at least 1"));
        }
        for (name, v) in [("ode_dt", self.ode_dt), ("limit_dt", self.limit_dt)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(name, "must be positive and finite"));
            }
        }
        if !(self.beta > 1.0 && self.beta.is_finite()) {
            return Err(bad("beta", "must exceed 1"));
        }
        if let Some(p) = self.dt {
            if !(p.target(self.epsilons.first().copied().unwrap_or(1.0)) > 0.0) {
                return Err(bad("dt", "step rule must give a positive step"));
            }
        }
        let needs_eps = !matches!(exp, Experiment::Average | Experiment::Limit2 | Experiment::PoissonCheck);
        if needs_eps {
            if self.epsilons.is_empty() {
                return Err(bad("epsilons", "must not be empty"));
            }
            if self.epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
                return Err(bad("epsilons", "must be finite and non-negative"));
            }
            if exp != Experiment::Simulate && self.epsilons.iter().any(|e| *e == 0.0) {
                return Err(bad("epsilons", "must be positive"));
            }
            if exp != Experiment::Simulate && self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
                return Err(bad("epsilons", "must be strictly decreasing"));
            }
        }
        if let (Some(d), Some(r)) = (self.delta, self.radius) {
            if !(d > 0.0 && d < r) {
                return Err(bad("delta", "must lie in (0, radius)"));
            }
        }
        self.setup().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_lossless() {
        let cfg = ExperimentConfig {
            experiment: Some(Experiment::PoissonCheck),
            epsilons: vec![0.1, 0.05, 1.0 / 3.0],
            dt: Some(StepPolicy::fixed(1e-3)),
            y0: Some(vec![2.0, 2.0, 0.0, 0.1]),
            ..Default::default()
        };
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"epsilon": 0.1}"#),
            Err(HarnessError::Config(_))
        ));
    }

    #[test]
    fn validation_messages_name_the_field() {
        let cfg = ExperimentConfig {
            experiment: Some(Experiment::Rate),
            n_paths: 0,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("n_paths"), "{err}");
        let cfg = ExperimentConfig {
            experiment: Some(Experiment::Rate),
            epsilons: vec![0.05, 0.1],
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("epsilons"));
    }

    #[test]
    fn default_initial_point_is_the_reference_fiber() {
        let cfg = ExperimentConfig {
            experiment: Some(Experiment::Simulate),
            ..Default::default()
        };
        let s = cfg.setup().unwrap();
        assert_eq!(s.model.levels(s.y0.as_slice()), vec![4.0, 2.0]);
    }

    #[test]
    fn experiment_names_parse() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("bogus".parse::<Experiment>().is_err());
    }
}
