//! Canonical symplectic operations on R^(2n).
//!
//! Coordinates are always ordered `(q_1..q_n, p_1..p_n)` and the symplectic
//! form is `omega = sum_i dq_i ^ dp_i`, so the Hamiltonian vector field of
//! `H` is `X_H = (dH/dp, -dH/dq)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type DomainFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// A state in canonical coordinates, `(q, p)` concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    coords: Vec<f64>,
}

impl PhasePoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 2 || coords.len() % 2 != 0 {
            return Err(invalid(
                "coords",
                format!("length must be 2n with n >= 1, got {}", coords.len()),
            ));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("phase point"));
        }
        Ok(Self { coords })
    }

    pub fn from_qp(q: &[f64], p: &[f64]) -> Result<Self> {
        if q.len() != p.len() {
            return Err(Error::DimensionMismatch {
                expected: q.len(),
                got: p.len(),
            });
        }
        Self::new(q.iter().chain(p).copied().collect())
    }

    /// Degrees of freedom.
    pub fn n(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn q(&self) -> &[f64] {
        &self.coords[..self.n()]
    }

    pub fn p(&self) -> &[f64] {
        &self.coords[self.n()..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coords
    }
}

impl AsRef<[f64]> for PhasePoint {
    fn as_ref(&self) -> &[f64] {
        &self.coords
    }
}

/// Central-difference step for coordinate value `x`: `eps^(1/3) * max(1, |x|)`.
pub fn default_fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// A scalar observable or Hamiltonian on R^(2n).
#[derive(Clone)]
pub struct ScalarFunction {
    name: String,
    n: usize,
    value: ScalarFn,
    gradient: Option<VectorFn>,
    fd_step: Option<f64>,
}

impl fmt::Debug for ScalarFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarFunction")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("closed_form_gradient", &self.gradient.is_some())
            .finish()
    }
}

impl ScalarFunction {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            n,
            value: Arc::new(value),
            gradient: None,
            fd_step: None,
        }
    }

    pub fn with_gradient(
        mut self,
        gradient: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    /// Fixes the central-difference step instead of the scaled default.
    pub fn with_fd_step(mut self, h: f64) -> Self {
        self.fd_step = Some(h);
        self
    }

    /// Drops the closed-form gradient so derivatives fall back to differences.
    pub fn without_gradient(mut self) -> Self {
        self.gradient = None;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has_closed_form_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    /// Unchecked evaluation on a raw coordinate slice.
    #[inline]
    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn eval(&self, x: &PhasePoint) -> Result<f64> {
        self.check_dim(x.as_slice())?;
        let v = self.value(x.as_slice());
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("scalar function value"))
        }
    }

    /// Gradient into `out` (length 2n), closed form when available.
    #[inline]
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.gradient {
            Some(g) => g(x, out),
            None => self.fd_gradient_into(x, out),
        }
    }

    pub fn fd_gradient_into(&self, x: &[f64], out: &mut [f64]) {
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            let h = self.fd_step.unwrap_or_else(|| default_fd_step(x[i]));
            probe[i] = x[i] + h;
            let up = self.value(&probe);
            probe[i] = x[i] - h;
            let down = self.value(&probe);
            probe[i] = x[i];
            out[i] = (up - down) / (2.0 * h);
        }
    }

    pub fn gradient(&self, x: &PhasePoint) -> Result<Vec<f64>> {
        self.check_dim(x.as_slice())?;
        let mut out = vec![0.0; x.as_slice().len()];
        self.gradient_into(x.as_slice(), &mut out);
        if out.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        Ok(out)
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != 2 * self.n {
            return Err(Error::DimensionMismatch {
                expected: 2 * self.n,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Pointwise product `self * other`.
    pub fn product(&self, other: &ScalarFunction) -> ScalarFunction {
        let (f, g) = (self.clone(), other.clone());
        let (f2, g2) = (self.clone(), other.clone());
        let dim = 2 * self.n;
        ScalarFunction::new(
            format!("{}*{}", self.name, other.name),
            self.n,
            move |x| f.value(x) * g.value(x),
        )
        .with_gradient(move |x, out| {
            let mut gf = vec![0.0; dim];
            let mut gg = vec![0.0; dim];
            f2.gradient_into(x, &mut gf);
            g2.gradient_into(x, &mut gg);
            let (fv, gv) = (f2.value(x), g2.value(x));
            for i in 0..dim {
                out[i] = gf[i] * gv + fv * gg[i];
            }
        })
    }
}

/// A vector field on (an open subset of) R^(2n).
#[derive(Clone)]
pub struct SmoothField {
    name: String,
    n: usize,
    eval: VectorFn,
    jacobian: Option<VectorFn>,
    domain: Option<DomainFn>,
    fd_step: Option<f64>,
    zero: bool,
}

impl fmt::Debug for SmoothField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothField")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("restricted_domain", &self.domain.is_some())
            .finish()
    }
}

impl SmoothField {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        eval: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            n,
            eval: Arc::new(eval),
            jacobian: None,
            domain: None,
            fd_step: None,
            zero: false,
        }
    }

    pub fn zero(n: usize) -> Self {
        let mut field = Self::new("zero", n, |_, out| out.fill(0.0));
        field.zero = true;
        field
    }

    /// The Hamiltonian vector field `X_H = J grad H`.
    pub fn hamiltonian(h: &ScalarFunction) -> Self {
        let h = h.clone();
        let n = h.n();
        let dim = 2 * n;
        Self::new(format!("X[{}]", h.name()), n, move |x, out| {
            let mut grad = [0.0; 16];
            let mut heap;
            let grad: &mut [f64] = if dim <= 16 {
                &mut grad[..dim]
            } else {
                heap = vec![0.0; dim];
                &mut heap
            };
            h.gradient_into(x, grad);
            for i in 0..n {
                out[i] = grad[n + i];
                out[n + i] = -grad[i];
            }
        })
    }

    /// Row-major `2n x 2n` Jacobian `dK_i/dx_j`.
    pub fn with_jacobian(
        mut self,
        jacobian: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(jacobian));
        self
    }

    pub fn with_domain(mut self, domain: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        self.domain = Some(Arc::new(domain));
        self
    }

    pub fn with_fd_step(mut self, h: f64) -> Self {
        self.fd_step = Some(h);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        self.domain.as_ref().is_none_or(|d| d(x))
    }

    /// Unchecked evaluation; callers must have verified the domain.
    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.eval)(x, out)
    }

    /// Evaluation with domain and finiteness checks.
    pub fn try_eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != 2 * self.n || out.len() != 2 * self.n {
            return Err(Error::DimensionMismatch {
                expected: 2 * self.n,
                got: x.len(),
            });
        }
        if !self.in_domain(x) {
            return Err(Error::OutsideDomain(self.name.clone()));
        }
        self.eval_into(x, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector field"));
        }
        Ok(())
    }

    pub fn eval(&self, x: &PhasePoint) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.as_slice().len()];
        self.try_eval_into(x.as_slice(), &mut out)?;
        Ok(out)
    }

    pub fn has_closed_form_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    pub fn jacobian_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.jacobian {
            Some(j) => j(x, out),
            None => self.fd_jacobian_into(x, out),
        }
    }

    pub fn fd_jacobian_into(&self, x: &[f64], out: &mut [f64]) {
        let dim = x.len();
        let mut probe = x.to_vec();
        let mut up = vec![0.0; dim];
        let mut down = vec![0.0; dim];
        for j in 0..dim {
            let h = self.fd_step.unwrap_or_else(|| default_fd_step(x[j]));
            probe[j] = x[j] + h;
            self.eval_into(&probe, &mut up);
            probe[j] = x[j] - h;
            self.eval_into(&probe, &mut down);
            probe[j] = x[j];
            for i in 0..dim {
                out[i * dim + j] = (up[i] - down[i]) / (2.0 * h);
            }
        }
    }
}

/// `omega(u, v) = sum_i (u_q_i v_p_i - u_p_i v_q_i)`.
pub fn omega(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len() / 2;
    (0..n).map(|i| u[i] * v[n + i] - u[n + i] * v[i]).sum()
}

fn check_same_n(a: usize, b: usize) -> Result<()> {
    if a != b {
        Err(Error::DimensionMismatch {
            expected: 2 * a,
            got: 2 * b,
        })
    } else {
        Ok(())
    }
}

/// `X_H(x) = (dH/dp, -dH/dq)`.
pub fn symplectic_gradient(h: &ScalarFunction, x: &PhasePoint) -> Result<Vec<f64>> {
    let grad = h.gradient(x)?;
    let n = h.n();
    let mut out = vec![0.0; 2 * n];
    for i in 0..n {
        out[i] = grad[n + i];
        out[n + i] = -grad[i];
    }
    Ok(out)
}

/// `{F, G} = sum_i (dF/dp_i dG/dq_i - dF/dq_i dG/dp_i)`.
pub fn poisson_bracket(f: &ScalarFunction, g: &ScalarFunction, x: &PhasePoint) -> Result<f64> {
    check_same_n(f.n(), g.n())?;
    let gf = f.gradient(x)?;
    let gg = g.gradient(x)?;
    let n = f.n();
    Ok((0..n)
        .map(|i| gf[n + i] * gg[i] - gf[i] * gg[n + i])
        .sum())
}

/// `omega(X_H, K)(x) = dH(x)(K(x))`.
pub fn omega_pairing(h: &ScalarFunction, k: &SmoothField, x: &PhasePoint) -> Result<f64> {
    check_same_n(h.n(), k.n())?;
    let grad = h.gradient(x)?;
    let kv = k.eval(x)?;
    let v: f64 = grad.iter().zip(&kv).map(|(a, b)| a * b).sum();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("omega pairing"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oscillator(a: f64) -> ScalarFunction {
        ScalarFunction::new("osc", 1, move |x| 0.5 * (a * a * x[0] * x[0] + x[1] * x[1]))
            .with_gradient(move |x, g| {
                g[0] = a * a * x[0];
                g[1] = x[1];
            })
    }

    fn g2() -> ScalarFunction {
        ScalarFunction::new("G2", 2, |x| 0.5 * (x[1] * x[1] + x[3] * x[3])).with_gradient(
            |x, g| {
                g.fill(0.0);
                g[1] = x[1];
                g[3] = x[3];
            },
        )
    }

    fn g1() -> ScalarFunction {
        ScalarFunction::new("G1", 2, |x| 0.5 * x.iter().map(|v| v * v).sum::<f64>())
            .with_gradient(|x, g| g.copy_from_slice(x))
    }

    fn k1() -> SmoothField {
        SmoothField::new("K1", 2, |x, out| {
            out.fill(0.0);
            out[1] = x[1] / (x[1] * x[1] + x[3] * x[3]);
        })
        .with_domain(|x| x[1] * x[1] + x[3] * x[3] > 1e-16)
    }

    fn pt(v: &[f64]) -> PhasePoint {
        PhasePoint::new(v.to_vec()).unwrap()
    }

    #[test]
    fn phase_point_rejects_bad_input() {
        assert!(PhasePoint::new(vec![1.0]).is_err());
        assert!(PhasePoint::new(vec![]).is_err());
        assert!(PhasePoint::new(vec![1.0, f64::NAN]).is_err());
        let x = PhasePoint::from_qp(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(x.q(), &[1.0, 2.0]);
        assert_eq!(x.p(), &[3.0, 4.0]);
    }

    #[test]
    fn gradient_of_unit_oscillator() {
        let v = symplectic_gradient(&oscillator(1.0), &pt(&[1.0, 0.0])).unwrap();
        assert_eq!(v, vec![0.0, -1.0]);
    }

    #[test]
    fn gradient_of_g2_matches_w_driven_components() {
        let v = symplectic_gradient(&g2(), &pt(&[0.0, 1.0, 0.0, 2.0])).unwrap();
        assert_eq!(v, vec![0.0, 2.0, 0.0, -1.0]);
    }

    #[test]
    fn gradient_of_scaled_oscillator() {
        // d/dp = p = 1, -d/dq = -a^2 q = -4
        let v = symplectic_gradient(&oscillator(2.0), &pt(&[1.0, 1.0])).unwrap();
        assert_eq!(v, vec![1.0, -4.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let err = symplectic_gradient(&g2(), &pt(&[1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
        assert!(poisson_bracket(&g2(), &oscillator(1.0), &pt(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let bad = ScalarFunction::new("bad", 1, |x| x[0].ln());
        assert!(matches!(
            bad.gradient(&pt(&[0.0, 0.0])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn canonical_pair_bracket() {
        let q = ScalarFunction::new("q", 1, |x| x[0]);
        let p = ScalarFunction::new("p", 1, |x| x[1]);
        let b = poisson_bracket(&p, &q, &pt(&[0.3, -2.0])).unwrap();
        assert!((b - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pairing_examples() {
        assert_eq!(
            omega_pairing(&g2(), &k1(), &pt(&[0.0, 1.0, 0.0, 0.0])).unwrap(),
            1.0
        );
        assert_eq!(
            omega_pairing(&g2(), &k1(), &pt(&[0.0, 0.0, 0.0, 1.0])).unwrap(),
            0.0
        );
        assert!(matches!(
            omega_pairing(&g2(), &k1(), &pt(&[1.0, 0.0, 1.0, 0.0])),
            Err(Error::OutsideDomain(_))
        ));
    }

    #[test]
    fn pairing_with_hamiltonian_field_is_the_reversed_bracket() {
        // dH(X_k) = {k, H} with the coordinate bracket convention.
        let x = pt(&[0.4, -1.2, 0.7, 0.3]);
        let k = ScalarFunction::new("k", 2, |x| x[0] * x[3] + x[1].sin());
        let pair = omega_pairing(&g1(), &SmoothField::hamiltonian(&k), &x).unwrap();
        let bracket = poisson_bracket(&k, &g1(), &x).unwrap();
        assert!((pair - bracket).abs() < 1e-8);
    }

    #[test]
    fn convention_lock_one_degree() {
        // dot q = dH/dp, dot p = -dH/dq
        let h = ScalarFunction::new("h", 1, |x| x[0].powi(3) + x[0] * x[1] * x[1]);
        let x = pt(&[0.7, -0.4]);
        let v = symplectic_gradient(&h, &x).unwrap();
        let dh_dp = 2.0 * 0.7 * -0.4;
        let dh_dq = 3.0 * 0.49 + 0.16;
        assert!((v[0] - dh_dp).abs() < 1e-8);
        assert!((v[1] + dh_dq).abs() < 1e-8);
    }

    #[test]
    fn g1_and_g2_commute() {
        let mut s = 0x9e3779b97f4a7c15_u64;
        let mut next = || {
            s ^= s << 7;
            s ^= s >> 9;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for _ in 0..100 {
            let x = pt(&[next(), next(), next(), next()]);
            assert!(poisson_bracket(&g1(), &g2(), &x).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn field_jacobian_fallback() {
        let f = SmoothField::hamiltonian(&oscillator(2.0));
        let mut j = [0.0; 4];
        f.jacobian_into(&[0.3, 0.1], &mut j);
        // X = (p, -4q)
        let expect = [0.0, 1.0, -4.0, 0.0];
        for (a, b) in j.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn coords(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0..3.0f64, 2 * n)
    }

    fn quartic() -> ScalarFunction {
        ScalarFunction::new("quartic", 2, |x| {
            x[0] * x[0] * x[2] + 0.25 * x[1].powi(4) + x[3] * x[0] - (x[1] * x[3]).cos()
        })
        .with_gradient(|x, g| {
            g[0] = 2.0 * x[0] * x[2] + x[3];
            g[1] = x[1].powi(3) + x[3] * (x[1] * x[3]).sin();
            g[2] = x[0] * x[0];
            g[3] = x[0] + x[1] * (x[1] * x[3]).sin();
        })
    }

    proptest! {
        #[test]
        fn pairing_with_own_field_vanishes(x in coords(2)) {
            let h = quartic();
            let x = pt(&x);
            let v = omega_pairing(&h, &SmoothField::hamiltonian(&h), &x).unwrap();
            prop_assert!(v.abs() <= 1e-12 * (1.0 + h.gradient(&x).unwrap().iter().map(|g| g * g).sum::<f64>()));
        }

        #[test]
        fn bracket_is_antisymmetric(x in coords(2)) {
            let x = pt(&x);
            let (f, g) = (quartic(), g2());
            let s = poisson_bracket(&f, &g, &x).unwrap() + poisson_bracket(&g, &f, &x).unwrap();
            prop_assert!(s.abs() <= 1e-12);
        }

        #[test]
        fn closed_form_and_difference_gradients_agree(x in coords(2)) {
            let h = quartic();
            let mut exact = [0.0; 4];
            let mut fd = [0.0; 4];
            h.gradient_into(&x, &mut exact);
            h.fd_gradient_into(&x, &mut fd);
            let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let h_fd = default_fd_step(scale);
            for (a, b) in exact.iter().zip(fd) {
                // O(h^2) truncation plus O(eps/h) roundoff.
                prop_assert!((a - b).abs() <= 200.0 * scale.powi(4) * h_fd * h_fd);
            }
        }
    }
}
