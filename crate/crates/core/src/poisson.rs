//! Spectral solution of the fiber Poisson equation `L_0 h = f`.
//!
//! In action-angle coordinates the restricted generator is
//! `L_0 = 1/2 sum_k (omega_k . d_theta)^2 + omega_0 . d_theta`, so the Fourier
//! mode `e^{i m.theta}` is an eigenfunction with eigenvalue
//! `lambda(m) = -1/2 sum_k (m.omega_k)^2 + i m.omega_0`.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::models::IntegrableModel;
use crate::torus::TorusFunction;

const CENTERING_TOL: f64 = 1e-10;
const BAND_TOL: f64 = 1e-8;
const RESONANCE_TOL: f64 = 1e-10;

/// Frequency data of `L_0` on one fiber.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    n: usize,
    rows: Vec<f64>,
    drift: Vec<f64>,
}

impl GeneratorSpec {
    /// `rows` is row-major `n x n` with row `k` the frequency vector `omega_k`.
    pub fn new(rows: Vec<f64>, drift: Vec<f64>) -> Result<Self> {
        let n = drift.len();
        if rows.len() != n * n || n == 0 {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: rows.len(),
            });
        }
        let mat = nalgebra::DMatrix::from_row_slice(n, n, &rows);
        let det = mat.determinant();
        let scale = mat.norm().max(f64::MIN_POSITIVE).powi(n as i32);
        if !(det.abs() > 1e-12 * scale) {
            return Err(Error::NotElliptic(det));
        }
        Ok(Self { n, rows, drift })
    }

    pub fn from_model(model: &IntegrableModel, actions: &[f64]) -> Result<Self> {
        Self::new(model.freq_matrix(actions), model.drift_freq(actions))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn eigenvalue(&self, modes: &[i64]) -> Complex64 {
        let n = self.n;
        let diffusive: f64 = (0..n)
            .map(|k| {
                let dot: f64 = (0..n).map(|i| modes[i] as f64 * self.rows[k * n + i]).sum();
                dot * dot
            })
            .sum();
        let transport: f64 = (0..n).map(|i| modes[i] as f64 * self.drift[i]).sum();
        Complex64::new(-0.5 * diffusive, transport)
    }
}

fn check_grid(f: &TorusFunction, gen: &GeneratorSpec) -> Result<()> {
    if f.grid.n() != gen.n() {
        return Err(Error::DimensionMismatch {
            expected: gen.n(),
            got: f.grid.n(),
        });
    }
    Ok(())
}

/// Applies `L_0` spectrally.
pub fn apply_generator(h: &TorusFunction, gen: &GeneratorSpec) -> Result<TorusFunction> {
    check_grid(h, gen)?;
    let grid = h.grid;
    let mut c = h.coefficients();
    for (i, v) in c.iter_mut().enumerate() {
        *v *= gen.eigenvalue(&grid.modes_of(i));
    }
    let values = grid.inverse(&c).into_iter().map(|z| z.re).collect();
    Ok(TorusFunction {
        values,
        ..h.clone()
    })
}

/// The centered solution of `L_0 h = f`.
pub fn solve_poisson(f: &TorusFunction, gen: &GeneratorSpec) -> Result<TorusFunction> {
    check_grid(f, gen)?;
    let grid = f.grid;
    let scale = f.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mean = f.mean();
    if mean.abs() > CENTERING_TOL * scale {
        return Err(Error::NotCentered(mean));
    }
    let tail = f.band_tail_ratio();
    if tail > BAND_TOL {
        return Err(Error::NotBandLimited(tail));
    }
    let mut c = f.coefficients();
    let lead = c.iter().skip(1).fold(0.0f64, |m, v| m.max(v.norm()));
    let lambdas: Vec<Complex64> = (0..grid.len())
        .map(|i| gen.eigenvalue(&grid.modes_of(i)))
        .collect();
    let max_lambda = lambdas.iter().fold(0.0f64, |m, l| m.max(l.norm()));
    let half = (grid.m() / 2) as i64;
    c[0] = Complex64::new(0.0, 0.0);
    for i in 1..grid.len() {
        let modes = grid.modes_of(i);
        if modes.iter().any(|k| k.abs() == half) {
            c[i] = Complex64::new(0.0, 0.0);
            continue;
        }
        let lambda = lambdas[i];
        if lambda.norm() < RESONANCE_TOL * max_lambda {
            if c[i].norm() > 1e-13 * lead.max(f64::MIN_POSITIVE) {
                return Err(Error::Resonance {
                    mode: modes,
                    lambda: lambda.norm(),
                });
            }
            c[i] = Complex64::new(0.0, 0.0);
            continue;
        }
        c[i] /= lambda;
    }
    let values = grid.inverse(&c).into_iter().map(|z| z.re).collect();
    Ok(TorusFunction {
        values,
        ..f.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::TorusGrid;
    use proptest::prelude::*;

    fn unit() -> GeneratorSpec {
        GeneratorSpec::new(vec![1.0], vec![0.0]).unwrap()
    }

    #[test]
    fn cosine_case() {
        let g = TorusGrid::new(1, 64).unwrap();
        let f = TorusFunction::from_fn(g, vec![1.0], |t| t[0].cos());
        let h = solve_poisson(&f, &unit()).unwrap();
        for (i, v) in h.values.iter().enumerate() {
            let t = std::f64::consts::TAU * i as f64 / 64.0;
            assert!((v + 2.0 * t.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dof_sine_case() {
        // f = -sqrt(2I) sin(theta)  ->  h = 2 sqrt(2I) sin(theta)
        let action = 1.7f64;
        let amp = (2.0 * action).sqrt();
        let g = TorusGrid::new(1, 64).unwrap();
        let f = TorusFunction::from_fn(g, vec![action], |t| -amp * t[0].sin());
        let h = solve_poisson(&f, &unit()).unwrap();
        let expect = TorusFunction::from_fn(g, vec![action], |t| 2.0 * amp * t[0].sin());
        for (a, b) in h.values.iter().zip(&expect.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let g = TorusGrid::new(1, 32).unwrap();
        let shifted = TorusFunction::from_fn(g, vec![], |t| t[0].cos() + 0.1);
        assert!(matches!(solve_poisson(&shifted, &unit()), Err(Error::NotCentered(_))));
        let rough = TorusFunction::from_fn(g, vec![], |t| (t[0] - 3.0).abs());
        let centered = {
            let m = rough.mean();
            TorusFunction { values: rough.values.iter().map(|v| v - m).collect(), ..rough }
        };
        assert!(matches!(solve_poisson(&centered, &unit()), Err(Error::NotBandLimited(_))));
        assert!(matches!(
            GeneratorSpec::new(vec![1.0, 1.0, 1.0, 1.0], vec![0.0, 0.0]),
            Err(Error::NotElliptic(_))
        ));
    }

    #[test]
    fn resonance_guard_trips_on_near_degenerate_frequencies() {
        let gen = GeneratorSpec::new(vec![1.0, 0.0, 0.0, 1e-7], vec![0.0, 0.0]).unwrap();
        let g = TorusGrid::new(2, 16).unwrap();
        let f = TorusFunction::from_fn(g, vec![], |t| t[1].cos());
        assert!(matches!(solve_poisson(&f, &gen), Err(Error::Resonance { .. })));
        // Modes that avoid the degenerate direction are still fine.
        let ok = TorusFunction::from_fn(g, vec![], |t| t[0].cos());
        assert!(solve_poisson(&ok, &gen).is_ok());
    }

    #[test]
    fn drift_term_enters_imaginary_part() {
        let gen = GeneratorSpec::new(vec![1.0], vec![2.0]).unwrap();
        assert_eq!(gen.eigenvalue(&[3]), Complex64::new(-4.5, 6.0));
        let g = TorusGrid::new(1, 32).unwrap();
        let f = TorusFunction::from_fn(g, vec![], |t| (2.0 * t[0]).sin() + t[0].cos());
        let h = solve_poisson(&f, &gen).unwrap();
        let back = apply_generator(&h, &gen).unwrap();
        for (a, b) in back.values.iter().zip(&f.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn random_trig(grid: TorusGrid, coeffs: &[f64]) -> TorusFunction {
        // coefficients for modes with |k_i| <= 3, excluding zero
        let n = grid.n();
        let mut terms = Vec::new();
        let mut c = coeffs.iter();
        let range: Vec<i64> = (-3..=3).collect();
        let combos: Vec<Vec<i64>> = if n == 1 {
            range.iter().map(|&a| vec![a]).collect()
        } else {
            range.iter().flat_map(|&a| range.iter().map(move |&b| vec![a, b])).collect()
        };
        for k in combos {
            if k.iter().all(|v| *v == 0) {
                continue;
            }
            if let (Some(a), Some(b)) = (c.next(), c.next()) {
                terms.push((k, *a, *b));
            }
        }
        TorusFunction::from_fn(grid, vec![], move |t| {
            terms
                .iter()
                .map(|(k, a, b)| {
                    let ph: f64 = k.iter().zip(t).map(|(ki, ti)| *ki as f64 * ti).sum();
                    a * ph.cos() + b * ph.sin()
                })
                .sum()
        })
    }

    proptest! {
        #[test]
        fn linear_in_the_right_hand_side(a in prop::collection::vec(-1.0..1.0f64, 96),
                                         alpha in -3.0..3.0f64, gamma in -3.0..3.0f64) {
            let grid = TorusGrid::new(2, 16).unwrap();
            let gen = GeneratorSpec::new(vec![1.0, 1.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
            let f = random_trig(grid, &a[..48]);
            let g = random_trig(grid, &a[48..]);
            let combo = TorusFunction {
                values: f.values.iter().zip(&g.values).map(|(x, y)| alpha * x + gamma * y).collect(),
                ..f.clone()
            };
            let hf = solve_poisson(&f, &gen).unwrap();
            let hg = solve_poisson(&g, &gen).unwrap();
            let hc = solve_poisson(&combo, &gen).unwrap();
            for i in 0..grid.len() {
                prop_assert!((hc.values[i] - alpha * hf.values[i] - gamma * hg.values[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn solution_is_centered(a in prop::collection::vec(-1.0..1.0f64, 12)) {
            let grid = TorusGrid::new(1, 32).unwrap();
            let f = random_trig(grid, &a);
            let h = solve_poisson(&f, &unit()).unwrap();
            prop_assert!(h.mean().abs() <= 1e-12);
        }
    }
}
