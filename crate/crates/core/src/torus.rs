//! Uniform tensor grids on `T^n` and grid functions with FFT helpers.

use std::f64::consts::TAU;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{invalid, Result};

/// `m^n` nodes `theta_j = 2 pi j / m` with equal weights `1 / m^n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TorusGrid {
    n: usize,
    m: usize,
}

impl TorusGrid {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("n", "torus dimension must be positive"));
        }
        if m < 2 || !m.is_power_of_two() {
            return Err(invalid("m", format!("nodes per dimension must be a power of two >= 2, got {m}")));
        }
        if m.checked_pow(n as u32).is_none_or(|s| s > 1 << 26) {
            return Err(invalid("m", "grid too large"));
        }
        Ok(Self { n, m })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.m.pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    /// Multi-index of flat node `idx` (last dimension fastest).
    pub fn multi_index(&self, mut idx: usize, out: &mut [usize]) {
        for d in (0..self.n).rev() {
            out[d] = idx % self.m;
            idx /= self.m;
        }
    }

    pub fn angles_into(&self, idx: usize, out: &mut [f64]) {
        let mut mi = vec![0usize; self.n];
        self.multi_index(idx, &mut mi);
        for (o, j) in out.iter_mut().zip(mi) {
            *o = TAU * j as f64 / self.m as f64;
        }
    }

    /// All node angle vectors in flat order.
    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| {
                let mut a = vec![0.0; self.n];
                self.angles_into(i, &mut a);
                a
            })
            .collect()
    }

    /// Signed Fourier mode for DFT index `j`; the Nyquist index maps to `-m/2`.
    pub fn mode(&self, j: usize) -> i64 {
        if j < self.m / 2 {
            j as i64
        } else {
            j as i64 - self.m as i64
        }
    }

    pub fn modes_of(&self, idx: usize) -> Vec<i64> {
        let mut mi = vec![0usize; self.n];
        self.multi_index(idx, &mut mi);
        mi.into_iter().map(|j| self.mode(j)).collect()
    }

    /// Quadrature of grid values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() * self.weight()
    }

    /// Forward DFT normalized so entry 0 is the mean.
    pub fn forward(&self, values: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut data, false);
        let w = self.weight();
        data.iter_mut().for_each(|c| *c *= w);
        data
    }

    /// Inverse of [`TorusGrid::forward`].
    pub fn inverse(&self, coeffs: &[Complex64]) -> Vec<Complex64> {
        let mut data = coeffs.to_vec();
        self.transform(&mut data, true);
        data
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let m = self.m;
        let mut planner = FftPlanner::new();
        let fft = if inverse {
            planner.plan_fft_inverse(m)
        } else {
            planner.plan_fft_forward(m)
        };
        let mut line = vec![Complex64::new(0.0, 0.0); m];
        for axis in 0..self.n {
            let stride = m.pow((self.n - 1 - axis) as u32);
            let block = stride * m;
            for start in (0..data.len()).step_by(block) {
                for offset in 0..stride {
                    let base = start + offset;
                    for (j, l) in line.iter_mut().enumerate() {
                        *l = data[base + j * stride];
                    }
                    fft.process(&mut line);
                    for (j, l) in line.iter().enumerate() {
                        data[base + j * stride] = *l;
                    }
                }
            }
        }
    }
}

/// Real-valued function sampled on a torus grid over the fiber `levels`.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusFunction {
    pub grid: TorusGrid,
    pub values: Vec<f64>,
    pub levels: Vec<f64>,
}

impl TorusFunction {
    pub fn new(grid: TorusGrid, values: Vec<f64>, levels: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(
                "values",
                format!("expected {} grid values, got {}", grid.len(), values.len()),
            ));
        }
        Ok(Self {
            grid,
            values,
            levels,
        })
    }

    pub fn from_fn(grid: TorusGrid, levels: Vec<f64>, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut theta = vec![0.0; grid.n()];
        let values = (0..grid.len())
            .map(|i| {
                grid.angles_into(i, &mut theta);
                f(&theta)
            })
            .collect();
        Self {
            grid,
            values,
            levels,
        }
    }

    pub fn mean(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    pub fn coefficients(&self) -> Vec<Complex64> {
        self.grid.forward(&self.values)
    }

    /// Largest coefficient with some `|m_i| > 3m/8`, relative to the largest overall.
    pub fn band_tail_ratio(&self) -> f64 {
        let c = self.coefficients();
        let cutoff = (3 * self.grid.m() / 8) as i64;
        let mut lead = 0.0f64;
        let mut tail = 0.0f64;
        for (i, v) in c.iter().enumerate() {
            let a = v.norm();
            lead = lead.max(a);
            if self.grid.modes_of(i).iter().any(|k| k.abs() > cutoff) {
                tail = tail.max(a);
            }
        }
        if lead == 0.0 {
            0.0
        } else {
            tail / lead
        }
    }

    /// Spectral partial derivative along angle `axis`.
    pub fn derivative(&self, axis: usize) -> TorusFunction {
        let mut c = self.coefficients();
        let half = (self.grid.m() / 2) as i64;
        for (i, v) in c.iter_mut().enumerate() {
            let k = self.grid.modes_of(i)[axis];
            *v *= if k.abs() == half {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(0.0, k as f64)
            };
        }
        let values = self.grid.inverse(&c).into_iter().map(|z| z.re).collect();
        TorusFunction {
            values,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation() {
        assert!(TorusGrid::new(0, 8).is_err());
        assert!(TorusGrid::new(1, 12).is_err());
        assert!(TorusGrid::new(1, 1).is_err());
        assert!(TorusGrid::new(2, 64).is_ok());
    }

    #[test]
    fn cos_squared_average() {
        let g = TorusGrid::new(2, 64).unwrap();
        let f = TorusFunction::from_fn(g, vec![], |t| t[1].cos().powi(2));
        assert!((f.mean() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exponentials_integrate_exactly() {
        // Re and Im of e^{i k.theta} for every |k_i| < m/2.
        let g = TorusGrid::new(2, 16).unwrap();
        for k1 in -7i64..8 {
            for k2 in -7i64..8 {
                let re = TorusFunction::from_fn(g, vec![], |t| (k1 as f64 * t[0] + k2 as f64 * t[1]).cos());
                let im = TorusFunction::from_fn(g, vec![], |t| (k1 as f64 * t[0] + k2 as f64 * t[1]).sin());
                let expect = if k1 == 0 && k2 == 0 { 1.0 } else { 0.0 };
                assert!((re.mean() - expect).abs() < 1e-12);
                assert!(im.mean().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_inverse_and_mode_layout() {
        let g = TorusGrid::new(2, 8).unwrap();
        let f = TorusFunction::from_fn(g, vec![], |t| (2.0 * t[0] - t[1]).cos() + 0.3);
        let c = f.coefficients();
        let back = g.inverse(&c);
        for (a, b) in back.iter().zip(&f.values) {
            assert!((a.re - b).abs() < 1e-13 && a.im.abs() < 1e-13);
        }
        assert!((c[0].re - 0.3).abs() < 1e-14);
        // (2, -1) and (-2, 1) carry 1/2 each.
        let find = |k: [i64; 2]| (0..g.len()).find(|&i| g.modes_of(i) == k).unwrap();
        assert!((c[find([2, -1])].re - 0.5).abs() < 1e-14);
        assert!((c[find([-2, 1])].re - 0.5).abs() < 1e-14);
        assert_eq!(g.mode(4), -4);
    }

    #[test]
    fn spectral_derivative() {
        let g = TorusGrid::new(2, 32).unwrap();
        let f = TorusFunction::from_fn(g, vec![], |t| (3.0 * t[0]).sin() * t[1].cos());
        let d0 = f.derivative(0);
        let d1 = f.derivative(1);
        let e0 = TorusFunction::from_fn(g, vec![], |t| 3.0 * (3.0 * t[0]).cos() * t[1].cos());
        let e1 = TorusFunction::from_fn(g, vec![], |t| -(3.0 * t[0]).sin() * t[1].sin());
        for i in 0..g.len() {
            assert!((d0.values[i] - e0.values[i]).abs() < 1e-12);
            assert!((d1.values[i] - e1.values[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn band_limit_check() {
        let g = TorusGrid::new(1, 32).unwrap();
        let smooth = TorusFunction::from_fn(g, vec![], |t| t[0].sin());
        assert!(smooth.band_tail_ratio() < 1e-14);
        let rough = TorusFunction::from_fn(g, vec![], |t| if t[0] < 1.0 { 1.0 } else { 0.0 });
        assert!(rough.band_tail_ratio() > 1e-3);
    }
}
