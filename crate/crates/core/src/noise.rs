//! Brownian increments from a counter-based generator.
//!
//! The `i`-th standard normal of a path is a pure function of
//! `(master_seed, stream, i)`: it is produced by Box-Muller from the ChaCha8
//! keystream block at word position `4 * (i / 2)`, with `stream` selecting the
//! ChaCha stream. Paths can therefore be generated on any worker, in any
//! order, and also coarsened (summing consecutive fine increments) so that
//! schemes at different step sizes see the same Brownian path.

use std::f64::consts::TAU;
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// `(master seed, stream index)`; one stream per simulated path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedDescriptor {
    pub master_seed: u64,
    pub stream: u64,
}

impl SeedDescriptor {
    pub fn new(master_seed: u64, stream: u64) -> Self {
        Self {
            master_seed,
            stream,
        }
    }

    /// Derives an independent descriptor family, e.g. for a second experiment
    /// arm sharing the master seed.
    pub fn family(master_seed: u64, family: u64, stream: u64) -> Self {
        Self::new(splitmix(master_seed ^ splitmix(family)), stream)
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream);
        rng
    }

    /// The `index`-th standard normal of this stream (random access).
    pub fn normal_at(&self, index: u64) -> f64 {
        let mut rng = self.rng();
        rng.set_word_pos(4 * u128::from(index / 2));
        let (z0, z1) = box_muller(rng.next_u64(), rng.next_u64());
        if index % 2 == 0 {
            z0
        } else {
            z1
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn box_muller(a: u64, b: u64) -> (f64, f64) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = ((a >> 11) + 1) as f64 * SCALE;
    let u2 = (b >> 11) as f64 * SCALE;
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (TAU * u2).sin_cos();
    (r * c, r * s)
}

#[derive(Debug, Clone)]
enum Source {
    Counter(SeedDescriptor),
    Zero,
    Recorded(Arc<Vec<f64>>),
}

/// Gaussian increments for `n_streams` Brownian motions over `n_steps` steps.
///
/// Entry `(j, k)` is `N(0, dt)`. Increments are produced on demand through a
/// [`NoiseCursor`], so long paths never need to be held in memory.
#[derive(Debug, Clone)]
pub struct NoisePath {
    source: Source,
    n_streams: usize,
    base_dt: f64,
    aggregation: usize,
    n_steps: usize,
}

impl NoisePath {
    pub fn new(
        descriptor: SeedDescriptor,
        n_streams: usize,
        dt: f64,
        n_steps: usize,
    ) -> Result<Self> {
        Self::validate(n_streams, dt)?;
        Ok(Self {
            source: Source::Counter(descriptor),
            n_streams,
            base_dt: dt,
            aggregation: 1,
            n_steps,
        })
    }

    /// All increments zero.
    pub fn zero(n_streams: usize, dt: f64, n_steps: usize) -> Result<Self> {
        Self::validate(n_streams, dt)?;
        Ok(Self {
            source: Source::Zero,
            n_streams,
            base_dt: dt,
            aggregation: 1,
            n_steps,
        })
    }

    /// Explicit increments, row-major `n_steps x n_streams`.
    pub fn recorded(n_streams: usize, dt: f64, increments: Vec<f64>) -> Result<Self> {
        Self::validate(n_streams, dt)?;
        if increments.len() % n_streams != 0 {
            return Err(invalid(
                "increments",
                "length must be a multiple of the stream count",
            ));
        }
        Ok(Self {
            n_steps: increments.len() / n_streams,
            source: Source::Recorded(Arc::new(increments)),
            n_streams,
            base_dt: dt,
            aggregation: 1,
        })
    }

    fn validate(n_streams: usize, dt: f64) -> Result<()> {
        if n_streams == 0 {
            return Err(invalid("n_streams", "must be positive"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt", "must be positive and finite"));
        }
        Ok(())
    }

    /// Same Brownian path sampled with steps `factor` times longer.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(invalid(
                "factor",
                format!("must divide the step count {}", self.n_steps),
            ));
        }
        Ok(Self {
            aggregation: self.aggregation * factor,
            n_steps: self.n_steps / factor,
            ..self.clone()
        })
    }

    /// Same path, truncated or extended to `n_steps`.
    pub fn with_steps(&self, n_steps: usize) -> Self {
        Self {
            n_steps,
            ..self.clone()
        }
    }

    pub fn n_streams(&self) -> usize {
        self.n_streams
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.base_dt * self.aggregation as f64
    }

    pub fn descriptor(&self) -> Option<SeedDescriptor> {
        match self.source {
            Source::Counter(d) => Some(d),
            _ => None,
        }
    }

    pub fn cursor(&self) -> NoiseCursor<'_> {
        NoiseCursor {
            path: self,
            rng: match &self.source {
                Source::Counter(d) => Some(d.rng()),
                _ => None,
            },
            spare: None,
            fine_index: 0,
            step: 0,
            sqrt_dt: self.base_dt.sqrt(),
        }
    }

    /// Row-major `n_steps x n_streams` increments.
    pub fn materialize(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_steps * self.n_streams];
        let mut cursor = self.cursor();
        for row in out.chunks_mut(self.n_streams) {
            cursor.next_into(row);
        }
        out
    }

    /// Brownian values `W_k` at the end of the path.
    pub fn endpoint(&self) -> Vec<f64> {
        let mut total = vec![0.0; self.n_streams];
        let mut row = vec![0.0; self.n_streams];
        let mut cursor = self.cursor();
        for _ in 0..self.n_steps {
            cursor.next_into(&mut row);
            for (t, r) in total.iter_mut().zip(&row) {
                *t += r;
            }
        }
        total
    }
}

/// Sequential reader over a [`NoisePath`].
pub struct NoiseCursor<'a> {
    path: &'a NoisePath,
    rng: Option<ChaCha8Rng>,
    spare: Option<f64>,
    fine_index: u64,
    step: usize,
    sqrt_dt: f64,
}

impl NoiseCursor<'_> {
    #[inline]
    fn next_normal(&mut self) -> f64 {
        let idx = self.fine_index;
        self.fine_index += 1;
        if let Some(z) = self.spare.take() {
            return z;
        }
        let rng = self.rng.as_mut().expect("counter source");
        let (z0, z1) = box_muller(rng.next_u64(), rng.next_u64());
        debug_assert_eq!(idx % 2, 0);
        self.spare = Some(z1);
        z0
    }

    /// Writes the next step's increments; returns `false` past the end.
    pub fn next_into(&mut self, out: &mut [f64]) -> bool {
        if self.step >= self.path.n_steps {
            return false;
        }
        let k = self.path.n_streams;
        match &self.path.source {
            Source::Zero => out[..k].fill(0.0),
            Source::Recorded(data) => {
                out[..k].fill(0.0);
                for j in 0..self.path.aggregation {
                    let row = (self.step * self.path.aggregation + j) * k;
                    for s in 0..k {
                        out[s] += data[row + s];
                    }
                }
            }
            Source::Counter(_) => {
                out[..k].fill(0.0);
                for _ in 0..self.path.aggregation {
                    for o in out[..k].iter_mut() {
                        *o += self.sqrt_dt * self.next_normal();
                    }
                }
            }
        }
        self.step += 1;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_reproduction() {
        let d = SeedDescriptor::new(42, 7);
        let a = NoisePath::new(d, 2, 1e-3, 500).unwrap().materialize();
        let b = NoisePath::new(d, 2, 1e-3, 500).unwrap().materialize();
        assert_eq!(a, b);
        let c = NoisePath::new(SeedDescriptor::new(42, 8), 2, 1e-3, 500)
            .unwrap()
            .materialize();
        assert_ne!(a, c);
    }

    #[test]
    fn random_access_matches_sequential() {
        let d = SeedDescriptor::new(3, 11);
        let dt = 0.25;
        let path = NoisePath::new(d, 3, dt, 9).unwrap().materialize();
        for (i, v) in path.iter().enumerate() {
            assert_eq!(*v, dt.sqrt() * d.normal_at(i as u64));
        }
    }

    #[test]
    fn per_stream_variance() {
        let dt = 1e-3;
        let n = 200_000;
        let path = NoisePath::new(SeedDescriptor::new(1, 0), 2, dt, n)
            .unwrap()
            .materialize();
        for k in 0..2 {
            let xs: Vec<f64> = path.iter().skip(k).step_by(2).copied().collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var / dt - 1.0).abs() < 0.05, "stream {k}: {var}");
            assert!(mean.abs() < 4.0 * (dt / n as f64).sqrt());
        }
        let cov: f64 = path.chunks(2).map(|r| r[0] * r[1]).sum::<f64>() / n as f64;
        assert!(cov.abs() < 4.0 * dt / (n as f64).sqrt());
    }

    #[test]
    fn coarsening_sums_fine_increments() {
        let fine = NoisePath::new(SeedDescriptor::new(5, 2), 2, 0.01, 8).unwrap();
        let coarse = fine.coarsened(2).unwrap();
        assert_eq!(coarse.n_steps(), 4);
        assert!((coarse.dt() - 0.02).abs() < 1e-15);
        let f = fine.materialize();
        let c = coarse.materialize();
        for j in 0..4 {
            for k in 0..2 {
                let s = f[(2 * j) * 2 + k] + f[(2 * j + 1) * 2 + k];
                assert!((c[j * 2 + k] - s).abs() < 1e-15);
            }
        }
        assert!(fine.coarsened(3).is_err());
        let e1 = fine.endpoint();
        let e2 = coarse.endpoint();
        for k in 0..2 {
            assert!((e1[k] - e2[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_and_recorded_sources() {
        assert!(NoisePath::zero(2, 0.1, 5)
            .unwrap()
            .materialize()
            .iter()
            .all(|v| *v == 0.0));
        let r = NoisePath::recorded(1, 0.1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(r.coarsened(2).unwrap().materialize(), vec![3.0, 7.0]);
        assert!(NoisePath::recorded(2, 0.1, vec![1.0]).is_err());
        assert!(NoisePath::zero(0, 0.1, 1).is_err());
        assert!(NoisePath::zero(1, 0.0, 1).is_err());
    }

    #[test]
    fn families_are_distinct() {
        let a = SeedDescriptor::family(9, 0, 0);
        let b = SeedDescriptor::family(9, 1, 0);
        assert_ne!(a.master_seed, b.master_seed);
        assert_eq!(a, SeedDescriptor::family(9, 0, 0));
    }
}
