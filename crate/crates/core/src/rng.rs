//! Replayable Gaussian increments.
//!
//! Every stream is a ChaCha8 generator whose key is a SplitMix64 mix of
//! `(seed, tag, step)` and whose stream id is the sample index. Any sample can
//! therefore be regenerated in isolation, and results never depend on which
//! worker produced them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream family tags.
pub mod tags {
    pub const ACTUATOR: u64 = 0x4143_5455;
    pub const FUTURES: u64 = 0x4655_5455;
    pub const DIAGNOSTIC: u64 = 0x4449_4147;
    pub const EXPERIMENT: u64 = 0x4558_5052;
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed, a stream family tag and a step index into a 64-bit key.
pub fn derive_key(seed: u64, tag: u64, step: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ step)
}

/// Seed for experiment `index` of a batch started from `base_seed`.
pub fn experiment_seed(base_seed: u64, index: u64) -> u64 {
    derive_key(base_seed, tags::EXPERIMENT, index)
}

/// ChaCha8 generator for `(seed, tag, step)` on stream `stream`.
pub fn stream_rng(seed: u64, tag: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let key = derive_key(seed, tag, step);
    let mut bytes = [0u8; 32];
    for (i, chunk) in bytes.chunks_exact_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix64(key ^ (i as u64)).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(bytes);
    rng.set_stream(stream);
    rng
}

/// Supplier of per-step Brownian increments `ΔW ~ N(0, Δt·I)`.
///
/// `out` always has the model's maximum control dimension so that noise stays
/// aligned across modes; a mode with `m_j` channels uses the first `m_j`.
pub trait NoiseSource {
    fn fill(&mut self, step: usize, dt: f64, out: &mut [f64]);
}

/// Sequential draws from a single stream.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    rng: ChaCha8Rng,
}

impl GaussianNoise {
    pub fn new(seed: u64, tag: u64, step: u64, stream: u64) -> Self {
        Self {
            rng: stream_rng(seed, tag, step, stream),
        }
    }
}

impl NoiseSource for GaussianNoise {
    fn fill(&mut self, _step: usize, dt: f64, out: &mut [f64]) {
        let scale = dt.sqrt();
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *v = scale * z;
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn fill(&mut self, _step: usize, _dt: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// A pre-drawn table of increments indexed by absolute grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub seed: u64,
    pub stream_id: u64,
    pub width: usize,
    increments: Vec<f64>,
}

impl NoiseDraw {
    pub fn generate(seed: u64, tag: u64, stream_id: u64, steps: usize, width: usize, dt: f64) -> Self {
        let mut src = GaussianNoise::new(seed, tag, 0, stream_id);
        let mut increments = vec![0.0; steps * width];
        for (i, row) in increments.chunks_exact_mut(width).enumerate() {
            src.fill(i, dt, row);
        }
        Self {
            seed,
            stream_id,
            width,
            increments,
        }
    }

    pub fn zeros(steps: usize, width: usize) -> Self {
        Self::from_rows(width, vec![0.0; steps * width])
    }

    /// Wraps explicit increments laid out row-major, `width` values per step.
    pub fn from_rows(width: usize, increments: Vec<f64>) -> Self {
        assert!(width > 0 && increments.len().is_multiple_of(width));
        Self {
            seed: 0,
            stream_id: 0,
            width,
            increments,
        }
    }

    pub fn steps(&self) -> usize {
        self.increments.len() / self.width
    }

    pub fn row(&self, step: usize) -> &[f64] {
        &self.increments[step * self.width..(step + 1) * self.width]
    }

    /// Replays this table as a noise source.
    pub fn source(&self) -> NoiseReplay<'_> {
        NoiseReplay { draw: self }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseReplay<'a> {
    draw: &'a NoiseDraw,
}

impl NoiseSource for NoiseReplay<'_> {
    fn fill(&mut self, step: usize, _dt: f64, out: &mut [f64]) {
        let row = self.draw.row(step);
        let n = out.len().min(row.len());
        out[..n].copy_from_slice(&row[..n]);
        out[n..].fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_replayable_and_distinct() {
        let a = NoiseDraw::generate(7, tags::ACTUATOR, 3, 50, 2, 0.01);
        let b = NoiseDraw::generate(7, tags::ACTUATOR, 3, 50, 2, 0.01);
        let c = NoiseDraw::generate(7, tags::ACTUATOR, 4, 50, 2, 0.01);
        assert_eq!(a, b);
        assert_ne!(a.row(0), c.row(0));
    }

    #[test]
    fn increments_have_step_variance() {
        let dt = 0.004;
        let draw = NoiseDraw::generate(11, tags::DIAGNOSTIC, 0, 20_000, 1, dt);
        let n = draw.steps() as f64;
        let mean = (0..draw.steps()).map(|i| draw.row(i)[0]).sum::<f64>() / n;
        let var = (0..draw.steps()).map(|i| (draw.row(i)[0] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // Standard error of a sample variance is about var·sqrt(2/n).
        assert!((var - dt).abs() < 4.0 * dt * (2.0 / n).sqrt(), "var {var}");
        assert!(mean.abs() < 4.0 * (dt / n).sqrt());
    }

    #[test]
    fn replay_pads_and_truncates() {
        let draw = NoiseDraw::from_rows(2, vec![1.0, 2.0, 3.0, 4.0]);
        let mut src = draw.source();
        let mut out = [9.0; 3];
        src.fill(1, 0.1, &mut out);
        assert_eq!(out, [3.0, 4.0, 0.0]);
        let mut short = [0.0; 1];
        src.fill(0, 0.1, &mut short);
        assert_eq!(short, [1.0]);
    }
}
