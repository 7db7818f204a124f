//! Conversational Walk query workload.
//!
//! Starting from a random unit vector, each step either drifts (probability
//! `1 - jump_probability`) or jumps to a fresh random direction. Two drift
//! rules are provided:
//!
//! * [`Drift::Gaussian`]: `normalize(q + step * g)` with `g ~ N(0, I)`. The
//!   perturbation has norm about `step * sqrt(dim)`, so at dim 768 and step
//!   0.05 one step already moves the query to similarity about 0.59.
//! * [`Drift::UnitStep`]: `normalize(q + step * u)` with `u` a uniformly
//!   random unit vector, a dimension-independent step of similarity about
//!   `1 / sqrt(1 + step^2)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{gaussian, normalize, random_unit, rng};

pub const DEFAULT_STEP: f32 = 0.05;
pub const DEFAULT_JUMP_PROBABILITY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Drift {
    Gaussian,
    UnitStep,
}

impl Drift {
    pub fn name(self) -> &'static str {
        match self {
            Drift::Gaussian => "gaussian",
            Drift::UnitStep => "unit-step",
        }
    }
}

pub struct ConversationalWalk {
    rng: ChaCha8Rng,
    current: Vec<f32>,
    drift: Drift,
    step: f32,
    jump_probability: f64,
    started: bool,
}

impl ConversationalWalk {
    pub fn new(dim: usize, drift: Drift, seed: u64) -> ConversationalWalk {
        let mut r = rng(seed);
        let current = random_unit(&mut r, dim);
        ConversationalWalk {
            rng: r,
            current,
            drift,
            step: DEFAULT_STEP,
            jump_probability: DEFAULT_JUMP_PROBABILITY,
            started: false,
        }
    }

    pub fn with_step(mut self, step: f32) -> Self {
        self.step = step;
        self
    }
}

impl Iterator for ConversationalWalk {
    type Item = Vec<f32>;

    fn next(&mut self) -> Option<Vec<f32>> {
        if !self.started {
            self.started = true;
            return Some(self.current.clone());
        }
        let dim = self.current.len();
        if self.rng.gen_bool(self.jump_probability) {
            self.current = random_unit(&mut self.rng, dim);
        } else {
            let dir = match self.drift {
                Drift::Gaussian => gaussian(&mut self.rng, dim),
                Drift::UnitStep => random_unit(&mut self.rng, dim),
            };
            for (q, d) in self.current.iter_mut().zip(&dir) {
                *q += self.step * d;
            }
            normalize(&mut self.current);
        }
        Some(self.current.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use aeon_core::kernels::{dot_f32, is_normalized};

    fn mean_step_similarity(drift: Drift, dim: usize) -> f32 {
        let qs: Vec<Vec<f32>> = ConversationalWalk::new(dim, drift, 5).take(2000).collect();
        let sims: Vec<f32> = qs.windows(2).map(|w| dot_f32(&w[0], &w[1])).filter(|s| *s > 0.3).collect();
        sims.iter().sum::<f32>() / sims.len() as f32
    }

    #[test]
    fn steps_are_unit_and_deterministic() {
        let a: Vec<Vec<f32>> = ConversationalWalk::new(32, Drift::Gaussian, 1).take(50).collect();
        let b: Vec<Vec<f32>> = ConversationalWalk::new(32, Drift::Gaussian, 1).take(50).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|q| is_normalized(q)));
    }

    #[test]
    fn step_similarity_matches_the_closed_forms() {
        let unit = mean_step_similarity(Drift::UnitStep, 768);
        assert!((unit - 1.0 / (1.0f32 + 0.0025).sqrt()).abs() < 1e-3, "{unit}");
        let gauss = mean_step_similarity(Drift::Gaussian, 768);
        let expected = 1.0 / (1.0f32 + 0.0025 * 768.0).sqrt();
        assert!((gauss - expected).abs() < 0.02, "{gauss} vs {expected}");
    }
}
