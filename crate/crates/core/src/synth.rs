//! Gaussian-cluster token data for exercising the head end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datastore::{Dataset, Target, TaskMode, TokenEmbeddingSample};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    /// Samples generated for each class.
    pub samples_per_class: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub dim: usize,
    /// Euclidean distance between any two class centers.
    pub separation: f64,
    /// Per-coordinate standard deviation of every token.
    pub noise: f64,
    pub seed: u64,
    /// Attach placeholder token strings (`c{class}_t{index}`).
    pub texts: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            samples_per_class: 100,
            min_tokens: 4,
            max_tokens: 12,
            dim: 16,
            separation: 6.0,
            noise: 1.0,
            seed: 0,
            texts: false,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("synth dim must be positive".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("synth classes must be positive".into()));
        }
        if self.classes > self.dim {
            return Err(Error::Config(format!(
                "cannot place {} equidistant class centers in D={}",
                self.classes, self.dim
            )));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(format!("separation must be >= 0, got {}", self.separation)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "token range {}..={} is invalid",
                self.min_tokens, self.max_tokens
            )));
        }
        Ok(())
    }

    /// Class center `c`: `separation/√2 · e_c`, so every pair is `separation` apart.
    pub fn center(&self, class: usize) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim];
        mu[class] = self.separation / std::f64::consts::SQRT_2;
        mu
    }
}

/// Generates `classes × samples_per_class` samples, interleaved by class.
pub fn synth(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let centers: Vec<Vec<f64>> = (0..spec.classes).map(|c| spec.center(c)).collect();
    let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for i in 0..spec.samples_per_class {
        for (class, mu) in centers.iter().enumerate() {
            let t = rng.random_range(spec.min_tokens..=spec.max_tokens);
            let mut data = Vec::with_capacity(t * spec.dim);
            for _ in 0..t {
                // PLM1 stores f32, so round here to keep the in-memory set identical to its file.
                data.extend(mu.iter().map(|m| (m + normal.sample(&mut rng)) as f32 as f64));
            }
            let token_texts = spec
                .texts
                .then(|| (0..t).map(|k| format!("c{class}_t{k}")).collect());
            samples.push(TokenEmbeddingSample {
                sample_id: i * spec.classes + class,
                tokens: Matrix::from_vec(t, spec.dim, data)?,
                target: Target::Class(class),
                token_texts,
            });
        }
    }
    Dataset::new(samples, spec.dim, spec.classes, TaskMode::Classification)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::encode_dataset;
    use crate::numerics::l2_distance_sq;

    fn mean_token(s: &TokenEmbeddingSample) -> Vec<f64> {
        let mut m = vec![0.0; s.dim()];
        for row in s.tokens.iter_rows() {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b / s.num_tokens() as f64;
            }
        }
        m
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec {
            samples_per_class: 30,
            seed: 7,
            texts: true,
            ..Default::default()
        };
        let a = encode_dataset(&synth(&spec).unwrap()).unwrap();
        let b = encode_dataset(&synth(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = encode_dataset(&synth(&SynthSpec { seed: 8, ..spec }).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn centers_are_equidistant() {
        let spec = SynthSpec {
            classes: 5,
            separation: 3.5,
            ..Default::default()
        };
        for a in 0..5 {
            for b in a + 1..5 {
                let d = l2_distance_sq(&spec.center(a), &spec.center(b)).unwrap().sqrt();
                assert!((d - 3.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn counts_labels_and_token_range() {
        let spec = SynthSpec {
            classes: 3,
            samples_per_class: 10,
            min_tokens: 2,
            max_tokens: 5,
            ..Default::default()
        };
        let ds = synth(&spec).unwrap();
        assert_eq!(ds.len(), 30);
        for c in 0..3 {
            assert_eq!(ds.samples.iter().filter(|s| s.target.class() == c).count(), 10);
        }
        assert!(ds.samples.iter().all(|s| (2..=5).contains(&s.num_tokens())));
        assert!(ds.samples.iter().enumerate().all(|(i, s)| s.sample_id == i));
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        for spec in [
            SynthSpec { dim: 0, ..Default::default() },
            SynthSpec { classes: 17, ..Default::default() },
            SynthSpec { separation: -1.0, ..Default::default() },
            SynthSpec { min_tokens: 0, ..Default::default() },
            SynthSpec { min_tokens: 5, max_tokens: 4, ..Default::default() },
        ] {
            assert!(matches!(synth(&spec), Err(Error::Config(_))), "{spec:?}");
        }
    }

    #[test]
    fn zero_separation_shares_one_center() {
        let spec = SynthSpec {
            separation: 0.0,
            ..Default::default()
        };
        assert_eq!(spec.center(0), spec.center(1));
    }

    // Margin oracle: with separation 10 and D=16 the mean-pooled encodings are
    // split by the perpendicular bisector of the two centers with room to spare.
    #[test]
    fn separation_ten_is_linearly_separable() {
        let spec = SynthSpec {
            separation: 10.0,
            samples_per_class: 200,
            seed: 3,
            ..Default::default()
        };
        let ds = synth(&spec).unwrap();
        let (mu0, mu1) = (spec.center(0), spec.center(1));
        let w: Vec<f64> = mu1.iter().zip(&mu0).map(|(a, b)| a - b).collect();
        let mid: Vec<f64> = mu1.iter().zip(&mu0).map(|(a, b)| (a + b) / 2.0).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut min_margin = f64::INFINITY;
        for s in &ds.samples {
            let m = mean_token(s);
            let proj: f64 = m.iter().zip(&mid).zip(&w).map(|((x, c), w)| (x - c) * w).sum::<f64>() / norm;
            let signed = if s.target.class() == 1 { proj } else { -proj };
            min_margin = min_margin.min(signed);
        }
        assert!(min_margin > 1.0, "margin {min_margin}");
    }
}
