//! Stochastic-gradient Langevin dynamics over the input domain, plus the
//! persistent replay buffer that seeds negative chains during training.

use crate::autodiff::TensorValue;
use crate::error::{Error, Result};
use crate::model::BatchEnergy;
use crate::rng::Stream;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Langevin update x' = x - (a/2) dE/dx + eps, eps ~ N(0, noise_variance),
/// followed by a clamp to the data domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgldConfig {
    pub step_size: f64,
    /// Injected noise variance; `None` ties it to `step_size`.
    pub noise_variance: Option<f64>,
    pub steps: usize,
    pub clamp_min: f64,
    pub clamp_max: f64,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            step_size: 0.075,
            noise_variance: None,
            steps: 60,
            clamp_min: 0.0,
            clamp_max: 1.0,
        }
    }
}

impl SgldConfig {
    /// Longer chain used when drawing samples from a trained model.
    pub fn sampling() -> Self {
        Self {
            steps: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid("step_size", "must be positive and finite"));
        }
        if let Some(v) = self.noise_variance {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(
                    "noise_variance",
                    "must be nonnegative and finite",
                ));
            }
        }
        if !self.clamp_min.is_finite()
            || !self.clamp_max.is_finite()
            || self.clamp_min >= self.clamp_max
        {
            return Err(Error::invalid("clamp", "need finite clamp_min < clamp_max"));
        }
        Ok(())
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance.unwrap_or(self.step_size)
    }
}

/// Run `cfg.steps` Langevin updates on a batch. Noise is drawn per element
/// every step regardless of variance, so trajectories with different noise
/// settings consume the stream identically. Non-finite energies or gradients
/// abort with a divergence error carrying the step index.
pub fn sgld_run(
    energy: &dyn BatchEnergy,
    x0: &TensorValue,
    cfg: &SgldConfig,
    rng: &mut Stream,
) -> Result<TensorValue> {
    cfg.validate()?;
    let half = cfg.step_size / 2.0;
    let noise_std = cfg.noise_variance().sqrt();
    let mut x = x0.clone();
    for step in 0..cfg.steps {
        let (energies, grad) = energy.energy_and_grad(&x).map_err(|e| match e {
            Error::NonFinite { context } => Error::Divergence {
                step: step as u64,
                detail: format!("non-finite {context} during sampling"),
            },
            other => other,
        })?;
        if energies.iter().any(|v| !v.is_finite()) || !grad.all_finite() {
            return Err(Error::Divergence {
                step: step as u64,
                detail: "non-finite energy or gradient during sampling".to_string(),
            });
        }
        for (xi, gi) in x.data_mut().iter_mut().zip(grad.data()) {
            let eps: f64 = rng.sample(StandardNormal);
            *xi = (*xi - half * gi + noise_std * eps).clamp(cfg.clamp_min, cfg.clamp_max);
        }
    }
    Ok(x)
}

/// Persistent reservoir of past negative samples. Holds single examples of a
/// fixed shape; overflow evicts uniformly at random so chain ages follow a
/// geometric profile.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    shape: Option<Vec<usize>>,
    items: Vec<TensorValue>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("capacity", "must be at least 1"));
        }
        Ok(Self {
            capacity,
            shape: None,
            items: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[TensorValue] {
        &self.items
    }

    /// Split a [N, ...] batch into examples and append them, then evict
    /// uniformly random entries until the buffer fits its capacity.
    pub fn push_batch(&mut self, batch: &TensorValue, rng: &mut Stream) -> Result<()> {
        let shape = batch.shape();
        if shape.len() < 2 {
            return Err(Error::shape(
                "replay push",
                "batch of rank >= 2".to_string(),
                format!("{shape:?}"),
            ));
        }
        let per: Vec<usize> = shape[1..].to_vec();
        match &self.shape {
            Some(s) if *s != per => {
                return Err(Error::shape(
                    "replay push",
                    format!("{s:?}"),
                    format!("{per:?}"),
                ));
            }
            None => self.shape = Some(per.clone()),
            _ => {}
        }
        let n = shape[0];
        let stride: usize = per.iter().product();
        for i in 0..n {
            let data = batch.data()[i * stride..(i + 1) * stride].to_vec();
            self.items.push(TensorValue::new(per.clone(), data)?);
        }
        while self.items.len() > self.capacity {
            let idx = rng.gen_range(0..self.items.len());
            self.items.swap_remove(idx);
        }
        Ok(())
    }

    /// Draw an [n, ...] initialization batch: each slot restarts from a
    /// uniform image with probability `reinit_prob` (always, when the buffer
    /// is empty) and otherwise copies a uniformly chosen buffer entry.
    pub fn init_batch(
        &self,
        n: usize,
        shape: &[usize],
        reinit_prob: f64,
        rng: &mut Stream,
    ) -> Result<TensorValue> {
        if n == 0 {
            return Err(Error::invalid("n", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&reinit_prob) {
            return Err(Error::invalid("reinit_prob", "must lie in [0, 1]"));
        }
        if let Some(s) = &self.shape {
            if s.as_slice() != shape {
                return Err(Error::shape(
                    "replay init",
                    format!("{s:?}"),
                    format!("{shape:?}"),
                ));
            }
        }
        let stride: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n * stride);
        for _ in 0..n {
            let fresh = self.items.is_empty() || rng.gen::<f64>() < reinit_prob;
            if fresh {
                data.extend((0..stride).map(|_| rng.gen::<f64>()));
            } else {
                let idx = rng.gen_range(0..self.items.len());
                data.extend_from_slice(self.items[idx].data());
            }
        }
        let mut full = vec![n];
        full.extend_from_slice(shape);
        TensorValue::new(full, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    /// E(x) = 0.5 ||x - c||^2 per example, so dE/dx = x - c.
    struct Quadratic {
        center: f64,
    }

    impl BatchEnergy for Quadratic {
        fn energy_and_grad(&self, x: &TensorValue) -> Result<(Vec<f64>, TensorValue)> {
            let n = x.shape()[0];
            let stride = x.numel() / n;
            let mut energies = Vec::with_capacity(n);
            let mut grad = Vec::with_capacity(x.numel());
            for i in 0..n {
                let row = &x.data()[i * stride..(i + 1) * stride];
                energies.push(row.iter().map(|&v| 0.5 * (v - self.center).powi(2)).sum());
                grad.extend(row.iter().map(|&v| v - self.center));
            }
            Ok((energies, TensorValue::new(x.shape().to_vec(), grad)?))
        }
    }

    struct Broken;

    impl BatchEnergy for Broken {
        fn energy_and_grad(&self, x: &TensorValue) -> Result<(Vec<f64>, TensorValue)> {
            Ok((
                vec![f64::NAN; x.shape()[0]],
                TensorValue::zeros(x.shape().to_vec()),
            ))
        }
    }

    fn pixel(v: f64) -> TensorValue {
        TensorValue::new(vec![1, 1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn hand_step_without_noise() {
        // x' = 1 - (0.1/2) * 1 = 0.95 for the unit quadratic at zero.
        let cfg = SgldConfig {
            step_size: 0.1,
            noise_variance: Some(0.0),
            steps: 1,
            ..SgldConfig::default()
        };
        let mut rng = stream(0, Purpose::Sgld);
        let out = sgld_run(&Quadratic { center: 0.0 }, &pixel(1.0), &cfg, &mut rng).unwrap();
        assert_eq!(out.data()[0], 0.95);
    }

    #[test]
    fn repeated_steps_contract_toward_center() {
        let cfg = SgldConfig {
            step_size: 0.1,
            noise_variance: Some(0.0),
            steps: 200,
            ..SgldConfig::default()
        };
        let mut rng = stream(0, Purpose::Sgld);
        let out = sgld_run(&Quadratic { center: 0.4 }, &pixel(1.0), &cfg, &mut rng).unwrap();
        assert!((out.data()[0] - 0.4).abs() < 1e-4);
    }

    #[test]
    fn deterministic_under_stream_seed() {
        let cfg = SgldConfig::default();
        let x0 = TensorValue::full(vec![3, 1, 2, 2], 0.5);
        let run = |seed: u64| {
            let mut rng = stream(seed, Purpose::Sgld);
            sgld_run(&Quadratic { center: 0.5 }, &x0, &cfg, &mut rng).unwrap()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7).data(), run(8).data());
    }

    #[test]
    fn default_noise_variance_equals_step_size() {
        let explicit = SgldConfig {
            noise_variance: Some(0.075),
            ..SgldConfig::default()
        };
        let tied = SgldConfig::default();
        assert_eq!(tied.noise_variance(), 0.075);
        let x0 = TensorValue::full(vec![2, 1, 2, 2], 0.5);
        let energy = Quadratic { center: 0.5 };
        let mut r1 = stream(3, Purpose::Sgld);
        let mut r2 = stream(3, Purpose::Sgld);
        let a = sgld_run(&energy, &x0, &explicit, &mut r1).unwrap();
        let b = sgld_run(&energy, &x0, &tied, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn iterates_stay_clamped() {
        // A far-away center drags hard against the clamp; every coordinate
        // must remain inside [0, 1] all the same.
        let cfg = SgldConfig {
            step_size: 0.5,
            steps: 50,
            ..SgldConfig::default()
        };
        let x0 = TensorValue::full(vec![4, 1, 2, 2], 0.9);
        let mut rng = stream(11, Purpose::Sgld);
        let out = sgld_run(&Quadratic { center: 30.0 }, &x0, &cfg, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn divergence_reports_step_index() {
        let cfg = SgldConfig::default();
        let mut rng = stream(0, Purpose::Sgld);
        let err = sgld_run(&Broken, &pixel(0.5), &cfg, &mut rng).unwrap_err();
        match err {
            Error::Divergence { step, .. } => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut rng = stream(0, Purpose::Sgld);
        let bad_step = SgldConfig {
            step_size: 0.0,
            ..SgldConfig::default()
        };
        assert!(sgld_run(&Quadratic { center: 0.0 }, &pixel(0.5), &bad_step, &mut rng).is_err());
        let bad_clamp = SgldConfig {
            clamp_min: 1.0,
            clamp_max: 0.0,
            ..SgldConfig::default()
        };
        assert!(sgld_run(&Quadratic { center: 0.0 }, &pixel(0.5), &bad_clamp, &mut rng).is_err());
        let bad_noise = SgldConfig {
            noise_variance: Some(-1.0),
            ..SgldConfig::default()
        };
        assert!(sgld_run(&Quadratic { center: 0.0 }, &pixel(0.5), &bad_noise, &mut rng).is_err());
    }

    #[test]
    fn buffer_capacity_enforced_by_uniform_eviction() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        let mut rng = stream(1, Purpose::Buffer);
        for v in 0..6 {
            let batch = TensorValue::full(vec![5, 1, 2, 2], v as f64 / 10.0);
            buf.push_batch(&batch, &mut rng).unwrap();
        }
        assert_eq!(buf.len(), 10);
        // Later pushes should still be represented after eviction churn.
        assert!(buf
            .items()
            .iter()
            .any(|t| t.data().iter().all(|&x| x == 0.5)));
    }

    #[test]
    fn buffer_rejects_shape_changes() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        let mut rng = stream(1, Purpose::Buffer);
        buf.push_batch(&TensorValue::zeros(vec![2, 1, 2, 2]), &mut rng)
            .unwrap();
        assert!(buf
            .push_batch(&TensorValue::zeros(vec![2, 1, 3, 3]), &mut rng)
            .is_err());
        assert!(buf.init_batch(4, &[1, 3, 3], 0.5, &mut rng).is_err());
    }

    #[test]
    fn empty_buffer_initializes_uniformly() {
        let buf = ReplayBuffer::new(10).unwrap();
        let mut rng = stream(2, Purpose::Buffer);
        let batch = buf.init_batch(8, &[1, 2, 2], 0.05, &mut rng).unwrap();
        assert_eq!(batch.shape(), &[8, 1, 2, 2]);
        assert!(batch.data().iter().all(|&v| (0.0..1.0).contains(&v)));
        let first = batch.data()[0];
        assert!(batch.data().iter().any(|&v| v != first));
    }

    #[test]
    fn init_batch_respects_reinit_probability_extremes() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        let mut rng = stream(3, Purpose::Buffer);
        buf.push_batch(&TensorValue::full(vec![4, 1, 2, 2], 0.25), &mut rng)
            .unwrap();

        let replay = buf.init_batch(6, &[1, 2, 2], 0.0, &mut rng).unwrap();
        assert!(replay.data().iter().all(|&v| v == 0.25));

        let fresh = buf.init_batch(6, &[1, 2, 2], 1.0, &mut rng).unwrap();
        assert!(fresh.data().iter().all(|&v| v != 0.25));
    }
}
