//! DDPM variance schedule and the deterministic DDIM inference path.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Linear-beta forward noising schedule. Noise level (`1 - alpha_bar`)
/// strictly increases with the step index; step 0 is near-identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct NoiseSchedule {
    num_train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    default_sampler_steps: usize,
    alphas_cumprod: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleSpec {
    num_train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    default_sampler_steps: usize,
}

impl TryFrom<ScheduleSpec> for NoiseSchedule {
    type Error = Error;

    fn try_from(s: ScheduleSpec) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(s.num_train_steps, s.beta_start, s.beta_end, s.default_sampler_steps)
    }
}

impl From<NoiseSchedule> for ScheduleSpec {
    fn from(s: NoiseSchedule) -> ScheduleSpec {
        ScheduleSpec {
            num_train_steps: s.num_train_steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            default_sampler_steps: s.default_sampler_steps,
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 0.02, 50).unwrap()
    }
}

impl NoiseSchedule {
    pub fn linear(
        num_train_steps: usize,
        beta_start: f64,
        beta_end: f64,
        default_sampler_steps: usize,
    ) -> Result<NoiseSchedule> {
        if num_train_steps < 2 || default_sampler_steps < 1 {
            return Err(Error::InvalidConfig("schedule needs >= 2 train steps, >= 1 sampler step".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start < beta_end) {
            return Err(Error::InvalidConfig(format!(
                "invalid beta range [{beta_start}, {beta_end}]"
            )));
        }
        if default_sampler_steps > num_train_steps {
            return Err(Error::InvalidConfig(
                "sampler steps cannot exceed train steps".into(),
            ));
        }
        let mut alphas_cumprod = Vec::with_capacity(num_train_steps);
        let mut acc = 1.0;
        for i in 0..num_train_steps {
            let beta = beta_start
                + (beta_end - beta_start) * i as f64 / (num_train_steps as f64 - 1.0);
            acc *= 1.0 - beta;
            alphas_cumprod.push(acc);
        }
        Ok(NoiseSchedule {
            num_train_steps,
            beta_start,
            beta_end,
            default_sampler_steps,
            alphas_cumprod,
        })
    }

    pub fn num_train_steps(&self) -> usize {
        self.num_train_steps
    }

    pub fn default_sampler_steps(&self) -> usize {
        self.default_sampler_steps
    }

    pub fn alpha_bar(&self, step: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(step)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("step {step} out of schedule range")))
    }

    /// Marginal noise variance at `step`: `Var[z_t | z_0] = 1 - alpha_bar`.
    pub fn noise_level(&self, step: usize) -> Result<f64> {
        Ok(1.0 - self.alpha_bar(step)?)
    }

    /// `z_t = sqrt(alpha_bar) z_0 + sqrt(1 - alpha_bar) eps`.
    pub fn add_noise(&self, z0: &ArrayD<f64>, eps: &ArrayD<f64>, step: usize) -> Result<ArrayD<f64>> {
        let ab = self.alpha_bar(step)?;
        Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
    }

    /// Descending timesteps for a `steps`-step DDIM trajectory.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps < 1 || steps > self.num_train_steps {
            return Err(Error::InvalidConfig(format!(
                "sampler steps {steps} outside [1, {}]",
                self.num_train_steps
            )));
        }
        let ratio = self.num_train_steps / steps;
        Ok((0..steps).map(|i| i * ratio).rev().collect())
    }

    /// Deterministic (eta = 0) DDIM update from `step` to `prev_step`;
    /// `prev_step = None` lands on the clean sample.
    pub fn ddim_step(
        &self,
        z_t: &ArrayD<f64>,
        eps_hat: &ArrayD<f64>,
        step: usize,
        prev_step: Option<usize>,
    ) -> Result<ArrayD<f64>> {
        let ab_t = self.alpha_bar(step)?;
        let ab_prev = match prev_step {
            Some(p) => self.alpha_bar(p)?,
            None => 1.0,
        };
        let x0 = (z_t - &(eps_hat * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
        Ok(&x0 * ab_prev.sqrt() + eps_hat * (1.0 - ab_prev).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;

    #[test]
    fn noise_level_is_strictly_increasing_and_near_identity_at_zero() {
        let s = NoiseSchedule::default();
        let mut prev = -1.0;
        for t in 0..s.num_train_steps() {
            let level = s.noise_level(t).unwrap();
            assert!(level > prev, "noise level must strictly increase");
            prev = level;
        }
        assert!(s.noise_level(0).unwrap() < 1e-3);
        assert!(s.noise_level(s.num_train_steps() - 1).unwrap() > 0.99);
    }

    #[test]
    fn add_noise_at_step_zero_is_close_to_identity() {
        let s = NoiseSchedule::default();
        let z0 = ArrayD::from_elem(IxDyn(&[4]), 1.0);
        let eps = ArrayD::from_elem(IxDyn(&[4]), 1.0);
        let z = s.add_noise(&z0, &eps, 0).unwrap();
        for v in z.iter() {
            assert!((v - 1.0).abs() < 0.02, "step-0 corruption should be tiny, got {v}");
        }
    }

    #[test]
    fn monte_carlo_noise_variance_matches_schedule() {
        let s = NoiseSchedule::default();
        let mut rng = crate::indexed_rng(5, 0);
        let dim = 64;
        for &t in &[0usize, 250, 500, 999] {
            let z0 = ArrayD::zeros(IxDyn(&[dim]));
            let mut acc = 0.0;
            let draws = 1000;
            for _ in 0..draws {
                let eps = ArrayD::from_shape_fn(IxDyn(&[dim]), |_| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                let z = s.add_noise(&z0, &eps, t).unwrap();
                acc += z.iter().map(|v| v * v).sum::<f64>() / dim as f64;
            }
            let got = acc / draws as f64;
            let want = s.noise_level(t).unwrap();
            assert!(
                (got - want).abs() < 0.05 * want.max(0.01),
                "t={t}: injected variance {got} vs schedule {want}"
            );
        }
    }

    #[test]
    fn ddim_timesteps_descend_and_step_out_of_range_errors() {
        let s = NoiseSchedule::default();
        let ts = s.ddim_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(s.alpha_bar(1000).is_err());
        assert!(s.ddim_timesteps(0).is_err());
    }

    #[test]
    fn ddim_round_trip_recovers_clean_latent_in_one_step() {
        // With a perfect noise prediction, one DDIM step to alpha_bar = 1
        // inverts add_noise exactly.
        let s = NoiseSchedule::default();
        let z0 = ArrayD::from_shape_fn(IxDyn(&[8]), |i| i.slice()[0] as f64 * 0.1 - 0.4);
        let eps = ArrayD::from_elem(IxDyn(&[8]), 0.7);
        let t = 600;
        let z_t = s.add_noise(&z0, &eps, t).unwrap();
        let rec = s.ddim_step(&z_t, &eps, t, None).unwrap();
        for (a, b) in rec.iter().zip(z0.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn serde_round_trip() {
        let s = NoiseSchedule::linear(500, 2e-4, 0.015, 25).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: NoiseSchedule = serde_json::from_str(&text).unwrap();
        assert_eq!(back.num_train_steps(), 500);
        assert_eq!(back.default_sampler_steps(), 25);
        assert!((back.alpha_bar(499).unwrap() - s.alpha_bar(499).unwrap()).abs() < 1e-15);
    }
}
