use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

/// Linear-beta variance-preserving schedule on `t in [0, 1]`, discretised
/// into `steps` uniform intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleParams", into = "ScheduleParams")]
pub struct NoiseSchedule {
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ScheduleParams {
    steps: usize,
    beta_min: f64,
    beta_max: f64,
}

impl TryFrom<ScheduleParams> for NoiseSchedule {
    type Error = crate::Error;
    fn try_from(p: ScheduleParams) -> Result<Self> {
        NoiseSchedule::new(p.steps, p.beta_min, p.beta_max)
    }
}

impl From<NoiseSchedule> for ScheduleParams {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleParams { steps: s.steps, beta_min: s.beta_min, beta_max: s.beta_max }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(1000, 0.1, 20.0).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(beta_min >= 0.0 && beta_max >= 0.0 && beta_min.is_finite() && beta_max.is_finite()) {
            return Err(invalid(format!("betas must be finite and nonnegative, got [{beta_min}, {beta_max}]")));
        }
        // alpha_bar(1) in (0, 1) requires some noise.
        if beta_min + beta_max <= 0.0 {
            return Err(invalid("beta_min + beta_max must be positive"));
        }
        let mut s = Self { steps, beta_min, beta_max, alpha_bar: Vec::new(), beta: Vec::new() };
        s.alpha_bar = (0..=steps).map(|i| s.alpha_bar_at(s.time(i))).collect();
        s.beta = (0..=steps).map(|i| s.beta_at(s.time(i))).collect();
        Ok(s)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    /// Grid time `t_i = i / T`.
    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn beta_at(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `exp(-integral_0^t beta(s) ds)`.
    pub fn alpha_bar_at(&self, t: f64) -> f64 {
        (-(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t)).exp()
    }

    /// Tabulated `alpha_bar(t_i)` for `i = 0..=T`.
    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_table(&self) -> &[f64] {
        &self.beta
    }

    /// Drift `f(x, t) = -beta(t) x / 2`.
    pub fn drift(&self, x: &[f64], t: f64) -> Vec<f64> {
        let c = -0.5 * self.beta_at(t);
        x.iter().map(|v| c * v).collect()
    }

    /// Diffusion coefficient `g(t) = sqrt(beta(t))`.
    pub fn diffusion(&self, t: f64) -> f64 {
        self.beta_at(t).sqrt()
    }

    /// Stable digest of the schedule parameters, stamped into checkpoints.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.steps as u64).to_le_bytes());
        h.update(self.beta_min.to_le_bytes());
        h.update(self.beta_max.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn alpha_bar_matches_quadrature_of_beta() {
        let s = NoiseSchedule::new(1000, 0.1, 20.0).unwrap();
        for &t in &[0.0, 0.1, 0.37, 0.5, 0.9, 1.0] {
            let integral = simpson(|u| s.beta_at(u), 0.0, t, 200);
            let oracle = (-integral).exp();
            assert!((s.alpha_bar_at(t) - oracle).abs() <= 1e-12 * oracle.max(1e-300), "t={t}");
        }
        // alpha_bar(1) = exp(-10.05)
        assert!((s.alpha_bar_at(1.0) - (-10.05f64).exp()).abs() < 1e-18);
    }

    #[test]
    fn tables_are_strictly_decreasing_with_unit_start() {
        let s = NoiseSchedule::new(50, 0.1, 20.0).unwrap();
        let ab = s.alpha_bar_table();
        assert_eq!(ab.len(), 51);
        assert_eq!(ab[0], 1.0);
        assert!(ab.windows(2).all(|w| w[1] < w[0]));
        assert!(ab[50] > 0.0 && ab[50] < 1.0);
        assert!(s.beta_table().iter().all(|&b| b >= 0.0));
    }

    #[test]
    fn rejects_degenerate_parameters() {
        assert!(NoiseSchedule::new(0, 0.1, 20.0).is_err());
        assert!(NoiseSchedule::new(10, -0.1, 20.0).is_err());
        assert!(NoiseSchedule::new(10, 0.0, 0.0).is_err());
    }

    #[test]
    fn serde_round_trip_rebuilds_tables() {
        let s = NoiseSchedule::new(20, 0.1, 20.0).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"steps":20,"beta_min":0.1,"beta_max":20.0}"#);
        let back: NoiseSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
