use ndarray::{Array1, Array2};

use crate::diffcore::{AdamState, NamedTensor, TensorStore};
use crate::error::{Result, TrfpError};

/// Learned entropy temperature, stored as `log_alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct Temperature {
    pub log_alpha: f64,
    pub target_entropy: f64,
    adam: AdamState,
}

impl Temperature {
    pub fn new(init_alpha: f64, target_entropy: f64) -> Result<Self> {
        if !(init_alpha > 0.0 && init_alpha.is_finite()) {
            return Err(TrfpError::Usage(format!("initial alpha must be positive, got {init_alpha}")));
        }
        Ok(Self {
            log_alpha: init_alpha.ln(),
            target_entropy,
            adam: AdamState::for_params(&[Array2::zeros((1, 1))]),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// `mean[-alpha (logp + target)]` with `logp` treated as data.
    pub fn loss(&self, logp: &Array1<f64>) -> f64 {
        -self.alpha() * (logp.mean().unwrap_or(0.0) + self.target_entropy)
    }

    /// Derivative of [`Temperature::loss`] in `log_alpha`; the loss is
    /// linear in `alpha`, so this equals the loss itself.
    pub fn grad(&self, logp: &Array1<f64>) -> f64 {
        self.loss(logp)
    }

    /// One Adam step on `log_alpha`; `lr = 0` leaves it frozen. Returns the
    /// loss before the step.
    pub fn update(&mut self, logp: &Array1<f64>, lr: f64, clip: f64) -> Result<f64> {
        let loss = self.loss(logp);
        if lr == 0.0 {
            return Ok(loss);
        }
        let g = self.grad(logp).clamp(-clip, clip);
        let mut p = [Array2::from_elem((1, 1), self.log_alpha)];
        self.adam.step(&mut p, &[Array2::from_elem((1, 1), g)], lr)?;
        self.log_alpha = p[0][[0, 0]];
        Ok(loss)
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        vec![
            NamedTensor::scalar(format!("{prefix}.log_alpha"), self.log_alpha),
            NamedTensor::scalar(format!("{prefix}.target_entropy"), self.target_entropy),
            NamedTensor::scalar(format!("{prefix}.adam_step"), self.adam.step as f64),
            NamedTensor::matrix(format!("{prefix}.adam_m"), &self.adam.m[0]),
            NamedTensor::matrix(format!("{prefix}.adam_v"), &self.adam.v[0]),
        ]
    }

    pub fn from_tensors(store: &TensorStore, prefix: &str) -> Result<Self> {
        let mut t = Self {
            log_alpha: store.scalar(&format!("{prefix}.log_alpha"))?,
            target_entropy: store.scalar(&format!("{prefix}.target_entropy"))?,
            adam: AdamState::for_params(&[Array2::zeros((1, 1))]),
        };
        t.adam.step = store.scalar(&format!("{prefix}.adam_step"))? as u64;
        t.adam.m[0] = store.matrix(&format!("{prefix}.adam_m"))?;
        t.adam.v[0] = store.matrix(&format!("{prefix}.adam_v"))?;
        Ok(t)
    }
}
