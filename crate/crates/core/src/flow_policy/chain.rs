use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};

use super::HybridSchedule;

/// Log-density of `N(0, I)` evaluated row by row.
pub fn standard_normal_logpdf(x: &Array2<f64>) -> Array1<f64> {
    let d = x.ncols() as f64;
    x.map_axis(Axis(1), |row| -0.5 * d * (2.0 * PI).ln() - 0.5 * row.dot(&row))
}

/// Log-density of one tail transition. Given the noise `eps` and the scales
/// `sigma` that produced it, `log N(u'; u + v dt, diag(sigma^2))` reduces to
/// `sum_j [-ln(2 pi)/2 - ln sigma_j - eps_j^2 / 2]`.
pub fn tail_step_logpdf(sigma: &Array2<f64>, eps: &Array2<f64>) -> Array1<f64> {
    let d = sigma.ncols() as f64;
    let mut out = Array1::from_elem(sigma.nrows(), -0.5 * d * (2.0 * PI).ln());
    for ((o, s), e) in out.iter_mut().zip(sigma.rows()).zip(eps.rows()) {
        *o -= s.iter().map(|x| x.ln()).sum::<f64>() + 0.5 * e.dot(&e);
    }
    out
}

/// Full generation record for a batch of samples (rows).
#[derive(Debug, Clone)]
pub struct LatentChain {
    pub schedule: HybridSchedule,
    /// `u_0 ..= u_K`.
    pub u: Vec<Array2<f64>>,
    /// Noise for tail steps `K-L .. K`, in order.
    pub noises: Vec<Array2<f64>>,
    pub velocities: Vec<Array2<f64>>,
    pub sigmas: Vec<Array2<f64>>,
    pub prior_logp: Array1<f64>,
    pub tail_logps: Vec<Array1<f64>>,
}

impl LatentChain {
    pub fn batch_size(&self) -> usize {
        self.prior_logp.len()
    }

    /// `u_K`, which is the action.
    pub fn action(&self) -> &Array2<f64> {
        &self.u[self.u.len() - 1]
    }

    pub fn prior(&self) -> &Array2<f64> {
        &self.u[0]
    }

    /// `u_{k_c}`, where the tail starts.
    pub fn cutoff_state(&self) -> &Array2<f64> {
        &self.u[self.schedule.cutoff()]
    }

    /// Sum of the tail log-densities only.
    pub fn tail_logp(&self) -> Array1<f64> {
        let mut total = Array1::zeros(self.batch_size());
        for lp in &self.tail_logps {
            total += lp;
        }
        total
    }

    /// Prior log-density plus every tail transition log-density; the volume
    /// change of the deterministic prefix is left out.
    pub fn surrogate_logp(&self) -> Array1<f64> {
        &self.prior_logp + &self.tail_logp()
    }

    pub fn mean_sigma(&self) -> f64 {
        if self.sigmas.is_empty() {
            return 0.0;
        }
        self.sigmas.iter().map(|s| s.mean().unwrap_or(0.0)).sum::<f64>() / self.sigmas.len() as f64
    }
}

/// Free-function form of [`LatentChain::surrogate_logp`].
pub fn surrogate_logp(chain: &LatentChain) -> Array1<f64> {
    chain.surrogate_logp()
}
