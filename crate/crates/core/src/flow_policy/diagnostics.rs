//! Numerical checks on the learned transport: divergence of the velocity
//! field, the log-density change the surrogate leaves out along the
//! deterministic prefix, and path straightness.

use ndarray::{Array1, Array2, Axis, Zip};

use super::FlowPolicy;
use crate::error::{Result, TrfpError};

const FD_STEP: f64 = 1e-4;

/// `div_u v(s, u, t)` per row by central differences.
pub fn estimate_divergence(policy: &FlowPolicy, s: &Array2<f64>, u: &Array2<f64>, t: f64) -> Result<Array1<f64>> {
    let mut div = Array1::zeros(u.nrows());
    for j in 0..u.ncols() {
        let mut up = u.clone();
        up.column_mut(j).mapv_inplace(|x| x + FD_STEP);
        let mut dn = u.clone();
        dn.column_mut(j).mapv_inplace(|x| x - FD_STEP);
        let vu = policy.velocity(s, &up, t)?;
        let vd = policy.velocity(s, &dn, t)?;
        div += &((&vu.column(j) - &vd.column(j)) / (2.0 * FD_STEP));
    }
    Ok(div)
}

/// Log-density change along the prefix ODE, per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixDensityChange {
    /// `-int_0^tau div v dt` by the trapezoid rule.
    pub delta_pre: Array1<f64>,
    /// Largest `|div v|` seen on the substep grid.
    pub max_abs_div: Array1<f64>,
    pub tau: f64,
}

impl PrefixDensityChange {
    /// `|delta_pre| <= max |div v| * tau` for every row.
    pub fn bound_holds(&self) -> Vec<bool> {
        Zip::from(&self.delta_pre)
            .and(&self.max_abs_div)
            .map_collect(|d, m| d.abs() <= m * self.tau * (1.0 + 1e-12) + 1e-15)
            .to_vec()
    }
}

/// Integrates the ODE from `u_0` to `tau` with `substeps` Heun steps, and the
/// negative divergence along it with the trapezoid rule.
pub fn prefix_logdensity_error(
    policy: &FlowPolicy,
    s: &Array2<f64>,
    u0: &Array2<f64>,
    tau: f64,
    substeps: usize,
) -> Result<PrefixDensityChange> {
    if substeps < 10 {
        return Err(TrfpError::Usage(format!("need at least 10 substeps, got {substeps}")));
    }
    let h = tau / substeps as f64;
    let mut u = u0.clone();
    let mut div = estimate_divergence(policy, s, &u, 0.0)?;
    let mut max_abs = div.mapv(f64::abs);
    let mut integral = Array1::zeros(u.nrows());
    for k in 0..substeps {
        let t = k as f64 * h;
        u = policy.heun_prefix_step(s, &u, t, h)?;
        let next = estimate_divergence(policy, s, &u, t + h)?;
        integral += &((&div + &next) * (0.5 * h));
        Zip::from(&mut max_abs).and(&next).for_each(|m, d| *m = m.max(d.abs()));
        div = next;
    }
    Ok(PrefixDensityChange {
        delta_pre: -integral,
        max_abs_div: max_abs,
        tau,
    })
}

/// Largest distance of any trajectory point from the chord `u_0 -> u_K`,
/// relative to the chord length; 0 for a straight or degenerate path.
pub fn straightness(trajectory: &[Array2<f64>]) -> Array1<f64> {
    let Some((first, last)) = trajectory.first().zip(trajectory.last()) else {
        return Array1::zeros(0);
    };
    let chord = last - first;
    let len = chord.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut worst = Array1::<f64>::zeros(first.nrows());
    for point in trajectory {
        let rel = point - first;
        for i in 0..first.nrows() {
            if len[i] == 0.0 {
                continue;
            }
            let c = chord.row(i);
            let r = rel.row(i);
            let along = (r.dot(&c) / (len[i] * len[i])).clamp(0.0, 1.0);
            let dist = (&r - &(&c * along)).mapv(|x| x * x).sum().sqrt();
            worst[i] = worst[i].max(dist);
        }
    }
    Zip::from(&mut worst).and(&len).for_each(|w, &l| {
        *w = if l == 0.0 { 0.0 } else { *w / l };
    });
    worst
}

/// Batch-level departure from constant velocity: over all rows and steps,
/// `sum ||K (u_{k+1} - u_k) - (u_K - u_0)||^2 / K` divided by
/// `sum ||u_K - u_0||^2`. Zero when every path is traversed at constant
/// speed along its chord; unlike [`straightness`] it also sees speed changes
/// along a line, which is the only kind of bend a 1-D path can have.
pub fn path_deviation(trajectory: &[Array2<f64>]) -> f64 {
    if trajectory.len() < 2 {
        return 0.0;
    }
    let k = (trajectory.len() - 1) as f64;
    let chord = &trajectory[trajectory.len() - 1] - &trajectory[0];
    let den: f64 = chord.iter().map(|x| x * x).sum();
    if den == 0.0 {
        return 0.0;
    }
    let num: f64 = trajectory
        .windows(2)
        .map(|w| ((&w[1] - &w[0]) * k - &chord).iter().map(|x| x * x).sum::<f64>() / k)
        .sum();
    num / den
}
