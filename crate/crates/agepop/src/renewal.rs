//! Scalar renewal (Volterra) equation `b(t) = F(t) + ∫_0^t K(t - s, t) b(s) ds`.

use crate::error::{Error, Result};

/// A renewal problem with forcing `F(t)` and kernel `K(age, t)`.
pub struct RenewalProblem<'a> {
    pub forcing: Box<dyn Fn(f64) -> f64 + 'a>,
    pub kernel: Box<dyn Fn(f64, f64) -> f64 + 'a>,
    pub horizon: f64,
}

/// Sampled solution of a renewal problem.
#[derive(Debug, Clone, PartialEq)]
pub struct RenewalSolution {
    pub dt: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl RenewalSolution {
    /// Linear interpolation of `b` at time `t` inside the solved range.
    pub fn at(&self, t: f64) -> Result<f64> {
        let last = *self.times.last().expect("non-empty solution");
        if !(0.0..=last * (1.0 + 1e-12)).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, {last}]")));
        }
        let x = t / self.dt;
        let k = (x.floor() as usize).min(self.values.len() - 2);
        let w = x - k as f64;
        Ok((1.0 - w) * self.values[k] + w * self.values[k + 1])
    }
}

/// Marches the renewal equation with the trapezoid rule on the history.
///
/// The newest value appears on both sides of the discrete equation with
/// weight `dt/2 · K(0, t_n)` and is solved for explicitly.
pub fn solve_renewal(problem: &RenewalProblem<'_>, dt: f64) -> Result<RenewalSolution> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    if !(problem.horizon.is_finite() && problem.horizon > 0.0) {
        return Err(Error::Domain(format!("horizon must be positive, got {}", problem.horizon)));
    }
    let steps = (problem.horizon / dt).round().max(1.0) as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity(steps + 1);
    times.push(0.0);
    values.push((problem.forcing)(0.0));
    for n in 1..=steps {
        let t = n as f64 * dt;
        let mut history = 0.5 * (problem.kernel)(t, t) * values[0];
        for (m, b) in values.iter().enumerate().skip(1) {
            history += (problem.kernel)(t - m as f64 * dt, t) * b;
        }
        let diagonal = 1.0 - 0.5 * dt * (problem.kernel)(0.0, t);
        if diagonal <= 0.0 {
            return Err(Error::Numeric(format!(
                "time step {dt} too large for the kernel at t = {t}"
            )));
        }
        let b = ((problem.forcing)(t) + dt * history) / diagonal;
        if !b.is_finite() {
            return Err(Error::Numeric(format!("renewal solution overflowed at t = {t}")));
        }
        times.push(t);
        values.push(b);
    }
    Ok(RenewalSolution { dt, times, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_problem(f: f64, k: f64, horizon: f64) -> RenewalProblem<'static> {
        RenewalProblem { forcing: Box::new(move |_| f), kernel: Box::new(move |_, _| k), horizon }
    }

    #[test]
    fn zero_kernel_returns_forcing() {
        let sol = solve_renewal(&constant_problem(1.0, 0.0, 1.0), 0.01).unwrap();
        assert!(sol.values.iter().all(|&b| b == 1.0));
    }

    #[test]
    fn constant_kernel_gives_exponential() {
        let sol = solve_renewal(&constant_problem(1.0, 1.0, 2.0), 1e-3).unwrap();
        let b = *sol.values.last().unwrap();
        assert!(((b - 2.0f64.exp()) / 2.0f64.exp()).abs() <= 1e-4);
        assert!((sol.at(1.0).unwrap() - 1.0f64.exp()).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(solve_renewal(&constant_problem(1.0, 1.0, 2.0), 0.0).is_err());
    }
}
