//! Closed-form velocity fields for Gaussian data, used as reference models.
//!
//! For data `x0 ~ N(mu, s^2)` per coordinate and the linear path
//! `x_t = (1 - t) x0 + t x1` with `x1 ~ N(0, 1)`, the marginal at time `t` is
//! `N((1 - t) mu, (1 - t)^2 s^2 + t^2)` and the optimal velocity is
//!
//! ```text
//! v(x, t) = E[x1 - x0 | x_t = x]
//!         = (t - (1 - t) s^2) / var_t * (x - (1 - t) mu) - mu
//! ```

use crate::error::{Error, Result};
use crate::velocity::{Condition, VelocityModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianVelocity {
    pub dim: usize,
    pub mean: f64,
    pub std: f64,
}

impl GaussianVelocity {
    pub fn new(dim: usize, mean: f64, std: f64) -> Self {
        Self { dim, mean, std }
    }

    pub fn marginal_mean(&self, t: f64) -> f64 {
        (1.0 - t) * self.mean
    }

    pub fn marginal_var(&self, t: f64) -> f64 {
        let a = 1.0 - t;
        a * a * self.std * self.std + t * t
    }

    pub fn marginal_std(&self, t: f64) -> f64 {
        self.marginal_var(t).sqrt()
    }

    pub fn velocity_at(&self, x: f64, t: f64) -> f64 {
        let s2 = self.std * self.std;
        let gain = (t - (1.0 - t) * s2) / self.marginal_var(t);
        gain * (x - self.marginal_mean(t)) - self.mean
    }
}

impl VelocityModel for GaussianVelocity {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], conds: &[Condition], t: &[f64]) -> Result<Vec<f64>> {
        if x.len() != conds.len() * self.dim || t.len() != conds.len() {
            return Err(Error::shape("gaussian_velocity", "row count mismatch"));
        }
        Ok(x.chunks(self.dim.max(1))
            .zip(t)
            .flat_map(|(row, &ti)| row.iter().map(move |&xi| self.velocity_at(xi, ti)))
            .collect())
    }
}

/// A velocity field given by a per-row closure `f(x_row, condition, t)`.
pub struct FnVelocity<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> VelocityModel for FnVelocity<F>
where
    F: Fn(&[f64], &Condition, f64) -> Vec<f64>,
{
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], conds: &[Condition], t: &[f64]) -> Result<Vec<f64>> {
        if x.len() != conds.len() * self.dim || t.len() != conds.len() {
            return Err(Error::shape("fn_velocity", "row count mismatch"));
        }
        let mut out = Vec::with_capacity(x.len());
        for ((row, c), &ti) in x.chunks(self.dim).zip(conds).zip(t) {
            let v = (self.f)(row, c, ti);
            if v.len() != self.dim {
                return Err(Error::shape("fn_velocity", "closure returned wrong length"));
            }
            out.extend(v);
        }
        Ok(out)
    }
}
