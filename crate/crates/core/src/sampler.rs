//! ODE and SDE samplers over a decreasing time grid, the Gaussian transition
//! kernel of the stochastic sampler, and classifier-free guidance.
//!
//! Time runs from `t = 1` (noise) to `t = 0` (data). Every step has a signed
//! increment `dt = t_{k+1} - t_k < 0`. One SDE step is
//!
//! ```text
//! mean = x + [v + sigma^2 / (2 t) * (x + (1 - t) v)] * dt
//! x'   = mean + sigma * sqrt(|dt|) * eps
//! ```
//!
//! which keeps the marginals of the deterministic flow. Log-densities are
//! averaged over latent dimensions rather than summed.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::io::{read_f64s, write_f64s};
use crate::velocity::{Condition, VelocityField, VelocityModel};

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// `steps + 1` equally spaced times from exactly 1 down to exactly 0.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "time grid needs >= 2 steps, got {steps}"
            )));
        }
        let times = (0..=steps)
            .map(|k| (steps - k) as f64 / steps as f64)
            .collect();
        Ok(Self { times })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        let ok = times.len() >= 3
            && times[0] == 1.0
            && *times.last().unwrap() == 0.0
            && times.windows(2).all(|w| w[1] < w[0]);
        if !ok {
            return Err(Error::InvalidArgument(
                "time grid must decrease strictly from 1 to 0 with >= 2 steps".into(),
            ));
        }
        Ok(Self { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn t(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub eta: f64,
    pub t_max_eval: f64,
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        Self {
            eta: 0.7,
            t_max_eval: 0.98,
        }
    }
}

impl SigmaSchedule {
    pub fn new(eta: f64) -> Self {
        Self {
            eta,
            ..Self::default()
        }
    }
}

/// `eta * sqrt(t / (1 - t))` with `t` clamped to `t_max_eval`.
pub fn sigma(schedule: &SigmaSchedule, t: f64) -> Result<f64> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::TimeOutOfRange(t));
    }
    if schedule.eta < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "negative noise level {}",
            schedule.eta
        )));
    }
    if schedule.eta == 0.0 {
        return Ok(0.0);
    }
    let tc = t.min(schedule.t_max_eval);
    Ok(schedule.eta * (tc / (1.0 - tc)).sqrt())
}

/// The kernel written as `mean = x_coef * x + v_coef * v`, `std` per dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionCoeffs {
    pub t: f64,
    pub dt: f64,
    pub sigma: f64,
    pub x_coef: f64,
    pub v_coef: f64,
    pub std: f64,
}

pub fn transition_coeffs(schedule: &SigmaSchedule, t: f64, dt: f64) -> Result<TransitionCoeffs> {
    if dt.is_nan() || dt >= 0.0 || t + dt < -1e-12 {
        return Err(Error::InvalidArgument(format!(
            "step dt={dt} from t={t} must move toward 0"
        )));
    }
    let s = sigma(schedule, t)?;
    let k = s * s / (2.0 * t);
    Ok(TransitionCoeffs {
        t,
        dt,
        sigma: s,
        x_coef: 1.0 + k * dt,
        v_coef: (1.0 + k * (1.0 - t)) * dt,
        std: s * dt.abs().sqrt(),
    })
}

pub fn transition_mean(x: &[f64], v: &[f64], c: &TransitionCoeffs) -> Vec<f64> {
    x.iter()
        .zip(v)
        .map(|(&xi, &vi)| c.x_coef * xi + c.v_coef * vi)
        .collect()
}

fn logprob_consts(std: f64) -> (f64, f64) {
    let var = std * std;
    (-0.5 / var, -0.5 * (2.0 * std::f64::consts::PI * var).ln())
}

/// `(1/N) * sum_j log N(x_to_j; mean_j, std^2)`.
pub fn gaussian_logprob(x_to: &[f64], mean: &[f64], std: f64) -> Result<f64> {
    if std <= 0.0 {
        return Err(Error::ZeroStd);
    }
    let (w, c0) = logprob_consts(std);
    let total: f64 = x_to
        .iter()
        .zip(mean)
        .map(|(&a, &m)| {
            let d = a - m;
            d * d * w + c0
        })
        .sum();
    Ok(total / x_to.len() as f64)
}

/// `v_null + s (v_cond - v_null)`, evaluated as `(1 - s) v_null + s v_cond`.
/// A scale of exactly 1 skips the unconditional pass.
pub fn guided_velocity(
    model: &dyn VelocityModel,
    x: &[f64],
    conds: &[Condition],
    t: &[f64],
    cfg_scale: f64,
) -> Result<Vec<f64>> {
    if cfg_scale < 0.0 {
        return Err(Error::InvalidArgument(format!("cfg scale {cfg_scale} < 0")));
    }
    let v_cond = model.velocity(x, conds, t)?;
    if cfg_scale == 1.0 {
        return Ok(v_cond);
    }
    let nulls: Vec<Condition> = conds.iter().map(Condition::to_null).collect();
    let v_null = model.velocity(x, &nulls, t)?;
    Ok(combine_guidance(&v_cond, &v_null, cfg_scale))
}

pub fn combine_guidance(v_cond: &[f64], v_null: &[f64], cfg_scale: f64) -> Vec<f64> {
    v_null
        .iter()
        .zip(v_cond)
        .map(|(&n, &c)| n * (1.0 - cfg_scale) + c * cfg_scale)
        .collect()
}

/// Differentiable counterpart of [`guided_velocity`] with identical arithmetic.
pub fn guided_velocity_graph(
    model: &VelocityField,
    g: &mut Graph,
    x: NodeId,
    conds: &[Condition],
    t: &[f64],
    cfg_scale: f64,
) -> Result<NodeId> {
    if cfg_scale < 0.0 {
        return Err(Error::InvalidArgument(format!("cfg scale {cfg_scale} < 0")));
    }
    let v_cond = model.forward(g, x, conds, t)?;
    if cfg_scale == 1.0 {
        return Ok(v_cond);
    }
    let nulls: Vec<Condition> = conds.iter().map(Condition::to_null).collect();
    let v_null = model.forward(g, x, &nulls, t)?;
    let a = g.scale(v_null, 1.0 - cfg_scale)?;
    let b = g.scale(v_cond, cfg_scale)?;
    g.add(a, b)
}

/// Per-row expansion of a scalar into an `[rows, n]` constant.
fn row_constant(g: &mut Graph, per_row: &[f64], n: usize) -> Result<NodeId> {
    let data = per_row
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, n))
        .collect();
    g.constant(vec![per_row.len(), n], data)
}

/// Transition means `x_coef * x + v_coef * v` for a batch of rows, with `v`
/// a graph node. Matches [`transition_mean`] bit for bit.
pub fn transition_mean_graph(
    g: &mut Graph,
    x_from: &[f64],
    v: NodeId,
    coeffs: &[TransitionCoeffs],
) -> Result<NodeId> {
    let rows = coeffs.len();
    let n = x_from.len() / rows.max(1);
    let ax: Vec<f64> = x_from
        .chunks(n)
        .zip(coeffs)
        .flat_map(|(row, c)| row.iter().map(move |&xi| c.x_coef * xi))
        .collect();
    let ax = g.constant(vec![rows, n], ax)?;
    let b: Vec<f64> = coeffs.iter().map(|c| c.v_coef).collect();
    let b = row_constant(g, &b, n)?;
    let bv = g.mul(b, v)?;
    g.add(ax, bv)
}

/// Per-row averaged Gaussian log-density of `x_to` under `mean` (a graph
/// node). Matches [`gaussian_logprob`] bit for bit.
pub fn logprob_graph(g: &mut Graph, mean: NodeId, x_to: &[f64], stds: &[f64]) -> Result<NodeId> {
    if stds.iter().any(|&s| s <= 0.0) {
        return Err(Error::ZeroStd);
    }
    let rows = stds.len();
    let n = x_to.len() / rows.max(1);
    let target = g.constant(vec![rows, n], x_to.to_vec())?;
    let d = g.sub(target, mean)?;
    let sq = g.square(d)?;
    let (w, c0): (Vec<f64>, Vec<f64>) = stds.iter().map(|&s| logprob_consts(s)).unzip();
    let w = row_constant(g, &w, n)?;
    let c0 = row_constant(g, &c0, n)?;
    let q = g.mul(sq, w)?;
    let q = g.add(q, c0)?;
    g.mean_cols(q)
}

/// Mean vector and per-dimension std of the one-step kernel from `x_t`.
pub fn sde_transition(
    model: &dyn VelocityModel,
    x_t: &[f64],
    c: &Condition,
    t: f64,
    dt: f64,
    schedule: &SigmaSchedule,
    cfg_scale: f64,
) -> Result<(Vec<f64>, f64)> {
    let co = transition_coeffs(schedule, t, dt)?;
    let v = guided_velocity(model, x_t, std::slice::from_ref(c), &[t], cfg_scale)?;
    Ok((transition_mean(x_t, &v, &co), co.std))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeStep {
    pub next: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: f64,
    pub log_density: Option<f64>,
    pub noise: Vec<f64>,
}

/// One stochastic step with caller-supplied standard-normal noise.
#[allow(clippy::too_many_arguments)]
pub fn sde_step_with_noise(
    model: &dyn VelocityModel,
    x_t: &[f64],
    c: &Condition,
    t: f64,
    dt: f64,
    schedule: &SigmaSchedule,
    cfg_scale: f64,
    noise: &[f64],
    record_density: bool,
) -> Result<SdeStep> {
    let (mean, std) = sde_transition(model, x_t, c, t, dt, schedule, cfg_scale)?;
    if noise.len() != mean.len() {
        return Err(Error::shape("sde_step", "noise length differs from latent"));
    }
    let next: Vec<f64> = mean.iter().zip(noise).map(|(&m, &e)| m + std * e).collect();
    let log_density = if record_density {
        Some(gaussian_logprob(&next, &mean, std)?)
    } else {
        None
    };
    Ok(SdeStep {
        next,
        mean,
        std,
        log_density,
        noise: noise.to_vec(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn sde_step<R: Rng>(
    model: &dyn VelocityModel,
    x_t: &[f64],
    c: &Condition,
    t: f64,
    dt: f64,
    schedule: &SigmaSchedule,
    cfg_scale: f64,
    rng: &mut R,
    record_density: bool,
) -> Result<SdeStep> {
    let noise: Vec<f64> = (0..x_t.len()).map(|_| rng.sample(StandardNormal)).collect();
    sde_step_with_noise(
        model,
        x_t,
        c,
        t,
        dt,
        schedule,
        cfg_scale,
        &noise,
        record_density,
    )
}

/// One denoising trajectory from `t = 1` to `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `steps + 1` latents; `latents[0]` is the initial noise.
    pub latents: Vec<Vec<f64>>,
    /// Behavior log-density of each transition (SDE rollouts only).
    pub log_densities: Option<Vec<f64>>,
    /// Standard-normal noise injected at each step (empty for ODE samples).
    pub noises: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub condition: Condition,
    pub init_seed: u64,
    pub noise_seed: u64,
    pub policy_version: u64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn final_latent(&self) -> &[f64] {
        self.latents.last().expect("trajectory has latents")
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::from_times(self.times.clone())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"TGTRAJ01")?;
        w.write_u64::<LittleEndian>(self.init_seed)?;
        w.write_u64::<LittleEndian>(self.noise_seed)?;
        w.write_u64::<LittleEndian>(self.policy_version)?;
        write_f64s(w, &self.times)?;
        write_condition(w, &self.condition)?;
        w.write_u32::<LittleEndian>(self.latents.len() as u32)?;
        for l in &self.latents {
            write_f64s(w, l)?;
        }
        w.write_u32::<LittleEndian>(self.noises.len() as u32)?;
        for e in &self.noises {
            write_f64s(w, e)?;
        }
        match &self.log_densities {
            Some(ld) => {
                w.write_u8(1)?;
                write_f64s(w, ld)?;
            }
            None => w.write_u8(0)?,
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"TGTRAJ01" {
            return Err(Error::Format("bad trajectory magic".into()));
        }
        let init_seed = r.read_u64::<LittleEndian>()?;
        let noise_seed = r.read_u64::<LittleEndian>()?;
        let policy_version = r.read_u64::<LittleEndian>()?;
        let times = read_f64s(r)?;
        let condition = read_condition(r)?;
        let nl = r.read_u32::<LittleEndian>()? as usize;
        let latents = (0..nl).map(|_| read_f64s(r)).collect::<Result<Vec<_>>>()?;
        let ne = r.read_u32::<LittleEndian>()? as usize;
        let noises = (0..ne).map(|_| read_f64s(r)).collect::<Result<Vec<_>>>()?;
        let log_densities = match r.read_u8()? {
            0 => None,
            1 => Some(read_f64s(r)?),
            x => return Err(Error::Format(format!("bad density flag {x}"))),
        };
        if latents.len() != times.len() {
            return Err(Error::Format(
                "latent count does not match time grid".into(),
            ));
        }
        Ok(Self {
            latents,
            log_densities,
            noises,
            times,
            condition,
            init_seed,
            noise_seed,
            policy_version,
        })
    }
}

pub(crate) fn write_condition<W: Write>(w: &mut W, c: &Condition) -> Result<()> {
    write_f64s(w, &c.first_frame)?;
    w.write_u32::<LittleEndian>(c.style_id as u32)?;
    w.write_u8(u8::from(c.null_flag))?;
    Ok(())
}

pub(crate) fn read_condition<R: Read>(r: &mut R) -> Result<Condition> {
    let first_frame = read_f64s(r)?;
    let style_id = r.read_u32::<LittleEndian>()? as usize;
    let null_flag = r.read_u8()? != 0;
    Ok(Condition {
        first_frame,
        style_id,
        null_flag,
    })
}

/// Input for one rollout in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRequest {
    pub condition: Condition,
    pub x1: Vec<f64>,
    pub init_seed: u64,
    pub noise_seed: u64,
}

/// Standard-normal initial latent derived from `seed`.
pub fn initial_noise(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Deterministic Euler integration of the ODE for a batch of rows. Rows are
/// evaluated together but never interact.
pub fn ode_sample_batch(
    model: &dyn VelocityModel,
    requests: &[RolloutRequest],
    grid: &TimeGrid,
    cfg_scale: f64,
    policy_version: u64,
) -> Result<Vec<Trajectory>> {
    run_batch::<ChaCha8Rng>(
        model,
        requests,
        grid,
        None,
        cfg_scale,
        false,
        policy_version,
        None,
    )
}

/// Stochastic rollouts for a batch of rows; row `i` draws its noise from a
/// stream seeded with `requests[i].noise_seed`.
pub fn sde_sample_batch(
    model: &dyn VelocityModel,
    requests: &[RolloutRequest],
    grid: &TimeGrid,
    schedule: &SigmaSchedule,
    cfg_scale: f64,
    record_density: bool,
    policy_version: u64,
) -> Result<Vec<Trajectory>> {
    let mut rngs: Vec<ChaCha8Rng> = requests
        .iter()
        .map(|r| ChaCha8Rng::seed_from_u64(r.noise_seed))
        .collect();
    run_batch(
        model,
        requests,
        grid,
        Some(schedule),
        cfg_scale,
        record_density,
        policy_version,
        Some(&mut rngs),
    )
}

#[allow(clippy::too_many_arguments)]
fn run_batch<R: Rng>(
    model: &dyn VelocityModel,
    requests: &[RolloutRequest],
    grid: &TimeGrid,
    schedule: Option<&SigmaSchedule>,
    cfg_scale: f64,
    record_density: bool,
    policy_version: u64,
    mut rngs: Option<&mut [R]>,
) -> Result<Vec<Trajectory>> {
    let n = model.latent_dim();
    let rows = requests.len();
    if requests.iter().any(|r| r.x1.len() != n) {
        return Err(Error::shape(
            "sample",
            "initial noise does not match latent size",
        ));
    }
    let conds: Vec<Condition> = requests.iter().map(|r| r.condition.clone()).collect();
    let mut trajs: Vec<Trajectory> = requests
        .iter()
        .map(|r| Trajectory {
            latents: vec![r.x1.clone()],
            log_densities: (schedule.is_some() && record_density).then(Vec::new),
            noises: Vec::new(),
            times: grid.times().to_vec(),
            condition: r.condition.clone(),
            init_seed: r.init_seed,
            noise_seed: r.noise_seed,
            policy_version,
        })
        .collect();
    let mut x: Vec<f64> = requests.iter().flat_map(|r| r.x1.iter().copied()).collect();
    for k in 0..grid.steps() {
        let t = grid.t(k);
        let dt = grid.dt(k);
        let v = guided_velocity(model, &x, &conds, &vec![t; rows], cfg_scale)?;
        let mut next = Vec::with_capacity(x.len());
        match (schedule, rngs.as_deref_mut()) {
            (Some(sched), Some(rngs)) => {
                let co = transition_coeffs(sched, t, dt)?;
                if record_density && co.std <= 0.0 {
                    return Err(Error::ZeroStd);
                }
                for (i, traj) in trajs.iter_mut().enumerate() {
                    let xi = &x[i * n..(i + 1) * n];
                    let mean = transition_mean(xi, &v[i * n..(i + 1) * n], &co);
                    let eps: Vec<f64> = (0..n).map(|_| rngs[i].sample(StandardNormal)).collect();
                    let xn: Vec<f64> = mean
                        .iter()
                        .zip(&eps)
                        .map(|(&m, &e)| m + co.std * e)
                        .collect();
                    if let Some(ld) = traj.log_densities.as_mut() {
                        ld.push(gaussian_logprob(&xn, &mean, co.std)?);
                    }
                    traj.noises.push(eps);
                    next.extend_from_slice(&xn);
                }
            }
            _ => {
                for (xi, vi) in x.iter().zip(&v) {
                    next.push(xi + dt * vi);
                }
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::DivergedSampling { step: k });
        }
        for (i, traj) in trajs.iter_mut().enumerate() {
            traj.latents.push(next[i * n..(i + 1) * n].to_vec());
        }
        x = next;
    }
    Ok(trajs)
}

pub fn ode_sample(
    model: &dyn VelocityModel,
    c: &Condition,
    grid: &TimeGrid,
    x1: &[f64],
    cfg_scale: f64,
) -> Result<Trajectory> {
    let req = RolloutRequest {
        condition: c.clone(),
        x1: x1.to_vec(),
        init_seed: 0,
        noise_seed: 0,
    };
    Ok(ode_sample_batch(model, &[req], grid, cfg_scale, 0)?.remove(0))
}

#[allow(clippy::too_many_arguments)]
pub fn sde_sample<R: Rng>(
    model: &dyn VelocityModel,
    c: &Condition,
    grid: &TimeGrid,
    x1: &[f64],
    schedule: &SigmaSchedule,
    cfg_scale: f64,
    rng: &mut R,
    record_density: bool,
) -> Result<Trajectory> {
    let req = RolloutRequest {
        condition: c.clone(),
        x1: x1.to_vec(),
        init_seed: 0,
        noise_seed: 0,
    };
    let mut rngs = [rng];
    Ok(run_batch(
        model,
        &[req],
        grid,
        Some(schedule),
        cfg_scale,
        record_density,
        0,
        Some(&mut rngs[..]),
    )?
    .remove(0))
}

/// Log-density (dimension-averaged) of the transition `x_from -> x_to`
/// under `model`.
#[allow(clippy::too_many_arguments)]
pub fn transition_logprob(
    model: &dyn VelocityModel,
    x_from: &[f64],
    x_to: &[f64],
    c: &Condition,
    t: f64,
    dt: f64,
    schedule: &SigmaSchedule,
    cfg_scale: f64,
) -> Result<f64> {
    let (mean, std) = sde_transition(model, x_from, c, t, dt, schedule, cfg_scale)?;
    gaussian_logprob(x_to, &mean, std)
}

/// Batched differentiable transition log-densities: row `i` evaluates
/// `x_to[i]` under the kernel from `x_from[i]` at `(t[i], dt[i])`. Returns
/// the `[rows]` log-density node and the guided velocity node.
#[allow(clippy::too_many_arguments)]
pub fn transition_logprob_graph(
    model: &VelocityField,
    g: &mut Graph,
    x_from: &[f64],
    x_to: &[f64],
    conds: &[Condition],
    t: &[f64],
    dt: &[f64],
    schedule: &SigmaSchedule,
    cfg_scale: f64,
) -> Result<(NodeId, NodeId)> {
    let n = model.arch.latent_dim;
    let rows = conds.len();
    let coeffs = t
        .iter()
        .zip(dt)
        .map(|(&ti, &di)| transition_coeffs(schedule, ti, di))
        .collect::<Result<Vec<_>>>()?;
    let x = g.constant(vec![rows, n], x_from.to_vec())?;
    let v = guided_velocity_graph(model, g, x, conds, t, cfg_scale)?;
    let mean = transition_mean_graph(g, x_from, v, &coeffs)?;
    let stds: Vec<f64> = coeffs.iter().map(|c| c.std).collect();
    let lp = logprob_graph(g, mean, x_to, &stds)?;
    Ok((lp, v))
}
