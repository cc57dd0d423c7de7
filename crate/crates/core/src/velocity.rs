//! The conditional velocity field `v(x_t, c, t)`: an MLP over the latent,
//! sinusoidal time features and the condition embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Conditioning signal: a first frame plus a style category. With
/// `null_flag` set the model sees neither, which gives the unconditional
/// branch used by classifier-free guidance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub first_frame: Vec<f64>,
    pub style_id: usize,
    pub null_flag: bool,
}

impl Condition {
    pub fn new(first_frame: Vec<f64>, style_id: usize) -> Self {
        Self {
            first_frame,
            style_id,
            null_flag: false,
        }
    }

    /// The same condition with the embedding pathway switched off.
    pub fn to_null(&self) -> Self {
        Self {
            null_flag: true,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VelocityArch {
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub num_styles: usize,
    pub hidden: usize,
    pub depth: usize,
    pub time_features: usize,
    pub style_embed: usize,
}

impl Default for VelocityArch {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            cond_dim: 2,
            num_styles: 4,
            hidden: 128,
            depth: 3,
            time_features: 16,
            style_embed: 8,
        }
    }
}

impl VelocityArch {
    /// Latent + time features + first frame + style embedding + null indicator.
    pub fn input_dim(&self) -> usize {
        self.latent_dim + self.time_features + self.cond_dim + self.style_embed + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.depth == 0 || self.num_styles == 0 {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        if !self.time_features.is_multiple_of(2) {
            return Err(Error::Config("time_features must be even".into()));
        }
        Ok(())
    }
}

/// Anything that can produce velocities for a batch of rows. `x` holds
/// `conds.len()` rows of `latent_dim` values.
pub trait VelocityModel {
    fn latent_dim(&self) -> usize;
    fn velocity(&self, x: &[f64], conds: &[Condition], t: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub arch: VelocityArch,
    pub params: ParamStore,
}

fn layer_names(i: usize) -> (String, String) {
    (format!("layer{i}.w"), format!("layer{i}.b"))
}

/// Sinusoidal features of `t` with geometrically spaced frequencies.
pub fn time_features(t: f64, size: usize) -> Vec<f64> {
    let half = size / 2;
    let mut out = Vec::with_capacity(size);
    for j in 0..half {
        let ratio = if half > 1 {
            j as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let w = std::f64::consts::FRAC_PI_2 * 40f64.powf(ratio);
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

impl VelocityField {
    /// Glorot-uniform hidden layers and a zero output layer, so the untrained
    /// field is identically zero.
    pub fn new(arch: VelocityArch, seed: u64) -> Result<Self> {
        Self::init(arch, seed, false)
    }

    /// Like [`VelocityField::new`] but with a random output layer as well;
    /// used where a non-trivial field is needed without training.
    pub fn new_random(arch: VelocityArch, seed: u64) -> Result<Self> {
        Self::init(arch, seed, true)
    }

    fn init(arch: VelocityArch, seed: u64, random_output: bool) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let emb: Vec<f64> = (0..arch.num_styles * arch.style_embed)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        params.insert(
            "style_embed",
            Tensor::new(vec![arch.num_styles, arch.style_embed], emb)?.with_grad(),
        )?;
        let mut fan_in = arch.input_dim();
        for i in 0..=arch.depth {
            let last = i == arch.depth;
            let fan_out = if last { arch.latent_dim } else { arch.hidden };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = if last && !random_output {
                vec![0.0; fan_in * fan_out]
            } else {
                (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect()
            };
            let (wn, bn) = layer_names(i);
            params.insert(wn, Tensor::new(vec![fan_in, fan_out], w)?.with_grad())?;
            params.insert(bn, Tensor::zeros(vec![fan_out]).with_grad())?;
            fan_in = fan_out;
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: VelocityArch, params: ParamStore) -> Result<Self> {
        arch.validate()?;
        let expected = Self::new(arch.clone(), 0)?;
        for (name, t) in expected.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape(
                    "from_params",
                    format!(
                        "{name}: checkpoint {:?}, architecture {:?}",
                        got.shape(),
                        t.shape()
                    ),
                ));
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::shape("from_params", "parameter count differs"));
        }
        Ok(Self { arch, params })
    }

    pub fn version(&self) -> u64 {
        self.params.version()
    }

    /// Deep copy with gradients disabled. The copy keeps the source's
    /// version stamp.
    pub fn clone_frozen(&self) -> Self {
        let mut params = self.params.clone();
        params.set_requires_grad(false);
        Self {
            arch: self.arch.clone(),
            params,
        }
    }

    fn check_inputs(&self, rows: usize, conds: &[Condition], t: &[f64]) -> Result<()> {
        if conds.len() != rows || t.len() != rows {
            return Err(Error::shape(
                "vf_forward",
                format!("{rows} rows, {} conditions, {} times", conds.len(), t.len()),
            ));
        }
        for &ti in t {
            if !(0.0..=1.0).contains(&ti) {
                return Err(Error::TimeOutOfRange(ti));
            }
        }
        for c in conds {
            if c.first_frame.len() != self.arch.cond_dim {
                return Err(Error::shape(
                    "vf_forward",
                    format!(
                        "first frame has {} dims, expected {}",
                        c.first_frame.len(),
                        self.arch.cond_dim
                    ),
                ));
            }
            if c.style_id >= self.arch.num_styles {
                return Err(Error::InvalidArgument(format!(
                    "style {} >= {}",
                    c.style_id, self.arch.num_styles
                )));
            }
        }
        Ok(())
    }

    /// Differentiable forward pass over a `[rows, latent_dim]` node.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        conds: &[Condition],
        t: &[f64],
    ) -> Result<NodeId> {
        let rows = match g.shape(x) {
            [r, n] if *n == self.arch.latent_dim => *r,
            s => {
                return Err(Error::shape(
                    "vf_forward",
                    format!("latent batch {s:?}, expected [_, {}]", self.arch.latent_dim),
                ))
            }
        };
        self.check_inputs(rows, conds, t)?;
        let a = &self.arch;
        let mut tf = Vec::with_capacity(rows * a.time_features);
        let mut ff = Vec::with_capacity(rows * a.cond_dim);
        let mut null = Vec::with_capacity(rows);
        let mut idx = Vec::with_capacity(rows);
        for (c, &ti) in conds.iter().zip(t) {
            tf.extend(time_features(ti, a.time_features));
            if c.null_flag {
                ff.extend(std::iter::repeat_n(0.0, a.cond_dim));
                null.push(1.0);
                idx.push(None);
            } else {
                ff.extend_from_slice(&c.first_frame);
                null.push(0.0);
                idx.push(Some(c.style_id));
            }
        }
        let tf = g.constant(vec![rows, a.time_features], tf)?;
        let ff = g.constant(vec![rows, a.cond_dim], ff)?;
        let null = g.constant(vec![rows, 1], null)?;
        let table = g.param(&self.params, "style_embed")?;
        let emb = g.gather_rows(table, &idx)?;
        let mut h = g.concat_cols(&[x, tf, ff, emb, null])?;
        for i in 0..=a.depth {
            let (wn, bn) = layer_names(i);
            let w = g.param(&self.params, &wn)?;
            let b = g.param(&self.params, &bn)?;
            let b = g.broadcast_rows(b, rows)?;
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if i < a.depth {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }

    /// Velocities as plain values (the result of the same graph as
    /// [`VelocityField::forward`]).
    pub fn vf_forward(&self, x: &[f64], c: &Condition, t: f64) -> Result<Vec<f64>> {
        self.velocity(x, std::slice::from_ref(c), &[t])
    }
}

impl VelocityModel for VelocityField {
    fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn velocity(&self, x: &[f64], conds: &[Condition], t: &[f64]) -> Result<Vec<f64>> {
        let n = self.arch.latent_dim;
        if x.len() != conds.len() * n {
            return Err(Error::shape(
                "vf_forward",
                format!("{} values for {} rows", x.len(), conds.len()),
            ));
        }
        let mut g = Graph::new();
        let xi = g.constant(vec![conds.len(), n], x.to_vec())?;
        let out = self.forward(&mut g, xi, conds, t)?;
        Ok(g.value(out).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adam::{adam_step, AdamState};
    use crate::gradcheck::gradient_check;

    fn tiny_arch() -> VelocityArch {
        VelocityArch {
            latent_dim: 4,
            cond_dim: 2,
            num_styles: 2,
            hidden: 6,
            depth: 2,
            time_features: 4,
            style_embed: 2,
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_field() {
        let m = VelocityField::new(VelocityArch::default(), 3).unwrap();
        let c = Condition::new(vec![0.3, -1.0], 2);
        let v = m.vf_forward(&[0.7; 16], &c, 0.4).unwrap();
        assert_eq!(v, vec![0.0; 16]);
    }

    #[test]
    fn forward_is_deterministic_and_batch_invariant() {
        let m = VelocityField::new_random(tiny_arch(), 5).unwrap();
        let c1 = Condition::new(vec![0.1, 0.2], 1);
        let c2 = Condition::new(vec![-0.5, 0.9], 0);
        let x = [0.1, -0.2, 0.3, 0.4, 1.0, 2.0, 3.0, 4.0];
        let a = m.vf_forward(&x[..4], &c1, 0.3).unwrap();
        let b = m.vf_forward(&x[..4], &c1, 0.3).unwrap();
        assert_eq!(a, b);
        let batch = m.velocity(&x, &[c1, c2], &[0.3, 0.8]).unwrap();
        assert_eq!(&batch[..4], a.as_slice());
    }

    #[test]
    fn null_condition_ignores_frame_and_style() {
        let m = VelocityField::new_random(tiny_arch(), 9).unwrap();
        let x = [0.5, 0.1, -0.3, 0.2];
        let a = Condition::new(vec![3.0, -2.0], 1).to_null();
        let b = Condition::new(vec![-7.0, 0.5], 0).to_null();
        assert_eq!(
            m.vf_forward(&x, &a, 0.6).unwrap(),
            m.vf_forward(&x, &b, 0.6).unwrap()
        );
        let cond = Condition::new(vec![3.0, -2.0], 1);
        assert_ne!(
            m.vf_forward(&x, &a, 0.6).unwrap(),
            m.vf_forward(&x, &cond, 0.6).unwrap()
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = VelocityField::new(tiny_arch(), 1).unwrap();
        let c = Condition::new(vec![0.0, 0.0], 0);
        assert!(matches!(
            m.vf_forward(&[0.0; 4], &c, 1.5),
            Err(Error::TimeOutOfRange(_))
        ));
        assert!(m.vf_forward(&[0.0; 3], &c, 0.5).is_err());
        assert!(m
            .vf_forward(&[0.0; 4], &Condition::new(vec![0.0, 0.0], 5), 0.5)
            .is_err());
        let mut g = Graph::new();
        assert!(g.constant(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn frozen_clone_is_isolated_and_versioned() {
        let mut m = VelocityField::new_random(tiny_arch(), 2).unwrap();
        let c = Condition::new(vec![0.4, 0.4], 1);
        let x = [0.2, 0.2, -0.1, 0.0];
        let frozen = m.clone_frozen();
        assert_eq!(
            frozen.vf_forward(&x, &c, 0.5).unwrap(),
            m.vf_forward(&x, &c, 0.5).unwrap()
        );
        assert!(frozen.params.iter().all(|(_, t)| !t.requires_grad));

        let mut versions = vec![m.clone_frozen().version()];
        let mut opt = AdamState::new(0.05);
        for _ in 0..2 {
            let mut g = Graph::new();
            let xi = g.constant(vec![1, 4], x.to_vec()).unwrap();
            let v = m
                .forward(&mut g, xi, std::slice::from_ref(&c), &[0.5])
                .unwrap();
            let s = g.square(v).unwrap();
            let l = g.mean(s).unwrap();
            crate::graph::evaluate_and_backward(&g, l, &mut m.params).unwrap();
            adam_step(&mut m.params, &mut opt).unwrap();
            m.params.zero_grad();
            versions.push(m.clone_frozen().version());
        }
        assert!(versions.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(
            frozen.vf_forward(&x, &c, 0.5).unwrap(),
            m.vf_forward(&x, &c, 0.5).unwrap()
        );
        assert_eq!(frozen.version(), versions[0]);
    }

    #[test]
    fn gradient_through_forward_matches_finite_differences() {
        let m = VelocityField::new_random(tiny_arch(), 11).unwrap();
        let conds = vec![
            Condition::new(vec![0.3, -0.2], 1),
            Condition::new(vec![0.0, 0.0], 0).to_null(),
        ];
        let x = vec![0.1, 0.5, -0.4, 0.2, -0.3, 0.8, 0.0, 0.6];
        let target = vec![1.0, -1.0, 0.5, 0.0, 0.3, 0.2, -0.7, 0.1];
        let arch = m.arch.clone();
        let f = |g: &mut Graph, p: &ParamStore| {
            let model = VelocityField {
                arch: arch.clone(),
                params: p.clone(),
            };
            let xi = g.constant(vec![2, 4], x.clone())?;
            let v = model.forward(g, xi, &conds, &[0.25, 0.9])?;
            let tg = g.constant(vec![2, 4], target.clone())?;
            let d = g.sub(v, tg)?;
            let s = g.square(d)?;
            g.mean(s)
        };
        let r = gradient_check(f, &m.params, 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn from_params_rejects_wrong_arch() {
        let m = VelocityField::new(tiny_arch(), 1).unwrap();
        let mut other = tiny_arch();
        other.hidden = 7;
        assert!(VelocityField::from_params(other, m.params.clone()).is_err());
        assert!(VelocityField::from_params(tiny_arch(), m.params).is_ok());
    }
}
