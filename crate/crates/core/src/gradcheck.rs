//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{evaluate_and_backward, Graph, NodeId};
use crate::params::ParamStore;

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is zero are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub non_finite: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol && self.params.iter().all(|p| p.non_finite == 0)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Analytic gradients of the scalar built by `factory`, one vector per
/// trainable parameter in store order. `params` is not modified.
pub fn analytic_grads<F>(factory: &F, params: &ParamStore) -> Result<Vec<(String, Vec<f64>)>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut work = params.clone();
    work.iter_mut().for_each(|(_, t)| t.clear_grad());
    let mut g = Graph::new();
    let root = factory(&mut g, &work)?;
    evaluate_and_backward(&g, root, &mut work)?;
    Ok(work
        .iter()
        .filter(|(_, t)| t.requires_grad)
        .map(|(n, t)| {
            let grad = t
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (n.to_string(), grad)
        })
        .collect())
}

/// Compares supplied gradients against central differences of `factory`.
pub fn compare_with_finite_differences<F>(
    factory: &F,
    params: &ParamStore,
    analytic: &[(String, Vec<f64>)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(crate::Error::InvalidArgument(format!(
            "step h={h} must be positive"
        )));
    }
    let eval = |store: &ParamStore| -> Option<f64> {
        let mut g = Graph::new();
        let root = factory(&mut g, store).ok()?;
        g.scalar(root).ok()
    };
    let mut work = params.clone();
    let mut reports = Vec::new();
    let mut coords = 0;
    for (name, grad) in analytic {
        let mut worst: f64 = 0.0;
        let mut bad = 0;
        for (i, &a) in grad.iter().enumerate() {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + h;
            let plus = eval(&work);
            work.get_mut(name)?.data_mut()[i] = orig - h;
            let minus = eval(&work);
            work.get_mut(name)?.data_mut()[i] = orig;
            coords += 1;
            match (plus, minus) {
                (Some(p), Some(m)) if ((p - m) / (2.0 * h)).is_finite() => {
                    worst = worst.max(relative_error(a, (p - m) / (2.0 * h)));
                }
                _ => bad += 1,
            }
        }
        reports.push(ParamReport {
            name: name.clone(),
            max_rel_err: worst,
            non_finite: bad,
        });
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: reports,
        max_rel_err,
        tol,
        coords_checked: coords,
    })
}

/// Reverse-mode gradient versus central differences with step `h`.
pub fn gradient_check<F>(
    factory: F,
    params: &ParamStore,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let analytic = analytic_grads(&factory, params)?;
    compare_with_finite_differences(&factory, params, &analytic, h, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(rng: &mut ChaCha8Rng, shapes: &[(&str, Vec<usize>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, shape) in shapes {
            let k = shape.iter().product();
            let data = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            s.insert(*n, Tensor::new(shape.clone(), data).unwrap().with_grad())
                .unwrap();
        }
        s
    }

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_store(&mut rng, &[("w", vec![5])]);
        let coeffs = vec![0.5, -1.0, 2.0, 0.25, 3.0];
        let f = |g: &mut Graph, p: &ParamStore| {
            let w = g.param(p, "w")?;
            let c = g.constant(vec![5], coeffs.clone())?;
            let m = g.mul(w, c)?;
            g.sum(m)
        };
        let r = gradient_check(f, &s, 1e-3, 1e-10).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn two_layer_tanh_network() {
        // 4 -> 8 -> 3: 32 + 8 + 24 = 64 parameters
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_store(
            &mut rng,
            &[("w1", vec![4, 8]), ("b1", vec![8]), ("w2", vec![8, 3])],
        );
        assert_eq!(s.num_scalars(), 64);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |g: &mut Graph, p: &ParamStore| {
            let xi = g.constant(vec![2, 4], x.clone())?;
            let w1 = g.param(p, "w1")?;
            let b1 = g.param(p, "b1")?;
            let h = g.matmul(xi, w1)?;
            let b1 = g.broadcast_rows(b1, 2)?;
            let h = g.add(h, b1)?;
            let h = g.tanh(h)?;
            let w2 = g.param(p, "w2")?;
            let o = g.matmul(h, w2)?;
            let o = g.tanh(o)?;
            let y = g.square(o)?;
            g.mean(y)
        };
        let r = gradient_check(f, &s, 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.coords_checked, 64);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_store(&mut rng, &[("w", vec![4])]);
        let f = |g: &mut Graph, p: &ParamStore| {
            let w = g.param(p, "w")?;
            let e = g.silu(w)?;
            g.sum(e)
        };
        let mut grads = analytic_grads(&f, &s).unwrap();
        for (_, v) in &mut grads {
            v.iter_mut().for_each(|x| *x *= 2.0);
        }
        let r = compare_with_finite_differences(&f, &s, &grads, 1e-5, 1e-4).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn rejects_nonpositive_step() {
        let s = ParamStore::new();
        let f = |g: &mut Graph, _: &ParamStore| g.constant(vec![], vec![1.0]);
        assert!(gradient_check(f, &s, 0.0, 1e-4).is_err());
    }

    #[test]
    fn undefined_difference_counts_as_failure() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![1e-6]).unwrap().with_grad())
            .unwrap();
        let f = |g: &mut Graph, p: &ParamStore| {
            let w = g.param(p, "w")?;
            let l = g.log(w)?;
            g.sum(l)
        };
        let r = gradient_check(f, &s, 1e-5, 1e-4).unwrap();
        assert_eq!(r.params[0].non_finite, 1);
        assert!(!r.passed());
    }
}
