//! Central finite-difference checks against tape gradients.
//!
//! `f` must be deterministic: the numeric side re-evaluates it twice per
//! coordinate and a function that changes between calls yields a meaningless
//! error figure. This is not detected.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::layers::ParamStore;

/// Floor on the denominator of the relative error.
const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Max over elements of `|analytic - central difference| / max(|analytic|, |numeric|, 1e-8)`
/// for `d f(x) / d x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    assert!(h > 0.0, "step must be positive");
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new().no_grad();
        let v = g.leaf(t, false);
        let y = f(&mut g, v)?;
        Ok(g.value(y).item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check with respect to every element of every parameter in `store`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    assert!(h > 0.0, "step must be positive");
    let mut g = Graph::with_params(store);
    let y = f(&mut g)?;
    g.backward(y)?;
    let grads = g.param_grads();
    drop(g);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s).no_grad();
        let y = f(&mut g)?;
        Ok(g.value(y).item())
    };
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for (id, _) in store.iter() {
        let analytic = grads
            .iter()
            .find(|(gid, _)| *gid == id)
            .map(|(_, t)| t.to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let fp = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let fm = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(a, (fp - fm) / (2.0 * h)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let err = grad_check(|g, x| g.sum(x), &random(&[5], 1), 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sum_tanh() {
        let err = grad_check(
            |g, x| {
                let t = g.tanh(x)?;
                g.sum(t)
            },
            &random(&[6], 2),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
