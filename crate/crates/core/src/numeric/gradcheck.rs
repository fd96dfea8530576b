//! Central-difference gradient checking.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f` with central differences
/// for every element of every parameter in `store`.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    if tape.value(root).len() != 1 {
        return Err(Error::shape("grad_check", tape.shape(root), &[1]));
    }
    let grads = tape.backward(root)?;
    tape.accumulate_param_grads(&grads, store);
    drop(tape);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let r = f(&mut t, store)?;
        Ok(t.value(r).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + eps;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - eps;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = store.get(id).grad.data()[k];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    store.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::tensor::Tensor;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::vector(vec![0.3, -1.7, 2.2, 0.9])).unwrap();
        let id = store.id("x").unwrap();
        let r = grad_check(&mut store, DEFAULT_EPS, |t, s| {
            let x = t.param(s, id);
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn detects_wrong_backward() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![0.5, 1.5])).unwrap();
        let r = grad_check(&mut store, DEFAULT_EPS, |t, s| {
            let x = t.param(s, id);
            let v = t.value(x).map(|v| v * v);
            let y = t.custom(&[x], v, Box::new(|g, xs, _| vec![xs[0].zip_map(g, |x, g| -2.0 * x * g).unwrap()]));
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error > 0.5);
    }
}
