//! Central finite-difference verification of tape gradients.

use crate::error::{FgaError, Result};
use crate::math::{Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric gradient at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Multiplies every analytic gradient before comparison (negative-control hook).
    pub corrupt_analytic: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            corrupt_analytic: None,
        }
    }
}

/// Compares the tape gradient of the scalar built by `f` with
/// `(f(θ+h) - f(θ-h)) / 2h` for every coordinate of every parameter.
///
/// The relative error denominator is `max(|analytic|, |numeric|, 1e-8)`.
/// `f` must be deterministic. Parameter values are restored afterwards and
/// the store's gradients are left zeroed.
pub fn grad_check<F>(store: &mut ParamStore, options: GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let h = options.step;
    if h <= 0.0 {
        return Err(FgaError::InvalidArgument("finite-difference step must be positive".into()));
    }
    store.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    if !g.scalar(out).is_finite() {
        return Err(FgaError::NonFinite { op: "grad_check" });
    }
    g.backward(out)?;
    g.accumulate_param_grads(store);
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    store.zero_grad();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(FgaError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let mut a = analytic[id.index()][k];
            if let Some(factor) = options.corrupt_analytic {
                a *= factor;
            }
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name().to_string(), k));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Tensor;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut store = ParamStore::new();
        store.register("x", Tensor::vector(values).unwrap()).unwrap();
        store
    }

    #[test]
    fn squared_norm_is_exact() {
        let mut store = store_with(vec![0.3, -1.2, 2.5]);
        let id = store.id("x").unwrap();
        let report = grad_check(&mut store, GradCheckOptions::default(), |g, s| {
            let x = g.param(s, id)?;
            let sq = g.mul(x, x)?;
            let t = g.transpose(sq)?;
            let s = g.sum_rows(t)?;
            Ok(s)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        assert_eq!(report.coordinates, 3);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut store = store_with(vec![1.0, 2.0]);
        let report = grad_check(&mut store, GradCheckOptions::default(), |g, _| {
            g.input(Tensor::scalar(4.0))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut store = store_with(vec![0.5]);
        let id = store.id("x").unwrap();
        let options = GradCheckOptions {
            corrupt_analytic: Some(1.5),
            ..Default::default()
        };
        let report = grad_check(&mut store, options, |g, s| {
            let x = g.param(s, id)?;
            let sq = g.mul(x, x)?;
            g.sum_rows(sq)
        })
        .unwrap();
        assert!(report.max_rel_error > 0.3);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = store_with(vec![0.0]);
        let id = store.id("x").unwrap();
        let err = grad_check(&mut store, GradCheckOptions::default(), |g, s| {
            let x = g.param(s, id)?;
            g.neg_log(x, 0)
        });
        assert!(err.is_err());
    }
}
