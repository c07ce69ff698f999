use super::params::ParamStore;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the gradients stored in `store` against central differences of
/// `loss` over every coordinate of every trainable parameter and returns the
/// largest relative error.
///
/// Perturbations are applied to the f32 storage; the step actually realised
/// (`fl(w + eps) - fl(w - eps)`) is used as the denominator so f32 rounding of
/// the perturbed weight does not leak into the estimate.
pub fn finite_diff_check<F>(loss: F, store: &ParamStore, epsilon: f64) -> f64
where
    F: Fn(&ParamStore) -> f64,
{
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        for k in 0..store.value(id).len() {
            let w = store.value(id).data()[k];
            let hi = (w as f64 + epsilon) as f32;
            let lo = (w as f64 - epsilon) as f32;
            probe.value_mut(id).data_mut()[k] = hi;
            let f_hi = loss(&probe);
            probe.value_mut(id).data_mut()[k] = lo;
            let f_lo = loss(&probe);
            probe.value_mut(id).data_mut()[k] = w;
            let numeric = (f_hi - f_lo) / (hi as f64 - lo as f64);
            let analytic = store.grad(id).data()[k] as f64;
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn linear_store() -> (ParamStore, Vec<f64>) {
        let mut s = ParamStore::new();
        let id = s
            .insert("w", Tensor::from_vec(&[2, 2], vec![0.3, -1.2, 2.5, 0.01]).unwrap())
            .unwrap();
        let coef = vec![1.5, -0.25, 3.0, 0.75];
        s.grad_mut(id)
            .data_mut()
            .iter_mut()
            .zip(&coef)
            .for_each(|(g, &c)| *g = c as f32);
        (s, coef)
    }

    #[test]
    fn exact_for_linear_functions() {
        let (s, coef) = linear_store();
        let loss = |p: &ParamStore| -> f64 {
            p.values()[0]
                .data()
                .iter()
                .zip(&coef)
                .map(|(&w, c)| w as f64 * c)
                .sum()
        };
        assert!(finite_diff_check(loss, &s, 1e-3) < 1e-8);
    }

    #[test]
    fn detects_corrupted_gradient() {
        let (mut s, coef) = linear_store();
        s.grads_mut()[0].data_mut()[2] += 0.5;
        let loss = |p: &ParamStore| -> f64 {
            p.values()[0]
                .data()
                .iter()
                .zip(&coef)
                .map(|(&w, c)| w as f64 * c)
                .sum()
        };
        assert!(finite_diff_check(loss, &s, 1e-3) > 1e-2);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let (mut s, _) = linear_store();
        s.grads_mut()[0].data_mut()[0] = 100.0;
        let id = s.id("w").unwrap();
        s.set_trainable(id, false);
        assert_eq!(finite_diff_check(|_| 0.0, &s, 1e-3), 0.0);
    }
}
