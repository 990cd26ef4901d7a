//! Central finite differences, used to check autodiff gradients.

use crate::numerics::{ParamId, ParamStore};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL_SMALL: f64 = 1e-3;
pub const SMALL_GRAD: f64 = 1e-6;

/// Whether an autodiff value agrees with a finite-difference estimate: relative error
/// within 1e-4, or absolute error within 1e-3 when the true gradient is below 1e-6.
pub fn agrees(autodiff: f64, numeric: f64) -> bool {
    let diff = (autodiff - numeric).abs();
    let scale = autodiff.abs().max(numeric.abs());
    if numeric.abs() < SMALL_GRAD && autodiff.abs() < SMALL_GRAD {
        return diff <= ABS_TOL_SMALL;
    }
    diff <= REL_TOL * scale
}

/// `(f(x + h) - f(x - h)) / 2h` for each element of a vector.
pub fn central_differences(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Central differences of `f(store)` with respect to every scalar of parameter `id`.
pub fn param_differences(
    store: &mut ParamStore,
    id: ParamId,
    step: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Vec<f64> {
    let n = store.value(id).len();
    (0..n)
        .map(|i| {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + step;
            let plus = f(store);
            store.get_mut(id).value.data_mut()[i] = orig - step;
            let minus = f(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Worst relative error over paired gradient vectors, and whether all pairs agree.
pub fn compare(autodiff: &[f64], numeric: &[f64]) -> (f64, bool) {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for (a, n) in autodiff.iter().zip(numeric) {
        let scale = a.abs().max(n.abs()).max(1e-300);
        worst = worst.max((a - n).abs() / scale);
        ok &= agrees(*a, *n);
    }
    (worst, ok)
}
