//! Central finite differences for validating backward passes.
//!
//! The probes here evaluate a loss closure twice per coordinate and never
//! touch the tape's backward code, so they stay an independent oracle for
//! the gradients they are compared against.

use ndarray::Array2;

use crate::nn::{ParamId, ParamStore};

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_diff(f: &mut dyn FnMut(f64) -> f64, x0: f64, step: f64) -> f64 {
    (f(x0 + step) - f(x0 - step)) / (2.0 * step)
}

/// Relative error with an absolute floor so near-zero pairs don't blow up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Finite-difference gradient of `loss(store)` w.r.t. one parameter entry.
///
/// The closure must rebuild its forward pass from the store on every call;
/// the parameter value is restored afterwards.
pub fn fd_param_grad(
    store: &mut ParamStore,
    pid: ParamId,
    coord: (usize, usize),
    step: f64,
    loss: &mut dyn FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.value(pid)[[coord.0, coord.1]];
    store.value_mut(pid)[[coord.0, coord.1]] = orig + step;
    let hi = loss(store);
    store.value_mut(pid)[[coord.0, coord.1]] = orig - step;
    let lo = loss(store);
    store.value_mut(pid)[[coord.0, coord.1]] = orig;
    (hi - lo) / (2.0 * step)
}

/// Finite-difference gradient of `loss(input)` w.r.t. one input entry.
pub fn fd_input_grad(
    input: &Array2<f64>,
    coord: (usize, usize),
    step: f64,
    loss: &mut dyn FnMut(&Array2<f64>) -> f64,
) -> f64 {
    let mut hi_in = input.clone();
    hi_in[[coord.0, coord.1]] += step;
    let mut lo_in = input.clone();
    lo_in[[coord.0, coord.1]] -= step;
    (loss(&hi_in) - loss(&lo_in)) / (2.0 * step)
}

/// Deterministic sample of coordinates spread over a tensor, used to keep
/// exhaustive finite-difference sweeps off large parameter matrices.
pub fn sample_coords(rows: usize, cols: usize, max: usize) -> Vec<(usize, usize)> {
    let total = rows * cols;
    let n = total.min(max);
    // fixed stride sampling keeps the choice reproducible without an RNG
    let stride = (total / n).max(1);
    (0..n)
        .map(|i| {
            let flat = (i * stride + i) % total;
            (flat / cols, flat % cols)
        })
        .collect()
}
