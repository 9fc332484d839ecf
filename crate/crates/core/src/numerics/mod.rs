//! Dense tensors with reverse-mode differentiation.
//!
//! Everything the model needs is expressed on a [`Tape`]: matrix-vector
//! products against parameters, elementwise nonlinearities, concatenation,
//! embedding lookups, dot products, softmax, a fused [`GruCell`] step and
//! the per-instance loss terms. [`grad_check`] compares the tape's
//! gradients against central finite differences.

mod gradcheck;
mod gru;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, Violation};
pub use gru::GruCell;
pub use tape::{Tape, Var, PROB_CLAMP};
pub use tensor::{Gradients, ParamId, ParamStore, Parameter, Tensor};

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with max-subtraction.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `out += W x` for a row-major `W` of shape `[out.len(), x.len()]`.
pub(crate) fn add_matvec(w: &Tensor, x: &[f64], out: &mut [f64]) {
    let cols = w.cols();
    debug_assert_eq!(cols, x.len());
    debug_assert_eq!(w.rows(), out.len());
    for (o, row) in out.iter_mut().zip(w.data().chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Wᵀ g`.
pub(crate) fn add_matvec_t(w: &Tensor, g: &[f64], out: &mut [f64]) {
    let cols = w.cols();
    for (gi, row) in g.iter().zip(w.data().chunks_exact(cols)) {
        if *gi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += gi * a;
        }
    }
}

/// `dw += g xᵀ` for a row-major buffer with `x.len()` columns.
pub(crate) fn add_outer(dw: &mut [f64], g: &[f64], x: &[f64]) {
    for (gi, row) in g.iter().zip(dw.chunks_exact_mut(x.len())) {
        if *gi == 0.0 {
            continue;
        }
        for (d, xv) in row.iter_mut().zip(x) {
            *d += gi * xv;
        }
    }
}
