use rand::Rng;

use super::{add_matvec, sigmoid, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Parameter handles of one gated recurrent unit.
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + U_h (r * h) + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruCell {
    /// Registers the nine tensors under `prefix.*`, uniform in
    /// `±1/sqrt(hidden_dim)`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut add = |suffix: &str, shape: &[usize]| {
            store.add(
                format!("{prefix}.{suffix}"),
                Tensor::uniform(shape, bound, rng),
            )
        };
        let (i, h) = (input_dim, hidden_dim);
        GruCell {
            input_dim,
            hidden_dim,
            w_z: add("w_z", &[h, i]),
            u_z: add("u_z", &[h, h]),
            b_z: add("b_z", &[h]),
            w_r: add("w_r", &[h, i]),
            u_r: add("u_r", &[h, h]),
            b_r: add("b_r", &[h]),
            w_h: add("w_h", &[h, i]),
            u_h: add("u_h", &[h, h]),
            b_h: add("b_h", &[h]),
        }
    }

    /// One forward step without recording anything.
    pub fn step(&self, store: &ParamStore, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(store, x, h)?.h_new)
    }

    pub(crate) fn forward(&self, store: &ParamStore, x: &[f64], h: &[f64]) -> Result<GruStep> {
        if x.len() != self.input_dim || h.len() != self.hidden_dim {
            return Err(Error::Shape(format!(
                "gru expects x[{}], h[{}]; got x[{}], h[{}]",
                self.input_dim,
                self.hidden_dim,
                x.len(),
                h.len()
            )));
        }
        let gate = |w: ParamId, u: ParamId, b: ParamId, hin: &[f64]| {
            let mut a = store.value(b).data().to_vec();
            add_matvec(store.value(w), x, &mut a);
            add_matvec(store.value(u), hin, &mut a);
            a
        };
        let z: Vec<f64> = gate(self.w_z, self.u_z, self.b_z, h)
            .into_iter()
            .map(sigmoid)
            .collect();
        let r: Vec<f64> = gate(self.w_r, self.u_r, self.b_r, h)
            .into_iter()
            .map(sigmoid)
            .collect();
        let s: Vec<f64> = r.iter().zip(h).map(|(r, h)| r * h).collect();
        let c: Vec<f64> = gate(self.w_h, self.u_h, self.b_h, &s)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let h_new = (0..h.len())
            .map(|k| (1.0 - z[k]) * h[k] + z[k] * c[k])
            .collect();
        Ok(GruStep { h_new, z, r, c })
    }

    pub fn params(&self) -> [ParamId; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h,
            self.b_h,
        ]
    }
}

/// Forward values of one step, cached for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct GruStep {
    pub h_new: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
}
