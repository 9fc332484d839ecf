use std::collections::BTreeMap;

use rand::Rng;

use crate::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Tensor::zeros(shape);
        for v in &mut t.data {
            *v = rng.gen_range(-bound..=bound);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows of a matrix (the first dimension; 1 for scalars).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Row width: product of all dimensions after the first.
    pub fn cols(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor together with its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Gradients arrive a few rows at a time (embedding tables).
    pub row_sparse: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            row_sparse: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Owner of every [`Parameter`] of a model, addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_row_sparse(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = self.add(name, value);
        self.params[id.0].row_sparse = true;
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Adds `scale * grads` into every parameter's gradient slot.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (p, slot) in self.params.iter_mut().zip(&grads.slots) {
            match slot {
                GradSlot::Dense(None) => {}
                GradSlot::Dense(Some(g)) => {
                    for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                        *dst += scale * src;
                    }
                }
                GradSlot::Rows(rows) => {
                    for (&r, g) in rows {
                        for (dst, src) in p.grad.row_mut(r).iter_mut().zip(g) {
                            *dst += scale * src;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum GradSlot {
    Dense(Option<Vec<f64>>),
    Rows(BTreeMap<usize, Vec<f64>>),
}

/// Gradient accumulator for one backward pass.
///
/// Dense buffers are allocated lazily; row-sparse parameters keep only the
/// rows that received gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    slots: Vec<GradSlot>,
    lens: Vec<usize>,
    widths: Vec<usize>,
}

impl Gradients {
    pub fn for_store(store: &ParamStore) -> Self {
        let slots = store
            .iter()
            .map(|p| {
                if p.row_sparse {
                    GradSlot::Rows(BTreeMap::new())
                } else {
                    GradSlot::Dense(None)
                }
            })
            .collect();
        Gradients {
            slots,
            lens: store.iter().map(|p| p.value.len()).collect(),
            widths: store.iter().map(|p| p.value.cols()).collect(),
        }
    }

    /// Whole-parameter gradient buffer. Row-sparse parameters are densified
    /// through their rows instead, see [`Gradients::row_mut`].
    pub fn dense_mut(&mut self, id: ParamId) -> &mut [f64] {
        let len = self.lens[id.0];
        match &mut self.slots[id.0] {
            GradSlot::Dense(buf) => buf.get_or_insert_with(|| vec![0.0; len]),
            GradSlot::Rows(_) => panic!("dense gradient requested for row-sparse parameter"),
        }
    }

    pub fn row_mut(&mut self, id: ParamId, row: usize) -> &mut [f64] {
        let width = self.widths[id.0];
        let len = self.lens[id.0];
        match &mut self.slots[id.0] {
            GradSlot::Dense(buf) => {
                let buf = buf.get_or_insert_with(|| vec![0.0; len]);
                &mut buf[row * width..(row + 1) * width]
            }
            GradSlot::Rows(rows) => rows.entry(row).or_insert_with(|| vec![0.0; width]),
        }
    }

    /// Gradient of a single flat entry (zero when never touched).
    pub fn get(&self, id: ParamId, flat: usize) -> f64 {
        match &self.slots[id.0] {
            GradSlot::Dense(None) => 0.0,
            GradSlot::Dense(Some(g)) => g[flat],
            GradSlot::Rows(rows) => {
                let w = self.widths[id.0];
                rows.get(&(flat / w)).map_or(0.0, |r| r[flat % w])
            }
        }
    }

    /// Rows of a row-sparse parameter that received gradient.
    pub fn touched_rows(&self, id: ParamId) -> Vec<usize> {
        match &self.slots[id.0] {
            GradSlot::Rows(rows) => rows.keys().copied().collect(),
            GradSlot::Dense(_) => Vec::new(),
        }
    }

    /// Dense copy of one parameter's gradient.
    pub fn to_dense(&self, id: ParamId) -> Vec<f64> {
        (0..self.lens[id.0]).map(|i| self.get(id, i)).collect()
    }

    /// True when no entry of the parameter's gradient is nonzero.
    pub fn is_zero(&self, id: ParamId) -> bool {
        match &self.slots[id.0] {
            GradSlot::Dense(None) => true,
            GradSlot::Dense(Some(g)) => g.iter().all(|v| *v == 0.0),
            GradSlot::Rows(rows) => rows.values().flatten().all(|v| *v == 0.0),
        }
    }

    /// `self += scale * other`, entry by entry.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (i, slot) in other.slots.iter().enumerate() {
            match slot {
                GradSlot::Dense(None) => {}
                GradSlot::Dense(Some(g)) => {
                    let dst = self.dense_mut(ParamId(i));
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += scale * s;
                    }
                }
                GradSlot::Rows(rows) => {
                    for (&r, g) in rows {
                        let dst = self.row_mut(ParamId(i), r);
                        for (d, s) in dst.iter_mut().zip(g) {
                            *d += scale * s;
                        }
                    }
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().all(|s| match s {
            GradSlot::Dense(None) => true,
            GradSlot::Dense(Some(g)) => g.iter().all(|v| v.is_finite()),
            GradSlot::Rows(rows) => rows.values().flatten().all(|v| v.is_finite()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::from_vec(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rows_and_cols() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
        let v = Tensor::zeros(&[4]);
        assert_eq!(v.cols(), 1);
    }

    #[test]
    fn sparse_rows_accumulate_into_store() {
        let mut store = ParamStore::new();
        let emb = store.add_row_sparse("emb", Tensor::zeros(&[5, 2]));
        let w = store.add("w", Tensor::zeros(&[3]));
        let mut g = Gradients::for_store(&store);
        g.row_mut(emb, 3).copy_from_slice(&[1.0, 2.0]);
        g.dense_mut(w)[1] = 4.0;
        assert_eq!(g.get(emb, 7), 2.0);
        assert_eq!(g.get(emb, 0), 0.0);
        assert_eq!(g.touched_rows(emb), vec![3]);

        let mut h = Gradients::for_store(&store);
        h.add_scaled(&g, 2.0);
        h.add_scaled(&g, 1.0);
        store.accumulate(&h, 0.5);
        assert_eq!(store.get(emb).grad.row(3), &[1.5, 3.0]);
        assert_eq!(store.get(w).grad.data(), &[0.0, 6.0, 0.0]);
        store.zero_grads();
        assert!(store.get(emb).grad.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn untouched_parameters_report_zero() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[2]));
        let g = Gradients::for_store(&store);
        assert!(g.is_zero(a));
        assert_eq!(g.to_dense(a), vec![0.0, 0.0]);
    }
}
