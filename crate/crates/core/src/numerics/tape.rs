use super::gru::GruCell;
use super::{add_matvec, add_matvec_t, add_outer, sigmoid, Gradients, ParamId, ParamStore};
use crate::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    EmbedRow {
        table: ParamId,
        row: usize,
    },
    Affine {
        w: ParamId,
        b: Option<ParamId>,
        x: Var,
    },
    Gru {
        cell: GruCell,
        x: Var,
        h: Var,
        z: Vec<f64>,
        r: Vec<f64>,
        c: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Dot(Var, Var),
    Softmax(Var),
    WeightedSum {
        weights: Var,
        items: Vec<Var>,
    },
    Mask {
        x: Var,
        mask: Vec<f64>,
    },
    Scale(Var, f64),
    Sum(Vec<Var>),
    WeightedBce {
        p: Var,
        target: bool,
        pos_weight: f64,
        neg_weight: f64,
    },
    SquaredError {
        p: Var,
        target: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation against a read-only [`ParamStore`] and replays it
/// backwards to accumulate parameter gradients.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn constant(&mut self, values: Vec<f64>) -> Var {
        self.push(values, Op::Constant, false)
    }

    pub fn zeros(&mut self, len: usize) -> Var {
        self.constant(vec![0.0; len])
    }

    /// Whole parameter as a leaf (flattened).
    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.value(id).data().to_vec();
        self.push(value, Op::Param(id), true)
    }

    pub fn embed(&mut self, table: ParamId, row: usize) -> Result<Var> {
        let t = self.store.value(table);
        if row >= t.rows() {
            return Err(shape_err(
                "embed",
                format!("row {row} out of range for {} rows", t.rows()),
            ));
        }
        let value = t.row(row).to_vec();
        Ok(self.push(value, Op::EmbedRow { table, row }, true))
    }

    /// `W x (+ b)`.
    pub fn affine(&mut self, w: ParamId, b: Option<ParamId>, x: Var) -> Result<Var> {
        let wt = self.store.value(w);
        if wt.cols() != self.dim(x) {
            return Err(shape_err(
                "affine",
                format!("W is {:?} but x has {} entries", wt.shape(), self.dim(x)),
            ));
        }
        let mut out = match b {
            Some(b) => {
                let bt = self.store.value(b);
                if bt.len() != wt.rows() {
                    return Err(shape_err(
                        "affine",
                        format!("bias has {} entries, W has {} rows", bt.len(), wt.rows()),
                    ));
                }
                bt.data().to_vec()
            }
            None => vec![0.0; wt.rows()],
        };
        add_matvec(wt, self.value(x), &mut out);
        Ok(self.push(out, Op::Affine { w, b, x }, true))
    }

    pub fn gru(&mut self, cell: &GruCell, x: Var, h: Var) -> Result<Var> {
        let step = cell.forward(self.store, self.value(x), self.value(h))?;
        Ok(self.push(
            step.h_new,
            Op::Gru {
                cell: *cell,
                x,
                h,
                z: step.z,
                r: step.r,
                c: step.c,
            },
            true,
        ))
    }

    fn same_len(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.dim(a) != self.dim(b) {
            return Err(shape_err(
                op,
                format!("lengths {} and {} differ", self.dim(a), self.dim(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("add", a, b)?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("mul", a, b)?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().copied().map(sigmoid).collect();
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::with_capacity(parts.iter().map(|p| self.dim(*p)).sum());
        for p in parts {
            v.extend_from_slice(self.value(*p));
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::Concat(parts.to_vec()), rg)
    }

    /// Scalar dot product.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("dot", a, b)?;
        let d = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![d], Op::Dot(a, b), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.dim(x) == 0 {
            return Err(shape_err("softmax", "empty input".into()));
        }
        let v = super::softmax(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax(x), rg))
    }

    /// `Σ_j weights[j] · items[j]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        if items.is_empty() || self.dim(weights) != items.len() {
            return Err(shape_err(
                "weighted_sum",
                format!("{} weights for {} items", self.dim(weights), items.len()),
            ));
        }
        let d = self.dim(items[0]);
        if items.iter().any(|i| self.dim(*i) != d) {
            return Err(shape_err("weighted_sum", "items differ in length".into()));
        }
        let mut out = vec![0.0; d];
        for (w, item) in self.value(weights).iter().zip(items) {
            for (o, v) in out.iter_mut().zip(self.value(*item)) {
                *o += w * v;
            }
        }
        let rg = self.rg(weights) || items.iter().any(|i| self.rg(*i));
        Ok(self.push(
            out,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.dim(x) {
            return Err(shape_err(
                "mask",
                format!("mask {} vs input {}", mask.len(), self.dim(x)),
            ));
        }
        let v = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(v, Op::Mask { x, mask }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).iter().map(|a| a * factor).collect();
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(shape_err("sum", "no operands".into()));
        };
        let d = self.dim(*first);
        if parts.iter().any(|p| self.dim(*p) != d) {
            return Err(shape_err("sum", "operands differ in length".into()));
        }
        let mut out = vec![0.0; d];
        for p in parts {
            for (o, v) in out.iter_mut().zip(self.value(*p)) {
                *o += v;
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::Sum(parts.to_vec()), rg))
    }

    /// `-[pos_weight · y · log p + neg_weight · (1 - y) · log(1 - p)]` on a
    /// one-element probability, with `p` clamped before the log.
    pub fn weighted_bce(
        &mut self,
        p: Var,
        target: bool,
        pos_weight: f64,
        neg_weight: f64,
    ) -> Result<Var> {
        if self.dim(p) != 1 {
            return Err(shape_err("weighted_bce", "expects a scalar".into()));
        }
        let pc = self.scalar(p).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let loss = if target {
            -pos_weight * pc.ln()
        } else {
            -neg_weight * (1.0 - pc).ln()
        };
        let rg = self.rg(p);
        Ok(self.push(
            vec![loss],
            Op::WeightedBce {
                p,
                target,
                pos_weight,
                neg_weight,
            },
            rg,
        ))
    }

    /// `(p - target)²` on a one-element value.
    pub fn squared_error(&mut self, p: Var, target: f64) -> Result<Var> {
        if self.dim(p) != 1 {
            return Err(shape_err("squared_error", "expects a scalar".into()));
        }
        let d = self.scalar(p) - target;
        let rg = self.rg(p);
        Ok(self.push(vec![d * d], Op::SquaredError { p, target }, rg))
    }

    /// Back-propagates `d root = 1`.
    pub fn backward(&self, root: Var, grads: &mut Gradients) -> Result<()> {
        self.backward_scaled(root, 1.0, grads)
    }

    /// Back-propagates `d root = seed` and accumulates into `grads`.
    pub fn backward_scaled(&self, root: Var, seed: f64, grads: &mut Gradients) -> Result<()> {
        if self.dim(root) != 1 {
            return Err(shape_err("backward", "root must be a scalar".into()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![seed]);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let p = self.store.get(*id);
                    if p.row_sparse {
                        let w = p.value.cols();
                        for (r, chunk) in g.chunks_exact(w).enumerate() {
                            axpy(grads.row_mut(*id, r), chunk, 1.0);
                        }
                    } else {
                        axpy(grads.dense_mut(*id), &g, 1.0);
                    }
                }
                Op::EmbedRow { table, row } => axpy(grads.row_mut(*table, *row), &g, 1.0),
                Op::Affine { w, b, x } => {
                    let xv = self.value(*x);
                    add_outer(grads.dense_mut(*w), &g, xv);
                    if let Some(b) = b {
                        axpy(grads.dense_mut(*b), &g, 1.0);
                    }
                    if self.rg(*x) {
                        let mut dx = vec![0.0; xv.len()];
                        add_matvec_t(self.store.value(*w), &g, &mut dx);
                        self.acc(&mut adj, *x, &dx);
                    }
                }
                Op::Gru {
                    cell,
                    x,
                    h,
                    z,
                    r,
                    c,
                } => self.gru_backward(cell, *x, *h, z, r, c, &g, &mut adj, grads),
                Op::Add(a, b) => {
                    self.acc(&mut adj, *a, &g);
                    self.acc(&mut adj, *b, &g);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g.iter().zip(self.value(*b)).map(|(g, v)| g * v).collect();
                    let db: Vec<f64> = g.iter().zip(self.value(*a)).map(|(g, v)| g * v).collect();
                    self.acc(&mut adj, *a, &da);
                    self.acc(&mut adj, *b, &db);
                }
                Op::Sigmoid(x) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    self.acc(&mut adj, *x, &d);
                }
                Op::Tanh(x) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    self.acc(&mut adj, *x, &d);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let d = self.dim(*p);
                        self.acc(&mut adj, *p, &g[offset..offset + d]);
                        offset += d;
                    }
                }
                Op::Dot(a, b) => {
                    let g0 = g[0];
                    let da: Vec<f64> = self.value(*b).iter().map(|v| g0 * v).collect();
                    let db: Vec<f64> = self.value(*a).iter().map(|v| g0 * v).collect();
                    self.acc(&mut adj, *a, &da);
                    self.acc(&mut adj, *b, &db);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let inner: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                    let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| y * (g - inner)).collect();
                    self.acc(&mut adj, *x, &d);
                }
                Op::WeightedSum { weights, items } => {
                    let wv = self.value(*weights);
                    if self.rg(*weights) {
                        let dw: Vec<f64> = items
                            .iter()
                            .map(|it| g.iter().zip(self.value(*it)).map(|(g, v)| g * v).sum())
                            .collect();
                        self.acc(&mut adj, *weights, &dw);
                    }
                    for (w, it) in wv.iter().zip(items) {
                        let d: Vec<f64> = g.iter().map(|g| g * w).collect();
                        self.acc(&mut adj, *it, &d);
                    }
                }
                Op::Mask { x, mask } => {
                    let d: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                    self.acc(&mut adj, *x, &d);
                }
                Op::Scale(x, f) => {
                    let d: Vec<f64> = g.iter().map(|g| g * f).collect();
                    self.acc(&mut adj, *x, &d);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        self.acc(&mut adj, *p, &g);
                    }
                }
                Op::WeightedBce {
                    p,
                    target,
                    pos_weight,
                    neg_weight,
                } => {
                    // Gradient is taken at the clamped point so saturated
                    // predictions still receive a corrective signal.
                    let pc = self.scalar(*p).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    let d = if *target {
                        -pos_weight / pc
                    } else {
                        neg_weight / (1.0 - pc)
                    };
                    self.acc(&mut adj, *p, &[g[0] * d]);
                }
                Op::SquaredError { p, target } => {
                    let d = 2.0 * (self.scalar(*p) - target);
                    self.acc(&mut adj, *p, &[g[0] * d]);
                }
            }
        }
        Ok(())
    }

    fn acc(&self, adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.rg(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(buf) => axpy(buf, g, 1.0),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn gru_backward(
        &self,
        cell: &GruCell,
        x: Var,
        h: Var,
        z: &[f64],
        r: &[f64],
        c: &[f64],
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
        grads: &mut Gradients,
    ) {
        let store = self.store;
        let xv = self.value(x);
        let hv = self.value(h);
        let n = hv.len();

        let mut dx = vec![0.0; xv.len()];
        let mut dh: Vec<f64> = (0..n).map(|k| g[k] * (1.0 - z[k])).collect();

        // candidate
        let da_c: Vec<f64> = (0..n).map(|k| g[k] * z[k] * (1.0 - c[k] * c[k])).collect();
        let s: Vec<f64> = (0..n).map(|k| r[k] * hv[k]).collect();
        add_outer(grads.dense_mut(cell.w_h), &da_c, xv);
        add_outer(grads.dense_mut(cell.u_h), &da_c, &s);
        axpy(grads.dense_mut(cell.b_h), &da_c, 1.0);
        add_matvec_t(store.value(cell.w_h), &da_c, &mut dx);
        let mut ds = vec![0.0; n];
        add_matvec_t(store.value(cell.u_h), &da_c, &mut ds);
        for k in 0..n {
            dh[k] += ds[k] * r[k];
        }

        // reset gate
        let da_r: Vec<f64> = (0..n)
            .map(|k| ds[k] * hv[k] * r[k] * (1.0 - r[k]))
            .collect();
        add_outer(grads.dense_mut(cell.w_r), &da_r, xv);
        add_outer(grads.dense_mut(cell.u_r), &da_r, hv);
        axpy(grads.dense_mut(cell.b_r), &da_r, 1.0);
        add_matvec_t(store.value(cell.w_r), &da_r, &mut dx);
        add_matvec_t(store.value(cell.u_r), &da_r, &mut dh);

        // update gate
        let da_z: Vec<f64> = (0..n)
            .map(|k| g[k] * (c[k] - hv[k]) * z[k] * (1.0 - z[k]))
            .collect();
        add_outer(grads.dense_mut(cell.w_z), &da_z, xv);
        add_outer(grads.dense_mut(cell.u_z), &da_z, hv);
        axpy(grads.dense_mut(cell.b_z), &da_z, 1.0);
        add_matvec_t(store.value(cell.w_z), &da_z, &mut dx);
        add_matvec_t(store.value(cell.u_z), &da_z, &mut dh);

        self.acc(adj, x, &dx);
        self.acc(adj, h, &dh);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}
