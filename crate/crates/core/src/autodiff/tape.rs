//! Wengert-list reverse mode over a small matrix op vocabulary.
//!
//! Every node stores its forward value. `backward` walks the list once in
//! reverse and routes adjoints to parameter leaves.

use super::params::{GradSet, ParamSet};
use super::tensor::{affine, sigmoid, silu, Mat};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(usize),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Tanh(Var),
    Silu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `n x m` times `n x 1`, broadcast along columns.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    Sum(Var),
    RowSqNorm(Var),
    SqNorm(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const)
    }

    /// One leaf per entry, in declaration order.
    pub fn params(&mut self, params: &ParamSet) -> Vec<Var> {
        params
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| self.push(e.to_mat(), Op::Param(i)))
            .collect()
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = affine(self.value(x), self.value(w), b.map(|b| self.value(b)));
        self.push(y, Op::Affine { x, w, b })
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let data = src.data.iter().map(|&v| f(v)).collect();
        let out = Mat::from_vec(src.rows, src.cols, data);
        self.push(out, op)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        self.push(out, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, silu, Op::Silu(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!(vc.cols, 1, "mul_col expects a column");
        assert_eq!(va.rows, vc.rows, "mul_col row mismatch");
        let mut out = va.clone();
        for i in 0..out.rows {
            let c = vc.data[i];
            for v in out.row_mut(i) {
                *v *= c;
            }
        }
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |v| v * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |v| v + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |v| v.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::scalar(s), Op::Sum(a))
    }

    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let col: Vec<f64> = (0..va.rows).map(|i| va.row(i).iter().map(|v| v * v).sum()).collect();
        self.push(Mat::column(&col), Op::RowSqNorm(a))
    }

    pub fn sq_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().map(|v| v * v).sum();
        self.push(Mat::scalar(s), Op::SqNorm(a))
    }

    /// Reverse sweep from a scalar node. Parameter leaves must come from
    /// [`Tape::params`] called with a set of the same layout as `params`.
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Result<GradSet> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        if !lv.as_scalar().is_finite() {
            return Err(Error::numeric("loss value"));
        }

        let mut grads = GradSet::zeros_like(params);
        let mut adj: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Mat::scalar(1.0));

        fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Const => {}
                Op::Param(idx) => {
                    let entry = grads
                        .entries_mut()
                        .get_mut(idx)
                        .ok_or_else(|| Error::contract(format!("no parameter entry {idx}")))?;
                    if entry.values.len() != g.data.len() {
                        return Err(Error::contract(format!(
                            "parameter `{}` layout differs from tape leaf",
                            entry.name
                        )));
                    }
                    for (a, b) in entry.values.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
                Op::Affine { x, w, b } => {
                    let xv = self.value(x);
                    let wv = self.value(w);
                    let (n, inp) = xv.shape();
                    let out = wv.rows;
                    // dx = g W
                    let mut dx = Mat::zeros(n, inp);
                    for r in 0..n {
                        let gr = g.row(r);
                        let dxr = &mut dx.data[r * inp..(r + 1) * inp];
                        for (o, &go) in gr.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wv.data[o * inp..(o + 1) * inp];
                            for k in 0..inp {
                                dxr[k] += go * wr[k];
                            }
                        }
                    }
                    // dW = g^T x
                    let mut dw = Mat::zeros(out, inp);
                    for r in 0..n {
                        let xr = xv.row(r);
                        for (o, &go) in g.row(r).iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let dwr = &mut dw.data[o * inp..(o + 1) * inp];
                            for k in 0..inp {
                                dwr[k] += go * xr[k];
                            }
                        }
                    }
                    if let Some(b) = b {
                        let mut db = Mat::zeros(1, out);
                        for r in 0..n {
                            for (o, &go) in g.row(r).iter().enumerate() {
                                db.data[o] += go;
                            }
                        }
                        acc(&mut adj, b, db);
                    }
                    acc(&mut adj, x, dx);
                    acc(&mut adj, w, dw);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&y.data).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    );
                    acc(&mut adj, a, d);
                }
                Op::Silu(a) => {
                    let x = self.value(a);
                    let d = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&x.data)
                            .map(|(g, &x)| {
                                let s = sigmoid(x);
                                g * s * (1.0 + x * (1.0 - s))
                            })
                            .collect(),
                    );
                    acc(&mut adj, a, d);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, a, g.clone());
                    acc(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    let neg = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|v| -v).collect());
                    acc(&mut adj, a, g);
                    acc(&mut adj, b, neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let da = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&vb.data).map(|(g, y)| g * y).collect(),
                    );
                    let db = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&va.data).map(|(g, x)| g * x).collect(),
                    );
                    acc(&mut adj, a, da);
                    acc(&mut adj, b, db);
                }
                Op::MulCol(a, col) => {
                    let (va, vc) = (self.value(a), self.value(col));
                    let mut da = g.clone();
                    let mut dc = Mat::zeros(vc.rows, 1);
                    for r in 0..g.rows {
                        let c = vc.data[r];
                        let mut s = 0.0;
                        for (j, d) in da.row_mut(r).iter_mut().enumerate() {
                            s += *d * va.get(r, j);
                            *d *= c;
                        }
                        dc.data[r] = s;
                    }
                    acc(&mut adj, a, da);
                    acc(&mut adj, col, dc);
                }
                Op::Scale(a, s) => {
                    let d = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|v| v * s).collect());
                    acc(&mut adj, a, d);
                }
                Op::AddScalar(a) => acc(&mut adj, a, g),
                Op::Exp(a) => {
                    let y = &node.value;
                    let d = Mat::from_vec(g.rows, g.cols, g.data.iter().zip(&y.data).map(|(g, y)| g * y).collect());
                    acc(&mut adj, a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(a);
                    let d = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&x.data)
                            .map(|(g, &x)| if x >= lo && x <= hi { *g } else { 0.0 })
                            .collect(),
                    );
                    acc(&mut adj, a, d);
                }
                Op::Min(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let mut da = Mat::zeros(g.rows, g.cols);
                    let mut db = Mat::zeros(g.rows, g.cols);
                    for j in 0..g.data.len() {
                        if va.data[j] <= vb.data[j] {
                            da.data[j] = g.data[j];
                        } else {
                            db.data[j] = g.data[j];
                        }
                    }
                    acc(&mut adj, a, da);
                    acc(&mut adj, b, db);
                }
                Op::Sum(a) => {
                    let va = self.value(a);
                    acc(&mut adj, a, Mat::filled(va.rows, va.cols, g.as_scalar()));
                }
                Op::RowSqNorm(a) => {
                    let va = self.value(a);
                    let mut d = Mat::zeros(va.rows, va.cols);
                    for r in 0..va.rows {
                        let gr = g.data[r];
                        for (dv, &xv) in d.row_mut(r).iter_mut().zip(va.row(r)) {
                            *dv = 2.0 * gr * xv;
                        }
                    }
                    acc(&mut adj, a, d);
                }
                Op::SqNorm(a) => {
                    let va = self.value(a);
                    let s = 2.0 * g.as_scalar();
                    let d = Mat::from_vec(va.rows, va.cols, va.data.iter().map(|x| s * x).collect());
                    acc(&mut adj, a, d);
                }
            }
        }

        for e in grads.entries() {
            if e.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("gradient of parameter `{}`", e.name)));
            }
        }
        Ok(grads)
    }
}
