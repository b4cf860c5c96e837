//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one forward pass. Each operation appends a node with
//! its value, parent handles and a backward rule; [`Tape::backward`] walks
//! the nodes in reverse. Tapes are per-pass values rather than global
//! state: a fresh tape per forward keeps gradient checks and concurrent
//! passes independent.
//!
//! ```
//! use circat::tape::Tape;
//! use circat::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
//! ```

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    tracked: bool,
}

pub struct Tape<T: Scalar = f64> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every recorded value.
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> &Tensor<T> {
        &self.grads[v.0]
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Tensor<T>, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            tracked,
        });
        Var(nodes.len() - 1)
    }

    /// A value whose gradient is wanted.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push_node(value, true)
    }

    /// A value treated as a constant; no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_node(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape().clone()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    /// Records a derived value. `backward` maps the output gradient to one
    /// optional gradient per parent, in order.
    pub fn record(
        &self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let tracked = parents.iter().any(|p| nodes[p.0].tracked);
        nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: tracked.then(|| Box::new(backward) as BackwardFn<T>),
            tracked,
        });
        Var(nodes.len() - 1)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().clone(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let (Some(rule), Some(g)) = (&node.backward, &grads[i]) else {
                continue;
            };
            let parent_grads = rule(g)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                assert!(p < i, "tape is not topologically ordered");
                let Some(pg) = pg else { continue };
                if !nodes[p].tracked {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => acc.add(&pg)?,
                    None => pg,
                });
            }
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.unwrap_or_else(|| n.value.zeros_like()))
            .collect();
        Ok(Gradients { grads })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(&bv)?;
        Ok(self.record(out, &[a, b], move |g| {
            Ok(vec![
                Some(g.matmul(&bv.transpose()?)?),
                Some(av.transpose()?.matmul(g)?),
            ])
        }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(&self.value(b))?;
        Ok(self.record(out, &[a, b], |g| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(&self.value(b))?;
        Ok(self.record(out, &[a, b], |g| {
            Ok(vec![Some(g.clone()), Some(g.scale(-T::one())?)])
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.mul(&bv)?;
        Ok(self.record(out, &[a, b], move |g| {
            Ok(vec![Some(g.mul(&bv)?), Some(g.mul(&av)?)])
        }))
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).scale(c)?;
        Ok(self.record(out, &[a], move |g| Ok(vec![Some(g.scale(c)?)])))
    }

    /// Adds a `[1×D]` row to every row of an `[N×D]` matrix.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (n, d) = (xv.rows(), xv.cols());
        if bv.shape().as_matrix() != (1, d) {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: xv.shape().clone(),
                rhs: bv.shape().clone(),
            });
        }
        let data: Vec<T> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % d])
            .collect();
        let out = Tensor::checked("add_row", xv.shape().clone(), data)?;
        let bshape = bv.shape().clone();
        Ok(self.record(out, &[x, bias], move |g| {
            let mut db = vec![T::zero(); d];
            for i in 0..n {
                for (acc, &v) in db.iter_mut().zip(g.row(i)) {
                    *acc = *acc + v;
                }
            }
            Ok(vec![
                Some(g.clone()),
                Some(Tensor::checked("add_row", bshape.clone(), db)?),
            ])
        }))
    }

    /// Sum of all entries as a shape-`[1]` tensor.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = Tensor::checked("sum", Shape::new(vec![1])?, vec![av.sum()])?;
        let shape = av.shape().clone();
        Ok(self.record(out, &[a], move |g| {
            Ok(vec![Some(Tensor::full(shape.clone(), g.item()))])
        }))
    }

    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av.mean_rows()?;
        let (n, d) = (av.rows(), av.cols());
        Ok(self.record(out, &[a], move |g| {
            let inv = T::one() / T::of(n as f64);
            let data = (0..n * d).map(|k| g.data()[k % d] * inv).collect();
            Ok(vec![Some(Tensor::checked("mean_rows", Shape::matrix(n, d)?, data)?)])
        }))
    }

    fn softmax_backward(y: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, c) = y.shape().as_matrix();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let (yr, gr) = (y.row(i), g.row(i));
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for j in 0..c {
                out[i * c + j] = yr[j] * (gr[j] - dot);
            }
        }
        Tensor::checked("softmax_backward", y.shape().clone(), out)
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let y = self.value(a).softmax_rows()?;
        let yc = y.clone();
        Ok(self.record(y, &[a], move |g| {
            Ok(vec![Some(Self::softmax_backward(&yc, g)?)])
        }))
    }

    pub fn softmax_rows_causal(&self, a: Var) -> Result<Var> {
        let y = self.value(a).softmax_rows_causal()?;
        let yc = y.clone();
        Ok(self.record(y, &[a], move |g| {
            Ok(vec![Some(Self::softmax_backward(&yc, g)?)])
        }))
    }

    pub fn roll_rows(&self, a: Var, s: isize) -> Result<Var> {
        let out = self.value(a).roll_rows(s)?;
        Ok(self.record(out, &[a], move |g| Ok(vec![Some(g.roll_rows(-s)?)])))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.record(out, &[a], |g| Ok(vec![Some(g.transpose()?)])))
    }

    pub fn reshape(&self, a: Var, shape: Shape) -> Result<Var> {
        let av = self.value(a);
        let orig = av.shape().clone();
        let out = av.reshape(shape)?;
        Ok(self.record(out, &[a], move |g| Ok(vec![Some(g.reshape(orig.clone())?)])))
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let out = av.slice_cols(start, end)?;
        if out.cols() == av.cols() {
            return Ok(a);
        }
        let (r, c) = (av.rows(), av.cols());
        Ok(self.record(out, &[a], move |g| {
            let mut data = vec![T::zero(); r * c];
            let w = end - start;
            for i in 0..r {
                data[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            Ok(vec![Some(Tensor::checked("slice_cols", Shape::matrix(r, c)?, data)?)])
        }))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        let out = Tensor::concat_cols(&values)?;
        Ok(self.record(out, parts, move |g| {
            let mut start = 0;
            widths
                .iter()
                .map(|&w| {
                    let part = g.slice_cols(start, start + w);
                    start += w;
                    part.map(Some)
                })
                .collect()
        }))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!(
                "gather_rows: id {bad} out of range for {v} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows: no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::checked("gather_rows", Shape::matrix(ids.len(), d)?, data)?;
        let ids = ids.to_vec();
        Ok(self.record(out, &[table], move |g| {
            let mut dt = vec![T::zero(); v * d];
            for (r, &i) in ids.iter().enumerate() {
                for (acc, &x) in dt[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                    *acc = *acc + x;
                }
            }
            Ok(vec![Some(Tensor::checked("gather_rows", Shape::matrix(v, d)?, dt)?)])
        }))
    }

    /// Per-row layer normalisation with `[1×D]` gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (n, d) = (xv.rows(), xv.cols());
        if gv.shape().as_matrix() != (1, d) || bv.shape().as_matrix() != (1, d) {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().clone(),
                rhs: gv.shape().clone(),
            });
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::checked("layer_norm", xv.shape().clone(), out)?;
        let shape = xv.shape().clone();
        Ok(self.record(out, &[x, gain, bias], move |g| {
            let mut dx = vec![T::zero(); n * d];
            let mut dg = vec![T::zero(); d];
            let mut db = vec![T::zero(); d];
            for i in 0..n {
                let gr = g.row(i);
                let hr = &xhat[i * d..(i + 1) * d];
                let mut mean_gh = T::zero();
                let mut mean_ghx = T::zero();
                for j in 0..d {
                    let gh = gr[j] * gv.data()[j];
                    mean_gh = mean_gh + gh;
                    mean_ghx = mean_ghx + gh * hr[j];
                    dg[j] = dg[j] + gr[j] * hr[j];
                    db[j] = db[j] + gr[j];
                }
                mean_gh = mean_gh / dn;
                mean_ghx = mean_ghx / dn;
                for j in 0..d {
                    let gh = gr[j] * gv.data()[j];
                    dx[i * d + j] = inv_std[i] * (gh - mean_gh - hr[j] * mean_ghx);
                }
            }
            let row_shape = Shape::matrix(1, d)?;
            Ok(vec![
                Some(Tensor::checked("layer_norm", shape.clone(), dx)?),
                Some(Tensor::checked("layer_norm", row_shape.clone(), dg)?),
                Some(Tensor::checked("layer_norm", row_shape, db)?),
            ])
        }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = T::of((2.0 / std::f64::consts::PI).sqrt());
        let k = T::of(0.044715);
        let half = T::of(0.5);
        let out = av.map("gelu", |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))?;
        Ok(self.record(out, &[a], move |g| {
            let three = T::of(3.0);
            let d = av.map("gelu", |x| {
                let t = (c * (x + k * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
            })?;
            Ok(vec![Some(g.mul(&d)?)])
        }))
    }

    /// `scale · Σ_i CE(logits_i, target_i)` over rows with a target, as a
    /// shape-`[1]` tensor. Pass `scale = 1/count` for the mean.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>], scale: T) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = lv.shape().as_matrix();
        if targets.len() != r {
            return Err(Error::invalid(format!(
                "cross_entropy: {} targets for {r} rows",
                targets.len()
            )));
        }
        if targets.iter().all(Option::is_none) {
            return Err(Error::invalid("cross_entropy: empty target set"));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::invalid(format!(
                "cross_entropy: target {bad} out of range for {c} classes"
            )));
        }
        let probs = lv.softmax_rows()?;
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = lv.row(i);
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
                total = total + (lse - row[t]);
            }
        }
        let out = Tensor::checked("cross_entropy", Shape::new(vec![1])?, vec![total * scale])?;
        let targets = targets.to_vec();
        Ok(self.record(out, &[logits], move |g| {
            let s = g.item() * scale;
            let mut d = vec![T::zero(); r * c];
            for (i, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    for j in 0..c {
                        d[i * c + j] = probs.at(i, j) * s;
                    }
                    d[i * c + t] = d[i * c + t] - s;
                }
            }
            Ok(vec![Some(Tensor::checked("cross_entropy", probs.shape().clone(), d)?)])
        }))
    }
}
