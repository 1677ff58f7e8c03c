//! Reverse-mode automatic differentiation over a linear tape.
//!
//! The tape records dense-array operations during the forward pass and
//! replays them in reverse to accumulate gradients. One forward tape can be
//! differentiated several times with different scalar loss nodes, which is
//! how per-task gradients are produced from a single shared forward pass.

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckOptions, GradCheckReport};

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grads::GradientSet;
use crate::params::ParameterGroup;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op<F> {
    /// Input or parameter value; no backward rule.
    Leaf,
    /// Row lookup into a 2-d table.
    Gather { ids: Vec<usize> },
    /// `x @ w + b` with `x: [n, i]`, `w: [i, o]`, `b: [o]`.
    Affine,
    /// Elementwise product of same-shaped tensors.
    MulElem,
    /// Column-wise concatenation of rank-2 tensors with equal row counts.
    Concat,
    Relu,
    Sigmoid,
    /// Inverted dropout; mask entries are `0` or `1/(1-rate)`.
    Dropout { mask: Vec<F> },
    /// Mean binary cross-entropy over masked-in rows, fused with the sigmoid
    /// for numerical stability. `count` is the number of masked-in rows.
    BceMean {
        labels: Vec<F>,
        mask: Vec<bool>,
        count: usize,
    },
    Sum,
    SumSquares,
    /// Extracts one element as a `[1]` tensor.
    Index { at: usize },
    Exp,
    Neg,
    /// Multiplication by a constant.
    Scale { factor: F },
    /// Elementwise sum of two same-shaped tensors.
    Add,
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Gather { .. } => "gather",
            Op::Affine => "affine",
            Op::MulElem => "mul",
            Op::Concat => "concat",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Dropout { .. } => "dropout",
            Op::BceMean { .. } => "bce_mean",
            Op::Sum => "sum",
            Op::SumSquares => "sum_squares",
            Op::Index { .. } => "index",
            Op::Exp => "exp",
            Op::Neg => "neg",
            Op::Scale { .. } => "scale",
            Op::Add => "add",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<F> {
    op: Op<F>,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    data: Vec<F>,
}

/// Numerically stable logistic function.
pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Stable `-[y ln s(z) + (1-y) ln(1-s(z))]` for a single logit.
pub fn bce_with_logit<F: Scalar>(z: F, y: F) -> F {
    z.max(F::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

/// A recorded forward pass; append-order is a topological order.
#[derive(Clone, Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    /// (node index, group name) in registration order.
    params: Vec<(usize, String)>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: NodeId) -> Tensor<F> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("tape nodes hold consistent shapes")
    }

    /// Value of a `[1]` node.
    pub fn scalar_value(&self, id: NodeId) -> Result<F> {
        let node = &self.nodes[id.0];
        if node.data.len() != 1 {
            return Err(Error::Contract(format!(
                "node has shape {:?}, expected a scalar",
                node.shape
            )));
        }
        Ok(node.data[0])
    }

    fn push(&mut self, op: Op<F>, inputs: Vec<usize>, shape: Vec<usize>, data: Vec<F>) -> Result<NodeId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Training(format!(
                "op `{}` produced non-finite values",
                op.name()
            )));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            data,
        });
        Ok(NodeId(id))
    }

    /// Registers a constant input tensor.
    pub fn input(&mut self, tensor: Tensor<F>) -> Result<NodeId> {
        let shape = tensor.shape().to_vec();
        self.push(Op::Leaf, vec![], shape, tensor.into_data())
    }

    /// Registers a parameter group; its gradient appears in `backward` output.
    pub fn param(&mut self, group: &ParameterGroup<F>) -> Result<NodeId> {
        if self.params.iter().any(|(_, n)| n == group.name()) {
            return Err(Error::Contract(format!(
                "parameter group `{}` registered twice on one tape",
                group.name()
            )));
        }
        let id = self.push(
            Op::Leaf,
            vec![],
            group.tensor().shape().to_vec(),
            group.tensor().data().to_vec(),
        )?;
        self.params.push((id.0, group.name().to_string()));
        Ok(id)
    }

    /// Node handle of an already-registered parameter group.
    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params
            .iter()
            .find(|(_, n)| n == name)
            .map(|(idx, _)| NodeId(*idx))
    }

    /// Looks up rows of a `[rows, d]` table: `out[k, :] = table[ids[k], :]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, d) = self.dims2_of(table, "gather")?;
        if ids.is_empty() {
            return Err(Error::Contract("gather: empty id list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Data(format!(
                    "gather: id {id} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        self.push(
            Op::Gather { ids: ids.to_vec() },
            vec![table.0],
            vec![ids.len(), d],
            data,
        )
    }

    /// `x @ w + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, i) = self.dims2_of(x, "affine")?;
        let (wi, o) = self.dims2_of(w, "affine")?;
        if wi != i {
            return Err(Error::Config(format!(
                "affine: input width {i} does not match weight rows {wi}"
            )));
        }
        let bshape = self.nodes[b.0].shape.clone();
        if bshape != [o] {
            return Err(Error::Config(format!(
                "affine: bias shape {bshape:?} does not match output width {o}"
            )));
        }
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        let mut data = vec![F::zero(); n * o];
        for r in 0..n {
            let out_row = &mut data[r * o..(r + 1) * o];
            out_row.copy_from_slice(bd);
            for a in 0..i {
                let xv = xd[r * i + a];
                if xv == F::zero() {
                    continue;
                }
                let wrow = &wd[a * o..(a + 1) * o];
                for (c, &wv) in wrow.iter().enumerate() {
                    out_row[c] += xv * wv;
                }
            }
        }
        self.push(Op::Affine, vec![x.0, w.0, b.0], vec![n, o], data)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::MulElem, vec![a.0, b.0], shape, data)
    }

    /// Concatenates rank-2 tensors along the column axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat: no parts".into()));
        }
        let (n, _) = self.dims2_of(parts[0], "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc) = self.dims2_of(p, "concat")?;
            if pn != n {
                return Err(Error::Config(format!(
                    "concat: row count {pn} does not match {n}"
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.nodes[p.0].data[r * w..(r + 1) * w];
                data.extend_from_slice(src);
            }
        }
        self.push(
            Op::Concat,
            parts.iter().map(|p| p.0).collect(),
            vec![n, total],
            data,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| v.max(F::zero()))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Relu, vec![x.0], shape, data)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self.nodes[x.0].data.iter().map(|&v| sigmoid(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Sigmoid, vec![x.0], shape, data)
    }

    /// Inverted dropout: keeps entries with probability `1 - rate` and scales
    /// survivors by `1/(1-rate)`, so eval needs no rescaling.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate {rate} must lie in [0, 1)"
            )));
        }
        let keep = F::real(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.nodes[x.0].data.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Dropout { mask }, vec![x.0], shape, data)
    }

    /// Mean sigmoid cross-entropy over rows where `mask` is true. With no
    /// masked-in rows the loss is the constant zero and contributes no
    /// gradient.
    pub fn bce_mean(&mut self, logits: NodeId, labels: &[F], mask: &[bool]) -> Result<NodeId> {
        let n = self.nodes[logits.0].data.len();
        if labels.len() != n || mask.len() != n {
            return Err(Error::Contract(format!(
                "bce_mean: {n} logits but {} labels / {} mask entries",
                labels.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut total = F::zero();
        if count > 0 {
            for r in 0..n {
                if mask[r] {
                    total += bce_with_logit(self.nodes[logits.0].data[r], labels[r]);
                }
            }
            total = total / F::real(count as f64);
        }
        self.push(
            Op::BceMean {
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            vec![logits.0],
            vec![1],
            vec![total],
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.nodes[x.0].data.iter().copied().sum();
        self.push(Op::Sum, vec![x.0], vec![1], vec![total])
    }

    pub fn sum_squares(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.nodes[x.0].data.iter().map(|&v| v * v).sum();
        self.push(Op::SumSquares, vec![x.0], vec![1], vec![total])
    }

    pub fn index(&mut self, x: NodeId, at: usize) -> Result<NodeId> {
        let n = self.nodes[x.0].data.len();
        if at >= n {
            return Err(Error::Contract(format!(
                "index: position {at} out of range for length {n}"
            )));
        }
        let v = self.nodes[x.0].data[at];
        self.push(Op::Index { at }, vec![x.0], vec![1], vec![v])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self.nodes[x.0].data.iter().map(|&v| v.exp()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Exp, vec![x.0], shape, data)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self.nodes[x.0].data.iter().map(|&v| -v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Neg, vec![x.0], shape, data)
    }

    pub fn scale(&mut self, x: NodeId, factor: F) -> Result<NodeId> {
        let data = self.nodes[x.0].data.iter().map(|&v| v * factor).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Scale { factor }, vec![x.0], shape, data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Add, vec![a.0, b.0], shape, data)
    }

    /// Accumulates gradients of a scalar loss with respect to every
    /// registered parameter group. Groups the loss does not depend on
    /// receive explicit zero arrays.
    pub fn backward(&self, loss: NodeId, task: impl Into<String>) -> Result<GradientSet<F>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                loss_node.shape
            )));
        }

        let param_of_node: HashMap<usize, usize> = self
            .params
            .iter()
            .enumerate()
            .map(|(pi, (node, _))| (*node, pi))
            .collect();
        let mut param_adjoints: Vec<Option<Vec<F>>> = vec![None; self.params.len()];

        let mut adjoints: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = adjoints[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    if let Some(&pi) = param_of_node.get(&idx) {
                        param_adjoints[pi] = Some(dy);
                    }
                }
                Op::Gather { ids } => {
                    let table = node.inputs[0];
                    let d = self.nodes[table].shape[1];
                    let dst = acc(&mut adjoints, table, self.nodes[table].data.len());
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dst[id * d + c] += dy[r * d + c];
                        }
                    }
                }
                Op::Affine => {
                    let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    let n = node.shape[0];
                    let o = node.shape[1];
                    let i = self.nodes[x].shape[1];
                    {
                        let dx = acc(&mut adjoints, x, n * i);
                        let wd = &self.nodes[w].data;
                        for r in 0..n {
                            for a in 0..i {
                                let mut s = F::zero();
                                let wrow = &wd[a * o..(a + 1) * o];
                                let dyrow = &dy[r * o..(r + 1) * o];
                                for c in 0..o {
                                    s += dyrow[c] * wrow[c];
                                }
                                dx[r * i + a] += s;
                            }
                        }
                    }
                    {
                        let dw = acc(&mut adjoints, w, i * o);
                        let xd = &self.nodes[x].data;
                        for r in 0..n {
                            let dyrow = &dy[r * o..(r + 1) * o];
                            for a in 0..i {
                                let xv = xd[r * i + a];
                                if xv == F::zero() {
                                    continue;
                                }
                                let drow = &mut dw[a * o..(a + 1) * o];
                                for c in 0..o {
                                    drow[c] += xv * dyrow[c];
                                }
                            }
                        }
                    }
                    {
                        let db = acc(&mut adjoints, b, o);
                        for r in 0..n {
                            for c in 0..o {
                                db[c] += dy[r * o + c];
                            }
                        }
                    }
                }
                Op::MulElem => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    {
                        let da = acc(&mut adjoints, a, dy.len());
                        for (k, v) in da.iter_mut().enumerate() {
                            *v += dy[k] * self.nodes[b].data[k];
                        }
                    }
                    {
                        let db = acc(&mut adjoints, b, dy.len());
                        for (k, v) in db.iter_mut().enumerate() {
                            *v += dy[k] * self.nodes[a].data[k];
                        }
                    }
                }
                Op::Concat => {
                    let n = node.shape[0];
                    let total = node.shape[1];
                    let mut offset = 0;
                    for &p in &node.inputs {
                        let w = self.nodes[p].shape[1];
                        let dp = acc(&mut adjoints, p, n * w);
                        for r in 0..n {
                            for c in 0..w {
                                dp[r * w + c] += dy[r * total + offset + c];
                            }
                        }
                        offset += w;
                    }
                }
                Op::Relu => {
                    let x = node.inputs[0];
                    let dx = acc(&mut adjoints, x, dy.len());
                    for (k, v) in dx.iter_mut().enumerate() {
                        // Subgradient 0 at the kink.
                        if self.nodes[x].data[k] > F::zero() {
                            *v += dy[k];
                        }
                    }
                }
                Op::Sigmoid => {
                    let x = node.inputs[0];
                    let dx = acc(&mut adjoints, x, dy.len());
                    for (k, v) in dx.iter_mut().enumerate() {
                        let s = node.data[k];
                        *v += dy[k] * s * (F::one() - s);
                    }
                }
                Op::Dropout { mask } => {
                    let x = node.inputs[0];
                    let dx = acc(&mut adjoints, x, dy.len());
                    for (k, v) in dx.iter_mut().enumerate() {
                        *v += dy[k] * mask[k];
                    }
                }
                Op::BceMean {
                    labels,
                    mask,
                    count,
                } => {
                    if *count > 0 {
                        let x = node.inputs[0];
                        let scale = dy[0] / F::real(*count as f64);
                        let dx = acc(&mut adjoints, x, labels.len());
                        for (k, v) in dx.iter_mut().enumerate() {
                            if mask[k] {
                                let z = self.nodes[x].data[k];
                                *v += scale * (sigmoid(z) - labels[k]);
                            }
                        }
                    }
                }
                Op::Sum => {
                    let x = node.inputs[0];
                    let len = self.nodes[x].data.len();
                    let dx = acc(&mut adjoints, x, len);
                    for v in dx.iter_mut() {
                        *v += dy[0];
                    }
                }
                Op::SumSquares => {
                    let x = node.inputs[0];
                    let len = self.nodes[x].data.len();
                    let two = F::real(2.0);
                    let dx = acc(&mut adjoints, x, len);
                    for (k, v) in dx.iter_mut().enumerate() {
                        *v += two * self.nodes[x].data[k] * dy[0];
                    }
                }
                Op::Index { at } => {
                    let x = node.inputs[0];
                    let len = self.nodes[x].data.len();
                    let dx = acc(&mut adjoints, x, len);
                    dx[*at] += dy[0];
                }
                Op::Exp => {
                    let x = node.inputs[0];
                    let dx = acc(&mut adjoints, x, dy.len());
                    for (k, v) in dx.iter_mut().enumerate() {
                        *v += dy[k] * node.data[k];
                    }
                }
                Op::Neg => {
                    let x = node.inputs[0];
                    let dx = acc(&mut adjoints, x, dy.len());
                    for (k, v) in dx.iter_mut().enumerate() {
                        *v -= dy[k];
                    }
                }
                Op::Scale { factor } => {
                    let x = node.inputs[0];
                    let dx = acc(&mut adjoints, x, dy.len());
                    for (k, v) in dx.iter_mut().enumerate() {
                        *v += dy[k] * *factor;
                    }
                }
                Op::Add => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    {
                        let da = acc(&mut adjoints, a, dy.len());
                        for (k, v) in da.iter_mut().enumerate() {
                            *v += dy[k];
                        }
                    }
                    {
                        let db = acc(&mut adjoints, b, dy.len());
                        for (k, v) in db.iter_mut().enumerate() {
                            *v += dy[k];
                        }
                    }
                }
            }
        }

        let mut set = GradientSet::new(task);
        for (pi, (node, name)) in self.params.iter().enumerate() {
            let grad = param_adjoints[pi]
                .take()
                .unwrap_or_else(|| vec![F::zero(); self.nodes[*node].data.len()]);
            set.insert(name.clone(), grad);
        }
        Ok(set)
    }

    fn dims2_of(&self, id: NodeId, op: &str) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Config(format!(
                "{op}: expected a rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Config(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    /// Test hook: tampers with a node's stored forward values so backward
    /// rules that read them produce wrong gradients.
    #[cfg(test)]
    pub(crate) fn corrupt_node_data(&mut self, id: NodeId, f: impl FnOnce(&mut [F])) {
        f(&mut self.nodes[id.0].data);
    }
}

fn acc<F: Scalar>(adjoints: &mut [Option<Vec<F>>], idx: usize, len: usize) -> &mut Vec<F> {
    adjoints[idx].get_or_insert_with(|| vec![F::zero(); len])
}
