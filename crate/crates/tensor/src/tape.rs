use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::array::{Array, Scalar};
use crate::backend::Backend;
use crate::error::{Result, TensorError};
use crate::kernels::{self, IndexPlan};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LogSumExp(NodeId),
    Dropout(NodeId, Array<T>),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize, usize),
    Reshape(NodeId),
    PadRows(NodeId),
    Select {
        src: NodeId,
        rows: Vec<usize>,
        cols: Option<Vec<usize>>,
    },
    Assign {
        dst: NodeId,
        v: NodeId,
        rows: Vec<usize>,
        cols: Option<Vec<usize>>,
    },
    Sum(NodeId),
}

struct Node<T> {
    value: Arc<Array<T>>,
    op: Op<T>,
}

/// Linear record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so walking the record backwards
/// is a reverse topological traversal that visits each node once.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<Vec<(String, NodeId)>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unnamed leaf whose gradient can be read back with [`Gradients::wrt`].
    pub fn var(&self, a: Array<T>) -> NodeId {
        self.push(Arc::new(a), Op::Leaf)
    }

    fn push(&self, value: Arc<Array<T>>, op: Op<T>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        NodeId(nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> Arc<Array<T>> {
        Arc::clone(&self.nodes.borrow()[id.0].value)
    }

    /// Runs the reverse pass from a scalar `loss`.
    ///
    /// Every registered parameter receives a gradient; parameters the loss
    /// does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0].value;
        if root.len() != 1 {
            return Err(TensorError::NotScalar(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array::full(root.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let da = kernels::gemm(&g, false, &nodes[b.0].value, true)?;
                    let db = kernels::gemm(&nodes[a.0].value, true, &g, false)?;
                    accumulate(&mut grads[a.0], da)?;
                    accumulate(&mut grads[b.0], db)?;
                }
                Op::MatMulNt(a, b) => {
                    let da = kernels::gemm(&g, false, &nodes[b.0].value, false)?;
                    let db = kernels::gemm(&g, true, &nodes[a.0].value, false)?;
                    accumulate(&mut grads[a.0], da)?;
                    accumulate(&mut grads[b.0], db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone())?;
                    accumulate(&mut grads[b.0], g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], kernels::scale(&g, -1.0))?;
                    accumulate(&mut grads[a.0], g)?;
                }
                Op::Mul(a, b) => {
                    let da = kernels::mul(&g, &nodes[b.0].value)?;
                    let db = kernels::mul(&g, &nodes[a.0].value)?;
                    accumulate(&mut grads[a.0], da)?;
                    accumulate(&mut grads[b.0], db)?;
                }
                Op::AddBias(a, bias) => {
                    accumulate(&mut grads[bias.0], kernels::sum_rows(&g))?;
                    accumulate(&mut grads[a.0], g)?;
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], kernels::scale(&g, *c))?,
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = kernels::zip_with("sigmoid'", &g, y, |g, y| g * y * (T::one() - y))?;
                    accumulate(&mut grads[a.0], d)?;
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = kernels::zip_with("tanh'", &g, y, |g, y| g * (T::one() - y * y))?;
                    accumulate(&mut grads[a.0], d)?;
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    let d = kernels::zip_with("relu'", &g, y, |g, y| if y > T::zero() { g } else { T::zero() })?;
                    accumulate(&mut grads[a.0], d)?;
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let (_, last) = y.outer_and_last();
                    let mut d = g;
                    for (drow, yrow) in d.data_mut().chunks_mut(last).zip(y.data().chunks(last)) {
                        let dot: T = drow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                        for (dx, &y) in drow.iter_mut().zip(yrow) {
                            *dx = y * (*dx - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], d)?;
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let (_, last) = y.outer_and_last();
                    let mut d = g;
                    for (drow, yrow) in d.data_mut().chunks_mut(last).zip(y.data().chunks(last)) {
                        let total: T = drow.iter().copied().sum();
                        for (dx, &y) in drow.iter_mut().zip(yrow) {
                            *dx -= y.exp() * total;
                        }
                    }
                    accumulate(&mut grads[a.0], d)?;
                }
                Op::LogSumExp(a) => {
                    let x = &nodes[a.0].value;
                    let y = &node.value;
                    let (_, last) = x.outer_and_last();
                    let mut d = Array::zeros(x.shape());
                    for (r, (drow, xrow)) in d.data_mut().chunks_mut(last).zip(x.data().chunks(last)).enumerate() {
                        let (gy, lse) = (g.data()[r], y.data()[r]);
                        for (dx, &x) in drow.iter_mut().zip(xrow) {
                            *dx = gy * (x - lse).exp();
                        }
                    }
                    accumulate(&mut grads[a.0], d)?;
                }
                Op::Dropout(a, mask) => accumulate(&mut grads[a.0], kernels::mul(&g, mask)?)?,
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = nodes[p.0].value.outer_and_last().1;
                        accumulate(&mut grads[p.0], kernels::slice_last(&g, start, start + w)?)?;
                        start += w;
                    }
                }
                Op::Slice(a, start, end) => {
                    let x = &nodes[a.0].value;
                    let (outer, last) = x.outer_and_last();
                    let width = end - start;
                    let slot = grads[a.0].get_or_insert_with(|| Array::zeros(x.shape()));
                    let dst = slot.data_mut();
                    for r in 0..outer {
                        for j in 0..width {
                            dst[r * last + start + j] += g.data()[r * width + j];
                        }
                    }
                }
                Op::Reshape(a) => {
                    let shape = nodes[a.0].value.shape().to_vec();
                    accumulate(&mut grads[a.0], g.reshaped(&shape)?)?;
                }
                Op::PadRows(a) => {
                    let x = &nodes[a.0].value;
                    let d = Array::new(x.shape(), g.data()[..x.len()].to_vec())?;
                    accumulate(&mut grads[a.0], d)?;
                }
                Op::Select { src, rows, cols } => {
                    let x = &nodes[src.0].value;
                    let plan = kernels::index_plan("indexed_select", x.shape(), rows, cols.as_deref())?;
                    let slot = grads[src.0].get_or_insert_with(|| Array::zeros(x.shape()));
                    kernels::scatter_add(slot, &plan, &g);
                }
                Op::Assign { dst, v, rows, cols } => {
                    let plan = kernels::index_plan("indexed_assign", g.shape(), rows, cols.as_deref())?;
                    let dv = gather(&g, &plan)?;
                    let mut da = g;
                    clear(&mut da, &plan);
                    accumulate(&mut grads[v.0], dv)?;
                    accumulate(&mut grads[dst.0], da)?;
                }
                Op::Sum(a) => {
                    let x = &nodes[a.0].value;
                    accumulate(&mut grads[a.0], Array::full(x.shape(), g.data()[0]))?;
                }
            }
        }

        let mut by_name = BTreeMap::new();
        for (name, id) in self.params.borrow().iter() {
            let shape = nodes[id.0].value.shape().to_vec();
            let g = grads
                .get(id.0)
                .and_then(Option::as_ref)
                .cloned()
                .unwrap_or_else(|| Array::zeros(&shape));
            match by_name.get_mut(name) {
                // The same parameter registered twice: gradients add up.
                Some(prev) => kernels::add_assign(prev, &g)?,
                None => {
                    by_name.insert(name.clone(), g);
                }
            }
        }
        Ok(Gradients { by_name, nodes: grads })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Array<T>>, g: Array<T>) -> Result<()> {
    match slot {
        Some(acc) => kernels::add_assign(acc, &g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn gather<T: Scalar>(g: &Array<T>, plan: &IndexPlan) -> Result<Array<T>> {
    let mut data = Vec::with_capacity(plan.offsets.len() * plan.block);
    for &off in &plan.offsets {
        data.extend_from_slice(&g.data()[off..off + plan.block]);
    }
    Array::new(&plan.out_shape, data)
}

fn clear<T: Scalar>(g: &mut Array<T>, plan: &IndexPlan) {
    let data = g.data_mut();
    for &off in &plan.offsets {
        data[off..off + plan.block].fill(T::zero());
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    by_name: BTreeMap<String, Array<T>>,
    nodes: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a named parameter.
    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.by_name.get(name)
    }

    /// Gradient of any leaf, `None` if the loss does not reach it.
    pub fn wrt(&self, id: NodeId) -> Option<&Array<T>> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_map(self) -> BTreeMap<String, Array<T>> {
        self.by_name
    }
}

impl<T: Scalar> Backend for Tape<T> {
    type Elem = T;
    type Tensor = NodeId;

    fn constant(&self, a: Array<T>) -> NodeId {
        self.push(Arc::new(a), Op::Leaf)
    }

    fn param(&self, name: &str, a: &Arc<Array<T>>) -> NodeId {
        let id = self.push(Arc::clone(a), Op::Leaf);
        self.params.borrow_mut().push((name.to_string(), id));
        id
    }

    fn value(&self, t: &NodeId) -> Arc<Array<T>> {
        self.val(*t)
    }

    fn shape(&self, t: &NodeId) -> Vec<usize> {
        self.nodes.borrow()[t.0].value.shape().to_vec()
    }

    fn matmul(&self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = kernels::gemm(&self.val(*a), false, &self.val(*b), false)?;
        Ok(self.push(Arc::new(v), Op::MatMul(*a, *b)))
    }

    fn matmul_nt(&self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = kernels::gemm(&self.val(*a), false, &self.val(*b), true)?;
        Ok(self.push(Arc::new(v), Op::MatMulNt(*a, *b)))
    }

    fn add(&self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = kernels::add(&self.val(*a), &self.val(*b))?;
        Ok(self.push(Arc::new(v), Op::Add(*a, *b)))
    }

    fn sub(&self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = kernels::sub(&self.val(*a), &self.val(*b))?;
        Ok(self.push(Arc::new(v), Op::Sub(*a, *b)))
    }

    fn mul(&self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = kernels::mul(&self.val(*a), &self.val(*b))?;
        Ok(self.push(Arc::new(v), Op::Mul(*a, *b)))
    }

    fn add_bias(&self, a: &NodeId, bias: &NodeId) -> Result<NodeId> {
        let v = kernels::add_bias(&self.val(*a), &self.val(*bias))?;
        Ok(self.push(Arc::new(v), Op::AddBias(*a, *bias)))
    }

    fn scale(&self, a: &NodeId, c: f64) -> Result<NodeId> {
        let v = kernels::scale(&self.val(*a), c);
        Ok(self.push(Arc::new(v), Op::Scale(*a, c)))
    }

    fn sigmoid(&self, a: &NodeId) -> Result<NodeId> {
        let v = kernels::sigmoid(&self.val(*a));
        Ok(self.push(Arc::new(v), Op::Sigmoid(*a)))
    }

    fn tanh(&self, a: &NodeId) -> Result<NodeId> {
        let v = kernels::tanh(&self.val(*a));
        Ok(self.push(Arc::new(v), Op::Tanh(*a)))
    }

    fn relu(&self, a: &NodeId) -> Result<NodeId> {
        let v = kernels::relu(&self.val(*a));
        Ok(self.push(Arc::new(v), Op::Relu(*a)))
    }

    fn softmax(&self, a: &NodeId) -> Result<NodeId> {
        let v = kernels::softmax(&self.val(*a))?;
        Ok(self.push(Arc::new(v), Op::Softmax(*a)))
    }

    fn log_softmax(&self, a: &NodeId) -> Result<NodeId> {
        let v = kernels::log_softmax(&self.val(*a))?;
        Ok(self.push(Arc::new(v), Op::LogSoftmax(*a)))
    }

    fn logsumexp(&self, a: &NodeId) -> Result<NodeId> {
        let v = kernels::logsumexp(&self.val(*a))?;
        Ok(self.push(Arc::new(v), Op::LogSumExp(*a)))
    }

    fn dropout<R: Rng + ?Sized>(&self, a: &NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        let x = self.val(*a);
        let mask = kernels::dropout_mask::<T, R>(x.shape(), rate, rng)?;
        let v = kernels::mul(&x, &mask)?;
        Ok(self.push(Arc::new(v), Op::Dropout(*a, mask)))
    }

    fn concat(&self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<Arc<Array<T>>> = parts.iter().map(|p| self.val(*p)).collect();
        let refs: Vec<&Array<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let v = kernels::concat_last(&refs)?;
        Ok(self.push(Arc::new(v), Op::Concat(parts.to_vec())))
    }

    fn slice(&self, a: &NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = kernels::slice_last(&self.val(*a), start, end)?;
        Ok(self.push(Arc::new(v), Op::Slice(*a, start, end)))
    }

    fn reshape(&self, a: &NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = (*self.val(*a)).clone().reshaped(shape)?;
        Ok(self.push(Arc::new(v), Op::Reshape(*a)))
    }

    fn pad_rows(&self, a: &NodeId, len: usize) -> Result<NodeId> {
        let v = kernels::pad_rows(&self.val(*a), len)?;
        Ok(self.push(Arc::new(v), Op::PadRows(*a)))
    }

    fn select(&self, a: &NodeId, rows: &[usize], cols: Option<&[usize]>) -> Result<NodeId> {
        let v = kernels::select(&self.val(*a), rows, cols)?;
        Ok(self.push(
            Arc::new(v),
            Op::Select {
                src: *a,
                rows: rows.to_vec(),
                cols: cols.map(<[usize]>::to_vec),
            },
        ))
    }

    fn assign(&self, a: NodeId, rows: &[usize], cols: Option<&[usize]>, v: &NodeId) -> Result<NodeId> {
        let mut out = (*self.val(a)).clone();
        kernels::assign_in_place(&mut out, rows, cols, &self.val(*v))?;
        Ok(self.push(
            Arc::new(out),
            Op::Assign {
                dst: a,
                v: *v,
                rows: rows.to_vec(),
                cols: cols.map(<[usize]>::to_vec),
            },
        ))
    }

    fn sum(&self, a: &NodeId) -> Result<NodeId> {
        let v = kernels::sum(&self.val(*a));
        Ok(self.push(Arc::new(v), Op::Sum(*a)))
    }
}
