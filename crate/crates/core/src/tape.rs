//! Reverse-mode automatic differentiation over batched matrices.
//!
//! A [`Tape`] records primitive operations (affine maps, SiLU, elementwise
//! arithmetic, reductions) as they execute. Payloads are `N x C` matrices so a
//! whole batch flows through the recorded program at once; the heavy lifting
//! inside `affine` is a matrix product. A single backward sweep then yields
//! gradients for every leaf that was marked differentiable — network
//! parameters when training, chain inputs when differentiating a denoising
//! map with respect to its starting point.
//!
//! Nodes are appended in execution order, so the tape is topologically sorted
//! by construction and backward visits each node exactly once.

use ndarray::{linalg::general_mat_mul, s, Array2, Axis, Zip};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward on an empty tape")]
    EmptyTape,
    #[error("seed shape {got:?} does not match output shape {want:?}")]
    SeedShape { got: (usize, usize), want: (usize, usize) },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    #[inline]
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// x·w + b with b broadcast over rows; x is N x I, w is I x O, b is 1 x O.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Silu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SumAll(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Array2<f64>,
    needs_grad: bool,
}

/// Numerically stable logistic function, shared by the activation, the
/// smooth reward, and closed-form expressions built on it.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Recorded computation graph; create values with [`Tape::var`] /
/// [`Tape::constant`] and combine them with the op methods.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable leaf; backward never allocates a gradient for it.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// 1x1 differentiable leaf, for scalar-valued uses of the tape.
    pub fn scalar_var(&mut self, value: f64) -> NodeId {
        self.var(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.idx()].value
    }

    pub fn value_scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Array2<f64>, needs_grad: bool) -> NodeId {
        let id = NodeId(u32::try_from(self.nodes.len()).expect("tape too large"));
        self.nodes.push(Node { op, value, needs_grad });
        id
    }

    #[inline]
    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    fn unary<F: Fn(f64) -> f64>(&mut self, op: Op, a: NodeId, f: F) -> NodeId {
        let value = self.nodes[a.idx()].value.mapv(f);
        let needs = self.needs(a);
        self.push(op, value, needs)
    }

    fn binary<F: Fn(f64, f64) -> f64>(&mut self, op: Op, a: NodeId, b: NodeId, f: F) -> NodeId {
        let (na, nb) = (&self.nodes[a.idx()], &self.nodes[b.idx()]);
        assert_eq!(na.value.dim(), nb.value.dim(), "elementwise shape mismatch");
        let mut value = na.value.clone();
        Zip::from(&mut value).and(&nb.value).for_each(|v, &x| *v = f(*v, x));
        let needs = na.needs_grad || nb.needs_grad;
        self.push(op, value, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Div(a, b), a, b, |x, y| x / y)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Silu(a), a, |x| x * sigmoid(x))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Square(a), a, |x| x * x)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::Scale(a, c), a, |x| c * x)
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::Shift(a), a, |x| x + c)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    /// y = x·w + b, recorded as one node.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (nx, nw, nb) = (&self.nodes[x.idx()], &self.nodes[w.idx()], &self.nodes[b.idx()]);
        assert_eq!(nx.value.ncols(), nw.value.nrows(), "affine inner dims");
        assert_eq!(nb.value.dim(), (1, nw.value.ncols()), "affine bias shape");
        let mut value = nx.value.dot(&nw.value);
        let bias = nb.value.row(0);
        for mut row in value.rows_mut() {
            row += &bias;
        }
        let needs = nx.needs_grad || nw.needs_grad || nb.needs_grad;
        self.push(Op::Affine { x, w, b }, value, needs)
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (na, nb) = (&self.nodes[a.idx()], &self.nodes[b.idx()]);
        assert_eq!(na.value.nrows(), nb.value.nrows(), "concat row mismatch");
        let value = ndarray::concatenate(Axis(1), &[na.value.view(), nb.value.view()])
            .expect("concat shapes checked");
        let needs = na.needs_grad || nb.needs_grad;
        self.push(Op::ConcatCols(a, b), value, needs)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Array2::from_elem((1, 1), self.nodes[a.idx()].value.sum());
        let needs = self.needs(a);
        self.push(Op::SumAll(a), value, needs)
    }

    /// Mean of all entries, as a 1x1 node.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.idx()].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Backward sweep from `root` seeded with ones.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TapeError> {
        let seed = Array2::ones(self.nodes[root.idx()].value.dim());
        self.backward_seeded(root, seed)
    }

    /// Backward sweep from `root` with an explicit output gradient.
    pub fn backward_seeded(&self, root: NodeId, seed: Array2<f64>) -> Result<Gradients, TapeError> {
        if self.nodes.is_empty() {
            return Err(TapeError::EmptyTape);
        }
        let want = self.nodes[root.idx()].value.dim();
        if seed.dim() != want {
            return Err(TapeError::SeedShape { got: seed.dim(), want });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.idx()] = Some(seed);
        for i in (0..=root.idx()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g = upper[0].as_ref().expect("checked above");
            self.propagate(i, g, lower);
        }
        Ok(Gradients { grads })
    }

    /// Pushes the gradient `g` of node `i` into its inputs (all at index < i).
    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        match node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = &self.nodes[x.idx()].value;
                let wv = &self.nodes[w.idx()].value;
                if self.needs(x) {
                    let slot = ensure(&mut grads[x.idx()], xv.dim());
                    general_mat_mul(1.0, g, &wv.t(), 1.0, slot);
                }
                if self.needs(w) {
                    let slot = ensure(&mut grads[w.idx()], wv.dim());
                    general_mat_mul(1.0, &xv.t(), g, 1.0, slot);
                }
                if self.needs(b) {
                    let slot = ensure(&mut grads[b.idx()], (1, g.ncols()));
                    let col_sums = g.sum_axis(Axis(0));
                    let mut row = slot.row_mut(0);
                    row += &col_sums;
                }
            }
            Op::Silu(a) => self.acc_unary(a, g, grads, |x| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }),
            Op::Sigmoid(a) => self.acc_unary(a, g, grads, |x| {
                let s = sigmoid(x);
                s * (1.0 - s)
            }),
            Op::Exp(a) => {
                // reuse the stored output: d exp = exp
                if self.needs(a) {
                    let out = &node.value;
                    let slot = ensure(&mut grads[a.idx()], out.dim());
                    Zip::from(slot).and(g).and(out).for_each(|d, &gi, &yi| *d += gi * yi);
                }
            }
            Op::Square(a) => self.acc_unary(a, g, grads, |x| 2.0 * x),
            Op::Scale(a, c) => {
                if self.needs(a) {
                    let slot = ensure(&mut grads[a.idx()], g.dim());
                    Zip::from(slot).and(g).for_each(|d, &gi| *d += c * gi);
                }
            }
            Op::Shift(a) => {
                if self.needs(a) {
                    let slot = ensure(&mut grads[a.idx()], g.dim());
                    *slot += g;
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.needs(id) {
                        let slot = ensure(&mut grads[id.idx()], g.dim());
                        *slot += g;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    let slot = ensure(&mut grads[a.idx()], g.dim());
                    *slot += g;
                }
                if self.needs(b) {
                    let slot = ensure(&mut grads[b.idx()], g.dim());
                    *slot -= g;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = &self.nodes[b.idx()].value;
                    let slot = ensure(&mut grads[a.idx()], g.dim());
                    Zip::from(slot).and(g).and(bv).for_each(|d, &gi, &x| *d += gi * x);
                }
                if self.needs(b) {
                    let av = &self.nodes[a.idx()].value;
                    let slot = ensure(&mut grads[b.idx()], g.dim());
                    Zip::from(slot).and(g).and(av).for_each(|d, &gi, &x| *d += gi * x);
                }
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.idx()].value;
                if self.needs(a) {
                    let slot = ensure(&mut grads[a.idx()], g.dim());
                    Zip::from(slot).and(g).and(bv).for_each(|d, &gi, &y| *d += gi / y);
                }
                if self.needs(b) {
                    let out = &node.value; // a / b
                    let slot = ensure(&mut grads[b.idx()], g.dim());
                    Zip::from(slot)
                        .and(g)
                        .and(out)
                        .and(bv)
                        .for_each(|d, &gi, &q, &y| *d -= gi * q / y);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[a.idx()].value.ncols();
                if self.needs(a) {
                    let slot = ensure(&mut grads[a.idx()], self.nodes[a.idx()].value.dim());
                    *slot += &g.slice(s![.., ..ca]);
                }
                if self.needs(b) {
                    let slot = ensure(&mut grads[b.idx()], self.nodes[b.idx()].value.dim());
                    *slot += &g.slice(s![.., ca..]);
                }
            }
            Op::SumAll(a) => {
                if self.needs(a) {
                    let gs = g[[0, 0]];
                    let slot = ensure(&mut grads[a.idx()], self.nodes[a.idx()].value.dim());
                    slot.mapv_inplace(|d| d + gs);
                }
            }
        }
    }

    fn acc_unary<F: Fn(f64) -> f64>(
        &self,
        a: NodeId,
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
        deriv: F,
    ) {
        if !self.needs(a) {
            return;
        }
        let av = &self.nodes[a.idx()].value;
        let slot = ensure(&mut grads[a.idx()], av.dim());
        Zip::from(slot).and(g).and(av).for_each(|d, &gi, &x| *d += gi * deriv(x));
    }
}

fn ensure(slot: &mut Option<Array2<f64>>, dim: (usize, usize)) -> &mut Array2<f64> {
    slot.get_or_insert_with(|| Array2::zeros(dim))
}

/// Gradients indexed by the node they belong to.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.idx()].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads[id.idx()].take()
    }

    /// Gradient of a 1x1 node, 0 if the node was never reached.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.get(id).map(|g| g[[0, 0]]).unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.scalar_var(3.0);
        let y = tape.square(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(tape.value_scalar(y), 9.0);
        assert_eq!(grads.scalar(x), 6.0);
    }

    #[test]
    fn silu_derivative_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.scalar_var(0.0);
        let y = tape.silu(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.scalar(x), 0.5);
    }

    #[test]
    fn empty_tape_is_a_usage_error() {
        let tape = Tape::new();
        let err = tape.backward_seeded(NodeId(0), Array2::zeros((1, 1)));
        assert!(matches!(err, Err(TapeError::EmptyTape)));
        // non-empty tape with a wrong seed shape is also rejected
        let mut tape = Tape::new();
        let x = tape.scalar_var(1.0);
        let err = tape.backward_seeded(x, Array2::zeros((2, 1)));
        assert!(matches!(err, Err(TapeError::SeedShape { .. })));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.scalar_var(3.0);
        let sq = tape.mul(x, x);
        let y = tape.add(sq, x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.scalar(x), 7.0);
    }

    #[test]
    fn affine_matches_hand_computation() {
        let mut tape = Tape::new();
        let x = tape.var(array![[1.0, 2.0], [3.0, 4.0]]);
        let w = tape.var(array![[5.0], [6.0]]);
        let b = tape.var(array![[0.5]]);
        let y = tape.affine(x, w, b);
        assert_eq!(tape.value(y), &array![[17.5], [39.5]]);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &array![[4.0], [6.0]]);
        assert_eq!(grads.get(b).unwrap(), &array![[2.0]]);
        assert_eq!(grads.get(x).unwrap(), &array![[5.0, 6.0], [5.0, 6.0]]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.scalar_var(2.0);
        let c = tape.constant(Array2::from_elem((1, 1), 10.0));
        let y = tape.mul(x, c);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.scalar(x), 10.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn concat_routes_gradients() {
        let mut tape = Tape::new();
        let a = tape.var(array![[1.0], [2.0]]);
        let b = tape.var(array![[3.0], [4.0]]);
        let cat = tape.concat_cols(a, b);
        let w = tape.constant(array![[2.0], [7.0]]);
        let zero_bias = tape.constant(Array2::zeros((1, 1)));
        let y = tape.affine(cat, w, zero_bias);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &array![[2.0], [2.0]]);
        assert_eq!(grads.get(b).unwrap(), &array![[7.0], [7.0]]);
    }
}
