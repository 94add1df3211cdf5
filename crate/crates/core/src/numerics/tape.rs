use super::matrix::{hardmax_columns, softmax_columns, Matrix};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    /// `max(x - nu, 0)` with `nu` a column vector broadcast over columns.
    BiasedRelu { input: NodeId, threshold: NodeId },
    /// `x + b` with `b` a column vector broadcast over columns.
    AddColumnBroadcast { input: NodeId, bias: NodeId },
    /// Piecewise constant; contributes zero derivative. The input edge is
    /// recorded for the graph but never consulted during backprop.
    HardmaxCols(#[allow(dead_code)] NodeId),
    SoftmaxCols(NodeId),
    /// Entrywise `min(max(x, lo), hi)`; gradient passes strictly inside.
    ClampBox { input: NodeId, lo: f64, hi: f64 },
    /// Extract column `index` as an `r x 1` vector.
    Column { input: NodeId, index: usize },
    /// Column-major flattening to an `(r*c) x 1` vector.
    VecColumns(NodeId),
    /// Elementwise sum of same-shape nodes.
    AddN(Vec<NodeId>),
    /// `logsumexp(logits) - logits[class]`, the per-sample cross-entropy.
    NegLogSoftmaxPick { logits: NodeId, class: usize },
    /// `sum((a - b)^2)` as a scalar.
    FrobSqDiff(NodeId, NodeId),
    /// Elementwise square root.
    Sqrt(NodeId),
    /// Scalar division `a / b` of two 1x1 nodes.
    DivScalar(NodeId, NodeId),
    /// Max of scalar nodes; subgradient routed to the first argmax.
    MaxN(Vec<NodeId>),
    SubConst(NodeId),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Reverse-mode tape over matrix-valued nodes.
///
/// Build a graph with the op methods, then call [`Tape::gradient`] on a
/// scalar (`1x1`) node. Nodes are immutable once pushed; the tape is acyclic
/// by construction because ops may only reference earlier nodes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `id`; exactly zero for nodes off the path to the output.
    pub fn get(&self, id: NodeId) -> Matrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn is_on_path(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a leaf (input or parameter).
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).scale(-1.0);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn biased_relu(&mut self, input: NodeId, threshold: NodeId) -> Result<NodeId> {
        let v = super::matrix::biased_relu(self.value(input), self.value(threshold))?;
        Ok(self.push(v, Op::BiasedRelu { input, threshold }))
    }

    pub fn add_column_broadcast(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let b = self.value(bias);
        if b.rows() != x.rows() || b.cols() != 1 {
            return Err(Error::Shape(format!(
                "column broadcast bias {}x{} against input {}x{}",
                b.rows(),
                b.cols(),
                x.rows(),
                x.cols()
            )));
        }
        let mut v = x.clone();
        for i in 0..v.rows() {
            for j in 0..v.cols() {
                v.set(i, j, v.get(i, j) + b.get(i, 0));
            }
        }
        Ok(self.push(v, Op::AddColumnBroadcast { input, bias }))
    }

    pub fn hardmax_columns(&mut self, a: NodeId) -> NodeId {
        let v = hardmax_columns(self.value(a));
        self.push(v, Op::HardmaxCols(a))
    }

    pub fn softmax_columns(&mut self, a: NodeId) -> NodeId {
        let v = softmax_columns(self.value(a));
        self.push(v, Op::SoftmaxCols(a))
    }

    pub fn clamp_box(&mut self, input: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(input).map(|x| x.clamp(lo, hi));
        self.push(v, Op::ClampBox { input, lo, hi })
    }

    pub fn column(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let x = self.value(input);
        if index >= x.cols() {
            return Err(Error::Shape(format!("column {index} of a {}-column matrix", x.cols())));
        }
        let v = Matrix::column(&x.column_slice(index));
        Ok(self.push(v, Op::Column { input, index }))
    }

    pub fn vec_columns(&mut self, input: NodeId) -> NodeId {
        let v = Matrix::column(&self.value(input).vec_columns());
        self.push(v, Op::VecColumns(input))
    }

    pub fn add_n(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Contract("add_n needs at least one term".into()))?;
        let mut v = self.value(*first).clone();
        for t in &terms[1..] {
            v = v.add(self.value(*t))?;
        }
        Ok(self.push(v, Op::AddN(terms.to_vec())))
    }

    /// Cross-entropy of one sample: `-log softmax(logits)[class]`.
    pub fn neg_log_softmax_pick(&mut self, logits: NodeId, class: usize) -> Result<NodeId> {
        let x = self.value(logits);
        if x.cols() != 1 || class >= x.rows() {
            return Err(Error::Shape(format!(
                "logits must be a column vector with class {class} in range, got {}x{}",
                x.rows(),
                x.cols()
            )));
        }
        let m = x.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + x.data().iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let v = Matrix::from_vec(1, 1, vec![lse - x.get(class, 0)]).unwrap();
        Ok(self.push(v, Op::NegLogSoftmaxPick { logits, class }))
    }

    pub fn frob_sq_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.value(a).sub(self.value(b))?;
        let v = Matrix::from_vec(1, 1, vec![d.data().iter().map(|x| x * x).sum()]).unwrap();
        Ok(self.push(v, Op::FrobSqDiff(a, b)))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn div_scalar(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != (1, 1) || self.value(b).shape() != (1, 1) {
            return Err(Error::Shape("div_scalar expects 1x1 nodes".into()));
        }
        let v = Matrix::from_vec(1, 1, vec![self.value(a).get(0, 0) / self.value(b).get(0, 0)])
            .map_err(|_| Error::Numeric("division produced a non-finite value".into()))?;
        Ok(self.push(v, Op::DivScalar(a, b)))
    }

    pub fn max_n(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::Contract("max_n needs at least one term".into()));
        }
        let mut best = f64::NEG_INFINITY;
        for t in terms {
            if self.value(*t).shape() != (1, 1) {
                return Err(Error::Shape("max_n expects 1x1 nodes".into()));
            }
            best = best.max(self.value(*t).get(0, 0));
        }
        let v = Matrix::from_vec(1, 1, vec![best]).unwrap();
        Ok(self.push(v, Op::MaxN(terms.to_vec())))
    }

    pub fn sub_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x - c);
        self.push(v, Op::SubConst(a))
    }

    /// Smallest distance of any recorded value to a non-smooth boundary:
    /// ReLU zero crossings, hardmax ties, clamp edges and max-node ties.
    /// Finite-difference checks are only meaningful when this margin exceeds
    /// the probe step times the local sensitivity.
    pub fn min_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for v in self.nodes[a.0].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::BiasedRelu { input, threshold } => {
                    let x = &self.nodes[input.0].value;
                    let nu = &self.nodes[threshold.0].value;
                    for i in 0..x.rows() {
                        for j in 0..x.cols() {
                            margin = margin.min((x.get(i, j) - nu.get(i, 0)).abs());
                        }
                    }
                }
                Op::HardmaxCols(a) => {
                    let x = &self.nodes[a.0].value;
                    if x.rows() < 2 {
                        continue;
                    }
                    for j in 0..x.cols() {
                        let mut col = x.column_slice(j);
                        col.sort_by(|p, q| q.partial_cmp(p).unwrap());
                        margin = margin.min(col[0] - col[1]);
                    }
                }
                Op::ClampBox { input, lo, hi } => {
                    for v in self.nodes[input.0].value.data() {
                        margin = margin.min((v - lo).abs().min((v - hi).abs()));
                    }
                }
                Op::MaxN(terms) => {
                    if terms.len() < 2 {
                        continue;
                    }
                    let mut vals: Vec<f64> =
                        terms.iter().map(|t| self.nodes[t.0].value.get(0, 0)).collect();
                    vals.sort_by(|p, q| q.partial_cmp(p).unwrap());
                    margin = margin.min(vals[0] - vals[1]);
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse accumulation from a scalar output node.
    pub fn gradient(&self, output: NodeId) -> Result<Gradients> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "gradient requires a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).unwrap());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape()).collect() })
    }

    fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
        match &mut grads[id.0] {
            Some(g) => *g = g.add(&delta).expect("gradient shape"),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &self.nodes[idx].op {
            Op::Leaf | Op::HardmaxCols(_) => {}
            Op::MatMul(a, b) => {
                let da = g.matmul(&val(*b).transpose()).expect("matmul grad");
                let db = val(*a).transpose().matmul(g).expect("matmul grad");
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Neg(a) => Self::accumulate(grads, *a, g.scale(-1.0)),
            Op::Scale(a, c) => Self::accumulate(grads, *a, g.scale(*c)),
            Op::Hadamard(a, b) => {
                Self::accumulate(grads, *a, g.hadamard(val(*b)).expect("hadamard grad"));
                Self::accumulate(grads, *b, g.hadamard(val(*a)).expect("hadamard grad"));
            }
            Op::Transpose(a) => Self::accumulate(grads, *a, g.transpose()),
            Op::Relu(a) => {
                let mask = val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                Self::accumulate(grads, *a, g.hadamard(&mask).expect("relu grad"));
            }
            Op::BiasedRelu { input, threshold } => {
                let x = val(*input);
                let nu = val(*threshold);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                let mut dnu = Matrix::zeros(nu.rows(), 1);
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        if x.get(i, j) - nu.get(i, 0) > 0.0 {
                            dx.set(i, j, g.get(i, j));
                            dnu.set(i, 0, dnu.get(i, 0) - g.get(i, j));
                        }
                    }
                }
                Self::accumulate(grads, *input, dx);
                Self::accumulate(grads, *threshold, dnu);
            }
            Op::AddColumnBroadcast { input, bias } => {
                let mut db = Matrix::zeros(val(*bias).rows(), 1);
                for i in 0..g.rows() {
                    let s: f64 = (0..g.cols()).map(|j| g.get(i, j)).sum();
                    db.set(i, 0, s);
                }
                Self::accumulate(grads, *input, g.clone());
                Self::accumulate(grads, *bias, db);
            }
            Op::SoftmaxCols(a) => {
                let p = &self.nodes[idx].value;
                let mut dx = Matrix::zeros(p.rows(), p.cols());
                for j in 0..p.cols() {
                    let dot: f64 = (0..p.rows()).map(|i| p.get(i, j) * g.get(i, j)).sum();
                    for i in 0..p.rows() {
                        dx.set(i, j, p.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                Self::accumulate(grads, *a, dx);
            }
            Op::ClampBox { input, lo, hi } => {
                let x = val(*input);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        let v = x.get(i, j);
                        if v > *lo && v < *hi {
                            dx.set(i, j, g.get(i, j));
                        }
                    }
                }
                Self::accumulate(grads, *input, dx);
            }
            Op::Column { input, index } => {
                let x = val(*input);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    dx.set(i, *index, g.get(i, 0));
                }
                Self::accumulate(grads, *input, dx);
            }
            Op::VecColumns(a) => {
                let x = val(*a);
                let dx = Matrix::from_vec_columns(x.rows(), x.cols(), g.data())
                    .expect("vec_columns grad");
                Self::accumulate(grads, *a, dx);
            }
            Op::AddN(terms) => {
                for t in terms {
                    Self::accumulate(grads, *t, g.clone());
                }
            }
            Op::NegLogSoftmaxPick { logits, class } => {
                let p = softmax_columns(val(*logits));
                let scale = g.get(0, 0);
                let mut dx = p.scale(scale);
                dx.set(*class, 0, dx.get(*class, 0) - scale);
                Self::accumulate(grads, *logits, dx);
            }
            Op::FrobSqDiff(a, b) => {
                let d = val(*a).sub(val(*b)).expect("frob grad").scale(2.0 * g.get(0, 0));
                Self::accumulate(grads, *a, d.clone());
                Self::accumulate(grads, *b, d.scale(-1.0));
            }
            Op::Sqrt(a) => {
                let out = &self.nodes[idx].value;
                let dx = g.zip_with(out, |gi, oi| 0.5 * gi / oi).expect("sqrt grad");
                Self::accumulate(grads, *a, dx);
            }
            Op::DivScalar(a, b) => {
                let av = val(*a).get(0, 0);
                let bv = val(*b).get(0, 0);
                let gs = g.get(0, 0);
                Self::accumulate(grads, *a, Matrix::from_vec(1, 1, vec![gs / bv]).unwrap());
                Self::accumulate(
                    grads,
                    *b,
                    Matrix::from_vec(1, 1, vec![-gs * av / (bv * bv)]).unwrap(),
                );
            }
            Op::MaxN(terms) => {
                let best = self.nodes[idx].value.get(0, 0);
                let winner = terms
                    .iter()
                    .find(|t| val(**t).get(0, 0) == best)
                    .expect("max_n winner");
                Self::accumulate(grads, *winner, g.clone());
            }
            Op::SubConst(a) => Self::accumulate(grads, *a, g.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 -> 6
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(1, 1, vec![3.0]).unwrap());
        let y = tape.hadamard(x, x).unwrap();
        let grads = tape.gradient(y).unwrap();
        assert_eq!(grads.get(x).get(0, 0), 6.0);
    }

    #[test]
    fn gradient_requires_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        assert!(tape.gradient(x).is_err());
    }

    #[test]
    fn off_path_parameters_get_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(1, 1, vec![2.0]).unwrap());
        let unused = tape.leaf(Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap());
        let y = tape.hadamard(x, x).unwrap();
        let grads = tape.gradient(y).unwrap();
        assert!(!grads.is_on_path(unused));
        assert_eq!(grads.get(unused).data(), &[0.0; 4]);
    }

    /// Central finite differences over every leaf entry.
    fn finite_diff(build: &dyn Fn(&mut Tape, &[Matrix]) -> NodeId, leaves: &[Matrix]) -> Vec<Matrix> {
        let h = 1e-5;
        let eval = |leaves: &[Matrix]| {
            let mut tape = Tape::new();
            let out = build(&mut tape, leaves);
            tape.value(out).get(0, 0)
        };
        leaves
            .iter()
            .enumerate()
            .map(|(li, leaf)| {
                let mut fd = Matrix::zeros(leaf.rows(), leaf.cols());
                for i in 0..leaf.rows() {
                    for j in 0..leaf.cols() {
                        let mut plus = leaves.to_vec();
                        plus[li].set(i, j, leaf.get(i, j) + h);
                        let mut minus = leaves.to_vec();
                        minus[li].set(i, j, leaf.get(i, j) - h);
                        fd.set(i, j, (eval(&plus) - eval(&minus)) / (2.0 * h));
                    }
                }
                fd
            })
            .collect()
    }

    /// `build` must push the leaves first, in order, so leaf `i` is node `i`.
    fn assert_grad_matches(build: &dyn Fn(&mut Tape, &[Matrix]) -> NodeId, leaves: &[Matrix]) {
        let mut tape = Tape::new();
        let out = build(&mut tape, leaves);
        let grads = tape.gradient(out).unwrap();
        let fd = finite_diff(build, leaves);
        for (li, fd_leaf) in fd.iter().enumerate() {
            let ad = grads.get(NodeId(li));
            for i in 0..fd_leaf.rows() {
                for j in 0..fd_leaf.cols() {
                    let a = ad.get(i, j);
                    let f = fd_leaf.get(i, j);
                    let err = (a - f).abs() / f.abs().max(1.0);
                    assert!(err <= 1e-6, "leaf {li} entry ({i},{j}): ad={a} fd={f}");
                }
            }
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = RngStream::new(21, "tape-fd");
        for _ in 0..10 {
            let a = Matrix::from_fn(3, 4, |_, _| rng.uniform_range(-1.0, 1.0));
            let b = Matrix::from_fn(4, 2, |_, _| rng.uniform_range(-1.0, 1.0));
            let c = Matrix::from_fn(3, 2, |_, _| rng.uniform_range(-1.0, 1.0));
            let nu = Matrix::from_fn(3, 1, |_, _| rng.uniform_range(-0.5, 0.5));

            // composite of matmul, biased relu, hadamard, softmax, transpose,
            // clamp, column pick and the fused cross-entropy
            let build = |tape: &mut Tape, leaves: &[Matrix]| {
                let a = tape.leaf(leaves[0].clone());
                let b = tape.leaf(leaves[1].clone());
                let c = tape.leaf(leaves[2].clone());
                let nu = tape.leaf(leaves[3].clone());
                let ab = tape.matmul(a, b).unwrap();
                let act = tape.biased_relu(ab, nu).unwrap();
                let mixed = tape.hadamard(act, c).unwrap();
                let soft = tape.softmax_columns(mixed);
                let both = tape.add(soft, mixed).unwrap();
                let clamped = tape.clamp_box(both, -0.8, 0.8);
                let col = tape.column(clamped, 1).unwrap();
                tape.neg_log_softmax_pick(col, 0).unwrap()
            };
            assert_grad_matches(&build, &[a, b, c, nu]);
        }
    }

    #[test]
    fn hardmax_blocks_gradient_but_bilinear_path_flows() {
        let mut rng = RngStream::new(33, "tape-hardmax");
        for _ in 0..10 {
            let s = Matrix::from_fn(3, 3, |_, _| rng.uniform_range(-1.0, 1.0));
            let build = |tape: &mut Tape, leaves: &[Matrix]| {
                let s = tape.leaf(leaves[0].clone());
                let h = tape.hardmax_columns(s);
                let gated = tape.hadamard(s, h).unwrap();
                let flat = tape.vec_columns(gated);
                tape.neg_log_softmax_pick(flat, 2).unwrap()
            };
            assert_grad_matches(&build, &[s]);
        }
    }

    #[test]
    fn scalar_chain_ops_match_finite_differences() {
        let mut rng = RngStream::new(55, "tape-scalar");
        for _ in 0..10 {
            let a = Matrix::from_fn(2, 2, |_, _| rng.uniform_range(0.5, 2.0));
            let b = Matrix::from_fn(2, 2, |_, _| rng.uniform_range(-1.0, 1.0));
            let build = |tape: &mut Tape, leaves: &[Matrix]| {
                let a = tape.leaf(leaves[0].clone());
                let b = tape.leaf(leaves[1].clone());
                let sq = tape.frob_sq_diff(a, b).unwrap();
                let root = tape.sqrt(sq);
                let scaled = tape.scale(a, 0.5);
                let other = tape.frob_sq_diff(scaled, b).unwrap();
                let ratio = tape.div_scalar(other, root).unwrap();
                let shifted = tape.sub_const(ratio, 0.25);
                let best = tape.max_n(&[shifted, root]).unwrap();
                let relu = tape.relu(best);
                tape.hadamard(relu, relu).unwrap()
            };
            assert_grad_matches(&build, &[a, b]);
        }
    }
}
