//! Dynamic reverse-mode tape.
//!
//! Operations record their result eagerly; `backward` walks the tape in
//! reverse and accumulates adjoints. Shape errors while recording are
//! programming errors and panic; callers validate external inputs first.

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Relu(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Scale(usize, f64),
    Reshape(usize),
    SelectRows(usize, Vec<usize>),
    BlockGram(usize, usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Const, t)
    }

    fn same_len(&self, a: Var, b: Var, what: &str) {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(
            x.len(),
            y.len(),
            "{what}: {:?} vs {:?}",
            x.shape(),
            y.shape()
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "add");
        let v = self.value(a).zip(self.value(b), |x, y| x + y).unwrap();
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "sub");
        let v = self.value(a).zip(self.value(b), |x, y| x - y).unwrap();
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "mul");
        let v = self.value(a).zip(self.value(b), |x, y| x * y).unwrap();
        self.push(Op::Mul(a.0, b.0), v)
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (m, n) = self.value(x).as_2d();
        assert_eq!(self.value(bias).len(), n, "add_row: bias length");
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..m {
            for (o, bj) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&b) {
                *o += bj;
            }
        }
        let out = Tensor::matrix(m, n, out.into_data());
        self.push(Op::AddRow(x.0, bias.0), out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(Op::MatMul(a.0, b.0), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a.0), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a.0), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a.0), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a.0), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a.0), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a.0), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a.0, s), v)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(Op::Reshape(a.0), v)
    }

    /// Gathers rows of a matrix in the given order.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let t = self.value(a);
        let (_, c) = t.as_2d();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let v = Tensor::matrix(rows.len(), c, out);
        self.push(Op::SelectRows(a.0, rows.to_vec()), v)
    }

    /// Per-block Gram matrices: input `[blocks*r, c]`, output `[blocks, c*c]`
    /// where row `s` is `flatten(Y_s^T Y_s)` for the `s`-th block of `r` rows.
    pub fn block_gram(&mut self, a: Var, blocks: usize) -> Var {
        let t = self.value(a);
        let (rows, c) = t.as_2d();
        assert!(
            blocks > 0 && rows % blocks == 0,
            "block_gram: {rows} rows into {blocks} blocks"
        );
        let r = rows / blocks;
        let mut out = Vec::with_capacity(blocks * c * c);
        for s in 0..blocks {
            let y = &t.data()[s * r * c..(s + 1) * r * c];
            out.extend(matmul_tn(y, y, r, c, c));
        }
        let v = Tensor::matrix(blocks, c * c, out);
        self.push(Op::BlockGram(a.0, blocks), v)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "node {} is not on this tape",
                output.0
            )));
        }
        if !self.nodes[output.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(self.nodes[output.0].value.shape(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                    accumulate(&mut grads, *b, &g, &self.nodes);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                    accumulate(&mut grads, *b, &g.scale(-1.0), &self.nodes);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip(&self.nodes[*b].value, |x, y| x * y).unwrap();
                    let gb = g.zip(&self.nodes[*a].value, |x, y| x * y).unwrap();
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                    accumulate(&mut grads, *b, &gb, &self.nodes);
                }
                Op::AddRow(x, bias) => {
                    let (m, n) = g.as_2d();
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *x, &g, &self.nodes);
                    accumulate(&mut grads, *bias, &Tensor::vector(gb), &self.nodes);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let (m, k) = av.as_2d();
                    let (_, n) = bv.as_2d();
                    if needs_grad(&self.nodes, *a) {
                        let ga = matmul_nt(g.data(), bv.data(), m, n, k);
                        accumulate(&mut grads, *a, &Tensor::matrix(m, k, ga), &self.nodes);
                    }
                    if needs_grad(&self.nodes, *b) {
                        let gb = matmul_tn(av.data(), g.data(), m, k, n);
                        accumulate(&mut grads, *b, &Tensor::matrix(k, n, gb), &self.nodes);
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, &g.transpose(), &self.nodes),
                Op::Tanh(a) => {
                    let ga = g.zip(&node.value, |x, y| x * (1.0 - y * y)).unwrap();
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Relu(a) => {
                    let ga = g
                        .zip(&self.nodes[*a].value, |x, y| if y > 0.0 { x } else { 0.0 })
                        .unwrap();
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Square(a) => {
                    let ga = g.zip(&self.nodes[*a].value, |x, y| 2.0 * x * y).unwrap();
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Sum(a) => {
                    let ga = Tensor::filled(self.nodes[*a].value.shape(), g.item());
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len() as f64;
                    let ga = Tensor::filled(self.nodes[*a].value.shape(), g.item() / n);
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, &g.scale(*s), &self.nodes),
                Op::Reshape(a) => accumulate(&mut grads, *a, &g, &self.nodes),
                Op::SelectRows(a, rows) => {
                    let src = &self.nodes[*a].value;
                    let (m, c) = src.as_2d();
                    let mut ga = vec![0.0; m * c];
                    for (k, &r) in rows.iter().enumerate() {
                        for (dst, v) in ga[r * c..(r + 1) * c].iter_mut().zip(g.row(k)) {
                            *dst += v;
                        }
                    }
                    accumulate(&mut grads, *a, &Tensor::matrix(m, c, ga), &self.nodes);
                }
                Op::BlockGram(a, blocks) => {
                    let y = &self.nodes[*a].value;
                    let (rows, c) = y.as_2d();
                    let r = rows / blocks;
                    let mut ga = Vec::with_capacity(rows * c);
                    for s in 0..*blocks {
                        let gs = g.row(s);
                        // d/dY of sum G_pq Y^T Y = Y (G + G^T)
                        let mut sym = vec![0.0; c * c];
                        for p in 0..c {
                            for q in 0..c {
                                sym[p * c + q] = gs[p * c + q] + gs[q * c + p];
                            }
                        }
                        let ys = &y.data()[s * r * c..(s + 1) * r * c];
                        ga.extend(matmul_raw(ys, &sym, r, c, c));
                    }
                    accumulate(&mut grads, *a, &Tensor::matrix(rows, c, ga), &self.nodes);
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }
}

fn needs_grad(nodes: &[Node], i: usize) -> bool {
    !matches!(nodes[i].op, Op::Const)
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: &Tensor, nodes: &[Node]) {
    if !needs_grad(nodes, i) {
        return;
    }
    match &mut grads[i] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(g.reshape(nodes[i].value.shape()).expect("gradient shape"));
        }
    }
}

/// Compares tape gradients of `f` at `x` against central differences.
///
/// Returns `max_j |g_j - fd_j| / (|g_j| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv);
    let y0 = tape.value(out).item();
    if !y0.is_finite() {
        return Err(Error::NonFinite("f(x)".into()));
    }
    let analytic = tape.backward(out)?.wrt(xv);
    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(p.clone());
        let o = f(&mut t, v);
        let y = t.value(o).item();
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite("f at perturbed point".into()))
        }
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for j in 0..x.len() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[j] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[j] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let a = analytic.data()[j];
        worst = worst.max((a - fd).abs() / (a.abs() + 1e-12));
    }
    Ok(worst)
}
