//! Reverse-mode differentiation over a recorded graph of matrix operations.
//!
//! A [`Graph`] borrows a parameter list, records every operation applied to
//! parameters or intermediate nodes, and on [`Graph::backward`] accumulates
//! gradients into caller-provided buffers shaped like the parameters.

use crate::num::Scalar;
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    Param(usize),
    Node(usize),
}

enum Op<T> {
    Input,
    GatherRows { src: Var, idx: Vec<usize> },
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Scale(Var, T),
    CausalSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<T>, inv_std: Vec<T> },
    Gelu(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Matrix<T> },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub struct Graph<'p, T: Scalar> {
    params: &'p [Matrix<T>],
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p [Matrix<T>]) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        match v {
            Var::Param(i) => &self.params[i],
            Var::Node(i) => &self.nodes[i].value,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var::Node(self.nodes.len() - 1)
    }

    /// A constant that receives no gradient.
    pub fn input(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Input)
    }

    /// `out[i] = src[idx[i]]`
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let s = self.value(src);
        let mut out = Matrix::zeros(idx.len(), s.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(i));
        }
        self.push(out, Op::GatherRows { src, idx: idx.to_vec() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let mut out = self.value(x).clone();
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), out.cols());
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.row(0)) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows(), bv.cols());
        matmul_acc(av, bv, &mut out);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        matmul_nt_acc(av, bv, &mut out);
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Row softmax over a square score matrix where row `i` only attends to
    /// columns `j <= i` with `key_mask[j]` false. Rows with nothing to attend
    /// to are zero.
    pub fn causal_softmax(&mut self, x: Var, key_mask: &[bool]) -> Var {
        let mut out = self.value(x).clone();
        let n = out.cols();
        assert_eq!(out.rows(), n);
        assert_eq!(key_mask.len(), n);
        for i in 0..n {
            let row = out.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                if j > i || key_mask[j] {
                    *v = T::neg_infinity();
                }
            }
            softmax_in_place(row);
        }
        self.push(out, Op::CausalSoftmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (rows, cols) = xv.shape();
        let n = T::lit(cols as f64);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().copied().sum::<T>() / n;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
            inv_std.push(is);
            for j in 0..cols {
                let h = (r[j] - mean) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * g.get(0, j) + b.get(0, j));
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let out = Matrix::from_fn(xv.rows(), len, |i, j| xv.get(i, start + j));
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows);
            for i in 0..rows {
                out.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Inverted dropout: `keep` holds one flag per element.
    pub fn dropout(&mut self, x: Var, keep: &[bool], p: T) -> Var {
        let scale = T::one() / (T::one() - p);
        let mask: Vec<T> = keep.iter().map(|&k| if k { scale } else { T::zero() }).collect();
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.len());
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Matrix::from_vec(xv.rows(), xv.cols(), data);
        self.push(out, Op::Dropout { x, mask })
    }

    /// Summed negative log-likelihood of `targets` under row-softmax of
    /// `logits`; `None` rows contribute nothing. Produces a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let mut probs = self.value(logits).clone();
        assert_eq!(probs.rows(), targets.len());
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let row = probs.row_mut(i);
            if let Some(t) = *t {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                total += lse - row[t];
                softmax_in_place(row);
            }
        }
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Backpropagates from the `1 × 1` node `out`, adding into `param_grads`.
    pub fn backward(&self, out: Var, param_grads: &mut [Matrix<T>]) {
        let Var::Node(out_idx) = out else {
            panic!("backward from a parameter");
        };
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out_idx] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=out_idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut Matrix<T>)| match v {
                Var::Param(i) => f(&mut param_grads[i]),
                Var::Node(i) => {
                    let slot = grads[i].get_or_insert_with(|| {
                        let (r, c) = self.nodes[i].value.shape();
                        Matrix::zeros(r, c)
                    });
                    f(slot)
                }
            };
            match &node.op {
                Op::Input => {}
                Op::GatherRows { src, idx } => acc(*src, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }),
                Op::Add(a, b) => {
                    acc(*a, &mut |d| d.add_assign(&g));
                    acc(*b, &mut |d| d.add_assign(&g));
                }
                Op::AddRow(x, row) => {
                    acc(*x, &mut |d| d.add_assign(&g));
                    acc(*row, &mut |d| {
                        for i in 0..g.rows() {
                            for (o, &v) in d.row_mut(0).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, &mut |d| matmul_nt_acc(&g, bv, d));
                    acc(*b, &mut |d| matmul_tn_acc(av, &g, d));
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, &mut |d| matmul_acc(&g, bv, d));
                    acc(*b, &mut |d| matmul_tn_acc(&g, av, d));
                }
                Op::Scale(x, s) => acc(*x, &mut |d| d.axpy(*s, &g)),
                Op::CausalSoftmax(x) => {
                    let y = &node.value;
                    acc(*x, &mut |d| {
                        for i in 0..y.rows() {
                            let (yr, gr) = (y.row(i), g.row(i));
                            let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for (o, (&yv, &gv)) in d.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                                *o += yv * (gv - s);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gm = self.value(*gamma);
                    let (rows, cols) = xhat.shape();
                    let n = T::lit(cols as f64);
                    acc(*gamma, &mut |d| {
                        for i in 0..rows {
                            for j in 0..cols {
                                let v = d.get(0, j) + g.get(i, j) * xhat.get(i, j);
                                d.set(0, j, v);
                            }
                        }
                    });
                    acc(*beta, &mut |d| {
                        for i in 0..rows {
                            for (o, &v) in d.row_mut(0).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                    });
                    acc(*x, &mut |d| {
                        let mut dxhat = vec![T::zero(); cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                dxhat[j] = g.get(i, j) * gm.get(0, j);
                            }
                            let m1 = dxhat.iter().copied().sum::<T>() / n;
                            let m2 = dxhat.iter().zip(xhat.row(i)).map(|(&a, &b)| a * b).sum::<T>() / n;
                            for j in 0..cols {
                                let v = inv_std[i] * (dxhat[j] - m1 - xhat.get(i, j) * m2);
                                d.set(i, j, d.get(i, j) + v);
                            }
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
                    let three = T::lit(3.0);
                    acc(*x, &mut |d| {
                        for ((o, &v), &gv) in d.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                            let t = (c * (v + k * v * v * v)).tanh();
                            let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
                            *o += gv * (half * (T::one() + t) + half * v * dt);
                        }
                    });
                }
                Op::SliceCols { x, start } => acc(*x, &mut |d| {
                    for i in 0..g.rows() {
                        for (o, &v) in d.row_mut(i)[*start..*start + g.cols()].iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        acc(p, &mut |d| {
                            for i in 0..g.rows() {
                                for (o, &v) in d.row_mut(i).iter_mut().zip(&g.row(i)[off..off + w]) {
                                    *o += v;
                                }
                            }
                        });
                        off += w;
                    }
                }
                Op::Dropout { x, mask } => acc(*x, &mut |d| {
                    for ((o, &m), &gv) in d.data_mut().iter_mut().zip(mask).zip(g.data()) {
                        *o += m * gv;
                    }
                }),
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g.get(0, 0);
                    acc(*logits, &mut |d| {
                        for (i, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for (o, &p) in d.row_mut(i).iter_mut().zip(probs.row(i)) {
                                *o += scale * p;
                            }
                            let v = d.get(i, t) - scale;
                            d.set(i, t, v);
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Compares backward against central differences for a graph builder.
    fn check(params: Vec<Matrix<f64>>, build: impl Fn(&mut Graph<f64>) -> Var) {
        let mut grads: Vec<Matrix<f64>> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        {
            let mut g = Graph::new(&params);
            let out = build(&mut g);
            g.backward(out, &mut grads);
        }
        let h = 1e-6;
        for pi in 0..params.len() {
            for k in 0..params[pi].len() {
                let mut p = params.clone();
                p[pi].data_mut()[k] += h;
                let up = {
                    let mut g = Graph::new(&p);
                    let o = build(&mut g);
                    g.value(o).get(0, 0)
                };
                p[pi].data_mut()[k] -= 2.0 * h;
                let down = {
                    let mut g = Graph::new(&p);
                    let o = build(&mut g);
                    g.value(o).get(0, 0)
                };
                let num = (up - down) / (2.0 * h);
                let ana = grads[pi].data()[k];
                assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()), "param {pi}[{k}]: {ana} vs {num}");
            }
        }
    }

    /// Reduces a matrix to a scalar through a fixed random projection so
    /// every element gets a distinct upstream gradient.
    fn reduce(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
        let (r, c) = g.value(x).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.input(rand_matrix(&mut rng, c, 1));
        let col = g.matmul(x, w);
        let ones = g.input(Matrix::filled(1, r, 1.0));
        g.matmul(ones, col)
    }

    #[test]
    fn elementwise_and_linear_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 4, 5), rand_matrix(&mut rng, 1, 5), rand_matrix(&mut rng, 3, 5)];
        check(params, |g| {
            let a = g.matmul(Var::Param(0), Var::Param(1));
            let b = g.add_row(a, Var::Param(2));
            let c = g.add(b, Var::Param(3));
            let d = g.gelu(c);
            let e = g.scale(d, 0.7);
            let f = g.matmul_nt(e, Var::Param(3));
            reduce(g, f, 9)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![rand_matrix(&mut rng, 4, 6), rand_matrix(&mut rng, 1, 6), rand_matrix(&mut rng, 1, 6)];
        check(params, |g| {
            let y = g.layer_norm(Var::Param(0), Var::Param(1), Var::Param(2));
            reduce(g, y, 3)
        });
    }

    #[test]
    fn attention_pieces() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![rand_matrix(&mut rng, 5, 4), rand_matrix(&mut rng, 7, 4)];
        check(params, |g| {
            let x = g.gather_rows(Var::Param(1), &[3, 0, 3, 6, 2]);
            let h = g.add(Var::Param(0), x);
            let q = g.slice_cols(h, 0, 2);
            let k = g.slice_cols(h, 2, 2);
            let s = g.matmul_nt(q, k);
            let p = g.causal_softmax(s, &[false, false, true, false, false]);
            let o = g.matmul(p, k);
            let c = g.concat_cols(&[o, q]);
            reduce(g, c, 4)
        });
    }

    #[test]
    fn cross_entropy_and_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = vec![rand_matrix(&mut rng, 4, 6)];
        let keep: Vec<bool> = (0..24).map(|i| i % 3 != 0).collect();
        check(params, |g| {
            let d = g.dropout(Var::Param(0), &keep, 0.25);
            g.cross_entropy(d, &[Some(1), None, Some(5), Some(0)])
        });
    }

    #[test]
    fn masked_rows_and_values() {
        let params = vec![Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0])];
        let mut g = Graph::new(&params);
        let p = g.causal_softmax(Var::Param(0), &[true, false]);
        assert_eq!(g.value(p).row(0), &[0.0, 0.0]);
        assert_eq!(g.value(p).row(1), &[0.0, 1.0]);
        let logits = g.input(Matrix::zeros(2, 50));
        let ce = g.cross_entropy(logits, &[Some(3), Some(7)]);
        assert!((g.value(ce).get(0, 0) / 2.0 - 50f64.ln()).abs() < 1e-12);
    }
}
