//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! accumulates gradients for every node that contributed to it. The op set is
//! deliberately narrow: it covers exactly what the graph network, the logit
//! head, the contrastive loss and the attention-MIL baseline need, and several
//! ops are fused (attention, top-k pooling, softmax cross-entropy) so their
//! backward passes stay cheap and numerically stable.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Norm below which a row is left untouched by [`Tape::row_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Adjacency lists: entry `i` holds the source rows that feed destination row `i`.
pub type Neighbors = Arc<Vec<Vec<usize>>>;

enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    ConstLeft(Arc<Mat>, Var),
    MulConst(Var, Arc<Mat>),
    NeighborMean(Neighbors, Var),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    RowNormalize(Var),
    Transpose(Var),
    ColSum(Var),
    Sum(Var),
    SoftmaxCol(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        nbrs: Neighbors,
        heads: usize,
        /// `beta[dst][head][j]` for the j-th neighbor of `dst`.
        beta: Vec<Vec<Vec<f64>>>,
    },
    TopKMean {
        x: Var,
        picks: Vec<Vec<(usize, usize)>>,
    },
    SoftmaxCe {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node on the tape.
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.0[v.0].take()
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let value = self.value(a) + r;
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulNT(a, b))
    }

    /// `c · b` for a constant left factor.
    pub fn const_left(&mut self, c: Arc<Mat>, b: Var) -> Var {
        let value = c.dot(self.value(b));
        self.push(value, Op::ConstLeft(c, b))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: Arc<Mat>) -> Var {
        let value = self.value(a) * &*c;
        self.push(value, Op::MulConst(a, c))
    }

    /// Row `i` of the output is the mean of the rows of `x` listed in
    /// `nbrs[i]`, or zero when the list is empty.
    pub fn neighbor_mean(&mut self, nbrs: Neighbors, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = Mat::zeros((nbrs.len(), xv.ncols()));
        for (i, list) in nbrs.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let mut row = value.row_mut(i);
            for &j in list {
                row += &xv.row(j);
            }
            row /= list.len() as f64;
        }
        self.push(value, Op::NeighborMean(nbrs, x))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a))
    }

    /// Scales every row to unit L2 norm; rows with norm at most [`NORM_EPS`]
    /// pass through unchanged.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > NORM_EPS {
                row /= n;
            }
        }
        self.push(value, Op::RowNormalize(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Column sums as a `1×n` row.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(value, Op::ColSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Softmax over the entries of an `n×1` column.
    pub fn softmax_col(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.ncols(), 1, "softmax_col expects a column");
        let p = softmax(av.column(0).iter().copied());
        let value = Mat::from_shape_vec((p.len(), 1), p).expect("column shape");
        self.push(value, Op::SoftmaxCol(a))
    }

    /// Multi-head scaled dot-product attention restricted to a neighbor list.
    ///
    /// Channels are split into `heads` contiguous blocks. For destination `i`
    /// and head `h`, weights are `softmax_j(q_i·k_j / √d)` over `j ∈ nbrs[i]`
    /// and the output block is `Σ_j β_ij v_j`. Destinations without neighbors
    /// produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, nbrs: Neighbors, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.ncols();
        assert!(heads > 0 && dim % heads == 0, "heads must divide width");
        assert_eq!(qv.nrows(), nbrs.len());
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut value = Mat::zeros((nbrs.len(), dim));
        let mut beta = Vec::with_capacity(nbrs.len());
        for (i, list) in nbrs.iter().enumerate() {
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![h * hd..(h + 1) * hd];
                let qi = qv.slice(s![i, h * hd..(h + 1) * hd]);
                let w = softmax(list.iter().map(|&j| qi.dot(&kv.slice(s![j, h * hd..(h + 1) * hd])) * scale));
                let mut out = value.slice_mut(s![i, h * hd..(h + 1) * hd]);
                for (&j, &b) in list.iter().zip(&w) {
                    out.scaled_add(b, &vv.row(j).slice(cols));
                }
                per_head.push(w);
            }
            beta.push(per_head);
        }
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                nbrs,
                heads,
                beta,
            },
        )
    }

    /// Output is `1×G`; entry `g` is the mean of `x[r, c]` over `picks[g]`.
    pub fn topk_mean(&mut self, x: Var, picks: Vec<Vec<(usize, usize)>>) -> Var {
        let xv = self.value(x);
        let mut value = Mat::zeros((1, picks.len()));
        for (g, p) in picks.iter().enumerate() {
            if !p.is_empty() {
                value[[0, g]] = p.iter().map(|&(r, c)| xv[[r, c]]).sum::<f64>() / p.len() as f64;
            }
        }
        self.push(value, Op::TopKMean { x, picks })
    }

    /// `-log softmax(logits)[label]` for a `1×C` logit row.
    pub fn softmax_ce(&mut self, logits: Var, label: usize) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), 1);
        let probs = softmax(lv.row(0).iter().copied());
        let value = Mat::from_elem((1, 1), -log_softmax_at(lv.row(0).iter().copied(), label));
        self.push(
            value,
            Op::SoftmaxCe {
                logits,
                label,
                probs,
            },
        )
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::from_elem((1, 1), 1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads(grads)
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&self.value(*b).t()));
                acc(*b, self.value(*a).t().dot(g));
            }
            Op::MatMulNT(a, b) => {
                acc(*a, g.dot(self.value(*b)));
                acc(*b, g.t().dot(self.value(*a)));
            }
            Op::ConstLeft(c, b) => acc(*b, c.t().dot(g)),
            Op::MulConst(a, c) => acc(*a, g * &**c),
            Op::NeighborMean(nbrs, x) => {
                let xv = self.value(*x);
                let mut d = Mat::zeros(xv.dim());
                for (i, list) in nbrs.iter().enumerate() {
                    if list.is_empty() {
                        continue;
                    }
                    let w = 1.0 / list.len() as f64;
                    for &j in list {
                        d.row_mut(j).scaled_add(w, &g.row(i));
                    }
                }
                acc(*x, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Tanh(_) | Op::Softplus(_) => {
                let (a, deriv): (Var, fn(f64, f64) -> f64) = match &node.op {
                    // y = tanh x, dy/dx = 1 - y²
                    Op::Tanh(a) => (*a, |_, y| 1.0 - y * y),
                    Op::Softplus(a) => (*a, |x, _| sigmoid(x)),
                    _ => unreachable!(),
                };
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(self.value(a))
                    .and(&node.value)
                    .for_each(|d, &x, &y| *d *= deriv(x, y));
                acc(a, d);
            }
            Op::RowNormalize(a) => {
                let av = self.value(*a);
                let mut d = g.clone();
                for ((mut drow, xrow), yrow) in d.rows_mut().into_iter().zip(av.rows()).zip(node.value.rows()) {
                    let n = xrow.dot(&xrow).sqrt();
                    if n > NORM_EPS {
                        // (g - y (y·g)) / |x|
                        let proj = yrow.dot(&drow);
                        drow.scaled_add(-proj, &yrow);
                        drow /= n;
                    }
                }
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::ColSum(a) => {
                let rows = self.value(*a).nrows();
                let d = g.broadcast((rows, g.ncols())).expect("row broadcast").to_owned();
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, Mat::from_elem(self.value(*a).dim(), g[[0, 0]])),
            Op::SoftmaxCol(a) => {
                let y = node.value.column(0);
                let gy: f64 = y.iter().zip(g.column(0)).map(|(y, g)| y * g).sum();
                let d = Mat::from_shape_fn(node.value.dim(), |(i, _)| y[i] * (g[[i, 0]] - gy));
                acc(*a, d);
            }
            Op::Attention {
                q,
                k,
                v,
                nbrs,
                heads,
                beta,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let hd = qv.ncols() / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = Mat::zeros(qv.dim());
                let mut dk = Mat::zeros(kv.dim());
                let mut dv = Mat::zeros(vv.dim());
                for (i, list) in nbrs.iter().enumerate() {
                    for (h, b) in beta[i].iter().enumerate() {
                        let cols = s![h * hd..(h + 1) * hd];
                        let gi = g.slice(s![i, h * hd..(h + 1) * hd]);
                        // dβ_j = g·v_j ; dscore_j = β_j (dβ_j - Σ β dβ)
                        let dbeta: Vec<f64> = list.iter().map(|&j| gi.dot(&vv.row(j).slice(cols))).collect();
                        let mean: f64 = b.iter().zip(&dbeta).map(|(b, d)| b * d).sum();
                        for (jj, &j) in list.iter().enumerate() {
                            dv.slice_mut(s![j, h * hd..(h + 1) * hd]).scaled_add(b[jj], &gi);
                            let ds = b[jj] * (dbeta[jj] - mean) * scale;
                            if ds != 0.0 {
                                let kj = kv.slice(s![j, h * hd..(h + 1) * hd]);
                                let qi = qv.slice(s![i, h * hd..(h + 1) * hd]);
                                dq.slice_mut(s![i, h * hd..(h + 1) * hd]).scaled_add(ds, &kj);
                                dk.slice_mut(s![j, h * hd..(h + 1) * hd]).scaled_add(ds, &qi);
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::TopKMean { x, picks } => {
                let mut d = Mat::zeros(self.value(*x).dim());
                for (gi, p) in picks.iter().enumerate() {
                    if p.is_empty() {
                        continue;
                    }
                    let w = g[[0, gi]] / p.len() as f64;
                    for &(r, c) in p {
                        d[[r, c]] += w;
                    }
                }
                acc(*x, d);
            }
            Op::SoftmaxCe {
                logits,
                label,
                probs,
            } => {
                let mut d = Mat::from_shape_vec((1, probs.len()), probs.clone()).expect("row shape");
                d[[0, *label]] -= 1.0;
                d *= g[[0, 0]];
                acc(*logits, d);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softmax(xs: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn log_softmax_at(xs: impl Iterator<Item = f64> + Clone, at: usize) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.clone().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.clone().nth(at).expect("index in range") - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks the tape gradient of `f` at every entry of `inputs` against
    /// central differences.
    fn check(inputs: Vec<Mat>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |ins: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|m| t.leaf(m.clone())).collect();
            let o = f(&mut t, &vs);
            t.scalar(o)
        };
        let h = 1e-6;
        for (i, m) in inputs.iter().enumerate() {
            for idx in ndarray::indices(m.dim()) {
                let mut plus = inputs.clone();
                plus[i][idx] += h;
                let mut minus = inputs.clone();
                minus[i][idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads.get(vars[i]).map_or(0.0, |g| g[idx]);
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {i} at {idx:?}: analytic {an}, numeric {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let c = random(&mut rng, 5, 4);
        check(vec![a.clone(), b], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.tanh(m);
            t.sum(m)
        });
        check(vec![a, c], |t, v| {
            let m = t.matmul_nt(v[0], v[1]);
            let m = t.softplus(m);
            t.sum(m)
        });
    }

    #[test]
    fn elementwise_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 4, 3);
        let row = random(&mut rng, 1, 3);
        let w = Arc::new(random(&mut rng, 4, 3));
        let c = Arc::new(random(&mut rng, 2, 4));
        check(vec![a, row], move |t, v| {
            let x = t.add_row(v[0], v[1]);
            let x = t.row_normalize(x);
            let x = t.mul_const(x, w.clone());
            let y = t.const_left(c.clone(), x);
            let y = t.relu(y);
            let z = t.col_sum(x);
            let z = t.scale(z, 0.7);
            let z = t.transpose(z);
            let z = t.softmax_col(z);
            let s1 = t.sum(y);
            let s2 = t.sum(z);
            let zz = t.matmul_nt(z, z);
            let s3 = t.sum(zz);
            let s = t.add(s1, s2);
            t.add(s, s3)
        });
    }

    #[test]
    fn neighbor_mean_and_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nbrs: Neighbors = Arc::new(vec![vec![0, 2], vec![], vec![1], vec![0, 1, 2]]);
        let q = random(&mut rng, 4, 4);
        let k = random(&mut rng, 3, 4);
        let v = random(&mut rng, 3, 4);
        let n2 = nbrs.clone();
        check(vec![q, k, v], move |t, vs| {
            let a = t.attention(vs[0], vs[1], vs[2], n2.clone(), 2);
            let m = t.neighbor_mean(n2.clone(), vs[2]);
            let a = t.tanh(a);
            let m = t.softplus(m);
            let s1 = t.sum(a);
            let s2 = t.sum(m);
            t.add(s1, s2)
        });
    }

    #[test]
    fn pooled_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 3, 4);
        check(vec![x], |t, v| {
            let l = t.topk_mean(v[0], vec![vec![(0, 0), (2, 1)], vec![(1, 3)], vec![(0, 2), (1, 2), (2, 2)]]);
            let l = t.scale(l, 3.0);
            t.softmax_ce(l, 1)
        });
    }

    #[test]
    fn attention_weights_are_a_distribution() {
        let mut t = Tape::new();
        let q = t.leaf(array![[1.0, 0.0, 2.0, 1.0]]);
        let k = t.leaf(array![[0.5, 0.1, 0.0, 1.0], [1.0, 1.0, -1.0, 0.0], [0.0, 0.3, 0.2, 0.2]]);
        let v = t.leaf(Mat::ones((3, 4)));
        let out = t.attention(q, k, v, Arc::new(vec![vec![0, 1, 2]]), 2);
        // v rows are all ones, so each output entry equals Σβ for its head
        for x in t.value(out).iter() {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stable_scalar_helpers() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        let p = softmax([1000.0, 1000.0].into_iter());
        assert_eq!(p, vec![0.5, 0.5]);
        assert!((log_softmax_at([0.0, 0.0, 0.0].into_iter(), 2) + 3f64.ln()).abs() < 1e-15);
    }
}
