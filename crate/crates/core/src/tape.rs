//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are 2-D
//! matrices; scalars are `1 x 1`. Leaves created with [`Tape::leaf`] carry a
//! caller-chosen slot number, and [`Tape::backward`] returns the gradient for
//! every slot that influenced the loss.
//!
//! Batches are packed row-wise: the tokens of every sequence in a batch are
//! stacked into one matrix and [`AttnLayout`] tells the attention kernel which
//! row ranges belong together. Token-wise layers therefore run as single large
//! matrix products.

use std::ops::Range;
use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One attention group: rows `queries` of the query matrix attend over rows
/// `keys` of the key/value matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnGroup {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

/// Row grouping for [`Tape::attention`], plus an optional per-key validity
/// mask (padding positions are `false` and receive zero attention).
#[derive(Debug, Clone, Default)]
pub struct AttnLayout {
    pub groups: Vec<AttnGroup>,
    pub key_valid: Option<Vec<bool>>,
}

impl AttnLayout {
    /// Self-attention over consecutive blocks of the given lengths.
    pub fn self_blocks(lengths: &[usize]) -> Self {
        let mut groups = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &n in lengths {
            groups.push(AttnGroup {
                queries: start..start + n,
                keys: start..start + n,
            });
            start += n;
        }
        AttnLayout {
            groups,
            key_valid: None,
        }
    }

    /// Cross-attention: block `i` of queries attends over block `i` of keys.
    pub fn cross_blocks(query_lengths: &[usize], key_lengths: &[usize]) -> Self {
        assert_eq!(query_lengths.len(), key_lengths.len());
        let mut groups = Vec::with_capacity(query_lengths.len());
        let (mut q, mut k) = (0, 0);
        for (&nq, &nk) in query_lengths.iter().zip(key_lengths) {
            groups.push(AttnGroup {
                queries: q..q + nq,
                keys: k..k + nk,
            });
            q += nq;
            k += nk;
        }
        AttnLayout {
            groups,
            key_valid: None,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<AttnLayout>,
        probs: Vec<Mat>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Dropout(Var, Mat),
    MeanSqDiff(Var, Var),
    StraightThrough(Var),
    Diversity {
        z: Var,
        book: Var,
        tau: f64,
        probs: Mat,
        mean_probs: Vec<f64>,
    },
    NegSqDistances(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
    slot: Option<usize>,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf slot.
#[derive(Debug, Default)]
pub struct Gradients {
    pub by_slot: Vec<(usize, Mat)>,
    node_grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient with respect to an arbitrary node, when it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.node_grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar(x: f64) -> Mat {
    Array2::from_elem((1, 1), x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax in place.
pub fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.mapv_inplace(|x| x / sum);
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            slot: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient is reported under `slot`.
    pub fn leaf(&mut self, value: Mat, slot: usize) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].slot = Some(slot);
        v
    }

    /// Copy of `v` cut off from the graph (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// `a + row` with `row` (1 x n) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single-row operand");
        let value = self.value(a) + r;
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, factor), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Row-wise layer normalization with learned `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Scaled dot-product attention with `heads` heads over the column
    /// blocks of `q`, `k` and `v`, grouped by `layout`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Rc<AttnLayout>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(d % heads, 0, "model width must divide evenly into heads");
        assert_eq!(kv.ncols(), d);
        assert_eq!(vv.ncols(), d);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(layout.groups.len() * heads);
        for g in &layout.groups {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![g.queries.clone(), cols.clone()]);
                let kh = kv.slice(s![g.keys.clone(), cols.clone()]);
                let vh = vv.slice(s![g.keys.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                if let Some(valid) = &layout.key_valid {
                    for (j, key) in g.keys.clone().enumerate() {
                        if !valid[key] {
                            p.column_mut(j).fill(f64::NEG_INFINITY);
                        }
                    }
                }
                softmax_rows(&mut p);
                out.slice_mut(s![g.queries.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Var {
        let value = self.value(a).slice(s![rows.clone(), ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, rows.start), ng)
    }

    /// Row `i` of the output is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let av = self.value(a);
        let mut value = Mat::zeros((indices.len(), av.ncols()));
        for (i, &r) in indices.iter().enumerate() {
            value.row_mut(i).assign(&av.row(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, indices), ng)
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.value(a).raw_dim();
        let mask = Mat::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep });
        let value = self.value(a) * &mask;
        let ng = self.ng(a);
        self.push(value, Op::Dropout(a, mask), ng)
    }

    /// Mean over all elements of `(a - b)^2`, as a scalar.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "mean_sq_diff shape mismatch");
        let n = av.len().max(1) as f64;
        let sum = Zip::from(av).and(bv).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
        let ng = self.ng(a) || self.ng(b);
        self.push(scalar(sum / n), Op::MeanSqDiff(a, b), ng)
    }

    /// Forward value `quantized`, backward identity into `z`.
    pub fn straight_through(&mut self, z: Var, quantized: Mat) -> Var {
        assert_eq!(self.value(z).dim(), quantized.dim(), "straight_through shape mismatch");
        let ng = self.ng(z);
        self.push(quantized, Op::StraightThrough(z), ng)
    }

    /// Normalized negative entropy `1 - H(mean_i p_i) / ln K` of the soft
    /// assignments `p_ij = softmax_j((-|z_i - c_j|^2 + noise_ij) / tau)`.
    pub fn diversity(&mut self, z: Var, book: Var, tau: f64, noise: Option<&Mat>) -> Var {
        let (zv, cv) = (self.value(z), self.value(book));
        let k = cv.nrows();
        let mut logits = sq_distances(zv, cv);
        logits.mapv_inplace(|d| -d);
        if let Some(g) = noise {
            logits += g;
        }
        logits.mapv_inplace(|x| x / tau);
        softmax_rows(&mut logits);
        let probs = logits;
        let n = probs.nrows().max(1) as f64;
        let mean_probs: Vec<f64> = probs.sum_axis(Axis(0)).iter().map(|s| s / n).collect();
        let loss = if k > 1 {
            let h: f64 = mean_probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
            (1.0 - h / (k as f64).ln()).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let ng = self.ng(z) || self.ng(book);
        self.push(
            scalar(loss),
            Op::Diversity {
                z,
                book,
                tau,
                probs,
                mean_probs,
            },
            ng,
        )
    }

    /// Mean softmax cross-entropy of `logits` rows against class `targets`.
    /// `-|z_i - c_j|^2` for every row pair, `N x K`.
    pub fn neg_sq_distances(&mut self, z: Var, book: Var) -> Var {
        let mut d = sq_distances(self.value(z), self.value(book));
        d.mapv_inplace(|x| -x);
        let ng = self.ng(z) || self.ng(book);
        self.push(d, Op::NegSqDistances(z, book), ng)
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let mut probs = self.value(logits).clone();
        assert_eq!(probs.nrows(), targets.len());
        softmax_rows(&mut probs);
        let n = targets.len().max(1) as f64;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -(probs[[i, t]].max(1e-300)).ln())
            .sum::<f64>()
            / n;
        let ng = self.ng(logits);
        self.push(
            scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        )
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.scalar_value(v)).sum();
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(scalar(total), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Back-propagate from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut by_slot = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(slot), Some(g)) = (node.slot, grads[i].as_ref()) {
                by_slot.push((slot, g.clone()));
            }
        }
        Gradients {
            by_slot,
            node_grads: grads,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, g: &Mat, grads: &mut [Option<Mat>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g * *f),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.ng(*gamma) {
                    let dg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gamma, dg);
                }
                if self.ng(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let dxhat = g * self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let is = inv_std[r];
                        let mut out = dx.row_mut(r);
                        for c in 0..xhat.ncols() {
                            out[c] = is / n * (n * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, layout, probs, g, grads),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    if self.ng(p) {
                        self.accumulate(grads, p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::SliceRows(a, start) => {
                if self.ng(*a) {
                    let mut d = Mat::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                    self.accumulate(grads, *a, d);
                }
            }
            Op::GatherRows(a, indices) => {
                if self.ng(*a) {
                    let mut d = Mat::zeros(self.value(*a).raw_dim());
                    for (i, &r) in indices.iter().enumerate() {
                        let mut row = d.row_mut(r);
                        row += &g.row(i);
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::Dropout(a, mask) => self.accumulate(grads, *a, g * mask),
            Op::MeanSqDiff(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.len().max(1) as f64;
                let d = (av - bv) * (2.0 * g[[0, 0]] / n);
                if self.ng(*b) {
                    self.accumulate(grads, *b, -&d);
                }
                self.accumulate(grads, *a, d);
            }
            Op::StraightThrough(z) => self.accumulate(grads, *z, g.clone()),
            Op::Diversity {
                z,
                book,
                tau,
                probs,
                mean_probs,
            } => {
                let k = probs.ncols();
                if k <= 1 {
                    return;
                }
                let n = probs.nrows() as f64;
                let ln_k = (k as f64).ln();
                let upstream = g[[0, 0]];
                // d loss / d p_ij (identical for every row i)
                let dp: Vec<f64> = mean_probs
                    .iter()
                    .map(|&p| upstream * (p.max(1e-300).ln() + 1.0) / (ln_k * n))
                    .collect();
                // d loss / d dist_ij through the softmax and the -1/tau scaling
                let mut gd = probs.clone();
                for mut row in gd.rows_mut() {
                    let inner: f64 = row.iter().zip(&dp).map(|(p, d)| p * d).sum();
                    for (x, d) in row.iter_mut().zip(&dp) {
                        *x = -*x * (d - inner) / tau;
                    }
                }
                let (zv, cv) = (self.value(*z), self.value(*book));
                if self.ng(*z) {
                    let row_sums = gd.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dz = (zv * &row_sums - gd.dot(cv)) * 2.0;
                    self.accumulate(grads, *z, dz);
                }
                if self.ng(*book) {
                    let col_sums = gd.sum_axis(Axis(0)).insert_axis(Axis(1));
                    let dc = (cv * &col_sums - gd.t().dot(zv)) * 2.0;
                    self.accumulate(grads, *book, dc);
                }
            }
            Op::NegSqDistances(z, book) => {
                let (zv, cv) = (self.value(*z), self.value(*book));
                if self.ng(*z) {
                    let row_sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, *z, (g.dot(cv) - zv * &row_sums) * 2.0);
                }
                if self.ng(*book) {
                    let col_sums = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                    self.accumulate(grads, *book, (g.t().dot(zv) - cv * &col_sums) * 2.0);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len().max(1) as f64;
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[[i, t]] -= 1.0;
                }
                d *= g[[0, 0]] / n;
                self.accumulate(grads, *logits, d);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, scalar(g[[0, 0]] * w));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &AttnLayout,
        probs: &[Mat],
        g: &Mat,
        grads: &mut [Option<Mat>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Mat::zeros(qv.raw_dim());
        let mut dk = Mat::zeros(kv.raw_dim());
        let mut dv = Mat::zeros(vv.raw_dim());
        let mut pi = 0;
        for grp in &layout.groups {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &probs[pi];
                pi += 1;
                let go = g.slice(s![grp.queries.clone(), cols.clone()]);
                let qh = qv.slice(s![grp.queries.clone(), cols.clone()]);
                let kh = kv.slice(s![grp.keys.clone(), cols.clone()]);
                let vh = vv.slice(s![grp.keys.clone(), cols.clone()]);
                let mut dvh = dv.slice_mut(s![grp.keys.clone(), cols.clone()]);
                dvh += &p.t().dot(&go);
                let mut ds = go.dot(&vh.t());
                for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let inner = ds_row.dot(&p_row);
                    Zip::from(&mut ds_row).and(&p_row).for_each(|x, &pp| *x = pp * (*x - inner) * scale);
                }
                let mut dqh = dq.slice_mut(s![grp.queries.clone(), cols.clone()]);
                dqh += &ds.dot(&kh);
                let mut dkh = dk.slice_mut(s![grp.keys.clone(), cols]);
                dkh += &ds.t().dot(&qh);
            }
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}

/// Squared Euclidean distances between every row of `a` and every row of `b`.
pub fn sq_distances(a: &Mat, b: &Mat) -> Mat {
    let an: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let bn: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut d = a.dot(&b.t());
    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = (an[i] + bn[j] - 2.0 * *x).max(0.0);
        }
    }
    d
}
