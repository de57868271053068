use std::sync::Arc;

use rand::Rng;

use crate::{Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Packing of several variable-length sequences into one `[N, d]` matrix.
///
/// Each span `(start, len)` is one sequence; attention never crosses spans.
/// `key_padding[r]` marks row `r` as padding, which receives zero attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub spans: Vec<(usize, usize)>,
    pub key_padding: Vec<bool>,
}

impl AttentionLayout {
    pub fn total_rows(&self) -> usize {
        self.key_padding.len()
    }
}

type BackwardFn<F> = Box<dyn Fn(&[F], &[F], &[F]) -> Vec<F>>;

enum Op<F: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, transpose_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias { x: Var, bias: Var },
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Gather { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<F> },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
        n_heads: usize,
        probs: Vec<F>,
        offsets: Vec<usize>,
    },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
    BinaryCrossEntropy { logits: Var, labels: Vec<F> },
    Custom { x: Var, backward: BackwardFn<F> },
}

struct Node<F: Scalar> {
    value: Vec<F>,
    shape: Vec<usize>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a forward computation for one reverse-mode pass.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and `backward` is a single reverse sweep.
pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    consumed: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
pub fn gelu_scalar<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len]).as_mut_slice()
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, value: Vec<F>, shape: Vec<usize>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf; it takes part in backward iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        Ok(self.push(data, shape, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> F {
        self.node(v).value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Post-softmax attention probabilities of an attention node, plus the offset
    /// of each span's block. Span `s`, head `h` starts at `offsets[s] + h * len * len`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[F], &[usize])> {
        match &self.node(v).op {
            Op::Attention { probs, offsets, .. } => Some((probs, offsets)),
            _ => None,
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// `a[m,k] x b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] x b[n,k]^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions differ: [{m},{k}] x [{br},{bc}] (transpose_b={transpose_b})"),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        let b_strides = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a),
            (k as isize, 1),
            self.value(b),
            b_strides,
            F::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n, transpose_b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.needs(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::Scale(x, c), rg)
    }

    /// Adds `bias[n]` to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [n] {
            return Err(shape_err("add_bias", format!("bias {:?} for rows of {n}", self.shape(bias))));
        }
        let b = self.value(bias);
        let out = self.value(x).chunks(n).flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c)).collect();
        let rg = self.needs(&[x, bias]);
        Ok(self.push(out, self.shape(x).to_vec(), Op::AddBias { x, bias }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.needs(&[x]);
        self.push(vec![s], Vec::new(), Op::Sum(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.needs(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::Gelu(x), rg)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().unwrap_or(&1);
        let mut out = self.value(x).to_vec();
        if n > 0 {
            out.chunks_mut(n).for_each(softmax_in_place);
        }
        let rg = self.needs(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::Softmax(x), rg)
    }

    /// Per-row normalisation over the last axis followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gain {:?} / bias {:?} for rows of {d}", self.shape(gain), self.shape(bias)),
            ));
        }
        let rows = self.value(x).len() / d.max(1);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = Vec::with_capacity(rows * d);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let inv_d = F::one() / F::from_usize(d).unwrap();
        for row in self.value(x).chunks(d) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(out, self.shape(x).to_vec(), Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IdOutOfRange { index: bad, rows });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.needs(&[table]);
        Ok(self.push(out, vec![ids.len(), d], Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Inverted dropout; a zero rate returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.needs(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::Dropout { x, mask }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let rg = self.needs(&[x]);
        Ok(self.push(self.value(x).to_vec(), shape, Op::Reshape(x), rg))
    }

    /// Multi-head scaled dot-product self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N, d]` with `d` divisible by `n_heads`. Padding keys
    /// get `-inf` logits, so their post-softmax mass is exactly zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
        n_heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.matrix_dims(q, "attention")?;
        if self.shape(k) != [rows, d] || self.shape(v) != [rows, d] {
            return Err(shape_err("attention", "q, k and v must share one [N, d] shape".into()));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(shape_err("attention", format!("d={d} not divisible by {n_heads} heads")));
        }
        if layout.total_rows() != rows {
            return Err(shape_err(
                "attention",
                format!("layout covers {} rows, inputs have {rows}", layout.total_rows()),
            ));
        }
        if let Some(&(s, l)) = layout.spans.iter().find(|&&(s, l)| s + l > rows) {
            return Err(shape_err("attention", format!("span ({s},{l}) exceeds {rows} rows")));
        }
        let dh = d / n_heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![F::zero(); rows * d];
        let mut offsets = Vec::with_capacity(layout.spans.len());
        let total: usize = layout.spans.iter().map(|&(_, l)| l * l * n_heads).sum();
        let mut probs = Vec::with_capacity(total);
        for &(start, len) in &layout.spans {
            offsets.push(probs.len());
            for h in 0..n_heads {
                let c0 = h * dh;
                for i in 0..len {
                    let qi = &qv[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    let row_start = probs.len();
                    for j in 0..len {
                        if layout.key_padding[start + j] {
                            probs.push(F::neg_infinity());
                        } else {
                            let kj = &kv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                            let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale;
                            probs.push(s);
                        }
                    }
                    let row = &mut probs[row_start..];
                    softmax_in_place(row);
                    let o = &mut out[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    for (j, &p) in row.iter().enumerate() {
                        if p == F::zero() {
                            continue;
                        }
                        let vj = &vv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                        o.iter_mut().zip(vj).for_each(|(acc, &x)| *acc += p * x);
                    }
                }
            }
        }
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(out, vec![rows, d], Op::Attention { q, k, v, layout, n_heads, probs, offsets }, rg))
    }

    /// Mean cross-entropy of `logits[n, v]` against class ids, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy", format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::IndexOutOfVocab { index: bad, vocab: v });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = F::zero();
        for (row, &t) in probs.chunks_mut(v.max(1)).zip(targets) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<F>().ln();
            loss += lse - row[t];
            row.iter_mut().for_each(|z| *z = (*z - lse).exp());
        }
        if n > 0 {
            loss = loss / F::from_usize(n).unwrap();
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(
            vec![loss],
            Vec::new(),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Mean binary cross-entropy with logits; `labels` must be 0 or 1.
    pub fn binary_cross_entropy(&mut self, logits: Var, labels: &[F]) -> Result<Var> {
        let n = self.value(logits).len();
        if labels.len() != n {
            return Err(shape_err("binary_cross_entropy", format!("{} labels for {n} logits", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != F::zero() && y != F::one()) {
            return Err(TensorError::InvalidLabel(bad.to_string()));
        }
        let mut loss = F::zero();
        for (&z, &y) in self.value(logits).iter().zip(labels) {
            loss += z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln();
        }
        if n > 0 {
            loss = loss / F::from_usize(n).unwrap();
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(vec![loss], Vec::new(), Op::BinaryCrossEntropy { logits, labels: labels.to_vec() }, rg))
    }

    /// Elementwise op with caller-supplied forward and backward rules.
    ///
    /// `backward(x, y, dy)` returns `dx`.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(&[F]) -> Vec<F>,
        backward: impl Fn(&[F], &[F], &[F]) -> Vec<F> + 'static,
    ) -> Result<Var> {
        let out = forward(self.value(x));
        if out.len() != self.value(x).len() {
            return Err(shape_err("custom_unary", "forward changed the element count".into()));
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, self.shape(x).to_vec(), Op::Custom { x, backward: Box::new(backward) }, rg))
    }

    /// Reverse sweep from a scalar loss. Afterwards [`Tape::grad`] returns
    /// `d loss / d node` for every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeAlreadyConsumed);
        }
        let loss_len = self.node(loss).value.len();
        if loss_len != 1 {
            return Err(TensorError::NotScalar(self.node(loss).shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, transpose_b } => {
                if rg(a) {
                    let da = accumulate(grads, a, m * k);
                    let b_strides = if transpose_b { (k as isize, 1) } else { (1, n as isize) };
                    F::gemm(m, n, k, F::one(), g, (n as isize, 1), self.value(b), b_strides, F::one(), da, (k as isize, 1));
                }
                if rg(b) {
                    let db = accumulate(grads, b, k * n);
                    if transpose_b {
                        F::gemm(n, m, k, F::one(), g, (1, n as isize), self.value(a), (k as isize, 1), F::one(), db, (k as isize, 1));
                    } else {
                        F::gemm(k, m, n, F::one(), self.value(a), (1, k as isize), g, (n as isize, 1), F::one(), db, (n as isize, 1));
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if rg(v) {
                        accumulate(grads, v, g.len()).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    let bv = self.value(b);
                    let da = accumulate(grads, a, g.len());
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if rg(b) {
                    let av = self.value(a);
                    let db = accumulate(grads, b, g.len());
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            &Op::Scale(x, c) => {
                accumulate(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += v * c);
            }
            &Op::AddBias { x, bias } => {
                if rg(x) {
                    accumulate(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if rg(bias) {
                    let n = len(bias);
                    let db = accumulate(grads, bias, n);
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            &Op::Sum(x) => {
                let s = g[0];
                accumulate(grads, x, len(x)).iter_mut().for_each(|d| *d += s);
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                let dx = accumulate(grads, x, g.len());
                for ((d, &gy), &xi) in dx.iter_mut().zip(g).zip(xv) {
                    *d += gy * gelu_grad(xi);
                }
            }
            &Op::Softmax(x) => {
                let n = *node.shape.last().unwrap_or(&1);
                let dx = accumulate(grads, x, g.len());
                for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                    let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((d, &gy), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (gy - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = len(*gain);
                let gv = self.value(*gain);
                if rg(*gain) {
                    let dg = accumulate(grads, *gain, d);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if rg(*bias) {
                    let db = accumulate(grads, *bias, d);
                    for grow in g.chunks(d) {
                        db.iter_mut().zip(grow).for_each(|(a, &v)| *a += v);
                    }
                }
                if rg(*x) {
                    let inv_d = F::one() / F::from_usize(d).unwrap();
                    let dx = accumulate(grads, *x, g.len());
                    for (((dxrow, grow), hrow), &r) in
                        dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).zip(rstd)
                    {
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            dxrow[j] += r * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.nodes[table.0].shape[1];
                let dt = accumulate(grads, *table, len(*table));
                for (&id, grow) in ids.iter().zip(g.chunks(d)) {
                    dt[id * d..(id + 1) * d].iter_mut().zip(grow).for_each(|(a, &v)| *a += v);
                }
            }
            Op::Dropout { x, mask } => {
                let dx = accumulate(grads, *x, g.len());
                for ((d, &gy), &m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gy * m;
                }
            }
            &Op::Reshape(x) => {
                accumulate(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            Op::Attention { q, k, v, layout, n_heads, probs, offsets } => {
                self.attention_backward(g, grads, (*q, *k, *v), layout, *n_heads, probs, offsets);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                if n == 0 {
                    return;
                }
                let v = probs.len() / n;
                let s = g[0] / F::from_usize(n).unwrap();
                let dl = accumulate(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { F::one() } else { F::zero() };
                        dl[r * v + j] += s * (probs[r * v + j] - onehot);
                    }
                }
            }
            Op::BinaryCrossEntropy { logits, labels } => {
                let n = labels.len();
                if n == 0 {
                    return;
                }
                let s = g[0] / F::from_usize(n).unwrap();
                let z = self.value(*logits);
                let dl = accumulate(grads, *logits, n);
                for ((d, &zi), &y) in dl.iter_mut().zip(z).zip(labels) {
                    let p = F::one() / (F::one() + (-zi).exp());
                    *d += s * (p - y);
                }
            }
            Op::Custom { x, backward } => {
                let dx = backward(self.value(*x), &node.value, g);
                let acc = accumulate(grads, *x, g.len());
                acc.iter_mut().zip(&dx).for_each(|(a, &v)| *a += v);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        (q, k, v): (Var, Var, Var),
        layout: &AttentionLayout,
        n_heads: usize,
        probs: &[F],
        offsets: &[usize],
    ) {
        let (rows, d) = (self.nodes[q.0].shape[0], self.nodes[q.0].shape[1]);
        let dh = d / n_heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![F::zero(); rows * d];
        let mut dk = vec![F::zero(); rows * d];
        let mut dv = vec![F::zero(); rows * d];
        let mut dp = Vec::new();
        for (&(start, len), &off) in layout.spans.iter().zip(offsets) {
            for h in 0..n_heads {
                let c0 = h * dh;
                let block = &probs[off + h * len * len..off + (h + 1) * len * len];
                for i in 0..len {
                    let p = &block[i * len..(i + 1) * len];
                    let gi = &g[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    dp.clear();
                    let mut dot = F::zero();
                    for (j, &pij) in p.iter().enumerate() {
                        let vj = &vv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                        let dpij: F = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        dp.push(dpij);
                        dot += pij * dpij;
                        if pij != F::zero() {
                            let dvj = &mut dv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                            dvj.iter_mut().zip(gi).for_each(|(a, &x)| *a += pij * x);
                        }
                    }
                    let qi = &qv[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    for (j, &pij) in p.iter().enumerate() {
                        if pij == F::zero() {
                            continue;
                        }
                        let ds = pij * (dp[j] - dot) * scale;
                        let kj = &kv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                        let dqi = &mut dq[(start + i) * d + c0..(start + i) * d + c0 + dh];
                        dqi.iter_mut().zip(kj).for_each(|(a, &x)| *a += ds * x);
                        let dkj = &mut dk[(start + j) * d + c0..(start + j) * d + c0 + dh];
                        dkj.iter_mut().zip(qi).for_each(|(a, &x)| *a += ds * x);
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                accumulate(grads, var, rows * d).iter_mut().zip(&buf).for_each(|(a, &x)| *a += x);
            }
        }
    }
}

fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        row.iter_mut().for_each(|x| *x = F::zero());
        return;
    }
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x = *x / total);
}
