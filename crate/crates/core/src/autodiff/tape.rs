use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Real, SparseRows, Tensor};

/// LayerNorm variance stabilizer.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const NORM_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Exp(Var),
    Gelu(Var),
    Tanh(Var),
    LogSigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    EmbeddingBag {
        weight: Var,
        rows: Arc<SparseRows<T>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of primitive operations for one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Tape::backward`] walks it in reverse once.
#[derive(Debug)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    training: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("shape recorded"))
    }

    /// Gradient buffer, or zeros when `v` received no gradient flow.
    pub fn wrt_or_zero(&self, v: Var) -> Vec<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![T::ZERO; self.shapes[v.0].iter().product()],
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }
}

fn shape_err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Shape(msg.into())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn log_sigmoid<T: Real>(x: T) -> T {
    // min(x, 0) - ln(1 + e^{-|x|})
    let m = if x < T::ZERO { x } else { T::ZERO };
    m - (-x.abs()).exp().ln_1p()
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(0.398_942_280_401_432_7);
    (x * cdf, cdf + x * pdf)
}

impl<T: Real> Tape<T> {
    /// Tape in training mode (dropout active).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
        }
    }

    /// Tape in evaluation mode: dropout is the identity.
    pub fn eval() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul {sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; n * m];
        T::gemm(
            n,
            k,
            m,
            T::ONE,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            m as isize,
            1,
            T::ZERO,
            &mut out,
            m as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(shape_err(format!("transpose of {s:?}")));
        }
        let (n, m) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![T::ZERO; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "{what} {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("shapes checked");
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x[n×m] + bias[m]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.shape().len() != 2 || vb.shape() != [vx.cols()] {
            return Err(shape_err(format!("add_row {:?} + {:?}", vx.shape(), vb.shape())));
        }
        let m = vx.cols();
        let b = vb.data();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + b[i % m]).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::ONE)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddConst(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| gelu_parts(x).0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    /// LayerNorm over the last axis with learnable `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let vx = self.value(x);
        let m = vx.cols();
        if vx.shape().is_empty() || self.value(gain).shape() != [m] || self.value(bias).shape() != [m] {
            return Err(shape_err(format!(
                "layer_norm {:?} with gain {:?} bias {:?}",
                vx.shape(),
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let n = vx.rows();
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_m = T::ONE / T::from_f64(m as f64);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::ZERO; n * m];
        let mut inv_std = vec![T::ZERO; n];
        let mut out = vec![T::ZERO; n * m];
        for r in 0..n {
            let row = vx.row(r);
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_m;
            let mut var = T::ZERO;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_m;
            let inv = T::ONE / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..m {
                let h = (row[c] - mean) * inv;
                xhat[r * m + c] = h;
                out[r * m + c] = g[c] * h + b[c];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout with keep probability `keep`; identity on an eval tape
    /// or when `keep == 1`.
    pub fn dropout(&mut self, x: Var, keep: f64, seed: u64) -> Result<Var, NumericsError> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(NumericsError::Argument(format!(
                "dropout keep probability {keep} outside (0, 1]"
            )));
        }
        if !self.training || keep == 1.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = T::from_f64(1.0 / keep);
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::ZERO })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(&v, &k)| v * k).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, NumericsError> {
        let vx = self.value(x);
        if vx.shape().is_empty() {
            return Err(shape_err("l2_normalize of a scalar"));
        }
        let (n, m) = (vx.rows(), vx.cols());
        let floor = T::from_f64(NORM_FLOOR);
        let mut norms = vec![T::ZERO; n];
        let mut out = vec![T::ZERO; n * m];
        for r in 0..n {
            let row = vx.row(r);
            let mut s = T::ZERO;
            for &v in row {
                s += v * v;
            }
            let norm = s.sqrt().max(floor);
            norms[r] = norm;
            for c in 0..m {
                out[r * m + c] = row[c] / norm;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::L2Normalize { x, norms }, rg))
    }

    /// Concatenation along the last axis of rank-2 tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let n = self.value(*first).rows();
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != 2 || s[0] != n {
                return Err(shape_err(format!("concat part {s:?} with {n} rows")));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let t = Tensor::new(vec![n, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || start >= end || end > vx.cols() {
            return Err(shape_err(format!("slice_cols {start}..{end} of {:?}", vx.shape())));
        }
        let n = vx.rows();
        let mut out = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            out.extend_from_slice(&vx.row(r)[start..end]);
        }
        let t = Tensor::new(vec![n, end - start], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(shape_err(format!("gather_rows of {:?}", vx.shape())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.rows()) {
            return Err(shape_err(format!("row {bad} of {:?}", vx.shape())));
        }
        let m = vx.cols();
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            out.extend_from_slice(vx.row(i));
        }
        let t = Tensor::new(vec![idx.len(), m], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Sum over the last axis: `[n×m] -> [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(shape_err(format!("sum_rows of {:?}", vx.shape())));
        }
        let data = (0..vx.rows())
            .map(|r| vx.row(r).iter().fold(T::ZERO, |a, &b| a + b))
            .collect();
        let t = Tensor::vector(data);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SumRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::ZERO, |a, &b| a + b);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(shape_err("mean of an empty tensor"));
        }
        let n = T::from_f64(vx.len() as f64);
        let s = vx.data().iter().fold(T::ZERO, |a, &b| a + b) / n;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    fn check_scalar(&self, s: Var, what: &str) -> Result<T, NumericsError> {
        let vs = self.value(s);
        if vs.len() != 1 {
            return Err(shape_err(format!(
                "{what} needs a 1-element tensor, got {:?}",
                vs.shape()
            )));
        }
        Ok(vs.item())
    }

    /// `x * s` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, NumericsError> {
        let c = self.check_scalar(s, "mul_scalar")?;
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::MulScalar(x, s), rg))
    }

    /// `x + s` for a one-element tensor `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var, NumericsError> {
        let c = self.check_scalar(s, "add_scalar")?;
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::AddScalar(x, s), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let data = self.value(x).data().to_vec();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Weighted mean over rows of `-log softmax(logits)[label]`.
    ///
    /// `weights` default to uniform and are normalized to sum to one. Each row is
    /// shifted by its maximum before exponentiation.
    pub fn softmax_cross_entropy_rows(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: Option<&[T]>,
    ) -> Result<Var, NumericsError> {
        let vz = self.value(logits);
        if vz.shape().len() != 2 || vz.rows() != labels.len() || vz.rows() == 0 {
            return Err(shape_err(format!(
                "cross entropy over {:?} with {} labels",
                vz.shape(),
                labels.len()
            )));
        }
        let (n, m) = (vz.rows(), vz.cols());
        if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
            return Err(NumericsError::Argument(format!("label {bad} outside {m} classes")));
        }
        let w: Vec<T> = match weights {
            Some(w) => {
                if w.len() != n {
                    return Err(shape_err(format!("{} weights for {n} rows", w.len())));
                }
                if w.iter().any(|&x| !(x >= T::ZERO) || !x.is_finite()) {
                    return Err(NumericsError::Argument("row weights must be finite and >= 0".into()));
                }
                let total = w.iter().fold(T::ZERO, |a, &b| a + b);
                if !(total > T::ZERO) {
                    return Err(NumericsError::Argument("row weights sum to zero".into()));
                }
                w.iter().map(|&x| x / total).collect()
            }
            None => vec![T::ONE / T::from_f64(n as f64); n],
        };
        let mut probs = vec![T::ZERO; n * m];
        let mut loss = T::ZERO;
        for r in 0..n {
            let row = vz.row(r);
            let mx = row.iter().copied().fold(row[0], |a, b| a.max(b));
            let mut denom = T::ZERO;
            for c in 0..m {
                let e = (row[c] - mx).exp();
                probs[r * m + c] = e;
                denom += e;
            }
            for c in 0..m {
                probs[r * m + c] = probs[r * m + c] / denom;
            }
            let lse = mx + denom.ln();
            loss += w[r] * (lse - row[labels[r]]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: w,
                probs,
            },
            rg,
        ))
    }

    /// Sparse-times-dense product `rows @ weight`, i.e. a weighted bag of
    /// embedding rows.
    pub fn embedding_bag(&mut self, weight: Var, rows: Arc<SparseRows<T>>) -> Result<Var, NumericsError> {
        let vw = self.value(weight);
        if vw.shape().len() != 2 || vw.rows() != rows.num_cols {
            return Err(shape_err(format!(
                "embedding_bag of {} buckets into {:?}",
                rows.num_cols,
                vw.shape()
            )));
        }
        let h = vw.cols();
        let w = vw.data();
        let n = rows.num_rows();
        let mut out = vec![T::ZERO; n * h];
        for r in 0..n {
            let dst = &mut out[r * h..(r + 1) * h];
            for (c, v) in rows.row(r) {
                let src = &w[c as usize * h..(c as usize + 1) * h];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        let t = Tensor::new(vec![n, h], out)?;
        let rg = self.rg(&[weight]);
        Ok(self.push(t, Op::EmbeddingBag { weight, rows }, rg))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let len = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc!(*a) {
                    // dA += dY @ B^T
                    T::gemm(
                        n,
                        m,
                        k,
                        T::ONE,
                        dy,
                        m as isize,
                        1,
                        vb,
                        1,
                        m as isize,
                        T::ONE,
                        ga,
                        k as isize,
                        1,
                    );
                }
                if let Some(gb) = acc!(*b) {
                    // dB += A^T @ dY
                    T::gemm(
                        k,
                        n,
                        m,
                        T::ONE,
                        va,
                        1,
                        k as isize,
                        dy,
                        m as isize,
                        1,
                        T::ONE,
                        gb,
                        m as isize,
                        1,
                    );
                }
            }
            Op::Transpose(a) => {
                let s = self.value(*a).shape();
                let (n, m) = (s[0], s[1]);
                if let Some(ga) = acc!(*a) {
                    for r in 0..n {
                        for c in 0..m {
                            ga[r * m + c] += dy[c * n + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::AddRow(x, b) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(gb) = acc!(*b) {
                    let m = gb.len();
                    for (j, &d) in dy.iter().enumerate() {
                        gb[j % m] += d;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(dy).for_each(|(g, &d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc!(*a) {
                    for ((g, &d), &o) in ga.iter_mut().zip(dy).zip(vb) {
                        *g += d * o;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((g, &d), &o) in gb.iter_mut().zip(dy).zip(va) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * *c);
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = acc!(*a) {
                    for ((g, &d), &o) in ga.iter_mut().zip(dy).zip(y) {
                        *g += d * o;
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = acc!(*a) {
                    for ((g, &d), &x) in ga.iter_mut().zip(dy).zip(va) {
                        *g += d * gelu_parts(x).1;
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = acc!(*a) {
                    for ((g, &d), &o) in ga.iter_mut().zip(dy).zip(y) {
                        *g += d * (T::ONE - o * o);
                    }
                }
            }
            Op::LogSigmoid(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = acc!(*a) {
                    for ((g, &d), &x) in ga.iter_mut().zip(dy).zip(va) {
                        *g += d * sigmoid(-x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let m = self.value(*x).cols();
                let n = inv_std.len();
                let gv = self.value(*gain).data();
                if let Some(gg) = acc!(*gain) {
                    for r in 0..n {
                        for c in 0..m {
                            gg[c] += dy[r * m + c] * xhat[r * m + c];
                        }
                    }
                }
                if let Some(gb) = acc!(*bias) {
                    for r in 0..n {
                        for c in 0..m {
                            gb[c] += dy[r * m + c];
                        }
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let mf = T::from_f64(m as f64);
                    for r in 0..n {
                        let mut s1 = T::ZERO;
                        let mut s2 = T::ZERO;
                        for c in 0..m {
                            let dh = dy[r * m + c] * gv[c];
                            s1 += dh;
                            s2 += dh * xhat[r * m + c];
                        }
                        let k = inv_std[r] / mf;
                        for c in 0..m {
                            let dh = dy[r * m + c] * gv[c];
                            gx[r * m + c] += k * (mf * dh - s1 - xhat[r * m + c] * s2);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = acc!(*x) {
                    for ((g, &d), &k) in gx.iter_mut().zip(dy).zip(mask) {
                        *g += d * k;
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let m = self.value(*x).cols();
                if let Some(gx) = acc!(*x) {
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y[r * m..(r + 1) * m];
                        let dr = &dy[r * m..(r + 1) * m];
                        let dot = yr.iter().zip(dr).fold(T::ZERO, |a, (&p, &q)| a + p * q);
                        for c in 0..m {
                            gx[r * m + c] += (dr[c] - yr[c] * dot) / norm;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let n = self.value(*p).rows();
                    if let Some(gp) = acc!(*p) {
                        for r in 0..n {
                            for c in 0..w {
                                gp[r * w + c] += dy[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let m = self.value(*x).cols();
                let w = node.value.cols();
                if let Some(gx) = acc!(*x) {
                    for r in 0..node.value.rows() {
                        for c in 0..w {
                            gx[r * m + start + c] += dy[r * w + c];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let m = self.value(*x).cols();
                if let Some(gx) = acc!(*x) {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..m {
                            gx[src * m + c] += dy[r * m + c];
                        }
                    }
                }
            }
            Op::SumRows(x) => {
                let m = self.value(*x).cols();
                if let Some(gx) = acc!(*x) {
                    for (j, g) in gx.iter_mut().enumerate() {
                        *g += dy[j / m];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).len() as f64);
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|g| *g += dy[0] / n);
                }
            }
            Op::MulScalar(x, s) => {
                let c = self.value(*s).item();
                let vx = self.value(*x).data();
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * c);
                }
                if let Some(gs) = acc!(*s) {
                    gs[0] += dy.iter().zip(vx).fold(T::ZERO, |a, (&d, &v)| a + d * v);
                }
            }
            Op::AddScalar(x, s) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(gs) = acc!(*s) {
                    gs[0] += dy.iter().fold(T::ZERO, |a, &d| a + d);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let m = self.value(*logits).cols();
                if let Some(gz) = acc!(*logits) {
                    for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                        let k = dy[0] * w;
                        for c in 0..m {
                            let target = if c == y { T::ONE } else { T::ZERO };
                            gz[r * m + c] += k * (probs[r * m + c] - target);
                        }
                    }
                }
            }
            Op::EmbeddingBag { weight, rows } => {
                let h = self.value(*weight).cols();
                if let Some(gw) = acc!(*weight) {
                    for r in 0..rows.num_rows() {
                        let d = &dy[r * h..(r + 1) * h];
                        for (c, v) in rows.row(r) {
                            let dst = &mut gw[c as usize * h..(c as usize + 1) * h];
                            for (g, &dd) in dst.iter_mut().zip(d) {
                                *g += v * dd;
                            }
                        }
                    }
                }
            }
        }
    }
}
