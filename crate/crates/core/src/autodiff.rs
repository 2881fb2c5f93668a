//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! gradients. Leaves created with [`Graph::constant`] never receive a
//! gradient; only nodes reachable from a [`Graph::param`] leaf do.
//!
//! Matrices are row-major 2-D tensors. Reshapes, transposes, broadcasts and
//! im2col patches are all expressed through the single [`Graph::gather`] op.

use std::rc::Rc;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Self {
        let (n, k, m) = (self.rows(), self.cols(), other.cols());
        assert_eq!(k, other.rows(), "matmul inner dimension mismatch");
        Self::matrix(n, m, matmul_nn(&self.data, &other.data, n, k, m))
    }

    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// (n×k)·(k×m)
fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// (n×k)·(m×k)ᵀ
fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// (k×n)ᵀ·(k×m)
fn matmul_tn(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + eˣ) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Recip(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Gather(Var, Rc<[isize]>),
    Silu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked(v)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "elementwise op on mismatched shapes {:?} vs {:?}", ta.shape(), tb.shape());
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape.clone(), data);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let value = self.value(a).map(|x| x * sv);
        let tracked = self.tracked(a) || self.tracked(s);
        self.push(value, Op::MulScalar(a, s), tracked)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), tracked)
    }

    /// `a · wᵀ` for `a` of shape n×k and `w` of shape m×k.
    pub fn matmul_t(&mut self, a: Var, w: Var) -> Var {
        let (ta, tw) = (self.value(a), self.value(w));
        let (n, k, m) = (ta.rows(), ta.cols(), tw.rows());
        assert_eq!(k, tw.cols(), "matmul_t inner dimension mismatch");
        let value = Tensor::matrix(n, m, matmul_nt(&ta.data, &tw.data, n, k, m));
        let tracked = self.tracked(a) || self.tracked(w);
        self.push(value, Op::MatMulT(a, w), tracked)
    }

    /// `out[i] = src[index[i]]`, or zero where `index[i]` is negative.
    pub fn gather(&mut self, src: Var, index: Rc<[isize]>, shape: Vec<usize>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), index.len());
        let s = &self.value(src).data;
        let data = index
            .iter()
            .map(|&i| if i < 0 { 0.0 } else { s[i as usize] })
            .collect();
        let tracked = self.tracked(src);
        self.push(Tensor::new(shape, data), Op::Gather(src, index), tracked)
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, src: Var, shape: Vec<usize>) -> Var {
        let index: Rc<[isize]> = (0..self.value(src).len() as isize).collect();
        self.gather(src, index, shape)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data.iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(v), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = t.data.iter().sum::<f64>() / t.len() as f64;
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(v), Op::Mean(a), tracked)
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Reverse pass from a scalar `root`. Only tracked nodes get gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if !self.tracked(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.tracked(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_scaled(&delta, 1.0),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.nodes[v.0].value.shape.clone(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, like(*a, g.data.clone()));
                acc(*b, like(*b, g.data.clone()));
            }
            Op::Sub(a, b) => {
                acc(*a, like(*a, g.data.clone()));
                acc(*b, like(*b, g.data.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.tracked(*a) {
                    acc(*a, like(*a, g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect()));
                }
                if self.tracked(*b) {
                    acc(*b, like(*b, g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale(a, s) => acc(*a, like(*a, g.data.iter().map(|x| x * s).collect())),
            Op::MulScalar(a, s) => {
                let sv = val(*s).item();
                if self.tracked(*a) {
                    acc(*a, like(*a, g.data.iter().map(|x| x * sv).collect()));
                }
                if self.tracked(*s) {
                    let d = g.data.iter().zip(&val(*a).data).map(|(x, y)| x * y).sum();
                    acc(*s, like(*s, vec![d]));
                }
            }
            Op::Recip(a) => {
                let d = g.data.iter().zip(&val(*a).data).map(|(x, y)| -x / (y * y)).collect();
                acc(*a, like(*a, d));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                if self.tracked(*a) {
                    acc(*a, like(*a, matmul_nt(&g.data, &vb.data, n, m, k)));
                }
                if self.tracked(*b) {
                    acc(*b, like(*b, matmul_tn(&va.data, &g.data, n, k, m)));
                }
            }
            Op::MatMulT(a, w) => {
                let (va, vw) = (val(*a), val(*w));
                let (n, k, m) = (va.rows(), va.cols(), vw.rows());
                if self.tracked(*a) {
                    acc(*a, like(*a, matmul_nn(&g.data, &vw.data, n, m, k)));
                }
                if self.tracked(*w) {
                    acc(*w, like(*w, matmul_tn(&g.data, &va.data, n, m, k)));
                }
            }
            Op::Gather(src, index) => {
                let mut d = vec![0.0; val(*src).len()];
                for (gi, &i) in g.data.iter().zip(index.iter()) {
                    if i >= 0 {
                        d[i as usize] += gi;
                    }
                }
                acc(*src, like(*src, d));
            }
            Op::Silu(a) => {
                let d = g
                    .data
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(gi, &x)| {
                        let s = sigmoid(x);
                        gi * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                acc(*a, like(*a, d));
            }
            Op::LeakyRelu(a, slope) => {
                let d = g
                    .data
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { gi * slope })
                    .collect();
                acc(*a, like(*a, d));
            }
            Op::Softplus(a) => {
                let d = g.data.iter().zip(&val(*a).data).map(|(gi, &x)| gi * sigmoid(x)).collect();
                acc(*a, like(*a, d));
            }
            Op::Clamp(a, lo, hi) => {
                let d = g
                    .data
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(gi, &x)| if x >= *lo && x <= *hi { *gi } else { 0.0 })
                    .collect();
                acc(*a, like(*a, d));
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                acc(*a, like(*a, vec![g.item(); n]));
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, like(*a, vec![g.item() / n as f64; n]));
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` is untracked or does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Tensor::matrix(2, 1, vec![1.0, 2.0]);
        let b = Tensor::matrix(1, 2, vec![3.0, 4.0]);
        assert_eq!(a.matmul(&b).data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn composite_expression_gradients() {
        let x0 = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let w0 = Tensor::matrix(2, 4, (0..8).map(|i| (i as f64 * 0.91).cos()).collect());
        let eval = |x: &Tensor, w: &Tensor, want_grad: bool| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let y = g.matmul_t(xv, wv);
            let y = g.silu(y);
            let idx: Rc<[isize]> = vec![5, 4, -1, 0, 1, 2].into();
            let y = g.gather(y, idx, vec![2, 3]);
            let widx: Rc<[isize]> = vec![7, 0, 3, 5, 1, 6].into();
            let wt = g.gather(wv, widx, vec![3, 2]);
            let z = g.matmul(y, wt);
            let z = g.leaky_relu(z, 0.2);
            let z = g.softplus(z);
            let s = g.mean(z);
            let r = g.recip(s);
            let out = g.mul_scalar(z, r);
            let out = g.clamp(out, -10.0, 1.5);
            let loss = g.sum(out);
            let loss = g.add(loss, s);
            let value = g.value(loss).item();
            let grads = want_grad.then(|| {
                let gr = g.backward(loss);
                (gr.get(xv).unwrap().clone(), gr.get(wv).unwrap().clone())
            });
            (value, grads)
        };
        let (_, grads) = eval(&x0, &w0, true);
        let (gx, gw) = grads.unwrap();
        let nx = numeric_grad(|x| eval(x, &w0, false).0, &x0);
        let nw = numeric_grad(|w| eval(&x0, w, false).0, &w0);
        assert_close(gx.data(), &nx, 1e-5);
        assert_close(gw.data(), &nw, 1e-5);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let p = g.param(Tensor::matrix(1, 2, vec![3.0, 4.0]));
        let y = g.mul(c, p);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
