//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its value; [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar (`1×1`) node with respect to every
//! parameter that took part in the computation. Vectors are represented as
//! `1×n` row matrices throughout.

use ndarray::{concatenate, s, Array2, Axis};

use crate::params::{Gradients, Mat, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x + b` with `b` a `1×m` row broadcast over rows.
    AddRow(Var, Var),
    /// `x ⊙ s` with `s` a `1×m` row broadcast over rows.
    MulRow(Var, Var),
    /// `scale · x + shift`
    Affine(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, f64),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    SumSquares(Var),
    Sqrt(Var),
    Pick(Var, usize, usize),
    /// Scalar computed outside the tape with precomputed partial derivatives.
    External(Vec<(Var, Mat)>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Computation tape bound to one parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        let m = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.constant(m)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (_, cols) = self.shape(x);
        assert_eq!(self.shape(b), (1, cols), "add_row shape mismatch");
        let value = self.value(x) + self.value(b);
        self.push(value, Op::AddRow(x, b))
    }

    pub fn mul_row(&mut self, x: Var, s: Var) -> Var {
        let (_, cols) = self.shape(x);
        assert_eq!(self.shape(s), (1, cols), "mul_row shape mismatch");
        let value = self.value(x) * self.value(s);
        self.push(value, Op::MulRow(x, s))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).mapv(|v| scale * v + shift);
        self.push(value, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(softplus);
        self.push(value, Op::Softplus(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let value = log_softmax_rows(self.value(x));
        self.push(value, Op::LogSoftmaxRows(x))
    }

    /// Row-wise standardisation without affine terms.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        self.push(value, Op::LayerNormRows(x, eps))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(x, start))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(x, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Embedding lookup: rows `indices` of `table`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let src = self.value(table);
        let mut value = Mat::zeros((indices.len(), src.ncols()));
        for (i, &idx) in indices.iter().enumerate() {
            value.row_mut(i).assign(&src.row(idx));
        }
        self.push(value, Op::GatherRows(table, indices.to_vec()))
    }

    /// Mean over rows, giving a `1×m` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).iter().map(|v| v * v).sum());
        self.push(value, Op::SumSquares(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::sqrt);
        self.push(value, Op::Sqrt(x))
    }

    pub fn pick(&mut self, x: Var, row: usize, col: usize) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x)[[row, col]]);
        self.push(value, Op::Pick(x, row, col))
    }

    /// Scalar node whose value and partial derivatives were computed elsewhere.
    /// Each `(input, d value / d input)` pair must match the input's shape.
    pub fn external_scalar(&mut self, value: f64, partials: Vec<(Var, Mat)>) -> Var {
        for (v, d) in &partials {
            assert_eq!(self.shape(*v), d.dim(), "external partial shape mismatch");
        }
        self.push(Mat::from_elem((1, 1), value), Op::External(partials))
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = self.add(acc, *t);
        }
        acc
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Mat::ones((1, 1)));
        let mut out = vec![None; self.params.len()];

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out[id.index()] = Some(gy),
                Op::MatMul(a, b) => {
                    let da = gy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&gy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = gy.dot(self.value(*b));
                    let db = gy.t().dot(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Transpose(a) => acc(&mut grads, *a, gy.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, gy.clone());
                    acc(&mut grads, *a, gy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&gy);
                    acc(&mut grads, *a, gy);
                }
                Op::Mul(a, b) => {
                    let da = &gy * self.value(*b);
                    let db = &gy * self.value(*a);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(x, b) => {
                    let db = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *x, gy);
                }
                Op::MulRow(x, s) => {
                    let ds = (&gy * self.value(*x))
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    let dx = &gy * self.value(*s);
                    acc(&mut grads, *s, ds);
                    acc(&mut grads, *x, dx);
                }
                Op::Affine(x, scale) => acc(&mut grads, *x, gy.mapv(|g| g * scale)),
                Op::Relu(x) => {
                    let mut dx = gy;
                    dx.zip_mut_with(self.value(*x), |g, &v| {
                        if v <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let mut dx = gy;
                    dx.zip_mut_with(&node.value, |g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = gy;
                    dx.zip_mut_with(&node.value, |g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *x, dx);
                }
                Op::Softplus(x) => {
                    let mut dx = gy;
                    dx.zip_mut_with(self.value(*x), |g, &v| *g *= sigmoid(v));
                    acc(&mut grads, *x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = &gy * y;
                    for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let total = row.sum();
                        row.zip_mut_with(&yr, |d, &p| *d -= p * total);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::LogSoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = gy;
                    for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let total = row.sum();
                        row.zip_mut_with(&yr, |d, &ly| *d -= ly.exp() * total);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNormRows(x, eps) => {
                    let input = self.value(*x);
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let xr = input.row(r);
                        let n = xr.len() as f64;
                        let mean = xr.sum() / n;
                        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = gy.row(r);
                        let yr = y.row(r);
                        let g_mean = gr.sum() / n;
                        let gy_mean = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..y.ncols() {
                            dx[[r, c]] = inv * (gr[c] - g_mean - yr[c] * gy_mean);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SliceRows(x, start) => {
                    let mut dx = Mat::zeros(self.shape(*x));
                    let n = gy.nrows();
                    dx.slice_mut(s![*start..*start + n, ..]).assign(&gy);
                    acc(&mut grads, *x, dx);
                }
                Op::SliceCols(x, start) => {
                    let mut dx = Mat::zeros(self.shape(*x));
                    let n = gy.ncols();
                    dx.slice_mut(s![.., *start..*start + n]).assign(&gy);
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.shape(*p).0;
                        acc(
                            &mut grads,
                            *p,
                            gy.slice(s![offset..offset + n, ..]).to_owned(),
                        );
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.shape(*p).1;
                        acc(
                            &mut grads,
                            *p,
                            gy.slice(s![.., offset..offset + n]).to_owned(),
                        );
                        offset += n;
                    }
                }
                Op::GatherRows(table, indices) => {
                    let mut dt = Mat::zeros(self.shape(*table));
                    for (i, &idx) in indices.iter().enumerate() {
                        let mut row = dt.row_mut(idx);
                        row += &gy.row(i);
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::MeanRows(x) => {
                    let (rows, cols) = self.shape(*x);
                    let scaled = gy.mapv(|g| g / rows as f64);
                    let dx = scaled
                        .broadcast((rows, cols))
                        .expect("mean_rows broadcast")
                        .to_owned();
                    acc(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let dx = Mat::from_elem(self.shape(*x), gy[[0, 0]]);
                    acc(&mut grads, *x, dx);
                }
                Op::SumSquares(x) => {
                    let g = gy[[0, 0]];
                    acc(&mut grads, *x, self.value(*x).mapv(|v| 2.0 * v * g));
                }
                Op::Sqrt(x) => {
                    let mut dx = gy;
                    dx.zip_mut_with(&node.value, |g, &y| {
                        *g = if y > 0.0 { *g / (2.0 * y) } else { 0.0 }
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::Pick(x, r, c) => {
                    let mut dx = Mat::zeros(self.shape(*x));
                    dx[[*r, *c]] = gy[[0, 0]];
                    acc(&mut grads, *x, dx);
                }
                Op::External(partials) => {
                    let g = gy[[0, 0]];
                    for (v, d) in partials {
                        acc(&mut grads, *v, d.mapv(|x| x * g));
                    }
                }
            }
        }
        Gradients::from_vec(out)
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, delta: Mat) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
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

pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let lse = log_sum_exp(row.iter().copied());
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of every entry of every parameter.
    fn check<F>(params: &ParamStore, build: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let mut g = Graph::new(params);
        let loss = build(&mut g);
        let grads = g.backward(loss);
        let eps = 1e-6;
        for id in params.ids() {
            let analytic = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Mat::zeros(params.get(id).dim()));
            for idx in 0..params.get(id).len() {
                let (r, c) = (idx / params.get(id).ncols(), idx % params.get(id).ncols());
                let mut plus = params.clone();
                plus.get_mut(id)[[r, c]] += eps;
                let mut minus = params.clone();
                minus.get_mut(id)[[r, c]] -= eps;
                let fp = {
                    let mut g = Graph::new(&plus);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                let fm = {
                    let mut g = Graph::new(&minus);
                    let l = build(&mut g);
                    g.scalar(l)
                };
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic[[r, c]];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
                assert!(
                    err < 1e-5,
                    "{}[{r},{c}]: analytic {a} numeric {numeric}",
                    params.name(id)
                );
            }
        }
    }

    #[test]
    fn matmul_and_elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::new();
        let a = p.add("a", random(&mut rng, 3, 4));
        let b = p.add("b", random(&mut rng, 4, 2));
        let c = p.add("c", random(&mut rng, 3, 2));
        let bias = p.add("bias", random(&mut rng, 1, 2));
        check(&p, |g| {
            let a = g.param(a);
            let b = g.param(b);
            let c = g.param(c);
            let bias = g.param(bias);
            let ab = g.matmul(a, b);
            let m = g.mul(ab, c);
            let t = g.tanh(m);
            let s = g.add_row(t, bias);
            let sg = g.sigmoid(s);
            let d = g.sub(sg, c);
            let sp = g.softplus(d);
            let abt = g.matmul_t(c, ab);
            let tr = g.transpose(abt);
            let q = g.sum_squares(tr);
            let l = g.sum(sp);
            g.add(l, q)
        });
    }

    #[test]
    fn softmax_layer_norm_and_slicing_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamStore::new();
        let x = p.add("x", random(&mut rng, 4, 5));
        let gain = p.add("gain", random(&mut rng, 1, 5));
        let emb = p.add("emb", random(&mut rng, 6, 5));
        let target = random(&mut rng, 4, 5);
        check(&p, |g| {
            let x = g.param(x);
            let gain = g.param(gain);
            let emb = g.param(emb);
            let ln = g.layer_norm_rows(x, 1e-5);
            let scaled = g.mul_row(ln, gain);
            let looked = g.gather_rows(emb, &[0, 3, 3, 5]);
            let sum = g.add(scaled, looked);
            let sm = g.softmax_rows(sum);
            let lsm = g.log_softmax_rows(sum);
            let tgt = g.constant(target.clone());
            let w = g.mul(lsm, tgt);
            let top = g.slice_rows(sm, 1, 2);
            let left = g.slice_cols(w, 0, 3);
            let right = g.slice_cols(w, 3, 2);
            let cat = g.concat_cols(&[right, left]);
            let stacked = g.concat_rows(&[top, cat]);
            let mean = g.mean_rows(stacked);
            let r = g.relu(mean);
            let sq = g.sum_squares(r);
            let sqrt = g.sqrt(sq);
            let one = g.one_minus(sqrt);
            let pick = g.pick(lsm, 2, 1);
            g.add(one, pick)
        });
    }

    #[test]
    fn external_scalar_chains() {
        let mut p = ParamStore::new();
        let x = p.add("x", array![[1.0, 2.0]]);
        check(&p, |g| {
            let x = g.param(x);
            let sq = g.scale(x, 3.0);
            let v = g.value(sq).iter().map(|v| v * v).sum::<f64>();
            let d = g.value(sq).mapv(|v| 2.0 * v);
            g.external_scalar(v, vec![(sq, d)])
        });
    }

    #[test]
    fn param_leaf_is_shared() {
        let mut p = ParamStore::new();
        let x = p.add("x", array![[2.0]]);
        let mut g = Graph::new(&p);
        let a = g.param(x);
        let b = g.param(x);
        assert_eq!(a, b);
        let m = g.mul(a, b);
        let grads = g.backward(m);
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut p = ParamStore::new();
        let x = p.add("x", array![[2.0]]);
        let mut g = Graph::new(&p);
        let a = g.param(x);
        let d = g.detach(a);
        let m = g.mul(a, d);
        let grads = g.backward(m);
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn numerics() {
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-9);
        assert!(softplus(-1000.0) >= 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(argmax([1.0, 3.0, 3.0]), 1);
        let p = softmax_rows(&array![[1000.0, 1000.0]]);
        assert_eq!(p, array![[0.5, 0.5]]);
    }
}
