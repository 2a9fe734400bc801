//! Reverse-mode automatic differentiation over dense 64-bit matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! always 2-D (`rows x cols`); row vectors are `1 x d` and scalars `1 x 1`.
//! Calling [`Tape::backward`] on a scalar node walks the record in reverse
//! and returns the gradient of that scalar with respect to every node that
//! depends on a leaf created with [`Tape::leaf`]. Nodes built only from
//! [`Tape::constant`] inputs never receive gradients.

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ScalarMul(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    MeanRows(Var),
    Sum(Vec<Var>),
    ReplaceRows {
        x: Var,
        rows: Vec<usize>,
        with: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    /// Scalar with precomputed local gradients w.r.t. each input.
    Scalar(Vec<(Var, Mat)>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, or `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_op(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, op, needs)
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let v = self.value(a) + self.value(b);
        self.push_op(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape");
        let v = self.value(a) - self.value(b);
        self.push_op(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape");
        let v = self.value(a) * self.value(b);
        self.push_op(v, Op::Mul(a, b), &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push_op(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push_op(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push_op(v, Op::Transpose(a), &[a])
    }

    /// `a + 1·row`, broadcasting a `1 x d` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ra, ca) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, ca), "add_row shape");
        let mut v = self.value(a).clone();
        let r = self.value(row).row(0).to_owned();
        for i in 0..ra {
            let mut vr = v.row_mut(i);
            vr += &r;
        }
        self.push_op(v, Op::AddRow(a, row), &[a, row])
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `n x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ra, _) = self.value(a).dim();
        assert_eq!(self.value(col).dim(), (ra, 1), "mul_col shape");
        let mut v = self.value(a).clone();
        for i in 0..ra {
            let g = self.value(col)[[i, 0]];
            v.row_mut(i).mapv_inplace(|x| x * g);
        }
        self.push_op(v, Op::MulCol(a, col), &[a, col])
    }

    /// `a * s` for a `1 x 1` node `s`.
    pub fn scalar_mul(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a) * k;
        self.push_op(v, Op::ScalarMul(a, s), &[a, s])
    }

    /// `scale * a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).mapv(|x| scale * x + shift);
        self.push_op(v, Op::Affine(a, scale), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push_op(v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push_op(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push_op(v, Op::Tanh(a), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.value(a).dim();
        let (rb, cb) = self.value(b).dim();
        assert_eq!(ra, rb, "concat_cols rows");
        let mut v = Mat::zeros((ra, ca + cb));
        v.slice_mut(s![.., ..ca]).assign(self.value(a));
        v.slice_mut(s![.., ca..]).assign(self.value(b));
        self.push_op(v, Op::ConcatCols(a, b), &[a, b])
    }

    /// Rows `start..start+len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push_op(v, Op::SliceRows(a, start), &[a])
    }

    /// Column means as a `1 x d` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.nrows() as f64;
        let v = m.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
        self.push_op(v, Op::MeanRows(a), &[a])
    }

    /// Elementwise sum of same-shaped nodes, accumulated left to right.
    pub fn sum(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "sum of nothing");
        let mut v = self.value(vars[0]).clone();
        for &x in &vars[1..] {
            assert_eq!(self.value(x).dim(), v.dim(), "sum shape");
            v += self.value(x);
        }
        self.push_op(v, Op::Sum(vars.to_vec()), vars)
    }

    /// Copy of `x` with the listed rows overwritten by the `1 x d` row
    /// `with`, or by zeros when `with` is `None`.
    pub fn replace_rows(&mut self, x: Var, rows: &[usize], with: Option<Var>) -> Var {
        let mut v = self.value(x).clone();
        let d = v.ncols();
        for &r in rows {
            match with {
                Some(w) => {
                    assert_eq!(self.value(w).dim(), (1, d), "replace_rows token shape");
                    v.row_mut(r).assign(&self.value(w).row(0));
                }
                None => v.row_mut(r).fill(0.0),
            }
        }
        let mut inputs = vec![x];
        inputs.extend(with);
        self.push_op(
            v,
            Op::ReplaceRows {
                x,
                rows: rows.to_vec(),
                with,
            },
            &inputs,
        )
    }

    /// Per-row layer normalization with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Mat::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mean) * is;
            }
        }
        let g = self.value(gain).row(0).to_owned();
        let b = self.value(bias).row(0).to_owned();
        let mut v = xhat.clone();
        for mut r in v.rows_mut() {
            r *= &g;
            r += &b;
        }
        self.push_op(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Scalar node with caller-supplied local gradients `d value / d input`.
    pub fn custom_scalar(&mut self, value: f64, local: Vec<(Var, Mat)>) -> Var {
        for (v, g) in &local {
            assert_eq!(
                self.value(*v).dim(),
                g.dim(),
                "custom_scalar gradient shape"
            );
        }
        let inputs: Vec<Var> = local.iter().map(|(v, _)| *v).collect();
        self.push_op(Mat::from_elem((1, 1), value), Op::Scalar(local), &inputs)
    }

    /// Gradients of the `1 x 1` node `root` w.r.t. every node it depends on.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.dot(self.value(*b)));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.t().to_owned()),
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.needs(*row) {
                    self.acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                let colv = self.value(*col);
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let c = colv[[r, 0]];
                        row.mapv_inplace(|x| x * c);
                    }
                    self.acc(grads, *a, ga);
                }
                if self.needs(*col) {
                    let av = self.value(*a);
                    let gc = (g * av).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.acc(grads, *col, gc);
                }
            }
            Op::ScalarMul(a, sv) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g * self.scalar(*sv));
                }
                if self.needs(*sv) {
                    let d = (g * self.value(*a)).sum();
                    self.acc(grads, *sv, Mat::from_elem((1, 1), d));
                }
            }
            Op::Affine(a, scale) => self.acc(grads, *a, g * *scale),
            Op::Gelu(a) => {
                let mut ga = self.value(*a).mapv(gelu_grad);
                ga *= g;
                self.acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = node.value.mapv(|y| y * (1.0 - y));
                ga *= g;
                self.acc(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let mut ga = node.value.mapv(|y| 1.0 - y * y);
                ga *= g;
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).ncols();
                if self.needs(*a) {
                    self.acc(grads, *a, g.slice(s![.., ..ca]).to_owned());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.slice(s![.., ca..]).to_owned());
                }
            }
            Op::SliceRows(a, start) => {
                let mut ga = Mat::zeros(self.value(*a).dim());
                let len = g.nrows();
                ga.slice_mut(s![*start..*start + len, ..]).assign(g);
                self.acc(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let (n, d) = self.value(*a).dim();
                let row = g.row(0).mapv(|x| x / n as f64);
                let ga = row.broadcast((n, d)).expect("broadcast").to_owned();
                self.acc(grads, *a, ga);
            }
            Op::Sum(vars) => {
                for &v in vars {
                    self.acc(grads, v, g.clone());
                }
            }
            Op::ReplaceRows { x, rows, with } => {
                if self.needs(*x) {
                    let mut gx = g.clone();
                    for &r in rows {
                        gx.row_mut(r).fill(0.0);
                    }
                    self.acc(grads, *x, gx);
                }
                if let Some(w) = with {
                    if self.needs(*w) {
                        let mut gw = Mat::zeros((1, g.ncols()));
                        for &r in rows {
                            let mut acc = gw.row_mut(0);
                            acc += &g.row(r);
                        }
                        self.acc(grads, *w, gw);
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
                let (n, d) = xhat.dim();
                if self.needs(*bias) {
                    self.acc(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs(*gain) {
                    let gg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *gain, gg);
                }
                if self.needs(*x) {
                    let gain_row = self.value(*gain).row(0);
                    let mut gx = Mat::zeros((n, d));
                    for i in 0..n {
                        let dxhat: Vec<f64> = (0..d).map(|j| g[[i, j]] * gain_row[j]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = (0..d).map(|j| dxhat[j] * xhat[[i, j]]).sum();
                        for j in 0..d {
                            gx[[i, j]] = inv_std[i] / d as f64
                                * (d as f64 * dxhat[j] - sum_d - xhat[[i, j]] * sum_dx);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Scalar(local) => {
                let up = g[[0, 0]];
                for (v, lg) in local {
                    if self.needs(*v) {
                        self.acc(grads, *v, lg * up);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of d(sum of weighted output)/d(input) for a
    /// unary builder.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x0: Mat) {
        let weights = Mat::from_shape_fn(
            {
                let mut t = Tape::new();
                let x = t.leaf(x0.clone());
                let y = build(&mut t, x);
                t.value(y).dim()
            },
            |(i, j)| 0.3 + 0.17 * i as f64 - 0.11 * j as f64,
        );
        let eval = |x: &Mat| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = build(&mut t, xv);
            (t.value(y) * &weights).sum()
        };
        let mut t = Tape::new();
        let xv = t.leaf(x0.clone());
        let y = build(&mut t, xv);
        let w = t.constant(weights.clone());
        let prod = t.mul(y, w);
        let ones = t.constant(Mat::ones((1, weights.nrows())));
        let colsum = t.matmul(ones, prod);
        let ones_c = t.constant(Mat::ones((weights.ncols(), 1)));
        let total = t.matmul(colsum, ones_c);
        let grads = t.backward(total);
        let g = grads.get(xv).unwrap();
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let mut xp = x0.clone();
            xp[[r, c]] += h;
            let mut xm = x0.clone();
            xm[[r, c]] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let err = (fd - g[[r, c]]).abs() / fd.abs().max(g[[r, c]].abs()).max(1e-3);
            assert!(
                err < 1e-6,
                "entry ({r},{c}): fd {fd} vs analytic {}",
                g[[r, c]]
            );
        }
    }

    fn sample() -> Mat {
        array![[0.3, -1.2, 0.7], [1.5, 0.1, -0.4], [-0.8, 0.9, 0.2]]
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check_unary(|t, x| t.gelu(x), sample());
        check_unary(|t, x| t.sigmoid(x), sample());
        check_unary(|t, x| t.tanh(x), sample());
        check_unary(|t, x| t.affine(x, -2.5, 1.0), sample());
        check_unary(|t, x| t.mul(x, x), sample());
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check_unary(|t, x| t.matmul(x, x), sample());
        check_unary(|t, x| t.matmul_t(x, x), sample());
        check_unary(|t, x| t.transpose(x), sample());
        check_unary(|t, x| t.concat_cols(x, x), sample());
        check_unary(|t, x| t.slice_rows(x, 1, 2), sample());
        check_unary(|t, x| t.mean_rows(x), sample());
        check_unary(
            |t, x| {
                let r = t.slice_rows(x, 0, 1);
                t.add_row(x, r)
            },
            sample(),
        );
        check_unary(
            |t, x| {
                let c = t.slice_rows(x, 0, 1);
                let ct = t.transpose(c);
                t.mul_col(x, ct)
            },
            sample(),
        );
        check_unary(
            |t, x| {
                let s = t.slice_rows(x, 2, 1);
                let st = t.transpose(s);
                let s11 = t.slice_rows(st, 1, 1);
                t.scalar_mul(x, s11)
            },
            sample(),
        );
        check_unary(
            |t, x| {
                let tok = t.slice_rows(x, 2, 1);
                t.replace_rows(x, &[0, 1], Some(tok))
            },
            sample(),
        );
        check_unary(|t, x| t.replace_rows(x, &[1], None), sample());
        check_unary(|t, x| t.sum(&[x, x, x]), sample());
        check_unary(|t, x| t.sub(x, x), sample());
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        check_unary(
            |t, x| {
                let g = t.slice_rows(x, 0, 1);
                let b = t.slice_rows(x, 1, 1);
                t.layer_norm(x, g, b)
            },
            sample(),
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(sample());
        let x = t.leaf(sample());
        let y = t.matmul(c, x);
        let m = t.mean_rows(y);
        let mt = t.transpose(m);
        let s = t.mean_rows(mt);
        let grads = t.backward(s);
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
