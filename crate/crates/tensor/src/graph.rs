use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Log(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Upsample2(Var),
    GatherPoints {
        grid: Var,
        idx: Vec<(usize, usize)>,
    },
    ScatterPoints {
        feats: Var,
        idx: Vec<(usize, usize)>,
    },
    Bmm(Var, Var),
    TransposeLast2(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SoftmaxLast(Var),
    AddRowBias(Var, Var),
    Concat0(Var, Var),
    MulBcast0(Var, Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward simply walks it in reverse.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every leaf that requires them.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: a.to_vec(),
            got: b.to_vec(),
        });
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, va.shape(), vb.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise division; the divisor must be non-zero everywhere.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[b.0].value.data().iter().any(|v| *v == T::zero()) {
            return Err(TensorError::invalid("div", "division by zero"));
        }
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let k = T::of(s);
        self.unary(x, Op::Scale(x, s), |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let k = T::of(s);
        self.unary(x, Op::AddScalar(x), |v| v + k)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((index, v)) = self.nodes[x.0]
            .value
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| **v <= T::zero())
        {
            return Err(TensorError::NonPositiveLog {
                value: v.as_f64(),
                index,
            });
        }
        Ok(self.unary(x, Op::Log(x), |v| v.ln()))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    /// Square root; inputs must be strictly positive so the derivative exists.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.data().iter().any(|v| *v <= T::zero()) {
            return Err(TensorError::invalid("sqrt", "non-positive input"));
        }
        Ok(self.unary(x, Op::Sqrt(x), |v| v.sqrt()))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.numel() == 0 {
            return Err(TensorError::invalid("mean", "empty tensor"));
        }
        let m = v.sum() / T::of(v.numel() as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// 2D cross-correlation with zero "same" padding.
    ///
    /// `x` is `C_in x H x W`, `w` is `C_out x C_in x k x k` (k odd), `b` is
    /// `C_out`. Stride 1 preserves the spatial size; stride 2 halves it and
    /// requires even `H` and `W`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 4 || bs.len() != 1 {
            return Err(TensorError::invalid(
                "conv2d",
                format!("expected CxHxW input, 4D weight, 1D bias; got {xs:?}, {ws:?}, {bs:?}"),
            ));
        }
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        if ws[1] != c_in || ws[3] != k || k % 2 == 0 || bs[0] != c_out {
            return Err(TensorError::invalid(
                "conv2d",
                format!("incompatible weight {ws:?} / bias {bs:?} for input {xs:?}"),
            ));
        }
        if stride != 1 && stride != 2 {
            return Err(TensorError::invalid("conv2d", format!("unsupported stride {stride}")));
        }
        if stride == 2 && (h % 2 != 0 || wd % 2 != 0) {
            return Err(TensorError::invalid(
                "conv2d",
                format!("stride 2 needs even spatial extents, got {h}x{wd}"),
            ));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            ksize: k,
            stride,
            pad: k / 2,
            h_out: h / stride,
            w_out: wd / stride,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            c_out,
            &geom,
        );
        let value = Tensor::new(&[c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Bilinear x2 upsampling of a `C x H x W` tensor (align_corners = false).
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(TensorError::invalid("upsample2", format!("expected CxHxW, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let out = kernels::upsample2_forward(self.value(x).data(), c, h, w);
        let value = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample2(x), rg))
    }

    /// Reads the `C`-vector at each `(row, col)` of a `C x H x W` grid into a
    /// `C x N` tensor.
    pub fn gather_points(&mut self, grid: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let s = self.shape(grid).to_vec();
        if s.len() != 3 {
            return Err(TensorError::invalid("gather_points", format!("expected CxHxW, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        check_bounds("gather_points", idx, h, w)?;
        let n = idx.len();
        let src = self.value(grid).data();
        let mut out = vec![T::zero(); c * n];
        for ch in 0..c {
            for (j, &(r, col)) in idx.iter().enumerate() {
                out[ch * n + j] = src[(ch * h + r) * w + col];
            }
        }
        let value = Tensor::new(&[c, n], out)?;
        let rg = self.rg(grid);
        Ok(self.push(
            value,
            Op::GatherPoints {
                grid,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Writes `C x N` point features into an otherwise zero `C x H x W` grid.
    pub fn scatter_points(
        &mut self,
        feats: Var,
        idx: &[(usize, usize)],
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let s = self.shape(feats).to_vec();
        if s.len() != 2 || s[1] != idx.len() {
            return Err(TensorError::invalid(
                "scatter_points",
                format!("expected C x {} features, got {s:?}", idx.len()),
            ));
        }
        check_bounds("scatter_points", idx, h, w)?;
        let mut seen = vec![false; h * w];
        for &(r, c) in idx {
            if std::mem::replace(&mut seen[r * w + c], true) {
                return Err(TensorError::DuplicateIndex { row: r, col: c });
            }
        }
        let (c, n) = (s[0], s[1]);
        let src = self.value(feats).data();
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for (j, &(r, col)) in idx.iter().enumerate() {
                out[(ch * h + r) * w + col] = src[ch * n + j];
            }
        }
        let value = Tensor::new(&[c, h, w], out)?;
        let rg = self.rg(feats);
        Ok(self.push(
            value,
            Op::ScatterPoints {
                feats,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Batched matrix product of `B x m x n` and `B x n x p`. Rank-2 operands
    /// are treated as a batch of one.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n) = match (sa.len(), sb.len()) {
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "bmm",
                    expected: sa,
                    got: sb,
                })
            }
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                expected: sa,
                got: sb,
            });
        }
        let mut out = vec![T::zero(); batch * m * n];
        kernels::bmm(batch, m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out);
        let shape: Vec<usize> = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Bmm(a, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(TensorError::invalid("matmul", "expected rank-2 operands"));
        }
        self.bmm(a, b)
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, r, c) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(TensorError::invalid("transpose", format!("rank {} unsupported", s.len()))),
        };
        let out = transpose_data(self.value(x).data(), batch, r, c);
        let mut shape = s.clone();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::TransposeLast2(x), rg))
    }

    /// Selects rows of an `R x C` tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::invalid("gather_rows", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::invalid("gather_rows", format!("row {bad} >= {r}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(&[idx.len(), c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let mut out = self.value(x).data().to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        }
        let value = Tensor::new(&s, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxLast(x), rg))
    }

    /// Adds a length-`C` bias to every row of a `... x C` tensor.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        let c = *sx.last().unwrap_or(&0);
        if sb != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                expected: vec![c],
                got: sb,
            });
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            for (v, bb) in row.iter_mut().zip(&bias) {
                *v += *bb;
            }
        }
        let value = Tensor::new(&sx, out)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddRowBias(x, b), rg))
    }

    /// Concatenates along the first axis.
    pub fn concat0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat0",
                expected: sa,
                got: sb,
            });
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat0(a, b), rg))
    }

    /// `x[i, ...] * c[0, ...]`: multiplies every leading slice by a shared map.
    pub fn mul_bcast0(&mut self, x: Var, c: Var) -> Result<Var> {
        let (sx, sc) = (self.shape(x).to_vec(), self.shape(c).to_vec());
        if sx.is_empty() || sc.len() != sx.len() || sc[0] != 1 || sc[1..] != sx[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_bcast0",
                expected: sx,
                got: sc,
            });
        }
        let gate = self.value(c).data().to_vec();
        let inner = gate.len();
        let mut out = self.value(x).data().to_vec();
        if inner > 0 {
            for slice in out.chunks_mut(inner) {
                for (v, g) in slice.iter_mut().zip(&gate) {
                    *v *= *g;
                }
            }
        }
        let value = Tensor::new(&sx, out)?;
        let rg = self.rg(x) || self.rg(c);
        Ok(self.push(value, Op::MulBcast0(x, c), rg))
    }

    /// The sub-range `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    /// Reverse-mode sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("root must be a scalar, got shape {:?}", rv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match &self.nodes[i].op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(i, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape());
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let zip_map = |a: &Tensor<T>, b: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
            Tensor::from_fn(a.shape(), |k| f(a.data()[k], b.data()[k]))
        };
        match node.op.clone() {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, b, g.clone());
                self.accumulate(grads, a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, b, g.map(|v| -v));
                self.accumulate(grads, a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, zip_map(&g, val(b), &|gv, bv| gv * bv));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, zip_map(&g, val(a), &|gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, zip_map(&g, val(b), &|gv, bv| gv / bv));
                }
                if self.rg(b) {
                    let gy = zip_map(&g, y, &|gv, yv| gv * yv);
                    self.accumulate(grads, b, zip_map(&gy, val(b), &|v, bv| -v / bv));
                }
            }
            Op::Scale(x, s) => {
                let k = T::of(s);
                self.accumulate(grads, x, g.map(|v| v * k));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = val(x).shape().to_vec();
                let g = g.reshape(&shape).expect("reshape grad");
                self.accumulate(grads, x, g);
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, x, zip_map(&g, y, &|gv, yv| gv * yv * (T::one() - yv)));
            }
            Op::Relu(x) => {
                self.accumulate(
                    grads,
                    x,
                    zip_map(&g, val(x), &|gv, xv| if xv > T::zero() { gv } else { T::zero() }),
                );
            }
            Op::Softplus(x) => {
                self.accumulate(grads, x, zip_map(&g, val(x), &|gv, xv| gv * sigmoid(xv)));
            }
            Op::Log(x) => {
                self.accumulate(grads, x, zip_map(&g, val(x), &|gv, xv| gv / xv));
            }
            Op::Abs(x) => {
                self.accumulate(
                    grads,
                    x,
                    zip_map(&g, val(x), &|gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::Sqrt(x) => {
                self.accumulate(grads, x, zip_map(&g, y, &|gv, yv| gv * T::of(0.5) / yv));
            }
            Op::Square(x) => {
                self.accumulate(grads, x, zip_map(&g, val(x), &|gv, xv| gv * T::of(2.0) * xv));
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, x, Tensor::full(val(x).shape(), gv));
            }
            Op::Mean(x) => {
                let n = val(x).numel();
                let gv = g.item() / T::of(n as f64);
                self.accumulate(grads, x, Tensor::full(val(x).shape(), gv));
            }
            Op::Conv2d { x, w, b, geom } => {
                let c_out = val(w).shape()[0];
                let need_params = self.rg(w) || self.rg(b);
                let (dx, dw, db) = kernels::conv2d_backward(
                    val(x).data(),
                    val(w).data(),
                    g.data(),
                    c_out,
                    &geom,
                    self.rg(x),
                    need_params,
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, x, Tensor::new(val(x).shape(), dx).expect("conv dx"));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, Tensor::new(val(w).shape(), dw).expect("conv dw"));
                }
                if let Some(db) = db {
                    self.accumulate(grads, b, Tensor::new(val(b).shape(), db).expect("conv db"));
                }
            }
            Op::Upsample2(x) => {
                let s = val(x).shape();
                let dx = kernels::upsample2_backward(g.data(), s[0], s[1], s[2]);
                self.accumulate(grads, x, Tensor::new(s, dx).expect("upsample dx"));
            }
            Op::GatherPoints { grid, idx } => {
                let s = val(grid).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let n = idx.len();
                let mut dx = Tensor::zeros(s);
                let d = dx.data_mut();
                for ch in 0..c {
                    for (j, &(r, col)) in idx.iter().enumerate() {
                        d[(ch * h + r) * w + col] += g.data()[ch * n + j];
                    }
                }
                self.accumulate(grads, grid, dx);
            }
            Op::ScatterPoints { feats, idx } => {
                let (c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                let n = idx.len();
                let mut df = vec![T::zero(); c * n];
                for ch in 0..c {
                    for (j, &(r, col)) in idx.iter().enumerate() {
                        df[ch * n + j] = g.data()[(ch * h + r) * w + col];
                    }
                }
                self.accumulate(grads, feats, Tensor::new(&[c, n], df).expect("scatter df"));
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (batch, m, k, n) = if sa.len() == 3 {
                    (sa[0], sa[1], sa[2], sb[2])
                } else {
                    (1, sa[0], sa[1], sb[1])
                };
                if self.rg(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    kernels::bmm(batch, m, n, k, g.data(), false, val(b).data(), true, &mut da);
                    self.accumulate(grads, a, Tensor::new(sa, da).expect("bmm da"));
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    kernels::bmm(batch, k, m, n, val(a).data(), true, g.data(), false, &mut db);
                    self.accumulate(grads, b, Tensor::new(sb, db).expect("bmm db"));
                }
            }
            Op::TransposeLast2(x) => {
                let s = val(x).shape();
                let (batch, r, c) = if s.len() == 2 { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
                let dx = transpose_data(g.data(), batch, c, r);
                self.accumulate(grads, x, Tensor::new(s, dx).expect("transpose dx"));
            }
            Op::GatherRows { x, idx } => {
                let s = val(x).shape();
                let c = s[1];
                let mut dx = Tensor::zeros(s);
                let d = dx.data_mut();
                for (j, &i) in idx.iter().enumerate() {
                    for (dst, src) in d[i * c..(i + 1) * c].iter_mut().zip(&g.data()[j * c..(j + 1) * c]) {
                        *dst += *src;
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::SoftmaxLast(x) => {
                let n = *y.shape().last().unwrap_or(&1);
                let mut dx = g.data().to_vec();
                if n > 0 {
                    for (drow, yrow) in dx.chunks_mut(n).zip(y.data().chunks(n)) {
                        let dot: T = drow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                        for (d, yv) in drow.iter_mut().zip(yrow) {
                            *d = *yv * (*d - dot);
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(y.shape(), dx).expect("softmax dx"));
            }
            Op::AddRowBias(x, b) => {
                if self.rg(b) {
                    let c = val(b).numel();
                    let mut db = vec![T::zero(); c];
                    for row in g.data().chunks(c.max(1)) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(&[c], db).expect("bias db"));
                }
                self.accumulate(grads, x, g);
            }
            Op::Concat0(a, b) => {
                let na = val(a).numel();
                let da = Tensor::new(val(a).shape(), g.data()[..na].to_vec()).expect("concat da");
                let db = Tensor::new(val(b).shape(), g.data()[na..].to_vec()).expect("concat db");
                self.accumulate(grads, a, da);
                self.accumulate(grads, b, db);
            }
            Op::MulBcast0(x, c) => {
                let gate = val(c).data();
                let inner = gate.len();
                if self.rg(x) {
                    let mut dx = g.data().to_vec();
                    for slice in dx.chunks_mut(inner.max(1)) {
                        for (d, gv) in slice.iter_mut().zip(gate) {
                            *d *= *gv;
                        }
                    }
                    self.accumulate(grads, x, Tensor::new(val(x).shape(), dx).expect("bcast dx"));
                }
                if self.rg(c) {
                    let mut dc = vec![T::zero(); inner];
                    for (gs, xs) in g.data().chunks(inner.max(1)).zip(val(x).data().chunks(inner.max(1))) {
                        for ((d, gv), xv) in dc.iter_mut().zip(gs).zip(xs) {
                            *d += *gv * *xv;
                        }
                    }
                    self.accumulate(grads, c, Tensor::new(val(c).shape(), dc).expect("bcast dc"));
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = val(x).shape();
                let len = y.shape()[axis];
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut dx = Tensor::zeros(s);
                let d = dx.data_mut();
                for o in 0..outer {
                    let base = (o * s[axis] + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, x, dx);
            }
        }
    }
}

fn check_bounds(op: &'static str, idx: &[(usize, usize)], h: usize, w: usize) -> Result<()> {
    if let Some(&(row, col)) = idx.iter().find(|&&(r, c)| r >= h || c >= w) {
        return Err(TensorError::IndexOutOfBounds {
            op,
            row,
            col,
            height: h,
            width: w,
        });
    }
    Ok(())
}

fn transpose_data<T: Scalar>(src: &[T], batch: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let s = &src[b * r * c..(b + 1) * r * c];
        let o = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                o[j * r + i] = s[i * c + j];
            }
        }
    }
    out
}
