//! Reverse-mode automatic differentiation over matrix-valued primitives.
//!
//! A [`Tape`] records every primitive in creation order together with the
//! forward values its backward rule needs. [`Tape::backward`] walks the
//! record once in reverse and returns one gradient per parameter block
//! (zeros for blocks the graph never touched) plus one per external input.
//!
//! Only the primitives the acoustic-field graph needs are provided: dense
//! products, broadcasts, activations, dilated 1-D convolution, STFT framing,
//! DFT magnitude, reductions and `log10`.

use std::f64::consts::LN_10;
use std::sync::Arc;

use rustfft::num_complex::Complex;

use crate::dsp::RealFftCache;
use crate::error::{NacfError, Result};
use crate::matrix::{matmul, matmul_nt, matmul_tn_acc, Matrix};
use crate::params::{BlockId, ParamSet};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Const,
    Param(BlockId),
    Input(usize),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Dense { x: Var, w: Var, bias: Var, extra: Option<Var>, relu: bool },
    SliceRows(Var, usize),
    AddRow(Var, Var),
    Add(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Conv1d { x: Var, w: Var, b: Var, kernel: usize, dilation: usize },
    Frames { x: Var, row: usize, hop: usize, window: Arc<Vec<f64>> },
    DftMag { x: Var, spectrum: Vec<Complex<f64>> },
    Square(Var),
    RowSums(Var),
    RevCumsum(Var),
    Log10(Var, f64),
    AbsDiffMean(Var, Arc<Matrix>),
    Scale(Var, f64),
    Sum(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Dense { .. } => "dense",
            Op::SliceRows(..) => "slice_rows",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Transpose(_) => "transpose",
            Op::Conv1d { .. } => "conv1d",
            Op::Frames { .. } => "frames",
            Op::DftMag { .. } => "dft_mag",
            Op::Square(_) => "square",
            Op::RowSums(_) => "row_sums",
            Op::RevCumsum(_) => "rev_cumsum",
            Op::Log10(..) => "log10",
            Op::AbsDiffMean(..) => "abs_diff_mean",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node {
    op: Op,
    /// `None` for parameter leaves, whose values live in the [`ParamSet`].
    value: Option<Matrix>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// One matrix per parameter block, in block order.
    pub params: Vec<Matrix>,
    /// One matrix per [`Tape::input`] leaf, in creation order.
    pub inputs: Vec<Matrix>,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    input_shapes: Vec<(usize, usize)>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::new(), input_shapes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Const, m)
    }

    pub fn param(&mut self, id: BlockId) -> Var {
        self.nodes.push(Node { op: Op::Param(id), value: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, name: &str) -> Var {
        let id = self.params.id(name);
        self.param(id)
    }

    /// A leaf whose gradient is reported in [`Gradients::inputs`].
    pub fn input(&mut self, m: Matrix) -> Var {
        let k = self.input_shapes.len();
        self.input_shapes.push(m.shape());
        self.push(Op::Input(k), m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_nt(self.value(a), self.value(b));
        self.push(Op::MatMulNt(a, b), v)
    }

    /// Fused layer `act(x * w + extra + bias)`, with `bias` a `1 x n` row,
    /// `extra` an optional node shaped like the product and `act` ReLU or
    /// identity.
    pub fn dense(&mut self, x: Var, w: Var, bias: Var, extra: Option<Var>, relu_act: bool) -> Var {
        let mut out = matmul(self.value(x), self.value(w));
        let bv = self.value(bias);
        assert_eq!(bv.shape(), (1, out.cols), "dense bias shape");
        if let Some(e) = extra {
            out.add_assign(self.value(e));
        }
        for row in out.data.chunks_mut(bv.cols) {
            for (v, b) in row.iter_mut().zip(&bv.data) {
                *v += b;
                if relu_act {
                    *v = relu(*v);
                }
            }
        }
        self.push(Op::Dense { x, w, bias, extra, relu: relu_act }, out)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start < end && end <= av.rows, "slice_rows range");
        let out = Matrix::from_vec(end - start, av.cols, av.data[start * av.cols..end * av.cols].to_vec());
        self.push(Op::SliceRows(a, start), out)
    }

    /// Adds the `1 x n` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(r));
        assert_eq!(rv.rows, 1, "add_row expects a row vector");
        assert_eq!(av.cols, rv.cols, "add_row width");
        let mut out = av.clone();
        for row in out.data.chunks_mut(rv.cols) {
            for (x, b) in row.iter_mut().zip(&rv.data) {
                *x += b;
            }
        }
        self.push(Op::AddRow(a, r), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(Op::Add(a, b), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for x in &mut out.data {
            *x = relu(*x);
        }
        self.push(Op::Relu(a), out)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let mut out = self.value(a).clone();
        for x in &mut out.data {
            *x = leaky_relu(*x, slope);
        }
        self.push(Op::LeakyRelu(a, slope), out)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows, "concat_cols rows");
        let cols = av.cols + bv.cols;
        let mut data = Vec::with_capacity(av.rows * cols);
        for r in 0..av.rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Matrix::from_vec(av.rows, cols, data);
        self.push(Op::ConcatCols(a, b), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows width");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Op::ConcatRows(parts.to_vec()), Matrix::from_vec(rows, cols, data))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let av = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * av.cols);
        for &r in rows {
            data.extend_from_slice(av.row(r));
        }
        let out = Matrix::from_vec(rows.len(), av.cols, data);
        self.push(Op::GatherRows(a, rows.to_vec()), out)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out)
    }

    /// Dilated 1-D cross-correlation over the columns of `x` (`C_in x T`)
    /// with symmetric zero padding so the output keeps length `T`.
    /// `w` is `C_out x (C_in * kernel)` laid out `[out][in][tap]`, `b` is
    /// `C_out x 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, dilation: usize) -> Var {
        let out = conv1d_forward(self.value(x), self.value(w), self.value(b), kernel, dilation);
        self.push(Op::Conv1d { x, w, b, kernel, dilation }, out)
    }

    /// Windowed frames of row `row` of `x`, zero-padded to `fft_size`
    /// columns. One output row per frame.
    pub fn frames(&mut self, x: Var, row: usize, hop: usize, window: Arc<Vec<f64>>, fft_size: usize) -> Var {
        let xv = self.value(x);
        let signal = xv.row(row);
        let w_len = window.len();
        let n_frames = if signal.len() <= w_len {
            1
        } else {
            (signal.len() - w_len).div_ceil(hop) + 1
        };
        let mut out = Matrix::zeros(n_frames, fft_size);
        for d in 0..n_frames {
            let frame = out.row_mut(d);
            for (k, wv) in window.iter().enumerate() {
                if let Some(s) = signal.get(d * hop + k) {
                    frame[k] = s * wv;
                }
            }
        }
        self.push(Op::Frames { x, row, hop, window }, out)
    }

    /// Magnitude of the DFT of every row of `x`, keeping bins
    /// `0..=cols/2`.
    pub fn dft_mag(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols;
        let bins = n / 2 + 1;
        let fft = RealFftCache::forward(n);
        let mut input = xv.data.clone();
        let mut spectrum = vec![Complex::new(0.0, 0.0); xv.rows * bins];
        let mut scratch = fft.make_scratch_vec();
        let mut out = Matrix::zeros(xv.rows, bins);
        for ((frame, spec), mags) in input.chunks_mut(n).zip(spectrum.chunks_mut(bins)).zip(out.data.chunks_mut(bins)) {
            fft.process_with_scratch(frame, spec, &mut scratch).expect("fft buffer sizes");
            for (o, z) in mags.iter_mut().zip(spec.iter()) {
                *o = (z.re * z.re + z.im * z.im).sqrt();
            }
        }
        self.push(Op::DftMag { x, spectrum }, out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v *= *v;
        }
        self.push(Op::Square(a), out)
    }

    /// Sum of each row, as an `m x 1` column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data.chunks(av.cols).map(|r| r.iter().sum()).collect();
        let out = Matrix::from_vec(av.rows, 1, data);
        self.push(Op::RowSums(a), out)
    }

    /// Suffix sums down each column: `out[i] = sum_{k >= i} a[k]`.
    pub fn rev_cumsum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for c in 0..av.cols {
            let mut acc = 0.0;
            for r in (0..av.rows).rev() {
                acc += av.data[r * av.cols + c];
                out.data[r * av.cols + c] = acc;
            }
        }
        self.push(Op::RevCumsum(a), out)
    }

    /// `log10(a + eps)`.
    pub fn log10(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = (*v + eps).log10();
        }
        self.push(Op::Log10(a, eps), out)
    }

    /// Mean absolute difference against a fixed target, as a `1 x 1` value.
    pub fn abs_diff_mean(&mut self, a: Var, target: Arc<Matrix>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), target.shape(), "abs_diff_mean shapes");
        let s: f64 = av.data.iter().zip(&target.data).map(|(x, t)| (x - t).abs()).sum();
        let out = Matrix::scalar(s / av.data.len() as f64);
        self.push(Op::AbsDiffMean(a, target), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v *= s;
        }
        self.push(Op::Scale(a, s), out)
    }

    /// Elementwise sum of same-shaped nodes, accumulated left to right.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out.add_assign(self.value(p));
        }
        self.push(Op::Sum(parts.to_vec()), out)
    }

    /// Gradients of the scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        self.backward_seeded(loss, Matrix::scalar(1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`).
    pub fn backward_seeded(&self, out: Var, seed: Matrix) -> Result<Gradients> {
        assert_eq!(self.value(out).shape(), seed.shape(), "seed shape");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads = self.params.zeros_like();
        let mut input_grads: Vec<Matrix> = self.input_shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if let Some(v) = &node.value {
                if !v.is_finite() {
                    return Err(NacfError::NonFinite { op_index: i, op: node.op.name() });
                }
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(NacfError::NonFinite { op_index: i, op: node.op.name() });
            }
            self.propagate(i, g, &mut grads, &mut param_grads, &mut input_grads);
        }
        Ok(Gradients { params: param_grads, inputs: input_grads })
    }

    fn propagate(
        &self,
        i: usize,
        g: Matrix,
        grads: &mut [Option<Matrix>],
        param_grads: &mut [Matrix],
        input_grads: &mut [Matrix],
    ) {
        let acc = |grads: &mut [Option<Matrix>], v: Var, m: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&m),
            slot @ None => *slot = Some(m),
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Const => {}
            Op::Param(id) => param_grads[id.0].add_assign(&g),
            Op::Input(k) => input_grads[*k].add_assign(&g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, matmul_nt(&g, bv));
                let mut gb = Matrix::zeros(bv.rows, bv.cols);
                matmul_tn_acc(av, &g, &mut gb);
                acc(grads, *b, gb);
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, matmul(&g, bv));
                let mut gb = Matrix::zeros(bv.rows, bv.cols);
                matmul_tn_acc(&g, av, &mut gb);
                acc(grads, *b, gb);
            }
            Op::Dense { x, w, bias, extra, relu } => {
                let mut gp = g;
                if *relu {
                    let out = node.value.as_ref().unwrap();
                    for (gv, y) in gp.data.iter_mut().zip(&out.data) {
                        if *y <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut gb = Matrix::zeros(1, gp.cols);
                for row in gp.data.chunks(gp.cols) {
                    for (s, v) in gb.data.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc(grads, *bias, gb);
                acc(grads, *x, matmul_nt(&gp, wv));
                let mut gw = Matrix::zeros(wv.rows, wv.cols);
                matmul_tn_acc(xv, &gp, &mut gw);
                acc(grads, *w, gw);
                if let Some(e) = extra {
                    acc(grads, *e, gp);
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows, av.cols);
                ga.data[start * av.cols..start * av.cols + g.data.len()].copy_from_slice(&g.data);
                acc(grads, *a, ga);
            }
            Op::AddRow(a, r) => {
                let mut gr = Matrix::zeros(1, g.cols);
                for row in g.data.chunks(g.cols) {
                    for (s, v) in gr.data.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc(grads, *r, gr);
                acc(grads, *a, g);
            }
            Op::Add(a, b) => {
                acc(grads, *b, g.clone());
                acc(grads, *a, g);
            }
            Op::Relu(a) => {
                let out = node.value.as_ref().unwrap();
                let mut ga = g;
                for (gv, y) in ga.data.iter_mut().zip(&out.data) {
                    if *y <= 0.0 {
                        *gv = 0.0;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let input = self.value(*a);
                let mut ga = g;
                for (gv, x) in ga.data.iter_mut().zip(&input.data) {
                    if *x <= 0.0 {
                        *gv *= slope;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols;
                let cb = g.cols - ca;
                let mut ga = Matrix::zeros(g.rows, ca);
                let mut gb = Matrix::zeros(g.rows, cb);
                for r in 0..g.rows {
                    let row = g.row(r);
                    ga.row_mut(r).copy_from_slice(&row[..ca]);
                    gb.row_mut(r).copy_from_slice(&row[ca..]);
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    let slice = g.data[start * g.cols..(start + rows) * g.cols].to_vec();
                    acc(grads, p, Matrix::from_vec(rows, g.cols, slice));
                    start += rows;
                }
            }
            Op::GatherRows(a, rows) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows, av.cols);
                for (k, &r) in rows.iter().enumerate() {
                    for (s, v) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                        *s += v;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Conv1d { x, w, b, kernel, dilation } => {
                let (gx, gw, gb) = conv1d_backward(self.value(*x), self.value(*w), &g, *kernel, *dilation);
                acc(grads, *x, gx);
                acc(grads, *w, gw);
                acc(grads, *b, gb);
            }
            Op::Frames { x, row, hop, window } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows, xv.cols);
                let target = gx.row_mut(*row);
                for d in 0..g.rows {
                    let gr = g.row(d);
                    for (k, wv) in window.iter().enumerate() {
                        if let Some(t) = target.get_mut(d * hop + k) {
                            *t += gr[k] * wv;
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::DftMag { x, spectrum } => {
                // d|S_f|/dx_n = Re(conj(S_f) e^{-2 pi i f n / N}) / |S_f|, so the
                // input gradient is Re(sum_f v_f e^{+2 pi i f n / N}) with
                // v_f = g_f S_f / |S_f|. A real inverse FFT doubles the interior
                // bins, hence the halving below.
                let n = self.value(*x).cols;
                let bins = g.cols;
                let ifft = RealFftCache::inverse(n);
                let mut scratch = ifft.make_scratch_vec();
                let mut half = vec![Complex::new(0.0, 0.0); bins];
                let mut gx = Matrix::zeros(g.rows, n);
                for ((spec, gr), out) in spectrum.chunks(bins).zip(g.data.chunks(bins)).zip(gx.data.chunks_mut(n)) {
                    for (f, (h, (z, gv))) in half.iter_mut().zip(spec.iter().zip(gr)).enumerate() {
                        let mag = (z.re * z.re + z.im * z.im).sqrt();
                        // Subgradient 0 at exactly zero magnitude.
                        *h = if mag > 0.0 { *z * (gv / mag) } else { Complex::new(0.0, 0.0) };
                        if f == 0 || 2 * f == n {
                            *h = Complex::new(h.re, 0.0);
                        } else {
                            *h = *h * 0.5;
                        }
                    }
                    ifft.process_with_scratch(&mut half, out, &mut scratch).expect("fft buffer sizes");
                }
                acc(grads, *x, gx);
            }
            Op::Square(a) => {
                let av = self.value(*a);
                let mut ga = g;
                for (gv, x) in ga.data.iter_mut().zip(&av.data) {
                    *gv *= 2.0 * x;
                }
                acc(grads, *a, ga);
            }
            Op::RowSums(a) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    let gv = g.data[r];
                    ga.row_mut(r).iter_mut().for_each(|s| *s = gv);
                }
                acc(grads, *a, ga);
            }
            Op::RevCumsum(a) => {
                let mut ga = g;
                let cols = ga.cols;
                for c in 0..cols {
                    let mut run = 0.0;
                    for r in 0..ga.rows {
                        run += ga.data[r * cols + c];
                        ga.data[r * cols + c] = run;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Log10(a, eps) => {
                let av = self.value(*a);
                let mut ga = g;
                for (gv, x) in ga.data.iter_mut().zip(&av.data) {
                    *gv /= (x + eps) * LN_10;
                }
                acc(grads, *a, ga);
            }
            Op::AbsDiffMean(a, target) => {
                let av = self.value(*a);
                let scale = g.data[0] / av.data.len() as f64;
                let data = av
                    .data
                    .iter()
                    .zip(&target.data)
                    .map(|(x, t)| {
                        let d = x - t;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(grads, *a, Matrix::from_vec(av.rows, av.cols, data));
            }
            Op::Scale(a, s) => {
                let mut ga = g;
                for v in &mut ga.data {
                    *v *= s;
                }
                acc(grads, *a, ga);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    acc(grads, p, g.clone());
                }
            }
        }
    }
}

#[inline]
pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn conv_pad(kernel: usize, dilation: usize) -> usize {
    (kernel - 1) * dilation / 2
}

pub(crate) fn conv1d_forward(x: &Matrix, w: &Matrix, b: &Matrix, kernel: usize, dilation: usize) -> Matrix {
    let (c_in, len) = x.shape();
    let c_out = w.rows;
    assert_eq!(w.cols, c_in * kernel, "conv weight shape");
    assert_eq!(b.shape(), (c_out, 1), "conv bias shape");
    let pad = conv_pad(kernel, dilation) as isize;
    let mut out = Matrix::zeros(c_out, len);
    for o in 0..c_out {
        let orow = &mut out.data[o * len..(o + 1) * len];
        orow.iter_mut().for_each(|v| *v = b.data[o]);
        for i in 0..c_in {
            let xrow = x.row(i);
            for k in 0..kernel {
                let wv = w.data[o * c_in * kernel + i * kernel + k];
                let shift = (k * dilation) as isize - pad;
                let (t0, t1) = valid_range(len, shift);
                for t in t0..t1 {
                    orow[t] += wv * xrow[(t as isize + shift) as usize];
                }
            }
        }
    }
    out
}

/// Output indices `t` for which `t + shift` lies inside `0..len`.
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

fn conv1d_backward(x: &Matrix, w: &Matrix, g: &Matrix, kernel: usize, dilation: usize) -> (Matrix, Matrix, Matrix) {
    let (c_in, len) = x.shape();
    let c_out = w.rows;
    let pad = conv_pad(kernel, dilation) as isize;
    let mut gx = Matrix::zeros(c_in, len);
    let mut gw = Matrix::zeros(w.rows, w.cols);
    let mut gb = Matrix::zeros(c_out, 1);
    for o in 0..c_out {
        let grow = g.row(o);
        gb.data[o] = grow.iter().sum();
        for i in 0..c_in {
            let xrow = x.row(i);
            for k in 0..kernel {
                let widx = o * c_in * kernel + i * kernel + k;
                let wv = w.data[widx];
                let shift = (k * dilation) as isize - pad;
                let (t0, t1) = valid_range(len, shift);
                let mut dw = 0.0;
                let gxrow = &mut gx.data[i * len..(i + 1) * len];
                for t in t0..t1 {
                    let src = (t as isize + shift) as usize;
                    dw += grow[t] * xrow[src];
                    gxrow[src] += wv * grow[t];
                }
                gw.data[widx] += dw;
            }
        }
    }
    (gx, gw, gb)
}
