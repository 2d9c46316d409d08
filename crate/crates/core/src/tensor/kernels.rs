//! Raw numeric kernels. Every function is a pure map from input tensors to a
//! new tensor and fails on non-finite output.

use super::{finite, Result, Shape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    /// Elementwise maximum; ties resolve to the left operand.
    Max,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Max => "max",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
        }
    }
}

/// `op(a, b)` elementwise. `b` may also be a one-element tensor, which is
/// broadcast over `a`.
pub fn elementwise(kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out: Vec<f64> = if a.shape() == b.shape() {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| kind.apply(x, y))
            .collect()
    } else if b.numel() == 1 {
        let y = b.item();
        a.data().iter().map(|&x| kind.apply(x, y)).collect()
    } else {
        return Err(TensorError::ShapeMismatch {
            op: kind.name(),
            lhs: a.shape().clone(),
            rhs: b.shape().clone(),
        });
    };
    finite(kind.name(), Tensor::raw(a.shape().clone(), out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(BinaryKind::Add, a, b)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(BinaryKind::Sub, a, b)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(BinaryKind::Mul, a, b)
}

pub fn maximum(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(BinaryKind::Max, a, b)
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    finite("scale", a.map(|v| v * c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryKind {
    Relu,
    Abs,
    Sqrt,
    Recip,
    Exp,
    Ln,
}

impl UnaryKind {
    pub fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Abs => "abs",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Recip => "recip",
            UnaryKind::Exp => "exp",
            UnaryKind::Ln => "ln",
        }
    }
}

pub fn unary(kind: UnaryKind, a: &Tensor) -> Result<Tensor> {
    let out = match kind {
        UnaryKind::Relu => a.map(|v| if v > 0.0 { v } else { 0.0 }),
        UnaryKind::Abs => a.map(f64::abs),
        UnaryKind::Sqrt => {
            if a.data().iter().any(|&v| v < 0.0) {
                return Err(TensorError::Invalid {
                    op: "sqrt",
                    msg: "negative argument".into(),
                });
            }
            a.map(f64::sqrt)
        }
        UnaryKind::Recip => a.map(|v| 1.0 / v),
        UnaryKind::Exp => a.map(f64::exp),
        UnaryKind::Ln => a.map(f64::ln),
    };
    finite(kind.name(), out)
}

/// Sign with `sign(0) = 0`.
pub fn sign(a: &Tensor) -> Tensor {
    a.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Indicator of strictly positive entries (the ReLU derivative, 0 at 0).
pub fn positive_mask(a: &Tensor) -> Tensor {
    a.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            got: t.shape().clone(),
        });
    }
    Ok(())
}

// c[m x n] += a[m x k] * b[k x n]
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[m x n] += a[m x k] * b[n x k]^T
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

// c[m x n] += a[k x m]^T * b[k x n]
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let (k2, n) = (b.dims()[0], b.dims()[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().clone(),
            rhs: b.shape().clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out);
    finite("matmul", Tensor::raw(Shape(vec![m, n]), out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    expect_rank("transpose", a, 2)?;
    let (m, n) = (a.dims()[0], a.dims()[1]);
    let src = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Ok(Tensor::raw(Shape(vec![n, m]), out))
}

/// Geometry of a 2-D convolution, shared by the forward kernel and both
/// adjoint kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry { stride, padding }
    }

    /// floor((extent + 2*padding - k) / stride) + 1, or None when nonpositive.
    pub fn out_extent(&self, extent: usize, k: usize) -> Option<usize> {
        let padded = extent + 2 * self.padding;
        if padded < k || self.stride == 0 {
            None
        } else {
            Some((padded - k) / self.stride + 1)
        }
    }
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn conv_dims(
    op: &'static str,
    input: &Shape,
    kernel: &Shape,
    geom: ConvGeometry,
) -> Result<ConvDims> {
    let (n, cin, h, w) = input.nchw();
    let (cout, kcin, kh, kw) = kernel.nchw();
    if kcin != cin {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: input.clone(),
            rhs: kernel.clone(),
        });
    }
    let (ho, wo) = match (geom.out_extent(h, kh), geom.out_extent(w, kw)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(TensorError::Invalid {
                op,
                msg: format!("nonpositive output extent for input {input} kernel {kernel}"),
            })
        }
    };
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho,
        wo,
    })
}

fn im2col(d: &ConvDims, geom: ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let l = d.col_cols();
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for a in 0..d.kh {
            for b in 0..d.kw {
                let row = (ci * d.kh + a) * d.kw + b;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..d.ho {
                    let iy = (oy * geom.stride + a) as isize - geom.padding as isize;
                    for ox in 0..d.wo {
                        let ix = (ox * geom.stride + b) as isize - geom.padding as isize;
                        dst[oy * d.wo + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < d.h
                            && (ix as usize) < d.w
                        {
                            plane[iy as usize * d.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(d: &ConvDims, geom: ConvGeometry, cols: &[f64], x: &mut [f64]) {
    let l = d.col_cols();
    for ci in 0..d.cin {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for a in 0..d.kh {
            for b in 0..d.kw {
                let row = (ci * d.kh + a) * d.kw + b;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..d.ho {
                    let iy = (oy * geom.stride + a) as isize - geom.padding as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for ox in 0..d.wo {
                        let ix = (ox * geom.stride + b) as isize - geom.padding as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            plane[iy as usize * d.w + ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip). Input (N,Cin,H,W), kernel
/// (Cout,Cin,kh,kw).
pub fn conv2d(input: &Tensor, kernel: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    expect_rank("conv2d", input, 4)?;
    expect_rank("conv2d", kernel, 4)?;
    let d = conv_dims("conv2d", input.shape(), kernel.shape(), geom)?;
    let (k, l) = (d.col_rows(), d.col_cols());
    let mut cols = vec![0.0; k * l];
    let mut out = vec![0.0; d.n * d.cout * l];
    let x = input.data();
    for b in 0..d.n {
        im2col(&d, geom, &x[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w], &mut cols);
        gemm_nn(
            d.cout,
            k,
            l,
            kernel.data(),
            &cols,
            &mut out[b * d.cout * l..(b + 1) * d.cout * l],
        );
    }
    finite(
        "conv2d",
        Tensor::raw(Shape(vec![d.n, d.cout, d.ho, d.wo]), out),
    )
}

/// Adjoint of [`conv2d`] with respect to its input: maps an output-shaped
/// cotangent back to an input of spatial extent `input_hw`.
pub fn conv2d_input_grad(
    grad_out: &Tensor,
    kernel: &Tensor,
    input_hw: (usize, usize),
    geom: ConvGeometry,
) -> Result<Tensor> {
    expect_rank("conv2d_input_grad", grad_out, 4)?;
    expect_rank("conv2d_input_grad", kernel, 4)?;
    let (n, gc, gh, gw) = grad_out.shape().nchw();
    let cin = kernel.dims()[1];
    let input_shape = Shape(vec![n, cin, input_hw.0, input_hw.1]);
    let d = conv_dims("conv2d_input_grad", &input_shape, kernel.shape(), geom)?;
    if gc != d.cout || gh != d.ho || gw != d.wo {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_input_grad",
            lhs: grad_out.shape().clone(),
            rhs: kernel.shape().clone(),
        });
    }
    let (k, l) = (d.col_rows(), d.col_cols());
    let mut cols = vec![0.0; k * l];
    let mut out = vec![0.0; input_shape.numel()];
    let g = grad_out.data();
    for b in 0..n {
        cols.iter_mut().for_each(|v| *v = 0.0);
        gemm_tn(k, d.cout, l, kernel.data(), &g[b * d.cout * l..(b + 1) * d.cout * l], &mut cols);
        col2im(
            &d,
            geom,
            &cols,
            &mut out[b * cin * d.h * d.w..(b + 1) * cin * d.h * d.w],
        );
    }
    finite("conv2d_input_grad", Tensor::raw(input_shape, out))
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_weight_grad(
    input: &Tensor,
    grad_out: &Tensor,
    kernel_hw: (usize, usize),
    geom: ConvGeometry,
) -> Result<Tensor> {
    expect_rank("conv2d_weight_grad", input, 4)?;
    expect_rank("conv2d_weight_grad", grad_out, 4)?;
    let (n, cin, _, _) = input.shape().nchw();
    let cout = grad_out.dims()[1];
    let kernel_shape = Shape(vec![cout, cin, kernel_hw.0, kernel_hw.1]);
    let d = conv_dims("conv2d_weight_grad", input.shape(), &kernel_shape, geom)?;
    if grad_out.dims() != [n, cout, d.ho, d.wo] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_weight_grad",
            lhs: input.shape().clone(),
            rhs: grad_out.shape().clone(),
        });
    }
    let (k, l) = (d.col_rows(), d.col_cols());
    let mut cols = vec![0.0; k * l];
    let mut out = vec![0.0; cout * k];
    let x = input.data();
    let g = grad_out.data();
    for b in 0..n {
        im2col(&d, geom, &x[b * cin * d.h * d.w..(b + 1) * cin * d.h * d.w], &mut cols);
        gemm_nt(cout, l, k, &g[b * cout * l..(b + 1) * cout * l], &cols, &mut out);
    }
    finite("conv2d_weight_grad", Tensor::raw(kernel_shape, out))
}

/// Nearest-neighbour upsampling by 2 in both spatial axes.
pub fn upsample2x(input: &Tensor) -> Result<Tensor> {
    expect_rank("upsample2x", input, 4)?;
    let (n, c, h, w) = input.shape().nchw();
    let (h2, w2) = (2 * h, 2 * w);
    let src = input.data();
    let mut out = vec![0.0; n * c * h2 * w2];
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let o = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for y in 0..h2 {
            for x in 0..w2 {
                o[y * w2 + x] = s[(y / 2) * w + x / 2];
            }
        }
    }
    Ok(Tensor::raw(Shape(vec![n, c, h2, w2]), out))
}

/// Sum over non-overlapping 2x2 blocks; the exact adjoint of [`upsample2x`].
pub fn block_sum2x(input: &Tensor) -> Result<Tensor> {
    expect_rank("block_sum2x", input, 4)?;
    let (n, c, h, w) = input.shape().nchw();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Invalid {
            op: "block_sum2x",
            msg: format!("odd spatial extent in {}", input.shape()),
        });
    }
    let (h2, w2) = (h / 2, w / 2);
    let src = input.data();
    let mut out = vec![0.0; n * c * h2 * w2];
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let o = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for y in 0..h {
            for x in 0..w {
                o[(y / 2) * w2 + x / 2] += s[y * w + x];
            }
        }
    }
    finite("block_sum2x", Tensor::raw(Shape(vec![n, c, h2, w2]), out))
}

pub fn avg_pool2x(input: &Tensor) -> Result<Tensor> {
    scale(&block_sum2x(input)?, 0.25)
}

/// Spatial mean per (sample, channel): (N,C,H,W) -> (N,C).
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    expect_rank("global_avg_pool", input, 4)?;
    let (n, c, h, w) = input.shape().nchw();
    let hw = h * w;
    let out = input
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    finite("global_avg_pool", Tensor::raw(Shape(vec![n, c]), out))
}

/// Adjoint of [`global_avg_pool`]: (N,C) -> (N,C,H,W) with value / (H*W).
pub fn spread_pool(input: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    expect_rank("spread_pool", input, 2)?;
    let (n, c) = (input.dims()[0], input.dims()[1]);
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c * hw);
    for &v in input.data() {
        out.extend(std::iter::repeat_n(v / hw as f64, hw));
    }
    Ok(Tensor::raw(Shape(vec![n, c, h, w]), out))
}

fn channel_layout(op: &'static str, shape: &Shape) -> Result<(usize, usize, usize)> {
    match shape.rank() {
        2 => Ok((shape.dims()[0], shape.dims()[1], 1)),
        4 => {
            let (n, c, h, w) = shape.nchw();
            Ok((n, c, h * w))
        }
        _ => Err(TensorError::Rank {
            op,
            expected: 4,
            got: shape.clone(),
        }),
    }
}

/// Sum over every axis except the channel axis (axis 1): rank 2 or 4 -> (C).
pub fn channel_sum(input: &Tensor) -> Result<Tensor> {
    let (n, c, inner) = channel_layout("channel_sum", input.shape())?;
    let mut out = vec![0.0; c];
    let src = input.data();
    for b in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let base = (b * c + ch) * inner;
            *acc += src[base..base + inner].iter().sum::<f64>();
        }
    }
    finite("channel_sum", Tensor::raw(Shape(vec![c]), out))
}

/// Broadcast a per-channel vector (C) to `shape` (rank 2 or 4, channel axis 1).
pub fn channel_broadcast(input: &Tensor, shape: &Shape) -> Result<Tensor> {
    let (n, c, inner) = channel_layout("channel_broadcast", shape)?;
    if input.rank() != 1 || input.dims()[0] != c {
        return Err(TensorError::ShapeMismatch {
            op: "channel_broadcast",
            lhs: input.shape().clone(),
            rhs: shape.clone(),
        });
    }
    let mut out = Vec::with_capacity(shape.numel());
    for _ in 0..n {
        for &v in input.data() {
            out.extend(std::iter::repeat_n(v, inner));
        }
    }
    Ok(Tensor::raw(shape.clone(), out))
}

/// Concatenate along axis 1. Inputs must agree on every other extent.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs.first().ok_or(TensorError::Invalid {
        op: "concat_channels",
        msg: "no inputs".into(),
    })?;
    let rank = first.rank();
    if rank < 2 {
        return Err(TensorError::Rank {
            op: "concat_channels",
            expected: 2,
            got: first.shape().clone(),
        });
    }
    let n = first.dims()[0];
    let inner: usize = first.dims()[2..].iter().product();
    let mut total_c = 0;
    for t in inputs {
        if t.rank() != rank || t.dims()[0] != n || t.dims()[2..] != first.dims()[2..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: first.shape().clone(),
                rhs: t.shape().clone(),
            });
        }
        total_c += t.dims()[1];
    }
    let mut out = Vec::with_capacity(n * total_c * inner);
    for b in 0..n {
        for t in inputs {
            let block = t.dims()[1] * inner;
            out.extend_from_slice(&t.data()[b * block..(b + 1) * block]);
        }
    }
    let mut dims = first.dims().to_vec();
    dims[1] = total_c;
    Ok(Tensor::raw(Shape(dims), out))
}

/// Channels `[start, start + len)` of a rank >= 2 tensor.
pub fn slice_channels(input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if input.rank() < 2 || start + len > input.dims()[1] || len == 0 {
        return Err(TensorError::Invalid {
            op: "slice_channels",
            msg: format!("range {start}+{len} out of bounds for {}", input.shape()),
        });
    }
    let n = input.dims()[0];
    let c = input.dims()[1];
    let inner: usize = input.dims()[2..].iter().product();
    let mut out = Vec::with_capacity(n * len * inner);
    for b in 0..n {
        let base = (b * c + start) * inner;
        out.extend_from_slice(&input.data()[base..base + len * inner]);
    }
    let mut dims = input.dims().to_vec();
    dims[1] = len;
    Ok(Tensor::raw(Shape(dims), out))
}

/// Place `input` at channel offset `start` inside a zero tensor with `total`
/// channels; the adjoint of [`slice_channels`].
pub fn embed_channels(input: &Tensor, start: usize, total: usize) -> Result<Tensor> {
    if input.rank() < 2 || start + input.dims()[1] > total {
        return Err(TensorError::Invalid {
            op: "embed_channels",
            msg: format!("cannot embed {} at {start} into {total} channels", input.shape()),
        });
    }
    let n = input.dims()[0];
    let len = input.dims()[1];
    let inner: usize = input.dims()[2..].iter().product();
    let mut dims = input.dims().to_vec();
    dims[1] = total;
    let mut out = vec![0.0; n * total * inner];
    for b in 0..n {
        let dst = (b * total + start) * inner;
        let src = b * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&input.data()[src..src + len * inner]);
    }
    Ok(Tensor::raw(Shape(dims), out))
}

pub fn sum_all(input: &Tensor) -> Result<Tensor> {
    finite("sum_all", Tensor::scalar(input.data().iter().sum()))
}

/// Broadcast a one-element tensor to `shape`.
pub fn expand(input: &Tensor, shape: &Shape) -> Result<Tensor> {
    if input.numel() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "expand",
            lhs: input.shape().clone(),
            rhs: shape.clone(),
        });
    }
    Ok(Tensor::full(shape, input.item()))
}

/// Vector norm orders supported throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Norm {
    L1,
    L2,
    Inf,
}

/// Norm of all elements, flattened.
pub fn lp_norm(input: &Tensor, norm: Norm) -> f64 {
    let d = input.data();
    match norm {
        Norm::L1 => d.iter().map(|v| v.abs()).sum(),
        Norm::L2 => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
        Norm::Inf => d.iter().fold(0.0, |m, v| m.max(v.abs())),
    }
}
