//! Forward kernels on plain tensors. The tape in [`crate::tape`] records these
//! and composes their adjoints from the same set.

use crate::element::{gemm, Element, MatView};
use crate::error::{Result, TensorError};
use crate::tensor::{numel, strides, Tensor};

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::Axis { op, axis, rank })
    } else {
        Ok(())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Right-aligned broadcast of batch dims (each pair equal, or one of them 1).
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(mismatch(op, a, b)),
        };
    }
    Ok(out)
}

/// Offset (in units of matrices) into a batch of shape `src` for the
/// broadcast multi-index `idx` over `out`.
fn broadcast_offset(idx: &[usize], out: &[usize], src: &[usize]) -> usize {
    let lead = out.len() - src.len();
    let mut off = 0;
    for (j, &d) in src.iter().enumerate() {
        let i = if d == 1 { 0 } else { idx[lead + j] };
        off = off * d + i;
    }
    off
}

fn unravel(mut linear: usize, shape: &[usize], idx: &mut [usize]) {
    for i in (0..shape.len()).rev() {
        idx[i] = linear % shape[i];
        linear /= shape[i];
    }
}

/// Batched matrix product with optional transposition of either operand's
/// last two axes. Leading batch dims broadcast.
pub fn matmul_t<E: Element>(
    a: &Tensor<E>,
    trans_a: bool,
    b: &Tensor<E>,
    trans_b: bool,
) -> Result<Tensor<E>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch("matmul", a.shape(), b.shape()));
    }
    let (ar, br) = (a.rank(), b.rank());
    let (a0, a1) = (a.dim(ar - 2), a.dim(ar - 1));
    let (b0, b1) = (b.dim(br - 2), b.dim(br - 1));
    let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
    let (kb, p) = if trans_b { (b1, b0) } else { (b0, b1) };
    if k != kb {
        return Err(mismatch("matmul", a.shape(), b.shape()));
    }
    let batch_a = &a.shape()[..ar - 2];
    let batch_b = &b.shape()[..br - 2];
    let batch = broadcast_shape("matmul", batch_a, batch_b)?;

    let base_a = MatView::contiguous(a0, a1);
    let base_b = MatView::contiguous(b0, b1);
    let av = if trans_a { base_a.t() } else { base_a };
    let bv = if trans_b { base_b.t() } else { base_b };

    let mut out_shape = batch.clone();
    out_shape.extend_from_slice(&[m, p]);

    // A plain `[.., M, K] @ [K, P]` folds the whole lhs batch into one product.
    if batch_b.is_empty() && !trans_a && batch == batch_a {
        let rows = numel(batch_a) * m;
        let mut out = vec![E::zero(); rows * p];
        gemm(
            E::one(),
            a.data(),
            MatView::contiguous(rows, k),
            b.data(),
            bv,
            E::zero(),
            &mut out,
            MatView::contiguous(rows, p),
        );
        return Ok(Tensor::from_parts(out_shape, out));
    }

    let nb = numel(&batch);
    let mut out = vec![E::zero(); nb * m * p];
    let mut idx = vec![0; batch.len()];
    let (sa, sb, so) = (a0 * a1, b0 * b1, m * p);
    for bi in 0..nb {
        unravel(bi, &batch, &mut idx);
        let oa = broadcast_offset(&idx, &batch, batch_a) * sa;
        let ob = broadcast_offset(&idx, &batch, batch_b) * sb;
        gemm(
            E::one(),
            &a.data()[oa..oa + sa],
            av,
            &b.data()[ob..ob + sb],
            bv,
            E::zero(),
            &mut out[bi * so..(bi + 1) * so],
            MatView::contiguous(m, p),
        );
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    matmul_t(a, false, b, false)
}

/// Sums `x` down to `target`, which must be right-aligned broadcast-compatible.
pub fn sum_to_shape<E: Element>(x: &Tensor<E>, target: &[usize]) -> Result<Tensor<E>> {
    if x.shape() == target {
        return Ok(x.clone());
    }
    let full = broadcast_shape("sum_to_shape", x.shape(), target)?;
    if full != x.shape() {
        return Err(mismatch("sum_to_shape", x.shape(), target));
    }
    // Suffix case: sum over leading rows.
    let tn = numel(target);
    let is_suffix = target.len() <= x.rank()
        && x.shape()[x.rank() - target.len()..] == *target;
    let mut out = vec![E::zero(); tn];
    if is_suffix {
        for chunk in x.data().chunks_exact(tn.max(1)) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o = *o + v;
            }
        }
        return Ok(Tensor::from_parts(target.to_vec(), out));
    }
    let mut idx = vec![0; x.rank()];
    for (lin, &v) in x.data().iter().enumerate() {
        unravel(lin, x.shape(), &mut idx);
        out[broadcast_offset(&idx, x.shape(), target)] =
            out[broadcast_offset(&idx, x.shape(), target)] + v;
    }
    Ok(Tensor::from_parts(target.to_vec(), out))
}

/// `x op y` where `y`'s shape is a suffix of `x`'s; `y` repeats over the leading dims.
pub fn bcast_suffix<E: Element>(
    x: &Tensor<E>,
    y: &Tensor<E>,
    op: &'static str,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    let (xr, yr) = (x.rank(), y.rank());
    if yr > xr || x.shape()[xr - yr..] != *y.shape() {
        return Err(mismatch(op, x.shape(), y.shape()));
    }
    let n = y.numel().max(1);
    let mut out = Vec::with_capacity(x.numel());
    for chunk in x.data().chunks_exact(n) {
        out.extend(chunk.iter().zip(y.data()).map(|(&a, &b)| f(a, b)));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn permute<E: Element>(x: &Tensor<E>, axes: &[usize]) -> Result<Tensor<E>> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if axes.len() != r {
        return Err(TensorError::InvalidShape {
            op: "permute",
            shape: x.shape().to_vec(),
            reason: format!("axes {axes:?} do not match rank"),
        });
    }
    for &a in axes {
        check_axis("permute", a, r)?;
        if seen[a] {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: x.shape().to_vec(),
                reason: format!("repeated axis in {axes:?}"),
            });
        }
        seen[a] = true;
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.dim(a)).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(Tensor::from_parts(out_shape, out));
    }
    let src = x.data();
    let inner = *out_shape.last().unwrap_or(&1);
    let inner_stride = *src_strides.last().unwrap_or(&1);
    let outer_shape = &out_shape[..r.saturating_sub(1)];
    let mut idx = vec![0usize; outer_shape.len()];
    let mut base = 0usize;
    let outer = numel(outer_shape);
    for _ in 0..outer {
        for j in 0..inner {
            out.push(src[base + j * inner_stride]);
        }
        // odometer increment over the outer axes
        for ax in (0..outer_shape.len()).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < outer_shape[ax] {
                break;
            }
            base -= src_strides[ax] * outer_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

pub fn concat<E: Element>(xs: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = xs.first().ok_or_else(|| TensorError::InvalidShape {
        op: "concat",
        shape: vec![],
        reason: "no inputs".into(),
    })?;
    check_axis("concat", axis, first.rank())?;
    let mut total = 0;
    for x in xs {
        let same_rank = x.rank() == first.rank();
        let same_other = same_rank
            && x.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same_other {
            return Err(mismatch("concat", first.shape(), x.shape()));
        }
        total += x.dim(axis);
    }
    let (outer, inner) = outer_inner(first.shape(), axis);
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for x in xs {
            let len = x.dim(axis) * inner;
            out.extend_from_slice(&x.data()[o * len..(o + 1) * len]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn slice<E: Element>(x: &Tensor<E>, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
    check_axis("slice", axis, x.rank())?;
    if start + len > x.dim(axis) {
        return Err(TensorError::InvalidShape {
            op: "slice",
            shape: x.shape().to_vec(),
            reason: format!("range {start}..{} exceeds axis {axis}", start + len),
        });
    }
    let (outer, inner) = outer_inner(x.shape(), axis);
    let d = x.dim(axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * d + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of [`slice`]: embeds `g` into zeros of `full` shape.
pub fn unslice<E: Element>(g: &Tensor<E>, full: &[usize], axis: usize, start: usize) -> Tensor<E> {
    let (outer, inner) = outer_inner(full, axis);
    let d = full[axis];
    let len = g.dim(axis);
    let mut out = vec![E::zero(); numel(full)];
    for o in 0..outer {
        let dst = (o * d + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Tensor::from_parts(full.to_vec(), out)
}

/// Repeats a size-1 axis `n` times.
pub fn expand<E: Element>(x: &Tensor<E>, axis: usize, n: usize) -> Result<Tensor<E>> {
    check_axis("expand", axis, x.rank())?;
    if x.dim(axis) != 1 {
        return Err(TensorError::InvalidShape {
            op: "expand",
            shape: x.shape().to_vec(),
            reason: format!("axis {axis} must have size 1"),
        });
    }
    let (outer, inner) = outer_inner(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = n;
    let mut out = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        let row = &x.data()[o * inner..(o + 1) * inner];
        for _ in 0..n {
            out.extend_from_slice(row);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Sum over `axis`, keeping it with size 1.
pub fn sum_axis_keepdim<E: Element>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    check_axis("sum_axis", axis, x.rank())?;
    let (outer, inner) = outer_inner(x.shape(), axis);
    let d = x.dim(axis);
    let mut out = vec![E::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for k in 0..d {
            let src = &x.data()[(o * d + k) * inner..(o * d + k + 1) * inner];
            for (a, &b) in dst.iter_mut().zip(src) {
                *a = *a + b;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Ok(Tensor::from_parts(shape, out))
}

fn last_dim(x: &Tensor<impl Element>, op: &'static str) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(TensorError::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "needs a non-empty last axis".into(),
        }),
    }
}

pub fn softmax_last<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let d = last_dim(x, "softmax")?;
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(d) {
        softmax_row(row);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn softmax_row<E: Element>(row: &mut [E]) {
    let max = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut sum = E::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = E::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Layer normalization over the last axis without affine parameters.
/// Returns the normalized output and the per-row reciprocal std.
pub fn layer_norm_last<E: Element>(x: &Tensor<E>, eps: f64) -> Result<(Tensor<E>, Vec<E>)> {
    let d = last_dim(x, "layer_norm")?;
    let inv_d = E::one() / E::of(d as f64);
    let eps = E::of(eps);
    let mut out = x.to_vec();
    let mut rstd = Vec::with_capacity(x.numel() / d);
    for row in out.chunks_exact_mut(d) {
        let mean = row.iter().copied().sum::<E>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_d;
        let r = E::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        rstd.push(r);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), rstd))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

fn conv_out(size: usize, k: usize, spec: Conv2dSpec) -> Option<usize> {
    let padded = size + 2 * spec.padding;
    if padded < k || spec.stride == 0 {
        None
    } else {
        Some((padded - k) / spec.stride + 1)
    }
}

/// Unfolds one image `[C, H, W]` into columns `[C*kh*kw, Ho*Wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    img: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    ho: usize,
    wo: usize,
    cols: &mut [E],
) {
    let p = spec.padding as isize;
    let s = spec.stride as isize;
    let mut row = 0;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = oi as isize * s + ki as isize - p;
                    for oj in 0..wo {
                        let jj = oj as isize * s + kj as isize - p;
                        dst[oi * wo + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                            plane[ii as usize * w + jj as usize]
                        } else {
                            E::zero()
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2-D cross-correlation: `x [B, Cin, H, W]`, `w [Cout, Cin, kh, kw]`, optional `bias [Cout]`.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: Conv2dSpec,
) -> Result<Tensor<E>> {
    if x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1) {
        return Err(mismatch("conv2d", x.shape(), weight.shape()));
    }
    let (b, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, kh, kw) = (weight.dim(0), weight.dim(2), weight.dim(3));
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(mismatch("conv2d bias", weight.shape(), bias.shape()));
        }
    }
    let (ho, wo) = match (conv_out(h, kh, spec), conv_out(w, kw, spec)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: x.shape().to_vec(),
                reason: format!("kernel {kh}x{kw} with {spec:?} does not fit"),
            })
        }
    };
    let kdim = cin * kh * kw;
    let mut cols = vec![E::zero(); kdim * ho * wo];
    let mut out = vec![E::zero(); b * cout * ho * wo];
    for bi in 0..b {
        im2col(
            &x.data()[bi * cin * h * w..(bi + 1) * cin * h * w],
            cin,
            h,
            w,
            kh,
            kw,
            spec,
            ho,
            wo,
            &mut cols,
        );
        let dst = &mut out[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_exact_mut(ho * wo).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        gemm(
            E::one(),
            weight.data(),
            MatView::contiguous(cout, kdim),
            &cols,
            MatView::contiguous(kdim, ho * wo),
            if bias.is_some() { E::one() } else { E::zero() },
            dst,
            MatView::contiguous(cout, ho * wo),
        );
    }
    Ok(Tensor::from_parts(vec![b, cout, ho, wo], out))
}

/// Weight gradient of [`conv2d`]: `sum_b g[b] @ cols(x[b])^T`.
pub fn conv2d_weight_grad<E: Element>(
    x: &Tensor<E>,
    g: &Tensor<E>,
    kernel: (usize, usize),
    spec: Conv2dSpec,
) -> Tensor<E> {
    let (b, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, ho, wo) = (g.dim(1), g.dim(2), g.dim(3));
    let (kh, kw) = kernel;
    let kdim = cin * kh * kw;
    let mut cols = vec![E::zero(); kdim * ho * wo];
    let mut out = vec![E::zero(); cout * kdim];
    for bi in 0..b {
        im2col(
            &x.data()[bi * cin * h * w..(bi + 1) * cin * h * w],
            cin,
            h,
            w,
            kh,
            kw,
            spec,
            ho,
            wo,
            &mut cols,
        );
        gemm(
            E::one(),
            &g.data()[bi * cout * ho * wo..(bi + 1) * cout * ho * wo],
            MatView::contiguous(cout, ho * wo),
            &cols,
            MatView::contiguous(kdim, ho * wo).t(),
            E::one(),
            &mut out,
            MatView::contiguous(cout, kdim),
        );
    }
    Tensor::from_parts(vec![cout, cin, kh, kw], out)
}

/// Input gradient of [`conv2d`] as a stride-1 correlation of the dilated
/// output gradient with the spatially flipped, channel-swapped kernel.
pub fn conv2d_input_grad<E: Element>(
    g: &Tensor<E>,
    weight: &Tensor<E>,
    input_hw: (usize, usize),
    spec: Conv2dSpec,
) -> Result<Tensor<E>> {
    let (b, cout, ho, wo) = (g.dim(0), g.dim(1), g.dim(2), g.dim(3));
    let (cin, kh, kw) = (weight.dim(1), weight.dim(2), weight.dim(3));
    let (h, w) = input_hw;
    if spec.padding >= kh || spec.padding >= kw {
        return Err(TensorError::InvalidShape {
            op: "conv2d backward",
            shape: weight.shape().to_vec(),
            reason: format!("padding {} must be smaller than the kernel", spec.padding),
        });
    }
    let s = spec.stride;
    // Trailing rows the last window skips stay zero in the dilated gradient.
    let (hd, wd) = (h + 2 * spec.padding - kh + 1, w + 2 * spec.padding - kw + 1);
    let mut dil = vec![E::zero(); b * cout * hd * wd];
    for plane in 0..b * cout {
        for i in 0..ho {
            for j in 0..wo {
                dil[plane * hd * wd + i * s * wd + j * s] = g.data()[plane * ho * wo + i * wo + j];
            }
        }
    }
    let dil = Tensor::from_parts(vec![b, cout, hd, wd], dil);
    let mut flipped = vec![E::zero(); cin * cout * kh * kw];
    for co in 0..cout {
        for ci in 0..cin {
            for i in 0..kh {
                for j in 0..kw {
                    flipped[((ci * cout + co) * kh + (kh - 1 - i)) * kw + (kw - 1 - j)] =
                        weight.data()[((co * cin + ci) * kh + i) * kw + j];
                }
            }
        }
    }
    let flipped = Tensor::from_parts(vec![cin, cout, kh, kw], flipped);
    // Square kernels only share one padding value; rectangular ones would need two.
    if kh != kw {
        return Err(TensorError::InvalidShape {
            op: "conv2d backward",
            shape: weight.shape().to_vec(),
            reason: "kernel must be square".into(),
        });
    }
    let full = conv2d(
        &dil,
        &flipped,
        None,
        Conv2dSpec {
            stride: 1,
            padding: kh - 1 - spec.padding,
        },
    )?;
    debug_assert_eq!((full.dim(2), full.dim(3)), (h, w));
    Ok(full)
}

fn spatial(x: &Tensor<impl Element>, op: &'static str) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(TensorError::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "needs trailing [H, W] axes".into(),
        });
    }
    let r = x.rank();
    Ok((numel(&x.shape()[..r - 2]), x.dim(r - 2), x.dim(r - 1)))
}

/// Area (box) downsample of the trailing `[H, W]` axes by an integer factor.
pub fn area_downsample<E: Element>(x: &Tensor<E>, f: usize) -> Result<Tensor<E>> {
    let (planes, h, w) = spatial(x, "area_downsample")?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(TensorError::InvalidShape {
            op: "area_downsample",
            shape: x.shape().to_vec(),
            reason: format!("spatial dims not divisible by {f}"),
        });
    }
    let (ho, wo) = (h / f, w / f);
    let inv = E::one() / E::of((f * f) as f64);
    let mut out = vec![E::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..h {
            for j in 0..w {
                let d = &mut dst[(i / f) * wo + j / f];
                *d = *d + src[i * w + j];
            }
        }
        for d in dst.iter_mut() {
            *d = *d * inv;
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Ok(Tensor::from_parts(shape, out))
}

/// Nearest-neighbour upsample of the trailing `[H, W]` axes by an integer factor.
pub fn nearest_upsample<E: Element>(x: &Tensor<E>, f: usize) -> Result<Tensor<E>> {
    let (planes, h, w) = spatial(x, "nearest_upsample")?;
    if f == 0 {
        return Err(TensorError::InvalidShape {
            op: "nearest_upsample",
            shape: x.shape().to_vec(),
            reason: "factor must be positive".into(),
        });
    }
    let (ho, wo) = (h * f, w * f);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                out.push(src[(i / f) * w + j / f]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Ok(Tensor::from_parts(shape, out))
}

/// Sum-pool by `f`: the adjoint of [`nearest_upsample`].
pub(crate) fn block_sum<E: Element>(g: &Tensor<E>, f: usize) -> Result<Tensor<E>> {
    let scaled = area_downsample(g, f)?;
    let k = E::of((f * f) as f64);
    Ok(scaled.map(|v| v * k))
}

fn attention_dims<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
) -> Result<(usize, usize, usize, usize)> {
    let r = q.rank();
    let ok = r >= 2
        && k.rank() == r
        && v.rank() == r
        && q.shape()[..r - 2] == k.shape()[..r - 2]
        && k.shape()[..r - 1] == v.shape()[..r - 1]
        && q.dim(r - 1) == k.dim(r - 1)
        && q.dim(r - 1) == v.dim(r - 1);
    if !ok {
        return Err(mismatch("attention", q.shape(), k.shape()));
    }
    Ok((numel(&q.shape()[..r - 2]), q.dim(r - 2), k.dim(r - 2), q.dim(r - 1)))
}

/// Scaled dot-product attention `softmax(q k^T / sqrt(d)) v` over `[..., S, D]`,
/// one score matrix at a time.
pub fn attention<E: Element>(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>) -> Result<Tensor<E>> {
    let (batch, sq, sk, d) = attention_dims(q, k, v)?;
    let scale = E::of(1.0 / (d as f64).sqrt());
    let mut out = vec![E::zero(); batch * sq * d];
    let mut scores = vec![E::zero(); sq * sk];
    for bi in 0..batch {
        let qs = &q.data()[bi * sq * d..(bi + 1) * sq * d];
        let ks = &k.data()[bi * sk * d..(bi + 1) * sk * d];
        let vs = &v.data()[bi * sk * d..(bi + 1) * sk * d];
        gemm(
            scale,
            qs,
            MatView::contiguous(sq, d),
            ks,
            MatView::contiguous(sk, d).t(),
            E::zero(),
            &mut scores,
            MatView::contiguous(sq, sk),
        );
        for row in scores.chunks_exact_mut(sk) {
            softmax_row(row);
        }
        gemm(
            E::one(),
            &scores,
            MatView::contiguous(sq, sk),
            vs,
            MatView::contiguous(sk, d),
            E::zero(),
            &mut out[bi * sq * d..(bi + 1) * sq * d],
            MatView::contiguous(sq, d),
        );
    }
    Ok(Tensor::from_parts(q.shape().to_vec(), out))
}

/// Gradients of [`attention`] w.r.t. `(q, k, v)`, recomputing the
/// probabilities from the saved inputs.
pub fn attention_backward<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    out: &Tensor<E>,
    g: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (batch, sq, sk, d) = attention_dims(q, k, v)?;
    let scale = E::of(1.0 / (d as f64).sqrt());
    let mut dq = vec![E::zero(); q.numel()];
    let mut dk = vec![E::zero(); k.numel()];
    let mut dv = vec![E::zero(); v.numel()];
    let mut probs = vec![E::zero(); sq * sk];
    let mut dprobs = vec![E::zero(); sq * sk];
    for bi in 0..batch {
        let qr = bi * sq * d..(bi + 1) * sq * d;
        let kr = bi * sk * d..(bi + 1) * sk * d;
        let (qs, ks, vs) = (&q.data()[qr.clone()], &k.data()[kr.clone()], &v.data()[kr.clone()]);
        let (os, gs) = (&out.data()[qr.clone()], &g.data()[qr.clone()]);
        let qv = MatView::contiguous(sq, d);
        let kv = MatView::contiguous(sk, d);
        let pv = MatView::contiguous(sq, sk);
        gemm(scale, qs, qv, ks, kv.t(), E::zero(), &mut probs, pv);
        for row in probs.chunks_exact_mut(sk) {
            softmax_row(row);
        }
        // dV = P^T dO
        gemm(E::one(), &probs, pv.t(), gs, qv, E::zero(), &mut dv[kr.clone()], kv);
        // dP = dO V^T
        gemm(E::one(), gs, qv, vs, kv.t(), E::zero(), &mut dprobs, pv);
        // dS = P * (dP - rowsum(dO * O))
        for i in 0..sq {
            let delta: E = (0..d).map(|c| gs[i * d + c] * os[i * d + c]).sum();
            for j in 0..sk {
                let idx = i * sk + j;
                dprobs[idx] = probs[idx] * (dprobs[idx] - delta);
            }
        }
        gemm(scale, &dprobs, pv, ks, kv, E::zero(), &mut dq[qr.clone()], qv);
        gemm(scale, &dprobs, pv.t(), qs, qv, E::zero(), &mut dk[kr.clone()], kv);
    }
    Ok((
        Tensor::from_parts(q.shape().to_vec(), dq),
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(v.shape().to_vec(), dv),
    ))
}
