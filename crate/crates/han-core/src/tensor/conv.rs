//! Convolution, transposed convolution, matmul, upsampling and concatenation.
//!
//! Convolutions use cross-correlation semantics (no kernel flip) and are
//! evaluated per sample as im2col followed by a GEMM. conv2d_transpose is the
//! exact adjoint of conv2d with the same kernel and geometry: its forward pass
//! is conv2d's input gradient, which keeps the pair consistent by sharing the
//! same column buffers.

use super::gemm::{gemm, MatRef};
use super::profile::span;
use super::{Result, Tensor, TensorError};

fn shape4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(TensorError::BadRank { expected: 4, got: t.shape().to_vec() }),
    }
}

/// Scatter image patches into a [ci*kh*kw, oh*ow] column matrix.
fn im2col(
    img: &[f64],
    (ci, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    cols: &mut [f64],
) {
    let area = oh * ow;
    debug_assert_eq!(cols.len(), ci * kh * kw * area);
    for c in 0..ci {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for r in 0..kh {
            for q in 0..kw {
                let row = ((c * kh + r) * kw + q) * area;
                for y in 0..oh {
                    let iy = (y * stride + r) as isize - padding as isize;
                    let dst = &mut cols[row + y * ow..row + (y + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (x, slot) in dst.iter_mut().enumerate() {
                        let ix = (x * stride + q) as isize - padding as isize;
                        *slot = if ix >= 0 && ix < w as isize { src_row[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: accumulate columns back into image positions.
fn col2im(
    cols: &[f64],
    (ci, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    img: &mut [f64],
) {
    let area = oh * ow;
    debug_assert_eq!(cols.len(), ci * kh * kw * area);
    for c in 0..ci {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for r in 0..kh {
            for q in 0..kw {
                let row = ((c * kh + r) * kw + q) * area;
                for y in 0..oh {
                    let iy = (y * stride + r) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + y * ow..row + (y + 1) * ow];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (x, &v) in src.iter().enumerate() {
                        let ix = (x * stride + q) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_out_extent(
    op: &'static str,
    input: &[usize],
    kernel: &[usize],
    extent: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < k || (padded - k) % stride != 0 {
        return Err(TensorError::BadGeometry {
            op,
            input: input.to_vec(),
            kernel: kernel.to_vec(),
            stride,
            padding,
            reason: format!(
                "output extent ({padded} - {k}) / {stride} + 1 is not a positive integer"
            ),
        });
    }
    Ok((padded - k) / stride + 1)
}

impl Tensor {
    /// 2-D convolution: x [n, ci, h, w] * kernel [co, ci, kh, kw] -> [n, co, oh, ow].
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let (n, ci, h, w) = shape4(self)?;
        let (co, kci, kh, kw) = shape4(kernel)?;
        if kci != ci {
            return Err(TensorError::BadGeometry {
                op: "conv2d",
                input: self.shape().to_vec(),
                kernel: kernel.shape().to_vec(),
                stride,
                padding,
                reason: format!("kernel expects {kci} input channels, image has {ci}"),
            });
        }
        if stride == 0 {
            return Err(TensorError::BadGeometry {
                op: "conv2d",
                input: self.shape().to_vec(),
                kernel: kernel.shape().to_vec(),
                stride,
                padding,
                reason: "stride must be positive".into(),
            });
        }
        let oh = conv_out_extent("conv2d", self.shape(), kernel.shape(), h, kh, stride, padding)?;
        let ow = conv_out_extent("conv2d", self.shape(), kernel.shape(), w, kw, stride, padding)?;
        let kdim = ci * kh * kw;
        let area = oh * ow;

        let mut out = vec![0.0f64; n * co * area];
        {
            let _p = span("conv2d.forward");
            let x = self.data();
            let kd = kernel.data();
            let kmat = MatRef::row_major(&kd, kdim);
            let mut cols = vec![0.0f64; kdim * area];
            for s in 0..n {
                im2col(
                    &x[s * ci * h * w..(s + 1) * ci * h * w],
                    (ci, h, w),
                    (kh, kw),
                    stride,
                    padding,
                    (oh, ow),
                    &mut cols,
                );
                gemm(
                    co,
                    kdim,
                    area,
                    kmat,
                    MatRef::row_major(&cols, area),
                    &mut out[s * co * area..(s + 1) * co * area],
                );
            }
        }

        let x_saved = self.clone();
        let k_saved = kernel.clone();
        Ok(Tensor::from_op(
            vec![n, co, oh, ow],
            out,
            vec![self.clone(), kernel.clone()],
            move |ctx| {
                let _p = span("conv2d.backward");
                let g = ctx.grad;
                let x = x_saved.data();
                let kd = k_saved.data();
                let need_dx = x_saved.requires_grad();
                let need_dk = k_saved.requires_grad();
                let mut cols = vec![0.0f64; kdim * area];
                let mut dcols = vec![0.0f64; kdim * area];
                let mut dk_acc = if need_dk { vec![0.0f64; co * kdim] } else { Vec::new() };
                let mut dx_acc = if need_dx { vec![0.0f64; n * ci * h * w] } else { Vec::new() };
                for s in 0..n {
                    let gout = &g[s * co * area..(s + 1) * co * area];
                    if need_dk {
                        im2col(
                            &x[s * ci * h * w..(s + 1) * ci * h * w],
                            (ci, h, w),
                            (kh, kw),
                            stride,
                            padding,
                            (oh, ow),
                            &mut cols,
                        );
                        // dK += dOut * cols^T
                        gemm(
                            co,
                            area,
                            kdim,
                            MatRef::row_major(gout, area),
                            MatRef { data: &cols, rs: 1, cs: area },
                            &mut dk_acc,
                        );
                    }
                    if need_dx {
                        dcols.fill(0.0);
                        // dcols = K^T * dOut
                        gemm(
                            kdim,
                            co,
                            area,
                            MatRef { data: &kd, rs: 1, cs: kdim },
                            MatRef::row_major(gout, area),
                            &mut dcols,
                        );
                        col2im(
                            &dcols,
                            (ci, h, w),
                            (kh, kw),
                            stride,
                            padding,
                            (oh, ow),
                            &mut dx_acc[s * ci * h * w..(s + 1) * ci * h * w],
                        );
                    }
                }
                drop(x);
                drop(kd);
                if need_dk {
                    k_saved.add_to_grad(&dk_acc);
                }
                if need_dx {
                    x_saved.add_to_grad(&dx_acc);
                }
            },
        ))
    }

    /// Transposed 2-D convolution: x [n, a, h, w] * kernel [a, b, kh, kw] ->
    /// [n, b, (h-1)*stride - 2*padding + kh, ...]. Adjoint of `conv2d` with the
    /// same kernel, stride and padding.
    pub fn conv2d_transpose(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let (n, a, h, w) = shape4(self)?;
        let (ka, b, kh, kw) = shape4(kernel)?;
        if ka != a {
            return Err(TensorError::BadGeometry {
                op: "conv2d_transpose",
                input: self.shape().to_vec(),
                kernel: kernel.shape().to_vec(),
                stride,
                padding,
                reason: format!("kernel expects {ka} input channels, image has {a}"),
            });
        }
        if stride == 0 {
            return Err(TensorError::BadGeometry {
                op: "conv2d_transpose",
                input: self.shape().to_vec(),
                kernel: kernel.shape().to_vec(),
                stride,
                padding,
                reason: "stride must be positive".into(),
            });
        }
        let oh = ((h - 1) * stride + kh) as isize - 2 * padding as isize;
        let ow = ((w - 1) * stride + kw) as isize - 2 * padding as isize;
        if oh < 1 || ow < 1 {
            return Err(TensorError::BadGeometry {
                op: "conv2d_transpose",
                input: self.shape().to_vec(),
                kernel: kernel.shape().to_vec(),
                stride,
                padding,
                reason: format!("output extent {oh}x{ow} is not positive"),
            });
        }
        let (oh, ow) = (oh as usize, ow as usize);
        let kdim = b * kh * kw;
        let in_area = h * w;

        let mut out = vec![0.0f64; n * b * oh * ow];
        {
            let _p = span("convT.forward");
            let x = self.data();
            let kd = kernel.data();
            let mut cols = vec![0.0f64; kdim * in_area];
            for s in 0..n {
                cols.fill(0.0);
                // cols = K^T * x
                gemm(
                    kdim,
                    a,
                    in_area,
                    MatRef { data: &kd, rs: 1, cs: kdim },
                    MatRef::row_major(&x[s * a * in_area..(s + 1) * a * in_area], in_area),
                    &mut cols,
                );
                col2im(
                    &cols,
                    (b, oh, ow),
                    (kh, kw),
                    stride,
                    padding,
                    (h, w),
                    &mut out[s * b * oh * ow..(s + 1) * b * oh * ow],
                );
            }
        }

        let x_saved = self.clone();
        let k_saved = kernel.clone();
        Ok(Tensor::from_op(
            vec![n, b, oh, ow],
            out,
            vec![self.clone(), kernel.clone()],
            move |ctx| {
                let _p = span("convT.backward");
                let g = ctx.grad;
                let x = x_saved.data();
                let kd = k_saved.data();
                let need_dx = x_saved.requires_grad();
                let need_dk = k_saved.requires_grad();
                let mut gcols = vec![0.0f64; kdim * in_area];
                let mut dk_acc = if need_dk { vec![0.0f64; a * kdim] } else { Vec::new() };
                let mut dx_acc =
                    if need_dx { vec![0.0f64; n * a * in_area] } else { Vec::new() };
                for s in 0..n {
                    let gout = &g[s * b * oh * ow..(s + 1) * b * oh * ow];
                    im2col(gout, (b, oh, ow), (kh, kw), stride, padding, (h, w), &mut gcols);
                    if need_dx {
                        // dX = K * im2col(dOut)
                        gemm(
                            a,
                            kdim,
                            in_area,
                            MatRef::row_major(&kd, kdim),
                            MatRef::row_major(&gcols, in_area),
                            &mut dx_acc[s * a * in_area..(s + 1) * a * in_area],
                        );
                    }
                    if need_dk {
                        // dK += x * im2col(dOut)^T
                        gemm(
                            a,
                            in_area,
                            kdim,
                            MatRef::row_major(&x[s * a * in_area..(s + 1) * a * in_area], in_area),
                            MatRef { data: &gcols, rs: 1, cs: in_area },
                            &mut dk_acc,
                        );
                    }
                }
                drop(x);
                drop(kd);
                if need_dk {
                    k_saved.add_to_grad(&dk_acc);
                }
                if need_dx {
                    x_saved.add_to_grad(&dx_acc);
                }
            },
        ))
    }

    /// Matrix product of rank-2 tensors: [m, k] x [k, n] -> [m, n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = match *self.shape() {
            [m, k] => (m, k),
            _ => return Err(TensorError::BadRank { expected: 2, got: self.shape().to_vec() }),
        };
        let (k2, n) = match *other.shape() {
            [k2, n] => (k2, n),
            _ => return Err(TensorError::BadRank { expected: 2, got: other.shape().to_vec() }),
        };
        if k != k2 {
            return Err(TensorError::InnerDimMismatch(
                self.shape().to_vec(),
                other.shape().to_vec(),
            ));
        }
        let mut out = vec![0.0f64; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::row_major(&self.data(), k),
            MatRef::row_major(&other.data(), n),
            &mut out,
        );
        let a_saved = self.clone();
        let b_saved = other.clone();
        Ok(Tensor::from_op(vec![m, n], out, vec![self.clone(), other.clone()], move |ctx| {
            let g = ctx.grad;
            if a_saved.requires_grad() {
                // dA = dC * B^T
                let bd = b_saved.data();
                let mut da = vec![0.0f64; m * k];
                gemm(
                    m,
                    n,
                    k,
                    MatRef::row_major(g, n),
                    MatRef { data: &bd, rs: 1, cs: n },
                    &mut da,
                );
                drop(bd);
                a_saved.add_to_grad(&da);
            }
            if b_saved.requires_grad() {
                // dB = A^T * dC
                let ad = a_saved.data();
                let mut db = vec![0.0f64; k * n];
                gemm(
                    k,
                    m,
                    n,
                    MatRef { data: &ad, rs: 1, cs: k },
                    MatRef::row_major(g, n),
                    &mut db,
                );
                drop(ad);
                b_saved.add_to_grad(&db);
            }
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor on both spatial axes.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        if factor < 1 {
            return Err(TensorError::BadUpsampleFactor);
        }
        let (n, c, h, w) = shape4(self)?;
        let (oh, ow) = (h * factor, w * factor);
        let x = self.data();
        let mut out = vec![0.0f64; n * c * oh * ow];
        for p in 0..n * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                let sy = y / factor;
                for x_ in 0..ow {
                    dst[y * ow + x_] = src[sy * w + x_ / factor];
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(vec![n, c, oh, ow], out, vec![self.clone()], move |ctx| {
            if ctx.parents[0].requires_grad() {
                let mut g = ctx.parents[0].grad_buf_mut();
                for p in 0..n * c {
                    let up = &ctx.grad[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut g[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        let sy = y / factor;
                        for x_ in 0..ow {
                            dst[sy * w + x_ / factor] += up[y * ow + x_];
                        }
                    }
                }
            }
        }))
    }

    /// Stack two feature maps along the channel axis.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let (n, c1, h, w) = shape4(self)?;
        let (n2, c2, h2, w2) = shape4(other)?;
        if n != n2 || h != h2 || w != w2 {
            return Err(TensorError::ShapeMismatch(
                self.shape().to_vec(),
                other.shape().to_vec(),
            ));
        }
        let area = h * w;
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0f64; n * (c1 + c2) * area];
        for s in 0..n {
            let dst = &mut out[s * (c1 + c2) * area..(s + 1) * (c1 + c2) * area];
            dst[..c1 * area].copy_from_slice(&a[s * c1 * area..(s + 1) * c1 * area]);
            dst[c1 * area..].copy_from_slice(&b[s * c2 * area..(s + 1) * c2 * area]);
        }
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            vec![n, c1 + c2, h, w],
            out,
            vec![self.clone(), other.clone()],
            move |ctx| {
                let g = ctx.grad;
                let ctot = c1 + c2;
                if ctx.parents[0].requires_grad() {
                    let mut da = ctx.parents[0].grad_buf_mut();
                    for s in 0..n {
                        let src = &g[s * ctot * area..s * ctot * area + c1 * area];
                        let dst = &mut da[s * c1 * area..(s + 1) * c1 * area];
                        for (d, &u) in dst.iter_mut().zip(src) {
                            *d += u;
                        }
                    }
                }
                if ctx.parents[1].requires_grad() {
                    let mut db = ctx.parents[1].grad_buf_mut();
                    for s in 0..n {
                        let src = &g[s * ctot * area + c1 * area..(s + 1) * ctot * area];
                        let dst = &mut db[s * c2 * area..(s + 1) * c2 * area];
                        for (d, &u) in dst.iter_mut().zip(src) {
                            *d += u;
                        }
                    }
                }
            },
        ))
    }
}

/// Stack tensors along the leading (batch) axis. All trailing dims must match.
pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(TensorError::EmptyConcat);
    }
    let tail = parts[0].shape()[1..].to_vec();
    let mut total_n = 0usize;
    for p in parts {
        if p.shape().len() != tail.len() + 1 || p.shape()[1..] != tail[..] {
            return Err(TensorError::ShapeMismatch(parts[0].shape().to_vec(), p.shape().to_vec()));
        }
        total_n += p.shape()[0];
    }
    let mut data = Vec::with_capacity(total_n * tail.iter().product::<usize>());
    for p in parts {
        data.extend_from_slice(&p.data());
    }
    let mut shape = vec![total_n];
    shape.extend_from_slice(&tail);
    let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    Ok(Tensor::from_op(shape, data, parts.to_vec(), move |ctx| {
        let mut offset = 0usize;
        for (parent, &len) in ctx.parents.iter().zip(&sizes) {
            if parent.requires_grad() {
                parent.add_to_grad(&ctx.grad[offset..offset + len]);
            }
            offset += len;
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_1x1_kernel_is_identity() {
        let x = Tensor::param(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let k = Tensor::param(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.to_vec(), x.to_vec());
        let yt = x.conv2d_transpose(&k, 1, 0).unwrap();
        assert_eq!(yt.to_vec(), x.to_vec());
    }

    #[test]
    fn ones_kernel_sums_window() {
        // constant 7 input, all-ones 3x3 kernel, pad 1: interior pixels see 9 * 7 = 63
        let x = Tensor::param(&[1, 1, 5, 5], vec![7.0; 25]).unwrap();
        let k = Tensor::param(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = x.conv2d(&k, 1, 1).unwrap();
        let v = y.to_vec();
        for yy in 1..4 {
            for xx in 1..4 {
                assert_eq!(v[yy * 5 + xx], 63.0);
            }
        }
        assert_eq!(v[0], 4.0 * 7.0); // corner sees a 2x2 window
    }

    #[test]
    fn invalid_geometry_is_an_error() {
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        let k = Tensor::zeros(&[1, 1, 2, 2]);
        // (5 - 2) % 2 != 0
        assert!(matches!(x.conv2d(&k, 2, 0), Err(TensorError::BadGeometry { .. })));
    }

    #[test]
    fn matmul_small_case() {
        let a = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::param(&[2, 1], vec![1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.to_vec(), vec![3.0, 7.0]);
        let eye = Tensor::constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = eye.matmul(&a).unwrap();
        assert_eq!(m.to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(a.matmul(&b), Err(TensorError::InnerDimMismatch(_, _))));
    }

    #[test]
    fn upsample_block_repeats() {
        let x = Tensor::param(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = x.upsample_nearest(2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(
            y.to_vec(),
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        y.sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![4.0; 4]);
    }

    #[test]
    fn concat_channels_shapes_and_empty() {
        let a = Tensor::param(&[1, 2, 4, 4], vec![1.0; 32]).unwrap();
        let b = Tensor::param(&[1, 3, 4, 4], vec![2.0; 48]).unwrap();
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.shape(), &[1, 5, 4, 4]);
        let empty = Tensor::zeros(&[1, 0, 4, 4]);
        let same = a.concat_channels(&empty).unwrap();
        assert_eq!(same.shape(), &[1, 2, 4, 4]);
        assert_eq!(same.to_vec(), a.to_vec());
        let bad = Tensor::zeros(&[1, 1, 3, 4]);
        assert!(a.concat_channels(&bad).is_err());
    }

    #[test]
    fn concat_channels_routes_gradients() {
        let a = Tensor::param(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let b = Tensor::param(&[1, 1, 2, 2], vec![2.0; 4]).unwrap();
        let c = a.concat_channels(&b).unwrap();
        let w = Tensor::constant(&[1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        c.mul(&w).unwrap().sum_all().backward();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn concat_batch_splits_gradient() {
        let a = Tensor::param(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::param(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = concat_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        c.mul_scalar(2.0).sum_all().backward();
        assert_eq!(a.grad().unwrap(), vec![2.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0; 4]);
    }
}
