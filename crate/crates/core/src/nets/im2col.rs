//! Convolutions as im2col + matmul.
//!
//! `Im2Col` and `Col2Im` are adjoint linear maps, so each is the other's backward
//! pass. Column layout is `(C·k·k, B·oh·ow)`: rows run over (channel, ki, kj), columns
//! over (batch, oy, ox).
//!
//! The layer-facing convolutions are fused ops with hand-written backward passes:
//! they work one image at a time, add the bias in place and call `gemm` directly.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

/// Geometry of a convolution from a `(B, C, H, W)` image to a `(oh, ow)` plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    /// Output plane of a forward convolution.
    pub fn conv(dims: (usize, usize, usize, usize), kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let (batch, channels, height, width) = dims;
        if stride == 0 || kernel == 0 || height + 2 * padding < kernel || width + 2 * padding < kernel {
            return Err(Error::shape(format!(
                "kernel {kernel} / stride {stride} / padding {padding} do not fit {height}x{width}"
            )));
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel) / stride + 1,
            out_w: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Calls `f(image_index, column_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plane = self.out_h * self.out_w;
        let cols = self.cols();
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for b in 0..self.batch {
                        let img = (b * self.channels + c) * self.height * self.width;
                        for oy in 0..self.out_h {
                            let y = (oy * s) as isize - p + ki as isize;
                            if y < 0 || y >= self.height as isize {
                                continue;
                            }
                            let src_row = img + y as usize * self.width;
                            let dst_row = row * cols + b * plane + oy * self.out_w;
                            for ox in 0..self.out_w {
                                let x = (ox * s) as isize - p + kj as isize;
                                if x < 0 || x >= self.width as isize {
                                    continue;
                                }
                                f(src_row + x as usize, dst_row + ox);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: WithDType>(data: &'a [T], layout: &Layout, len: usize) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) if end - start == len => Ok(&data[start..end]),
        _ => Err(candle_core::Error::Msg("im2col expects a contiguous input of the declared geometry".into())),
    }
}

struct Im2Col(Geometry);

struct Col2Im(Geometry);

impl Im2Col {
    fn run<T: WithDType>(&self, src: &[T]) -> Vec<T> {
        let g = self.0;
        let mut out = vec![T::zero(); g.rows() * g.cols()];
        g.for_each_tap(|i, j| out[j] = src[i]);
        out
    }
}

impl Col2Im {
    fn run<T: WithDType>(&self, src: &[T]) -> Vec<T> {
        let g = self.0;
        let mut out = vec![T::zero(); g.image_len()];
        g.for_each_tap(|i, j| out[i] += src[j]);
        out
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let n = g.image_len();
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous(v, layout, n)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous(v, layout, n)?)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((out, Shape::from((g.rows(), g.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let n = g.rows() * g.cols();
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous(v, layout, n)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous(v, layout, n)?)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64".into())),
        };
        Ok((out, Shape::from((g.batch, g.channels, g.height, g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// `(B, C, H, W)` → `(C·k·k, B·oh·ow)` patch matrix.
pub fn im2col(x: &Tensor, g: Geometry) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Im2Col(g))?)
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into a `(B, C, H, W)` image.
pub fn col2im(cols: &Tensor, g: Geometry) -> Result<Tensor> {
    Ok(cols.contiguous()?.apply_op1(Col2Im(g))?)
}

/// `dst (m×n) = [dst +] lhs (m×k) · rhs (k×n)`; strides are `(row, col)` in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<T: WithDType>(
    (m, n, k): (usize, usize, usize),
    dst: &mut [T],
    dst_s: (usize, usize),
    accumulate: bool,
    lhs: &[T],
    lhs_s: (usize, usize),
    rhs: &[T],
    rhs_s: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |s: (usize, usize), r: usize, c: usize| (r - 1) * s.0 + (c - 1) * s.1;
    assert!(last(dst_s, m, n) < dst.len(), "matmul destination out of bounds");
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    dst[i * dst_s.0 + j * dst_s.1] = T::zero();
                }
            }
        }
        return;
    }
    assert!(last(lhs_s, m, k) < lhs.len() && last(rhs_s, k, n) < rhs.len(), "matmul operand out of bounds");
    assert!(
        T::DTYPE == candle_core::DType::F32 || T::DTYPE == candle_core::DType::F64,
        "matmul_into supports f32 and f64"
    );
    // SAFETY: every index touched is within the slices by the asserts above, and
    // `dst` does not alias the operands since it is borrowed mutably.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            dst_s.1 as isize,
            dst_s.0 as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_s.1 as isize,
            lhs_s.0 as isize,
            rhs.as_ptr(),
            rhs_s.1 as isize,
            rhs_s.0 as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

pub(crate) fn host<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

pub(crate) fn slice3<'a, T: WithDType>(
    parts: [(&'a CpuStorage, &Layout); 3],
) -> candle_core::Result<[&'a [T]; 3]> {
    let mut out: [&[T]; 3] = [&[]; 3];
    for (slot, (s, l)) in out.iter_mut().zip(parts) {
        let data = s.as_slice::<T>()?;
        *slot = match l.contiguous_offsets() {
            Some((a, b)) => &data[a..b],
            None => return Err(candle_core::Error::Msg("fused op expects contiguous inputs".into())),
        };
    }
    Ok(out)
}

fn unsupported(op: &str) -> candle_core::Error {
    candle_core::Error::Msg(format!("{op} supports f32 and f64"))
}

/// Convolution with bias fused in, computed image by image so the output lands in
/// `(B, O, oh, ow)` order without a transpose.
struct Conv2dOp {
    g: Geometry,
    out_ch: usize,
}

impl Conv2dOp {
    fn plane(&self) -> usize {
        self.g.out_h * self.g.out_w
    }

    fn single(&self) -> Geometry {
        Geometry { batch: 1, ..self.g }
    }

    fn image(&self) -> usize {
        self.g.channels * self.g.height * self.g.width
    }

    fn forward<T: WithDType>(&self, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
        let (o, n, r) = (self.out_ch, self.plane(), self.g.rows());
        let single = self.single();
        let mut cols = vec![T::zero(); r * n];
        let mut y = vec![T::zero(); self.g.batch * o * n];
        for bi in 0..self.g.batch {
            let img = &x[bi * self.image()..(bi + 1) * self.image()];
            single.for_each_tap(|i, j| cols[j] = img[i]);
            let yb = &mut y[bi * o * n..(bi + 1) * o * n];
            for (oc, row) in yb.chunks_mut(n).enumerate() {
                row.fill(b[oc]);
            }
            matmul_into((o, n, r), yb, (n, 1), true, w, (r, 1), &cols, (n, 1));
        }
        y
    }

    fn backward<T: WithDType>(&self, x: &[T], w: &[T], dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (o, n, r) = (self.out_ch, self.plane(), self.g.rows());
        let single = self.single();
        let mut cols = vec![T::zero(); r * n];
        let mut dcols = vec![T::zero(); r * n];
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); o * r];
        let mut db = vec![T::zero(); o];
        for bi in 0..self.g.batch {
            let img = &x[bi * self.image()..(bi + 1) * self.image()];
            single.for_each_tap(|i, j| cols[j] = img[i]);
            let dyb = &dy[bi * o * n..(bi + 1) * o * n];
            for (oc, row) in dyb.chunks(n).enumerate() {
                db[oc] += row.iter().fold(T::zero(), |a, &v| a + v);
            }
            matmul_into((o, r, n), &mut dw, (r, 1), true, dyb, (n, 1), &cols, (1, n));
            matmul_into((r, n, o), &mut dcols, (n, 1), false, w, (1, r), dyb, (n, 1));
            let dimg = &mut dx[bi * self.image()..(bi + 1) * self.image()];
            single.for_each_tap(|i, j| dimg[i] += dcols[j]);
        }
        (dx, dw, db)
    }
}

impl CustomOp3 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let parts = [(s1, l1), (s2, l2), (s3, l3)];
        let out = match s1 {
            CpuStorage::F32(_) => {
                let [x, w, b] = slice3::<f32>(parts)?;
                CpuStorage::F32(self.forward(x, w, b))
            }
            CpuStorage::F64(_) => {
                let [x, w, b] = slice3::<f64>(parts)?;
                CpuStorage::F64(self.forward(x, w, b))
            }
            _ => return Err(unsupported("conv2d")),
        };
        Ok((out, Shape::from((self.g.batch, self.out_ch, self.g.out_h, self.g.out_w))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (dx, dw, db) = match x.dtype() {
            candle_core::DType::F32 => {
                let (dx, dw, db) = self.backward::<f32>(&host(x)?, &host(w)?, &host(grad)?);
                (Tensor::new(dx, x.device())?, Tensor::new(dw, x.device())?, Tensor::new(db, x.device())?)
            }
            candle_core::DType::F64 => {
                let (dx, dw, db) = self.backward::<f64>(&host(x)?, &host(w)?, &host(grad)?);
                (Tensor::new(dx, x.device())?, Tensor::new(dw, x.device())?, Tensor::new(db, x.device())?)
            }
            _ => return Err(unsupported("conv2d")),
        };
        Ok((Some(dx.reshape(x.shape())?), Some(dw.reshape(w.shape())?), Some(db.reshape(b.shape())?)))
    }
}

/// Transposed convolution with bias fused in. `g` is the geometry of the forward
/// convolution this op is the adjoint of: image = output, plane = input.
struct ConvTranspose2dOp {
    g: Geometry,
    in_ch: usize,
}

impl ConvTranspose2dOp {
    fn plane(&self) -> usize {
        self.g.out_h * self.g.out_w
    }

    fn single(&self) -> Geometry {
        Geometry { batch: 1, ..self.g }
    }

    fn image(&self) -> usize {
        self.g.channels * self.g.height * self.g.width
    }

    fn forward<T: WithDType>(&self, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
        let (ci, n, r) = (self.in_ch, self.plane(), self.g.rows());
        let single = self.single();
        let hw = self.g.height * self.g.width;
        let mut cols = vec![T::zero(); r * n];
        let mut y = vec![T::zero(); self.g.batch * self.image()];
        for bi in 0..self.g.batch {
            let xb = &x[bi * ci * n..(bi + 1) * ci * n];
            matmul_into((r, n, ci), &mut cols, (n, 1), false, w, (1, r), xb, (n, 1));
            let yb = &mut y[bi * self.image()..(bi + 1) * self.image()];
            for (oc, plane) in yb.chunks_mut(hw).enumerate() {
                plane.fill(b[oc]);
            }
            single.for_each_tap(|i, j| yb[i] += cols[j]);
        }
        y
    }

    fn backward<T: WithDType>(&self, x: &[T], w: &[T], dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (ci, n, r) = (self.in_ch, self.plane(), self.g.rows());
        let single = self.single();
        let hw = self.g.height * self.g.width;
        let mut dcols = vec![T::zero(); r * n];
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); ci * r];
        let mut db = vec![T::zero(); self.g.channels];
        for bi in 0..self.g.batch {
            let dyb = &dy[bi * self.image()..(bi + 1) * self.image()];
            for (oc, plane) in dyb.chunks(hw).enumerate() {
                db[oc] += plane.iter().fold(T::zero(), |a, &v| a + v);
            }
            single.for_each_tap(|i, j| dcols[j] = dyb[i]);
            let xb = &x[bi * ci * n..(bi + 1) * ci * n];
            matmul_into((ci, n, r), &mut dx[bi * ci * n..(bi + 1) * ci * n], (n, 1), false, w, (r, 1), &dcols, (n, 1));
            matmul_into((ci, r, n), &mut dw, (r, 1), true, xb, (n, 1), &dcols, (1, n));
        }
        (dx, dw, db)
    }
}

impl CustomOp3 for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let parts = [(s1, l1), (s2, l2), (s3, l3)];
        let out = match s1 {
            CpuStorage::F32(_) => {
                let [x, w, b] = slice3::<f32>(parts)?;
                CpuStorage::F32(self.forward(x, w, b))
            }
            CpuStorage::F64(_) => {
                let [x, w, b] = slice3::<f64>(parts)?;
                CpuStorage::F64(self.forward(x, w, b))
            }
            _ => return Err(unsupported("conv_transpose2d")),
        };
        let g = self.g;
        Ok((out, Shape::from((g.batch, g.channels, g.height, g.width))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (dx, dw, db) = match x.dtype() {
            candle_core::DType::F32 => {
                let (dx, dw, db) = self.backward::<f32>(&host(x)?, &host(w)?, &host(grad)?);
                (Tensor::new(dx, x.device())?, Tensor::new(dw, x.device())?, Tensor::new(db, x.device())?)
            }
            candle_core::DType::F64 => {
                let (dx, dw, db) = self.backward::<f64>(&host(x)?, &host(w)?, &host(grad)?);
                (Tensor::new(dx, x.device())?, Tensor::new(dw, x.device())?, Tensor::new(db, x.device())?)
            }
            _ => return Err(unsupported("conv_transpose2d")),
        };
        Ok((Some(dx.reshape(x.shape())?), Some(dw.reshape(w.shape())?), Some(db.reshape(b.shape())?)))
    }
}

fn bias_or_zeros(bias: Option<&Tensor>, n: usize, like: &Tensor) -> Result<Tensor> {
    Ok(match bias {
        Some(b) => b.flatten_all()?.contiguous()?,
        None => Tensor::zeros(n, like.dtype(), like.device())?,
    })
}

/// 2-D convolution, weight `(O, C, k, k)`, optional bias `(O)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 || bias.is_some_and(|t| t.elem_count() != o) {
        return Err(Error::shape(format!("conv weight {:?} does not fit input {:?}", weight.dims(), x.dims())));
    }
    let g = Geometry::conv((b, c, h, w), k, stride, padding)?;
    let bias = bias_or_zeros(bias, o, x)?;
    Ok(x.contiguous()?
        .apply_op3(&weight.contiguous()?, &bias, Conv2dOp { g, out_ch: o })?)
}

/// Transposed convolution, weight `(C_in, C_out, k, k)`; output side is
/// `(H − 1)·stride − 2·padding + k + output_padding`.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor> {
    let (b, ci, h, w) = x.dims4()?;
    let (wi, o, k, k2) = weight.dims4()?;
    if wi != ci || k != k2 || output_padding >= stride.max(1) || bias.is_some_and(|t| t.elem_count() != o) {
        return Err(Error::shape(format!(
            "transposed conv weight {:?} does not fit input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    let oh = (h - 1) * stride + k + output_padding;
    let ow = (w - 1) * stride + k + output_padding;
    if oh < 2 * padding + 1 || ow < 2 * padding + 1 {
        return Err(Error::shape("transposed conv output would be empty"));
    }
    let g = Geometry::conv((b, o, oh - 2 * padding, ow - 2 * padding), k, stride, padding)?;
    if (g.out_h, g.out_w) != (h, w) {
        return Err(Error::shape("transposed conv geometry does not round-trip"));
    }
    let bias = bias_or_zeros(bias, o, x)?;
    Ok(x
        .contiguous()?
        .apply_op3(&weight.contiguous()?, &bias, ConvTranspose2dOp { g, in_ch: ci })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = crate::rng::seeded(seed, 0);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    /// Direct 7-loop convolution.
    fn conv_direct(x: &[f64], dims: (usize, usize, usize, usize), w: &[f64], o: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let (b, c, h, wd) = dims;
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (y * s + ki) as isize - p as isize;
                                    let ix = (xx * s + kj) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                        out[((bi * o + oc) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (s, p, h) in [(1, 1, 6), (2, 1, 8), (2, 0, 7), (1, 0, 5)] {
            let x = randn(&[2, 3, h, h], 1);
            let w = randn(&[4, 3, 3, 3], 2);
            let got = conv2d(&x, &w, None, s, p).unwrap();
            let want = conv_direct(
                &x.flatten_all().unwrap().to_vec1().unwrap(),
                (2, 3, h, h),
                &w.flatten_all().unwrap().to_vec1().unwrap(),
                4,
                3,
                s,
                p,
            );
            let want = Tensor::from_vec(want, got.dims(), &Device::Cpu).unwrap();
            assert!(max_diff(&got, &want) < 1e-12, "s={s} p={p}");
        }
    }

    #[test]
    fn transposed_conv_matches_backend() {
        for (s, p, op) in [(2, 1, 1), (1, 1, 0), (2, 0, 0)] {
            let x = randn(&[2, 4, 5, 5], 3);
            let w = randn(&[4, 3, 3, 3], 4);
            let got = conv_transpose2d(&x, &w, None, s, p, op).unwrap();
            let want = x.conv_transpose2d(&w, p, op, s, 1).unwrap();
            assert_eq!(got.dims(), want.dims());
            assert!(max_diff(&got, &want) < 1e-12, "s={s} p={p} op={op}");
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), y> = <x, col2im(y)>
        let g = Geometry::conv((2, 3, 7, 7), 3, 2, 1).unwrap();
        let x = randn(&[2, 3, 7, 7], 5);
        let y = randn(&[g.rows(), g.cols()], 6);
        let lhs = (im2col(&x, g).unwrap() * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let rhs = (col2im(&y, g).unwrap() * &x).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_backend_convolution() {
        let x = Var::from_tensor(&randn(&[2, 3, 6, 6], 7)).unwrap();
        let w = Var::from_tensor(&randn(&[4, 3, 3, 3], 8)).unwrap();
        let probe = randn(&[2, 4, 3, 3], 9);
        let ours = (conv2d(&x, &w, None, 2, 1).unwrap() * &probe).unwrap().sum_all().unwrap();
        let theirs = (x.conv2d(&w, 1, 2, 1, 1).unwrap() * &probe).unwrap().sum_all().unwrap();
        let (ga, gb) = (ours.backward().unwrap(), theirs.backward().unwrap());
        for v in [&x, &w] {
            assert!(max_diff(ga.get(v).unwrap(), gb.get(v).unwrap()) < 1e-12);
        }
        assert_eq!(x.dtype(), DType::F64);
    }

    #[test]
    fn transposed_gradients_match_backend() {
        let x = Var::from_tensor(&randn(&[2, 4, 3, 3], 10)).unwrap();
        let w = Var::from_tensor(&randn(&[4, 3, 3, 3], 11)).unwrap();
        let probe = randn(&[2, 3, 6, 6], 12);
        let ours = (conv_transpose2d(&x, &w, None, 2, 1, 1).unwrap() * &probe).unwrap().sum_all().unwrap();
        let theirs = (x.conv_transpose2d(&w, 1, 1, 2, 1).unwrap() * &probe).unwrap().sum_all().unwrap();
        let (ga, gb) = (ours.backward().unwrap(), theirs.backward().unwrap());
        for v in [&x, &w] {
            assert!(max_diff(ga.get(v).unwrap(), gb.get(v).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn bias_gradient_is_the_per_channel_sum() {
        let x = randn(&[2, 3, 4, 4], 13);
        let w = randn(&[3, 5, 3, 3], 14);
        let probe = randn(&[2, 5, 8, 8], 15);
        let b = Var::from_tensor(&randn(&[5], 16)).unwrap();
        let y = conv_transpose2d(&x, &w, Some(b.as_tensor()), 2, 1, 1).unwrap();
        let plain = conv_transpose2d(&x, &w, None, 2, 1, 1).unwrap();
        let shifted = plain.broadcast_add(&b.as_tensor().reshape((1, 5, 1, 1)).unwrap()).unwrap();
        assert!(max_diff(&y, &shifted) < 1e-12);
        let g = (y * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let want = probe.sum(3).unwrap().sum(2).unwrap().sum(0).unwrap();
        assert!(max_diff(g.get(&b).unwrap(), &want) < 1e-12);

        let wc = randn(&[4, 3, 3, 3], 17);
        let bc = Var::from_tensor(&randn(&[4], 18)).unwrap();
        let y = conv2d(&x, &wc, Some(bc.as_tensor()), 1, 1).unwrap();
        let probe = randn(&[2, 4, 4, 4], 19);
        let g = (y * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let want = probe.sum(3).unwrap().sum(2).unwrap().sum(0).unwrap();
        assert!(max_diff(g.get(&bc).unwrap(), &want) < 1e-12);
    }

    #[test]
    fn single_precision_agrees_with_double() {
        let x = randn(&[2, 3, 8, 8], 20);
        let w = randn(&[4, 3, 3, 3], 21);
        let y64 = conv2d(&x, &w, None, 2, 1).unwrap();
        let y32 = conv2d(&x.to_dtype(DType::F32).unwrap(), &w.to_dtype(DType::F32).unwrap(), None, 2, 1).unwrap();
        assert!(max_diff(&y64, &y32.to_dtype(DType::F64).unwrap()) < 1e-5);
    }
}
