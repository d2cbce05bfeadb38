//! Primitive numeric kernels. Every layer's forward and backward pass is
//! assembled from these.

use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Plain matrix product of a `[m, k]` and a `[k, p]` tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(format!(
            "matmul: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * p];
    gemm(m, k, p, a.data(), false, b.data(), false, &mut out, 0.0);
    Ok(Tensor::from_parts(vec![m, p], out))
}

/// Unfolds one `[c, h, w]` sample into a `[c*kh*kw, oh*ow]` column matrix.
///
/// Row `(ch, u, v)` holds the input values seen by kernel tap `(u, v)` of
/// channel `ch` at every output position, in row-major output order.
pub fn im2col(sample: &[Scalar], c: usize, h: usize, w: usize, kh: usize, kw: usize, col: &mut [Scalar]) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let plane = oh * ow;
    debug_assert!(col.len() >= c * kh * kw * plane);
    let mut row = 0;
    for ch in 0..c {
        let src = &sample[ch * h * w..(ch + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let dst = &mut col[row * plane..(row + 1) * plane];
                for i in 0..oh {
                    let from = (i + u) * w + v;
                    dst[i * ow..(i + 1) * ow].copy_from_slice(&src[from..from + ow]);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters (adds) a column matrix back onto a `[c, h, w]` sample.
pub fn col2im(col: &[Scalar], c: usize, h: usize, w: usize, kh: usize, kw: usize, sample: &mut [Scalar]) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let plane = oh * ow;
    let mut row = 0;
    for ch in 0..c {
        let dst = &mut sample[ch * h * w..(ch + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let src = &col[row * plane..(row + 1) * plane];
                for i in 0..oh {
                    let to = (i + u) * w + v;
                    for (d, s) in dst[to..to + ow].iter_mut().zip(&src[i * ow..(i + 1) * ow]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.height - self.kh + 1
    }
    pub fn out_w(&self) -> usize {
        self.width - self.kw + 1
    }
    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }
    pub fn col_len(&self) -> usize {
        self.col_rows() * self.out_h() * self.out_w()
    }
}

/// Validates a convolution's operands; accepts `[c, h, w]` or `[b, c, h, w]` inputs.
pub(crate) fn conv_geometry(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<ConvGeometry> {
    let (batch, dims) = match input.shape() {
        [c, h, w] => (1, [*c, *h, *w]),
        [b, c, h, w] => (*b, [*c, *h, *w]),
        s => return Err(Error::shape(format!("conv2d: expected [C,H,W] or [B,C,H,W] input, got {s:?}"))),
    };
    let [o, kc, kh, kw] = match kernels.shape() {
        [o, c, kh, kw] => [*o, *c, *kh, *kw],
        s => return Err(Error::shape(format!("conv2d: expected [O,C,KH,KW] kernels, got {s:?}"))),
    };
    let [c, h, w] = dims;
    if kc != c {
        return Err(Error::shape(format!(
            "conv2d: input has {c} channels, kernels {:?} expect {kc}",
            kernels.shape()
        )));
    }
    if h < kh || w < kw {
        return Err(Error::shape(format!(
            "conv2d: input {:?} smaller than kernel {kh}x{kw}",
            input.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::shape(format!("conv2d: bias {:?} does not match {o} kernels", b.shape())));
        }
    }
    Ok(ConvGeometry {
        batch,
        in_channels: c,
        height: h,
        width: w,
        out_channels: o,
        kh,
        kw,
    })
}

/// Convolves one sample given its precomputed column matrix.
pub(crate) fn conv_from_cols(g: &ConvGeometry, cols: &[Scalar], kernels: &[Scalar], bias: Option<&[Scalar]>, out: &mut [Scalar]) {
    let plane = g.out_h() * g.out_w();
    gemm(g.out_channels, g.col_rows(), plane, kernels, false, cols, false, out, 0.0);
    if let Some(b) = bias {
        for (o, &bo) in b.iter().enumerate() {
            out[o * plane..(o + 1) * plane].iter_mut().for_each(|x| *x += bo);
        }
    }
}

/// Valid (unpadded, stride 1) 2-D cross-correlation.
///
/// `out[o][i][j] = bias[o] + sum_{c,u,v} input[c][i+u][j+v] * kernels[o][c][u][v]`.
/// A leading batch axis on `input` is preserved.
pub fn conv2d_valid(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, bias)?;
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * g.out_h() * g.out_w();
    let mut cols = vec![0.0; g.col_len()];
    let mut out = vec![0.0; g.batch * out_len];
    for b in 0..g.batch {
        im2col(&input.data()[b * in_len..(b + 1) * in_len], g.in_channels, g.height, g.width, g.kh, g.kw, &mut cols);
        conv_from_cols(&g, &cols, kernels.data(), bias.map(|t| t.data()), &mut out[b * out_len..(b + 1) * out_len]);
    }
    let mut shape = vec![g.out_channels, g.out_h(), g.out_w()];
    if input.rank() == 4 {
        shape.insert(0, g.batch);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Result of [`maxpool2x2`]: the pooled tensor and, for each output element,
/// the flat input index it was taken from.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxPoolOutput {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Disjoint 2x2 max pooling with stride 2 over the last two axes.
///
/// Ties go to the first element in row-major scan order of the window.
pub fn maxpool2x2(input: &Tensor) -> Result<MaxPoolOutput> {
    let r = input.rank();
    if r < 2 {
        return Err(Error::shape(format!("maxpool2x2: need at least 2 axes, got {:?}", input.shape())));
    }
    let (h, w) = (input.shape()[r - 2], input.shape()[r - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("maxpool2x2: spatial size {h}x{w} is not even")));
    }
    let planes = input.len() / (h * w);
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok(MaxPoolOutput {
        output: Tensor::from_parts(shape, out),
        argmax,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

fn check_finite(t: &Tensor, op: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op}: non-finite input")))
    }
}

fn rows_of(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [k] => Ok((1, *k)),
        [b, k] => Ok((*b, *k)),
        s => Err(Error::shape(format!("{op}: expected [K] or [B,K], got {s:?}"))),
    }
}

/// Max-shifted softmax of a vector, or of each row of a `[B, K]` tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    check_finite(logits, "softmax")?;
    let (_, k) = rows_of(logits, "softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.iter_mut().for_each(|x| *x /= sum);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Row-wise `log softmax`, computed as `x - max - ln(sum(exp(x - max)))`.
pub fn log_softmax_rows(logits: &Tensor) -> Result<Tensor> {
    check_finite(logits, "log_softmax")?;
    let (_, k) = rows_of(logits, "log_softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<Scalar>().ln() + max;
        row.iter_mut().for_each(|x| *x -= lse);
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_small_case() {
        let a = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&Tensor::identity(3), &a).unwrap(), a);
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn conv_zero_and_inner_product() {
        let out = conv2d_valid(&Tensor::zeros(&[1, 6, 6]), &Tensor::full(&[2, 1, 5, 5], 0.5), Some(&Tensor::zeros(&[2]))).unwrap();
        assert_eq!(out.shape(), &[2, 2, 2]);
        assert!(out.data().iter().all(|&x| x == 0.0));

        let x = Tensor::from_fn(&[1, 5, 5], |i| i as Scalar - 7.0);
        let k = x.clone().reshape(&[1, 1, 5, 5]).unwrap();
        let out = conv2d_valid(&x, &k, Some(&Tensor::zeros(&[1]))).unwrap();
        let expected: Scalar = x.data().iter().map(|v| v * v).sum();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data()[0], expected);
    }

    #[test]
    fn conv_rejects_small_input() {
        let err = conv2d_valid(&Tensor::zeros(&[1, 4, 4]), &Tensor::zeros(&[1, 1, 5, 5]), None).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k) = (2, 6, 7, 3);
        let x: Vec<Scalar> = (0..c * h * w).map(|i| (i as Scalar * 0.13).sin()).collect();
        let cols_len = c * k * k * (h - k + 1) * (w - k + 1);
        let y: Vec<Scalar> = (0..cols_len).map(|i| (i as Scalar * 0.71).cos()).collect();
        let mut cols = vec![0.0; cols_len];
        im2col(&x, c, h, w, k, k, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, k, &mut back);
        let lhs: Scalar = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: Scalar = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_cases() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = maxpool2x2(&t).unwrap();
        assert_eq!(p.output.data(), &[4.0]);
        assert_eq!(p.argmax, vec![3]);

        let t = Tensor::full(&[1, 4, 4], 2.5);
        let p = maxpool2x2(&t).unwrap();
        assert!(p.output.data().iter().all(|&x| x == 2.5));
        assert_eq!(p.argmax, vec![0, 2, 8, 10]);

        assert!(maxpool2x2(&Tensor::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&Tensor::vector(vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&Tensor::full(&[7], -3.0)).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::zeros(&[4])).unwrap();
        assert_eq!(s.data(), &[0.25; 4]);
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
        assert!(matches!(softmax(&Tensor::vector(vec![0.0, Scalar::NAN])), Err(Error::Numeric(_))));
        assert!(matches!(softmax(&Tensor::vector(vec![Scalar::INFINITY])), Err(Error::Numeric(_))));
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.0, 5.0, 5.0, -1.0]).unwrap();
        let a = log_softmax_rows(&x).unwrap();
        let b = softmax(&x).unwrap().map(Scalar::ln);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
