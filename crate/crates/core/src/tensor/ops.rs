//! Value-level tensor operations. These are the forward kernels the tape
//! records; use them directly when no gradient is needed.

use super::kernel::{self, MatRef};
use super::{axis_geometry, check_axis, Tensor};
use crate::error::{Error, Result};

/// Smallest row norm accepted by normalization and cosine similarity.
pub const MIN_NORM: f32 = 1e-12;

/// Matrix product `a·b` of `a: [.., m, k]` (leading dims flattened into
/// rows) and `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix("matmul", a)?;
    if b.rank() != 2 || b.shape()[0] != k {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    kernel::gemm(
        MatRef::row_major(a.data(), m, k),
        MatRef::row_major(b.data(), k, n),
        &mut out,
        false,
    );
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)
}

/// `a·bᵀ` for `a: [.., m, k]` and `b: [n, k]`.
pub fn matmul_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix("matmul_t", a)?;
    if b.rank() != 2 || b.shape()[1] != k {
        return Err(Error::shape("matmul_t", a.shape(), b.shape()));
    }
    let n = b.shape()[0];
    let mut out = vec![0.0; m * n];
    kernel::gemm(
        MatRef::row_major(a.data(), m, k),
        MatRef::row_major(b.data(), n, k).t(),
        &mut out,
        false,
    );
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)
}

pub(crate) fn as_matrix(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    if a.rank() < 2 {
        return Err(Error::dim(op, format!("expected rank >= 2, got {:?}", a.shape())));
    }
    let k = *a.shape().last().unwrap();
    Ok((a.numel() / k, k))
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", x.shape(), axis)?;
    let (outer, n, inner) = axis_geometry(x.shape(), axis);
    let mut out = x.clone().with_requires_grad(false);
    kernel::softmax_strided(out.data_mut(), outer, n, inner);
    Ok(out)
}

/// Layer normalization over the last axis followed by the affine map
/// `gamma·x̂ + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    Ok(layer_norm_with_stats(x, gamma, beta, eps)?.0)
}

pub(crate) fn layer_norm_with_stats(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
    }
    let rows = x.numel() / d;
    let mut out = vec![0.0; x.numel()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let (g, b) = (gamma.data(), beta.data());
    for (src, dst) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = src.iter().sum::<f32>() / d as f32;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            dst[j] = (src[j] - mean) * rstd * g[j] + b[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, means, rstds))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| kernel::gelu(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Scales every row (last axis) to unit Euclidean norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    Ok(l2_normalize_with_norms(x)?.0)
}

pub(crate) fn l2_normalize_with_norms(x: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("l2_normalize", "scalar input"))?;
    let mut out = x.data().to_vec();
    let mut norms = Vec::with_capacity(x.numel() / d);
    for row in out.chunks_exact_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if !(norm > MIN_NORM) {
            return Err(Error::Degenerate("l2_normalize"));
        }
        let inv = 1.0 / norm;
        row.iter_mut().for_each(|v| *v *= inv);
        norms.push(norm);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, norms))
}

/// Cosine similarity of two vectors of equal length.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.numel() != b.numel() {
        return Err(Error::shape("cosine_similarity", a.shape(), b.shape()));
    }
    cosine(a.data(), b.data())
}

pub(crate) fn cosine(a: &[f32], b: &[f32]) -> Result<f32> {
    let na = a.iter().map(|v| v * v).sum::<f32>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f32>().sqrt();
    if !(na > MIN_NORM && nb > MIN_NORM) {
        return Err(Error::Degenerate("cosine_similarity"));
    }
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Arithmetic mean over the first axis.
pub fn mean_rows(x: &Tensor) -> Result<Tensor> {
    mean_axis(x, 0)
}

/// Mean along `axis`, removing it.
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut out = sum_axis(x, axis)?;
    let n = x.shape()[axis] as f32;
    out.data_mut().iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Sum along `axis`, removing it.
pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("sum_axis", x.shape(), axis)?;
    let (outer, n, inner) = axis_geometry(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let s = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
            let d = &mut out[o * inner..(o + 1) * inner];
            for (dv, sv) in d.iter_mut().zip(s) {
                *dv += sv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(matmul(&a, &eye).unwrap().data(), a.data());
        let zero = Tensor::zeros([2, 2]);
        assert!(matmul(&a, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        let b = t(&[2, 1], &[5., 6.]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), naive_matmul(a.data(), b.data(), 2, 2, 1).as_slice());
        assert_eq!(c.data(), &[17., 39.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_t_matches_transpose() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[4, 3], &[1., 0., 2., -1., 3., 0.5, 0., 0., 1., 2., 2., 2.]);
        let via_t = matmul(&a, &b.transpose().unwrap()).unwrap();
        assert_eq!(matmul_t(&a, &b).unwrap().data(), via_t.data());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[2], &[0., 0.]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[3], &[5., 5., 5.]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        let s = softmax(&t(&[2], &[2f32.ln(), 0.]), 0).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_over_leading_axis() {
        let x = t(&[2, 2], &[0., 1., 0., 3.]);
        let s = softmax(&x, 0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-6);
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full([4], 1.0);
        let zero = Tensor::zeros([4]);
        let y = layer_norm(&Tensor::full([1, 4], 3.5), &one, &zero, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let (g, b) = (Tensor::full([2], 1.0), Tensor::zeros([2]));
        let y = layer_norm(&t(&[1, 2], &[1., -1.]), &g, &b, 1e-5).unwrap();
        // var = 1, so x̂ = x / sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f32 + 1e-5).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-6);
        assert!((y.data()[0] - 1.0).abs() < 1e-4 && (y.data()[1] + 1.0).abs() < 1e-4);

        let beta = t(&[2], &[0.3, -0.7]);
        let y = layer_norm(&t(&[2, 2], &[4., 9., -1., 2.]), &Tensor::zeros([2]), &beta, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.3, -0.7, 0.3, -0.7]);
    }

    #[test]
    fn gelu_examples() {
        let y = gelu(&t(&[3], &[0., 10., 1.]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-4);
        // Φ(1) = 0.5·(1 + erf(1/√2)) = 0.841344746
        assert!((y.data()[2] - 0.841_344_75).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_examples() {
        assert_eq!(l2_normalize(&t(&[2], &[1., 0.])).unwrap().data(), &[1., 0.]);
        let y = l2_normalize(&t(&[2], &[3., 4.])).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-7 && (y.data()[1] - 0.8).abs() < 1e-7);
        assert!(matches!(
            l2_normalize(&t(&[2], &[0., 0.])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn cosine_examples() {
        let c = |a: &[f32], b: &[f32]| cosine_similarity(&t(&[2], a), &t(&[2], b));
        assert_eq!(c(&[1., 0.], &[0., 1.]).unwrap(), 0.0);
        assert!((c(&[1., 2.], &[2., 4.]).unwrap() - 1.0).abs() < 1e-6);
        assert!((c(&[1., 0.], &[1., 1.]).unwrap() - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(matches!(c(&[0., 0.], &[1., 1.]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn mean_rows_examples() {
        assert_eq!(mean_rows(&t(&[2, 2], &[1., 1., 1., 1.])).unwrap().data(), &[1., 1.]);
        assert_eq!(mean_rows(&t(&[1, 3], &[4., 5., 6.])).unwrap().data(), &[4., 5., 6.]);
        let m = mean_rows(&t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        assert_eq!(m.shape(), &[2]);
        assert_eq!(m.data(), &[2., 3.]);
    }
}
