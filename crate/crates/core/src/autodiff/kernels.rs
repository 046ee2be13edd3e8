//! Dense matrix-product kernels backing the `matmul` op.

use super::tensor::Tensor;

/// Strided view of a row-major matrix block.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    offset: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    fn plain(data: &'a [f64], offset: usize, cols: usize) -> Self {
        Self { data, offset, rs: cols as isize, cs: 1 }
    }

    fn transposed(data: &'a [f64], offset: usize, cols: usize) -> Self {
        Self { data, offset, rs: 1, cs: cols as isize }
    }
}

const SMALL: usize = 4096;

/// `c[m x n] (+)= a[m x k] * b[k x n]`; `c` is row-major with row stride
/// `ldc`. Without `accumulate` the previous contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(m: usize, k: usize, n: usize, a: View, b: View, c: &mut [f64], ldc: usize, accumulate: bool) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= (m - 1) * ldc + n);
    if !accumulate && (k == 0 || m * k * n <= SMALL) {
        for i in 0..m {
            c[i * ldc..i * ldc + n].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    if k == 0 {
        return;
    }
    if m * k * n <= SMALL {
        for i in 0..m {
            let crow = &mut c[i * ldc..i * ldc + n];
            for p in 0..k {
                let aip = a.data[(a.offset as isize + i as isize * a.rs + p as isize * a.cs) as usize];
                if aip == 0.0 {
                    continue;
                }
                let base = b.offset as isize + p as isize * b.rs;
                if b.cs == 1 {
                    let brow = &b.data[base as usize..base as usize + n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += aip * bv;
                    }
                } else {
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv += aip * b.data[(base + j as isize * b.cs) as usize];
                    }
                }
            }
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: all strided accesses stay inside the borrowed slices; the
    // callers derive offsets and strides from the tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

fn gemm(m: usize, k: usize, n: usize, a: View, b: View, c: &mut [f64], accumulate: bool) {
    gemm_strided(m, k, n, a, b, c, n, accumulate)
}

/// (batch, rows, cols); batch is `None` for rank-2 operands.
fn dims(t: &Tensor) -> Option<(Option<usize>, usize, usize)> {
    match t.shape() {
        [r, c] => Some((None, *r, *c)),
        [b, r, c] => Some((Some(*b), *r, *c)),
        _ => None,
    }
}

pub(crate) fn batched_matmul(a: &Tensor, b: &Tensor) -> Option<Tensor> {
    let (ba, m, k) = dims(a)?;
    let (bb, k2, n) = dims(b)?;
    if k != k2 {
        return None;
    }
    match (ba, bb) {
        (None, None) => {
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, View::plain(a.data(), 0, k), View::plain(b.data(), 0, n), &mut c, false);
            Tensor::new(vec![m, n], c).ok()
        }
        (Some(batch), None) => {
            let mut c = vec![0.0; batch * m * n];
            gemm(batch * m, k, n, View::plain(a.data(), 0, k), View::plain(b.data(), 0, n), &mut c, false);
            Tensor::new(vec![batch, m, n], c).ok()
        }
        (ba, bb) => {
            let (na, nb) = (ba.unwrap_or(1), bb.unwrap_or(1));
            let batch = if na == nb || nb == 1 {
                na
            } else if na == 1 {
                nb
            } else {
                return None;
            };
            let sa = if ba.is_none() || na == 1 { 0 } else { m * k };
            let sb = if nb == 1 { 0 } else { k * n };
            let mut c = vec![0.0; batch * m * n];
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    View::plain(a.data(), i * sa, k),
                    View::plain(b.data(), i * sb, n),
                    &mut c[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            Tensor::new(vec![batch, m, n], c).ok()
        }
    }
}

/// Gradients of `c = a x b` given `dc`.
pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    dc: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (ba, m, k) = dims(a).expect("validated in forward");
    let (bb, _, n) = dims(b).expect("validated in forward");
    let g = dc.data();
    let mut ga = need_a.then(|| vec![0.0; a.len()]);
    let mut gb = need_b.then(|| vec![0.0; b.len()]);
    match (ba, bb) {
        (None, None) | (Some(_), None) => {
            let rows = ba.unwrap_or(1) * m;
            if let Some(ga) = ga.as_mut() {
                // da = dc * b^T
                gemm(rows, n, k, View::plain(g, 0, n), View::transposed(b.data(), 0, n), ga, false);
            }
            if let Some(gb) = gb.as_mut() {
                // db = a^T * dc
                gemm(k, rows, n, View::transposed(a.data(), 0, k), View::plain(g, 0, n), gb, false);
            }
        }
        (ba, bb) => {
            let batch = dc.shape()[0];
            let sa = if ba.is_none() || ba == Some(1) { 0 } else { m * k };
            let sb = if bb == Some(1) { 0 } else { k * n };
            for i in 0..batch {
                let gi = View::plain(g, i * m * n, n);
                if let Some(ga) = ga.as_mut() {
                    gemm(
                        m,
                        n,
                        k,
                        gi,
                        View::transposed(b.data(), i * sb, n),
                        &mut ga[i * sa..i * sa + m * k],
                        sa == 0,
                    );
                }
                if let Some(gb) = gb.as_mut() {
                    gemm(
                        k,
                        m,
                        n,
                        View::transposed(a.data(), i * sa, k),
                        gi,
                        &mut gb[i * sb..i * sb + k * n],
                        sb == 0,
                    );
                }
            }
        }
    }
    let wrap = |d: Vec<f64>, t: &Tensor| Tensor::new(t.shape().to_vec(), d).expect("same shape");
    (ga.map(|d| wrap(d, a)), gb.map(|d| wrap(d, b)))
}

/// Splits `h` (`[.., rows, fan_in]`) and `w` (`[out, fan_in + 1]` or
/// `[batch, out, fan_in + 1]`) into gemm blocks: (blocks, rows per block,
/// fan_in, out, weight stride per block).
fn linear_dims(h: &Tensor, w: &Tensor) -> Option<(usize, usize, usize, usize, usize)> {
    let hs = h.shape();
    let fan_in = *hs.last()?;
    let total_rows = h.len() / fan_in.max(1);
    match w.shape() {
        [out, cols] if *cols == fan_in + 1 => Some((1, total_rows, fan_in, *out, 0)),
        [batch, out, cols] if *cols == fan_in + 1 && hs.len() == 3 && hs[0] == *batch => {
            Some((*batch, hs[1], fan_in, *out, out * cols))
        }
        _ => None,
    }
}

/// `h * w[.., :fan_in]^T + w[.., fan_in]`, the affine map of a layer whose
/// last weight column is the bias.
pub(crate) fn linear(h: &Tensor, w: &Tensor) -> Option<Tensor> {
    let (blocks, rows, fan_in, out, ws) = linear_dims(h, w)?;
    if fan_in == 0 {
        return None;
    }
    let cols = fan_in + 1;
    let wd = w.data();
    let mut c = Vec::with_capacity(blocks * rows * out);
    for b in 0..blocks {
        for _ in 0..rows {
            c.extend((0..out).map(|j| wd[b * ws + j * cols + fan_in]));
        }
    }
    for b in 0..blocks {
        let wt = View { data: wd, offset: b * ws, rs: 1, cs: cols as isize };
        gemm(
            rows,
            fan_in,
            out,
            View::plain(h.data(), b * rows * fan_in, fan_in),
            wt,
            &mut c[b * rows * out..(b + 1) * rows * out],
            true,
        );
    }
    let mut shape = h.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = out;
    Tensor::new(shape, c).ok()
}

pub(crate) fn linear_backward(
    h: &Tensor,
    w: &Tensor,
    dc: &Tensor,
    need_h: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (blocks, rows, fan_in, out, ws) = linear_dims(h, w).expect("validated in forward");
    let cols = fan_in + 1;
    let g = dc.data();
    let gh = need_h.then(|| {
        let mut d = vec![0.0; h.len()];
        for b in 0..blocks {
            gemm(
                rows,
                out,
                fan_in,
                View::plain(g, b * rows * out, out),
                View { data: w.data(), offset: b * ws, rs: cols as isize, cs: 1 },
                &mut d[b * rows * fan_in..(b + 1) * rows * fan_in],
                false,
            );
        }
        Tensor::new(h.shape().to_vec(), d).expect("same shape")
    });
    let gw = need_w.then(|| {
        let mut d = vec![0.0; w.len()];
        for b in 0..blocks {
            let dst = &mut d[b * ws..b * ws + out * cols];
            gemm_strided(
                out,
                rows,
                fan_in,
                View { data: g, offset: b * rows * out, rs: 1, cs: out as isize },
                View::plain(h.data(), b * rows * fan_in, fan_in),
                dst,
                cols,
                false,
            );
            for r in 0..rows {
                let grow = &g[(b * rows + r) * out..(b * rows + r + 1) * out];
                for (j, gv) in grow.iter().enumerate() {
                    dst[j * cols + fan_in] += gv;
                }
            }
        }
        Tensor::new(w.shape().to_vec(), d).expect("same shape")
    });
    (gh, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 1.0).collect()
    }

    #[test]
    fn small_and_large_paths_agree_with_naive() {
        for &(m, k, n) in &[(2, 3, 4), (40, 51, 50), (1, 21, 20)] {
            let a = Tensor::new(vec![m, k], seq(m * k, 0.1)).unwrap();
            let b = Tensor::new(vec![k, n], seq(k * n, 0.07)).unwrap();
            let c = batched_matmul(&a, &b).unwrap();
            let want = naive(a.data(), b.data(), m, k, n);
            for (x, y) in c.data().iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_with_shared_operand() {
        let a = Tensor::new(vec![3, 2, 4], seq(24, 0.1)).unwrap();
        let b = Tensor::new(vec![4, 5], seq(20, 0.2)).unwrap();
        let c = batched_matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 5]);
        for i in 0..3 {
            let want = naive(&a.data()[i * 8..(i + 1) * 8], b.data(), 2, 4, 5);
            for (x, y) in c.data()[i * 10..(i + 1) * 10].iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let b3 = Tensor::new(vec![3, 4, 5], seq(60, 0.2)).unwrap();
        let a2 = Tensor::new(vec![2, 4], seq(8, 0.3)).unwrap();
        let c = batched_matmul(&a2, &b3).unwrap();
        assert_eq!(c.shape(), &[3, 2, 5]);
    }

    fn naive_linear(h: &[f64], w: &[f64], rows: usize, fan_in: usize, out: usize) -> Vec<f64> {
        let mut c = vec![0.0; rows * out];
        for r in 0..rows {
            for j in 0..out {
                let mut s = w[j * (fan_in + 1) + fan_in];
                for p in 0..fan_in {
                    s += h[r * fan_in + p] * w[j * (fan_in + 1) + p];
                }
                c[r * out + j] = s;
            }
        }
        c
    }

    #[test]
    fn linear_matches_naive() {
        for &(rows, fan_in, out) in &[(3, 2, 4), (70, 50, 50)] {
            let h = Tensor::new(vec![rows, fan_in], seq(rows * fan_in, 0.1)).unwrap();
            let w = Tensor::new(vec![out, fan_in + 1], seq(out * (fan_in + 1), 0.05)).unwrap();
            let c = linear(&h, &w).unwrap();
            let want = naive_linear(h.data(), w.data(), rows, fan_in, out);
            for (x, y) in c.data().iter().zip(&want) {
                assert!((x - y).abs() < 1e-11);
            }
            let wb = Tensor::new(vec![2, out, fan_in + 1], [w.data(), w.data()].concat()).unwrap();
            let hb = Tensor::new(vec![2, rows, fan_in], [h.data(), h.data()].concat()).unwrap();
            let cb = linear(&hb, &wb).unwrap();
            assert_eq!(&cb.data()[..rows * out], c.data());
            assert_eq!(&cb.data()[rows * out..], c.data());
        }
    }

    #[test]
    fn mismatched_inner_dimension() {
        let a = Tensor::ones(&[2, 3]);
        let b = Tensor::ones(&[4, 5]);
        assert!(batched_matmul(&a, &b).is_none());
    }
}
