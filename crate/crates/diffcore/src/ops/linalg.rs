use crate::error::{invalid, mismatch, Result};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::Tensor;

impl<T: Scalar> Tensor<T> {
    /// Matrix product over the last two axes.
    ///
    /// `self` is `[..., m, k]`. `rhs` is either a plain `[k, n]` matrix shared
    /// by every leading index, or `[..., k, n]` with leading axes equal to
    /// those of `self`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() < 2 || b.len() < 2 {
            return Err(invalid("matmul", format!("operands need rank >= 2, got {a:?} and {b:?}")));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != kb {
            return Err(mismatch("matmul", a, b));
        }
        let lead = &a[..a.len() - 2];
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);

        if b.len() == 2 {
            // Fold all leading axes into the row count: one gemm.
            let rows = lead.iter().product::<usize>() * m;
            let mut out = vec![T::zero(); rows * n];
            gemm(self.data(), MatView::row_major(rows, k), rhs.data(), MatView::row_major(k, n), &mut out, false);
            let (a_in, b_in) = (self.clone(), rhs.clone());
            return Ok(Tensor::from_op(out_shape, out, &[self, rhs], move |g| {
                let ga = a_in.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); rows * k];
                    gemm(g, MatView::row_major(rows, n), b_in.data(), MatView::row_major(k, n).transposed(), &mut ga, false);
                    ga
                });
                let gb = b_in.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(a_in.data(), MatView::row_major(rows, k).transposed(), g, MatView::row_major(rows, n), &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }));
        }

        if &b[..b.len() - 2] != lead {
            return Err(mismatch("matmul", a, b));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                &self.data()[i * m * k..(i + 1) * m * k],
                MatView::row_major(m, k),
                &rhs.data()[i * k * n..(i + 1) * k * n],
                MatView::row_major(k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let (a_in, b_in) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(out_shape, out, &[self, rhs], move |g| {
            let ga = a_in.requires_grad().then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    gemm(
                        &g[i * m * n..(i + 1) * m * n],
                        MatView::row_major(m, n),
                        &b_in.data()[i * k * n..(i + 1) * k * n],
                        MatView::row_major(k, n).transposed(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                ga
            });
            let gb = b_in.requires_grad().then(|| {
                let mut gb = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    gemm(
                        &a_in.data()[i * m * k..(i + 1) * m * k],
                        MatView::row_major(m, k).transposed(),
                        &g[i * m * n..(i + 1) * m * n],
                        MatView::row_major(m, n),
                        &mut gb[i * k * n..(i + 1) * k * n],
                        false,
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(invalid("transpose", format!("needs rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out_shape = s.to_vec();
        let len = out_shape.len();
        out_shape.swap(len - 2, len - 1);
        let data = transpose_blocks(self.data(), r, c);
        Ok(Tensor::from_op(out_shape, data, &[self], move |g| vec![Some(transpose_blocks(g, c, r))]))
    }
}

fn transpose_blocks<T: Scalar>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let block = r * c;
    let mut out = vec![T::zero(); src.len()];
    if block == 0 {
        return out;
    }
    for (b, chunk) in src.chunks(block).enumerate() {
        let dst = &mut out[b * block..(b + 1) * block];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = chunk[i * c + j];
            }
        }
    }
    out
}
