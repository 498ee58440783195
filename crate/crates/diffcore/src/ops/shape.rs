//! Shape manipulation: reshape, row concat/slice/gather, last-axis slice,
//! axis swap.

use crate::error::{invalid, mismatch, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

impl<T: Scalar> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(mismatch("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), &[self], |g| vec![Some(g.to_vec())]))
    }

    /// Concatenation along axis 0. All parts must agree on the trailing axes.
    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no tensors given"))?;
        if first.rank() == 0 {
            return Err(invalid("concat", "cannot concatenate rank-0 tensors"));
        }
        let tail = &first.shape()[1..];
        let mut rows = 0;
        for p in parts {
            if p.rank() == 0 || &p.shape()[1..] != tail {
                return Err(mismatch("concat", first.shape(), p.shape()));
            }
            rows += p.shape()[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let mut data = Vec::with_capacity(numel(&shape));
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let lens: Vec<usize> = parts.iter().map(Tensor::numel).collect();
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Tensor::from_op(shape, data, &refs, move |g| {
            let mut offset = 0;
            lens.iter()
                .map(|&n| {
                    let piece = g[offset..offset + n].to_vec();
                    offset += n;
                    Some(piece)
                })
                .collect()
        }))
    }

    /// Rows `start..end` of axis 0.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let rows = *self.shape().first().ok_or_else(|| invalid("slice_rows", "rank-0 tensor"))?;
        if start > end || end > rows {
            return Err(invalid("slice_rows", format!("range {start}..{end} out of {rows} rows")));
        }
        let row_len = self.numel() / rows.max(1);
        let mut shape = self.shape().to_vec();
        shape[0] = end - start;
        let data = self.data()[start * row_len..end * row_len].to_vec();
        let total = self.numel();
        Ok(Tensor::from_op(shape, data, &[self], move |g| {
            let mut full = vec![T::zero(); total];
            full[start * row_len..end * row_len].copy_from_slice(g);
            vec![Some(full)]
        }))
    }

    /// Gathers rows of axis 0 by index (repeats allowed). Embedding lookup is
    /// this op applied to a `[vocab, width]` table.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let rows = *self.shape().first().ok_or_else(|| invalid("gather_rows", "rank-0 tensor"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(invalid("gather_rows", format!("index {bad} out of {rows} rows")));
        }
        let row_len = self.numel() / rows.max(1);
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            data.extend_from_slice(&self.data()[i * row_len..(i + 1) * row_len]);
        }
        let idx = indices.to_vec();
        let total = self.numel();
        Ok(Tensor::from_op(shape, data, &[self], move |g| {
            let mut full = vec![T::zero(); total];
            for (k, &i) in idx.iter().enumerate() {
                let src = &g[k * row_len..(k + 1) * row_len];
                full[i * row_len..(i + 1) * row_len]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, &b)| *a = *a + b);
            }
            vec![Some(full)]
        }))
    }

    /// Embedding lookup: rows of `self` (`[vocab, width]`) selected by `ids`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(invalid("embedding", format!("table must be rank 2, got {:?}", self.shape())));
        }
        self.gather_rows(ids)
    }

    /// Components `start..end` of the last axis.
    pub fn slice_last(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let d = self.last_dim();
        if self.rank() == 0 || start > end || end > d {
            return Err(invalid("slice_last", format!("range {start}..{end} out of {d}")));
        }
        let w = end - start;
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank checked") = w;
        let data = self.data().chunks(d.max(1)).flat_map(|row| row[start..end].iter().copied()).collect();
        let total = self.numel();
        Ok(Tensor::from_op(shape, data, &[self], move |g| {
            let mut full = vec![T::zero(); total];
            if w > 0 {
                for (r, src) in g.chunks(w).enumerate() {
                    full[r * d + start..r * d + end].copy_from_slice(src);
                }
            }
            vec![Some(full)]
        }))
    }

    /// `[a, b, c] -> [b, a, c]` for rank-3 tensors (head split/merge).
    pub fn swap_axes01(&self) -> Result<Tensor<T>> {
        let &[a, b, c] = self.shape() else {
            return Err(invalid("swap_axes01", format!("needs rank 3, got {:?}", self.shape())));
        };
        let data = swap01(self.data(), a, b, c);
        Ok(Tensor::from_op(vec![b, a, c], data, &[self], move |g| vec![Some(swap01(g, b, a, c))]))
    }
}

fn swap01<T: Scalar>(src: &[T], a: usize, b: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            let s = (i * b + j) * c;
            let d = (j * a + i) * c;
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    out
}
