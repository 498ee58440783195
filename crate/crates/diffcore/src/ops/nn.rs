//! Row-wise operations used by attention layers and the language-model loss.

use crate::error::{invalid, mismatch, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Target value that contributes nothing to [`Tensor::cross_entropy`].
pub const IGNORE_INDEX: usize = usize::MAX;

fn softmax_rows<T: Scalar>(x: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            total = total + *o;
        }
        dst.iter_mut().for_each(|o| *o = *o / total);
    }
    out
}

impl<T: Scalar> Tensor<T> {
    /// Softmax over the last axis. `-inf` entries receive probability 0.
    pub fn softmax(&self) -> Tensor<T> {
        let d = self.last_dim().max(1);
        let y = softmax_rows(self.data(), d);
        let out = y.clone();
        Tensor::from_op(self.shape().to_vec(), y, &[self], move |g| {
            let mut gx = vec![T::zero(); g.len()];
            for ((gr, yr), dst) in g.chunks(d).zip(out.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalization over the last axis with elementwise gain and bias.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let d = self.last_dim();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(mismatch("layer_norm", self.shape(), gain.shape()));
        }
        let n = T::lit(d as f64);
        let rows = self.numel() / d.max(1);
        let mut xhat = vec![T::zero(); self.numel()];
        let mut inv_std = vec![T::zero(); rows];
        for (r, row) in self.data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            inv_std[r] = s;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let (gw, bw) = (gain.data(), bias.data());
        let y = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gw[i % d] + bw[i % d])
            .collect();
        let gain_in = gain.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), y, &[self, gain, bias], move |g| {
            let gw = gain_in.data();
            let mut gx = vec![T::zero(); g.len()];
            let mut g_gain = vec![T::zero(); d];
            let mut g_bias = vec![T::zero(); d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut mean_gh = T::zero();
                let mut mean_ghh = T::zero();
                for j in 0..d {
                    g_gain[j] = g_gain[j] + gr[j] * hr[j];
                    g_bias[j] = g_bias[j] + gr[j];
                    let gh = gr[j] * gw[j];
                    mean_gh = mean_gh + gh;
                    mean_ghh = mean_ghh + gh * hr[j];
                }
                mean_gh = mean_gh / n;
                mean_ghh = mean_ghh / n;
                for j in 0..d {
                    let gh = gr[j] * gw[j];
                    gx[r * d + j] = inv_std[r] * (gh - mean_gh - hr[j] * mean_ghh);
                }
            }
            vec![Some(gx), Some(g_gain), Some(g_bias)]
        }))
    }

    /// Mean token cross-entropy of `[n, classes]` logits against class
    /// indices; rows whose target is [`IGNORE_INDEX`] are skipped. Returns 0
    /// when every row is ignored.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor<T>> {
        let &[n, classes] = self.shape() else {
            return Err(invalid("cross_entropy", format!("logits must be rank 2, got {:?}", self.shape())));
        };
        if targets.len() != n {
            return Err(mismatch("cross_entropy", self.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE_INDEX && t >= classes) {
            return Err(invalid("cross_entropy", format!("target {bad} out of {classes} classes")));
        }
        let count = targets.iter().filter(|&&t| t != IGNORE_INDEX).count();
        if count == 0 {
            return Ok(Tensor::from_op(Vec::new(), vec![T::zero()], &[self], move |_| vec![None]));
        }
        let probs = softmax_rows(self.data(), classes);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t != IGNORE_INDEX {
                total = total - probs[r * classes + t].max(T::min_positive_value()).ln();
            }
        }
        let scale = T::one() / T::lit(count as f64);
        let tgt = targets.to_vec();
        Ok(Tensor::from_op(Vec::new(), vec![total * scale], &[self], move |g| {
            let mut gx = vec![T::zero(); probs.len()];
            for (r, &t) in tgt.iter().enumerate() {
                if t == IGNORE_INDEX {
                    continue;
                }
                let row = &mut gx[r * classes..(r + 1) * classes];
                row.copy_from_slice(&probs[r * classes..(r + 1) * classes]);
                row[t] = row[t] - T::one();
                row.iter_mut().for_each(|v| *v = *v * scale * g[0]);
            }
            vec![Some(gx)]
        }))
    }

    /// Rotary position encoding on `[..., seq, d]`: each interleaved pair
    /// `(2i, 2i+1)` of row `p` is rotated by `p / base^(2i/d)`.
    pub fn rotary(&self, base: f64) -> Result<Tensor<T>> {
        self.rotary_at(base, 0)
    }

    /// [`Tensor::rotary`] with positions starting at `offset` (incremental decoding).
    pub fn rotary_at(&self, base: f64, offset: usize) -> Result<Tensor<T>> {
        if self.rank() < 2 || self.last_dim() % 2 != 0 {
            return Err(invalid("rotary", format!("needs rank >= 2 and even last axis, got {:?}", self.shape())));
        }
        let d = self.last_dim();
        let seq = self.shape()[self.rank() - 2];
        let mut cos = vec![T::zero(); seq * d / 2];
        let mut sin = vec![T::zero(); seq * d / 2];
        for p in 0..seq {
            for i in 0..d / 2 {
                let theta = (p + offset) as f64 / base.powf(2.0 * i as f64 / d as f64);
                cos[p * d / 2 + i] = T::lit(theta.cos());
                sin[p * d / 2 + i] = T::lit(theta.sin());
            }
        }
        let rotate = move |src: &[T], sign: T, cos: &[T], sin: &[T]| {
            let mut out = vec![T::zero(); src.len()];
            for (r, (row, dst)) in src.chunks(d).zip(out.chunks_mut(d)).enumerate() {
                let p = r % seq;
                for i in 0..d / 2 {
                    let (c, s) = (cos[p * d / 2 + i], sign * sin[p * d / 2 + i]);
                    let (x0, x1) = (row[2 * i], row[2 * i + 1]);
                    dst[2 * i] = x0 * c - x1 * s;
                    dst[2 * i + 1] = x0 * s + x1 * c;
                }
            }
            out
        };
        let y = rotate(self.data(), T::one(), &cos, &sin);
        Ok(Tensor::from_op(self.shape().to_vec(), y, &[self], move |g| {
            vec![Some(rotate(g, -T::one(), &cos, &sin))]
        }))
    }

    /// Sets entries above the diagonal of the trailing `[L, L]` blocks to `-inf`.
    pub fn causal_mask(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(invalid("causal_mask", format!("needs square trailing block, got {s:?}")));
        }
        let l = s[s.len() - 1];
        let masked = move |i: usize| {
            let within = i % (l * l);
            within % l > within / l
        };
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if masked(i) { T::neg_infinity() } else { v })
            .collect();
        Ok(Tensor::from_op(s.to_vec(), data, &[self], move |g| {
            vec![Some(g.iter().enumerate().map(|(i, &v)| if masked(i) { T::zero() } else { v }).collect())]
        }))
    }
}
