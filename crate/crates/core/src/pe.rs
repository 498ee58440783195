//! Universal 3D sine-cosine positional encoding, its learnable scale and
//! additive injection, and the learned coordinate decoder.
//!
//! The encoding concatenates three 1D sinusoidal encodings, one per axis, of
//! widths `d_x = d_y = ceil(dim / 3)` and `d_z = dim - d_x - d_y`. Within an
//! axis of width `d`, pair `i` holds `sin(p / base^(2i/d))` and
//! `cos(p / base^(2i/d))`. When `d` is odd the final unpaired slot holds the
//! sine of the next frequency index, `sin(p / base^(2·(d/2)/d))`.

use serde::{Deserialize, Serialize};
use spacetoken_diff::{Bindings, ParameterStore, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::geometry::Coordinate3D;
use crate::nn::Mlp2;

pub const DEFAULT_BASE: f64 = 20_000.0;
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const ALPHA_PARAM: &str = "pe.alpha";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeConfig {
    pub dim: usize,
    pub base: f64,
}

impl PeConfig {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        let cfg = Self { dim, base };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_dim(dim: usize) -> Result<Self> {
        Self::new(dim, DEFAULT_BASE)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base.is_finite() && self.base > 1.0) {
            return Err(Error::Encoding(format!("frequency base must exceed 1, got {}", self.base)));
        }
        let [_, _, dz] = split_widths(self.dim);
        if dz < 2 {
            return Err(Error::Encoding(format!("dim {} leaves a z block of width {dz} (< 2)", self.dim)));
        }
        Ok(())
    }

    /// `[d_x, d_y, d_z]`.
    pub fn axis_widths(&self) -> [usize; 3] {
        split_widths(self.dim)
    }

    /// Start offset of the z block.
    pub fn z_offset(&self) -> usize {
        let [dx, dy, _] = self.axis_widths();
        dx + dy
    }
}

fn split_widths(dim: usize) -> [usize; 3] {
    let dxy = dim.div_ceil(3);
    [dxy, dxy, dim.saturating_sub(2 * dxy)]
}

/// Appends the 1D encoding of `p` with width `d`.
fn encode_axis(p: f64, d: usize, base: f64, out: &mut Vec<f64>) {
    let denom = d as f64;
    for i in 0..d / 2 {
        let angle = p / base.powf(2.0 * i as f64 / denom);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    if d % 2 == 1 {
        let i = d / 2;
        out.push((p / base.powf(2.0 * i as f64 / denom)).sin());
    }
}

/// Encoding vector plus the BEV flag.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialEncoding {
    pub values: Vec<f64>,
    pub bev: bool,
}

impl SpatialEncoding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub fn encode(c: Coordinate3D, cfg: &PeConfig) -> Result<SpatialEncoding> {
    if !c.is_finite() {
        return Err(Error::Encoding(format!("non-finite coordinate {c:?}")));
    }
    let [dx, dy, dz] = cfg.axis_widths();
    let mut values = Vec::with_capacity(cfg.dim);
    encode_axis(c.x, dx, cfg.base, &mut values);
    encode_axis(c.y, dy, cfg.base, &mut values);
    encode_axis(c.z, dz, cfg.base, &mut values);
    Ok(SpatialEncoding { values, bev: false })
}

/// Ground-plane encoding: the z block is zeroed, not encoded at z = 0.
pub fn encode_bev(x: f64, y: f64, cfg: &PeConfig) -> Result<SpatialEncoding> {
    let mut enc = encode(Coordinate3D::bev(x, y), cfg)?;
    let z0 = cfg.z_offset();
    enc.values[z0..].iter_mut().for_each(|v| *v = 0.0);
    enc.bev = true;
    Ok(enc)
}

/// Encodes `coords` into a constant `[n, dim]` tensor, BEV-zeroing when asked.
pub fn encoding_matrix<T: Scalar>(coords: &[Coordinate3D], bev: bool, cfg: &PeConfig) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(coords.len() * cfg.dim);
    for c in coords {
        let enc = if bev { encode_bev(c.x, c.y, cfg)? } else { encode(*c, cfg)? };
        data.extend(enc.values.iter().map(|&v| T::lit(v)));
    }
    Ok(Tensor::new(&[coords.len(), cfg.dim], data)?)
}

/// The shared scale applied to every injected encoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeScale {
    pub init: f64,
    pub learnable: bool,
}

impl Default for PeScale {
    fn default() -> Self {
        Self { init: DEFAULT_ALPHA, learnable: true }
    }
}

impl PeScale {
    pub fn fixed(value: f64) -> Self {
        Self { init: value, learnable: false }
    }

    /// Registers `pe.alpha` when learnable; a fixed scale owns no parameter.
    pub fn register<T: Scalar>(&self, store: &mut ParameterStore<T>) -> Result<()> {
        if self.learnable {
            store.insert(ALPHA_PARAM, &[1], vec![T::lit(self.init)])?;
        }
        Ok(())
    }

    /// Current value as a one-element tensor (a leaf when learnable).
    pub fn tensor<T: Scalar>(&self, params: &Bindings<T>) -> Result<Tensor<T>> {
        if self.learnable {
            Ok(params.get(ALPHA_PARAM)?.clone())
        } else {
            Ok(Tensor::new(&[1], vec![T::lit(self.init)])?)
        }
    }
}

/// `h_p + alpha * phi(c_p)` for every token row.
pub fn inject<T: Scalar>(tokens: &Tensor<T>, coords: &[Coordinate3D], alpha: &Tensor<T>, cfg: &PeConfig) -> Result<Tensor<T>> {
    if tokens.rank() != 2 || tokens.shape()[1] != cfg.dim {
        return Err(Error::Encoding(format!(
            "token shape {:?} does not match encoding width {}",
            tokens.shape(),
            cfg.dim
        )));
    }
    if tokens.shape()[0] != coords.len() {
        return Err(Error::Encoding(format!("{} tokens but {} coordinates", tokens.shape()[0], coords.len())));
    }
    let phi = encoding_matrix::<T>(coords, false, cfg)?;
    Ok(tokens.add(&phi.mul(alpha)?)?)
}

/// Metres per decoder output unit.
pub const DECODER_SCALE: f64 = 10.0;

/// Two-layer perceptron mapping a hidden state to a metric coordinate,
/// read out in units of [`DECODER_SCALE`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeDecoder {
    pub mlp: Mlp2,
    pub scale: f64,
}

impl PeDecoder {
    pub const PREFIX: &'static str = "psi";

    pub fn new(input: usize, hidden: usize) -> Self {
        Self { mlp: Mlp2::new(Self::PREFIX, input, hidden, 3), scale: DECODER_SCALE }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParameterStore<T>, rng: &mut impl rand::Rng) -> Result<()> {
        self.mlp.register(store, rng)
    }

    /// `[n, input] -> [n, 3]`.
    pub fn forward<T: Scalar>(&self, params: &Bindings<T>, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.mlp.forward(params, hidden)?.mul_const(T::lit(self.scale)))
    }

    /// Decodes one hidden vector.
    pub fn decode<T: Scalar>(&self, params: &Bindings<T>, hidden: &[T]) -> Result<Coordinate3D> {
        let row = Tensor::new(&[1, hidden.len()], hidden.to_vec())?;
        let out = self.forward(params, &row)?;
        let v = out.data();
        Ok(Coordinate3D::new(v[0].as_f64(), v[1].as_f64(), v[2].as_f64()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg6() -> PeConfig {
        PeConfig::with_dim(6).unwrap()
    }

    #[test]
    fn origin_encodes_to_sin0_cos0() {
        let e = encode(Coordinate3D::new(0.0, 0.0, 0.0), &cfg6()).unwrap();
        assert_eq!(e.values, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(!e.bev);
    }

    #[test]
    fn bev_zeroes_rather_than_encodes_zero() {
        let e = encode_bev(0.0, 0.0, &cfg6()).unwrap();
        assert_eq!(e.values, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(e.bev);
        let e = encode_bev(5.0, -2.0, &cfg6()).unwrap();
        let expected = [5f64.sin(), 5f64.cos(), (-2f64).sin(), (-2f64).cos(), 0.0, 0.0];
        assert_eq!(e.values, expected);
    }

    #[test]
    fn split_widths_follow_ceil_rule() {
        assert_eq!(PeConfig::with_dim(8).unwrap().axis_widths(), [3, 3, 2]);
        assert_eq!(PeConfig::with_dim(64).unwrap().axis_widths(), [22, 22, 20]);
        assert_eq!(PeConfig::with_dim(128).unwrap().axis_widths(), [43, 43, 42]);
        assert_eq!(PeConfig::with_dim(2048).unwrap().axis_widths(), [683, 683, 682]);
    }

    #[test]
    fn degenerate_dims_rejected() {
        assert!(PeConfig::with_dim(7).is_err());
        assert!(PeConfig::with_dim(4).is_err());
        assert!(PeConfig::new(64, 1.0).is_err());
    }

    #[test]
    fn odd_axis_gets_trailing_sine() {
        // dim 8: d_x = 3 -> [sin(p), cos(p), sin(p / base^(2/3))].
        let cfg = PeConfig::with_dim(8).unwrap();
        let e = encode(Coordinate3D::new(2.0, 0.0, 0.0), &cfg).unwrap();
        assert_eq!(e.values[2], (2.0 / DEFAULT_BASE.powf(2.0 / 3.0)).sin());
        assert_eq!(e.values.len(), 8);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(encode(Coordinate3D::new(f64::NAN, 0.0, 0.0), &cfg6()).is_err());
        assert!(encode_bev(f64::INFINITY, 0.0, &cfg6()).is_err());
    }

    #[test]
    fn zero_scale_is_identity() {
        let h = Tensor::<f64>::new(&[2, 6], (0..12).map(f64::from).collect()).unwrap();
        let alpha = Tensor::new(&[1], vec![0.0]).unwrap();
        let coords = [Coordinate3D::new(1.0, 2.0, 3.0), Coordinate3D::new(-4.0, 0.5, 9.0)];
        assert_eq!(inject(&h, &coords, &alpha, &cfg6()).unwrap().data(), h.data());
    }

    #[test]
    fn inject_all_ones() {
        let h = Tensor::<f64>::new(&[1, 6], vec![1.0; 6]).unwrap();
        let alpha = Tensor::new(&[1], vec![0.1]).unwrap();
        let out = inject(&h, &[Coordinate3D::default()], &alpha, &cfg6()).unwrap();
        assert_eq!(out.data(), &[1.0, 1.1, 1.0, 1.1, 1.0, 1.1]);
    }

    #[test]
    fn inject_width_mismatch_rejected() {
        let h = Tensor::<f64>::zeros(&[1, 8]);
        let alpha = Tensor::new(&[1], vec![0.1]).unwrap();
        assert!(inject(&h, &[Coordinate3D::default()], &alpha, &cfg6()).is_err());
    }

    #[test]
    fn zero_decoder_outputs_origin() {
        let dec = PeDecoder::new(6, 4);
        let mut store = ParameterStore::<f64>::new();
        dec.register(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        store.iter_mut().for_each(|(_, p)| p.data.iter_mut().for_each(|v| *v = 0.0));
        let c = dec.decode(&store.bind(), &[0.3; 6]).unwrap();
        assert_eq!(c, Coordinate3D::default());
    }

    #[test]
    fn scale_registration() {
        let mut store = ParameterStore::<f32>::new();
        PeScale::fixed(0.02).register(&mut store).unwrap();
        assert!(store.is_empty());
        PeScale::default().register(&mut store).unwrap();
        assert_eq!(store.get(ALPHA_PARAM).unwrap().data, vec![0.1]);
        assert!(PeScale::default().register(&mut store).is_err());
    }
}
