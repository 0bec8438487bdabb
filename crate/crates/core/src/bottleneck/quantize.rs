use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{LatentTensor, Tensor3};

/// Integer latent produced by inference-mode quantization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedLatent {
    pub shape: [usize; 3],
    pub symbols: Vec<i32>,
}

impl QuantizedLatent {
    pub fn new(shape: [usize; 3], symbols: Vec<i32>) -> Result<Self> {
        if shape.iter().product::<usize>() != symbols.len() {
            return Err(Error::Input(format!(
                "{} symbols do not fill latent shape {shape:?}",
                symbols.len()
            )));
        }
        Ok(Self { shape, symbols })
    }

    pub fn plane_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn channel_of(&self, index: usize) -> usize {
        index / self.plane_len().max(1)
    }
}

/// Training-mode proxy: `y + u`, `u ~ U[-0.5, 0.5)` i.i.d. The gradient is the identity.
pub fn quantize_train<S: Scalar, R: Rng + ?Sized>(y: &LatentTensor<S>, rng: &mut R) -> LatentTensor<S> {
    y.map(|v| v + S::lit(rng.gen_range(-0.5..0.5)))
}

/// Round half away from zero (the coder's fixed tie rule).
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Inference-mode quantization: `round(y - offset_c)` per channel `c`.
pub fn quantize_eval<S: Scalar>(y: &LatentTensor<S>, offsets: &[f64]) -> Result<QuantizedLatent> {
    if offsets.len() != y.channels() {
        return Err(Error::Config(format!(
            "{} quantization offsets for a {}-channel latent",
            offsets.len(),
            y.channels()
        )));
    }
    let plane = y.plane_len();
    let mut symbols = Vec::with_capacity(y.len());
    for (i, &v) in y.as_slice().iter().enumerate() {
        let q = round_half_away(v.as_f64() - offsets[i / plane]);
        if !q.is_finite() || q.abs() > i32::MAX as f64 {
            return Err(Error::Numeric(format!("latent element {i} cannot be quantized: {v:?}")));
        }
        symbols.push(q as i32);
    }
    QuantizedLatent::new(y.shape(), symbols)
}

/// Map symbols back onto latent values `symbol + offset_c`.
pub fn dequantize<S: Scalar>(q: &QuantizedLatent, offsets: &[f64]) -> Result<LatentTensor<S>> {
    let [c, h, w] = q.shape;
    if offsets.len() != c {
        return Err(Error::Config(format!("{} offsets for a {c}-channel latent", offsets.len())));
    }
    let plane = h * w;
    let data = q
        .symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| S::lit(s as f64 + offsets[i / plane]))
        .collect();
    Tensor3::from_vec(c, h, w, data)
}
