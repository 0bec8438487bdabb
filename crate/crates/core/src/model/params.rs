use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bottleneck::entropy_model;
use crate::error::{Error, Result};
use crate::model::conv::{KERNEL, STRIDE};
use crate::scalar::Scalar;

/// Architecture knobs. Kernel and stride are fixed at 5 and 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width_n: usize,
    pub hidden_layers_m: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub input_channels: usize,
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(256, 2)
    }
}

impl ModelConfig {
    pub fn new(width_n: usize, hidden_layers_m: usize) -> Self {
        Self {
            width_n,
            hidden_layers_m,
            kernel_size: KERNEL,
            stride: STRIDE,
            input_channels: 3,
            input_size: 512,
        }
    }

    pub fn with_input_size(mut self, input_size: usize) -> Self {
        self.input_size = input_size;
        self
    }

    /// Number of stride-2 layers on each side: input conv, `M` hidden, projection.
    pub fn layer_count(&self) -> usize {
        self.hidden_layers_m + 2
    }

    pub fn downsample_factor(&self) -> usize {
        1usize << self.layer_count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_n == 0 || self.width_n > u16::MAX as usize {
            return Err(Error::Config(format!("width N={} out of range 1..=65535", self.width_n)));
        }
        if self.hidden_layers_m == 0 || self.hidden_layers_m > 16 {
            return Err(Error::Config(format!(
                "hidden layer count M={} out of range 1..=16",
                self.hidden_layers_m
            )));
        }
        if self.kernel_size != KERNEL || self.stride != STRIDE {
            return Err(Error::Config(format!(
                "kernel/stride must be {KERNEL}/{STRIDE}, got {}/{}",
                self.kernel_size, self.stride
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.downsample_factor()) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^(M+2) = {}",
                self.input_size,
                self.downsample_factor()
            )));
        }
        Ok(())
    }

    /// Latent shape `[N, h / 2^(M+2), w / 2^(M+2)]` for an image of the given size.
    pub fn latent_shape(&self, height: usize, width: usize) -> Result<[usize; 3]> {
        let f = self.downsample_factor();
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(Error::Input(format!(
                "image {width}x{height} is not divisible by 2^(M+2) = {f} (no implicit padding)"
            )));
        }
        Ok([self.width_n, height / f, width / f])
    }

    /// Channel widths through the analysis stack, input first.
    pub fn analysis_widths(&self) -> Vec<usize> {
        std::iter::once(self.input_channels)
            .chain(std::iter::repeat_n(self.width_n, self.layer_count()))
            .collect()
    }
}

/// A named parameter array with its declared shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> ParamArray<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Config(format!(
                "array of {} elements does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }
}

/// Ordered name -> array map; used for parameters, gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<S> {
    arrays: BTreeMap<String, ParamArray<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ParamArray<S>) {
        self.arrays.insert(name.into(), array);
    }

    pub fn get(&self, name: &str) -> Result<&ParamArray<S>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamArray<S>> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn data(&self, name: &str) -> Result<&[S]> {
        self.get(name).map(|a| a.data.as_slice())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamArray<S>)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamArray<S>)> {
        self.arrays.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.arrays.values().map(|a| a.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), ParamArray::zeros(&v.shape)))
                .collect(),
        }
    }

    /// Add `other` into `self` elementwise at `name`, accumulating.
    pub fn accumulate(&mut self, name: &str, values: &[S]) -> Result<()> {
        let dst = self.get_mut(name)?;
        if dst.data.len() != values.len() {
            return Err(Error::Config(format!(
                "gradient for `{name}` has {} elements, parameter has {}",
                values.len(),
                dst.data.len()
            )));
        }
        dst.data.iter_mut().zip(values).for_each(|(d, &v)| *d += v);
        Ok(())
    }

    /// `self += other` for every array present in both.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (name, array) in &other.arrays {
            self.accumulate(name, &array.data)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: S) {
        for array in self.arrays.values_mut() {
            array.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Name of the first array holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.arrays
            .iter()
            .find(|(_, a)| a.data.iter().any(|v| !v.is_finite()))
            .map(|(k, _)| k.as_str())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| {
                    let data = v.data.iter().map(|x| T::lit(x.as_f64())).collect();
                    (k.clone(), ParamArray { shape: v.shape.clone(), data })
                })
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.arrays.len() == other.arrays.len()
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape == b.shape)
    }
}

pub mod names {
    pub fn analysis_weight(i: usize) -> String {
        format!("analysis.conv{i}.weight")
    }
    pub fn analysis_bias(i: usize) -> String {
        format!("analysis.conv{i}.bias")
    }
    pub fn analysis_beta(i: usize) -> String {
        format!("analysis.gdn{i}.beta")
    }
    pub fn analysis_gamma(i: usize) -> String {
        format!("analysis.gdn{i}.gamma")
    }
    pub fn synthesis_weight(i: usize) -> String {
        format!("synthesis.tconv{i}.weight")
    }
    pub fn synthesis_bias(i: usize) -> String {
        format!("synthesis.tconv{i}.bias")
    }
    pub fn synthesis_beta(i: usize) -> String {
        format!("synthesis.igdn{i}.beta")
    }
    pub fn synthesis_gamma(i: usize) -> String {
        format!("synthesis.igdn{i}.gamma")
    }
}

/// All learned weights of one model: transforms plus entropy model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<S> {
    pub config: ModelConfig,
    pub params: ParamSet<S>,
}

impl<S: Scalar> ParameterStore<S> {
    /// Fresh parameters: variance-scaled conv kernels, zero biases,
    /// `beta = 1`, `gamma = 0.1 * I`, and the entropy model's defaults.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let widths = config.analysis_widths();
        let layers = config.layer_count();
        let taps = KERNEL * KERNEL;
        let n = config.width_n;

        for i in 0..layers {
            let (cin, cout) = (widths[i], widths[i + 1]);
            let limit = (3.0 / (cin * taps) as f64).sqrt();
            params.insert(names::analysis_weight(i), uniform(&mut rng, &[cout, cin, KERNEL, KERNEL], limit));
            params.insert(names::analysis_bias(i), ParamArray::zeros(&[cout]));
        }
        for i in 0..layers {
            // synthesis mirrors analysis: tconv i maps widths[L-i] -> widths[L-i-1]
            let (cin, cout) = (widths[layers - i], widths[layers - i - 1]);
            // each output pixel of a stride-2 transposed conv sees about a quarter of the taps
            let limit = (3.0 / (cin * taps / 4) as f64).sqrt();
            params.insert(names::synthesis_weight(i), uniform(&mut rng, &[cin, cout, KERNEL, KERNEL], limit));
            params.insert(names::synthesis_bias(i), ParamArray::zeros(&[cout]));
        }
        for i in 0..layers - 1 {
            params.insert(names::analysis_beta(i), ParamArray::from_vec(&[n], vec![S::one(); n])?);
            params.insert(names::analysis_gamma(i), scaled_identity(n, 0.1));
            params.insert(names::synthesis_beta(i), ParamArray::from_vec(&[n], vec![S::one(); n])?);
            params.insert(names::synthesis_gamma(i), scaled_identity(n, 0.1));
        }
        entropy_model::init_params(&mut params, n, &mut rng);
        Ok(Self { config, params })
    }

    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        ParameterStore {
            config: self.config,
            params: self.params.cast(),
        }
    }

    /// Check that every expected array exists with the shape implied by the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = Self::init(self.config, 0)?;
        if !reference.params.same_layout(&self.params) {
            return Err(Error::Config(
                "parameter arrays do not match the layout implied by the model config".into(),
            ));
        }
        Ok(())
    }
}

fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> ParamArray<S> {
    let count = shape.iter().product();
    let data = (0..count).map(|_| S::lit(rng.gen_range(-limit..limit))).collect();
    ParamArray {
        shape: shape.to_vec(),
        data,
    }
}

fn scaled_identity<S: Scalar>(n: usize, value: f64) -> ParamArray<S> {
    let mut data = vec![S::zero(); n * n];
    for i in 0..n {
        data[i * n + i] = S::lit(value);
    }
    ParamArray {
        shape: vec![n, n],
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(256, 2).validate().is_ok());
        assert!(ModelConfig::new(0, 2).validate().is_err());
        assert!(ModelConfig::new(8, 0).validate().is_err());
        assert!(ModelConfig::new(8, 1).with_input_size(60).validate().is_err());
        assert!(ModelConfig::new(8, 1).with_input_size(64).validate().is_ok());
        let mut bad = ModelConfig::new(8, 1);
        bad.kernel_size = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn latent_shapes_follow_layer_count() {
        assert_eq!(ModelConfig::new(256, 2).latent_shape(512, 512).unwrap(), [256, 32, 32]);
        assert_eq!(ModelConfig::new(128, 1).latent_shape(64, 64).unwrap(), [128, 8, 8]);
        assert!(ModelConfig::new(128, 1).latent_shape(64, 60).is_err());
    }

    #[test]
    fn init_layout_and_determinism() {
        let config = ModelConfig::new(4, 1).with_input_size(32);
        let a = ParameterStore::<f64>::init(config, 7).unwrap();
        let b = ParameterStore::<f64>::init(config, 7).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.params.get(&names::analysis_weight(0)).unwrap().shape, vec![4, 3, 5, 5]);
        assert_eq!(a.params.get(&names::synthesis_weight(2)).unwrap().shape, vec![4, 3, 5, 5]);
        // M + 2 convolutions on each side, M + 1 nonlinearities
        assert!(a.params.contains(&names::analysis_weight(2)));
        assert!(!a.params.contains(&names::analysis_weight(3)));
        assert!(a.params.contains(&names::synthesis_gamma(1)));
        assert!(!a.params.contains(&names::synthesis_gamma(2)));
        let gamma = a.params.data(&names::analysis_gamma(0)).unwrap();
        assert_eq!(gamma[0], 0.1);
        assert_eq!(gamma[1], 0.0);
    }
}
