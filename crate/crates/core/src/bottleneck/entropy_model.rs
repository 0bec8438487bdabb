//! Fully factorized learned density over latent values, one per channel.
//!
//! Each channel's cumulative is `c(v) = sigmoid(f(v))` where `f` is a chain
//! of four small affine stages `1 -> 3 -> 3 -> 3 -> 1`. Stage matrices pass
//! through softplus and the gate factors through tanh, so every stage is
//! monotone increasing and `c` is a valid CDF.
//!
//! Likelihood of a (quantized or noisy) value: `p(v) = c(v + 1/2) - c(v - 1/2)`,
//! floored at [`LIKELIHOOD_FLOOR`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::params::{ParamArray, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{LatentTensor, Tensor3};

/// Hidden widths of the per-channel density network.
pub const FILTERS: [usize; 3] = [3, 3, 3];
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;
pub const TAIL_MASS: f64 = 1e-9;
const INIT_SCALE: f64 = 10.0;
const STAGES: usize = FILTERS.len() + 1;
const W: usize = 3;

pub fn matrix_name(k: usize) -> String {
    format!("entropy.matrix{k}")
}

pub fn bias_name(k: usize) -> String {
    format!("entropy.bias{k}")
}

pub fn factor_name(k: usize) -> String {
    format!("entropy.factor{k}")
}

fn stage_dims(k: usize) -> (usize, usize) {
    let dims = [1, FILTERS[0], FILTERS[1], FILTERS[2], 1];
    (dims[k + 1], dims[k])
}

/// Register the entropy model's raw parameters for `channels` latent channels.
pub(crate) fn init_params<S: Scalar, R: Rng>(params: &mut ParamSet<S>, channels: usize, rng: &mut R) {
    let scale = INIT_SCALE.powf(1.0 / STAGES as f64);
    for k in 0..STAGES {
        let (rows, cols) = stage_dims(k);
        let init = (1.0 / scale / rows as f64).exp_m1().ln();
        params.insert(
            matrix_name(k),
            ParamArray {
                shape: vec![channels, rows, cols],
                data: vec![S::lit(init); channels * rows * cols],
            },
        );
        params.insert(
            bias_name(k),
            ParamArray {
                shape: vec![channels, rows],
                data: (0..channels * rows).map(|_| S::lit(rng.gen_range(-0.5..0.5))).collect(),
            },
        );
        if k + 1 < STAGES {
            params.insert(factor_name(k), ParamArray::zeros(&[channels, rows]));
        }
    }
}

#[inline]
fn softplus<S: Scalar>(x: S) -> S {
    // log(1 + e^x), stable for large |x|
    if x > S::lit(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[derive(Debug, Clone, Copy)]
struct Stage<S> {
    rows: usize,
    cols: usize,
    /// softplus(raw matrix)
    m: [[S; W]; W],
    /// d softplus / d raw = sigmoid(raw)
    dm: [[S; W]; W],
    b: [S; W],
    /// tanh(raw factor)
    f: [S; W],
    /// 1 - tanh^2(raw factor)
    df: [S; W],
}

#[derive(Debug, Clone, Copy)]
struct Trace<S> {
    inputs: [[S; W]; STAGES],
    pre: [[S; W]; STAGES],
}

/// Per-stage gradients in effective-parameter space.
#[derive(Debug, Clone, Copy)]
struct StageGrads<S> {
    m: [[S; W]; W],
    b: [S; W],
    f: [S; W],
}

#[derive(Debug, Clone)]
struct ChannelDensity<S> {
    stages: [Stage<S>; STAGES],
}

// small fixed-size stage matrices read clearer with explicit indices
#[allow(clippy::needless_range_loop)]
impl<S: Scalar> ChannelDensity<S> {
    fn logits_traced(&self, v: S) -> (S, Trace<S>) {
        let z = S::zero();
        let mut trace = Trace {
            inputs: [[z; W]; STAGES],
            pre: [[z; W]; STAGES],
        };
        let mut h = [z; W];
        h[0] = v;
        for (k, st) in self.stages.iter().enumerate() {
            trace.inputs[k] = h;
            let mut out = [z; W];
            for (r, o) in out.iter_mut().enumerate().take(st.rows) {
                let mut acc = st.b[r];
                for c in 0..st.cols {
                    acc += st.m[r][c] * h[c];
                }
                *o = acc;
            }
            trace.pre[k] = out;
            if k + 1 < STAGES {
                for r in 0..st.rows {
                    out[r] += st.f[r] * out[r].tanh();
                }
            }
            h = out;
        }
        (h[0], trace)
    }

    fn logits(&self, v: S) -> S {
        self.logits_traced(v).0
    }

    /// Backprop `d_out` (gradient w.r.t. the logit) to the input value and
    /// accumulate effective-parameter gradients into `acc`.
    fn backward(&self, trace: &Trace<S>, d_out: S, acc: &mut [StageGrads<S>; STAGES]) -> S {
        let z = S::zero();
        let mut g = [z; W];
        g[0] = d_out;
        for k in (0..STAGES).rev() {
            let st = &self.stages[k];
            // through the gate: h = z + f * tanh(z)
            if k + 1 < STAGES {
                for r in 0..st.rows {
                    let t = trace.pre[k][r].tanh();
                    acc[k].f[r] += g[r] * t;
                    g[r] *= S::one() + st.f[r] * (S::one() - t * t);
                }
            }
            let input = &trace.inputs[k];
            let mut g_in = [z; W];
            for r in 0..st.rows {
                acc[k].b[r] += g[r];
                for c in 0..st.cols {
                    acc[k].m[r][c] += g[r] * input[c];
                    g_in[c] += st.m[r][c] * g[r];
                }
            }
            g = g_in;
        }
        g[0]
    }
}

/// Effective entropy-model parameters for all channels.
#[derive(Debug, Clone)]
pub struct FactorizedEntropyModel<S> {
    channels: Vec<ChannelDensity<S>>,
}

/// Per-channel cumulative distribution over real-valued latents.
pub trait ChannelCdf<S: Scalar> {
    fn channels(&self) -> usize;

    fn cdf(&self, channel: usize, v: S) -> S;

    /// Unfloored probability of the unit bin centred on `v`.
    fn bin_mass(&self, channel: usize, v: S) -> S {
        let half = S::lit(0.5);
        self.cdf(channel, v + half) - self.cdf(channel, v - half)
    }
}

impl<S: Scalar> ChannelCdf<S> for FactorizedEntropyModel<S> {
    fn channels(&self) -> usize {
        self.channels.len()
    }

    fn cdf(&self, channel: usize, v: S) -> S {
        sigmoid(self.logits(channel, v))
    }

    fn bin_mass(&self, channel: usize, v: S) -> S {
        let half = S::lit(0.5);
        let d = &self.channels[channel];
        bin_probability(d.logits(v - half), d.logits(v + half)).0
    }
}

fn check_latent<S: Scalar>(latent: &LatentTensor<S>, channels: usize) -> Result<()> {
    if latent.channels() != channels {
        return Err(Error::Config(format!(
            "latent has {} channels, entropy model has {channels}",
            latent.channels(),
        )));
    }
    if let Some(i) = latent.as_slice().iter().position(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("NaN in latent element {i}")));
    }
    Ok(())
}

/// `p(v) = c(v + 1/2) - c(v - 1/2)` per element, floored at [`LIKELIHOOD_FLOOR`].
pub fn likelihood<S: Scalar, M: ChannelCdf<S> + ?Sized>(latent: &LatentTensor<S>, model: &M) -> Result<Tensor3<S>> {
    check_latent(latent, model.channels())?;
    let plane = latent.plane_len();
    let floor = S::lit(LIKELIHOOD_FLOOR);
    let data = latent
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| model.bin_mass(i / plane, v).max(floor).min(S::one()))
        .collect();
    Tensor3::from_vec(latent.channels(), latent.height(), latent.width(), data)
}

/// Sign-stable `p = c(upper) - c(lower)` from logits, with its partials.
#[inline]
fn bin_probability<S: Scalar>(lower: S, upper: S) -> (S, S, S) {
    // evaluate on the side of the sigmoid with smaller magnitude for accuracy
    let s = if lower + upper > S::zero() { -S::one() } else { S::one() };
    let p = (sigmoid(s * upper) - sigmoid(s * lower)).abs();
    let su = sigmoid(upper);
    let sl = sigmoid(lower);
    (p, su * (S::one() - su), -(sl * (S::one() - sl)))
}

impl<S: Scalar> FactorizedEntropyModel<S> {
    pub fn from_params(params: &ParamSet<S>) -> Result<Self> {
        let m0 = params.get(&matrix_name(0))?;
        let channels = m0.shape[0];
        let z = S::zero();
        let mut out = Vec::with_capacity(channels);
        for ch in 0..channels {
            let mut stages = [Stage {
                rows: 0,
                cols: 0,
                m: [[z; W]; W],
                dm: [[z; W]; W],
                b: [z; W],
                f: [z; W],
                df: [z; W],
            }; STAGES];
            for (k, st) in stages.iter_mut().enumerate() {
                let (rows, cols) = stage_dims(k);
                st.rows = rows;
                st.cols = cols;
                let m = params.get(&matrix_name(k))?;
                let b = params.get(&bias_name(k))?;
                if m.shape != [channels, rows, cols] || b.shape != [channels, rows] {
                    return Err(Error::Config(format!("entropy stage {k} has unexpected shape")));
                }
                for r in 0..rows {
                    for c in 0..cols {
                        let raw = m.data[(ch * rows + r) * cols + c];
                        st.m[r][c] = softplus(raw);
                        st.dm[r][c] = sigmoid(raw);
                    }
                    st.b[r] = b.data[ch * rows + r];
                }
                if k + 1 < STAGES {
                    let f = params.get(&factor_name(k))?;
                    if f.shape != [channels, rows] {
                        return Err(Error::Config(format!("entropy factor {k} has unexpected shape")));
                    }
                    for r in 0..rows {
                        let t = f.data[ch * rows + r].tanh();
                        st.f[r] = t;
                        st.df[r] = S::one() - t * t;
                    }
                }
            }
            out.push(ChannelDensity { stages });
        }
        if out
            .iter()
            .any(|d| d.stages.iter().any(|s| s.m.iter().flatten().chain(&s.b).chain(&s.f).any(|v| !v.is_finite())))
        {
            return Err(Error::Numeric("entropy model parameters are not finite".into()));
        }
        Ok(Self { channels: out })
    }

    /// Logit of the cumulative, `f(v)`, for one channel.
    pub fn logits(&self, channel: usize, v: S) -> S {
        self.channels[channel].logits(v)
    }

    /// Per-element likelihoods of a latent, floored at [`LIKELIHOOD_FLOOR`].
    pub fn likelihood(&self, latent: &LatentTensor<S>) -> Result<Tensor3<S>> {
        likelihood(latent, self)
    }

    /// Total bits `sum -log2 p(v)` plus gradients.
    ///
    /// Gradients are scaled by `scale`: raw-parameter gradients are added into
    /// `grads`, and the returned tensor holds the gradient w.r.t. the latent.
    pub fn rate_with_grads(
        &self,
        latent: &LatentTensor<S>,
        params: &ParamSet<S>,
        grads: &mut ParamSet<S>,
        scale: S,
    ) -> Result<(S, Tensor3<S>)> {
        check_latent(latent, self.channels())?;
        let plane = latent.plane_len();
        let half = S::lit(0.5);
        let floor = S::lit(LIKELIHOOD_FLOOR);
        let inv_ln2 = S::one() / S::lit(std::f64::consts::LN_2);
        let z = S::zero();
        let zero_grads = StageGrads {
            m: [[z; W]; W],
            b: [z; W],
            f: [z; W],
        };
        let mut bits = S::zero();
        let mut grad_latent = Vec::with_capacity(latent.len());
        let mut channel_grads = vec![[zero_grads; STAGES]; self.channels()];

        for (i, &v) in latent.as_slice().iter().enumerate() {
            let ch = i / plane;
            let density = &self.channels[ch];
            let (lower, tl) = density.logits_traced(v - half);
            let (upper, tu) = density.logits_traced(v + half);
            let (p, dp_du, dp_dl) = bin_probability(lower, upper);
            let pf = p.max(floor);
            bits += -pf.ln() * inv_ln2;
            // d bits / d p; the floor passes gradient through (it only pushes p upward)
            let d_p = -inv_ln2 / pf * scale;
            let acc = &mut channel_grads[ch];
            let dv_u = density.backward(&tu, d_p * dp_du, acc);
            let dv_l = density.backward(&tl, d_p * dp_dl, acc);
            grad_latent.push(dv_u + dv_l);
        }

        self.accumulate_raw_grads(params, grads, &channel_grads)?;
        let grad = Tensor3::from_vec(latent.channels(), latent.height(), latent.width(), grad_latent)?;
        Ok((bits, grad))
    }

    fn accumulate_raw_grads(
        &self,
        params: &ParamSet<S>,
        grads: &mut ParamSet<S>,
        channel_grads: &[[StageGrads<S>; STAGES]],
    ) -> Result<()> {
        let channels = self.channels();
        for k in 0..STAGES {
            let (rows, cols) = stage_dims(k);
            let mut gm = vec![S::zero(); channels * rows * cols];
            let mut gb = vec![S::zero(); channels * rows];
            let mut gf = vec![S::zero(); channels * rows];
            for (ch, (density, g)) in self.channels.iter().zip(channel_grads).enumerate() {
                let st = &density.stages[k];
                for r in 0..rows {
                    for c in 0..cols {
                        gm[(ch * rows + r) * cols + c] = g[k].m[r][c] * st.dm[r][c];
                    }
                    gb[ch * rows + r] = g[k].b[r];
                    gf[ch * rows + r] = g[k].f[r] * st.df[r];
                }
            }
            debug_assert!(params.contains(&matrix_name(k)));
            grads.accumulate(&matrix_name(k), &gm)?;
            grads.accumulate(&bias_name(k), &gb)?;
            if k + 1 < STAGES {
                grads.accumulate(&factor_name(k), &gf)?;
            }
        }
        Ok(())
    }
}

/// Shannon bits of a set of (already floored) likelihoods.
pub fn bits_from_likelihoods<S: Scalar>(likelihoods: &[S]) -> S {
    let inv_ln2 = S::one() / S::lit(std::f64::consts::LN_2);
    likelihoods.iter().map(|&p| -p.ln() * inv_ln2).sum()
}

/// `sum_e -log2 p(y_e)` under the model.
pub fn rate_bits<S: Scalar, M: ChannelCdf<S> + ?Sized>(latent: &LatentTensor<S>, model: &M) -> Result<S> {
    let likelihoods = likelihood(latent, model)?;
    Ok(bits_from_likelihoods(likelihoods.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(channels: usize, seed: u64) -> (ParamSet<f64>, FactorizedEntropyModel<f64>) {
        let mut params = ParamSet::new();
        init_params(&mut params, channels, &mut ChaCha8Rng::seed_from_u64(seed));
        let m = FactorizedEntropyModel::from_params(&params).unwrap();
        (params, m)
    }

    #[test]
    fn cdf_is_monotone_and_bounded() {
        let (_, m) = model(3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ch in 0..3 {
            assert!(m.cdf(ch, -1e4) < 1e-9);
            assert!(m.cdf(ch, 1e4) > 1.0 - 1e-9);
            for _ in 0..2000 {
                let a: f64 = rng.gen_range(-50.0..50.0);
                let b: f64 = rng.gen_range(-50.0..50.0);
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                assert!(m.cdf(ch, lo) <= m.cdf(ch, hi));
            }
        }
    }

    #[test]
    fn likelihoods_are_floored_and_at_most_one() {
        let (_, m) = model(2, 9);
        let latent = Tensor3::from_fn(2, 3, 3, |c, y, x| (c as f64 - 0.5) * 40.0 * y as f64 + x as f64);
        let p = m.likelihood(&latent).unwrap();
        assert!(p.as_slice().iter().all(|&v| (LIKELIHOOD_FLOOR..=1.0).contains(&v)));
    }

    #[test]
    fn nan_latent_is_numeric_error() {
        let (_, m) = model(1, 1);
        let latent = Tensor3::from_vec(1, 1, 2, vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(m.likelihood(&latent), Err(Error::Numeric(_))));
    }

    #[test]
    fn rate_with_grads_agrees_with_rate_bits() {
        let (params, m) = model(2, 4);
        let latent = Tensor3::from_fn(2, 2, 3, |c, y, x| c as f64 * 0.7 - y as f64 * 1.1 + x as f64 * 0.4);
        let mut grads = params.zeros_like();
        let (bits, _) = m.rate_with_grads(&latent, &params, &mut grads, 1.0).unwrap();
        let direct = rate_bits(&latent, &m).unwrap();
        assert!((bits - direct).abs() < 1e-12);
        assert!(bits > 0.0);
    }

    struct UniformBox;

    impl ChannelCdf<f64> for UniformBox {
        fn channels(&self) -> usize {
            1
        }
        fn cdf(&self, _: usize, v: f64) -> f64 {
            (v + 0.5).clamp(0.0, 1.0)
        }
    }

    struct Logistic;

    impl ChannelCdf<f64> for Logistic {
        fn channels(&self) -> usize {
            1
        }
        fn cdf(&self, _: usize, v: f64) -> f64 {
            sigmoid(v / 1.7)
        }
    }

    #[test]
    fn likelihood_of_reference_cdfs() {
        let zero = Tensor3::from_vec(1, 1, 1, vec![0.0]).unwrap();
        assert_eq!(likelihood(&zero, &UniformBox).unwrap().as_slice(), &[1.0]);
        let far = Tensor3::from_vec(1, 1, 1, vec![3.0]).unwrap();
        assert_eq!(likelihood(&far, &UniformBox).unwrap().as_slice(), &[LIKELIHOOD_FLOOR]);
        for v in [0.5, 1.0, 2.0, 7.0] {
            let pos = likelihood(&Tensor3::from_vec(1, 1, 1, vec![v]).unwrap(), &Logistic).unwrap();
            let neg = likelihood(&Tensor3::from_vec(1, 1, 1, vec![-v]).unwrap(), &Logistic).unwrap();
            assert!((pos.as_slice()[0] - neg.as_slice()[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn bits_arithmetic() {
        assert_eq!(bits_from_likelihoods(&[0.5f64; 10]), 10.0);
        assert_eq!(bits_from_likelihoods(&[1.0f64]), 0.0);
        assert!((bits_from_likelihoods(&[0.25f64, 0.5]) - 3.0).abs() < 1e-15);
    }
}
