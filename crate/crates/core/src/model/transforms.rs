//! Analysis (encoder) and synthesis (decoder) stacks.
//!
//! Analysis: `M + 2` stride-2 convolutions, GDN1 after every one but the last.
//! Synthesis mirrors it with stride-2 transposed convolutions and IGDN1.

use crate::error::{Error, Result};
use crate::model::conv::{Conv2d, ConvCache, ConvTranspose2d, ConvTransposeCache};
use crate::model::gdn::{
    gdn1_backward, gdn1_forward_cached, igdn1_backward, igdn1_forward_cached, lower_bound_grad, Gdn1Params,
    GdnCache, BETA_MIN,
};
use crate::model::params::{names, ParamSet, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, LatentTensor, Tensor3};

/// Activations recorded by a training-mode analysis pass.
#[derive(Debug, Clone)]
pub struct AnalysisTrace<S> {
    convs: Vec<ConvCache<S>>,
    gdns: Vec<GdnCache<S>>,
}

#[derive(Debug, Clone)]
pub struct SynthesisTrace<S> {
    convs: Vec<ConvTransposeCache<S>>,
    gdns: Vec<GdnCache<S>>,
}

fn gdn_params<S: Scalar>(params: &ParamSet<S>, beta: &str, gamma: &str) -> Result<Gdn1Params<S>> {
    Gdn1Params::from_raw(params.data(beta)?, params.data(gamma)?)
}

fn accumulate_gdn_grads<S: Scalar>(
    params: &ParamSet<S>,
    grads: &mut ParamSet<S>,
    beta: &str,
    gamma: &str,
    g_beta: &[S],
    g_gamma: &[S],
) -> Result<()> {
    let raw_beta = params.data(beta)?;
    let raw_gamma = params.data(gamma)?;
    let gb: Vec<S> = raw_beta
        .iter()
        .zip(g_beta)
        .map(|(&r, &g)| lower_bound_grad(r, S::lit(BETA_MIN), g))
        .collect();
    let gg: Vec<S> = raw_gamma
        .iter()
        .zip(g_gamma)
        .map(|(&r, &g)| lower_bound_grad(r, S::zero(), g))
        .collect();
    grads.accumulate(beta, &gb)?;
    grads.accumulate(gamma, &gg)
}

fn check_image<S: Scalar>(image: &ImageTensor<S>, store: &ParameterStore<S>) -> Result<()> {
    let config = &store.config;
    if image.channels() != config.input_channels {
        return Err(Error::Input(format!(
            "image has {} channels, model expects {}",
            image.channels(),
            config.input_channels
        )));
    }
    config.latent_shape(image.height(), image.width())?;
    if image
        .as_slice()
        .iter()
        .any(|&v| !v.is_finite() || v < S::zero() || v > S::one())
    {
        return Err(Error::Input("image values must be finite and within [0, 1]".into()));
    }
    Ok(())
}

fn analysis_impl<S: Scalar>(
    image: &ImageTensor<S>,
    store: &ParameterStore<S>,
    mut trace: Option<&mut AnalysisTrace<S>>,
) -> Result<LatentTensor<S>> {
    check_image(image, store)?;
    let widths = store.config.analysis_widths();
    let layers = store.config.layer_count();
    let p = &store.params;
    let mut act = image.clone();
    for i in 0..layers {
        let conv = Conv2d::new(
            p.data(&names::analysis_weight(i))?,
            p.data(&names::analysis_bias(i))?,
            widths[i],
            widths[i + 1],
        )?;
        let (out, cache) = conv.forward(&act)?;
        act = out;
        if let Some(t) = trace.as_deref_mut() {
            t.convs.push(cache);
        }
        if i + 1 < layers {
            let gp = gdn_params(p, &names::analysis_beta(i), &names::analysis_gamma(i))?;
            let (out, cache) = gdn1_forward_cached(&act, &gp)?;
            act = out;
            if let Some(t) = trace.as_deref_mut() {
                t.gdns.push(cache);
            }
        }
    }
    Ok(act)
}

/// Map an image `[3, H, W]` in `[0, 1]` to its latent `[N, H/2^(M+2), W/2^(M+2)]`.
pub fn analysis_forward<S: Scalar>(image: &ImageTensor<S>, store: &ParameterStore<S>) -> Result<LatentTensor<S>> {
    analysis_impl(image, store, None)
}

pub fn analysis_forward_traced<S: Scalar>(
    image: &ImageTensor<S>,
    store: &ParameterStore<S>,
) -> Result<(LatentTensor<S>, AnalysisTrace<S>)> {
    let mut trace = AnalysisTrace {
        convs: Vec::new(),
        gdns: Vec::new(),
    };
    let latent = analysis_impl(image, store, Some(&mut trace))?;
    Ok((latent, trace))
}

/// Backpropagate a latent gradient; parameter gradients are accumulated into `grads`.
/// Returns the gradient with respect to the input image.
pub fn analysis_backward<S: Scalar>(
    trace: &AnalysisTrace<S>,
    store: &ParameterStore<S>,
    grad_latent: &LatentTensor<S>,
    grads: &mut ParamSet<S>,
) -> Result<ImageTensor<S>> {
    let widths = store.config.analysis_widths();
    let layers = store.config.layer_count();
    let p = &store.params;
    let mut grad = grad_latent.clone();
    for i in (0..layers).rev() {
        if i + 1 < layers {
            let (beta, gamma) = (names::analysis_beta(i), names::analysis_gamma(i));
            let gp = gdn_params(p, &beta, &gamma)?;
            let g = gdn1_backward(&trace.gdns[i], &gp, &grad);
            accumulate_gdn_grads(p, grads, &beta, &gamma, &g.beta, &g.gamma)?;
            grad = g.input;
        }
        let (wname, bname) = (names::analysis_weight(i), names::analysis_bias(i));
        let conv = Conv2d::new(p.data(&wname)?, p.data(&bname)?, widths[i], widths[i + 1])?;
        let g = conv.backward(&trace.convs[i], &grad);
        grads.accumulate(&wname, &g.weight)?;
        grads.accumulate(&bname, &g.bias)?;
        grad = g.input;
    }
    Ok(grad)
}

fn check_latent<S: Scalar>(latent: &LatentTensor<S>, store: &ParameterStore<S>) -> Result<()> {
    if latent.channels() != store.config.width_n || latent.height() == 0 || latent.width() == 0 {
        return Err(Error::Config(format!(
            "latent shape {:?} does not match model width N={}",
            latent.shape(),
            store.config.width_n
        )));
    }
    Ok(())
}

fn synthesis_impl<S: Scalar>(
    latent: &LatentTensor<S>,
    store: &ParameterStore<S>,
    mut trace: Option<&mut SynthesisTrace<S>>,
) -> Result<ImageTensor<S>> {
    check_latent(latent, store)?;
    let widths = store.config.analysis_widths();
    let layers = store.config.layer_count();
    let p = &store.params;
    let mut act = latent.clone();
    for i in 0..layers {
        let tconv = ConvTranspose2d::new(
            p.data(&names::synthesis_weight(i))?,
            p.data(&names::synthesis_bias(i))?,
            widths[layers - i],
            widths[layers - i - 1],
        )?;
        let (out, cache) = tconv.forward(&act)?;
        act = out;
        if let Some(t) = trace.as_deref_mut() {
            t.convs.push(cache);
        }
        if i + 1 < layers {
            let gp = gdn_params(p, &names::synthesis_beta(i), &names::synthesis_gamma(i))?;
            let (out, cache) = igdn1_forward_cached(&act, &gp)?;
            act = out;
            if let Some(t) = trace.as_deref_mut() {
                t.gdns.push(cache);
            }
        }
    }
    Ok(act)
}

/// Decode a latent into an (unclamped) image of `latent dims * 2^(M+2)`.
///
/// Training feeds these raw values to the loss; inference clamps them with
/// [`reconstruct`].
pub fn synthesis_forward<S: Scalar>(latent: &LatentTensor<S>, store: &ParameterStore<S>) -> Result<ImageTensor<S>> {
    synthesis_impl(latent, store, None)
}

/// Inference-mode synthesis: output clamped to `[0, 1]`.
pub fn reconstruct<S: Scalar>(latent: &LatentTensor<S>, store: &ParameterStore<S>) -> Result<ImageTensor<S>> {
    synthesis_forward(latent, store).map(|img| img.clamp01())
}

pub fn synthesis_forward_traced<S: Scalar>(
    latent: &LatentTensor<S>,
    store: &ParameterStore<S>,
) -> Result<(ImageTensor<S>, SynthesisTrace<S>)> {
    let mut trace = SynthesisTrace {
        convs: Vec::new(),
        gdns: Vec::new(),
    };
    let image = synthesis_impl(latent, store, Some(&mut trace))?;
    Ok((image, trace))
}

/// Backpropagate an image gradient through the synthesis stack; returns the latent gradient.
pub fn synthesis_backward<S: Scalar>(
    trace: &SynthesisTrace<S>,
    store: &ParameterStore<S>,
    grad_image: &ImageTensor<S>,
    grads: &mut ParamSet<S>,
) -> Result<LatentTensor<S>> {
    let widths = store.config.analysis_widths();
    let layers = store.config.layer_count();
    let p = &store.params;
    let mut grad = grad_image.clone();
    for i in (0..layers).rev() {
        if i + 1 < layers {
            let (beta, gamma) = (names::synthesis_beta(i), names::synthesis_gamma(i));
            let gp = gdn_params(p, &beta, &gamma)?;
            let g = igdn1_backward(&trace.gdns[i], &gp, &grad);
            accumulate_gdn_grads(p, grads, &beta, &gamma, &g.beta, &g.gamma)?;
            grad = g.input;
        }
        let (wname, bname) = (names::synthesis_weight(i), names::synthesis_bias(i));
        let tconv = ConvTranspose2d::new(p.data(&wname)?, p.data(&bname)?, widths[layers - i], widths[layers - i - 1])?;
        let g = tconv.backward(&trace.convs[i], &grad);
        grads.accumulate(&wname, &g.weight)?;
        grads.accumulate(&bname, &g.bias)?;
        grad = g.input;
    }
    Ok(grad)
}

/// Zero-filled tensor with the latent shape for an image of the given size.
pub fn latent_like<S: Scalar>(store: &ParameterStore<S>, height: usize, width: usize) -> Result<Tensor3<S>> {
    let [c, h, w] = store.config.latent_shape(height, width)?;
    Ok(Tensor3::zeros(c, h, w))
}
