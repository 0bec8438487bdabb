//! Finite-difference checks of every hand-written backward pass.
//!
//! Each check returns the relative error between the analytic gradient and
//! central differences of a random linear functional of the forward output.

use arc_core::bottleneck::entropy_model::{bias_name, factor_name, matrix_name};
use arc_core::bottleneck::{rate_bits, FactorizedEntropyModel};
use arc_core::loss::{mse, mse_grad, roi_loss, roi_loss_grad, BoxRole, RoiLossSpec};
use arc_core::model::conv::{Conv2d, ConvTranspose2d};
use arc_core::model::gdn::{gdn1_backward, gdn1_forward_cached, igdn1_backward, igdn1_forward_cached};
use arc_core::model::transforms::{analysis_backward, analysis_forward_traced, synthesis_backward, synthesis_forward_traced};
use arc_core::model::{Gdn1Params, ModelConfig, ParamSet, ParameterStore};
use arc_core::Tensor3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{numeric_grad, random_box, random_signed, random_tensor, rel_error};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

fn dot(a: &Tensor3<f64>, b: &Tensor3<f64>) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

fn reshape(t: &Tensor3<f64>, data: &[f64]) -> Tensor3<f64> {
    let [c, h, w] = t.shape();
    Tensor3::from_vec(c, h, w, data.to_vec()).unwrap()
}

fn gdn_case(seed: u64, inverse: bool) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 3;
    let x = random_signed(&mut rng, c, 3, 4);
    let beta: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    let gamma: Vec<f64> = (0..c * c).map(|_| rng.gen_range(0.05..0.5)).collect();
    let probe = random_tensor(&mut rng, c, 3, 4, -1.0, 1.0);
    let forward = |x: &Tensor3<f64>, beta: &[f64], gamma: &[f64]| {
        let p = Gdn1Params::new(beta.to_vec(), gamma.to_vec()).unwrap();
        if inverse {
            igdn1_forward_cached(x, &p).unwrap()
        } else {
            gdn1_forward_cached(x, &p).unwrap()
        }
    };
    let p = Gdn1Params::new(beta.clone(), gamma.clone()).unwrap();
    let (_, cache) = forward(&x, &beta, &gamma);
    let g = if inverse {
        igdn1_backward(&cache, &p, &probe)
    } else {
        gdn1_backward(&cache, &p, &probe)
    };
    let tag = if inverse { "igdn1" } else { "gdn1" };
    let nx = numeric_grad(|v| dot(&forward(&reshape(&x, v), &beta, &gamma).0, &probe), x.as_slice(), STEP);
    let nb = numeric_grad(|v| dot(&forward(&x, v, &gamma).0, &probe), &beta, STEP);
    let ng = numeric_grad(|v| dot(&forward(&x, &beta, v).0, &probe), &gamma, STEP);
    vec![
        (format!("{tag}/input"), rel_error(g.input.as_slice(), &nx)),
        (format!("{tag}/beta"), rel_error(&g.beta, &nb)),
        (format!("{tag}/gamma"), rel_error(&g.gamma, &ng)),
    ]
}

pub fn gdn() -> Vec<(String, f64)> {
    gdn_case(1, false)
}

pub fn igdn() -> Vec<(String, f64)> {
    gdn_case(2, true)
}

pub fn conv() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (cin, cout) = (2, 3);
    let x = random_tensor(&mut rng, cin, 6, 4, -1.0, 1.0);
    let weight: Vec<f64> = (0..cout * cin * 25).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let run = |x: &Tensor3<f64>, w: &[f64], b: &[f64]| Conv2d::new(w, b, cin, cout).unwrap().forward(x).unwrap();
    let (out, cache) = run(&x, &weight, &bias);
    let probe = random_tensor(&mut rng, cout, out.height(), out.width(), -1.0, 1.0);
    let g = Conv2d::new(&weight, &bias, cin, cout).unwrap().backward(&cache, &probe);
    let nx = numeric_grad(|v| dot(&run(&reshape(&x, v), &weight, &bias).0, &probe), x.as_slice(), STEP);
    let nw = numeric_grad(|v| dot(&run(&x, v, &bias).0, &probe), &weight, STEP);
    let nb = numeric_grad(|v| dot(&run(&x, &weight, v).0, &probe), &bias, STEP);
    vec![
        ("conv/input".into(), rel_error(g.input.as_slice(), &nx)),
        ("conv/weight".into(), rel_error(&g.weight, &nw)),
        ("conv/bias".into(), rel_error(&g.bias, &nb)),
    ]
}

pub fn conv_transpose() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (cin, cout) = (3, 2);
    let x = random_tensor(&mut rng, cin, 2, 3, -1.0, 1.0);
    let weight: Vec<f64> = (0..cin * cout * 25).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let run = |x: &Tensor3<f64>, w: &[f64], b: &[f64]| ConvTranspose2d::new(w, b, cin, cout).unwrap().forward(x).unwrap();
    let (out, cache) = run(&x, &weight, &bias);
    let probe = random_tensor(&mut rng, cout, out.height(), out.width(), -1.0, 1.0);
    let g = ConvTranspose2d::new(&weight, &bias, cin, cout).unwrap().backward(&cache, &probe);
    let nx = numeric_grad(|v| dot(&run(&reshape(&x, v), &weight, &bias).0, &probe), x.as_slice(), STEP);
    let nw = numeric_grad(|v| dot(&run(&x, v, &bias).0, &probe), &weight, STEP);
    let nb = numeric_grad(|v| dot(&run(&x, &weight, v).0, &probe), &bias, STEP);
    vec![
        ("tconv/input".into(), rel_error(g.input.as_slice(), &nx)),
        ("tconv/weight".into(), rel_error(&g.weight, &nw)),
        ("tconv/bias".into(), rel_error(&g.bias, &nb)),
    ]
}

pub fn distortion() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (9, 7);
    let x = random_tensor(&mut rng, 3, h, w, 0.0, 1.0);
    let xh = random_tensor(&mut rng, 3, h, w, 0.0, 1.0);
    let mut out = Vec::new();

    let mut g = Tensor3::zeros(3, h, w);
    mse_grad(&x, &xh, 1.0, &mut g).unwrap();
    let n = numeric_grad(|v| mse(&x, &reshape(&xh, v)).unwrap(), xh.as_slice(), STEP);
    out.push(("mse".to_string(), rel_error(g.as_slice(), &n)));

    let boxes: Vec<_> = (0..3).map(|_| random_box(&mut rng, w, h, BoxRole::Hbox)).collect();
    for k in [0, 1] {
        let spec = RoiLossSpec::new(k).unwrap();
        let mut g = Tensor3::zeros(3, h, w);
        roi_loss_grad(&x, &xh, &boxes, spec, 1.0, &mut g).unwrap();
        let n = numeric_grad(|v| roi_loss(&x, &reshape(&xh, v), &boxes, spec).unwrap(), xh.as_slice(), STEP);
        out.push((format!("roi_loss/k={k}"), rel_error(g.as_slice(), &n)));
    }
    out
}

fn entropy_names(params: &ParamSet<f64>) -> Vec<String> {
    params
        .iter()
        .map(|(name, _)| name.clone())
        .filter(|n| n.starts_with("entropy."))
        .collect()
}

fn flatten(params: &ParamSet<f64>, names: &[String]) -> Vec<f64> {
    names.iter().flat_map(|n| params.data(n).unwrap().to_vec()).collect()
}

fn unflatten(params: &mut ParamSet<f64>, names: &[String], values: &[f64]) {
    let mut at = 0;
    for n in names {
        let arr = params.get_mut(n).unwrap();
        let len = arr.data.len();
        arr.data.copy_from_slice(&values[at..at + len]);
        at += len;
    }
}

pub fn rate() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let channels = 2;
    let store = ParameterStore::<f64>::init(ModelConfig::new(channels, 1).with_input_size(8), 7).unwrap();
    let mut params = store.params.clone();
    let names = entropy_names(&params);
    assert!(names.contains(&matrix_name(0)) && names.contains(&bias_name(0)) && names.contains(&factor_name(0)));
    // move away from the symmetric initialisation
    for n in &names {
        for v in params.get_mut(n).unwrap().data.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let latent = random_tensor(&mut rng, channels, 3, 3, -4.0, 4.0);

    let model = FactorizedEntropyModel::from_params(&params).unwrap();
    let mut grads = params.zeros_like();
    let (_, g_latent) = model.rate_with_grads(&latent, &params, &mut grads, 1.0).unwrap();

    let bits = |latent: &Tensor3<f64>, params: &ParamSet<f64>| {
        rate_bits(latent, &FactorizedEntropyModel::from_params(params).unwrap()).unwrap()
    };
    let n_latent = numeric_grad(|v| bits(&reshape(&latent, v), &params), latent.as_slice(), STEP);
    let flat = flatten(&params, &names);
    let n_params = numeric_grad(
        |v| {
            let mut p = params.clone();
            unflatten(&mut p, &names, v);
            bits(&latent, &p)
        },
        &flat,
        STEP,
    );
    vec![
        ("rate/latent".into(), rel_error(g_latent.as_slice(), &n_latent)),
        ("rate/entropy_params".into(), rel_error(&flatten(&grads, &names), &n_params)),
    ]
}

/// Analysis followed by synthesis, checked on a sample of coordinates of
/// every transform parameter array and on the full input image.
pub fn transforms() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let config = ModelConfig::new(3, 1).with_input_size(16);
    let mut store = ParameterStore::<f64>::init(config, 9).unwrap();
    let names: Vec<String> = store
        .params
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| !n.starts_with("entropy."))
        .collect();
    for n in &names {
        for v in store.params.get_mut(n).unwrap().data.iter_mut() {
            if n.contains("beta") || n.contains("gamma") {
                *v += rng.gen_range(0.0..0.1);
            } else {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
    }
    let image = random_tensor(&mut rng, 3, 16, 16, 0.0, 1.0);
    let run = |image: &Tensor3<f64>, store: &ParameterStore<f64>| {
        let (y, at) = analysis_forward_traced(image, store).unwrap();
        let (xh, st) = synthesis_forward_traced(&y, store).unwrap();
        (xh, at, st)
    };
    let (xh, at, st) = run(&image, &store);
    let probe = random_tensor(&mut rng, 3, xh.height(), xh.width(), -1.0, 1.0);
    let mut grads = store.params.zeros_like();
    let g_latent = synthesis_backward(&st, &store, &probe, &mut grads).unwrap();
    let g_image = analysis_backward(&at, &store, &g_latent, &mut grads).unwrap();

    let n_image = numeric_grad(|v| dot(&run(&reshape(&image, v), &store).0, &probe), image.as_slice(), STEP);
    let mut out = vec![("chain/image".to_string(), rel_error(g_image.as_slice(), &n_image))];

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for n in &names {
        let len = store.params.data(n).unwrap().len();
        for _ in 0..4 {
            let i = rng.gen_range(0..len);
            analytic.push(grads.data(n).unwrap()[i]);
            let mut probe_store = store.clone();
            let f = |delta: f64, s: &mut ParameterStore<f64>| {
                s.params.get_mut(n).unwrap().data[i] = store.params.data(n).unwrap()[i] + delta;
                dot(&run(&image, s).0, &probe)
            };
            let up = f(STEP, &mut probe_store);
            let down = f(-STEP, &mut probe_store);
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    out.push(("chain/params".to_string(), rel_error(&analytic, &numeric)));
    out
}

/// Every check in the suite.
pub fn all() -> Vec<(String, f64)> {
    [gdn(), igdn(), conv(), conv_transpose(), distortion(), rate(), transforms()].concat()
}
