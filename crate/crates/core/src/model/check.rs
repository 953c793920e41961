//! Finite-difference checks of every layer type and of the full training loss.

use rand::Rng;

use crate::error::Result;
use crate::nn::{grad_check, softmax_cross_entropy, Conv2d, GradCheckReport, Linear, Probe, Tensor};
use crate::seed;

use super::loss::{triplet_grad, triplet_margin};
use super::{total_loss, Batch, CpvModel, LossOptions, LossWeights};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Gives every bias a small random value so that no ReLU sits exactly on its
/// kink for black input regions.
pub fn jitter_biases(model: &mut CpvModel<f64>, seed: u64) {
    let mut rng = seed::rng(seed);
    let names = model.param_names();
    for (t, name) in model.params_mut().into_iter().zip(names) {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
    }
}

/// Checks `total_loss` gradients for each parameter tensor on up to
/// `samples` coordinates per tensor.
pub fn check_total_loss(
    model: &CpvModel<f64>,
    batch: &Batch<'_>,
    weights: LossWeights,
    samples: usize,
    seed: u64,
) -> Result<Vec<(String, GradCheckReport)>> {
    let opts = LossOptions { aux: false, grads: true, kinks: true };
    let out = total_loss(model, batch, weights, opts)?;
    let grads = out.grads.expect("gradients requested");
    let probe_opts = LossOptions { grads: false, ..opts };
    let mut rng = seed::rng(seed);
    let mut reports = Vec::new();
    let names = model.param_names();
    for (k, name) in names.into_iter().enumerate() {
        let params = model.params()[k].data().to_vec();
        let analytic = grads.params()[k].data().to_vec();
        let mut probe_model = model.clone();
        let f = |p: &[f64]| {
            probe_model.params_mut()[k].data_mut().copy_from_slice(p);
            let o = total_loss(&probe_model, batch, weights, probe_opts).expect("probe evaluation");
            Probe { value: o.total, kinks: o.kinks }
        };
        let report = grad_check(f, &params, &analytic, GRAD_EPS, 0.0, samples, &mut rng);
        reports.push((name, report));
    }
    Ok(reports)
}

fn random_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Standalone checks of conv, linear, softmax cross-entropy and the triplet
/// hinge on random inputs.
pub fn check_layers(seed: u64) -> Vec<(String, GradCheckReport)> {
    let mut rng = seed::rng(seed);
    let mut out = Vec::new();
    let eps = GRAD_EPS;

    // Conv: L = sum(y * r) for a fixed random r.
    let mut conv = Conv2d::<f64>::init(3, 4, &mut rng);
    conv.bias.data_mut().copy_from_slice(&random_vec(4, &mut rng));
    let x = Tensor::from_vec(&[2, 3, 9, 8], random_vec(2 * 3 * 72, &mut rng)).unwrap();
    let (y, cache) = conv.forward(&x).unwrap();
    let r = Tensor::from_vec(y.shape(), random_vec(y.len(), &mut rng)).unwrap();
    let dot = |t: &Tensor<f64>| t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();
    let mut g = Conv2d::zeros(3, 4);
    let gx = conv.backward(&cache, &r, &mut g, true).unwrap();
    let rep = grad_check(
        |p: &[f64]| Probe::smooth(dot(&conv.forward(&Tensor::from_vec(x.shape(), p.to_vec()).unwrap()).unwrap().0)),
        x.data(),
        gx.data(),
        eps,
        0.0,
        usize::MAX,
        &mut rng,
    );
    out.push(("conv.input".to_string(), rep));
    let mut c2 = conv.clone();
    let rep = grad_check(
        |p: &[f64]| {
            c2.weight.data_mut().copy_from_slice(p);
            Probe::smooth(dot(&c2.forward(&x).unwrap().0))
        },
        conv.weight.data(),
        g.weight.data(),
        eps,
        0.0,
        usize::MAX,
        &mut rng,
    );
    out.push(("conv.weight".to_string(), rep));
    let mut c3 = conv.clone();
    let rep = grad_check(
        |p: &[f64]| {
            c3.bias.data_mut().copy_from_slice(p);
            Probe::smooth(dot(&c3.forward(&x).unwrap().0))
        },
        conv.bias.data(),
        g.bias.data(),
        eps,
        0.0,
        usize::MAX,
        &mut rng,
    );
    out.push(("conv.bias".to_string(), rep));

    // Linear.
    let mut lin = Linear::<f64>::init(7, 5, &mut rng);
    lin.bias.data_mut().copy_from_slice(&random_vec(5, &mut rng));
    let x = Tensor::from_vec(&[3, 7], random_vec(21, &mut rng)).unwrap();
    let r = Tensor::from_vec(&[3, 5], random_vec(15, &mut rng)).unwrap();
    let dot = |t: &Tensor<f64>| t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();
    let mut g = Linear::zeros(7, 5);
    let gx = lin.backward(&x, &r, &mut g, true).unwrap();
    let rep = grad_check(
        |p: &[f64]| Probe::smooth(dot(&lin.forward(&Tensor::from_vec(&[3, 7], p.to_vec()).unwrap()).unwrap())),
        x.data(),
        gx.data(),
        eps,
        0.0,
        usize::MAX,
        &mut rng,
    );
    out.push(("linear.input".to_string(), rep));
    let mut l2 = lin.clone();
    let mut params = lin.weight.data().to_vec();
    params.extend_from_slice(lin.bias.data());
    let mut analytic = g.weight.data().to_vec();
    analytic.extend_from_slice(g.bias.data());
    let rep = grad_check(
        |p: &[f64]| {
            l2.weight.data_mut().copy_from_slice(&p[..35]);
            l2.bias.data_mut().copy_from_slice(&p[35..]);
            Probe::smooth(dot(&l2.forward(&x).unwrap()))
        },
        &params,
        &analytic,
        eps,
        0.0,
        usize::MAX,
        &mut rng,
    );
    out.push(("linear.params".to_string(), rep));

    // Softmax cross-entropy.
    let logits = Tensor::from_vec(&[4, 6], random_vec(24, &mut rng)).unwrap();
    let labels = [0, 5, 2, 3];
    let (_, gl) = softmax_cross_entropy(&logits, &labels).unwrap();
    let rep = grad_check(
        |p: &[f64]| Probe::smooth(softmax_cross_entropy(&Tensor::from_vec(&[4, 6], p.to_vec()).unwrap(), &labels).unwrap().0),
        logits.data(),
        gl.data(),
        eps,
        0.0,
        usize::MAX,
        &mut rng,
    );
    out.push(("softmax_cross_entropy".to_string(), rep));

    // Triplet hinge, at a point where it is active.
    let d = 5;
    let mut v = random_vec(3 * d, &mut rng);
    for i in 0..d {
        v[2 * d + i] = v[i] + 0.1 * v[2 * d + i];
    }
    let hinge = |p: &[f64]| {
        let value = triplet_margin(&p[..d], &p[d..2 * d], &p[2 * d..]);
        let arg = (0..d).map(|i| (p[i] - p[d + i]).powi(2)).sum::<f64>().sqrt()
            - (0..d).map(|i| (p[i] - p[2 * d + i]).powi(2)).sum::<f64>().sqrt()
            + 1.0;
        Probe { value, kinks: vec![arg] }
    };
    let (ga, gp, gn) = triplet_grad(&v[..d], &v[d..2 * d], &v[2 * d..]).expect("active hinge");
    let analytic: Vec<f64> = ga.into_iter().chain(gp).chain(gn).collect();
    let rep = grad_check(hinge, &v, &analytic, eps, 0.0, usize::MAX, &mut rng);
    out.push(("triplet_margin".to_string(), rep));
    out
}
