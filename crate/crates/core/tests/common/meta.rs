use fusion_core::meml::{inner_update, outer_update, Aggregation, Architecture, Backbone, Model};
use fusion_core::tensor::{Optimizer, Tensor};

/// Scores recomputed by hand from the attention weights.
pub fn explicit_attention(model: &Model, r: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let t = model.rho.tensors();
    let (w1, b1, w2, b2) = (t[0].data(), t[1].data(), t[2].data(), t[3].data());
    let (n, d) = (r.shape()[0], r.shape()[1]);
    let h = t[0].shape()[1];
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let row = r.item(i);
            (0..h)
                .map(|j| {
                    let pre: f64 = (0..d).map(|k| row[k] * w1[k * h + j]).sum::<f64>() + b1[j];
                    pre.tanh() * w2[j]
                })
                .sum::<f64>()
                + b2[0]
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let a: Vec<f64> = e.iter().map(|x| x / z).collect();
    let agg = (0..d).map(|k| (0..n).map(|i| a[i] * r.item(i)[k]).sum()).collect();
    (a, agg)
}

pub fn micro_net() -> Model {
    let arch = Architecture {
        backbone: Backbone::Mlp { input: 2, hidden: vec![2] },
        attention_hidden: Some(2),
        cln_hidden: 0,
        classes: 2,
    };
    Model::new(arch, 21).unwrap()
}

pub fn query_loss(model: &Model, x: &Tensor, labels: &[usize]) -> f64 {
    let logits = model.logits(x).unwrap();
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let row = logits.item(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[l]
        })
        .sum::<f64>()
        / labels.len() as f64
}

/// Relative error between the first-order outer gradient on a micro-net and
/// central differences of the query loss at the post-inner parameters.
pub fn outer_fd_error() -> f64 {
    let mut model = micro_net();
    let x = Tensor::new(vec![3, 1, 1, 2], vec![0.5, -0.2, 0.9, 0.4, -0.6, 0.8]).unwrap();
    let labels = [0, 1, 1];
    inner_update(&mut model, &x.select(&[0]).unwrap(), 0, 0.1, Aggregation::Attention).unwrap();
    let post_inner = model.clone();
    // Unit-rate SGD turns the step into the negated gradient.
    outer_update(&mut model, &x, &labels, &mut Optimizer::sgd(1.0), 1.0).unwrap();
    let analytic: Vec<Vec<f64>> = post_inner
        .theta
        .tensors()
        .iter()
        .chain(post_inner.w.tensors())
        .zip(model.theta.tensors().iter().chain(model.w.tensors()))
        .map(|(a, b)| a.data().iter().zip(b.data()).map(|(p, q)| p - q).collect())
        .collect();

    let h = 1e-5;
    let mut numeric = Vec::new();
    let n_theta = post_inner.theta.len();
    for t in 0..n_theta + post_inner.w.len() {
        let len = if t < n_theta { post_inner.theta.tensors()[t].numel() } else { post_inner.w.tensors()[t - n_theta].numel() };
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut m = post_inner.clone();
                let p = if t < n_theta { &mut m.theta.tensors_mut()[t] } else { &mut m.w.tensors_mut()[t - n_theta] };
                p.data_mut()[i] += delta;
                query_loss(&m, &x, &labels)
            };
            *gi = (eval(h) - eval(-h)) / (2.0 * h);
        }
        numeric.push(g);
    }
    assert_eq!(model.rho, post_inner.rho);
    super::max_rel_error(&analytic, &numeric, 1e-3)
}

