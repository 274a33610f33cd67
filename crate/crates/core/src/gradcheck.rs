//! Central finite-difference gradient checks in double precision.

use crate::nn::ParamSet;
use crate::tensor::{Graph, Result, Tensor, Var};

/// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-8)` over all inputs.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&g, &vars).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|v| g.grad(*v).unwrap().data().to_vec())
        .collect();

    let eval = |ins: &[Tensor<f64>]| {
        let g = Graph::new();
        let vars: Vec<_> = ins.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).unwrap().value().item().unwrap()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    rel_error(&analytic, &numeric)
}

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Reduces `y` to a scalar with fixed pseudo-random weights, so that
/// errors in individual gradient entries cannot cancel.
pub fn readout<'g>(y: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let shape = y.shape();
    let w = random(&shape, 0x5eed ^ shape.iter().fold(7, |a, &d| a * 31 + d as u64));
    Ok(y.mul(y.graph().constant(w))?.sum())
}

/// Like [`check`], but also differentiates with respect to every tensor of
/// `params`, which `f` must register through [`Graph::param`].
pub fn check_params<P, F>(inputs: &[Tensor<f64>], params: &P, h: f64, f: F) -> f64
where
    P: ParamSet<f64> + Clone,
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>], &P) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&g, &vars, params).unwrap();
    g.backward(loss).unwrap();
    let mut analytic: Vec<f64> = vars
        .iter()
        .flat_map(|v| g.grad(*v).unwrap().data().to_vec())
        .collect();
    params.visit("", &mut |name, t| {
        let grad = g.param_grad(t).unwrap_or_else(|| panic!("no gradient for {name}"));
        analytic.extend_from_slice(grad.data());
    });

    let eval = |ins: &[Tensor<f64>], p: &P| {
        let g = Graph::new();
        let vars: Vec<_> = ins.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars, p).unwrap().value().item().unwrap()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work, params);
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work, params);
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let mut sizes = Vec::new();
    params.visit("", &mut |_, t| sizes.push(t.numel()));
    for (k, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            let perturbed = |delta: f64| {
                let mut p = params.clone();
                let mut idx = 0;
                p.visit_mut("", &mut |_, t| {
                    if idx == k {
                        t.data_mut()[j] += delta;
                    }
                    idx += 1;
                });
                p
            };
            let up = eval(inputs, &perturbed(h));
            let down = eval(inputs, &perturbed(-h));
            numeric.push((up - down) / (2.0 * h));
        }
    }
    rel_error(&analytic, &numeric)
}
