use idm_core::diffusion::loss_and_grads;
use idm_core::iunet::{IUNet, IUNetConfig, TimeCond};
use idm_core::revgraph::Mode;
use idm_core::{Prng, Tensor};

fn model(seed: u64) -> IUNet<f64> {
    let mut m = IUNet::new(IUNetConfig::small(), seed).unwrap();
    m.randomize_identity_params(seed + 1, 0.5);
    m
}

fn grads(m: &IUNet<f64>) -> Vec<f64> {
    m.params.iter().flat_map(|p| p.grad.data().to_vec()).collect()
}

/// Residuals whose weighted mean squares make up the objective (without
/// the weight-norm term).
fn residuals(m: &IUNet<f64>, x: &Tensor<f64>, eps: &Tensor<f64>, t: usize, lambda_r: f64) -> Vec<(f64, Tensor<f64>)> {
    let mut out = vec![(1.0, m.forward(x, t, Mode::InvertibleRecompute).unwrap().sub(eps).unwrap())];
    if lambda_r > 0.0 {
        let h = m.head(x).unwrap();
        let back = m.trunk_inverse(&m.trunk_forward(&h, t).unwrap(), TimeCond::Null).unwrap();
        out.push((lambda_r, back.sub(&h).unwrap()));
    }
    out
}

/// The objective again, built only from forward passes.
fn objective(m: &IUNet<f64>, x: &Tensor<f64>, eps: &Tensor<f64>, t: usize, lambda_r: f64, lambda_l2: f64) -> f64 {
    let sq: f64 = residuals(m, x, eps, t, lambda_r)
        .iter()
        .map(|(w, r)| w * r.norm_sq() / r.len() as f64)
        .sum();
    sq + lambda_l2 * m.params.l2_norm()
}

/// `L(θ+) − L(θ−)` as `mean((r+ − r−)(r+ + r−))`, which avoids subtracting
/// two nearly equal losses.
fn objective_difference(plus: &[(f64, Tensor<f64>)], minus: &[(f64, Tensor<f64>)]) -> f64 {
    plus.iter()
        .zip(minus)
        .map(|((w, p), (_, q))| {
            let s: f64 = p.data().iter().zip(q.data()).map(|(a, b)| (a - b) * (a + b)).sum();
            w * s / p.len() as f64
        })
        .sum()
}

fn batch(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut prng = Prng::new(seed);
    (prng.randn(&[2, 1, 8, 8, 8]).unwrap(), prng.randn(&[2, 1, 8, 8, 8]).unwrap())
}

#[test]
fn modes_give_the_same_gradients() {
    for (lambda_r, t) in [(0.0, 40), (0.5, 1500)] {
        let (x, eps) = batch(1);
        let mut a = model(3);
        let mut b = model(3);
        let (la, _) = loss_and_grads(&mut a, &x, &eps, t, lambda_r, 1e-4, Mode::StoreAll).unwrap();
        let (lb, _) = loss_and_grads(&mut b, &x, &eps, t, lambda_r, 1e-4, Mode::InvertibleRecompute).unwrap();
        assert_eq!(la.noise, lb.noise);
        let (ga, gb) = (grads(&a), grads(&b));
        let diff: f64 = ga.iter().zip(&gb).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = ga.iter().map(|p| p * p).sum::<f64>().sqrt();
        assert!(norm > 0.0);
        assert!(diff / norm <= 1e-8, "λ_R={lambda_r}: rel L2 {}", diff / norm);
    }
}

#[test]
fn reported_loss_matches_forward_objective() {
    let (x, eps) = batch(2);
    let mut m = model(5);
    let (parts, _) = loss_and_grads(&mut m, &x, &eps, 700, 0.3, 1e-4, Mode::InvertibleRecompute).unwrap();
    let direct = objective(&m, &x, &eps, 700, 0.3, 1e-4);
    assert!((parts.total - direct).abs() <= 1e-12 * direct.abs(), "{} vs {direct}", parts.total);
}

/// One entry of every parameter tensor, then uniform picks up to `n`.
fn sample_entries(m: &IUNet<f64>, n: usize, prng: &mut Prng) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = m.params.iter().map(|p| p.value.len()).collect();
    let mut picks: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(id, &len)| (id, prng.below(len))).collect();
    let total: usize = sizes.iter().sum();
    while picks.len() < n {
        let mut k = prng.below(total);
        let id = sizes
            .iter()
            .position(|&len| {
                if k < len {
                    true
                } else {
                    k -= len;
                    false
                }
            })
            .unwrap();
        picks.push((id, k));
    }
    picks
}

fn finite_difference_check(lambda_r: f64, count: usize, seed: u64) {
    let (x, eps) = batch(seed);
    let t = 300;
    let mut m = model(seed + 10);
    // Weight decay is applied by the optimizer, not differentiated.
    loss_and_grads(&mut m, &x, &eps, t, lambda_r, 0.0, Mode::InvertibleRecompute).unwrap();
    let analytic: Vec<Tensor<f64>> = m.params.iter().map(|p| p.grad.clone()).collect();
    let picks = sample_entries(&m, count, &mut Prng::new(seed + 20));
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    for (id, k) in picks {
        let orig = m.params.value(id).data()[k];
        m.params.value_mut(id).data_mut()[k] = orig + h;
        let plus = residuals(&m, &x, &eps, t, lambda_r);
        m.params.value_mut(id).data_mut()[k] = orig - h;
        let minus = residuals(&m, &x, &eps, t, lambda_r);
        m.params.value_mut(id).data_mut()[k] = orig;
        let num = objective_difference(&plus, &minus) / (2.0 * h);
        let ana = analytic[id].data()[k];
        let err = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
        if err > worst.0 {
            worst = (err, format!("{}[{k}]: analytic {ana:e}, numeric {num:e}", m.params.get(id).name));
        }
    }
    assert!(worst.0 <= 1e-4, "λ_R={lambda_r}: worst rel err {:e} at {}", worst.0, worst.1);
}

#[test]
fn thousand_parameters_pass_finite_differences() {
    finite_difference_check(0.0, 1000, 30);
}

#[test]
fn reconstruction_gradients_pass_finite_differences() {
    finite_difference_check(0.5, 200, 40);
}
