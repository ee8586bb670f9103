use draftflow::alignment::{ot_regularized_loss, sinkhorn_cost, sliced_wasserstein, OtBackend};
use draftflow::numerics::{gaussian_sample, grad_check, Graph, ParamStore, Tensor};

fn cloud(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
    gaussian_sample(&[rows, d], seed).unwrap()
}

fn shifted(t: &Tensor<f64>, by: &[f64]) -> Tensor<f64> {
    let d = t.cols();
    let data: Vec<f64> = t.data().iter().enumerate().map(|(i, v)| v + by[i % d]).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Exhaustive minimum over the six matchings of two 3-point clouds, each
/// pair carrying mass 1/3.
fn brute_force_k3(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let sq = |i: usize, j: usize| a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    perms.iter().map(|p| (0..3).map(|i| sq(i, p[i])).sum::<f64>() / 3.0).fold(f64::INFINITY, f64::min)
}

pub fn sinkhorn_matches_permutation_oracle_on_three_points() {
    for seed in 0..20 {
        let d = 2 + (seed as usize % 3);
        let a = cloud(3, d, 100 + seed);
        let b = cloud(3, d, 200 + seed);
        let exact = brute_force_k3(&a, &b);
        let r = sinkhorn_cost(&a, &b, 1e-3, 20_000, 1e-10).unwrap();
        // C/eps ~ 1e4 here, where Sinkhorn crawls toward tight marginals;
        // the cost is already at the permutation optimum
        assert!(r.marginal_error < 1e-3, "seed {seed}: marginal error {:e}", r.marginal_error);
        assert!((r.cost - exact).abs() <= 0.02 * exact, "seed {seed}: sinkhorn {} vs oracle {exact}", r.cost);
    }
}

pub fn sinkhorn_single_points_cost_the_squared_offset() {
    let a = Tensor::<f64>::from_f64(vec![1, 4], &[0.0; 4]).unwrap();
    let b = Tensor::<f64>::from_f64(vec![1, 4], &[0.5, -1.0, 2.0, 0.25]).unwrap();
    for eps in [1e-3, 1.0, 100.0] {
        assert_eq!(sinkhorn_cost(&a, &b, eps, 10, 1e-12).unwrap().cost, 5.3125);
    }
}

pub fn sliced_wasserstein_fixtures() {
    let a = cloud(17, 5, 1);
    assert_eq!(sliced_wasserstein(&a, &a, 32, 4).unwrap(), 0.0);
    let z = Tensor::<f64>::from_f64(vec![1, 1], &[0.0]).unwrap();
    for c in [0.5, -3.0, 7.25] {
        let p = Tensor::<f64>::from_f64(vec![1, 1], &[c]).unwrap();
        for n in [1, 5, 64] {
            assert_eq!(sliced_wasserstein(&z, &p, n, 9).unwrap(), c * c);
        }
    }
}

pub fn sliced_wasserstein_gaussian_offset() {
    // E[(mu . theta)^2] over uniform unit theta in 2-D is |mu|^2 / 2
    let mu = [3.0, -4.0];
    let a = cloud(1000, 2, 5);
    let b = shifted(&cloud(1000, 2, 6), &mu);
    let sw = sliced_wasserstein(&a, &b, 512, 11).unwrap();
    let expect = 12.5;
    assert!((sw - expect).abs() < 0.1 * expect, "sliced {sw} vs {expect}");
}

pub fn costs_are_symmetric_and_translation_invariant() {
    let a = cloud(6, 3, 40);
    let b = cloud(9, 3, 41);
    let shift = [1.5, -2.0, 0.75];
    let (a2, b2) = (shifted(&a, &shift), shifted(&b, &shift));
    let sk = |x: &Tensor<f64>, y: &Tensor<f64>| {
        let r = sinkhorn_cost(x, y, 0.5, 10_000, 1e-12).unwrap();
        assert!(r.converged);
        r.cost
    };
    let base = sk(&a, &b);
    assert!((base - sk(&b, &a)).abs() < 1e-6);
    assert!((base - sk(&a2, &b2)).abs() < 1e-6);
    let sw = |x: &Tensor<f64>, y: &Tensor<f64>| sliced_wasserstein(x, y, 64, 3).unwrap();
    let base = sw(&a, &b);
    assert!((base - sw(&b, &a)).abs() < 1e-6);
    assert!((base - sw(&a2, &b2)).abs() < 1e-6);
}

pub fn gradient_through_sinkhorn() {
    let b = cloud(3, 4, 8);
    let mut p = ParamStore::<f64>::new(0);
    p.insert("a", cloud(3, 4, 7)).unwrap();
    let backend = OtBackend::Sinkhorn { epsilon_scale: 0.05, max_iters: 5000, tol: 1e-12 };
    let r = grad_check(
        |g: &mut Graph<f64>, p| {
            let a = g.param(p, "a", true)?;
            let base = g.constant(Tensor::scalar(0.0));
            Ok(ot_regularized_loss(g, base, a, &b, 1.0, &backend)?.0)
        },
        &p,
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

pub fn gradient_through_sliced() {
    let b = cloud(5, 3, 8);
    let mut p = ParamStore::<f64>::new(0);
    p.insert("a", cloud(5, 3, 7)).unwrap();
    let backend = OtBackend::Sliced { n_projections: 16, seed: 2 };
    let r = grad_check(
        |g: &mut Graph<f64>, p| {
            let a = g.param(p, "a", true)?;
            let base = g.constant(Tensor::scalar(0.0));
            Ok(ot_regularized_loss(g, base, a, &b, 1.0, &backend)?.0)
        },
        &p,
        1e-4,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
