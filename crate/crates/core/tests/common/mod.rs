#![allow(dead_code)]

use neicl::autodiff::{Graph, Tensor, Var};
use neicl::Result;
use rand::Rng;

/// Absolute difference relative to the larger magnitude. The denominator is
/// floored at 1e-2 so gradients that are zero up to rounding do not blow up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Compares graph gradients of a scalar function of `inputs` with central
/// differences at step `h`. Returns the worst error.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get(v).unwrap()).collect();

    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &vars).unwrap();
        g.value(loss).item()
    };
    let mut worst = 0.0f64;
    for (which, t) in inputs.iter().enumerate() {
        for idx in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[idx] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[which][idx], numeric));
        }
    }
    worst
}

pub fn rand_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(x * w)` for a fixed random `w`, turning any output into a scalar
/// whose gradient exercises every element.
pub fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(g.shape(x), &mut rng);
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    g.sum(y)
}
