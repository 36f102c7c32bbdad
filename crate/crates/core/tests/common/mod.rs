#![allow(dead_code)]

pub mod oracles;

use dhat_core::{Graph, Real, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: Real = 1e-5;
pub const GRAD_TOL: Real = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: Real, hi: Real) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in [0.1, 1] and random sign, away from kinks at 0.
pub fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: Real = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Positive rows summing to one.
pub fn distribution(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = uniform(rng, &[rows, cols], 0.1, 1.0);
    for row in t.data_mut().chunks_mut(cols) {
        let s: Real = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// `sum(out * w)` with fixed pseudo-random weights, so every output entry
/// carries a distinct adjoint.
pub fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let mut r = rng(0xfeed);
    let w = g.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let p = g.mul(v, w)?;
    g.sum(p)
}

/// Entries that are zero analytically (invariances) leave only round-off in
/// the finite difference, which grows with the loss magnitude. Entries below
/// `floor` are compared absolutely.
fn rel_err(a: Real, n: Real, floor: Real) -> Real {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Maximum relative error between the tape gradient of `f` and a central
/// finite difference, over every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> Real
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars).expect("forward");
    g.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Real {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).expect("forward");
        g.value(out).item()
    };
    let mut worst: Real = 0.0;
    let floor = 1e-5 * g.value(loss).item().abs().max(1.0);
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), inputs[i].shape(), "gradient shape");
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&probe);
            probe[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&probe);
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.data()[j], numeric, floor));
        }
    }
    worst
}

/// Gradient check of every differentiable primitive plus a small composite
/// network. Returns `(case, max relative error)` pairs.
pub fn gradient_suite() -> Vec<(&'static str, Real)> {
    let mut r = rng(7);
    let mut out = Vec::new();
    let mut case = |name: &'static str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| {
        out.push((name, gradcheck(&inputs, f)));
    };

    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[3, 4], -1.0, 1.0);
    case("add", vec![a.clone(), b.clone()], &|g, v| {
        let o = g.add(v[0], v[1])?;
        weighted_sum(g, o)
    });
    case("sub", vec![a.clone(), b.clone()], &|g, v| {
        let o = g.sub(v[0], v[1])?;
        weighted_sum(g, o)
    });
    case("mul", vec![a.clone(), b.clone()], &|g, v| {
        let o = g.mul(v[0], v[1])?;
        weighted_sum(g, o)
    });
    case("scale", vec![a.clone()], &|g, v| {
        let o = g.scale(v[0], -2.5)?;
        weighted_sum(g, o)
    });
    case("add_scalar", vec![a.clone()], &|g, v| {
        let o = g.add_scalar(v[0], 0.75)?;
        weighted_sum(g, o)
    });
    let m = uniform(&mut r, &[4, 5], -1.0, 1.0);
    case("matmul", vec![a.clone(), m], &|g, v| {
        let o = g.matmul(v[0], v[1])?;
        weighted_sum(g, o)
    });
    let x4 = uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0);
    case("add_bias", vec![x4.clone(), uniform(&mut r, &[3], -1.0, 1.0)], &|g, v| {
        let o = g.add_bias(v[0], v[1])?;
        weighted_sum(g, o)
    });
    let k = off_zero(&mut r, &[3, 4]);
    case("sign", vec![k.clone()], &|g, v| {
        let o = g.sign(v[0])?;
        weighted_sum(g, o)
    });
    case("relu", vec![k.clone()], &|g, v| {
        let o = g.relu(v[0])?;
        weighted_sum(g, o)
    });
    // Clamp bounds sit away from every sampled value.
    let c = Tensor::from_fn(&[12], |i| [-0.8, -0.2, 0.25, 0.9][i % 4] + 0.01 * i as Real);
    case("clamp", vec![c], &|g, v| {
        let o = g.clamp(v[0], -0.5, 0.5)?;
        weighted_sum(g, o)
    });
    case("log", vec![uniform(&mut r, &[3, 4], 0.2, 2.0)], &|g, v| {
        let o = g.log(v[0])?;
        weighted_sum(g, o)
    });
    case("sum", vec![a.clone()], &|g, v| {
        let s = g.mul(v[0], v[0])?;
        g.sum(s)
    });
    case("mean", vec![a.clone()], &|g, v| {
        let s = g.mul(v[0], v[0])?;
        g.mean(s)
    });
    case("reshape", vec![a.clone()], &|g, v| {
        let o = g.reshape(v[0], &[2, 6])?;
        weighted_sum(g, o)
    });
    case("flatten", vec![x4.clone()], &|g, v| {
        let o = g.flatten(v[0])?;
        weighted_sum(g, o)
    });
    case("concat", vec![x4.clone(), uniform(&mut r, &[2, 1, 2, 2], -1.0, 1.0)], &|g, v| {
        let o = g.concat(&[v[0], v[1], v[0]], 1)?;
        weighted_sum(g, o)
    });
    case("gather", vec![x4.clone()], &|g, v| {
        let o = g.gather(v[0], vec![0, 5, 5, 11, 2, 7], &[3, 2])?;
        weighted_sum(g, o)
    });
    let img = uniform(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
    let w = uniform(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
    let bias = uniform(&mut r, &[4], -0.5, 0.5);
    case("conv2d", vec![img.clone(), w.clone(), bias], &|g, v| {
        let o = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        weighted_sum(g, o)
    });
    case("conv2d_nobias", vec![img.clone(), w], &|g, v| {
        let o = g.conv2d(v[0], v[1], None, 1, 0)?;
        weighted_sum(g, o)
    });
    let gamma = uniform(&mut r, &[3], 0.5, 1.5);
    let beta = uniform(&mut r, &[3], -0.5, 0.5);
    case("batch_norm_train", vec![x4.clone(), gamma.clone(), beta.clone()], &|g, v| {
        let (o, _) = g.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
        weighted_sum(g, o)
    });
    case("batch_norm_eval", vec![x4.clone(), gamma, beta], &|g, v| {
        let (o, _) = g.batch_norm(v[0], v[1], v[2], Some((&[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0])), 1e-5)?;
        weighted_sum(g, o)
    });
    case("avg_pool", vec![uniform(&mut r, &[2, 4, 6, 3], -1.0, 1.0)], &|g, v| {
        let o = g.avg_pool(v[0], 2, 2, 2)?;
        weighted_sum(g, o)
    });
    case("avg_pool_overlap", vec![uniform(&mut r, &[2, 7], -1.0, 1.0)], &|g, v| {
        let o = g.avg_pool(v[0], 3, 2, 1)?;
        weighted_sum(g, o)
    });
    let z = uniform(&mut r, &[4, 5], -2.0, 2.0);
    case("softmax", vec![z.clone()], &|g, v| {
        let o = g.softmax(v[0])?;
        weighted_sum(g, o)
    });
    case("log_softmax", vec![z.clone()], &|g, v| {
        let o = g.log_softmax(v[0])?;
        weighted_sum(g, o)
    });
    case("cross_entropy", vec![z.clone()], &|g, v| {
        let o = g.cross_entropy(v[0], &[0, 3, 4, 1])?;
        weighted_sum(g, o)
    });
    let z2 = uniform(&mut r, &[4, 5], -2.0, 2.0);
    case("kl_log", vec![z.clone(), z2], &|g, v| {
        let lp = g.log_softmax(v[0])?;
        let lq = g.log_softmax(v[1])?;
        let o = g.kl_log(lp, lq)?;
        weighted_sum(g, o)
    });
    // The normalization check is on the raw inputs, so perturbations are
    // taken on logits feeding softmax.
    case("kl_divergence", vec![z.clone(), uniform(&mut r, &[4, 5], -2.0, 2.0)], &|g, v| {
        let p = g.softmax(v[0])?;
        let q = g.softmax(v[1])?;
        let o = g.kl_divergence(p, q)?;
        weighted_sum(g, o)
    });
    case("pick", vec![z.clone()], &|g, v| {
        let o = g.pick(v[0], &[2, 0, 4, 4])?;
        weighted_sum(g, o)
    });
    let distinct = Tensor::from_fn(&[3, 5], |i| ((i * 7) % 15) as Real * 0.1);
    case("max_excluding", vec![distinct], &|g, v| {
        let o = g.max_excluding(v[0], &[1, 4, 0])?;
        weighted_sum(g, o)
    });

    let x = uniform(&mut r, &[3, 2, 5, 5], 0.0, 1.0);
    let w1 = uniform(&mut r, &[4, 2, 3, 3], -0.4, 0.4);
    let b1 = uniform(&mut r, &[4], -0.1, 0.1);
    let g1 = uniform(&mut r, &[4], 0.8, 1.2);
    let be1 = uniform(&mut r, &[4], -0.1, 0.1);
    let w2 = uniform(&mut r, &[3, 4, 3, 3], -0.4, 0.4);
    let fc = uniform(&mut r, &[12, 4], -0.5, 0.5);
    case("composite_net", vec![x, w1, b1, g1, be1, w2, fc], &|g, v| {
        let h = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let (h, _) = g.batch_norm(h, v[3], v[4], None, 1e-5)?;
        let h = g.relu(h)?;
        let h = g.conv2d(h, v[5], None, 2, 0)?;
        let h = g.relu(h)?;
        let h = g.flatten(h)?;
        let z = g.matmul(h, v[6])?;
        let ce = g.cross_entropy(z, &[1, 3, 0])?;
        g.mean(ce)
    });
    out
}

/// `z = flatten(x) W + b` with `W: d x C`.
pub struct LinearModel {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearModel {
    pub fn random(rng: &mut ChaCha8Rng, d: usize, classes: usize, scale: Real) -> Self {
        LinearModel {
            w: uniform(rng, &[d, classes], -scale, scale),
            b: uniform(rng, &[classes], -0.1, 0.1),
        }
    }
}

impl dhat_core::nn::Model for LinearModel {
    fn logits<'a>(&'a self, pass: &mut dhat_core::nn::Pass<'a>, x: Var) -> Result<Var> {
        let f = pass.graph.flatten(x)?;
        let w = pass.graph.constant_ref(&self.w);
        let b = pass.graph.constant_ref(&self.b);
        let z = pass.graph.matmul(f, w)?;
        pass.graph.add_bias(z, b)
    }
}

/// Small seeded convolutional dual-head network on `1 x size x size` inputs.
pub fn tiny_dual_head(classes: usize, size: usize, seed: u64) -> dhat_core::nn::DualHeadNetwork {
    use dhat_core::nn::{attach_merge, attach_second_head, build_network, ArchSpec, AttachPoint, HeadInit, Init};
    let spec = ArchSpec::smallconv(3, 1, classes).with_input(1, size);
    let mut init = Init::seeded(seed);
    let base = build_network(&spec, &mut init).expect("build");
    let net = attach_second_head(base, AttachPoint(1), &spec, HeadInit::Fresh, &mut init).expect("attach");
    attach_merge(net, &mut init).expect("merge")
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Largest `|a - b|` and whether every entry of `a` lies in `[0, 1]`.
pub fn linf_and_bounds(a: &Tensor, b: &Tensor) -> (Real, bool) {
    let d = a.max_abs_diff(b);
    (d, a.data().iter().all(|&v| (0.0..=1.0).contains(&v)))
}
