use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcil_core::numerics::{
    finite_difference_check, relative_error, AttentionGroups, Graph, Tensor, Var, DEFAULT_STEP,
};

pub const INSTANCES: usize = 100;
pub const TOL: f64 = 1e-4;

pub type Worst = Vec<(&'static str, f64)>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Builds `Σ wᵢ·outᵢ` so every output coordinate contributes, then compares the taped
/// gradient of each input with the central-difference oracle.
fn check<F>(inputs: &[Tensor], weights_seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |g: &mut Graph, vars: &[Var]| -> Var {
        let out = build(g, vars);
        let n = g.value(out).len();
        let mut wr = ChaCha8Rng::seed_from_u64(weights_seed);
        let w = Tensor::new(
            g.shape(out).to_vec(),
            (0..n).map(|_| wr.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = g.constant(w);
        let prod = g.mul(out, w).unwrap();
        g.sum(prod)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = eval(&mut g, &vars);
    g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = finite_difference_check(
            |probe| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let l = eval(&mut g, &vars);
                g.value(l).item()
            },
            x,
            DEFAULT_STEP,
        );
        worst = worst.max(relative_error(analytic.data(), numeric.data(), 1e-8));
    }
    worst
}

fn run<F>(out: &mut Worst, name: &'static str, mut instance: F)
where
    F: FnMut(&mut ChaCha8Rng) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ name.len() as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        worst = worst.max(instance(&mut rng));
    }
    out.push((name, worst));
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=8), rng.gen_range(1..=8))
}

pub fn elementwise_ops(out: &mut Worst) {
    run(out, "add", |rng| {
        let (r, c) = dims(rng);
        let a = random(rng, &[r, c], -2.0, 2.0);
        let b = random(rng, &[r, c], -2.0, 2.0);
        check(&[a, b], rng.gen(), |g, v| g.add(v[0], v[1]).unwrap())
    });
    run(out, "add broadcast", |rng| {
        let (r, c) = dims(rng);
        let a = random(rng, &[r, c], -2.0, 2.0);
        let b = random(rng, &[c], -2.0, 2.0);
        check(&[a, b], rng.gen(), |g, v| g.add(v[0], v[1]).unwrap())
    });
    run(out, "sub", |rng| {
        let (r, c) = dims(rng);
        let a = random(rng, &[r, c], -2.0, 2.0);
        let b = random(rng, &[1, c], -2.0, 2.0);
        check(&[a, b], rng.gen(), |g, v| g.sub(v[0], v[1]).unwrap())
    });
    run(out, "mul", |rng| {
        let (r, c) = dims(rng);
        let a = random(rng, &[r, c], -2.0, 2.0);
        let b = random(rng, &[c], -2.0, 2.0);
        check(&[a, b], rng.gen(), |g, v| g.mul(v[0], v[1]).unwrap())
    });
    run(out, "scalar gate mul", |rng| {
        let (r, c) = dims(rng);
        let a = random(rng, &[r, c], -2.0, 2.0);
        let s = random(rng, &[1], -2.0, 2.0);
        check(&[a, s], rng.gen(), |g, v| g.mul(v[0], v[1]).unwrap())
    });
    run(out, "div_floor", |rng| {
        let n = rng.gen_range(1..=8);
        let a = random(rng, &[n], -2.0, 2.0);
        let b = random(rng, &[n], 0.1, 2.0);
        check(&[a, b], rng.gen(), |g, v| g.div_floor(v[0], v[1], 1e-8).unwrap())
    });
    run(out, "scale/add_scalar", |rng| {
        let (r, c) = dims(rng);
        let a = random(rng, &[r, c], -2.0, 2.0);
        let k = rng.gen_range(-2.0..2.0);
        check(&[a], rng.gen(), move |g, v| {
            let s = g.scale(v[0], k);
            g.add_scalar(s, 0.7)
        })
    });
}

pub fn layout_and_linear_algebra(out: &mut Worst) {
    run(out, "matmul", |rng| {
        let (m, k) = dims(rng);
        let n = rng.gen_range(1..=8);
        let a = random(rng, &[m, k], -2.0, 2.0);
        let b = random(rng, &[k, n], -2.0, 2.0);
        check(&[a, b], rng.gen(), |g, v| g.matmul(v[0], v[1]).unwrap())
    });
    run(out, "transpose", |rng| {
        let (r, c) = dims(rng);
        let a = random(rng, &[r, c], -2.0, 2.0);
        check(&[a], rng.gen(), |g, v| g.transpose(v[0]).unwrap())
    });
    run(out, "reshape", |rng| {
        let (r, c) = dims(rng);
        let a = random(rng, &[r, c], -2.0, 2.0);
        check(&[a], rng.gen(), move |g, v| g.reshape(v[0], &[c * r]).unwrap())
    });
    run(out, "concat rows", |rng| {
        let (r, c) = dims(rng);
        let a = random(rng, &[r, c], -2.0, 2.0);
        let r2 = rng.gen_range(1..=8);
        let b = random(rng, &[r2, c], -2.0, 2.0);
        check(&[a, b], rng.gen(), |g, v| g.concat(&[v[0], v[1]], 0).unwrap())
    });
    run(out, "concat cols", |rng| {
        let (r, c) = dims(rng);
        let a = random(rng, &[r, c], -2.0, 2.0);
        let c2 = rng.gen_range(1..=8);
        let b = random(rng, &[r, c2], -2.0, 2.0);
        check(&[a, b], rng.gen(), |g, v| g.concat(&[v[1], v[0]], 1).unwrap())
    });
    run(out, "index_rows", |rng| {
        let (r, c) = dims(rng);
        let a = random(rng, &[r, c], -2.0, 2.0);
        let idx: Vec<usize> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0..r)).collect();
        check(&[a], rng.gen(), move |g, v| g.index_rows(v[0], &idx).unwrap())
    });
    run(out, "reductions", |rng| {
        let (r, c) = dims(rng);
        let a = random(rng, &[r, c], -2.0, 2.0);
        check(&[a], rng.gen(), |g, v| {
            let s = g.sum(v[0]);
            let m = g.mean(v[0]);
            let mr = g.mean_rows(v[0]).unwrap();
            let mr = g.sum(mr);
            let t = g.add(s, m).unwrap();
            g.add(t, mr).unwrap()
        })
    });
}

pub fn activations(out: &mut Worst) {
    run(out, "gelu", |rng| {
        let (r, c) = dims(rng);
        let a = random(rng, &[r, c], -2.0, 2.0);
        check(&[a], rng.gen(), |g, v| g.gelu(v[0]))
    });
    run(out, "softmax", |rng| {
        let (r, c) = dims(rng);
        let a = random(rng, &[r, c], -2.0, 2.0);
        check(&[a], rng.gen(), |g, v| g.softmax(v[0]))
    });
    run(out, "layer_norm", |rng| {
        let r = rng.gen_range(1..=8);
        let c = rng.gen_range(2..=8);
        let a = random(rng, &[r, c], -2.0, 2.0);
        check(&[a], rng.gen(), |g, v| g.layer_norm(v[0], 1e-5))
    });
}

pub fn grouped_attention(out: &mut Worst) {
    run(out, "attention", |rng| {
        let n = rng.gen_range(2..=8);
        let heads = rng.gen_range(1..=2);
        let d = heads * rng.gen_range(1..=4);
        let q = random(rng, &[n, d], -2.0, 2.0);
        let k = random(rng, &[n, d], -2.0, 2.0);
        let v = random(rng, &[n, d], -2.0, 2.0);
        // Two overlapping groups that together cover every token.
        let split = rng.gen_range(1..n);
        let groups = Rc::new(
            AttentionGroups::new(n, vec![(0..=split).collect(), std::iter::once(0).chain(split..n).collect()])
                .unwrap(),
        );
        let scale = 1.0 / ((d / heads) as f64).sqrt();
        check(&[q, k, v], rng.gen(), move |g, x| {
            g.attention(x[0], x[1], x[2], groups.clone(), heads, scale).unwrap()
        })
    });
}

pub fn losses_and_similarity(out: &mut Worst) {
    run(out, "cross_entropy", |rng| {
        let n = rng.gen_range(1..=8);
        let a = random(rng, &[n], -2.0, 2.0);
        let label = rng.gen_range(0..n);
        check(&[a], rng.gen(), move |g, v| g.cross_entropy(v[0], label).unwrap())
    });
    run(out, "kl_div", |rng| {
        let n = rng.gen_range(1..=8);
        let p = random(rng, &[n], -2.0, 2.0);
        let q = random(rng, &[n], -2.0, 2.0);
        check(&[p, q], rng.gen(), |g, v| g.kl_div(v[0], v[1]).unwrap())
    });
    run(out, "cosine", |rng| {
        let n = rng.gen_range(1..=8);
        let a = random(rng, &[n], -2.0, 2.0);
        let b = random(rng, &[n], -2.0, 2.0);
        check(&[a, b], rng.gen(), |g, v| g.cosine(v[0], v[1]).unwrap())
    });
}

pub fn composite_three_op_graph(out: &mut Worst) {
    run(out, "composite", |rng| {
        let (m, k) = dims(rng);
        let x = random(rng, &[m, k], -2.0, 2.0);
        let w = random(rng, &[k, 3], -2.0, 2.0);
        check(&[x, w], rng.gen(), |g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let a = g.gelu(h);
            g.softmax(a)
        })
    });
}

/// Worst relative error of every op family.
pub fn all() -> Worst {
    let mut out = Vec::new();
    for family in [elementwise_ops, layout_and_linear_algebra, activations, grouped_attention, losses_and_similarity, composite_three_op_graph] {
        family(&mut out);
    }
    out
}
