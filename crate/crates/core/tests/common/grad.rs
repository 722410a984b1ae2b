//! Analytic gradients against central finite differences, in double
//! precision. Shared by the gradient tests and the acceptance run.

use trailerfuse::data::batch::make_batch;
use trailerfuse::gradcheck::{grad_check, grad_check_steps, GradCheckReport};
use trailerfuse::nn::layers::{
    EncoderLayer, EncoderShape, ForwardCtx, LayerNorm, LearnedVector, Linear, MultiHeadSelfAttention,
    PositionalTable,
};
use trailerfuse::nn::params::{BoundParams, ParameterStore};
use trailerfuse::{Architecture, GenreClassifier, Graph, Result, SeededRng, Tensor, Var};

pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;
/// Whole networks have parameters with gradients near 1e-8, where a small
/// step is dominated by rounding in the loss, and ReLU units close to their
/// kink, where a large step is biased. Each element takes the better step.
const NETWORK_STEPS: [f64; 2] = [1e-4, 1e-6];

fn randn(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Contracts `out` with a fixed random tensor so no gradient is trivially
/// zero by symmetry (a plain sum through layer norm would be).
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = SeededRng::derive(seed, &[99]);
    let r = randn(&mut rng, g.shape(out));
    let r = g.constant(r);
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

fn assert_ok(what: &str, seed: u64, r: GradCheckReport) {
    assert!(r.checked > 0, "{what}: nothing checked");
    assert!(
        r.max_rel_error < TOL,
        "{what} seed {seed}: max relative error {:.3e} at {:?}",
        r.max_rel_error,
        r.worst
    );
}

/// Key biases shift every attention score of a query by the same amount,
/// so softmax cancels them and their exact gradient is zero. Finite
/// differences only see rounding noise there, which the relative-error
/// metric cannot absorb; they are held constant during the check and
/// their analytic gradient is asserted to vanish instead.
fn is_key_bias(name: &str) -> bool {
    name.ends_with(".key.bias")
}

/// Binds every named tensor; key biases become constants, the rest take
/// the checker's leaves in order.
fn bind_named(g: &mut Graph<f64>, named: &[(String, Tensor<f64>)], vars: &[Var]) -> BoundParams {
    let mut it = vars.iter();
    BoundParams::from_pairs(named.iter().map(|(n, t)| {
        let v = if is_key_bias(n) {
            g.constant(t.clone())
        } else {
            *it.next().expect("one var per checked tensor")
        };
        (n.clone(), v)
    }))
}

fn check_named<F>(what: &str, seed: u64, steps: &[f64], named: Vec<(String, Tensor<f64>)>, f: F)
where
    F: Fn(&mut Graph<f64>, &BoundParams) -> Result<Var>,
{
    let checked: Vec<Tensor<f64>> = named
        .iter()
        .filter(|(n, _)| !is_key_bias(n))
        .map(|(_, t)| t.clone())
        .collect();
    let report = grad_check_steps(
        |g, vars| {
            let p = bind_named(g, &named, vars);
            f(g, &p)
        },
        &checked,
        steps,
    )
    .unwrap();
    assert_eq!(report.checked, checked.iter().map(Tensor::numel).sum::<usize>());
    let worst_name = report.worst.map(|(i, _)| {
        named.iter().filter(|(n, _)| !is_key_bias(n)).nth(i).map(|(n, _)| n.clone()).unwrap_or_default()
    });
    assert_ok(&format!("{what} (worst in {worst_name:?})"), seed, report);

    let mut g = Graph::new();
    let p = BoundParams::from_pairs(named.iter().map(|(n, t)| (n.clone(), g.parameter(t.clone()))));
    let loss = f(&mut g, &p).unwrap();
    let grads = g.backward(loss).unwrap();
    for (n, _) in named.iter().filter(|(n, _)| is_key_bias(n)) {
        let gk = grads.get(p.get(n).unwrap()).unwrap();
        let worst = gk.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-12, "{what} seed {seed}: {n} gradient {worst:e} should vanish");
    }
}

/// Checks every entry of `store` plus an input tensor named `x`.
fn check_layer<F>(what: &str, seed: u64, store: &ParameterStore<f64>, x: Tensor<f64>, f: F)
where
    F: Fn(&mut Graph<f64>, &BoundParams, Var) -> Result<Var>,
{
    let mut named: Vec<(String, Tensor<f64>)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    named.push(("x".into(), x));
    check_named(what, seed, &[EPS], named, |g, p| {
        let out = f(g, p, p.get("x")?)?;
        project(g, out, seed)
    });
}

fn check_op<F>(what: &str, seed: u64, inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let report = grad_check(
        |g, v| {
            let out = f(g, v)?;
            project(g, out, seed)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert_ok(what, seed, report);
}

fn random_mask(rng: &mut SeededRng, b: usize, t: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(b * t);
    for _ in 0..b {
        let valid = rng.range_inclusive(1, t);
        mask.extend((0..t).map(|i| i < valid));
    }
    mask
}

pub fn elementwise_and_structural_ops(seed: u64) {
    let mut rng = SeededRng::new(seed);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[4, 2]);
    let c = randn(&mut rng, &[3, 4]);
    let bias = randn(&mut rng, &[4]);
    check_op("matmul", seed, vec![a.clone(), b], |g, v| g.matmul(v[0], v[1]));
    check_op("add/mul", seed, vec![a.clone(), c.clone()], |g, v| {
        let s = g.add(v[0], v[1])?;
        g.mul(s, v[0])
    });
    check_op("add_broadcast", seed, vec![a.clone(), bias], |g, v| g.add_broadcast(v[0], v[1]));
    check_op("affine/sigmoid/log", seed, vec![a.clone()], |g, v| {
        let s = g.sigmoid(v[0]);
        let s = g.affine(s, 0.5, 0.25);
        Ok(g.log(s))
    });
    check_op("relu", seed, vec![a.clone()], |g, v| Ok(g.relu(v[0])));
    check_op("softmax_rows", seed, vec![a.clone()], |g, v| Ok(g.softmax_rows(v[0])));
    check_op("concat/narrow", seed, vec![a.clone(), c.clone()], |g, v| {
        let cat = g.concat(&[v[0], v[1]], 1)?;
        let mid = g.narrow(cat, 1, 2, 5)?;
        let rows = g.concat(&[mid, mid], 0)?;
        g.reshape(rows, &[2, 3, 5])
    });
    check_op("expand", seed, vec![a.clone()], |g, v| Ok(g.expand(v[0], 3)));
    check_op("mean", seed, vec![a.clone()], |g, v| Ok(g.mean(v[0])));
    let x3 = randn(&mut rng, &[3, 5, 4]);
    let mask = random_mask(&mut rng, 3, 5);
    check_op("masked_mean", seed, vec![x3], |g, v| g.masked_mean(v[0], &mask));
    check_op("dropout", seed, vec![a.clone()], |g, v| {
        let mut r = SeededRng::new(seed);
        g.dropout(v[0], 0.3, true, &mut r)
    });
}

pub fn weighted_bce_gradient(seed: u64) {
    let mut rng = SeededRng::new(seed);
    let logits = randn(&mut rng, &[3, 21]).map(|z| 3.0 * z);
    let targets = Tensor::new(vec![3, 21], (0..63).map(|_| rng.bernoulli(0.2) as u8 as f64).collect()).unwrap();
    for w in [0.25, 1.0] {
        let report = grad_check(|g, v| g.weighted_bce(v[0], &targets, w), std::slice::from_ref(&logits), EPS).unwrap();
        assert_ok("weighted_bce", seed, report);
    }
}

pub fn linear_and_layer_norm(seed: u64) {
    let mut rng = SeededRng::new(seed);
    let mut store = ParameterStore::new();
    let lin = Linear::register(&mut store, "lin", 5, 3, &mut rng).unwrap();
    check_layer("linear", seed, &store, randn(&mut rng, &[2, 4, 5]), |g, p, x| lin.forward(g, p, x));

    let mut store = ParameterStore::new();
    let ln = LayerNorm::register(&mut store, "ln", 6, 1e-5).unwrap();
    for v in store.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>() {
        let t = randn(&mut rng, &[6]);
        *store.get_mut(&v).unwrap() = t;
    }
    check_layer("layer_norm", seed, &store, randn(&mut rng, &[3, 6]), |g, p, x| ln.forward(g, p, x));
}

pub fn embeddings(seed: u64) {
    let mut rng = SeededRng::new(seed);
    let mut store = ParameterStore::new();
    let pos = PositionalTable::register(&mut store, "pos", 6, 8, &mut rng).unwrap();
    let cls = LearnedVector::register(&mut store, "cls", 8, &mut rng).unwrap();
    check_layer("positional+cls", seed, &store, randn(&mut rng, &[3, 4, 8]), |g, p, x| {
        let x = pos.add_to(g, p, x)?;
        let c = cls.as_sequence(g, p, 3)?;
        let c = g.reshape(c, &[3, 1, 8])?;
        g.concat(&[c, x], 1)
    });
}

pub fn attention_core_and_module(seed: u64) {
    let mut rng = SeededRng::new(seed);
    let (b, t, d) = (3, 6, 8);
    let mask = random_mask(&mut rng, b, t);
    let q = randn(&mut rng, &[b, t, d]);
    let k = randn(&mut rng, &[b, t, d]);
    let v = randn(&mut rng, &[b, t, d]);
    check_op("attention core", seed, vec![q, k, v], |g, x| g.attention(x[0], x[1], x[2], &mask, 2));

    let mut store = ParameterStore::new();
    let mha = MultiHeadSelfAttention::register(&mut store, "mha", d, 2, &mut rng).unwrap();
    check_layer("multi-head attention", seed, &store, randn(&mut rng, &[b, t, d]), |g, p, x| {
        mha.forward(g, p, x, &mask)
    });
}

pub fn encoder_layer_both_norm_orders(seed: u64) {
    for norm_first in [false, true] {
        let mut rng = SeededRng::new(seed);
        let shape = EncoderShape {
            dim: 8,
            heads: 2,
            ffn_dim: 32,
            dropout: 0.1,
            norm_first,
            ln_eps: 1e-5,
        };
        let mut store = ParameterStore::new();
        let layer = EncoderLayer::register(&mut store, "enc", shape, &mut rng).unwrap();
        let mask = random_mask(&mut rng, 2, 4);
        let what = if norm_first { "encoder (pre-norm)" } else { "encoder (post-norm)" };
        check_layer(what, seed, &store, randn(&mut rng, &[2, 4, 8]), |g, p, x| {
            let mut r = SeededRng::new(seed);
            layer.forward(g, p, x, &mask, &mut ForwardCtx::train(&mut r))
        });
    }
}

pub fn check_architecture(arch: Architecture, seed: u64) {
    let cfg = super::toy_config(arch);
    let model = GenreClassifier::<f64>::new(cfg.clone(), seed).unwrap();
    let records = super::random_records(seed, 3, &cfg.modalities, 0);
    let refs: Vec<_> = records.iter().collect();
    let batch = make_batch(&refs, &cfg.modalities).unwrap();
    let labels = batch.labels.cast::<f64>();
    let named: Vec<(String, Tensor<f64>)> = model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    check_named(arch.name(), seed, &NETWORK_STEPS, named, |g, p| {
        let mut r = SeededRng::new(seed);
        let logits = model.forward(g, p, &batch, &mut ForwardCtx::train(&mut r))?;
        g.weighted_bce(logits, &labels, cfg.pos_weight)
    });
}
