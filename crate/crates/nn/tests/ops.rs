use std::sync::Arc;

use bihoi_nn::{Checkpoint, Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference check of `sum(W ⊙ f(inputs))` against the tape.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut r = rng(99);
    let eval = |ins: &[Tensor], weights: Option<&Tensor>| -> (f64, Tensor) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars);
        let shape = g.shape(out);
        let w = weights.cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1));
        let wv = g.input(w);
        let p = g.mul(out, wv);
        let s = g.sum(p);
        (g.value(s).item(), g.value(out).clone())
    };
    let (_, out) = eval(&inputs, None);
    let weights = Tensor::randn(&mut r, out.rows(), out.cols(), 1.0);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let wv = g.input(weights.clone());
    let p = g.mul(out, wv);
    let loss = g.sum(p);
    let grads = g.backward(loss);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.of(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].rows(), inputs[i].cols()));
        for k in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= h;
            let num = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

fn rand_t(seed: u64, r: usize, c: usize) -> Tensor {
    Tensor::randn(&mut rng(seed), r, c, 1.0)
}

const TOL: f64 = 1e-6;

#[test]
fn grad_matmul_and_elementwise() {
    let a = rand_t(1, 3, 4);
    let b = rand_t(2, 4, 2);
    assert!(check(vec![a.clone(), b], |g, v| g.matmul(v[0], v[1])) < TOL);
    let c = rand_t(3, 3, 4);
    assert!(check(vec![a.clone(), c.clone()], |g, v| { let s = g.add(v[0], v[1]); let d = g.sub(s, v[1]); g.mul(d, v[1]) }) < TOL);
    let row = rand_t(4, 1, 4);
    assert!(check(vec![a.clone(), row.clone()], |g, v| g.add_row(v[0], v[1])) < TOL);
    assert!(check(vec![a.clone(), row], |g, v| g.mul_row(v[0], v[1])) < TOL);
    let col = rand_t(5, 3, 1);
    assert!(check(vec![a.clone(), col], |g, v| g.mul_col(v[0], v[1])) < TOL);
    assert!(check(vec![a], |g, v| { let s = g.scale(v[0], -2.5); g.offset(s, 0.3) }) < TOL);
}

#[test]
fn grad_unary() {
    let a = rand_t(6, 4, 3);
    assert!(check(vec![a.clone()], |g, v| g.exp(v[0])) < TOL);
    assert!(check(vec![a.clone()], |g, v| g.tanh(v[0])) < TOL);
    assert!(check(vec![a.clone()], |g, v| g.sigmoid(v[0])) < TOL);
    assert!(check(vec![a.clone()], |g, v| g.silu(v[0])) < TOL);
    assert!(check(vec![a.clone()], |g, v| g.softplus(v[0])) < TOL);
    assert!(check(vec![a.clone()], |g, v| g.square(v[0])) < TOL);
    let pos = a.map(|x| x * x + 0.5);
    assert!(check(vec![pos], |g, v| g.sqrt(v[0])) < TOL);
}

#[test]
fn grad_reductions_and_reshaping() {
    let a = rand_t(7, 4, 5);
    assert!(check(vec![a.clone()], |g, v| g.sum(v[0])) < TOL);
    assert!(check(vec![a.clone()], |g, v| g.mean(v[0])) < TOL);
    assert!(check(vec![a.clone()], |g, v| g.sum_cols(v[0])) < TOL);
    assert!(check(vec![a.clone()], |g, v| g.sum_rows(v[0])) < TOL);
    assert!(check(vec![a.clone()], |g, v| g.slice_cols(v[0], 1, 3)) < TOL);
    assert!(check(vec![a.clone()], |g, v| g.slice_rows(v[0], 2, 2)) < TOL);
    assert!(check(vec![a.clone()], |g, v| g.transpose(v[0])) < TOL);
    assert!(check(vec![a.clone()], |g, v| g.reshape(v[0], 2, 10)) < TOL);
    let b = rand_t(8, 4, 2);
    assert!(check(vec![a.clone(), b.clone()], |g, v| g.concat_cols(&[v[1], v[0], v[1]])) < TOL);
    let c = rand_t(9, 1, 5);
    assert!(check(vec![a.clone(), c], |g, v| g.concat_rows(&[v[0], v[1]])) < TOL);
    let idx = Arc::new(vec![Some(3), None, Some(0), Some(3), Some(1)]);
    assert!(check(vec![a.clone()], |g, v| g.gather_rows(v[0], idx.clone())) < TOL);
    assert!(check(vec![a.clone()], |g, v| g.shift_rows(v[0], 2)) < TOL);
    assert!(check(vec![a], |g, v| g.reverse_rows(v[0])) < TOL);
}

#[test]
fn grad_normalizers() {
    let a = rand_t(10, 3, 6);
    assert!(check(vec![a.clone()], |g, v| g.layer_norm(v[0], 1e-5)) < 1e-5);
    assert!(check(vec![a.clone()], |g, v| g.softmax_rows(v[0])) < TOL);
    assert!(check(vec![a], |g, v| g.normalize_rows(v[0])) < TOL);
}

#[test]
fn grad_geometry_ops() {
    let a = rand_t(11, 4, 3);
    let b = rand_t(12, 4, 3);
    assert!(check(vec![a.clone(), b.clone()], |g, v| g.cross_rows(v[0], v[1])) < TOL);
    let m = rand_t(13, 4, 9);
    let n = rand_t(14, 4, 9);
    assert!(check(vec![m.clone(), n], |g, v| g.mat3_mul(v[0], v[1])) < TOL);
    assert!(check(vec![m, a], |g, v| g.mat3_vec(v[0], v[1])) < TOL);
    let mut r = rng(15);
    let targets: Vec<Vec<[f64; 3]>> = (0..2)
        .map(|_| (0..7).map(|_| [r.random(), r.random(), r.random()]).collect())
        .collect();
    let targets = Arc::new(targets);
    let pts = rand_t(16, 2, 12);
    assert!(check(vec![pts], |g, v| g.nearest_distance(v[0], targets.clone())) < TOL);
}

#[test]
fn grad_selective_scan() {
    let (l, d, s) = (6, 3, 4);
    let x = rand_t(17, l, d);
    let a = Tensor::from_fn(l, d, |i, j| 0.3 + 0.1 * ((i + 2 * j) % 5) as f64);
    let b = rand_t(18, l, s);
    let c = rand_t(19, l, s);
    assert!(check(vec![x, a, b, c], |g, v| g.selective_scan(v[0], v[1], v[2], v[3])) < TOL);
}

#[test]
fn mat3_ops_match_column_major_products() {
    let m = Tensor::new(1, 9, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0]);
    let x = Tensor::new(1, 3, vec![1.0, -1.0, 2.0]);
    let mut g = Graph::new();
    let (mv, xv) = (g.input(m), g.input(x));
    let y = g.mat3_vec(mv, xv);
    // columns (1,2,3), (4,5,6), (7,8,10)
    assert_eq!(g.value(y).data(), &[1.0 - 4.0 + 14.0, 2.0 - 5.0 + 16.0, 3.0 - 6.0 + 20.0]);
}

#[test]
fn frozen_params_are_constants() {
    let mut store = ParamStore::new();
    let w = store.randn("w", 2, 2, 1.0, &mut rng(1));
    store.freeze();
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let s = g.sum(wv);
    let grads = g.backward(s);
    assert!(grads.param(w).is_none());
    assert!(store.get_mut(w).is_err());
    let mut adam = Adam::new(AdamConfig::default(), &store);
    assert!(adam.step(&mut store, &grads).is_err());
}

#[test]
fn adam_minimizes_quadratic() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row_vector(vec![3.0, -2.0]));
    let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &store);
    for _ in 0..500 {
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let sq = g.square(wv);
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        adam.step(&mut store, &grads).unwrap();
    }
    assert!(store.get(w).sum_squares() < 1e-3);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut store = ParamStore::new();
    let w = store.randn("layer.w", 3, 2, 1.0, &mut rng(2));
    store.zeros("layer.b", 1, 2);
    let mut adam = Adam::new(AdamConfig::default(), &store);
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let loss = g.sum(wv);
    adam.step(&mut store, &g.backward(loss)).unwrap();
    let mut ck = Checkpoint {
        kind: "test".into(),
        config: "{\"a\":1}".into(),
        step: 7,
        params: store,
        extras: Default::default(),
        adam: Some(adam),
    };
    ck.extras.insert("mean".into(), Tensor::row_vector(vec![1.5, -0.25]));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}
