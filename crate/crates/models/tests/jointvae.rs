mod common;

use bihoi_models::jointvae::{jointvae_loss, JointExample, JointLatent, JointVae, JointVaeConfig};
use bihoi_models::train::joint_step;
use bihoi_nn::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> JointVaeConfig {
    JointVaeConfig { latent_dim: 4, hidden: 16, depth: 1, text_dim: 3, object_dim: 3, ..Default::default() }
}

fn example(n: usize, phase: f64) -> JointExample {
    JointExample {
        gamma: (0..n).map(|i| (i as f64 * 0.2 + phase).sin() * 0.5 + 0.5).collect(),
        object: vec![0.1, -0.2, 0.3 + phase],
        text: vec![0.5, phase, -0.1],
    }
}

#[test]
fn encode_and_decode_shapes() {
    let vae = JointVae::new(JointVaeConfig::default(), 0).unwrap();
    let ex = JointExample { gamma: vec![0.3; 37], object: vec![0.0; 64], text: vec![0.1; 64] };
    let lat = vae.encode(&ex.gamma, &ex.object, &ex.text).unwrap();
    assert_eq!(lat.mu.len(), 32);
    assert_eq!(lat.logvar.len(), 32);
    for n in [1, 37, 150] {
        assert_eq!(vae.decode(&lat.mu, &ex.object, &ex.text, n, (0.0, 1.0)).unwrap().gamma.len(), n);
    }
}

#[test]
fn out_of_range_lengths_and_dims_are_rejected() {
    let vae = JointVae::new(small(), 0).unwrap();
    let z = vec![0.0; 4];
    let o = vec![0.0; 3];
    assert_eq!(vae.decode(&z, &o, &o, 0, (0.0, 1.0)).unwrap_err().kind(), "InvalidLength");
    assert_eq!(vae.decode(&z, &o, &o, 151, (0.0, 1.0)).unwrap_err().kind(), "InvalidLength");
    assert!(vae.decode(&z[..3], &o, &o, 5, (0.0, 1.0)).is_err());
    assert!(vae.encode(&vec![0.0; 151], &o, &o).is_err());
}

#[test]
fn decoding_is_deterministic_and_clamped() {
    let vae = JointVae::new(small(), 3).unwrap();
    let ex = example(20, 0.0);
    let z = vec![4.0, -4.0, 3.0, -3.0];
    let a = vae.decode(&z, &ex.object, &ex.text, 20, (0.2, 0.4)).unwrap();
    let b = vae.decode(&z, &ex.object, &ex.text, 20, (0.2, 0.4)).unwrap();
    assert_eq!(a, b);
    assert!(a.gamma.iter().all(|g| (0.2..=0.4).contains(g)));
    let raw = vae.decode_raw(&z, &ex.object, &ex.text, 20).unwrap();
    for (c, r) in a.gamma.iter().zip(&raw) {
        assert_eq!(*c, r.clamp(0.2, 0.4));
    }
}

#[test]
fn loss_component_examples() {
    let n = 40;
    let gamma = vec![0.5; n];
    let hat = vec![0.6; n];
    let lat = JointLatent { mu: vec![0.0; 32], logvar: vec![0.0; 32] };
    let l = jointvae_loss(&gamma, &hat, &lat, 1.0, 1.0).unwrap();
    assert!((l.rec - 0.01 * n as f64).abs() < 1e-12);
    assert!((l.recon_nll - 0.005 * n as f64).abs() < 1e-12);
    assert_eq!(l.kl, 0.0);
    let lat = JointLatent { mu: vec![1.0; 32], logvar: vec![0.0; 32] };
    let l = jointvae_loss(&gamma, &gamma, &lat, 1.0, 1.0).unwrap();
    assert!((l.kl - 16.0).abs() < 1e-12);
    assert!(jointvae_loss(&gamma, &hat[..3], &lat, 1.0, 1.0).is_err());
}

#[test]
fn kl_is_nonnegative_and_zero_only_at_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let mu = Tensor::randn(&mut rng, 1, 8, 1.0).data().to_vec();
        let lv = Tensor::randn(&mut rng, 1, 8, 1.0).data().to_vec();
        let lat = JointLatent { mu, logvar: lv };
        let l = jointvae_loss(&[0.0], &[0.0], &lat, 1.0, 1.0).unwrap();
        assert!(l.kl > 0.0);
    }
}

#[test]
fn graph_loss_matches_scalar_loss() {
    let vae = JointVae::new(small(), 5).unwrap();
    let batch = vec![example(9, 0.0), example(5, 1.0)];
    let eps = Tensor::zeros(2, 4);
    let mut g = Graph::new();
    let vars = vae.loss_graph(&mut g, &batch, &eps).unwrap();
    let mut expect = [0.0; 4];
    for ex in &batch {
        let lat = vae.encode(&ex.gamma, &ex.object, &ex.text).unwrap();
        let hat = vae.decode_raw(&lat.mu, &ex.object, &ex.text, ex.gamma.len()).unwrap();
        let l = jointvae_loss(&ex.gamma, &hat, &lat, 1.0, 1.0).unwrap();
        for (e, v) in expect.iter_mut().zip([l.total, l.recon_nll, l.kl, l.rec]) {
            *e += v / 2.0;
        }
    }
    let got = [vars.total, vars.recon_nll, vars.kl, vars.rec].map(|v| g.value(v).item());
    for (a, b) in got.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut vae = JointVae::new(small(), 6).unwrap();
    let batch = vec![example(2, 0.3)];
    let eps = Tensor::new(1, 4, vec![0.3, -0.7, 1.1, 0.2]);
    let model = vae.clone();
    let loss = |st: &ParamStore| {
        let mut m = model.clone();
        m.store = st.clone();
        let mut g = Graph::new();
        let v = m.loss_graph(&mut g, &batch, &eps).unwrap();
        g.value(v.total).item()
    };
    let analytic = |st: &ParamStore| {
        let mut m = model.clone();
        m.store = st.clone();
        let mut g = Graph::new();
        let v = m.loss_graph(&mut g, &batch, &eps).unwrap();
        g.backward(v.total)
    };
    let err = common::param_grad_error(&mut vae.store, 20, 1e-5, 1e-6, loss, analytic);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn reparameterized_draws_have_posterior_moments() {
    let lat = JointLatent { mu: vec![0.5, -1.0], logvar: vec![(0.25f64).ln(), 0.0] };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = 20_000;
    let draws: Vec<Vec<f64>> = (0..k).map(|_| lat.sample(&mut rng)).collect();
    for d in 0..2 {
        let mean = draws.iter().map(|v| v[d]).sum::<f64>() / k as f64;
        let var = draws.iter().map(|v| (v[d] - mean).powi(2)).sum::<f64>() / k as f64;
        let sd = lat.logvar[d].exp().sqrt();
        assert!((mean - lat.mu[d]).abs() < 4.0 * sd / (k as f64).sqrt());
        assert!((var / sd.powi(2) - 1.0).abs() < 0.05);
    }
}

#[test]
fn optimizer_steps_reduce_the_loss() {
    let mut vae = JointVae::new(small(), 8).unwrap();
    let data = vec![example(12, 0.0), example(12, 2.0)];
    let mut adam = Adam::new(AdamConfig { lr: 3e-3, ..Default::default() }, &vae.store);
    let first = joint_step(&mut vae, &mut adam, &data, 0, 1, 0).unwrap().total;
    let mut last = first;
    for step in 1..200 {
        last = joint_step(&mut vae, &mut adam, &data, 0, 1, step).unwrap().total;
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}
