#![allow(dead_code)]

use bihoi_nn::{Gradients, Graph, ParamStore, Var};

/// Largest central-difference relative error over an evenly spaced subset of
/// at most `per_tensor` entries of every parameter tensor.
pub fn param_grad_error(
    store: &mut ParamStore,
    per_tensor: usize,
    h: f64,
    floor: f64,
    loss: impl Fn(&ParamStore) -> f64,
    analytic: impl Fn(&ParamStore) -> Gradients,
) -> f64 {
    let grads = analytic(store);
    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let n = store.get(id).len();
        let stride = (n / per_tensor.max(1)).max(1);
        let a = grads.param(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for k in (0..n).step_by(stride) {
            let orig = store.get(id).data()[k];
            store.get_mut(id).unwrap().data_mut()[k] = orig + h;
            let up = loss(store);
            store.get_mut(id).unwrap().data_mut()[k] = orig - h;
            let down = loss(store);
            store.get_mut(id).unwrap().data_mut()[k] = orig;
            let num = (up - down) / (2.0 * h);
            let err = (a[k] - num).abs() / a[k].abs().max(num.abs()).max(floor);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

pub fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item()
}
